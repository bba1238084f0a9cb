use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use latent_origin::attribution::{
    attribute_image, calibrate_model, CalibrationOptions, CalibrationProfile,
};
use latent_origin::evaluation::{default_robustness_specs, write_robustness_csv};
use latent_origin::experiment::{
    evaluate_prepared, load_config, prepare, separation_run, EvaluateConfig, ModelCache,
    RunManifest, TrainRunConfig,
};
use latent_origin::inversion::InversionConfig;
use latent_origin::store;
use latent_origin::tensor::ImageTensor;
use latent_origin::zoo::{train_autoencoder, BelongingSource, Checkpoint};
use latent_origin::Error;
use rayon::prelude::*;

use crate::{AttributeArgs, CalibrateArgs, Cli, Command, EvaluateArgs, InversionArgs, TrainArgs};

pub enum Status {
    Done,
    Partial(usize),
}

pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 1,
        error: e.into(),
    }
}

/// Bad inputs are usage errors; everything else failed while running.
fn classify(e: Error) -> Failure {
    let code = match e {
        Error::InvalidInput(_) | Error::Format { .. } | Error::Io { .. } => 1,
        _ => 2,
    };
    Failure {
        code,
        error: e.into(),
    }
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure {
        code: 2,
        error: e.into(),
    }
}

pub fn run(cli: &Cli) -> Result<Status, Failure> {
    let cache = cli
        .cache_dir
        .clone()
        .map(ModelCache::new)
        .unwrap_or_else(ModelCache::from_env);
    match &cli.command {
        Command::Train(a) => train(a),
        Command::Calibrate(a) => calibrate(a),
        Command::Attribute(a) => attribute(a),
        Command::Evaluate(a) => evaluate(a, &cache),
        Command::Robustness(a) => robustness(a, &cache),
    }
}

fn create_out(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)
        .with_context(|| format!("cannot create output directory {}", dir.display()))
        .map_err(usage)
}

fn train(a: &TrainArgs) -> Result<Status, Failure> {
    let mut cfg: TrainRunConfig = load_config(&a.config).map_err(classify)?;
    if a.seed.is_some() {
        cfg.seed = a.seed;
    }
    let training = cfg.effective_training();
    training.validate().map_err(classify)?;
    create_out(&a.out)?;
    let mut manifest = RunManifest::new("train", &cfg, training.seed).map_err(classify)?;

    let t = Instant::now();
    let data = cfg.dataset.load().map_err(classify)?;
    manifest.time("data", t.elapsed().as_secs_f64());

    let t = Instant::now();
    let spec = cfg.model.conv_spec(cfg.dataset.image_shape);
    let (model, report) = train_autoencoder(&data.train, &spec, &training).map_err(classify)?;
    manifest.time("train", t.elapsed().as_secs_f64());
    if !report.target_met {
        log::warn!("held-out MSE did not reach the configured target");
    }

    let ck_path = a.out.join("checkpoint.json");
    let ck = Checkpoint::new(model, Some(training), Some(report))
        .with_train_seconds(manifest.timings["train"]);
    ck.save(&ck_path).map_err(classify)?;
    manifest.record(&ck_path);
    manifest.write(a.out.join("manifest.json")).map_err(classify)?;
    println!(
        "model={} holdout_mse={} hash={}",
        ck.model.model_id,
        ck.report
            .as_ref()
            .and_then(|r| r.holdout_mse)
            .map_or("n/a".to_string(), |m| format!("{m:e}")),
        ck.content_hash
    );
    Ok(Status::Done)
}

fn apply_inversion(base: InversionConfig, a: &InversionArgs) -> InversionConfig {
    let mut c = match a.init {
        Some(m) => InversionConfig {
            init_mode: m.into(),
            max_steps: InversionConfig::for_mode(m.into()).max_steps,
            ..base
        },
        None => base,
    };
    if let Some(s) = a.steps {
        c.max_steps = s;
    }
    if let Some(lr) = a.lr {
        c.learning_rate = lr;
    }
    if let Some(s) = a.stop {
        c.stop_rule = s.into();
    }
    c
}

fn calibrate(a: &CalibrateArgs) -> Result<Status, Failure> {
    let ck = Checkpoint::load(&a.model).map_err(classify)?;
    let inv = apply_inversion(InversionConfig::encoder().with_seed(a.seed), &a.inversion);
    inv.validate().map_err(classify)?;
    let opts = CalibrationOptions {
        n: a.n,
        alpha: a.alpha,
        seed: a.seed,
        source: if a.prior {
            BelongingSource::Prior
        } else {
            BelongingSource::Reconstruction
        },
        export_8bit: !a.no_8bit,
    };
    create_out(&a.out)?;
    let mut manifest = RunManifest::new(
        "calibrate",
        &serde_json::json!({ "model": a.model, "options": opts, "inversion": inv }),
        a.seed,
    )
    .map_err(classify)?;

    let t = Instant::now();
    let profile = calibrate_model(&ck.model, &opts, &inv).map_err(classify)?;
    manifest.time("calibrate", t.elapsed().as_secs_f64());
    if profile.sigma == 0.0 {
        eprintln!("warning: calibration losses have zero spread; threshold equals their mean");
    }
    let path = a.out.join("profile.json");
    profile.save(&path).map_err(classify)?;
    manifest.record(&path);
    manifest.write(a.out.join("manifest.json")).map_err(classify)?;
    println!(
        "model={} n={} mu={:e} sigma={:e} threshold={:e}",
        profile.model_id, profile.n, profile.mu, profile.sigma, profile.threshold
    );
    Ok(Status::Done)
}

/// Expands directories to their PNG files, sorted by name.
fn expand_images(inputs: &[PathBuf]) -> Result<Vec<PathBuf>, Failure> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                .with_context(|| format!("cannot read {}", p.display()))
                .map_err(usage)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    f.extension()
                        .is_some_and(|x| x.eq_ignore_ascii_case("png"))
                })
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    if out.is_empty() {
        return Err(usage(anyhow!("no images given")));
    }
    Ok(out)
}

fn attribute(a: &AttributeArgs) -> Result<Status, Failure> {
    let profile = CalibrationProfile::load(&a.profile).map_err(classify)?;
    let ck = Checkpoint::load(&a.model).map_err(classify)?;
    if profile.model_id != ck.model.model_id {
        return Err(usage(anyhow!(
            "profile was calibrated for `{}` but the checkpoint is `{}`",
            profile.model_id,
            ck.model.model_id
        )));
    }
    let paths = expand_images(&a.images)?;
    create_out(&a.out)?;
    let mut manifest = RunManifest::new("attribute", &a.images, profile.seed).map_err(classify)?;

    let t = Instant::now();
    let results: Vec<_> = paths
        .par_iter()
        .map(|p| {
            ImageTensor::load(p)
                .and_then(|x| attribute_image(&profile, &ck.model, &x))
        })
        .collect();
    manifest.time("attribute", t.elapsed().as_secs_f64());

    let csv_path = a.out.join("verdicts.csv");
    let mut failed = 0;
    let mut rows = String::from("path,label,cost,threshold,steps\n");
    for (p, r) in paths.iter().zip(&results) {
        match r {
            Ok(v) => {
                println!("{} cost={:e} threshold={:e}", v.label, v.cost, v.threshold);
                rows.push_str(&format!(
                    "{},{},{:e},{:e},{}\n",
                    p.display(),
                    v.label,
                    v.cost,
                    v.threshold,
                    v.steps_run
                ));
            }
            Err(e) => {
                failed += 1;
                eprintln!("error: {}: {e}", p.display());
                rows.push_str(&format!("{},error,,,\n", p.display()));
            }
        }
    }
    store::write_atomic(&csv_path, rows.as_bytes()).map_err(classify)?;
    manifest.record(&csv_path);
    manifest.write(a.out.join("manifest.json")).map_err(classify)?;
    Ok(if failed == 0 {
        Status::Done
    } else {
        Status::Partial(failed)
    })
}

fn evaluate_config(a: &EvaluateArgs) -> Result<EvaluateConfig, Failure> {
    let mut cfg: EvaluateConfig = load_config(&a.config).map_err(classify)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(alpha) = a.alpha {
        cfg.calibration.alpha = alpha;
    }
    if let Some(n) = a.n {
        cfg.calibration.n = n;
    }
    let i = &a.inversion;
    if let Some(m) = i.init {
        cfg.inversion.init = m.into();
    }
    if i.steps.is_some() {
        cfg.inversion.steps = i.steps;
    }
    if let Some(lr) = i.lr {
        cfg.inversion.learning_rate = lr;
    }
    if let Some(s) = i.stop {
        cfg.inversion.stop = s.into();
    }
    cfg.validate().map_err(classify)?;
    Ok(cfg)
}

fn write_csv(
    path: &Path,
    manifest: &mut RunManifest,
    f: impl FnOnce(&mut BufWriter<File>) -> std::io::Result<()>,
) -> Result<(), Failure> {
    let file = File::create(path)
        .with_context(|| format!("cannot create {}", path.display()))
        .map_err(runtime)?;
    let mut w = BufWriter::new(file);
    f(&mut w)
        .and_then(|_| w.flush())
        .with_context(|| format!("cannot write {}", path.display()))
        .map_err(runtime)?;
    manifest.record(path);
    Ok(())
}

fn evaluate(a: &EvaluateArgs, cache: &ModelCache) -> Result<Status, Failure> {
    let cfg = evaluate_config(a)?;
    let out = a.out.clone().unwrap_or_else(|| PathBuf::from("out/evaluate"));
    create_out(&out)?;
    let mut manifest = RunManifest::new("evaluate", &cfg, cfg.seed).map_err(classify)?;

    let prep = prepare(&cfg, cache).map_err(classify)?;
    let outcome = evaluate_prepared(&cfg, &prep).map_err(classify)?;
    for (k, v) in &outcome.timings {
        manifest.time(k, *v);
    }

    let report_path = out.join("report.json");
    store::save_json(&report_path, &outcome.report).map_err(classify)?;
    manifest.record(&report_path);
    let profile_path = out.join("profile.json");
    outcome.profile.save(&profile_path).map_err(classify)?;
    manifest.record(&profile_path);

    write_csv(&out.join("verdicts.csv"), &mut manifest, |w| {
        writeln!(w, "set,index,label,cost,threshold,steps")?;
        let sets = [
            ("belonging", &outcome.separation.belonging_verdicts),
            ("other", &outcome.separation.other_verdicts),
        ];
        for (set, verdicts) in sets {
            for (i, v) in verdicts.iter().enumerate() {
                writeln!(
                    w,
                    "{set},{i},{},{:e},{:e},{}",
                    v.label, v.cost, v.threshold, v.steps_run
                )?;
            }
        }
        Ok(())
    })?;
    if !outcome.report.robustness.is_empty() {
        write_csv(&out.join("robustness.csv"), &mut manifest, |w| {
            write_robustness_csv(w, &outcome.report.robustness)
        })?;
    }
    manifest.write(out.join("manifest.json")).map_err(classify)?;

    let r = &outcome.report;
    println!(
        "accuracy={:.4} auroc={:.4} acceptance={:.4} threshold={:e}",
        r.separation.accuracy,
        r.separation.auroc,
        r.separation.acceptance_rate,
        r.separation.calibration.threshold
    );
    if let Some(b) = &r.random_baseline {
        println!("random_init accuracy={:.4} auroc={:.4}", b.accuracy, b.auroc);
    }
    if let Some(s) = &r.stopping {
        println!(
            "stopping fixed={:.4} ({:.1} steps) adaptive={:.4} ({:.1} steps)",
            s.acc_fixed, s.mean_steps_fixed, s.acc_adaptive, s.mean_steps_adaptive
        );
    }
    if let Some(e) = &r.efficiency {
        println!(
            "efficiency median_convergence encoder={} random={} encoder_closer={:.3}",
            e.median_encoder_convergence, e.median_random_convergence, e.fraction_encoder_closer
        );
    }
    let errors = r.separation.errors;
    Ok(if errors == 0 {
        Status::Done
    } else {
        Status::Partial(errors)
    })
}

fn robustness(a: &EvaluateArgs, cache: &ModelCache) -> Result<Status, Failure> {
    let mut cfg = evaluate_config(a)?;
    if cfg.robustness.is_empty() {
        cfg.robustness = default_robustness_specs();
    }
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("out/robustness"));
    create_out(&out)?;
    let mut manifest = RunManifest::new("robustness", &cfg, cfg.seed).map_err(classify)?;

    let prep = prepare(&cfg, cache).map_err(classify)?;
    let t = Instant::now();
    let (profile, base) =
        separation_run(&prep, cfg.calibration.alpha, &cfg.inversion_config(), cfg.seed)
            .map_err(classify)?;
    manifest.time("separation", t.elapsed().as_secs_f64());

    let t = Instant::now();
    let rows = latent_origin::evaluation::robustness_sweep(
        &profile,
        &prep.inspected.model,
        &prep.belonging_images(),
        &prep.other_images,
        &cfg.robustness,
        cfg.seed,
    );
    manifest.time("sweep", t.elapsed().as_secs_f64());
    write_csv(&out.join("robustness.csv"), &mut manifest, |w| {
        write_robustness_csv(w, &rows)
    })?;
    manifest.write(out.join("manifest.json")).map_err(classify)?;

    println!("unperturbed accuracy={:.4}", base.accuracy);
    for r in &rows {
        println!("{} {} accuracy={:.4} ssim={:.4}", r.augmentation, r.parameter, r.acc, r.ssim);
    }
    let failed = rows.iter().filter(|r| r.acc.is_nan()).count();
    Ok(if failed == 0 {
        Status::Done
    } else {
        Status::Partial(failed)
    })
}
