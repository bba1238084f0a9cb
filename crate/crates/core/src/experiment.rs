//! Run configuration files, dataset ingestion, the trained-model cache and the
//! end-to-end evaluation protocol shared by the command-line tool and the tests.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use chrono::{SecondsFormat, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::attribution::{calibrate_on_belongings, CalibrationProfile};
use crate::error::{Error, Result};
use crate::evaluation::{
    compare_initializations, evaluate_separation, median, robustness_sweep, AugmentationSpec,
    ConfusionCounts, RobustnessRow, Separation, StoppingComparison,
};
use crate::inversion::{InitMode, InversionConfig, StopRule};
use crate::store;
use crate::tensor::{ImageTensor, LatentTensor, Shape};
use crate::zoo::data::{load_png_folder, synthetic_images};
use crate::zoo::{
    train_autoencoder, Autoencoder, AutoencoderKind, Checkpoint, ConvSpec, TrainingConfig,
    CHECKPOINT_FORMAT,
};

/// Environment variable that overrides the cache directory for datasets and trained models.
pub const CACHE_DIR_ENV: &str = "LATENT_ORIGIN_CACHE_DIR";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Synthetic,
    Folder,
}

/// Fractions of the dataset used for training, calibration and evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitFractions {
    pub train: f64,
    pub calibration: f64,
    pub evaluation: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            calibration: 0.1,
            evaluation: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub source: DatasetSource,
    /// PNG directory for the folder source.
    #[serde(default)]
    pub path: Option<PathBuf>,
    /// Number of generated images for the synthetic source.
    #[serde(default = "default_count")]
    pub count: usize,
    /// Generator seed, and the shuffle seed before splitting.
    #[serde(default)]
    pub seed: u64,
    pub image_shape: Shape,
    #[serde(default)]
    pub split: SplitFractions,
}

fn default_count() -> usize {
    2500
}

impl DatasetSpec {
    pub fn synthetic(image_shape: Shape, count: usize, seed: u64) -> Self {
        Self {
            source: DatasetSource::Synthetic,
            path: None,
            count,
            seed,
            image_shape,
            split: SplitFractions::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.split;
        let parts = [s.train, s.calibration, s.evaluation];
        if parts.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::invalid("split fractions must lie in [0, 1]"));
        }
        if (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "split fractions must sum to 1, got {}",
                parts.iter().sum::<f64>()
            )));
        }
        match self.source {
            DatasetSource::Synthetic if self.count == 0 => {
                Err(Error::invalid("synthetic dataset needs count >= 1"))
            }
            DatasetSource::Folder if self.path.is_none() => {
                Err(Error::invalid("folder dataset needs a `path`"))
            }
            _ => Ok(()),
        }
    }

    /// Generates or reads the images, shuffles them with `seed` and splits them.
    pub fn load(&self) -> Result<Dataset> {
        self.validate()?;
        let mut images = match self.source {
            DatasetSource::Synthetic => synthetic_images(self.image_shape, self.count, self.seed)?,
            DatasetSource::Folder => {
                load_png_folder(self.path.as_ref().expect("validated"), self.image_shape)?
            }
        };
        images.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
        let n = images.len();
        let n_train = (self.split.train * n as f64).round() as usize;
        let n_cal = ((self.split.calibration * n as f64).round() as usize).min(n - n_train);
        let evaluation = images.split_off(n_train + n_cal);
        let calibration = images.split_off(n_train);
        Ok(Dataset {
            train: images,
            calibration,
            evaluation,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub train: Vec<ImageTensor>,
    pub calibration: Vec<ImageTensor>,
    pub evaluation: Vec<ImageTensor>,
}

/// Architecture section of a run config. Unset sizes take the kind's defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub kind: AutoencoderKind,
    #[serde(default)]
    pub latent_channels: Option<usize>,
    #[serde(default)]
    pub hidden: Option<[usize; 2]>,
    #[serde(default)]
    pub codebook_size: Option<usize>,
}

impl ModelSpec {
    pub fn conv_spec(&self, image_shape: Shape) -> ConvSpec {
        let mut spec = match self.kind {
            AutoencoderKind::Continuous => ConvSpec::vae(image_shape),
            AutoencoderKind::Quantized => ConvSpec::vqvae(image_shape),
        };
        if let Some(c) = self.latent_channels {
            spec.latent_channels = c;
        }
        if let Some(h) = self.hidden {
            spec.hidden = h;
        }
        if self.codebook_size.is_some() {
            spec.codebook_size = self.codebook_size;
        }
        spec
    }
}

/// `train` command configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainRunConfig {
    /// Overrides `training.seed` when set.
    #[serde(default)]
    pub seed: Option<u64>,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    #[serde(default)]
    pub training: TrainingConfig,
}

impl TrainRunConfig {
    pub fn effective_training(&self) -> TrainingConfig {
        let mut t = self.training.clone();
        if let Some(s) = self.seed {
            t.seed = s;
        }
        t
    }
}

/// Reads a TOML run config. Relative dataset paths resolve against the file's directory.
pub fn load_config<T: DeserializeOwned + HasDataset>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg: T = toml::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let ds = cfg.dataset_mut();
    if let (Some(p), Some(base)) = (ds.path.as_mut(), path.parent()) {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    }
    Ok(cfg)
}

pub trait HasDataset {
    fn dataset_mut(&mut self) -> &mut DatasetSpec;
}

impl HasDataset for TrainRunConfig {
    fn dataset_mut(&mut self) -> &mut DatasetSpec {
        &mut self.dataset
    }
}

impl HasDataset for EvaluateConfig {
    fn dataset_mut(&mut self) -> &mut DatasetSpec {
        &mut self.dataset
    }
}

/// Directory of trained checkpoints keyed by a hash of the training inputs.
#[derive(Clone, Debug)]
pub struct ModelCache {
    dir: PathBuf,
}

impl ModelCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    /// `$LATENT_ORIGIN_CACHE_DIR`, or `latent-origin-cache` under the system temp dir.
    pub fn from_env() -> Self {
        match std::env::var_os(CACHE_DIR_ENV) {
            Some(d) if !d.is_empty() => Self::new(d),
            _ => Self::new(std::env::temp_dir().join("latent-origin-cache")),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn key(images: &[ImageTensor], spec: &ConvSpec, cfg: &TrainingConfig) -> String {
        let head = serde_json::json!({
            "format": CHECKPOINT_FORMAT,
            "spec": spec,
            "training": cfg,
        });
        let mut bytes = head.to_string().into_bytes();
        for x in images {
            for v in x.data() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        store::sha256_hex(&bytes)
    }

    /// Returns the cached checkpoint for these inputs, training and storing it on a miss.
    /// The flag is true on a cache hit.
    pub fn train_or_load(
        &self,
        images: &[ImageTensor],
        spec: &ConvSpec,
        cfg: &TrainingConfig,
    ) -> Result<(Checkpoint, bool)> {
        let path = self.dir.join(format!("{}.json", Self::key(images, spec, cfg)));
        if path.exists() {
            match Checkpoint::load(&path) {
                Ok(ck) => return Ok((ck, true)),
                Err(e) => log::warn!("ignoring unreadable cache entry: {e}"),
            }
        }
        let t = Instant::now();
        let (model, report) = train_autoencoder(images, spec, cfg)?;
        let ck = Checkpoint::new(model, Some(cfg.clone()), Some(report))
            .with_train_seconds(t.elapsed().as_secs_f64());
        ck.save(&path)?;
        Ok((ck, false))
    }
}

/// Where the two models of an evaluation come from: checkpoint files, or training on
/// the dataset's train split with the given seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSources {
    pub inspected_seed: u64,
    pub other_seed: u64,
    pub inspected_checkpoint: Option<PathBuf>,
    pub other_checkpoint: Option<PathBuf>,
}

impl Default for ModelSources {
    fn default() -> Self {
        Self {
            inspected_seed: 1,
            other_seed: 2,
            inspected_checkpoint: None,
            other_checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationSection {
    pub n: usize,
    pub alpha: f64,
}

impl Default for CalibrationSection {
    fn default() -> Self {
        Self { n: 100, alpha: 0.05 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionSection {
    pub init: InitMode,
    pub learning_rate: f64,
    /// Defaults to 100 for encoder init and 400 for random init.
    pub steps: Option<usize>,
    pub stop: StopRule,
    pub patience: usize,
}

impl Default for InversionSection {
    fn default() -> Self {
        Self {
            init: InitMode::Encoder,
            learning_rate: InversionConfig::DEFAULT_LR,
            steps: None,
            stop: StopRule::Fixed,
            patience: InversionConfig::DEFAULT_PATIENCE,
        }
    }
}

impl InversionSection {
    pub fn config(&self, seed: u64) -> InversionConfig {
        let mut c = InversionConfig::for_mode(self.init)
            .with_learning_rate(self.learning_rate)
            .with_stop_rule(self.stop)
            .with_seed(seed);
        c.patience = self.patience;
        if let Some(s) = self.steps {
            c.max_steps = s;
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    /// Belongings of the inspected model, drawn from the evaluation split.
    pub belonging: usize,
    /// Outputs of the other model on the same source images.
    pub other: usize,
    /// Also run a random-init pipeline with the same step budget.
    pub random_baseline: bool,
    /// Also run the adaptive stop rule next to the fixed one.
    pub stopping: bool,
    /// Belongings used for the initialization comparison; 0 skips it.
    pub efficiency_samples: usize,
    pub rel_tol: f64,
    /// Round every evaluated image to 8 bits, as if it had been saved as PNG.
    pub export_8bit: bool,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self {
            belonging: 200,
            other: 200,
            random_baseline: true,
            stopping: true,
            efficiency_samples: 100,
            rel_tol: 0.05,
            export_8bit: true,
        }
    }
}

/// `evaluate` and `robustness` command configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluateConfig {
    #[serde(default)]
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub model: ModelSpec,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub models: ModelSources,
    #[serde(default)]
    pub calibration: CalibrationSection,
    #[serde(default)]
    pub inversion: InversionSection,
    #[serde(default)]
    pub evaluation: EvaluationSection,
    #[serde(default)]
    pub robustness: Vec<AugmentationSpec>,
}

impl EvaluateConfig {
    /// Synthetic two-model setup with every section at its default.
    pub fn synthetic(kind: AutoencoderKind, image_shape: Shape) -> Self {
        Self {
            seed: 0,
            dataset: DatasetSpec::synthetic(image_shape, default_count(), 0),
            model: ModelSpec {
                kind,
                latent_channels: None,
                hidden: None,
                codebook_size: None,
            },
            training: TrainingConfig::default(),
            models: ModelSources::default(),
            calibration: CalibrationSection::default(),
            inversion: InversionSection::default(),
            evaluation: EvaluationSection::default(),
            robustness: Vec::new(),
        }
    }

    pub fn inversion_config(&self) -> InversionConfig {
        self.inversion.config(self.seed)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.validate()?;
        self.training.validate()?;
        self.inversion_config().validate()?;
        for spec in &self.robustness {
            spec.validate()?;
        }
        let e = &self.evaluation;
        if e.belonging == 0 || e.other == 0 {
            return Err(Error::invalid("evaluation needs belonging >= 1 and other >= 1"));
        }
        if e.rel_tol.is_nan() || e.rel_tol <= 0.0 {
            return Err(Error::invalid("rel_tol must be positive"));
        }
        Ok(())
    }
}

/// A trained or loaded model with its held-out reconstruction error, when known.
#[derive(Clone, Debug)]
pub struct PreparedModel {
    pub model: Autoencoder,
    pub holdout_mse: Option<f64>,
    pub from_cache: bool,
    /// Training wall time recorded in the checkpoint, also on cache hits.
    pub train_seconds: Option<f64>,
}

/// Models and image sets of an evaluation, before any inversion runs.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub inspected: PreparedModel,
    pub other: PreparedModel,
    pub calibration_belongings: Vec<ImageTensor>,
    /// Belongings of the inspected model paired with their generating latents.
    pub belonging: Vec<(ImageTensor, LatentTensor)>,
    pub other_images: Vec<ImageTensor>,
    pub timings: BTreeMap<String, f64>,
}

impl Prepared {
    pub fn belonging_images(&self) -> Vec<ImageTensor> {
        self.belonging.iter().map(|(x, _)| x.clone()).collect()
    }
}

fn obtain_model(
    checkpoint: Option<&PathBuf>,
    seed: u64,
    data: &Dataset,
    spec: &ConvSpec,
    training: &TrainingConfig,
    cache: &ModelCache,
) -> Result<PreparedModel> {
    let (ck, from_cache) = match checkpoint {
        Some(p) => (Checkpoint::load(p)?, true),
        None => {
            let cfg = TrainingConfig {
                seed,
                ..training.clone()
            };
            cache.train_or_load(&data.train, spec, &cfg)?
        }
    };
    Ok(PreparedModel {
        holdout_mse: ck.report.as_ref().and_then(|r| r.holdout_mse),
        train_seconds: ck.train_seconds,
        model: ck.model,
        from_cache,
    })
}

fn take<'a>(pool: &'a [ImageTensor], n: usize, what: &str) -> Result<&'a [ImageTensor]> {
    pool.get(..n).ok_or_else(|| {
        Error::invalid(format!(
            "{what} needs {n} images but the split holds {}",
            pool.len()
        ))
    })
}

/// Loads the dataset, obtains both models and builds the image sets: calibration
/// belongings from the calibration split, and belongings and other-model outputs from
/// the same evaluation-split source images.
pub fn prepare(cfg: &EvaluateConfig, cache: &ModelCache) -> Result<Prepared> {
    cfg.validate()?;
    let mut timings = BTreeMap::new();
    let t = Instant::now();
    let data = cfg.dataset.load()?;
    let spec = cfg.model.conv_spec(cfg.dataset.image_shape);
    let m = &cfg.models;
    let inspected = obtain_model(
        m.inspected_checkpoint.as_ref(),
        m.inspected_seed,
        &data,
        &spec,
        &cfg.training,
        cache,
    )?;
    let other = obtain_model(
        m.other_checkpoint.as_ref(),
        m.other_seed,
        &data,
        &spec,
        &cfg.training,
        cache,
    )?;
    if inspected.model.model_id == other.model.model_id {
        log::warn!("inspected and other model share id {}", other.model.model_id);
    }
    timings.insert("models".into(), t.elapsed().as_secs_f64());

    let a = &inspected.model;
    let export = |x: ImageTensor| {
        if cfg.evaluation.export_8bit {
            x.quantized_8bit()
        } else {
            x
        }
    };
    let calibration_belongings = take(&data.calibration, cfg.calibration.n, "calibration")?
        .iter()
        .map(|x| a.make_belonging(x).map(export))
        .collect::<Result<_>>()?;
    let belonging = take(&data.evaluation, cfg.evaluation.belonging, "evaluation")?
        .iter()
        .map(|x| {
            let z = a.generation_latent(x)?;
            Ok((export(a.decode(&z)?), z))
        })
        .collect::<Result<_>>()?;
    let other_images = take(&data.evaluation, cfg.evaluation.other, "evaluation")?
        .iter()
        .map(|x| other.model.make_belonging(x).map(export))
        .collect::<Result<_>>()?;
    Ok(Prepared {
        inspected,
        other,
        calibration_belongings,
        belonging,
        other_images,
        timings,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub model_id: String,
    pub kind: AutoencoderKind,
    pub holdout_mse: Option<f64>,
    pub train_seconds: Option<f64>,
}

impl From<&PreparedModel> for ModelSummary {
    fn from(p: &PreparedModel) -> Self {
        Self {
            model_id: p.model.model_id.clone(),
            kind: p.model.kind,
            holdout_mse: p.holdout_mse,
            train_seconds: p.train_seconds,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummaryRow {
    pub n: usize,
    pub alpha: f64,
    pub mu: f64,
    pub sigma: f64,
    pub threshold: f64,
}

impl From<&CalibrationProfile> for CalibrationSummaryRow {
    fn from(p: &CalibrationProfile) -> Self {
        Self {
            n: p.n,
            alpha: p.alpha,
            mu: p.mu,
            sigma: p.sigma,
            threshold: p.threshold,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationSummary {
    pub accuracy: f64,
    pub auroc: f64,
    /// Fraction of known belongings labelled belonging.
    pub acceptance_rate: f64,
    pub counts: ConfusionCounts,
    pub mean_steps: f64,
    pub errors: usize,
    pub calibration: CalibrationSummaryRow,
}

impl SeparationSummary {
    fn new(s: &Separation, p: &CalibrationProfile) -> Self {
        Self {
            accuracy: s.accuracy,
            auroc: s.auroc,
            acceptance_rate: s.counts.true_positive_rate(),
            counts: s.counts,
            mean_steps: s.mean_steps,
            errors: s.errors,
            calibration: p.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EfficiencySummary {
    pub samples: usize,
    pub rel_tol: f64,
    pub encoder_steps: usize,
    pub random_steps: usize,
    pub median_encoder_convergence: f64,
    pub median_random_convergence: f64,
    pub fraction_encoder_closer: f64,
    pub fraction_encoder_lower_initial_loss: f64,
    pub median_encoder_init_distance: f64,
    pub median_random_init_distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub inspected_model: ModelSummary,
    pub other_model: ModelSummary,
    pub inversion: InversionConfig,
    pub separation: SeparationSummary,
    pub random_baseline: Option<SeparationSummary>,
    pub stopping: Option<StoppingComparison>,
    pub efficiency: Option<EfficiencySummary>,
    pub robustness: Vec<RobustnessRow>,
}

#[derive(Clone, Debug)]
pub struct EvaluationOutcome {
    pub report: EvaluationReport,
    pub profile: CalibrationProfile,
    pub separation: Separation,
    pub timings: BTreeMap<String, f64>,
}

fn timed<T>(timings: &mut BTreeMap<String, f64>, phase: &str, f: impl FnOnce() -> T) -> T {
    let t = Instant::now();
    let out = f();
    timings.insert(phase.to_string(), t.elapsed().as_secs_f64());
    out
}

/// Calibrates the inspected model with `inv` and attributes both image sets.
pub fn separation_run(
    prep: &Prepared,
    alpha: f64,
    inv: &InversionConfig,
    seed: u64,
) -> Result<(CalibrationProfile, Separation)> {
    let a = &prep.inspected.model;
    let profile = calibrate_on_belongings(a, &prep.calibration_belongings, alpha, inv, seed)?;
    if profile.sigma == 0.0 {
        log::warn!("calibration losses have zero spread; threshold equals their mean");
    }
    let sep = evaluate_separation(&profile, a, &prep.belonging_images(), &prep.other_images)?;
    Ok((profile, sep))
}

/// The full protocol: separation, optional random-init baseline at the same step budget,
/// optional stop-rule comparison, optional initialization comparison and the
/// robustness sweep.
pub fn run_evaluation(cfg: &EvaluateConfig, cache: &ModelCache) -> Result<EvaluationOutcome> {
    let prep = prepare(cfg, cache)?;
    evaluate_prepared(cfg, &prep)
}

pub fn evaluate_prepared(cfg: &EvaluateConfig, prep: &Prepared) -> Result<EvaluationOutcome> {
    let mut timings = prep.timings.clone();
    let inv = cfg.inversion_config();
    let alpha = cfg.calibration.alpha;
    let (profile, separation) =
        timed(&mut timings, "separation", || separation_run(prep, alpha, &inv, cfg.seed))?;

    let random_baseline = if cfg.evaluation.random_baseline && inv.init_mode == InitMode::Encoder {
        let rinv = InversionConfig {
            init_mode: InitMode::Random,
            ..inv.clone()
        };
        let (p, s) = timed(&mut timings, "random_baseline", || {
            separation_run(prep, alpha, &rinv, cfg.seed)
        })?;
        Some(SeparationSummary::new(&s, &p))
    } else {
        None
    };

    let stopping = if cfg.evaluation.stopping {
        let flipped = inv.clone().with_stop_rule(match inv.stop_rule {
            StopRule::Fixed => StopRule::Adaptive,
            StopRule::Adaptive => StopRule::Fixed,
        });
        let (_, s2) = timed(&mut timings, "stopping", || {
            separation_run(prep, alpha, &flipped, cfg.seed)
        })?;
        let (sf, sa) = match inv.stop_rule {
            StopRule::Fixed => (&separation, &s2),
            StopRule::Adaptive => (&s2, &separation),
        };
        Some(StoppingComparison {
            acc_fixed: sf.accuracy,
            acc_adaptive: sa.accuracy,
            mean_steps_fixed: sf.mean_steps,
            mean_steps_adaptive: sa.mean_steps,
        })
    } else {
        None
    };

    let efficiency = match cfg.evaluation.efficiency_samples {
        0 => None,
        k => {
            let samples = prep
                .belonging
                .get(..k)
                .ok_or_else(|| Error::invalid("efficiency_samples exceeds the belonging set"))?;
            let enc = InversionConfig::encoder()
                .with_learning_rate(inv.learning_rate)
                .with_seed(cfg.seed);
            let rnd = InversionConfig::random()
                .with_learning_rate(inv.learning_rate)
                .with_seed(cfg.seed);
            let ic = timed(&mut timings, "efficiency", || {
                compare_initializations(
                    &prep.inspected.model,
                    samples,
                    &enc,
                    &rnd,
                    cfg.evaluation.rel_tol,
                )
            })?;
            Some(EfficiencySummary {
                samples: k,
                rel_tol: cfg.evaluation.rel_tol,
                encoder_steps: enc.max_steps,
                random_steps: rnd.max_steps,
                median_encoder_convergence: ic.median_encoder_convergence(),
                median_random_convergence: ic.median_random_convergence(),
                fraction_encoder_closer: ic.fraction_encoder_closer(),
                fraction_encoder_lower_initial_loss: ic.fraction_encoder_lower_initial_loss(),
                median_encoder_init_distance: median(ic.encoder_init_distance.clone()),
                median_random_init_distance: median(ic.random_init_distance.clone()),
            })
        }
    };

    let robustness = timed(&mut timings, "robustness", || {
        robustness_sweep(
            &profile,
            &prep.inspected.model,
            &prep.belonging_images(),
            &prep.other_images,
            &cfg.robustness,
            cfg.seed,
        )
    });

    Ok(EvaluationOutcome {
        report: EvaluationReport {
            inspected_model: (&prep.inspected).into(),
            other_model: (&prep.other).into(),
            inversion: inv,
            separation: SeparationSummary::new(&separation, &profile),
            random_baseline,
            stopping,
            efficiency,
            robustness,
        },
        profile,
        separation,
        timings,
    })
}

/// Record of one command invocation and everything it wrote.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_snapshot: serde_json::Value,
    pub seed: u64,
    pub artifact_paths: Vec<PathBuf>,
    /// SHA-256 over the artifacts' bytes, in `artifact_paths` order.
    pub content_hash: String,
    pub timings: BTreeMap<String, f64>,
    pub version: String,
    pub created_at: String,
}

impl RunManifest {
    pub fn new(command: &str, config: &impl Serialize, seed: u64) -> Result<Self> {
        Ok(Self {
            command: command.to_string(),
            config_snapshot: serde_json::to_value(config)
                .map_err(|e| Error::invalid(format!("config snapshot: {e}")))?,
            seed,
            artifact_paths: Vec::new(),
            content_hash: String::new(),
            timings: BTreeMap::new(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            created_at: Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true),
        })
    }

    pub fn record(&mut self, path: impl Into<PathBuf>) {
        self.artifact_paths.push(path.into());
    }

    pub fn time(&mut self, phase: &str, seconds: f64) {
        self.timings.insert(phase.to_string(), seconds);
    }

    /// Hashes the recorded artifacts and writes the manifest to `path`.
    pub fn write(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let mut bytes = Vec::new();
        for p in &self.artifact_paths {
            bytes.extend(std::fs::read(p).map_err(|e| Error::io(p, e))?);
        }
        self.content_hash = store::sha256_hex(&bytes);
        store::save_json(path, self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const EVAL_TOML: &str = r#"
seed = 3

[dataset]
source = "synthetic"
count = 40
seed = 9
image_shape = [3, 8, 8]
split = { train = 0.5, calibration = 0.25, evaluation = 0.25 }

[model]
kind = "continuous"
hidden = [4, 4]

[training]
epochs = 1
batch_size = 8

[calibration]
n = 10

[inversion]
steps = 5

[evaluation]
belonging = 6
other = 6
efficiency_samples = 3

[[robustness]]
kind = "gaussian_noise"
parameter = 0.0
"#;

    fn write_config(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("run.toml");
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn splits_partition_the_dataset() {
        let spec = DatasetSpec::synthetic([1, 4, 4], 11, 2);
        let d = spec.load().unwrap();
        assert_eq!((d.train.len(), d.calibration.len(), d.evaluation.len()), (9, 1, 1));
        assert_eq!(spec.load().unwrap(), d);

        let mut bad = spec.clone();
        bad.split.evaluation = 0.3;
        assert!(bad.load().is_err());
    }

    #[test]
    fn config_defaults_and_line_diagnostics() {
        let dir = tempfile::tempdir().unwrap();
        let cfg: EvaluateConfig = load_config(write_config(dir.path(), EVAL_TOML)).unwrap();
        assert_eq!(cfg.calibration.alpha, 0.05);
        assert_eq!(cfg.training.learning_rate, TrainingConfig::default().learning_rate);
        assert_eq!(cfg.inversion_config().max_steps, 5);
        assert_eq!(cfg.inversion_config().seed, 3);
        assert_eq!(cfg.models.other_seed, 2);

        let broken = EVAL_TOML.replace("n = 10", "n = ten");
        let err = load_config::<EvaluateConfig>(write_config(dir.path(), &broken)).unwrap_err();
        assert!(err.to_string().contains("line 20"), "{err}");

        let typo = EVAL_TOML.replace("belonging = 6", "belongings = 6");
        assert!(load_config::<EvaluateConfig>(write_config(dir.path(), &typo)).is_err());
    }

    #[test]
    fn relative_folder_path_resolves_against_config() {
        let dir = tempfile::tempdir().unwrap();
        let text = "[dataset]\nsource = \"folder\"\npath = \"imgs\"\nimage_shape = [3, 8, 8]\n\n[model]\nkind = \"quantized\"\n";
        let cfg: TrainRunConfig = load_config(write_config(dir.path(), text)).unwrap();
        assert_eq!(cfg.dataset.path.unwrap(), dir.path().join("imgs"));
        assert_eq!(cfg.model.conv_spec([3, 8, 8]).codebook_size, Some(128));
    }

    #[test]
    fn cache_hits_reuse_the_trained_model() {
        let dir = tempfile::tempdir().unwrap();
        let cache = ModelCache::new(dir.path());
        let images = synthetic_images([3, 8, 8], 6, 0).unwrap();
        let spec = ModelSpec {
            kind: AutoencoderKind::Continuous,
            latent_channels: Some(2),
            hidden: Some([2, 2]),
            codebook_size: None,
        }
        .conv_spec([3, 8, 8]);
        let cfg = TrainingConfig {
            epochs: 1,
            batch_size: 3,
            ..TrainingConfig::default()
        };
        let (a, hit_a) = cache.train_or_load(&images, &spec, &cfg).unwrap();
        let (b, hit_b) = cache.train_or_load(&images, &spec, &cfg).unwrap();
        assert!(!hit_a && hit_b);
        assert_eq!(a, b);
        let other = TrainingConfig { seed: 1, ..cfg };
        assert_ne!(ModelCache::key(&images, &spec, &other), ModelCache::key(&images, &spec, &cfg));
    }

    #[test]
    fn small_evaluation_runs_end_to_end() {
        let dir = tempfile::tempdir().unwrap();
        let cfg: EvaluateConfig = load_config(write_config(dir.path(), EVAL_TOML)).unwrap();
        let out = run_evaluation(&cfg, &ModelCache::new(dir.path().join("cache"))).unwrap();
        let r = &out.report;
        assert_eq!(r.separation.counts.total(), 12);
        assert!(r.random_baseline.is_some() && r.stopping.is_some());
        let eff = r.efficiency.as_ref().unwrap();
        assert_eq!((eff.encoder_steps, eff.random_steps), (100, 400));
        assert_eq!(r.robustness.len(), 1);
        assert_eq!(r.robustness[0].acc, r.separation.accuracy);
        assert_eq!(out.profile.n, 10);
    }

    #[test]
    fn manifest_hashes_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.txt");
        std::fs::write(&a, b"abc").unwrap();
        let mut m = RunManifest::new("train", &serde_json::json!({"k": 1}), 7).unwrap();
        m.record(&a);
        m.write(dir.path().join("manifest.json")).unwrap();
        assert_eq!(
            m.content_hash,
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
        let back: RunManifest = store::load_json(dir.path().join("manifest.json")).unwrap();
        assert_eq!(back, m);
    }
}
