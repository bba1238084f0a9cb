//! Measurement harness: detection accuracy and AUROC, robustness to post-processing,
//! stopping-rule and initialization comparisons.

mod augment;
mod metrics;
mod quality;

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use augment::{augment, AugmentationKind, AugmentationSpec};
pub use metrics::{auroc, confusion, ConfusionCounts};
pub use quality::{quality_metrics, ssim, QualityMetrics};

use crate::attribution::{batch_attribute, CalibrationProfile, Label, Verdict};
use crate::error::{Error, Result};
use crate::inversion::{convergence_step, invert_latent_with_truth, InversionConfig};
use crate::tensor::{ImageTensor, LatentTensor};
use crate::zoo::Autoencoder;

/// Outcome of attributing a known-belonging and a known-other image set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Separation {
    pub counts: ConfusionCounts,
    pub accuracy: f64,
    pub auroc: f64,
    pub belonging_verdicts: Vec<Verdict>,
    pub other_verdicts: Vec<Verdict>,
    pub mean_steps: f64,
    /// Images whose attribution failed; they are excluded from every statistic.
    pub errors: usize,
}

impl Separation {
    pub fn belonging_costs(&self) -> Vec<f64> {
        self.belonging_verdicts.iter().map(|v| v.cost).collect()
    }

    pub fn other_costs(&self) -> Vec<f64> {
        self.other_verdicts.iter().map(|v| v.cost).collect()
    }
}

pub fn evaluate_separation(
    profile: &CalibrationProfile,
    model: &Autoencoder,
    belonging: &[ImageTensor],
    other: &[ImageTensor],
) -> Result<Separation> {
    if belonging.is_empty() || other.is_empty() {
        return Err(Error::invalid("separation needs both image sets"));
    }
    let mut errors = 0;
    let mut keep = |vs: Vec<Result<Verdict>>| -> Vec<Verdict> {
        vs.into_iter()
            .filter_map(|v| match v {
                Ok(v) => Some(v),
                Err(e) => {
                    log::warn!("attribution failed: {e}");
                    errors += 1;
                    None
                }
            })
            .collect()
    };
    let bv = keep(batch_attribute(profile, model, belonging));
    let ov = keep(batch_attribute(profile, model, other));
    separation_from_verdicts(bv, ov, errors)
}

pub fn separation_from_verdicts(
    belonging_verdicts: Vec<Verdict>,
    other_verdicts: Vec<Verdict>,
    errors: usize,
) -> Result<Separation> {
    let labels = |v: &[Verdict]| v.iter().map(|v| v.label).collect::<Vec<Label>>();
    let counts = confusion(&labels(&belonging_verdicts), &labels(&other_verdicts))?;
    let costs = |v: &[Verdict]| v.iter().map(|v| v.cost).collect::<Vec<f64>>();
    let auroc = auroc(&costs(&belonging_verdicts), &costs(&other_verdicts))?;
    let all = belonging_verdicts.iter().chain(&other_verdicts);
    let mean_steps = all.clone().map(|v| v.steps_run as f64).sum::<f64>() / all.count() as f64;
    Ok(Separation {
        accuracy: counts.accuracy(),
        counts,
        auroc,
        belonging_verdicts,
        other_verdicts,
        mean_steps,
        errors,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub augmentation: String,
    pub parameter: f64,
    pub acc: f64,
    pub ssim: f64,
    pub psnr: f64,
    pub l1: f64,
    pub l2: f64,
    pub errors: usize,
}

fn image_seed(seed: u64, set: u64, i: usize) -> u64 {
    seed ^ (set << 32) ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// For each spec: perturb both sets, attribute, and average image-quality metrics
/// between originals and perturbed images. A failing cell is reported with `NaN`
/// statistics and the sweep carries on.
pub fn robustness_sweep(
    profile: &CalibrationProfile,
    model: &Autoencoder,
    belonging: &[ImageTensor],
    other: &[ImageTensor],
    specs: &[AugmentationSpec],
    seed: u64,
) -> Vec<RobustnessRow> {
    specs
        .iter()
        .map(|spec| {
            robustness_cell(profile, model, belonging, other, spec, seed).unwrap_or_else(|e| {
                log::warn!("robustness cell {spec:?} failed: {e}");
                RobustnessRow {
                    augmentation: spec.kind.name().to_string(),
                    parameter: spec.parameter,
                    acc: f64::NAN,
                    ssim: f64::NAN,
                    psnr: f64::NAN,
                    l1: f64::NAN,
                    l2: f64::NAN,
                    errors: belonging.len() + other.len(),
                }
            })
        })
        .collect()
}

fn robustness_cell(
    profile: &CalibrationProfile,
    model: &Autoencoder,
    belonging: &[ImageTensor],
    other: &[ImageTensor],
    spec: &AugmentationSpec,
    seed: u64,
) -> Result<RobustnessRow> {
    let perturb = |set: &[ImageTensor], tag: u64| -> Result<Vec<ImageTensor>> {
        set.par_iter()
            .enumerate()
            .map(|(i, x)| augment(x, spec, image_seed(seed, tag, i)))
            .collect()
    };
    let pb = perturb(belonging, 1)?;
    let po = perturb(other, 2)?;

    let quality: Vec<QualityMetrics> = belonging
        .iter()
        .zip(&pb)
        .chain(other.iter().zip(&po))
        .map(|(a, b)| quality_metrics(a, b))
        .collect::<Result<_>>()?;
    let mean = |f: fn(&QualityMetrics) -> f64| {
        quality.iter().map(f).sum::<f64>() / quality.len() as f64
    };
    let sep = evaluate_separation(profile, model, &pb, &po)?;
    Ok(RobustnessRow {
        augmentation: spec.kind.name().to_string(),
        parameter: spec.parameter,
        acc: sep.accuracy,
        ssim: mean(|q| q.ssim),
        psnr: mean(|q| q.psnr),
        l1: mean(|q| q.l1),
        l2: mean(|q| q.l2),
        errors: sep.errors,
    })
}

/// The standard sweep: saturation, contrast, noise, JPEG, brightness and blur grids,
/// plus two central crops.
pub fn default_robustness_specs() -> Vec<AugmentationSpec> {
    use AugmentationKind::*;
    let grid: [(AugmentationKind, &[f64]); 7] = [
        (Saturation, &[1.25, 1.5, 1.75, 2.0, 2.25, 2.5]),
        (Contrast, &[1.1, 1.15, 1.25, 1.5]),
        (GaussianNoise, &[0.01, 0.02, 0.03, 0.04, 0.05]),
        (Jpeg, &[95.0, 90.0, 80.0, 70.0, 60.0, 50.0]),
        (Brightness, &[1.25, 1.35, 1.5]),
        (GaussianBlur, &[1.0, 2.0, 3.0]),
        (Crop, &[0.9, 0.8]),
    ];
    grid.iter()
        .flat_map(|(kind, ps)| ps.iter().map(move |&parameter| AugmentationSpec { kind: *kind, parameter }))
        .collect()
}

/// `augmentation,parameter,acc,ssim,psnr,l1,l2`.
pub fn write_robustness_csv(mut w: impl Write, rows: &[RobustnessRow]) -> std::io::Result<()> {
    writeln!(w, "augmentation,parameter,acc,ssim,psnr,l1,l2")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.augmentation, r.parameter, r.acc, r.ssim, r.psnr, r.l1, r.l2
        )?;
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoppingComparison {
    pub acc_fixed: f64,
    pub acc_adaptive: f64,
    pub mean_steps_fixed: f64,
    pub mean_steps_adaptive: f64,
}

/// Runs the same image sets under a fixed-step and an adaptive-stop profile. Each
/// profile should be calibrated with its own stop rule.
pub fn compare_stopping(
    model: &Autoencoder,
    profile_fixed: &CalibrationProfile,
    profile_adaptive: &CalibrationProfile,
    belonging: &[ImageTensor],
    other: &[ImageTensor],
) -> Result<StoppingComparison> {
    let f = evaluate_separation(profile_fixed, model, belonging, other)?;
    let a = evaluate_separation(profile_adaptive, model, belonging, other)?;
    Ok(StoppingComparison {
        acc_fixed: f.accuracy,
        acc_adaptive: a.accuracy,
        mean_steps_fixed: f.mean_steps,
        mean_steps_adaptive: a.mean_steps,
    })
}

/// Per-sample comparison of encoder and random initialization on belongings with
/// known generating latents.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitComparison {
    pub encoder_init_distance: Vec<f64>,
    pub random_init_distance: Vec<f64>,
    pub encoder_initial_loss: Vec<f64>,
    pub random_initial_loss: Vec<f64>,
    pub encoder_best_loss: Vec<f64>,
    pub random_best_loss: Vec<f64>,
    pub encoder_convergence: Vec<usize>,
    pub random_convergence: Vec<usize>,
    pub rel_tol: f64,
}

impl InitComparison {
    pub fn fraction_encoder_closer(&self) -> f64 {
        fraction(&self.encoder_init_distance, &self.random_init_distance, |e, r| e < r)
    }

    pub fn fraction_encoder_lower_initial_loss(&self) -> f64 {
        fraction(&self.encoder_initial_loss, &self.random_initial_loss, |e, r| e <= r)
    }

    pub fn median_encoder_convergence(&self) -> f64 {
        median(self.encoder_convergence.iter().map(|&s| s as f64).collect())
    }

    pub fn median_random_convergence(&self) -> f64 {
        median(self.random_convergence.iter().map(|&s| s as f64).collect())
    }
}

fn fraction(a: &[f64], b: &[f64], pred: impl Fn(f64, f64) -> bool) -> f64 {
    a.iter().zip(b).filter(|(x, y)| pred(**x, **y)).count() as f64 / a.len() as f64
}

pub fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

pub fn compare_initializations(
    model: &Autoencoder,
    samples: &[(ImageTensor, LatentTensor)],
    encoder_cfg: &InversionConfig,
    random_cfg: &InversionConfig,
    rel_tol: f64,
) -> Result<InitComparison> {
    if samples.is_empty() {
        return Err(Error::invalid("no samples to compare"));
    }
    let run = |cfg: &InversionConfig| -> Result<Vec<(f64, f64, f64, usize)>> {
        samples
            .par_iter()
            .map(|(x, truth)| {
                let r = invert_latent_with_truth(model, x, cfg, truth)?;
                Ok((
                    r.init_distance_to.expect("truth supplied"),
                    r.loss_trajectory[0],
                    r.best_loss,
                    convergence_step(&r.loss_trajectory, rel_tol),
                ))
            })
            .collect()
    };
    let e = run(encoder_cfg)?;
    let r = run(random_cfg)?;
    Ok(InitComparison {
        encoder_init_distance: e.iter().map(|t| t.0).collect(),
        random_init_distance: r.iter().map(|t| t.0).collect(),
        encoder_initial_loss: e.iter().map(|t| t.1).collect(),
        random_initial_loss: r.iter().map(|t| t.1).collect(),
        encoder_best_loss: e.iter().map(|t| t.2).collect(),
        random_best_loss: r.iter().map(|t| t.2).collect(),
        encoder_convergence: e.iter().map(|t| t.3).collect(),
        random_convergence: r.iter().map(|t| t.3).collect(),
        rel_tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::{calibrate_model, CalibrationOptions};

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(vec![]).is_nan());
    }

    #[test]
    fn sweep_on_exact_model() {
        let m = Autoencoder::orthogonal_linear([3, 8, 8], [4, 2, 2], 2).unwrap();
        let p = calibrate_model(&m, &CalibrationOptions::default(), &InversionConfig::encoder())
            .unwrap();
        let b = m.sample_belongings(4, 100).unwrap();
        let o = crate::zoo::data::synthetic_images([3, 8, 8], 4, 200).unwrap();
        assert!(robustness_sweep(&p, &m, &b, &o, &[], 0).is_empty());
        let base = evaluate_separation(&p, &m, &b, &o).unwrap();
        assert_eq!(base.accuracy, 1.0);
        let rows = robustness_sweep(
            &p,
            &m,
            &b,
            &o,
            &[AugmentationSpec::new(AugmentationKind::Brightness, 1.0).unwrap()],
            0,
        );
        assert_eq!(rows[0].acc, base.accuracy);
        assert_eq!(rows[0].ssim, 1.0);
        let mut csv = Vec::new();
        write_robustness_csv(&mut csv, &rows).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("augmentation,parameter,acc,ssim,psnr,l1,l2\nbrightness,1,1,1,inf,0,0"));
    }
}
