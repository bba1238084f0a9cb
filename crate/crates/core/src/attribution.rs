//! Offline threshold calibration and per-image belonging decisions.

use std::path::Path;

use chrono::{SecondsFormat, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::inversion::{invert_latent, InversionConfig};
use crate::stats::{grubbs_threshold, CalibrationSummary};
use crate::store;
use crate::tensor::ImageTensor;
use crate::zoo::{Autoencoder, BelongingSource};

/// Persisted outcome of calibrating one model. Immutable once written; calibrating
/// again produces a new profile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationProfile {
    pub model_id: String,
    pub n: usize,
    pub alpha: f64,
    pub mu: f64,
    pub sigma: f64,
    pub threshold: f64,
    pub losses: Vec<f64>,
    pub inversion: InversionConfig,
    pub seed: u64,
    pub created_at: String,
    pub config_hash: String,
}

impl CalibrationProfile {
    /// Builds a profile from raw calibration losses.
    pub fn from_losses(
        model_id: impl Into<String>,
        losses: Vec<f64>,
        alpha: f64,
        inversion: InversionConfig,
        seed: u64,
    ) -> Result<Self> {
        let summary = CalibrationSummary::from_losses(&losses, alpha)?;
        let threshold = grubbs_threshold(&summary)?;
        let model_id = model_id.into();
        let config_hash = config_hash(&model_id, summary.n, alpha, &inversion, seed);
        Ok(Self {
            model_id,
            n: summary.n,
            alpha,
            mu: summary.mu,
            sigma: summary.sigma,
            threshold,
            losses,
            inversion,
            seed,
            created_at: Utc::now().to_rfc3339_opts(SecondsFormat::Secs, true),
            config_hash,
        })
    }

    pub fn summary(&self) -> CalibrationSummary {
        CalibrationSummary {
            n: self.n,
            mu: self.mu,
            sigma: self.sigma,
            alpha: self.alpha,
        }
    }

    /// Recomputes μ, σ and the threshold from the stored losses.
    pub fn recompute(&self) -> Result<(CalibrationSummary, f64)> {
        let s = CalibrationSummary::from_losses(&self.losses, self.alpha)?;
        Ok((s, grubbs_threshold(&s)?))
    }

    pub fn decide(&self, cost: f64) -> Label {
        if cost <= self.threshold {
            Label::Belonging
        } else {
            Label::NonBelonging
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        store::save_json(path, self)
    }

    /// Loads a profile and checks that the stored statistics match the stored losses.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let p: Self = store::load_json(path)?;
        let (s, t) = p.recompute()?;
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1e-300);
        if p.n != s.n || !close(p.mu, s.mu) || !close(p.sigma, s.sigma) || !close(p.threshold, t)
        {
            return Err(Error::Format {
                path: path.to_path_buf(),
                message: "stored statistics do not match the stored calibration losses".into(),
            });
        }
        Ok(p)
    }
}

fn config_hash(model_id: &str, n: usize, alpha: f64, inv: &InversionConfig, seed: u64) -> String {
    let v = serde_json::json!({
        "model_id": model_id,
        "n": n,
        "alpha": alpha,
        "inversion": inv,
        "seed": seed,
    });
    store::sha256_hex(v.to_string().as_bytes())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Belonging,
    NonBelonging,
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Label::Belonging => "belonging",
            Label::NonBelonging => "non_belonging",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub label: Label,
    pub cost: f64,
    pub threshold: f64,
    pub steps_run: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CalibrationOptions {
    pub n: usize,
    pub alpha: f64,
    pub seed: u64,
    #[serde(default)]
    pub source: BelongingSource,
    /// Round belongings to 8 bits before inverting them, matching images read from PNG.
    #[serde(default = "yes")]
    pub export_8bit: bool,
}

fn yes() -> bool {
    true
}

impl Default for CalibrationOptions {
    /// N = 100 samples at α = 0.05, exported to 8 bits.
    fn default() -> Self {
        Self {
            n: 100,
            alpha: 0.05,
            seed: 0,
            source: BelongingSource::Reconstruction,
            export_8bit: true,
        }
    }
}

/// Inverts `n` fresh belongings of `model` and fits the Grubbs threshold to their
/// best losses.
pub fn calibrate_model(
    model: &Autoencoder,
    opts: &CalibrationOptions,
    cfg: &InversionConfig,
) -> Result<CalibrationProfile> {
    if opts.n < 3 {
        return Err(Error::invalid(format!(
            "calibration needs n >= 3, got {}",
            opts.n
        )));
    }
    let samples: Vec<ImageTensor> = model
        .sample_belongings_with_latents(opts.n, opts.seed, opts.source)?
        .into_iter()
        .map(|(x, _)| if opts.export_8bit { x.quantized_8bit() } else { x })
        .collect();
    calibrate_on_belongings(model, &samples, opts.alpha, cfg, opts.seed)
}

/// Calibrates on caller-supplied decoder outputs of `model`. `seed` is recorded in the
/// profile.
pub fn calibrate_on_belongings(
    model: &Autoencoder,
    belongings: &[ImageTensor],
    alpha: f64,
    cfg: &InversionConfig,
    seed: u64,
) -> Result<CalibrationProfile> {
    if belongings.len() < 3 {
        return Err(Error::invalid(format!(
            "calibration needs n >= 3, got {}",
            belongings.len()
        )));
    }
    cfg.validate()?;
    let results: Vec<Result<f64>> = belongings
        .par_iter()
        .map(|x| invert_latent(model, x, cfg).map(|r| r.best_loss))
        .collect();
    let mut losses = Vec::with_capacity(belongings.len());
    let mut failed = Vec::new();
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(l) => losses.push(l),
            Err(Error::InversionDiverged { .. }) => failed.push(i),
            Err(e) => return Err(e),
        }
    }
    if !failed.is_empty() {
        return Err(Error::Calibration { failed });
    }
    CalibrationProfile::from_losses(model.model_id.clone(), losses, alpha, cfg.clone(), seed)
}

fn check_pair(profile: &CalibrationProfile, model: &Autoencoder) -> Result<()> {
    if profile.model_id != model.model_id {
        return Err(Error::ModelMismatch {
            profile: profile.model_id.clone(),
            model: model.model_id.clone(),
        });
    }
    Ok(())
}

/// Inverts `x` with the profile's inversion settings; belonging iff cost ≤ threshold.
pub fn attribute_image(
    profile: &CalibrationProfile,
    model: &Autoencoder,
    x: &ImageTensor,
) -> Result<Verdict> {
    check_pair(profile, model)?;
    let r = invert_latent(model, x, &profile.inversion)?;
    Ok(Verdict {
        label: profile.decide(r.best_loss),
        cost: r.best_loss,
        threshold: profile.threshold,
        steps_run: r.steps_run,
    })
}

/// Element-wise [`attribute_image`], in input order. Runs on the current rayon pool.
pub fn batch_attribute(
    profile: &CalibrationProfile,
    model: &Autoencoder,
    images: &[ImageTensor],
) -> Vec<Result<Verdict>> {
    images
        .par_iter()
        .map(|x| attribute_image(profile, model, x))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear() -> Autoencoder {
        Autoencoder::orthogonal_linear([3, 8, 8], [4, 2, 2], 5).unwrap()
    }

    #[test]
    fn exact_model_calibrates_to_zero() {
        let m = linear();
        let p = calibrate_model(&m, &CalibrationOptions::default(), &InversionConfig::encoder())
            .unwrap();
        assert!(p.losses.iter().all(|&l| l == 0.0));
        assert_eq!((p.mu, p.sigma, p.threshold), (0.0, 0.0, 0.0));
        let x = m.sample_belongings(1, 77).unwrap().remove(0);
        let v = attribute_image(&p, &m, &x).unwrap();
        assert_eq!(v.label, Label::Belonging);
        assert_eq!(v.cost, 0.0);
    }

    #[test]
    fn too_few_samples_rejected() {
        let opts = CalibrationOptions {
            n: 2,
            ..CalibrationOptions::default()
        };
        assert!(matches!(
            calibrate_model(&linear(), &opts, &InversionConfig::encoder()),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn tie_goes_to_belonging() {
        let p = CalibrationProfile::from_losses(
            "m",
            vec![1.0, 1.0, 1.0],
            0.05,
            InversionConfig::encoder(),
            0,
        )
        .unwrap();
        assert_eq!(p.threshold, 1.0);
        assert_eq!(p.decide(1.0), Label::Belonging);
        assert_eq!(p.decide(1.0 + 1e-15), Label::NonBelonging);
    }

    #[test]
    fn mismatched_model_is_rejected() {
        let m = linear();
        let p = CalibrationProfile::from_losses("other", vec![0.0; 3], 0.05, InversionConfig::encoder(), 0)
            .unwrap();
        let x = ImageTensor::filled([3, 8, 8], 0.5).unwrap();
        assert!(matches!(
            attribute_image(&p, &m, &x),
            Err(Error::ModelMismatch { .. })
        ));
    }

    #[test]
    fn batch_collects_errors_without_aborting() {
        let m = linear();
        let p = calibrate_model(&m, &CalibrationOptions::default(), &InversionConfig::encoder())
            .unwrap();
        assert!(batch_attribute(&p, &m, &[]).is_empty());
        let good = m.sample_belongings(2, 1).unwrap();
        let bad = ImageTensor::filled([3, 4, 4], 0.5).unwrap();
        let out = batch_attribute(&p, &m, &[good[0].clone(), bad, good[1].clone()]);
        assert!(out[0].is_ok() && out[1].is_err() && out[2].is_ok());
        assert_eq!(out[0].as_ref().unwrap(), &attribute_image(&p, &m, &good[0]).unwrap());
    }

    #[test]
    fn profile_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let losses = vec![0.1 + 1e-17, 1.0 / 3.0, 2.0f64.sqrt() * 1e-7, 0.3];
        let p = CalibrationProfile::from_losses("m", losses, 0.05, InversionConfig::random(), 3)
            .unwrap();
        p.save(&path).unwrap();
        let q = CalibrationProfile::load(&path).unwrap();
        assert_eq!(p, q);
        let text = std::fs::read_to_string(&path).unwrap();
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let mut keys: Vec<_> = v.as_object().unwrap().keys().cloned().collect();
        keys.sort();
        assert_eq!(
            keys,
            [
                "alpha", "config_hash", "created_at", "inversion", "losses", "model_id", "mu",
                "n", "seed", "sigma", "threshold"
            ]
        );
    }

    #[test]
    fn tampered_profile_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let p = CalibrationProfile::from_losses("m", vec![1.0, 2.0, 4.0], 0.05, InversionConfig::encoder(), 0)
            .unwrap();
        p.save(&path).unwrap();
        let mut v: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
        v["threshold"] = serde_json::json!(123.0);
        std::fs::write(&path, v.to_string()).unwrap();
        assert!(CalibrationProfile::load(&path).is_err());
    }
}
