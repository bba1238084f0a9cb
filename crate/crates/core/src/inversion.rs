//! Gradient-based latent inversion of a decoder.
//!
//! Starting from either the encoder's projection of the target image or a seeded
//! standard-normal draw, the latent is optimised with Adam to minimise the pixel-space
//! MSE between its decoding and the target. The best iterate seen is returned.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Adam;
use crate::tensor::{mean_sq_diff, numel, ImageTensor, LatentTensor, Tensor3};
use crate::zoo::Autoencoder;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Random,
    Encoder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopRule {
    /// Always run `max_steps` evaluations.
    Fixed,
    /// Stop once the best loss has not improved for `patience` consecutive steps.
    Adaptive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionConfig {
    pub init_mode: InitMode,
    pub learning_rate: f64,
    pub max_steps: usize,
    pub stop_rule: StopRule,
    pub patience: usize,
    pub seed: u64,
}

impl InversionConfig {
    pub const DEFAULT_LR: f64 = 0.01;
    pub const DEFAULT_ENCODER_STEPS: usize = 100;
    pub const DEFAULT_RANDOM_STEPS: usize = 400;
    pub const DEFAULT_PATIENCE: usize = 5;

    pub fn encoder() -> Self {
        Self::for_mode(InitMode::Encoder)
    }

    pub fn random() -> Self {
        Self::for_mode(InitMode::Random)
    }

    /// Mode defaults: 100 steps from the encoder, 400 from random.
    pub fn for_mode(init_mode: InitMode) -> Self {
        Self {
            init_mode,
            learning_rate: Self::DEFAULT_LR,
            max_steps: match init_mode {
                InitMode::Encoder => Self::DEFAULT_ENCODER_STEPS,
                InitMode::Random => Self::DEFAULT_RANDOM_STEPS,
            },
            stop_rule: StopRule::Fixed,
            patience: Self::DEFAULT_PATIENCE,
            seed: 0,
        }
    }

    pub fn with_steps(mut self, max_steps: usize) -> Self {
        self.max_steps = max_steps;
        self
    }

    pub fn with_stop_rule(mut self, stop_rule: StopRule) -> Self {
        self.stop_rule = stop_rule;
        self
    }

    pub fn with_learning_rate(mut self, lr: f64) -> Self {
        self.learning_rate = lr;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// A zero learning rate is accepted and freezes the latent.
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid(format!(
                "learning rate must be a nonnegative finite number, got {}",
                self.learning_rate
            )));
        }
        if self.max_steps == 0 {
            return Err(Error::invalid("max_steps must be at least 1"));
        }
        if self.patience == 0 {
            return Err(Error::invalid("patience must be at least 1"));
        }
        Ok(())
    }
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self::encoder()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionResult {
    pub best_latent: LatentTensor,
    pub best_loss: f64,
    pub final_loss: f64,
    /// Loss at each evaluated iterate; entry 0 is the initial latent.
    pub loss_trajectory: Vec<f64>,
    pub steps_run: usize,
    /// Mean squared distance from the initial latent to a supplied ground truth.
    pub init_distance_to: Option<f64>,
}

/// Mean squared error over all pixels.
pub fn reconstruction_loss(x_hat: &ImageTensor, x: &ImageTensor) -> Result<f64> {
    if x_hat.shape() != x.shape() {
        return Err(Error::ShapeMismatch {
            expected: x.shape(),
            actual: x_hat.shape(),
        });
    }
    Ok(mean_sq_diff(x_hat.data(), x.data()))
}

pub fn initialize_latent(
    model: &Autoencoder,
    x: &ImageTensor,
    cfg: &InversionConfig,
) -> Result<LatentTensor> {
    match cfg.init_mode {
        InitMode::Encoder => model.encode(x),
        InitMode::Random => {
            if x.shape() != model.image_shape {
                return Err(Error::ShapeMismatch {
                    expected: model.image_shape,
                    actual: x.shape(),
                });
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let shape = model.latent_shape;
            let data = (0..numel(shape)).map(|_| rng.sample(StandardNormal)).collect();
            Ok(LatentTensor::from_raw(Tensor3::from_parts(shape, data)))
        }
    }
}

pub fn invert_latent(
    model: &Autoencoder,
    x: &ImageTensor,
    cfg: &InversionConfig,
) -> Result<InversionResult> {
    run(model, x, cfg, None)
}

/// Like [`invert_latent`], also recording how far the initial latent is from `truth`.
pub fn invert_latent_with_truth(
    model: &Autoencoder,
    x: &ImageTensor,
    cfg: &InversionConfig,
    truth: &LatentTensor,
) -> Result<InversionResult> {
    run(model, x, cfg, Some(truth))
}

fn run(
    model: &Autoencoder,
    x: &ImageTensor,
    cfg: &InversionConfig,
    truth: Option<&LatentTensor>,
) -> Result<InversionResult> {
    cfg.validate()?;
    let mut latent = initialize_latent(model, x, cfg)?;
    let init_distance_to = truth
        .map(|t| latent.mean_squared_distance(t))
        .transpose()?;

    let mut adam = Adam::new(cfg.learning_rate, [latent.len()]);
    let mut trajectory = Vec::with_capacity(cfg.max_steps);
    let mut best = (f64::INFINITY, latent.clone());
    let mut since_best = 0;

    for step in 0..cfg.max_steps {
        let last = step + 1 == cfg.max_steps;
        let (loss, grad) = if last {
            (reconstruction_loss(&model.decode(&latent)?, x)?, None)
        } else {
            let (l, g) = model.loss_and_latent_grad(&latent, x)?;
            (l, Some(g))
        };
        if !loss.is_finite() || grad.as_ref().is_some_and(|g| g.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::InversionDiverged {
                step,
                loss,
                trajectory,
            });
        }
        trajectory.push(loss);
        if loss < best.0 {
            best = (loss, latent.clone());
            since_best = 0;
        } else {
            since_best += 1;
        }
        if cfg.stop_rule == StopRule::Adaptive && since_best >= cfg.patience {
            break;
        }
        if let Some(g) = grad {
            adam.step(&mut [latent.data_mut()], &[g.data()]);
        }
    }

    let final_loss = *trajectory.last().expect("max_steps >= 1");
    Ok(InversionResult {
        best_latent: best.1,
        best_loss: best.0,
        final_loss,
        steps_run: trajectory.len(),
        loss_trajectory: trajectory,
        init_distance_to,
    })
}

/// First step whose loss is within `(1 + rel_tol)` of the best loss on the trajectory.
pub fn convergence_step(trajectory: &[f64], rel_tol: f64) -> usize {
    let best = trajectory.iter().copied().fold(f64::INFINITY, f64::min);
    trajectory
        .iter()
        .position(|&l| l <= (1.0 + rel_tol) * best)
        .unwrap_or(0)
}

/// `step,loss` rows with a header line.
pub fn write_trajectory_csv(mut w: impl Write, trajectory: &[f64]) -> std::io::Result<()> {
    writeln!(w, "step,loss")?;
    for (i, l) in trajectory.iter().enumerate() {
        writeln!(w, "{i},{l:e}")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::zoo::ConvSpec;

    fn linear() -> Autoencoder {
        Autoencoder::orthogonal_linear([3, 8, 8], [4, 2, 2], 1).unwrap()
    }

    #[test]
    fn loss_identity_and_unit_cases() {
        let x = ImageTensor::filled([3, 4, 4], 0.3).unwrap();
        assert_eq!(reconstruction_loss(&x, &x).unwrap(), 0.0);
        let z = ImageTensor::filled([1, 5, 3], 0.0).unwrap();
        let o = ImageTensor::filled([1, 5, 3], 1.0).unwrap();
        assert_eq!(reconstruction_loss(&z, &o).unwrap(), 1.0);
        assert!(reconstruction_loss(&z, &x).is_err());
    }

    #[test]
    fn exact_inverse_converges_at_step_zero() {
        let m = linear();
        let x = m.sample_belongings(1, 3).unwrap().remove(0);
        let a0 = m.encode(&x).unwrap();
        let r = invert_latent(&m, &x, &InversionConfig::encoder()).unwrap();
        assert_eq!(r.best_loss, 0.0);
        assert_eq!(r.loss_trajectory[0], 0.0);
        assert_eq!(convergence_step(&r.loss_trajectory, 0.0), 0);
        assert_eq!(r.best_latent, a0);
    }

    #[test]
    fn random_init_is_seeded() {
        let m = linear();
        let x = ImageTensor::filled([3, 8, 8], 0.5).unwrap();
        let cfg = InversionConfig::random().with_seed(9);
        assert_eq!(
            initialize_latent(&m, &x, &cfg).unwrap(),
            initialize_latent(&m, &x, &cfg).unwrap()
        );
        assert_ne!(
            initialize_latent(&m, &x, &cfg).unwrap(),
            initialize_latent(&m, &x, &cfg.clone().with_seed(10)).unwrap()
        );
    }

    #[test]
    fn zero_learning_rate_freezes_latent() {
        let m = Autoencoder::conv(&ConvSpec::vae([3, 8, 8]), 4).unwrap();
        let x = ImageTensor::filled([3, 8, 8], 0.2).unwrap();
        let r = invert_latent(
            &m,
            &x,
            &InversionConfig::random().with_learning_rate(0.0).with_steps(7),
        )
        .unwrap();
        assert_eq!(r.steps_run, 7);
        assert!(r.loss_trajectory.iter().all(|&l| l == r.loss_trajectory[0]));
        assert_eq!(r.best_loss, r.loss_trajectory[0]);
    }

    #[test]
    fn adaptive_stops_after_patience_on_plateau() {
        let m = Autoencoder::conv(&ConvSpec::vae([3, 8, 8]), 4).unwrap();
        let x = ImageTensor::filled([3, 8, 8], 0.2).unwrap();
        let cfg = InversionConfig::random()
            .with_learning_rate(0.0)
            .with_stop_rule(StopRule::Adaptive)
            .with_steps(50);
        let r = invert_latent(&m, &x, &cfg).unwrap();
        assert_eq!(r.steps_run, cfg.patience + 1);
        let short = invert_latent(&m, &x, &cfg.clone().with_steps(3)).unwrap();
        assert_eq!(short.steps_run, 3);
    }

    #[test]
    fn rejects_bad_config() {
        let m = linear();
        let x = ImageTensor::filled([3, 8, 8], 0.5).unwrap();
        assert!(invert_latent(&m, &x, &InversionConfig::encoder().with_steps(0)).is_err());
        assert!(invert_latent(&m, &x, &InversionConfig::encoder().with_learning_rate(-1.0)).is_err());
        let mut cfg = InversionConfig::encoder();
        cfg.patience = 0;
        assert!(invert_latent(&m, &x, &cfg).is_err());
    }

    #[test]
    fn divergence_carries_trajectory() {
        let m = Autoencoder::dense_orthogonal_linear([1, 4, 4], [4, 1, 1], 2).unwrap();
        let x = ImageTensor::filled([1, 4, 4], 0.5).unwrap();
        let cfg = InversionConfig::random().with_learning_rate(1e308).with_steps(10);
        match invert_latent(&m, &x, &cfg) {
            Err(Error::InversionDiverged { trajectory, step, .. }) => {
                assert_eq!(trajectory.len(), step);
                assert!(step >= 1);
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn convergence_step_examples() {
        assert_eq!(convergence_step(&[4.0, 2.0, 1.0, 1.0], 0.0), 2);
        assert_eq!(convergence_step(&[3.0, 3.0, 3.0], 0.05), 0);
        assert_eq!(convergence_step(&[10.0, 1.04, 1.0], 0.05), 1);
    }

    #[test]
    fn trajectory_csv_format() {
        let mut buf = Vec::new();
        write_trajectory_csv(&mut buf, &[0.5, 0.25]).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "step,loss\n0,5e-1\n1,2.5e-1\n");
    }
}
