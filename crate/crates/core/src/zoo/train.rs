use log::{debug, info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Autoencoder, AutoencoderKind, Codebook, ConvSpec, Network};
use crate::error::{Error, Result};
use crate::nn::{Adam, Gradients, Sequential};
use crate::tensor::{ImageTensor, Tensor3};

/// Missing keys take their [`Default`] values when deserializing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Weight on the per-coordinate mean KL term (continuous kind).
    pub kl_weight: f64,
    /// Weight on the mean commitment term (quantized kind).
    pub commitment_weight: f64,
    pub holdout_fraction: f64,
    /// Held-out reconstruction MSE the run is expected to reach.
    pub target_mse: f64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            learning_rate: 2e-3,
            seed: 0,
            kl_weight: 1e-4,
            commitment_weight: 0.25,
            holdout_fraction: 0.1,
            target_mse: 0.01,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(self.kl_weight >= 0.0 && self.commitment_weight >= 0.0) {
            return Err(Error::invalid("loss weights must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::invalid("holdout_fraction must be in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingReport {
    /// Mean training objective per epoch.
    pub epoch_losses: Vec<f64>,
    /// Mean reconstruction MSE of `make_belonging` on the held-out split.
    pub holdout_mse: Option<f64>,
    pub target_met: bool,
    pub untrained: bool,
    /// Distinct codebook entries used on the held-out split (quantized kind).
    pub codebook_usage: Option<usize>,
}

/// Trains a convolutional autoencoder with Adam on minibatches.
///
/// Continuous models minimise `MSE + kl_weight · mean KL`; quantized models minimise
/// `MSE + mean codebook loss + commitment_weight · mean commitment loss` with a
/// straight-through gradient and dead-code restarts at each epoch end. Training is
/// single-threaded and bit-reproducible for a given seed.
pub fn train_autoencoder(
    dataset: &[ImageTensor],
    spec: &ConvSpec,
    cfg: &TrainingConfig,
) -> Result<(Autoencoder, TrainingReport)> {
    if dataset.is_empty() {
        return Err(Error::invalid("training dataset is empty"));
    }
    cfg.validate()?;
    if let Some(bad) = dataset.iter().find(|x| x.shape() != spec.image_shape) {
        return Err(Error::ShapeMismatch {
            expected: spec.image_shape,
            actual: bad.shape(),
        });
    }

    let mut model = Autoencoder::conv(spec, cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005E_ED0F_7EA1);

    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = ((dataset.len() as f64) * cfg.holdout_fraction).floor() as usize;
    let n_hold = n_hold.min(dataset.len() - 1);
    let (train_idx, hold_idx) = order.split_at(dataset.len() - n_hold);
    let mut train_idx = train_idx.to_vec();

    if cfg.epochs == 0 {
        let report = TrainingReport {
            epoch_losses: vec![],
            holdout_mse: None,
            target_met: false,
            untrained: true,
            codebook_usage: None,
        };
        return Ok((model, report));
    }

    let Autoencoder {
        network, codebook, ..
    } = &mut model;
    let Network::Conv { encoder, decoder } = network else {
        unreachable!("conv constructor")
    };
    if let Some(cb) = codebook.as_mut() {
        init_codebook_from_data(cb, encoder, dataset, &train_idx, &mut rng);
    }

    let sizes: Vec<usize> = encoder
        .params()
        .iter()
        .chain(decoder.params().iter())
        .map(|p| p.len())
        .chain(codebook.iter().map(|c| c.embeddings.len()))
        .collect();
    let mut adam = Adam::new(cfg.learning_rate, sizes);

    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        train_idx.shuffle(&mut rng);
        let mut usage = codebook.as_ref().map(|c| vec![0usize; c.size]);
        let mut recent: Vec<Vec<f64>> = Vec::new();
        let mut total = 0.0;
        for batch in train_idx.chunks(cfg.batch_size) {
            let mut ge = encoder.zero_grads();
            let mut gd = decoder.zero_grads();
            let mut gc = codebook.as_ref().map(|c| vec![0.0; c.embeddings.len()]);
            let mut batch_loss = 0.0;
            recent.clear();
            for &i in batch {
                let x = &dataset[i];
                batch_loss += match (spec.kind, codebook.as_ref()) {
                    (AutoencoderKind::Continuous, _) => {
                        vae_sample_grads(encoder, decoder, x, cfg, &mut rng, &mut ge, &mut gd)
                    }
                    (AutoencoderKind::Quantized, Some(cb)) => vq_sample_grads(
                        encoder,
                        decoder,
                        cb,
                        x,
                        cfg,
                        &mut ge,
                        &mut gd,
                        gc.as_mut().expect("codebook grads"),
                        usage.as_mut().expect("usage"),
                        &mut recent,
                    ),
                    (AutoencoderKind::Quantized, None) => unreachable!("validated spec"),
                };
            }
            let scale = 1.0 / batch.len() as f64;
            batch_loss *= scale;
            if !batch_loss.is_finite() || !ge.is_finite() || !gd.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch,
                    step,
                    loss: batch_loss,
                });
            }
            ge.scale(scale);
            gd.scale(scale);
            let mut grads: Vec<&[f64]> = ge.slices();
            grads.extend(gd.slices());
            if let Some(g) = gc.as_mut() {
                g.iter_mut().for_each(|v| *v *= scale);
            }
            if let Some(g) = gc.as_ref() {
                grads.push(g);
            }
            let mut params = encoder.params_mut();
            params.extend(decoder.params_mut());
            if let Some(cb) = codebook.as_mut() {
                params.push(cb.embeddings.as_mut_slice());
            }
            adam.step(&mut params, &grads);
            total += batch_loss * batch.len() as f64;
            step += 1;
        }
        if let (Some(cb), Some(usage)) = (codebook.as_mut(), usage.as_ref()) {
            restart_dead_codes(cb, usage, &recent, &mut rng);
        }
        let mean = total / train_idx.len() as f64;
        debug!("epoch {epoch}: loss {mean:.6}");
        epoch_losses.push(mean);
    }
    model.trained = true;

    let (holdout_mse, codebook_usage) = if hold_idx.is_empty() {
        (None, None)
    } else {
        let mut used = std::collections::BTreeSet::new();
        let mut sum = 0.0;
        for &i in hold_idx {
            let x = &dataset[i];
            let z = model.encode(x)?;
            if let Some(cb) = model.codebook() {
                used.extend(cb.snap(z.tensor()).1);
            }
            let y = model.decode(&model.quantize(&z)?)?;
            sum += crate::tensor::mean_sq_diff(y.data(), x.data());
        }
        (
            Some(sum / hold_idx.len() as f64),
            model.codebook().map(|_| used.len()),
        )
    };
    let target_met = holdout_mse.is_some_and(|m| m < cfg.target_mse);
    match holdout_mse {
        Some(m) if !target_met => warn!(
            "{}: held-out MSE {m:.5} misses target {}",
            model.model_id, cfg.target_mse
        ),
        Some(m) => info!("{}: held-out MSE {m:.5}", model.model_id),
        None => {}
    }
    Ok((
        model,
        TrainingReport {
            epoch_losses,
            holdout_mse,
            target_met,
            untrained: false,
            codebook_usage,
        },
    ))
}

fn recon_grad(y: &Tensor3, x: &ImageTensor) -> (f64, Tensor3) {
    let n = x.len() as f64;
    let mut loss = 0.0;
    let g = y
        .data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| {
            let d = a - b;
            loss += d * d;
            2.0 * d / n
        })
        .collect();
    (loss / n, Tensor3::from_parts(y.shape(), g))
}

fn vae_sample_grads(
    encoder: &Sequential,
    decoder: &Sequential,
    x: &ImageTensor,
    cfg: &TrainingConfig,
    rng: &mut ChaCha8Rng,
    ge: &mut Gradients,
    gd: &mut Gradients,
) -> f64 {
    let (h, etrace) = encoder.forward_traced(x.tensor());
    let [c2, hh, ww] = h.shape();
    let lc = c2 / 2;
    let nl = lc * hh * ww;
    let (mu, logvar) = h.data().split_at(nl);
    let eps: Vec<f64> = (0..nl).map(|_| rng.sample(StandardNormal)).collect();
    let z: Vec<f64> = (0..nl)
        .map(|i| mu[i] + (0.5 * logvar[i]).exp() * eps[i])
        .collect();
    let (y, dtrace) = decoder.forward_traced(&Tensor3::from_parts([lc, hh, ww], z));
    let (rec, gy) = recon_grad(&y, x);
    let dz = decoder.backward(&dtrace, gy, Some(gd));

    let klw = cfg.kl_weight / nl as f64;
    let mut kl = 0.0;
    let mut dh = vec![0.0; 2 * nl];
    for i in 0..nl {
        let ev = logvar[i].exp();
        kl += 0.5 * (mu[i] * mu[i] + ev - 1.0 - logvar[i]);
        dh[i] = dz.data()[i] + klw * mu[i];
        dh[nl + i] = dz.data()[i] * eps[i] * 0.5 * (0.5 * logvar[i]).exp() + klw * 0.5 * (ev - 1.0);
    }
    encoder.backward(&etrace, Tensor3::from_parts(h.shape(), dh), Some(ge));
    rec + klw * kl
}

#[allow(clippy::too_many_arguments)]
fn vq_sample_grads(
    encoder: &Sequential,
    decoder: &Sequential,
    cb: &Codebook,
    x: &ImageTensor,
    cfg: &TrainingConfig,
    ge: &mut Gradients,
    gd: &mut Gradients,
    gc: &mut [f64],
    usage: &mut [usize],
    recent: &mut Vec<Vec<f64>>,
) -> f64 {
    let (ze, etrace) = encoder.forward_traced(x.tensor());
    let (zq, codes) = cb.snap(&ze);
    let (y, dtrace) = decoder.forward_traced(&zq);
    let (rec, gy) = recon_grad(&y, x);
    let dzq = decoder.backward(&dtrace, gy, Some(gd));

    let [c, h, w] = ze.shape();
    let hw = h * w;
    let nl = (c * hw) as f64;
    let mut vq = 0.0;
    let mut dze = dzq.into_data();
    for (p, &k) in codes.iter().enumerate() {
        usage[k] += 1;
        let mut v = Vec::with_capacity(c);
        for ch in 0..c {
            let i = ch * hw + p;
            let diff = ze.data()[i] - zq.data()[i];
            vq += diff * diff;
            // straight-through plus commitment pull on the encoder
            dze[i] += cfg.commitment_weight * 2.0 * diff / nl;
            // codebook entry pulled toward the encoder output
            gc[k * c + ch] -= 2.0 * diff / nl;
            v.push(ze.data()[i]);
        }
        recent.push(v);
    }
    encoder.backward(&etrace, Tensor3::from_parts(ze.shape(), dze), Some(ge));
    rec + (1.0 + cfg.commitment_weight) * vq / nl
}

fn init_codebook_from_data(
    cb: &mut Codebook,
    encoder: &Sequential,
    dataset: &[ImageTensor],
    train_idx: &[usize],
    rng: &mut ChaCha8Rng,
) {
    let mut pool: Vec<Vec<f64>> = Vec::new();
    for &i in train_idx.iter().take(cb.size.div_ceil(4).max(8)) {
        let z = encoder.forward(dataset[i].tensor());
        let [c, h, w] = z.shape();
        for p in 0..h * w {
            pool.push((0..c).map(|ch| z.data()[ch * h * w + p]).collect());
        }
    }
    for k in 0..cb.size {
        let v = &pool[rng.random_range(0..pool.len())];
        for (ch, &e) in v.iter().enumerate() {
            let jitter: f64 = rng.sample(StandardNormal);
            cb.embeddings[k * cb.dim + ch] = e + 0.01 * jitter;
        }
    }
}

fn restart_dead_codes(cb: &mut Codebook, usage: &[usize], recent: &[Vec<f64>], rng: &mut ChaCha8Rng) {
    if recent.is_empty() {
        return;
    }
    let mut restarted = 0;
    for (k, &u) in usage.iter().enumerate() {
        if u == 0 {
            let v = &recent[rng.random_range(0..recent.len())];
            cb.embeddings[k * cb.dim..(k + 1) * cb.dim].copy_from_slice(v);
            restarted += 1;
        }
    }
    if restarted > 0 {
        debug!("restarted {restarted} dead codebook entries");
    }
}
