//! Encoder/decoder pairs: an exact orthogonal linear fixture plus small
//! trainable convolutional VAE and VQ-VAE models.

mod checkpoint;
pub mod data;
mod train;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Layer, Sequential};
use crate::tensor::{numel, ImageTensor, LatentTensor, Shape, Tensor3};

pub use checkpoint::{Checkpoint, CHECKPOINT_FORMAT};
pub use train::{train_autoencoder, TrainingConfig, TrainingReport};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AutoencoderKind {
    Continuous,
    Quantized,
}

/// `K × d` embedding table; latents are snapped per spatial position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub size: usize,
    pub dim: usize,
    /// Row-major `[size, dim]`.
    pub embeddings: Vec<f64>,
}

impl Codebook {
    pub fn new(size: usize, dim: usize, embeddings: Vec<f64>) -> Result<Self> {
        if size < 2 {
            return Err(Error::invalid(format!(
                "codebook needs at least 2 entries, got {size}"
            )));
        }
        if dim == 0 || embeddings.len() != size * dim {
            return Err(Error::invalid(format!(
                "codebook of {size}×{dim} needs {} values, got {}",
                size * dim,
                embeddings.len()
            )));
        }
        if embeddings.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("codebook entries must be finite"));
        }
        Ok(Self {
            size,
            dim,
            embeddings,
        })
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.embeddings[k * self.dim..(k + 1) * self.dim]
    }

    /// Index of the closest entry; ties go to the lowest index.
    pub fn nearest(&self, v: &[f64]) -> usize {
        let mut best = (0, f64::INFINITY);
        for k in 0..self.size {
            let d: f64 = self
                .row(k)
                .iter()
                .zip(v)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best.1 {
                best = (k, d);
            }
        }
        best.0
    }

    /// Replaces every channel vector of a `(dim, h, w)` tensor by its nearest entry.
    pub fn snap(&self, t: &Tensor3) -> (Tensor3, Vec<usize>) {
        let [c, h, w] = t.shape();
        debug_assert_eq!(c, self.dim);
        let hw = h * w;
        let src = t.data();
        let mut out = vec![0.0; c * hw];
        let mut codes = Vec::with_capacity(hw);
        let mut v = vec![0.0; c];
        for p in 0..hw {
            for ch in 0..c {
                v[ch] = src[ch * hw + p];
            }
            let k = self.nearest(&v);
            for (ch, &e) in self.row(k).iter().enumerate() {
                out[ch * hw + p] = e;
            }
            codes.push(k);
        }
        (Tensor3::from_parts(t.shape(), out), codes)
    }
}

/// Orthonormal decoder columns; the encoder is the transpose.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LinearBasis {
    /// Latent coordinate `j` is written to pixel `pixels[j]`. Exact in floating point.
    Selection { pixels: Vec<usize> },
    /// Dense `[n_pixels, n_latent]` row-major matrix with orthonormal columns.
    Dense { matrix: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Network {
    Linear(LinearBasis),
    Conv {
        encoder: Sequential,
        decoder: Sequential,
    },
}

/// Shape parameters for a convolutional autoencoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub kind: AutoencoderKind,
    pub image_shape: Shape,
    /// Latent channels; equals the codebook dimension for the quantized kind.
    pub latent_channels: usize,
    /// Channel widths at full/2 and full/4 resolution.
    pub hidden: [usize; 2],
    #[serde(default)]
    pub codebook_size: Option<usize>,
}

impl ConvSpec {
    /// VAE with a `4 × H/4 × W/4` latent.
    pub fn vae(image_shape: Shape) -> Self {
        Self {
            kind: AutoencoderKind::Continuous,
            image_shape,
            latent_channels: 4,
            hidden: [16, 16],
            codebook_size: None,
        }
    }

    /// VQ-VAE with a 128-entry, 16-dimensional codebook.
    pub fn vqvae(image_shape: Shape) -> Self {
        Self {
            kind: AutoencoderKind::Quantized,
            image_shape,
            latent_channels: 16,
            hidden: [16, 16],
            codebook_size: Some(128),
        }
    }

    pub fn latent_shape(&self) -> Shape {
        [
            self.latent_channels,
            self.image_shape[1] / 4,
            self.image_shape[2] / 4,
        ]
    }

    fn validate(&self) -> Result<()> {
        let [c, h, w] = self.image_shape;
        if c != 1 && c != 3 {
            return Err(Error::invalid(format!("image channels must be 1 or 3, got {c}")));
        }
        if h == 0 || w == 0 || h % 4 != 0 || w % 4 != 0 {
            return Err(Error::invalid(format!(
                "image height and width must be positive multiples of 4, got {h}×{w}"
            )));
        }
        if self.latent_channels == 0 || self.hidden.contains(&0) {
            return Err(Error::invalid("channel counts must be positive"));
        }
        match (self.kind, self.codebook_size) {
            (AutoencoderKind::Quantized, Some(k)) if k >= 2 => Ok(()),
            (AutoencoderKind::Quantized, _) => {
                Err(Error::invalid("quantized models need codebook_size >= 2"))
            }
            (AutoencoderKind::Continuous, _) => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Autoencoder {
    pub model_id: String,
    pub kind: AutoencoderKind,
    pub image_shape: Shape,
    pub latent_shape: Shape,
    pub network: Network,
    pub codebook: Option<Codebook>,
    pub training_seed: Option<u64>,
    /// False for freshly initialized models (including `epochs = 0` training).
    pub trained: bool,
}

impl Autoencoder {
    /// Linear autoencoder whose decoder scatters each latent coordinate to a distinct
    /// pixel chosen by a seeded permutation. The encoder gathers them back, so the pair
    /// inverts exactly in floating point.
    pub fn orthogonal_linear(image_shape: Shape, latent_shape: Shape, seed: u64) -> Result<Self> {
        let (n_pix, n_lat) = Self::linear_dims(image_shape, latent_shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pixels: Vec<usize> = (0..n_pix).collect();
        pixels.shuffle(&mut rng);
        pixels.truncate(n_lat);
        Ok(Self::linear(
            format!("linear-selection-{seed}"),
            image_shape,
            latent_shape,
            LinearBasis::Selection { pixels },
        ))
    }

    /// Linear autoencoder with a dense orthonormal basis (Gram–Schmidt on a Gaussian
    /// matrix). Exact up to rounding.
    pub fn dense_orthogonal_linear(
        image_shape: Shape,
        latent_shape: Shape,
        seed: u64,
    ) -> Result<Self> {
        let (n_pix, n_lat) = Self::linear_dims(image_shape, latent_shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n_lat);
        while cols.len() < n_lat {
            let mut v: Vec<f64> = (0..n_pix).map(|_| rng.sample(StandardNormal)).collect();
            // Two passes of modified Gram–Schmidt keep the basis orthonormal to ~1e-16.
            for _ in 0..2 {
                for q in &cols {
                    let d: f64 = q.iter().zip(&v).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(q).for_each(|(x, qi)| *x -= d * qi);
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-8 {
                v.iter_mut().for_each(|x| *x /= norm);
                cols.push(v);
            }
        }
        let mut matrix = vec![0.0; n_pix * n_lat];
        for (j, col) in cols.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                matrix[i * n_lat + j] = v;
            }
        }
        Ok(Self::linear(
            format!("linear-dense-{seed}"),
            image_shape,
            latent_shape,
            LinearBasis::Dense { matrix },
        ))
    }

    fn linear_dims(image_shape: Shape, latent_shape: Shape) -> Result<(usize, usize)> {
        let (n_pix, n_lat) = (numel(image_shape), numel(latent_shape));
        if n_lat == 0 || n_lat > n_pix {
            return Err(Error::invalid(format!(
                "linear autoencoder needs 0 < latent size ({n_lat}) <= pixel count ({n_pix})"
            )));
        }
        Ok((n_pix, n_lat))
    }

    fn linear(id: String, image_shape: Shape, latent_shape: Shape, basis: LinearBasis) -> Self {
        Self {
            model_id: id,
            kind: AutoencoderKind::Continuous,
            image_shape,
            latent_shape,
            network: Network::Linear(basis),
            codebook: None,
            training_seed: None,
            trained: true,
        }
    }

    /// Turns the model into the quantized kind with the given codebook.
    pub fn with_codebook(mut self, codebook: Codebook) -> Result<Self> {
        if codebook.dim != self.latent_shape[0] {
            return Err(Error::invalid(format!(
                "codebook dimension {} does not match latent channels {}",
                codebook.dim, self.latent_shape[0]
            )));
        }
        self.kind = AutoencoderKind::Quantized;
        self.codebook = Some(codebook);
        self.model_id.push_str("-vq");
        Ok(self)
    }

    /// Randomly initialized convolutional model.
    pub fn conv(spec: &ConvSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let [c, _, _] = spec.image_shape;
        let [h1, h2] = spec.hidden;
        let lc = spec.latent_channels;
        let enc_out = match spec.kind {
            AutoencoderKind::Continuous => 2 * lc,
            AutoencoderKind::Quantized => lc,
        };
        let encoder = Sequential::new(vec![
            Layer::Conv2d(Conv2d::new(c, h1, 3, 2, 1, &mut rng)),
            Layer::Silu,
            Layer::Conv2d(Conv2d::new(h1, h2, 3, 2, 1, &mut rng)),
            Layer::Silu,
            Layer::Conv2d(Conv2d::new(h2, h2, 3, 1, 1, &mut rng)),
            Layer::Silu,
            Layer::Conv2d(Conv2d::new(h2, enc_out, 3, 1, 1, &mut rng)),
        ]);
        let decoder = Sequential::new(vec![
            Layer::Conv2d(Conv2d::new(lc, h2, 3, 1, 1, &mut rng)),
            Layer::Silu,
            Layer::Conv2d(Conv2d::new(h2, h2, 3, 1, 1, &mut rng)),
            Layer::Silu,
            Layer::Upsample2x,
            Layer::Conv2d(Conv2d::new(h2, h1, 3, 1, 1, &mut rng)),
            Layer::Silu,
            Layer::Upsample2x,
            Layer::Conv2d(Conv2d::new(h1, c, 3, 1, 1, &mut rng)),
            Layer::Sigmoid,
        ]);
        let codebook = match spec.codebook_size {
            Some(k) if spec.kind == AutoencoderKind::Quantized => {
                let emb = (0..k * lc).map(|_| rng.sample(StandardNormal)).collect();
                Some(Codebook::new(k, lc, emb)?)
            }
            _ => None,
        };
        let prefix = match spec.kind {
            AutoencoderKind::Continuous => "vae",
            AutoencoderKind::Quantized => "vqvae",
        };
        Ok(Self {
            model_id: format!("{prefix}-{seed}"),
            kind: spec.kind,
            image_shape: spec.image_shape,
            latent_shape: spec.latent_shape(),
            network: Network::Conv { encoder, decoder },
            codebook,
            training_seed: Some(seed),
            trained: false,
        })
    }

    pub fn codebook(&self) -> Option<&Codebook> {
        self.codebook.as_ref()
    }

    fn check_image(&self, x: &ImageTensor) -> Result<()> {
        if x.shape() != self.image_shape {
            return Err(Error::ShapeMismatch {
                expected: self.image_shape,
                actual: x.shape(),
            });
        }
        Ok(())
    }

    fn check_latent(&self, a: &LatentTensor) -> Result<()> {
        if a.shape() != self.latent_shape {
            return Err(Error::ShapeMismatch {
                expected: self.latent_shape,
                actual: a.shape(),
            });
        }
        Ok(())
    }

    /// Deterministic encoding: the posterior mean for the continuous VAE, the
    /// pre-quantization embedding for the quantized kind.
    pub fn encode(&self, x: &ImageTensor) -> Result<LatentTensor> {
        self.check_image(x)?;
        let t = match &self.network {
            Network::Linear(basis) => self.linear_encode(basis, x.data()),
            Network::Conv { encoder, .. } => {
                let h = encoder.forward(x.tensor());
                self.encoder_head(h)
            }
        };
        Ok(LatentTensor::from_raw(t))
    }

    /// Keeps the mean half of a VAE encoder output.
    fn encoder_head(&self, h: Tensor3) -> Tensor3 {
        let lc = self.latent_shape[0];
        if h.shape()[0] == lc {
            return h;
        }
        let n = numel(self.latent_shape);
        let mut d = h.into_data();
        d.truncate(n);
        Tensor3::from_parts(self.latent_shape, d)
    }

    fn linear_encode(&self, basis: &LinearBasis, x: &[f64]) -> Tensor3 {
        let n_lat = numel(self.latent_shape);
        let data = match basis {
            LinearBasis::Selection { pixels } => pixels.iter().map(|&p| x[p]).collect(),
            LinearBasis::Dense { matrix } => {
                let mut a = vec![0.0; n_lat];
                for (i, &xi) in x.iter().enumerate() {
                    let row = &matrix[i * n_lat..(i + 1) * n_lat];
                    a.iter_mut().zip(row).for_each(|(aj, w)| *aj += w * xi);
                }
                a
            }
        };
        Tensor3::from_parts(self.latent_shape, data)
    }

    fn linear_decode(&self, basis: &LinearBasis, a: &[f64]) -> Tensor3 {
        let n_lat = numel(self.latent_shape);
        let mut y = vec![0.0; numel(self.image_shape)];
        match basis {
            LinearBasis::Selection { pixels } => {
                for (&p, &v) in pixels.iter().zip(a) {
                    y[p] = v;
                }
            }
            LinearBasis::Dense { matrix } => {
                for (i, yi) in y.iter_mut().enumerate() {
                    let row = &matrix[i * n_lat..(i + 1) * n_lat];
                    *yi = row.iter().zip(a).map(|(w, v)| w * v).sum();
                }
            }
        }
        Tensor3::from_parts(self.image_shape, y)
    }

    /// Decoder applied directly to a point of the latent (embedding) space.
    ///
    /// Convolutional decoders end in a sigmoid, so outputs lie in `[0, 1]`. The linear
    /// fixture is left unsquashed to stay an exact inverse; its outputs are in range
    /// whenever the latent is.
    pub fn decode(&self, a: &LatentTensor) -> Result<ImageTensor> {
        self.check_latent(a)?;
        let y = match &self.network {
            Network::Linear(basis) => self.linear_decode(basis, a.data()),
            Network::Conv { decoder, .. } => decoder.forward(a.tensor()),
        };
        Ok(ImageTensor::from_raw(y))
    }

    /// Mean-squared reconstruction loss of `decode(a)` against `target` and its
    /// gradient with respect to `a`.
    pub fn loss_and_latent_grad(
        &self,
        a: &LatentTensor,
        target: &ImageTensor,
    ) -> Result<(f64, Tensor3)> {
        self.check_latent(a)?;
        self.check_image(target)?;
        let n = target.len() as f64;
        let residual = |y: &Tensor3| -> (f64, Tensor3) {
            let mut loss = 0.0;
            let g = y
                .data()
                .iter()
                .zip(target.data())
                .map(|(yi, xi)| {
                    let d = yi - xi;
                    loss += d * d;
                    2.0 * d / n
                })
                .collect();
            (loss / n, Tensor3::from_parts(y.shape(), g))
        };
        match &self.network {
            Network::Linear(basis) => {
                let y = self.linear_decode(basis, a.data());
                let (loss, g) = residual(&y);
                Ok((loss, self.linear_encode(basis, g.data())))
            }
            Network::Conv { decoder, .. } => {
                let (y, trace) = decoder.forward_traced(a.tensor());
                let (loss, g) = residual(&y);
                Ok((loss, decoder.backward(&trace, g, None)))
            }
        }
    }

    /// Snaps to the codebook for the quantized kind; identity otherwise.
    pub fn quantize(&self, a: &LatentTensor) -> Result<LatentTensor> {
        self.check_latent(a)?;
        Ok(match &self.codebook {
            Some(cb) => LatentTensor::from_raw(cb.snap(a.tensor()).0),
            None => a.clone(),
        })
    }

    /// The latent that generation would feed the decoder for `x`: `quantize(encode(x))`.
    pub fn generation_latent(&self, x: &ImageTensor) -> Result<LatentTensor> {
        self.quantize(&self.encode(x)?)
    }

    /// Reconstruction through the full model, which is by construction a decoder output.
    pub fn make_belonging(&self, x: &ImageTensor) -> Result<ImageTensor> {
        self.decode(&self.generation_latent(x)?)
    }

    /// `n` decoder outputs: reconstructions of seeded synthetic images.
    pub fn sample_belongings(&self, n: usize, seed: u64) -> Result<Vec<ImageTensor>> {
        Ok(self
            .sample_belongings_with_latents(n, seed, BelongingSource::Reconstruction)?
            .into_iter()
            .map(|(x, _)| x)
            .collect())
    }

    /// Decoder outputs paired with the latent that produced them.
    pub fn sample_belongings_with_latents(
        &self,
        n: usize,
        seed: u64,
        source: BelongingSource,
    ) -> Result<Vec<(ImageTensor, LatentTensor)>> {
        if n < 1 {
            return Err(Error::invalid("need at least one belonging sample"));
        }
        match source {
            BelongingSource::Reconstruction => data::synthetic_images(self.image_shape, n, seed)?
                .iter()
                .map(|x| {
                    let a = self.generation_latent(x)?;
                    Ok((self.decode(&a)?, a))
                })
                .collect(),
            BelongingSource::Prior => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                (0..n)
                    .map(|_| {
                        let a = self.prior_sample(&mut rng);
                        Ok((self.decode(&a)?, a))
                    })
                    .collect()
            }
        }
    }

    fn prior_sample(&self, rng: &mut ChaCha8Rng) -> LatentTensor {
        let shape = self.latent_shape;
        match (&self.codebook, &self.network) {
            (Some(cb), _) => {
                let [c, h, w] = shape;
                let mut d = vec![0.0; c * h * w];
                for p in 0..h * w {
                    let k = rng.random_range(0..cb.size);
                    for (ch, &e) in cb.row(k).iter().enumerate() {
                        d[ch * h * w + p] = e;
                    }
                }
                LatentTensor::from_raw(Tensor3::from_parts(shape, d))
            }
            // ‖a‖₂ ≤ ½ bounds every unsquashed output pixel by ½.
            (None, Network::Linear(LinearBasis::Dense { .. })) => {
                let mut v: Vec<f64> = (0..numel(shape)).map(|_| rng.sample(StandardNormal)).collect();
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                let r: f64 = rng.random_range(0.0..0.5);
                v.iter_mut().for_each(|x| *x *= r / norm);
                LatentTensor::from_raw(Tensor3::from_parts(shape, v))
            }
            (None, Network::Linear(LinearBasis::Selection { .. })) => LatentTensor::from_raw(
                Tensor3::from_parts(shape, (0..numel(shape)).map(|_| rng.random::<f64>()).collect()),
            ),
            (None, Network::Conv { .. }) => LatentTensor::from_raw(Tensor3::from_parts(
                shape,
                (0..numel(shape)).map(|_| rng.sample(StandardNormal)).collect(),
            )),
        }
    }

    pub fn num_params(&self) -> usize {
        let net = match &self.network {
            Network::Linear(_) => 0,
            Network::Conv { encoder, decoder } => encoder.num_params() + decoder.num_params(),
        };
        net + self.codebook.as_ref().map_or(0, |c| c.embeddings.len())
    }
}

/// Where desk-scale belonging samples come from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BelongingSource {
    /// `decode(quantize(encode(x)))` over seeded synthetic images.
    #[default]
    Reconstruction,
    /// Decoded prior draws: standard normal, or uniform codebook indices.
    Prior,
}
