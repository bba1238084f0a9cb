//! Post-processing perturbations applied before attribution.

use std::io::Cursor;

use image::codecs::jpeg::JpegEncoder;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, Tensor3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentationKind {
    Saturation,
    Contrast,
    GaussianNoise,
    Jpeg,
    Brightness,
    GaussianBlur,
    Crop,
}

impl AugmentationKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Saturation => "saturation",
            Self::Contrast => "contrast",
            Self::GaussianNoise => "gaussian_noise",
            Self::Jpeg => "jpeg",
            Self::Brightness => "brightness",
            Self::GaussianBlur => "gaussian_blur",
            Self::Crop => "crop",
        }
    }
}

impl std::str::FromStr for AugmentationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "saturation" => Self::Saturation,
            "contrast" => Self::Contrast,
            "gaussian_noise" | "noise" => Self::GaussianNoise,
            "jpeg" => Self::Jpeg,
            "brightness" => Self::Brightness,
            "gaussian_blur" | "blur" => Self::GaussianBlur,
            "crop" => Self::Crop,
            other => return Err(Error::invalid(format!("unknown augmentation `{other}`"))),
        })
    }
}

/// A perturbation and its strength: a factor (saturation, contrast, brightness), the
/// noise standard deviation, a JPEG quality, a blur radius `k`, or a crop fraction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationSpec {
    pub kind: AugmentationKind,
    pub parameter: f64,
}

impl AugmentationSpec {
    pub fn new(kind: AugmentationKind, parameter: f64) -> Result<Self> {
        let s = Self { kind, parameter };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        use AugmentationKind::*;
        let p = self.parameter;
        let ok = p.is_finite()
            && match self.kind {
                Saturation | Contrast | Brightness => p > 0.0,
                GaussianNoise => p >= 0.0,
                Jpeg => (1.0..=100.0).contains(&p) && p.fract() == 0.0,
                GaussianBlur => p >= 1.0 && p.fract() == 0.0,
                Crop => p > 0.0 && p <= 1.0,
            };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "parameter {p} is out of range for {}",
                self.kind.name()
            )))
        }
    }
}

fn luma(x: &ImageTensor) -> Vec<f64> {
    let [c, h, w] = x.shape();
    let d = x.data();
    if c == 1 {
        return d.to_vec();
    }
    let n = h * w;
    (0..n)
        .map(|i| 0.299 * d[i] + 0.587 * d[n + i] + 0.114 * d[2 * n + i])
        .collect()
}

fn from_data(shape: [usize; 3], data: Vec<f64>) -> ImageTensor {
    ImageTensor::from_raw(Tensor3::from_parts(shape, data)).clamped()
}

/// Applies `spec` to `x`; output has the same shape and lies in `[0, 1]`.
pub fn augment(x: &ImageTensor, spec: &AugmentationSpec, seed: u64) -> Result<ImageTensor> {
    spec.validate()?;
    let p = spec.parameter;
    let [c, h, w] = x.shape();
    let n = h * w;
    Ok(match spec.kind {
        AugmentationKind::Brightness => x.map(|v| v * p).clamped(),
        AugmentationKind::Saturation => {
            let y = luma(x);
            let d = x.data();
            let out = (0..c * n)
                .map(|i| {
                    let g = y[i % n];
                    g + p * (d[i] - g)
                })
                .collect();
            from_data(x.shape(), out)
        }
        AugmentationKind::Contrast => {
            let m = luma(x).iter().sum::<f64>() / n as f64;
            x.map(|v| m + p * (v - m)).clamped()
        }
        AugmentationKind::GaussianNoise => {
            if p == 0.0 {
                return Ok(x.clamped());
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = x
                .data()
                .iter()
                .map(|&v| {
                    let z: f64 = rng.sample(StandardNormal);
                    v + p * z
                })
                .collect();
            from_data(x.shape(), out)
        }
        AugmentationKind::Jpeg => {
            let mut buf = Vec::new();
            let img = x.to_dynamic();
            let enc = JpegEncoder::new_with_quality(Cursor::new(&mut buf), p as u8);
            img.write_with_encoder(enc)?;
            let decoded = image::load_from_memory_with_format(&buf, image::ImageFormat::Jpeg)?;
            let back = ImageTensor::from_dynamic(&decoded);
            if back.shape() != x.shape() {
                // Single-channel inputs can come back as RGB or vice versa.
                let l = luma(&back);
                if c == 1 {
                    from_data(x.shape(), l)
                } else {
                    from_data(x.shape(), (0..3).flat_map(|_| l.iter().copied()).collect())
                }
            } else {
                back
            }
        }
        AugmentationKind::GaussianBlur => gaussian_blur(x, p as usize),
        AugmentationKind::Crop => center_crop_resize(x, p),
    })
}

fn gaussian_kernel(radius: usize, sigma: f64) -> Vec<f64> {
    let k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian of size `2k+1` with σ = 0.5k + 0.5, edge-replicated.
fn gaussian_blur(x: &ImageTensor, k: usize) -> ImageTensor {
    let kern = gaussian_kernel(k, 0.5 * k as f64 + 0.5);
    let [c, h, w] = x.shape();
    let r = k as isize;
    let d = x.data();
    let mut tmp = vec![0.0; c * h * w];
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let base = ch * h * w;
        for y in 0..h {
            for xx in 0..w {
                let mut s = 0.0;
                for (i, kv) in kern.iter().enumerate() {
                    let sx = (xx as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                    s += kv * d[base + y * w + sx];
                }
                tmp[base + y * w + xx] = s;
            }
        }
        for y in 0..h {
            for xx in 0..w {
                let mut s = 0.0;
                for (i, kv) in kern.iter().enumerate() {
                    let sy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                    s += kv * tmp[base + sy * w + xx];
                }
                out[base + y * w + xx] = s;
            }
        }
    }
    from_data(x.shape(), out)
}

/// Keeps the central `fraction` of each side, then resizes back bilinearly.
fn center_crop_resize(x: &ImageTensor, fraction: f64) -> ImageTensor {
    let [c, h, w] = x.shape();
    let ch_ = ((h as f64 * fraction).round() as usize).clamp(1, h);
    let cw = ((w as f64 * fraction).round() as usize).clamp(1, w);
    if ch_ == h && cw == w {
        return x.clamped();
    }
    let (y0, x0) = ((h - ch_) as f64 / 2.0, (w - cw) as f64 / 2.0);
    let d = x.data();
    let sample = |ch: usize, fy: f64, fx: f64| -> f64 {
        let fy = fy.clamp(0.0, (h - 1) as f64);
        let fx = fx.clamp(0.0, (w - 1) as f64);
        let (iy, ix) = (fy.floor() as usize, fx.floor() as usize);
        let (iy1, ix1) = ((iy + 1).min(h - 1), (ix + 1).min(w - 1));
        let (ty, tx) = (fy - iy as f64, fx - ix as f64);
        let at = |y: usize, x: usize| d[(ch * h + y) * w + x];
        (1.0 - ty) * ((1.0 - tx) * at(iy, ix) + tx * at(iy, ix1))
            + ty * ((1.0 - tx) * at(iy1, ix) + tx * at(iy1, ix1))
    };
    let mut out = vec![0.0; c * h * w];
    for chn in 0..c {
        for y in 0..h {
            // pixel-centre alignment between the crop window and the output grid
            let fy = y0 + (y as f64 + 0.5) * ch_ as f64 / h as f64 - 0.5;
            for xx in 0..w {
                let fx = x0 + (xx as f64 + 0.5) * cw as f64 / w as f64 - 0.5;
                out[(chn * h + y) * w + xx] = sample(chn, fy, fx);
            }
        }
    }
    from_data(x.shape(), out)
}
