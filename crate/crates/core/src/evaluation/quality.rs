use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::ImageTensor;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityMetrics {
    pub ssim: f64,
    /// `+inf` for identical images.
    pub psnr: f64,
    pub l1: f64,
    pub l2: f64,
}

/// SSIM, PSNR, mean absolute and mean squared difference on the `[0, 1]` scale.
pub fn quality_metrics(x: &ImageTensor, y: &ImageTensor) -> Result<QualityMetrics> {
    if x.shape() != y.shape() {
        return Err(Error::ShapeMismatch {
            expected: x.shape(),
            actual: y.shape(),
        });
    }
    let n = x.len() as f64;
    let (mut l1, mut l2) = (0.0, 0.0);
    for (a, b) in x.data().iter().zip(y.data()) {
        l1 += (a - b).abs();
        l2 += (a - b) * (a - b);
    }
    let (l1, l2) = (l1 / n, l2 / n);
    let psnr = if l2 == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * l2.log10()
    };
    Ok(QualityMetrics {
        ssim: ssim(x, y),
        psnr,
        l1,
        l2,
    })
}

fn window_1d(size: usize) -> Vec<f64> {
    let r = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - r;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Gaussian-windowed SSIM over valid window positions, averaged over positions and
/// channels. The window shrinks to the image size for images smaller than 11 pixels.
pub fn ssim(x: &ImageTensor, y: &ImageTensor) -> f64 {
    let [c, h, w] = x.shape();
    let (wh, ww) = (SSIM_WINDOW.min(h), SSIM_WINDOW.min(w));
    let (kh, kw) = (window_1d(wh), window_1d(ww));
    let (oh, ow) = (h - wh + 1, w - ww + 1);
    let mut total = 0.0;
    for ch in 0..c {
        let xs = &x.data()[ch * h * w..(ch + 1) * h * w];
        let ys = &y.data()[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for (dy, ky) in kh.iter().enumerate() {
                    for (dx, kx) in kw.iter().enumerate() {
                        let wgt = ky * kx;
                        let i = (oy + dy) * w + ox + dx;
                        let (a, b) = (xs[i], ys[i]);
                        mx += wgt * a;
                        my += wgt * b;
                        sxx += wgt * (a * a);
                        syy += wgt * (b * b);
                        sxy += wgt * (a * b);
                    }
                }
                let vx = sxx - mx * mx;
                let vy = syy - my * my;
                let cov = sxy - mx * my;
                total += ((2.0 * mx * my + C1) * (2.0 * cov + C2))
                    / ((mx * mx + my * my + C1) * (vx + vy + C2));
            }
        }
    }
    total / (c * oh * ow) as f64
}
