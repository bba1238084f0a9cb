//! Image sources: a procedural generator and a PNG folder loader.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, Shape};

/// `n` procedurally generated images: a two-colour linear gradient background with
/// one to three soft-edged discs or rectangles on top.
///
/// Image `i` depends only on `(seed, i)`, so a longer run extends a shorter one.
pub fn synthetic_images(shape: Shape, n: usize, seed: u64) -> Result<Vec<ImageTensor>> {
    let [c, h, w] = shape;
    if c != 1 && c != 3 {
        return Err(Error::invalid(format!("images need 1 or 3 channels, got {c}")));
    }
    if h == 0 || w == 0 {
        return Err(Error::invalid(format!("degenerate image shape {shape:?}")));
    }
    (0..n)
        .map(|i| synthetic_image(shape, seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ i as u64))
        .collect()
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn smoothstep(edge: f64) -> f64 {
    // Coverage for a signed distance `edge` (positive inside), one pixel wide.
    (edge + 0.5).clamp(0.0, 1.0)
}

fn synthetic_image(shape: Shape, stream: u64) -> Result<ImageTensor> {
    let [c, h, w] = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    let (hf, wf) = (h as f64, w as f64);
    let mut rgb = vec![[0.0f64; 3]; h * w];

    let c0 = random_color(&mut rng);
    let c1 = random_color(&mut rng);
    let theta: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dx, dy) = (theta.cos(), theta.sin());
    let span = (dx.abs() * wf + dy.abs() * hf).max(1.0);
    for y in 0..h {
        for x in 0..w {
            let u = ((x as f64 - wf / 2.0) * dx + (y as f64 - hf / 2.0) * dy) / span + 0.5;
            let u = u.clamp(0.0, 1.0);
            for k in 0..3 {
                rgb[y * w + x][k] = c0[k] * (1.0 - u) + c1[k] * u;
            }
        }
    }

    let scale = hf.min(wf);
    let shapes = rng.random_range(1..=3);
    for _ in 0..shapes {
        let color = random_color(&mut rng);
        let cx = rng.random_range(0.0..wf);
        let cy = rng.random_range(0.0..hf);
        let is_disc: bool = rng.random();
        let r1 = rng.random_range(0.1..0.3) * scale;
        let r2 = rng.random_range(0.1..0.3) * scale;
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let inside = if is_disc {
                    r1 - ((px - cx).powi(2) + (py - cy).powi(2)).sqrt()
                } else {
                    (r1 - (px - cx).abs()).min(r2 - (py - cy).abs())
                };
                let a = smoothstep(inside);
                if a > 0.0 {
                    let p = &mut rgb[y * w + x];
                    for k in 0..3 {
                        p[k] = p[k] * (1.0 - a) + color[k] * a;
                    }
                }
            }
        }
    }

    let mut data = vec![0.0; c * h * w];
    for (i, p) in rgb.iter().enumerate() {
        if c == 1 {
            data[i] = 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2];
        } else {
            for k in 0..3 {
                data[k * h * w + i] = p[k];
            }
        }
    }
    ImageTensor::new(shape, data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect())
}

/// Every PNG directly under `dir`, sorted by file name. Images must already have `shape`.
pub fn load_png_folder(dir: impl AsRef<Path>, shape: Shape) -> Result<Vec<ImageTensor>> {
    let dir = dir.as_ref();
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::invalid(format!(
            "no PNG files found in {}",
            dir.display()
        )));
    }
    paths
        .iter()
        .map(|p| {
            let img = ImageTensor::load(p)?;
            if img.shape() != shape {
                return Err(Error::Format {
                    path: p.clone(),
                    message: format!("expected shape {shape:?}, got {:?}", img.shape()),
                });
            }
            Ok(img)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_is_deterministic_and_prefix_stable() {
        let a = synthetic_images([3, 16, 16], 5, 42).unwrap();
        let b = synthetic_images([3, 16, 16], 3, 42).unwrap();
        assert_eq!(&a[..3], &b[..]);
        assert_ne!(a, synthetic_images([3, 16, 16], 5, 43).unwrap());
        assert!(a.iter().all(ImageTensor::in_unit_range));
    }

    #[test]
    fn grayscale_generation() {
        let g = synthetic_images([1, 8, 12], 2, 0).unwrap();
        assert_eq!(g[0].shape(), [1, 8, 12]);
    }

    #[test]
    fn folder_loader_sorts_and_checks_shape() {
        let dir = tempfile::tempdir().unwrap();
        let imgs = synthetic_images([3, 8, 8], 2, 1).unwrap();
        imgs[1].save_png(dir.path().join("a.png")).unwrap();
        imgs[0].save_png(dir.path().join("b.png")).unwrap();
        std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let loaded = load_png_folder(dir.path(), [3, 8, 8]).unwrap();
        assert_eq!(loaded.len(), 2);
        assert!(loaded[0]
            .data()
            .iter()
            .zip(imgs[1].data())
            .all(|(a, b)| (a - b).abs() < 0.003));
        assert!(load_png_folder(dir.path(), [3, 4, 4]).is_err());
        let empty = tempfile::tempdir().unwrap();
        assert!(load_png_folder(empty.path(), [3, 8, 8]).is_err());
    }
}
