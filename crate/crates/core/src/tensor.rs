//! Dense channel-major tensors for images and latents.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `[channels, height, width]`.
pub type Shape = [usize; 3];

pub(crate) fn numel(shape: Shape) -> usize {
    shape[0] * shape[1] * shape[2]
}

/// A channel-major `(C, H, W)` array of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor3 {
    shape: Shape,
    data: Vec<f64>,
}

impl Tensor3 {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::invalid(format!("degenerate shape {shape:?}")));
        }
        if data.len() != numel(shape) {
            return Err(Error::invalid(format!(
                "shape {shape:?} needs {} values, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0.0; numel(shape)],
        }
    }

    pub(crate) fn from_parts(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), numel(shape));
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.shape[1] + y) * self.shape[2] + x]
    }
}

/// An image in pixel space, values nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor(Tensor3);

impl ImageTensor {
    /// Builds an image, rejecting non-finite or out-of-range pixels and channel counts other
    /// than 1 or 3.
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if shape[0] != 1 && shape[0] != 3 {
            return Err(Error::invalid(format!(
                "images need 1 or 3 channels, got {}",
                shape[0]
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Tensor3::new(shape, data).map(Self)
    }

    /// Wraps decoder output. Range is not enforced: the linear fixture decodes unsquashed.
    pub(crate) fn from_raw(t: Tensor3) -> Self {
        Self(t)
    }

    pub fn filled(shape: Shape, value: f64) -> Result<Self> {
        Self::new(shape, vec![value; numel(shape)])
    }

    pub fn shape(&self) -> Shape {
        self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn tensor(&self) -> &Tensor3 {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor3 {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn in_unit_range(&self) -> bool {
        self.0.data.iter().all(|v| (0.0..=1.0).contains(v))
    }

    pub fn clamped(&self) -> Self {
        Self(Tensor3::from_parts(
            self.shape(),
            self.0.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        ))
    }

    /// Rounds every value to the nearest of 256 levels, as saving to an 8-bit file would.
    pub fn quantized_8bit(&self) -> Self {
        self.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
    }

    pub(crate) fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self(Tensor3::from_parts(
            self.shape(),
            self.0.data.iter().map(|&v| f(v)).collect(),
        ))
    }

    /// Loads an 8-bit PNG (or any format `image` decodes) as `[0, 1]` floats.
    ///
    /// Grayscale inputs are kept single-channel; everything else becomes RGB.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let img = image::open(path.as_ref())?;
        Ok(Self::from_dynamic(&img))
    }

    pub fn from_dynamic(img: &image::DynamicImage) -> Self {
        use image::DynamicImage as D;
        match img {
            D::ImageLuma8(_) | D::ImageLumaA8(_) | D::ImageLuma16(_) | D::ImageLumaA16(_) => {
                let g = img.to_luma8();
                let (w, h) = g.dimensions();
                let data = g.as_raw().iter().map(|&p| p as f64 / 255.0).collect();
                Self(Tensor3::from_parts([1, h as usize, w as usize], data))
            }
            _ => {
                let rgb = img.to_rgb8();
                let (w, h) = (rgb.width() as usize, rgb.height() as usize);
                let raw = rgb.as_raw();
                let mut data = vec![0.0; 3 * h * w];
                for c in 0..3 {
                    for i in 0..h * w {
                        data[c * h * w + i] = raw[i * 3 + c] as f64 / 255.0;
                    }
                }
                Self(Tensor3::from_parts([3, h, w], data))
            }
        }
    }

    /// Quantizes to 8 bits (after clamping) as an interleaved image.
    pub fn to_dynamic(&self) -> image::DynamicImage {
        let [c, h, w] = self.shape();
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        if c == 1 {
            let buf = self.data().iter().map(|&v| q(v)).collect();
            image::DynamicImage::ImageLuma8(
                image::GrayImage::from_raw(w as u32, h as u32, buf).expect("buffer size"),
            )
        } else {
            let mut buf = vec![0u8; 3 * h * w];
            for ch in 0..3 {
                for i in 0..h * w {
                    buf[i * 3 + ch] = q(self.data()[ch * h * w + i]);
                }
            }
            image::DynamicImage::ImageRgb8(
                image::RgbImage::from_raw(w as u32, h as u32, buf).expect("buffer size"),
            )
        }
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_dynamic()
            .save_with_format(path.as_ref(), image::ImageFormat::Png)?;
        Ok(())
    }
}

/// A point in the decoder's input space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentTensor(Tensor3);

impl LatentTensor {
    pub fn new(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("latent value {v} is not finite")));
        }
        Tensor3::new(shape, data).map(Self)
    }

    pub fn zeros(shape: Shape) -> Self {
        Self(Tensor3::zeros(shape))
    }

    pub(crate) fn from_raw(t: Tensor3) -> Self {
        Self(t)
    }

    pub fn shape(&self) -> Shape {
        self.0.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.0.data
    }

    pub fn tensor(&self) -> &Tensor3 {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor3 {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Squared Euclidean distance divided by the number of coordinates.
    pub fn mean_squared_distance(&self, other: &LatentTensor) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape(),
                actual: other.shape(),
            });
        }
        Ok(mean_sq_diff(self.data(), other.data()))
    }
}

pub(crate) fn mean_sq_diff(a: &[f64], b: &[f64]) -> f64 {
    let s: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    s / a.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_rejects_out_of_range_and_bad_channels() {
        assert!(ImageTensor::new([3, 2, 2], vec![0.5; 12]).is_ok());
        assert!(ImageTensor::new([3, 2, 2], vec![1.5; 12]).is_err());
        assert!(ImageTensor::new([2, 2, 2], vec![0.5; 8]).is_err());
        assert!(ImageTensor::new([3, 2, 2], vec![0.5; 11]).is_err());
    }

    #[test]
    fn png_round_trip_is_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..48).map(|i| i as f64 / 47.0).collect();
        let img = ImageTensor::new([3, 4, 4], data).unwrap();
        let path = dir.path().join("a.png");
        img.save_png(&path).unwrap();
        let back = ImageTensor::load(&path).unwrap();
        assert_eq!(back.shape(), [3, 4, 4]);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn grayscale_png_stays_single_channel() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageTensor::new([1, 3, 5], vec![0.25; 15]).unwrap();
        let path = dir.path().join("g.png");
        img.save_png(&path).unwrap();
        assert_eq!(ImageTensor::load(&path).unwrap().shape(), [1, 3, 5]);
    }

    #[test]
    fn latent_rejects_nan() {
        assert!(LatentTensor::new([1, 1, 2], vec![0.0, f64::NAN]).is_err());
    }
}
