//! Image representation, gamma conversion, finite-difference gradients and
//! full-reference quality metrics.

mod gradient;
mod io;
mod metrics;

pub use gradient::{gradient, GradientField};
pub(crate) use gradient::{forward_diff_x, forward_diff_x_adjoint, forward_diff_y, forward_diff_y_adjoint};
pub use io::{read_png, write_png};
pub use metrics::{psnr, ssim, ImageScore, MetricReport, PSNR_CAP_DB, SSIM_WINDOW};

use crate::error::{Error, Result};
use crate::nn::{Scalar, Tensor};
use std::ops::Deref;

/// Exponent of the power-law gamma model.
pub const GAMMA: f64 = 2.2;

/// Smallest side length the network's downsampling chain supports.
pub const MIN_SIDE: usize = 16;

/// A three-channel floating-point image, planar (`R` plane, `G` plane, `B`
/// plane). Values are unconstrained; see [`LinearImage`] for the validated
/// radiometric form.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != Self::CHANNELS * height * width {
            return Err(Error::Shape(format!(
                "expected {} values for {height}x{width}x3, got {}",
                Self::CHANNELS * height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self { height, width, data: vec![value; Self::CHANNELS * height * width] }
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    /// Builds an image from `f(channel, row, column)`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(Self::CHANNELS * height * width);
        for c in 0..Self::CHANNELS {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { height: self.height, width: self.width, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn zip_map(&self, other: &Image, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { height: self.height, width: self.width, data })
    }

    pub fn check_same_shape(&self, other: &Image) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Shape(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    /// Clamps every value into `[0, 1]`, returning the clamped image and the
    /// number of values that were outside the range.
    pub fn clip_unit(&self) -> (Image, usize) {
        let clipped = self.data.iter().filter(|v| !(0.0..=1.0).contains(*v)).count();
        (self.map(|v| v.clamp(0.0, 1.0)), clipped)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::from_vec(
            Self::CHANNELS,
            self.height,
            self.width,
            self.data.iter().map(|&v| T::from_f64_lossy(v)).collect(),
        )
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        if t.channels() != Self::CHANNELS {
            return Err(Error::Shape(format!("expected 3 channels, got {}", t.channels())));
        }
        Self::new(t.height(), t.width(), t.data().iter().map(|v| v.as_f64()).collect())
    }
}

/// An RGB image in linear radiometric space: finite, in `[0, 1]`, at least
/// [`MIN_SIDE`] pixels on each side.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearImage(Image);

impl LinearImage {
    pub fn new(image: Image) -> Result<Self> {
        if image.height < MIN_SIDE || image.width < MIN_SIDE {
            return Err(Error::InvalidImage(format!(
                "{}x{} is below the {MIN_SIDE}x{MIN_SIDE} minimum",
                image.height, image.width
            )));
        }
        if let Some(v) = image.data.iter().find(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))) {
            return Err(Error::InvalidImage(format!("value {v} outside [0, 1]")));
        }
        Ok(Self(image))
    }

    /// Clamps into `[0, 1]` and validates the size.
    pub fn from_clipped(image: &Image) -> Result<Self> {
        if !image.is_finite() {
            return Err(Error::InvalidImage("non-finite values".into()));
        }
        Self::new(image.clip_unit().0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(Image::filled(height, width, value))
    }

    pub fn from_fn(height: usize, width: usize, f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        Self::new(Image::from_fn(height, width, f))
    }

    pub fn as_image(&self) -> &Image {
        &self.0
    }

    pub fn into_image(self) -> Image {
        self.0
    }
}

impl Deref for LinearImage {
    type Target = Image;

    fn deref(&self) -> &Image {
        &self.0
    }
}

impl AsRef<Image> for LinearImage {
    fn as_ref(&self) -> &Image {
        &self.0
    }
}

/// An 8-bit gamma-encoded image, interleaved (`HWC`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedImage {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl EncodedImage {
    pub fn rgb(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::Shape(format!("expected {} bytes, got {}", height * width * 3, data.len())));
        }
        Ok(Self { height, width, channels: 3, data })
    }
}

/// `(v / 255)^γ`.
pub fn decode_gamma(v: u8) -> f64 {
    (v as f64 / 255.0).powf(GAMMA)
}

/// `round(255 · x^(1/γ))` after clamping into `[0, 1]`.
pub fn encode_gamma(x: f64) -> u8 {
    let x = if x.is_nan() { 0.0 } else { x.clamp(0.0, 1.0) };
    (255.0 * x.powf(1.0 / GAMMA)).round() as u8
}

/// Removes the power-law gamma from an 8-bit RGB image.
pub fn srgb_to_linear(img: &EncodedImage) -> Result<LinearImage> {
    if img.channels != 3 {
        return Err(Error::Shape(format!("expected 3 channels, got {}", img.channels)));
    }
    if img.data.len() != img.height * img.width * 3 {
        return Err(Error::Shape("pixel buffer does not match dimensions".into()));
    }
    let (h, w) = (img.height, img.width);
    LinearImage::new(Image::from_fn(h, w, |c, y, x| decode_gamma(img.data[(y * w + x) * 3 + c])))
}

/// Gamma-encodes to 8 bits. Values outside `[0, 1]` are clipped; their count
/// is returned alongside the image.
pub fn linear_to_srgb(img: &Image) -> (EncodedImage, usize) {
    let (h, w) = img.dims();
    let mut data = vec![0u8; h * w * 3];
    let mut clipped = 0;
    for c in 0..3 {
        for (i, &v) in img.plane(c).iter().enumerate() {
            if !(0.0..=1.0).contains(&v) {
                clipped += 1;
            }
            data[i * 3 + c] = encode_gamma(v);
        }
    }
    (EncodedImage { height: h, width: w, channels: 3, data }, clipped)
}

/// The gamma-encoded, 8-bit-quantized rendering of a linear image, rescaled
/// to `[0, 1]`: what a viewer of the exported PNG sees.
pub fn quantized_display(img: &Image) -> Image {
    img.map(|v| encode_gamma(v) as f64 / 255.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encoded_constant(v: u8) -> EncodedImage {
        EncodedImage::rgb(16, 16, vec![v; 16 * 16 * 3]).unwrap()
    }

    #[test]
    fn gamma_fixed_points_and_midpoint() {
        assert_eq!(srgb_to_linear(&encoded_constant(0)).unwrap().get(0, 0, 0), 0.0);
        assert_eq!(srgb_to_linear(&encoded_constant(255)).unwrap().get(1, 3, 3), 1.0);
        let mid = srgb_to_linear(&encoded_constant(128)).unwrap().get(2, 5, 7);
        assert!((mid - (128.0f64 / 255.0).powf(2.2)).abs() < 1e-15);
        assert!((mid - 0.219_52).abs() < 5e-6);
    }

    #[test]
    fn encoding_examples() {
        assert_eq!(encode_gamma(0.0), 0);
        assert_eq!(encode_gamma(1.0), 255);
        assert_eq!(encode_gamma(0.219_52), 128);
        assert_eq!(encode_gamma(decode_gamma(128)), 128);
    }

    #[test]
    fn non_rgb_input_is_rejected() {
        let gray = EncodedImage { height: 16, width: 16, channels: 1, data: vec![0; 256] };
        assert!(matches!(srgb_to_linear(&gray), Err(Error::Shape(_))));
    }

    #[test]
    fn eight_bit_round_trip_within_one_level() {
        for v in 0..=255u8 {
            let back = encode_gamma(decode_gamma(v));
            assert!((back as i32 - v as i32).abs() <= 1, "{v} -> {back}");
        }
    }

    #[test]
    fn decoding_is_monotone() {
        for v in 0..255u8 {
            assert!(decode_gamma(v) <= decode_gamma(v + 1));
        }
    }

    #[test]
    fn out_of_range_values_are_counted_not_rejected() {
        let img = Image::from_fn(2, 2, |c, y, _| if c == 0 && y == 0 { 1.5 } else if c == 1 { -0.2 } else { 0.5 });
        let (enc, clipped) = linear_to_srgb(&img);
        assert_eq!(clipped, 2 + 4);
        assert_eq!(enc.data[0], 255);
        assert_eq!(enc.data[1], 0);
    }

    #[test]
    fn linear_image_invariants() {
        assert!(LinearImage::filled(15, 32, 0.5).is_err());
        assert!(LinearImage::filled(16, 16, 1.01).is_err());
        assert!(LinearImage::filled(16, 16, f64::NAN).is_err());
        assert!(LinearImage::filled(16, 16, 1.0).is_ok());
    }
}
