//! Synthetic training data: a sharp transmission image plus a blurred,
//! attenuated, vignetted reflection image, summed in linear space.

use crate::error::{Error, Result};
use crate::imagecore::{write_png, Image, LinearImage};
use crate::rng::keyed_rng;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

/// A training sample. Synthetic samples carry the reflection layer exactly as
/// it was added into the input; real samples never carry one.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTriple {
    pub id: String,
    pub input: LinearImage,
    pub transmission: LinearImage,
    pub reflection: Option<LinearImage>,
    pub is_real: bool,
}

/// Maximum deviation of `input` from `clip(T + R)` for in-memory synthetic samples.
pub const RECONSTRUCTION_TOLERANCE: f64 = 1e-6;

impl LayerTriple {
    /// A synthetic sample; checks `input = clip(T + R)`.
    pub fn synthetic(
        id: impl Into<String>,
        input: LinearImage,
        transmission: LinearImage,
        reflection: LinearImage,
    ) -> Result<Self> {
        let t = Self { id: id.into(), input, transmission, reflection: Some(reflection), is_real: false };
        t.check_shapes()?;
        let err = t.reconstruction_error().unwrap_or(0.0);
        if err > RECONSTRUCTION_TOLERANCE {
            return Err(Error::Dataset(format!("sample {}: input deviates from clip(T+R) by {err}", t.id)));
        }
        Ok(t)
    }

    /// A sample read back from disk or resampled: reflection presence and
    /// shapes are checked, additivity only holds up to quantization.
    pub fn loaded(
        id: impl Into<String>,
        input: LinearImage,
        transmission: LinearImage,
        reflection: Option<LinearImage>,
        is_real: bool,
    ) -> Result<Self> {
        let id = id.into();
        if is_real && reflection.is_some() {
            return Err(Error::Dataset(format!("real sample {id} must not carry a reflection layer")));
        }
        if !is_real && reflection.is_none() {
            return Err(Error::Dataset(format!("synthetic sample {id} is missing its reflection layer")));
        }
        let t = Self { id, input, transmission, reflection, is_real };
        t.check_shapes()?;
        Ok(t)
    }

    pub fn real(id: impl Into<String>, input: LinearImage, transmission: LinearImage) -> Result<Self> {
        Self::loaded(id, input, transmission, None, true)
    }

    fn check_shapes(&self) -> Result<()> {
        self.input.check_same_shape(&self.transmission)?;
        if let Some(r) = &self.reflection {
            self.input.check_same_shape(r)?;
        }
        Ok(())
    }

    /// `max |I − clip(T + R)|`, or `None` for samples without a reflection.
    pub fn reconstruction_error(&self) -> Option<f64> {
        let r = self.reflection.as_ref()?;
        let err = self
            .input
            .data()
            .iter()
            .zip(self.transmission.data().iter().zip(r.data()))
            .map(|(&i, (&t, &r))| (i - (t + r).clamp(0.0, 1.0)).abs())
            .fold(0.0, f64::max);
        Some(err)
    }

    pub fn dims(&self) -> (usize, usize) {
        self.input.dims()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Candidate blur kernel sizes (odd, ≥ 3), drawn uniformly.
    pub kernel_sizes: Vec<usize>,
    pub decay_range: (f64, f64),
    pub vignette_strength_range: (f64, f64),
    pub seed: u64,
    /// Crop every sample to this `(height, width)`; by default a pair is
    /// cropped to the common extent of its two source images.
    #[serde(default)]
    pub output_size: Option<(usize, usize)>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            kernel_sizes: (3..=17).step_by(2).collect(),
            decay_range: (0.6, 1.0),
            vignette_strength_range: (0.0, 0.3),
            seed: 0,
            output_size: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_sizes.is_empty() || self.kernel_sizes.iter().any(|&k| k < 3 || k % 2 == 0) {
            return Err(Error::Config("kernel sizes must be odd and at least 3".into()));
        }
        let (d0, d1) = self.decay_range;
        if !(d0 > 0.0 && d0 <= d1 && d1 <= 1.2) {
            return Err(Error::Config(format!("decay range ({d0}, {d1}) must lie in (0, 1.2]")));
        }
        let (s0, s1) = self.vignette_strength_range;
        if !(0.0 <= s0 && s0 <= s1 && s1 < 1.0) {
            return Err(Error::Config(format!("vignette strength range ({s0}, {s1}) must lie in [0, 1)")));
        }
        Ok(())
    }
}

/// The per-sample random draws, recorded in the dataset manifest.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositeParams {
    pub kernel_size: usize,
    pub decay: f64,
    /// Normalized `(x, y)` position of the vignette center in `[0, 1]²`.
    pub vignette_center: (f64, f64),
    pub vignette_strength: f64,
}

/// Normalized 1-D Gaussian taps with σ = size / 4.
pub fn gaussian_kernel(size: usize) -> Result<Vec<f64>> {
    if size % 2 == 0 || !(3..=17).contains(&size) {
        return Err(Error::Config(format!("blur kernel size {size} must be odd and in [3, 17]")));
    }
    let sigma = size as f64 / 4.0;
    let r = (size / 2) as isize;
    let taps: Vec<f64> = (-r..=r).map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|v| v / s).collect())
}

/// Half-sample symmetric reflection (`c b a | a b c | c b a`).
fn reflect(i: isize, n: usize) -> usize {
    let period = 2 * n as isize;
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - 1 - m) as usize
    }
}

/// Separable Gaussian blur with symmetric border reflection.
pub fn gaussian_blur(img: &LinearImage, kernel_size: usize) -> Result<LinearImage> {
    let taps = gaussian_kernel(kernel_size)?;
    let r = (kernel_size / 2) as isize;
    let (h, w) = img.dims();
    let mut out = Image::zeros(h, w);
    let mut tmp = vec![0.0; h * w];
    for c in 0..Image::CHANNELS {
        let src = img.plane(c);
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] =
                    taps.iter().enumerate().map(|(k, t)| t * src[y * w + reflect(x as isize + k as isize - r, w)]).sum();
            }
        }
        let dst = out.plane_mut(c);
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] =
                    taps.iter().enumerate().map(|(k, t)| t * tmp[reflect(y as isize + k as isize - r, h) * w + x]).sum();
            }
        }
    }
    // Rounding can push a convex combination a hair past 1.
    LinearImage::new(out.map(|v| v.clamp(0.0, 1.0)))
}

/// Multiplies by `1 − strength · r²`, where `r` is the distance to the
/// center normalized so the farthest corner is at `r = 1`.
pub fn apply_vignette(img: &LinearImage, center: (f64, f64), strength: f64) -> Result<LinearImage> {
    if !(0.0..1.0).contains(&strength) {
        return Err(Error::Config(format!("vignette strength {strength} must lie in [0, 1)")));
    }
    let (h, w) = img.dims();
    let (cx, cy) = (center.0 * (w - 1) as f64, center.1 * (h - 1) as f64);
    let corners = [(0.0, 0.0), ((w - 1) as f64, 0.0), (0.0, (h - 1) as f64), ((w - 1) as f64, (h - 1) as f64)];
    let max_d2 = corners.iter().map(|&(x, y)| (x - cx).powi(2) + (y - cy).powi(2)).fold(0.0, f64::max);
    let mut out = img.as_image().clone();
    for c in 0..Image::CHANNELS {
        for y in 0..h {
            for x in 0..w {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                let r2 = if max_d2 > 0.0 { d2 / max_d2 } else { 0.0 };
                out.set(c, y, x, img.get(c, y, x) * (1.0 - strength * r2));
            }
        }
    }
    LinearImage::new(out)
}

/// Builds a synthetic triple. The stored reflection is the processed layer
/// (blurred, vignetted, attenuated) that was actually added to the input.
pub fn compose(
    id: impl Into<String>,
    transmission: &LinearImage,
    reflection_raw: &LinearImage,
    params: &CompositeParams,
) -> Result<LayerTriple> {
    transmission.check_same_shape(reflection_raw)?;
    let blurred = gaussian_blur(reflection_raw, params.kernel_size)?;
    let vignetted = apply_vignette(&blurred, params.vignette_center, params.vignette_strength)?;
    // Decays above 1 can exceed the unit range; the layer is stored clipped.
    let reflection = LinearImage::new(vignetted.map(|v| (v * params.decay).clamp(0.0, 1.0)))?;
    let input = LinearImage::new(transmission.zip_map(&reflection, |t, r| (t + r).clamp(0.0, 1.0))?)?;
    LayerTriple::synthetic(id, input, transmission.clone(), reflection)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub triple: LayerTriple,
    pub params: CompositeParams,
    pub transmission_index: usize,
    pub reflection_index: usize,
}

fn crop(img: &LinearImage, top: usize, left: usize, h: usize, w: usize) -> Result<LinearImage> {
    LinearImage::new(Image::from_fn(h, w, |c, y, x| img.get(c, top + y, left + x)))
}

fn random_crop(img: &LinearImage, h: usize, w: usize, rng: &mut impl Rng) -> Result<LinearImage> {
    let (ih, iw) = img.dims();
    if ih < h || iw < w {
        return Err(Error::Dataset(format!("pool image {ih}x{iw} is smaller than the requested {h}x{w}")));
    }
    if (ih, iw) == (h, w) {
        return Ok(img.clone());
    }
    let top = rng.random_range(0..=ih - h);
    let left = rng.random_range(0..=iw - w);
    crop(img, top, left, h, w)
}

/// Generates `n` synthetic triples. Sample `i` depends only on
/// `(cfg.seed, i)`, so results do not depend on generation order.
pub fn synth_dataset(
    transmission_pool: &[LinearImage],
    reflection_pool: &[LinearImage],
    n: usize,
    cfg: &SynthConfig,
) -> Result<Vec<SynthSample>> {
    cfg.validate()?;
    if n > 0 && (transmission_pool.is_empty() || reflection_pool.is_empty()) {
        return Err(Error::Dataset("transmission and reflection pools must be non-empty".into()));
    }
    (0..n).map(|i| synth_sample(transmission_pool, reflection_pool, i, cfg)).collect()
}

fn synth_sample(
    transmission_pool: &[LinearImage],
    reflection_pool: &[LinearImage],
    index: usize,
    cfg: &SynthConfig,
) -> Result<SynthSample> {
    let mut rng = keyed_rng(cfg.seed, &[0x5359_4e54, index as u64]);
    let ti = rng.random_range(0..transmission_pool.len());
    let ri = rng.random_range(0..reflection_pool.len());
    let params = CompositeParams {
        kernel_size: cfg.kernel_sizes[rng.random_range(0..cfg.kernel_sizes.len())],
        decay: uniform(&mut rng, cfg.decay_range),
        vignette_center: (rng.random::<f64>(), rng.random::<f64>()),
        vignette_strength: uniform(&mut rng, cfg.vignette_strength_range),
    };
    let (t_src, r_src) = (&transmission_pool[ti], &reflection_pool[ri]);
    let (h, w) = cfg.output_size.unwrap_or((t_src.height().min(r_src.height()), t_src.width().min(r_src.width())));
    let t = random_crop(t_src, h, w, &mut rng)?;
    let r = random_crop(r_src, h, w, &mut rng)?;
    let triple = compose(format!("{index:05}"), &t, &r, &params)?;
    Ok(SynthSample { triple, params, transmission_index: ti, reflection_index: ri })
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

pub const MANIFEST_FILE: &str = "manifest.tsv";

/// Writes `blended/`, `transmission/`, `reflection/` PNGs (gamma-encoded)
/// and a tab-separated manifest of the per-sample draws.
pub fn write_synth_dataset(out_dir: &Path, samples: &[SynthSample], cfg: &SynthConfig) -> Result<()> {
    let mut manifest = String::new();
    writeln!(
        manifest,
        "# seed={} decay_range={:?} vignette_strength_range={:?} kernel_sizes={:?}",
        cfg.seed, cfg.decay_range, cfg.vignette_strength_range, cfg.kernel_sizes
    )
    .unwrap();
    manifest.push_str(
        "id\tkernel_size\tdecay\tvignette_cx\tvignette_cy\tvignette_strength\ttransmission_index\treflection_index\n",
    );
    for s in samples {
        let t = &s.triple;
        write_png(&out_dir.join("blended").join(format!("{}.png", t.id)), &t.input, false)?;
        write_png(&out_dir.join("transmission").join(format!("{}.png", t.id)), &t.transmission, false)?;
        if let Some(r) = &t.reflection {
            write_png(&out_dir.join("reflection").join(format!("{}.png", t.id)), r, false)?;
        }
        let p = &s.params;
        writeln!(
            manifest,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            t.id,
            p.kernel_size,
            p.decay,
            p.vignette_center.0,
            p.vignette_center.1,
            p.vignette_strength,
            s.transmission_index,
            s.reflection_index
        )
        .unwrap();
    }
    let path = out_dir.join(MANIFEST_FILE);
    std::fs::write(&path, manifest).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn textured(h: usize, w: usize, seed: usize) -> LinearImage {
        LinearImage::from_fn(h, w, |c, y, x| (((x * 7 + y * 13 + c * 5 + seed * 11) % 23) as f64 / 22.0) * 0.9 + 0.05)
            .unwrap()
    }

    fn params(k: usize, decay: f64, strength: f64) -> CompositeParams {
        CompositeParams { kernel_size: k, decay, vignette_center: (0.3, 0.6), vignette_strength: strength }
    }

    #[test]
    fn blur_preserves_constants() {
        let img = LinearImage::filled(20, 18, 0.42).unwrap();
        for k in (3..=17).step_by(2) {
            let b = gaussian_blur(&img, k).unwrap();
            assert!(b.data().iter().all(|v| (v - 0.42).abs() < 1e-9));
        }
    }

    #[test]
    fn blur_of_impulse_is_the_kernel() {
        let mut img = Image::zeros(17, 17);
        for c in 0..3 {
            img.set(c, 8, 8, 1.0);
        }
        let b = gaussian_blur(&LinearImage::new(img).unwrap(), 3).unwrap();
        // Direct 2-D evaluation of the normalized Gaussian, σ = 3/4.
        let g = |d: f64| (-d * d / (2.0 * 0.75 * 0.75)).exp();
        let norm: f64 = (-1..=1).map(|d| g(d as f64)).sum();
        let mut total = 0.0;
        for y in 0..17 {
            for x in 0..17 {
                let v = b.get(0, y, x);
                total += v;
                let (dy, dx) = (y as isize - 8, x as isize - 8);
                let expected =
                    if dy.abs() <= 1 && dx.abs() <= 1 { g(dy as f64) * g(dx as f64) / (norm * norm) } else { 0.0 };
                assert!((v - expected).abs() < 1e-12);
            }
        }
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn wide_blur_on_step_edge_is_monotone_and_preserves_sum() {
        let img = LinearImage::from_fn(20, 24, |_, _, x| if x >= 12 { 0.9 } else { 0.1 }).unwrap();
        let b = gaussian_blur(&img, 17).unwrap();
        let row: Vec<f64> = (0..24).map(|x| b.get(0, 5, x)).collect();
        assert!(row.windows(2).all(|p| p[1] >= p[0] - 1e-15));
        assert!(row[11] > 0.1 && row[12] < 0.9);
        let before: f64 = img.data().iter().sum();
        let after: f64 = b.data().iter().sum();
        assert!((before - after).abs() < 1e-6);
    }

    #[test]
    fn blur_rejects_even_and_out_of_range_sizes() {
        let img = LinearImage::filled(16, 16, 0.5).unwrap();
        assert!(gaussian_blur(&img, 4).is_err());
        assert!(gaussian_blur(&img, 19).is_err());
        assert!(gaussian_blur(&img, 1).is_err());
    }

    #[test]
    fn vignette_examples() {
        let img = LinearImage::filled(16, 21, 0.8).unwrap();
        assert_eq!(apply_vignette(&img, (0.4, 0.7), 0.0).unwrap(), img);
        // Center at the top-left corner: the bottom-right corner is farthest.
        let v = apply_vignette(&img, (0.0, 0.0), 0.3).unwrap();
        assert!((v.get(0, 15, 20) - 0.8 * 0.7).abs() < 1e-12);
        assert_eq!(v.get(1, 0, 0), 0.8);
        let centered = apply_vignette(&img, (0.5, 0.5), 0.3).unwrap();
        assert_eq!(centered.get(2, 0, 10), 0.8 * (1.0 - 0.3 * (7.5f64 * 7.5 / (10.0 * 10.0 + 7.5 * 7.5))));
        assert!(apply_vignette(&img, (0.5, 0.5), 1.0).is_err());
    }

    #[test]
    fn empty_reflection_leaves_transmission() {
        let t = textured(16, 16, 1);
        let z = LinearImage::filled(16, 16, 0.0).unwrap();
        let s = compose("a", &t, &z, &params(9, 0.8, 0.2)).unwrap();
        assert_eq!(s.input, t);
        assert!(s.reflection.unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_layers_add() {
        let t = LinearImage::filled(16, 16, 0.3).unwrap();
        let r = LinearImage::filled(16, 16, 0.4).unwrap();
        let s = compose("a", &t, &r, &params(7, 0.5, 0.0)).unwrap();
        assert!(s.input.data().iter().all(|v| (v - 0.5).abs() < 1e-12));
        assert!(s.reflection.unwrap().data().iter().all(|v| (v - 0.2).abs() < 1e-12));
    }

    #[test]
    fn saturation_clips() {
        let t = LinearImage::filled(16, 16, 0.8).unwrap();
        let r = LinearImage::filled(16, 16, 0.6).unwrap();
        let s = compose("a", &t, &r, &params(3, 1.0, 0.0)).unwrap();
        assert!(s.input.data().iter().all(|&v| v == 1.0));
        let r = s.reflection.as_ref().unwrap();
        assert!((s.input.get(0, 3, 3) - (s.transmission.get(0, 3, 3) + r.get(0, 3, 3))).abs() > 0.3);
        assert!(s.reconstruction_error().unwrap() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        assert!(compose("a", &textured(16, 16, 0), &textured(16, 17, 0), &params(3, 1.0, 0.0)).is_err());
    }

    #[test]
    fn input_is_monotone_in_decay() {
        let t = textured(16, 20, 2);
        let r = textured(16, 20, 5);
        let grid = [0.2, 0.4, 0.6, 0.8, 1.0];
        let inputs: Vec<_> = grid.iter().map(|&d| compose("a", &t, &r, &params(5, d, 0.1)).unwrap().input).collect();
        for pair in inputs.windows(2) {
            assert!(pair[0].data().iter().zip(pair[1].data()).all(|(a, b)| a <= b));
        }
    }

    #[test]
    fn dataset_generation() {
        let pool_t = vec![textured(20, 24, 0), textured(18, 30, 1)];
        let pool_r = vec![textured(22, 22, 2)];
        let cfg = SynthConfig { seed: 9, ..Default::default() };
        assert!(synth_dataset(&pool_t, &pool_r, 0, &cfg).unwrap().is_empty());
        let a = synth_dataset(&pool_t, &pool_r, 12, &cfg).unwrap();
        let b = synth_dataset(&pool_t, &pool_r, 12, &cfg).unwrap();
        assert_eq!(a, b);
        for s in &a {
            assert!(!s.triple.is_real);
            assert!(s.triple.reconstruction_error().unwrap() <= RECONSTRUCTION_TOLERANCE);
            assert_eq!(s.triple.dims().0, if s.transmission_index == 0 { 20 } else { 18 });
        }
        assert!(synth_dataset(&[], &pool_r, 1, &cfg).is_err());
        let other = synth_dataset(&pool_t, &pool_r, 12, &SynthConfig { seed: 10, ..Default::default() }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn config_validation() {
        assert!(SynthConfig::default().validate().is_ok());
        assert!(SynthConfig { kernel_sizes: vec![4], ..Default::default() }.validate().is_err());
        assert!(SynthConfig { decay_range: (0.0, 1.0), ..Default::default() }.validate().is_err());
        assert!(SynthConfig { vignette_strength_range: (0.0, 1.0), ..Default::default() }.validate().is_err());
    }
}
