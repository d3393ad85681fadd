use super::Image;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Reported PSNR when the images are numerically identical.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Side length of the SSIM Gaussian window.
pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

/// Peak signal-to-noise ratio in dB for a peak value of 1.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data().len() as f64;
    if mse < 1e-10 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (1.0 / mse).log10())
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let r = (SSIM_WINDOW / 2) as f64;
    let mut w = [0.0; SSIM_WINDOW];
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - r;
        *v = (-0.5 * d * d / (SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable Gaussian filter over the window positions fully inside the plane.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (oh, ow) = (h + 1 - SSIM_WINDOW, w + 1 - SSIM_WINDOW);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean structural similarity with an 11×11 Gaussian window (σ = 1.5),
/// `K1 = 0.01`, `K2 = 0.03`, data range 1, averaged over the three channels.
/// Only window positions fully inside the image contribute.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    let (h, w) = a.dims();
    if h.min(w) < SSIM_WINDOW {
        return Err(Error::Shape(format!("{h}x{w} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")));
    }
    let k = gaussian_window();
    let mut total = 0.0;
    for c in 0..Image::CHANNELS {
        let (pa, pb) = (a.plane(c), b.plane(c));
        let sq = |p: &[f64]| p.iter().map(|v| v * v).collect::<Vec<_>>();
        let cross: Vec<f64> = pa.iter().zip(pb).map(|(x, y)| x * y).collect();
        let mu_a = filter_valid(pa, h, w, &k);
        let mu_b = filter_valid(pb, h, w, &k);
        let e_aa = filter_valid(&sq(pa), h, w, &k);
        let e_bb = filter_valid(&sq(pb), h, w, &k);
        let e_ab = filter_valid(&cross, h, w, &k);
        let n = mu_a.len();
        let mut sum = 0.0;
        for i in 0..n {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = e_aa[i] - ma * ma;
            let var_b = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (ma * ma + mb * mb + SSIM_C1) * (var_a + var_b + SSIM_C2);
            sum += num / den;
        }
        total += sum / n as f64;
    }
    Ok(total / Image::CHANNELS as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
}

/// Per-image scores and their arithmetic means. Means are NaN for an empty
/// report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_image: Vec<ImageScore>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    /// Space the metrics were computed in, e.g. `"gamma-encoded 8-bit"`.
    pub color_space: String,
}

impl MetricReport {
    pub fn from_scores(per_image: Vec<ImageScore>, color_space: impl Into<String>) -> Self {
        let n = per_image.len() as f64;
        let mean_psnr = per_image.iter().map(|s| s.psnr).sum::<f64>() / n;
        let mean_ssim = per_image.iter().map(|s| s.ssim).sum::<f64>() / n;
        Self { per_image, mean_psnr, mean_ssim, color_space: color_space.into() }
    }
}
