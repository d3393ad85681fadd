//! Training objectives and their gradients.

use crate::error::{Error, Result};
use crate::imagecore::{forward_diff_x, forward_diff_x_adjoint, forward_diff_y, forward_diff_y_adjoint, Image};
use crate::nn::{PlaneResampler, Scalar, Tensor};
use crate::perception::FeatureStack;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Probabilities are clamped into `[PROB_CLAMP, 1 − PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub feature: f64,
    pub adversarial: f64,
    pub exclusion: f64,
    /// Weight of the image-space L1 term that replaces the feature loss when
    /// that is disabled.
    pub image_l1: f64,
    pub exclusion_scales: usize,
    /// Per-tap feature weights; `None` uses `1 / (C·H·W)` for each tap.
    pub layer_weights: Option<Vec<f64>>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { feature: 0.1, adversarial: 0.01, exclusion: 1.0, image_l1: 1.0, exclusion_scales: 3, layer_weights: None }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.exclusion_scales == 0 {
            return Err(Error::Config("exclusion_scales must be at least 1".into()));
        }
        if [self.feature, self.adversarial, self.exclusion, self.image_l1].iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Correctly rounded sum (Shewchuk's algorithm), so totals do not depend on
/// the order of their terms.
pub fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    // Round the partials to one value, correcting the half-way case.
    let Some(mut hi) = partials.pop() else { return 0.0 };
    let mut lo = 0.0;
    while let Some(y) = partials.pop() {
        let x = hi;
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    if let Some(&next) = partials.last() {
        if (lo < 0.0 && next < 0.0) || (lo > 0.0 && next > 0.0) {
            let y = lo * 2.0;
            let x = hi + y;
            if y == x - hi {
                hi = x;
            }
        }
    }
    hi
}

/// `1 / (C·H·W)` for each tap.
pub fn default_layer_weights<T: Scalar>(stack: &FeatureStack<T>) -> Vec<f64> {
    stack.layers.iter().map(|l| 1.0 / l.data().len() as f64).collect()
}

fn check_stacks<T: Scalar>(a: &FeatureStack<T>, b: &FeatureStack<T>, weights: &[f64]) -> Result<()> {
    if a.shapes() != b.shapes() {
        return Err(Error::Shape(format!("feature stacks differ: {:?} vs {:?}", a.shapes(), b.shapes())));
    }
    if weights.len() != a.layers.len() {
        return Err(Error::Config(format!("{} layer weights for {} taps", weights.len(), a.layers.len())));
    }
    Ok(())
}

/// `Σ_l λ_l ‖Φ_l(pred) − Φ_l(target)‖₁`.
pub fn feature_loss<T: Scalar>(pred: &FeatureStack<T>, target: &FeatureStack<T>, weights: &[f64]) -> Result<f64> {
    check_stacks(pred, target, weights)?;
    Ok(pred
        .layers
        .iter()
        .zip(&target.layers)
        .zip(weights)
        .map(|((p, t), w)| w * p.data().iter().zip(t.data()).map(|(a, b)| (a.as_f64() - b.as_f64()).abs()).sum::<f64>())
        .sum())
}

/// Feature loss and its gradient with respect to each predicted tap.
pub fn feature_loss_grad<T: Scalar>(
    pred: &FeatureStack<T>,
    target: &FeatureStack<T>,
    weights: &[f64],
) -> Result<(f64, Vec<Option<Tensor<T>>>)> {
    let value = feature_loss(pred, target, weights)?;
    let grads = pred
        .layers
        .iter()
        .zip(&target.layers)
        .zip(weights)
        .map(|((p, t), &w)| {
            (w != 0.0).then(|| {
                let (c, h, wd) = p.shape();
                let w = T::from_f64_lossy(w);
                let data = p.data().iter().zip(t.data()).map(|(&a, &b)| signum(a - b) * w).collect();
                Tensor::from_vec(c, h, wd, data)
            })
        })
        .collect();
    Ok((value, grads))
}

fn signum<T: Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn clamp_prob(p: f64) -> (f64, bool) {
    if p < PROB_CLAMP {
        (PROB_CLAMP, true)
    } else if p > 1.0 - PROB_CLAMP {
        (1.0 - PROB_CLAMP, true)
    } else {
        (p, false)
    }
}

/// `mean(log D(I, f_T) − log D(I, T))`.
pub fn discriminator_loss<T: Scalar>(fake: &Tensor<T>, real: &Tensor<T>) -> Result<f64> {
    Ok(discriminator_loss_grad(fake, real)?.0)
}

/// Discriminator loss with its gradients with respect to both probability maps.
pub fn discriminator_loss_grad<T: Scalar>(fake: &Tensor<T>, real: &Tensor<T>) -> Result<(f64, Tensor<T>, Tensor<T>)> {
    if fake.shape() != real.shape() {
        return Err(Error::Shape(format!("probability maps differ: {:?} vs {:?}", fake.shape(), real.shape())));
    }
    let n = fake.data().len() as f64;
    let (c, h, w) = fake.shape();
    let mut total = 0.0;
    let mut gf = Vec::with_capacity(fake.data().len());
    let mut gr = Vec::with_capacity(real.data().len());
    for (&f, &r) in fake.data().iter().zip(real.data()) {
        let (f, fc) = clamp_prob(f.as_f64());
        let (r, rc) = clamp_prob(r.as_f64());
        total += f.ln() - r.ln();
        gf.push(T::from_f64_lossy(if fc { 0.0 } else { 1.0 / (f * n) }));
        gr.push(T::from_f64_lossy(if rc { 0.0 } else { -1.0 / (r * n) }));
    }
    Ok((total / n, Tensor::from_vec(c, h, w, gf), Tensor::from_vec(c, h, w, gr)))
}

/// `mean(−log D(I, f_T))`.
pub fn adversarial_loss<T: Scalar>(fake: &Tensor<T>) -> f64 {
    adversarial_loss_grad(fake).0
}

pub fn adversarial_loss_grad<T: Scalar>(fake: &Tensor<T>) -> (f64, Tensor<T>) {
    let n = fake.data().len() as f64;
    let total: f64 = fake.data().iter().map(|p| -clamp_prob(p.as_f64()).0.ln()).sum();
    let grad = fake.map(|p| {
        let (p, clamped) = clamp_prob(p.as_f64());
        T::from_f64_lossy(if clamped { 0.0 } else { -1.0 / (p * n) })
    });
    (total / n, grad)
}

/// Mean absolute difference.
pub fn l1_loss(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data().len() as f64)
}

/// Mean absolute difference and its gradient with respect to `a`.
pub fn l1_loss_grad(a: &Image, b: &Image) -> Result<(f64, Image)> {
    let value = l1_loss(a, b)?;
    let n = a.data().len() as f64;
    Ok((value, a.zip_map(b, |x, y| signum(x - y) / n)?))
}

/// Reflection loss: mean absolute difference between predicted and true reflection.
pub fn reflection_loss(pred: &Image, target: &Image) -> Result<f64> {
    l1_loss(pred, target)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradientNormalization {
    /// `λ_T = sqrt(‖∇R‖/‖∇T‖)`, `λ_R = sqrt(‖∇T‖/‖∇R‖)`.
    Balanced,
    /// `λ_T = λ_R = 1`.
    Unit,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    X,
    Y,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExclusionTerm {
    /// 1-based scale index; scale `n` is downsampled by `2^(n−1)`.
    pub scale: usize,
    pub direction: Direction,
    /// `(λ_T, λ_R)`; `None` when either gradient field is identically zero.
    pub lambdas: Option<(f64, f64)>,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Exclusion {
    pub value: f64,
    pub terms: Vec<ExclusionTerm>,
    pub grad_t: Image,
    pub grad_r: Image,
}

fn downsample(img: &Image, factor: usize) -> (Image, Option<PlaneResampler>) {
    if factor == 1 {
        return (img.clone(), None);
    }
    let (h, w) = img.dims();
    let (oh, ow) = ((h / factor).max(1), (w / factor).max(1));
    let r = PlaneResampler::new(h, w, oh, ow);
    let mut out = Image::zeros(oh, ow);
    for c in 0..Image::CHANNELS {
        r.forward_plane(img.plane(c), out.plane_mut(c));
    }
    (out, Some(r))
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn exclusion_loss(t: &Image, r: &Image, scales: usize, normalization: GradientNormalization) -> Result<f64> {
    Ok(exclusion_loss_grad(t, r, scales, normalization)?.value)
}

/// Multi-scale exclusion loss with gradients for both layers. The `λ`
/// factors are held constant during differentiation.
pub fn exclusion_loss_grad(
    t: &Image,
    r: &Image,
    scales: usize,
    normalization: GradientNormalization,
) -> Result<Exclusion> {
    t.check_same_shape(r)?;
    if scales == 0 {
        return Err(Error::Config("exclusion loss needs at least one scale".into()));
    }
    let (h, w) = t.dims();
    let mut grad_t = Image::zeros(h, w);
    let mut grad_r = Image::zeros(h, w);
    let mut terms = Vec::with_capacity(2 * scales);
    let inv_n = 1.0 / scales as f64;
    for scale in 1..=scales {
        let factor = 1 << (scale - 1);
        let (ts, resampler) = downsample(t, factor);
        let (rs, _) = downsample(r, factor);
        let (sh, sw) = ts.dims();
        let plane = sh * sw;
        let mut gts = Image::zeros(sh, sw);
        let mut grs = Image::zeros(sh, sw);
        for direction in [Direction::X, Direction::Y] {
            let diff = |img: &Image| {
                let mut out = vec![0.0; 3 * plane];
                for c in 0..3 {
                    let dst = &mut out[c * plane..(c + 1) * plane];
                    match direction {
                        Direction::X => forward_diff_x(img.plane(c), sh, sw, dst),
                        Direction::Y => forward_diff_y(img.plane(c), sh, sw, dst),
                    }
                }
                out
            };
            let (a, b) = (diff(&ts), diff(&rs));
            let (na, nb) = (norm(&a), norm(&b));
            if na == 0.0 || nb == 0.0 {
                terms.push(ExclusionTerm { scale, direction, lambdas: None, value: 0.0 });
                continue;
            }
            let (lt, lr) = match normalization {
                // Both as square-root ratios so swapping the layers swaps the factors exactly.
                GradientNormalization::Balanced => ((nb / na).sqrt(), (na / nb).sqrt()),
                GradientNormalization::Unit => (1.0, 1.0),
            };
            let ta: Vec<f64> = a.iter().map(|v| (lt * v.abs()).tanh()).collect();
            let tb: Vec<f64> = b.iter().map(|v| (lr * v.abs()).tanh()).collect();
            let psi: Vec<f64> = ta.iter().zip(&tb).map(|(x, y)| x * y).collect();
            let value = norm(&psi);
            terms.push(ExclusionTerm { scale, direction, lambdas: Some((lt, lr)), value });
            if value == 0.0 {
                continue;
            }
            // d‖Ψ‖/dΨ = Ψ/‖Ψ‖, scaled by 1/N.
            let mut ga = vec![0.0; a.len()];
            let mut gb = vec![0.0; b.len()];
            for i in 0..psi.len() {
                let g = psi[i] / value * inv_n;
                ga[i] = g * tb[i] * lt * (1.0 - ta[i] * ta[i]) * a[i].signum() * (a[i] != 0.0) as u8 as f64;
                gb[i] = g * ta[i] * lr * (1.0 - tb[i] * tb[i]) * b[i].signum() * (b[i] != 0.0) as u8 as f64;
            }
            for c in 0..3 {
                let (ga, gb) = (&ga[c * plane..(c + 1) * plane], &gb[c * plane..(c + 1) * plane]);
                match direction {
                    Direction::X => {
                        forward_diff_x_adjoint(ga, sh, sw, gts.plane_mut(c));
                        forward_diff_x_adjoint(gb, sh, sw, grs.plane_mut(c));
                    }
                    Direction::Y => {
                        forward_diff_y_adjoint(ga, sh, sw, gts.plane_mut(c));
                        forward_diff_y_adjoint(gb, sh, sw, grs.plane_mut(c));
                    }
                }
            }
        }
        for c in 0..3 {
            match &resampler {
                None => {
                    for (d, s) in grad_t.plane_mut(c).iter_mut().zip(gts.plane(c)) {
                        *d += s;
                    }
                    for (d, s) in grad_r.plane_mut(c).iter_mut().zip(grs.plane(c)) {
                        *d += s;
                    }
                }
                Some(rs) => {
                    rs.adjoint_plane(gts.plane(c), grad_t.plane_mut(c));
                    rs.adjoint_plane(grs.plane(c), grad_r.plane_mut(c));
                }
            }
        }
    }
    let value = terms.iter().map(|t| t.value).sum::<f64>() * inv_n;
    Ok(Exclusion { value, terms, grad_t, grad_r })
}

/// Which terms enter the generator objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossToggles {
    pub feature: bool,
    pub adversarial: bool,
    pub exclusion: bool,
    pub reflection: bool,
    /// Balanced `λ` factors in the exclusion loss (otherwise `λ = 1`).
    pub grad_norm: bool,
    /// With `feature` off, train on an image-space L1 term instead.
    pub image_l1_substitute: bool,
}

impl Default for LossToggles {
    fn default() -> Self {
        Self {
            feature: true,
            adversarial: true,
            exclusion: true,
            reflection: true,
            grad_norm: true,
            image_l1_substitute: true,
        }
    }
}

impl LossToggles {
    pub fn normalization(&self) -> GradientNormalization {
        if self.grad_norm {
            GradientNormalization::Balanced
        } else {
            GradientNormalization::Unit
        }
    }

    pub fn uses_image_l1(&self) -> bool {
        !self.feature && self.image_l1_substitute
    }
}

/// Unweighted component values; `None` marks a component that was not part
/// of the objective for this step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub feature: Option<f64>,
    pub image_l1: Option<f64>,
    pub adversarial: Option<f64>,
    pub exclusion: Option<f64>,
    pub reflection: Option<f64>,
}

/// `w1·L_feat + w2·L_adv + w3·L_excl (+ L_R for synthetic samples)`, plus the
/// image-space substitute when present.
pub fn total_loss(components: &LossComponents, is_real: bool, weights: &LossWeights) -> f64 {
    let reflection = if is_real { None } else { components.reflection };
    exact_sum(
        [
            components.feature.map(|v| weights.feature * v),
            components.image_l1.map(|v| weights.image_l1 * v),
            components.adversarial.map(|v| weights.adversarial * v),
            components.exclusion.map(|v| weights.exclusion * v),
            reflection,
        ]
        .into_iter()
        .flatten(),
    )
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    pub epoch: u64,
    pub sample_id: String,
    pub is_real: bool,
    pub feature: Option<f64>,
    pub image_l1: Option<f64>,
    pub adversarial: Option<f64>,
    pub exclusion: Option<f64>,
    pub reflection: Option<f64>,
    pub discriminator: Option<f64>,
    pub total: f64,
}

impl LossRecord {
    pub fn new(step: u64, epoch: u64, sample_id: &str, is_real: bool, c: &LossComponents, weights: &LossWeights) -> Self {
        Self {
            step,
            epoch,
            sample_id: sample_id.to_string(),
            is_real,
            feature: c.feature,
            image_l1: c.image_l1,
            adversarial: c.adversarial,
            exclusion: c.exclusion,
            reflection: if is_real { None } else { c.reflection },
            discriminator: None,
            total: total_loss(c, is_real, weights),
        }
    }

    pub fn components(&self) -> LossComponents {
        LossComponents {
            feature: self.feature,
            image_l1: self.image_l1,
            adversarial: self.adversarial,
            exclusion: self.exclusion,
            reflection: self.reflection,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.feature, self.image_l1, self.adversarial, self.exclusion, self.reflection, self.discriminator]
            .iter()
            .flatten()
            .all(|v| v.is_finite())
            && self.total.is_finite()
    }
}

impl std::fmt::Display for LossRecord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let show = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"));
        write!(
            f,
            "step {} sample {} feat {} l1 {} adv {} excl {} refl {} disc {} total {:.6}",
            self.step,
            self.sample_id,
            show(self.feature),
            show(self.image_l1),
            show(self.adversarial),
            show(self.exclusion),
            show(self.reflection),
            show(self.discriminator),
            self.total
        )
    }
}

/// Append-only CSV training log.
pub struct LossLog {
    writer: csv::Writer<std::fs::File>,
}

impl LossLog {
    /// Opens `path` for appending; a header is written only to a new file.
    pub fn append(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
        let writer = csv::WriterBuilder::new().has_headers(fresh).from_writer(file);
        Ok(Self { writer })
    }

    pub fn write(&mut self, record: &LossRecord) -> Result<()> {
        self.writer.serialize(record)?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush().map_err(|e| Error::Io { path: "training log".into(), source: e })
    }
}

pub fn read_loss_log(path: &Path) -> Result<Vec<LossRecord>> {
    let mut reader = csv::Reader::from_path(path)?;
    reader.deserialize().map(|r| r.map_err(Error::from)).collect()
}
