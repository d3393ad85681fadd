//! Frozen VGG-19 feature extraction: tap activations for the perceptual loss
//! and hypercolumn features for the generator input.

use crate::error::{Error, Result};
use crate::imagecore::{LinearImage, GAMMA, MIN_SIDE};
use crate::nn::{leaky_relu_backward, leaky_relu_inplace, max_pool2x2, max_pool2x2_backward, Conv2d, ConvSpec};
use crate::nn::{PlaneResampler, Scalar, Tensor};
use crate::rng::splitmix;
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::Path;

/// Convolutions of VGG-19 up to `conv5_2`: `(name, in, out)`.
pub const VGG_LAYERS: [(&str, usize, usize); 14] = [
    ("conv1_1", 3, 64),
    ("conv1_2", 64, 64),
    ("conv2_1", 64, 128),
    ("conv2_2", 128, 128),
    ("conv3_1", 128, 256),
    ("conv3_2", 256, 256),
    ("conv3_3", 256, 256),
    ("conv3_4", 256, 256),
    ("conv4_1", 256, 512),
    ("conv4_2", 512, 512),
    ("conv4_3", 512, 512),
    ("conv4_4", 512, 512),
    ("conv5_1", 512, 512),
    ("conv5_2", 512, 512),
];

pub const TAP_NAMES: [&str; 5] = ["conv1_2", "conv2_2", "conv3_2", "conv4_2", "conv5_2"];
pub const TAP_CHANNELS: [usize; 5] = [64, 128, 256, 512, 512];
pub const HYPERCOLUMN_CHANNELS: usize = 3 + 64 + 128 + 256 + 512 + 512;

/// Per-channel ImageNet means on the 0–255 scale (RGB).
pub const IMAGENET_MEAN: [f64; 3] = [123.68, 116.779, 103.939];

/// Hypercolumn feature channels are multiplied by this so they sit on a
/// scale comparable to the image channels.
pub const HYPERCOLUMN_FEATURE_SCALE: f64 = 1.0 / 255.0;

/// Below this linear value the gamma curve is replaced by its chord through
/// the origin, keeping the derivative finite at zero.
pub const GAMMA_TOE: f64 = 1e-3;

const MAGIC: &[u8; 8] = b"RSVGG19\0";

/// Seed of the deterministic stand-in weights used by tests and tooling.
pub const STANDIN_SEED: u64 = 0x5647_4731_39;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Op {
    Conv(usize),
    Pool,
    Tap(usize),
}

const PLAN: [Op; 23] = [
    Op::Conv(0),
    Op::Conv(1),
    Op::Tap(0),
    Op::Pool,
    Op::Conv(2),
    Op::Conv(3),
    Op::Tap(1),
    Op::Pool,
    Op::Conv(4),
    Op::Conv(5),
    Op::Tap(2),
    Op::Conv(6),
    Op::Conv(7),
    Op::Pool,
    Op::Conv(8),
    Op::Conv(9),
    Op::Tap(3),
    Op::Conv(10),
    Op::Conv(11),
    Op::Pool,
    Op::Conv(12),
    Op::Conv(13),
    Op::Tap(4),
];

/// Post-rectification activations at the tap layers, shallowest first.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack<T> {
    pub layers: Vec<Tensor<T>>,
}

impl<T: Scalar> FeatureStack<T> {
    pub fn shapes(&self) -> Vec<(usize, usize, usize)> {
        self.layers.iter().map(Tensor::shape).collect()
    }
}

/// A differentiable, frozen feature network.
pub trait FeatureExtractor<T: Scalar> {
    type Trace;

    /// Features of an unconstrained linear-space image tensor (3×H×W), plus
    /// whatever the backward pass needs.
    fn forward_traced(&self, image: &Tensor<T>) -> Result<(FeatureStack<T>, Self::Trace)>;

    /// Gradient with respect to the image given gradients at the taps
    /// (`None` for taps that do not contribute).
    fn backward(&self, trace: &Self::Trace, tap_grads: &[Option<Tensor<T>>]) -> Tensor<T>;

    fn features(&self, image: &Tensor<T>) -> Result<FeatureStack<T>> {
        Ok(self.forward_traced(image)?.0)
    }
}

/// `255 · g(x) − mean`, with `g` the gamma encoding plus a linear toe.
fn encode(x: f64) -> f64 {
    if x >= GAMMA_TOE {
        x.powf(1.0 / GAMMA)
    } else {
        GAMMA_TOE.powf(1.0 / GAMMA) * x / GAMMA_TOE
    }
}

fn encode_slope(x: f64) -> f64 {
    if x >= GAMMA_TOE {
        x.powf(1.0 / GAMMA - 1.0) / GAMMA
    } else {
        GAMMA_TOE.powf(1.0 / GAMMA - 1.0)
    }
}

/// VGG input rendering of a linear-space image tensor.
pub fn preprocess<T: Scalar>(image: &Tensor<T>) -> Tensor<T> {
    Tensor::from_fn(3, image.height(), image.width(), |c, y, x| {
        T::from_f64_lossy(255.0 * encode(image.get(c, y, x).as_f64()) - IMAGENET_MEAN[c])
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vgg19<T> {
    pub convs: Vec<Conv2d<T>>,
    checksum: String,
}

/// Intermediate values kept by [`Vgg19::forward_traced`].
pub struct VggTrace<T> {
    image: Tensor<T>,
    /// `acts[0]` is the preprocessed input; each conv/pool appends its output.
    acts: Vec<Tensor<T>>,
    argmax: Vec<Vec<u32>>,
}

fn conv_spec(i: usize) -> ConvSpec {
    let (_, cin, cout) = VGG_LAYERS[i];
    ConvSpec::new(cin, cout, 3).padding(1)
}

impl<T: Scalar> Vgg19<T> {
    /// SHA-256 (hex) of the serialized weights.
    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    pub fn cast<U: Scalar>(&self) -> Vgg19<U> {
        Vgg19 { convs: self.convs.iter().map(Conv2d::cast).collect(), checksum: self.checksum.clone() }
    }

    /// Deterministic He-uniform weights with small positive biases. Not a
    /// trained network: used where the pretrained file is unavailable.
    pub fn standin(seed: u64) -> Self {
        let convs = (0..VGG_LAYERS.len())
            .map(|l| {
                let (weight, bias) = standin_layer(seed, l);
                Conv2d::from_parts(conv_spec(l), weight, bias).cast()
            })
            .collect::<Vec<Conv2d<T>>>();
        let checksum = sha256_hex(&serialize(&convs));
        Self { convs, checksum }
    }

    pub fn forward_traced_impl(&self, image: &Tensor<T>) -> Result<(FeatureStack<T>, VggTrace<T>)> {
        if image.channels() != 3 {
            return Err(Error::Shape(format!("VGG input needs 3 channels, got {}", image.channels())));
        }
        if image.height() < MIN_SIDE || image.width() < MIN_SIDE {
            return Err(Error::InvalidImage(format!(
                "{}x{} is below the {MIN_SIDE}x{MIN_SIDE} minimum for feature extraction",
                image.height(),
                image.width()
            )));
        }
        let mut acts = vec![preprocess(image)];
        let mut argmax = Vec::new();
        let mut layers = Vec::with_capacity(TAP_NAMES.len());
        for op in PLAN {
            let x = acts.last().expect("input activation");
            match op {
                Op::Conv(i) => {
                    let mut y = self.convs[i].forward(x);
                    leaky_relu_inplace(&mut y, T::zero());
                    acts.push(y);
                }
                Op::Pool => {
                    let (y, arg) = max_pool2x2(x);
                    acts.push(y);
                    argmax.push(arg);
                }
                Op::Tap(_) => layers.push(x.clone()),
            }
        }
        Ok((FeatureStack { layers }, VggTrace { image: image.clone(), acts, argmax }))
    }

    fn backward_impl(&self, trace: &VggTrace<T>, tap_grads: &[Option<Tensor<T>>]) -> Tensor<T> {
        assert_eq!(tap_grads.len(), TAP_NAMES.len(), "one gradient slot per tap");
        let (h, w) = (trace.image.height(), trace.image.width());
        let Some(deepest) = tap_grads.iter().rposition(Option::is_some) else {
            return Tensor::zeros(3, h, w);
        };
        let tap_pos = PLAN.iter().position(|&op| op == Op::Tap(deepest)).expect("tap in plan");
        // Index into `acts` of each op's output (taps share their input's slot).
        let mut slot = vec![0usize; PLAN.len()];
        let mut n = 0;
        for (k, op) in PLAN.iter().enumerate() {
            if !matches!(op, Op::Tap(_)) {
                n += 1;
            }
            slot[k] = n;
        }
        let mut grad: Option<Tensor<T>> = None;
        let mut pool = PLAN[..tap_pos].iter().filter(|op| **op == Op::Pool).count();
        for k in (0..=tap_pos).rev() {
            match PLAN[k] {
                Op::Tap(t) => {
                    if let Some(g) = &tap_grads[t] {
                        match grad.as_mut() {
                            Some(acc) => acc.add_assign(g),
                            None => grad = Some(g.clone()),
                        }
                    }
                }
                Op::Conv(i) => {
                    let mut g = grad.take().expect("gradient flows from the deepest tap");
                    leaky_relu_backward(&trace.acts[slot[k]], &mut g, T::zero());
                    grad = self.convs[i].backward(&trace.acts[slot[k] - 1], &g, None, true);
                }
                Op::Pool => {
                    pool -= 1;
                    let g = grad.take().expect("gradient flows from the deepest tap");
                    grad = Some(max_pool2x2_backward(trace.acts[slot[k] - 1].shape(), &trace.argmax[pool], &g));
                }
            }
        }
        let g = grad.expect("input gradient");
        Tensor::from_fn(3, h, w, |c, y, x| {
            g.get(c, y, x) * T::from_f64_lossy(255.0 * encode_slope(trace.image.get(c, y, x).as_f64()))
        })
    }
}

impl<T: Scalar> FeatureExtractor<T> for Vgg19<T> {
    type Trace = VggTrace<T>;

    fn forward_traced(&self, image: &Tensor<T>) -> Result<(FeatureStack<T>, VggTrace<T>)> {
        self.forward_traced_impl(image)
    }

    fn backward(&self, trace: &VggTrace<T>, tap_grads: &[Option<Tensor<T>>]) -> Tensor<T> {
        self.backward_impl(trace, tap_grads)
    }
}

fn standin_layer(seed: u64, layer: usize) -> (Vec<f32>, Vec<f32>) {
    let spec = conv_spec(layer);
    let base = splitmix(seed ^ (0x1000 + layer as u64));
    let unit = |i: u64| (splitmix(base.wrapping_add(i)) >> 11) as f64 / (1u64 << 53) as f64;
    let bound = (6.0 / (spec.in_channels * 9) as f64).sqrt();
    let n = spec.weight_len() as u64;
    let weight = (0..n).map(|i| ((2.0 * unit(i) - 1.0) * bound) as f32).collect();
    let bias = (0..spec.out_channels as u64).map(|o| (0.01 + 0.04 * unit(n + o)) as f32).collect();
    (weight, bias)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Layout: magic, `u32` layer count, then per layer a length-prefixed name,
/// `u32` out/in/kh/kw, `f32` weights `[out][in][kh][kw]` and `f32` biases,
/// all little-endian.
fn serialize<T: Scalar>(convs: &[Conv2d<T>]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(convs.len() as u32).to_le_bytes());
    for (conv, (name, _, _)) in convs.iter().zip(VGG_LAYERS) {
        let s = &conv.spec;
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        for d in [s.out_channels, s.in_channels, s.kernel, s.kernel] {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in conv.weight.iter().chain(&conv.bias) {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Weights("weights file is truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(n.checked_mul(4).ok_or_else(|| Error::Weights("layer size overflows".into()))?)?;
        Ok(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes"))).collect())
    }
}

fn deserialize(bytes: &[u8]) -> Result<Vec<Conv2d<f32>>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Weights("not a VGG-19 weights file (bad magic)".into()));
    }
    let count = r.u32()?;
    if count != VGG_LAYERS.len() {
        return Err(Error::Weights(format!("expected {} layers, found {count}", VGG_LAYERS.len())));
    }
    let mut convs = Vec::with_capacity(count);
    for (i, (name, cin, cout)) in VGG_LAYERS.iter().enumerate() {
        let len = r.u32()?;
        let found = String::from_utf8_lossy(r.take(len)?).into_owned();
        if found != *name {
            return Err(Error::Weights(format!("layer {i} is named {found}, expected {name}")));
        }
        let dims = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
        if dims != [*cout, *cin, 3, 3] {
            return Err(Error::Weights(format!("{name} has shape {dims:?}, expected [{cout}, {cin}, 3, 3]")));
        }
        let spec = conv_spec(i);
        let weight = r.f32s(spec.weight_len())?;
        let bias = r.f32s(spec.out_channels)?;
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::Weights(format!("{name} contains non-finite values")));
        }
        convs.push(Conv2d::from_parts(spec, weight, bias));
    }
    if r.pos != bytes.len() {
        return Err(Error::Weights("trailing bytes after the last layer".into()));
    }
    Ok(convs)
}

fn instructions(path: &Path) -> String {
    format!(
        "convert the ImageNet-pretrained torchvision VGG-19 with `python tools/export_vgg19.py --out {}` \
         (writes the weights and a .sha256 sidecar), or set `vgg_weights` to an existing converted file",
        path.display()
    )
}

/// Checksum sidecar written next to a weights file.
pub fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".sha256");
    s.into()
}

/// Loads and verifies VGG-19 weights. The digest must match `expected` when
/// given, otherwise the `.sha256` sidecar; a file with neither is refused.
pub fn load_vgg(path: &Path, expected: Option<&str>) -> Result<Vgg19<f32>> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Weights(format!("cannot read VGG-19 weights at {}: {e}; {}", path.display(), instructions(path))))?;
    let found = sha256_hex(&bytes);
    let expected = match expected {
        Some(e) => e.trim().to_ascii_lowercase(),
        None => {
            let side = sidecar_path(path);
            let text = std::fs::read_to_string(&side).map_err(|_| {
                Error::Weights(format!(
                    "no checksum for {}: pass the expected SHA-256 or provide {}; {}",
                    path.display(),
                    side.display(),
                    instructions(path)
                ))
            })?;
            text.split_whitespace().next().unwrap_or_default().to_ascii_lowercase()
        }
    };
    if expected != found {
        return Err(Error::Checksum { expected, found });
    }
    let convs = deserialize(&bytes).map_err(|e| Error::Weights(format!("{e}; {}", instructions(path))))?;
    Ok(Vgg19 { convs, checksum: found })
}

/// Writes weights plus a `.sha256` sidecar and returns the digest.
pub fn save_vgg<T: Scalar>(net: &Vgg19<T>, path: &Path) -> Result<String> {
    let bytes = serialize(&net.convs);
    let digest = sha256_hex(&bytes);
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    std::fs::write(&side, format!("{digest}\n")).map_err(|e| Error::io(side, e))?;
    Ok(digest)
}

pub fn extract_features<T: Scalar>(net: &Vgg19<T>, img: &LinearImage) -> Result<FeatureStack<T>> {
    net.features(&img.to_tensor())
}

/// `[I; up(conv1_2); …; up(conv5_2)] · scale`, all at the input resolution.
pub fn hypercolumn_from<T: Scalar>(image: &Tensor<T>, stack: &FeatureStack<T>) -> Tensor<T> {
    let (h, w) = (image.height(), image.width());
    let total = 3 + stack.layers.iter().map(Tensor::channels).sum::<usize>();
    let mut out = Tensor::zeros(total, h, w);
    out.data_mut()[..3 * h * w].copy_from_slice(image.data());
    let scale = T::from_f64_lossy(HYPERCOLUMN_FEATURE_SCALE);
    let mut c0 = 3;
    for layer in &stack.layers {
        let r = PlaneResampler::new(layer.height(), layer.width(), h, w);
        for c in 0..layer.channels() {
            let dst = out.plane_mut(c0 + c);
            r.forward_plane(layer.plane(c), dst);
            for v in dst.iter_mut() {
                *v = *v * scale;
            }
        }
        c0 += layer.channels();
    }
    out
}

pub fn hypercolumn<T: Scalar>(net: &Vgg19<T>, img: &LinearImage) -> Result<Tensor<T>> {
    let x = img.to_tensor();
    let stack = net.features(&x)?;
    Ok(hypercolumn_from(&x, &stack))
}
