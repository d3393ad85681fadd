//! The dilated fully convolutional generator and the conditional patch
//! discriminator.

use crate::error::{Error, Result};
use crate::nn::{leaky_relu_backward, leaky_relu_inplace, sigmoid_inplace, Conv2d, ConvGrads, ConvSpec, Scalar, Tensor};
use crate::perception::{sha256_hex, HYPERCOLUMN_CHANNELS};
use crate::rng::keyed_rng;
use rand_distr::{Distribution, Normal};

pub const LEAK: f64 = 0.2;
pub const GENERATOR_WIDTH: usize = 64;
pub const DILATIONS: [usize; 8] = [1, 2, 4, 8, 16, 32, 64, 128];
pub const OUTPUT_CHANNELS: usize = 6;
/// Side of the square region of the input that can influence one output pixel.
pub const RECEPTIVE_FIELD: usize = 1 + 2 * (1 + 2 + 4 + 8 + 16 + 32 + 64 + 128) + 2;

pub const DISCRIMINATOR_WIDTH: usize = 64;
pub const DISCRIMINATOR_DEPTH: usize = 4;
/// Spatial reduction of the discriminator's probability map.
pub const DISCRIMINATOR_STRIDE: usize = 16;

/// Layer stack shared by both networks.
pub trait Network<T: Scalar> {
    fn convs(&self) -> &[Conv2d<T>];
    fn convs_mut(&mut self) -> &mut [Conv2d<T>];

    fn param_count(&self) -> usize {
        self.convs().iter().map(|c| c.spec.param_count()).sum()
    }

    /// Lengths of the parameter slices in [`Network::params_mut`] order.
    fn param_lens(&self) -> Vec<usize> {
        self.convs().iter().flat_map(|c| [c.weight.len(), c.bias.len()]).collect()
    }

    /// Weight and bias slices, layer by layer.
    fn params_mut(&mut self) -> Vec<&mut [T]> {
        self.convs_mut().iter_mut().flat_map(|c| [c.weight.as_mut_slice(), c.bias.as_mut_slice()]).collect()
    }

    fn zero_grads(&self) -> Vec<ConvGrads<T>> {
        self.convs().iter().map(|c| ConvGrads::zeros(&c.spec)).collect()
    }

    /// SHA-256 over every parameter in single precision, little-endian.
    fn checksum(&self) -> String {
        let mut bytes = Vec::new();
        for c in self.convs() {
            for v in c.weight.iter().chain(&c.bias) {
                bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        sha256_hex(&bytes)
    }

    fn is_finite(&self) -> bool {
        self.convs().iter().all(|c| c.weight.iter().chain(&c.bias).all(|v| v.is_finite()))
    }
}

/// Gradient slices matching [`Network::params_mut`].
pub fn grad_slices<T: Scalar>(grads: &[ConvGrads<T>]) -> Vec<&[T]> {
    grads.iter().flat_map(|g| [g.weight.as_slice(), g.bias.as_slice()]).collect()
}

/// He-normal weights (standard deviation `sqrt(2 / fan_in)`), zero biases.
fn he_init<T: Scalar>(spec: ConvSpec, seed: u64, tag: u64, layer: usize) -> Conv2d<T> {
    let fan_in = spec.in_channels * spec.kernel * spec.kernel;
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive standard deviation");
    let mut rng = keyed_rng(seed, &[tag, layer as u64]);
    let weight = (0..spec.weight_len()).map(|_| T::from_f64_lossy(normal.sample(&mut rng))).collect();
    Conv2d::from_parts(spec, weight, vec![T::zero(); spec.out_channels])
}

pub fn generator_specs() -> Vec<ConvSpec> {
    let mut specs = vec![ConvSpec::new(HYPERCOLUMN_CHANNELS, GENERATOR_WIDTH, 1)];
    specs.extend(DILATIONS.iter().map(|&d| ConvSpec::new(GENERATOR_WIDTH, GENERATOR_WIDTH, 3).dilation(d).padding(d)));
    specs.push(ConvSpec::new(GENERATOR_WIDTH, OUTPUT_CHANNELS, 3).padding(1));
    specs
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T> {
    pub layers: Vec<Conv2d<T>>,
}

/// Hidden activations of one generator forward pass.
pub struct GeneratorTrace<T> {
    acts: Vec<Tensor<T>>,
}

impl<T: Scalar> Network<T> for Generator<T> {
    fn convs(&self) -> &[Conv2d<T>] {
        &self.layers
    }

    fn convs_mut(&mut self) -> &mut [Conv2d<T>] {
        &mut self.layers
    }
}

impl<T: Scalar> Generator<T> {
    pub fn init(seed: u64) -> Self {
        let layers = generator_specs().into_iter().enumerate().map(|(i, s)| he_init(s, seed, 0x4745_4e, i)).collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Conv2d<T>>) -> Result<Self> {
        let specs: Vec<_> = layers.iter().map(|c| c.spec).collect();
        if specs != generator_specs() {
            return Err(Error::Checkpoint("generator layer table does not match the architecture".into()));
        }
        Ok(Self { layers })
    }

    pub fn cast<U: Scalar>(&self) -> Generator<U> {
        Generator { layers: self.layers.iter().map(Conv2d::cast).collect() }
    }

    fn check_input(&self, hc: &Tensor<T>) -> Result<()> {
        if hc.channels() != HYPERCOLUMN_CHANNELS {
            return Err(Error::Shape(format!("generator expects {HYPERCOLUMN_CHANNELS} channels, got {}", hc.channels())));
        }
        Ok(())
    }

    /// Raw six-channel output: transmission in channels 0–2, reflection in 3–5.
    pub fn forward(&self, hc: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(hc)?;
        let slope = T::from_f64_lossy(LEAK);
        let last = self.layers.len() - 1;
        let mut x = self.layers[0].forward(hc);
        leaky_relu_inplace(&mut x, slope);
        for (i, conv) in self.layers.iter().enumerate().skip(1) {
            x = conv.forward(&x);
            if i != last {
                leaky_relu_inplace(&mut x, slope);
            }
        }
        Ok(x)
    }

    pub fn forward_traced(&self, hc: &Tensor<T>) -> Result<(Tensor<T>, GeneratorTrace<T>)> {
        self.check_input(hc)?;
        let slope = T::from_f64_lossy(LEAK);
        let last = self.layers.len() - 1;
        let mut acts: Vec<Tensor<T>> = Vec::with_capacity(last);
        for (i, conv) in self.layers.iter().enumerate() {
            let mut y = conv.forward(acts.last().unwrap_or(hc));
            if i == last {
                return Ok((y, GeneratorTrace { acts }));
            }
            leaky_relu_inplace(&mut y, slope);
            acts.push(y);
        }
        unreachable!("generator has an output layer")
    }

    /// Accumulates parameter gradients for `grad_out` (gradient of the loss
    /// with respect to the raw six-channel output).
    pub fn backward(&self, hc: &Tensor<T>, trace: &GeneratorTrace<T>, grad_out: &Tensor<T>, grads: &mut [ConvGrads<T>]) {
        let slope = T::from_f64_lossy(LEAK);
        let mut g = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            let input = if i == 0 { hc } else { &trace.acts[i - 1] };
            if let Some(gx) = self.layers[i].backward(input, &g, Some(&mut grads[i]), i > 0) {
                g = gx;
                leaky_relu_backward(&trace.acts[i - 1], &mut g, slope);
            }
        }
    }
}

/// Splits the raw output into `(transmission, reflection)`.
pub fn split_layers<T: Scalar>(out: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    (out.channel_range(0, 3), out.channel_range(3, 3))
}

pub fn discriminator_specs() -> Vec<ConvSpec> {
    let mut specs = Vec::with_capacity(DISCRIMINATOR_DEPTH + 1);
    let mut cin = 6;
    for _ in 0..DISCRIMINATOR_DEPTH {
        specs.push(ConvSpec::new(cin, DISCRIMINATOR_WIDTH, 4).stride(2).padding(1));
        cin = DISCRIMINATOR_WIDTH;
    }
    specs.push(ConvSpec::new(DISCRIMINATOR_WIDTH, 1, 1));
    specs
}

#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator<T> {
    pub layers: Vec<Conv2d<T>>,
}

pub struct DiscriminatorTrace<T> {
    input: Tensor<T>,
    acts: Vec<Tensor<T>>,
    probs: Tensor<T>,
}

impl<T: Scalar> DiscriminatorTrace<T> {
    pub fn probabilities(&self) -> &Tensor<T> {
        &self.probs
    }
}

impl<T: Scalar> Network<T> for Discriminator<T> {
    fn convs(&self) -> &[Conv2d<T>] {
        &self.layers
    }

    fn convs_mut(&mut self) -> &mut [Conv2d<T>] {
        &mut self.layers
    }
}

impl<T: Scalar> Discriminator<T> {
    pub fn init(seed: u64) -> Self {
        let layers =
            discriminator_specs().into_iter().enumerate().map(|(i, s)| he_init(s, seed, 0x4449_53, i)).collect();
        Self { layers }
    }

    pub fn from_layers(layers: Vec<Conv2d<T>>) -> Result<Self> {
        let specs: Vec<_> = layers.iter().map(|c| c.spec).collect();
        if specs != discriminator_specs() {
            return Err(Error::Checkpoint("discriminator layer table does not match the architecture".into()));
        }
        Ok(Self { layers })
    }

    pub fn cast<U: Scalar>(&self) -> Discriminator<U> {
        Discriminator { layers: self.layers.iter().map(Conv2d::cast).collect() }
    }

    /// Probability map for candidate `x` given input `image`, plus the trace.
    pub fn forward_traced(&self, image: &Tensor<T>, x: &Tensor<T>) -> Result<DiscriminatorTrace<T>> {
        if image.shape() != x.shape() || image.channels() != 3 {
            return Err(Error::Shape(format!(
                "discriminator needs two 3-channel maps of equal size, got {:?} and {:?}",
                image.shape(),
                x.shape()
            )));
        }
        if image.height() < DISCRIMINATOR_STRIDE || image.width() < DISCRIMINATOR_STRIDE {
            return Err(Error::Shape(format!("discriminator input {:?} is below 16x16", image.shape())));
        }
        let slope = T::from_f64_lossy(LEAK);
        let input = Tensor::concat(&[image, x]);
        let mut acts: Vec<Tensor<T>> = Vec::with_capacity(DISCRIMINATOR_DEPTH);
        for conv in &self.layers[..DISCRIMINATOR_DEPTH] {
            let mut y = conv.forward(acts.last().unwrap_or(&input));
            leaky_relu_inplace(&mut y, slope);
            acts.push(y);
        }
        let mut probs = self.layers[DISCRIMINATOR_DEPTH].forward(acts.last().expect("body output"));
        sigmoid_inplace(&mut probs);
        Ok(DiscriminatorTrace { input, acts, probs })
    }

    pub fn forward(&self, image: &Tensor<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_traced(image, x)?.probs)
    }

    /// Backpropagates `grad_probs` (gradient with respect to the probability
    /// map). Parameter gradients are accumulated when `grads` is given; the
    /// gradient with respect to the candidate `x` is returned when requested.
    pub fn backward(
        &self,
        trace: &DiscriminatorTrace<T>,
        grad_probs: &Tensor<T>,
        mut grads: Option<&mut [ConvGrads<T>]>,
        want_candidate_grad: bool,
    ) -> Option<Tensor<T>> {
        let slope = T::from_f64_lossy(LEAK);
        let mut g = grad_probs.clone();
        for (v, &p) in g.data_mut().iter_mut().zip(trace.probs.data()) {
            *v = *v * p * (T::one() - p);
        }
        for i in (0..self.layers.len()).rev() {
            let input = if i == 0 { &trace.input } else { &trace.acts[i - 1] };
            let layer_grads = grads.as_deref_mut().map(|gs| &mut gs[i]);
            let need_input = i > 0 || want_candidate_grad;
            match self.layers[i].backward(input, &g, layer_grads, need_input) {
                Some(gx) if i > 0 => {
                    g = gx;
                    leaky_relu_backward(&trace.acts[i - 1], &mut g, slope);
                }
                Some(gx) => return Some(gx.channel_range(3, 3)),
                None => return None,
            }
        }
        None
    }
}
