use super::{matmul, MatRef, Scalar, Tensor};

/// Upper bound on the number of elements in one im2col tile. Large inputs are
/// processed in bands of output rows so the column buffer stays bounded.
const COL_TILE_ELEMS: usize = 1 << 22;

/// Geometry of a square-kernel 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize) -> Self {
        Self { in_channels, out_channels, kernel, stride: 1, padding: 0, dilation: 1 }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn padding(mut self, padding: usize) -> Self {
        self.padding = padding;
        self
    }

    pub fn dilation(mut self, dilation: usize) -> Self {
        self.dilation = dilation;
        self
    }

    pub fn weight_len(&self) -> usize {
        self.out_channels * self.col_rows()
    }

    pub fn param_count(&self) -> usize {
        self.weight_len() + self.out_channels
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn span(&self) -> usize {
        self.dilation * (self.kernel - 1) + 1
    }

    /// Output extent along one axis, or `None` when the input is too small.
    pub fn output_len(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.padding;
        (padded >= self.span()).then(|| (padded - self.span()) / self.stride + 1)
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }
}

/// Parameter gradients of one [`Conv2d`].
#[derive(Clone, Debug, PartialEq)]
pub struct ConvGrads<T> {
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> ConvGrads<T> {
    pub fn zeros(spec: &ConvSpec) -> Self {
        Self { weight: vec![T::zero(); spec.weight_len()], bias: vec![T::zero(); spec.out_channels] }
    }
}

/// Convolution layer; weights laid out `[out][in][ky][kx]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub spec: ConvSpec,
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Conv2d<T> {
    pub fn zeros(spec: ConvSpec) -> Self {
        Self { spec, weight: vec![T::zero(); spec.weight_len()], bias: vec![T::zero(); spec.out_channels] }
    }

    pub fn from_parts(spec: ConvSpec, weight: Vec<T>, bias: Vec<T>) -> Self {
        assert_eq!(weight.len(), spec.weight_len(), "weight length does not match spec");
        assert_eq!(bias.len(), spec.out_channels, "bias length does not match spec");
        Self { spec, weight, bias }
    }

    pub fn cast<U: Scalar>(&self) -> Conv2d<U> {
        Conv2d {
            spec: self.spec,
            weight: self.weight.iter().map(|&v| U::from_f64_lossy(v.as_f64())).collect(),
            bias: self.bias.iter().map(|&v| U::from_f64_lossy(v.as_f64())).collect(),
        }
    }

    pub fn output_shape(&self, input: &Tensor<T>) -> (usize, usize, usize) {
        let s = &self.spec;
        let ho = s.output_len(input.height()).expect("input smaller than convolution span");
        let wo = s.output_len(input.width()).expect("input smaller than convolution span");
        (s.out_channels, ho, wo)
    }

    fn rows_per_tile(&self, wo: usize) -> usize {
        (COL_TILE_ELEMS / (self.spec.col_rows() * wo).max(1)).max(1)
    }

    pub fn forward(&self, input: &Tensor<T>) -> Tensor<T> {
        assert_eq!(input.channels(), self.spec.in_channels, "input channel mismatch");
        let (co, ho, wo) = self.output_shape(input);
        let mut out = Tensor::zeros(co, ho, wo);
        let hw = ho * wo;
        let w = MatRef::new(&self.weight, co, self.spec.col_rows());
        if self.spec.is_pointwise() {
            let x = MatRef::new(input.data(), self.spec.in_channels, hw);
            matmul(w, x, out.data_mut(), hw, false);
        } else {
            let k = self.spec.col_rows();
            let band = self.rows_per_tile(wo);
            let mut col = Vec::new();
            let mut r0 = 0;
            while r0 < ho {
                let r1 = (r0 + band).min(ho);
                let n = (r1 - r0) * wo;
                col.resize(k * n, T::zero());
                im2col(input, &self.spec, r0, r1, wo, &mut col);
                matmul(w, MatRef::new(&col, k, n), &mut out.data_mut()[r0 * wo..], hw, true);
                r0 = r1;
            }
        }
        for (o, &b) in self.bias.iter().enumerate() {
            for v in out.plane_mut(o) {
                *v = *v + b;
            }
        }
        out
    }

    /// Accumulates parameter gradients into `grads` and, when requested,
    /// returns the gradient with respect to `input`.
    pub fn backward(
        &self,
        input: &Tensor<T>,
        grad_out: &Tensor<T>,
        grads: Option<&mut ConvGrads<T>>,
        want_input_grad: bool,
    ) -> Option<Tensor<T>> {
        let (co, ho, wo) = self.output_shape(input);
        assert_eq!(grad_out.shape(), (co, ho, wo), "output gradient shape mismatch");
        let hw = ho * wo;
        let k = self.spec.col_rows();
        let mut grads = grads;
        if let Some(g) = grads.as_deref_mut() {
            for o in 0..co {
                let s: T = grad_out.plane(o).iter().copied().sum();
                g.bias[o] = g.bias[o] + s;
            }
        }
        let w = MatRef::new(&self.weight, co, k);
        if self.spec.is_pointwise() {
            let x = MatRef::new(input.data(), self.spec.in_channels, hw);
            let gout = MatRef::new(grad_out.data(), co, hw);
            if let Some(g) = grads {
                matmul(gout, x.t(), &mut g.weight, k, true);
            }
            return want_input_grad.then(|| {
                let mut gx = Tensor::zeros(input.channels(), input.height(), input.width());
                matmul(w.t(), gout, gx.data_mut(), hw, false);
                gx
            });
        }
        let mut gx = want_input_grad.then(|| Tensor::zeros(input.channels(), input.height(), input.width()));
        let band = self.rows_per_tile(wo);
        let mut col = Vec::new();
        let mut gcol = Vec::new();
        let mut r0 = 0;
        while r0 < ho {
            let r1 = (r0 + band).min(ho);
            let n = (r1 - r0) * wo;
            let gtile = MatRef::strided(&grad_out.data()[r0 * wo..], co, n, hw);
            if let Some(g) = grads.as_deref_mut() {
                col.resize(k * n, T::zero());
                im2col(input, &self.spec, r0, r1, wo, &mut col);
                matmul(gtile, MatRef::new(&col, k, n).t(), &mut g.weight, k, true);
            }
            if let Some(gx) = gx.as_mut() {
                gcol.resize(k * n, T::zero());
                matmul(w.t(), gtile, &mut gcol, n, false);
                col2im(&gcol, &self.spec, r0, r1, wo, gx);
            }
            r0 = r1;
        }
        gx
    }
}

/// Valid output columns `[lo, hi)` for a stride-1 tap at input offset `off`.
#[inline]
fn valid_range(off: isize, wo: usize, w: usize) -> (usize, usize) {
    let lo = (-off).max(0) as usize;
    let hi = (w as isize - off).clamp(0, wo as isize) as usize;
    (lo.min(wo), hi.max(lo.min(wo)))
}

fn im2col<T: Scalar>(x: &Tensor<T>, s: &ConvSpec, r0: usize, r1: usize, wo: usize, col: &mut [T]) {
    let (h, w) = (x.height() as isize, x.width());
    let n = (r1 - r0) * wo;
    let k = s.kernel;
    for ci in 0..s.in_channels {
        let plane = x.plane(ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * n..(row + 1) * n];
                let off_x = (kx * s.dilation) as isize - s.padding as isize;
                for r in r0..r1 {
                    let seg = &mut dst[(r - r0) * wo..(r - r0 + 1) * wo];
                    let iy = (r * s.stride + ky * s.dilation) as isize - s.padding as isize;
                    if iy < 0 || iy >= h {
                        seg.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    if s.stride == 1 {
                        let (lo, hi) = valid_range(off_x, wo, w);
                        seg[..lo].fill(T::zero());
                        if hi > lo {
                            let a = (lo as isize + off_x) as usize;
                            seg[lo..hi].copy_from_slice(&src[a..a + (hi - lo)]);
                        }
                        seg[hi..].fill(T::zero());
                    } else {
                        for (ox, v) in seg.iter_mut().enumerate() {
                            let ix = (ox * s.stride) as isize + off_x;
                            *v = if ix >= 0 && (ix as usize) < w { src[ix as usize] } else { T::zero() };
                        }
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(col: &[T], s: &ConvSpec, r0: usize, r1: usize, wo: usize, x: &mut Tensor<T>) {
    let (h, w) = (x.height() as isize, x.width());
    let n = (r1 - r0) * wo;
    let k = s.kernel;
    for ci in 0..s.in_channels {
        let plane = x.plane_mut(ci);
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * n..(row + 1) * n];
                let off_x = (kx * s.dilation) as isize - s.padding as isize;
                for r in r0..r1 {
                    let iy = (r * s.stride + ky * s.dilation) as isize - s.padding as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let seg = &src[(r - r0) * wo..(r - r0 + 1) * wo];
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    if s.stride == 1 {
                        let (lo, hi) = valid_range(off_x, wo, w);
                        if hi == lo {
                            continue;
                        }
                        let a = (lo as isize + off_x) as usize;
                        for (d, &g) in dst[a..a + (hi - lo)].iter_mut().zip(&seg[lo..hi]) {
                            *d = *d + g;
                        }
                    } else {
                        for (ox, &g) in seg.iter().enumerate() {
                            let ix = (ox * s.stride) as isize + off_x;
                            if ix >= 0 && (ix as usize) < w {
                                dst[ix as usize] = dst[ix as usize] + g;
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Direct seven-loop convolution used as the oracle for the im2col path.
    fn naive_conv(conv: &Conv2d<f64>, x: &Tensor<f64>) -> Tensor<f64> {
        let s = conv.spec;
        let (co, ho, wo) = conv.output_shape(x);
        Tensor::from_fn(co, ho, wo, |o, oy, ox| {
            let mut acc = conv.bias[o];
            for ci in 0..s.in_channels {
                for ky in 0..s.kernel {
                    for kx in 0..s.kernel {
                        let iy = (oy * s.stride + ky * s.dilation) as isize - s.padding as isize;
                        let ix = (ox * s.stride + kx * s.dilation) as isize - s.padding as isize;
                        if iy >= 0 && ix >= 0 && (iy as usize) < x.height() && (ix as usize) < x.width() {
                            let wi = ((o * s.in_channels + ci) * s.kernel + ky) * s.kernel + kx;
                            acc += conv.weight[wi] * x.get(ci, iy as usize, ix as usize);
                        }
                    }
                }
            }
            acc
        })
    }

    fn random_conv(spec: ConvSpec, rng: &mut ChaCha8Rng) -> Conv2d<f64> {
        let weight = (0..spec.weight_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bias = (0..spec.out_channels).map(|_| rng.random_range(-1.0..1.0)).collect();
        Conv2d::from_parts(spec, weight, bias)
    }

    fn random_tensor(c: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(c, h, w, |_, _, _| rng.random_range(-1.0..1.0))
    }

    fn specs() -> Vec<ConvSpec> {
        vec![
            ConvSpec::new(3, 4, 1),
            ConvSpec::new(3, 4, 3).padding(1),
            ConvSpec::new(2, 3, 3).padding(4).dilation(4),
            ConvSpec::new(2, 3, 4).stride(2).padding(1),
            ConvSpec::new(2, 2, 3).padding(8).dilation(8),
        ]
    }

    #[test]
    fn forward_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for spec in specs() {
            let conv = random_conv(spec, &mut rng);
            let x = random_tensor(spec.in_channels, 9, 11, &mut rng);
            let fast = conv.forward(&x);
            let slow = naive_conv(&conv, &x);
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-12, "{spec:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn backward_is_the_adjoint_of_forward() {
        // <conv(x), g> is linear in x and in w, so the gradients equal the
        // finite-free directional derivatives computed by forward passes.
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for spec in specs() {
            let conv = random_conv(spec, &mut rng);
            let x = random_tensor(spec.in_channels, 10, 7, &mut rng);
            let y = conv.forward(&x);
            let g = random_tensor(y.channels(), y.height(), y.width(), &mut rng);
            let mut grads = ConvGrads::zeros(&spec);
            let gx = conv.backward(&x, &g, Some(&mut grads), true).unwrap();
            let dot = |a: &Tensor<f64>, b: &Tensor<f64>| a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum::<f64>();

            let dx = random_tensor(x.channels(), x.height(), x.width(), &mut rng);
            let mut no_bias = conv.clone();
            no_bias.bias.fill(0.0);
            let lhs = dot(&no_bias.forward(&dx), &g);
            assert!((lhs - dot(&gx, &dx)).abs() < 1e-9 * lhs.abs().max(1.0));

            let dw: Vec<f64> = (0..spec.weight_len()).map(|_| rng.random_range(-1.0..1.0)).collect();
            let probe = Conv2d::from_parts(spec, dw.clone(), vec![0.0; spec.out_channels]);
            let lhs = dot(&probe.forward(&x), &g);
            let rhs: f64 = grads.weight.iter().zip(&dw).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));

            for o in 0..spec.out_channels {
                let s: f64 = g.plane(o).iter().sum();
                assert!((grads.bias[o] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn tiled_path_matches_single_tile() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let spec = ConvSpec::new(64, 2, 3).padding(2).dilation(2);
        let conv = random_conv(spec, &mut rng).cast::<f32>();
        // 64*9 rows × 300 cols forces several bands.
        let x = random_tensor(64, 40, 300, &mut rng).cast::<f32>();
        assert!(conv.rows_per_tile(300) < 40);
        let fast = conv.forward(&x);
        let slow = naive_conv(&conv.cast(), &x.cast());
        for (a, b) in fast.data().iter().zip(slow.data()) {
            assert!((*a as f64 - b).abs() < 1e-3);
        }
    }

    #[test]
    fn output_len_arithmetic() {
        let s = ConvSpec::new(6, 64, 4).stride(2).padding(1);
        assert_eq!(s.output_len(256), Some(128));
        assert_eq!(s.output_len(17), Some(8));
        let d = ConvSpec::new(64, 64, 3).dilation(128).padding(128);
        assert_eq!(d.output_len(20), Some(20));
        assert_eq!(ConvSpec::new(1, 1, 3).output_len(2), None);
    }
}
