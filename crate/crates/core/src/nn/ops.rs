use super::{Scalar, Tensor};

/// `max(x, slope * x)` in place; `slope = 0` gives a plain rectifier.
pub fn leaky_relu_inplace<T: Scalar>(t: &mut Tensor<T>, slope: T) {
    for v in t.data_mut() {
        if *v < T::zero() {
            *v = *v * slope;
        }
    }
}

/// Backward of [`leaky_relu_inplace`] given the layer *output*; valid for
/// `slope >= 0` because the output keeps the sign of the input.
pub fn leaky_relu_backward<T: Scalar>(output: &Tensor<T>, grad: &mut Tensor<T>, slope: T) {
    for (g, &y) in grad.data_mut().iter_mut().zip(output.data()) {
        if y <= T::zero() {
            *g = *g * slope;
        }
    }
}

pub fn sigmoid_inplace<T: Scalar>(t: &mut Tensor<T>) {
    for v in t.data_mut() {
        *v = T::one() / (T::one() + (-*v).exp());
    }
}

/// 2×2 max pooling, stride 2, ceil mode (odd extents keep their last
/// row/column as a partial window). Returns the pooled tensor and the flat
/// input index of each maximum.
pub fn max_pool2x2<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<u32>) {
    let (c, h, w) = x.shape();
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut out = Tensor::zeros(c, ho, wo);
    let mut arg = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        let plane = x.plane(ch);
        let base = ch * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best_i = 2 * oy * w + 2 * ox;
                let mut best = plane[best_i];
                for y in 2 * oy..(2 * oy + 2).min(h) {
                    for xx in 2 * ox..(2 * ox + 2).min(w) {
                        let v = plane[y * w + xx];
                        if v > best {
                            best = v;
                            best_i = y * w + xx;
                        }
                    }
                }
                out.set(ch, oy, ox, best);
                arg.push((base + best_i) as u32);
            }
        }
    }
    (out, arg)
}

pub fn max_pool2x2_backward<T: Scalar>(
    input_shape: (usize, usize, usize),
    argmax: &[u32],
    grad_out: &Tensor<T>,
) -> Tensor<T> {
    let (c, h, w) = input_shape;
    let mut gx = Tensor::zeros(c, h, w);
    let data = gx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        data[i as usize] = data[i as usize] + g;
    }
    gx
}

/// Linear interpolation taps along one axis with half-pixel centers
/// (`align_corners = false`), no antialiasing.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisResampler {
    pub input: usize,
    pub output: usize,
    taps: Vec<(usize, usize, f64, f64)>,
}

impl AxisResampler {
    pub fn new(input: usize, output: usize) -> Self {
        assert!(input > 0 && output > 0, "resampling needs non-empty axes");
        let scale = input as f64 / output as f64;
        let taps = (0..output)
            .map(|o| {
                let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(input - 1);
                let i1 = (i0 + 1).min(input - 1);
                let l1 = src - i0 as f64;
                (i0, i1, 1.0 - l1, l1)
            })
            .collect();
        Self { input, output, taps }
    }
}

/// Separable bilinear resampling of planes, with its adjoint for backprop.
#[derive(Clone, Debug, PartialEq)]
pub struct PlaneResampler {
    pub rows: AxisResampler,
    pub cols: AxisResampler,
}

impl PlaneResampler {
    pub fn new(in_h: usize, in_w: usize, out_h: usize, out_w: usize) -> Self {
        Self { rows: AxisResampler::new(in_h, out_h), cols: AxisResampler::new(in_w, out_w) }
    }

    pub fn forward_plane<T: Scalar>(&self, src: &[T], dst: &mut [T]) {
        let (iw, ow) = (self.cols.input, self.cols.output);
        assert_eq!(src.len(), self.rows.input * iw);
        assert_eq!(dst.len(), self.rows.output * ow);
        let cols: Vec<(usize, usize, T, T)> = self
            .cols
            .taps
            .iter()
            .map(|&(a, b, wa, wb)| (a, b, T::from_f64_lossy(wa), T::from_f64_lossy(wb)))
            .collect();
        for (oy, &(r0, r1, wy0, wy1)) in self.rows.taps.iter().enumerate() {
            let (wy0, wy1) = (T::from_f64_lossy(wy0), T::from_f64_lossy(wy1));
            let row0 = &src[r0 * iw..(r0 + 1) * iw];
            let row1 = &src[r1 * iw..(r1 + 1) * iw];
            let out = &mut dst[oy * ow..(oy + 1) * ow];
            for (v, &(c0, c1, wx0, wx1)) in out.iter_mut().zip(&cols) {
                let top = row0[c0] * wx0 + row0[c1] * wx1;
                let bottom = row1[c0] * wx0 + row1[c1] * wx1;
                *v = top * wy0 + bottom * wy1;
            }
        }
    }

    /// Adds `Aᵀ grad` into `acc`, where `A` is the linear map of
    /// [`Self::forward_plane`].
    pub fn adjoint_plane<T: Scalar>(&self, grad: &[T], acc: &mut [T]) {
        let (iw, ow) = (self.cols.input, self.cols.output);
        assert_eq!(grad.len(), self.rows.output * ow);
        assert_eq!(acc.len(), self.rows.input * iw);
        for (oy, &(r0, r1, wy0, wy1)) in self.rows.taps.iter().enumerate() {
            let (wy0, wy1) = (T::from_f64_lossy(wy0), T::from_f64_lossy(wy1));
            for (ox, &(c0, c1, wx0, wx1)) in self.cols.taps.iter().enumerate() {
                let (wx0, wx1) = (T::from_f64_lossy(wx0), T::from_f64_lossy(wx1));
                let g = grad[oy * ow + ox];
                acc[r0 * iw + c0] = acc[r0 * iw + c0] + g * wy0 * wx0;
                acc[r0 * iw + c1] = acc[r0 * iw + c1] + g * wy0 * wx1;
                acc[r1 * iw + c0] = acc[r1 * iw + c0] + g * wy1 * wx0;
                acc[r1 * iw + c1] = acc[r1 * iw + c1] + g * wy1 * wx1;
            }
        }
    }

    pub fn forward<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut out = Tensor::zeros(x.channels(), self.rows.output, self.cols.output);
        for c in 0..x.channels() {
            self.forward_plane(x.plane(c), out.plane_mut(c));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_uses_ceil_mode() {
        let x = Tensor::<f64>::from_fn(1, 5, 3, |_, y, x| (y * 3 + x) as f64);
        let (p, arg) = max_pool2x2(&x);
        assert_eq!(p.shape(), (1, 3, 2));
        assert_eq!(p.data(), &[4.0, 5.0, 10.0, 11.0, 13.0, 14.0]);
        let g = Tensor::from_vec(1, 3, 2, vec![1.0; 6]);
        let gx = max_pool2x2_backward(x.shape(), &arg, &g);
        assert_eq!(gx.data().iter().sum::<f64>(), 6.0);
        assert_eq!(gx.get(0, 4, 2), 1.0);
    }

    #[test]
    fn pool_handles_all_negative_windows() {
        let x = Tensor::<f64>::from_vec(1, 2, 2, vec![-3.0, -1.0, -2.0, -5.0]);
        let (p, arg) = max_pool2x2(&x);
        assert_eq!(p.data(), &[-1.0]);
        assert_eq!(arg, vec![1]);
    }

    #[test]
    fn factor_two_downsample_averages_blocks() {
        let r = PlaneResampler::new(4, 4, 2, 2);
        let src: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let mut dst = vec![0.0; 4];
        r.forward_plane(&src, &mut dst);
        assert_eq!(dst, vec![2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn resampling_preserves_constants() {
        let r = PlaneResampler::new(5, 7, 13, 3);
        let mut dst = vec![0.0f64; 39];
        r.forward_plane(&[0.25; 35], &mut dst);
        assert!(dst.iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn adjoint_matches_forward() {
        let r = PlaneResampler::new(6, 5, 3, 9);
        let x: Vec<f64> = (0..30).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let g: Vec<f64> = (0..27).map(|i| ((i * 5) % 13) as f64 * 0.1).collect();
        let mut y = vec![0.0; 27];
        r.forward_plane(&x, &mut y);
        let mut at = vec![0.0; 30];
        r.adjoint_plane(&g, &mut at);
        let lhs: f64 = y.iter().zip(&g).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&at).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
