use super::Image;

/// Forward differences of an image. The last column of `gx` and the last row
/// of `gy` are zero.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientField {
    pub gx: Image,
    pub gy: Image,
}

pub fn gradient(img: &Image) -> GradientField {
    let (h, w) = img.dims();
    let mut gx = Image::zeros(h, w);
    let mut gy = Image::zeros(h, w);
    for c in 0..Image::CHANNELS {
        forward_diff_x(img.plane(c), h, w, gx.plane_mut(c));
        forward_diff_y(img.plane(c), h, w, gy.plane_mut(c));
    }
    GradientField { gx, gy }
}

pub(crate) fn forward_diff_x(src: &[f64], h: usize, w: usize, dst: &mut [f64]) {
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        let out = &mut dst[y * w..(y + 1) * w];
        for x in 0..w.saturating_sub(1) {
            out[x] = row[x + 1] - row[x];
        }
        if w > 0 {
            out[w - 1] = 0.0;
        }
    }
}

pub(crate) fn forward_diff_y(src: &[f64], h: usize, w: usize, dst: &mut [f64]) {
    for y in 0..h.saturating_sub(1) {
        for x in 0..w {
            dst[y * w + x] = src[(y + 1) * w + x] - src[y * w + x];
        }
    }
    if h > 0 {
        dst[(h - 1) * w..].fill(0.0);
    }
}

/// Adds `Dxᵀ g` into `acc`.
pub(crate) fn forward_diff_x_adjoint(g: &[f64], h: usize, w: usize, acc: &mut [f64]) {
    for y in 0..h {
        for x in 0..w.saturating_sub(1) {
            let v = g[y * w + x];
            acc[y * w + x + 1] += v;
            acc[y * w + x] -= v;
        }
    }
}

/// Adds `Dyᵀ g` into `acc`.
pub(crate) fn forward_diff_y_adjoint(g: &[f64], h: usize, w: usize, acc: &mut [f64]) {
    for y in 0..h.saturating_sub(1) {
        for x in 0..w {
            let v = g[y * w + x];
            acc[(y + 1) * w + x] += v;
            acc[y * w + x] -= v;
        }
    }
}
