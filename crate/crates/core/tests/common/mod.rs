#![allow(dead_code)]

use rand::Rng;
use refsep::compositor::{synth_dataset, LayerTriple, SynthConfig};
use refsep::imagecore::LinearImage;
use refsep::perception::{Vgg19, STANDIN_SEED};
use refsep::rng::keyed_rng;
use std::sync::OnceLock;

pub fn standin_vgg() -> &'static Vgg19<f32> {
    static NET: OnceLock<Vgg19<f32>> = OnceLock::new();
    NET.get_or_init(|| Vgg19::standin(STANDIN_SEED))
}

/// Piecewise-constant stand-in for a photograph: a flat background with a
/// few flat-coloured discs and rectangles, values inside `[lo, hi]`.
pub fn scene(h: usize, w: usize, seed: u64, (lo, hi): (f64, f64)) -> LinearImage {
    let mut rng = keyed_rng(seed, &[0x5343_454e]);
    let base: [f64; 3] = std::array::from_fn(|_| rng.random::<f64>());
    let shapes: Vec<(bool, f64, f64, f64, f64, [f64; 3])> = (0..6)
        .map(|_| {
            let colour = std::array::from_fn(|_| rng.random::<f64>());
            let (cy, cx) = (rng.random::<f64>() * h as f64, rng.random::<f64>() * w as f64);
            let (a, b) = (4.0 + rng.random::<f64>() * h as f64 / 3.0, 4.0 + rng.random::<f64>() * w as f64 / 3.0);
            (rng.random::<bool>(), cy, cx, a, b, colour)
        })
        .collect();
    LinearImage::from_fn(h, w, |c, y, x| {
        let (yf, xf) = (y as f64, x as f64);
        let mut v = base[c];
        for &(disc, cy, cx, a, b, colour) in &shapes {
            let inside = if disc {
                ((yf - cy) / a).powi(2) + ((xf - cx) / b).powi(2) < 1.0
            } else {
                (yf - cy).abs() < a / 2.0 && (xf - cx).abs() < b / 2.0
            };
            if inside {
                v = colour[c];
            }
        }
        lo + (hi - lo) * v.clamp(0.0, 1.0)
    })
    .unwrap()
}

/// `n` synthetic training triples of side `size`.
pub fn synthetic_samples(n: usize, size: usize, seed: u64) -> Vec<LayerTriple> {
    let t_pool: Vec<_> = (0..n as u64).map(|i| scene(size, size, seed * 1000 + i, (0.05, 0.6))).collect();
    let r_pool: Vec<_> = (0..n as u64).map(|i| scene(size, size, seed * 1000 + 500 + i, (0.0, 0.5))).collect();
    let cfg = SynthConfig { seed, ..Default::default() };
    synth_dataset(&t_pool, &r_pool, n, &cfg).unwrap().into_iter().map(|s| s.triple).collect()
}
