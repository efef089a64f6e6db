//! Batch normalisation over (N, H, W) per channel.

use rayon::prelude::*;

use crate::tensor::{Element, Shape};

pub const BN_EPSILON: f64 = 1e-3;
pub const BN_MOMENTUM: f64 = 0.99;

/// Per-channel batch statistics saved for the backward pass.
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased variance.
    pub var: Vec<f64>,
    pub inv_std: Vec<f64>,
}

fn channel_slices<T: Element>(x: &[T], s: Shape, c: usize) -> impl Iterator<Item = &[T]> {
    let p = s.plane();
    (0..s.n).map(move |n| &x[(n * s.c + c) * p..(n * s.c + c + 1) * p])
}

pub fn batch_stats<T: Element>(x: &[T], s: Shape, eps: f64) -> BatchStats {
    let m = (s.n * s.plane()) as f64;
    let per: Vec<(f64, f64)> = (0..s.c)
        .into_par_iter()
        .map(|c| {
            let sum: f64 = channel_slices(x, s, c).flatten().map(|v| v.f64()).sum();
            let mean = sum / m;
            let var: f64 = channel_slices(x, s, c)
                .flatten()
                .map(|v| (v.f64() - mean).powi(2))
                .sum::<f64>()
                / m;
            (mean, var)
        })
        .collect();
    let mean: Vec<f64> = per.iter().map(|p| p.0).collect();
    let var: Vec<f64> = per.iter().map(|p| p.1).collect();
    let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    BatchStats { mean, var, inv_std }
}

/// `y = gamma·(x − mean)·inv_std + beta` per channel.
pub fn normalize<T: Element>(
    x: &[T],
    s: Shape,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[T],
    beta: &[T],
) -> Vec<T> {
    let p = s.plane();
    let mut y = vec![T::zero(); x.len()];
    y.par_chunks_mut(p).enumerate().for_each(|(nc, out)| {
        let c = nc % s.c;
        let scale = gamma[c].f64() * inv_std[c];
        let shift = beta[c].f64() - mean[c] * scale;
        let (scale, shift) = (T::of(scale), T::of(shift));
        for (o, &v) in out.iter_mut().zip(&x[nc * p..(nc + 1) * p]) {
            *o = v * scale + shift;
        }
    });
    y
}

pub struct BnGrads<T> {
    pub input: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

/// Backward through batch normalisation. With `batch_mode` the statistics are
/// treated as functions of `x` (training); otherwise they are constants.
pub fn backward<T: Element>(
    x: &[T],
    s: Shape,
    mean: &[f64],
    inv_std: &[f64],
    gamma: &[T],
    dy: &[T],
    batch_mode: bool,
) -> BnGrads<T> {
    let p = s.plane();
    let m = (s.n * p) as f64;
    // (sum dy, sum dy·xhat) per channel
    let sums: Vec<(f64, f64)> = (0..s.c)
        .into_par_iter()
        .map(|c| {
            let mut sd = 0.0;
            let mut sdx = 0.0;
            for n in 0..s.n {
                let off = (n * s.c + c) * p;
                for i in off..off + p {
                    let g = dy[i].f64();
                    sd += g;
                    sdx += g * (x[i].f64() - mean[c]) * inv_std[c];
                }
            }
            (sd, sdx)
        })
        .collect();
    let mut input = vec![T::zero(); x.len()];
    input.par_chunks_mut(p).enumerate().for_each(|(nc, out)| {
        let c = nc % s.c;
        let g = gamma[c].f64();
        let off = nc * p;
        for (i, o) in out.iter_mut().enumerate() {
            let d = dy[off + i].f64();
            let v = if batch_mode {
                let xhat = (x[off + i].f64() - mean[c]) * inv_std[c];
                g * inv_std[c] / m * (m * d - sums[c].0 - xhat * sums[c].1)
            } else {
                g * inv_std[c] * d
            };
            *o = T::of(v);
        }
    });
    BnGrads {
        input,
        gamma: sums.iter().map(|s| T::of(s.1)).collect(),
        beta: sums.iter().map(|s| T::of(s.0)).collect(),
    }
}
