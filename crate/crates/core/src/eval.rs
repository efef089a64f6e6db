//! Keypoint decoding, PCKh scoring and multi-scale inference.

use std::fmt::Write as _;

use rayon::prelude::*;

use crate::data::{prepare_sample, AugmentParams, AugmentationConfig, Dataset};
use crate::error::{Error, Result};
use crate::graph::Mode;
use crate::model::{build_variant, ModelGraph, VariantConfig};
use crate::skeleton::{flip_permutation, PCKH_GROUPS};
use crate::supervision::KeypointAnnotation;
use crate::tensor::{Element, ParamStore, Shape, Tensor};

pub const DEFAULT_SCALES: [f64; 3] = [0.75, 1.0, 1.25];
pub const HEAD_FACTOR: f64 = 0.6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Prediction {
    pub x: f64,
    pub y: f64,
    pub score: f64,
}

/// Argmax of one `h×w` map in grid coordinates, with an optional
/// quarter-cell shift toward the larger neighbour. Ties go to the first
/// maximum in row-major order; an all-zero map yields its centre, score 0.
pub fn decode_map<T: Element>(map: &[T], h: usize, w: usize, refine: bool) -> (f64, f64, f64) {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    let mut all_zero = true;
    for (i, v) in map.iter().enumerate() {
        let v = v.f64();
        all_zero &= v == 0.0;
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    if all_zero {
        return ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, 0.0);
    }
    let (x, y) = (best % w, best / w);
    let (mut gx, mut gy) = (x as f64, y as f64);
    if refine {
        let at = |xx: usize, yy: usize| map[yy * w + xx].f64();
        if x > 0 && x + 1 < w {
            let (l, r) = (at(x - 1, y), at(x + 1, y));
            gx += 0.25 * (r - l).signum() * f64::from(u8::from(r != l));
        }
        if y > 0 && y + 1 < h {
            let (u, d) = (at(x, y - 1), at(x, y + 1));
            gy += 0.25 * (d - u).signum() * f64::from(u8::from(d != u));
        }
    }
    (gx, gy, best_v)
}

/// Decode every channel of batch item `n` and map to a `src_w×src_h`
/// frame: `x = (gx + 0.5)·src_w/w − 0.5`.
pub fn decode_keypoints<T: Element>(
    maps: &Tensor<T>,
    n: usize,
    src_w: usize,
    src_h: usize,
    refine: bool,
) -> Vec<Prediction> {
    let s = maps.shape();
    let (sx, sy) = (src_w as f64 / s.w as f64, src_h as f64 / s.h as f64);
    (0..s.c)
        .map(|c| {
            let (gx, gy, score) = decode_map(maps.plane(n, c), s.h, s.w, refine);
            Prediction {
                x: (gx + 0.5) * sx - 0.5,
                y: (gy + 0.5) * sy - 0.5,
                score,
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PckhReport {
    pub tau: f64,
    /// `(correct, visible)` per keypoint.
    pub counts: Vec<(usize, usize)>,
    pub samples: usize,
    /// Samples dropped for a zero-size head box.
    pub degenerate: usize,
}

fn pct((hit, total): (usize, usize)) -> Option<f64> {
    (total > 0).then(|| 100.0 * hit as f64 / total as f64)
}

impl PckhReport {
    pub fn joint(&self, k: usize) -> Option<f64> {
        pct(self.counts[k])
    }

    fn group_counts(&self, ids: &[usize]) -> (usize, usize) {
        ids.iter()
            .filter(|&&k| k < self.counts.len())
            .fold((0, 0), |(h, t), &k| {
                (h + self.counts[k].0, t + self.counts[k].1)
            })
    }

    /// Reporting groups in table order.
    pub fn groups(&self) -> Vec<(&'static str, Option<f64>)> {
        PCKH_GROUPS
            .iter()
            .map(|(n, ids)| (*n, pct(self.group_counts(ids))))
            .collect()
    }

    /// Pooled over all grouped keypoints.
    pub fn mean(&self) -> Option<f64> {
        let ids: Vec<usize> = PCKH_GROUPS
            .iter()
            .flat_map(|(_, ids)| ids.iter().copied())
            .collect();
        pct(self.group_counts(&ids))
    }
}

/// Fraction of visible keypoints within `τ·0.6·(head diagonal)`; the
/// boundary counts as correct.
pub fn pckh(
    predictions: &[Vec<Prediction>],
    annotations: &[KeypointAnnotation],
    tau: f64,
) -> Result<PckhReport> {
    if predictions.len() != annotations.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} annotations",
            predictions.len(),
            annotations.len()
        )));
    }
    let q = annotations.first().map(|a| a.keypoints.len()).unwrap_or(0);
    let mut report = PckhReport {
        tau,
        counts: vec![(0, 0); q],
        samples: 0,
        degenerate: 0,
    };
    for (pred, ann) in predictions.iter().zip(annotations) {
        if pred.len() != ann.keypoints.len() || ann.keypoints.len() != q {
            return Err(Error::InvalidArgument(format!(
                "{}: {} predictions for {} keypoints",
                ann.image,
                pred.len(),
                ann.keypoints.len()
            )));
        }
        let l = HEAD_FACTOR * ann.head_diagonal();
        if !(l > 0.0) {
            report.degenerate += 1;
            continue;
        }
        report.samples += 1;
        for (k, (p, g)) in pred.iter().zip(&ann.keypoints).enumerate() {
            if !g.visible {
                continue;
            }
            report.counts[k].1 += 1;
            if (p.x - g.x).hypot(p.y - g.y) <= tau * l {
                report.counts[k].0 += 1;
            }
        }
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub pckh50: PckhReport,
    pub pckh10: PckhReport,
    pub params: Option<u64>,
    pub flops: Option<u64>,
}

fn cell(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.1}")).unwrap_or_else(|| "-".into())
}

impl EvalReport {
    pub fn new(
        predictions: &[Vec<Prediction>],
        annotations: &[KeypointAnnotation],
    ) -> Result<Self> {
        Ok(Self {
            pckh50: pckh(predictions, annotations, 0.5)?,
            pckh10: pckh(predictions, annotations, 0.1)?,
            params: None,
            flops: None,
        })
    }

    /// Table with Head … Ankle and Mean columns.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:<10}", "");
        for (n, _) in PCKH_GROUPS {
            let _ = write!(s, "{n:>9}");
        }
        let _ = writeln!(s, "{:>9}", "Mean");
        for (label, r) in [("PCKh@50", &self.pckh50), ("PCKh@10", &self.pckh10)] {
            let _ = write!(s, "{label:<10}");
            for (_, v) in r.groups() {
                let _ = write!(s, "{:>9}", cell(v));
            }
            let _ = writeln!(s, "{:>9}", cell(r.mean()));
        }
        let _ = writeln!(
            s,
            "samples: {} (degenerate head boxes skipped: {})",
            self.pckh50.samples, self.pckh50.degenerate
        );
        if let (Some(p), Some(f)) = (self.params, self.flops) {
            let _ = writeln!(s, "params: {p}  flops: {f}");
        }
        s
    }

    /// `key=value` lines.
    pub fn to_lines(&self) -> String {
        let mut s = String::new();
        for (label, r) in [("pckh50", &self.pckh50), ("pckh10", &self.pckh10)] {
            for (n, v) in r.groups() {
                let _ = writeln!(s, "{label}.{}={}", n.to_lowercase(), cell(v));
            }
            let _ = writeln!(s, "{label}.mean={}", cell(r.mean()));
        }
        let _ = writeln!(s, "samples={}", self.pckh50.samples);
        let _ = writeln!(s, "degenerate={}", self.pckh50.degenerate);
        if let Some(p) = self.params {
            let _ = writeln!(s, "params={p}");
        }
        if let Some(f) = self.flops {
            let _ = writeln!(s, "flops={f}");
        }
        s
    }
}

/// One line per image: path, then `x,y,score` per keypoint.
pub fn format_predictions(image: &str, preds: &[Prediction]) -> String {
    let mut s = image.to_string();
    for p in preds {
        let _ = write!(s, ",{},{},{}", p.x, p.y, p.score);
    }
    s
}

/// Read a predictions file. Lines in the annotation format are accepted
/// too, taking keypoint positions as predictions and visibility as score.
pub fn parse_predictions(
    text: &str,
    source_name: &str,
    keypoints: usize,
) -> Result<Vec<(String, Vec<Prediction>)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let f: Vec<&str> = body.split(',').map(str::trim).collect();
        let first = match f.len() {
            n if n == 1 + 3 * keypoints => 1,
            n if n == 8 + 3 * keypoints => 8,
            n => {
                return Err(Error::Parse {
                    source_name: source_name.into(),
                    line,
                    msg: format!(
                        "expected {} or {} fields, found {n}",
                        1 + 3 * keypoints,
                        8 + 3 * keypoints
                    ),
                })
            }
        };
        let nums = f[first..]
            .iter()
            .map(|v| {
                v.parse::<f64>().map_err(|_| Error::Parse {
                    source_name: source_name.into(),
                    line,
                    msg: format!("'{v}' is not a number"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let preds = nums
            .chunks(3)
            .map(|c| Prediction {
                x: c[0],
                y: c[1],
                score: c[2],
            })
            .collect();
        out.push((f[0].to_string(), preds));
    }
    Ok(out)
}

/// Bilinear resize of every plane, pixel centres aligned.
pub fn resize_maps<T: Element>(t: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let s = t.shape();
    if (s.h, s.w) == (h, w) {
        return t.clone();
    }
    let (ky, kx) = (s.h as f64 / h as f64, s.w as f64 / w as f64);
    let mut out = vec![T::zero(); s.n * s.c * h * w];
    out.par_chunks_mut(h * w).enumerate().for_each(|(nc, dst)| {
        let src = &t.data()[nc * s.plane()..(nc + 1) * s.plane()];
        for v in 0..h {
            let y = ((v as f64 + 0.5) * ky - 0.5).clamp(0.0, (s.h - 1) as f64);
            let y0 = y.floor() as usize;
            let y1 = (y0 + 1).min(s.h - 1);
            let fy = y - y0 as f64;
            for u in 0..w {
                let x = ((u as f64 + 0.5) * kx - 0.5).clamp(0.0, (s.w - 1) as f64);
                let x0 = x.floor() as usize;
                let x1 = (x0 + 1).min(s.w - 1);
                let fx = x - x0 as f64;
                let p = |yy: usize, xx: usize| src[yy * s.w + xx].f64();
                let val = (p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx) * (1.0 - fy)
                    + (p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx) * fy;
                dst[v * w + u] = T::of(val);
            }
        }
    });
    Tensor::from_vec(Shape::new(s.n, s.c, h, w), out).expect("resize dims")
}

/// Mirror every plane left to right.
pub fn flip_horizontal<T: Element>(t: &Tensor<T>) -> Tensor<T> {
    let s = t.shape();
    let mut out = t.clone();
    out.grad = None;
    for row in out.data_mut().chunks_mut(s.w) {
        row.reverse();
    }
    out
}

/// Reorder channels: output channel `i` takes input channel `perm[i]`.
pub fn permute_channels<T: Element>(t: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let s = t.shape();
    let mut data = Vec::with_capacity(t.len());
    for n in 0..s.n {
        for &c in perm {
            data.extend_from_slice(t.plane(n, c));
        }
    }
    Tensor::from_vec(s, data).expect("same shape")
}

/// Graphs of one variant at several input sizes, sharing parameters.
pub struct MultiScale<'a, T: Element> {
    pub config: VariantConfig,
    pub params: &'a ParamStore<T>,
    graphs: Vec<(usize, ModelGraph)>,
}

impl<'a, T: Element> MultiScale<'a, T> {
    pub fn new(config: &VariantConfig, params: &'a ParamStore<T>) -> Self {
        Self {
            config: config.clone(),
            params,
            graphs: Vec::new(),
        }
    }

    fn graph(&mut self, res: usize) -> Result<&ModelGraph> {
        if let Some(i) = self.graphs.iter().position(|(r, _)| *r == res) {
            return Ok(&self.graphs[i].1);
        }
        let mut cfg = self.config.clone();
        cfg.high_res = res;
        self.graphs.push((res, build_variant(&cfg)?));
        Ok(&self.graphs.last().unwrap().1)
    }

    /// Final-head maps for a `N×3×R×R` input, plain inference.
    pub fn run(&mut self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let res = images.shape().h;
        let params = self.params;
        let model = self.graph(res)?;
        let head = model.final_head().name.clone();
        let run = model
            .graph
            .forward(params, vec![images.clone()], Mode::Infer, 0)?;
        Ok(run.output_tensor(&head)?.clone())
    }

    /// Average of the final-head maps over `scales` (and mirrored copies when
    /// `flip`), resized to the input resolution.
    pub fn infer(
        &mut self,
        images: &Tensor<T>,
        scales: &[f64],
        flip: bool,
        flip_pairs: &[(usize, usize)],
    ) -> Result<Tensor<T>> {
        if scales.is_empty() {
            return Err(Error::InvalidArgument(
                "multi-scale inference needs at least one scale".into(),
            ));
        }
        let s = images.shape();
        let mut acc: Option<Vec<f64>> = None;
        let mut count = 0usize;
        let perm = flip_permutation(self.config.keypoints, flip_pairs);
        for &scale in scales {
            if !(scale > 0.0) {
                return Err(Error::InvalidArgument(format!(
                    "scale {scale} must be positive"
                )));
            }
            let size = (((s.h as f64 * scale) / 8.0).round() as usize).max(1) * 8;
            let input = resize_maps(images, size, size);
            let mut variants = vec![(input.clone(), false)];
            if flip {
                variants.push((flip_horizontal(&input), true));
            }
            for (x, flipped) in variants {
                let mut maps = self.run(&x)?;
                if flipped {
                    maps = permute_channels(&flip_horizontal(&maps), &perm);
                }
                let maps = resize_maps(&maps, s.h, s.w);
                let a = acc.get_or_insert_with(|| vec![0.0; maps.len()]);
                for (a, v) in a.iter_mut().zip(maps.data()) {
                    *a += v.f64();
                }
                count += 1;
            }
        }
        let inv = 1.0 / count as f64;
        let data = acc.unwrap().into_iter().map(|v| T::of(v * inv)).collect();
        Tensor::from_vec(Shape::new(s.n, self.config.keypoints, s.h, s.w), data)
    }
}

/// Predictions in source-image coordinates for every record.
pub fn predict_dataset<T: Element>(
    config: &VariantConfig,
    params: &ParamStore<T>,
    data: &Dataset,
    scales: &[f64],
    flip: bool,
) -> Result<Vec<Vec<Prediction>>> {
    let aug = AugmentationConfig::default();
    let mut ms = MultiScale::new(config, params);
    let res = config.high_res;
    let mut out = Vec::with_capacity(data.len());
    for i in 0..data.len() {
        let (img, _, map) = prepare_sample::<T>(data, i, res, &AugmentParams::IDENTITY, &aug)?;
        let maps = ms.infer(&img, scales, flip, &aug.flip_pairs)?;
        let back = map.inverse();
        let preds = decode_keypoints(&maps, 0, res, res, true)
            .into_iter()
            .map(|p| {
                let (x, y) = back.apply(p.x, p.y);
                Prediction {
                    x,
                    y,
                    score: p.score,
                }
            })
            .collect();
        out.push(preds);
    }
    Ok(out)
}
