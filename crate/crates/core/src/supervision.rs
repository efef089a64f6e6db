//! Ground-truth confidence maps, part affinity fields and the sigma schedule.

use crate::error::{Error, Result};
use crate::model::{HeadKind, ModelGraph};
use crate::tensor::{Element, Shape, Tensor};

pub const DEFAULT_PAF_WIDTH: f64 = 1.0;
pub const REFERENCE_STRIDE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub visible: bool,
}

impl Keypoint {
    pub fn new(x: f64, y: f64, visible: bool) -> Self {
        Self { x, y, visible }
    }

    pub fn hidden() -> Self {
        Self::new(0.0, 0.0, false)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeypointAnnotation {
    pub image: String,
    pub center: (f64, f64),
    /// Person scale; the person box is `200·scale` pixels tall.
    pub scale: f64,
    /// `x1, y1, x2, y2`.
    pub head_box: [f64; 4],
    pub keypoints: Vec<Keypoint>,
}

impl KeypointAnnotation {
    pub fn head_diagonal(&self) -> f64 {
        let [x1, y1, x2, y2] = self.head_box;
        ((x2 - x1).powi(2) + (y2 - y1).powi(2)).sqrt()
    }
}

/// Image pixel → grid coordinate. Cell `j` is centred on pixel
/// `j·s + (s−1)/2`.
pub fn to_grid(v: f64, stride: usize) -> f64 {
    let s = stride as f64;
    (v - (s - 1.0) / 2.0) / s
}

pub fn from_grid(g: f64, stride: usize) -> f64 {
    let s = stride as f64;
    g * s + (s - 1.0) / 2.0
}

/// `exp(−d²/σ²)` around the grid cell nearest to `kp`. Invisible or
/// off-grid keypoints give an all-zero map. Returns `h·w` row-major values.
pub fn confidence_map(
    kp: &Keypoint,
    h: usize,
    w: usize,
    stride: usize,
    sigma: f64,
) -> Result<Vec<f64>> {
    if !(sigma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sigma must be positive, got {sigma}"
        )));
    }
    let mut out = vec![0.0; h * w];
    if !kp.visible {
        return Ok(out);
    }
    let (gx, gy) = (to_grid(kp.x, stride).round(), to_grid(kp.y, stride).round());
    if gx < 0.0 || gy < 0.0 || gx >= w as f64 || gy >= h as f64 {
        return Ok(out);
    }
    let inv = 1.0 / (sigma * sigma);
    // values beyond this radius are below 1e-17 and stay zero
    let reach = sigma * 40.0f64.sqrt();
    let reach2 = reach * reach;
    let (x0, x1) = (
        (gx - reach).ceil().max(0.0) as usize,
        ((gx + reach) as usize).min(w - 1),
    );
    let (y0, y1) = (
        (gy - reach).ceil().max(0.0) as usize,
        ((gy + reach) as usize).min(h - 1),
    );
    for y in y0..=y1 {
        let dy = y as f64 - gy;
        for x in x0..=x1 {
            let dx = x as f64 - gx;
            let d2 = dx * dx + dy * dy;
            if d2 <= reach2 {
                out[y * w + x] = (-d2 * inv).exp();
            }
        }
    }
    Ok(out)
}

/// Unit vector from `a` to `b` on grid points within `half_width` grid
/// pixels of the segment; `(x map, y map)`.
pub fn paf_map(
    a: &Keypoint,
    b: &Keypoint,
    h: usize,
    w: usize,
    stride: usize,
    half_width: f64,
) -> (Vec<f64>, Vec<f64>) {
    let mut mx = vec![0.0; h * w];
    let mut my = vec![0.0; h * w];
    paf_into(a, b, h, w, stride, half_width, &mut mx, &mut my);
    (mx, my)
}

#[allow(clippy::too_many_arguments)]
fn paf_into(
    a: &Keypoint,
    b: &Keypoint,
    h: usize,
    w: usize,
    stride: usize,
    half_width: f64,
    mx: &mut [f64],
    my: &mut [f64],
) {
    if !a.visible || !b.visible {
        return;
    }
    let (ax, ay) = (to_grid(a.x, stride), to_grid(a.y, stride));
    let (bx, by) = (to_grid(b.x, stride), to_grid(b.y, stride));
    let len = ((bx - ax).powi(2) + (by - ay).powi(2)).sqrt();
    if len < 1e-9 {
        return;
    }
    let (ux, uy) = ((bx - ax) / len, (by - ay) / len);
    let lo_x = (ax.min(bx) - half_width).floor().max(0.0) as usize;
    let lo_y = (ay.min(by) - half_width).floor().max(0.0) as usize;
    let hi_x = (ax.max(bx) + half_width).ceil().min(w as f64 - 1.0);
    let hi_y = (ay.max(by) + half_width).ceil().min(h as f64 - 1.0);
    if hi_x < 0.0 || hi_y < 0.0 {
        return;
    }
    for y in lo_y..=hi_y as usize {
        for x in lo_x..=hi_x as usize {
            let (px, py) = (x as f64 - ax, y as f64 - ay);
            let along = px * ux + py * uy;
            let across = (px * uy - py * ux).abs();
            if (0.0..=len).contains(&along) && across <= half_width {
                mx[y * w + x] = ux;
                my[y * w + x] = uy;
            }
        }
    }
}

/// Piecewise-constant sigma over epochs, in pixels of the reference grid.
#[derive(Clone, Debug, PartialEq)]
pub struct SigmaSchedule {
    /// `(first epoch, sigma)`, ascending epochs.
    pub steps: Vec<(f64, f64)>,
    pub reference_stride: usize,
}

impl Default for SigmaSchedule {
    fn default() -> Self {
        Self {
            steps: vec![(0.0, 4.0), (50.0, 3.0), (100.0, 2.0)],
            reference_stride: REFERENCE_STRIDE,
        }
    }
}

impl SigmaSchedule {
    pub fn new(steps: Vec<(f64, f64)>) -> Result<Self> {
        let s = Self {
            steps,
            reference_stride: REFERENCE_STRIDE,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::InvalidArgument("empty sigma schedule".into()));
        }
        for pair in self.steps.windows(2) {
            if pair[1].0 <= pair[0].0 {
                return Err(Error::InvalidArgument(
                    "sigma schedule epochs must increase".into(),
                ));
            }
            if pair[1].1 > pair[0].1 {
                return Err(Error::InvalidArgument(
                    "sigma schedule must not increase".into(),
                ));
            }
        }
        if self.steps.iter().any(|&(_, s)| !(s > 0.0)) {
            return Err(Error::InvalidArgument(
                "sigma values must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn sigma_0(&self) -> f64 {
        self.steps[0].1
    }

    pub fn sigma_inf(&self) -> f64 {
        self.steps[self.steps.len() - 1].1
    }

    /// Sigma in reference-grid pixels.
    pub fn reference_sigma(&self, epoch: f64) -> Result<f64> {
        if self.steps.is_empty() {
            return Err(Error::InvalidArgument("empty sigma schedule".into()));
        }
        Ok(self
            .steps
            .iter()
            .rev()
            .find(|&&(from, _)| epoch >= from)
            .unwrap_or(&self.steps[0])
            .1)
    }

    /// Sigma in pixels of a grid with the given output stride.
    pub fn sigma_at_epoch(&self, epoch: f64, output_stride: usize) -> Result<f64> {
        Ok(self.reference_sigma(epoch)? * self.reference_stride as f64 / output_stride as f64)
    }

    /// Index of the active step, used to detect sigma changes.
    pub fn step_index(&self, epoch: f64) -> usize {
        self.steps
            .iter()
            .rposition(|&(from, _)| epoch >= from)
            .unwrap_or(0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TargetMaps<T: Element> {
    pub head: String,
    pub kind: HeadKind,
    /// `1×channels×h×w`.
    pub maps: Tensor<T>,
    pub sigma_used: f64,
}

/// Targets for every supervised head of `model`, in head order. Keypoint
/// coordinates are in pixels of the model's input frame.
pub fn build_targets<T: Element>(
    ann: &KeypointAnnotation,
    model: &ModelGraph,
    schedule: &SigmaSchedule,
    paf_width: f64,
    epoch: f64,
) -> Result<Vec<TargetMaps<T>>> {
    let cfg = &model.config;
    if ann.keypoints.len() != cfg.keypoints {
        return Err(Error::InvalidArgument(format!(
            "annotation has {} keypoints, model predicts {}",
            ann.keypoints.len(),
            cfg.keypoints
        )));
    }
    let mut cache: Vec<(usize, Tensor<T>, f64)> = Vec::new();
    let mut out = Vec::with_capacity(model.heads.len());
    for head in &model.heads {
        let d = model.graph.dims(head.node);
        let (h, w) = (d.h, d.w);
        let sigma = schedule.sigma_at_epoch(epoch, head.stride)?;
        let maps = match head.kind {
            HeadKind::Paf => {
                // each limb owns a channel pair; a repeated limb overwrites
                let mut data = vec![T::zero(); 2 * cfg.num_limbs() * h * w];
                let mut mx = vec![0.0; h * w];
                let mut my = vec![0.0; h * w];
                for (l, &(a, b)) in cfg.limbs.iter().enumerate() {
                    mx.iter_mut().for_each(|v| *v = 0.0);
                    my.iter_mut().for_each(|v| *v = 0.0);
                    paf_into(
                        &ann.keypoints[a],
                        &ann.keypoints[b],
                        h,
                        w,
                        head.stride,
                        paf_width,
                        &mut mx,
                        &mut my,
                    );
                    let (cx, cy) = data.split_at_mut((2 * l + 1) * h * w);
                    let cx = &mut cx[2 * l * h * w..];
                    for i in 0..h * w {
                        cx[i] = T::of(mx[i]);
                        cy[i] = T::of(my[i]);
                    }
                }
                Tensor::from_vec(Shape::new(1, 2 * cfg.num_limbs(), h, w), data)?
            }
            HeadKind::Keypoints | HeadKind::Upscaled => {
                if let Some((_, t, _)) = cache
                    .iter()
                    .find(|(s, t, _)| *s == head.stride && t.shape().h == h)
                {
                    t.clone()
                } else {
                    let mut data = Vec::with_capacity(cfg.keypoints * h * w);
                    for kp in &ann.keypoints {
                        data.extend(
                            confidence_map(kp, h, w, head.stride, sigma)?
                                .into_iter()
                                .map(T::of),
                        );
                    }
                    let t = Tensor::from_vec(Shape::new(1, cfg.keypoints, h, w), data)?;
                    cache.push((head.stride, t.clone(), sigma));
                    t
                }
            }
        };
        out.push(TargetMaps {
            head: head.name.clone(),
            kind: head.kind,
            maps,
            sigma_used: sigma,
        });
    }
    Ok(out)
}
