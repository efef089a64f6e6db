//! Momentum SGD and the decaying triangular learning-rate cycle.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::supervision::SigmaSchedule;
use crate::tensor::{Element, ParamStore, Tensor};
use crate::weights;

pub const MOMENTUM: f64 = 0.9;
pub const LR_MIN_DIVISOR: f64 = 3000.0;
pub const CYCLE_EPOCHS: f64 = 3.0;
pub const PEAK_DECAY: f64 = 0.94;
pub const DEFAULT_LR_MAX: f64 = 1e-2;

/// Geometric mean of the rate bounds, doubled per unit of sigma reduction.
pub fn lambda_inf(lr_max: f64, lr_min: f64, sigma_0: f64, sigma_inf: f64) -> Result<f64> {
    if !(lr_max > 0.0 && lr_min > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "learning rates must be positive (max {lr_max}, min {lr_min})"
        )));
    }
    if !(sigma_0 > 0.0 && sigma_inf > 0.0) || sigma_0 < sigma_inf {
        return Err(Error::InvalidArgument(format!(
            "need sigma_0 >= sigma_inf > 0, got {sigma_0} and {sigma_inf}"
        )));
    }
    let mean = 10f64.powf((lr_max.log10() + lr_min.log10()) / 2.0);
    Ok(mean * 2f64.powf(sigma_0 - sigma_inf))
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClrSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub lr_inf: f64,
    pub cycle_epochs: f64,
    pub decay: f64,
}

impl ClrSchedule {
    pub fn new(lr_max: f64, sigma: &SigmaSchedule) -> Result<Self> {
        sigma.validate()?;
        let lr_min = lr_max / LR_MIN_DIVISOR;
        let lr_inf = lambda_inf(lr_max, lr_min, sigma.sigma_0(), sigma.sigma_inf())?;
        Self::with_params(lr_max, lr_min, lr_inf, CYCLE_EPOCHS, PEAK_DECAY)
    }

    pub fn with_params(
        lr_max: f64,
        lr_min: f64,
        lr_inf: f64,
        cycle_epochs: f64,
        decay: f64,
    ) -> Result<Self> {
        if !(lr_min < lr_inf && lr_inf < lr_max) {
            return Err(Error::InvalidArgument(format!(
                "need lr_min < lr_inf < lr_max, got {lr_min:e} < {lr_inf:e} < {lr_max:e}"
            )));
        }
        if !(cycle_epochs > 0.0) || !(0.0..1.0).contains(&decay) {
            return Err(Error::InvalidArgument(
                "cycle length must be positive and decay in [0, 1)".into(),
            ));
        }
        Ok(Self {
            lr_max,
            lr_min,
            lr_inf,
            cycle_epochs,
            decay,
        })
    }

    /// Peak rate of cycle `k`.
    pub fn peak(&self, k: usize) -> f64 {
        self.lr_inf + (self.lr_max - self.lr_inf) * self.decay.powi(k as i32)
    }

    /// Rate at a fractional epoch.
    pub fn lr_at(&self, epoch: f64) -> f64 {
        let e = epoch.max(0.0);
        let k = (e / self.cycle_epochs).floor();
        let phase = (e - k * self.cycle_epochs) / self.cycle_epochs;
        let tri = 1.0 - (2.0 * phase - 1.0).abs();
        self.lr_min + (self.peak(k as usize) - self.lr_min) * tri
    }
}

/// Per-parameter velocity buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct SgdState<T: Element> {
    pub momentum: f64,
    velocity: HashMap<String, Vec<T>>,
}

impl<T: Element> Default for SgdState<T> {
    fn default() -> Self {
        Self::new(MOMENTUM)
    }
}

impl<T: Element> SgdState<T> {
    pub fn new(momentum: f64) -> Self {
        Self {
            momentum,
            velocity: HashMap::new(),
        }
    }

    pub fn velocity(&self, name: &str) -> Option<&[T]> {
        self.velocity.get(name).map(Vec::as_slice)
    }

    /// Write velocities in parameter order.
    pub fn save(&self, store: &ParamStore<T>, path: &Path) -> Result<()> {
        let tensors: Vec<(String, Tensor<T>)> = store
            .iter()
            .filter_map(|p| {
                self.velocity
                    .get(&p.name)
                    .map(|v| (p.name.clone(), Tensor::from_vec(p.value.shape(), v.clone())))
            })
            .map(|(n, t)| t.map(|t| (n, t)))
            .collect::<Result<_>>()?;
        weights::save_tensors(path, tensors.iter().map(|(n, t)| (n.as_str(), t)))
    }

    pub fn load(path: &Path, momentum: f64) -> Result<Self> {
        let velocity = weights::read_tensors::<T>(path)?
            .into_iter()
            .map(|(n, t)| (n, t.into_data()))
            .collect();
        Ok(Self { momentum, velocity })
    }
}

/// `v ← μ·v − rate·g; p ← p + v` for every trainable parameter with a
/// gradient. Frozen parameters are left untouched.
pub fn sgd_step<'a, T: Element>(
    store: &mut ParamStore<T>,
    grads: impl IntoIterator<Item = (&'a str, &'a [T])>,
    state: &mut SgdState<T>,
    rate: f64,
) -> Result<()> {
    let mu = T::of(state.momentum);
    let lr = T::of(rate);
    for (name, g) in grads {
        let p = store.get_mut(name).ok_or_else(|| {
            Error::InvalidArgument(format!("gradient for unknown parameter {name}"))
        })?;
        if !p.trainable {
            continue;
        }
        if g.len() != p.value.len() {
            return Err(Error::Dimension {
                op: "sgd_step",
                detail: format!(
                    "{name}: gradient has {} values, parameter {}",
                    g.len(),
                    p.value.len()
                ),
            });
        }
        let v = state
            .velocity
            .entry(name.to_string())
            .or_insert_with(|| vec![T::zero(); g.len()]);
        for ((w, vi), &gi) in p.value.data_mut().iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = mu * *vi - lr * gi;
            *w = *w + *vi;
        }
    }
    Ok(())
}
