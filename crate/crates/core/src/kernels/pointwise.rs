//! Elementwise activations.

use rayon::prelude::*;

use crate::tensor::Element;

/// E-swish slope used throughout the detection blocks.
pub const ESWISH_BETA: f64 = 1.25;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Sigmoid,
    Swish,
    /// `β·x·sigmoid(x)`
    ESwish(f64),
}

impl Activation {
    pub fn eswish() -> Self {
        Activation::ESwish(ESWISH_BETA)
    }

    pub fn name(&self) -> String {
        match self {
            Activation::Sigmoid => "sigmoid".into(),
            Activation::Swish => "swish".into(),
            Activation::ESwish(b) => format!("eswish({b})"),
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn sigmoid_t<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

const PAR_CHUNK: usize = 1 << 14;

pub fn forward<T: Element>(kind: Activation, x: &[T]) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    y.par_chunks_mut(PAR_CHUNK)
        .zip(x.par_chunks(PAR_CHUNK))
        .for_each(|(o, i)| match kind {
            Activation::Sigmoid => o.iter_mut().zip(i).for_each(|(o, &v)| *o = sigmoid_t(v)),
            Activation::Swish => o
                .iter_mut()
                .zip(i)
                .for_each(|(o, &v)| *o = v * sigmoid_t(v)),
            Activation::ESwish(b) => {
                let b = T::of(b);
                o.iter_mut()
                    .zip(i)
                    .for_each(|(o, &v)| *o = b * v * sigmoid_t(v))
            }
        });
    y
}

/// `dx = dy · f'(x)`
pub fn backward<T: Element>(kind: Activation, x: &[T], dy: &[T]) -> Vec<T> {
    let mut dx = vec![T::zero(); x.len()];
    dx.par_chunks_mut(PAR_CHUNK)
        .zip(x.par_chunks(PAR_CHUNK).zip(dy.par_chunks(PAR_CHUNK)))
        .for_each(|(o, (xs, gs))| {
            for ((o, &v), &g) in o.iter_mut().zip(xs).zip(gs) {
                let s = sigmoid_t(v);
                let d = match kind {
                    Activation::Sigmoid => s * (T::one() - s),
                    Activation::Swish => s + v * s * (T::one() - s),
                    Activation::ESwish(b) => T::of(b) * (s + v * s * (T::one() - s)),
                };
                *o = g * d;
            }
        });
    dx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eswish_closed_form() {
        let y = forward(Activation::eswish(), &[0.0f64, 1.0]);
        assert_eq!(y[0], 0.0);
        let oracle = 1.25 / (1.0 + (-1.0f64).exp());
        assert!((y[1] - oracle).abs() < 1e-6, "{}", y[1]);
        assert!((y[1] - 0.913_823).abs() < 1e-6);
        assert_eq!(forward(Activation::Swish, &[0.0f64])[0], 0.0);
    }

    #[test]
    fn sigmoid_is_stable_for_large_inputs() {
        let y = forward(Activation::Sigmoid, &[-1000.0f64, 1000.0]);
        assert_eq!(y, vec![0.0, 1.0]);
    }
}
