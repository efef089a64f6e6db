//! Compound scaling arithmetic.

use crate::backbones::BackboneScale;
use crate::error::{Error, Result};

pub const ALPHA: f64 = 1.2;
pub const BETA: f64 = 1.1;
pub const GAMMA: f64 = 1.15;

/// `(α·β²·γ²)^φ`, the FLOP growth factor for scale index `φ`.
pub fn compound_scaling_check(alpha: f64, beta: f64, gamma: f64, phi: f64) -> Result<f64> {
    if alpha <= 0.0 || beta <= 0.0 || gamma <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "scaling coefficients must be positive: α={alpha}, β={beta}, γ={gamma}"
        )));
    }
    Ok((alpha * beta * beta * gamma * gamma).powf(phi))
}

/// Number of Mobile DenseNets per detection pass: `α^φ` rounded to nearest.
pub fn detection_depth(scale: BackboneScale) -> usize {
    (scale.alpha_phi() + 0.5).floor() as usize
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_nonpositive() {
        assert!(compound_scaling_check(0.0, 1.0, 1.0, 1.0).is_err());
        assert_eq!(
            compound_scaling_check(ALPHA, BETA, GAMMA, 0.0).unwrap(),
            1.0
        );
    }
}
