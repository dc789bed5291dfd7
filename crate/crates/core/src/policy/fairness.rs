use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::reward::reward_bounds;

/// α-fair weighting and the affine map that puts rewards in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FairnessConfig {
    pub alpha: f64,
    pub epsilon: f64,
    pub shift: f64,
    pub scale: f64,
}

impl FairnessConfig {
    pub fn new(alpha: f64, epsilon: f64, classes: usize, lambda: f64) -> Result<Self> {
        if !(alpha >= 0.0) {
            return Err(Error::invalid("fairness", format!("alpha {alpha} must be >= 0")));
        }
        if !(epsilon > 0.0) {
            return Err(Error::invalid("fairness", format!("epsilon {epsilon} must be > 0")));
        }
        let (lo, hi) = reward_bounds(classes, lambda);
        Ok(Self {
            alpha,
            epsilon,
            shift: -lo,
            scale: 1.0 / (hi - lo),
        })
    }

    pub fn map_reward(&self, r: f64) -> f64 {
        ((r + self.shift) * self.scale).clamp(0.0, 1.0)
    }

    pub fn weights(&self, v: &[f64]) -> Vec<f64> {
        fairness_weights(v, self.alpha, self.epsilon)
    }
}

/// `w_c = max(V_c, eps)^(-alpha)`.
pub fn fairness_weights(v: &[f64], alpha: f64, epsilon: f64) -> Vec<f64> {
    v.iter().map(|x| x.max(epsilon).powf(-alpha)).collect()
}

/// α-fair utility: `sum V^(1-α) / (1-α)`, or `sum log V` at α = 1.
pub fn fair_objective(v: &[f64], alpha: f64) -> Result<f64> {
    if !(alpha >= 0.0) {
        return Err(Error::invalid("fair_objective", format!("alpha {alpha} must be >= 0")));
    }
    if alpha == 0.0 {
        return Ok(v.iter().sum());
    }
    if v.iter().any(|x| !(*x > 0.0)) {
        return Err(Error::invalid("fair_objective", "values must be positive"));
    }
    if alpha == 1.0 {
        Ok(v.iter().map(|x| x.ln()).sum())
    } else {
        Ok(v.iter().map(|x| x.powf(1.0 - alpha) / (1.0 - alpha)).sum())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn objective_examples() {
        assert_eq!(fair_objective(&[1.0; 4], 0.5).unwrap(), 8.0);
        assert_eq!(fair_objective(&[0.5, 2.0, -1.0], 0.0).unwrap(), 1.5);
        assert!((fair_objective(&[std::f64::consts::E], 1.0).unwrap() - 1.0).abs() < 1e-15);
        assert!(fair_objective(&[1.0], -0.1).is_err());
    }

    #[test]
    fn weight_examples() {
        assert_eq!(fairness_weights(&[1.0, 4.0], 0.5, 1e-3), vec![1.0, 0.5]);
        assert_eq!(fairness_weights(&[0.3, -7.0], 0.0, 1e-3), vec![1.0, 1.0]);
        assert!((fairness_weights(&[-2.0], 1.0, 1e-3)[0] - 1000.0).abs() < 1e-9);
    }

    #[test]
    fn reward_map_hits_unit_interval() {
        let f = FairnessConfig::new(0.5, 1e-3, 8, 1.0).unwrap();
        assert_eq!(f.map_reward(-1.0), 0.0);
        assert!((f.map_reward(15.0) - 1.0).abs() < 1e-15);
    }
}
