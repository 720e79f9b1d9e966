//! Linear value of an integration position: information kept minus distortion and cost.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PositionValueWeights {
    w_i: f64,
    w_d: f64,
    w_c: f64,
}

impl PositionValueWeights {
    /// Weights must be finite, nonnegative and not all zero.
    pub fn new(w_i: f64, w_d: f64, w_c: f64) -> Result<Self> {
        let w = [w_i, w_d, w_c];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Config(format!(
                "value weights {w:?} must be finite and nonnegative"
            )));
        }
        if w.iter().all(|&v| v == 0.0) {
            return Err(Error::Config("value weights are all zero".into()));
        }
        Ok(Self { w_i, w_d, w_c })
    }

    pub fn w_i(&self) -> f64 {
        self.w_i
    }

    pub fn w_d(&self) -> f64 {
        self.w_d
    }

    pub fn w_c(&self) -> f64 {
        self.w_c
    }

    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0) {
            return Err(Error::Config(format!("scale factor {factor} must be positive")));
        }
        Self::new(self.w_i * factor, self.w_d * factor, self.w_c * factor)
    }
}

/// `w_I * info - w_D * distortion - w_C * cost`.
pub fn position_value(info: f64, distortion: f64, cost: f64, w: &PositionValueWeights) -> f64 {
    w.w_i * info - w.w_d * distortion - w.w_c * cost
}

/// Candidate indices by descending value; equal values keep input order.
pub fn rank_by_value(candidates: &[(f64, f64, f64)], w: &PositionValueWeights) -> Vec<usize> {
    let values: Vec<f64> = candidates.iter().map(|&(i, d, c)| position_value(i, d, c, w)).collect();
    let mut idx: Vec<usize> = (0..candidates.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]));
    idx
}

/// Index of the first candidate with the highest value.
pub fn best_position(candidates: &[(f64, f64, f64)], w: &PositionValueWeights) -> Option<usize> {
    rank_by_value(candidates, w).first().copied()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let w = PositionValueWeights::new(1.0, 0.5, 0.2).unwrap();
        assert_eq!(position_value(0.0, 0.0, 0.0, &w), 0.0);
        assert!((position_value(0.9, 0.1, 0.2, &w) - 0.81).abs() < 1e-15);
    }

    #[test]
    fn invalid_weights() {
        assert!(PositionValueWeights::new(0.0, 0.0, 0.0).is_err());
        assert!(PositionValueWeights::new(-1.0, 0.0, 1.0).is_err());
        assert!(PositionValueWeights::new(1.0, 0.0, 1.0).unwrap().scaled(0.0).is_err());
    }

    #[test]
    fn ranking() {
        let w = PositionValueWeights::new(1.0, 1.0, 1.0).unwrap();
        let c = [(0.5, 0.1, 0.1), (0.9, 0.1, 0.1), (0.5, 0.1, 0.1)];
        assert_eq!(rank_by_value(&c, &w), vec![1, 0, 2]);
        assert_eq!(best_position(&c, &w), Some(1));
        assert_eq!(best_position(&[], &w), None);
    }
}
