use nalgebra::DVector;
use serde::{Deserialize, Serialize};

/// Entries above this value count as part of the support.
pub const SUPPORT_THRESHOLD: f64 = 1e-10;

/// Synthetic control weights over an ordered list of controls.
///
/// Constrained estimators produce simplex weights (`on_simplex == true`); the
/// unconstrained GMM variant produces arbitrary real weights and is flagged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    values: Vec<f64>,
    on_simplex: bool,
}

impl WeightVector {
    /// Simplex weights; negative round-off is clamped and the sum renormalized.
    pub fn simplex(values: &DVector<f64>) -> Self {
        let mut v: Vec<f64> = values.iter().map(|&x| x.max(0.0)).collect();
        let s: f64 = v.iter().sum();
        if s > 0.0 {
            v.iter_mut().for_each(|x| *x /= s);
        } else if !v.is_empty() {
            let u = 1.0 / v.len() as f64;
            v.iter_mut().for_each(|x| *x = u);
        }
        Self {
            values: v,
            on_simplex: true,
        }
    }

    pub fn uniform(j: usize) -> Self {
        Self {
            values: vec![1.0 / j as f64; j],
            on_simplex: true,
        }
    }

    /// Weights that are not constrained to the simplex.
    pub fn unconstrained(values: &DVector<f64>) -> Self {
        Self {
            values: values.iter().copied().collect(),
            on_simplex: false,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn to_dvector(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.values)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn on_simplex(&self) -> bool {
        self.on_simplex
    }

    /// Positions with weight above [`SUPPORT_THRESHOLD`].
    pub fn support(&self) -> Vec<usize> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > SUPPORT_THRESHOLD)
            .map(|(i, _)| i)
            .collect()
    }
}
