//! Non-dominated-set extraction over (bits, ops, error) trade-offs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One trained model's position in the trade-off space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoPoint {
    pub model_id: String,
    pub bits: u64,
    pub ops: u64,
    pub test_error: f64,
}

impl ParetoPoint {
    pub fn validate(&self) -> Result<()> {
        if !(self.test_error >= 0.0 && self.test_error.is_finite()) {
            return Err(Error::data(format!(
                "test error of {} must be finite and >= 0",
                self.model_id
            )));
        }
        Ok(())
    }
}

/// Axes a front can be minimized over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    Bits,
    Ops,
    Error,
}

impl ParetoPoint {
    fn key(&self, dims: &[Objective]) -> Vec<f64> {
        dims.iter()
            .map(|d| match d {
                Objective::Bits => self.bits as f64,
                Objective::Ops => self.ops as f64,
                Objective::Error => self.test_error,
            })
            .collect()
    }
}

/// `a` dominates `b` when it is no worse everywhere and strictly better
/// somewhere (all objectives minimized).
fn dominates(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| x <= y) && a.iter().zip(b).any(|(x, y)| x < y)
}

/// Indices of the non-dominated rows, in input order. Equal rows do not
/// dominate each other, so exact duplicates all survive.
///
/// Rows are visited in lexicographic order; a row can only ever be dominated
/// by one sorted ahead of it, so each candidate is checked against the
/// accepted front alone rather than every other row.
pub fn pareto_front_keys(keys: &[Vec<f64>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..keys.len()).collect();
    order.sort_by(|&a, &b| {
        keys[a]
            .iter()
            .zip(&keys[b])
            .map(|(x, y)| x.partial_cmp(y).expect("objective values must not be NaN"))
            .find(|c| c.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut front: Vec<usize> = Vec::new();
    for &i in &order {
        if !front.iter().any(|&j| dominates(&keys[j], &keys[i])) {
            front.push(i);
        }
    }
    front.sort_unstable();
    front
}

/// The subset of `points` that no other point improves on in every selected
/// objective, in input order.
pub fn pareto_front(points: &[ParetoPoint], dims: &[Objective]) -> Result<Vec<usize>> {
    if points.is_empty() {
        return Err(Error::data("cannot take a front of zero points"));
    }
    if dims.is_empty() {
        return Err(Error::config("need at least one objective"));
    }
    for p in points {
        p.validate()?;
    }
    let keys: Vec<Vec<f64>> = points.iter().map(|p| p.key(dims)).collect();
    Ok(pareto_front_keys(&keys))
}
