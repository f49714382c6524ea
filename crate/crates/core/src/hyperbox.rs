//! Axis-aligned interval vectors.
//!
//! Every set the controller manipulates (disturbance set, tube cross-sections,
//! state and input constraints) is a box, so Minkowski sums and differences
//! reduce to elementwise arithmetic on half-widths.

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, MpcError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperbox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl Hyperbox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        check_dim("hyperbox bounds", lower.len(), upper.len())?;
        for (i, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if !(l.is_finite() && u.is_finite()) {
                return Err(MpcError::InvalidParameter(format!(
                    "hyperbox bound {i} is not finite"
                )));
            }
            if l > u {
                return Err(MpcError::InvalidParameter(format!(
                    "hyperbox lower[{i}] = {l} exceeds upper[{i}] = {u}"
                )));
            }
        }
        Ok(Self { lower, upper })
    }

    /// Box centred at the origin with the given non-negative half-widths.
    pub fn symmetric(half_widths: &[f64]) -> Result<Self> {
        if let Some(i) = half_widths.iter().position(|h| *h < 0.0) {
            return Err(MpcError::InvalidParameter(format!(
                "negative half-width at index {i}"
            )));
        }
        Self::new(
            half_widths.iter().map(|h| -h).collect(),
            half_widths.to_vec(),
        )
    }

    /// The singleton `{0}` in `dim` dimensions.
    pub fn origin(dim: usize) -> Self {
        Self {
            lower: vec![0.0; dim],
            upper: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (l + u))
            .collect()
    }

    pub fn half_widths(&self) -> Vec<f64> {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| 0.5 * (u - l))
            .collect()
    }

    pub fn contains(&self, point: &[f64]) -> bool {
        point.len() == self.dim()
            && point
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(p, (l, u))| *p >= *l && *p <= *u)
    }

    pub fn contains_vec(&self, point: &DVector<f64>) -> bool {
        self.contains(point.as_slice())
    }

    /// Smallest slack to any face; negative when the point lies outside.
    pub fn min_slack(&self, point: &[f64]) -> f64 {
        point
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(p, (l, u))| (p - l).min(u - p))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn is_subset_of(&self, other: &Hyperbox) -> bool {
        self.dim() == other.dim()
            && self
                .lower
                .iter()
                .zip(&other.lower)
                .all(|(a, b)| a >= b)
            && self
                .upper
                .iter()
                .zip(&other.upper)
                .all(|(a, b)| a <= b)
    }

    /// Minkowski sum `self ⊕ other`.
    pub fn minkowski_sum(&self, other: &Hyperbox) -> Result<Hyperbox> {
        check_dim("minkowski sum", self.dim(), other.dim())?;
        Ok(Hyperbox {
            lower: self
                .lower
                .iter()
                .zip(&other.lower)
                .map(|(a, b)| a + b)
                .collect(),
            upper: self
                .upper
                .iter()
                .zip(&other.upper)
                .map(|(a, b)| a + b)
                .collect(),
        })
    }

    /// Pontryagin difference `self ⊖ other`; `None` when the result is empty.
    pub fn minkowski_difference(&self, other: &Hyperbox) -> Result<Option<Hyperbox>> {
        check_dim("minkowski difference", self.dim(), other.dim())?;
        let lower: Vec<f64> = self
            .lower
            .iter()
            .zip(&other.lower)
            .map(|(a, b)| a - b)
            .collect();
        let upper: Vec<f64> = self
            .upper
            .iter()
            .zip(&other.upper)
            .map(|(a, b)| a - b)
            .collect();
        if lower.iter().zip(&upper).any(|(l, u)| l > u) {
            return Ok(None);
        }
        Ok(Some(Hyperbox { lower, upper }))
    }

    /// Shrinks each side of dimension `i` by `margins[i]`; `None` if empty.
    pub fn shrink(&self, margins: &[f64]) -> Result<Option<Hyperbox>> {
        self.minkowski_difference(&Hyperbox::symmetric(margins)?)
    }

    /// Vertices of a box (2^dim of them); only sensible for small dims.
    pub fn vertices(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        (0..(1usize << n))
            .map(|mask| {
                (0..n)
                    .map(|i| {
                        if mask & (1 << i) == 0 {
                            self.lower[i]
                        } else {
                            self.upper[i]
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Maps `unit` in `[0,1]^dim` onto the box.
    pub fn from_unit(&self, unit: &[f64]) -> Vec<f64> {
        unit.iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(t, (l, u))| l + t * (u - l))
            .collect()
    }

    pub fn clamp(&self, point: &[f64]) -> Vec<f64> {
        point
            .iter()
            .zip(self.lower.iter().zip(&self.upper))
            .map(|(p, (l, u))| p.clamp(*l, *u))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_inverted_bounds() {
        assert!(Hyperbox::new(vec![1.0], vec![0.0]).is_err());
        assert!(Hyperbox::new(vec![0.0, 0.0], vec![1.0]).is_err());
    }

    #[test]
    fn difference_with_origin_is_identity() {
        let b = Hyperbox::new(vec![0.0, -1.0], vec![1.0, 2.0]).unwrap();
        let d = b.minkowski_difference(&Hyperbox::origin(2)).unwrap().unwrap();
        assert_eq!(d, b);
    }

    #[test]
    fn empty_difference_is_none() {
        let b = Hyperbox::new(vec![0.0], vec![1.0]).unwrap();
        assert!(b.shrink(&[0.6]).unwrap().is_none());
        assert!(b.shrink(&[0.5]).unwrap().is_some());
    }

    #[test]
    fn min_slack_sign() {
        let b = Hyperbox::new(vec![0.0, 0.0], vec![1.0, 1.0]).unwrap();
        assert!((b.min_slack(&[0.5, 0.25]) - 0.25).abs() < 1e-15);
        assert!(b.min_slack(&[1.0 + 1e-6, 0.5]) < 0.0);
    }

    proptest! {
        #[test]
        fn sum_adds_half_widths(
            a in proptest::collection::vec(0.0f64..5.0, 3),
            b in proptest::collection::vec(0.0f64..5.0, 3),
            c in proptest::collection::vec(-3.0f64..3.0, 3),
        ) {
            let lower: Vec<f64> = c.iter().zip(&a).map(|(c, a)| c - a).collect();
            let upper: Vec<f64> = c.iter().zip(&a).map(|(c, a)| c + a).collect();
            let x = Hyperbox::new(lower, upper).unwrap();
            let y = Hyperbox::symmetric(&b).unwrap();
            let s = x.minkowski_sum(&y).unwrap();
            for i in 0..3 {
                prop_assert!((s.half_widths()[i] - a[i] - b[i]).abs() < 1e-12);
            }
            // (X ⊕ Y) ⊖ Y recovers X for boxes.
            let back = s.minkowski_difference(&y).unwrap().unwrap();
            for i in 0..3 {
                prop_assert!((back.lower()[i] - x.lower()[i]).abs() < 1e-12);
                prop_assert!((back.upper()[i] - x.upper()[i]).abs() < 1e-12);
            }
        }
    }
}
