use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, KbseError, Result};

/// Axis-aligned box `low <= x <= high`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxBounds {
    pub low: Vec<f64>,
    pub high: Vec<f64>,
}

impl BoxBounds {
    pub fn new(low: Vec<f64>, high: Vec<f64>) -> Result<Self> {
        check_dim(low.len(), high.len())?;
        if low.iter().zip(&high).any(|(l, h)| !(l <= h) || !l.is_finite() || !h.is_finite()) {
            return Err(KbseError::InvalidArgument(format!(
                "box bounds must be finite with low <= high: {low:?} / {high:?}"
            )));
        }
        Ok(Self { low, high })
    }

    pub fn symmetric(half_widths: &[f64]) -> Self {
        Self {
            low: half_widths.iter().map(|h| -h).collect(),
            high: half_widths.to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.low.len()
    }

    pub fn clip(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.low.iter().zip(&self.high))
            .map(|(v, (l, h))| v.clamp(*l, *h))
            .collect()
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.len() == self.dim()
            && x.iter().zip(self.low.iter().zip(&self.high)).all(|(v, (l, h))| *l <= *v && *v <= *h)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.low
            .iter()
            .zip(&self.high)
            .map(|(l, h)| if l < h { rng.random_range(*l..=*h) } else { *l })
            .collect()
    }

    pub fn center(&self) -> Vec<f64> {
        self.low.iter().zip(&self.high).map(|(l, h)| 0.5 * (l + h)).collect()
    }

    pub fn half_width(&self) -> Vec<f64> {
        self.low.iter().zip(&self.high).map(|(l, h)| 0.5 * (h - l)).collect()
    }
}
