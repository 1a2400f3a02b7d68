use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-channel min/max scaling onto `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl Normalizer {
    pub fn new(min: Vec<f64>, max: Vec<f64>) -> Result<Self> {
        if min.len() != max.len() {
            return Err(Error::domain("normalizer bounds differ in length"));
        }
        if let Some(k) = (0..min.len()).find(|&k| !(max[k] > min[k])) {
            return Err(Error::domain(format!("normalizer channel {k}: max must exceed min")));
        }
        Ok(Self { min, max })
    }

    /// Bounds of `rows` widened by `margin` (fraction of the range) per side.
    ///
    /// Constant channels get a unit-width window around their value.
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>, margin: f64) -> Result<Self> {
        let mut min: Vec<f64> = Vec::new();
        let mut max: Vec<f64> = Vec::new();
        for row in rows {
            if min.is_empty() {
                min = row.to_vec();
                max = row.to_vec();
                continue;
            }
            if row.len() != min.len() {
                return Err(Error::domain("rows of unequal width"));
            }
            for (k, &v) in row.iter().enumerate() {
                min[k] = min[k].min(v);
                max[k] = max[k].max(v);
            }
        }
        if min.is_empty() {
            return Err(Error::domain("cannot fit a normalizer to no data"));
        }
        for k in 0..min.len() {
            let range = max[k] - min[k];
            if range < 1e-9 {
                min[k] -= 0.5;
                max[k] += 0.5;
            } else {
                min[k] -= margin * range;
                max[k] += margin * range;
            }
        }
        Self::new(min, max)
    }

    pub fn dim(&self) -> usize {
        self.min.len()
    }

    /// Sub-normalizer over the first `n` channels.
    pub fn leading(&self, n: usize) -> Self {
        Self {
            min: self.min[..n].to_vec(),
            max: self.max[..n].to_vec(),
        }
    }

    pub fn scale(&self, k: usize) -> f64 {
        self.max[k] - self.min[k]
    }

    pub fn normalize(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .enumerate()
            .map(|(k, &x)| (x - self.min[k]) / self.scale(k))
            .collect()
    }

    pub fn denormalize(&self, v: &[f64]) -> Vec<f64> {
        v.iter()
            .enumerate()
            .map(|(k, &x)| x * self.scale(k) + self.min[k])
            .collect()
    }
}
