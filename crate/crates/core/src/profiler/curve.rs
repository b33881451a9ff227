use serde::{Deserialize, Serialize};

use super::ProfileError;

/// Entries sorted descending with their running share of the total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CumulativeCurve {
    pub sorted: Vec<f64>,
    pub cumulative: Vec<f64>,
}

impl CumulativeCurve {
    pub fn from_values(values: &[f64]) -> Result<Self, ProfileError> {
        let mut sorted: Vec<f64> = values.to_vec();
        sorted.sort_by(|a, b| b.total_cmp(a));
        let total: f64 = sorted.iter().sum();
        if sorted.is_empty() || !(total > 0.0) {
            return Err(ProfileError::EmptyInput);
        }
        let mut run = 0.0;
        let cumulative = sorted
            .iter()
            .map(|v| {
                run += v;
                run / total
            })
            .collect();
        Ok(Self { sorted, cumulative })
    }

    /// Share held by the top `ceil(fraction * N)` entries.
    pub fn top_fraction(&self, fraction: f64) -> Result<f64, ProfileError> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(ProfileError::BadFraction(fraction));
        }
        let n = self.sorted.len();
        // guard against 0.7 * 10 = 7.000000000000001 style round-up
        let take = ((fraction * n as f64) - 1e-9).ceil().clamp(1.0, n as f64) as usize;
        Ok(self.cumulative[take - 1])
    }
}

pub fn cumulative_top_fraction(values: &[f64], fraction: f64) -> Result<f64, ProfileError> {
    CumulativeCurve::from_values(values)?.top_fraction(fraction)
}
