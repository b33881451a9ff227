use super::{Heatmap, ProfileError};

/// 1-based ranks; tied values share the average of the ranks they span.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        // positions i..=j hold equal values
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rho: Pearson correlation of average ranks.
///
/// Returns `None` when either input has zero variance (or fewer than two
/// elements), where the coefficient is undefined.
pub fn spearman_rho_values(a: &[f64], b: &[f64]) -> Result<Option<f64>, ProfileError> {
    if a.len() != b.len() {
        return Err(ProfileError::DimMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Ok(None);
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        let (dx, dy) = (x - mean, y - mean);
        cov += dx * dy;
        va += dx * dx;
        vb += dy * dy;
    }
    if va == 0.0 || vb == 0.0 {
        return Ok(None);
    }
    Ok(Some((cov / (va * vb).sqrt()).clamp(-1.0, 1.0)))
}

/// Rank correlation between two heatmaps over their flattened values.
pub fn spearman_rho(a: &Heatmap, b: &Heatmap) -> Result<Option<f64>, ProfileError> {
    if a.dim != b.dim {
        return Err(ProfileError::DimMismatch(a.dim, b.dim));
    }
    spearman_rho_values(&a.values, &b.values)
}
