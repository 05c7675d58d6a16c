use crate::error::{Error, Result};
use crate::forward::Vec3;

/// Minimum over all matchings of the mean Euclidean distance between the
/// true and estimated positions. Brute force, so meant for small Q.
pub fn assignment_error(truth: &[Vec3], estimate: &[Vec3]) -> Result<f64> {
    if truth.len() != estimate.len() {
        return Err(Error::invalid(format!(
            "{} true positions but {} estimates",
            truth.len(),
            estimate.len()
        )));
    }
    if truth.is_empty() {
        return Ok(0.0);
    }
    if truth.len() > 8 {
        return Err(Error::invalid(
            "assignment by enumeration is limited to 8 sources",
        ));
    }
    let dist: Vec<Vec<f64>> = truth
        .iter()
        .map(|t| estimate.iter().map(|e| (t - e).norm()).collect())
        .collect();
    let mut used = vec![false; truth.len()];
    let best = search(&dist, 0, &mut used, 0.0, f64::INFINITY);
    Ok(best / truth.len() as f64)
}

fn search(dist: &[Vec<f64>], row: usize, used: &mut [bool], acc: f64, best: f64) -> f64 {
    if row == dist.len() {
        return acc.min(best);
    }
    let mut best = best;
    for j in 0..used.len() {
        if !used[j] {
            used[j] = true;
            best = search(dist, row + 1, used, acc + dist[row][j], best);
            used[j] = false;
        }
    }
    best
}
