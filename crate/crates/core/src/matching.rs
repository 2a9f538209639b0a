//! Optimal one-to-one assignment of ground truths (rows) to predictions
//! (columns) via shortest augmenting paths with dual potentials, O(M²N).

use serde::{Deserialize, Serialize};

use crate::error::{PdpError, Result};
use crate::numcore::Tensor;

/// Ground truth `i` is matched to prediction `pairs[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    pub pairs: Vec<usize>,
    pub cost: f64,
}

impl Assignment {
    pub fn empty() -> Self {
        Self { pairs: Vec::new(), cost: 0.0 }
    }

    /// Inverse map: for each of `n` predictions, the ground truth it serves.
    pub fn matched_targets(&self, n: usize) -> Vec<Option<usize>> {
        let mut inv = vec![None; n];
        for (gt, &pred) in self.pairs.iter().enumerate() {
            inv[pred] = Some(gt);
        }
        inv
    }

    pub fn is_injective(&self) -> bool {
        let mut seen = std::collections::HashSet::new();
        self.pairs.iter().all(|p| seen.insert(*p))
    }
}

/// Solves `min Σᵢ cost[i, σ(i)]` over injective `σ` for an `M×N` matrix with
/// `M ≤ N`.
///
/// Ties are resolved deterministically: the column scan keeps the first
/// (lowest index) column among equal reduced costs.
pub fn hungarian(cost: &Tensor) -> Result<Assignment> {
    let (m, n) = (cost.rows(), cost.cols());
    if m > n {
        return Err(PdpError::TooManyTargets { rows: m, cols: n });
    }
    if !cost.is_finite() {
        return Err(PdpError::NonFinite("matching cost".into()));
    }
    if m == 0 {
        return Ok(Assignment::empty());
    }

    // 1-based potentials; column 0 is the virtual source.
    let mut u = vec![0.0f64; m + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for row in 1..=m {
        col_owner[0] = row;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost.at(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        // Augment along the alternating path.
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs = vec![0usize; m];
    for j in 1..=n {
        if col_owner[j] != 0 {
            pairs[col_owner[j] - 1] = j - 1;
        }
    }
    let total = pairs.iter().enumerate().map(|(i, &j)| cost.at(i, j)).sum();
    Ok(Assignment { pairs, cost: total })
}
