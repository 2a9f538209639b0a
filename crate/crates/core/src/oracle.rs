//! Independent reference implementations used by tests and `selfcheck`.
//! Nothing here shares code paths with the routines it validates.

use crate::numcore::Tensor;

/// Exhaustive search over every injective row→column map. Returns the
/// lexicographically first optimal map and its cost.
pub fn brute_force_assignment(cost: &Tensor) -> (Vec<usize>, f64) {
    let (m, n) = (cost.rows(), cost.cols());
    assert!(m <= n, "brute force needs rows <= cols");
    let mut best = (Vec::new(), f64::INFINITY);
    let mut current = Vec::with_capacity(m);
    let mut used = vec![false; n];
    fn recurse(
        cost: &Tensor,
        row: usize,
        acc: f64,
        current: &mut Vec<usize>,
        used: &mut [bool],
        best: &mut (Vec<usize>, f64),
    ) {
        if row == cost.rows() {
            if acc < best.1 {
                *best = (current.clone(), acc);
            }
            return;
        }
        for col in 0..cost.cols() {
            if used[col] {
                continue;
            }
            used[col] = true;
            current.push(col);
            recurse(cost, row + 1, acc + cost.at(row, col), current, used, best);
            current.pop();
            used[col] = false;
        }
    }
    recurse(cost, 0, 0.0, &mut current, &mut used, &mut best);
    if m == 0 {
        best.1 = 0.0;
    }
    best
}

/// Per-element scalar multi-head attention over `[prefix_k; keys]` and
/// `[prefix_v; values]`, heads concatenated (no output projection).
pub fn naive_prefix_attention(
    queries: &Tensor,
    keys: &Tensor,
    values: &Tensor,
    prefix_k: &Tensor,
    prefix_v: &Tensor,
    heads: usize,
) -> Tensor {
    let d = queries.cols();
    let dk = d / heads;
    let nq = queries.rows();
    let lp = prefix_k.rows();
    let s = lp + keys.rows();
    let key_at = |t: usize, c: usize| if t < lp { prefix_k.at(t, c) } else { keys.at(t - lp, c) };
    let val_at = |t: usize, c: usize| if t < lp { prefix_v.at(t, c) } else { values.at(t - lp, c) };
    let mut out = Tensor::zeros(&[nq, d]);
    for h in 0..heads {
        for q in 0..nq {
            let mut scores = vec![0.0; s];
            for (t, score) in scores.iter_mut().enumerate() {
                let mut acc = 0.0;
                for c in h * dk..(h + 1) * dk {
                    acc += queries.at(q, c) * key_at(t, c);
                }
                *score = acc / (dk as f64).sqrt();
            }
            let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for sc in scores.iter_mut() {
                *sc = (*sc - mx).exp();
                z += *sc;
            }
            for c in h * dk..(h + 1) * dk {
                let mut acc = 0.0;
                for (t, sc) in scores.iter().enumerate() {
                    acc += sc / z * val_at(t, c);
                }
                out.set(q, c, acc);
            }
        }
    }
    out
}

/// All-point interpolated AP computed by explicitly listing the PR curve.
/// `hits[k]` says whether the k-th detection (already in score order) is a
/// true positive.
pub fn pr_curve_ap(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut points = Vec::new();
    let mut tp = 0usize;
    for (k, &hit) in hits.iter().enumerate() {
        if hit {
            tp += 1;
        }
        points.push((tp as f64 / num_gt as f64, tp as f64 / (k + 1) as f64));
    }
    // Area under the upper envelope: for each recall level reached, take
    // the best precision at any recall at least that large.
    let mut area = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..points.len() {
        let r = points[i].0;
        if r > prev_recall {
            let best = points[i..].iter().map(|p| p.1).fold(0.0, f64::max);
            area += (r - prev_recall) * best;
            prev_recall = r;
        }
    }
    area
}
