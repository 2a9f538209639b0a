//! Matching cost, set-prediction detection loss, the ranker regularizer and
//! the combined objective.

use serde::{Deserialize, Serialize};

use crate::boxes::{giou_with_grad, BBox};
use crate::detector::{argmax, Detection, GtObject};
use crate::error::{PdpError, Result};
use crate::matching::Assignment;
use crate::numcore::{cosine_similarity, Tensor};

/// Weights shared by the matching cost and the detection loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub class: f64,
    pub l1: f64,
    pub giou: f64,
    /// Cross-entropy weight for predictions supervised toward "no object".
    pub no_object: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { class: 1.0, l1: 5.0, giou: 2.0, no_object: 0.1 }
    }
}

/// `cost(i, j) = −ŝⱼ[cᵢ] + λ_L1‖bᵢ − b̂ⱼ‖₁ + λ_giou(1 − GIoU(bᵢ, b̂ⱼ))`.
pub fn match_cost(gt: &[GtObject], preds: &[Detection], w: &LossWeights) -> Result<Tensor> {
    if preds.is_empty() {
        return Err(PdpError::Shape("no predictions to match".into()));
    }
    let classes = preds[0].scores.len();
    if let Some(bad) = gt.iter().find(|g| g.class + 1 >= classes) {
        return Err(PdpError::Shape(format!("class {} outside a {classes}-way head", bad.class)));
    }
    Ok(Tensor::from_fn(gt.len(), preds.len(), |i, j| {
        let (g, p) = (&gt[i], &preds[j]);
        -w.class * p.scores[g.class]
            + w.l1 * g.bbox.l1(p.bbox)
            + w.giou * (1.0 - giou_with_grad(p.bbox, g.bbox).0)
    }))
}

/// Detection loss value and its gradients w.r.t. class logits and boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionLoss {
    pub value: f64,
    /// `N × (C+1)`, gradient w.r.t. pre-softmax logits.
    pub d_logits: Tensor,
    /// `N × 4`, gradient w.r.t. the `(cx, cy, w, h)` outputs.
    pub d_boxes: Tensor,
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Matched predictions pay CE on their target class plus L1 and GIoU box
/// terms; every unmatched prediction pays down-weighted CE toward "no object".
pub fn detection_loss(
    gt: &[GtObject],
    preds: &[Detection],
    assignment: &Assignment,
    w: &LossWeights,
) -> Result<DetectionLoss> {
    if assignment.pairs.len() != gt.len() {
        return Err(PdpError::Shape(format!(
            "assignment covers {} of {} targets",
            assignment.pairs.len(),
            gt.len()
        )));
    }
    let n = preds.len();
    let classes = preds.first().map_or(0, |p| p.scores.len());
    let mut d_logits = Tensor::zeros(&[n, classes]);
    let mut d_boxes = Tensor::zeros(&[n, 4]);
    let mut value = 0.0;
    let owner = assignment.matched_targets(n);

    for (j, pred) in preds.iter().enumerate() {
        let (target_class, ce_weight) = match owner[j] {
            Some(i) => (gt[i].class, w.class),
            None => (classes - 1, w.no_object),
        };
        value += -ce_weight * pred.scores[target_class].ln();
        let row = d_logits.row_mut(j);
        for (k, g) in row.iter_mut().enumerate() {
            let onehot = if k == target_class { 1.0 } else { 0.0 };
            *g = ce_weight * (pred.scores[k] - onehot);
        }

        if let Some(i) = owner[j] {
            let target = gt[i].bbox;
            let (g, g_grad) = giou_with_grad(pred.bbox, target);
            value += w.l1 * pred.bbox.l1(target) + w.giou * (1.0 - g);
            let p = pred.bbox.to_array();
            let t = target.to_array();
            let row = d_boxes.row_mut(j);
            for k in 0..4 {
                row[k] = w.l1 * sign(p[k] - t[k]) - w.giou * g_grad[k];
            }
        }
    }
    Ok(DetectionLoss { value, d_logits, d_boxes })
}

/// `λ_Q · CE(α, α̂) = −λ_Q Σ α̂ₜ ln αₜ`; gradient returned w.r.t. the ranker
/// logits whose softmax is `α`.
pub fn ranker_loss(alpha: &[f64], target: &[f64], lambda_q: f64) -> Result<(f64, Vec<f64>)> {
    if alpha.len() != target.len() {
        return Err(PdpError::Shape(format!("α has {} entries, target {}", alpha.len(), target.len())));
    }
    check_distribution(target, "ranker target")?;
    check_distribution(alpha, "relevance weights")?;
    let value: f64 = -lambda_q
        * target.iter().zip(alpha).filter(|(t, _)| **t > 0.0).map(|(t, a)| t * a.ln()).sum::<f64>();
    let grad = alpha.iter().zip(target).map(|(a, t)| lambda_q * (a - t)).collect();
    Ok((value, grad))
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|v| !v.is_finite() || *v < 0.0) || (sum - 1.0).abs() > 1e-9 {
        return Err(PdpError::NotADistribution(format!("{what} sums to {sum}")));
    }
    Ok(())
}

/// One-hot target for the ranker: the patch whose feature is most
/// cosine-similar to the mean embedding of the matched predictions. Lowest
/// patch index wins ties. `None` when nothing is matched.
pub fn ranker_target(features: &Tensor, preds: &[Detection], assignment: &Assignment) -> Option<Vec<f64>> {
    if assignment.pairs.is_empty() {
        return None;
    }
    let d = features.cols();
    let mut mean = vec![0.0; d];
    for &j in &assignment.pairs {
        mean.iter_mut().zip(&preds[j].feature).for_each(|(m, f)| *m += f);
    }
    let k = assignment.pairs.len() as f64;
    mean.iter_mut().for_each(|m| *m /= k);
    let sims: Vec<f64> = (0..features.rows())
        .map(|t| cosine_similarity(features.row(t), &mean).unwrap_or(f64::NEG_INFINITY))
        .collect();
    if sims.iter().all(|s| *s == f64::NEG_INFINITY) {
        return None;
    }
    let best = argmax(&sims);
    let mut target = vec![0.0; features.rows()];
    target[best] = 1.0;
    Some(target)
}

/// Components of the combined objective.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub detection: f64,
    pub ranker: f64,
    pub ddl: f64,
}

impl LossBreakdown {
    pub fn total(&self) -> f64 {
        total_loss(self.detection, self.ranker, self.ddl)
    }
}

/// `L_DETR + L_Q + L_DDL`.
pub fn total_loss(detection: f64, ranker: f64, ddl: f64) -> f64 {
    detection + ranker + ddl
}

/// Makes a [`Detection`] from raw logits and a box, for tests and tools that
/// need to drive the losses without the decoder.
pub fn detection_from_logits(logits: &[f64], bbox: BBox, feature: Vec<f64>) -> Detection {
    Detection { scores: crate::numcore::softmax(logits), bbox, feature }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matching::hungarian;
    use crate::numcore::{finite_diff_grad, max_relative_error, softmax};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const C: usize = 4;

    fn random_instance(rng: &mut ChaCha8Rng, m: usize, n: usize) -> (Vec<GtObject>, Vec<f64>) {
        let gt = (0..m)
            .map(|_| GtObject {
                class: rng.random_range(0..C),
                bbox: BBox::new(
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.1..0.4),
                    rng.random_range(0.1..0.4),
                ),
            })
            .collect();
        // Per prediction: C+1 logits then 4 box coordinates.
        let mut params = Vec::new();
        for _ in 0..n {
            for _ in 0..=C {
                params.push(rng.random_range(-2.0..2.0));
            }
            params.extend([
                rng.random_range(0.2..0.8),
                rng.random_range(0.2..0.8),
                rng.random_range(0.1..0.4),
                rng.random_range(0.1..0.4),
            ]);
        }
        (gt, params)
    }

    fn unpack(params: &[f64], n: usize) -> Vec<Detection> {
        let stride = C + 5;
        (0..n)
            .map(|j| {
                let p = &params[j * stride..(j + 1) * stride];
                detection_from_logits(&p[..=C], BBox::new(p[C + 1], p[C + 2], p[C + 3], p[C + 4]), vec![])
            })
            .collect()
    }

    #[test]
    fn perfect_match_costs_minus_one() {
        let b = BBox::new(0.5, 0.5, 0.2, 0.2);
        let mut scores = vec![0.0; C + 1];
        scores[2] = 1.0;
        let pred = Detection { scores, bbox: b, feature: vec![] };
        let w = LossWeights { class: 1.0, l1: 1.0, giou: 1.0, no_object: 0.1 };
        let c = match_cost(&[GtObject { class: 2, bbox: b }], &[pred], &w).unwrap();
        assert_eq!(c.at(0, 0), -1.0);
    }

    #[test]
    fn disjoint_boxes_cost_more_than_one_in_giou() {
        let gt = GtObject { class: 0, bbox: BBox::new(0.1, 0.1, 0.1, 0.1) };
        let pred = Detection { scores: vec![0.0; C + 1], bbox: BBox::new(0.9, 0.9, 0.1, 0.1), feature: vec![] };
        let w = LossWeights { class: 0.0, l1: 0.0, giou: 1.0, no_object: 0.1 };
        assert!(match_cost(&[gt], &[pred], &w).unwrap().at(0, 0) > 1.0);
    }

    #[test]
    fn match_cost_matches_scalar_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (gt, params) = random_instance(&mut rng, 3, 6);
        let preds = unpack(&params, 6);
        let w = LossWeights::default();
        let c = match_cost(&gt, &preds, &w).unwrap();
        for i in 0..3 {
            for j in 0..6 {
                let (g, p) = (gt[i].bbox, preds[j].bbox);
                let l1 = (g.cx - p.cx).abs() + (g.cy - p.cy).abs() + (g.w - p.w).abs() + (g.h - p.h).abs();
                // GIoU from corner arithmetic.
                let (ax1, ax2, ay1, ay2) = (p.cx - p.w / 2.0, p.cx + p.w / 2.0, p.cy - p.h / 2.0, p.cy + p.h / 2.0);
                let (bx1, bx2, by1, by2) = (g.cx - g.w / 2.0, g.cx + g.w / 2.0, g.cy - g.h / 2.0, g.cy + g.h / 2.0);
                let inter = (ax2.min(bx2) - ax1.max(bx1)).max(0.0) * (ay2.min(by2) - ay1.max(by1)).max(0.0);
                let union = p.w * p.h + g.w * g.h - inter;
                let hull = (ax2.max(bx2) - ax1.min(bx1)) * (ay2.max(by2) - ay1.min(by1));
                let giou = inter / union - (hull - union) / hull;
                let expected = -preds[j].scores[gt[i].class] + 5.0 * l1 + 2.0 * (1.0 - giou);
                assert!((c.at(i, j) - expected).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn zero_targets_push_everything_to_background() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (_, params) = random_instance(&mut rng, 0, 5);
        let preds = unpack(&params, 5);
        let w = LossWeights::default();
        let loss = detection_loss(&[], &preds, &Assignment::empty(), &w).unwrap();
        let expected: f64 = preds.iter().map(|p| -0.1 * p.scores[C].ln()).sum();
        assert!((loss.value - expected).abs() < 1e-12);
        assert!(loss.d_boxes.data().iter().all(|g| *g == 0.0));
    }

    #[test]
    fn confident_perfect_predictions_leave_only_background_floor() {
        let b = BBox::new(0.4, 0.6, 0.2, 0.3);
        let gt = [GtObject { class: 1, bbox: b }];
        let mut logits = vec![0.0; C + 1];
        logits[1] = 40.0;
        let matched = detection_from_logits(&logits, b, vec![]);
        let unmatched = detection_from_logits(&[0.0, 0.0, 0.0, 0.0, 1.0], b, vec![]);
        let preds = [matched, unmatched.clone()];
        let a = Assignment { pairs: vec![0], cost: 0.0 };
        let loss = detection_loss(&gt, &preds, &a, &LossWeights::default()).unwrap();
        let floor = -0.1 * unmatched.scores[C].ln();
        assert!((loss.value - floor).abs() < 1e-12);
    }

    #[test]
    fn detection_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = LossWeights::default();
        for _ in 0..20 {
            let (gt, params) = random_instance(&mut rng, 3, 5);
            let preds = unpack(&params, 5);
            let a = hungarian(&match_cost(&gt, &preds, &w).unwrap()).unwrap();
            let loss = detection_loss(&gt, &preds, &a, &w).unwrap();
            // Analytic gradient in the same packed layout.
            let mut analytic = Vec::new();
            for j in 0..5 {
                analytic.extend_from_slice(loss.d_logits.row(j));
                analytic.extend_from_slice(loss.d_boxes.row(j));
            }
            let fd = finite_diff_grad(|x| detection_loss(&gt, &unpack(x, 5), &a, &w).unwrap().value, &params, 1e-5)
                .unwrap();
            assert!(max_relative_error(&analytic, &fd) < 1e-4);
        }
    }

    #[test]
    fn detection_loss_ignores_target_order() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let w = LossWeights::default();
        for _ in 0..50 {
            let (gt, params) = random_instance(&mut rng, 4, 7);
            let preds = unpack(&params, 7);
            let a = hungarian(&match_cost(&gt, &preds, &w).unwrap()).unwrap();
            let base = detection_loss(&gt, &preds, &a, &w).unwrap().value;
            let mut rev = gt.clone();
            rev.reverse();
            let b = hungarian(&match_cost(&rev, &preds, &w).unwrap()).unwrap();
            let other = detection_loss(&rev, &preds, &b, &w).unwrap().value;
            assert!((base - other).abs() < 1e-9);
        }
    }

    #[test]
    fn ranker_loss_closed_forms() {
        let uniform = vec![1.0 / 16.0; 16];
        let mut onehot = vec![0.0; 16];
        onehot[3] = 1.0;
        let (v, _) = ranker_loss(&uniform, &onehot, 0.1).unwrap();
        assert!((v - 0.1 * 16f64.ln()).abs() < 1e-12);
        assert!((v - 0.277_258_872_223_978_1).abs() < 1e-12);

        let mut alpha = vec![1e-9 / 15.0; 16];
        alpha[3] = 1.0 - 1e-9;
        let (v, _) = ranker_loss(&alpha, &onehot, 0.1).unwrap();
        assert!(v.abs() < 1e-9);
    }

    #[test]
    fn ranker_loss_rejects_non_distribution() {
        let a = vec![0.5, 0.5];
        assert!(ranker_loss(&a, &[0.7, 0.7], 0.1).is_err());
        assert!(ranker_loss(&a, &[1.5, -0.5], 0.1).is_err());
        assert!(ranker_loss(&a, &[1.0], 0.1).is_err());
    }

    #[test]
    fn ranker_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let z: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mut target = vec![0.0; 16];
            target[rng.random_range(0..16)] = 1.0;
            let (_, g) = ranker_loss(&softmax(&z), &target, 0.1).unwrap();
            let fd = finite_diff_grad(|x| ranker_loss(&softmax(x), &target, 0.1).unwrap().0, &z, 1e-5).unwrap();
            assert!(max_relative_error(&g, &fd) < 1e-4);
        }
    }

    #[test]
    fn ranker_target_picks_most_similar_patch() {
        let features = Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
        let preds = vec![
            Detection { scores: vec![1.0], bbox: BBox::new(0.5, 0.5, 0.1, 0.1), feature: vec![0.0, 2.0] },
            Detection { scores: vec![1.0], bbox: BBox::new(0.5, 0.5, 0.1, 0.1), feature: vec![0.2, 0.0] },
        ];
        let a = Assignment { pairs: vec![0], cost: 0.0 };
        assert_eq!(ranker_target(&features, &preds, &a), Some(vec![0.0, 1.0, 0.0]));
        let a = Assignment { pairs: vec![0, 1], cost: 0.0 };
        // Mean [0.1, 1.0] is closest in angle to patch 1.
        assert_eq!(ranker_target(&features, &preds, &a), Some(vec![0.0, 1.0, 0.0]));
        assert_eq!(ranker_target(&features, &preds, &Assignment::empty()), None);
    }

    #[test]
    fn total_is_a_plain_sum() {
        assert_eq!(total_loss(1.0, 0.2, 0.05), 1.25);
        let b = LossBreakdown { detection: 1.0, ranker: 0.2, ddl: 0.05 };
        assert_eq!(b.total(), 1.25);
    }
}
