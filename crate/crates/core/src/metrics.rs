//! Average precision at a fixed IoU and the previous/current/all class
//! summaries reported after each task.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BBox};
use crate::error::{PdpError, Result};

pub const IOU_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub image: usize,
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub image: usize,
    pub bbox: BBox,
}

/// True-positive flags in descending score order. Each detection takes the
/// unmatched ground truth of its image with the highest IoU, if that IoU
/// reaches `iou_thresh`. Equal scores keep input order.
pub fn match_detections(dets: &[ScoredBox], gt: &[GtBox], iou_thresh: f64) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    let mut used = vec![false; gt.len()];
    order
        .into_iter()
        .map(|d| {
            let det = &dets[d];
            let mut best: Option<(usize, f64)> = None;
            for (g, t) in gt.iter().enumerate() {
                if used[g] || t.image != det.image {
                    continue;
                }
                let o = iou(det.bbox, t.bbox);
                if o >= iou_thresh && best.is_none_or(|(_, b)| o > b) {
                    best = Some((g, o));
                }
            }
            match best {
                Some((g, _)) => {
                    used[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

/// All-point interpolated area under the precision-recall curve. With no
/// ground truth the AP is 0 by convention, detections or not.
pub fn average_precision(dets: &[ScoredBox], gt: &[GtBox], iou_thresh: f64) -> f64 {
    if gt.is_empty() {
        return 0.0;
    }
    let hits = match_detections(dets, gt, iou_thresh);
    let n = gt.len() as f64;
    let mut recall = vec![0.0];
    let mut precision = vec![0.0];
    let mut tp = 0.0;
    for (k, hit) in hits.iter().enumerate() {
        if *hit {
            tp += 1.0;
        }
        recall.push(tp / n);
        precision.push(tp / (k + 1) as f64);
    }
    recall.push(1.0);
    precision.push(0.0);
    for i in (0..precision.len() - 1).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    (1..recall.len()).map(|i| (recall[i] - recall[i - 1]) * precision[i]).sum()
}

/// Raw `(recall, precision)` after each detection in descending score
/// order, for plotting.
pub fn pr_points(dets: &[ScoredBox], gt: &[GtBox], iou_thresh: f64) -> Vec<(f64, f64)> {
    let n = gt.len().max(1) as f64;
    let mut tp = 0.0;
    match_detections(dets, gt, iou_thresh)
        .into_iter()
        .enumerate()
        .map(|(k, hit)| {
            if hit {
                tp += 1.0;
            }
            (tp / n, tp / (k + 1) as f64)
        })
        .collect()
}

/// Means over previous, current and all seen classes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapSummary {
    /// Absent for the first task.
    pub previous: Option<f64>,
    pub current: f64,
    pub all: f64,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// `task_classes[k]` lists the classes of task `k`; `t` is zero-based.
pub fn compute_map_metrics(
    per_class_ap: &BTreeMap<usize, f64>,
    task_classes: &[Vec<usize>],
    t: usize,
) -> Result<MapSummary> {
    if t >= task_classes.len() {
        return Err(PdpError::Shape(format!("task {t} of {}", task_classes.len())));
    }
    let lookup = |c: &usize| {
        per_class_ap.get(c).copied().ok_or_else(|| PdpError::Shape(format!("no AP for class {c}")))
    };
    let prev: Vec<f64> = task_classes[..t].iter().flatten().map(lookup).collect::<Result<_>>()?;
    let cur: Vec<f64> = task_classes[t].iter().map(lookup).collect::<Result<_>>()?;
    let all: Vec<f64> = prev.iter().chain(&cur).copied().collect();
    Ok(MapSummary {
        previous: (!prev.is_empty()).then(|| mean(&prev)),
        current: mean(&cur),
        all: mean(&all),
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoCounts {
    pub easy: usize,
    pub hard: usize,
    pub rejected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    /// One-based, as printed.
    pub task: usize,
    pub map: MapSummary,
    pub num_previous: usize,
    pub num_current: usize,
    pub per_class_ap: BTreeMap<usize, f64>,
    pub pseudo: PseudoCounts,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub tasks: Vec<TaskMetrics>,
}

impl MetricsReport {
    /// `task,metric,value`; `map_p` is omitted where undefined.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,metric,value\n");
        for t in &self.tasks {
            let mut row = |m: &str, v: String| writeln!(out, "{},{m},{v}", t.task).unwrap();
            if let Some(p) = t.map.previous {
                row("map_p", p.to_string());
            }
            row("map_c", t.map.current.to_string());
            row("map_a", t.map.all.to_string());
            row("pseudo_easy", t.pseudo.easy.to_string());
            row("pseudo_hard", t.pseudo.hard.to_string());
            row("pseudo_rejected", t.pseudo.rejected.to_string());
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn last(&self) -> Option<&TaskMetrics> {
        self.tasks.last()
    }
}
