//! Prototypical pseudo-labels: a per-class feature memory, two-stage
//! validation of teacher candidates and the merged distillation targets.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use log::debug;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BBox};
use crate::detector::{argmax, Detection, GtObject};
use crate::error::{PdpError, Result};
use crate::losses::{detection_loss, match_cost, DetectionLoss, LossWeights};
use crate::matching::{hungarian, Assignment};
use crate::numcore::cosine_similarity;

pub const DEFAULT_CAPACITY: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMemory {
    pub prototype: Vec<f64>,
    pub features: Vec<Vec<f64>>,
    /// Features offered so far, including those the reservoir dropped.
    pub seen: u64,
    pub frozen: bool,
}

impl ClassMemory {
    fn recompute(&mut self) {
        let dim = self.prototype.len();
        let mut mean = vec![0.0; dim];
        for f in &self.features {
            mean.iter_mut().zip(f).for_each(|(m, x)| *m += x);
        }
        let n = self.features.len() as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        self.prototype = mean;
    }
}

/// Class id → prototype and its feature store.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeBank {
    pub dim: usize,
    pub capacity: usize,
    pub seed: u64,
    pub classes: BTreeMap<usize, ClassMemory>,
}

impl PrototypeBank {
    pub fn new(dim: usize, capacity: usize, seed: u64) -> Result<Self> {
        if capacity == 0 {
            return Err(PdpError::Config("prototype capacity must be positive".into()));
        }
        Ok(Self { dim, capacity, seed, classes: BTreeMap::new() })
    }

    pub fn prototype(&self, class: usize) -> Option<&[f64]> {
        self.classes.get(&class).map(|m| m.prototype.as_slice())
    }

    pub fn is_frozen(&self, class: usize) -> bool {
        self.classes.get(&class).is_some_and(|m| m.frozen)
    }

    /// Stores `feature` for `class` and refreshes the mean. Beyond capacity
    /// the store is a uniform reservoir over everything offered.
    pub fn add(&mut self, class: usize, feature: &[f64]) -> Result<()> {
        if feature.len() != self.dim {
            return Err(PdpError::Shape(format!("feature of length {} for a {}-dim bank", feature.len(), self.dim)));
        }
        let (capacity, seed) = (self.capacity, self.seed);
        let mem = self.classes.entry(class).or_insert_with(|| ClassMemory {
            prototype: vec![0.0; feature.len()],
            features: Vec::new(),
            seen: 0,
            frozen: false,
        });
        if mem.frozen {
            return Err(PdpError::FrozenPrototype(class));
        }
        mem.seen += 1;
        if mem.features.len() < capacity {
            mem.features.push(feature.to_vec());
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ ((class as u64) << 40) ^ mem.seen);
            let slot = rng.random_range(0..mem.seen) as usize;
            if slot < capacity {
                mem.features[slot] = feature.to_vec();
            }
        }
        mem.recompute();
        Ok(())
    }

    /// Adds the embeddings of correctly classified current-task instances:
    /// matched predictions whose argmax equals the matched class.
    pub fn update_from_matches(
        &mut self,
        targets: &[GtObject],
        preds: &[Detection],
        assignment: &Assignment,
        current: &BTreeSet<usize>,
    ) -> Result<usize> {
        let mut added = 0;
        for (gt, &j) in targets.iter().zip(&assignment.pairs) {
            if !current.contains(&gt.class) {
                return Err(PdpError::ForeignClass(gt.class));
            }
            if preds[j].argmax() == gt.class {
                self.add(gt.class, &preds[j].feature)?;
                added += 1;
            }
        }
        Ok(added)
    }

    pub fn freeze(&mut self, classes: impl IntoIterator<Item = usize>) {
        for c in classes {
            if let Some(m) = self.classes.get_mut(&c) {
                m.frozen = true;
            }
        }
    }
}

/// Confidence band edges and the prototype-similarity cut.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub tau_high: f64,
    pub tau_low: f64,
    pub theta_s: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { tau_high: 0.5, tau_low: 0.2, theta_s: 0.5 }
    }
}

impl Thresholds {
    pub fn check(&self) -> Result<()> {
        let unit = |x: f64| x > 0.0 && x < 1.0;
        if !unit(self.tau_high) || !unit(self.tau_low) || self.tau_low >= self.tau_high {
            return Err(PdpError::Config(format!(
                "need 0 < tau_low < tau_high < 1, got {} and {}",
                self.tau_low, self.tau_high
            )));
        }
        if !(-1.0..=1.0).contains(&self.theta_s) {
            return Err(PdpError::Config(format!("theta_s {} outside [-1, 1]", self.theta_s)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Source {
    Easy,
    Hard,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Rejection {
    LowConfidence,
    LowSimilarity,
    MissingPrototype,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel {
    pub class: usize,
    pub bbox: BBox,
    pub score: f64,
    pub source: Source,
}

impl PseudoLabel {
    pub fn to_gt(self) -> GtObject {
        GtObject { class: self.class, bbox: self.bbox }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub labels: Vec<PseudoLabel>,
}

impl PseudoLabelSet {
    pub fn count(&self, source: Source) -> usize {
        self.labels.iter().filter(|l| l.source == source).count()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// One label per line: `class cx cy w h score source`.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for l in &self.labels {
            let b = l.bbox;
            let src = match l.source {
                Source::Easy => "easy",
                Source::Hard => "hard",
            };
            writeln!(out, "{} {} {} {} {} {} {}", l.class, b.cx, b.cy, b.w, b.h, l.score, src).unwrap();
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut labels = Vec::new();
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let bad = |what: &str| PdpError::Config(format!("pseudo-label line {}: {what}", n + 1));
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 7 {
                return Err(bad("expected 7 fields"));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| bad("bad number"));
            let source = match f[6] {
                "easy" => Source::Easy,
                "hard" => Source::Hard,
                _ => return Err(bad("source must be easy or hard")),
            };
            labels.push(PseudoLabel {
                class: f[0].parse().map_err(|_| bad("bad class"))?,
                bbox: BBox::new(num(f[1])?, num(f[2])?, num(f[3])?, num(f[4])?),
                score: num(f[5])?,
                source,
            });
        }
        Ok(Self { labels })
    }
}

/// Outcome for every teacher candidate, index-aligned with the input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Verdict {
    Accepted(Source),
    Rejected(Rejection),
    /// Argmax is a current-task class; real labels cover it.
    Excluded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Validation {
    pub labels: PseudoLabelSet,
    pub verdicts: Vec<Verdict>,
}

impl Validation {
    pub fn rejected(&self) -> usize {
        self.verdicts.iter().filter(|v| matches!(v, Verdict::Rejected(_))).count()
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

/// Judges one candidate. Its class is the argmax over `old` classes and its
/// confidence the score of that class.
pub fn judge(cand: &Detection, bank: &PrototypeBank, old: &BTreeSet<usize>, th: &Thresholds) -> (usize, Verdict) {
    let fg = &cand.scores[..cand.background_class()];
    if !old.contains(&argmax(fg)) {
        return (argmax(fg), Verdict::Excluded);
    }
    let class = old.iter().copied().fold(*old.iter().next().unwrap(), |b, c| {
        if cand.scores[c] > cand.scores[b] {
            c
        } else {
            b
        }
    });
    let s = cand.scores[class];
    if s > th.tau_high {
        return (class, Verdict::Accepted(Source::Easy));
    }
    if s <= th.tau_low {
        return (class, Verdict::Rejected(Rejection::LowConfidence));
    }
    // Only s == tau_high remains outside both bands.
    if s >= th.tau_high {
        return (class, Verdict::Rejected(Rejection::LowConfidence));
    }
    let Some(proto) = bank.prototype(class) else {
        debug!("no prototype for class {class}; candidate rejected");
        return (class, Verdict::Rejected(Rejection::MissingPrototype));
    };
    match cosine_similarity(&cand.feature, proto) {
        Ok(sim) if sim >= th.theta_s => (class, Verdict::Accepted(Source::Hard)),
        Ok(_) => (class, Verdict::Rejected(Rejection::LowSimilarity)),
        Err(_) => {
            debug!("zero-norm feature or prototype for class {class}; candidate rejected");
            (class, Verdict::Rejected(Rejection::LowSimilarity))
        }
    }
}

/// Two-stage validation of teacher candidates against the old classes.
pub fn validate(
    candidates: &[Detection],
    bank: &PrototypeBank,
    old: &BTreeSet<usize>,
    th: &Thresholds,
) -> Validation {
    let mut labels = Vec::new();
    let mut verdicts = Vec::with_capacity(candidates.len());
    if old.is_empty() {
        verdicts.resize(candidates.len(), Verdict::Excluded);
        return Validation { labels: PseudoLabelSet::default(), verdicts };
    }
    for cand in candidates {
        let (class, v) = judge(cand, bank, old, th);
        if let Verdict::Accepted(source) = v {
            labels.push(PseudoLabel { class, bbox: cand.bbox, score: cand.scores[class], source });
        }
        verdicts.push(v);
    }
    Validation { labels: PseudoLabelSet { labels }, verdicts }
}

/// Pseudo-labels overlapping a kept box at or above this IoU are dropped.
pub const OVERLAP_IOU: f64 = 0.5;

/// Real current-task labels followed by pseudo-labels in descending score,
/// truncated to `max_targets`. A pseudo-label is dropped when it overlaps a
/// real box or a higher-scoring pseudo-label, so no object carries two
/// contradictory targets.
pub fn merge_targets(
    real: &[GtObject],
    pseudo: &PseudoLabelSet,
    current: &BTreeSet<usize>,
    max_targets: usize,
) -> Result<Vec<GtObject>> {
    if let Some(l) = pseudo.labels.iter().find(|l| current.contains(&l.class)) {
        return Err(PdpError::ClassOverlap(l.class));
    }
    if let Some(g) = real.iter().find(|g| !current.contains(&g.class)) {
        return Err(PdpError::ForeignClass(g.class));
    }
    let mut ranked: Vec<&PseudoLabel> = pseudo.labels.iter().collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut merged = real.to_vec();
    for l in ranked {
        if merged.iter().all(|g| iou(g.bbox, l.bbox) < OVERLAP_IOU) {
            merged.push(l.to_gt());
        }
    }
    merged.truncate(max_targets);
    Ok(merged)
}

/// Set-prediction loss of the student against real and pseudo targets.
pub fn distill_loss(
    student: &[Detection],
    pseudo: &PseudoLabelSet,
    real: &[GtObject],
    current: &BTreeSet<usize>,
    weights: &LossWeights,
) -> Result<(DetectionLoss, Assignment)> {
    let targets = merge_targets(real, pseudo, current, student.len())?;
    let assignment = hungarian(&match_cost(&targets, student, weights)?)?;
    Ok((detection_loss(&targets, student, &assignment, weights)?, assignment))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::detection_from_logits;
    use crate::oracle::brute_force_assignment;
    use proptest::prelude::*;
    use rand::Rng;

    fn cand(scores: Vec<f64>, feature: Vec<f64>) -> Detection {
        Detection { scores, bbox: BBox::new(0.5, 0.5, 0.2, 0.2), feature }
    }

    // Classes 0,1 old, 2 current, 3 = background.
    fn scores(s0: f64, s1: f64, s2: f64) -> Vec<f64> {
        vec![s0, s1, s2, 1.0 - s0 - s1 - s2]
    }

    fn bank_with(class: usize, proto: &[f64]) -> PrototypeBank {
        let mut b = PrototypeBank::new(proto.len(), DEFAULT_CAPACITY, 0).unwrap();
        b.add(class, proto).unwrap();
        b.freeze([class]);
        b
    }

    fn old() -> BTreeSet<usize> {
        [0, 1].into()
    }

    #[test]
    fn mean_of_single_and_pair() {
        let mut b = PrototypeBank::new(2, DEFAULT_CAPACITY, 0).unwrap();
        b.add(0, &[3.0, -1.0]).unwrap();
        assert_eq!(b.prototype(0).unwrap(), &[3.0, -1.0]);
        b.add(1, &[1.0, 0.0]).unwrap();
        b.add(1, &[0.0, 1.0]).unwrap();
        assert_eq!(b.prototype(1).unwrap(), &[0.5, 0.5]);
    }

    #[test]
    fn mean_matches_accumulation_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let feats: Vec<Vec<f64>> =
            (0..50).map(|_| (0..6).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let mut b = PrototypeBank::new(6, DEFAULT_CAPACITY, 0).unwrap();
        for f in &feats {
            b.add(4, f).unwrap();
        }
        for k in 0..6 {
            let mut acc = 0.0;
            for f in &feats {
                acc += f[k];
            }
            assert!((b.prototype(4).unwrap()[k] - acc / 50.0).abs() < 1e-12);
        }
    }

    #[test]
    fn reservoir_caps_store_and_keeps_mean_consistent() {
        let mut b = PrototypeBank::new(1, 8, 3).unwrap();
        for i in 0..100 {
            b.add(0, &[i as f64]).unwrap();
        }
        let m = &b.classes[&0];
        assert_eq!((m.features.len(), m.seen), (8, 100));
        let mean = m.features.iter().map(|f| f[0]).sum::<f64>() / 8.0;
        assert_eq!(m.prototype[0], mean);
    }

    #[test]
    fn frozen_class_refuses_updates() {
        let mut b = bank_with(0, &[1.0, 0.0]);
        assert_eq!(b.add(0, &[0.0, 1.0]), Err(PdpError::FrozenPrototype(0)));
        assert_eq!(b.prototype(0).unwrap(), &[1.0, 0.0]);
        b.add(1, &[0.0, 1.0]).unwrap();
    }

    #[test]
    fn update_uses_only_correct_matches() {
        let mut b = PrototypeBank::new(2, DEFAULT_CAPACITY, 0).unwrap();
        let preds = vec![cand(scores(0.1, 0.1, 0.7), vec![1.0, 0.0]), cand(scores(0.7, 0.1, 0.1), vec![0.0, 1.0])];
        let gt = vec![
            GtObject { class: 2, bbox: BBox::new(0.5, 0.5, 0.1, 0.1) },
            GtObject { class: 2, bbox: BBox::new(0.2, 0.2, 0.1, 0.1) },
        ];
        let a = Assignment { pairs: vec![0, 1], cost: 0.0 };
        assert_eq!(b.update_from_matches(&gt, &preds, &a, &[2].into()).unwrap(), 1);
        assert_eq!(b.prototype(2).unwrap(), &[1.0, 0.0]);
        assert_eq!(b.update_from_matches(&gt, &preds, &a, &[0].into()), Err(PdpError::ForeignClass(2)));
    }

    #[test]
    fn verdict_examples() {
        let th = Thresholds::default();
        // Prototype at [1, 0]; features chosen for cosine 0.7 and 0.4.
        let bank = bank_with(0, &[1.0, 0.0]);
        let f07 = vec![0.7, (1.0f64 - 0.49).sqrt()];
        let f04 = vec![0.4, (1.0f64 - 0.16).sqrt()];
        let v = |s: f64, f: &Vec<f64>| judge(&cand(scores(s, 0.0, 0.0), f.clone()), &bank, &old(), &th).1;
        assert_eq!(v(0.6, &f04), Verdict::Accepted(Source::Easy));
        assert_eq!(v(0.3, &f07), Verdict::Accepted(Source::Hard));
        assert_eq!(v(0.3, &f04), Verdict::Rejected(Rejection::LowSimilarity));
        assert_eq!(v(0.1, &f07), Verdict::Rejected(Rejection::LowConfidence));
        assert_eq!(v(0.2, &f07), Verdict::Rejected(Rejection::LowConfidence));
        assert_eq!(v(0.5, &f07), Verdict::Rejected(Rejection::LowConfidence));
    }

    #[test]
    fn current_class_argmax_is_excluded_and_missing_prototype_rejected() {
        let th = Thresholds::default();
        let bank = bank_with(0, &[1.0, 0.0]);
        let c = cand(scores(0.1, 0.05, 0.6), vec![1.0, 0.0]);
        assert_eq!(judge(&c, &bank, &old(), &th).1, Verdict::Excluded);
        let c = cand(scores(0.0, 0.3, 0.0), vec![1.0, 0.0]);
        assert_eq!(judge(&c, &bank, &old(), &th), (1, Verdict::Rejected(Rejection::MissingPrototype)));
    }

    #[test]
    fn accept_all_similarity_reduces_to_confidence_filter() {
        let th = Thresholds { theta_s: -1.0, ..Default::default() };
        let mut bank = bank_with(0, &[1.0, 0.0]);
        bank.add(1, &[0.0, 1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..500 {
            let s = rng.random_range(0.0..0.9);
            let f = vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let accepted = matches!(judge(&cand(scores(s, 0.0, 0.0), f), &bank, &old(), &th).1, Verdict::Accepted(_));
            assert_eq!(accepted, s > th.tau_low && s != th.tau_high);
        }
    }

    #[test]
    fn dump_round_trips() {
        let set = PseudoLabelSet {
            labels: vec![
                PseudoLabel { class: 1, bbox: BBox::new(0.1, 0.2, 0.3, 0.4), score: 0.9, source: Source::Easy },
                PseudoLabel { class: 0, bbox: BBox::new(0.5, 0.5, 1.0 / 3.0, 0.25), score: 0.3, source: Source::Hard },
            ],
        };
        assert_eq!(PseudoLabelSet::parse(&set.dump()).unwrap(), set);
        assert!(PseudoLabelSet::parse("1 2 3").is_err());
    }

    #[test]
    fn merge_rejects_overlap_and_orders_by_score() {
        let real = vec![GtObject { class: 2, bbox: BBox::new(0.5, 0.5, 0.2, 0.2) }];
        let lab = |class, score| PseudoLabel { class, bbox: BBox::new(0.2, 0.2, 0.1, 0.1), score, source: Source::Easy };
        let pseudo = PseudoLabelSet { labels: vec![lab(0, 0.6), lab(1, 0.9)] };
        let merged = merge_targets(&real, &pseudo, &[2].into(), 2).unwrap();
        assert_eq!(merged.iter().map(|g| g.class).collect::<Vec<_>>(), vec![2, 1]);
        let bad = PseudoLabelSet { labels: vec![lab(2, 0.9)] };
        assert_eq!(merge_targets(&real, &bad, &[2].into(), 5), Err(PdpError::ClassOverlap(2)));
    }

    #[test]
    fn merge_drops_pseudo_labels_on_real_or_better_boxes() {
        let real = vec![GtObject { class: 2, bbox: BBox::new(0.5, 0.5, 0.2, 0.2) }];
        let lab = |class, cx, score| PseudoLabel { class, bbox: BBox::new(cx, 0.5, 0.2, 0.2), score, source: Source::Hard };
        let pseudo = PseudoLabelSet { labels: vec![lab(0, 0.51, 0.9), lab(1, 0.2, 0.4), lab(0, 0.21, 0.45)] };
        let merged = merge_targets(&real, &pseudo, &[2].into(), 10).unwrap();
        assert_eq!(merged.iter().map(|g| (g.class, g.bbox.cx)).collect::<Vec<_>>(), vec![(2, 0.5), (0, 0.21)]);
    }

    fn random_preds(rng: &mut ChaCha8Rng, n: usize) -> Vec<Detection> {
        (0..n)
            .map(|_| {
                let logits: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
                let b = BBox::new(
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.1..0.3),
                    rng.random_range(0.1..0.3),
                );
                detection_from_logits(&logits, b, vec![0.0; 2])
            })
            .collect()
    }

    #[test]
    fn empty_pseudo_set_is_plain_current_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let preds = random_preds(&mut rng, 5);
        let real = vec![GtObject { class: 2, bbox: BBox::new(0.4, 0.4, 0.2, 0.2) }];
        let w = LossWeights::default();
        let (loss, _) = distill_loss(&preds, &PseudoLabelSet::default(), &real, &[2].into(), &w).unwrap();
        let a = hungarian(&match_cost(&real, &preds, &w).unwrap()).unwrap();
        assert_eq!(loss.value, detection_loss(&real, &preds, &a, &w).unwrap().value);
    }

    #[test]
    fn merged_targets_match_brute_force_union() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = LossWeights::default();
        for _ in 0..50 {
            let preds = random_preds(&mut rng, 6);
            let real: Vec<GtObject> = (0..2)
                .map(|_| GtObject { class: 2, bbox: BBox::new(rng.random_range(0.2..0.8), 0.5, 0.2, 0.2) })
                .collect();
            let pseudo = PseudoLabelSet {
                labels: (0..2)
                    .map(|k| PseudoLabel {
                        class: k,
                        bbox: BBox::new(0.5, 0.25 + 0.5 * k as f64 + rng.random_range(-0.05..0.05), 0.1, 0.3),
                        score: 0.9 - 0.1 * k as f64,
                        source: Source::Easy,
                    })
                    .collect(),
            };
            let (loss, _) = distill_loss(&preds, &pseudo, &real, &[2].into(), &w).unwrap();
            let union: Vec<GtObject> = real.iter().copied().chain(pseudo.labels.iter().map(|l| l.to_gt())).collect();
            let (pairs, _) = brute_force_assignment(&match_cost(&union, &preds, &w).unwrap());
            let oracle = detection_loss(&union, &preds, &Assignment { pairs, cost: 0.0 }, &w).unwrap();
            assert!((loss.value - oracle.value).abs() < 1e-12);
        }
    }

    fn arb_candidate() -> impl Strategy<Value = Detection> {
        (prop::collection::vec(0.0f64..1.0, 4), prop::collection::vec(-1.0f64..1.0, 3)).prop_map(|(raw, feat)| {
            let total: f64 = raw.iter().sum::<f64>() + 1e-9;
            cand(raw.iter().map(|r| r / total).collect(), feat)
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn partition_is_exhaustive_and_disjoint(cands in prop::collection::vec(arb_candidate(), 1..40)) {
            let mut bank = bank_with(0, &[1.0, 0.5, -0.2]);
            bank.add(1, &[-0.3, 1.0, 0.4]).unwrap();
            let th = Thresholds::default();
            let out = validate(&cands, &bank, &old(), &th);
            prop_assert_eq!(out.verdicts.len(), cands.len());
            let easy = out.verdicts.iter().filter(|v| **v == Verdict::Accepted(Source::Easy)).count();
            let hard = out.verdicts.iter().filter(|v| **v == Verdict::Accepted(Source::Hard)).count();
            let excluded = out.verdicts.iter().filter(|v| **v == Verdict::Excluded).count();
            prop_assert_eq!(easy + hard + out.rejected() + excluded, cands.len());
            prop_assert_eq!(out.labels.count(Source::Easy), easy);
            prop_assert_eq!(out.labels.count(Source::Hard), hard);
            for l in &out.labels.labels {
                prop_assert!(l.score > th.tau_low);
                match l.source {
                    Source::Easy => prop_assert!(l.score > th.tau_high),
                    Source::Hard => prop_assert!(l.score < th.tau_high),
                }
            }
        }

        #[test]
        fn thresholds_are_monotone(
            cands in prop::collection::vec(arb_candidate(), 1..40),
            lo in 0.05f64..0.4, hi in 0.45f64..0.95, dh in 0.0f64..0.04,
            s1 in -1.0f64..1.0, s2 in -1.0f64..1.0,
        ) {
            let mut bank = bank_with(0, &[1.0, 0.5, -0.2]);
            bank.add(1, &[-0.3, 1.0, 0.4]).unwrap();
            let (s_lo, s_hi) = (s1.min(s2), s1.max(s2));
            let accepted = |th: Thresholds| {
                validate(&cands, &bank, &old(), &th).verdicts.iter().map(|v| matches!(v, Verdict::Accepted(_))).collect::<Vec<_>>()
            };
            let strict = accepted(Thresholds { tau_high: hi, tau_low: lo, theta_s: s_hi });
            let loose = accepted(Thresholds { tau_high: hi, tau_low: lo, theta_s: s_lo });
            for (a, b) in strict.iter().zip(&loose) {
                prop_assert!(!a || *b);
            }
            let easy = |th: Thresholds| validate(&cands, &bank, &old(), &th).labels.count(Source::Easy);
            let base = Thresholds { tau_high: hi, tau_low: lo, theta_s: s_lo };
            let raised = Thresholds { tau_high: hi + dh, ..base };
            prop_assert!(easy(raised) <= easy(base));
        }
    }
}
