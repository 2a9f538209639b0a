//! Seeded oracle suites shared by the `selfcheck` command and the test
//! suite: gradient checks against central differences, the Hungarian
//! solver against exhaustive search, and the pseudo-label partition.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::boxes::BBox;
use crate::detector::{Detection, GtObject, ToyImage};
use crate::losses::{detection_from_logits, detection_loss, match_cost, ranker_loss, ranker_target, LossWeights};
use crate::matching::hungarian;
use crate::model::{Model, ModelShape, ObjectiveConfig};
use crate::numcore::{angle_between, cosine_similarity, finite_diff_grad, max_relative_error, softmax, Tensor};
use crate::oracle::brute_force_assignment;
use crate::pools::{ddl_loss, PrivatePool, SharedPool};
use crate::ppg::{validate, PrototypeBank, Rejection, Source, Thresholds, Verdict};

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;

/// Applied to every analytic gradient before it is compared. Real runs pass
/// [`no_tamper`]; negative controls pass a deliberate corruption.
pub type Tamper<'a> = &'a dyn Fn(&mut [f64]);

pub fn no_tamper(_: &mut [f64]) {}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub cases: usize,
    pub failures: usize,
    /// Largest error seen; relative for gradients, absolute cost gap for
    /// assignments, zero for exact suites.
    pub worst: f64,
}

impl SuiteResult {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

impl std::fmt::Display for SuiteResult {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let status = if self.passed() { "PASS" } else { "FAIL" };
        write!(f, "{status} {:<22} {:>5} cases, {} failed, worst {:.3e}", self.name, self.cases, self.failures, self.worst)
    }
}

fn grad_suite(name: &'static str, points: usize, mut one: impl FnMut(usize) -> f64) -> SuiteResult {
    let mut worst: f64 = 0.0;
    let mut failures = 0;
    for k in 0..points {
        let err = one(k);
        if err.is_nan() || err >= GRAD_TOLERANCE {
            failures += 1;
        }
        worst = worst.max(if err.is_nan() { f64::INFINITY } else { err });
    }
    SuiteResult { name, cases: points, failures, worst }
}

fn rows(rng: &mut ChaCha8Rng, n: usize, width: usize) -> Tensor {
    Tensor::from_fn(n, width, |_, _| rng.random_range(-1.0..1.0))
}

/// Angular hinge gradients for shared and every private prompt, frozen slabs
/// included. Points within 1e-3 rad of the hinge corner are redrawn.
pub fn ddl_gradients(points: usize, seed: u64, tamper: Tamper) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (lp, dim) = (2, 3);
    let width = lp * dim;
    grad_suite("ddl gradient", points, |_| loop {
        let mut shared = SharedPool::new(rng.random_range(1..4), lp, dim, rng.random()).unwrap();
        shared.entries.prompts = rows(&mut rng, shared.len(), width);
        let mut private = PrivatePool::new(lp, dim).unwrap();
        for t in 0..rng.random_range(1..3) {
            private.grow(t + 1, rng.random_range(1..3), rng.random()).unwrap();
            let slab = private.slabs.last_mut().unwrap();
            slab.entries.prompts = rows(&mut rng, slab.entries.len(), width);
        }
        let theta = rng.random_range(0.5..2.5);
        let weight = rng.random_range(0.05..1.0);
        let near_corner = (0..shared.len()).any(|i| {
            private.slabs.iter().any(|s| {
                (0..s.entries.len()).any(|j| {
                    let a = angle_between(shared.entries.prompts.row(i), s.entries.prompts.row(j)).unwrap();
                    (a - theta).abs() < 1e-3
                })
            })
        });
        if near_corner {
            continue;
        }
        let out = ddl_loss(&shared, &private, theta, weight);
        let mut analytic = out.shared_grad.data().to_vec();
        out.private_grads.iter().for_each(|g| analytic.extend_from_slice(g.data()));
        tamper(&mut analytic);

        let mut x0 = shared.entries.prompts.data().to_vec();
        private.slabs.iter().for_each(|s| x0.extend_from_slice(s.entries.prompts.data()));
        let (mut s, mut p) = (shared.clone(), private.clone());
        let fd = finite_diff_grad(
            |x| {
                let n = s.entries.prompts.len();
                s.entries.prompts.data_mut().copy_from_slice(&x[..n]);
                let mut off = n;
                for slab in &mut p.slabs {
                    let m = slab.entries.prompts.len();
                    slab.entries.prompts.data_mut().copy_from_slice(&x[off..off + m]);
                    off += m;
                }
                ddl_loss(&s, &p, theta, weight).loss
            },
            &x0,
            FD_STEP,
        )
        .unwrap();
        break max_relative_error(&analytic, &fd);
    })
}

const CLASSES: usize = 4;

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    BBox::new(rng.random_range(0.2..0.8), rng.random_range(0.2..0.8), rng.random_range(0.1..0.4), rng.random_range(0.1..0.4))
}

fn random_targets(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<GtObject> {
    (0..n).map(|_| GtObject { class: rng.random_range(0..classes), bbox: random_box(rng) }).collect()
}

/// Per prediction: `CLASSES + 1` logits then the four box coordinates.
fn unpack(params: &[f64]) -> Vec<Detection> {
    params
        .chunks(CLASSES + 5)
        .map(|p| detection_from_logits(&p[..=CLASSES], BBox::new(p[CLASSES + 1], p[CLASSES + 2], p[CLASSES + 3], p[CLASSES + 4]), vec![]))
        .collect()
}

/// Set-prediction loss gradients w.r.t. logits and boxes, matching held
/// fixed at its optimum.
pub fn detection_gradients(points: usize, seed: u64, tamper: Tamper) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = LossWeights::default();
    grad_suite("detection gradient", points, |_| {
        let n = rng.random_range(1..7);
        let m = rng.random_range(0..=n);
        let gt = random_targets(&mut rng, m, CLASSES);
        let params: Vec<f64> = (0..n)
            .flat_map(|_| {
                let b = random_box(&mut rng);
                let mut p: Vec<f64> = (0..=CLASSES).map(|_| rng.random_range(-2.0..2.0)).collect();
                p.extend(b.to_array());
                p
            })
            .collect();
        let preds = unpack(&params);
        let a = hungarian(&match_cost(&gt, &preds, &w).unwrap()).unwrap();
        let loss = detection_loss(&gt, &preds, &a, &w).unwrap();
        let mut analytic = Vec::with_capacity(params.len());
        for j in 0..n {
            analytic.extend_from_slice(loss.d_logits.row(j));
            analytic.extend_from_slice(loss.d_boxes.row(j));
        }
        tamper(&mut analytic);
        let fd = finite_diff_grad(|x| detection_loss(&gt, &unpack(x), &a, &w).unwrap().value, &params, FD_STEP).unwrap();
        max_relative_error(&analytic, &fd)
    })
}

/// Relevance cross-entropy gradient w.r.t. the ranker logits.
pub fn ranker_gradients(points: usize, seed: u64, tamper: Tamper) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    grad_suite("ranker gradient", points, |_| {
        let n = rng.random_range(2..20);
        let z: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let mut target = vec![0.0; n];
        target[rng.random_range(0..n)] = 1.0;
        let lambda = rng.random_range(0.01..1.0);
        let (_, mut g) = ranker_loss(&softmax(&z), &target, lambda).unwrap();
        tamper(&mut g);
        let fd = finite_diff_grad(|x| ranker_loss(&softmax(x), &target, lambda).unwrap().0, &z, FD_STEP).unwrap();
        max_relative_error(&g, &fd)
    })
}

/// A model small enough for finite differences over every trainable
/// parameter.
pub fn small_shape() -> ModelShape {
    ModelShape {
        image_size: 16,
        patch_size: 8,
        dim: 8,
        heads: 2,
        num_queries: 4,
        num_classes: 3,
        prompt_len: 2,
        shared_size: 3,
        anchor_scale: 1.0,
        attention_gain: 2.0,
    }
}

/// Full objective (detection + ranker + angular hinge) w.r.t. every
/// trainable parameter of a model with one frozen and one live private slab.
pub fn composite_gradients(points: usize, seed: u64, tamper: Tamper) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // A wide hinge keeps most prompt pairs inside it.
    let cfg = ObjectiveConfig { theta_ddl: 2.0, ..Default::default() };
    let shape = small_shape();
    grad_suite("composite gradient", points, |_| {
        let mut model = Model::new(&shape, rng.random()).unwrap();
        model.private.grow(1, 2, rng.random()).unwrap();
        model.private.grow(2, 1, rng.random()).unwrap();
        model.ranker.weights.iter_mut().for_each(|w| *w = rng.random_range(-0.5..0.5));
        let mut img = ToyImage::blank(shape.image_size, shape.image_size);
        img.pixels.iter_mut().for_each(|p| *p = rng.random_range(-1.0..1.0));
        let feats = model.features(&img).unwrap();
        let m = rng.random_range(0..3);
        let targets = random_targets(&mut rng, m, shape.num_classes);

        let (obj, mut grads) = model.image_objective(&feats, &targets, &cfg, None).unwrap();
        if let (_, Some(d)) = model.ddl(&cfg) {
            grads.add_ddl(&d.shared_grad, &d.private_grads);
        }
        let target = ranker_target(&feats, &obj.detections, &obj.assignment);
        let mut analytic = model.flatten_grads(&grads);
        tamper(&mut analytic);
        let x0 = model.trainable_vector();
        let mut probe = model.clone();
        let fd = finite_diff_grad(
            |x| {
                probe.set_trainable_vector(x);
                probe.image_loss_fixed(&feats, &targets, &cfg, &obj.assignment, target.as_deref()).unwrap()
            },
            &x0,
            FD_STEP,
        )
        .unwrap();
        max_relative_error(&analytic, &fd)
    })
}

/// Optimal cost of the solver against exhaustive search on random matrices
/// with `M ≤ 6` rows and `M ≤ N ≤ 8` columns. Both totals are summed in
/// row order, so agreement is exact.
pub fn hungarian_oracle(cases: usize, seed: u64) -> SuiteResult {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut failures = 0;
    let mut worst: f64 = 0.0;
    for k in 0..cases {
        let m = rng.random_range(0..=6);
        let n = rng.random_range(m.max(1)..=8);
        // Every fourth case draws small integers to force ties.
        let cost = if k % 4 == 0 {
            Tensor::from_fn(m, n, |_, _| rng.random_range(0..4) as f64)
        } else {
            Tensor::from_fn(m, n, |_, _| rng.random_range(-5.0..5.0))
        };
        let a = hungarian(&cost).unwrap();
        let (_, best) = brute_force_assignment(&cost);
        let total: f64 = a.pairs.iter().enumerate().fold(0.0, |acc, (i, &j)| acc + cost.at(i, j));
        let gap = (total - best).abs();
        worst = worst.max(gap);
        if total != best || !a.is_injective() || a.pairs.len() != m {
            failures += 1;
        }
    }
    SuiteResult { name: "hungarian vs brute force", cases, failures, worst }
}

/// Random teacher candidates over `classes` foreground classes plus
/// background, with features near or far from random prototypes.
pub struct PpgFixture {
    pub bank: PrototypeBank,
    pub old: BTreeSet<usize>,
    pub candidates: Vec<Detection>,
}

impl PpgFixture {
    pub fn generate(count: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (classes, dim) = (6, 5);
        let old: BTreeSet<usize> = (0..4).collect();
        let mut bank = PrototypeBank::new(dim, 16, seed).unwrap();
        // Class 3 deliberately has no prototype.
        for c in 0..3 {
            let f: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            bank.add(c, &f).unwrap();
        }
        bank.freeze(0..3);
        let candidates = (0..count)
            .map(|_| {
                // Sharp logits spread the scores across both bands.
                let logits: Vec<f64> = (0..=classes).map(|_| rng.random_range(-4.0..4.0)).collect();
                let feature: Vec<f64> = match rng.random_range(0..4) {
                    0 => vec![0.0; dim],
                    _ => (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect(),
                };
                detection_from_logits(&logits, random_box(&mut rng), feature)
            })
            .collect();
        Self { bank, old, candidates }
    }
}

/// Reference verdict written directly from the definition.
fn expected_verdict(cand: &Detection, f: &PpgFixture, th: &Thresholds) -> Verdict {
    let fg = &cand.scores[..cand.scores.len() - 1];
    let top = (0..fg.len()).fold(0, |b, c| if fg[c] > fg[b] { c } else { b });
    if !f.old.contains(&top) {
        return Verdict::Excluded;
    }
    let s = fg[top];
    if s > th.tau_high {
        return Verdict::Accepted(Source::Easy);
    }
    if s <= th.tau_low || s == th.tau_high {
        return Verdict::Rejected(Rejection::LowConfidence);
    }
    match f.bank.prototype(top) {
        None => Verdict::Rejected(Rejection::MissingPrototype),
        Some(p) => match cosine_similarity(&cand.feature, p) {
            Ok(sim) if sim >= th.theta_s => Verdict::Accepted(Source::Hard),
            _ => Verdict::Rejected(Rejection::LowSimilarity),
        },
    }
}

/// Every candidate receives exactly one verdict, the verdict follows the
/// definition, and the emitted labels are exactly the accepted candidates.
pub fn ppg_partition(count: usize, seed: u64, th: &Thresholds) -> SuiteResult {
    let f = PpgFixture::generate(count, seed);
    let v = validate(&f.candidates, &f.bank, &f.old, th);
    let mut failures = 0;
    if v.verdicts.len() != count {
        failures += 1;
    }
    let mut labels = v.labels.labels.iter();
    for (cand, verdict) in f.candidates.iter().zip(&v.verdicts) {
        if *verdict != expected_verdict(cand, &f, th) {
            failures += 1;
        }
        if let Verdict::Accepted(src) = verdict {
            match labels.next() {
                Some(l) if l.source == *src && l.bbox == cand.bbox => {}
                _ => failures += 1,
            }
        }
    }
    if labels.next().is_some() {
        failures += 1;
    }
    SuiteResult { name: "ppg partition", cases: count, failures, worst: 0.0 }
}

/// Indices of candidates accepted from `source`.
fn accepted(f: &PpgFixture, th: &Thresholds, source: Source) -> BTreeSet<usize> {
    validate(&f.candidates, &f.bank, &f.old, th)
        .verdicts
        .iter()
        .enumerate()
        .filter(|(_, v)| **v == Verdict::Accepted(source))
        .map(|(i, _)| i)
        .collect()
}

/// For random threshold pairs: raising θ_s never adds a hard label, and
/// raising τ_h never adds an easy one.
pub fn ppg_monotonicity(pairs: usize, candidates: usize, seed: u64) -> SuiteResult {
    let f = PpgFixture::generate(candidates, seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut failures = 0;
    for _ in 0..pairs {
        let base = Thresholds { tau_high: rng.random_range(0.3..0.8), tau_low: rng.random_range(0.05..0.25), theta_s: rng.random_range(-0.5..0.9) };
        let stricter_sim = Thresholds { theta_s: rng.random_range(base.theta_s..1.0), ..base };
        let stricter_conf = Thresholds { tau_high: rng.random_range(base.tau_high..0.95), ..base };
        if !accepted(&f, &stricter_sim, Source::Hard).is_subset(&accepted(&f, &base, Source::Hard)) {
            failures += 1;
        }
        if !accepted(&f, &stricter_conf, Source::Easy).is_subset(&accepted(&f, &base, Source::Easy)) {
            failures += 1;
        }
    }
    SuiteResult { name: "ppg monotonicity", cases: pairs, failures, worst: 0.0 }
}

/// Every suite at the sizes used by the `selfcheck` command.
pub fn run_all(points: usize, seed: u64) -> Vec<SuiteResult> {
    vec![
        ddl_gradients(points, seed, &no_tamper),
        detection_gradients(points, seed + 1, &no_tamper),
        ranker_gradients(points, seed + 2, &no_tamper),
        composite_gradients(points, seed + 3, &no_tamper),
        hungarian_oracle(1000, seed + 4),
        ppg_partition(10_000, seed + 5, &Thresholds::default()),
        ppg_monotonicity(100, 2000, seed + 6),
    ]
}
