//! The incremental protocol: stages in order, each training a student on
//! the current task's labels plus validated teacher pseudo-labels, then
//! evaluating on every class seen so far.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::config::ExperimentConfig;
use crate::detector::{Detection, GtObject, ToyImage};
use crate::error::{PdpError, Result};
use crate::metrics::{
    average_precision, compute_map_metrics, pr_points, GtBox, MetricsReport, PseudoCounts, ScoredBox, TaskMetrics, IOU_THRESHOLD,
};
use crate::model::{Model, ObjectiveConfig};
use crate::numcore::Tensor;
use crate::ppg::{merge_targets, validate, PrototypeBank, PseudoLabelSet, Source, Verdict};
use crate::world::TaskStream;

/// Derives an independent stream seed from the run seed.
pub fn sub_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub struct Experiment {
    pub config: ExperimentConfig,
    pub objective: ObjectiveConfig,
    pub stream: TaskStream,
    pub model: Model,
    /// Frozen copy of the model as it stood before the current stage.
    pub teacher: Option<Model>,
    pub bank: PrototypeBank,
    pub report: MetricsReport,
    next_stage: usize,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate("")?;
        let stream = TaskStream::generate(&config.world, sub_seed(config.seed, 1))?;
        let model = Model::new(&config.shape(), sub_seed(config.seed, 2))?;
        let bank = PrototypeBank::new(config.model.dim, config.training.prototype_capacity, sub_seed(config.seed, 3))?;
        Ok(Self {
            objective: config.objective(),
            config,
            stream,
            model,
            teacher: None,
            bank,
            report: MetricsReport::default(),
            next_stage: 0,
        })
    }

    pub fn num_stages(&self) -> usize {
        self.stream.tasks.len()
    }

    /// Zero-based index of the stage `run_stage` accepts next.
    pub fn next_stage(&self) -> usize {
        self.next_stage
    }

    /// Trains task `t` (zero-based) and evaluates on all classes seen so
    /// far.
    pub fn run_stage(&mut self, t: usize) -> Result<TaskMetrics> {
        if t != self.next_stage || t >= self.num_stages() {
            return Err(PdpError::StageOrder { requested: t, expected: self.next_stage });
        }
        let task = &self.stream.tasks[t];
        let current: BTreeSet<usize> = task.classes.iter().copied().collect();
        let old = self.stream.old_classes(t);

        if t > 0 {
            self.teacher = Some(self.model.clone());
        }
        self.model.private.grow(t + 1, task.classes.len(), sub_seed(self.config.seed, 100 + t as u64))?;

        let feats: Vec<Tensor> = task.train.iter().map(|img| self.model.features(img)).collect::<Result<_>>()?;
        let mut counts = PseudoCounts::default();
        let pseudo: Vec<PseudoLabelSet> = match (&self.teacher, self.config.modules.ppg && t > 0) {
            (Some(teacher), true) => feats
                .iter()
                .map(|f| {
                    let cands = teacher.forward(f)?.detections;
                    let v = validate(&cands, &self.bank, &old, &self.config.thresholds);
                    counts.easy += v.labels.count(Source::Easy);
                    counts.hard += v.labels.count(Source::Hard);
                    counts.rejected += v.verdicts.iter().filter(|x| matches!(x, Verdict::Rejected(_))).count();
                    Ok(v.labels)
                })
                .collect::<Result<_>>()?,
            _ => vec![PseudoLabelSet::default(); feats.len()],
        };
        let num_queries = self.model.decoder.num_queries();
        let targets: Vec<Vec<GtObject>> = task
            .train
            .iter()
            .zip(&pseudo)
            .map(|(img, p)| merge_targets(&img.objects, p, &current, num_queries))
            .collect::<Result<_>>()?;

        let tr = &self.config.training;
        let mut rng = ChaCha8Rng::seed_from_u64(sub_seed(self.config.seed, 200 + t as u64));
        let mut order: Vec<usize> = (0..feats.len()).collect();
        for epoch in 0..tr.epochs {
            order.shuffle(&mut rng);
            let prototype_epoch = epoch + 1 == tr.epochs;
            let mut epoch_loss = 0.0;
            for batch in order.chunks(tr.batch_size) {
                let mut grads = self.model.zero_grads();
                for &i in batch {
                    let (obj, g) = self.model.image_objective(&feats[i], &targets[i], &self.objective, None)?;
                    epoch_loss += obj.loss.detection + obj.loss.ranker;
                    grads.add_assign(&g);
                    if prototype_epoch {
                        let real = task.train[i].objects.len().min(targets[i].len());
                        self.bank.update_from_matches(&targets[i][..real], &obj.detections, &obj.assignment, &current)?;
                    }
                }
                grads.scale(1.0 / batch.len() as f64);
                if let (ddl, Some(d)) = self.model.ddl(&self.objective) {
                    epoch_loss += ddl * batch.len() as f64;
                    grads.add_ddl(&d.shared_grad, &d.private_grads);
                }
                self.model.apply(&grads, tr.lr);
            }
            info!("stage {} epoch {}: mean loss {:.4}", t + 1, epoch + 1, epoch_loss / feats.len() as f64);
        }
        self.bank.freeze(current.iter().copied());
        self.next_stage += 1;

        let per_class_ap = self.evaluate(t)?;
        let task_classes: Vec<Vec<usize>> = self.stream.tasks.iter().map(|k| k.classes.clone()).collect();
        let map = compute_map_metrics(&per_class_ap, &task_classes, t)?;
        let metrics = TaskMetrics {
            task: t + 1,
            map,
            num_previous: old.len(),
            num_current: current.len(),
            per_class_ap,
            pseudo: counts,
        };
        info!("stage {} done: {:?}", t + 1, metrics.map);
        self.report.tasks.push(metrics.clone());
        Ok(metrics)
    }

    /// Per-class AP of the current model over the evaluation images of
    /// tasks `0..=t`.
    pub fn evaluate(&self, t: usize) -> Result<BTreeMap<usize, f64>> {
        let images: Vec<&ToyImage> = self.stream.tasks[..=t].iter().flat_map(|k| &k.eval).collect();
        let detections: Vec<Vec<Detection>> = images.iter().map(|img| self.model.detect(img)).collect::<Result<_>>()?;
        Ok(self
            .stream
            .seen_classes(t)
            .into_iter()
            .map(|c| {
                let (dets, gts) = class_boxes(c, &images, &detections);
                (c, average_precision(&dets, &gts, IOU_THRESHOLD))
            })
            .collect())
    }

    /// `class,rank,recall,precision` for every seen class after stage `t`.
    pub fn pr_curves_csv(&self, t: usize) -> Result<String> {
        let images: Vec<&ToyImage> = self.stream.tasks[..=t].iter().flat_map(|k| &k.eval).collect();
        let detections: Vec<Vec<Detection>> = images.iter().map(|img| self.model.detect(img)).collect::<Result<_>>()?;
        let mut out = String::from("class,rank,recall,precision\n");
        for c in self.stream.seen_classes(t) {
            let (dets, gts) = class_boxes(c, &images, &detections);
            for (k, (r, p)) in pr_points(&dets, &gts, IOU_THRESHOLD).into_iter().enumerate() {
                out.push_str(&format!("{c},{},{r},{p}\n", k + 1));
            }
        }
        Ok(out)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::new(self.next_stage, &self.model, &self.bank)
    }

    /// Runs every remaining stage. With `out`, writes a checkpoint after
    /// each stage plus `report.csv`, `summary.json` and the final stage's
    /// `pr_curves.csv` at the end.
    pub fn run(&mut self, out: Option<&Path>) -> Result<MetricsReport> {
        if let Some(dir) = out {
            std::fs::create_dir_all(dir)?;
        }
        while self.next_stage < self.num_stages() {
            self.run_stage(self.next_stage)?;
            if let Some(dir) = out {
                self.checkpoint().save(&dir.join(format!("stage{}.ckpt", self.next_stage)))?;
            }
        }
        if let Some(dir) = out {
            std::fs::write(dir.join("report.csv"), self.report.to_csv())?;
            std::fs::write(dir.join("summary.json"), self.report.to_json())?;
            std::fs::write(dir.join("pr_curves.csv"), self.pr_curves_csv(self.next_stage - 1)?)?;
        }
        Ok(self.report.clone())
    }
}

/// Scored boxes for class `c` from every query of every image, and the
/// ground-truth boxes of that class.
pub fn class_boxes(c: usize, images: &[&ToyImage], detections: &[Vec<Detection>]) -> (Vec<ScoredBox>, Vec<GtBox>) {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for (k, (img, ds)) in images.iter().zip(detections).enumerate() {
        dets.extend(ds.iter().map(|d| ScoredBox { image: k, score: d.scores[c], bbox: d.bbox }));
        gts.extend(img.objects.iter().filter(|o| o.class == c).map(|o| GtBox { image: k, bbox: o.bbox }));
    }
    (dets, gts)
}
