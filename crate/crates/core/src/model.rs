//! The assembled detector: frozen backbone, trainable ranker, prompt pools
//! and the prefix-tuned decoder, with a hand-written backward pass.

use serde::{Deserialize, Serialize};

use crate::detector::{
    query_backward, query_function, ranker_weight_grad, DecoderCache, DecoderGrads, DecoderLayer, Detection,
    FrozenBackbone, GtObject, QueryOutput, Ranker, ToyImage,
};
use crate::error::Result;
use crate::losses::{detection_loss, match_cost, ranker_loss, ranker_target, LossBreakdown, LossWeights};
use crate::matching::{hungarian, Assignment};
use crate::numcore::Tensor;
use crate::pools::{
    ddl_loss, retrieve, retrieve_backward, split_prefix, PrivatePool, PromptEntries, Retrieval, SharedPool,
};

/// Architecture sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub num_queries: usize,
    pub num_classes: usize,
    pub prompt_len: usize,
    pub shared_size: usize,
    /// Object queries start at this multiple of their patch's positional
    /// code; zero keeps the random initialization.
    pub anchor_scale: f64,
    /// Multiplies the frozen query projection, sharpening attention without
    /// enlarging the object queries.
    pub attention_gain: f64,
}

impl Default for ModelShape {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            dim: 32,
            heads: 4,
            num_queries: 16,
            num_classes: 8,
            prompt_len: 8,
            shared_size: 100,
            anchor_scale: 0.5,
            attention_gain: 8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub backbone: FrozenBackbone,
    pub ranker: Ranker,
    pub decoder: DecoderLayer,
    pub shared: SharedPool,
    pub private: PrivatePool,
}

/// Everything the backward pass needs from one forward.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub query: QueryOutput,
    pub retrieval: Retrieval,
    pub detections: Vec<Detection>,
    pub decoder: DecoderCache,
}

/// Gradients for every trainable tensor. Private gradients cover all slabs;
/// frozen slabs are skipped when applying.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub ranker: Vec<f64>,
    pub decoder: DecoderGrads,
    pub shared: PromptEntries,
    pub private: Vec<PromptEntries>,
}

impl ModelGrads {
    pub fn add_assign(&mut self, o: &ModelGrads) {
        self.ranker.iter_mut().zip(&o.ranker).for_each(|(a, b)| *a += b);
        self.decoder.add_assign(&o.decoder);
        self.shared.add_assign(&o.shared);
        for (a, b) in self.private.iter_mut().zip(&o.private) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.ranker.iter_mut().for_each(|v| *v *= s);
        self.decoder.scale(s);
        self.shared.scale(s);
        self.private.iter_mut().for_each(|p| p.scale(s));
    }

    /// Adds the angular-hinge prompt gradients.
    pub fn add_ddl(&mut self, shared: &Tensor, private: &[Tensor]) {
        self.shared.prompts.add_assign(shared);
        for (a, b) in self.private.iter_mut().zip(private) {
            a.prompts.add_assign(b);
        }
    }
}

/// Per-image training targets and fixed quantities of one objective
/// evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageObjective {
    pub loss: LossBreakdown,
    pub assignment: Assignment,
    pub detections: Vec<Detection>,
}

/// Loss weights and hinge settings of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub weights: LossWeights,
    pub lambda_q: f64,
    pub lambda_ddl: f64,
    /// Radians.
    pub theta_ddl: f64,
    pub use_ddl: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            lambda_q: 0.1,
            lambda_ddl: 0.15,
            theta_ddl: std::f64::consts::FRAC_PI_2,
            use_ddl: true,
        }
    }
}

impl Model {
    pub fn new(shape: &ModelShape, seed: u64) -> Result<Self> {
        let backbone = FrozenBackbone::new(shape.image_size, shape.patch_size, shape.dim, seed ^ 0xB0B)?;
        let mut decoder =
            DecoderLayer::new(shape.dim, shape.heads, shape.num_queries, shape.num_classes, seed ^ 0xDEC)?;
        decoder.attention.w_q.scale(shape.attention_gain);
        if shape.anchor_scale != 0.0 {
            decoder.anchor_queries(&backbone.positions, backbone.grid(), shape.anchor_scale);
        }
        let shared = SharedPool::new(shape.shared_size, shape.prompt_len, shape.dim, seed ^ 0x54A)?;
        let private = PrivatePool::new(shape.prompt_len, shape.dim)?;
        Ok(Self { backbone, ranker: Ranker::zeros(shape.dim), decoder, shared, private })
    }

    pub fn features(&self, image: &ToyImage) -> Result<Tensor> {
        self.backbone.features(image)
    }

    pub fn forward(&self, features: &Tensor) -> Result<ForwardPass> {
        let query = query_function(features, &self.ranker)?;
        let retrieval = retrieve(&query.query, &self.shared, &self.private)?;
        let (pk, pv) = split_prefix(&retrieval.prompt);
        let (detections, decoder) = self.decoder.forward(features, &pk, &pv)?;
        Ok(ForwardPass { query, retrieval, detections, decoder })
    }

    /// Decoder output without any prompt, for comparison with a
    /// zero-length prefix.
    pub fn forward_unprompted(&self, features: &Tensor) -> Result<Vec<Detection>> {
        let empty = Tensor::zeros(&[0, self.backbone.dim]);
        Ok(self.decoder.forward(features, &empty, &empty)?.0)
    }

    pub fn detect(&self, image: &ToyImage) -> Result<Vec<Detection>> {
        Ok(self.forward(&self.features(image)?)?.detections)
    }

    /// Backward through decoder, retrieval and ranker. `d_ranker_logits` is
    /// any direct gradient on the relevance logits (the ranker loss).
    pub fn backward(
        &self,
        features: &Tensor,
        pass: &ForwardPass,
        d_logits: &Tensor,
        d_boxes: &Tensor,
        d_ranker_logits: Option<&[f64]>,
    ) -> Result<ModelGrads> {
        let (decoder, attn) = self.decoder.backward(&pass.decoder, d_logits, d_boxes)?;
        let d_prompt = Tensor::vstack(&attn.prefix_k, &attn.prefix_v)?;
        let r = retrieve_backward(&pass.query.query, &self.shared, &self.private, &pass.retrieval, &d_prompt);
        let mut d_rank = query_backward(features, &pass.query.alpha, &r.query);
        if let Some(extra) = d_ranker_logits {
            d_rank.iter_mut().zip(extra).for_each(|(a, b)| *a += b);
        }
        let ranker = ranker_weight_grad(features, &d_rank);
        Ok(ModelGrads { ranker, decoder, shared: r.shared, private: r.private })
    }

    /// Detection + ranker loss for one image and its gradients. With
    /// `fixed` the matching is held constant instead of recomputed.
    pub fn image_objective(
        &self,
        features: &Tensor,
        targets: &[GtObject],
        cfg: &ObjectiveConfig,
        fixed: Option<&Assignment>,
    ) -> Result<(ImageObjective, ModelGrads)> {
        let pass = self.forward(features)?;
        let assignment = match fixed {
            Some(a) => a.clone(),
            None => hungarian(&match_cost(targets, &pass.detections, &cfg.weights)?)?,
        };
        let det = detection_loss(targets, &pass.detections, &assignment, &cfg.weights)?;
        let (ranker_value, d_rank) = match ranker_target(features, &pass.detections, &assignment) {
            Some(target) if cfg.lambda_q > 0.0 => {
                let (v, g) = ranker_loss(&pass.query.alpha, &target, cfg.lambda_q)?;
                (v, Some(g))
            }
            _ => (0.0, None),
        };
        let grads = self.backward(features, &pass, &det.d_logits, &det.d_boxes, d_rank.as_deref())?;
        let loss = LossBreakdown { detection: det.value, ranker: ranker_value, ddl: 0.0 };
        Ok((ImageObjective { loss, assignment, detections: pass.detections }, grads))
    }

    /// Ranker target held fixed: the loss as a function of parameters only,
    /// used by gradient checks.
    pub fn image_loss_fixed(
        &self,
        features: &Tensor,
        targets: &[GtObject],
        cfg: &ObjectiveConfig,
        assignment: &Assignment,
        ranker_target: Option<&[f64]>,
    ) -> Result<f64> {
        let pass = self.forward(features)?;
        let det = detection_loss(targets, &pass.detections, assignment, &cfg.weights)?;
        let rank = match ranker_target {
            Some(t) if cfg.lambda_q > 0.0 => ranker_loss(&pass.query.alpha, t, cfg.lambda_q)?.0,
            _ => 0.0,
        };
        Ok(det.value + rank + self.ddl(cfg).0)
    }

    /// Angular hinge between pools, or zero when disabled.
    pub fn ddl(&self, cfg: &ObjectiveConfig) -> (f64, Option<crate::pools::DdlOutput>) {
        if !cfg.use_ddl || cfg.lambda_ddl == 0.0 {
            return (0.0, None);
        }
        let out = ddl_loss(&self.shared, &self.private, cfg.theta_ddl, cfg.lambda_ddl);
        (out.loss, Some(out))
    }

    /// Gradient descent on the trainable parameters only: ranker, object
    /// queries, prediction heads, the shared pool and the current private
    /// slab. Backbone, attention projections and frozen slabs are untouched.
    pub fn apply(&mut self, grads: &ModelGrads, lr: f64) {
        self.ranker.weights.iter_mut().zip(&grads.ranker).for_each(|(p, g)| *p -= lr * g);
        let d = &mut self.decoder;
        d.object_queries.sgd_step(&grads.decoder.object_queries, lr);
        d.cls_w.sgd_step(&grads.decoder.cls_w, lr);
        d.box_w.sgd_step(&grads.decoder.box_w, lr);
        d.cls_b.iter_mut().zip(&grads.decoder.cls_b).for_each(|(p, g)| *p -= lr * g);
        d.box_b.iter_mut().zip(&grads.decoder.box_b).for_each(|(p, g)| *p -= lr * g);
        self.shared.entries.sgd_step(&grads.shared, lr);
        for (slab, g) in self.private.slabs.iter_mut().zip(&grads.private) {
            if slab.trainable {
                slab.entries.sgd_step(g, lr);
            }
        }
    }

    pub fn zero_grads(&self) -> ModelGrads {
        ModelGrads {
            ranker: vec![0.0; self.ranker.weights.len()],
            decoder: self.decoder.zero_grads(),
            shared: self.shared.entries.zeros_like(),
            private: self.private.slabs.iter().map(|s| s.entries.zeros_like()).collect(),
        }
    }

    /// Trainable parameters flattened in a fixed order.
    pub fn trainable_vector(&self) -> Vec<f64> {
        let mut v = Vec::new();
        self.visit_trainable(|slice| v.extend_from_slice(slice));
        v
    }

    pub fn set_trainable_vector(&mut self, values: &[f64]) {
        let mut offset = 0;
        self.visit_trainable_mut(|slice| {
            slice.copy_from_slice(&values[offset..offset + slice.len()]);
            offset += slice.len();
        });
        assert_eq!(offset, values.len(), "trainable vector length mismatch");
    }

    /// Gradients flattened in the order of [`trainable_vector`](Self::trainable_vector).
    pub fn flatten_grads(&self, g: &ModelGrads) -> Vec<f64> {
        let mut v = Vec::new();
        v.extend_from_slice(&g.ranker);
        v.extend_from_slice(g.decoder.object_queries.data());
        v.extend_from_slice(g.decoder.cls_w.data());
        v.extend_from_slice(&g.decoder.cls_b);
        v.extend_from_slice(g.decoder.box_w.data());
        v.extend_from_slice(&g.decoder.box_b);
        v.extend_from_slice(g.shared.prompts.data());
        v.extend_from_slice(g.shared.keys.data());
        v.extend_from_slice(g.shared.adapters.data());
        for (slab, e) in self.private.slabs.iter().zip(&g.private) {
            if slab.trainable {
                v.extend_from_slice(e.prompts.data());
                v.extend_from_slice(e.keys.data());
                v.extend_from_slice(e.adapters.data());
            }
        }
        v
    }

    fn visit_trainable(&self, mut f: impl FnMut(&[f64])) {
        f(&self.ranker.weights);
        f(self.decoder.object_queries.data());
        f(self.decoder.cls_w.data());
        f(&self.decoder.cls_b);
        f(self.decoder.box_w.data());
        f(&self.decoder.box_b);
        let e = &self.shared.entries;
        f(e.prompts.data());
        f(e.keys.data());
        f(e.adapters.data());
        for slab in self.private.slabs.iter().filter(|s| s.trainable) {
            f(slab.entries.prompts.data());
            f(slab.entries.keys.data());
            f(slab.entries.adapters.data());
        }
    }

    fn visit_trainable_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        f(&mut self.ranker.weights);
        f(self.decoder.object_queries.data_mut());
        f(self.decoder.cls_w.data_mut());
        f(&mut self.decoder.cls_b);
        f(self.decoder.box_w.data_mut());
        f(&mut self.decoder.box_b);
        let e = &mut self.shared.entries;
        f(e.prompts.data_mut());
        f(e.keys.data_mut());
        f(e.adapters.data_mut());
        for slab in self.private.slabs.iter_mut().filter(|s| s.trainable) {
            f(slab.entries.prompts.data_mut());
            f(slab.entries.keys.data_mut());
            f(slab.entries.adapters.data_mut());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::BBox;
    use crate::numcore::{finite_diff_grad, max_relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small_shape() -> ModelShape {
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

    fn random_image(rng: &mut ChaCha8Rng) -> ToyImage {
        let mut img = ToyImage::blank(16, 16);
        img.pixels.iter_mut().for_each(|p| *p = rng.random_range(-1.0..1.0));
        img
    }

    fn random_targets(rng: &mut ChaCha8Rng, n: usize) -> Vec<GtObject> {
        (0..n)
            .map(|_| GtObject {
                class: rng.random_range(0..3),
                bbox: BBox::new(
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.1..0.4),
                    rng.random_range(0.1..0.4),
                ),
            })
            .collect()
    }

    fn grown_model(seed: u64) -> Model {
        let mut m = Model::new(&small_shape(), seed).unwrap();
        m.private.grow(1, 2, seed + 1).unwrap();
        m.private.grow(2, 1, seed + 2).unwrap();
        m
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let cfg = ObjectiveConfig { lambda_ddl: 0.15, theta_ddl: 2.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..10 {
            let mut model = grown_model(100 + trial);
            // Move off the zero ranker so the relevance softmax is nontrivial.
            model.ranker.weights.iter_mut().for_each(|w| *w = rng.random_range(-0.5..0.5));
            let feats = model.features(&random_image(&mut rng)).unwrap();
            let targets = random_targets(&mut rng, 2);
            let (obj, mut grads) = model.image_objective(&feats, &targets, &cfg, None).unwrap();
            if let (_, Some(d)) = model.ddl(&cfg) {
                grads.add_ddl(&d.shared_grad, &d.private_grads);
            }
            let target = ranker_target(&feats, &obj.detections, &obj.assignment);
            let analytic = model.flatten_grads(&grads);
            let x0 = model.trainable_vector();
            let mut probe = model.clone();
            let fd = finite_diff_grad(
                |x| {
                    probe.set_trainable_vector(x);
                    probe.image_loss_fixed(&feats, &targets, &cfg, &obj.assignment, target.as_deref()).unwrap()
                },
                &x0,
                1e-5,
            )
            .unwrap();
            let err = max_relative_error(&analytic, &fd);
            assert!(err < 1e-4, "trial {trial}: relative error {err}");
        }
    }

    #[test]
    fn zero_length_prefix_equals_plain_attention() {
        let shape = ModelShape { prompt_len: 0, ..small_shape() };
        let mut model = Model::new(&shape, 3).unwrap();
        model.private.grow(1, 2, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let feats = model.features(&random_image(&mut rng)).unwrap();
        let prompted = model.forward(&feats).unwrap().detections;
        let plain = model.forward_unprompted(&feats).unwrap();
        assert_eq!(prompted, plain);
    }

    #[test]
    fn apply_leaves_frozen_state_untouched() {
        let mut model = grown_model(9);
        let before = model.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let feats = model.features(&random_image(&mut rng)).unwrap();
        let (_, grads) =
            model.image_objective(&feats, &random_targets(&mut rng, 2), &ObjectiveConfig::default(), None).unwrap();
        model.apply(&grads, 0.1);
        assert_eq!(model.backbone, before.backbone);
        assert_eq!(model.decoder.attention, before.decoder.attention);
        assert_eq!(model.private.slabs[0], before.private.slabs[0]);
        assert_ne!(model.private.slabs[1], before.private.slabs[1]);
        assert_ne!(model.shared, before.shared);
    }

    #[test]
    fn trainable_vector_round_trips() {
        let mut model = grown_model(4);
        let v: Vec<f64> = model.trainable_vector().iter().map(|x| x + 1.0).collect();
        model.set_trainable_vector(&v);
        assert_eq!(model.trainable_vector(), v);
        assert_eq!(v.len(), model.flatten_grads(&model.zero_grads()).len());
    }
}
