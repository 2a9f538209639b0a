//! Toy detector: frozen linear patch backbone, a ranker that pools patch
//! features into an image query, and one decoder layer whose cross-attention
//! accepts prefix key/value tokens.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{PdpError, Result};
use crate::numcore::{dot, norm, sigmoid, softmax, softmax_backward, softmax_in_place, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtObject {
    pub class: usize,
    pub bbox: BBox,
}

/// Single-channel image with its full object list.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyImage {
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<f64>,
    pub objects: Vec<GtObject>,
}

impl ToyImage {
    pub fn blank(height: usize, width: usize) -> Self {
        Self { height, width, pixels: vec![0.0; height * width], objects: Vec::new() }
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.pixels[y * self.width + x]
    }
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, bound: f64) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
}

/// Random orthogonal matrix by Gram-Schmidt on uniform rows.
fn orthogonal_matrix(rng: &mut ChaCha8Rng, dim: usize) -> Tensor {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while rows.len() < dim {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
        for r in &rows {
            let d = dot(&v, r);
            v.iter_mut().zip(r).for_each(|(a, b)| *a -= d * b);
        }
        let n = norm(&v);
        if n > 1e-6 {
            rows.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    Tensor::from_fn(dim, dim, |r, c| rows[r][c])
}

/// Fixed random patch embedding plus fixed positional codes. Never trained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenBackbone {
    pub image_size: usize,
    pub patch_size: usize,
    pub dim: usize,
    /// `(patch_size²) × dim`.
    pub projection: Tensor,
    /// `num_patches × dim`.
    pub positions: Tensor,
}

impl FrozenBackbone {
    pub fn new(image_size: usize, patch_size: usize, dim: usize, seed: u64) -> Result<Self> {
        if patch_size == 0 || image_size % patch_size != 0 {
            return Err(PdpError::Shape(format!(
                "image size {image_size} is not a multiple of patch size {patch_size}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pixels = patch_size * patch_size;
        // Unit-variance features for a fully lit patch.
        let proj_bound = (3.0 / pixels as f64).sqrt();
        let projection = uniform_matrix(&mut rng, pixels, dim, proj_bound);
        let grid = image_size / patch_size;
        let positions = uniform_matrix(&mut rng, grid * grid, dim, 3f64.sqrt() * 0.5);
        Ok(Self { image_size, patch_size, dim, projection, positions })
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// `T × D` patch features.
    pub fn features(&self, image: &ToyImage) -> Result<Tensor> {
        if image.height != self.image_size || image.width != self.image_size {
            return Err(PdpError::Shape(format!(
                "image {}x{} but backbone expects {}x{}",
                image.height, image.width, self.image_size, self.image_size
            )));
        }
        let (g, p) = (self.grid(), self.patch_size);
        let patches = Tensor::from_fn(g * g, p * p, |t, k| {
            let (gy, gx) = (t / g, t % g);
            let (py, px) = (k / p, k % p);
            image.at(gy * p + py, gx * p + px)
        });
        let mut f = patches.matmul(&self.projection)?;
        f.add_assign(&self.positions);
        Ok(f)
    }
}

/// Linear relevance scorer over patch features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranker {
    pub weights: Vec<f64>,
}

impl Ranker {
    pub fn zeros(dim: usize) -> Self {
        Self { weights: vec![0.0; dim] }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueryOutput {
    pub query: Vec<f64>,
    pub alpha: Vec<f64>,
}

/// `α = softmax(F ψ)`, `q = Σᵢ αᵢ Fᵢ`.
pub fn query_function(features: &Tensor, ranker: &Ranker) -> Result<QueryOutput> {
    if features.cols() != ranker.weights.len() {
        return Err(PdpError::Shape(format!(
            "features of dim {} against ranker of dim {}",
            features.cols(),
            ranker.weights.len()
        )));
    }
    let logits: Vec<f64> = (0..features.rows()).map(|t| dot(features.row(t), &ranker.weights)).collect();
    let alpha = softmax(&logits);
    Ok(QueryOutput { query: pool_rows(features, &alpha), alpha })
}

fn pool_rows(features: &Tensor, weights: &[f64]) -> Vec<f64> {
    let mut q = vec![0.0; features.cols()];
    for (t, &a) in weights.iter().enumerate() {
        for (qc, f) in q.iter_mut().zip(features.row(t)) {
            *qc += a * f;
        }
    }
    q
}

/// Gradient w.r.t. the ranker logits given `dL/dq`.
pub fn query_backward(features: &Tensor, alpha: &[f64], d_query: &[f64]) -> Vec<f64> {
    let d_alpha: Vec<f64> = (0..features.rows()).map(|t| dot(features.row(t), d_query)).collect();
    softmax_backward(alpha, &d_alpha)
}

/// `dL/dψ = Fᵀ · dL/dlogits`.
pub fn ranker_weight_grad(features: &Tensor, d_logits: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; features.cols()];
    for (t, &dl) in d_logits.iter().enumerate() {
        for (gc, f) in g.iter_mut().zip(features.row(t)) {
            *gc += dl * f;
        }
    }
    g
}

/// Multi-head cross-attention with optional prefix keys/values, which live
/// in the already-projected space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiHeadAttention {
    pub heads: usize,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCache {
    pub projected_queries: Tensor,
    pub keys: Tensor,
    pub values: Tensor,
    /// One `N_q × S` matrix per head.
    pub weights: Vec<Tensor>,
    pub concat: Tensor,
    pub prefix_len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads {
    pub queries: Tensor,
    pub prefix_k: Tensor,
    pub prefix_v: Tensor,
}

impl MultiHeadAttention {
    pub fn new(dim: usize, heads: usize, seed: u64) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(PdpError::Shape(format!("dim {dim} not divisible into {heads} heads")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Queries and keys share one rotation, so summed over heads the
        // attention logit is the plain inner product of query and key.
        let rotation = orthogonal_matrix(&mut rng, dim);
        let bound = (3.0 / dim as f64).sqrt();
        let w_v = uniform_matrix(&mut rng, dim, dim, bound);
        let w_o = uniform_matrix(&mut rng, dim, dim, bound);
        Ok(Self { heads, w_q: rotation.clone(), w_k: rotation, w_v, w_o })
    }

    pub fn dim(&self) -> usize {
        self.w_q.rows()
    }

    pub fn head_dim(&self) -> usize {
        self.dim() / self.heads
    }

    /// Plain multi-head attention of `queries` over `memory`.
    pub fn forward(&self, queries: &Tensor, memory: &Tensor) -> Result<(Tensor, AttentionCache)> {
        let empty = Tensor::zeros(&[0, self.dim()]);
        self.prefix_forward(queries, memory, &empty, &empty)
    }

    /// `softmax(Q [P_K, K]ᵀ/√d_k) [P_V, V]` per head, concatenated and
    /// output-projected. With empty prefixes this is plain MHA.
    pub fn prefix_forward(
        &self,
        queries: &Tensor,
        memory: &Tensor,
        prefix_k: &Tensor,
        prefix_v: &Tensor,
    ) -> Result<(Tensor, AttentionCache)> {
        if prefix_k.rows() != prefix_v.rows() {
            return Err(PdpError::Shape(format!(
                "prefix keys ({}) and values ({}) differ in length",
                prefix_k.rows(),
                prefix_v.rows()
            )));
        }
        let d = self.dim();
        if queries.cols() != d || memory.cols() != d || (prefix_k.rows() > 0 && prefix_k.cols() != d) {
            return Err(PdpError::Shape("attention operand width differs from model dim".into()));
        }
        let qp = queries.matmul(&self.w_q)?;
        let mk = memory.matmul(&self.w_k)?;
        let mv = memory.matmul(&self.w_v)?;
        let (keys, values) = if prefix_k.rows() == 0 {
            (mk, mv)
        } else {
            (Tensor::vstack(prefix_k, &mk)?, Tensor::vstack(prefix_v, &mv)?)
        };
        let (nq, s, dk) = (qp.rows(), keys.rows(), self.head_dim());
        let scale = 1.0 / (dk as f64).sqrt();
        let mut concat = Tensor::zeros(&[nq, d]);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let cols = h * dk..(h + 1) * dk;
            let mut a = Tensor::zeros(&[nq, s]);
            for n in 0..nq {
                let qrow = &qp.row(n)[cols.clone()];
                let arow = a.row_mut(n);
                for (t, av) in arow.iter_mut().enumerate() {
                    *av = dot(qrow, &keys.row(t)[cols.clone()]) * scale;
                }
                softmax_in_place(arow);
                let orow = &mut concat.row_mut(n)[cols.clone()];
                for (t, &av) in a.row(n).iter().enumerate() {
                    for (o, v) in orow.iter_mut().zip(&values.row(t)[cols.clone()]) {
                        *o += av * v;
                    }
                }
            }
            weights.push(a);
        }
        let out = concat.matmul(&self.w_o)?;
        let cache = AttentionCache {
            projected_queries: qp,
            keys,
            values,
            weights,
            concat,
            prefix_len: prefix_k.rows(),
        };
        Ok((out, cache))
    }

    pub fn backward(&self, cache: &AttentionCache, d_out: &Tensor) -> Result<AttentionGrads> {
        let d_concat = d_out.matmul_t(&self.w_o)?;
        let (nq, s, dk) = (cache.projected_queries.rows(), cache.keys.rows(), self.head_dim());
        let scale = 1.0 / (dk as f64).sqrt();
        let d = self.dim();
        let mut d_qp = Tensor::zeros(&[nq, d]);
        let lp = cache.prefix_len;
        let mut d_pk = Tensor::zeros(&[lp, d]);
        let mut d_pv = Tensor::zeros(&[lp, d]);
        for h in 0..self.heads {
            let cols = h * dk..(h + 1) * dk;
            let a = &cache.weights[h];
            for n in 0..nq {
                let dorow = &d_concat.row(n)[cols.clone()];
                let d_a: Vec<f64> = (0..s).map(|t| dot(dorow, &cache.values.row(t)[cols.clone()])).collect();
                let d_s = softmax_backward(a.row(n), &d_a);
                for t in 0..s {
                    let coef = d_s[t] * scale;
                    if coef != 0.0 {
                        let krow = &cache.keys.row(t)[cols.clone()];
                        let qrow = d_qp.row_mut(n);
                        for (c, k) in cols.clone().zip(krow) {
                            qrow[c] += coef * k;
                        }
                    }
                    if t < lp {
                        let qrow = &cache.projected_queries.row(n)[cols.clone()];
                        let pk = d_pk.row_mut(t);
                        for (c, q) in cols.clone().zip(qrow) {
                            pk[c] += coef * q;
                        }
                        let w = a.at(n, t);
                        let pv = d_pv.row_mut(t);
                        for (c, g) in cols.clone().zip(dorow) {
                            pv[c] += w * g;
                        }
                    }
                }
            }
        }
        let d_queries = d_qp.matmul_t(&self.w_q)?;
        Ok(AttentionGrads { queries: d_queries, prefix_k: d_pk, prefix_v: d_pv })
    }
}

/// One prediction slot: class distribution (last entry is "no object"),
/// box and the pre-head embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub scores: Vec<f64>,
    pub bbox: BBox,
    pub feature: Vec<f64>,
}

impl Detection {
    pub fn background_class(&self) -> usize {
        self.scores.len() - 1
    }

    /// Argmax over all classes including "no object"; lowest index on ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.scores)
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Learned object queries, cross-attention and the two prediction heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderLayer {
    pub num_classes: usize,
    pub object_queries: Tensor,
    pub attention: MultiHeadAttention,
    /// `D × (num_classes + 1)`.
    pub cls_w: Tensor,
    pub cls_b: Vec<f64>,
    /// `D × 4`.
    pub box_w: Tensor,
    pub box_b: Vec<f64>,
    /// `N_q × 4` fixed per-query offsets added to the box logits; the
    /// query's reference point.
    pub reference: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderCache {
    pub attention: AttentionCache,
    pub embeddings: Tensor,
    pub probs: Tensor,
    pub boxes: Tensor,
}

/// Gradients of the trainable decoder parameters plus the prefix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderGrads {
    pub object_queries: Tensor,
    pub cls_w: Tensor,
    pub cls_b: Vec<f64>,
    pub box_w: Tensor,
    pub box_b: Vec<f64>,
}

impl DecoderGrads {
    pub fn add_assign(&mut self, o: &DecoderGrads) {
        self.object_queries.add_assign(&o.object_queries);
        self.cls_w.add_assign(&o.cls_w);
        self.box_w.add_assign(&o.box_w);
        self.cls_b.iter_mut().zip(&o.cls_b).for_each(|(a, b)| *a += b);
        self.box_b.iter_mut().zip(&o.box_b).for_each(|(a, b)| *a += b);
    }

    pub fn scale(&mut self, s: f64) {
        self.object_queries.scale(s);
        self.cls_w.scale(s);
        self.box_w.scale(s);
        self.cls_b.iter_mut().for_each(|v| *v *= s);
        self.box_b.iter_mut().for_each(|v| *v *= s);
    }
}

impl DecoderLayer {
    pub fn new(dim: usize, heads: usize, num_queries: usize, num_classes: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let attention = MultiHeadAttention::new(dim, heads, rng.random())?;
        let object_queries = uniform_matrix(&mut rng, num_queries, dim, 1.0);
        let bound = (1.0 / dim as f64).sqrt();
        let cls_w = uniform_matrix(&mut rng, dim, num_classes + 1, bound);
        // Zero box head: initial boxes sit exactly on the reference points.
        let box_w = Tensor::zeros(&[dim, 4]);
        let mut cls_b = vec![0.0; num_classes + 1];
        // Start biased toward "no object", as most slots are unmatched.
        cls_b[num_classes] = 2.0;
        // Mid-sized boxes: sigmoid(-1.5) ≈ 0.18.
        let box_b = vec![0.0, 0.0, -1.5, -1.5];
        let reference = Tensor::zeros(&[num_queries, 4]);
        Ok(Self { num_classes, object_queries, attention, cls_w, cls_b, box_w, box_b, reference })
    }

    pub fn num_queries(&self) -> usize {
        self.object_queries.rows()
    }

    /// Points query `i` at patch `i mod T` of a `grid × grid` layout: the
    /// query starts at that patch's positional code times `scale` and its
    /// box is predicted relative to the patch centre.
    pub fn anchor_queries(&mut self, positions: &Tensor, grid: usize, scale: f64) {
        let t = positions.rows();
        let logit = |p: f64| (p / (1.0 - p)).ln();
        for i in 0..self.num_queries() {
            let k = i % t;
            let src = positions.row(k).to_vec();
            self.object_queries.row_mut(i).iter_mut().zip(src).for_each(|(q, p)| *q = scale * p);
            let (cy, cx) = (((k / grid) as f64 + 0.5) / grid as f64, ((k % grid) as f64 + 0.5) / grid as f64);
            self.reference.row_mut(i).copy_from_slice(&[logit(cx), logit(cy), 0.0, 0.0]);
        }
    }

    pub fn zero_grads(&self) -> DecoderGrads {
        DecoderGrads {
            object_queries: Tensor::zeros(self.object_queries.shape()),
            cls_w: Tensor::zeros(self.cls_w.shape()),
            cls_b: vec![0.0; self.cls_b.len()],
            box_w: Tensor::zeros(self.box_w.shape()),
            box_b: vec![0.0; 4],
        }
    }

    pub fn forward(
        &self,
        memory: &Tensor,
        prefix_k: &Tensor,
        prefix_v: &Tensor,
    ) -> Result<(Vec<Detection>, DecoderCache)> {
        let (attn_out, attention) = self.attention.prefix_forward(&self.object_queries, memory, prefix_k, prefix_v)?;
        let mut embeddings = self.object_queries.clone();
        embeddings.add_assign(&attn_out);

        let mut probs = embeddings.matmul(&self.cls_w)?;
        let mut boxes = embeddings.matmul(&self.box_w)?;
        let nq = embeddings.rows();
        for n in 0..nq {
            let row = probs.row_mut(n);
            row.iter_mut().zip(&self.cls_b).for_each(|(v, b)| *v += b);
            softmax_in_place(row);
            let brow = boxes.row_mut(n);
            let offsets = self.box_b.iter().zip(self.reference.row(n)).map(|(b, r)| b + r);
            brow.iter_mut().zip(offsets).for_each(|(v, b)| *v = sigmoid(*v + b));
        }
        let detections = (0..nq)
            .map(|n| {
                let b = boxes.row(n);
                Detection {
                    scores: probs.row(n).to_vec(),
                    bbox: BBox::new(b[0], b[1], b[2], b[3]),
                    feature: embeddings.row(n).to_vec(),
                }
            })
            .collect();
        Ok((detections, DecoderCache { attention, embeddings, probs, boxes }))
    }

    /// Backpropagates `dL/dlogits` (pre-softmax class scores) and `dL/dbox`
    /// (post-sigmoid box coordinates). Also returns the prefix gradient.
    pub fn backward(
        &self,
        cache: &DecoderCache,
        d_logits: &Tensor,
        d_boxes: &Tensor,
    ) -> Result<(DecoderGrads, AttentionGrads)> {
        let mut d_raw = d_boxes.clone();
        for (g, b) in d_raw.data_mut().iter_mut().zip(cache.boxes.data()) {
            *g *= b * (1.0 - b);
        }
        let e = &cache.embeddings;
        let cls_w = e.t_matmul(d_logits)?;
        let box_w = e.t_matmul(&d_raw)?;
        let cls_b = column_sums(d_logits);
        let box_b = column_sums(&d_raw);
        let mut d_e = d_logits.matmul_t(&self.cls_w)?;
        d_e.add_assign(&d_raw.matmul_t(&self.box_w)?);

        let attn = self.attention.backward(&cache.attention, &d_e)?;
        let mut object_queries = d_e;
        object_queries.add_assign(&attn.queries);
        Ok((DecoderGrads { object_queries, cls_w, cls_b, box_w, box_b }, attn))
    }
}

fn column_sums(t: &Tensor) -> Vec<f64> {
    let mut s = vec![0.0; t.cols()];
    for r in 0..t.rows() {
        s.iter_mut().zip(t.row(r)).for_each(|(a, b)| *a += b);
    }
    s
}
