//! Decoupled dual-pool prompting.
//!
//! A shared pool that stays trainable for the whole run, plus a private pool
//! that grows one slab per task. Only the newest slab is trainable; earlier
//! slabs are frozen the moment a new task arrives. Retrieval modulates the
//! image query by each entry's adapter, scores it against the entry's key by
//! cosine similarity and sums every prompt weighted by its raw score.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PdpError, Result};
use crate::numcore::{angle_between, dot, norm, Tensor};

/// `(prompts, keys, adapters)` for a block of pool entries. Prompts are
/// stored flattened: row `i` is the `L_p × D` prompt of entry `i`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptEntries {
    pub prompts: Tensor,
    pub keys: Tensor,
    pub adapters: Tensor,
}

impl PromptEntries {
    fn random(count: usize, prompt_len: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 0.5 / (dim as f64).sqrt();
        let mut draw = |rows: usize, cols: usize| {
            Tensor::from_fn(rows, cols, |_, _| rng.random_range(-bound..bound))
        };
        let prompts = draw(count, prompt_len * dim);
        let keys = draw(count, dim);
        let adapters = draw(count, dim);
        Self { prompts, keys, adapters }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            prompts: Tensor::zeros(self.prompts.shape()),
            keys: Tensor::zeros(self.keys.shape()),
            adapters: Tensor::zeros(self.adapters.shape()),
        }
    }

    pub fn len(&self) -> usize {
        self.keys.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn add_assign(&mut self, other: &PromptEntries) {
        self.prompts.add_assign(&other.prompts);
        self.keys.add_assign(&other.keys);
        self.adapters.add_assign(&other.adapters);
    }

    pub fn scale(&mut self, s: f64) {
        self.prompts.scale(s);
        self.keys.scale(s);
        self.adapters.scale(s);
    }

    pub fn sgd_step(&mut self, grad: &PromptEntries, lr: f64) {
        self.prompts.sgd_step(&grad.prompts, lr);
        self.keys.sgd_step(&grad.keys, lr);
        self.adapters.sgd_step(&grad.adapters, lr);
    }
}

fn check_prompt_len(prompt_len: usize) -> Result<()> {
    if prompt_len % 2 == 1 {
        return Err(PdpError::OddPromptLength(prompt_len));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedPool {
    pub prompt_len: usize,
    pub dim: usize,
    pub entries: PromptEntries,
}

impl SharedPool {
    pub fn new(size: usize, prompt_len: usize, dim: usize, seed: u64) -> Result<Self> {
        check_prompt_len(prompt_len)?;
        Ok(Self { prompt_len, dim, entries: PromptEntries::random(size, prompt_len, dim, seed) })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivateSlab {
    pub task_id: usize,
    pub trainable: bool,
    pub entries: PromptEntries,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrivatePool {
    pub prompt_len: usize,
    pub dim: usize,
    pub slabs: Vec<PrivateSlab>,
}

impl PrivatePool {
    pub fn new(prompt_len: usize, dim: usize) -> Result<Self> {
        check_prompt_len(prompt_len)?;
        Ok(Self { prompt_len, dim, slabs: Vec::new() })
    }

    /// Appends a trainable slab with one entry per new class and freezes
    /// every earlier slab.
    pub fn grow(&mut self, task_id: usize, num_new_classes: usize, init_seed: u64) -> Result<()> {
        if self.slabs.iter().any(|s| s.task_id == task_id) {
            return Err(PdpError::DuplicateTask(task_id));
        }
        for slab in &mut self.slabs {
            slab.trainable = false;
        }
        let entries = PromptEntries::random(num_new_classes, self.prompt_len, self.dim, init_seed);
        self.slabs.push(PrivateSlab { task_id, trainable: true, entries });
        Ok(())
    }

    /// Total number of private entries over all slabs.
    pub fn len(&self) -> usize {
        self.slabs.iter().map(|s| s.entries.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(task_id, first_entry, entry_count)` for every slab.
    pub fn boundaries(&self) -> Vec<(usize, usize, usize)> {
        let mut start = 0;
        self.slabs
            .iter()
            .map(|s| {
                let b = (s.task_id, start, s.entries.len());
                start += s.entries.len();
                b
            })
            .collect()
    }

    pub fn current(&self) -> Option<&PrivateSlab> {
        self.slabs.iter().find(|s| s.trainable)
    }
}

/// Consumed by [`grow`](PrivatePool::grow); kept as a free function for
/// callers that prefer value semantics.
pub fn grow_private(
    mut pool: PrivatePool,
    task_id: usize,
    num_new_classes: usize,
    init_seed: u64,
) -> Result<PrivatePool> {
    pool.grow(task_id, num_new_classes, init_seed)?;
    Ok(pool)
}

/// `L_p × D` prompt, `L_p` even.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTokens(Tensor);

impl PromptTokens {
    pub fn new(tokens: Tensor) -> Result<Self> {
        check_prompt_len(tokens.rows())?;
        Ok(Self(tokens))
    }

    pub fn zeros(prompt_len: usize, dim: usize) -> Result<Self> {
        Self::new(Tensor::zeros(&[prompt_len, dim]))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }
}

/// First half of the rows become the key prefix, second half the value prefix.
pub fn split_prefix(prompt: &PromptTokens) -> (Tensor, Tensor) {
    let half = prompt.len() / 2;
    let t = prompt.tensor();
    (t.slice_rows(0, half), t.slice_rows(half, t.rows()))
}

/// Result of a retrieval; keeps what the backward pass needs.
#[derive(Debug, Clone, PartialEq)]
pub struct Retrieval {
    pub prompt: PromptTokens,
    /// Shared entries first, then private entries slab by slab.
    pub weights: Vec<f64>,
}

fn entry_blocks<'a>(shared: &'a SharedPool, private: &'a PrivatePool) -> impl Iterator<Item = &'a PromptEntries> {
    std::iter::once(&shared.entries).chain(private.slabs.iter().map(|s| &s.entries))
}

fn modulated_cosine(query: &[f64], adapter: &[f64], key: &[f64]) -> Option<f64> {
    let mut md = 0.0;
    let mut mm = 0.0;
    for ((q, a), k) in query.iter().zip(adapter).zip(key) {
        let m = q * a;
        md += m * k;
        mm += m * m;
    }
    let (nm, nk) = (mm.sqrt(), norm(key));
    if nm == 0.0 || nk == 0.0 {
        None
    } else {
        Some((md / (nm * nk)).clamp(-1.0, 1.0))
    }
}

/// `wᵢ = cos(query ⊙ Aᵢ, Kᵢ)` over every shared and private entry and
/// `P_r = Σ wᵢ Pᵢ`.
pub fn retrieve(query: &[f64], shared: &SharedPool, private: &PrivatePool) -> Result<Retrieval> {
    let dim = shared.dim;
    if query.len() != dim || private.dim != dim {
        return Err(PdpError::Shape(format!(
            "query of length {} against pools of dim {dim}/{}",
            query.len(),
            private.dim
        )));
    }
    if shared.prompt_len != private.prompt_len {
        return Err(PdpError::Shape("shared and private prompt lengths differ".into()));
    }
    let flat = shared.prompt_len * dim;
    let mut acc = vec![0.0; flat];
    let mut weights = Vec::with_capacity(shared.len() + private.len());
    for block in entry_blocks(shared, private) {
        for i in 0..block.len() {
            let w = match modulated_cosine(query, block.adapters.row(i), block.keys.row(i)) {
                Some(w) => w,
                None => {
                    log::debug!("zero-norm modulated query or key; retrieval weight set to 0");
                    0.0
                }
            };
            weights.push(w);
            if w != 0.0 {
                for (a, p) in acc.iter_mut().zip(block.prompts.row(i)) {
                    *a += w * p;
                }
            }
        }
    }
    let prompt = PromptTokens::new(Tensor::matrix(shared.prompt_len, dim, acc)?)?;
    Ok(Retrieval { prompt, weights })
}

/// Gradients of a scalar objective through [`retrieve`].
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalGrads {
    pub shared: PromptEntries,
    /// One block per private slab, computed for frozen slabs too.
    pub private: Vec<PromptEntries>,
    pub query: Vec<f64>,
}

pub fn retrieve_backward(
    query: &[f64],
    shared: &SharedPool,
    private: &PrivatePool,
    retrieval: &Retrieval,
    d_prompt: &Tensor,
) -> RetrievalGrads {
    let dp = d_prompt.data();
    let mut d_query = vec![0.0; query.len()];
    let mut offset = 0;
    let mut blocks = Vec::with_capacity(private.slabs.len() + 1);
    for block in entry_blocks(shared, private) {
        let mut g = block.zeros_like();
        for i in 0..block.len() {
            let w = retrieval.weights[offset + i];
            let prompt = block.prompts.row(i);
            for (gp, d) in g.prompts.row_mut(i).iter_mut().zip(dp) {
                *gp = w * d;
            }
            let dw = dot(prompt, dp);
            let adapter = block.adapters.row(i);
            let key = block.keys.row(i);
            let m: Vec<f64> = query.iter().zip(adapter).map(|(q, a)| q * a).collect();
            let (nm, nk) = (norm(&m), norm(key));
            if nm == 0.0 || nk == 0.0 || dw == 0.0 {
                continue;
            }
            let inv = 1.0 / (nm * nk);
            let gk = g.keys.row_mut(i);
            for (c, gkc) in gk.iter_mut().enumerate() {
                *gkc = dw * (m[c] * inv - w * key[c] / (nk * nk));
            }
            let ga = g.adapters.row_mut(i);
            for c in 0..m.len() {
                let dm = dw * (key[c] * inv - w * m[c] / (nm * nm));
                ga[c] = dm * query[c];
                d_query[c] += dm * adapter[c];
            }
        }
        offset += block.len();
        blocks.push(g);
    }
    let shared_grad = blocks.remove(0);
    RetrievalGrads { shared: shared_grad, private: blocks, query: d_query }
}

/// Hinge on pairwise angles between flattened shared and private prompts.
#[derive(Debug, Clone, PartialEq)]
pub struct DdlOutput {
    pub loss: f64,
    pub shared_grad: Tensor,
    /// Per slab; gradients for frozen slabs are reported but never applied.
    pub private_grads: Vec<Tensor>,
    /// Pairs skipped because a prompt had zero norm.
    pub skipped_pairs: usize,
}

/// Derivative clip for `d arccos(u)/du = −1/√(1−u²)`.
const ARCCOS_CLIP: f64 = 1e-7;

/// `λ · 2/(N_s N_p) · Σᵢⱼ max(0, θ_min − θᵢⱼ)` with
/// `θᵢⱼ = arccos(P_s,i · P_p,j / (‖P_s,i‖‖P_p,j‖))`, angles in radians.
pub fn ddl_loss(shared: &SharedPool, private: &PrivatePool, min_angle: f64, weight: f64) -> DdlOutput {
    let ns = shared.len();
    let np = private.len();
    let mut shared_grad = Tensor::zeros(shared.entries.prompts.shape());
    let mut private_grads: Vec<Tensor> =
        private.slabs.iter().map(|s| Tensor::zeros(s.entries.prompts.shape())).collect();
    if ns == 0 || np == 0 {
        return DdlOutput { loss: 0.0, shared_grad, private_grads, skipped_pairs: 0 };
    }
    let scale = weight * 2.0 / (ns as f64 * np as f64);
    let shared_norms: Vec<f64> = (0..ns).map(|i| norm(shared.entries.prompts.row(i))).collect();
    let mut total = 0.0;
    let mut skipped = 0;

    for (slab, slab_grad) in private.slabs.iter().zip(private_grads.iter_mut()) {
        let prompts = &slab.entries.prompts;
        for j in 0..prompts.rows() {
            let pj = prompts.row(j);
            let nj = norm(pj);
            for (i, &ni) in shared_norms.iter().enumerate() {
                if ni == 0.0 || nj == 0.0 {
                    log::debug!("zero-norm prompt in angular hinge; pair ({i}, {j}) skipped");
                    skipped += 1;
                    continue;
                }
                let pi = shared.entries.prompts.row(i);
                let u = (dot(pi, pj) / (ni * nj)).clamp(-1.0, 1.0);
                // arccos is well conditioned away from ±1; near-parallel
                // pairs take the slower atan2 form.
                let theta = if u.abs() < 0.5 { u.acos() } else { angle_between(pi, pj).expect("norms checked above") };
                if theta >= min_angle {
                    continue;
                }
                total += min_angle - theta;
                // d/du of (θ_min − arccos u) is +1/√(1−u²).
                let uc = u.clamp(-1.0 + ARCCOS_CLIP, 1.0 - ARCCOS_CLIP);
                let coef = scale / (1.0 - uc * uc).sqrt();
                let gi = shared_grad.row_mut(i);
                for (c, g) in gi.iter_mut().enumerate() {
                    *g += coef * (pj[c] / (ni * nj) - u * pi[c] / (ni * ni));
                }
                let gj = slab_grad.row_mut(j);
                for (c, g) in gj.iter_mut().enumerate() {
                    *g += coef * (pi[c] / (ni * nj) - u * pj[c] / (nj * nj));
                }
            }
        }
    }
    DdlOutput { loss: scale * total, shared_grad, private_grads, skipped_pairs: skipped }
}
