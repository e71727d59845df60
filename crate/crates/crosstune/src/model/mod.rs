//! A from-scratch trainable classifier over tokenized prompts: token
//! embeddings, one single-head self-attention block with a residual
//! connection, mean pooling, and a linear head. Optional LoRA adapters
//! attach to the attention projections.
//!
//! Output head slots are bound to label-mapping entries, in label-space
//! order. Slot `i` answers "does the query match the definition currently
//! shown in entry `i`", and decodes to that entry's display name. Under a
//! permuted mapping the supervision slot of a gold label therefore moves
//! with its definition, which is exactly what makes per-batch permutation
//! training destroy query-to-label shortcuts.
//!
//! Everything is 64-bit and analytic gradients are checked against finite
//! differences; at this scale checkability outranks speed.

pub mod checkpoint;
pub mod math;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use train::{
    lr_at, read_loss_trace, train, write_loss_trace, OptimConfig, TraceRow, TrainBatch,
};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::labelmap::LabelMapping;
use crate::task::TaskSpec;
use math::{log_sum_exp, sigmoid, softmax_rows, softplus, Mat};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("model dimensions degenerate: {0}")]
    DegenerateDims(String),
    #[error("adapter invalid: {0}")]
    BadAdapter(String),
    #[error("token id {id} out of range for vocab of {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },
    #[error("cannot run the model on an empty token list")]
    EmptyInput,
    #[error("training target is empty")]
    EmptyTarget,
    #[error("target slot {slot} out of range for {n_classes} classes")]
    SlotOutOfRange { slot: usize, n_classes: usize },
    #[error("single-label loss got {got} target slots")]
    SingleLabelMultiTarget { got: usize },
    #[error("logit count {logits} does not match mapping with {classes} classes")]
    SlotCountMismatch { logits: usize, classes: usize },
    #[error("optimizer config invalid: {0}")]
    BadConfig(String),
    #[error("schedule step {step} out of range 0..={total}")]
    StepOutOfRange { step: usize, total: usize },
    #[error("training stream needs {needed} optimizer steps but total_steps is {total}")]
    TooManySteps { needed: usize, total: usize },
    #[error("non-finite loss {loss} at optimizer step {step}; aborting")]
    NonFiniteLoss { step: usize, loss: f64 },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: String, message: String },
    #[error("loss trace {path}: {message}")]
    TraceFile { path: String, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterTarget {
    Query,
    Key,
    Value,
    Output,
}

/// Low-rank delta on one attention projection: effective weight is
/// W + (alpha/rank)·B·A. B starts at zero so a fresh adapter is exactly a
/// no-op. Dropout, when enabled, applies to the adapter's input path only
/// and only during training.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub target: AdapterTarget,
    pub a: Mat,
    pub b: Mat,
    pub rank: usize,
    pub alpha: f64,
    pub dropout_p: f64,
}

impl LoraAdapter {
    pub fn init(
        target: AdapterTarget,
        rank: usize,
        alpha: f64,
        dropout_p: f64,
        d: usize,
        seed: u64,
    ) -> Result<Self, ModelError> {
        if rank == 0 {
            return Err(ModelError::BadAdapter("rank must be at least 1".into()));
        }
        if !(alpha.is_finite() && alpha > 0.0) {
            return Err(ModelError::BadAdapter(format!("alpha {alpha} not positive")));
        }
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(ModelError::BadAdapter(format!(
                "dropout_p {dropout_p} outside [0, 1)"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (d as f64).sqrt();
        Ok(LoraAdapter {
            target,
            a: Mat::from_fn(rank, d, |_, _| rng.random_range(-scale..scale)),
            b: Mat::zeros(d, rank),
            rank,
            alpha,
            dropout_p,
        })
    }

    fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// All base weights. Attention projections are stored output-row-major
/// (`y = W·x` for a column vector x); the head maps the pooled d-vector to
/// one logit per class slot.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub emb: Mat,
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub w_o: Mat,
    pub head_w: Mat,
    pub head_b: Mat,
}

impl ModelParams {
    pub fn vocab_size(&self) -> usize {
        self.emb.rows
    }

    pub fn d(&self) -> usize {
        self.emb.cols
    }

    pub fn n_classes(&self) -> usize {
        self.head_w.cols
    }

    pub fn is_finite(&self) -> bool {
        self.mats().iter().all(|m| m.is_finite())
    }

    pub(crate) fn mats(&self) -> [&Mat; 7] {
        [
            &self.emb, &self.w_q, &self.w_k, &self.w_v, &self.w_o, &self.head_w, &self.head_b,
        ]
    }

    pub(crate) fn mats_mut(&mut self) -> [&mut Mat; 7] {
        [
            &mut self.emb,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.head_w,
            &mut self.head_b,
        ]
    }

    fn zeros_like(&self) -> ModelParams {
        ModelParams {
            emb: Mat::zeros(self.emb.rows, self.emb.cols),
            w_q: Mat::zeros(self.w_q.rows, self.w_q.cols),
            w_k: Mat::zeros(self.w_k.rows, self.w_k.cols),
            w_v: Mat::zeros(self.w_v.rows, self.w_v.cols),
            w_o: Mat::zeros(self.w_o.rows, self.w_o.cols),
            head_w: Mat::zeros(self.head_w.rows, self.head_w.cols),
            head_b: Mat::zeros(self.head_b.rows, self.head_b.cols),
        }
    }
}

/// Seeded uniform init in (-1/√d, 1/√d); biases start at zero.
pub fn init_model(
    d: usize,
    vocab_size: usize,
    n_classes: usize,
    seed: u64,
) -> Result<ModelParams, ModelError> {
    if d < 2 {
        return Err(ModelError::DegenerateDims(format!("d = {d}, need >= 2")));
    }
    if n_classes < 2 {
        return Err(ModelError::DegenerateDims(format!(
            "n_classes = {n_classes}, need >= 2"
        )));
    }
    if vocab_size == 0 {
        return Err(ModelError::DegenerateDims("empty vocabulary".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scale = 1.0 / (d as f64).sqrt();
    let mut mat = |rows: usize, cols: usize| {
        Mat::from_fn(rows, cols, |_, _| rng.random_range(-scale..scale))
    };
    Ok(ModelParams {
        emb: mat(vocab_size, d),
        w_q: mat(d, d),
        w_k: mat(d, d),
        w_v: mat(d, d),
        w_o: mat(d, d),
        head_w: mat(d, n_classes),
        head_b: Mat::zeros(1, n_classes),
    })
}

/// Which parameters receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainScope {
    /// Base weights and any attached adapters.
    Full,
    /// Adapters only; base weights stay frozen (gradient exactly zero).
    AdaptersOnly,
}

/// Per-adapter inverted-dropout masks for one forward/backward pass.
/// `None` means the adapter path sees its input unmodified (eval mode, or
/// dropout_p = 0).
#[derive(Debug, Clone)]
pub struct DropoutMasks(Vec<Option<Mat>>);

impl DropoutMasks {
    pub fn eval(n_adapters: usize) -> Self {
        DropoutMasks(vec![None; n_adapters])
    }

    /// Entries are 0 with probability dropout_p, else 1/(1-p), so eval-mode
    /// activations need no rescaling.
    pub fn sample<R: Rng>(adapters: &[LoraAdapter], t_len: usize, rng: &mut R) -> Self {
        DropoutMasks(
            adapters
                .iter()
                .map(|ad| {
                    if ad.dropout_p == 0.0 {
                        return None;
                    }
                    let keep = 1.0 / (1.0 - ad.dropout_p);
                    Some(Mat::from_fn(t_len, ad.a.cols, |_, _| {
                        if rng.random::<f64>() < ad.dropout_p {
                            0.0
                        } else {
                            keep
                        }
                    }))
                })
                .collect(),
        )
    }

    #[cfg(test)]
    pub(crate) fn fixed(masks: Vec<Option<Mat>>) -> Self {
        DropoutMasks(masks)
    }
}

struct ForwardCache {
    x: Mat,
    /// Adapter inputs after dropout, aligned with the adapter list; `Some`
    /// exactly for adapters whose target projection ran.
    dropped: Vec<Option<Mat>>,
    q: Mat,
    k: Mat,
    v: Mat,
    p: Mat,
    c: Mat,
    pooled: Vec<f64>,
}

/// Y = U·Wᵀ plus each matching adapter's scaled low-rank path on its
/// (possibly dropped) input.
fn project(
    u: &Mat,
    w: &Mat,
    adapters: &[LoraAdapter],
    masks: &DropoutMasks,
    target: AdapterTarget,
    dropped: &mut [Option<Mat>],
) -> Mat {
    let mut y = u.matmul_bt(w);
    for (i, adapter) in adapters.iter().enumerate() {
        if adapter.target != target {
            continue;
        }
        let u_drop = match &masks.0[i] {
            Some(mask) => u.hadamard(mask),
            None => u.clone(),
        };
        let z = u_drop.matmul_bt(&adapter.a);
        y.add_assign_scaled(&z.matmul_bt(&adapter.b), adapter.scaling());
        dropped[i] = Some(u_drop);
    }
    y
}

fn forward_cached(
    params: &ModelParams,
    adapters: &[LoraAdapter],
    tokens: &[u32],
    masks: &DropoutMasks,
) -> Result<(Vec<f64>, ForwardCache), ModelError> {
    if tokens.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    let (t_len, d) = (tokens.len(), params.d());
    let mut x = Mat::zeros(t_len, d);
    for (t, &id) in tokens.iter().enumerate() {
        if id as usize >= params.vocab_size() {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab_size: params.vocab_size(),
            });
        }
        x.row_mut(t).copy_from_slice(params.emb.row(id as usize));
    }

    let mut dropped: Vec<Option<Mat>> = vec![None; adapters.len()];
    let q = project(&x, &params.w_q, adapters, masks, AdapterTarget::Query, &mut dropped);
    let k = project(&x, &params.w_k, adapters, masks, AdapterTarget::Key, &mut dropped);
    let v = project(&x, &params.w_v, adapters, masks, AdapterTarget::Value, &mut dropped);

    let mut p = q.matmul_bt(&k);
    p.scale(1.0 / (d as f64).sqrt());
    softmax_rows(&mut p);
    let c = p.matmul(&v);
    let o = project(&c, &params.w_o, adapters, masks, AdapterTarget::Output, &mut dropped);

    // Residual add, then mean over positions.
    let mut pooled = vec![0.0; d];
    for t in 0..t_len {
        for j in 0..d {
            pooled[j] += x.get(t, j) + o.get(t, j);
        }
    }
    for value in &mut pooled {
        *value /= t_len as f64;
    }

    let n = params.n_classes();
    let mut logits = vec![0.0; n];
    for (j, logit) in logits.iter_mut().enumerate() {
        let mut acc = params.head_b.get(0, j);
        for (i, p_i) in pooled.iter().enumerate() {
            acc += p_i * params.head_w.get(i, j);
        }
        *logit = acc;
    }

    Ok((
        logits,
        ForwardCache {
            x,
            dropped,
            q,
            k,
            v,
            p,
            c,
            pooled,
        },
    ))
}

/// Eval-mode forward pass: dropout off, deterministic.
pub fn forward(
    params: &ModelParams,
    adapters: &[LoraAdapter],
    tokens: &[u32],
) -> Result<Vec<f64>, ModelError> {
    forward_cached(params, adapters, tokens, &DropoutMasks::eval(adapters.len()))
        .map(|(logits, _)| logits)
}

fn check_slots(target_slots: &[usize], n: usize, multi_label: bool) -> Result<(), ModelError> {
    if target_slots.is_empty() {
        return Err(ModelError::EmptyTarget);
    }
    if !multi_label && target_slots.len() != 1 {
        return Err(ModelError::SingleLabelMultiTarget {
            got: target_slots.len(),
        });
    }
    for &slot in target_slots {
        if slot >= n {
            return Err(ModelError::SlotOutOfRange { slot, n_classes: n });
        }
    }
    Ok(())
}

/// Single-label: softmax cross-entropy against the one target slot.
/// Multi-label: per-slot sigmoid binary cross-entropy, averaged over all
/// slots.
pub fn loss(logits: &[f64], target_slots: &[usize], multi_label: bool) -> Result<f64, ModelError> {
    check_slots(target_slots, logits.len(), multi_label)?;
    if multi_label {
        let mut total = 0.0;
        for (j, &z) in logits.iter().enumerate() {
            let t = if target_slots.contains(&j) { 1.0 } else { 0.0 };
            total += softplus(z) - t * z;
        }
        Ok(total / logits.len() as f64)
    } else {
        Ok(log_sum_exp(logits) - logits[target_slots[0]])
    }
}

/// dL/dlogits for [`loss`], scaled by `scale`.
fn loss_grad(
    logits: &[f64],
    target_slots: &[usize],
    multi_label: bool,
    scale: f64,
) -> Vec<f64> {
    let n = logits.len();
    if multi_label {
        logits
            .iter()
            .enumerate()
            .map(|(j, &z)| {
                let t = if target_slots.contains(&j) { 1.0 } else { 0.0 };
                scale * (sigmoid(z) - t) / n as f64
            })
            .collect()
    } else {
        let lse = log_sum_exp(logits);
        logits
            .iter()
            .enumerate()
            .map(|(j, &z)| {
                let softmax_j = (z - lse).exp();
                let t = if j == target_slots[0] { 1.0 } else { 0.0 };
                scale * (softmax_j - t)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrads {
    pub a: Mat,
    pub b: Mat,
}

/// Gradient tensors, shaped exactly like the parameters they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub model: ModelParams,
    pub adapters: Vec<AdapterGrads>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams, adapters: &[LoraAdapter]) -> Self {
        Gradients {
            model: params.zeros_like(),
            adapters: adapters
                .iter()
                .map(|ad| AdapterGrads {
                    a: Mat::zeros(ad.a.rows, ad.a.cols),
                    b: Mat::zeros(ad.b.rows, ad.b.cols),
                })
                .collect(),
        }
    }

    pub(crate) fn mats(&self) -> Vec<&Mat> {
        let mut mats: Vec<&Mat> = self.model.mats().to_vec();
        for g in &self.adapters {
            mats.push(&g.a);
            mats.push(&g.b);
        }
        mats
    }

    pub(crate) fn mats_mut(&mut self) -> Vec<&mut Mat> {
        let mut mats: Vec<&mut Mat> = self.model.mats_mut().into_iter().collect();
        for g in &mut self.adapters {
            mats.push(&mut g.a);
            mats.push(&mut g.b);
        }
        mats
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.mats_mut().into_iter().zip(other.mats()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for m in self.mats_mut() {
            m.scale(s);
        }
    }

    /// L2 norm over every gradient entry, the quantity global-norm clipping
    /// bounds.
    pub fn global_norm(&self) -> f64 {
        self.mats()
            .iter()
            .flat_map(|m| m.values().iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.mats().iter().all(|m| m.is_finite())
    }
}

/// dU for Y = U·Wᵀ + adapter paths; accumulates dW and adapter grads.
#[allow(clippy::too_many_arguments)]
fn backward_project(
    d_y: &Mat,
    u: &Mat,
    w: &Mat,
    adapters: &[LoraAdapter],
    dropped: &[Option<Mat>],
    masks: &DropoutMasks,
    target: AdapterTarget,
    d_w: &mut Mat,
    adapter_grads: &mut [AdapterGrads],
) -> Mat {
    d_w.add_assign(&d_y.at_mul(u));
    let mut d_u = d_y.matmul(w);
    for (i, adapter) in adapters.iter().enumerate() {
        if adapter.target != target {
            continue;
        }
        let s = adapter.scaling();
        let u_drop = dropped[i].as_ref().expect("dropped input cached in forward");
        // dB = s·dYᵀ·(U_drop·Aᵀ); dA = s·(dY·B)ᵀ·U_drop.
        let z = u_drop.matmul_bt(&adapter.a);
        adapter_grads[i].b.add_assign_scaled(&d_y.at_mul(&z), s);
        let g1 = d_y.matmul(&adapter.b);
        adapter_grads[i].a.add_assign_scaled(&g1.at_mul(u_drop), s);
        // Input gradient through the adapter path, gated by the mask.
        let mut d_u_drop = g1.matmul(&adapter.a);
        d_u_drop.scale(s);
        match &masks.0[i] {
            Some(mask) => d_u.add_assign(&d_u_drop.hadamard(mask)),
            None => d_u.add_assign(&d_u_drop),
        }
    }
    d_u
}

/// Loss and analytic gradients for one example, with dL/dlogits scaled by
/// `scale` (accumulation weighting; gradients are linear in it).
#[allow(clippy::too_many_arguments)]
pub(crate) fn grad_scaled(
    params: &ModelParams,
    adapters: &[LoraAdapter],
    tokens: &[u32],
    target_slots: &[usize],
    multi_label: bool,
    masks: &DropoutMasks,
    scope: TrainScope,
    scale: f64,
) -> Result<(f64, Gradients), ModelError> {
    let (logits, cache) = forward_cached(params, adapters, tokens, masks)?;
    let loss_value = loss(&logits, target_slots, multi_label)?;
    let dz = loss_grad(&logits, target_slots, multi_label, scale);

    let (t_len, d, n) = (tokens.len(), params.d(), params.n_classes());
    let mut grads = Gradients::zeros_like(params, adapters);

    // Head: logits_j = pooled·head_w[:,j] + head_b_j.
    let mut d_pooled = vec![0.0; d];
    for j in 0..n {
        grads.model.head_b.set(0, j, dz[j]);
        for i in 0..d {
            grads.model.head_w.set(i, j, cache.pooled[i] * dz[j]);
            d_pooled[i] += params.head_w.get(i, j) * dz[j];
        }
    }

    // Mean pool: every position row gets d_pooled / T; residual splits it
    // into the X path and the attention-output path.
    let d_h_row: Vec<f64> = d_pooled.iter().map(|v| v / t_len as f64).collect();
    let d_o = Mat::from_fn(t_len, d, |_, j| d_h_row[j]);
    let mut d_x = d_o.clone();

    // O = project(C, W_O).
    let d_c = backward_project(
        &d_o,
        &cache.c,
        &params.w_o,
        adapters,
        &cache.dropped,
        masks,
        AdapterTarget::Output,
        &mut grads.model.w_o,
        &mut grads.adapters,
    );

    // C = P·V.
    let d_p = d_c.matmul_bt(&cache.v);
    let d_v = cache.p.at_mul(&d_c);

    // Row softmax: dS_tj = P_tj·(dP_tj − Σ_k dP_tk·P_tk).
    let mut d_s = Mat::zeros(t_len, t_len);
    for t in 0..t_len {
        let dot: f64 = (0..t_len).map(|k| d_p.get(t, k) * cache.p.get(t, k)).sum();
        for j in 0..t_len {
            d_s.set(t, j, cache.p.get(t, j) * (d_p.get(t, j) - dot));
        }
    }

    // S = Q·Kᵀ/√d.
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();
    let mut d_q = d_s.matmul(&cache.k);
    d_q.scale(inv_sqrt_d);
    let mut d_k = d_s.at_mul(&cache.q);
    d_k.scale(inv_sqrt_d);

    for (d_y, w, target, d_w) in [
        (&d_q, &params.w_q, AdapterTarget::Query, &mut grads.model.w_q),
        (&d_k, &params.w_k, AdapterTarget::Key, &mut grads.model.w_k),
        (&d_v, &params.w_v, AdapterTarget::Value, &mut grads.model.w_v),
    ] {
        let d_in = backward_project(
            d_y,
            &cache.x,
            w,
            adapters,
            &cache.dropped,
            masks,
            target,
            d_w,
            &mut grads.adapters,
        );
        d_x.add_assign(&d_in);
    }

    // Embedding rows accumulate over repeated tokens.
    for (t, &id) in tokens.iter().enumerate() {
        let row = grads.model.emb.row_mut(id as usize);
        for (acc, dx) in row.iter_mut().zip(d_x.row(t)) {
            *acc += dx;
        }
    }

    if scope == TrainScope::AdaptersOnly {
        for m in grads.model.mats_mut() {
            m.scale(0.0);
        }
    }
    Ok((loss_value, grads))
}

/// Analytic gradients for one example under `scope`. Frozen tensors come
/// back exactly zero.
pub fn grad(
    params: &ModelParams,
    adapters: &[LoraAdapter],
    tokens: &[u32],
    target_slots: &[usize],
    multi_label: bool,
    masks: &DropoutMasks,
    scope: TrainScope,
) -> Result<(f64, Gradients), ModelError> {
    grad_scaled(params, adapters, tokens, target_slots, multi_label, masks, scope, 1.0)
}

/// Decodes logits to the label string the harness scores. Single-label:
/// the argmax slot's display name (lowest slot wins ties). Multi-label:
/// comma-joined display names of slots with sigmoid > 0.5, in slot order;
/// empty string when none clear the threshold.
pub fn decode_logits(
    logits: &[f64],
    multi_label: bool,
    mapping: &LabelMapping,
) -> Result<String, ModelError> {
    if logits.len() != mapping.n_classes() {
        return Err(ModelError::SlotCountMismatch {
            logits: logits.len(),
            classes: mapping.n_classes(),
        });
    }
    if multi_label {
        let names: Vec<&str> = logits
            .iter()
            .zip(&mapping.entries)
            .filter(|(&z, _)| sigmoid(z) > 0.5)
            .map(|(_, e)| e.display_name.as_str())
            .collect();
        Ok(names.join(", "))
    } else {
        let mut best = 0;
        for (j, &z) in logits.iter().enumerate() {
            if z > logits[best] {
                best = j;
            }
        }
        Ok(mapping.entries[best].display_name.clone())
    }
}

/// Eval-mode forward plus decoding.
pub fn predict(
    params: &ModelParams,
    adapters: &[LoraAdapter],
    tokens: &[u32],
    task: &TaskSpec,
    mapping: &LabelMapping,
) -> Result<String, ModelError> {
    let logits = forward(params, adapters, tokens)?;
    decode_logits(&logits, task.multi_label, mapping)
}
