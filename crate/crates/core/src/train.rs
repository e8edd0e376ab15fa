//! Seeded desk-scale training: synthetic tasks, a small tanh MLP or a stack
//! of single-head attention blocks, AdamW with warmup + cosine decay, and the
//! sparsity / learning-rate sweep.
//!
//! A run first warm-starts a fully trainable model on a related task (class
//! means rotated away from the target's), freezes it, wraps every weight
//! matrix in the configured adapter and then trains only the adapter
//! parameters on the target task. The classifier head stays frozen.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{
    count_params, save_frod_checkpoint, Adapter, AdapterError, FrodLayer, LowRankLayer, ParamGroup,
    Scheme, VeraLayer, VeraShared,
};
use crate::analysis::{in_rotation_band, split_update, tan_alpha_proxy};
use crate::decomp::{hjd_decompose, AggregationMode, CategoryStack, WeightStack};
use crate::linalg::Matrix;
use crate::rng::{derive_seed, SplitMix64};
use crate::tensorio::{write_container, NamedTensor, TensorContainer, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("non-finite gradient")]
    NonFiniteGradient,
    #[error("step {step} is outside 0..={total}")]
    StepOutOfRange { step: usize, total: usize },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Decomp(#[from] crate::decomp::DecompError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Configuration

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    Blobs,
    TinyAttention,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub classes: usize,
    pub input_dim: usize,
    pub samples: usize,
    /// Tokens per sequence (tiny-attention only).
    pub seq_len: usize,
    /// How far the warm-start task's class means are pushed away from the
    /// target task's (0 = same means).
    pub shift: f64,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            kind: TaskKind::Blobs,
            classes: 8,
            input_dim: 32,
            samples: 4096,
            seq_len: 8,
            shift: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSpec {
    /// Layers per category.
    pub layers: usize,
    pub m: usize,
    pub n: usize,
    /// Empty means the task default: `["mlp"]` or `["q","k","v","o"]`.
    pub categories: Vec<String>,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            layers: 4,
            m: 32,
            n: 32,
            categories: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchemeSpec {
    pub name: Scheme,
    /// Sparse density for the FRoD family.
    pub s: f64,
    /// Rank for lora / pissa / vera.
    pub r: usize,
    pub lr_sigma: f64,
    #[serde(rename = "lr_S")]
    pub lr_s: f64,
    pub lr_other: f64,
    /// Ridge parameter and aggregation mode of the decomposition.
    pub pi: f64,
    pub mode: AggregationMode,
}

impl Default for SchemeSpec {
    fn default() -> Self {
        Self {
            name: Scheme::Frod,
            s: 0.02,
            r: 4,
            lr_sigma: 1e-3,
            lr_s: 1e-4,
            lr_other: 1e-3,
            pi: crate::decomp::DEFAULT_PI,
            mode: AggregationMode::Blockwise,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Cosine,
    Constant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSpec {
    pub epochs: usize,
    pub batch: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub schedule: Schedule,
}

impl Default for OptimSpec {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch: 64,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.0,
            warmup_frac: 0.1,
            schedule: Schedule::Cosine,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WarmStartSpec {
    pub epochs: usize,
    pub lr: f64,
}

impl Default for WarmStartSpec {
    fn default() -> Self {
        Self {
            epochs: 5,
            lr: 1e-2,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub task: TaskSpec,
    pub model: ModelSpec,
    pub scheme: SchemeSpec,
    pub optim: OptimSpec,
    pub warm_start: WarmStartSpec,
    /// Where reports and checkpoints go (CLI runs); `None` keeps
    /// everything in memory.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
}

fn bad(msg: impl Into<String>) -> TrainError {
    TrainError::Config(msg.into())
}

impl TrainConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn categories(&self) -> Vec<String> {
        if !self.model.categories.is_empty() {
            return self.model.categories.clone();
        }
        match self.task.kind {
            TaskKind::Blobs => vec!["mlp".into()],
            TaskKind::TinyAttention => ["q", "k", "v", "o"].map(String::from).to_vec(),
        }
    }

    /// Total number of adapted matrices.
    pub fn total_layers(&self) -> usize {
        self.model.layers * self.categories().len()
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.task;
        let m = &self.model;
        let s = &self.scheme;
        let o = &self.optim;
        if t.classes < 2 {
            return Err(bad("task.classes must be at least 2"));
        }
        if t.samples < t.classes {
            return Err(bad("task.samples must be at least task.classes"));
        }
        if t.samples < 5 {
            return Err(bad("task.samples must leave a nonempty eval split"));
        }
        if t.input_dim == 0 || m.layers == 0 || m.m == 0 || m.n == 0 {
            return Err(bad("dimensions must be positive"));
        }
        if t.kind == TaskKind::TinyAttention && t.seq_len == 0 {
            return Err(bad("task.seq_len must be positive"));
        }
        if !(t.shift >= 0.0 && t.shift.is_finite()) {
            return Err(bad("task.shift must be finite and nonnegative"));
        }
        if m.m != m.n || t.input_dim != m.n {
            return Err(bad(format!(
                "layers chain through a residual width: need m == n == input_dim, got m={}, n={}, input_dim={}",
                m.m, m.n, t.input_dim
            )));
        }
        let cats = self.categories();
        let expected = match t.kind {
            TaskKind::Blobs => 1,
            TaskKind::TinyAttention => 4,
        };
        if cats.len() != expected {
            return Err(bad(format!(
                "{:?} uses {expected} categories, got {}",
                t.kind,
                cats.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for c in &cats {
            if c.is_empty() || c.contains('/') || !seen.insert(c) {
                return Err(bad(format!("invalid or duplicate category label {c:?}")));
            }
        }
        for (name, lr) in [
            ("lr_sigma", s.lr_sigma),
            ("lr_S", s.lr_s),
            ("lr_other", s.lr_other),
            ("warm_start.lr", self.warm_start.lr),
        ] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return Err(bad(format!("{name} must be finite and nonnegative")));
            }
        }
        if !(0.0..=1.0).contains(&s.s) {
            return Err(bad("scheme.s must lie in [0, 1]"));
        }
        if matches!(s.name, Scheme::Lora | Scheme::Pissa) && (s.r == 0 || s.r > m.m.min(m.n)) {
            return Err(bad(format!("scheme.r must lie in 1..={}", m.m.min(m.n))));
        }
        if s.name == Scheme::Vera && s.r == 0 {
            return Err(bad("scheme.r must be positive for vera"));
        }
        if s.name.is_frod_family() && m.n < 2 {
            return Err(bad("FRoD schemes need n >= 2"));
        }
        if !(s.pi > 0.0 && s.pi.is_finite()) {
            return Err(bad("scheme.pi must be positive"));
        }
        if s.name.is_frod_family() && m.layers * m.m < m.n {
            return Err(bad("layers * m must be at least n for the decomposition"));
        }
        if o.epochs == 0 || o.batch == 0 {
            return Err(bad("optim.epochs and optim.batch must be positive"));
        }
        if !(0.0..1.0).contains(&o.warmup_frac) {
            return Err(bad("optim.warmup_frac must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(bad("betas must lie in [0, 1)"));
        }
        if !(o.adam_eps > 0.0) || !(o.weight_decay >= 0.0) {
            return Err(bad(
                "adam_eps must be positive and weight_decay nonnegative",
            ));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Tasks

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    /// One sample per row (`seq_len · input_dim` wide for sequences).
    pub x: Matrix,
    pub y: Vec<usize>,
}

impl Split {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    fn subset(&self, idx: &[usize]) -> Split {
        Split {
            x: Matrix::from_fn(idx.len(), self.x.cols(), |r, c| self.x[(idx[r], c)]),
            y: idx.iter().map(|&i| self.y[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub kind: TaskKind,
    pub classes: usize,
    pub input_dim: usize,
    pub seq_len: usize,
    pub train: Split,
    pub eval: Split,
}

const CLASS_RADIUS: f64 = 3.0;

fn random_unit(rng: &mut SplitMix64, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        let nrm = crate::linalg::norm2(&v);
        if nrm > 1e-12 {
            return v.iter().map(|x| x / nrm).collect();
        }
    }
}

fn class_means(spec: &TaskSpec, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = SplitMix64::new(derive_seed(seed, 1));
    (0..spec.classes)
        .map(|_| {
            random_unit(&mut rng, spec.input_dim)
                .into_iter()
                .map(|x| CLASS_RADIUS * x)
                .collect()
        })
        .collect()
}

/// Builds a dataset around the given class means; `sample_seed` drives
/// noise, positions and the train/eval shuffle.
fn sample_task(spec: &TaskSpec, means: &[Vec<f64>], sample_seed: u64) -> Task {
    let d = spec.input_dim;
    let t = match spec.kind {
        TaskKind::Blobs => 1,
        TaskKind::TinyAttention => spec.seq_len,
    };
    let mut rng = SplitMix64::new(sample_seed);
    let mut x = Matrix::zeros(spec.samples, t * d);
    let mut y = Vec::with_capacity(spec.samples);
    for i in 0..spec.samples {
        let label = i % spec.classes;
        let row = x.row_mut(i);
        for v in row.iter_mut() {
            *v = rng.normal();
        }
        let pos = if t > 1 {
            rng.below(t as u64) as usize
        } else {
            0
        };
        for (k, mu) in means[label].iter().enumerate() {
            row[pos * d + k] += mu;
        }
        y.push(label);
    }
    let mut order: Vec<usize> = (0..spec.samples).collect();
    rng.shuffle(&mut order);
    let n_train = (spec.samples * 4) / 5;
    let all = Split { x, y };
    Task {
        kind: spec.kind,
        classes: spec.classes,
        input_dim: d,
        seq_len: t,
        train: all.subset(&order[..n_train]),
        eval: all.subset(&order[n_train..]),
    }
}

fn check_task_spec(spec: &TaskSpec) -> Result<()> {
    if spec.classes < 2 || spec.samples < spec.classes || spec.input_dim == 0 {
        return Err(bad(format!(
            "task needs classes >= 2, samples >= classes and input_dim > 0 (got {}, {}, {})",
            spec.classes, spec.samples, spec.input_dim
        )));
    }
    if spec.samples < 5 {
        return Err(bad("task.samples must leave a nonempty eval split"));
    }
    Ok(())
}

/// Target task: class means at radius 3 in random directions, unit noise,
/// deterministic 80/20 split. Loss is softmax cross-entropy.
pub fn make_task(spec: &TaskSpec, seed: u64) -> Result<Task> {
    check_task_spec(spec)?;
    Ok(sample_task(
        spec,
        &class_means(spec, seed),
        derive_seed(seed, 2),
    ))
}

/// Related task for warm starts: each class mean is moved by `shift`
/// (relative to the radius) in a random direction and renormalized, and the
/// samples use an independent noise stream.
pub fn make_related_task(spec: &TaskSpec, seed: u64) -> Result<Task> {
    check_task_spec(spec)?;
    let mut rng = SplitMix64::new(derive_seed(seed, 3));
    let means: Vec<Vec<f64>> = class_means(spec, seed)
        .into_iter()
        .map(|mu| {
            let g = random_unit(&mut rng, spec.input_dim);
            let moved: Vec<f64> = mu
                .iter()
                .zip(&g)
                .map(|(m, g)| m / CLASS_RADIUS + spec.shift * g)
                .collect();
            let nrm = crate::linalg::norm2(&moved).max(1e-12);
            moved.iter().map(|v| CLASS_RADIUS * v / nrm).collect()
        })
        .collect();
    Ok(sample_task(spec, &means, derive_seed(seed, 4)))
}

// ---------------------------------------------------------------------------
// Schedule and optimizer

/// Linear warmup over `ceil(warmup_frac·T)` steps, then half-cosine decay
/// to zero at `T`.
pub fn cosine_lr(step: usize, total_steps: usize, warmup_frac: f64, base_lr: f64) -> Result<f64> {
    if step > total_steps {
        return Err(TrainError::StepOutOfRange {
            step,
            total: total_steps,
        });
    }
    let warm = (warmup_frac * total_steps as f64).ceil() as usize;
    if step < warm {
        return Ok(base_lr * step as f64 / warm as f64);
    }
    if total_steps == warm {
        return Ok(base_lr);
    }
    let progress = (step - warm) as f64 / (total_steps - warm) as f64;
    Ok(0.5 * base_lr * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Linear warmup, then constant.
pub fn constant_lr(step: usize, total_steps: usize, warmup_frac: f64, base_lr: f64) -> Result<f64> {
    if step > total_steps {
        return Err(TrainError::StepOutOfRange {
            step,
            total: total_steps,
        });
    }
    let warm = (warmup_frac * total_steps as f64).ceil() as usize;
    Ok(if step < warm {
        base_lr * step as f64 / warm as f64
    } else {
        base_lr
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl From<&OptimSpec> for AdamHyper {
    fn from(o: &OptimSpec) -> Self {
        Self {
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.adam_eps,
            weight_decay: o.weight_decay,
        }
    }
}

/// One AdamW step with bias correction and decoupled weight decay:
/// `θ ← θ − lr·(m̂ / (√v̂ + eps) + wd·θ)`.
pub fn adamw_step(
    state: &mut AdamState,
    params: &mut [f64],
    grads: &[f64],
    lr: f64,
    hyper: AdamHyper,
) -> Result<()> {
    if params.len() != state.len() || grads.len() != state.len() {
        return Err(bad(format!(
            "AdamW length mismatch: {} params, {} grads, {} state",
            params.len(),
            grads.len(),
            state.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient);
    }
    state.step += 1;
    let AdamHyper {
        beta1,
        beta2,
        eps,
        weight_decay,
    } = hyper;
    let c1 = 1.0 - beta1.powi(state.step as i32);
    let c2 = 1.0 - beta2.powi(state.step as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = beta1 * state.m[i] + (1.0 - beta1) * g;
        state.v[i] = beta2 * state.v[i] + (1.0 - beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        params[i] -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * params[i]);
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Models

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub kind: TaskKind,
    pub categories: Vec<String>,
    pub layers_per_category: usize,
    /// Category-major: category `c`, layer `l` is `adapters[c·L + l]`.
    pub adapters: Vec<Adapter>,
    /// `classes × width`, frozen during adaptation.
    pub head: Matrix,
}

/// Mean loss, number of correct predictions, and (optionally) gradients.
struct Pass {
    loss: f64,
    correct: usize,
    d_weights: Vec<Matrix>,
    d_head: Matrix,
}

/// Softmax cross-entropy for one row of logits: returns loss, whether the
/// argmax is right, and `softmax − onehot`.
fn softmax_xent(logits: &[f64], label: usize) -> (f64, bool, Vec<f64>) {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = z.ln() + max - logits[label];
    let argmax = logits
        .iter()
        .enumerate()
        .fold(0, |best, (i, &v)| if v > logits[best] { i } else { best });
    let mut d: Vec<f64> = exps.iter().map(|e| e / z).collect();
    d[label] -= 1.0;
    (loss, argmax == label, d)
}

fn mlp_pass(weights: &[Matrix], head: &Matrix, x: &Matrix, y: &[usize], grad: bool) -> Pass {
    let b = x.rows();
    // acts[l] is the input to layer l; acts[L] feeds the head.
    let mut acts = vec![x.clone()];
    for w in weights {
        let a = acts.last().unwrap().matmul(&w.transpose());
        acts.push(a.map(f64::tanh));
    }
    let logits = acts.last().unwrap().matmul(&head.transpose());
    let mut loss = 0.0;
    let mut correct = 0;
    let mut d_logits = Matrix::zeros(b, head.rows());
    for (i, &label) in y.iter().enumerate().take(b) {
        let (l, ok, d) = softmax_xent(logits.row(i), label);
        loss += l;
        correct += ok as usize;
        if grad {
            d_logits
                .row_mut(i)
                .iter_mut()
                .zip(d)
                .for_each(|(o, v)| *o = v / b as f64);
        }
    }
    let mut pass = Pass {
        loss: loss / b as f64,
        correct,
        d_weights: Vec::new(),
        d_head: Matrix::zeros(0, 0),
    };
    if !grad {
        return pass;
    }
    pass.d_head = d_logits.t_matmul(acts.last().unwrap());
    let mut d_h = d_logits.matmul(head);
    let mut d_weights = vec![Matrix::zeros(0, 0); weights.len()];
    for l in (0..weights.len()).rev() {
        let h = &acts[l + 1];
        let d_a = Matrix::from_fn(b, h.cols(), |r, c| {
            d_h[(r, c)] * (1.0 - h[(r, c)] * h[(r, c)])
        });
        d_weights[l] = d_a.t_matmul(&acts[l]);
        d_h = d_a.matmul(&weights[l]);
    }
    pass.d_weights = d_weights;
    pass
}

/// Residual single-head attention blocks, mean pooling, linear head.
/// `weights` is category-major over (q, k, v, o).
fn attention_pass(
    weights: &[Matrix],
    layers: usize,
    head: &Matrix,
    x: &Matrix,
    y: &[usize],
    seq_len: usize,
    grad: bool,
) -> Pass {
    let b = x.rows();
    let d = head.cols();
    let scale = 1.0 / (d as f64).sqrt();
    let w = |cat: usize, l: usize| &weights[cat * layers + l];
    let wt: Vec<Matrix> = weights.iter().map(Matrix::transpose).collect();
    let wtr = |cat: usize, l: usize| &wt[cat * layers + l];

    let mut loss = 0.0;
    let mut correct = 0;
    let mut d_weights = vec![Matrix::zeros(d, d); weights.len()];
    let mut d_head = Matrix::zeros(head.rows(), d);

    struct Cache {
        x: Matrix,
        q: Matrix,
        k: Matrix,
        v: Matrix,
        p: Matrix,
        ctx: Matrix,
    }

    for (i, &label) in y.iter().enumerate().take(b) {
        let mut xs = Matrix::from_vec(seq_len, d, x.row(i).to_vec()).expect("row width");
        let mut caches = Vec::with_capacity(layers);
        for l in 0..layers {
            let q = xs.matmul(wtr(0, l));
            let k = xs.matmul(wtr(1, l));
            let v = xs.matmul(wtr(2, l));
            let mut p = q.matmul(&k.transpose()).scale(scale);
            for r in 0..seq_len {
                let row = p.row_mut(r);
                let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                row.iter_mut().for_each(|v| *v = (*v - max).exp());
                let z: f64 = row.iter().sum();
                row.iter_mut().for_each(|v| *v /= z);
            }
            let ctx = p.matmul(&v);
            let out = ctx.matmul(wtr(3, l));
            let next = xs.add(&out);
            caches.push(Cache {
                x: xs,
                q,
                k,
                v,
                p,
                ctx,
            });
            xs = next;
        }
        let pooled: Vec<f64> = (0..d)
            .map(|c| (0..seq_len).map(|r| xs[(r, c)]).sum::<f64>() / seq_len as f64)
            .collect();
        let logits = head.matvec(&pooled);
        let (l, ok, dl) = softmax_xent(&logits, label);
        loss += l;
        correct += ok as usize;
        if !grad {
            continue;
        }
        let dl: Vec<f64> = dl.iter().map(|v| v / b as f64).collect();
        for (r, &g) in dl.iter().enumerate() {
            for c in 0..d {
                d_head[(r, c)] += g * pooled[c];
            }
        }
        let d_pooled = head.t_matvec(&dl);
        let mut dx = Matrix::from_fn(seq_len, d, |_, c| d_pooled[c] / seq_len as f64);
        for l in (0..layers).rev() {
            let cch = &caches[l];
            // out = ctx Woᵀ
            d_weights[3 * layers + l] = d_weights[3 * layers + l].add(&dx.t_matmul(&cch.ctx));
            let d_ctx = dx.matmul(w(3, l));
            // ctx = P V
            let d_p = d_ctx.matmul(&cch.v.transpose());
            let d_v = cch.p.t_matmul(&d_ctx);
            // row-wise softmax
            let mut d_s = Matrix::zeros(seq_len, seq_len);
            for r in 0..seq_len {
                let dot: f64 = (0..seq_len).map(|c| d_p[(r, c)] * cch.p[(r, c)]).sum();
                for c in 0..seq_len {
                    d_s[(r, c)] = cch.p[(r, c)] * (d_p[(r, c)] - dot) * scale;
                }
            }
            let d_q = d_s.matmul(&cch.k);
            let d_k = d_s.t_matmul(&cch.q);
            d_weights[l] = d_weights[l].add(&d_q.t_matmul(&cch.x));
            d_weights[layers + l] = d_weights[layers + l].add(&d_k.t_matmul(&cch.x));
            d_weights[2 * layers + l] = d_weights[2 * layers + l].add(&d_v.t_matmul(&cch.x));
            dx = dx
                .add(&d_q.matmul(w(0, l)))
                .add(&d_k.matmul(w(1, l)))
                .add(&d_v.matmul(w(2, l)));
        }
    }
    Pass {
        loss: loss / b as f64,
        correct,
        d_weights: if grad { d_weights } else { Vec::new() },
        d_head,
    }
}

impl Model {
    /// Fresh fully trainable model with `N(0, 1/n)` weights and head.
    pub fn random(cfg: &TrainConfig, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let n = cfg.model.n;
        let std = 1.0 / (n as f64).sqrt();
        let adapters = (0..cfg.total_layers())
            .map(|_| Adapter::Full(Matrix::from_fn(cfg.model.m, n, |_, _| std * rng.normal())))
            .collect();
        let head = Matrix::from_fn(cfg.task.classes, cfg.model.m, |_, _| std * rng.normal());
        Self {
            kind: cfg.task.kind,
            categories: cfg.categories(),
            layers_per_category: cfg.model.layers,
            adapters,
            head,
        }
    }

    pub fn merged_weights(&self) -> Vec<Matrix> {
        self.adapters.iter().map(Adapter::merge_weights).collect()
    }

    fn pass(
        &self,
        weights: &[Matrix],
        split_x: &Matrix,
        y: &[usize],
        seq_len: usize,
        grad: bool,
    ) -> Pass {
        match self.kind {
            TaskKind::Blobs => mlp_pass(weights, &self.head, split_x, y, grad),
            TaskKind::TinyAttention => attention_pass(
                weights,
                self.layers_per_category,
                &self.head,
                split_x,
                y,
                seq_len,
                grad,
            ),
        }
    }

    /// Mean loss and accuracy over a whole split.
    pub fn evaluate(&self, split: &Split, seq_len: usize) -> (f64, f64) {
        let p = self.pass(&self.merged_weights(), &split.x, &split.y, seq_len, false);
        (p.loss, p.correct as f64 / split.len() as f64)
    }

    /// The weights as a stack, one category per label.
    pub fn weight_stack(&self) -> WeightStack {
        let merged = self.merged_weights();
        WeightStack {
            categories: self
                .categories
                .iter()
                .enumerate()
                .map(|(c, label)| CategoryStack {
                    label: label.clone(),
                    layers: merged
                        [c * self.layers_per_category..(c + 1) * self.layers_per_category]
                        .to_vec(),
                })
                .collect(),
        }
    }

    pub fn flat_params(&self) -> Vec<f64> {
        self.adapters
            .iter()
            .flat_map(Adapter::flat_params)
            .collect()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        let total: usize = self.adapters.iter().map(Adapter::trainable_count).sum();
        if flat.len() != total {
            return Err(bad(format!(
                "{} parameters given, model has {total}",
                flat.len()
            )));
        }
        let mut off = 0;
        for a in &mut self.adapters {
            let k = a.trainable_count();
            a.set_flat_params(&flat[off..off + k])?;
            off += k;
        }
        Ok(())
    }

    /// Sizes of the trainable tensors, in [`Model::flat_params`] order.
    pub fn param_block_sizes(&self) -> Vec<usize> {
        self.adapters
            .iter()
            .flat_map(|a| a.params().into_iter().map(|p| p.len()).collect::<Vec<_>>())
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.adapters.iter().map(Adapter::trainable_count).sum()
    }

    /// Largest relative gap between the factored forward and the merged
    /// matrix on fixed probe vectors.
    pub fn merge_residual(&self) -> f64 {
        let mut worst = 0.0f64;
        let mut rng = SplitMix64::new(0x9e37);
        for a in &self.adapters {
            let merged = a.merge_weights();
            for _ in 0..3 {
                let x: Vec<f64> = (0..merged.cols()).map(|_| rng.normal()).collect();
                let direct = merged.matvec(&x);
                let Ok(fwd) = a.forward(&x) else {
                    return f64::INFINITY;
                };
                let diff: f64 = fwd
                    .iter()
                    .zip(&direct)
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum::<f64>()
                    .sqrt();
                let scale = crate::linalg::norm2(&direct).max(f64::MIN_POSITIVE);
                worst = worst.max(diff / scale);
            }
        }
        worst
    }
}

// ---------------------------------------------------------------------------
// Runs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub eval_loss: f64,
    pub eval_acc: f64,
    /// Learning rates at the epoch's last step (0 for epoch 0).
    pub lr_sigma: f64,
    #[serde(rename = "lr_S")]
    pub lr_s: f64,
    pub lr_other: f64,
    pub merge_residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepLr {
    pub sigma: f64,
    #[serde(rename = "S")]
    pub sparse: f64,
    pub other: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarmStartStats {
    pub epochs: usize,
    pub train_loss: f64,
    pub target_eval_loss: f64,
    pub target_eval_acc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationStats {
    /// Mean measured rotation angle over FRoD layers.
    pub alpha_mean: f64,
    pub alpha_max: f64,
    /// Predicted `tan α` from learning rates (absent when lr_sigma is 0).
    pub tan_alpha_proxy: Option<f64>,
    pub tan_alpha_measured: f64,
    pub proxy_in_band: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub scheme: Scheme,
    pub seed: u64,
    pub trainable: usize,
    pub optimizer_states: usize,
    pub steps_per_epoch: usize,
    pub warm_start: WarmStartStats,
    pub epochs: Vec<EpochStats>,
    pub step_lrs: Vec<StepLr>,
    pub diverged: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rotation: Option<RotationStats>,
    /// Flat trainable parameters after each epoch (index 0 = before training).
    #[serde(skip)]
    pub checkpoints: Vec<Vec<f64>>,
    #[serde(skip)]
    pub wall_time: Duration,
}

impl TrainReport {
    pub fn final_epoch(&self) -> &EpochStats {
        self.epochs.last().expect("epoch 0 is always recorded")
    }

    /// Eval accuracy after epoch `k`, if the run got that far.
    pub fn eval_acc_at(&self, k: usize) -> Option<f64> {
        self.epochs
            .iter()
            .find(|e| e.epoch == k)
            .map(|e| e.eval_acc)
    }

    pub fn write_epoch_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "loss", "acc", "lr_sigma", "lr_S"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.train_acc.to_string(),
                e.lr_sigma.to_string(),
                e.lr_s.to_string(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Everything a run produces, including the adapted model for later probing.
pub struct TrainOutcome {
    pub report: TrainReport,
    pub model: Model,
    pub task: Task,
}

struct Optimizer {
    /// `(adapter index, tensor index, group, state)`.
    slots: Vec<(usize, usize, ParamGroup, AdamState)>,
    head: Option<AdamState>,
    hyper: AdamHyper,
}

impl Optimizer {
    fn new(model: &Model, hyper: AdamHyper, train_head: bool) -> Self {
        let mut slots = Vec::new();
        for (ai, a) in model.adapters.iter().enumerate() {
            for (ti, (g, p)) in a.groups().into_iter().zip(a.params()).enumerate() {
                slots.push((ai, ti, g, AdamState::new(p.len())));
            }
        }
        Self {
            slots,
            head: train_head.then(|| AdamState::new(model.head.as_slice().len())),
            hyper,
        }
    }

    fn trainable(&self) -> usize {
        self.slots.iter().map(|s| s.3.len()).sum()
    }

    fn step(&mut self, model: &mut Model, pass: &Pass, lr: StepLr) -> Result<()> {
        let grads: Vec<Vec<Vec<f64>>> = model
            .adapters
            .iter()
            .zip(&pass.d_weights)
            .map(|(a, dw)| a.pullback(dw))
            .collect();
        for (ai, ti, g, state) in &mut self.slots {
            let rate = match g {
                ParamGroup::Sigma => lr.sigma,
                ParamGroup::Sparse => lr.sparse,
                ParamGroup::Other => lr.other,
            };
            let mut params = model.adapters[*ai].params_mut();
            adamw_step(state, params[*ti], &grads[*ai][*ti], rate, self.hyper)?;
        }
        if let Some(state) = &mut self.head {
            adamw_step(
                state,
                model.head.as_mut_slice(),
                pass.d_head.as_slice(),
                lr.other,
                self.hyper,
            )?;
        }
        Ok(())
    }
}

fn schedule_lr(cfg: &OptimSpec, step: usize, total: usize, base: f64) -> f64 {
    let f = match cfg.schedule {
        Schedule::Cosine => cosine_lr,
        Schedule::Constant => constant_lr,
    };
    f(step, total, cfg.warmup_frac, base).expect("step within range")
}

struct LoopResult {
    epochs: Vec<EpochStats>,
    step_lrs: Vec<StepLr>,
    checkpoints: Vec<Vec<f64>>,
    diverged: bool,
}

/// Runs `epochs` epochs of minibatch AdamW over `task.train`.
fn train_loop(
    model: &mut Model,
    task: &Task,
    optim: &OptimSpec,
    epochs: usize,
    base: StepLr,
    train_head: bool,
    seed: u64,
) -> Result<LoopResult> {
    let mut opt = Optimizer::new(model, optim.into(), train_head);
    let n = task.train.len();
    let steps_per_epoch = n.div_ceil(optim.batch);
    let total = steps_per_epoch * epochs;
    let seq = task.seq_len;

    let record = |model: &Model, epoch: usize, lr: StepLr| {
        let (train_loss, train_acc) = model.evaluate(&task.train, seq);
        let (eval_loss, eval_acc) = model.evaluate(&task.eval, seq);
        EpochStats {
            epoch,
            train_loss,
            train_acc,
            eval_loss,
            eval_acc,
            lr_sigma: lr.sigma,
            lr_s: lr.sparse,
            lr_other: lr.other,
            merge_residual: model.merge_residual(),
        }
    };
    let zero = StepLr {
        sigma: 0.0,
        sparse: 0.0,
        other: 0.0,
    };
    let mut out = LoopResult {
        epochs: vec![record(model, 0, zero)],
        step_lrs: Vec::with_capacity(total),
        checkpoints: vec![model.flat_params()],
        diverged: false,
    };
    let mut step = 0;
    for epoch in 1..=epochs {
        let mut order: Vec<usize> = (0..n).collect();
        SplitMix64::new(derive_seed(seed, epoch as u64)).shuffle(&mut order);
        let mut last = zero;
        for chunk in order.chunks(optim.batch) {
            let lr = StepLr {
                sigma: schedule_lr(optim, step, total, base.sigma),
                sparse: schedule_lr(optim, step, total, base.sparse),
                other: schedule_lr(optim, step, total, base.other),
            };
            let batch = task.train.subset(chunk);
            let pass = model.pass(&model.merged_weights(), &batch.x, &batch.y, seq, true);
            out.step_lrs.push(lr);
            last = lr;
            step += 1;
            if !pass.loss.is_finite() {
                warn!("loss became non-finite at step {step}; halting");
                out.diverged = true;
                return Ok(out);
            }
            match opt.step(model, &pass, lr) {
                Ok(()) => {}
                Err(TrainError::NonFiniteGradient) => {
                    warn!("non-finite gradient at step {step}; halting");
                    out.diverged = true;
                    return Ok(out);
                }
                Err(e) => return Err(e),
            }
        }
        let stats = record(model, epoch, last);
        if !stats.train_loss.is_finite() {
            out.diverged = true;
        }
        out.epochs.push(stats);
        out.checkpoints.push(model.flat_params());
        if out.diverged {
            break;
        }
    }
    debug_assert!(out.diverged || opt.trainable() == model.trainable_count());
    Ok(out)
}

/// Warm-started model before any adapter is attached.
pub fn warm_start(cfg: &TrainConfig) -> Result<(Model, WarmStartStats, Task)> {
    let related = make_related_task(&cfg.task, cfg.seed)?;
    let target = make_task(&cfg.task, cfg.seed)?;
    let mut model = Model::random(cfg, derive_seed(cfg.seed, 5));
    let lr = StepLr {
        sigma: 0.0,
        sparse: 0.0,
        other: cfg.warm_start.lr,
    };
    let res = if cfg.warm_start.epochs > 0 {
        let r = train_loop(
            &mut model,
            &related,
            &cfg.optim,
            cfg.warm_start.epochs,
            lr,
            true,
            derive_seed(cfg.seed, 6),
        )?;
        if r.diverged {
            return Err(bad("warm start diverged; lower warm_start.lr"));
        }
        r.epochs.last().unwrap().train_loss
    } else {
        model.evaluate(&related.train, related.seq_len).0
    };
    let (target_eval_loss, target_eval_acc) = model.evaluate(&target.eval, target.seq_len);
    Ok((
        model,
        WarmStartStats {
            epochs: cfg.warm_start.epochs,
            train_loss: res,
            target_eval_loss,
            target_eval_acc,
        },
        target,
    ))
}

/// Wraps every weight of a warm-started model in the configured adapter.
pub fn attach_adapters(pretrained: &Model, cfg: &TrainConfig) -> Result<Model> {
    let spec = &cfg.scheme;
    let weights = pretrained.merged_weights();
    let (m, n) = (cfg.model.m, cfg.model.n);
    let adapters: Vec<Adapter> = match spec.name {
        Scheme::Full => weights.into_iter().map(Adapter::Full).collect(),
        Scheme::Lora => weights
            .into_iter()
            .enumerate()
            .map(|(i, w)| {
                Ok(Adapter::LowRank(LowRankLayer::lora(
                    w,
                    spec.r,
                    derive_seed(cfg.seed, 200 + i as u64),
                )?))
            })
            .collect::<Result<_>>()?,
        Scheme::Pissa => weights
            .iter()
            .map(|w| Ok(Adapter::LowRank(LowRankLayer::pissa(w, spec.r)?)))
            .collect::<Result<_>>()?,
        Scheme::Vera => {
            let shared = Arc::new(VeraShared::new(m, n, spec.r, derive_seed(cfg.seed, 300)));
            weights
                .into_iter()
                .map(|w| Ok(Adapter::Vera(VeraLayer::new(w, shared.clone())?)))
                .collect::<Result<_>>()?
        }
        Scheme::Frod | Scheme::SigmaOnly | Scheme::SOnly => {
            let dec = hjd_decompose(&pretrained.weight_stack(), spec.pi, spec.mode)?;
            let density = if spec.name == Scheme::SigmaOnly {
                0.0
            } else {
                spec.s
            };
            let mut out = Vec::new();
            for c in 0..dec.categories.len() {
                for l in 0..cfg.model.layers {
                    let idx = (c * cfg.model.layers + l) as u64;
                    let mut layer = FrodLayer::from_decomposition(
                        &dec,
                        c,
                        l,
                        density,
                        derive_seed(cfg.seed, 100 + idx),
                    )?;
                    layer.train_sigma = spec.name != Scheme::SOnly;
                    out.push(Adapter::Frod(layer));
                }
            }
            out
        }
    };
    Ok(Model {
        adapters,
        ..pretrained.clone()
    })
}

fn rotation_stats(model: &Model, cfg: &TrainConfig) -> Option<RotationStats> {
    let alphas: Vec<(f64, f64, f64)> = model
        .adapters
        .iter()
        .filter_map(|a| match a {
            Adapter::Frod(l) => {
                let s = split_update(l);
                Some((s.alpha, s.frob_on, s.frob_off))
            }
            _ => None,
        })
        .collect();
    if alphas.is_empty() {
        return None;
    }
    let on: f64 = alphas.iter().map(|a| a.1 * a.1).sum::<f64>().sqrt();
    let off: f64 = alphas.iter().map(|a| a.2 * a.2).sum::<f64>().sqrt();
    let proxy = tan_alpha_proxy(
        cfg.scheme.s,
        cfg.scheme.lr_s,
        cfg.scheme.lr_sigma,
        cfg.model.n,
    )
    .ok();
    Some(RotationStats {
        alpha_mean: alphas.iter().map(|a| a.0).sum::<f64>() / alphas.len() as f64,
        alpha_max: alphas.iter().fold(0.0, |m, a| m.max(a.0)),
        tan_alpha_proxy: proxy,
        tan_alpha_measured: if on > 0.0 { off / on } else { 0.0 },
        proxy_in_band: proxy.is_some_and(in_rotation_band),
    })
}

pub fn train_run_full(cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let (pretrained, warm, task) = warm_start(cfg)?;
    let mut model = attach_adapters(&pretrained, cfg)?;
    let base = StepLr {
        sigma: cfg.scheme.lr_sigma,
        sparse: cfg.scheme.lr_s,
        other: cfg.scheme.lr_other,
    };
    let res = train_loop(
        &mut model,
        &task,
        &cfg.optim,
        cfg.optim.epochs,
        base,
        false,
        derive_seed(cfg.seed, 7),
    )?;
    let trainable = model.trainable_count();
    let report = TrainReport {
        scheme: cfg.scheme.name,
        seed: cfg.seed,
        trainable,
        optimizer_states: 2 * trainable,
        steps_per_epoch: task.train.len().div_ceil(cfg.optim.batch),
        warm_start: warm,
        epochs: res.epochs,
        step_lrs: res.step_lrs,
        diverged: res.diverged,
        rotation: rotation_stats(&model, cfg),
        checkpoints: res.checkpoints,
        wall_time: start.elapsed(),
    };
    info!(
        "{} seed {}: final train loss {:.6}, eval acc {:.4}",
        cfg.scheme.name,
        cfg.seed,
        report.final_epoch().train_loss,
        report.final_epoch().eval_acc
    );
    Ok(TrainOutcome {
        report,
        model,
        task,
    })
}

pub fn train_run(cfg: &TrainConfig) -> Result<TrainReport> {
    Ok(train_run_full(cfg)?.report)
}

/// Expected trainable count for a config (closed form).
pub fn expected_trainable(cfg: &TrainConfig) -> Result<usize> {
    Ok(count_params(
        cfg.scheme.name,
        cfg.model.m,
        cfg.model.n,
        cfg.total_layers(),
        cfg.scheme.r,
        cfg.scheme.s,
    )?
    .trainable)
}

/// Writes `report.json`, `epochs.csv`, per-epoch checkpoints and, for FRoD
/// schemes, the final adapter checkpoint with its side file.
pub fn write_run_outputs(dir: &Path, outcome: &TrainOutcome) -> Result<Vec<PathBuf>> {
    let ckpt = dir.join("ckpt");
    fs::create_dir_all(&ckpt).map_err(io_err(&ckpt))?;
    let mut written = Vec::new();

    let report_path = dir.join("report.json");
    let mut json = serde_json::to_vec_pretty(&outcome.report)?;
    json.push(b'\n');
    fs::write(&report_path, json).map_err(io_err(&report_path))?;
    written.push(report_path);

    let csv_path = dir.join("epochs.csv");
    let file = fs::File::create(&csv_path).map_err(io_err(&csv_path))?;
    outcome.report.write_epoch_csv(file)?;
    written.push(csv_path);

    let sizes = outcome.model.param_block_sizes();
    for (k, flat) in outcome.report.checkpoints.iter().enumerate() {
        let mut c = TensorContainer::new();
        let mut off = 0;
        for (j, &len) in sizes.iter().enumerate() {
            if len > 0 {
                c.push(NamedTensor::vector(
                    format!("param/{j}"),
                    &flat[off..off + len],
                )?)?;
            }
            off += len;
        }
        let path = ckpt.join(format!("epoch{k}.frodtnsr"));
        write_container(&path, &c)?;
        written.push(path);
    }

    let frod: Vec<(String, &FrodLayer)> = outcome
        .model
        .adapters
        .iter()
        .enumerate()
        .filter_map(|(i, a)| match a {
            Adapter::Frod(l) => {
                let lpc = outcome.model.layers_per_category;
                Some((
                    format!("{}-{}", outcome.model.categories[i / lpc], i % lpc),
                    l,
                ))
            }
            _ => None,
        })
        .collect();
    if !frod.is_empty() {
        let (c, side) = save_frod_checkpoint(&frod)?;
        let path = dir.join("adapter.frodtnsr");
        write_container(&path, &c)?;
        written.push(path);
        let side_path = dir.join("adapter.json");
        let mut json = serde_json::to_vec_pretty(&side)?;
        json.push(b'\n');
        fs::write(&side_path, json).map_err(io_err(&side_path))?;
        written.push(side_path);
    }
    Ok(written)
}

// ---------------------------------------------------------------------------
// Sweeps

/// Epochs whose eval accuracy the sweep reports.
pub const ACC_EPOCHS: [usize; 3] = [1, 4, 10];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    pub s: Vec<f64>,
    #[serde(rename = "lr_S")]
    pub lr_s: Vec<f64>,
    pub lr_sigma: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub base: TrainConfig,
    pub grid: SweepGrid,
    pub seeds: Vec<u64>,
}

impl SweepConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| bad(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if g.s.is_empty() || g.lr_s.is_empty() || g.lr_sigma.is_empty() || self.seeds.is_empty() {
            return Err(bad("sweep grid axes and seeds must be nonempty"));
        }
        if !self.base.scheme.name.is_frod_family() {
            return Err(bad(
                "sweeps vary FRoD hyperparameters; base scheme must be frod",
            ));
        }
        for &a in &g.lr_s {
            for &b in &g.lr_sigma {
                if a == 0.0 && b == 0.0 {
                    return Err(bad(
                        "grid contains lr_S = 0 with lr_sigma = 0: nothing would train",
                    ));
                }
            }
        }
        for cfg in self.configs() {
            cfg.validate()?;
        }
        Ok(())
    }

    /// Grid points in row order: s outermost, then lr_S, lr_sigma, seed.
    pub fn configs(&self) -> Vec<TrainConfig> {
        let mut out = Vec::new();
        for &s in &self.grid.s {
            for &lr_s in &self.grid.lr_s {
                for &lr_sigma in &self.grid.lr_sigma {
                    for &seed in &self.seeds {
                        let mut c = self.base.clone();
                        c.seed = seed;
                        c.scheme.s = s;
                        c.scheme.lr_s = lr_s;
                        c.scheme.lr_sigma = lr_sigma;
                        c.out_dir = None;
                        out.push(c);
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub kind: String,
    pub s: f64,
    #[serde(rename = "lr_S")]
    pub lr_s: f64,
    pub lr_sigma: f64,
    pub seed: Option<u64>,
    pub acc_e1: Option<f64>,
    pub acc_e4: Option<f64>,
    pub acc_e10: Option<f64>,
    pub final_loss: f64,
    pub tan_alpha: Option<f64>,
    pub in_band: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub medians: Vec<SweepRow>,
    pub diverged_runs: usize,
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let k = xs.len();
    if k % 2 == 1 {
        xs[k / 2]
    } else {
        0.5 * (xs[k / 2 - 1] + xs[k / 2])
    }
}

fn median_opt(xs: Vec<Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = xs.into_iter().collect();
    v.filter(|v| !v.is_empty()).map(median)
}

pub fn ablation_sweep(cfg: &SweepConfig) -> Result<SweepResult> {
    cfg.validate()?;
    let configs = cfg.configs();
    let reports = configs
        .par_iter()
        .map(train_run)
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<SweepRow> = configs
        .iter()
        .zip(&reports)
        .map(|(c, r)| {
            let tan = tan_alpha_proxy(c.scheme.s, c.scheme.lr_s, c.scheme.lr_sigma, c.model.n).ok();
            SweepRow {
                kind: "run".into(),
                s: c.scheme.s,
                lr_s: c.scheme.lr_s,
                lr_sigma: c.scheme.lr_sigma,
                seed: Some(c.seed),
                acc_e1: r.eval_acc_at(ACC_EPOCHS[0]),
                acc_e4: r.eval_acc_at(ACC_EPOCHS[1]),
                acc_e10: r.eval_acc_at(ACC_EPOCHS[2]),
                final_loss: r.final_epoch().train_loss,
                tan_alpha: tan,
                in_band: tan.is_some_and(in_rotation_band),
            }
        })
        .collect();
    let per = cfg.seeds.len();
    let medians = rows
        .chunks(per)
        .map(|group| {
            let first = &group[0];
            SweepRow {
                kind: "median".into(),
                seed: None,
                acc_e1: median_opt(group.iter().map(|r| r.acc_e1).collect()),
                acc_e4: median_opt(group.iter().map(|r| r.acc_e4).collect()),
                acc_e10: median_opt(group.iter().map(|r| r.acc_e10).collect()),
                final_loss: median(group.iter().map(|r| r.final_loss).collect()),
                ..first.clone()
            }
        })
        .collect();
    Ok(SweepResult {
        rows,
        medians,
        diverged_runs: reports.iter().filter(|r| r.diverged).count(),
    })
}

impl SweepResult {
    /// Run rows followed by the median block, one header.
    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in self.rows.iter().chain(&self.medians) {
            w.serialize(r)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(cosine_lr(0, 100, 0.1, 1e-3).unwrap(), 0.0);
        assert_eq!(cosine_lr(10, 100, 0.1, 1e-3).unwrap(), 1e-3);
        assert!((cosine_lr(5, 100, 0.1, 1e-3).unwrap() - 5e-4).abs() < 1e-18);
        assert!(cosine_lr(100, 100, 0.1, 1e-3).unwrap().abs() < 1e-12);
        assert!((cosine_lr(55, 100, 0.1, 1.0).unwrap() - 0.5).abs() < 1e-12);
        assert!(cosine_lr(101, 100, 0.1, 1e-3).is_err());
        // ceil(0.1 · 15) = 2 warmup steps.
        assert_eq!(cosine_lr(2, 15, 0.1, 1.0).unwrap(), 1.0);
        assert_eq!(cosine_lr(0, 10, 0.0, 2.0).unwrap(), 2.0);
    }

    fn hyper(wd: f64) -> AdamHyper {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: wd,
        }
    }

    #[test]
    fn adamw_examples() {
        let mut st = AdamState::new(1);
        let mut p = [0.0];
        adamw_step(&mut st, &mut p, &[1.0], 0.1, hyper(0.0)).unwrap();
        assert!((p[0] + 0.1).abs() < 1e-8, "{}", p[0]);
        assert_eq!(st.step, 1);

        let mut st = AdamState::new(3);
        let mut p = [1.0, -2.0, 0.5];
        adamw_step(&mut st, &mut p, &[0.0; 3], 0.1, hyper(0.0)).unwrap();
        assert_eq!(p, [1.0, -2.0, 0.5]);

        let mut st = AdamState::new(2);
        let mut p = [1.0, -2.0];
        adamw_step(&mut st, &mut p, &[0.0; 2], 0.1, hyper(0.5)).unwrap();
        assert_eq!(p, [1.0 * (1.0 - 0.05), -2.0 * (1.0 - 0.05)]);

        assert!(matches!(
            adamw_step(&mut st, &mut p, &[f64::NAN, 0.0], 0.1, hyper(0.0)),
            Err(TrainError::NonFiniteGradient)
        ));
    }

    #[test]
    fn task_determinism_and_errors() {
        let spec = TaskSpec {
            samples: 100,
            ..TaskSpec::default()
        };
        assert_eq!(make_task(&spec, 3).unwrap(), make_task(&spec, 3).unwrap());
        let t = make_task(&spec, 3).unwrap();
        assert_eq!((t.train.len(), t.eval.len()), (80, 20));
        let bad_spec = TaskSpec {
            classes: 8,
            samples: 5,
            ..TaskSpec::default()
        };
        assert!(make_task(&bad_spec, 1).is_err());
    }

    fn tiny_config(kind: TaskKind) -> TrainConfig {
        let mut c = TrainConfig::default();
        c.task.kind = kind;
        c.task.samples = 120;
        c.task.classes = 3;
        c.task.input_dim = 6;
        c.task.seq_len = 3;
        c.model.m = 6;
        c.model.n = 6;
        c.model.layers = 2;
        c.optim.epochs = 2;
        c.optim.batch = 16;
        c.warm_start.epochs = 1;
        c.scheme.s = 0.2;
        c.scheme.r = 2;
        c
    }

    /// Finite-difference check of the batched weight gradients.
    fn check_pass_gradients(kind: TaskKind) {
        let cfg = tiny_config(kind);
        let model = Model::random(&cfg, 11);
        let task = make_task(&cfg.task, 2).unwrap();
        let batch = task.train.subset(&(0..8).collect::<Vec<_>>());
        let weights = model.merged_weights();
        let pass = model.pass(&weights, &batch.x, &batch.y, task.seq_len, true);
        let h = 1e-6;
        for (l, w) in weights.iter().enumerate() {
            for idx in [0, 7, w.as_slice().len() - 1] {
                let mut plus = weights.clone();
                plus[l].as_mut_slice()[idx] += h;
                let mut minus = weights.clone();
                minus[l].as_mut_slice()[idx] -= h;
                let fp = model
                    .pass(&plus, &batch.x, &batch.y, task.seq_len, false)
                    .loss;
                let fm = model
                    .pass(&minus, &batch.x, &batch.y, task.seq_len, false)
                    .loss;
                let fd = (fp - fm) / (2.0 * h);
                let an = pass.d_weights[l].as_slice()[idx];
                assert!(
                    (fd - an).abs() <= 1e-6 * (1.0 + an.abs()),
                    "layer {l} idx {idx}: {fd} vs {an}"
                );
            }
        }
    }

    #[test]
    fn mlp_gradients_match_fd() {
        check_pass_gradients(TaskKind::Blobs);
    }

    #[test]
    fn attention_gradients_match_fd() {
        check_pass_gradients(TaskKind::TinyAttention);
    }

    #[test]
    fn small_runs_are_deterministic_and_count_params() {
        for kind in [TaskKind::Blobs, TaskKind::TinyAttention] {
            for scheme in Scheme::ALL {
                let mut cfg = tiny_config(kind);
                cfg.scheme.name = scheme;
                let a = train_run(&cfg).unwrap();
                let b = train_run(&cfg).unwrap();
                assert_eq!(
                    serde_json::to_string(&a).unwrap(),
                    serde_json::to_string(&b).unwrap()
                );
                assert_eq!(a.trainable, expected_trainable(&cfg).unwrap(), "{scheme}");
                assert!(a.epochs.iter().all(|e| e.merge_residual <= 1e-10));
                assert_eq!(a.epochs.len(), 3);
                assert_eq!(a.checkpoints.len(), 3);
            }
        }
    }

    #[test]
    fn zero_lr_group_is_untouched() {
        let mut cfg = tiny_config(TaskKind::Blobs);
        cfg.scheme.lr_s = 0.0;
        let out = train_run_full(&cfg).unwrap();
        for a in &out.model.adapters {
            let Adapter::Frod(l) = a else { panic!() };
            assert!(l.s.values.iter().all(|&v| v.to_bits() == 0));
            assert!(l.s.nnz() > 0);
        }
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::default();
        c.optim.warmup_frac = 1.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.scheme.lr_s = -1.0;
        assert!(c.validate().is_err());
        assert!(TrainConfig::from_json(r#"{"bogus": 1}"#).is_err());
        let c = TrainConfig::from_json(r#"{"seed": 4, "scheme": {"name": "s-only"}}"#).unwrap();
        assert_eq!(c.scheme.name, Scheme::SOnly);
        assert_eq!(c.optim.batch, 64);
    }

    #[test]
    fn sweep_rejects_dead_grid() {
        let sc = SweepConfig {
            base: tiny_config(TaskKind::Blobs),
            grid: SweepGrid {
                s: vec![0.1],
                lr_s: vec![0.0, 1e-3],
                lr_sigma: vec![0.0],
            },
            seeds: vec![1],
        };
        assert!(matches!(sc.validate(), Err(TrainError::Config(_))));
    }
}
