//! Hierarchical joint decomposition of a weight stack.
//!
//! Each category's layers are stacked vertically and factored `W = Q R`.
//! The ridge-regularized inverse Grams of the `Q` blocks are averaged into a
//! symmetric `T`, whose eigenvectors `Z` form the basis shared by every
//! category. Layer `i` of category `c` then factors as
//!
//! ```text
//! W_i = U_i · diag(sigma_i) · Vt_c,   B_i = Q_i Z,  sigma_i = colnorms(B_i),
//!                                     U_i = B_i / sigma_i, Vt_c = Zᵀ R_c
//! ```
//!
//! which is exact because `Z Zᵀ = I`, whatever `Z` turns out to be.

use std::str::FromStr;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, eigh_symmetric, qr_thin, ridge_inverse, LinalgError, Matrix};
use crate::tensorio::{NamedTensor, TensorContainer, TensorError};

/// Column norms below this are replaced by it.
pub const SIGMA_FLOOR: f64 = 1e-12;
pub const DEFAULT_PI: f64 = 1e-3;

#[derive(Debug, Error)]
pub enum DecompError {
    #[error("invalid stack: {0}")]
    Shape(String),
    #[error("ridge parameter pi must be positive and finite, got {0}")]
    NonPositivePi(f64),
    #[error("category {category:?} layer {layer}: latent column {column} is zero")]
    ZeroColumn {
        category: String,
        layer: usize,
        column: usize,
    },
    #[error("index out of range: {0}")]
    Index(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = DecompError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryStack {
    pub label: String,
    pub layers: Vec<Matrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeightStack {
    pub categories: Vec<CategoryStack>,
}

impl WeightStack {
    /// Checks the structural invariants and returns the shared `(m, n)`.
    pub fn validate(&self) -> Result<(usize, usize)> {
        let first = self
            .categories
            .first()
            .and_then(|c| c.layers.first())
            .ok_or_else(|| DecompError::Shape("stack has no layers".into()))?;
        let shape = first.shape();
        let mut labels = std::collections::HashSet::new();
        for cat in &self.categories {
            if cat.label.is_empty() || cat.label.contains('/') {
                return Err(DecompError::Shape(format!(
                    "category label {:?} must be nonempty and contain no '/'",
                    cat.label
                )));
            }
            if !labels.insert(cat.label.as_str()) {
                return Err(DecompError::Shape(format!(
                    "duplicate category {:?}",
                    cat.label
                )));
            }
            if cat.layers.is_empty() {
                return Err(DecompError::Shape(format!(
                    "category {:?} is empty",
                    cat.label
                )));
            }
            for (i, w) in cat.layers.iter().enumerate() {
                if w.shape() != shape {
                    return Err(DecompError::Shape(format!(
                        "category {:?} layer {i} is {}x{}, expected {}x{}",
                        cat.label,
                        w.rows(),
                        w.cols(),
                        shape.0,
                        shape.1
                    )));
                }
            }
        }
        Ok(shape)
    }

    pub fn num_matrices(&self) -> usize {
        self.categories.iter().map(|c| c.layers.len()).sum()
    }

    /// Largest absolute entry over every matrix.
    pub fn max_abs(&self) -> f64 {
        self.categories
            .iter()
            .flat_map(|c| &c.layers)
            .fold(0.0, |m, w| m.max(w.max_abs()))
    }

    pub fn category(&self, label: &str) -> Option<&CategoryStack> {
        self.categories.iter().find(|c| c.label == label)
    }
}

/// Vertical concatenation of a category's layers (layer `i` in rows
/// `[i·m, (i+1)·m)`).
pub fn stack_category(cat: &CategoryStack) -> Result<Matrix> {
    if cat.layers.is_empty() {
        return Err(DecompError::Shape(format!(
            "category {:?} is empty",
            cat.label
        )));
    }
    let shape = cat.layers[0].shape();
    if cat.layers.iter().any(|w| w.shape() != shape) {
        return Err(DecompError::Shape(format!(
            "category {:?} has mismatched layer shapes",
            cat.label
        )));
    }
    Ok(Matrix::vstack(&cat.layers)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationMode {
    /// Ridge inverse of each category's full `QᵀQ` (which is the identity,
    /// so the result is always `I / (1 + pi)`).
    Literal,
    /// Ridge inverse of each layer block's `Q_iᵀ Q_i`.
    #[default]
    Blockwise,
}

impl AggregationMode {
    fn code(self) -> f64 {
        match self {
            AggregationMode::Literal => 0.0,
            AggregationMode::Blockwise => 1.0,
        }
    }

    fn from_code(v: f64) -> Option<Self> {
        if v == 0.0 {
            Some(AggregationMode::Literal)
        } else if v == 1.0 {
            Some(AggregationMode::Blockwise)
        } else {
            None
        }
    }
}

impl FromStr for AggregationMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "literal" => Ok(Self::Literal),
            "blockwise" => Ok(Self::Blockwise),
            other => Err(format!("unknown mode {other:?} (literal | blockwise)")),
        }
    }
}

fn check_pi(pi: f64) -> Result<()> {
    if pi > 0.0 && pi.is_finite() {
        Ok(())
    } else {
        Err(DecompError::NonPositivePi(pi))
    }
}

struct CategoryQr {
    q: Matrix,
    r: Matrix,
    layers: usize,
}

fn category_qrs(stack: &WeightStack) -> Result<Vec<CategoryQr>> {
    let (m, n) = stack.validate()?;
    stack
        .categories
        .par_iter()
        .map(|cat| {
            if cat.layers.len() * m < n {
                return Err(DecompError::Shape(format!(
                    "category {:?}: {} layers of {m} rows cannot span {n} columns",
                    cat.label,
                    cat.layers.len()
                )));
            }
            let (q, r) = qr_thin(&stack_category(cat)?)?;
            Ok(CategoryQr {
                q,
                r,
                layers: cat.layers.len(),
            })
        })
        .collect()
}

fn aggregate(qrs: &[CategoryQr], m: usize, pi: f64, mode: AggregationMode) -> Result<Matrix> {
    let n = qrs[0].q.cols();
    let mut total = Matrix::zeros(n, n);
    let mut count = 0usize;
    for cq in qrs {
        match mode {
            AggregationMode::Literal => {
                total = total.add(&ridge_inverse(&cq.q.t_matmul(&cq.q).symmetrized(), pi)?);
                count += 1;
            }
            AggregationMode::Blockwise => {
                for i in 0..cq.layers {
                    let qi = cq.q.row_block(i * m, (i + 1) * m);
                    total = total.add(&ridge_inverse(&qi.t_matmul(&qi).symmetrized(), pi)?);
                    count += 1;
                }
            }
        }
    }
    // With a uniform layer count per category this is 1/(L·|C|) or 1/|C|.
    Ok(total.scale(1.0 / count as f64).symmetrized())
}

/// The aggregated, regularized inverse Gram `T` for `stack`.
pub fn gram_aggregate(stack: &WeightStack, pi: f64, mode: AggregationMode) -> Result<Matrix> {
    check_pi(pi)?;
    let (m, _) = stack.validate()?;
    aggregate(&category_qrs(stack)?, m, pi, mode)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerFactors {
    /// `m × n`, unit columns.
    pub u: Matrix,
    pub sigma: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CategoryFactors {
    pub label: String,
    /// Upper-triangular `n × n` factor of the stacked category.
    pub r: Matrix,
    pub layers: Vec<LayerFactors>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointDecomposition {
    pub z: Matrix,
    /// Eigenvalues of `T`, descending, aligned with the columns of `z`.
    pub eigvals: Vec<f64>,
    pub pi: f64,
    pub mode: AggregationMode,
    pub categories: Vec<CategoryFactors>,
}

#[derive(Debug, Clone, Copy)]
pub struct DecompOptions {
    pub pi: f64,
    pub mode: AggregationMode,
    /// Replace zero latent columns by [`SIGMA_FLOOR`] instead of failing.
    pub floor_zero_columns: bool,
}

impl Default for DecompOptions {
    fn default() -> Self {
        Self {
            pi: DEFAULT_PI,
            mode: AggregationMode::Blockwise,
            floor_zero_columns: true,
        }
    }
}

pub fn hjd_decompose(
    stack: &WeightStack,
    pi: f64,
    mode: AggregationMode,
) -> Result<JointDecomposition> {
    hjd_decompose_with(
        stack,
        DecompOptions {
            pi,
            mode,
            ..DecompOptions::default()
        },
    )
}

pub fn hjd_decompose_with(stack: &WeightStack, opts: DecompOptions) -> Result<JointDecomposition> {
    check_pi(opts.pi)?;
    let (m, n) = stack.validate()?;
    let qrs = category_qrs(stack)?;
    let t = aggregate(&qrs, m, opts.pi, opts.mode)?;
    let eig = eigh_symmetric(&t)?;
    let z = eig.vectors;

    let categories = stack
        .categories
        .par_iter()
        .zip(qrs.par_iter())
        .map(|(cat, cq)| {
            let b = cq.q.matmul(&z);
            let layers = (0..cq.layers)
                .map(|i| {
                    let bi = b.row_block(i * m, (i + 1) * m);
                    let mut sigma = Vec::with_capacity(n);
                    for k in 0..n {
                        let norm = linalg::norm2(&bi.column(k));
                        if norm < SIGMA_FLOOR {
                            if !opts.floor_zero_columns {
                                return Err(DecompError::ZeroColumn {
                                    category: cat.label.clone(),
                                    layer: i,
                                    column: k,
                                });
                            }
                            warn!(
                                "category {:?} layer {i}: latent column {k} has norm {norm:e}, \
                                 flooring to {SIGMA_FLOOR:e}",
                                cat.label
                            );
                            sigma.push(SIGMA_FLOOR);
                        } else {
                            sigma.push(norm);
                        }
                    }
                    let inv: Vec<f64> = sigma.iter().map(|s| 1.0 / s).collect();
                    Ok(LayerFactors {
                        u: bi.scale_columns(&inv),
                        sigma,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(CategoryFactors {
                label: cat.label.clone(),
                r: cq.r.clone(),
                layers,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(JointDecomposition {
        z,
        eigvals: eig.values,
        pi: opts.pi,
        mode: opts.mode,
        categories,
    })
}

/// Per-layer reconstruction error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerError {
    pub category: String,
    pub layer: usize,
    pub max_abs_error: f64,
}

impl JointDecomposition {
    pub fn n(&self) -> usize {
        self.z.rows()
    }

    pub fn category_index(&self, label: &str) -> Option<usize> {
        self.categories.iter().position(|c| c.label == label)
    }

    fn factors(&self, c: usize, i: usize) -> Result<(&CategoryFactors, &LayerFactors)> {
        let cat = self.categories.get(c).ok_or_else(|| {
            DecompError::Index(format!("category {c} of {}", self.categories.len()))
        })?;
        let layer = cat
            .layers
            .get(i)
            .ok_or_else(|| DecompError::Index(format!("layer {i} of {}", cat.layers.len())))?;
        Ok((cat, layer))
    }

    /// `Vt_c = Zᵀ R_c`.
    pub fn vt(&self, c: usize) -> Result<Matrix> {
        let cat = self.categories.get(c).ok_or_else(|| {
            DecompError::Index(format!("category {c} of {}", self.categories.len()))
        })?;
        Ok(self.z.t_matmul(&cat.r))
    }

    pub fn layer(&self, c: usize, i: usize) -> Result<&LayerFactors> {
        Ok(self.factors(c, i)?.1)
    }

    /// `U_i · diag(sigma_i) · Vt_c`.
    pub fn reconstruct_layer(&self, c: usize, i: usize) -> Result<Matrix> {
        let (_, layer) = self.factors(c, i)?;
        Ok(layer.u.scale_columns(&layer.sigma).matmul(&self.vt(c)?))
    }

    /// Reconstruction with every factor cast to f32 and f32 arithmetic
    /// (accumulation included), widened back to f64 at the end.
    pub fn reconstruct_layer_f32(&self, c: usize, i: usize) -> Result<Matrix> {
        let (_, layer) = self.factors(c, i)?;
        let vt = self.vt(c)?;
        let (m, n) = layer.u.shape();
        let us: Vec<f32> = (0..m * n)
            .map(|idx| (layer.u.as_slice()[idx] as f32) * (layer.sigma[idx % n] as f32))
            .collect();
        let vt32: Vec<f32> = vt.as_slice().iter().map(|&x| x as f32).collect();
        let mut out = vec![0f32; m * n];
        for r in 0..m {
            for k in 0..n {
                let a = us[r * n + k];
                for c2 in 0..n {
                    out[r * n + c2] += a * vt32[k * n + c2];
                }
            }
        }
        Ok(Matrix::from_vec(
            m,
            n,
            out.into_iter().map(f64::from).collect(),
        )?)
    }

    /// Max elementwise reconstruction error of every layer against `stack`.
    pub fn reconstruction_errors(&self, stack: &WeightStack) -> Result<Vec<LayerError>> {
        let mut out = Vec::new();
        for (c, cat) in stack.categories.iter().enumerate() {
            for (i, w) in cat.layers.iter().enumerate() {
                let rec = self.reconstruct_layer(c, i)?;
                out.push(LayerError {
                    category: cat.label.clone(),
                    layer: i,
                    max_abs_error: rec.max_abs_diff(w),
                });
            }
        }
        Ok(out)
    }

    /// `max |ZᵀZ − I|`.
    pub fn z_orthogonality_error(&self) -> f64 {
        self.z
            .t_matmul(&self.z)
            .max_abs_diff(&Matrix::identity(self.n()))
    }

    /// `max |BᵀB − I|` for category `c`, where `B` stacks `U_i diag(sigma_i)`
    /// over layers (it equals `Q Z`, so its columns are orthonormal).
    pub fn stacked_orthogonality_error(&self, c: usize) -> Result<f64> {
        let cat = self
            .categories
            .get(c)
            .ok_or_else(|| DecompError::Index(format!("category {c}")))?;
        let blocks: Vec<Matrix> = cat
            .layers
            .iter()
            .map(|l| l.u.scale_columns(&l.sigma))
            .collect();
        let b = Matrix::vstack(&blocks)?;
        Ok(b.t_matmul(&b).max_abs_diff(&Matrix::identity(self.n())))
    }

    /// Whether `T` collapsed to a multiple of the identity (always true in
    /// literal mode), leaving `Z` determined only by solver conventions.
    pub fn is_degenerate(&self) -> bool {
        let target = 1.0 / (1.0 + self.pi);
        self.eigvals.iter().all(|&v| (v - target).abs() <= 1e-12)
    }

    pub fn to_container(&self) -> Result<TensorContainer> {
        let mut c = TensorContainer::new();
        c.push(NamedTensor::from_matrix("Z", &self.z)?)?;
        c.push(NamedTensor::vector("Lambda", &self.eigvals)?)?;
        c.push(NamedTensor::scalar("meta/pi", self.pi)?)?;
        c.push(NamedTensor::scalar("meta/mode", self.mode.code())?)?;
        for cat in &self.categories {
            c.push(NamedTensor::from_matrix(
                format!("R/{}", cat.label),
                &cat.r,
            )?)?;
            for (i, l) in cat.layers.iter().enumerate() {
                c.push(NamedTensor::from_matrix(
                    format!("U/{}/{i}", cat.label),
                    &l.u,
                )?)?;
                c.push(NamedTensor::vector(
                    format!("sigma/{}/{i}", cat.label),
                    &l.sigma,
                )?)?;
            }
        }
        Ok(c)
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self> {
        let z = c.matrix("Z")?;
        let n = z.rows();
        if z.cols() != n {
            return Err(DecompError::Shape("Z must be square".into()));
        }
        let eigvals = c.vector("Lambda")?;
        let pi = c.vector("meta/pi")?[0];
        let mode_code = c.vector("meta/mode")?[0];
        let mode = AggregationMode::from_code(mode_code)
            .ok_or_else(|| DecompError::Shape(format!("unknown mode code {mode_code}")))?;

        let mut categories = Vec::new();
        for t in &c.tensors {
            let Some(label) = t.name.strip_prefix("R/") else {
                continue;
            };
            let r = t.to_matrix()?;
            let mut layers = Vec::new();
            while let Some(ut) = c.get(&format!("U/{label}/{}", layers.len())) {
                let i = layers.len();
                let u = ut.to_matrix()?;
                let sigma = c.vector(&format!("sigma/{label}/{i}"))?;
                if u.cols() != n || sigma.len() != n {
                    return Err(DecompError::Shape(format!(
                        "U/{label}/{i} or sigma/{label}/{i} does not match n = {n}"
                    )));
                }
                layers.push(LayerFactors { u, sigma });
            }
            if layers.is_empty() || r.shape() != (n, n) {
                return Err(DecompError::Shape(format!(
                    "category {label:?} is incomplete"
                )));
            }
            categories.push(CategoryFactors {
                label: label.to_string(),
                r,
                layers,
            });
        }
        if categories.is_empty() {
            return Err(DecompError::Shape("no categories in decomposition".into()));
        }
        Ok(Self {
            z,
            eigvals,
            pi,
            mode,
            categories,
        })
    }
}

/// Pairwise Gram commutator norms `‖G_i G_j − G_j G_i‖_F`, `G_k = W_kᵀ W_k`,
/// over every matrix of the stack in (category, layer) order.
pub fn gram_commutator_norm(stack: &WeightStack) -> Result<Matrix> {
    stack.validate()?;
    let grams: Vec<Matrix> = stack
        .categories
        .iter()
        .flat_map(|c| c.layers.iter().map(|w| w.t_matmul(w)))
        .collect();
    let k = grams.len();
    if k < 2 {
        return Err(DecompError::Shape(
            "commutators need at least two matrices".into(),
        ));
    }
    let mut out = Matrix::zeros(k, k);
    for i in 0..k {
        for j in (i + 1)..k {
            let v = grams[i]
                .matmul(&grams[j])
                .sub(&grams[j].matmul(&grams[i]))
                .frobenius();
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(out)
}
