//! Adapter layers over a frozen pretrained matrix.
//!
//! All schemes expose the same surface through [`Adapter`]: a merged dense
//! weight, a single-vector forward/backward, and a pullback from a dense
//! weight gradient `dL/dW` to gradients of the trainable parameters (which is
//! what the batched trainer uses).
//!
//! | scheme | update | trainable |
//! |---|---|---|
//! | full | `W` itself | `W` |
//! | frod | `U (diag σ + S) Vt` | `σ`, off-diagonal `S` values |
//! | lora / pissa | `W₀ + B A` | `B`, `A` |
//! | vera | `W₀ + diag(b) B diag(d) A` | `b`, `d` (`B`, `A` frozen and shared) |

use std::collections::HashSet;
use std::str::FromStr;
use std::sync::Arc;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::decomp::JointDecomposition;
use crate::linalg::{svd_thin, LinalgError, Matrix};
use crate::rng::SplitMix64;
use crate::tensorio::{NamedTensor, TensorContainer, TensorError};

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("density s = {0} is outside [0, 1]")]
    DensityOutOfRange(f64),
    #[error("rank r = {r} is outside 1..={max}")]
    RankOutOfRange { r: usize, max: usize },
    #[error("non-finite input")]
    NonFinite,
    #[error("diagonal support entry ({0}, {0}) in sparse off-diagonal matrix")]
    DiagonalSupport(usize),
    #[error("invalid support: {0}")]
    InvalidSupport(String),
    #[error("unknown scheme {0:?}")]
    UnknownScheme(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Decomp(#[from] crate::decomp::DecompError),
}

pub type Result<T, E = AdapterError> = std::result::Result<T, E>;

fn check_finite(x: &[f64]) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(AdapterError::NonFinite)
    }
}

fn check_len(what: &str, got: usize, want: usize) -> Result<()> {
    if got == want {
        Ok(())
    } else {
        Err(AdapterError::Dimension(format!(
            "{what} has length {got}, expected {want}"
        )))
    }
}

/// Strictly off-diagonal sparse `n × n` matrix with a fixed support.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseOffDiag {
    pub n: usize,
    /// Sorted, unique `(row, col)` with `row != col`.
    pub support: Vec<(usize, usize)>,
    pub values: Vec<f64>,
    pub density_s: f64,
    /// Seed the support was drawn with (recorded for checkpoints).
    pub seed: u64,
}

impl SparseOffDiag {
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            support: Vec::new(),
            values: Vec::new(),
            density_s: 0.0,
            seed: 0,
        }
    }

    /// Builds from an explicit support; validates structure.
    pub fn with_support(
        n: usize,
        support: Vec<(usize, usize)>,
        values: Vec<f64>,
        density_s: f64,
        seed: u64,
    ) -> Result<Self> {
        let s = Self {
            n,
            support,
            values,
            density_s,
            seed,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn nnz(&self) -> usize {
        self.support.len()
    }

    pub fn validate(&self) -> Result<()> {
        check_len("sparse values", self.values.len(), self.support.len())?;
        for &(p, q) in &self.support {
            if p == q {
                return Err(AdapterError::DiagonalSupport(p));
            }
            if p >= self.n || q >= self.n {
                return Err(AdapterError::InvalidSupport(format!(
                    "({p}, {q}) outside {n}x{n}",
                    n = self.n
                )));
            }
        }
        for w in self.support.windows(2) {
            if w[0] >= w[1] {
                return Err(AdapterError::InvalidSupport(format!(
                    "support not strictly sorted at {:?}, {:?}",
                    w[0], w[1]
                )));
            }
        }
        Ok(())
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.n, self.n);
        for (&(p, q), &v) in self.support.iter().zip(&self.values) {
            m[(p, q)] = v;
        }
        m
    }

    /// `S x`.
    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.n];
        for (&(p, q), &v) in self.support.iter().zip(&self.values) {
            y[p] += v * x[q];
        }
        y
    }

    /// `Sᵀ y`.
    pub fn t_matvec(&self, y: &[f64]) -> Vec<f64> {
        let mut x = vec![0.0; self.n];
        for (&(p, q), &v) in self.support.iter().zip(&self.values) {
            x[q] += v * y[p];
        }
        x
    }

    /// Largest absolute value (0 when empty).
    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// `min(round(s·n²), n² − n)`.
pub fn support_size(n: usize, s: f64) -> usize {
    let cells = (n * n) as f64;
    ((s * cells).round() as usize).min(n * n - n)
}

/// Draws `min(round(s·n²), n²−n)` distinct off-diagonal cells uniformly at
/// random by a partial Fisher–Yates shuffle over off-diagonal cell indices.
///
/// Cell index `k ∈ [0, n²−n)` maps to row `k / (n−1)` and the `k % (n−1)`-th
/// non-diagonal column of that row. Values start at zero.
pub fn sample_offdiag_support(n: usize, s: f64, seed: u64) -> Result<SparseOffDiag> {
    if n < 2 {
        return Err(AdapterError::Dimension(format!(
            "off-diagonal support needs n >= 2, got {n}"
        )));
    }
    if !(0.0..=1.0).contains(&s) {
        return Err(AdapterError::DensityOutOfRange(s));
    }
    let cells = n * n - n;
    let wanted = (s * (n * n) as f64).round() as usize;
    if wanted > cells {
        warn!(
            "density {s} asks for {wanted} entries but only {cells} off-diagonal cells exist; capping"
        );
    }
    let nnz = wanted.min(cells);

    let mut rng = SplitMix64::new(seed);
    let mut idx: Vec<usize> = (0..cells).collect();
    for i in 0..nnz {
        let j = i + rng.below((cells - i) as u64) as usize;
        idx.swap(i, j);
    }
    let mut support: Vec<(usize, usize)> = idx[..nnz]
        .iter()
        .map(|&k| {
            let row = k / (n - 1);
            let j = k % (n - 1);
            (row, if j < row { j } else { j + 1 })
        })
        .collect();
    support.sort_unstable();
    Ok(SparseOffDiag {
        n,
        values: vec![0.0; nnz],
        support,
        density_s: s,
        seed,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    /// Diagonal strengths of FRoD layers.
    Sigma,
    /// Off-diagonal sparse values of FRoD layers.
    Sparse,
    /// Everything else (full weights, low-rank factors, scaling vectors).
    Other,
}

/// `W' = U (diag σ + S) Vt`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrodLayer {
    pub u: Matrix,
    pub vt: Matrix,
    pub sigma: Vec<f64>,
    pub sigma_init: Vec<f64>,
    pub s: SparseOffDiag,
    /// When false σ is frozen and not handed to the optimizer.
    pub train_sigma: bool,
}

pub struct FrodGrads {
    pub d_sigma: Vec<f64>,
    pub d_s: Vec<f64>,
    pub d_x: Vec<f64>,
}

impl FrodLayer {
    pub fn new(u: Matrix, vt: Matrix, sigma: Vec<f64>, s: SparseOffDiag) -> Result<Self> {
        let n = vt.rows();
        if vt.cols() != n || u.cols() != n {
            return Err(AdapterError::Dimension(format!(
                "U is {}x{}, Vt is {}x{}",
                u.rows(),
                u.cols(),
                vt.rows(),
                vt.cols()
            )));
        }
        check_len("sigma", sigma.len(), n)?;
        if s.n != n {
            return Err(AdapterError::Dimension(format!(
                "S is {0}x{0}, expected {n}x{n}",
                s.n
            )));
        }
        s.validate()?;
        Ok(Self {
            u,
            vt,
            sigma_init: sigma.clone(),
            sigma,
            s,
            train_sigma: true,
        })
    }

    /// Layer `i` of category `c` with a freshly sampled support of density `s`.
    pub fn from_decomposition(
        dec: &JointDecomposition,
        c: usize,
        i: usize,
        s: f64,
        seed: u64,
    ) -> Result<Self> {
        let layer = dec.layer(c, i)?;
        let support = if s == 0.0 {
            SparseOffDiag {
                seed,
                ..SparseOffDiag::empty(dec.n())
            }
        } else {
            sample_offdiag_support(dec.n(), s, seed)?
        };
        Self::new(layer.u.clone(), dec.vt(c)?, layer.sigma.clone(), support)
    }

    pub fn m(&self) -> usize {
        self.u.rows()
    }

    pub fn n(&self) -> usize {
        self.vt.rows()
    }

    /// `diag σ + S` as a dense matrix.
    pub fn core(&self) -> Matrix {
        let mut c = self.s.to_dense();
        for (k, &s) in self.sigma.iter().enumerate() {
            c[(k, k)] = s;
        }
        c
    }

    pub fn merge_weights(&self) -> Matrix {
        self.u.matmul(&self.core()).matmul(&self.vt)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("x", x.len(), self.n())?;
        check_finite(x)?;
        let v = self.vt.matvec(x);
        let mut h = self.s.matvec(&v);
        for ((hk, &sk), &vk) in h.iter_mut().zip(&self.sigma).zip(&v) {
            *hk += sk * vk;
        }
        Ok(self.u.matvec(&h))
    }

    pub fn backward(&self, x: &[f64], g: &[f64]) -> Result<FrodGrads> {
        check_len("x", x.len(), self.n())?;
        check_len("g", g.len(), self.m())?;
        let v = self.vt.matvec(x);
        let u = self.u.t_matvec(g);
        let d_sigma = u.iter().zip(&v).map(|(a, b)| a * b).collect();
        let d_s = self.s.support.iter().map(|&(p, q)| u[p] * v[q]).collect();
        let mut h = self.s.t_matvec(&u);
        for ((hk, &sk), &uk) in h.iter_mut().zip(&self.sigma).zip(&u) {
            *hk += sk * uk;
        }
        Ok(FrodGrads {
            d_sigma,
            d_s,
            d_x: self.vt.t_matvec(&h),
        })
    }

    /// `(d_sigma, d_s)` from a dense weight gradient: both are read off
    /// `Uᵀ dW Vtᵀ`.
    pub fn pullback(&self, dw: &Matrix) -> (Vec<f64>, Vec<f64>) {
        let g = self.u.t_matmul(dw).matmul(&self.vt.transpose());
        let d_sigma = (0..self.n()).map(|k| g[(k, k)]).collect();
        let d_s = self.s.support.iter().map(|&pq| g[pq]).collect();
        (d_sigma, d_s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LowRankInit {
    Lora,
    Pissa,
}

/// `W' = base + B A` with `B` `m × r`, `A` `r × n`.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankLayer {
    pub base: Matrix,
    pub b: Matrix,
    pub a: Matrix,
    pub init: LowRankInit,
}

fn check_rank(r: usize, m: usize, n: usize) -> Result<()> {
    let max = m.min(n);
    if r == 0 || r > max {
        Err(AdapterError::RankOutOfRange { r, max })
    } else {
        Ok(())
    }
}

impl LowRankLayer {
    /// `B = 0`, `A ~ N(0, 1/r)`.
    pub fn lora(w0: Matrix, r: usize, seed: u64) -> Result<Self> {
        let (m, n) = w0.shape();
        check_rank(r, m, n)?;
        let mut rng = SplitMix64::new(seed);
        let std = 1.0 / (r as f64).sqrt();
        let a = Matrix::from_fn(r, n, |_, _| std * rng.normal());
        Ok(Self {
            base: w0,
            b: Matrix::zeros(m, r),
            a,
            init: LowRankInit::Lora,
        })
    }

    /// Principal factors: `B = U_r √S_r`, `A = √S_r V_rᵀ`, base = `W − BA`.
    pub fn pissa(w: &Matrix, r: usize) -> Result<Self> {
        let (m, n) = w.shape();
        check_rank(r, m, n)?;
        let svd = svd_thin(w)?;
        let root: Vec<f64> = svd.s[..r].iter().map(|s| s.sqrt()).collect();
        let b = svd.u.col_block(0, r).scale_columns(&root);
        let a = svd.v.col_block(0, r).transpose().scale_rows(&root);
        let base = w.sub(&b.matmul(&a));
        Ok(Self {
            base,
            b,
            a,
            init: LowRankInit::Pissa,
        })
    }

    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn delta(&self) -> Matrix {
        self.b.matmul(&self.a)
    }

    pub fn merge_weights(&self) -> Matrix {
        self.base.add(&self.delta())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("x", x.len(), self.base.cols())?;
        check_finite(x)?;
        let mut y = self.base.matvec(x);
        let lr = self.b.matvec(&self.a.matvec(x));
        y.iter_mut().zip(lr).for_each(|(a, b)| *a += b);
        Ok(y)
    }

    /// Returns `(dB, dA, dx)` with `dB = g (Ax)ᵀ`, `dA = (Bᵀg) xᵀ`.
    pub fn backward(&self, x: &[f64], g: &[f64]) -> Result<(Matrix, Matrix, Vec<f64>)> {
        check_len("x", x.len(), self.base.cols())?;
        check_len("g", g.len(), self.base.rows())?;
        let ax = self.a.matvec(x);
        let btg = self.b.t_matvec(g);
        let db = Matrix::from_fn(self.b.rows(), self.b.cols(), |i, k| g[i] * ax[k]);
        let da = Matrix::from_fn(self.a.rows(), self.a.cols(), |k, j| btg[k] * x[j]);
        let mut dx = self.base.t_matvec(g);
        dx.iter_mut()
            .zip(self.a.t_matvec(&btg))
            .for_each(|(a, b)| *a += b);
        Ok((db, da, dx))
    }

    /// `(dB, dA) = (dW Aᵀ, Bᵀ dW)`.
    pub fn pullback(&self, dw: &Matrix) -> (Matrix, Matrix) {
        (dw.matmul(&self.a.transpose()), self.b.t_matmul(dw))
    }
}

/// Frozen random factors shared by every VeRA layer of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct VeraShared {
    /// `m × r`.
    pub b: Matrix,
    /// `r × n`.
    pub a: Matrix,
}

impl VeraShared {
    /// `B ~ N(0, 1/r)`, `A ~ N(0, 1/n)`; `r = 0` gives empty factors.
    pub fn new(m: usize, n: usize, r: usize, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let sb = 1.0 / (r.max(1) as f64).sqrt();
        let sa = 1.0 / (n as f64).sqrt();
        let b = Matrix::from_fn(m, r, |_, _| sb * rng.normal());
        let a = Matrix::from_fn(r, n, |_, _| sa * rng.normal());
        Self { b, a }
    }
}

/// `W' = W₀ + diag(b) B diag(d) A`.
#[derive(Debug, Clone, PartialEq)]
pub struct VeraLayer {
    pub base: Matrix,
    pub shared: Arc<VeraShared>,
    /// Length `m`, starts at 0.
    pub b: Vec<f64>,
    /// Length `r`, starts at 0.1.
    pub d: Vec<f64>,
}

pub const VERA_D_INIT: f64 = 0.1;

impl VeraLayer {
    pub fn new(w0: Matrix, shared: Arc<VeraShared>) -> Result<Self> {
        let (m, n) = w0.shape();
        if shared.b.rows() != m || shared.a.cols() != n {
            return Err(AdapterError::Dimension(format!(
                "shared factors are {}x{} and {}x{}, layer is {m}x{n}",
                shared.b.rows(),
                shared.b.cols(),
                shared.a.rows(),
                shared.a.cols()
            )));
        }
        let r = shared.a.rows();
        Ok(Self {
            base: w0,
            b: vec![0.0; m],
            d: vec![VERA_D_INIT; r],
            shared,
        })
    }

    pub fn delta(&self) -> Matrix {
        self.shared
            .b
            .scale_columns(&self.d)
            .matmul(&self.shared.a)
            .scale_rows(&self.b)
    }

    pub fn merge_weights(&self) -> Matrix {
        self.base.add(&self.delta())
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len("x", x.len(), self.base.cols())?;
        check_finite(x)?;
        let ax: Vec<f64> = self
            .shared
            .a
            .matvec(x)
            .iter()
            .zip(&self.d)
            .map(|(a, d)| a * d)
            .collect();
        let bdax = self.shared.b.matvec(&ax);
        let mut y = self.base.matvec(x);
        for ((yi, bi), z) in y.iter_mut().zip(&self.b).zip(bdax) {
            *yi += bi * z;
        }
        Ok(y)
    }

    /// Returns `(db, dd, dx)`.
    pub fn backward(&self, x: &[f64], g: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        check_len("x", x.len(), self.base.cols())?;
        check_len("g", g.len(), self.base.rows())?;
        let ax = self.shared.a.matvec(x);
        let dax: Vec<f64> = ax.iter().zip(&self.d).map(|(a, d)| a * d).collect();
        let bdax = self.shared.b.matvec(&dax);
        let db: Vec<f64> = g.iter().zip(&bdax).map(|(g, z)| g * z).collect();
        let gb: Vec<f64> = g.iter().zip(&self.b).map(|(g, b)| g * b).collect();
        let btgb = self.shared.b.t_matvec(&gb);
        let dd: Vec<f64> = btgb.iter().zip(&ax).map(|(a, b)| a * b).collect();
        let mut dx = self.base.t_matvec(g);
        let inner: Vec<f64> = btgb.iter().zip(&self.d).map(|(a, d)| a * d).collect();
        dx.iter_mut()
            .zip(self.shared.a.t_matvec(&inner))
            .for_each(|(a, b)| *a += b);
        Ok((db, dd, dx))
    }

    /// `(db, dd)` from a dense weight gradient.
    pub fn pullback(&self, dw: &Matrix) -> (Vec<f64>, Vec<f64>) {
        let bda = self.shared.b.scale_columns(&self.d).matmul(&self.shared.a);
        let db = (0..dw.rows())
            .map(|i| crate::linalg::dot(dw.row(i), bda.row(i)))
            .collect();
        // dd_k = Σ_i b_i B_ik (dW Aᵀ)_ik
        let dwat = dw.matmul(&self.shared.a.transpose());
        let dd = (0..self.d.len())
            .map(|k| {
                (0..dw.rows())
                    .map(|i| self.b[i] * self.shared.b[(i, k)] * dwat[(i, k)])
                    .sum()
            })
            .collect();
        (db, dd)
    }
}

/// One adapted matrix of a model.
#[derive(Debug, Clone, PartialEq)]
pub enum Adapter {
    Full(Matrix),
    Frod(FrodLayer),
    LowRank(LowRankLayer),
    Vera(VeraLayer),
}

/// Gradients of one adapter for one probe, aligned with [`Adapter::params`].
pub struct AdapterGrads {
    pub params: Vec<Vec<f64>>,
    pub d_x: Vec<f64>,
}

impl Adapter {
    pub fn shape(&self) -> (usize, usize) {
        match self {
            Adapter::Full(w) => w.shape(),
            Adapter::Frod(l) => (l.m(), l.n()),
            Adapter::LowRank(l) => l.base.shape(),
            Adapter::Vera(l) => l.base.shape(),
        }
    }

    pub fn merge_weights(&self) -> Matrix {
        match self {
            Adapter::Full(w) => w.clone(),
            Adapter::Frod(l) => l.merge_weights(),
            Adapter::LowRank(l) => l.merge_weights(),
            Adapter::Vera(l) => l.merge_weights(),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        match self {
            Adapter::Full(w) => {
                check_len("x", x.len(), w.cols())?;
                check_finite(x)?;
                Ok(w.matvec(x))
            }
            Adapter::Frod(l) => l.forward(x),
            Adapter::LowRank(l) => l.forward(x),
            Adapter::Vera(l) => l.forward(x),
        }
    }

    pub fn backward(&self, x: &[f64], g: &[f64]) -> Result<AdapterGrads> {
        Ok(match self {
            Adapter::Full(w) => {
                check_len("x", x.len(), w.cols())?;
                check_len("g", g.len(), w.rows())?;
                let dw = Matrix::from_fn(w.rows(), w.cols(), |i, j| g[i] * x[j]);
                AdapterGrads {
                    params: vec![dw.into_vec()],
                    d_x: w.t_matvec(g),
                }
            }
            Adapter::Frod(l) => {
                let gr = l.backward(x, g)?;
                let mut params = Vec::with_capacity(2);
                if l.train_sigma {
                    params.push(gr.d_sigma);
                }
                params.push(gr.d_s);
                AdapterGrads {
                    params,
                    d_x: gr.d_x,
                }
            }
            Adapter::LowRank(l) => {
                let (db, da, d_x) = l.backward(x, g)?;
                AdapterGrads {
                    params: vec![db.into_vec(), da.into_vec()],
                    d_x,
                }
            }
            Adapter::Vera(l) => {
                let (db, dd, d_x) = l.backward(x, g)?;
                AdapterGrads {
                    params: vec![db, dd],
                    d_x,
                }
            }
        })
    }

    /// Parameter gradients from a dense `dL/dW`, aligned with [`Adapter::params`].
    pub fn pullback(&self, dw: &Matrix) -> Vec<Vec<f64>> {
        match self {
            Adapter::Full(_) => vec![dw.as_slice().to_vec()],
            Adapter::Frod(l) => {
                let (ds, dsp) = l.pullback(dw);
                if l.train_sigma {
                    vec![ds, dsp]
                } else {
                    vec![dsp]
                }
            }
            Adapter::LowRank(l) => {
                let (db, da) = l.pullback(dw);
                vec![db.into_vec(), da.into_vec()]
            }
            Adapter::Vera(l) => {
                let (db, dd) = l.pullback(dw);
                vec![db, dd]
            }
        }
    }

    /// Optimizer group of each trainable tensor, aligned with [`Adapter::params`].
    pub fn groups(&self) -> Vec<ParamGroup> {
        match self {
            Adapter::Frod(l) if l.train_sigma => vec![ParamGroup::Sigma, ParamGroup::Sparse],
            Adapter::Frod(_) => vec![ParamGroup::Sparse],
            Adapter::Full(_) => vec![ParamGroup::Other],
            Adapter::LowRank(_) | Adapter::Vera(_) => vec![ParamGroup::Other, ParamGroup::Other],
        }
    }

    pub fn params(&self) -> Vec<&[f64]> {
        match self {
            Adapter::Full(w) => vec![w.as_slice()],
            Adapter::Frod(l) if l.train_sigma => vec![&l.sigma, &l.s.values],
            Adapter::Frod(l) => vec![&l.s.values],
            Adapter::LowRank(l) => vec![l.b.as_slice(), l.a.as_slice()],
            Adapter::Vera(l) => vec![&l.b, &l.d],
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Adapter::Full(w) => vec![w.as_mut_slice()],
            Adapter::Frod(l) => {
                if l.train_sigma {
                    vec![&mut l.sigma, &mut l.s.values]
                } else {
                    vec![&mut l.s.values]
                }
            }
            Adapter::LowRank(l) => vec![l.b.as_mut_slice(), l.a.as_mut_slice()],
            Adapter::Vera(l) => vec![&mut l.b, &mut l.d],
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    /// Scalars this layer needs for its forward pass, excluding factors
    /// shared with other layers (`Vt`, VeRA's `B`/`A`).
    pub fn own_scalar_count(&self) -> usize {
        match self {
            Adapter::Full(w) => w.as_slice().len(),
            Adapter::Frod(l) => l.u.as_slice().len() + l.sigma.len() + l.s.nnz(),
            Adapter::LowRank(l) => {
                l.base.as_slice().len() + l.b.as_slice().len() + l.a.as_slice().len()
            }
            Adapter::Vera(l) => l.base.as_slice().len() + l.b.len() + l.d.len(),
        }
    }

    /// Concatenation of all trainable tensors.
    pub fn flat_params(&self) -> Vec<f64> {
        self.params().concat()
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        check_len("flat parameters", flat.len(), self.trainable_count())?;
        let mut off = 0;
        for p in self.params_mut() {
            let k = p.len();
            p.copy_from_slice(&flat[off..off + k]);
            off += k;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scheme {
    Full,
    Frod,
    SigmaOnly,
    SOnly,
    Lora,
    Vera,
    Pissa,
}

impl Scheme {
    pub const ALL: [Scheme; 7] = [
        Scheme::Full,
        Scheme::Frod,
        Scheme::SigmaOnly,
        Scheme::SOnly,
        Scheme::Lora,
        Scheme::Vera,
        Scheme::Pissa,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scheme::Full => "full",
            Scheme::Frod => "frod",
            Scheme::SigmaOnly => "sigma-only",
            Scheme::SOnly => "s-only",
            Scheme::Lora => "lora",
            Scheme::Vera => "vera",
            Scheme::Pissa => "pissa",
        }
    }

    /// Whether the scheme is built on the joint decomposition.
    pub fn is_frod_family(self) -> bool {
        matches!(self, Scheme::Frod | Scheme::SigmaOnly | Scheme::SOnly)
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scheme {
    type Err = AdapterError;

    fn from_str(s: &str) -> Result<Self> {
        Scheme::ALL
            .into_iter()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| AdapterError::UnknownScheme(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub scheme: Scheme,
    /// All stored scalars; factors shared across layers counted once.
    pub weights_total: usize,
    pub trainable: usize,
    pub optimizer_states: usize,
    /// Size of the cross-layer shared block (`Vt` for FRoD, `B`+`A` for
    /// VeRA), needed when each of several categories keeps its own copy.
    pub shared: usize,
}

impl ParamCount {
    /// Total when each of `categories` categories stores its own shared block.
    pub fn weights_with_categories(&self, categories: usize) -> usize {
        self.weights_total + categories.saturating_sub(1) * self.shared
    }
}

/// Closed-form parameter accounting for `layers` adapted `m × n` matrices.
///
/// `r` is the rank for lora/pissa/vera and `s` the density for the FRoD
/// family; unused arguments are ignored.
pub fn count_params(
    scheme: Scheme,
    m: usize,
    n: usize,
    layers: usize,
    r: usize,
    s: f64,
) -> Result<ParamCount> {
    if m == 0 || n == 0 || layers == 0 {
        return Err(AdapterError::Dimension(
            "m, n and L must be positive".into(),
        ));
    }
    let l = layers;
    let (weights, trainable, shared) = match scheme {
        Scheme::Full => (l * m * n, l * m * n, 0),
        Scheme::Frod | Scheme::SOnly | Scheme::SigmaOnly => {
            let nnz = if scheme == Scheme::SigmaOnly {
                0
            } else {
                if n < 2 {
                    return Err(AdapterError::Dimension("FRoD needs n >= 2".into()));
                }
                if !(0.0..=1.0).contains(&s) {
                    return Err(AdapterError::DensityOutOfRange(s));
                }
                support_size(n, s)
            };
            let trainable = match scheme {
                Scheme::SOnly => l * nnz,
                _ => l * (nnz + n),
            };
            (l * (m * n + nnz + n) + n * n, trainable, n * n)
        }
        Scheme::Lora | Scheme::Pissa => {
            check_rank(r, m, n)?;
            (l * (m * n + m * r + n * r), l * (m * r + n * r), 0)
        }
        Scheme::Vera => (
            l * (m * n + r + m) + m * r + n * r,
            l * (r + m),
            m * r + n * r,
        ),
    };
    Ok(ParamCount {
        scheme,
        weights_total: weights,
        trainable,
        optimizer_states: 2 * trainable,
        shared,
    })
}

/// Builds `layers` random adapters for `scheme` and counts their scalars.
pub fn build_layers(
    scheme: Scheme,
    m: usize,
    n: usize,
    layers: usize,
    r: usize,
    s: f64,
    seed: u64,
) -> Result<Vec<Adapter>> {
    let mut rng = SplitMix64::new(seed);
    let mut random = |rows, cols| {
        let mut sub = SplitMix64::new(rng.next_u64());
        Matrix::from_fn(rows, cols, |_, _| sub.normal())
    };
    let vera_shared = Arc::new(VeraShared::new(m, n, r, seed ^ 0x5eed));
    let vt = {
        let (q, _) = crate::linalg::qr_thin(&random(n, n))?;
        q
    };
    (0..layers)
        .map(|i| {
            let w = random(m, n);
            Ok(match scheme {
                Scheme::Full => Adapter::Full(w),
                Scheme::Frod | Scheme::SigmaOnly | Scheme::SOnly => {
                    let support = if scheme == Scheme::SigmaOnly {
                        SparseOffDiag::empty(n)
                    } else {
                        sample_offdiag_support(n, s, crate::rng::derive_seed(seed, i as u64))?
                    };
                    let sigma: Vec<f64> = (0..n).map(|k| 1.0 + k as f64).collect();
                    let mut layer = FrodLayer::new(w, vt.clone(), sigma, support)?;
                    layer.train_sigma = scheme != Scheme::SOnly;
                    Adapter::Frod(layer)
                }
                Scheme::Lora => Adapter::LowRank(LowRankLayer::lora(w, r, seed + i as u64)?),
                Scheme::Pissa => Adapter::LowRank(LowRankLayer::pissa(&w, r)?),
                Scheme::Vera => Adapter::Vera(VeraLayer::new(w, vera_shared.clone())?),
            })
        })
        .collect()
}

/// Counts obtained by walking constructed layers rather than by formula.
pub fn enumerate_params(
    scheme: Scheme,
    m: usize,
    n: usize,
    layers: usize,
    r: usize,
    s: f64,
    seed: u64,
) -> Result<ParamCount> {
    let built = build_layers(scheme, m, n, layers, r, s, seed)?;
    let trainable: usize = built.iter().map(Adapter::trainable_count).sum();
    let own: usize = built.iter().map(Adapter::own_scalar_count).sum();
    let shared = match built.first() {
        Some(Adapter::Frod(l)) => l.vt.as_slice().len(),
        Some(Adapter::Vera(l)) => l.shared.a.as_slice().len() + l.shared.b.as_slice().len(),
        _ => 0,
    };
    Ok(ParamCount {
        scheme,
        weights_total: own + shared,
        trainable,
        optimizer_states: 2 * trainable,
        shared,
    })
}

/// Tensor names and side-file metadata for FRoD layer checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrodSideEntry {
    pub name: String,
    pub support: Vec<[usize; 2]>,
    pub s: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FrodSidecar {
    pub layers: Vec<FrodSideEntry>,
}

pub fn save_frod_checkpoint(
    layers: &[(String, &FrodLayer)],
) -> Result<(TensorContainer, FrodSidecar)> {
    let mut c = TensorContainer::new();
    let mut side = FrodSidecar::default();
    for (name, l) in layers {
        if name.is_empty() || name.contains('/') {
            return Err(AdapterError::Checkpoint(format!(
                "invalid layer name {name:?}"
            )));
        }
        let p = |t: &str| format!("frod/{name}/{t}");
        c.push(NamedTensor::from_matrix(p("U"), &l.u)?)?;
        c.push(NamedTensor::from_matrix(p("Vt"), &l.vt)?)?;
        c.push(NamedTensor::vector(p("sigma"), &l.sigma)?)?;
        c.push(NamedTensor::vector(p("sigma_init"), &l.sigma_init)?)?;
        if l.s.nnz() > 0 {
            c.push(NamedTensor::vector(p("S_values"), &l.s.values)?)?;
        }
        side.layers.push(FrodSideEntry {
            name: name.clone(),
            support: l.s.support.iter().map(|&(p, q)| [p, q]).collect(),
            s: l.s.density_s,
            seed: l.s.seed,
        });
    }
    Ok((c, side))
}

pub fn load_frod_checkpoint(
    c: &TensorContainer,
    side: &FrodSidecar,
) -> Result<Vec<(String, FrodLayer)>> {
    let mut names = HashSet::new();
    side.layers
        .iter()
        .map(|entry| {
            if !names.insert(entry.name.as_str()) {
                return Err(AdapterError::Checkpoint(format!(
                    "duplicate layer {:?}",
                    entry.name
                )));
            }
            let p = |t: &str| format!("frod/{}/{t}", entry.name);
            let u = c.matrix(&p("U"))?;
            let vt = c.matrix(&p("Vt"))?;
            let sigma = c.vector(&p("sigma"))?;
            let sigma_init = c.vector(&p("sigma_init"))?;
            let values = if entry.support.is_empty() {
                Vec::new()
            } else {
                c.vector(&p("S_values"))?
            };
            let support: Vec<(usize, usize)> = entry.support.iter().map(|&[p, q]| (p, q)).collect();
            let s = SparseOffDiag::with_support(vt.rows(), support, values, entry.s, entry.seed)?;
            let mut layer = FrodLayer::new(u, vt, sigma, s)?;
            check_len("sigma_init", sigma_init.len(), layer.n())?;
            layer.sigma_init = sigma_init;
            Ok((entry.name.clone(), layer))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity_layer(sigma: Vec<f64>) -> FrodLayer {
        let n = sigma.len();
        FrodLayer::new(
            Matrix::identity(n),
            Matrix::identity(n),
            sigma,
            SparseOffDiag::empty(n),
        )
        .unwrap()
    }

    #[test]
    fn support_examples() {
        assert_eq!(sample_offdiag_support(2, 0.25, 1).unwrap().nnz(), 1);
        assert_eq!(sample_offdiag_support(768, 0.02, 1).unwrap().nnz(), 11796);
        let full = sample_offdiag_support(4, 1.0, 1).unwrap();
        assert_eq!(full.nnz(), 12);
        assert!(full.support.iter().all(|&(p, q)| p != q));
        assert!(sample_offdiag_support(4, 1.5, 1).is_err());
        assert!(sample_offdiag_support(4, -0.1, 1).is_err());
        assert!(sample_offdiag_support(1, 0.5, 1).is_err());
    }

    #[test]
    fn support_is_deterministic_and_valid() {
        let a = sample_offdiag_support(16, 0.1, 9).unwrap();
        assert_eq!(a, sample_offdiag_support(16, 0.1, 9).unwrap());
        assert_ne!(
            a.support,
            sample_offdiag_support(16, 0.1, 10).unwrap().support
        );
        a.validate().unwrap();
    }

    #[test]
    fn diagonal_support_rejected() {
        let err = SparseOffDiag::with_support(3, vec![(1, 1)], vec![0.0], 0.1, 0).unwrap_err();
        assert!(matches!(err, AdapterError::DiagonalSupport(1)));
    }

    #[test]
    fn forward_examples() {
        let mut l = identity_layer(vec![2.0, 3.0]);
        assert_eq!(l.forward(&[1.0, 1.0]).unwrap(), vec![2.0, 3.0]);
        l.s = SparseOffDiag::with_support(2, vec![(0, 1)], vec![1.0], 0.25, 0).unwrap();
        assert_eq!(l.forward(&[1.0, 1.0]).unwrap(), vec![3.0, 3.0]);
        assert!(matches!(l.forward(&[1.0]), Err(AdapterError::Dimension(_))));
        assert!(matches!(
            l.forward(&[1.0, f64::NAN]),
            Err(AdapterError::NonFinite)
        ));
    }

    #[test]
    fn backward_example() {
        let mut l = identity_layer(vec![2.0, 3.0]);
        l.s = SparseOffDiag::with_support(2, vec![(0, 1)], vec![0.0], 0.25, 0).unwrap();
        let g = l.backward(&[2.0, 5.0], &[1.0, 1.0]).unwrap();
        assert_eq!(g.d_sigma, vec![2.0, 5.0]);
        assert_eq!(g.d_s, vec![5.0]);
        let z = l.backward(&[2.0, 5.0], &[0.0, 0.0]).unwrap();
        assert!(z
            .d_sigma
            .iter()
            .chain(&z.d_s)
            .chain(&z.d_x)
            .all(|&v| v == 0.0));
    }

    #[test]
    fn merge_examples() {
        let mut l = identity_layer(vec![1.5, 0.5]);
        l.sigma.iter_mut().for_each(|s| *s *= 2.0);
        assert_eq!(l.merge_weights(), Matrix::from_diag(&[3.0, 1.0]));
    }

    #[test]
    fn lora_starts_transparent() {
        let w = Matrix::from_fn(4, 3, |i, j| (i * 3 + j) as f64);
        let l = LowRankLayer::lora(w.clone(), 2, 1).unwrap();
        assert_eq!(l.delta().max_abs(), 0.0);
        assert_eq!(
            l.forward(&[1.0, 2.0, 3.0]).unwrap(),
            w.matvec(&[1.0, 2.0, 3.0])
        );
        assert!(LowRankLayer::lora(w.clone(), 0, 1).is_err());
        assert!(LowRankLayer::lora(w, 4, 1).is_err());
    }

    #[test]
    fn pissa_examples() {
        let w = Matrix::from_diag(&[3.0, 2.0, 1.0]);
        let p = LowRankLayer::pissa(&w, 1).unwrap();
        assert!(p.delta().max_abs_diff(&Matrix::from_diag(&[3.0, 0.0, 0.0])) < 1e-12);
        assert!(p.base.max_abs_diff(&Matrix::from_diag(&[0.0, 2.0, 1.0])) < 1e-12);
        let full = LowRankLayer::pissa(&w, 3).unwrap();
        assert!(full.base.max_abs() < 1e-12);
    }

    #[test]
    fn vera_hand_product() {
        let shared = Arc::new(VeraShared {
            b: Matrix::from_rows(&[&[1.0], &[0.0]]),
            a: Matrix::from_rows(&[&[1.0, 0.0]]),
        });
        let mut l = VeraLayer::new(Matrix::zeros(2, 2), shared).unwrap();
        assert_eq!(l.delta().max_abs(), 0.0);
        l.b = vec![1.0, 0.0];
        l.d = vec![2.0];
        assert_eq!(l.delta(), Matrix::from_rows(&[&[2.0, 0.0], &[0.0, 0.0]]));
    }

    #[test]
    fn count_worked_examples() {
        let f = count_params(Scheme::Frod, 4, 4, 2, 0, 0.25).unwrap();
        assert_eq!(
            (f.weights_total, f.trainable, f.optimizer_states),
            (64, 16, 32)
        );
        assert_eq!(
            count_params(Scheme::Lora, 8, 4, 3, 2, 0.0)
                .unwrap()
                .trainable,
            72
        );
        assert_eq!(
            count_params(Scheme::Vera, 4, 4, 3, 0, 0.0)
                .unwrap()
                .trainable,
            12
        );
        assert!(count_params(Scheme::Lora, 8, 4, 3, 5, 0.0).is_err());
        assert!("dora".parse::<Scheme>().is_err());
    }

    #[test]
    fn count_matches_enumeration_for_each_scheme() {
        for scheme in Scheme::ALL {
            let r = if scheme == Scheme::Vera { 0 } else { 2 };
            let f = count_params(scheme, 5, 4, 3, r, 0.3).unwrap();
            let e = enumerate_params(scheme, 5, 4, 3, r, 0.3, 7).unwrap();
            assert_eq!(f, e, "{scheme}");
        }
    }

    #[test]
    fn checkpoint_roundtrip() {
        let mut l = identity_layer(vec![1.0, 2.0, 3.0]);
        l.s = sample_offdiag_support(3, 0.4, 2).unwrap();
        l.s.values
            .iter_mut()
            .enumerate()
            .for_each(|(k, v)| *v = k as f64 * 0.1);
        l.sigma[1] = 7.0;
        let plain = identity_layer(vec![4.0, 5.0]);
        let (c, side) = save_frod_checkpoint(&[("a".into(), &l), ("b".into(), &plain)]).unwrap();
        let back = load_frod_checkpoint(&c, &side).unwrap();
        assert_eq!(back[0].1, l);
        assert_eq!(back[1].1, plain);

        let mut bad = side.clone();
        bad.layers[0].support[0] = [1, 1];
        assert!(matches!(
            load_frod_checkpoint(&c, &bad),
            Err(AdapterError::DiagonalSupport(1))
        ));
    }
}
