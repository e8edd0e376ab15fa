//! Numerical checks on adapter geometry and conditioning.
//!
//! - spectral stability of `diag σ + S` (Weyl) and the `√nnz·ε` chain
//! - the on-axis / off-axis split of a FRoD update and its rotation angle
//! - Jacobian ranks of low-rank update maps
//! - finite-difference and block-form Hessians, regularized condition numbers

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{
    sample_offdiag_support, AdapterError, FrodLayer, LowRankLayer, SparseOffDiag,
};
use crate::decomp::{gram_commutator_norm, CategoryStack, JointDecomposition, WeightStack};
use crate::linalg::{self, eigh_symmetric, numerical_rank, svd_values, LinalgError, Matrix};
use crate::rng::{derive_seed, SplitMix64};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("sparse value {value} exceeds the bound {bound}")]
    BoundExceeded { value: f64, bound: f64 },
    #[error("total update is zero")]
    ZeroUpdate,
    #[error("on-axis update is zero; the small-angle form is undefined")]
    ZeroOnAxis,
    #[error("learning rate for sigma is zero; the rotation proxy is undefined")]
    UndefinedProxy,
    #[error("dimensions too large for a dense Jacobian: {0}")]
    TooLarge(String),
    #[error("non-finite loss at evaluation {0}")]
    NonFiniteLoss(usize),
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Decomp(#[from] crate::decomp::DecompError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = AnalysisError> = std::result::Result<T, E>;

/// Slack added to both inequalities of the stability chain.
pub const WEYL_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeylResult {
    /// `max_k |σ_k(diag σ + S) − σ_k(diag σ)|`.
    pub max_dev: f64,
    pub spec_norm_s: f64,
    /// `√nnz · ε`.
    pub sparse_bound: f64,
    pub pass: bool,
}

/// Checks `max_dev ≤ ‖S‖₂ ≤ √nnz·ε` (each with [`WEYL_SLACK`]).
///
/// The unperturbed singular values are `|σ|` sorted descending, which is
/// just `σ` sorted when σ is nonnegative.
pub fn weyl_check(sigma: &[f64], s: &SparseOffDiag, eps_bound: f64) -> Result<WeylResult> {
    if s.n != sigma.len() {
        return Err(AnalysisError::Invalid(format!(
            "sigma has length {}, S is {}x{}",
            sigma.len(),
            s.n,
            s.n
        )));
    }
    if let Some(&v) = s.values.iter().find(|v| !(v.abs() <= eps_bound)) {
        return Err(AnalysisError::BoundExceeded {
            value: v,
            bound: eps_bound,
        });
    }
    let mut base: Vec<f64> = sigma.iter().map(|x| x.abs()).collect();
    base.sort_by(|a, b| b.total_cmp(a));
    let mut perturbed = s.to_dense();
    for (k, &x) in sigma.iter().enumerate() {
        perturbed[(k, k)] = x;
    }
    let sv = svd_values(&perturbed)?;
    let max_dev = sv
        .iter()
        .zip(&base)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    let spec_norm_s = if s.nnz() == 0 {
        0.0
    } else {
        svd_values(&s.to_dense())?[0]
    };
    let sparse_bound = (s.nnz() as f64).sqrt() * eps_bound;
    let pass = max_dev <= spec_norm_s + WEYL_SLACK && spec_norm_s <= sparse_bound + WEYL_SLACK;
    Ok(WeylResult {
        max_dev,
        spec_norm_s,
        sparse_bound,
        pass,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeylRow {
    pub trial: usize,
    pub n: usize,
    pub s: f64,
    pub eps: f64,
    pub nnz: usize,
    pub max_dev: f64,
    pub spec_norm_s: f64,
    pub sparse_bound: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeylAudit {
    pub trials: usize,
    pub violations: usize,
    pub max_dev: f64,
    /// Largest `max_dev / ‖S‖₂` seen (≤ 1 when the bound holds).
    pub max_dev_over_norm: f64,
    /// Largest `‖S‖₂ / (√nnz·ε)` seen.
    pub norm_over_bound: f64,
    #[serde(skip)]
    pub rows: Vec<WeylRow>,
}

pub const AUDIT_DIMS: [usize; 3] = [8, 16, 32];
pub const AUDIT_DENSITIES: [f64; 2] = [0.05, 0.1];
pub const AUDIT_EPS: [f64; 2] = [0.01, 0.1];

/// Randomized stability audit. Trial `t` draws from `derive_seed(seed, t)`
/// and cycles through the (n, s, ε) grid; when `sigmas` is given the
/// diagonal comes from one of those vectors instead of a random draw.
pub fn weyl_audit(trials: usize, seed: u64, sigmas: Option<&[Vec<f64>]>) -> Result<WeylAudit> {
    if trials == 0 {
        return Err(AnalysisError::Invalid(
            "at least one trial is required".into(),
        ));
    }
    let rows = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = SplitMix64::new(derive_seed(seed, t as u64));
            let s = AUDIT_DENSITIES[(t / AUDIT_DIMS.len()) % AUDIT_DENSITIES.len()];
            let eps = AUDIT_EPS[(t / (AUDIT_DIMS.len() * AUDIT_DENSITIES.len())) % AUDIT_EPS.len()];
            let sigma: Vec<f64> = match sigmas {
                Some(list) if !list.is_empty() => {
                    list[rng.below(list.len() as u64) as usize].clone()
                }
                _ => {
                    let n = AUDIT_DIMS[t % AUDIT_DIMS.len()];
                    (0..n).map(|_| rng.uniform(0.1, 2.0)).collect()
                }
            };
            let n = sigma.len();
            let mut sp = sample_offdiag_support(n, s, rng.next_u64())?;
            sp.values
                .iter_mut()
                .for_each(|v| *v = rng.uniform(-eps, eps));
            let w = weyl_check(&sigma, &sp, eps)?;
            Ok(WeylRow {
                trial: t,
                n,
                s,
                eps,
                nnz: sp.nnz(),
                max_dev: w.max_dev,
                spec_norm_s: w.spec_norm_s,
                sparse_bound: w.sparse_bound,
                pass: w.pass,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let ratio = |a: f64, b: f64| if b > 0.0 { a / b } else { 0.0 };
    Ok(WeylAudit {
        trials,
        violations: rows.iter().filter(|r| !r.pass).count(),
        max_dev: rows.iter().fold(0.0, |m, r| m.max(r.max_dev)),
        max_dev_over_norm: rows
            .iter()
            .fold(0.0, |m, r| m.max(ratio(r.max_dev, r.spec_norm_s))),
        norm_over_bound: rows
            .iter()
            .fold(0.0, |m, r| m.max(ratio(r.spec_norm_s, r.sparse_bound))),
        rows,
    })
}

pub fn write_weyl_csv<W: Write>(out: W, rows: &[WeylRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// On-axis / off-axis decomposition of a FRoD layer's update.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateSplit {
    /// `U diag(σ − σ₀) Vt`.
    pub dw_on: Matrix,
    /// `U S Vt`.
    pub dw_off: Matrix,
    pub delta_sigma: Vec<f64>,
    pub s: SparseOffDiag,
    /// `atan2(‖dW_off‖, ‖dW_on‖)`, 0 when both vanish.
    pub alpha: f64,
    pub frob_on: f64,
    pub frob_off: f64,
    /// `‖dW_on + dW_off‖_F`.
    pub frob_total: f64,
}

pub fn split_update(layer: &FrodLayer) -> UpdateSplit {
    let delta_sigma: Vec<f64> = layer
        .sigma
        .iter()
        .zip(&layer.sigma_init)
        .map(|(a, b)| a - b)
        .collect();
    let dw_on = layer.u.scale_columns(&delta_sigma).matmul(&layer.vt);
    let dw_off = layer.u.matmul(&layer.s.to_dense()).matmul(&layer.vt);
    let frob_on = dw_on.frobenius();
    let frob_off = dw_off.frobenius();
    let alpha = if frob_on == 0.0 && frob_off == 0.0 {
        0.0
    } else {
        frob_off.atan2(frob_on)
    };
    UpdateSplit {
        frob_total: dw_on.add(&dw_off).frobenius(),
        dw_on,
        dw_off,
        delta_sigma,
        s: layer.s.clone(),
        alpha,
        frob_on,
        frob_off,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OrthogonalityReport {
    /// `|tr(diag(Δσ) S)| / (‖Δσ‖‖S‖_F + tiny)`: zero by structure.
    pub latent: f64,
    /// `|⟨dW_on, dW_off⟩_F| / (‖dW_on‖‖dW_off‖ + tiny)`.
    pub ambient: f64,
    /// `max |UᵀU − I|`.
    pub u_deviation: f64,
    /// `max |Vt Vtᵀ − I|`.
    pub vt_deviation: f64,
}

/// The ambient value is only guaranteed small when `U` has orthonormal
/// columns and `Vt` is orthogonal; the deviations are reported alongside.
pub fn orthogonality_residual(split: &UpdateSplit, u: &Matrix, vt: &Matrix) -> OrthogonalityReport {
    let tiny = f64::MIN_POSITIVE;
    let s = split.s.to_dense();
    let trace: f64 = split
        .delta_sigma
        .iter()
        .enumerate()
        .map(|(k, d)| d * s[(k, k)])
        .sum();
    let latent = trace.abs() / (linalg::norm2(&split.delta_sigma) * s.frobenius() + tiny);
    let ambient =
        split.dw_on.frobenius_dot(&split.dw_off).abs() / (split.frob_on * split.frob_off + tiny);
    OrthogonalityReport {
        latent,
        ambient,
        u_deviation: u.t_matmul(u).max_abs_diff(&Matrix::identity(u.cols())),
        vt_deviation: vt
            .matmul(&vt.transpose())
            .max_abs_diff(&Matrix::identity(vt.rows())),
    }
}

fn unit(m: &Matrix, norm: f64) -> Matrix {
    if norm == 0.0 {
        Matrix::zeros(m.rows(), m.cols())
    } else {
        m.scale(1.0 / norm)
    }
}

/// `‖ΔW − ‖ΔW‖(cos α Û_on + sin α Û_off)‖_F / ‖ΔW‖` with
/// `‖ΔW‖ = √(‖dW_on‖² + ‖dW_off‖²)`.
pub fn angular_identity_residual(split: &UpdateSplit) -> Result<f64> {
    let total = split.frob_on.hypot(split.frob_off);
    if total == 0.0 {
        return Err(AnalysisError::ZeroUpdate);
    }
    let dw = split.dw_on.add(&split.dw_off);
    let model = unit(&split.dw_on, split.frob_on)
        .scale(split.alpha.cos())
        .add(&unit(&split.dw_off, split.frob_off).scale(split.alpha.sin()))
        .scale(total);
    Ok(dw.sub(&model).frobenius() / total)
}

/// First-order form `‖ΔW − ‖dW_on‖(Û_on + α Û_off)‖_F / ‖ΔW‖`; its exact
/// value is `sin α − α cos α ≈ α³/3`.
pub fn small_angle_residual(split: &UpdateSplit) -> Result<f64> {
    if split.frob_on == 0.0 {
        return Err(AnalysisError::ZeroOnAxis);
    }
    let total = split.frob_on.hypot(split.frob_off);
    let dw = split.dw_on.add(&split.dw_off);
    let model = unit(&split.dw_on, split.frob_on)
        .add(&unit(&split.dw_off, split.frob_off).scale(split.alpha))
        .scale(split.frob_on);
    Ok(dw.sub(&model).frobenius() / total)
}

/// Band of the rotation proxy that sweeps flag.
pub const ROTATION_BAND: (f64, f64) = (0.05, 0.2);

/// `√(s·n)·lr_S / lr_σ`: predicted `tan α` from learning rates alone.
pub fn tan_alpha_proxy(s: f64, lr_s: f64, lr_sigma: f64, n: usize) -> Result<f64> {
    if !(lr_sigma > 0.0) {
        return Err(AnalysisError::UndefinedProxy);
    }
    Ok((s * n as f64).sqrt() * lr_s / lr_sigma)
}

pub fn in_rotation_band(tan_alpha: f64) -> bool {
    (ROTATION_BAND.0..=ROTATION_BAND.1).contains(&tan_alpha)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PdofScheme {
    Lora,
    Vera,
}

impl std::str::FromStr for PdofScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "lora" => Ok(Self::Lora),
            "vera" => Ok(Self::Vera),
            other => Err(format!("unknown scheme {other:?} (lora | vera)")),
        }
    }
}

pub const PDOF_MAX_DIM: usize = 12;
pub const PDOF_RANK_TOL: f64 = 1e-8;

/// Jacobian of the update map at a random point, one column per parameter
/// and one row per entry of `ΔW` (row-major).
pub fn update_jacobian(scheme: PdofScheme, m: usize, n: usize, r: usize, seed: u64) -> Matrix {
    let mut rng = SplitMix64::new(seed);
    match scheme {
        PdofScheme::Lora => {
            // ΔW = B A with B m×r, A r×n; parameters [vec B; vec A].
            let b = Matrix::from_fn(m, r, |_, _| rng.normal());
            let a = Matrix::from_fn(r, n, |_, _| rng.normal());
            let mut j = Matrix::zeros(m * n, m * r + r * n);
            for i in 0..m {
                for c in 0..n {
                    for k in 0..r {
                        j[(i * n + c, i * r + k)] = a[(k, c)];
                        j[(i * n + c, m * r + k * n + c)] = b[(i, k)];
                    }
                }
            }
            j
        }
        PdofScheme::Vera => {
            // ΔW = diag(b) B diag(d) A with frozen B, A; parameters [b; d].
            let bm = Matrix::from_fn(m, r, |_, _| rng.normal());
            let am = Matrix::from_fn(r, n, |_, _| rng.normal());
            let b: Vec<f64> = (0..m).map(|_| rng.normal()).collect();
            let d: Vec<f64> = (0..r).map(|_| rng.normal()).collect();
            let mut j = Matrix::zeros(m * n, m + r);
            for i in 0..m {
                for c in 0..n {
                    let mut inner = 0.0;
                    for k in 0..r {
                        inner += bm[(i, k)] * d[k] * am[(k, c)];
                        j[(i * n + c, m + k)] = b[i] * bm[(i, k)] * am[(k, c)];
                    }
                    j[(i * n + c, i)] = inner;
                }
            }
            j
        }
    }
}

/// Numerical rank (singular values above `1e-8·σ_max`) of the update-map
/// Jacobian at a generic point.
pub fn pdof_rank(scheme: PdofScheme, m: usize, n: usize, r: usize, seed: u64) -> Result<usize> {
    if m == 0 || n == 0 || r == 0 {
        return Err(AnalysisError::Invalid("m, n and r must be positive".into()));
    }
    if m > PDOF_MAX_DIM || n > PDOF_MAX_DIM {
        return Err(AnalysisError::TooLarge(format!(
            "{m}x{n} exceeds {PDOF_MAX_DIM}x{PDOF_MAX_DIM}"
        )));
    }
    if scheme == PdofScheme::Lora && r > m.min(n) {
        return Err(AnalysisError::Invalid(format!(
            "rank {r} exceeds min(m, n)"
        )));
    }
    if scheme == PdofScheme::Vera && r > PDOF_MAX_DIM {
        return Err(AnalysisError::TooLarge(format!("r = {r}")));
    }
    Ok(numerical_rank(
        &update_jacobian(scheme, m, n, r, seed),
        PDOF_RANK_TOL,
    )?)
}

/// `r(m+n−r)` for LoRA; the `r + n` hypothesis for VeRA.
pub fn pdof_formula(scheme: PdofScheme, m: usize, n: usize, r: usize) -> usize {
    match scheme {
        PdofScheme::Lora => r * (m + n - r),
        PdofScheme::Vera => r + n,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PdofReport {
    pub scheme: PdofScheme,
    pub m: usize,
    pub n: usize,
    pub r: usize,
    pub seeds: Vec<u64>,
    pub ranks: Vec<usize>,
    /// Most frequent rank (ties go to the smaller value).
    pub majority: usize,
    pub formula: usize,
    pub matches_formula: bool,
}

pub fn pdof_vote(
    scheme: PdofScheme,
    m: usize,
    n: usize,
    r: usize,
    seeds: &[u64],
) -> Result<PdofReport> {
    if seeds.is_empty() {
        return Err(AnalysisError::Invalid(
            "at least one seed is required".into(),
        ));
    }
    let ranks = seeds
        .iter()
        .map(|&s| pdof_rank(scheme, m, n, r, s))
        .collect::<Result<Vec<_>>>()?;
    let mut counts = std::collections::BTreeMap::new();
    for &k in &ranks {
        *counts.entry(k).or_insert(0usize) += 1;
    }
    let best = counts.values().copied().max().unwrap_or(0);
    let majority = counts
        .iter()
        .find(|(_, &c)| c == best)
        .map(|(&k, _)| k)
        .unwrap_or(0);
    let formula = pdof_formula(scheme, m, n, r);
    Ok(PdofReport {
        scheme,
        m,
        n,
        r,
        seeds: seeds.to_vec(),
        ranks,
        majority,
        formula,
        matches_formula: majority == formula,
    })
}

pub const HESSIAN_FD_STEP: f64 = 1e-4;
pub const HESSIAN_MAX_PARAMS: usize = 200;

/// Central second differences, symmetrized.
pub fn hessian_fd(loss: impl Fn(&[f64]) -> f64, theta0: &[f64], h: f64) -> Result<Matrix> {
    let p = theta0.len();
    if p == 0 || p > HESSIAN_MAX_PARAMS {
        return Err(AnalysisError::TooLarge(format!(
            "{p} parameters (limit {HESSIAN_MAX_PARAMS})"
        )));
    }
    if !(h > 0.0) {
        return Err(AnalysisError::Invalid(format!("step h = {h}")));
    }
    let mut evals = 0usize;
    let mut f = |theta: &[f64]| -> Result<f64> {
        evals += 1;
        let v = loss(theta);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(AnalysisError::NonFiniteLoss(evals))
        }
    };
    let mut theta = theta0.to_vec();
    let f0 = f(&theta)?;
    let mut hm = Matrix::zeros(p, p);
    for i in 0..p {
        theta[i] = theta0[i] + h;
        let fp = f(&theta)?;
        theta[i] = theta0[i] - h;
        let fm = f(&theta)?;
        theta[i] = theta0[i];
        hm[(i, i)] = (fp - 2.0 * f0 + fm) / (h * h);
        for j in (i + 1)..p {
            let mut corner = |si: f64, sj: f64| -> Result<f64> {
                theta[i] = theta0[i] + si * h;
                theta[j] = theta0[j] + sj * h;
                let v = f(&theta);
                theta[i] = theta0[i];
                theta[j] = theta0[j];
                v
            };
            let v = (corner(1.0, 1.0)? - corner(1.0, -1.0)? - corner(-1.0, 1.0)?
                + corner(-1.0, -1.0)?)
                / (4.0 * h * h);
            hm[(i, j)] = v;
            hm[(j, i)] = v;
        }
    }
    Ok(hm.symmetrized())
}

/// Parameter vector `[vec(A); vec(B)]` used by the low-rank Hessian helpers.
pub fn low_rank_theta(a: &Matrix, b: &Matrix) -> Vec<f64> {
    [a.as_slice(), b.as_slice()].concat()
}

/// `L(θ) = ½λ‖B A − B₀ A₀‖_F²` over `θ = [vec(A); vec(B)]`: a quadratic
/// weight-space loss whose minimum is the initial point.
pub fn low_rank_quadratic_loss(a0: &Matrix, b0: &Matrix, lambda: f64) -> impl Fn(&[f64]) -> f64 {
    let (r, n) = a0.shape();
    let m = b0.rows();
    let target = b0.matmul(a0);
    move |theta: &[f64]| {
        let a = Matrix::from_vec(r, n, theta[..r * n].to_vec()).expect("theta length");
        let b = Matrix::from_vec(m, r, theta[r * n..].to_vec()).expect("theta length");
        0.5 * lambda * b.matmul(&a).sub(&target).frobenius().powi(2)
    }
}

/// `λ·blkdiag(‖B‖_F²·I_{rn}, ‖A‖_F²·I_{mr})` in the `[vec(A); vec(B)]` order.
pub fn adapter_hessian_analytic(a: &Matrix, b: &Matrix, lambda: f64) -> Matrix {
    let ra = a.as_slice().len();
    let rb = b.as_slice().len();
    let sa = lambda * b.frobenius().powi(2);
    let sb = lambda * a.frobenius().powi(2);
    let mut d = vec![sa; ra];
    d.extend(std::iter::repeat_n(sb, rb));
    Matrix::from_diag(&d)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    /// Descending.
    pub eigs: Vec<f64>,
    pub eps_cond: f64,
    pub tau_dot: f64,
}

/// `τ̇ = (λ_max + ε) / (λ_min + ε)`.
pub fn regularized_condition(eigs: &[f64], eps_cond: f64) -> Result<ConditionReport> {
    if !(eps_cond > 0.0) {
        return Err(AnalysisError::Invalid(format!(
            "eps_cond = {eps_cond} must be positive"
        )));
    }
    if eigs.is_empty() {
        return Err(AnalysisError::Invalid("empty spectrum".into()));
    }
    let mut sorted = eigs.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let tau_dot = (sorted[0] + eps_cond) / (sorted[sorted.len() - 1] + eps_cond);
    Ok(ConditionReport {
        eigs: sorted,
        eps_cond,
        tau_dot,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HessianScheme {
    Lora,
    Pissa,
}

impl std::str::FromStr for HessianScheme {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "lora" => Ok(Self::Lora),
            "pissa" => Ok(Self::Pissa),
            other => Err(format!("unknown scheme {other:?} (lora | pissa)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HessianReport {
    pub scheme: HessianScheme,
    pub m: usize,
    pub n: usize,
    pub r: usize,
    pub lambda: f64,
    pub eps: f64,
    pub a_frob2: f64,
    pub b_frob2: f64,
    /// Scale of the `A` block (`λ‖B‖²`) and of the `B` block (`λ‖A‖²`).
    pub block_scales: [f64; 2],
    pub tau_analytic: f64,
    pub tau_fd: f64,
    /// `λ Σ_{k≤r} σ_k`, the PiSSA block scale; `(that + ε)/ε` is the
    /// condition estimate when the spectrum also contains a zero.
    pub pissa_sigma_sum: f64,
    pub tau_sigma_sum_formula: f64,
    /// Relative Frobenius gap between the FD Hessian's diagonal blocks and
    /// the analytic blocks.
    pub block_rel_error: f64,
    /// `‖off-diagonal blocks‖_F / ‖H_fd‖_F` (not modelled by the block form).
    pub cross_block_fraction: f64,
    pub fd_eigs: Vec<f64>,
}

/// Initial factors for `scheme` on base matrix `w`. LoRA's `A` is rescaled
/// to `‖A‖_F² = a_frob2` when given.
pub fn low_rank_init(
    scheme: HessianScheme,
    w: &Matrix,
    r: usize,
    seed: u64,
    a_frob2: Option<f64>,
) -> Result<LowRankLayer> {
    let mut layer = match scheme {
        HessianScheme::Lora => LowRankLayer::lora(w.clone(), r, seed)?,
        HessianScheme::Pissa => LowRankLayer::pissa(w, r)?,
    };
    if let (HessianScheme::Lora, Some(target)) = (scheme, a_frob2) {
        if !(target > 0.0) {
            return Err(AnalysisError::Invalid(format!("‖A‖² target {target}")));
        }
        let cur = layer.a.frobenius().powi(2);
        layer.a = layer.a.scale((target / cur).sqrt());
    }
    Ok(layer)
}

/// FD Hessian of the quadratic model at the scheme's initial point against
/// the block form, with both condition numbers.
pub fn hessian_comparison(
    scheme: HessianScheme,
    w: &Matrix,
    r: usize,
    lambda: f64,
    eps: f64,
    seed: u64,
    a_frob2: Option<f64>,
) -> Result<HessianReport> {
    let layer = low_rank_init(scheme, w, r, seed, a_frob2)?;
    let (a, b) = (&layer.a, &layer.b);
    let theta = low_rank_theta(a, b);
    let fd = hessian_fd(
        low_rank_quadratic_loss(a, b, lambda),
        &theta,
        HESSIAN_FD_STEP,
    )?;
    let analytic = adapter_hessian_analytic(a, b, lambda);

    let na = a.as_slice().len();
    let p = theta.len();
    let mut diag_fd = fd.clone();
    let mut cross = Matrix::zeros(p, p);
    for i in 0..p {
        for j in 0..p {
            if (i < na) != (j < na) {
                cross[(i, j)] = fd[(i, j)];
                diag_fd[(i, j)] = 0.0;
            }
        }
    }
    let denom = analytic.frobenius().max(f64::MIN_POSITIVE);
    let fd_eigs = eigh_symmetric(&fd)?.values;
    let an_eigs: Vec<f64> = analytic.diagonal();
    let sigma_sum: f64 = svd_values(w)?[..r].iter().sum();
    Ok(HessianReport {
        scheme,
        m: w.rows(),
        n: w.cols(),
        r,
        lambda,
        eps,
        a_frob2: a.frobenius().powi(2),
        b_frob2: b.frobenius().powi(2),
        block_scales: [
            lambda * b.frobenius().powi(2),
            lambda * a.frobenius().powi(2),
        ],
        tau_analytic: regularized_condition(&an_eigs, eps)?.tau_dot,
        // Rounding can leave tiny negative eigenvalues on a PSD Hessian.
        tau_fd: regularized_condition(
            &fd_eigs.iter().map(|&v| v.max(0.0)).collect::<Vec<_>>(),
            eps,
        )?
        .tau_dot,
        pissa_sigma_sum: lambda * sigma_sum,
        tau_sigma_sum_formula: (lambda * sigma_sum + eps) / eps,
        block_rel_error: diag_fd.sub(&analytic).frobenius() / denom,
        cross_block_fraction: cross.frobenius() / fd.frobenius().max(f64::MIN_POSITIVE),
        fd_eigs,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CommutatorSummary {
    pub labels: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
    /// Smallest off-diagonal entry divided by `max_k ‖G_k‖_F²`.
    pub min_relative: f64,
    pub max_relative: f64,
}

pub fn commutator_summary(stack: &WeightStack) -> Result<CommutatorSummary> {
    let k = gram_commutator_norm(stack)?;
    let labels = stack
        .categories
        .iter()
        .flat_map(|c| (0..c.layers.len()).map(move |i| format!("{}/{i}", c.label)))
        .collect();
    let scale = stack
        .categories
        .iter()
        .flat_map(|c| &c.layers)
        .map(|w| w.t_matmul(w).frobenius().powi(2))
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let mut lo = f64::INFINITY;
    let mut hi = 0.0f64;
    for i in 0..k.rows() {
        for j in 0..k.cols() {
            if i != j {
                lo = lo.min(k[(i, j)] / scale);
                hi = hi.max(k[(i, j)] / scale);
            }
        }
    }
    Ok(CommutatorSummary {
        labels,
        matrix: (0..k.rows()).map(|i| k.row(i).to_vec()).collect(),
        min_relative: lo,
        max_relative: hi,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSummary {
    pub trials: usize,
    pub max_latent_residual: f64,
    pub max_ambient_residual: f64,
    pub max_angular_residual: f64,
    pub small_angle_cases: usize,
    /// Largest `residual / α²` among the small-angle cases.
    pub max_small_angle_ratio: f64,
    pub small_angle_pass: bool,
    pub alpha_range: [f64; 2],
    /// One representative split (trial 0).
    pub alpha: f64,
    pub frob_on: f64,
    pub frob_off: f64,
}

pub const ANGULAR_TOL: f64 = 1e-10;
pub const SMALL_ANGLE_MAX: f64 = 0.1;

/// Random "trained" copies of decomposition layers: σ moved by a relative
/// perturbation, sparse values drawn at a trial-dependent scale so both
/// small and large rotation angles occur.
pub fn split_audit(dec: &JointDecomposition, trials: usize, seed: u64) -> Result<SplitSummary> {
    if trials == 0 {
        return Err(AnalysisError::Invalid(
            "at least one trial is required".into(),
        ));
    }
    let slots: Vec<(usize, usize)> = dec
        .categories
        .iter()
        .enumerate()
        .flat_map(|(c, cat)| (0..cat.layers.len()).map(move |i| (c, i)))
        .collect();
    let n = dec.n();
    let results = (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = SplitMix64::new(derive_seed(seed, t as u64));
            let (c, i) = slots[rng.below(slots.len() as u64) as usize];
            let density = if n >= 2 { AUDIT_DENSITIES[t % 2] } else { 0.0 };
            let mut layer = FrodLayer::from_decomposition(dec, c, i, density, rng.next_u64())?;
            layer
                .sigma
                .iter_mut()
                .for_each(|s| *s *= 1.0 + 0.05 * rng.normal());
            // Off-axis scale spans four decades relative to the on-axis move.
            let scale = 0.05 * 10f64.powf(rng.uniform(-3.0, 1.0));
            layer
                .s
                .values
                .iter_mut()
                .for_each(|v| *v = scale * rng.normal());
            let split = split_update(&layer);
            let orth = orthogonality_residual(&split, &layer.u, &layer.vt);
            let angular = angular_identity_residual(&split)?;
            let small = if split.alpha <= SMALL_ANGLE_MAX && split.frob_on > 0.0 {
                Some(
                    small_angle_residual(&split)?
                        / (split.alpha * split.alpha).max(f64::MIN_POSITIVE),
                )
            } else {
                None
            };
            Ok((
                split.alpha,
                split.frob_on,
                split.frob_off,
                orth,
                angular,
                small,
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let small: Vec<f64> = results.iter().filter_map(|r| r.5).collect();
    let max_small = small.iter().fold(0.0f64, |m, &v| m.max(v));
    Ok(SplitSummary {
        trials,
        max_latent_residual: results.iter().fold(0.0, |m, r| m.max(r.3.latent)),
        max_ambient_residual: results.iter().fold(0.0, |m, r| m.max(r.3.ambient)),
        max_angular_residual: results.iter().fold(0.0, |m, r| m.max(r.4)),
        small_angle_cases: small.len(),
        max_small_angle_ratio: max_small,
        small_angle_pass: max_small <= 1.0,
        alpha_range: [
            results.iter().fold(f64::INFINITY, |m, r| m.min(r.0)),
            results.iter().fold(0.0, |m, r| m.max(r.0)),
        ],
        alpha: results[0].0,
        frob_on: results[0].1,
        frob_off: results[0].2,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub weyl: WeylAudit,
    pub split: SplitSummary,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub commutator: Option<CommutatorSummary>,
    pub pass: bool,
    pub failures: Vec<String>,
}

/// Batch audit of a decomposition: stability trials on its σ vectors,
/// split/angle trials on perturbed copies of its layers, and Gram
/// commutators of the reconstructed weights.
pub fn verify_decomposition(
    dec: &JointDecomposition,
    trials: usize,
    seed: u64,
) -> Result<AnalysisReport> {
    let sigmas: Vec<Vec<f64>> = dec
        .categories
        .iter()
        .flat_map(|c| c.layers.iter().map(|l| l.sigma.clone()))
        .collect();
    let weyl = if dec.n() >= 2 {
        weyl_audit(trials, seed, Some(&sigmas))?
    } else {
        return Err(AnalysisError::Invalid("n must be at least 2".into()));
    };
    let split = split_audit(dec, trials, derive_seed(seed, u64::MAX))?;
    let stack = WeightStack {
        categories: dec
            .categories
            .iter()
            .enumerate()
            .map(|(c, cat)| {
                Ok(CategoryStack {
                    label: cat.label.clone(),
                    layers: (0..cat.layers.len())
                        .map(|i| dec.reconstruct_layer(c, i))
                        .collect::<Result<Vec<_>, _>>()?,
                })
            })
            .collect::<Result<Vec<_>>>()?,
    };
    let commutator = if stack.num_matrices() >= 2 {
        Some(commutator_summary(&stack)?)
    } else {
        None
    };

    let mut failures = Vec::new();
    if weyl.violations > 0 {
        failures.push(format!("{} stability-bound violations", weyl.violations));
    }
    if split.max_latent_residual != 0.0 {
        failures.push(format!("latent residual {:e}", split.max_latent_residual));
    }
    if split.max_angular_residual > ANGULAR_TOL {
        failures.push(format!("angular residual {:e}", split.max_angular_residual));
    }
    if !split.small_angle_pass {
        failures.push(format!(
            "small-angle residual ratio {:e} > 1",
            split.max_small_angle_ratio
        ));
    }
    Ok(AnalysisReport {
        pass: failures.is_empty(),
        weyl,
        split,
        commutator,
        failures,
    })
}
