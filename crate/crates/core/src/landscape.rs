//! Loss surfaces on a 2-D slice through parameter space.
//!
//! Directions come either from PCA over a training trajectory or from
//! filter-normalized Gaussians; the grid evaluates the loss at
//! `θ* + α·d₁ + β·d₂`.

use std::io::Write;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{self, LinalgError, Matrix};
use crate::rng::{derive_seed, SplitMix64};
use crate::train::{train_run_full, TrainConfig, TrainError, TrainOutcome};

#[derive(Debug, Error)]
pub enum LandscapeError {
    #[error("need at least 3 checkpoints, got {0}")]
    TooFewCheckpoints(usize),
    #[error("checkpoint {index} has {got} parameters, expected {expected}")]
    Ragged {
        index: usize,
        got: usize,
        expected: usize,
    },
    #[error("trajectory has fewer than 2 independent directions")]
    Degenerate,
    #[error("invalid grid: {0}")]
    Grid(String),
    #[error("layer sizes sum to {sum}, parameter vector has {len}")]
    Blocks { sum: usize, len: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("loss evaluation failed: {0}")]
    Eval(String),
    #[error(transparent)]
    Train(#[from] TrainError),
}

pub type Result<T, E = LandscapeError> = std::result::Result<T, E>;

pub const DEFAULT_GRID: usize = 41;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Directions {
    pub d1: Vec<f64>,
    pub d2: Vec<f64>,
    /// Fraction of trajectory variance along each direction (PCA only).
    pub explained: Option<[f64; 2]>,
}

/// Top two principal directions of the mean-centred trajectory.
///
/// Uses the Gram trick: eigen-decompose the `K×K` matrix of centred
/// checkpoint inner products instead of the `P×P` covariance. A rank-1
/// trajectory gets a deterministic second direction orthogonal to the first
/// (explained variance 0).
pub fn principal_directions(checkpoints: &[Vec<f64>]) -> Result<Directions> {
    let k = checkpoints.len();
    if k < 3 {
        return Err(LandscapeError::TooFewCheckpoints(k));
    }
    let p = checkpoints[0].len();
    for (index, c) in checkpoints.iter().enumerate() {
        if c.len() != p {
            return Err(LandscapeError::Ragged {
                index,
                got: c.len(),
                expected: p,
            });
        }
    }
    let mut mean = vec![0.0; p];
    for c in checkpoints {
        mean.iter_mut().zip(c).for_each(|(m, x)| *m += x / k as f64);
    }
    let centred: Vec<Vec<f64>> = checkpoints
        .iter()
        .map(|c| c.iter().zip(&mean).map(|(a, b)| a - b).collect())
        .collect();
    let gram = Matrix::from_fn(k, k, |i, j| linalg::dot(&centred[i], &centred[j]));
    let eig = linalg::eigh_symmetric(&gram.symmetrized())?;
    let total: f64 = eig.values.iter().map(|v| v.max(0.0)).sum();
    // Relative to the raw checkpoint size so rounding in the mean of
    // identical checkpoints still counts as zero variance.
    let scale = checkpoints
        .iter()
        .map(|c| linalg::dot(c, c))
        .fold(0.0, f64::max);
    if !(total > 1e-24 * scale) {
        return Err(LandscapeError::Degenerate);
    }
    let direction = |j: usize| -> Vec<f64> {
        let mut d = vec![0.0; p];
        for (i, c) in centred.iter().enumerate() {
            let w = eig.vectors[(i, j)];
            d.iter_mut().zip(c).for_each(|(o, x)| *o += w * x);
        }
        let nrm = linalg::norm2(&d);
        d.iter_mut().for_each(|x| *x /= nrm);
        d
    };
    let d1 = direction(0);
    let second = eig.values[1].max(0.0);
    let d2 = if second > 1e-12 * eig.values[0] {
        direction(1)
    } else {
        orthogonal_to(&d1)?
    };
    Ok(Directions {
        d1,
        d2,
        explained: Some([eig.values[0].max(0.0) / total, second / total]),
    })
}

/// Unit vector orthogonal to `d`: the coordinate axis least aligned with it,
/// with the `d` component removed.
fn orthogonal_to(d: &[f64]) -> Result<Vec<f64>> {
    if d.len() < 2 {
        return Err(LandscapeError::Degenerate);
    }
    let k = (0..d.len())
        .min_by(|&a, &b| d[a].abs().total_cmp(&d[b].abs()))
        .unwrap();
    let mut e: Vec<f64> = d.iter().map(|x| -d[k] * x).collect();
    e[k] += 1.0;
    let nrm = linalg::norm2(&e);
    Ok(e.into_iter().map(|x| x / nrm).collect())
}

/// Gaussian direction rescaled block by block so each block has the same
/// Frobenius norm as the matching block of `theta`. Zero blocks stay zero.
pub fn filter_normalized_random(theta: &[f64], blocks: &[usize], seed: u64) -> Result<Vec<f64>> {
    let sum: usize = blocks.iter().sum();
    if sum != theta.len() {
        return Err(LandscapeError::Blocks {
            sum,
            len: theta.len(),
        });
    }
    let mut rng = SplitMix64::new(seed);
    let mut d = rng.normals(theta.len(), 1.0);
    let mut off = 0;
    for &len in blocks {
        let target = linalg::norm2(&theta[off..off + len]);
        let seg = &mut d[off..off + len];
        let nrm = linalg::norm2(seg);
        if target == 0.0 {
            warn!("parameter block at offset {off} has zero norm; direction zeroed there");
        }
        let f = if nrm > 0.0 { target / nrm } else { 0.0 };
        seg.iter_mut().for_each(|x| *x *= f);
        off += len;
    }
    Ok(d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    /// Points per axis (odd, so the centre lies on the grid).
    pub points: usize,
    /// Half-width of the `[-h, h]²` square.
    pub half_width: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            points: DEFAULT_GRID,
            half_width: 1.0,
        }
    }
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if self.points < 3 || self.points.is_multiple_of(2) {
            return Err(LandscapeError::Grid(format!(
                "points must be odd and at least 3, got {}",
                self.points
            )));
        }
        if !(self.half_width > 0.0 && self.half_width.is_finite()) {
            return Err(LandscapeError::Grid("half_width must be positive".into()));
        }
        Ok(())
    }

    /// `(i − mid)/mid · h`; the middle index is exactly zero.
    pub fn axis(&self) -> Vec<f64> {
        let mid = (self.points / 2) as f64;
        (0..self.points)
            .map(|i| (i as f64 - mid) / mid * self.half_width)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossGrid {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// Row-major over (alpha, beta); non-finite cells hold NaN.
    pub losses: Vec<f64>,
    pub nonfinite: Vec<bool>,
}

impl LossGrid {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.losses[i * self.betas.len() + j]
    }

    pub fn center(&self) -> f64 {
        let mid = self.alphas.len() / 2;
        self.at(mid, mid)
    }

    pub fn nonfinite_count(&self) -> usize {
        self.nonfinite.iter().filter(|&&b| b).count()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["alpha", "beta", "loss", "flag"])?;
        for (i, a) in self.alphas.iter().enumerate() {
            for (j, b) in self.betas.iter().enumerate() {
                let k = i * self.betas.len() + j;
                let flag = if self.nonfinite[k] { "nonfinite" } else { "ok" };
                w.write_record([
                    a.to_string(),
                    b.to_string(),
                    self.losses[k].to_string(),
                    flag.into(),
                ])?;
            }
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

/// Evaluates `loss(θ* + α d₁ + β d₂)` on the grid. The centre cell is
/// evaluated at `θ*` itself (no arithmetic on the point), so it matches the
/// loss at the trained parameters bit for bit.
pub fn loss_grid<F>(
    theta: &[f64],
    dirs: &Directions,
    grid: GridSpec,
    parallel: bool,
    loss: F,
) -> Result<LossGrid>
where
    F: Fn(&[f64]) -> Result<f64, String> + Sync,
{
    grid.validate()?;
    if dirs.d1.len() != theta.len() || dirs.d2.len() != theta.len() {
        return Err(LandscapeError::Grid(
            "direction length differs from θ".into(),
        ));
    }
    let axis = grid.axis();
    let mid = grid.points / 2;
    let cells: Vec<(usize, usize)> = (0..grid.points)
        .flat_map(|i| (0..grid.points).map(move |j| (i, j)))
        .collect();
    let eval = |&(i, j): &(usize, usize)| -> Result<f64> {
        let value = if i == mid && j == mid {
            loss(theta)
        } else {
            let (a, b) = (axis[i], axis[j]);
            let point: Vec<f64> = theta
                .iter()
                .zip(dirs.d1.iter().zip(&dirs.d2))
                .map(|(t, (x, y))| t + a * x + b * y)
                .collect();
            loss(&point)
        };
        value.map_err(LandscapeError::Eval)
    };
    let values: Vec<f64> = if parallel {
        cells.par_iter().map(eval).collect::<Result<_>>()?
    } else {
        cells.iter().map(eval).collect::<Result<_>>()?
    };
    let nonfinite: Vec<bool> = values.iter().map(|v| !v.is_finite()).collect();
    let bad = nonfinite.iter().filter(|&&b| b).count();
    if bad > 0 {
        warn!("{bad} grid cells produced a non-finite loss");
    }
    Ok(LossGrid {
        alphas: axis.clone(),
        betas: axis,
        losses: values
            .into_iter()
            .map(|v| if v.is_finite() { v } else { f64::NAN })
            .collect(),
        nonfinite,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AxisCurvature {
    /// Second-derivative estimate from a quadratic fit along each axis.
    pub alpha: f64,
    pub beta: f64,
    /// Loss increase from the centre to the edge, averaged over the four
    /// axis endpoints.
    pub edge_rise: f64,
}

/// Least-squares fit `ℓ(t) ≈ c₀ + c₁t + c₂t²` along a grid line through the
/// centre; returns `2c₂`.
fn quadratic_curvature(ts: &[f64], ys: &[f64]) -> Result<f64> {
    let pts: Vec<(f64, f64)> = ts
        .iter()
        .zip(ys)
        .filter(|(_, y)| y.is_finite())
        .map(|(&t, &y)| (t, y))
        .collect();
    if pts.len() < 3 {
        return Err(LandscapeError::Grid(
            "fewer than 3 finite points on an axis".into(),
        ));
    }
    let x = Matrix::from_fn(pts.len(), 3, |r, c| pts[r].0.powi(c as i32));
    let y: Vec<f64> = pts.iter().map(|p| p.1).collect();
    let (q, r) = linalg::qr_thin(&x)?;
    let qty = q.t_matvec(&y);
    let c2 = qty[2] / r[(2, 2)];
    Ok(2.0 * c2)
}

pub fn axis_curvature(grid: &LossGrid) -> Result<AxisCurvature> {
    let mid = grid.alphas.len() / 2;
    let along_alpha: Vec<f64> = (0..grid.alphas.len()).map(|i| grid.at(i, mid)).collect();
    let along_beta: Vec<f64> = (0..grid.betas.len()).map(|j| grid.at(mid, j)).collect();
    let last = grid.alphas.len() - 1;
    let edges = [
        grid.at(0, mid),
        grid.at(last, mid),
        grid.at(mid, 0),
        grid.at(mid, last),
    ];
    let finite: Vec<f64> = edges.into_iter().filter(|v| v.is_finite()).collect();
    let edge_rise = if finite.is_empty() {
        f64::NAN
    } else {
        finite.iter().sum::<f64>() / finite.len() as f64 - grid.center()
    };
    Ok(AxisCurvature {
        alpha: quadratic_curvature(&grid.alphas, &along_alpha)?,
        beta: quadratic_curvature(&grid.betas, &along_beta)?,
        edge_rise,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeSummary {
    pub directions: String,
    /// `per-layer` for filter-normalized directions, `unit` for PCA.
    pub normalization: String,
    pub points: usize,
    pub half_width: f64,
    pub center_loss: f64,
    pub explained_variance: Option<[f64; 2]>,
    pub curvature: AxisCurvature,
    pub nonfinite_cells: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DirectionKind {
    /// PCA when the run left at least 3 checkpoints, random otherwise.
    #[default]
    Auto,
    Pca,
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LandscapeConfig {
    pub train: TrainConfig,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default)]
    pub directions: DirectionKind,
    #[serde(default = "default_parallel")]
    pub parallel: bool,
}

fn default_parallel() -> bool {
    true
}

impl LandscapeConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| TrainError::Config(e.to_string()))?;
        cfg.train.validate()?;
        cfg.grid.validate()?;
        Ok(cfg)
    }
}

pub struct LandscapeRun {
    pub grid: LossGrid,
    pub summary: LandscapeSummary,
    pub outcome: TrainOutcome,
}

/// Trains per `cfg.train`, then evaluates the eval-split loss on a grid
/// around the final adapter parameters.
pub fn run_landscape(cfg: &LandscapeConfig) -> Result<LandscapeRun> {
    cfg.grid.validate()?;
    let outcome = train_run_full(&cfg.train)?;
    let theta = outcome.model.flat_params();
    let checkpoints = &outcome.report.checkpoints;
    let use_pca = match cfg.directions {
        DirectionKind::Pca => true,
        DirectionKind::Random => false,
        DirectionKind::Auto => checkpoints.len() >= 3,
    };
    let (dirs, provenance) = if use_pca {
        (principal_directions(checkpoints)?, "pca")
    } else {
        let blocks = outcome.model.param_block_sizes();
        let seed = cfg.train.seed;
        let d1 = filter_normalized_random(&theta, &blocks, derive_seed(seed, 0xd1))?;
        let d2 = filter_normalized_random(&theta, &blocks, derive_seed(seed, 0xd2))?;
        (
            Directions {
                d1,
                d2,
                explained: None,
            },
            "filter-random",
        )
    };
    let model = &outcome.model;
    let eval = &outcome.task.eval;
    let seq = outcome.task.seq_len;
    let loss = |p: &[f64]| -> Result<f64, String> {
        let mut m = model.clone();
        m.set_flat_params(p).map_err(|e| e.to_string())?;
        Ok(m.evaluate(eval, seq).0)
    };
    let grid = loss_grid(&theta, &dirs, cfg.grid, cfg.parallel, loss)?;
    let summary = LandscapeSummary {
        directions: provenance.into(),
        normalization: if use_pca { "unit" } else { "per-layer" }.into(),
        points: cfg.grid.points,
        half_width: cfg.grid.half_width,
        center_loss: grid.center(),
        explained_variance: dirs.explained,
        curvature: axis_curvature(&grid)?,
        nonfinite_cells: grid.nonfinite_count(),
    };
    Ok(LandscapeRun {
        grid,
        summary,
        outcome,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axis_has_exact_zero_center() {
        let g = GridSpec::default();
        let a = g.axis();
        assert_eq!(a.len(), 41);
        assert_eq!(a[20], 0.0);
        assert_eq!(a[0], -1.0);
        assert_eq!(a[40], 1.0);
        assert!(GridSpec {
            points: 40,
            half_width: 1.0
        }
        .validate()
        .is_err());
    }

    #[test]
    fn quadratic_bowl_curvature() {
        let theta = vec![0.3, -0.2, 0.5];
        let dirs = Directions {
            d1: vec![1.0, 0.0, 0.0],
            d2: vec![0.0, 1.0, 0.0],
            explained: None,
        };
        let loss = |p: &[f64]| -> Result<f64, String> {
            Ok(1.5 * (p[0] - 0.3).powi(2) + 0.5 * (p[1] + 0.2).powi(2) + p[2])
        };
        let g = loss_grid(&theta, &dirs, GridSpec::default(), false, loss).unwrap();
        let gp = loss_grid(&theta, &dirs, GridSpec::default(), true, loss).unwrap();
        assert_eq!(g, gp);
        assert_eq!(g.center().to_bits(), loss(&theta).unwrap().to_bits());
        let c = axis_curvature(&g).unwrap();
        assert!((c.alpha - 3.0).abs() < 1e-9);
        assert!((c.beta - 1.0).abs() < 1e-9);
    }

    #[test]
    fn nonfinite_cells_are_flagged() {
        let theta = vec![0.0, 0.0];
        let dirs = Directions {
            d1: vec![1.0, 0.0],
            d2: vec![0.0, 1.0],
            explained: None,
        };
        let g = loss_grid(
            &theta,
            &dirs,
            GridSpec {
                points: 5,
                half_width: 1.0,
            },
            false,
            |p| {
                Ok(if p[0] > 0.9 {
                    f64::INFINITY
                } else {
                    p[0] * p[0]
                })
            },
        )
        .unwrap();
        assert_eq!(g.nonfinite_count(), 5);
        assert!(g.at(4, 0).is_nan());
    }

    #[test]
    fn filter_normalization_matches_block_norms() {
        let theta = vec![3.0, 4.0, 0.0, 0.0, 1.0];
        let d = filter_normalized_random(&theta, &[2, 2, 1], 9).unwrap();
        assert!((linalg::norm2(&d[..2]) - 5.0).abs() < 1e-12);
        assert_eq!(&d[2..4], &[0.0, 0.0]);
        assert!((d[4].abs() - 1.0).abs() < 1e-12);
        assert!(filter_normalized_random(&theta, &[2, 2], 9).is_err());
    }

    #[test]
    fn pca_recovers_trajectory_plane() {
        // Planar trajectory in span{e0, e2} with most spread along e0.
        let ck: Vec<Vec<f64>> = (0..6)
            .map(|k| {
                let t = k as f64;
                vec![3.0 * t, 0.0, (t * 1.3).sin(), 0.0]
            })
            .collect();
        let d = principal_directions(&ck).unwrap();
        // Projection residual of each (centred) checkpoint onto span{d1, d2}.
        let mean: Vec<f64> = (0..4)
            .map(|i| ck.iter().map(|c| c[i]).sum::<f64>() / 6.0)
            .collect();
        for c in &ck {
            let x: Vec<f64> = c.iter().zip(&mean).map(|(a, b)| a - b).collect();
            let (p1, p2) = (linalg::dot(&x, &d.d1), linalg::dot(&x, &d.d2));
            let r: Vec<f64> = (0..4).map(|i| x[i] - p1 * d.d1[i] - p2 * d.d2[i]).collect();
            assert!(linalg::norm2(&r) <= 1e-8 * (1.0 + linalg::norm2(&x)));
        }
        assert!(linalg::dot(&d.d1, &d.d2).abs() < 1e-8);
        let ex = d.explained.unwrap();
        assert!(ex[0] > ex[1]);
        assert!((ex[0] + ex[1] - 1.0).abs() < 1e-12);
        assert!(matches!(
            principal_directions(&ck[..2]),
            Err(LandscapeError::TooFewCheckpoints(2))
        ));
    }

    #[test]
    fn pca_line_and_constant_trajectories() {
        let v = [1.0, -2.0, 0.5];
        let line: Vec<Vec<f64>> = (0..5)
            .map(|k| v.iter().map(|x| 0.1 + k as f64 * x).collect())
            .collect();
        let d = principal_directions(&line).unwrap();
        let cos = linalg::dot(&d.d1, &v) / linalg::norm2(&v);
        assert!((cos.abs() - 1.0).abs() < 1e-12);
        assert!((d.explained.unwrap()[0] - 1.0).abs() < 1e-12);
        assert!(linalg::dot(&d.d1, &d.d2).abs() < 1e-12);
        assert!((linalg::norm2(&d.d2) - 1.0).abs() < 1e-12);
        let same = vec![vec![1.0, 2.0]; 4];
        assert!(matches!(
            principal_directions(&same),
            Err(LandscapeError::Degenerate)
        ));
    }

    #[test]
    fn random_directions_are_nearly_orthogonal() {
        let theta: Vec<f64> = (0..2000).map(|i| (i as f64 * 0.37).sin()).collect();
        let blocks = [1000, 1000];
        let a = filter_normalized_random(&theta, &blocks, 1).unwrap();
        let b = filter_normalized_random(&theta, &blocks, 2).unwrap();
        let cos = linalg::dot(&a, &b) / (linalg::norm2(&a) * linalg::norm2(&b));
        assert!(cos.abs() < 0.5);
        let zero = filter_normalized_random(&[0.0; 6], &[3, 3], 4).unwrap();
        assert!(zero.iter().all(|&x| x == 0.0));
    }
}
