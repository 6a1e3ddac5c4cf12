//! Everything one worker computes before talking to the master.
//!
//! A worker fits a plain lasso pre-estimate, turns it into adaptive penalty
//! weights `ω_k = 1/|β̂ᵖʳᵉ_k|^ξ`, refits the adaptive lasso on the coordinates
//! the pre-estimate kept, and summarizes the fit by the diagonal of the
//! estimated inverse covariance of its local estimator.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, WaveError};
use crate::model::{eval_all, linear_predict, DataShard, LossModel};
use crate::solver::{lambda_max, mean_loss, solve_path, weighted_gram, AdmmConfig};

/// Entries of the precision diagonal are clamped to at least this value.
pub const PRECISION_FLOOR: f64 = 1e-12;

/// Per-coordinate adaptive-lasso weights. Coordinates whose pre-estimate is
/// exactly zero carry an infinite weight and are listed in `excluded`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveWeights {
    pub omega: Vec<f64>,
    pub xi: f64,
    pub excluded: Vec<usize>,
}

impl AdaptiveWeights {
    /// Unit weights (plain lasso).
    pub fn uniform(p: usize) -> Self {
        Self {
            omega: vec![1.0; p],
            xi: 1.0,
            excluded: Vec::new(),
        }
    }

    pub fn p(&self) -> usize {
        self.omega.len()
    }

    /// Coordinates with a finite weight, ascending.
    pub fn active(&self) -> Vec<usize> {
        (0..self.p()).filter(|&k| self.omega[k].is_finite()).collect()
    }
}

/// `ω_k = 1/|β_k|^ξ`; zero entries map to `∞` and are excluded.
pub fn adaptive_weights(beta_pre: &[f64], xi: f64) -> AdaptiveWeights {
    assert!(xi > 0.0, "xi must be positive");
    let omega: Vec<f64> = beta_pre
        .iter()
        .map(|&b| if b == 0.0 { f64::INFINITY } else { b.abs().powf(-xi) })
        .collect();
    let excluded = beta_pre
        .iter()
        .enumerate()
        .filter_map(|(k, &b)| (b == 0.0).then_some(k))
        .collect();
    AdaptiveWeights { omega, xi, excluded }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tuning {
    /// `(1/n) Σ L + log(n)·d/n` on the worker's own data.
    LocalBic,
    /// K-fold cross-validated mean loss over contiguous folds.
    KFoldCv(usize),
}

/// How λ grids are obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LambdaGrid {
    /// `points` log-spaced values from λ_max down to `min_ratio · λ_max`.
    Auto { points: usize, min_ratio: f64 },
    Explicit(Vec<f64>),
}

impl Default for LambdaGrid {
    fn default() -> Self {
        LambdaGrid::Auto {
            points: 50,
            min_ratio: 1e-3,
        }
    }
}

impl LambdaGrid {
    /// Concrete descending grid for `shard` under the given penalty weights.
    pub fn resolve(&self, shard: &DataShard, model: &LossModel, weights: &AdaptiveWeights) -> Result<Vec<f64>> {
        match self {
            LambdaGrid::Explicit(v) => {
                if v.is_empty() {
                    return Err(WaveError::Config("lambda grid is empty".into()));
                }
                Ok(v.clone())
            }
            &LambdaGrid::Auto { points, min_ratio } => {
                let active = weights.active();
                if active.is_empty() {
                    return Ok(vec![1.0]);
                }
                let sub = shard.select_columns(&active);
                let w: Vec<f64> = active.iter().map(|&k| weights.omega[k]).collect();
                let top = lambda_max(&sub, model, &w)?;
                log_grid(top.max(f64::EPSILON), points, min_ratio)
            }
        }
    }
}

/// `points` log-spaced values from `top` down to `top · min_ratio`.
pub fn log_grid(top: f64, points: usize, min_ratio: f64) -> Result<Vec<f64>> {
    if points == 0 || !(min_ratio > 0.0 && min_ratio <= 1.0) || !(top > 0.0) {
        return Err(WaveError::Config(format!(
            "invalid grid: top {top}, {points} points, ratio {min_ratio}"
        )));
    }
    if points == 1 {
        return Ok(vec![top]);
    }
    let step = min_ratio.ln() / (points - 1) as f64;
    Ok((0..points).map(|i| top * (step * i as f64).exp()).collect())
}

/// Output of [`select_lambda`].
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaChoice {
    pub lambda: f64,
    pub beta: Vec<f64>,
    /// Criterion value for each grid point, in descending-λ order.
    pub criterion: Vec<f64>,
}

fn checked_grid(grid: &[f64]) -> Result<Vec<f64>> {
    if grid.is_empty() {
        return Err(WaveError::Config("lambda grid is empty".into()));
    }
    if let Some(bad) = grid.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
        return Err(WaveError::Config(format!("lambda grid values must be positive, got {bad}")));
    }
    let mut g = grid.to_vec();
    g.sort_by(|a, b| b.total_cmp(a));
    Ok(g)
}

/// Path of fits over `grid` (descending) with excluded coordinates fixed at
/// zero. Returned vectors have the full length p.
fn restricted_path(
    shard: &DataShard,
    model: &LossModel,
    weights: &AdaptiveWeights,
    grid: &[f64],
    cfg: &AdmmConfig,
    init: Option<&[f64]>,
) -> Result<Vec<Vec<f64>>> {
    let p = shard.p();
    let active = weights.active();
    if active.is_empty() {
        return Ok(vec![vec![0.0; p]; grid.len()]);
    }
    let sub = shard.select_columns(&active);
    let w: Vec<f64> = active.iter().map(|&k| weights.omega[k]).collect();
    let init_sub: Option<Vec<f64>> = init.map(|b| active.iter().map(|&k| b[k]).collect());
    let path = solve_path(&sub, model, grid, &w, cfg, init_sub.as_deref())?;
    Ok(path
        .into_iter()
        .map(|b| {
            let mut full = vec![0.0; p];
            for (&k, v) in active.iter().zip(b) {
                full[k] = v;
            }
            full
        })
        .collect())
}

/// Index of the smallest criterion value; ties go to the earliest entry,
/// which on a descending grid is the larger λ.
fn argmin_first(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v < values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn bic(shard: &DataShard, model: &LossModel, beta: &[f64]) -> Result<f64> {
    let n = shard.n() as f64;
    let d = beta.iter().filter(|b| **b != 0.0).count() as f64;
    Ok(mean_loss(shard, model, beta)? + n.ln() * d / n)
}

/// Picks λ from `grid` by the given criterion and returns it with its fit.
pub fn select_lambda(
    shard: &DataShard,
    model: &LossModel,
    weights: &AdaptiveWeights,
    grid: &[f64],
    tuning: Tuning,
    cfg: &AdmmConfig,
) -> Result<LambdaChoice> {
    select_lambda_from(shard, model, weights, grid, tuning, cfg, None)
}

fn select_lambda_from(
    shard: &DataShard,
    model: &LossModel,
    weights: &AdaptiveWeights,
    grid: &[f64],
    tuning: Tuning,
    cfg: &AdmmConfig,
    init: Option<&[f64]>,
) -> Result<LambdaChoice> {
    let grid = checked_grid(grid)?;
    if weights.p() != shard.p() {
        return Err(WaveError::Dimension {
            what: "adaptive weights",
            expected: shard.p(),
            found: weights.p(),
        });
    }
    let path = restricted_path(shard, model, weights, &grid, cfg, init)?;
    let criterion = match tuning {
        Tuning::LocalBic => path
            .iter()
            .map(|b| bic(shard, model, b))
            .collect::<Result<Vec<_>>>()?,
        Tuning::KFoldCv(k) => cv_errors(shard, model, weights, &grid, k, cfg)?,
    };
    let best = argmin_first(&criterion);
    Ok(LambdaChoice {
        lambda: grid[best],
        beta: path[best].clone(),
        criterion,
    })
}

fn cv_errors(
    shard: &DataShard,
    model: &LossModel,
    weights: &AdaptiveWeights,
    grid: &[f64],
    k: usize,
    cfg: &AdmmConfig,
) -> Result<Vec<f64>> {
    let n = shard.n();
    if k < 2 || n < k {
        return Err(WaveError::Config(format!(
            "{k}-fold cross-validation needs k >= 2 and at least k rows (have {n})"
        )));
    }
    let mut total = vec![0.0; grid.len()];
    for f in 0..k {
        let lo = f * n / k;
        let hi = (f + 1) * n / k;
        let test: Vec<usize> = (lo..hi).collect();
        let train: Vec<usize> = (0..lo).chain(hi..n).collect();
        let train_shard = shard.select_rows(&train);
        let test_shard = shard.select_rows(&test);
        let path = restricted_path(&train_shard, model, weights, grid, cfg, None)?;
        for (t, b) in total.iter_mut().zip(&path) {
            *t += mean_loss(&test_shard, model, b)?;
        }
    }
    Ok(total.into_iter().map(|t| t / k as f64).collect())
}

/// Plain-lasso pre-estimate at the tuned grid point.
pub fn fit_pre_estimate(
    shard: &DataShard,
    model: &LossModel,
    grid: &[f64],
    tuning: Tuning,
    cfg: &AdmmConfig,
) -> Result<Vec<f64>> {
    Ok(select_lambda(shard, model, &AdaptiveWeights::uniform(shard.p()), grid, tuning, cfg)?.beta)
}

/// Local adaptive-lasso fit and the intermediate quantities behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalFit {
    pub beta: Vec<f64>,
    /// Selected λ; `None` when the pre-estimate was identically zero.
    pub lambda: Option<f64>,
    pub pre_estimate: Vec<f64>,
    pub weights: AdaptiveWeights,
    /// Set when every coordinate was excluded and the fit is the zero vector.
    pub empty_support: bool,
}

/// Adaptive lasso on one shard: pre-estimate, weights, tuned refit.
pub fn fit_local(
    shard: &DataShard,
    model: &LossModel,
    xi: f64,
    grid: &LambdaGrid,
    tuning: Tuning,
    cfg: &AdmmConfig,
) -> Result<LocalFit> {
    if !(xi > 0.0 && xi.is_finite()) {
        return Err(WaveError::Config(format!("xi must be positive, got {xi}")));
    }
    shard.validate_for(model)?;
    let p = shard.p();
    let unit = AdaptiveWeights::uniform(p);
    let pre_grid = grid.resolve(shard, model, &unit)?;
    let pre_estimate = select_lambda(shard, model, &unit, &pre_grid, tuning, cfg)?.beta;
    let weights = adaptive_weights(&pre_estimate, xi);
    if weights.excluded.len() == p {
        log::warn!("worker {}: pre-estimate is identically zero", shard.worker_id);
        return Ok(LocalFit {
            beta: vec![0.0; p],
            lambda: None,
            pre_estimate,
            weights,
            empty_support: true,
        });
    }
    let ada_grid = grid.resolve(shard, model, &weights)?;
    let choice = select_lambda_from(shard, model, &weights, &ada_grid, tuning, cfg, Some(&pre_estimate))?;
    Ok(LocalFit {
        beta: choice.beta,
        lambda: Some(choice.lambda),
        pre_estimate,
        weights,
        empty_support: false,
    })
}

/// Diagonal precision estimate shipped to the master.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaDiag {
    pub values: Vec<f64>,
    /// Coordinates whose estimate fell below [`PRECISION_FLOOR`] and were clamped.
    pub clamped: Vec<usize>,
}

/// Plug-in Hessian `Ψ̂ = (1/n) Xᵀ diag(L″) X` and gradient second moment
/// `Φ̂ = (1/n) Xᵀ diag(L′²) X` at `beta`.
pub fn plug_in_moments(shard: &DataShard, model: &LossModel, beta: &[f64]) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let z = linear_predict(shard, beta)?;
    let vals = eval_all(model, shard.y(), &z)?;
    let n = shard.n() as f64;
    let d2: Vec<f64> = vals.iter().map(|v| v.d2 / n).collect();
    let d1sq: Vec<f64> = vals.iter().map(|v| v.d1 * v.d1 / n).collect();
    Ok((weighted_gram(shard.x(), &d2), weighted_gram(shard.x(), &d1sq)))
}

/// `diag(Ψ (Φ + ridge·I)⁻¹ Ψ)`.
pub fn sandwich_diag(psi: &DMatrix<f64>, phi: &DMatrix<f64>, ridge: f64) -> Result<Vec<f64>> {
    let m = sandwich_solve(psi, phi, ridge)?;
    Ok((0..psi.nrows())
        .map(|l| psi.row(l).iter().zip(m.column(l).iter()).map(|(a, b)| a * b).sum())
        .collect())
}

/// `(Φ + ridge·I)⁻¹ Ψ`
fn sandwich_solve(psi: &DMatrix<f64>, phi: &DMatrix<f64>, ridge: f64) -> Result<DMatrix<f64>> {
    let mut a = phi.clone();
    for i in 0..a.nrows() {
        a[(i, i)] += ridge;
    }
    let chol = Cholesky::new(a).ok_or_else(|| {
        WaveError::Singular("gradient second-moment matrix; supply a positive ridge".into())
    })?;
    Ok(chol.solve(psi))
}

fn default_ridge(shard: &DataShard, phi: &DMatrix<f64>, ridge: Option<f64>) -> Result<f64> {
    let p = shard.p();
    match ridge {
        Some(r) if !(r >= 0.0 && r.is_finite()) => {
            Err(WaveError::Config(format!("ridge must be nonnegative, got {r}")))
        }
        Some(r) if r == 0.0 && p >= shard.n() => Err(WaveError::Singular(format!(
            "p = {p} >= n = {}: the plug-in covariance needs a positive ridge",
            shard.n()
        ))),
        Some(r) => Ok(r),
        None if p >= shard.n() => Ok(1e-6 * phi.trace() / p as f64),
        None => Ok(0.0),
    }
}

/// Full plug-in precision matrix of the local estimator: `Ψ̂` for canonical
/// GLMs and `Ψ̂(Φ̂ + ridge·I)⁻¹Ψ̂` otherwise. Used only by the full
/// least-squares reference aggregator.
pub fn precision_matrix(
    shard: &DataShard,
    model: &LossModel,
    beta_hat: &[f64],
    ridge: Option<f64>,
) -> Result<DMatrix<f64>> {
    let (psi, phi) = plug_in_moments(shard, model, beta_hat)?;
    if model.family().is_canonical_glm() {
        return Ok(psi);
    }
    let r = default_ridge(shard, &phi, ridge)?;
    let m = sandwich_solve(&psi, &phi, r)?;
    let s = &psi * m;
    Ok((&s + s.transpose()) * 0.5)
}

/// Diagonal of the plug-in inverse covariance of the local estimator.
///
/// Canonical GLMs (least squares, logistic, Poisson) have `Φ = Ψ`, so the
/// diagonal is `(1/n) Σᵢ L″ᵢ x²ᵢₗ` and no inverse is formed. The Huber loss
/// uses the full sandwich `diag(Ψ̂(Φ̂ + ridge·I)⁻¹Ψ̂)`; `ridge = None` picks
/// `1e-6·tr(Φ̂)/p` when `p ≥ n` and zero otherwise.
pub fn estimate_lambda_diag(
    shard: &DataShard,
    model: &LossModel,
    beta_hat: &[f64],
    ridge: Option<f64>,
) -> Result<LambdaDiag> {
    let raw = if model.family().is_canonical_glm() {
        let z = linear_predict(shard, beta_hat)?;
        let vals = eval_all(model, shard.y(), &z)?;
        let n = shard.n() as f64;
        let d2 = DVector::from_iterator(vals.len(), vals.iter().map(|v| v.d2));
        let sq = shard.x().map(|v| v * v);
        (sq.tr_mul(&d2) / n).as_slice().to_vec()
    } else {
        let (psi, phi) = plug_in_moments(shard, model, beta_hat)?;
        let r = default_ridge(shard, &phi, ridge)?;
        sandwich_diag(&psi, &phi, r)?
    };
    let mut clamped = Vec::new();
    let values = raw
        .into_iter()
        .enumerate()
        .map(|(l, v)| {
            if v >= PRECISION_FLOOR {
                v
            } else {
                clamped.push(l);
                PRECISION_FLOOR
            }
        })
        .collect();
    if !clamped.is_empty() {
        log::warn!(
            "worker {}: precision clamped at {} coordinates",
            shard.worker_id,
            clamped.len()
        );
    }
    Ok(LambdaDiag { values, clamped })
}

/// The two vectors a worker sends to the master, plus its sample count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalSummary {
    pub worker_id: usize,
    pub n_j: usize,
    pub beta_hat: Vec<f64>,
    pub lambda_diag: Vec<f64>,
}

impl LocalSummary {
    pub fn new(worker_id: usize, n_j: usize, beta_hat: Vec<f64>, lambda_diag: Vec<f64>) -> Result<Self> {
        if n_j == 0 {
            return Err(WaveError::InvalidData(format!("worker {worker_id} reports n = 0")));
        }
        if beta_hat.len() != lambda_diag.len() {
            return Err(WaveError::Dimension {
                what: "precision diagonal",
                expected: beta_hat.len(),
                found: lambda_diag.len(),
            });
        }
        if beta_hat.iter().any(|v| !v.is_finite()) {
            return Err(WaveError::InvalidData(format!(
                "worker {worker_id} has a non-finite coefficient"
            )));
        }
        if let Some((coordinate, &value)) = lambda_diag
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v > 0.0 && v.is_finite()))
        {
            return Err(WaveError::DataIntegrity {
                worker_id,
                coordinate,
                value,
            });
        }
        Ok(Self {
            worker_id,
            n_j,
            beta_hat,
            lambda_diag,
        })
    }

    pub fn p(&self) -> usize {
        self.beta_hat.len()
    }
}

/// Settings for one worker's local pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalConfig {
    pub xi: f64,
    pub tuning: Tuning,
    pub lambda_grid: LambdaGrid,
    pub admm: AdmmConfig,
    /// Ridge for the sandwich precision; `None` applies the default rule.
    pub ridge: Option<f64>,
}

impl Default for LocalConfig {
    fn default() -> Self {
        Self {
            xi: 1.0,
            tuning: Tuning::LocalBic,
            lambda_grid: LambdaGrid::default(),
            admm: AdmmConfig::default(),
            ridge: None,
        }
    }
}

/// Worker result: the summary plus diagnostics that stay on the worker.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkerOutput {
    pub summary: LocalSummary,
    pub fit: LocalFit,
    pub clamped: Vec<usize>,
}

/// Fit and summarize one shard.
pub fn run_worker(shard: &DataShard, model: &LossModel, cfg: &LocalConfig) -> Result<WorkerOutput> {
    let fit = fit_local(shard, model, cfg.xi, &cfg.lambda_grid, cfg.tuning, &cfg.admm)?;
    let diag = estimate_lambda_diag(shard, model, &fit.beta, cfg.ridge)?;
    let summary = LocalSummary::new(shard.worker_id, shard.n(), fit.beta.clone(), diag.values)?;
    Ok(WorkerOutput {
        summary,
        fit,
        clamped: diag.clamped,
    })
}
