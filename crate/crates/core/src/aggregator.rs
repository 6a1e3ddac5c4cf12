//! Master-side combination of worker summaries.
//!
//! The WAVE point estimate weights each coordinate of each local estimate by
//! its precision, `ŵ_jl ∝ α_j γ²_jl`. Because the accumulated precision
//! `V = Σ α_j Λ̂_j` is diagonal, the adaptive-L1 sparsification problem
//! separates by coordinate and is solved in closed form.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Result, WaveError};
use crate::model::{support, DataShard, LossModel};
use crate::solver::{solve_weighted_l1, AdmmConfig};
use crate::worker::{adaptive_weights, LocalSummary};

/// Largest dimension accepted by [`full_ls_reference`].
pub const FULL_REFERENCE_MAX_P: usize = 200;

/// Diagonal precision `V` and the per-coordinate variance of `√N(β̃ − β)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceEstimate {
    pub v_diag: Vec<f64>,
    pub var_wave: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateResult {
    pub beta_wave: Vec<f64>,
    pub beta_sparse: Vec<f64>,
    pub nu_hat: f64,
    pub support: Vec<usize>,
    pub ci_halfwidth: Vec<f64>,
    pub alpha: Vec<f64>,
    pub variance: VarianceEstimate,
}

/// Which estimate supplies the adaptive weights `δ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Pilot {
    SimpleAverage,
    Wave,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum NuGrid {
    /// `points` log-spaced values from `min` up to the smallest ν that
    /// zeroes every coordinate.
    Auto { points: usize, min: f64 },
    Explicit(Vec<f64>),
}

impl Default for NuGrid {
    fn default() -> Self {
        NuGrid::Auto {
            points: 100,
            min: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SparseSolver {
    ClosedForm,
    /// Run the generic ADMM solver on the quadratic objective. Slower; kept
    /// for cross-checking the closed form.
    Admm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AggregateConfig {
    pub xi: f64,
    pub nu_grid: NuGrid,
    pub pilot: Pilot,
    pub level: f64,
    pub sparse_solver: SparseSolver,
}

impl Default for AggregateConfig {
    fn default() -> Self {
        Self {
            xi: 1.0,
            nu_grid: NuGrid::default(),
            pilot: Pilot::SimpleAverage,
            level: 0.95,
            sparse_solver: SparseSolver::ClosedForm,
        }
    }
}

fn common_p(summaries: &[LocalSummary]) -> Result<usize> {
    let first = summaries
        .first()
        .ok_or_else(|| WaveError::Config("no worker summaries to aggregate".into()))?;
    let p = first.p();
    for s in summaries {
        if s.beta_hat.len() != p || s.lambda_diag.len() != p {
            return Err(WaveError::Dimension {
                what: "worker summary",
                expected: p,
                found: s.beta_hat.len().max(s.lambda_diag.len()),
            });
        }
    }
    Ok(p)
}

/// `α_j = n_j / N`.
pub fn alpha_weights(summaries: &[LocalSummary]) -> Vec<f64> {
    let total: usize = summaries.iter().map(|s| s.n_j).sum();
    summaries.iter().map(|s| s.n_j as f64 / total as f64).collect()
}

/// Total sample size across workers.
pub fn total_n(summaries: &[LocalSummary]) -> usize {
    summaries.iter().map(|s| s.n_j).sum()
}

/// `Σ_j α_j β̂_j`.
pub fn simple_average(summaries: &[LocalSummary]) -> Result<Vec<f64>> {
    let p = common_p(summaries)?;
    let alpha = alpha_weights(summaries);
    let mut out = vec![0.0; p];
    for (s, a) in summaries.iter().zip(&alpha) {
        for (o, b) in out.iter_mut().zip(&s.beta_hat) {
            *o += a * b;
        }
    }
    Ok(out)
}

/// Variance of one coordinate of `√N β̃`:
/// `Σ_k α_k γ⁴_k σ²_k / (Σ_k α_k γ²_k)²`.
pub fn coordinate_variance(alpha: &[f64], gamma2: &[f64], sigma2: &[f64]) -> f64 {
    let den: f64 = alpha.iter().zip(gamma2).map(|(a, g)| a * g).sum();
    let num: f64 = alpha
        .iter()
        .zip(gamma2)
        .zip(sigma2)
        .map(|((a, g), s)| a * g * g * s)
        .sum();
    num / (den * den)
}

/// Precision-weighted average and its variance estimate.
///
/// Workers ship only the diagonal of their precision, so the local variance
/// of coordinate l is approximated by `1/γ²_jl`.
pub fn wave_point(summaries: &[LocalSummary]) -> Result<(Vec<f64>, VarianceEstimate)> {
    let p = common_p(summaries)?;
    for s in summaries {
        if let Some((coordinate, &value)) = s
            .lambda_diag
            .iter()
            .enumerate()
            .find(|(_, v)| !(**v > 0.0 && v.is_finite()))
        {
            return Err(WaveError::DataIntegrity {
                worker_id: s.worker_id,
                coordinate,
                value,
            });
        }
    }
    let alpha = alpha_weights(summaries);
    let mut beta = vec![0.0; p];
    let mut v_diag = vec![0.0; p];
    let mut var_wave = vec![0.0; p];
    let mut gamma2 = vec![0.0; summaries.len()];
    let mut sigma2 = vec![0.0; summaries.len()];
    for l in 0..p {
        for (j, s) in summaries.iter().enumerate() {
            gamma2[j] = s.lambda_diag[l];
            sigma2[j] = 1.0 / s.lambda_diag[l];
        }
        let v: f64 = alpha.iter().zip(&gamma2).map(|(a, g)| a * g).sum();
        beta[l] = if gamma2.iter().all(|g| *g == gamma2[0]) {
            // The weights collapse to α; use them as is so the result is the
            // simple average bit for bit.
            summaries.iter().zip(&alpha).map(|(s, a)| a * s.beta_hat[l]).sum()
        } else {
            summaries
                .iter()
                .zip(&alpha)
                .zip(&gamma2)
                .map(|((s, a), g)| a * g / v * s.beta_hat[l])
                .sum()
        };
        v_diag[l] = v;
        var_wave[l] = coordinate_variance(&alpha, &gamma2, &sigma2);
    }
    Ok((beta, VarianceEstimate { v_diag, var_wave }))
}

/// Per-coordinate weights `ŵ_jl`, indexed `[worker][coordinate]`.
pub fn wave_weights(summaries: &[LocalSummary]) -> Result<Vec<Vec<f64>>> {
    let p = common_p(summaries)?;
    let alpha = alpha_weights(summaries);
    let v: Vec<f64> = (0..p)
        .map(|l| summaries.iter().zip(&alpha).map(|(s, a)| a * s.lambda_diag[l]).sum())
        .collect();
    Ok(summaries
        .iter()
        .zip(&alpha)
        .map(|(s, a)| (0..p).map(|l| a * s.lambda_diag[l] / v[l]).collect())
        .collect())
}

/// `(Σ α_j Σ̂_j⁻¹)⁻¹ Σ α_j Σ̂_j⁻¹ β̂_j` from full precision matrices.
pub fn full_ls_reference(entries: &[(Vec<f64>, DMatrix<f64>)], alpha: &[f64]) -> Result<Vec<f64>> {
    let (first, _) = entries
        .first()
        .ok_or_else(|| WaveError::Config("no worker summaries to aggregate".into()))?;
    let p = first.len();
    if p > FULL_REFERENCE_MAX_P {
        return Err(WaveError::Config(format!(
            "full reference limited to p <= {FULL_REFERENCE_MAX_P}, got {p}"
        )));
    }
    if alpha.len() != entries.len() {
        return Err(WaveError::Dimension {
            what: "alpha",
            expected: entries.len(),
            found: alpha.len(),
        });
    }
    let mut acc = DMatrix::<f64>::zeros(p, p);
    let mut rhs = DVector::<f64>::zeros(p);
    for ((beta, m), &a) in entries.iter().zip(alpha) {
        if beta.len() != p || m.nrows() != p || m.ncols() != p {
            return Err(WaveError::Dimension {
                what: "precision matrix",
                expected: p,
                found: m.nrows(),
            });
        }
        acc += m * a;
        rhs += (m * DVector::from_column_slice(beta)) * a;
    }
    let chol = Cholesky::new(acc)
        .ok_or_else(|| WaveError::Singular("accumulated precision matrix".into()))?;
    Ok(chol.solve(&rhs).as_slice().to_vec())
}

/// Adaptive weights for the sparsification step, `δ_l = 1/|β̄_l|^ξ`.
pub fn delta_weights(beta_av: &[f64], xi: f64) -> Vec<f64> {
    adaptive_weights(beta_av, xi).omega
}

fn check_sparse_inputs(beta_wave: &[f64], v_diag: &[f64], delta: &[f64], nu: f64) -> Result<()> {
    let p = beta_wave.len();
    for (what, len) in [("precision diagonal", v_diag.len()), ("delta weights", delta.len())] {
        if len != p {
            return Err(WaveError::Dimension {
                what,
                expected: p,
                found: len,
            });
        }
    }
    if let Some(v) = v_diag.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(WaveError::InvalidData(format!("precision diagonal entry {v} is not positive")));
    }
    if !(nu >= 0.0 && nu.is_finite()) {
        return Err(WaveError::Config(format!("nu must be nonnegative, got {nu}")));
    }
    Ok(())
}

/// Minimizer of `½ Σ v_l (β_l − β̃_l)² + ν Σ δ_l |β_l|`.
pub fn wave_sparse(beta_wave: &[f64], v_diag: &[f64], delta: &[f64], nu: f64) -> Result<Vec<f64>> {
    check_sparse_inputs(beta_wave, v_diag, delta, nu)?;
    Ok(beta_wave
        .iter()
        .zip(v_diag)
        .zip(delta)
        .map(|((&b, &v), &d)| {
            if d.is_infinite() {
                return 0.0;
            }
            let t = if nu == 0.0 { 0.0 } else { nu * d / v };
            if b.abs() > t {
                b.signum() * (b.abs() - t)
            } else {
                0.0
            }
        })
        .collect())
}

/// Same problem as [`wave_sparse`], solved with the ADMM solver on an
/// equivalent least-squares shard whose Gram matrix is `diag(v)`.
pub fn wave_sparse_admm(
    beta_wave: &[f64],
    v_diag: &[f64],
    delta: &[f64],
    nu: f64,
    cfg: &AdmmConfig,
) -> Result<Vec<f64>> {
    check_sparse_inputs(beta_wave, v_diag, delta, nu)?;
    let p = beta_wave.len();
    let active: Vec<usize> = (0..p).filter(|&l| delta[l].is_finite()).collect();
    let mut out = vec![0.0; p];
    if active.is_empty() {
        return Ok(out);
    }
    let m = active.len();
    let mut x = DMatrix::<f64>::zeros(m, m);
    let mut y = vec![0.0; m];
    for (i, &l) in active.iter().enumerate() {
        let s = (m as f64 * v_diag[l]).sqrt();
        x[(i, i)] = s;
        y[i] = s * beta_wave[l];
    }
    let shard = DataShard::new(0, x, y)?;
    let weights: Vec<f64> = active.iter().map(|&l| delta[l]).collect();
    let beta = solve_weighted_l1(&shard, &LossModel::least_squares(), nu, &weights, cfg, None)?;
    for (&l, b) in active.iter().zip(beta) {
        out[l] = b;
    }
    Ok(out)
}

/// Smallest ν at which every coordinate is zero, nudged up a few ulps so
/// that rounding in the threshold `ν·δ/v` cannot leave a coordinate alive.
pub fn nu_max(beta_wave: &[f64], v_diag: &[f64], delta: &[f64]) -> f64 {
    let top = beta_wave
        .iter()
        .zip(v_diag)
        .zip(delta)
        .filter(|(_, d)| d.is_finite())
        .map(|((b, v), d)| b.abs() * v / d)
        .fold(0.0, f64::max);
    top * (1.0 + 4.0 * f64::EPSILON)
}

/// Ascending log-spaced ν grid from `min` to `nu_max`.
pub fn default_nu_grid(nu_max: f64, points: usize, min: f64) -> Result<Vec<f64>> {
    if points == 0 || !(min > 0.0) {
        return Err(WaveError::Config(format!("invalid nu grid: {points} points from {min}")));
    }
    if !(nu_max > min) || points == 1 {
        return Ok(vec![nu_max.max(min)]);
    }
    let step = (nu_max / min).ln() / (points - 1) as f64;
    let mut grid: Vec<f64> = (0..points).map(|i| min * (step * i as f64).exp()).collect();
    grid[points - 1] = nu_max;
    Ok(grid)
}

/// `Σ_l v_l (β̃_ν,l − β̃_l)² + log N · d_ν / N`.
pub fn nu_criterion(beta_sparse: &[f64], beta_wave: &[f64], v_diag: &[f64], n_total: usize) -> f64 {
    let fit: f64 = beta_sparse
        .iter()
        .zip(beta_wave)
        .zip(v_diag)
        .map(|((s, b), v)| v * (s - b) * (s - b))
        .sum();
    let n = n_total as f64;
    let d = beta_sparse.iter().filter(|b| **b != 0.0).count() as f64;
    fit + n.ln() * d / n
}

/// BIC choice of ν over `nu_grid`; ties go to the larger ν.
pub fn select_nu_bic(
    beta_wave: &[f64],
    v_diag: &[f64],
    delta: &[f64],
    nu_grid: &[f64],
    n_total: usize,
) -> Result<(f64, Vec<f64>)> {
    select_nu_with(beta_wave, v_diag, delta, nu_grid, n_total, |nu| {
        wave_sparse(beta_wave, v_diag, delta, nu)
    })
}

fn select_nu_with(
    beta_wave: &[f64],
    v_diag: &[f64],
    delta: &[f64],
    nu_grid: &[f64],
    n_total: usize,
    mut fit: impl FnMut(f64) -> Result<Vec<f64>>,
) -> Result<(f64, Vec<f64>)> {
    if nu_grid.is_empty() {
        return Err(WaveError::Config("nu grid is empty".into()));
    }
    if n_total == 0 {
        return Err(WaveError::Config("total sample size must be positive".into()));
    }
    check_sparse_inputs(beta_wave, v_diag, delta, 0.0)?;
    let mut best: Option<(f64, f64, Vec<f64>)> = None;
    for &nu in nu_grid {
        let b = fit(nu)?;
        let c = nu_criterion(&b, beta_wave, v_diag, n_total);
        let better = match &best {
            None => true,
            Some((bc, bnu, _)) => c < *bc || (c == *bc && nu > *bnu),
        };
        if better {
            best = Some((c, nu, b));
        }
    }
    let (_, nu, b) = best.expect("grid is nonempty");
    Ok((nu, b))
}

/// Standard normal quantile (Acklam's rational approximation, relative
/// error below 1.2e-9).
pub fn normal_quantile(prob: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969683028665376e+01,
        2.209460984245205e+02,
        -2.759285104469687e+02,
        1.383577518672690e+02,
        -3.066479806614716e+01,
        2.506628277459239e+00,
    ];
    const B: [f64; 5] = [
        -5.447609879822406e+01,
        1.615858368580409e+02,
        -1.556989798598866e+02,
        6.680131188771972e+01,
        -1.328068155288572e+01,
    ];
    const C: [f64; 6] = [
        -7.784894002430293e-03,
        -3.223964580411365e-01,
        -2.400758277161838e+00,
        -2.549732539343734e+00,
        4.374664141464968e+00,
        2.938163982698783e+00,
    ];
    const D: [f64; 4] = [
        7.784695709041462e-03,
        3.224671290700398e-01,
        2.445134137142996e+00,
        3.754408661907416e+00,
    ];
    const LOW: f64 = 0.02425;

    if prob <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if prob >= 1.0 {
        return f64::INFINITY;
    }
    let tail = |q: f64| {
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    };
    if prob < LOW {
        tail((-2.0 * prob.ln()).sqrt())
    } else if prob > 1.0 - LOW {
        -tail((-2.0 * (1.0 - prob).ln()).sqrt())
    } else {
        let q = prob - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    }
}

/// Half-widths `z_{(1+level)/2} · sqrt(var_wave_l / N)`.
pub fn confidence_intervals(var: &VarianceEstimate, n_total: usize, level: f64) -> Result<Vec<f64>> {
    if !(level > 0.0 && level < 1.0) {
        return Err(WaveError::Config(format!("confidence level must lie in (0, 1), got {level}")));
    }
    let z = normal_quantile((1.0 + level) / 2.0);
    let n = n_total as f64;
    Ok(var.var_wave.iter().map(|v| z * (v / n).sqrt()).collect())
}

/// Full master step: WAVE point estimate, sparsification with BIC-tuned ν,
/// and confidence half-widths.
pub fn aggregate(summaries: &[LocalSummary], cfg: &AggregateConfig, admm: &AdmmConfig) -> Result<AggregateResult> {
    let (beta_wave, variance) = wave_point(summaries)?;
    let alpha = alpha_weights(summaries);
    let n_total = total_n(summaries);
    let pilot = match cfg.pilot {
        Pilot::SimpleAverage => simple_average(summaries)?,
        Pilot::Wave => beta_wave.clone(),
    };
    let delta = delta_weights(&pilot, cfg.xi);
    let v = &variance.v_diag;
    let grid = match &cfg.nu_grid {
        NuGrid::Explicit(g) => g.clone(),
        &NuGrid::Auto { points, min } => default_nu_grid(nu_max(&beta_wave, v, &delta), points, min)?,
    };
    let (nu_hat, beta_sparse) = match cfg.sparse_solver {
        SparseSolver::ClosedForm => select_nu_bic(&beta_wave, v, &delta, &grid, n_total)?,
        SparseSolver::Admm => select_nu_with(&beta_wave, v, &delta, &grid, n_total, |nu| {
            wave_sparse_admm(&beta_wave, v, &delta, nu, admm)
        })?,
    };
    let ci_halfwidth = confidence_intervals(&variance, n_total, cfg.level)?;
    Ok(AggregateResult {
        support: support(&beta_sparse),
        beta_wave,
        beta_sparse,
        nu_hat,
        ci_halfwidth,
        alpha,
        variance,
    })
}
