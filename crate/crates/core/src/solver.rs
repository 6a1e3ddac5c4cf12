//! ADMM for weighted-L1 penalized losses.
//!
//! Solves `(1/n) Σ L(yᵢ, xᵢᵀβ) + λ Σ w_k |β_k|` through the splitting `α = θ`,
//! where α carries the loss and θ the penalty:
//!
//! 1. `α ← argmin (1/n) Σ L(yᵢ, xᵢᵀα) − aᵀ(α − θ) + (η²/2)‖α − θ‖²` by damped Newton,
//! 2. `θ_k ← soft(α_k − a_k/η², λw_k/η²)`,
//! 3. `a ← a − η²(α − θ)`,
//!
//! stopping once the primal residual `‖α − θ‖₂` and the dual residual
//! `η²‖θ − θ_prev‖₂` are both below their tolerances. The primal residual
//! alone is not enough: after a single step the dual can already equal
//! `−λ·sign(θ)`, making `α = θ` exactly while α is still far from optimal.
//! The returned coefficients are θ, so zeros are exact.
//!
//! The weights enter only through the thresholds. Working in the rescaled
//! variable `Dβ` instead would divide the loss curvature by `w_k²`, and with
//! adaptive weights spanning a few orders of magnitude that leaves some
//! coordinates needing far more iterations than the rest.
//!
//! With `adapt_eta`, η² is doubled when the primal residual exceeds ten times
//! the dual residual and halved in the opposite case. Small loss curvature,
//! as in logistic fits with many active coordinates, otherwise makes a
//! fixed η converge very slowly. The dual `a` is unscaled, so it needs no
//! adjustment when η changes. Rebalancing stops after a fixed number of
//! iterations for each λ, which keeps the usual convergence guarantee.
//!
//! For least squares the α-subproblem is quadratic with a Hessian that does
//! not depend on the iterate; its Cholesky factor is kept until η changes.

use std::cell::{Cell, RefCell};

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::error::{Result, WaveError};
use crate::model::{eval_all, DataShard, LossFamily, LossModel};

const MAX_HALVINGS: usize = 30;
/// η is only rebalanced during this many outer iterations per λ, so the
/// tail of every run is plain fixed-penalty ADMM.
const ADAPT_ITERS: usize = 2_000;
const ETA2_RANGE: (f64, f64) = (1e-8, 1e8);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdmmConfig {
    /// Augmented-Lagrangian penalty parameter.
    pub eta: f64,
    pub primal_tol: f64,
    pub dual_tol: f64,
    pub max_outer_iter: usize,
    pub newton_tol: f64,
    pub max_newton_iter: usize,
    /// Lower bound applied to every second derivative in the Newton Hessian.
    pub curvature_floor: f64,
    /// Rebalance η when one residual dominates the other by more than 10×.
    pub adapt_eta: bool,
}

impl Default for AdmmConfig {
    fn default() -> Self {
        Self {
            eta: 1.0,
            primal_tol: 1e-6,
            dual_tol: 1e-6,
            max_outer_iter: 20_000,
            newton_tol: 1e-6,
            max_newton_iter: 25,
            curvature_floor: 1e-6,
            adapt_eta: true,
        }
    }
}

impl AdmmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(WaveError::Config(format!("ADMM {what}")));
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return bad("eta must be positive");
        }
        if !(self.primal_tol > 0.0) || !(self.dual_tol > 0.0) || !(self.newton_tol > 0.0) {
            return bad("tolerances must be positive");
        }
        if self.max_outer_iter == 0 || self.max_newton_iter == 0 {
            return bad("iteration limits must be at least 1");
        }
        if !(self.curvature_floor >= 0.0) {
            return bad("curvature floor must be nonnegative");
        }
        Ok(())
    }
}

/// ADMM iterate: α is the smooth copy of β, θ the sparse one.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverState {
    pub alpha: Vec<f64>,
    pub theta: Vec<f64>,
    pub dual: Vec<f64>,
    pub iter: usize,
    pub primal_residual_norm: f64,
    /// `η²‖θ − θ_prev‖₂` after the last iteration.
    pub dual_residual_norm: f64,
}

impl SolverState {
    pub fn new(alpha: Vec<f64>, theta: Vec<f64>, dual: Vec<f64>) -> Self {
        assert!(alpha.len() == theta.len() && theta.len() == dual.len());
        let mut s = Self {
            alpha,
            theta,
            dual,
            iter: 0,
            primal_residual_norm: 0.0,
            dual_residual_norm: 0.0,
        };
        s.refresh_residual();
        s
    }

    fn refresh_residual(&mut self) {
        self.primal_residual_norm = self
            .alpha
            .iter()
            .zip(&self.theta)
            .map(|(a, t)| (a - t) * (a - t))
            .sum::<f64>()
            .sqrt();
    }
}

/// `sign(x) · max(|x| − t, 0)`.
pub fn soft_threshold(x: f64, t: f64) -> f64 {
    debug_assert!(t >= 0.0);
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// Exact minimizer of the θ-subproblem.
pub fn admm_theta_update(state: &SolverState, lambda: f64, weights: &[f64], cfg: &AdmmConfig) -> Vec<f64> {
    theta_step(state, lambda, weights, cfg.eta * cfg.eta)
}

fn theta_step(state: &SolverState, lambda: f64, weights: &[f64], eta2: f64) -> Vec<f64> {
    state
        .alpha
        .iter()
        .zip(&state.dual)
        .zip(weights)
        .map(|((&a, &u), &w)| soft_threshold(a - u / eta2, lambda * w / eta2))
        .collect()
}

/// Newton solve of the α-subproblem for the given state.
pub fn admm_alpha_update(
    shard: &DataShard,
    model: &LossModel,
    weights: &[f64],
    state: &SolverState,
    cfg: &AdmmConfig,
) -> Result<Vec<f64>> {
    let sub = Subproblem::new(shard, model, weights, cfg)?;
    sub.alpha_step(state)
}

/// Weighted-L1 penalized fit at a single λ.
///
/// `init` is a warm start in β coordinates (zeros when `None`).
pub fn solve_weighted_l1(
    shard: &DataShard,
    model: &LossModel,
    lambda: f64,
    weights: &[f64],
    cfg: &AdmmConfig,
    init: Option<&[f64]>,
) -> Result<Vec<f64>> {
    let mut path = solve_path(shard, model, &[lambda], weights, cfg, init)?;
    Ok(path.pop().expect("one lambda in, one fit out"))
}

/// Fits along a sequence of λ values, warm-starting each from the previous
/// ADMM state (primal and dual).
pub fn solve_path(
    shard: &DataShard,
    model: &LossModel,
    lambdas: &[f64],
    weights: &[f64],
    cfg: &AdmmConfig,
    init: Option<&[f64]>,
) -> Result<Vec<Vec<f64>>> {
    if let Some(&bad) = lambdas.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
        return Err(WaveError::Config(format!(
            "lambda must be finite and nonnegative, got {bad}"
        )));
    }
    shard.validate_for(model)?;
    let sub = Subproblem::new(shard, model, weights, cfg)?;
    let mut state = sub.initial_state(init)?;
    let mut out = Vec::with_capacity(lambdas.len());
    for &lambda in lambdas {
        sub.run(lambda, &mut state)?;
        out.push(state.theta.clone());
    }
    Ok(out)
}

/// Largest violation of the subgradient optimality conditions at `beta`.
///
/// Nonzero coordinates contribute `|g_l + λ w_l sign(β_l)|`, zero coordinates
/// contribute `max(|g_l| − λ w_l, 0)`, where `g` is the loss gradient.
pub fn kkt_violation(
    shard: &DataShard,
    model: &LossModel,
    lambda: f64,
    weights: &[f64],
    beta: &[f64],
) -> Result<f64> {
    let g = loss_gradient(shard, model, beta)?;
    Ok(g.iter()
        .zip(weights)
        .zip(beta)
        .map(|((&gl, &w), &b)| {
            if b != 0.0 {
                (gl + lambda * w * b.signum()).abs()
            } else {
                (gl.abs() - lambda * w).max(0.0)
            }
        })
        .fold(0.0, f64::max))
}

/// `(1/n) Σ L(yᵢ, xᵢᵀβ)`.
pub fn mean_loss(shard: &DataShard, model: &LossModel, beta: &[f64]) -> Result<f64> {
    let z = crate::model::linear_predict(shard, beta)?;
    let vals = eval_all(model, shard.y(), &z)?;
    Ok(vals.iter().map(|v| v.value).sum::<f64>() / shard.n() as f64)
}

/// Gradient of the mean loss in β.
pub fn loss_gradient(shard: &DataShard, model: &LossModel, beta: &[f64]) -> Result<Vec<f64>> {
    let z = crate::model::linear_predict(shard, beta)?;
    let vals = eval_all(model, shard.y(), &z)?;
    let d1 = DVector::from_iterator(shard.n(), vals.iter().map(|v| v.d1));
    let g = shard.x().tr_mul(&d1) / shard.n() as f64;
    Ok(g.as_slice().to_vec())
}

/// Smallest λ for which zero is optimal: `max_k |∇_k(0)| / w_k`.
pub fn lambda_max(shard: &DataShard, model: &LossModel, weights: &[f64]) -> Result<f64> {
    let g = loss_gradient(shard, model, &vec![0.0; shard.p()])?;
    Ok(g.iter()
        .zip(weights)
        .map(|(gl, w)| gl.abs() / w)
        .fold(0.0, f64::max))
}

/// `Xᵀ diag(w) X`.
pub(crate) fn weighted_gram(x: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let mut xw = x.clone();
    for (mut row, &wi) in xw.row_iter_mut().zip(w) {
        row *= wi.sqrt();
    }
    let xt = xw.transpose();
    &xt * &xw
}

struct QuadraticCache {
    /// `XᵀX / n`
    gram: DMatrix<f64>,
    /// `Xᵀy / n`
    rhs: DVector<f64>,
}

struct Subproblem<'a> {
    shard: &'a DataShard,
    model: &'a LossModel,
    w: Vec<f64>,
    cfg: &'a AdmmConfig,
    quad: Option<QuadraticCache>,
    /// Factor of the subproblem Hessian, reused until invalidated.
    hessian: RefCell<Option<Cholesky<f64, Dyn>>>,
    eta2: Cell<f64>,
}

impl<'a> Subproblem<'a> {
    fn new(
        shard: &'a DataShard,
        model: &'a LossModel,
        weights: &[f64],
        cfg: &'a AdmmConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        if weights.len() != shard.p() {
            return Err(WaveError::Dimension {
                what: "penalty weights",
                expected: shard.p(),
                found: weights.len(),
            });
        }
        if let Some(&bad) = weights.iter().find(|w| !(**w > 0.0 && w.is_finite())) {
            return Err(WaveError::Config(format!(
                "penalty weights must be positive and finite, got {bad}"
            )));
        }
        let quad = (model.family() == LossFamily::LeastSquares)
            .then(|| Self::quadratic_cache(shard));
        Ok(Self {
            shard,
            model,
            w: weights.to_vec(),
            cfg,
            quad,
            hessian: RefCell::new(None),
            eta2: Cell::new(cfg.eta * cfg.eta),
        })
    }

    fn quadratic_cache(shard: &DataShard) -> QuadraticCache {
        let n = shard.n() as f64;
        let x = shard.x();
        QuadraticCache {
            gram: x.tr_mul(x) / n,
            rhs: x.tr_mul(&DVector::from_column_slice(shard.y())) / n,
        }
    }

    fn p(&self) -> usize {
        self.w.len()
    }

    /// Loss part of the objective and its gradient; `None` when not finite.
    fn loss_and_grad(&self, alpha: &[f64]) -> Result<Option<(f64, DVector<f64>, Vec<f64>)>> {
        let z = self.shard.x() * DVector::from_column_slice(alpha);
        let vals = match eval_all(self.model, self.shard.y(), z.as_slice()) {
            Ok(v) => v,
            Err(WaveError::Overflow { .. }) => return Ok(None),
            Err(e) => return Err(e),
        };
        let n = self.shard.n() as f64;
        let value = vals.iter().map(|v| v.value).sum::<f64>() / n;
        if !value.is_finite() {
            return Ok(None);
        }
        let d1 = DVector::from_iterator(vals.len(), vals.iter().map(|v| v.d1));
        let g = self.shard.x().tr_mul(&d1) / n;
        let d2 = vals.iter().map(|v| v.d2).collect();
        Ok(Some((value, g, d2)))
    }

    fn augmented(&self, loss: f64, alpha: &[f64], state: &SolverState) -> f64 {
        let eta2 = self.eta2.get();
        let mut lin = 0.0;
        let mut sq = 0.0;
        for ((a, t), u) in alpha.iter().zip(&state.theta).zip(&state.dual) {
            let r = a - t;
            lin += u * r;
            sq += r * r;
        }
        loss - lin + 0.5 * eta2 * sq
    }

    fn initial_state(&self, init: Option<&[f64]>) -> Result<SolverState> {
        let p = self.p();
        let alpha: Vec<f64> = match init {
            Some(b) if b.len() != p => {
                return Err(WaveError::Dimension {
                    what: "warm start",
                    expected: p,
                    found: b.len(),
                })
            }
            Some(b) => b.to_vec(),
            None => vec![0.0; p],
        };
        // Dual starts at the loss gradient, which makes `init` a fixed point
        // of the α-step.
        let dual = match self.loss_and_grad(&alpha)? {
            Some((_, g, _)) => g.as_slice().to_vec(),
            None => return Err(WaveError::Divergence { iterations: 0 }),
        };
        Ok(SolverState::new(alpha.clone(), alpha, dual))
    }

    fn alpha_step(&self, state: &SolverState) -> Result<Vec<f64>> {
        match &self.quad {
            Some(q) => self.quadratic_alpha(q, state),
            None => self.newton_alpha(state),
        }
    }

    fn quadratic_alpha(&self, q: &QuadraticCache, state: &SolverState) -> Result<Vec<f64>> {
        let eta2 = self.eta2.get();
        let mut cache = self.hessian.borrow_mut();
        if cache.is_none() {
            let mut h = q.gram.clone();
            for j in 0..h.nrows() {
                h[(j, j)] += eta2;
            }
            let chol = Cholesky::new(h)
                .ok_or_else(|| WaveError::Singular("least-squares ADMM Hessian".into()))?;
            *cache = Some(chol);
        }
        let mut rhs = q.rhs.clone();
        for ((r, u), t) in rhs.iter_mut().zip(&state.dual).zip(&state.theta) {
            *r += u + eta2 * t;
        }
        cache.as_ref().expect("factorized above").solve_mut(&mut rhs);
        Ok(rhs.as_slice().to_vec())
    }

    fn factor_hessian(&self, d2: &[f64]) -> Result<Cholesky<f64, Dyn>> {
        let p = self.p();
        let n = self.shard.n() as f64;
        let eta2 = self.eta2.get();
        let curv: Vec<f64> = d2
            .iter()
            .map(|v| v.max(self.cfg.curvature_floor) / n)
            .collect();
        let mut h = weighted_gram(self.shard.x(), &curv);
        for j in 0..p {
            h[(j, j)] += eta2;
        }
        Cholesky::new(h).ok_or_else(|| WaveError::Singular("Newton Hessian".into()))
    }

    /// Damped Newton on the α-subproblem. The factorized Hessian is kept
    /// between calls and only rebuilt when a step made poor progress, so most
    /// iterations cost two matrix-vector products.
    fn newton_alpha(&self, state: &SolverState) -> Result<Vec<f64>> {
        let p = self.p();
        let eta2 = self.eta2.get();
        let mut alpha = state.alpha.clone();
        let (_, mut g_loss, mut d2) = self
            .loss_and_grad(&alpha)?
            .ok_or(WaveError::Divergence { iterations: 0 })?;
        let mut obj = self.augmented_at(&alpha, state)?;
        let mut cache = self.hessian.borrow_mut();
        let mut prev_moved = f64::INFINITY;

        // The subproblem is η²-strongly convex, so ‖∇‖₂/η² bounds the distance
        // to its minimizer. Solving well inside the outer tolerances keeps
        // inexact α-steps from showing up as a dual-residual floor.
        let target = 0.1 * self.cfg.newton_tol.min(self.cfg.primal_tol).min(self.cfg.dual_tol) * eta2;
        for it in 0..self.cfg.max_newton_iter {
            let mut grad = g_loss.clone();
            for k in 0..p {
                grad[k] += -state.dual[k] + eta2 * (alpha[k] - state.theta[k]);
            }
            if grad.norm() <= target {
                break;
            }
            let fresh = cache.is_none();
            if fresh {
                *cache = Some(self.factor_hessian(&d2)?);
            }
            let step = cache.as_ref().expect("factorized above").solve(&grad);

            let mut t = 1.0;
            let mut accepted = None;
            for _ in 0..=MAX_HALVINGS {
                let trial: Vec<f64> = alpha.iter().zip(step.iter()).map(|(a, s)| a - t * s).collect();
                if let Some((l, g, d)) = self.loss_and_grad(&trial)? {
                    let o = self.augmented(l, &trial, state);
                    if o <= obj {
                        accepted = Some((trial, g, d, o));
                        break;
                    }
                }
                t *= 0.5;
            }
            let Some((trial, g, d, o)) = accepted else {
                if !fresh {
                    *cache = None;
                    continue;
                }
                // No descent along an exact Newton direction: the iterate is
                // the minimizer up to rounding.
                break;
            };
            let moved = step.iter().map(|s| (t * s).abs()).fold(0.0, f64::max);
            alpha = trial;
            g_loss = g;
            d2 = d;
            obj = o;
            if !obj.is_finite() {
                return Err(WaveError::Divergence { iterations: it + 1 });
            }
            if t < 1.0 || moved > 0.5 * prev_moved {
                *cache = None;
            }
            prev_moved = moved;
        }
        Ok(alpha)
    }

    fn rebalance(&self, state: &SolverState) {
        let eta2 = self.eta2.get();
        let next = if state.primal_residual_norm > 10.0 * state.dual_residual_norm {
            eta2 * 2.0
        } else if state.dual_residual_norm > 10.0 * state.primal_residual_norm {
            eta2 / 2.0
        } else {
            return;
        };
        if (ETA2_RANGE.0..=ETA2_RANGE.1).contains(&next) {
            self.eta2.set(next);
            *self.hessian.borrow_mut() = None;
        }
    }

    fn augmented_at(&self, alpha: &[f64], state: &SolverState) -> Result<f64> {
        match self.loss_and_grad(alpha)? {
            Some((l, _, _)) => Ok(self.augmented(l, alpha, state)),
            None => Err(WaveError::Divergence { iterations: 0 }),
        }
    }

    /// Runs ADMM at `lambda` from `state` until both residuals are small.
    fn run(&self, lambda: f64, state: &mut SolverState) -> Result<()> {
        state.iter = 0;
        for m in 1..=self.cfg.max_outer_iter {
            let eta2 = self.eta2.get();
            state.alpha = self.alpha_step(state)?;
            let theta = theta_step(state, lambda, &self.w, eta2);
            state.dual_residual_norm = eta2
                * theta
                    .iter()
                    .zip(&state.theta)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
            state.theta = theta;
            for ((u, a), t) in state.dual.iter_mut().zip(&state.alpha).zip(&state.theta) {
                *u -= eta2 * (a - t);
            }
            state.iter = m;
            state.refresh_residual();
            if state.primal_residual_norm <= self.cfg.primal_tol
                && state.dual_residual_norm <= self.cfg.dual_tol
            {
                return Ok(());
            }
            if self.cfg.adapt_eta && m <= ADAPT_ITERS {
                self.rebalance(state);
            }
        }
        if state.primal_residual_norm > 10.0 * self.cfg.primal_tol
            || state.dual_residual_norm > 10.0 * self.cfg.dual_tol
        {
            return Err(WaveError::NonConvergence {
                iterations: state.iter,
                residual: state.primal_residual_norm.max(state.dual_residual_norm),
            });
        }
        Ok(())
    }
}
