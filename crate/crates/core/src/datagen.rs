//! Seeded synthetic shards for the four simulation examples.
//!
//! Randomness comes from ChaCha20 (`rand_chacha::ChaCha20Rng`), a
//! counter-based generator. Every draw is taken from the stream
//! `ChaCha20Rng::seed_from_u64(seed)` with `set_stream(worker_id << 8 | kind)`,
//! where `kind` is one of [`DrawKind`]. A worker's data therefore depends only
//! on `(seed, worker_id)`: adding workers never changes existing ones.

use std::io::{Read, Write};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Bernoulli, Distribution, Poisson, StandardNormal, StudentT, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Result, WaveError};
use crate::model::{sigmoid, DataShard, LossModel, TrueModel, DEFAULT_HUBER_A};

/// Linear predictors are clipped here before computing Poisson rates.
pub const POISSON_CLIP: f64 = 20.0;
const HOMOGENEOUS_RHO: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Example {
    Linear,
    Logistic,
    Poisson,
    HuberLinear,
}

impl Example {
    /// The loss each example is fitted with.
    pub fn loss_model(self) -> LossModel {
        match self {
            Example::Linear => LossModel::least_squares(),
            Example::Logistic => LossModel::logistic(),
            Example::Poisson => LossModel::poisson(),
            Example::HuberLinear => LossModel::huber(DEFAULT_HUBER_A).expect("positive threshold"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Setting {
    Homogeneous,
    Heterogeneous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u64)]
pub enum DrawKind {
    Covariates = 0,
    Response = 1,
    Heterogeneity = 2,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub example: Example,
    pub setting: Setting,
    pub k: usize,
    pub n_per_worker: usize,
    pub p: usize,
    pub seed: u64,
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.p < 5 {
            return Err(WaveError::Config(format!("p must be at least 5, got {}", self.p)));
        }
        if self.k == 0 || self.n_per_worker == 0 {
            return Err(WaveError::Config("K and n_per_worker must be at least 1".into()));
        }
        if self.example == Example::HuberLinear && self.setting == Setting::Heterogeneous {
            return Err(WaveError::Config(
                "the Huber example is only defined for the homogeneous setting".into(),
            ));
        }
        Ok(())
    }

    pub fn total_n(&self) -> usize {
        self.k * self.n_per_worker
    }
}

/// Per-worker generator stream.
pub fn worker_rng(seed: u64, worker_id: usize, kind: DrawKind) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    rng.set_stream(((worker_id as u64) << 8) | kind as u64);
    rng
}

pub fn true_beta(example: Example, p: usize) -> Result<TrueModel> {
    if p < 5 {
        return Err(WaveError::Config(format!("p must be at least 5, got {p}")));
    }
    let head: [f64; 5] = match example {
        Example::Linear | Example::Logistic => [3.0, 1.5, 0.0, 0.0, 2.0],
        Example::Poisson => [0.8, -0.6, 0.0, 0.0, 0.4],
        Example::HuberLinear => [3.0; 5],
    };
    let mut beta = vec![0.0; p];
    beta[..5].copy_from_slice(&head);
    Ok(TrueModel::new(beta))
}

/// One draw from a zero-mean Gaussian with covariance `ρ^|i−j|`, built as a
/// stationary AR(1) sequence.
pub fn sample_ar1_row<R: Rng + ?Sized>(rho: f64, p: usize, rng: &mut R) -> Vec<f64> {
    assert!(rho.abs() < 1.0, "AR(1) coefficient must lie in (-1, 1)");
    let innov = (1.0 - rho * rho).sqrt();
    let mut row = Vec::with_capacity(p);
    let mut prev: f64 = 0.0;
    for k in 0..p {
        let e: f64 = StandardNormal.sample(rng);
        prev = if k == 0 { e } else { rho * prev + innov * e };
        row.push(prev);
    }
    row
}

/// Per-worker heterogeneity draws `(ρ_j, s_j)`.
pub fn heterogeneity(seed: u64, worker_id: usize) -> (f64, f64) {
    let mut rng = worker_rng(seed, worker_id, DrawKind::Heterogeneity);
    let rho = Uniform::new(0.1, 0.8).expect("valid range").sample(&mut rng);
    let s = Uniform::new(1.0, 4.0).expect("valid range").sample(&mut rng);
    (rho, s)
}

/// Generates one shard per worker plus the true model.
pub fn generate(cfg: &GenConfig) -> Result<(Vec<DataShard>, TrueModel)> {
    cfg.validate()?;
    let truth = true_beta(cfg.example, cfg.p)?;
    let shards = (0..cfg.k)
        .map(|j| generate_worker(cfg, &truth, j))
        .collect::<Result<Vec<_>>>()?;
    Ok((shards, truth))
}

/// The shard of worker `worker_id` alone.
pub fn generate_worker(cfg: &GenConfig, truth: &TrueModel, worker_id: usize) -> Result<DataShard> {
    let (rho, noise_var) = match cfg.setting {
        Setting::Homogeneous => (HOMOGENEOUS_RHO, 1.0),
        Setting::Heterogeneous => {
            let (rho, s) = heterogeneity(cfg.seed, worker_id);
            // Only the linear example has an additive error term.
            (rho, if cfg.example == Example::Linear { s } else { 1.0 })
        }
    };
    let n = cfg.n_per_worker;
    let p = cfg.p;
    let mut xr = worker_rng(cfg.seed, worker_id, DrawKind::Covariates);
    let mut values = Vec::with_capacity(n * p);
    for _ in 0..n {
        values.extend(sample_ar1_row(rho, p, &mut xr));
    }
    let x = DMatrix::from_row_slice(n, p, &values);
    let eta = &x * nalgebra::DVector::from_column_slice(&truth.beta_star);

    let mut yr = worker_rng(cfg.seed, worker_id, DrawKind::Response);
    let sd = noise_var.sqrt();
    let mut clipped = 0usize;
    let y: Vec<f64> = eta
        .iter()
        .map(|&z| match cfg.example {
            Example::Linear => {
                let e: f64 = StandardNormal.sample(&mut yr);
                z + sd * e
            }
            Example::HuberLinear => {
                let t = StudentT::new(3.0).expect("valid dof");
                z + t.sample(&mut yr)
            }
            Example::Logistic => {
                let b = Bernoulli::new(sigmoid(z)).expect("probability in [0, 1]");
                if b.sample(&mut yr) {
                    1.0
                } else {
                    0.0
                }
            }
            Example::Poisson => {
                if z > POISSON_CLIP {
                    clipped += 1;
                }
                let rate = z.min(POISSON_CLIP).exp();
                // rand_distr rejects a zero rate; it only arises on underflow.
                if rate > 0.0 {
                    Poisson::new(rate).expect("positive rate").sample(&mut yr)
                } else {
                    0.0
                }
            }
        })
        .collect();
    if clipped > 0 {
        log::warn!("worker {worker_id}: {clipped} Poisson linear predictors clipped at {POISSON_CLIP}");
    }
    DataShard::new(worker_id, x, y)
}

/// Writes a shard as CSV with header `y,x1,...,xp`.
pub fn write_shard_csv<W: Write>(shard: &DataShard, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let mut header = vec!["y".to_string()];
    header.extend((1..=shard.p()).map(|k| format!("x{k}")));
    w.write_record(&header).map_err(csv_err)?;
    for i in 0..shard.n() {
        let mut rec = Vec::with_capacity(shard.p() + 1);
        rec.push(format!("{:?}", shard.y()[i]));
        rec.extend(shard.x().row(i).iter().map(|v| format!("{v:?}")));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a CSV with a `y` column; every other column is a covariate, in file
/// order.
pub fn read_shard_csv<R: Read>(worker_id: usize, input: R) -> Result<DataShard> {
    let mut r = csv::Reader::from_reader(input);
    let headers = r.headers().map_err(csv_err)?.clone();
    let y_col = headers
        .iter()
        .position(|h| h.trim() == "y")
        .ok_or_else(|| WaveError::InvalidData("CSV has no `y` column".into()))?;
    let p = headers.len() - 1;
    let mut values = Vec::new();
    let mut y = Vec::new();
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        for (c, field) in rec.iter().enumerate() {
            let v: f64 = field.trim().parse().map_err(|_| {
                WaveError::InvalidData(format!("row {}: cannot parse `{field}`", line + 2))
            })?;
            if c == y_col {
                y.push(v);
            } else {
                values.push(v);
            }
        }
    }
    DataShard::from_row_major(worker_id, p, &values, y)
}

fn csv_err(e: csv::Error) -> WaveError {
    WaveError::Io(e.to_string())
}
