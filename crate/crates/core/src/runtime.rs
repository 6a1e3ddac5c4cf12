//! Master–worker orchestration and the summary wire format.
//!
//! A run is one-shot: every worker fits its shard independently, sends one
//! message, and the master aggregates. Summaries are sorted by worker id
//! before aggregation so floating-point reductions happen in a fixed order.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregator::{aggregate, simple_average, AggregateConfig, AggregateResult, NuGrid, Pilot, SparseSolver};
use crate::error::{Result, WaveError};
use crate::model::{DataShard, LossModel};
use crate::solver::AdmmConfig;
use crate::worker::{run_worker, LambdaGrid, LocalConfig, LocalSummary, Tuning};

pub const WIRE_VERSION: u64 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShardPolicy {
    Uniform,
    Sizes(Vec<usize>),
}

/// Splits rows into contiguous shards. `Uniform` gives the first
/// `N mod K` shards one extra row.
pub fn shard_dataset(x: &DMatrix<f64>, y: &[f64], k: usize, policy: &ShardPolicy) -> Result<Vec<DataShard>> {
    let n = x.nrows();
    if y.len() != n {
        return Err(WaveError::Dimension {
            what: "response",
            expected: n,
            found: y.len(),
        });
    }
    let sizes = match policy {
        ShardPolicy::Uniform => {
            if k == 0 || k > n {
                return Err(WaveError::Config(format!("cannot split {n} rows into {k} shards")));
            }
            (0..k).map(|j| n / k + usize::from(j < n % k)).collect()
        }
        ShardPolicy::Sizes(s) => {
            if s.len() != k {
                return Err(WaveError::Config(format!("{} sizes given for {k} shards", s.len())));
            }
            if s.iter().sum::<usize>() != n || s.contains(&0) {
                return Err(WaveError::Config(format!("shard sizes {s:?} must be positive and sum to {n}")));
            }
            s.clone()
        }
    };
    let mut start = 0;
    sizes
        .iter()
        .enumerate()
        .map(|(j, &len)| {
            let rows = x.rows(start, len).into_owned();
            let ys = y[start..start + len].to_vec();
            start += len;
            DataShard::new(j, rows, ys)
        })
        .collect()
}

/// JSON layout of one message. Reals travel as shortest round-trip decimal
/// strings so every binary64 value, including `-0.0` and subnormals, comes
/// back bit-identical.
#[derive(Debug, Serialize, Deserialize)]
struct WireMessage {
    version: u64,
    worker_id: usize,
    n: usize,
    p: usize,
    beta: Vec<String>,
    lambda_diag: Vec<String>,
}

fn encode_reals(v: &[f64]) -> Vec<String> {
    v.iter().map(|x| format!("{x:?}")).collect()
}

fn decode_reals(v: &[String], p: usize, field: &'static str) -> Result<Vec<f64>> {
    if v.len() != p {
        return Err(WaveError::Decode {
            field,
            reason: format!("expected {p} entries, found {}", v.len()),
        });
    }
    v.iter()
        .map(|s| {
            let x: f64 = s.parse().map_err(|_| WaveError::Decode {
                field,
                reason: format!("not a number: {s:?}"),
            })?;
            if !x.is_finite() {
                return Err(WaveError::Decode {
                    field,
                    reason: format!("non-finite entry {s:?}"),
                });
            }
            Ok(x)
        })
        .collect()
}

/// One newline-terminated JSON message.
pub fn encode_summary(s: &LocalSummary) -> Vec<u8> {
    let msg = WireMessage {
        version: WIRE_VERSION,
        worker_id: s.worker_id,
        n: s.n_j,
        p: s.p(),
        beta: encode_reals(&s.beta_hat),
        lambda_diag: encode_reals(&s.lambda_diag),
    };
    let mut out = serde_json::to_vec(&msg).expect("plain struct serializes");
    out.push(b'\n');
    out
}

/// Inverse of [`encode_summary`]. Positivity of the precision is left to
/// the aggregator, which reports it with worker attribution.
pub fn decode_summary(bytes: &[u8]) -> Result<LocalSummary> {
    if bytes.iter().all(u8::is_ascii_whitespace) {
        return Err(WaveError::Decode {
            field: "message",
            reason: "truncated message".into(),
        });
    }
    let msg: WireMessage = serde_json::from_slice(bytes).map_err(|e| WaveError::Decode {
        field: "message",
        reason: e.to_string(),
    })?;
    if msg.version != WIRE_VERSION {
        return Err(WaveError::Decode {
            field: "version",
            reason: format!("expected {WIRE_VERSION}, found {}", msg.version),
        });
    }
    Ok(LocalSummary {
        worker_id: msg.worker_id,
        n_j: msg.n,
        beta_hat: decode_reals(&msg.beta, msg.p, "beta")?,
        lambda_diag: decode_reals(&msg.lambda_diag, msg.p, "lambda_diag")?,
    })
}

/// Writer wrapper that counts messages and bytes passing through it.
#[derive(Debug)]
pub struct CountingWriter<W> {
    inner: W,
    messages: usize,
    bytes: usize,
}

impl<W: Write> CountingWriter<W> {
    pub fn new(inner: W) -> Self {
        Self {
            inner,
            messages: 0,
            bytes: 0,
        }
    }

    pub fn send(&mut self, s: &LocalSummary) -> Result<()> {
        let buf = encode_summary(s);
        self.inner.write_all(&buf)?;
        self.messages += 1;
        self.bytes += buf.len();
        Ok(())
    }

    pub fn messages(&self) -> usize {
        self.messages
    }

    pub fn bytes(&self) -> usize {
        self.bytes
    }

    pub fn into_inner(self) -> W {
        self.inner
    }
}

/// Reads newline-delimited summaries until end of stream.
pub fn read_summaries<R: BufRead>(reader: R) -> Result<Vec<LocalSummary>> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(decode_summary(line.as_bytes())?);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    InProcess,
    /// Summaries go through the wire codec over an in-memory byte stream.
    Stream,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub model: LossModel,
    pub xi: f64,
    pub tuning: Tuning,
    pub lambda_grid: LambdaGrid,
    pub nu_grid: NuGrid,
    pub admm: AdmmConfig,
    pub mode: Mode,
    pub worker_parallelism: usize,
    pub ridge: Option<f64>,
    pub level: f64,
    pub pilot: Pilot,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: LossModel::least_squares(),
            xi: 1.0,
            tuning: Tuning::LocalBic,
            lambda_grid: LambdaGrid::default(),
            nu_grid: NuGrid::default(),
            admm: AdmmConfig::default(),
            mode: Mode::InProcess,
            worker_parallelism: 1,
            ridge: None,
            level: 0.95,
            pilot: Pilot::SimpleAverage,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.worker_parallelism == 0 {
            return Err(WaveError::Config("worker_parallelism must be at least 1".into()));
        }
        if !(self.xi > 0.0 && self.xi.is_finite()) {
            return Err(WaveError::Config(format!("xi must be positive, got {}", self.xi)));
        }
        self.admm.validate()
    }

    pub fn local(&self) -> LocalConfig {
        LocalConfig {
            xi: self.xi,
            tuning: self.tuning,
            lambda_grid: self.lambda_grid.clone(),
            admm: self.admm,
            ridge: self.ridge,
        }
    }

    pub fn aggregation(&self) -> AggregateConfig {
        AggregateConfig {
            xi: self.xi,
            nu_grid: self.nu_grid.clone(),
            pilot: self.pilot,
            level: self.level,
            sparse_solver: SparseSolver::ClosedForm,
        }
    }
}

/// Message accounting for a Stream-mode run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Traffic {
    /// Messages received from each worker, keyed by worker id.
    pub per_worker: BTreeMap<usize, usize>,
    pub messages: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineRun {
    pub result: AggregateResult,
    /// Summaries in worker-id order.
    pub summaries: Vec<LocalSummary>,
    pub simple_average: Vec<f64>,
    pub traffic: Option<Traffic>,
    pub warnings: Vec<String>,
}

/// Sorts by worker id and rejects duplicates.
pub fn order_summaries(mut summaries: Vec<LocalSummary>) -> Result<Vec<LocalSummary>> {
    summaries.sort_by_key(|s| s.worker_id);
    if let Some(w) = summaries.windows(2).find(|w| w[0].worker_id == w[1].worker_id) {
        return Err(WaveError::Config(format!("duplicate summary from worker {}", w[0].worker_id)));
    }
    Ok(summaries)
}

/// Master step on summaries in any arrival order.
pub fn aggregate_summaries(summaries: Vec<LocalSummary>, cfg: &RunConfig) -> Result<(Vec<LocalSummary>, AggregateResult)> {
    let summaries = order_summaries(summaries)?;
    let result = aggregate(&summaries, &cfg.aggregation(), &cfg.admm)?;
    Ok((summaries, result))
}

fn deliver(summaries: &[LocalSummary]) -> Result<(Vec<LocalSummary>, Traffic)> {
    let mut wire = CountingWriter::new(Vec::new());
    for s in summaries {
        wire.send(s)?;
    }
    let (messages, bytes) = (wire.messages(), wire.bytes());
    let received = read_summaries(wire.into_inner().as_slice())?;
    let mut per_worker = BTreeMap::new();
    for s in &received {
        *per_worker.entry(s.worker_id).or_insert(0) += 1;
    }
    Ok((
        received,
        Traffic {
            per_worker,
            messages,
            bytes,
        },
    ))
}

/// Fits every shard, collects the summaries and aggregates them.
pub fn run_pipeline(shards: &[DataShard], cfg: &RunConfig) -> Result<PipelineRun> {
    cfg.validate()?;
    let first = shards
        .first()
        .ok_or_else(|| WaveError::Config("no shards to fit".into()))?;
    if let Some(bad) = shards.iter().find(|s| s.p() != first.p()) {
        return Err(WaveError::Dimension {
            what: "shard columns",
            expected: first.p(),
            found: bad.p(),
        });
    }
    let local = cfg.local();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.worker_parallelism)
        .build()
        .map_err(|e| WaveError::Config(format!("worker pool: {e}")))?;
    let outputs: Vec<Result<_>> = pool.install(|| {
        shards
            .par_iter()
            .map(|s| {
                run_worker(s, &cfg.model, &local).map_err(|e| WaveError::Worker {
                    worker_id: s.worker_id,
                    source: Box::new(e),
                })
            })
            .collect()
    });

    let mut warnings = Vec::new();
    let mut summaries = Vec::with_capacity(shards.len());
    for out in outputs {
        let out = out?;
        if out.fit.empty_support {
            warnings.push(format!("worker {}: empty pre-estimate support", out.summary.worker_id));
        }
        if !out.clamped.is_empty() {
            warnings.push(format!(
                "worker {}: precision clamped at coordinates {:?}",
                out.summary.worker_id, out.clamped
            ));
        }
        summaries.push(out.summary);
    }

    let (summaries, traffic) = match cfg.mode {
        Mode::InProcess => (summaries, None),
        Mode::Stream => {
            let (received, traffic) = deliver(&summaries)?;
            (received, Some(traffic))
        }
    };
    let (summaries, result) = aggregate_summaries(summaries, cfg)?;
    let simple_average = simple_average(&summaries)?;
    Ok(PipelineRun {
        result,
        summaries,
        simple_average,
        traffic,
        warnings,
    })
}
