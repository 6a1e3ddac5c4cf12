//! Monte-Carlo repetitions of the full pipeline.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use wave_core::aggregator::full_ls_reference;
use wave_core::datagen::generate;
use wave_core::error::WaveError;
use wave_core::runtime::{run_pipeline, RunConfig};
use wave_core::worker::precision_matrix;

use crate::config::{BenchConfig, CellConfig};
use crate::error::{BenchError, Result};
use crate::metrics::{mean_std, selection_metrics, squared_error, Selection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "WAVE")]
    Wave,
    #[serde(rename = "AVE")]
    Ave,
    #[serde(rename = "LS-ref")]
    LsReference,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Wave => "WAVE",
            Method::Ave => "AVE",
            Method::LsReference => "LS-ref",
        }
    }
}

/// Result of one repetition of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepOutcome {
    pub repetition: usize,
    pub seed: u64,
    /// `(method, squared error, selection)` in method order.
    pub methods: Vec<(Method, f64, Selection)>,
    /// For each true nonzero coordinate, whether its confidence interval
    /// around the WAVE point estimate covers the truth.
    pub covered: Vec<(usize, bool)>,
    pub warnings: Vec<String>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepFailure {
    pub repetition: usize,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodReport {
    pub method: Method,
    pub mean_error: f64,
    /// Sample standard deviation; absent with a single repetition.
    pub std_error: Option<f64>,
    pub exact_support_rate: f64,
    pub mean_tpr: f64,
    pub mean_fpr: f64,
    /// `(repetition, squared error)` for every successful repetition.
    pub errors: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub name: String,
    pub config: CellConfig,
    pub n_total: usize,
    pub repetitions: usize,
    pub methods: Vec<MethodReport>,
    /// Pooled coverage over the true nonzero coordinates.
    pub ci_coverage: Option<f64>,
    /// `(coordinate, coverage)` for each true nonzero coordinate.
    pub ci_coverage_by_coordinate: Vec<(usize, f64)>,
    pub failures: Vec<RepFailure>,
    /// Sum of per-repetition wall times.
    pub wall_time_s: f64,
}

impl CellReport {
    pub fn method(&self, m: Method) -> Option<&MethodReport> {
        self.methods.iter().find(|r| r.method == m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub cells: Vec<CellReport>,
}

/// Seed of repetition `rep` of a cell.
pub fn repetition_seed(base: u64, seed_offset: u64, rep: usize) -> u64 {
    base.wrapping_add(seed_offset).wrapping_add(rep as u64)
}

/// Generates one dataset and runs every method on it.
pub fn run_repetition(
    cell: &CellConfig,
    run: &RunConfig,
    ls_reference: bool,
    repetition: usize,
    seed: u64,
) -> std::result::Result<RepOutcome, WaveError> {
    let start = Instant::now();
    let (shards, truth) = generate(&cell.gen_config(seed))?;
    let cfg = RunConfig {
        model: cell.example.loss_model(),
        ..run.clone()
    };
    let out = run_pipeline(&shards, &cfg)?;
    let res = &out.result;

    let mut estimates = vec![(Method::Wave, res.beta_sparse.clone()), (Method::Ave, out.simple_average.clone())];
    if ls_reference {
        let entries = shards
            .iter()
            .zip(&out.summaries)
            .map(|(s, sum)| Ok((sum.beta_hat.clone(), precision_matrix(s, &cfg.model, &sum.beta_hat, cfg.ridge)?)))
            .collect::<std::result::Result<Vec<_>, WaveError>>()?;
        estimates.push((Method::LsReference, full_ls_reference(&entries, &res.alpha)?));
    }
    let methods = estimates
        .into_iter()
        .map(|(m, b)| Ok((m, squared_error(&b, &truth.beta_star)?, selection_metrics(&b, &truth))))
        .collect::<std::result::Result<Vec<_>, WaveError>>()?;
    let covered = truth
        .active_set
        .iter()
        .map(|&l| (l, (res.beta_wave[l] - truth.beta_star[l]).abs() <= res.ci_halfwidth[l]))
        .collect();
    Ok(RepOutcome {
        repetition,
        seed,
        methods,
        covered,
        warnings: out.warnings,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Folds repetition outcomes into a cell report.
pub fn summarize_cell(cell: &CellConfig, repetitions: usize, outcomes: Vec<std::result::Result<RepOutcome, RepFailure>>) -> CellReport {
    let mut ok = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => ok.push(r),
            Err(f) => failures.push(f),
        }
    }
    let mut method_list: Vec<Method> = ok.iter().flat_map(|r| r.methods.iter().map(|m| m.0)).collect();
    method_list.sort();
    method_list.dedup();

    let methods = method_list
        .into_iter()
        .map(|m| {
            let rows: Vec<(usize, f64, Selection)> = ok
                .iter()
                .filter_map(|r| r.methods.iter().find(|x| x.0 == m).map(|x| (r.repetition, x.1, x.2)))
                .collect();
            let errs: Vec<f64> = rows.iter().map(|r| r.1).collect();
            let (mean_error, std_error) = mean_std(&errs);
            let k = rows.len() as f64;
            MethodReport {
                method: m,
                mean_error,
                std_error,
                exact_support_rate: rows.iter().filter(|r| r.2.exact).count() as f64 / k,
                mean_tpr: rows.iter().map(|r| r.2.tpr).sum::<f64>() / k,
                mean_fpr: rows.iter().map(|r| r.2.fpr).sum::<f64>() / k,
                errors: rows.iter().map(|r| (r.0, r.1)).collect(),
            }
        })
        .collect();

    let mut coords: Vec<usize> = ok.iter().flat_map(|r| r.covered.iter().map(|c| c.0)).collect();
    coords.sort_unstable();
    coords.dedup();
    let by_coord: Vec<(usize, f64)> = coords
        .iter()
        .map(|&l| {
            let hits: Vec<bool> = ok.iter().flat_map(|r| r.covered.iter().filter(|c| c.0 == l).map(|c| c.1)).collect();
            (l, hits.iter().filter(|h| **h).count() as f64 / hits.len() as f64)
        })
        .collect();
    let total: usize = ok.iter().map(|r| r.covered.len()).sum();
    let hit: usize = ok.iter().map(|r| r.covered.iter().filter(|c| c.1).count()).sum();

    CellReport {
        name: cell.label(),
        config: cell.clone(),
        n_total: cell.k * cell.n_per_worker,
        repetitions,
        methods,
        ci_coverage: (total > 0).then(|| hit as f64 / total as f64),
        ci_coverage_by_coordinate: by_coord,
        failures,
        wall_time_s: ok.iter().map(|r| r.seconds).sum(),
    }
}

/// Runs every repetition of every cell on a pool of `threads` threads.
/// Results do not depend on the thread count.
pub fn run_bench(cfg: &BenchConfig, threads: usize, seed_offset: u64) -> Result<BenchReport> {
    cfg.validate("config")?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| BenchError::Config {
            path: "--threads".into(),
            message: e.to_string(),
        })?;
    let jobs: Vec<(usize, usize, u64)> = cfg
        .cells
        .iter()
        .enumerate()
        .flat_map(|(c, cell)| {
            let base = cell.seed.unwrap_or(cfg.seed);
            (0..cfg.repetitions_for(cell)).map(move |r| (c, r, repetition_seed(base, seed_offset, r)))
        })
        .collect();
    let results: Vec<(usize, std::result::Result<RepOutcome, RepFailure>)> = pool.install(|| {
        jobs.par_iter()
            .map(|&(c, r, seed)| {
                let cell = &cfg.cells[c];
                let ls = cell.p <= cfg.ls_reference_max_p;
                let out = run_repetition(cell, &cfg.run, ls, r, seed).map_err(|e| RepFailure {
                    repetition: r,
                    seed,
                    error: e.to_string(),
                });
                (c, out)
            })
            .collect()
    });
    let mut per_cell: Vec<Vec<_>> = vec![Vec::new(); cfg.cells.len()];
    for (c, out) in results {
        per_cell[c].push(out);
    }
    let cells = cfg
        .cells
        .iter()
        .zip(per_cell)
        .map(|(cell, outs)| summarize_cell(cell, cfg.repetitions_for(cell), outs))
        .collect();
    Ok(BenchReport {
        config: cfg.clone(),
        cells,
    })
}
