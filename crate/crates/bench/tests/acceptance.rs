//! Acceptance suite. Runs every criterion and prints one PASS/FAIL line
//! each, followed by a summary line. With `WAVE_ACCEPTANCE_STRICT=1` the
//! binary exits nonzero when any criterion fails; otherwise failures are
//! reported without stopping the rest of `cargo test`. Positional
//! arguments select criteria by id (`cargo test --test acceptance -- c5 c9`).

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};
use statrs::distribution::{Binomial, DiscreteCDF};
use wave_bench::runner::{CellReport, Method};
use wave_bench::{run_bench, BenchConfig, CellConfig};
use wave_core::aggregator::{alpha_weights, full_ls_reference, simple_average, wave_point, wave_sparse};
use wave_core::datagen::{generate, Example, GenConfig, Setting};
use wave_core::model::{linear_predict, sigmoid, DataShard, LossFamily, LossModel};
use wave_core::runtime::{aggregate_summaries, decode_summary, encode_summary, run_pipeline, Mode, RunConfig};
use wave_core::solver::{kkt_violation, lambda_max, solve_weighted_l1, AdmmConfig};
use wave_core::worker::LocalSummary;

/// Base seed of every simulation cell. Fixed before any run.
const SEED: u64 = 20_240_601;

/// `Ok(detail)` passes, `Err(detail)` fails.
type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn threads() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn gaussian_shard(rng: &mut ChaCha20Rng, n: usize, p: usize, beta: &[f64], noise: f64) -> DataShard {
    let x: DMatrix<f64> = DMatrix::from_fn(n, p, |_, _| StandardNormal.sample(rng));
    let mean = &x * DVector::from_column_slice(beta);
    let y: Vec<f64> = mean
        .iter()
        .map(|m| {
            let e: f64 = StandardNormal.sample(rng);
            m + noise * e
        })
        .collect();
    DataShard::new(0, x, y).unwrap()
}

/// Replaces the response with one drawn from the family's own model.
fn respond(rng: &mut ChaCha20Rng, shard: DataShard, m: &LossModel, beta: &[f64]) -> DataShard {
    let z = linear_predict(&shard, beta).unwrap();
    let y: Vec<f64> = match m.family() {
        LossFamily::LeastSquares | LossFamily::Huber => return shard,
        LossFamily::Logistic => z.iter().map(|&z| f64::from(rng.random_bool(sigmoid(z)))).collect(),
        LossFamily::Poisson => z
            .iter()
            .map(|&z| rand_distr::Poisson::new(z.exp()).unwrap().sample(rng))
            .collect(),
    };
    DataShard::new(0, shard.x().clone(), y).unwrap()
}

/// `½βᵀGβ − bᵀβ + λΣw|β|`, the least-squares objective up to a constant.
struct Quadratic {
    g: DMatrix<f64>,
    b: DVector<f64>,
    lambda: f64,
    w: Vec<f64>,
}

impl Quadratic {
    fn new(shard: &DataShard, lambda: f64, w: &[f64]) -> Self {
        let n = shard.n() as f64;
        Self {
            g: shard.x().tr_mul(shard.x()) / n,
            b: shard.x().tr_mul(&DVector::from_column_slice(shard.y())) / n,
            lambda,
            w: w.to_vec(),
        }
    }

    fn eval(&self, beta: &[f64]) -> f64 {
        let p = beta.len();
        let mut q = 0.0;
        for i in 0..p {
            for j in 0..p {
                q += beta[i] * self.g[(i, j)] * beta[j];
            }
        }
        let lin: f64 = (0..p).map(|i| self.b[i] * beta[i]).sum();
        let pen: f64 = beta.iter().zip(&self.w).map(|(b, w)| w * b.abs()).sum();
        0.5 * q - lin + self.lambda * pen
    }
}

/// Best point of the grid `center + step·k`, `|k| ≤ half`, clipped to [−5, 5].
fn grid_argmin(q: &Quadratic, center: &[f64], step: f64, half: i64) -> Vec<f64> {
    let p = center.len();
    let base: Vec<f64> = center.iter().map(|&c| ((c / step).round() * step).clamp(-5.0, 5.0)).collect();
    let mut best = (f64::INFINITY, base.clone());
    let mut idx = vec![-half; p];
    loop {
        let pt: Vec<f64> = (0..p).map(|k| (base[k] + idx[k] as f64 * step).clamp(-5.0, 5.0)).collect();
        let v = q.eval(&pt);
        if v < best.0 {
            best = (v, pt);
        }
        let mut k = 0;
        loop {
            if k == p {
                return best.1;
            }
            idx[k] += 1;
            if idx[k] <= half {
                break;
            }
            idx[k] = -half;
            k += 1;
        }
    }
}

/// Grid search over [−5, 5]^p at resolution 1e-3, coarse to fine. The
/// objective is convex, so each finer level scans a window around the
/// previous minimizer that is wider than the previous step.
fn grid_search(q: &Quadratic, p: usize) -> Vec<f64> {
    let mut pt = grid_argmin(q, &vec![0.0; p], 0.1, 50);
    for step in [1e-2, 1e-3] {
        pt = grid_argmin(q, &pt, step, 40);
    }
    pt
}

fn c1_solver_vs_grid() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(1);
    let m = LossModel::least_squares();
    let cfg = AdmmConfig::default();
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let p = rng.random_range(1..=3);
        let n = rng.random_range(10..=30);
        let beta: Vec<f64> = (0..p).map(|_| rng.random_range(-3.0..3.0)).collect();
        let shard = gaussian_shard(&mut rng, n, p, &beta, 0.5);
        let w: Vec<f64> = (0..p).map(|_| rng.random_range(0.5..2.0)).collect();
        let lambda = rng.random_range(0.0..0.8) * lambda_max(&shard, &m, &w).unwrap();
        let fit = solve_weighted_l1(&shard, &m, lambda, &w, &cfg, None).map_err(|e| e.to_string())?;
        let oracle = grid_search(&Quadratic::new(&shard, lambda, &w), p);
        for (a, b) in fit.iter().zip(&oracle) {
            worst = worst.max((a - b).abs());
        }
    }
    check(worst <= 2e-3, format!("max coordinate gap {worst:.2e} (tol 2e-3)"))
}

fn c2_kkt() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let cfg = AdmmConfig::default();
    let families = [
        LossModel::least_squares(),
        LossModel::logistic(),
        LossModel::poisson(),
        LossModel::huber(1.345).unwrap(),
    ];
    let mut worst = 0.0f64;
    for i in 0..200 {
        let m = &families[i % 4];
        let p = rng.random_range(2..=12);
        let n = rng.random_range(40..=200);
        let beta: Vec<f64> = (0..p)
            .map(|_| if rng.random_bool(0.5) { 0.0 } else { rng.random_range(-0.8..0.8) })
            .collect();
        let shard = gaussian_shard(&mut rng, n, p, &beta, 1.0);
        let shard = respond(&mut rng, shard, m, &beta);
        let w: Vec<f64> = (0..p).map(|_| rng.random_range(0.2..5.0)).collect();
        let lambda = lambda_max(&shard, m, &w).unwrap() * 10f64.powf(rng.random_range(-3.0..0.0));
        let fit = solve_weighted_l1(&shard, m, lambda, &w, &cfg, None)
            .map_err(|e| format!("instance {i} ({:?}): {e}", m.family()))?;
        worst = worst.max(kkt_violation(&shard, m, lambda, &w, &fit).unwrap());
    }
    check(worst <= 1e-3, format!("max KKT violation {worst:.2e} over 200 instances (tol 1e-3)"))
}

/// Minimizer of `½v(β − b)² + t|β|` by bisection on the right derivative.
fn scalar_minimizer(b: f64, v: f64, t: f64) -> f64 {
    if (v * b).abs() <= t {
        return 0.0;
    }
    let right = |x: f64| v * (x - b) + if x >= 0.0 { t } else { -t };
    let (mut lo, mut hi) = (-b.abs() - 1.0, b.abs() + 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if right(mid) >= 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

fn c3_closed_form() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let p = rng.random_range(1..=20);
        let b: Vec<f64> = (0..p).map(|_| rng.random_range(-3.0..3.0)).collect();
        let v: Vec<f64> = (0..p).map(|_| rng.random_range(0.1..10.0)).collect();
        let d: Vec<f64> = (0..p).map(|_| rng.random_range(0.1..5.0)).collect();
        let nu = rng.random_range(0.0..3.0);
        let got = wave_sparse(&b, &v, &d, nu).map_err(|e| e.to_string())?;
        for l in 0..p {
            worst = worst.max((got[l] - scalar_minimizer(b[l], v[l], nu * d[l])).abs());
        }
    }
    check(worst <= 1e-8, format!("max gap to numerical minimizer {worst:.2e} (tol 1e-8)"))
}

fn random_summaries(rng: &mut ChaCha20Rng, k: usize, p: usize) -> Vec<LocalSummary> {
    (0..k)
        .map(|j| {
            let beta = (0..p)
                .map(|_| if rng.random_bool(0.3) { 0.0 } else { rng.random_range(-3.0..3.0) })
                .collect();
            let diag = (0..p).map(|_| rng.random_range(0.05..5.0)).collect();
            LocalSummary::new(j, rng.random_range(20..200), beta, diag).unwrap()
        })
        .collect()
}

fn c4_identities() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let mut collapse_mismatch = 0;
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let k = rng.random_range(1..=10);
        let p = rng.random_range(1..=10);
        let mut s = random_summaries(&mut rng, k, p);
        let (wave, _) = wave_point(&s).unwrap();
        let alpha = alpha_weights(&s);
        let diag: Vec<_> = s
            .iter()
            .map(|x| (x.beta_hat.clone(), DMatrix::from_diagonal(&DVector::from_column_slice(&x.lambda_diag))))
            .collect();
        let full = full_ls_reference(&diag, &alpha).map_err(|e| e.to_string())?;
        for (a, b) in full.iter().zip(&wave) {
            worst = worst.max((a - b).abs());
        }

        let shared = s[0].lambda_diag.clone();
        for x in &mut s {
            x.lambda_diag = shared.clone();
        }
        if wave_point(&s).unwrap().0 != simple_average(&s).unwrap() {
            collapse_mismatch += 1;
        }
    }
    check(
        collapse_mismatch == 0 && worst <= 1e-10,
        format!("collapse mismatches {collapse_mismatch}/100, diagonal reference gap {worst:.2e} (tol 1e-10)"),
    )
}

fn cell(example: Example, setting: Setting, k: usize, n: usize, p: usize, reps: usize) -> CellConfig {
    CellConfig {
        name: None,
        example,
        setting,
        k,
        n_per_worker: n,
        p,
        repetitions: Some(reps),
        seed: None,
    }
}

fn bench_cell(c: CellConfig) -> Result<CellReport, String> {
    let cfg = BenchConfig {
        repetitions: c.repetitions.unwrap_or(50),
        seed: SEED,
        run: RunConfig::default(),
        ls_reference_max_p: 0,
        max_p: 500,
        allow_large: false,
        cells: vec![c],
    };
    let report = run_bench(&cfg, threads(), 0).map_err(|e| e.to_string())?;
    let cell = report.cells.into_iter().next().unwrap();
    if let Some(f) = cell.failures.first() {
        return Err(format!(
            "{} of {} repetitions failed, first: rep {}: {}",
            cell.failures.len(),
            cell.repetitions,
            f.repetition,
            f.error
        ));
    }
    Ok(cell)
}

fn means(c: &CellReport) -> (f64, f64) {
    (c.method(Method::Wave).unwrap().mean_error, c.method(Method::Ave).unwrap().mean_error)
}

/// Shared by the homogeneous error and selection criteria.
fn homogeneous_linear() -> Result<CellReport, String> {
    bench_cell(cell(Example::Linear, Setting::Homogeneous, 10, 500, 100, 50))
}

fn c5_homogeneous_error(c: &CellReport) -> Outcome {
    let (wave, ave) = means(c);
    check(
        (2e-4..=2e-3).contains(&wave),
        format!("WAVE mean error {wave:.4e} in [2e-4, 2e-3] (AVE {ave:.4e})"),
    )
}

fn c6_heterogeneous_ordering() -> Outcome {
    let c = bench_cell(cell(Example::Linear, Setting::Heterogeneous, 50, 100, 100, 50))?;
    let (wave, ave) = means(&c);
    check(
        wave < 0.6 * ave,
        format!("WAVE {wave:.4e} vs AVE {ave:.4e}, ratio {:.3} (need < 0.6)", wave / ave),
    )
}

/// One-sided sign test: P(X ≥ wins) for X ~ Bin(reps, ½).
fn sign_test(wins: u64, reps: u64) -> f64 {
    if wins == 0 {
        return 1.0;
    }
    Binomial::new(0.5, reps).unwrap().sf(wins - 1)
}

fn c7_poisson_ordering() -> Outcome {
    let c = bench_cell(cell(Example::Poisson, Setting::Homogeneous, 10, 500, 100, 50))?;
    let (wave, ave) = means(&c);
    let w = &c.method(Method::Wave).unwrap().errors;
    let a = &c.method(Method::Ave).unwrap().errors;
    let wins = w.iter().zip(a).filter(|(x, y)| x.1 < y.1).count() as u64;
    let pval = sign_test(wins, w.len() as u64);
    check(
        wave < ave && pval < 0.05,
        format!(
            "WAVE {wave:.4e} vs AVE {ave:.4e}; WAVE better in {wins}/{} reps, sign test p = {pval:.2e}",
            w.len()
        ),
    )
}

fn c8_huber_ordering() -> Outcome {
    let c = bench_cell(cell(Example::HuberLinear, Setting::Homogeneous, 30, 167, 100, 50))?;
    let (wave, ave) = means(&c);
    check(
        wave / ave < 0.8,
        format!("WAVE {wave:.4e} vs AVE {ave:.4e}, ratio {:.3} (need < 0.8)", wave / ave),
    )
}

fn c9_selection(c: &CellReport) -> Outcome {
    let rate = c.method(Method::Wave).unwrap().exact_support_rate;
    check(rate >= 0.9, format!("support = {{1,2,5}} in {:.0}% of 50 reps (need ≥ 90%)", 100.0 * rate))
}

fn c10_coverage() -> Outcome {
    let c = bench_cell(cell(Example::Linear, Setting::Homogeneous, 10, 500, 50, 200))?;
    let cov = c.ci_coverage.unwrap();
    let by: Vec<String> = c
        .ci_coverage_by_coordinate
        .iter()
        .map(|(l, v)| format!("x{}: {:.1}%", l + 1, 100.0 * v))
        .collect();
    check(
        (0.90..=0.98).contains(&cov),
        format!("pooled coverage {:.1}% in [90%, 98%] ({})", 100.0 * cov, by.join(", ")),
    )
}

/// Finite reals weighted toward the awkward cases: signed zeros,
/// subnormals, and the extreme exponents.
fn special_real(rng: &mut ChaCha20Rng) -> f64 {
    let sign = if rng.random_bool(0.5) { 1u64 << 63 } else { 0 };
    let mantissa = rng.random_range(0..1u64 << 52);
    let exponent: u64 = match rng.random_range(0..5) {
        0 => return if sign == 0 { 0.0 } else { -0.0 },
        1 => 0,
        2 => rng.random_range(1..4),
        3 => rng.random_range(2043..2047),
        _ => rng.random_range(1..2047),
    };
    f64::from_bits(sign | exponent << 52 | mantissa)
}

fn c11_protocol() -> Outcome {
    let mut rng = ChaCha20Rng::seed_from_u64(11);
    let mut mismatches = 0;
    for id in 0..10_000 {
        let p = rng.random_range(0..30);
        let beta: Vec<f64> = (0..p).map(|_| special_real(&mut rng)).collect();
        let diag: Vec<f64> = (0..p)
            .map(|_| loop {
                let v = special_real(&mut rng).abs();
                if v > 0.0 {
                    break v;
                }
            })
            .collect();
        let s = LocalSummary::new(id, rng.random_range(1..1_000_000), beta, diag).unwrap();
        let bytes = encode_summary(&s);
        let same = match decode_summary(&bytes) {
            Ok(back) => {
                back.worker_id == s.worker_id
                    && back.n_j == s.n_j
                    && back.beta_hat.iter().map(|v| v.to_bits()).eq(s.beta_hat.iter().map(|v| v.to_bits()))
                    && back
                        .lambda_diag
                        .iter()
                        .map(|v| v.to_bits())
                        .eq(s.lambda_diag.iter().map(|v| v.to_bits()))
            }
            Err(_) => false,
        };
        if !same || bytes.iter().filter(|b| **b == b'\n').count() != 1 {
            mismatches += 1;
        }
    }

    let mut stream_ok = true;
    let mut counts_ok = true;
    for (example, k) in [(Example::Linear, 10), (Example::Poisson, 5), (Example::Logistic, 4)] {
        let gen = GenConfig {
            example,
            setting: Setting::Homogeneous,
            k,
            n_per_worker: 200,
            p: 20,
            seed: SEED,
        };
        let (shards, _) = generate(&gen).map_err(|e| e.to_string())?;
        let base = RunConfig {
            model: example.loss_model(),
            ..RunConfig::default()
        };
        let a = run_pipeline(&shards, &base).map_err(|e| e.to_string())?;
        let b = run_pipeline(
            &shards,
            &RunConfig {
                mode: Mode::Stream,
                ..base
            },
        )
        .map_err(|e| e.to_string())?;
        stream_ok &= a.result == b.result && a.summaries == b.summaries;
        let t = b.traffic.unwrap();
        counts_ok &= t.messages == k && t.per_worker.len() == k && t.per_worker.values().all(|c| *c == 1);
    }
    check(
        mismatches == 0 && stream_ok && counts_ok,
        format!(
            "codec mismatches {mismatches}/10000, stream == in-process: {stream_ok}, one message per worker: {counts_ok}"
        ),
    )
}

fn c12_determinism() -> Outcome {
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    let mut ok = true;
    for example in [Example::Linear, Example::Poisson] {
        let gen = GenConfig {
            example,
            setting: Setting::Heterogeneous,
            k: 8,
            n_per_worker: 150,
            p: 20,
            seed: SEED,
        };
        let (shards, _) = generate(&gen).map_err(|e| e.to_string())?;
        let runs = [1, 4, 8]
            .iter()
            .map(|&t| {
                run_pipeline(
                    &shards,
                    &RunConfig {
                        model: example.loss_model(),
                        worker_parallelism: t,
                        ..RunConfig::default()
                    },
                )
                .map_err(|e| e.to_string())
            })
            .collect::<Result<Vec<_>, _>>()?;
        for r in &runs[1..] {
            ok &= bits(&r.result.beta_sparse) == bits(&runs[0].result.beta_sparse)
                && bits(&r.result.beta_wave) == bits(&runs[0].result.beta_wave)
                && bits(&r.result.ci_halfwidth) == bits(&runs[0].result.ci_halfwidth)
                && r.result.nu_hat.to_bits() == runs[0].result.nu_hat.to_bits();
        }
        let cfg = RunConfig {
            model: example.loss_model(),
            ..RunConfig::default()
        };
        let mut rng = ChaCha20Rng::seed_from_u64(12);
        for _ in 0..20 {
            let mut shuffled = runs[0].summaries.clone();
            shuffled.shuffle(&mut rng);
            let (_, res) = aggregate_summaries(shuffled, &cfg).map_err(|e| e.to_string())?;
            ok &= bits(&res.beta_sparse) == bits(&runs[0].result.beta_sparse)
                && bits(&res.beta_wave) == bits(&runs[0].result.beta_wave);
        }
    }
    check(ok, format!("bit-identical across parallelism {{1,4,8}} and 20 arrival orders: {ok}"))
}

fn main() -> ExitCode {
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |id: &str| filters.is_empty() || filters.iter().any(|f| f == id);

    // Criteria 5 and 9 read the same simulation cell.
    let mut shared: Option<Result<CellReport, String>> = None;
    let mut homogeneous = || shared.get_or_insert_with(homogeneous_linear).clone();

    let mut failed = 0;
    let mut run = |id: &str, name: &str, f: &mut dyn FnMut() -> Outcome| {
        if !wanted(id) {
            return;
        }
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS {id:<4} {name}: {d} [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("FAIL {id:<4} {name}: {d} [{secs:.1}s]");
            }
        }
    };

    run("c1", "solver vs grid search", &mut c1_solver_vs_grid);
    run("c2", "KKT conditions", &mut c2_kkt);
    run("c3", "sparsification closed form", &mut c3_closed_form);
    run("c4", "collapse and diagonal identities", &mut c4_identities);
    run("c5", "homogeneous linear error", &mut || c5_homogeneous_error(&homogeneous()?));
    run("c6", "heterogeneous linear ordering", &mut c6_heterogeneous_ordering);
    run("c7", "poisson ordering", &mut c7_poisson_ordering);
    run("c8", "huber ordering", &mut c8_huber_ordering);
    run("c9", "selection consistency", &mut || c9_selection(&homogeneous()?));
    run("c10", "confidence interval coverage", &mut c10_coverage);
    run("c11", "wire protocol", &mut c11_protocol);
    run("c12", "determinism", &mut c12_determinism);

    let strict = std::env::var("WAVE_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    if failed == 0 {
        println!("all selected acceptance criteria passed");
        ExitCode::SUCCESS
    } else if strict {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        println!("{failed} acceptance criteria failed (set WAVE_ACCEPTANCE_STRICT=1 to fail the run)");
        ExitCode::SUCCESS
    }
}
