use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use wave_bench::config::CellConfig;
use wave_bench::report::write_all;
use wave_bench::runner::{repetition_seed, run_repetition};
use wave_bench::{run_bench, BenchConfig, BenchError};
use wave_core::datagen::{generate, write_shard_csv, Example, Setting};
use wave_core::model::{LossModel, DEFAULT_HUBER_A};
use wave_core::runtime::{decode_summary, encode_summary, Mode, RunConfig};
use wave_core::solver::{kkt_violation, solve_weighted_l1, AdmmConfig};
use wave_core::worker::Tuning;

#[derive(Parser)]
#[command(name = "wave", version, about = "Distributed sparse regression by weighted averaging")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a benchmark grid from a JSON config.
    Bench {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        threads: usize,
        #[arg(long, default_value_t = 0)]
        seed_offset: u64,
    },
    /// Run a single cell and print each repetition.
    Simulate {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 1)]
        repetitions: usize,
        #[arg(long, value_enum, default_value_t = ModeArg::InProcess)]
        mode: ModeArg,
        /// Worker threads inside each run.
        #[arg(long, default_value_t = 1)]
        threads: usize,
        /// Use K-fold cross-validation instead of the local BIC.
        #[arg(long)]
        cv_folds: Option<usize>,
    },
    /// Fit one shard at one λ and print the coefficients.
    Solve {
        /// CSV with header `y,x1,..,xp`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        loss: LossArg,
        #[arg(long, default_value_t = DEFAULT_HUBER_A)]
        huber_a: f64,
        #[arg(long)]
        lambda: f64,
        /// Comma-separated penalty weights (default all ones).
        #[arg(long, value_delimiter = ',')]
        weights: Option<Vec<f64>>,
    },
    /// Write generated shards as CSV files.
    Gen {
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Decode a stream of summary messages and re-encode it.
    ProtocolEcho {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

#[derive(clap::Args)]
struct DataArgs {
    #[arg(long, value_enum)]
    example: ExampleArg,
    #[arg(long, value_enum, default_value_t = SettingArg::Homogeneous)]
    setting: SettingArg,
    #[arg(long)]
    k: usize,
    /// Rows per worker.
    #[arg(long)]
    n: usize,
    #[arg(long)]
    p: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum ExampleArg {
    Linear,
    Logistic,
    Poisson,
    Huber,
}

#[derive(Clone, Copy, ValueEnum)]
enum SettingArg {
    Homogeneous,
    Heterogeneous,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    InProcess,
    Stream,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Ls,
    Logistic,
    Poisson,
    Huber,
}

impl DataArgs {
    fn cell(&self) -> CellConfig {
        CellConfig {
            name: None,
            example: match self.example {
                ExampleArg::Linear => Example::Linear,
                ExampleArg::Logistic => Example::Logistic,
                ExampleArg::Poisson => Example::Poisson,
                ExampleArg::Huber => Example::HuberLinear,
            },
            setting: match self.setting {
                SettingArg::Homogeneous => Setting::Homogeneous,
                SettingArg::Heterogeneous => Setting::Heterogeneous,
            },
            k: self.k,
            n_per_worker: self.n,
            p: self.p,
            repetitions: None,
            seed: Some(self.seed),
        }
    }
}

/// Failure classes mapped to distinct exit codes.
enum Failure {
    Config(String),
    Run(String),
}

impl From<BenchError> for Failure {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Config { .. } => Failure::Config(e.to_string()),
            other => Failure::Run(other.to_string()),
        }
    }
}

impl From<wave_core::error::WaveError> for Failure {
    fn from(e: wave_core::error::WaveError) -> Self {
        match e {
            wave_core::error::WaveError::Config(_) => Failure::Config(e.to_string()),
            other => Failure::Run(other.to_string()),
        }
    }
}

fn io_failure(path: &str) -> impl Fn(io::Error) -> Failure + '_ {
    move |e| Failure::Run(format!("{path}: {e}"))
}

fn bench(config: PathBuf, out_dir: PathBuf, threads: usize, seed_offset: u64) -> Result<(), Failure> {
    let cfg = BenchConfig::load(&config)?;
    let report = run_bench(&cfg, threads, seed_offset)?;
    write_all(&report, &out_dir)?;
    for cell in &report.cells {
        for m in &cell.methods {
            println!(
                "{:<40} {:<7} mean {:.4e} std {} exact {:.2}",
                cell.name,
                m.method.name(),
                m.mean_error,
                m.std_error.map(|s| format!("{s:.4e}")).unwrap_or_else(|| "-".into()),
                m.exact_support_rate
            );
        }
        for f in &cell.failures {
            eprintln!("{}: repetition {} failed: {}", cell.name, f.repetition, f.error);
        }
    }
    println!("wrote {}", out_dir.display());
    Ok(())
}

fn simulate(
    data: DataArgs,
    repetitions: usize,
    mode: ModeArg,
    threads: usize,
    cv_folds: Option<usize>,
) -> Result<(), Failure> {
    let cell = data.cell();
    cell.gen_config(data.seed).validate()?;
    let run = RunConfig {
        mode: if mode == ModeArg::Stream { Mode::Stream } else { Mode::InProcess },
        worker_parallelism: threads.max(1),
        tuning: cv_folds.map(Tuning::KFoldCv).unwrap_or(Tuning::LocalBic),
        ..RunConfig::default()
    };
    for rep in 0..repetitions {
        let seed = repetition_seed(data.seed, 0, rep);
        let out = run_repetition(&cell, &run, cell.p <= 100, rep, seed)?;
        let parts: Vec<String> = out
            .methods
            .iter()
            .map(|(m, e, s)| format!("{} {:.4e} (exact {})", m.name(), e, s.exact))
            .collect();
        println!("rep {rep} seed {seed}: {} [{:.2}s]", parts.join(", "), out.seconds);
        for w in &out.warnings {
            eprintln!("  warning: {w}");
        }
    }
    Ok(())
}

fn solve(data: PathBuf, loss: LossArg, huber_a: f64, lambda: f64, weights: Option<Vec<f64>>) -> Result<(), Failure> {
    let path = data.display().to_string();
    let file = File::open(&data).map_err(io_failure(&path))?;
    let shard = wave_core::datagen::read_shard_csv(0, file)?;
    let model = match loss {
        LossArg::Ls => LossModel::least_squares(),
        LossArg::Logistic => LossModel::logistic(),
        LossArg::Poisson => LossModel::poisson(),
        LossArg::Huber => LossModel::huber(huber_a)?,
    };
    let w = weights.unwrap_or_else(|| vec![1.0; shard.p()]);
    let beta = solve_weighted_l1(&shard, &model, lambda, &w, &AdmmConfig::default(), None)?;
    let kkt = kkt_violation(&shard, &model, lambda, &w, &beta)?;
    for (k, b) in beta.iter().enumerate() {
        println!("x{}\t{b:?}", k + 1);
    }
    eprintln!("kkt violation {kkt:.3e}");
    Ok(())
}

fn gen(data: DataArgs, out_dir: PathBuf) -> Result<(), Failure> {
    let cfg = data.cell().gen_config(data.seed);
    let (shards, truth) = generate(&cfg)?;
    let dir = out_dir.display().to_string();
    std::fs::create_dir_all(&out_dir).map_err(io_failure(&dir))?;
    for s in &shards {
        let path = out_dir.join(format!("shard_{}.csv", s.worker_id));
        let name = path.display().to_string();
        let f = File::create(&path).map_err(io_failure(&name))?;
        write_shard_csv(s, BufWriter::new(f))?;
    }
    let truth_path = out_dir.join("beta_star.csv");
    let mut text = String::from("coordinate,beta\n");
    for (k, b) in truth.beta_star.iter().enumerate() {
        text.push_str(&format!("{},{b:?}\n", k + 1));
    }
    std::fs::write(&truth_path, text).map_err(io_failure(&dir))?;
    println!("wrote {} shards to {dir}", shards.len());
    Ok(())
}

fn protocol_echo(input: Option<PathBuf>, output: Option<PathBuf>) -> Result<(), Failure> {
    let reader: Box<dyn BufRead> = match &input {
        Some(p) => Box::new(BufReader::new(File::open(p).map_err(io_failure(&p.display().to_string()))?)),
        None => Box::new(io::stdin().lock()),
    };
    let mut writer: Box<dyn Write> = match &output {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(io_failure(&p.display().to_string()))?)),
        None => Box::new(io::stdout().lock()),
    };
    let mut count = 0usize;
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(io_failure("input"))?;
        if line.trim().is_empty() {
            continue;
        }
        let msg = decode_summary(line.as_bytes()).map_err(|e| Failure::Run(format!("line {}: {e}", i + 1)))?;
        writer.write_all(&encode_summary(&msg)).map_err(io_failure("output"))?;
        count += 1;
    }
    writer.flush().map_err(io_failure("output"))?;
    eprintln!("echoed {count} messages");
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Bench {
            config,
            out_dir,
            threads,
            seed_offset,
        } => bench(config, out_dir, threads, seed_offset),
        Command::Simulate {
            data,
            repetitions,
            mode,
            threads,
            cv_folds,
        } => simulate(data, repetitions, mode, threads, cv_folds),
        Command::Solve {
            data,
            loss,
            huber_a,
            lambda,
            weights,
        } => solve(data, loss, huber_a, lambda, weights),
        Command::Gen { data, out_dir } => gen(data, out_dir),
        Command::ProtocolEcho { input, output } => protocol_echo(input, output),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}
