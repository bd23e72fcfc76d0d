//! `dasm` command-line front end: benchmark generation, single runs, the
//! optimizer × rate × seed matrix, ablations, sweeps, analyses and timing.
//!
//! Every verb writes the fully materialized config it ran with next to its
//! outputs. Exit codes: 0 success, 1 configuration error, 2 some cells
//! failed, 3 internal error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use dasm::harness::{
    analyze, run_ablation_on, run_matrix_on, run_sensitivity_on, timing_report, write_timing_csv, AnalysisConfig,
    ExperimentMatrix, Knob, MatrixResult, TimingConfig,
};
use dasm::model::EncoderClassifier;
use dasm::optim::{OptimizerKind, TrainConfig};
use dasm::par::Exec;
use dasm::synth::{gen_feature_benchmark, read_splits, write_benchmark, BenchmarkConfig};
use dasm::data::Splits;
use dasm::train::train;

#[derive(Parser, Debug)]
#[command(name = "dasm", version, about = "Domain-aware sharpness minimization experiments")]
struct Cli {
    /// Output root.
    #[arg(long, env = "DASM_OUT", default_value = "dasm-out", global = true)]
    out: PathBuf,
    /// Run every data-parallel loop on the calling thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    verb: Verb,
}

#[derive(Subcommand, Debug)]
enum Verb {
    /// Generate the synthetic feature benchmark.
    Gen {
        #[command(flatten)]
        bench: BenchArgs,
        /// Also write CSV mirrors of every split.
        #[arg(long)]
        csv: bool,
    },
    /// Train one model on one embedding rate.
    Train {
        #[command(flatten)]
        bench: BenchArgs,
        #[command(flatten)]
        train: TrainArgs,
        /// Embedding rate to train on.
        #[arg(long, default_value_t = 0.3)]
        er: f64,
    },
    /// Optimizer × rate × seed matrix.
    Matrix(MatrixArgs),
    /// Component ablation over the matrix's rates and seeds.
    Ablate(MatrixArgs),
    /// Sensitivity sweep of one knob.
    Sweep {
        #[arg(long, value_parser = parse_knob)]
        knob: Knob,
        #[command(flatten)]
        matrix: MatrixArgs,
    },
    /// Sharpness, PAD, landscape, Hessian and feature dumps of a checkpoint.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        bench: BenchArgs,
        #[arg(long, default_value_t = 0.3)]
        er: f64,
        /// JSON analysis config.
        #[arg(long)]
        analysis: Option<PathBuf>,
    },
    /// Per-batch wall time of adam, sam and dasm.
    Time {
        #[command(flatten)]
        bench: BenchArgs,
        #[command(flatten)]
        train: TrainArgs,
        #[arg(long, default_value_t = 0.3)]
        er: f64,
        #[arg(long, default_value_t = 200)]
        batches: usize,
        #[arg(long, default_value_t = 20)]
        warmup: usize,
    },
}

#[derive(Args, Debug, Clone, Default)]
struct BenchArgs {
    /// JSON benchmark config.
    #[arg(long)]
    bench_config: Option<PathBuf>,
    /// Read splits from a directory written by `gen` instead of generating.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    per_cell: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    rates: Option<Vec<f64>>,
    #[arg(long)]
    bench_seed: Option<u64>,
}

#[derive(Args, Debug, Clone, Default)]
struct TrainArgs {
    /// JSON training config.
    #[arg(long)]
    train_config: Option<PathBuf>,
    #[arg(long, value_parser = parse_optimizer)]
    optimizer: Option<OptimizerKind>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
struct MatrixArgs {
    /// JSON experiment matrix; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', value_parser = parse_optimizer)]
    optimizers: Option<Vec<OptimizerKind>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',')]
    rates: Option<Vec<f64>>,
    #[arg(long)]
    per_cell: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Estimate zeroth-order sharpness of every trained cell.
    #[arg(long)]
    sharpness: bool,
}

fn parse_optimizer(s: &str) -> std::result::Result<OptimizerKind, String> {
    s.parse().map_err(|e: dasm::Error| e.to_string())
}

fn parse_knob(s: &str) -> std::result::Result<Knob, String> {
    match s {
        "rho" => Ok(Knob::Rho),
        "tau" => Ok(Knob::Tau),
        _ => Err(format!("unknown knob {s:?} (rho or tau)")),
    }
}

/// A failure of the user's inputs rather than of the program.
#[derive(Debug)]
struct ConfigError(String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

/// Cells that failed inside an otherwise completed matrix.
#[derive(Debug)]
struct CellFailures(usize);

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
    serde_json::from_slice(&bytes).map_err(|e| ConfigError(format!("{}: {e}", path.display())).into())
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(v)?).with_context(|| format!("writing {}", path.display()))
}

fn bench_config(a: &BenchArgs) -> Result<BenchmarkConfig> {
    let mut b: BenchmarkConfig = match &a.bench_config {
        Some(p) => read_json(p)?,
        None => BenchmarkConfig::default(),
    };
    if let Some(n) = a.per_cell {
        b.per_cell = n;
    }
    if let Some(d) = a.dim {
        b.dim = d;
    }
    if let Some(r) = &a.rates {
        b.embedding_rates = r.clone();
    }
    if let Some(s) = a.bench_seed {
        b.seed = s;
    }
    Ok(b)
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut t: TrainConfig = match &a.train_config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($f:ident),*) => {$(if let Some(v) = a.$f { t.$f = v; })*};
    }
    set!(optimizer, lr, rho, tau, momentum, batch_size, epochs, patience, seed);
    Ok(t)
}

/// Splits for the given rates, loaded from `data` when present.
fn load_splits(data: Option<&Path>, bench: &BenchmarkConfig, exec: Exec) -> Result<Vec<Splits>> {
    match data {
        Some(dir) => bench
            .embedding_rates
            .iter()
            .map(|&er| read_splits(dir, er).map_err(|e| ConfigError(format!("{}: {e}", dir.display())).into()))
            .collect(),
        None => Ok(gen_feature_benchmark(bench, exec)?),
    }
}

fn matrix_config(a: &MatrixArgs, exec: Exec) -> Result<ExperimentMatrix> {
    let mut m: ExperimentMatrix = match &a.config {
        Some(p) => read_json(p)?,
        None => ExperimentMatrix::default(),
    };
    if let Some(o) = &a.optimizers {
        m.optimizers = o.clone();
    }
    if let Some(s) = &a.seeds {
        m.seeds = s.clone();
    }
    if let Some(r) = &a.rates {
        m.benchmark.embedding_rates = r.clone();
    }
    if let Some(n) = a.per_cell {
        m.benchmark.per_cell = n;
    }
    if let Some(e) = a.epochs {
        m.train.epochs = e;
    }
    m.analysis.sharpness |= a.sharpness;
    m.exec = exec;
    m.validate()?;
    Ok(m)
}

fn finish_matrix(res: &MatrixResult, dir: &Path, stem: &str) -> Result<()> {
    res.persist(dir, stem)?;
    for row in &res.summary {
        println!(
            "{:<14} er={:.2} runs={} failed={} avg={:.4}±{:.4}",
            row.variant, row.er, row.runs, row.failed, row.avg_mean, row.avg_std
        );
    }
    println!("wrote {}", dir.join(format!("{stem}.csv")).display());
    if res.failures() > 0 {
        return Err(CellFailures(res.failures()).into());
    }
    Ok(())
}

impl std::fmt::Display for CellFailures {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} cell(s) failed; see the cells CSV", self.0)
    }
}

impl std::error::Error for CellFailures {}

fn run(cli: Cli) -> Result<()> {
    let exec = if cli.sequential { Exec::Sequential } else { Exec::Parallel };
    let out = cli.out;
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    match cli.verb {
        Verb::Gen { bench, csv } => {
            let cfg = bench_config(&bench)?;
            cfg.validate()?;
            let dir = bench.data.clone().unwrap_or_else(|| out.join("bench"));
            let splits = gen_feature_benchmark(&cfg, exec)?;
            write_benchmark(&dir, &cfg, &splits)?;
            if !csv {
                for e in std::fs::read_dir(&dir)? {
                    let p = e?.path();
                    if p.extension().is_some_and(|x| x == "csv") {
                        std::fs::remove_file(p)?;
                    }
                }
            }
            println!("wrote {} rate(s) to {}", splits.len(), dir.display());
        }
        Verb::Train { bench, train: targs, er } => {
            let bcfg = BenchmarkConfig { embedding_rates: vec![er], ..bench_config(&bench)? };
            let tcfg = train_config(&targs)?;
            tcfg.validate()?;
            let sp = load_splits(bench.data.as_deref(), &bcfg, exec)?.remove(0);
            let model_cfg = dasm::model::ModelConfig { input_dim: sp.train.dim, init_seed: tcfg.seed, ..Default::default() };
            let run_id = format!("{}_{}_s{}", tcfg.optimizer.name(), dasm::synth::rate_tag(er), tcfg.seed);
            let dir = out.join("runs").join(&run_id);
            std::fs::create_dir_all(&dir)?;
            let outcome = train(EncoderClassifier::new(model_cfg)?, &sp, &tcfg, &run_id)?;
            outcome.report.write_json(&dir.join("report.json"))?;
            outcome.report.write_epoch_csv(&dir.join("epochs.csv"))?;
            outcome.model.save_checkpoint(&dir.join("model.ckpt"), Some(&outcome.bank), outcome.report.counts.steps)?;
            write_json(&dir.join("config.json"), &tcfg)?;
            println!("{run_id}: test avg {:.4} per domain {:?}", outcome.report.test.acc_avg, outcome.report.test.acc);
        }
        Verb::Matrix(a) => {
            let m = matrix_config(&a, exec)?;
            let splits = load_splits(a.data.as_deref(), &m.benchmark, exec)?;
            let dir = out.join("matrix");
            std::fs::create_dir_all(&dir)?;
            write_json(&dir.join("config.json"), &m)?;
            finish_matrix(&run_matrix_on(&m, &splits)?, &dir, "summary")?;
        }
        Verb::Ablate(a) => {
            let m = matrix_config(&a, exec)?;
            let splits = load_splits(a.data.as_deref(), &m.benchmark, exec)?;
            let dir = out.join("ablation");
            std::fs::create_dir_all(&dir)?;
            write_json(&dir.join("config.json"), &m)?;
            finish_matrix(&run_ablation_on(&m, &splits)?, &dir, "ablation")?;
        }
        Verb::Sweep { knob, matrix } => {
            let m = matrix_config(&matrix, exec)?;
            let splits = load_splits(matrix.data.as_deref(), &m.benchmark, exec)?;
            let stem = match knob {
                Knob::Rho => "sweep_rho",
                Knob::Tau => "sweep_tau",
            };
            let dir = out.join(stem);
            std::fs::create_dir_all(&dir)?;
            write_json(&dir.join("config.json"), &m)?;
            finish_matrix(&run_sensitivity_on(&m, knob, &splits)?, &dir, stem)?;
        }
        Verb::Analyze { checkpoint, bench, er, analysis } => {
            let acfg: AnalysisConfig = match &analysis {
                Some(p) => read_json(p)?,
                None => AnalysisConfig::default(),
            };
            let ckpt = EncoderClassifier::load_checkpoint(&checkpoint)
                .map_err(|e| ConfigError(format!("{}: {e}", checkpoint.display())))?;
            let bcfg = BenchmarkConfig { embedding_rates: vec![er], ..bench_config(&bench)? };
            let sp = load_splits(bench.data.as_deref(), &bcfg, exec)?.remove(0);
            let dir = out.join("analysis").join(&acfg.tag);
            let written = analyze(&ckpt.model, &sp, &acfg, &dir, exec)?;
            write_json(&dir.join("config.json"), &acfg)?;
            for p in written {
                println!("wrote {}", p.display());
            }
        }
        Verb::Time { bench, train: targs, er, batches, warmup } => {
            let bcfg = BenchmarkConfig { embedding_rates: vec![er], ..bench_config(&bench)? };
            let tcfg = train_config(&targs)?;
            tcfg.validate()?;
            let sp = load_splits(bench.data.as_deref(), &bcfg, exec)?.remove(0);
            let model_cfg = dasm::model::ModelConfig { input_dim: sp.train.dim, ..Default::default() };
            let cfg = TimingConfig { batches, warmup, batch_size: tcfg.batch_size, seed: tcfg.seed };
            let rows = timing_report(&model_cfg, &tcfg, &sp, &cfg)?;
            let p = out.join("timing.csv");
            write_timing_csv(&p, &rows)?;
            for r in &rows {
                println!(
                    "{:<5} {:.3} ± {:.3} ms/batch  rel {:.3}  fwd/bwd {}/{}",
                    r.optimizer.name(),
                    r.ms_mean,
                    r.ms_std,
                    r.rel_time,
                    r.forward_per_step,
                    r.backward_per_step
                );
            }
            println!("wrote {}", p.display());
        }
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<CellFailures>().is_some() {
        return 2;
    }
    if e.downcast_ref::<ConfigError>().is_some() {
        return 1;
    }
    match e.downcast_ref::<dasm::Error>() {
        Some(dasm::Error::Config(_) | dasm::Error::Input(_) | dasm::Error::SampleSize(_)) => 1,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
