//! Experiment orchestration: the optimizer × rate × seed matrix, ablations,
//! sensitivity sweeps, timing, and the analysis bundle of a trained model.
//!
//! Cells are independent and run through [`crate::par::map_indexed`]; a
//! failed cell becomes a row with its error instead of aborting the matrix.
//! Aggregate CSVs start with a `# schema=1` comment line.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analysis::{
    hessian_probe, landscape_slice, pad_matrix, zeroth_order_sharpness, HessianConfig, LandscapeConfig,
    ModelObjective, SharpnessConfig, SharpnessReport,
};
use crate::data::Splits;
use crate::error::{Error, Result};
use crate::gap::population_std;
use crate::losses::LossTerms;
use crate::model::{EncoderClassifier, ModelConfig};
use crate::optim::{OptimizerKind, PassCounts, TrainConfig, Trainer};
use crate::par::{map_indexed, Exec};
use crate::synth::{gen_feature_benchmark, rate_tag, BenchmarkConfig};
use crate::train::{epoch_batches, train, RunReport};

pub const SCHEMA_LINE: &str = "# schema=1";

/// Which analyses run after each cell.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct AnalysisToggles {
    pub sharpness: bool,
    pub pad: bool,
    pub landscape: bool,
    pub hessian: bool,
    pub features: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentMatrix {
    pub optimizers: Vec<OptimizerKind>,
    pub seeds: Vec<u64>,
    pub benchmark: BenchmarkConfig,
    pub model: ModelConfig,
    /// Template; `optimizer` and `seed` are overwritten per cell.
    pub train: TrainConfig,
    pub analysis: AnalysisToggles,
    pub sharpness: SharpnessConfig,
    pub exec: Exec,
}

impl Default for ExperimentMatrix {
    fn default() -> Self {
        ExperimentMatrix {
            optimizers: vec![OptimizerKind::Adam, OptimizerKind::Sam, OptimizerKind::Dasm],
            seeds: vec![0, 1, 2],
            benchmark: BenchmarkConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            analysis: AnalysisToggles::default(),
            sharpness: SharpnessConfig::default(),
            exec: Exec::Parallel,
        }
    }
}

impl ExperimentMatrix {
    pub fn validate(&self) -> Result<()> {
        if self.optimizers.is_empty() || self.seeds.is_empty() || self.benchmark.embedding_rates.is_empty() {
            return Err(Error::Config("experiment matrix axes must be non-empty".into()));
        }
        if self.model.input_dim != self.benchmark.dim {
            return Err(Error::Config(format!(
                "model input dimension {} does not match benchmark dimension {}",
                self.model.input_dim, self.benchmark.dim
            )));
        }
        self.benchmark.validate()?;
        self.model.validate()?;
        self.train.validate()
    }
}

/// Everything needed to rerun one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellConfig {
    pub run_id: String,
    /// Label of the ablation or sweep variant, empty in a plain matrix.
    pub variant: String,
    pub er: f64,
    pub benchmark: BenchmarkConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub config: CellConfig,
    pub report: Option<RunReport>,
    pub sharpness: Option<SharpnessReport>,
    pub error: Option<String>,
}

impl CellResult {
    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

fn run_id(variant: &str, opt: OptimizerKind, er: f64, seed: u64) -> String {
    let head = if variant.is_empty() { opt.name().to_string() } else { variant.to_string() };
    format!("{head}_{}_s{seed}", rate_tag(er))
}

/// Train one cell on pre-generated splits; optionally estimate sharpness on
/// the test split.
pub fn run_cell(
    cfg: &CellConfig,
    splits: &Splits,
    sharpness: Option<&SharpnessConfig>,
    exec: Exec,
) -> Result<(RunReport, Option<SharpnessReport>, EncoderClassifier)> {
    let model = EncoderClassifier::new(cfg.model.clone())?;
    let out = train(model, splits, &cfg.train, &cfg.run_id)?;
    let sh = match sharpness {
        Some(sc) => Some(zeroth_order_sharpness(&out.model, &splits.test, &splits.domain_names, sc, exec)?),
        None => None,
    };
    Ok((out.report, sh, out.model))
}

/// Regenerate the benchmark from a config echo and rerun the cell.
pub fn rerun_cell(cfg: &CellConfig) -> Result<RunReport> {
    let bench = BenchmarkConfig { embedding_rates: vec![cfg.er], ..cfg.benchmark.clone() };
    let splits = gen_feature_benchmark(&bench, Exec::Sequential)?.remove(0);
    Ok(run_cell(cfg, &splits, None, Exec::Sequential)?.0)
}

fn execute_cells(
    cells: Vec<CellConfig>,
    splits: &[Splits],
    sharpness: Option<&SharpnessConfig>,
    exec: Exec,
) -> Vec<CellResult> {
    map_indexed(exec, cells.len(), |i| {
        let cfg = &cells[i];
        let sp = splits.iter().find(|s| s.er == cfg.er).expect("splits generated for every rate");
        // inner analyses stay sequential; parallelism is across cells
        match run_cell(cfg, sp, sharpness, Exec::Sequential) {
            Ok((report, sh, _)) => CellResult { config: cfg.clone(), report: Some(report), sharpness: sh, error: None },
            Err(e) => {
                log::warn!("cell {} failed: {e}", cfg.run_id);
                CellResult { config: cfg.clone(), report: None, sharpness: None, error: Some(e.to_string()) }
            }
        }
    })
}

/// Mean and population std over seeds of one (variant, rate) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub variant: String,
    pub er: f64,
    pub runs: usize,
    pub failed: usize,
    pub acc_mean: Vec<f64>,
    pub acc_std: Vec<f64>,
    pub avg_mean: f64,
    pub avg_std: f64,
    pub sharpness_mean: Option<f64>,
    pub sharpness_std: Option<f64>,
    pub sharpness_total: Option<f64>,
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        f64::NAN
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Group cells by (variant label, rate) in first-seen order.
pub fn summarize(cells: &[CellResult]) -> Vec<SummaryRow> {
    let mut keys: Vec<(String, f64)> = Vec::new();
    for c in cells {
        let k = (label(c), c.config.er);
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(variant, er)| {
            let group: Vec<&CellResult> = cells.iter().filter(|c| label(c) == variant && c.config.er == er).collect();
            let ok: Vec<&RunReport> = group.iter().filter_map(|c| c.report.as_ref()).collect();
            let s = ok.first().map_or(0, |r| r.test.acc.len());
            let per = |k: usize| ok.iter().map(|r| r.test.acc[k]).collect::<Vec<f64>>();
            let avgs: Vec<f64> = ok.iter().map(|r| r.test.acc_avg).collect();
            let sh: Vec<&SharpnessReport> = group.iter().filter_map(|c| c.sharpness.as_ref()).collect();
            let opt_mean = |f: &dyn Fn(&SharpnessReport) -> f64| {
                (!sh.is_empty()).then(|| mean(&sh.iter().map(|r| f(r)).collect::<Vec<_>>()))
            };
            SummaryRow {
                variant,
                er,
                runs: group.len(),
                failed: group.len() - ok.len(),
                acc_mean: (0..s).map(|k| mean(&per(k))).collect(),
                acc_std: (0..s).map(|k| population_std(&per(k))).collect(),
                avg_mean: mean(&avgs),
                avg_std: if avgs.is_empty() { f64::NAN } else { population_std(&avgs) },
                sharpness_mean: opt_mean(&|r| r.mean),
                sharpness_std: opt_mean(&|r| r.std),
                sharpness_total: opt_mean(&|r| r.total),
            }
        })
        .collect()
}

fn label(c: &CellResult) -> String {
    if c.config.variant.is_empty() {
        c.config.train.optimizer.name().to_string()
    } else {
        c.config.variant.clone()
    }
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Accuracy table: one row per (variant, rate), per-domain mean and std.
pub fn write_summary_csv(path: &Path, rows: &[SummaryRow], domain_names: &[String]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{SCHEMA_LINE}")?;
    let mut w = csv::Writer::from_writer(f);
    let mut head = vec!["variant".to_string(), "er".into(), "runs".into(), "failed".into()];
    for n in domain_names {
        head.push(format!("{n}_mean"));
        head.push(format!("{n}_std"));
    }
    head.extend(["avg_mean", "avg_std", "sharpness_mean", "sharpness_std", "sharpness_total"].map(String::from));
    w.write_record(&head)?;
    for r in rows {
        let mut rec = vec![r.variant.clone(), r.er.to_string(), r.runs.to_string(), r.failed.to_string()];
        for k in 0..domain_names.len() {
            rec.push(r.acc_mean.get(k).map(|v| v.to_string()).unwrap_or_default());
            rec.push(r.acc_std.get(k).map(|v| v.to_string()).unwrap_or_default());
        }
        rec.push(r.avg_mean.to_string());
        rec.push(r.avg_std.to_string());
        rec.push(fmt_opt(r.sharpness_mean));
        rec.push(fmt_opt(r.sharpness_std));
        rec.push(fmt_opt(r.sharpness_total));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per cell, including failures.
pub fn write_cells_csv(path: &Path, cells: &[CellResult]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{SCHEMA_LINE}")?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(["run_id", "variant", "er", "seed", "status", "acc_avg", "accs", "sharpness_mean", "sharpness_std", "error"])?;
    for c in cells {
        let (acc, accs) = match &c.report {
            Some(r) => (
                r.test.acc_avg.to_string(),
                r.test.acc.iter().map(|a| a.to_string()).collect::<Vec<_>>().join(";"),
            ),
            None => (String::new(), String::new()),
        };
        w.write_record([
            c.config.run_id.clone(),
            label(c),
            c.config.er.to_string(),
            c.config.train.seed.to_string(),
            if c.failed() { "failed".into() } else { "ok".into() },
            acc,
            accs,
            fmt_opt(c.sharpness.as_ref().map(|s| s.mean)),
            fmt_opt(c.sharpness.as_ref().map(|s| s.std)),
            c.error.clone().unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixResult {
    pub cells: Vec<CellResult>,
    pub summary: Vec<SummaryRow>,
    pub domain_names: Vec<String>,
}

impl MatrixResult {
    pub fn failures(&self) -> usize {
        self.cells.iter().filter(|c| c.failed()).count()
    }

    pub fn row(&self, variant: &str, er: f64) -> Option<&SummaryRow> {
        self.summary.iter().find(|r| r.variant == variant && r.er == er)
    }

    /// Per-cell JSON and epoch CSVs under `cells/`, plus `cells.csv` and
    /// `<stem>.csv` with the aggregate table.
    pub fn persist(&self, dir: &Path, stem: &str) -> Result<()> {
        let cells_dir = dir.join("cells");
        std::fs::create_dir_all(&cells_dir)?;
        for c in &self.cells {
            std::fs::write(cells_dir.join(format!("{}.json", c.config.run_id)), serde_json::to_vec_pretty(c)?)?;
            if let Some(r) = &c.report {
                r.write_epoch_csv(&cells_dir.join(format!("{}_epochs.csv", c.config.run_id)))?;
            }
        }
        write_cells_csv(&dir.join(format!("{stem}_cells.csv")), &self.cells)?;
        write_summary_csv(&dir.join(format!("{stem}.csv")), &self.summary, &self.domain_names)
    }
}

fn finish(cells: Vec<CellResult>, domain_names: Vec<String>) -> MatrixResult {
    let summary = summarize(&cells);
    MatrixResult { cells, summary, domain_names }
}

/// Run every (optimizer, rate, seed) cell of the matrix.
pub fn run_matrix(m: &ExperimentMatrix) -> Result<MatrixResult> {
    m.validate()?;
    let splits = gen_feature_benchmark(&m.benchmark, m.exec)?;
    run_matrix_on(m, &splits)
}

/// [`run_matrix`] on splits generated or loaded beforehand.
pub fn run_matrix_on(m: &ExperimentMatrix, splits: &[Splits]) -> Result<MatrixResult> {
    m.validate()?;
    let mut cells = Vec::new();
    for &opt in &m.optimizers {
        for sp in splits {
            for &seed in &m.seeds {
                cells.push(CellConfig {
                    run_id: run_id("", opt, sp.er, seed),
                    variant: String::new(),
                    er: sp.er,
                    benchmark: m.benchmark.clone(),
                    model: ModelConfig { init_seed: seed, ..m.model.clone() },
                    train: TrainConfig { optimizer: opt, seed, ..m.train.clone() },
                });
            }
        }
    }
    let sharp = m.analysis.sharpness.then_some(&m.sharpness);
    let names = splits.first().map(|s| s.domain_names.clone()).unwrap_or_default();
    Ok(finish(execute_cells(cells, splits, sharp, m.exec), names))
}

/// Ablation variants: the optimizer kind and objective components of each.
pub fn ablation_variants() -> Vec<(&'static str, OptimizerKind, LossTerms)> {
    vec![
        ("baseline-adam", OptimizerKind::Adam, LossTerms::CE_ONLY),
        ("dscl-only", OptimizerKind::Dasm, LossTerms::CE_DSCL),
        ("adgm-only", OptimizerKind::Dasm, LossTerms::CE_ADGM),
        ("full", OptimizerKind::Dasm, LossTerms::FULL),
    ]
}

/// Ablation over the matrix's rates and seeds (its optimizer list is ignored).
pub fn run_ablation(m: &ExperimentMatrix) -> Result<MatrixResult> {
    m.validate()?;
    let splits = gen_feature_benchmark(&m.benchmark, m.exec)?;
    run_ablation_on(m, &splits)
}

pub fn run_ablation_on(m: &ExperimentMatrix, splits: &[Splits]) -> Result<MatrixResult> {
    let mut cells = Vec::new();
    for (name, opt, terms) in ablation_variants() {
        for sp in splits {
            for &seed in &m.seeds {
                cells.push(CellConfig {
                    run_id: run_id(name, opt, sp.er, seed),
                    variant: name.into(),
                    er: sp.er,
                    benchmark: m.benchmark.clone(),
                    model: ModelConfig { init_seed: seed, ..m.model.clone() },
                    train: TrainConfig { optimizer: opt, seed, terms: Some(terms), ..m.train.clone() },
                });
            }
        }
    }
    let names = splits.first().map(|s| s.domain_names.clone()).unwrap_or_default();
    Ok(finish(execute_cells(cells, splits, None, m.exec), names))
}

pub const RHO_GRID: [f64; 4] = [0.01, 0.03, 0.05, 0.08];
pub const TAU_GRID: [f64; 4] = [0.05, 0.1, 0.2, 0.5];
/// Temperature held fixed during the radius sweep.
pub const RHO_SWEEP_TAU: f64 = 0.5;
/// Radius held fixed during the temperature sweep.
pub const TAU_SWEEP_RHO: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Knob {
    Rho,
    Tau,
}

/// The cells of one sweep; every config differs from its neighbours only in
/// the swept knob.
pub fn sweep_cells(m: &ExperimentMatrix, knob: Knob, splits: &[Splits]) -> Vec<CellConfig> {
    let (grid, label) = match knob {
        Knob::Rho => (RHO_GRID, "rho"),
        Knob::Tau => (TAU_GRID, "tau"),
    };
    let mut cells = Vec::new();
    for &v in &grid {
        for sp in splits {
            for &seed in &m.seeds {
                let mut t = TrainConfig { optimizer: OptimizerKind::Dasm, seed, ..m.train.clone() };
                match knob {
                    Knob::Rho => {
                        t.rho = v;
                        t.tau = RHO_SWEEP_TAU;
                    }
                    Knob::Tau => {
                        t.tau = v;
                        t.rho = TAU_SWEEP_RHO;
                    }
                }
                let variant = format!("{label}={v}");
                cells.push(CellConfig {
                    run_id: run_id(&format!("{label}{v}"), OptimizerKind::Dasm, sp.er, seed),
                    variant,
                    er: sp.er,
                    benchmark: m.benchmark.clone(),
                    model: ModelConfig { init_seed: seed, ..m.model.clone() },
                    train: t,
                });
            }
        }
    }
    cells
}

pub fn run_sensitivity(m: &ExperimentMatrix, knob: Knob) -> Result<MatrixResult> {
    m.validate()?;
    let splits = gen_feature_benchmark(&m.benchmark, m.exec)?;
    run_sensitivity_on(m, knob, &splits)
}

pub fn run_sensitivity_on(m: &ExperimentMatrix, knob: Knob, splits: &[Splits]) -> Result<MatrixResult> {
    let cells = sweep_cells(m, knob, splits);
    let names = splits.first().map(|s| s.domain_names.clone()).unwrap_or_default();
    Ok(finish(execute_cells(cells, splits, None, m.exec), names))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub optimizer: OptimizerKind,
    pub batches: usize,
    pub ms_mean: f64,
    pub ms_std: f64,
    /// Mean time relative to Adam.
    pub rel_time: f64,
    pub counts: PassCounts,
    pub forward_per_step: f64,
    pub backward_per_step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimingConfig {
    pub batches: usize,
    pub warmup: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TimingConfig {
    fn default() -> Self {
        TimingConfig { batches: 200, warmup: 20, batch_size: 128, seed: 0 }
    }
}

/// Milliseconds per step for Adam, SAM and the domain-aware optimizer on
/// the same batch sequence. Steps of the three trainers are interleaved so
/// slow drift of the machine affects them alike.
pub fn timing_report(model: &ModelConfig, train_cfg: &TrainConfig, splits: &Splits, cfg: &TimingConfig) -> Result<Vec<TimingRow>> {
    if cfg.batches == 0 {
        return Err(Error::Config("timing needs at least one batch".into()));
    }
    let kinds = [OptimizerKind::Adam, OptimizerKind::Sam, OptimizerKind::Dasm];
    let mut trainers = kinds
        .iter()
        .map(|&k| {
            let t = TrainConfig { optimizer: k, batch_size: cfg.batch_size, seed: cfg.seed, terms: None, ..train_cfg.clone() };
            Trainer::new(EncoderClassifier::new(model.clone())?, splits.n_stego(), t)
        })
        .collect::<Result<Vec<_>>>()?;
    let bcfg = TrainConfig { batch_size: cfg.batch_size, seed: cfg.seed, ..train_cfg.clone() };
    let mut batches = Vec::new();
    let mut epoch = 1;
    while batches.len() < cfg.batches + cfg.warmup {
        for idx in epoch_batches(&splits.train, &bcfg, epoch) {
            if idx.len() == cfg.batch_size {
                batches.push(splits.train.batch(&idx)?);
            }
        }
        epoch += 1;
        if epoch > 1000 {
            return Err(Error::Config("training split too small for a full timing batch".into()));
        }
    }
    let mut times = vec![Vec::with_capacity(cfg.batches); kinds.len()];
    let mut before = vec![PassCounts::default(); kinds.len()];
    for (i, b) in batches.iter().take(cfg.batches + cfg.warmup).enumerate() {
        if i == cfg.warmup {
            for (k, t) in trainers.iter().enumerate() {
                before[k] = t.counts();
            }
        }
        for (k, t) in trainers.iter_mut().enumerate() {
            let t0 = Instant::now();
            t.step(b)?;
            if i >= cfg.warmup {
                times[k].push(t0.elapsed().as_secs_f64() * 1e3);
            }
        }
    }
    let adam_mean = mean(&times[0]);
    Ok(kinds
        .iter()
        .enumerate()
        .map(|(k, &kind)| {
            let c = trainers[k].counts();
            let steps = (c.steps - before[k].steps) as f64;
            TimingRow {
                optimizer: kind,
                batches: times[k].len(),
                ms_mean: mean(&times[k]),
                ms_std: population_std(&times[k]),
                rel_time: mean(&times[k]) / adam_mean,
                counts: c,
                forward_per_step: (c.forward - before[k].forward) as f64 / steps,
                backward_per_step: (c.backward - before[k].backward) as f64 / steps,
            }
        })
        .collect())
}

pub fn write_timing_csv(path: &Path, rows: &[TimingRow]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{SCHEMA_LINE}")?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(["optimizer", "batches", "ms_mean", "ms_std", "rel_time", "fwd_bwd"])?;
    for r in rows {
        w.write_record([
            r.optimizer.name().to_string(),
            r.batches.to_string(),
            r.ms_mean.to_string(),
            r.ms_std.to_string(),
            r.rel_time.to_string(),
            format!("{}/{}", r.forward_per_step, r.backward_per_step),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    pub toggles: AnalysisToggles,
    pub sharpness: SharpnessConfig,
    pub landscape: LandscapeConfig,
    pub hessian: HessianConfig,
    /// Rows of the test split used by landscape and Hessian probes.
    pub probe_rows: usize,
    pub tag: String,
    pub seed: u64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            toggles: AnalysisToggles { sharpness: true, pad: true, landscape: true, hessian: true, features: true },
            sharpness: SharpnessConfig::default(),
            landscape: LandscapeConfig::default(),
            hessian: HessianConfig::default(),
            probe_rows: 512,
            tag: "model".into(),
            seed: 0,
        }
    }
}

/// Run the enabled analyses of a trained model and write their files into
/// `dir`. Returns the written paths.
pub fn analyze(model: &EncoderClassifier, splits: &Splits, cfg: &AnalysisConfig, dir: &Path, exec: Exec) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let t = cfg.toggles;
    if t.sharpness {
        let r = zeroth_order_sharpness(model, &splits.test, &splits.domain_names, &cfg.sharpness, exec)?;
        let p = dir.join("sharpness.json");
        std::fs::write(&p, serde_json::to_vec_pretty(&r)?)?;
        written.push(p);
    }
    if t.pad {
        let pm = pad_matrix(Some(model), &splits.test, &splits.domain_names, splits.er, cfg.seed, exec)?;
        let p = dir.join(format!("pad_matrix_ER{:.2}.csv", splits.er));
        pm.write_csv(&p)?;
        written.push(p);
    }
    let probe_idx: Vec<usize> = (0..splits.test.len().min(cfg.probe_rows.max(1))).collect();
    let probe = splits.test.subset(&probe_idx);
    if t.landscape {
        let s = landscape_slice(&ModelObjective::new(model, &probe)?, &cfg.landscape, exec)?;
        let p = dir.join(format!("landscape_{}.csv", cfg.tag));
        s.write_csv(&p)?;
        written.push(p);
    }
    if t.hessian {
        let h = hessian_probe(&ModelObjective::new(model, &probe)?, &cfg.hessian, exec)?;
        let p = dir.join("hessian.json");
        std::fs::write(&p, serde_json::to_vec_pretty(&h)?)?;
        written.push(p);
    }
    if t.features {
        let z = model.normalized_features(&splits.test.x, splits.test.len(), 1e-8)?;
        let dim = model.config().feature_dim;
        let mut names = vec!["cover".to_string()];
        names.extend(splits.domain_names.iter().cloned());
        for (k, name) in names.iter().enumerate() {
            let p = dir.join(format!("features_{name}.csv"));
            let mut w = csv::Writer::from_path(&p)?;
            let mut head = vec!["id".to_string()];
            head.extend((0..dim).map(|j| format!("z{j}")));
            w.write_record(&head)?;
            for i in (0..splits.test.len()).filter(|&i| splits.test.domain[i] == k) {
                let mut rec = vec![splits.test.id[i].to_string()];
                rec.extend(z[i * dim..(i + 1) * dim].iter().map(|v| v.to_string()));
                w.write_record(&rec)?;
            }
            w.flush()?;
            written.push(p);
        }
    }
    Ok(written)
}

/// Checksums of every file in a directory, sorted by name.
pub fn dir_checksums(dir: &Path) -> Result<Vec<(String, u64)>> {
    use std::hash::{Hash, Hasher};
    let mut out = Vec::new();
    for e in std::fs::read_dir(dir)? {
        let e = e?;
        if e.file_type()?.is_file() {
            let mut h = std::collections::hash_map::DefaultHasher::new();
            std::fs::read(e.path())?.hash(&mut h);
            out.push((e.file_name().to_string_lossy().into_owned(), h.finish()));
        }
    }
    out.sort();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::DomainSpec;

    fn tiny_matrix() -> ExperimentMatrix {
        ExperimentMatrix {
            optimizers: vec![OptimizerKind::Adam],
            seeds: vec![0],
            benchmark: BenchmarkConfig {
                dim: 4,
                domains: vec![DomainSpec::mean_shift("a", 2.0, 1), DomainSpec::mean_shift("b", 4.0, 2)],
                embedding_rates: vec![0.5],
                per_cell: 40,
                seed: 1,
            },
            model: ModelConfig { input_dim: 4, hidden: vec![8], feature_dim: 4, init_seed: 0, init_scale: 1.0 },
            train: TrainConfig { epochs: 3, batch_size: 16, ..Default::default() },
            analysis: AnalysisToggles::default(),
            sharpness: SharpnessConfig { m: 4, ..Default::default() },
            exec: Exec::Sequential,
        }
    }

    #[test]
    fn single_cell_summary_equals_the_report() {
        let r = run_matrix(&tiny_matrix()).unwrap();
        assert_eq!(r.cells.len(), 1);
        assert_eq!(r.summary.len(), 1);
        let rep = r.cells[0].report.as_ref().unwrap();
        assert_eq!(r.summary[0].acc_mean, rep.test.acc);
        assert_eq!(r.summary[0].avg_mean, rep.test.acc_avg);
        assert_eq!(r.summary[0].avg_std, 0.0);
    }

    #[test]
    fn three_seeds_aggregate_over_three_values() {
        let m = ExperimentMatrix { seeds: vec![0, 1, 2], analysis: AnalysisToggles { sharpness: true, ..Default::default() }, ..tiny_matrix() };
        let r = run_matrix(&m).unwrap();
        assert_eq!(r.summary[0].runs, 3);
        let avgs: Vec<f64> = r.cells.iter().map(|c| c.report.as_ref().unwrap().test.acc_avg).collect();
        assert_eq!(r.summary[0].avg_mean, mean(&avgs));
        assert_eq!(r.summary[0].avg_std, population_std(&avgs));
        assert!(r.summary[0].sharpness_mean.is_some());
    }

    #[test]
    fn failed_cells_become_rows() {
        let mut m = tiny_matrix();
        m.optimizers = vec![OptimizerKind::Adam, OptimizerKind::Sam];
        let splits = gen_feature_benchmark(&m.benchmark, Exec::Sequential).unwrap();
        // an absurd step size drives the parameters to overflow
        let mut bad = m.clone();
        bad.train.lr = 1e300;
        let r = run_matrix_on(&bad, &splits);
        match r {
            Ok(r) => {
                assert_eq!(r.failures(), 2);
                assert!(r.cells.iter().all(|c| c.error.is_some()));
                let dir = tempfile::tempdir().unwrap();
                r.persist(dir.path(), "summary").unwrap();
                let text = std::fs::read_to_string(dir.path().join("summary_cells.csv")).unwrap();
                assert!(text.starts_with(SCHEMA_LINE));
                assert_eq!(text.matches("failed").count(), 2);
            }
            Err(e) => panic!("matrix aborted: {e}"),
        }
    }

    #[test]
    fn persisted_summary_matches_recomputation_from_cells() {
        let m = ExperimentMatrix { seeds: vec![3, 4], ..tiny_matrix() };
        let r = run_matrix(&m).unwrap();
        let dir = tempfile::tempdir().unwrap();
        r.persist(dir.path(), "summary").unwrap();
        let mut accs = Vec::new();
        for c in &r.cells {
            let back: CellResult =
                serde_json::from_slice(&std::fs::read(dir.path().join("cells").join(format!("{}.json", c.config.run_id))).unwrap())
                    .unwrap();
            accs.push(back.report.unwrap().test.acc_avg);
        }
        assert_eq!(mean(&accs), r.summary[0].avg_mean);
        let text = std::fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert!(text.starts_with("# schema=1\nvariant,er,runs,failed,a_mean,a_std,b_mean,b_std,avg_mean"));
    }

    #[test]
    fn config_echo_reruns_bit_exactly() {
        let r = run_matrix(&tiny_matrix()).unwrap();
        let c = &r.cells[0];
        let echo: CellConfig = serde_json::from_str(&serde_json::to_string(&c.config).unwrap()).unwrap();
        let again = rerun_cell(&echo).unwrap();
        assert_eq!(again.without_timing(), c.report.as_ref().unwrap().without_timing());
    }

    #[test]
    fn ablation_variants_enable_exactly_their_components() {
        let m = ExperimentMatrix { train: TrainConfig { epochs: 1, batch_size: 16, ..Default::default() }, ..tiny_matrix() };
        let r = run_ablation(&m).unwrap();
        assert_eq!(r.cells.len(), 4);
        for c in &r.cells {
            let rep = c.report.as_ref().unwrap();
            let e = &rep.epochs[1].train;
            let terms = c.config.train.effective_terms();
            assert_eq!(e.dscl != 0.0, terms.dscl, "{}", c.config.variant);
            assert_eq!(e.adgm != 0.0, terms.adgm, "{}", c.config.variant);
            assert!((e.total - (e.ce + e.dscl + e.adgm)).abs() < 1e-12);
        }
        let names: Vec<&str> = r.summary.iter().map(|s| s.variant.as_str()).collect();
        assert_eq!(names, ["baseline-adam", "dscl-only", "adgm-only", "full"]);
    }

    #[test]
    fn sweep_grids_and_neighbours() {
        let m = tiny_matrix();
        let splits = gen_feature_benchmark(&m.benchmark, Exec::Sequential).unwrap();
        let rho = sweep_cells(&m, Knob::Rho, &splits);
        let vals: Vec<f64> = rho.iter().map(|c| c.train.rho).collect();
        assert_eq!(vals, RHO_GRID.to_vec());
        assert!(rho.iter().all(|c| c.train.tau == RHO_SWEEP_TAU));
        let tau = sweep_cells(&m, Knob::Tau, &splits);
        assert_eq!(tau.iter().map(|c| c.train.tau).collect::<Vec<_>>(), TAU_GRID.to_vec());
        for w in rho.windows(2).chain(tau.windows(2)) {
            let (a, b) = (&w[0].train, &w[1].train);
            let b_like_a = TrainConfig { rho: a.rho, tau: a.tau, ..b.clone() };
            assert_eq!(&b_like_a, a);
        }
    }

    #[test]
    fn timing_counts_passes() {
        let m = tiny_matrix();
        let sp = gen_feature_benchmark(&m.benchmark, Exec::Sequential).unwrap().remove(0);
        let rows = timing_report(&m.model, &m.train, &sp, &TimingConfig { batches: 10, warmup: 2, batch_size: 16, seed: 0 }).unwrap();
        let fb: Vec<(f64, f64)> = rows.iter().map(|r| (r.forward_per_step, r.backward_per_step)).collect();
        assert_eq!(fb, vec![(1.0, 1.0), (2.0, 2.0), (2.0, 2.0)]);
        assert_eq!(rows[0].rel_time, 1.0);
        assert!(rows.iter().all(|r| r.batches == 10));
    }

    #[test]
    fn analysis_bundle_writes_expected_files_and_keeps_theta() {
        let mut m = tiny_matrix();
        m.benchmark.per_cell = 200;
        let sp = gen_feature_benchmark(&m.benchmark, Exec::Sequential).unwrap().remove(0);
        let model = EncoderClassifier::new(m.model.clone()).unwrap();
        let before = model.params().flatten();
        let cfg = AnalysisConfig {
            sharpness: SharpnessConfig { m: 4, ..Default::default() },
            landscape: LandscapeConfig { grid: 5, ..Default::default() },
            hessian: HessianConfig { iters: 5, probes: 2, ..Default::default() },
            ..Default::default()
        };
        let dir = tempfile::tempdir().unwrap();
        let files = analyze(&model, &sp, &cfg, dir.path(), Exec::Sequential).unwrap();
        let names: Vec<String> = files.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
        for want in ["sharpness.json", "pad_matrix_ER0.50.csv", "landscape_model.csv", "hessian.json", "features_cover.csv", "features_b.csv"] {
            assert!(names.iter().any(|n| n == want), "{want} missing from {names:?}");
        }
        assert_eq!(model.params().flatten(), before);
    }
}
