//! Epoch loop, evaluation and run reports.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Splits};
use crate::error::{Error, Result};
use crate::gap::DomainCenterBank;
use crate::losses::LossBreakdown;
use crate::model::{EncoderClassifier, ModelConfig};
use crate::optim::{BaseUpdate, OptimizerKind, PassCounts, StepTrace, TrainConfig, Trainer};
use crate::seed;

const STREAM_SHUFFLE: u64 = 21;

/// Label carried by every report produced on generated data.
pub const SUBSTITUTION_NOTE: &str =
    "synthetic stand-in benchmark: distributions engineered for minute and imbalanced gaps, not real VoIP audio";

/// Accuracy and mean cross-entropy of a model on a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    /// Accuracy per source algorithm (cover rows of that cell included).
    pub acc: Vec<f64>,
    pub acc_avg: f64,
    pub acc_overall: f64,
}

/// Mean cross-entropy and accuracies. Predictions tie to class 0.
pub fn evaluate(model: &EncoderClassifier, data: &Dataset, n_sources: usize) -> Result<Evaluation> {
    if data.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty split".into()));
    }
    let (_, logits) = model.forward_values(&data.x, data.len())?;
    let mut loss = 0.0;
    let mut hits = vec![0usize; n_sources + 1];
    let mut seen = vec![0usize; n_sources + 1];
    let mut total_hits = 0;
    for i in 0..data.len() {
        let (a, b) = (logits[2 * i], logits[2 * i + 1]);
        let m = a.max(b);
        let lse = m + ((a - m).exp() + (b - m).exp()).ln();
        let y = data.y[i];
        loss += lse - if y == 0 { a } else { b };
        let pred = u8::from(b > a);
        let s = data.source[i].min(n_sources);
        seen[s] += 1;
        if pred == y {
            hits[s] += 1;
            total_hits += 1;
        }
    }
    let acc: Vec<f64> = (1..=n_sources)
        .map(|k| if seen[k] == 0 { f64::NAN } else { hits[k] as f64 / seen[k] as f64 })
        .collect();
    let present: Vec<f64> = acc.iter().copied().filter(|a| a.is_finite()).collect();
    let acc_avg = if present.is_empty() { f64::NAN } else { present.iter().sum::<f64>() / present.len() as f64 };
    Ok(Evaluation {
        loss: loss / data.len() as f64,
        acc,
        acc_avg,
        acc_overall: total_hits as f64 / data.len() as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean loss components over the epoch's steps (zeros for epoch 0).
    pub train: LossBreakdown,
    pub grad_norm: f64,
    /// Gaps and weights of the last step.
    pub gaps: Vec<f64>,
    pub weights: Vec<f64>,
    pub val: Evaluation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Timing {
    pub total_ms: f64,
    pub ms_per_step: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub note: String,
    pub optimizer: OptimizerKind,
    pub base_update: BaseUpdate,
    pub train_config: TrainConfig,
    pub model_config: ModelConfig,
    pub er: f64,
    pub domain_names: Vec<String>,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub test: Evaluation,
    pub train_acc: f64,
    pub counts: PassCounts,
    pub zero_grad_steps: u64,
    pub timing: Timing,
    /// Files written by analyses of this run, relative to the output root.
    #[serde(default)]
    pub artifacts: Vec<String>,
}

impl RunReport {
    /// The report with wall-clock fields cleared, for determinism checks.
    pub fn without_timing(&self) -> RunReport {
        RunReport { timing: Timing::default(), ..self.clone() }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<RunReport> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }

    /// One row per (epoch, domain) plus an `avg` row per epoch.
    pub fn write_epoch_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "domain", "acc", "ce", "dscl", "adgm", "gap_k", "w_k", "grad_norm"])?;
        let opt = |v: Option<&f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for e in &self.epochs {
            let common = [e.train.ce.to_string(), e.train.dscl.to_string(), e.train.adgm.to_string()];
            for (k, name) in self.domain_names.iter().enumerate() {
                w.write_record([
                    e.epoch.to_string(),
                    name.clone(),
                    e.val.acc[k].to_string(),
                    common[0].clone(),
                    common[1].clone(),
                    common[2].clone(),
                    opt(e.gaps.get(k)),
                    opt(e.weights.get(k)),
                    e.grad_norm.to_string(),
                ])?;
            }
            w.write_record([
                e.epoch.to_string(),
                "avg".into(),
                e.val.acc_avg.to_string(),
                common[0].clone(),
                common[1].clone(),
                common[2].clone(),
                String::new(),
                String::new(),
                e.grad_norm.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Batches of one epoch. Stratified order interleaves the domains by
/// relative position so each batch holds all of them when sizes allow.
pub fn epoch_batches(data: &Dataset, cfg: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
    let mut rng = seed::rng(cfg.seed, &[STREAM_SHUFFLE, epoch as u64]);
    let order: Vec<usize> = if cfg.stratified {
        let n_dom = data.domain.iter().copied().max().unwrap_or(0) + 1;
        let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n_dom];
        for i in 0..data.len() {
            groups[data.domain[i]].push(i);
        }
        let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(data.len());
        for g in groups.iter_mut().filter(|g| !g.is_empty()) {
            g.shuffle(&mut rng);
            let offset: f64 = rng.random();
            let n = g.len() as f64;
            keyed.extend(g.iter().enumerate().map(|(j, &i)| ((j as f64 + offset) / n, i)));
        }
        keyed.sort_by(|a, b| a.0.total_cmp(&b.0));
        keyed.into_iter().map(|(_, i)| i).collect()
    } else {
        let mut idx: Vec<usize> = (0..data.len()).collect();
        idx.shuffle(&mut rng);
        idx
    };
    order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect()
}

pub struct TrainOutcome {
    pub model: EncoderClassifier,
    pub bank: DomainCenterBank,
    pub report: RunReport,
}

/// Train with early stopping on validation loss; the returned model holds
/// the parameters of the best epoch.
pub fn train(model: EncoderClassifier, splits: &Splits, cfg: &TrainConfig, run_id: &str) -> Result<TrainOutcome> {
    train_observed(model, splits, cfg, run_id, |_| {})
}

/// [`train`] with a callback on every step trace.
pub fn train_observed<F: FnMut(&StepTrace)>(
    model: EncoderClassifier,
    splits: &Splits,
    cfg: &TrainConfig,
    run_id: &str,
    mut on_step: F,
) -> Result<TrainOutcome> {
    for (name, ds) in [("train", &splits.train), ("validation", &splits.val), ("test", &splits.test)] {
        if ds.is_empty() {
            return Err(Error::Config(format!("{name} split is empty")));
        }
    }
    if model.config().input_dim != splits.dim() {
        return Err(Error::Config(format!(
            "model input dimension {} for data of dimension {}",
            model.config().input_dim,
            splits.dim()
        )));
    }
    let s = splits.n_stego();
    let mut trainer = Trainer::new(model, s, cfg.clone())?;
    let started = Instant::now();
    let mut step_ms = 0.0;

    let initial = evaluate(&trainer.model, &splits.val, s)?;
    let mut best_loss = initial.loss;
    let mut best_epoch = 0;
    let mut best_params = trainer.model.params().flatten();
    let mut epochs = vec![EpochRecord {
        epoch: 0,
        train: LossBreakdown::default(),
        grad_norm: 0.0,
        gaps: Vec::new(),
        weights: Vec::new(),
        val: initial,
    }];
    let mut zero_grad_steps = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        let mut sum = LossBreakdown::default();
        let mut gsum = 0.0;
        let mut last: Option<StepTrace> = None;
        let batches = epoch_batches(&splits.train, cfg, epoch);
        for idx in &batches {
            let batch = splits.train.batch(idx)?;
            let t0 = Instant::now();
            let tr = trainer.step(&batch)?;
            step_ms += t0.elapsed().as_secs_f64() * 1e3;
            on_step(&tr);
            sum.ce += tr.loss.ce;
            sum.dscl += tr.loss.dscl;
            sum.adgm += tr.loss.adgm;
            sum.total += tr.loss.total;
            gsum += tr.grad_norm;
            zero_grad_steps += u64::from(tr.zero_grad_flag);
            last = Some(tr);
        }
        let nb = batches.len().max(1) as f64;
        let val = evaluate(&trainer.model, &splits.val, s)?;
        let improved = val.loss < best_loss;
        let last = last.unwrap_or_else(|| unreachable!("train split is non-empty"));
        epochs.push(EpochRecord {
            epoch,
            train: LossBreakdown { ce: sum.ce / nb, dscl: sum.dscl / nb, adgm: sum.adgm / nb, total: sum.total / nb },
            grad_norm: gsum / nb,
            gaps: last.gaps,
            weights: last.weights,
            val,
        });
        if improved {
            best_loss = epochs[epoch].val.loss;
            best_epoch = epoch;
            best_params = trainer.model.params().flatten();
        } else if epoch - best_epoch >= cfg.patience {
            stopped_early = true;
            log::debug!("{run_id}: early stop at epoch {epoch}, best {best_epoch}");
            break;
        }
    }
    trainer.model.params_mut().set_flat(&best_params)?;
    let test = evaluate(&trainer.model, &splits.test, s)?;
    let train_acc = evaluate(&trainer.model, &splits.train, s)?.acc_overall;
    let counts = trainer.counts();
    let report = RunReport {
        run_id: run_id.to_string(),
        note: SUBSTITUTION_NOTE.to_string(),
        optimizer: cfg.optimizer,
        base_update: cfg.effective_base(),
        train_config: cfg.clone(),
        model_config: trainer.model.config().clone(),
        er: splits.er,
        domain_names: splits.domain_names.clone(),
        epochs,
        best_epoch,
        stopped_early,
        test,
        train_acc,
        counts,
        zero_grad_steps,
        timing: Timing {
            total_ms: started.elapsed().as_secs_f64() * 1e3,
            ms_per_step: if counts.steps == 0 { 0.0 } else { step_ms / counts.steps as f64 },
        },
        artifacts: Vec::new(),
    };
    Ok(TrainOutcome { model: trainer.model, bank: trainer.bank, report })
}
