//! Minibatch training on the regularized objective.

use std::path::Path;
use std::time::Instant;

use exdrop_core::encoder::{forward, EncoderParams, ModelConfig};
use exdrop_core::optim::Optimizer;
use exdrop_core::reg::{minibatch_objective, Component, RegValues};
use exdrop_core::rng::stream;
use exdrop_core::{Graph, Matrix};
use rand::seq::SliceRandom;
use serde::Serialize;

use crate::checkpoint::checkpoint_save;
use crate::config::RunConfig;
use crate::data::{load_dataset, Dataset, Record};
use crate::error::{io_err, HarnessError, Result};
use crate::metrics::{emit_metrics, MetricsRow};

/// RNG stream for the per-epoch shuffle.
pub const SHUFFLE_STREAM: u64 = 0x20;
/// RNG stream for training-time dropout masks.
pub const MASK_STREAM: u64 = 0x21;

/// Any logged loss beyond this magnitude counts as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub rows: Vec<MetricsRow>,
    /// 1-based epoch with the highest validation accuracy (earliest on ties).
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    /// Test accuracy of the best epoch's parameters, when requested.
    pub test_accuracy: Option<f64>,
    pub best_params: EncoderParams,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub seed: u64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub final_train_loss: f64,
}

impl RunOutcome {
    pub fn summary(&self) -> RunSummary {
        let last = self.rows.last().expect("a run has at least one epoch");
        RunSummary {
            seed: last.seed,
            epochs: self.rows.len(),
            best_epoch: self.best_epoch,
            best_val_accuracy: self.best_val_accuracy,
            test_accuracy: self.test_accuracy,
            final_train_loss: last.train_loss,
        }
    }
}

/// Predicted class of one sequence, with masks off.
pub fn predict(model: &ModelConfig, params: &EncoderParams, tokens: &Matrix) -> Result<usize> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let trace = forward(&mut g, model, &bound, tokens, &[], false, None)?;
    let logits = g.value(trace.logits).row(0);
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Fraction of `records` classified correctly.
pub fn evaluate(model: &ModelConfig, params: &EncoderParams, records: &[Record]) -> Result<f64> {
    if records.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for r in records {
        if predict(model, params, &r.tokens)? == r.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / records.len() as f64)
}

fn guard(epoch: usize, step: usize, component: &'static str, v: f64) -> Result<()> {
    if v.is_finite() && v.abs() <= DIVERGENCE_LIMIT {
        Ok(())
    } else {
        Err(HarnessError::Divergence {
            epoch,
            step,
            component,
            magnitude: v,
        })
    }
}

const REG_NAMES: [&str; 5] = ["reg_q", "reg_k", "reg_v", "reg_av", "reg_ff"];

/// Loads the dataset for `config` and trains, evaluating the test split once
/// for the selected epoch.
pub fn train(config: &RunConfig) -> Result<RunOutcome> {
    config.validate()?;
    let data = load_dataset(&config.dataset, config.seed)?;
    train_on(config, &data, true)
}

/// Trains on an already loaded dataset.
pub fn train_on(config: &RunConfig, data: &Dataset, evaluate_test: bool) -> Result<RunOutcome> {
    config.validate()?;
    let model = config.model_config();
    let spec = config.reg_spec();
    let placements = config.placements();
    let mut params = EncoderParams::init(&model, config.seed)?;
    let mut optimizer = Optimizer::new(config.optimizer, &params.tensors())?;
    let mut shuffle_rng = stream(config.seed, SHUFFLE_STREAM);
    let mut mask_rng = stream(config.seed, MASK_STREAM);
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    let mut rows = Vec::with_capacity(config.training.epochs);
    let mut best: Option<(usize, f64, EncoderParams)> = None;
    for epoch in 1..=config.training.epochs {
        let start = Instant::now();
        order.shuffle(&mut shuffle_rng);
        let (mut task_sum, mut total_sum) = (0.0, 0.0);
        let mut reg_sum = RegValues::default();
        let mut steps = 0usize;
        for (step, batch) in order.chunks(config.training.batch_size).enumerate() {
            let tokens: Vec<&Matrix> = batch.iter().map(|&i| &data.train[i].tokens).collect();
            let labels: Vec<usize> = batch.iter().map(|&i| data.train[i].label).collect();
            let mut g = Graph::new();
            let bound = params.bind(&mut g);
            let obj = minibatch_objective(
                &mut g,
                &model,
                &bound,
                &tokens,
                &labels,
                &placements,
                &spec,
                true,
                Some(&mut mask_rng),
            )?
            .objective;
            let task = g.scalar(obj.task);
            let total = g.scalar(obj.total);
            let reg = obj.values(&g);
            guard(epoch, step, "task_loss", task)?;
            for (c, name) in Component::ALL.into_iter().zip(REG_NAMES) {
                guard(epoch, step, name, reg.get(c))?;
            }
            guard(epoch, step, "train_loss", total)?;
            g.backward(obj.total)?;
            let grads = bound.grads(&g);
            optimizer.step(&mut params.tensors_mut(), &grads)?;
            task_sum += task;
            total_sum += total;
            for c in Component::ALL {
                *reg_sum.get_mut(c) += reg.get(c);
            }
            steps += 1;
        }
        let n = steps as f64;
        for c in Component::ALL {
            *reg_sum.get_mut(c) /= n;
        }
        let val_accuracy = evaluate(&model, &params, &data.val)?;
        if best.as_ref().is_none_or(|(_, acc, _)| val_accuracy > *acc) {
            best = Some((epoch, val_accuracy, params.clone()));
        }
        rows.push(MetricsRow {
            epoch,
            train_loss: total_sum / n,
            task_loss: task_sum / n,
            reg: reg_sum,
            val_accuracy,
            test_accuracy: None,
            wall_seconds: start.elapsed().as_secs_f64(),
            seed: config.seed,
        });
    }

    let (best_epoch, best_val_accuracy, best_params) = best.expect("at least one epoch runs");
    let test_accuracy = if evaluate_test {
        Some(evaluate(&model, &best_params, &data.test)?)
    } else {
        None
    };
    if let Some(last) = rows.last_mut() {
        last.test_accuracy = test_accuracy;
    }
    Ok(RunOutcome {
        rows,
        best_epoch,
        best_val_accuracy,
        test_accuracy,
        best_params,
    })
}

/// Writes `metrics.csv`, `checkpoint.bin` (best epoch), `summary.json` and the
/// effective `config.toml` into `dir`.
pub fn write_run(outcome: &RunOutcome, config: &RunConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    emit_metrics(&outcome.rows, &dir.join("metrics.csv"))?;
    checkpoint_save(&outcome.best_params, &dir.join("checkpoint.bin"))?;
    let summary = serde_json::to_string_pretty(&outcome.summary())?;
    let path = dir.join("summary.json");
    std::fs::write(&path, summary + "\n").map_err(io_err(&path))?;
    let path = dir.join("config.toml");
    std::fs::write(&path, config.to_toml()).map_err(io_err(&path))
}
