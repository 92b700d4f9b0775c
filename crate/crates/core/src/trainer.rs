//! Minibatch truncated-BPTT training with RMSProp, the stepped learning-rate
//! schedule, early stopping on validation loss, dropout cross-validation,
//! stream evaluation and the model-grid driver.

use std::fs;
use std::path::Path;
use std::time::Instant;

use log::{debug, info};
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cells::{backward_window, forward_window, CellKind, Dropout, ModelSpec, Params, StepState};
use crate::checkpoint::Checkpoint;
use crate::corpus::{BatchCursor, CorpusSplits, Id, Vocabulary};
use crate::error::{Error, Result};
use crate::numerics::{clip_elementwise, softmax, softmax_xent, RmsPropState};
use crate::records::{bootstrap_sigma, Distributions, Evaluation, PredictionRecord};

/// Optimization settings. Defaults are the published recipe: batch 100,
/// unroll 100, RMSProp at 2e-3 with decay 0.95, 50 epochs, learning rate
/// multiplied by 0.95 per epoch after epoch 10, uniform init in ±0.08.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub unroll: usize,
    pub base_lr: f64,
    pub rmsprop_decay: f64,
    pub epochs: u32,
    /// Epochs run at the base rate before decay starts.
    pub lr_decay_after: u32,
    pub lr_decay_factor: f64,
    /// Elementwise gradient clip.
    pub clip: f64,
    pub init_range: f64,
    /// Forget-gate bias at init (LSTM only).
    pub forget_bias: f64,
    /// Drop probability used by [`train`].
    pub dropout: f64,
    /// Values tried by [`cross_validate_dropout`].
    pub dropout_grid: Vec<f64>,
    /// Keep geometric-schedule snapshots (iterations 1, 2, 4, ...) during
    /// the first this-many epochs.
    pub snapshot_epochs: u32,
    /// Stop after this many optimizer steps (smoke runs).
    pub max_iterations: Option<u64>,
    /// Window length used when evaluating validation and test streams.
    pub eval_chunk: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 100,
            unroll: 100,
            base_lr: 2e-3,
            rmsprop_decay: 0.95,
            epochs: 50,
            lr_decay_after: 10,
            lr_decay_factor: 0.95,
            clip: 5.0,
            init_range: 0.08,
            forget_bias: 0.0,
            dropout: 0.0,
            dropout_grid: vec![0.0, 0.1, 0.25, 0.5],
            snapshot_epochs: 3,
            max_iterations: None,
            eval_chunk: 100,
            seed: 42,
        }
    }
}

impl TrainConfig {
    /// Lists every invalid field.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let positive = [
            ("batch_size", self.batch_size as f64),
            ("unroll", self.unroll as f64),
            ("base_lr", self.base_lr),
            ("epochs", self.epochs as f64),
            ("lr_decay_factor", self.lr_decay_factor),
            ("clip", self.clip),
            ("eval_chunk", self.eval_chunk as f64),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                problems.push(format!("{name} must be positive (got {v})"));
            }
        }
        if !(0.0..1.0).contains(&self.rmsprop_decay) {
            problems.push(format!("rmsprop_decay must be in [0, 1) (got {})", self.rmsprop_decay));
        }
        if !(self.init_range >= 0.0 && self.init_range.is_finite()) {
            problems.push(format!("init_range must be non-negative (got {})", self.init_range));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push(format!("dropout must be in [0, 1) (got {})", self.dropout));
        }
        if self.dropout_grid.is_empty() {
            problems.push("dropout_grid must not be empty".to_string());
        }
        for d in &self.dropout_grid {
            if !(0.0..1.0).contains(d) {
                problems.push(format!("dropout_grid value {d} outside [0, 1)"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument(problems.join("; ")))
        }
    }

    /// Learning rate for a 1-based epoch: `base` through `lr_decay_after`,
    /// then `base · factor^(epoch − lr_decay_after)`.
    pub fn learning_rate(&self, epoch: u32) -> f64 {
        if epoch <= self.lr_decay_after {
            self.base_lr
        } else {
            self.base_lr * self.lr_decay_factor.powi((epoch - self.lr_decay_after) as i32)
        }
    }
}

/// Uniform `(−range, range)` weights, zero biases, deterministic per seed.
pub fn init_params(spec: ModelSpec, range: f64, seed: u64) -> Result<Params> {
    if !(range >= 0.0 && range.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "init range must be non-negative, got {range}"
        )));
    }
    let mut params = Params::zeros(spec)?;
    if range == 0.0 {
        return Ok(params);
    }
    let names: Vec<String> = Params::layout(&spec).into_iter().map(|(n, _, _)| n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for (name, t) in names.iter().zip(params.tensors_mut()) {
        if is_bias(name) {
            continue;
        }
        for v in t.data_mut() {
            *v = rng.random_range(-range..range);
        }
    }
    Ok(params)
}

fn is_bias(name: &str) -> bool {
    name.rsplit('.').next().is_some_and(|s| s.starts_with('b'))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: u64,
    pub epoch: u32,
    pub lr: f64,
    pub train_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u32,
    pub iteration: u64,
    pub lr: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub iterations: Vec<IterationRecord>,
    pub epochs: Vec<EpochRecord>,
    pub wall_clock_secs: f64,
    /// Iterations at which snapshots were kept.
    pub snapshot_iterations: Vec<u64>,
    pub best_iteration: u64,
}

impl TrainLog {
    /// CSV with columns `iteration,epoch,lr,train_loss,val_loss`; `val_loss`
    /// is filled on the last iteration of each epoch.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["iteration", "epoch", "lr", "train_loss", "val_loss"])?;
        for r in &self.iterations {
            let val = self
                .epochs
                .iter()
                .find(|e| e.iteration == r.iteration)
                .map_or(String::new(), |e| e.val_loss.to_string());
            w.write_record([
                r.iteration.to_string(),
                r.epoch.to_string(),
                r.lr.to_string(),
                r.train_loss.to_string(),
                val,
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint with the lowest epoch-end validation loss.
    pub best: Checkpoint,
    /// Parameters after the last iteration.
    pub last: Checkpoint,
    pub log: TrainLog,
    pub snapshots: Vec<Checkpoint>,
}

/// Trains `spec` on `splits.train`, evaluating on `splits.val` after every
/// epoch and keeping the best checkpoint.
pub fn train(spec: ModelSpec, config: &TrainConfig, splits: &CorpusSplits, vocab: &Vocabulary) -> Result<TrainOutcome> {
    config.validate()?;
    spec.validate()?;
    if vocab.len() != spec.vocab_size {
        return Err(Error::Mismatch(format!(
            "vocabulary has {} characters, spec says {}",
            vocab.len(),
            spec.vocab_size
        )));
    }
    splits.check_trainable(config.unroll)?;
    let started = Instant::now();

    let mut params = init_params(spec, config.init_range, config.seed)?;
    if spec.kind == CellKind::Lstm && config.forget_bias != 0.0 {
        params.set_lstm_gate_bias(1, config.forget_bias);
    }
    let mut opt: Vec<RmsPropState> = params
        .named_tensors()
        .iter()
        .map(|(_, t)| RmsPropState::new(t.data().len(), config.rmsprop_decay))
        .collect();
    let mut cursor = BatchCursor::new(splits.train.len(), config.batch_size, config.unroll)?;
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let zero_state = vec![StepState::zeros(&spec); config.batch_size];

    let mut log = TrainLog::default();
    let mut snapshots = Vec::new();
    let mut best: Option<Checkpoint> = None;
    let mut iteration: u64 = 0;
    let mut next_snapshot: u64 = 1;
    let norm = 1.0 / (config.batch_size * config.unroll) as f64;

    let make_ck = |params: &Params, iteration: u64, epoch: u32, val: Option<f64>| -> Result<Checkpoint> {
        let mut ck = Checkpoint::new(params.clone(), vocab.clone())?;
        ck.iteration = iteration;
        ck.epoch = epoch;
        ck.val_loss = val;
        ck.dropout = config.dropout;
        Ok(ck)
    };

    'epochs: for epoch in 1..=config.epochs {
        let lr = config.learning_rate(epoch);
        let mut states = zero_state.clone();
        let mut stop = false;
        loop {
            let batch = cursor.next_batch(&splits.train);
            let dropout = (config.dropout > 0.0).then_some(Dropout {
                p: config.dropout,
                rng: &mut dropout_rng,
            });
            let out = forward_window(&params, &batch.inputs, &states, false, dropout)?;
            let mut loss = 0.0;
            let mut dlogits = Vec::with_capacity(config.batch_size);
            for (row, targets) in out.logits.iter().zip(&batch.targets) {
                let mut drow = Vec::with_capacity(config.unroll);
                for (y, &t) in row.iter().zip(targets) {
                    let (l, mut d) = softmax_xent(y, t as usize)?;
                    loss += l;
                    d.iter_mut().for_each(|v| *v *= norm);
                    drow.push(d);
                }
                dlogits.push(drow);
            }
            loss *= norm;
            iteration += 1;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    iteration,
                    loss,
                    last_good: best.map(Box::new),
                });
            }
            let grads = backward_window(&params, &out.cache, &dlogits)?;
            let mut gparams = grads.params;
            for ((t, g), st) in params
                .tensors_mut()
                .into_iter()
                .zip(gparams.tensors_mut())
                .zip(&mut opt)
            {
                clip_elementwise(g.data_mut(), config.clip);
                if st.step(t.data_mut(), g.data(), lr).is_err() {
                    return Err(Error::Diverged {
                        iteration,
                        loss: f64::NAN,
                        last_good: best.map(Box::new),
                    });
                }
            }
            states = out.state;
            log.iterations.push(IterationRecord {
                iteration,
                epoch,
                lr,
                train_loss: loss,
            });
            debug!("iter {iteration} epoch {epoch} loss {loss:.4}");

            if epoch <= config.snapshot_epochs && iteration == next_snapshot {
                snapshots.push(make_ck(&params, iteration, epoch, None)?);
                log.snapshot_iterations.push(iteration);
                next_snapshot *= 2;
            }
            if config.max_iterations.is_some_and(|m| iteration >= m) {
                stop = true;
            }
            if batch.epoch_wrapped || stop {
                break;
            }
        }

        let val = evaluate_params(&params, &splits.val, config.eval_chunk, false)?;
        info!("epoch {epoch}: lr {lr:.3e} val loss {:.4}", val.mean_loss);
        log.epochs.push(EpochRecord {
            epoch,
            iteration,
            lr,
            val_loss: val.mean_loss,
        });
        if !val.mean_loss.is_finite() {
            return Err(Error::Diverged {
                iteration,
                loss: val.mean_loss,
                last_good: best.map(Box::new),
            });
        }
        if best
            .as_ref()
            .is_none_or(|b| val.mean_loss < b.val_loss.unwrap_or(f64::INFINITY))
        {
            best = Some(make_ck(&params, iteration, epoch, Some(val.mean_loss))?);
            log.best_iteration = iteration;
        }
        if stop {
            break 'epochs;
        }
    }

    log.wall_clock_secs = started.elapsed().as_secs_f64();
    let last_epoch = log.epochs.last().map_or(0, |e| e.epoch);
    let last_val = log.epochs.last().map(|e| e.val_loss);
    Ok(TrainOutcome {
        best: best.expect("at least one epoch runs"),
        last: make_ck(&params, iteration, last_epoch, last_val)?,
        log,
        snapshots,
    })
}

/// Single-pass evaluation of a checkpoint over `stream` with batch size 1,
/// carried state and no dropout. Position `t` (for `t ≥ 1`) records the
/// probability of `stream[t]` given `stream[..t]`.
pub fn evaluate(checkpoint: &Checkpoint, stream: &[Id], chunk: usize, keep_distributions: bool) -> Result<Evaluation> {
    evaluate_params(&checkpoint.params, stream, chunk, keep_distributions)
}

pub fn evaluate_params(params: &Params, stream: &[Id], chunk: usize, keep_distributions: bool) -> Result<Evaluation> {
    if stream.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "evaluation stream needs at least 2 characters, got {}",
            stream.len()
        )));
    }
    if chunk == 0 {
        return Err(Error::InvalidArgument("evaluation chunk must be positive".into()));
    }
    let k = params.spec.vocab_size;
    if let Some(&bad) = stream.iter().find(|&&id| id as usize >= k) {
        return Err(Error::IdOutOfRange {
            id: bad as usize,
            size: k,
        });
    }
    let inputs = &stream[..stream.len() - 1];
    let mut state = vec![StepState::zeros(&params.spec)];
    let mut records = Vec::with_capacity(inputs.len());
    let mut dists = keep_distributions.then(Distributions::default);
    let mut total = 0.0;
    for (c, window) in inputs.chunks(chunk).enumerate() {
        let out = forward_window(params, &[window.to_vec()], &state, false, None)?;
        for (t, y) in out.logits[0].iter().enumerate() {
            let position = c * chunk + t + 1;
            let target = stream[position];
            let (loss, _) = softmax_xent(y, target as usize)?;
            total += loss;
            let p_target = (-loss).exp();
            records.push(PredictionRecord {
                position,
                target,
                p_target,
            });
            if let Some(d) = dists.as_mut() {
                d.push(position, &softmax(y));
            }
        }
        state = out.state;
    }
    Ok(Evaluation {
        mean_loss: total / records.len() as f64,
        records,
        distributions: dists,
    })
}

/// Result of [`cross_validate_dropout`].
#[derive(Debug, Clone)]
pub struct DropoutSearch {
    pub best_dropout: f64,
    /// `(dropout, best validation loss)` per grid value, in grid order.
    pub val_losses: Vec<(f64, f64)>,
    pub best: TrainOutcome,
}

/// Trains one model per value of `config.dropout_grid` and keeps the one
/// with the lowest validation loss; ties go to the smaller dropout.
pub fn cross_validate_dropout(
    spec: ModelSpec,
    config: &TrainConfig,
    splits: &CorpusSplits,
    vocab: &Vocabulary,
) -> Result<DropoutSearch> {
    config.validate()?;
    let mut val_losses = Vec::with_capacity(config.dropout_grid.len());
    let mut best: Option<(f64, f64, TrainOutcome)> = None;
    for &p in &config.dropout_grid {
        let cfg = TrainConfig {
            dropout: p,
            ..config.clone()
        };
        let outcome = train(spec, &cfg, splits, vocab)?;
        let val = outcome.best.val_loss.unwrap_or(f64::INFINITY);
        val_losses.push((p, val));
        let better = match &best {
            None => true,
            Some((bp, bv, _)) => val < *bv || (val == *bv && p < *bp),
        };
        if better {
            best = Some((p, val, outcome));
        }
    }
    let (best_dropout, _, best) = best.expect("grid validated non-empty");
    Ok(DropoutSearch {
        best_dropout,
        val_losses,
        best,
    })
}

/// Hidden size for `kind` whose parameter count is closest to `budget`.
pub fn matched_hidden(kind: CellKind, layers: usize, vocab_size: usize, budget: usize) -> usize {
    let count = |n: usize| ModelSpec::recurrent(kind, layers, n, vocab_size).param_count();
    let mut best = 1;
    let mut best_gap = usize::MAX;
    let mut n = 1;
    loop {
        let c = count(n);
        let gap = c.abs_diff(budget);
        if gap < best_gap {
            best = n;
            best_gap = gap;
        }
        if c > budget {
            break;
        }
        n += 1;
    }
    best
}

/// One row of the model-grid table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub kind: CellKind,
    pub layers: usize,
    /// LSTM hidden size that set this cell's parameter budget.
    pub size: usize,
    pub hidden: usize,
    pub params: usize,
    pub dropout: f64,
    pub val_loss: f64,
    pub test_loss: f64,
    pub test_sigma: f64,
}

pub const BOOTSTRAP_SAMPLES: usize = 100;

/// Trains every `kinds × layers × sizes` combination (sizes are LSTM hidden
/// widths; RNN and GRU widths are matched to the LSTM parameter count) with
/// dropout cross-validation, and reports test loss with bootstrap σ.
pub fn model_grid(
    kinds: &[CellKind],
    layers: &[usize],
    sizes: &[usize],
    config: &TrainConfig,
    splits: &CorpusSplits,
    vocab: &Vocabulary,
) -> Result<Vec<GridRow>> {
    let mut rows = Vec::new();
    for &kind in kinds {
        if !kind.is_recurrent() {
            return Err(Error::InvalidArgument("model grid covers recurrent kinds only".into()));
        }
        for &l in layers {
            for &size in sizes {
                let budget = ModelSpec::recurrent(CellKind::Lstm, l, size, vocab.len()).param_count();
                let hidden = matched_hidden(kind, l, vocab.len(), budget);
                let spec = ModelSpec::recurrent(kind, l, hidden, vocab.len());
                info!("grid: {kind} L={l} size={size} (n={hidden})");
                let search = cross_validate_dropout(spec, config, splits, vocab)?;
                let test = evaluate(&search.best.best, &splits.test, config.eval_chunk, false)?;
                rows.push(GridRow {
                    kind,
                    layers: l,
                    size,
                    hidden,
                    params: spec.param_count(),
                    dropout: search.best_dropout,
                    val_loss: search.best.best.val_loss.unwrap_or(f64::NAN),
                    test_loss: test.mean_loss,
                    test_sigma: bootstrap_sigma(&test.records, BOOTSTRAP_SAMPLES, config.seed),
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_grid_csv(path: &Path, rows: &[GridRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads a JSON training config, applying `key=value` overrides.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<TrainConfig> {
    let mut value = match path {
        Some(p) => {
            let s = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str::<serde_json::Value>(&s)?
        }
        None => serde_json::to_value(TrainConfig::default())?,
    };
    apply_overrides(&mut value, overrides)?;
    let cfg: TrainConfig = serde_json::from_value(value).map_err(|e| Error::InvalidArgument(format!("config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Applies `key=value` assignments to a JSON object. Values parse as JSON
/// when possible and fall back to strings.
pub fn apply_overrides(value: &mut serde_json::Value, overrides: &[String]) -> Result<()> {
    let obj = value
        .as_object_mut()
        .ok_or_else(|| Error::InvalidArgument("config must be a JSON object".into()))?;
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::InvalidArgument(format!("override {o:?} is not key=value")))?;
        let parsed = serde_json::from_str(v).unwrap_or_else(|_| serde_json::Value::String(v.to_string()));
        obj.insert(k.trim().to_string(), parsed);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Dataset, SplitRatios};

    fn tiny_dataset() -> Dataset {
        let text = "the cat sat on the mat. the dog sat on the log. ".repeat(40);
        Dataset::from_text(text, SplitRatios::new(0.8, 0.1, 0.1)).unwrap()
    }

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            unroll: 10,
            epochs: 2,
            snapshot_epochs: 1,
            eval_chunk: 16,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn lr_schedule() {
        let c = TrainConfig::default();
        for e in 1..=10 {
            assert_eq!(c.learning_rate(e), 2e-3);
        }
        assert_eq!(c.learning_rate(11), 2e-3 * 0.95);
        assert_eq!(c.learning_rate(12), 2e-3 * 0.95f64.powi(2));
        assert_eq!(c.learning_rate(50), 2e-3 * 0.95f64.powi(40));
    }

    #[test]
    fn init_params_range_and_determinism() {
        let spec = ModelSpec::recurrent(CellKind::Lstm, 2, 8, 10);
        let a = init_params(spec, 0.08, 3).unwrap();
        let b = init_params(spec, 0.08, 3).unwrap();
        let c = init_params(spec, 0.08, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for (name, t) in a.named_tensors() {
            if is_bias(&name) {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            } else {
                assert!(t.data().iter().all(|v| (-0.08..=0.08).contains(v)), "{name}");
            }
        }
        assert!(init_params(spec, -1.0, 0).is_err());
    }

    #[test]
    fn init_params_mean_within_clt_bound() {
        let spec = ModelSpec::recurrent(CellKind::Lstm, 2, 100, 100);
        let p = init_params(spec, 0.08, 11).unwrap();
        let weights: Vec<f64> = p
            .named_tensors()
            .into_iter()
            .filter(|(n, _)| !is_bias(n))
            .flat_map(|(_, t)| t.data().to_vec())
            .collect();
        assert!(weights.len() >= 100_000);
        let mean = weights.iter().sum::<f64>() / weights.len() as f64;
        let sigma = 0.08 / 3f64.sqrt() / (weights.len() as f64).sqrt();
        assert!(mean.abs() < 3.0 * sigma, "{mean} vs 3σ={}", 3.0 * sigma);
    }

    #[test]
    fn zero_init_first_loss_is_ln_k() {
        let d = tiny_dataset();
        for kind in [CellKind::Rnn, CellKind::Lstm, CellKind::Gru] {
            let spec = ModelSpec::recurrent(kind, 1, 6, d.vocab.len());
            let cfg = TrainConfig {
                init_range: 0.0,
                max_iterations: Some(1),
                ..tiny_config()
            };
            let out = train(spec, &cfg, &d.splits, &d.vocab).unwrap();
            let first = out.log.iterations[0].train_loss;
            assert!((first - (d.vocab.len() as f64).ln()).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_params_evaluate_ln_k() {
        let d = tiny_dataset();
        let spec = ModelSpec::recurrent(CellKind::Gru, 2, 5, d.vocab.len());
        let ev = evaluate_params(&Params::zeros(spec).unwrap(), &d.splits.test, 7, false).unwrap();
        assert!((ev.mean_loss - (d.vocab.len() as f64).ln()).abs() < 1e-9);
        assert_eq!(ev.records.len(), d.splits.test.len() - 1);
        assert_eq!(ev.records[0].position, 1);
    }

    #[test]
    fn evaluate_chunk_invariant() {
        let d = tiny_dataset();
        let spec = ModelSpec::recurrent(CellKind::Lstm, 2, 6, d.vocab.len());
        let p = init_params(spec, 0.5, 9).unwrap();
        let a = evaluate_params(&p, &d.splits.test, 1000, true).unwrap();
        let b = evaluate_params(&p, &d.splits.test, 7, true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn evaluate_rejects_bad_streams() {
        let spec = ModelSpec::recurrent(CellKind::Rnn, 1, 3, 4);
        let p = Params::zeros(spec).unwrap();
        assert!(evaluate_params(&p, &[1], 5, false).is_err());
        assert!(evaluate_params(&p, &[1, 9], 5, false).is_err());
    }

    #[test]
    fn training_improves_and_keeps_best() {
        let d = tiny_dataset();
        let spec = ModelSpec::recurrent(CellKind::Lstm, 1, 16, d.vocab.len());
        let cfg = TrainConfig {
            epochs: 4,
            base_lr: 1e-2,
            ..tiny_config()
        };
        let out = train(spec, &cfg, &d.splits, &d.vocab).unwrap();
        let min_val = out.log.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(out.best.val_loss, Some(min_val));
        assert!(out.log.iterations.windows(2).all(|w| w[1].iteration > w[0].iteration));
        assert!(min_val < (d.vocab.len() as f64).ln());
        // geometric snapshots inside the first epoch
        assert_eq!(&out.log.snapshot_iterations[..3], &[1, 2, 4]);
        assert!(out.snapshots.iter().all(|s| s.epoch <= 1));
    }

    #[test]
    fn training_is_deterministic() {
        let d = tiny_dataset();
        let spec = ModelSpec::recurrent(CellKind::Gru, 2, 6, d.vocab.len());
        let cfg = TrainConfig {
            dropout: 0.25,
            ..tiny_config()
        };
        let a = train(spec, &cfg, &d.splits, &d.vocab).unwrap();
        let b = train(spec, &cfg, &d.splits, &d.vocab).unwrap();
        assert_eq!(a.best, b.best);
        assert_eq!(a.log.iterations, b.log.iterations);
    }

    #[test]
    fn divergence_reports_error() {
        let d = tiny_dataset();
        let spec = ModelSpec::recurrent(CellKind::Rnn, 1, 4, d.vocab.len());
        let cfg = TrainConfig {
            base_lr: f64::MAX,
            ..tiny_config()
        };
        match train(spec, &cfg, &d.splits, &d.vocab) {
            Err(Error::Diverged { .. }) | Err(Error::NonFinite { .. }) => {}
            other => panic!("expected divergence, got {:?}", other.map(|o| o.log.epochs)),
        }
    }

    #[test]
    fn dropout_search_single_value() {
        let d = tiny_dataset();
        let spec = ModelSpec::recurrent(CellKind::Rnn, 1, 6, d.vocab.len());
        let cfg = TrainConfig {
            dropout_grid: vec![0.0],
            epochs: 1,
            ..tiny_config()
        };
        let s = cross_validate_dropout(spec, &cfg, &d.splits, &d.vocab).unwrap();
        assert_eq!(s.best_dropout, 0.0);
        assert_eq!(s.val_losses.len(), 1);
    }

    #[test]
    fn dropout_search_argmin() {
        let d = tiny_dataset();
        let spec = ModelSpec::recurrent(CellKind::Lstm, 2, 8, d.vocab.len());
        let cfg = TrainConfig {
            dropout_grid: vec![0.0, 0.25, 0.5],
            epochs: 1,
            ..tiny_config()
        };
        let s = cross_validate_dropout(spec, &cfg, &d.splits, &d.vocab).unwrap();
        let best = s.val_losses.iter().find(|(p, _)| *p == s.best_dropout).unwrap().1;
        assert!(s.val_losses.iter().all(|(_, v)| best <= *v));
        assert!(cfg.dropout_grid.contains(&s.best_dropout));
    }

    #[test]
    fn matched_sizes_within_five_percent() {
        for layers in 1..=3 {
            for size in [64, 128, 256, 512] {
                let budget = ModelSpec::recurrent(CellKind::Lstm, layers, size, 87).param_count();
                for kind in [CellKind::Rnn, CellKind::Gru] {
                    let n = matched_hidden(kind, layers, 87, budget);
                    let c = ModelSpec::recurrent(kind, layers, n, 87).param_count();
                    let gap = (c as f64 - budget as f64).abs() / budget as f64;
                    assert!(gap < 0.05, "{kind} L={layers} size={size}: {gap}");
                }
            }
        }
    }

    #[test]
    fn config_validation_lists_fields() {
        let cfg = TrainConfig {
            batch_size: 0,
            clip: -1.0,
            dropout: 1.5,
            ..TrainConfig::default()
        };
        let msg = cfg.validate().unwrap_err().to_string();
        assert!(msg.contains("batch_size") && msg.contains("clip") && msg.contains("dropout"));
    }

    #[test]
    fn config_overrides() {
        let cfg = load_config(None, &["epochs=3".into(), "dropout_grid=[0,0.5]".into()]).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.dropout_grid, vec![0.0, 0.5]);
        assert!(load_config(None, &["nonsense_key=1".into()]).is_err());
        assert!(load_config(None, &["epochs".into()]).is_err());
    }
}
