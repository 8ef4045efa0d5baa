//! SGD training loop, evaluation, checkpointing of a training run and the
//! model-level gradient check.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::config::{parse_bool, KeyValues};
use crate::data::{batches, epoch_rng, Dataset};
use crate::error::{Error, Result};
use crate::gradcheck::relative_error;
use crate::layers::{apply_bn_updates, ForwardCtx};
use crate::models::{build_model, Model, ModelConfig};
use crate::param::sgd_step;
use crate::scalar::{cast, Precision, Real};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Epochs between ×0.1 learning-rate drops.
    pub lr_decay_interval: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub precision: Precision,
    /// Random crop and horizontal flip. Off by default.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 30,
            lr_decay_interval: 10,
            batch_size: 64,
            seed: 0,
            precision: Precision::F32,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let finite_nonneg = |name: &str, v: f64| {
            if v.is_finite() && v >= 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "{name} must be finite and ≥ 0, got {v}"
                )))
            }
        };
        finite_nonneg("lr0", self.lr0)?;
        finite_nonneg("momentum", self.momentum)?;
        finite_nonneg("weight_decay", self.weight_decay)?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if self.lr_decay_interval == 0 || self.lr_decay_interval > self.epochs {
            return Err(Error::Config(format!(
                "lr_decay_interval must be in 1..={} (epochs), got {}",
                self.epochs, self.lr_decay_interval
            )));
        }
        Ok(())
    }

    /// `lr0 · 0.1^⌊epoch / interval⌋`.
    pub fn learning_rate(&self, epoch: usize) -> f64 {
        self.lr0 * 0.1f64.powi((epoch / self.lr_decay_interval.max(1)) as i32)
    }

    pub fn write_keys(&self, kv: &mut KeyValues) {
        kv.set("lr0", self.lr0);
        kv.set("momentum", self.momentum);
        kv.set("weight_decay", self.weight_decay);
        kv.set("epochs", self.epochs);
        kv.set("lr_decay_interval", self.lr_decay_interval);
        kv.set("batch_size", self.batch_size);
        kv.set("seed", self.seed);
        kv.set("precision", self.precision);
        kv.set("augment", self.augment);
    }

    /// Reads every key written by [`TrainConfig::write_keys`], falling back
    /// to the defaults for absent ones.
    pub fn from_keys(kv: &KeyValues) -> Result<Self> {
        let d = TrainConfig::default();
        let cfg = TrainConfig {
            lr0: kv.parse_or("lr0", d.lr0)?,
            momentum: kv.parse_or("momentum", d.momentum)?,
            weight_decay: kv.parse_or("weight_decay", d.weight_decay)?,
            epochs: kv.parse_or("epochs", d.epochs)?,
            lr_decay_interval: kv.parse_or("lr_decay_interval", d.lr_decay_interval)?,
            batch_size: kv.parse_or("batch_size", d.batch_size)?,
            seed: kv.parse_or("seed", d.seed)?,
            precision: kv.parse_or("precision", d.precision)?,
            augment: kv
                .get("augment")
                .map(parse_bool)
                .transpose()?
                .unwrap_or(d.augment),
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_top1: f64,
    pub test_top1: f64,
    pub test_top5: f64,
    pub wall_time_s: f64,
}

pub const METRICS_HEADER: &str = "epoch,train_loss,train_top1,test_top1,test_top5,wall_time_s";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.3}",
            self.epoch,
            self.train_loss,
            self.train_top1,
            self.test_top1,
            self.test_top5,
            self.wall_time_s
        )
    }
}

/// Reads a file written by [`write_metrics_csv`].
pub fn read_metrics_csv(path: impl AsRef<Path>) -> Result<Vec<EpochMetrics>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Data(format!(
            "{}: unexpected metrics header",
            path.display()
        )));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let bad = || Error::Data(format!("{}: bad metrics row {line:?}", path.display()));
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad());
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
            Ok(EpochMetrics {
                epoch: f[0].parse().map_err(|_| bad())?,
                train_loss: num(1)?,
                train_top1: num(2)?,
                test_top1: num(3)?,
                test_top5: num(4)?,
                wall_time_s: num(5)?,
            })
        })
        .collect()
}

pub fn write_metrics_csv(path: impl AsRef<Path>, rows: &[EpochMetrics]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::from(METRICS_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.csv_row());
        text.push('\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(text.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub top1: f64,
    pub top5: f64,
}

/// Whether `label` is among the `k` largest logits of `row`; ties rank the
/// lower class index first.
pub fn in_top_k<T: Real>(row: &[T], label: usize, k: usize) -> bool {
    let target = row[label];
    let rank = row
        .iter()
        .enumerate()
        .filter(|&(j, &v)| v > target || (v == target && j < label))
        .count();
    rank < k
}

fn count_top_k<T: Real>(logits: &Tensor<T>, labels: &[usize], k: usize) -> usize {
    let classes = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| in_top_k(&logits.data()[i * classes..(i + 1) * classes], y, k))
        .count()
}

/// Mean loss and top-1/top-5 accuracy in evaluation mode. Does not modify
/// the model.
pub fn evaluate<T: Real>(model: &Model<T>, ds: &Dataset, batch_size: usize) -> Result<EvalMetrics> {
    if ds.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let batch_size = batch_size.max(1);
    let (mut loss_sum, mut c1, mut c5) = (0.0, 0usize, 0usize);
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch_size) {
        let (x, labels) = ds.batch::<T>(chunk);
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::new(&mut tape, &model.store, false);
        let input = ctx.tape.constant(x);
        let out = model.forward(&mut ctx, input)?;
        let loss = ctx.tape.cross_entropy(out.logits, &labels)?;
        loss_sum += tape.value(loss).item()?.to_f64().unwrap_or(f64::NAN) * chunk.len() as f64;
        let logits = tape.value(out.logits);
        c1 += count_top_k(logits, &labels, 1);
        c5 += count_top_k(logits, &labels, 5);
    }
    let n = ds.len() as f64;
    Ok(EvalMetrics {
        loss: loss_sum / n,
        top1: c1 as f64 / n,
        top5: c5 as f64 / n,
    })
}

/// Resumable state of a run besides parameters and momentum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainState {
    /// Completed epochs.
    pub epoch: usize,
    /// Loss of the very first batch, the divergence reference.
    pub reference_loss: Option<f64>,
    /// Consecutive epochs with mean loss above 10× the reference.
    pub over_count: usize,
}

/// Epochs above the divergence threshold tolerated before aborting.
pub const DIVERGENCE_PATIENCE: usize = 3;
pub const DIVERGENCE_FACTOR: f64 = 10.0;

pub struct Trainer<T> {
    pub model: Model<T>,
    pub cfg: TrainConfig,
    pub state: TrainState,
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite { op } => Error::Diverged {
            epoch,
            reason: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

impl<T: Real> Trainer<T> {
    pub fn new(model: Model<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.precision != T::PRECISION {
            return Err(Error::Config(format!(
                "configuration asks for {}-bit precision, trainer is {}-bit",
                cfg.precision,
                T::PRECISION
            )));
        }
        Ok(Trainer {
            model,
            cfg,
            state: TrainState {
                epoch: 0,
                reference_loss: None,
                over_count: 0,
            },
        })
    }

    /// One SGD pass over `train`; returns (mean loss, top-1 accuracy).
    pub fn train_epoch(&mut self, train: &Dataset) -> Result<(f64, f64)> {
        let epoch = self.state.epoch;
        let lr: T = cast(self.cfg.learning_rate(epoch));
        let momentum: T = cast(self.cfg.momentum);
        let wd: T = cast(self.cfg.weight_decay);
        let mut aug_rng = epoch_rng(self.cfg.seed ^ 0xa076_1d64_78bd_642f, epoch as u64);
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for idx in batches(
            train.len(),
            self.cfg.batch_size,
            self.cfg.seed,
            epoch as u64,
        )? {
            let (x, labels) = if self.cfg.augment {
                train.augmented_batch::<T>(&idx, &mut aug_rng)
            } else {
                train.batch::<T>(&idx)
            };
            let mut tape = Tape::new();
            let (loss, logits, updates) = {
                let mut ctx = ForwardCtx::new(&mut tape, &self.model.store, true);
                let input = ctx.tape.constant(x);
                let out = self
                    .model
                    .forward(&mut ctx, input)
                    .map_err(|e| diverged(epoch, e))?;
                let loss = ctx
                    .tape
                    .cross_entropy(out.logits, &labels)
                    .map_err(|e| diverged(epoch, e))?;
                (loss, out.logits, std::mem::take(&mut ctx.bn_updates))
            };
            let loss_value = tape.value(loss).item()?.to_f64().unwrap_or(f64::NAN);
            if !loss_value.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    reason: format!("loss is {loss_value}"),
                });
            }
            self.state.reference_loss.get_or_insert(loss_value);
            loss_sum += loss_value * idx.len() as f64;
            correct += count_top_k(tape.value(logits), &labels, 1);
            let grads = tape.backward(loss).map_err(|e| diverged(epoch, e))?;
            self.model.store.accumulate_grads(&tape, &grads);
            sgd_step(&mut self.model.store, lr, momentum, wd);
            apply_bn_updates(&mut self.model.store, &updates);
        }
        let n = train.len() as f64;
        Ok((loss_sum / n, correct as f64 / n))
    }

    /// Trains one epoch, evaluates on `test` and applies the divergence rule.
    pub fn run_epoch(&mut self, train: &Dataset, test: &Dataset) -> Result<EpochMetrics> {
        let start = Instant::now();
        let epoch = self.state.epoch;
        let (train_loss, train_top1) = self.train_epoch(train)?;
        self.state.epoch += 1;
        let reference = self.state.reference_loss.unwrap_or(train_loss);
        if train_loss > DIVERGENCE_FACTOR * reference {
            self.state.over_count += 1;
        } else {
            self.state.over_count = 0;
        }
        if self.state.over_count >= DIVERGENCE_PATIENCE {
            return Err(Error::Diverged {
                epoch,
                reason: format!(
                    "mean loss {train_loss} above {DIVERGENCE_FACTOR}× the initial loss {reference} for {DIVERGENCE_PATIENCE} consecutive epochs"
                ),
            });
        }
        let eval =
            evaluate(&self.model, test, self.cfg.batch_size).map_err(|e| diverged(epoch, e))?;
        Ok(EpochMetrics {
            epoch: epoch + 1,
            train_loss,
            train_top1,
            test_top1: eval.top1,
            test_top5: eval.top5,
            wall_time_s: start.elapsed().as_secs_f64(),
        })
    }

    /// Runs the remaining epochs, calling `on_epoch` after each one.
    pub fn run(
        &mut self,
        train: &Dataset,
        test: &Dataset,
        mut on_epoch: impl FnMut(&Self, &EpochMetrics) -> Result<()>,
    ) -> Result<Vec<EpochMetrics>> {
        let mut history = Vec::new();
        while self.state.epoch < self.cfg.epochs {
            let m = self.run_epoch(train, test)?;
            on_epoch(self, &m)?;
            history.push(m);
        }
        Ok(history)
    }

    /// Parameters, momentum buffers, batch-norm statistics and run state.
    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let mut header = KeyValues::new();
        self.model.config.write_keys(&mut header);
        self.cfg.write_keys(&mut header);
        header.set("state.epoch", self.state.epoch);
        if let Some(r) = self.state.reference_loss {
            header.set("state.reference_loss", r);
        }
        header.set("state.over_count", self.state.over_count);
        let store = &self.model.store;
        let mut tensors = Vec::new();
        for p in store.params() {
            tensors.push((p.name.clone(), p.value.clone()));
        }
        for p in store.params() {
            tensors.push((
                format!("{MOMENTUM_PREFIX}{}", p.name),
                p.momentum_buffer.clone(),
            ));
        }
        for (name, t) in store.buffers() {
            tensors.push((name.to_string(), t.clone()));
        }
        Checkpoint { header, tensors }
    }

    pub fn from_checkpoint(ck: &Checkpoint<T>) -> Result<Self> {
        let bad = |msg: String| Error::Checkpoint(msg);
        let config = ModelConfig::from_keys(&ck.header).map_err(|e| bad(e.to_string()))?;
        let cfg = TrainConfig::from_keys(&ck.header).map_err(|e| bad(e.to_string()))?;
        let mut model = build_model::<T>(config, cfg.seed)?;
        let expected = 2 * model.store.len() + model.store.buffers().count();
        if ck.tensors.len() != expected {
            return Err(bad(format!(
                "{} tensors stored, the configured model has {expected}",
                ck.tensors.len()
            )));
        }
        let fit = |name: &str, dst: &Tensor<T>| -> Result<Tensor<T>> {
            let t = ck
                .tensor(name)
                .ok_or_else(|| bad(format!("missing tensor {name:?}")))?;
            if t.shape() != dst.shape() {
                return Err(bad(format!(
                    "{name}: stored shape {:?}, model expects {:?}",
                    t.shape(),
                    dst.shape()
                )));
            }
            Ok(t.clone())
        };
        let ids: Vec<_> = model.store.ids().collect();
        for id in ids {
            let name = model.store.param(id).name.clone();
            let value = fit(&name, model.store.value(id))?;
            let momentum = fit(
                &format!("{MOMENTUM_PREFIX}{name}"),
                &model.store.param(id).momentum_buffer,
            )?;
            *model.store.value_mut(id) = value;
            *model.store.momentum_mut(id) = momentum;
        }
        let buffer_names: Vec<String> = model.store.buffers().map(|(n, _)| n.to_string()).collect();
        for name in buffer_names {
            let id = model.store.find_buffer(&name).expect("listed buffer");
            let t = fit(&name, model.store.buffer(id))?;
            *model.store.buffer_mut(id) = t;
        }
        let h = &ck.header;
        let state = TrainState {
            epoch: h
                .parse_value("state.epoch")
                .map_err(|e| bad(e.to_string()))?,
            reference_loss: h
                .get("state.reference_loss")
                .map(|_| h.parse_value::<f64>("state.reference_loss"))
                .transpose()
                .map_err(|e| bad(e.to_string()))?,
            over_count: h
                .parse_value("state.over_count")
                .map_err(|e| bad(e.to_string()))?,
        };
        let mut trainer = Trainer::new(model, cfg)?;
        trainer.state = state;
        Ok(trainer)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

/// Name prefix of momentum tensors inside a checkpoint.
pub const MOMENTUM_PREFIX: &str = "momentum:";

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Elements whose ±step probes crossed a ReLU or max-pool branch and were
    /// replaced by other elements of the same tensor.
    pub skipped_kinks: usize,
    pub max_rel_err: f64,
    /// `name[index]` of the worst element.
    pub worst: String,
    pub step: f64,
}

/// Default finite-difference step of [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-5;

/// Fills every parameter tensor that is entirely zero (biases, zero-initialized
/// pooling-module output layers) with `U(-scale, scale)` so a gradient check
/// exercises the parameters behind it. Returns the number of tensors filled.
pub fn randomize_zero_params(model: &mut Model<f64>, scale: f64, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<_> = model.store.ids().collect();
    let mut filled = 0;
    for id in ids {
        let t = model.store.value_mut(id);
        if t.data().iter().all(|&v| v == 0.0) {
            for v in t.data_mut() {
                *v = rng.gen_range(-scale..scale);
            }
            filled += 1;
        }
    }
    filled
}

/// Mean cross-entropy in training mode and the branch signature of the
/// forward pass; fills parameter gradients when requested.
fn loss_and_grads(
    model: &mut Model<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    with_grads: bool,
) -> Result<(f64, u64)> {
    let mut tape = Tape::new();
    let loss = {
        let mut ctx = ForwardCtx::new(&mut tape, &model.store, true);
        let input = ctx.tape.constant(x.clone());
        let out = model.forward(&mut ctx, input)?;
        ctx.tape.cross_entropy(out.logits, labels)?
    };
    let value = tape.value(loss).item()?;
    if with_grads {
        model.store.zero_grad();
        let grads = tape.backward(loss)?;
        model.store.accumulate_grads(&tape, &grads);
    }
    Ok((value, tape.branch_signature()))
}

/// Spreads `budget` checks over tensors of the given sizes so that every
/// tensor gets an equal share, capped by its size.
fn allocate(sizes: &[usize], budget: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by_key(|&i| sizes[i]);
    let mut out = vec![0; sizes.len()];
    let mut left = budget;
    for (k, &i) in order.iter().enumerate() {
        let share = left / (order.len() - k);
        out[i] = sizes[i].min(share);
        left -= out[i];
    }
    out
}

/// Compares backward gradients of up to `max_elements` parameter elements,
/// spread evenly over all parameter tensors, against central differences of
/// the training-mode loss on one batch.
///
/// A probe whose `+step` or `−step` evaluation takes a different ReLU or
/// max-pool branch than the unperturbed pass straddles a kink where the
/// difference quotient is meaningless; such elements are counted in
/// `skipped_kinks` and replaced by other elements of the same tensor.
pub fn grad_check(
    model: &mut Model<f64>,
    x: &Tensor<f64>,
    labels: &[usize],
    max_elements: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    let (_, base_sig) = loss_and_grads(model, x, labels, true)?;
    let analytic: Vec<Tensor<f64>> = model
        .store
        .params()
        .iter()
        .map(|p| p.grad.clone())
        .collect();
    model.store.zero_grad();
    let ids: Vec<_> = model.store.ids().collect();
    let sizes: Vec<usize> = ids
        .iter()
        .map(|&id| model.store.value(id).numel())
        .collect();
    let quota = allocate(&sizes, max_elements);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = GradCheckReport {
        checked: 0,
        skipped_kinks: 0,
        max_rel_err: 0.0,
        worst: String::new(),
        step,
    };
    for ((k, &id), &q) in ids.iter().enumerate().zip(&quota) {
        if q == 0 {
            continue;
        }
        let candidates = sample(&mut rng, sizes[k], sizes[k]).into_vec();
        let mut accepted = 0;
        for e in candidates {
            if accepted == q {
                break;
            }
            let orig = model.store.value(id).data()[e];
            model.store.value_mut(id).data_mut()[e] = orig + step;
            let plus = loss_and_grads(model, x, labels, false);
            model.store.value_mut(id).data_mut()[e] = orig - step;
            let minus = loss_and_grads(model, x, labels, false);
            model.store.value_mut(id).data_mut()[e] = orig;
            let ((lp, sp), (lm, sm)) = (plus?, minus?);
            if sp != base_sig || sm != base_sig {
                report.skipped_kinks += 1;
                continue;
            }
            accepted += 1;
            let numeric = (lp - lm) / (2.0 * step);
            let err = relative_error(analytic[k].data()[e], numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_empty() {
                report.max_rel_err = err.max(report.max_rel_err);
                report.worst = format!("{}[{e}]", model.store.param(id).name);
            }
        }
    }
    Ok(report)
}
