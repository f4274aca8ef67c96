//! Training loop and evaluation.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::augment::augment;
use crate::data::{batch_tensor, DatasetSplit, Emotion, LabeledImage};
use crate::error::{data_err, param_err, Error, Result};
use crate::layers::{softmax_cross_entropy, Mode};
use crate::model::DeepEmotionModel;
use crate::optim::{adam_step, add_regularization_gradient, overall_loss, penalty, AdamConfig, AdamState, TrainConfig};
use crate::rng;
use crate::tensor::Tensor;
use crate::{Scalar, NUM_CLASSES};

/// Anything that maps an `N×1×H×W` batch to `N×7` logits.
pub trait Classifier<T: Scalar> {
    fn input_hw(&self) -> (usize, usize);
    fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>>;
}

impl<T: Scalar> Classifier<T> for DeepEmotionModel<T> {
    fn input_hw(&self) -> (usize, usize) {
        (self.config().input_h, self.config().input_w)
    }

    /// Always eval semantics (dropout off), whatever the mode flag says.
    fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.logits_eval(x)
    }
}

/// Index of the largest logit in each row; ties resolve to the lowest index.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<usize>> {
    let (n, c) = logits.dims2()?;
    Ok((0..n)
        .map(|b| {
            let row = &logits.data()[b * c..(b + 1) * c];
            let mut best = 0;
            for j in 1..c {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

/// Counts with rows = true label, columns = prediction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn record(&mut self, truth: usize, predicted: usize) {
        self.counts[truth][predicted] += 1;
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            0.0
        } else {
            self.trace() as f64 / total as f64
        }
    }

    pub fn row_sums(&self) -> [u64; NUM_CLASSES] {
        self.counts.map(|row| row.iter().sum())
    }

    /// Per-class recall (row-normalised diagonal); `None` for empty rows.
    pub fn recall(&self) -> [Option<f64>; NUM_CLASSES] {
        let sums = self.row_sums();
        core::array::from_fn(|i| (sums[i] > 0).then(|| self.counts[i][i] as f64 / sums[i] as f64))
    }

    /// Aligned text table with class names, row totals and recall.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{:>10}", "true\\pred");
        for e in Emotion::ALL {
            let _ = write!(s, " {:>8}", e.name());
        }
        let _ = writeln!(s, " {:>8} {:>8}", "total", "recall");
        let recall = self.recall();
        for (i, e) in Emotion::ALL.iter().enumerate() {
            let _ = write!(s, "{:>10}", e.name());
            for c in &self.counts[i] {
                let _ = write!(s, " {c:>8}");
            }
            let r = recall[i].map(|r| format!("{r:.4}")).unwrap_or_else(|| String::from("-"));
            let _ = writeln!(s, " {:>8} {:>8}", self.row_sums()[i], r);
        }
        let _ = writeln!(s, "accuracy {:.4} ({}/{})", self.accuracy(), self.trace(), self.total());
        s
    }

    /// Machine-readable grid: seven comma-separated rows of integer counts.
    pub fn to_grid(&self) -> String {
        let mut s = String::new();
        for row in &self.counts {
            let cells: Vec<String> = row.iter().map(|c| format!("{c}")).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }

    pub fn from_grid(text: &str) -> Result<Self> {
        let mut m = ConfusionMatrix::default();
        let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
        if rows.len() != NUM_CLASSES {
            return Err(data_err!("confusion grid needs {NUM_CLASSES} rows, got {}", rows.len()));
        }
        for (i, row) in rows.iter().enumerate() {
            let cells: Vec<&str> = row.split(',').collect();
            if cells.len() != NUM_CLASSES {
                return Err(data_err!("confusion grid row {i} has {} cells", cells.len()));
            }
            for (j, c) in cells.iter().enumerate() {
                m.counts[i][j] = c.trim().parse().map_err(|_| data_err!("bad count {c:?} in row {i}"))?;
            }
        }
        Ok(m)
    }
}

const EVAL_BATCH: usize = 64;

/// Mean cross-entropy and confusion counts over `samples` (eval semantics).
pub fn eval_pass<T: Scalar, C: Classifier<T> + ?Sized>(
    model: &C,
    samples: &[LabeledImage],
) -> Result<(f64, ConfusionMatrix)> {
    let mut cm = ConfusionMatrix::default();
    let mut loss_sum = 0.0;
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&LabeledImage> = chunk.iter().collect();
        let x = batch_tensor::<T>(&refs)?;
        let logits = model.logits(&x)?;
        let labels: Vec<usize> = chunk.iter().map(|s| s.label.index()).collect();
        let (ce, _) = softmax_cross_entropy(&logits, &labels)?;
        loss_sum += ce.as_f64() * chunk.len() as f64;
        for (&t, p) in labels.iter().zip(argmax_rows(&logits)?) {
            cm.record(t, p);
        }
    }
    Ok((loss_sum / samples.len().max(1) as f64, cm))
}

/// Accuracy and confusion matrix of argmax predictions.
pub fn evaluate<T: Scalar, C: Classifier<T> + ?Sized>(
    model: &C,
    samples: &[LabeledImage],
) -> Result<(f64, ConfusionMatrix)> {
    if samples.is_empty() {
        return Err(param_err!("cannot evaluate on an empty sample list"));
    }
    let (_, cm) = eval_pass(model, samples)?;
    Ok((cm.accuracy(), cm))
}

/// One completed epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// Accuracy of the train-mode (augmented, dropout) predictions seen during the epoch.
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub wall_ms: Option<u64>,
}

/// Test-set metrics of one model snapshot.
#[derive(Debug, Clone, PartialEq)]
pub struct TestMetrics {
    pub accuracy: f64,
    pub confusion: ConfusionMatrix,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunLog {
    pub seed: u64,
    pub config_echo: String,
    pub records: Vec<EpochRecord>,
    /// Epoch whose model had the best validation accuracy (first one on ties).
    pub best_epoch: Option<usize>,
    pub best_val_acc: Option<f64>,
    pub best_test: Option<TestMetrics>,
    pub final_test: Option<TestMetrics>,
}

impl RunLog {
    /// Line-delimited records. Wall-clock times are only written when asked
    /// for, so the default rendering is reproducible byte for byte.
    pub fn to_text(&self, include_wall_time: bool) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# seed={}", self.seed);
        for line in self.config_echo.lines() {
            let _ = writeln!(s, "# config {line}");
        }
        for r in &self.records {
            let _ = write!(
                s,
                "epoch={} train_loss={:.9} train_acc={:.6} val_loss={:.9} val_acc={:.6}",
                r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc
            );
            if let (true, Some(ms)) = (include_wall_time, r.wall_ms) {
                let _ = write!(s, " wall_ms={ms}");
            }
            s.push('\n');
        }
        if let (Some(e), Some(a)) = (self.best_epoch, self.best_val_acc) {
            let _ = writeln!(s, "best epoch={e} val_acc={a:.6}");
        }
        for (tag, m) in [("best", &self.best_test), ("final", &self.final_test)] {
            if let Some(m) = m {
                let _ = writeln!(
                    s,
                    "test model={tag} accuracy={:.6} correct={} total={}",
                    m.accuracy,
                    m.confusion.trace(),
                    m.confusion.total()
                );
            }
        }
        s
    }
}

/// Callbacks from the training loop.
pub trait TrainHooks<T: Scalar> {
    /// Milliseconds since an arbitrary origin, if a clock is available.
    fn now_ms(&mut self) -> Option<u64> {
        None
    }
    fn on_epoch(&mut self, _record: &EpochRecord, _model: &DeepEmotionModel<T>) {}
    /// Called whenever a new best-validation model is found.
    fn on_best(&mut self, _epoch: usize, _model: &DeepEmotionModel<T>) {}
}

/// Hooks that do nothing.
pub struct NoHooks;
impl<T: Scalar> TrainHooks<T> for NoHooks {}

pub struct TrainOutcome<T> {
    /// Parameters after the last epoch.
    pub model: DeepEmotionModel<T>,
    /// Snapshot with the best validation accuracy (the input model if no epoch ran).
    pub best: DeepEmotionModel<T>,
    pub log: RunLog,
}

fn numeric(epoch: usize, batch: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(_) => Error::NumericAbort { epoch, batch, loss: f64::NAN },
        other => other,
    }
}

/// Adam training on the split's train partition with per-epoch validation.
///
/// Each epoch shuffles the training set, augments every sample, runs a
/// train-mode forward/backward per batch on cross-entropy plus the L2 term,
/// and applies one Adam step per batch. Every random draw derives from
/// `seed`, so a run is replayable bit for bit.
pub fn train<T: Scalar>(
    mut model: DeepEmotionModel<T>,
    split: &DatasetSplit,
    cfg: &TrainConfig,
    seed: u64,
    hooks: &mut dyn TrainHooks<T>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let mut log = RunLog {
        seed,
        config_echo: format!("{}{}", model.config().to_kv(), cfg.to_kv()),
        ..RunLog::default()
    };
    let mut best = model.clone();
    if cfg.epochs == 0 {
        return Ok(TrainOutcome { model, best, log });
    }
    if split.train.is_empty() || split.val.is_empty() {
        return Err(data_err!("training needs non-empty train and val partitions"));
    }
    let adam_cfg = AdamConfig::from(cfg);
    let mut state = AdamState::<T>::new();
    let start = hooks.now_ms();

    for epoch in 1..=cfg.epochs {
        let epoch_seed = rng::derive_seed(&[seed, epoch as u64]);
        let mut order: Vec<usize> = (0..split.train.len()).collect();
        order.shuffle(&mut rng::stream(epoch_seed, rng::streams::SHUFFLE));

        model.set_mode(Mode::Train);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (batch_idx, idx) in order.chunks(cfg.batch_size).enumerate() {
            let mut step = || -> Result<(f64, usize)> {
                let images = idx
                    .iter()
                    .map(|&i| augment(&split.train[i], &cfg.augment, rng::derive_seed(&[epoch_seed, i as u64])))
                    .collect::<Result<Vec<_>>>()?;
                let refs: Vec<&LabeledImage> = images.iter().collect();
                let x = batch_tensor::<T>(&refs)?;
                let labels: Vec<usize> = images.iter().map(|s| s.label.index()).collect();
                let dropout_seed = rng::derive_seed(&[epoch_seed, batch_idx as u64, rng::streams::DROPOUT]);
                let (logits, cache) = model.forward_train(&x, dropout_seed)?;
                let (ce, grad_logits) = softmax_cross_entropy(&logits, &labels)?;
                let loss = overall_loss(ce, &model, cfg.lambda)?;
                if !loss.is_finite() {
                    return Err(Error::NumericAbort { epoch, batch: batch_idx, loss: loss.as_f64() });
                }
                let hits = argmax_rows(&logits)?.iter().zip(&labels).filter(|(p, t)| p == t).count();
                let mut grads = model.backward(&grad_logits, cache)?;
                add_regularization_gradient(&mut grads, &model, cfg.lambda)?;
                adam_step(&mut model.params_mut(), &grads, &mut state, &adam_cfg)?;
                Ok((loss.as_f64() * idx.len() as f64, hits))
            };
            let (l, hits) = step().map_err(|e| numeric(epoch, batch_idx, e))?;
            loss_sum += l;
            correct += hits;
        }
        model.set_mode(Mode::Eval);

        let (val_ce, val_cm) = eval_pass(&model, &split.val).map_err(|e| numeric(epoch, usize::MAX, e))?;
        let val_loss = val_ce + cfg.lambda * penalty(&model).as_f64();
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / split.train.len() as f64,
            train_acc: correct as f64 / split.train.len() as f64,
            val_loss,
            val_acc: val_cm.accuracy(),
            wall_ms: match (start, hooks.now_ms()) {
                (Some(a), Some(b)) => Some(b.saturating_sub(a)),
                _ => None,
            },
        };
        if log.best_val_acc.is_none_or(|b| record.val_acc > b) {
            log.best_val_acc = Some(record.val_acc);
            log.best_epoch = Some(epoch);
            best = model.clone();
            hooks.on_best(epoch, &best);
        }
        hooks.on_epoch(&record, &model);
        log.records.push(record);
    }

    if !split.test.is_empty() {
        let (acc, cm) = evaluate(&best, &split.test)?;
        log.best_test = Some(TestMetrics { accuracy: acc, confusion: cm });
        let (acc, cm) = evaluate(&model, &split.test)?;
        log.final_test = Some(TestMetrics { accuracy: acc, confusion: cm });
    }
    Ok(TrainOutcome { model, best, log })
}
