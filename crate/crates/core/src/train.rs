//! Adam optimization, the epoch loop, evaluation and the batch-size
//! benchmark.

use std::fmt::Write as _;
use std::ops::ControlFlow;
use std::time::{Duration, Instant};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::graph::{Graph, Mode};
use crate::heads::HeadKind;
use crate::model::{argmax, Encoded, Model};
use crate::params::ParamSet;
use crate::rng::Rng;
use crate::text::{build_vocab, Dataset};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ParamSet) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }
}

/// One bias-corrected Adam update of every trainable parameter. `grads` is
/// indexed like `params` and is zeroed afterwards. Nothing is modified if
/// any gradient is non-finite.
pub fn adam_step(params: &mut ParamSet, grads: &mut [Vec<f64>], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::Shape(format!(
            "adam: {} gradients / {} moments for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for (id, p) in params.iter() {
        let g = &grads[id.index()];
        if g.len() != p.value.len() {
            return Err(Error::Shape(format!("adam: gradient size mismatch for {}", p.name)));
        }
        if let Some(i) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient in {} at {i}", p.name)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - BETA1.powi(t);
    let c2 = 1.0 - BETA2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let i = id.index();
        if params.param(id).trainable {
            let (m, v) = (&mut state.m[i], &mut state.v[i]);
            let value = params.get_mut(id).data_mut();
            for (k, &g) in grads[i].iter().enumerate() {
                m[k] = BETA1 * m[k] + (1.0 - BETA1) * g;
                v[k] = BETA2 * v[k] + (1.0 - BETA2) * g * g;
                let mhat = m[k] / c1;
                let vhat = v[k] / c2;
                value[k] -= lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        grads[i].iter_mut().for_each(|g| *g = 0.0);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
}

/// Eval-mode mean cross-entropy and accuracy.
pub fn evaluate(model: &Model, data: &[Encoded]) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::Size("cannot evaluate an empty split".into()));
    }
    let mut loss = 0.0;
    let mut correct = 0;
    for ex in data {
        let logits = model.logits(&ex.ids, ex.len)?;
        let mx = logits[0].max(logits[1]);
        let lse = mx + ((logits[0] - mx).exp() + (logits[1] - mx).exp()).ln();
        loss += lse - logits[ex.label];
        if argmax(&logits) == ex.label {
            correct += 1;
        }
    }
    Ok(Metrics {
        loss: loss / data.len() as f64,
        accuracy: correct as f64 / data.len() as f64,
        correct,
        total: data.len(),
    })
}

pub fn evaluate_dataset(model: &Model, data: &Dataset) -> Result<Metrics> {
    evaluate(model, &encode_all(model, data)?)
}

pub fn encode_all(model: &Model, data: &Dataset) -> Result<Vec<Encoded>> {
    data.iter().map(|e| model.encode(&e.text, e.label)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: Metrics,
    pub val: Metrics,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    pub wall_time: Duration,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub optimizer_steps: usize,
}

/// `h:mm:ss` with at least two hour digits, e.g. `00:04:02`.
pub fn format_hms(d: Duration) -> String {
    let s = d.as_secs();
    format!("{:02}:{:02}:{:02}", s / 3600, (s / 60) % 60, s % 60)
}

pub fn format_percent(acc: f64) -> String {
    format!("{:.2}%", acc * 100.0)
}

pub const TABLE_HEADER: &str = "Training time\tBatch Size\tVal Acc";

impl RunReport {
    /// Summary row, per-epoch metrics and the config echo. Without
    /// `timing` the training-time cell reads `-`, making the text a pure
    /// function of seed, config and data.
    pub fn render(&self, timing: bool) -> String {
        let mut s = String::new();
        let time = if timing { format_hms(self.wall_time) } else { "-".to_string() };
        let _ = writeln!(s, "{TABLE_HEADER}");
        let _ = writeln!(s, "{time}\t{}\t{}", self.config.batch_size, format_percent(self.best_val_accuracy));
        let _ = writeln!(s);
        let _ = writeln!(s, "epoch\ttrain_loss\ttrain_acc\tval_loss\tval_acc");
        for r in &self.epochs {
            let _ = writeln!(
                s,
                "{}\t{:.6}\t{:.4}\t{:.6}\t{:.4}",
                r.epoch, r.train.loss, r.train.accuracy, r.val.loss, r.val.accuracy
            );
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "best_epoch={}", self.best_epoch);
        let _ = writeln!(s, "best_val_acc={:.6}", self.best_val_accuracy);
        let _ = writeln!(s, "optimizer_steps={}", self.optimizer_steps);
        for line in self.config.to_lines() {
            let _ = writeln!(s, "{line}");
        }
        s
    }
}

/// Trains a fresh model on `train`, keeping the parameters of the epoch
/// with the best validation accuracy (earliest on ties).
pub fn train(train: &Dataset, val: &Dataset, config: &TrainConfig) -> Result<(Model, RunReport)> {
    train_with(train, val, config, |_| ControlFlow::Continue(()))
}

/// [`train`] with a callback after every epoch; returning `Break` ends
/// training after that epoch.
pub fn train_with(
    train: &Dataset,
    val: &Dataset,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord) -> ControlFlow<()>,
) -> Result<(Model, RunReport)> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Size("train and validation splits must be non-empty".into()));
    }
    config.validate()?;
    let start = Instant::now();
    let vocab = build_vocab(train, 1);
    let mut model = Model::new(config, vocab)?;
    let train_set = encode_all(&model, train)?;
    let val_set = encode_all(&model, val)?;
    let mut state = AdamState::new(&model.params);
    let mut grads: Vec<Vec<f64>> = model.params.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect();

    let mut records = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, f64, ParamSet)> = None;
    let mut steps = 0;
    for epoch in 1..=config.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        Rng::derive(config.seed, &[1, epoch as u64]).shuffle(&mut order);
        for batch in order.chunks(config.batch_size) {
            let mut rng = Rng::derive(config.seed, &[2, epoch as u64, steps as u64]);
            batch_gradients(&model, &train_set, batch, &mut rng, &mut grads)?;
            adam_step(&mut model.params, &mut grads, &mut state, config.learning_rate)?;
            steps += 1;
        }
        let record = EpochRecord { epoch, train: evaluate(&model, &train_set)?, val: evaluate(&model, &val_set)? };
        if best.as_ref().is_none_or(|(_, acc, _)| record.val.accuracy > *acc) {
            best = Some((epoch, record.val.accuracy, model.params.clone()));
        }
        let flow = on_epoch(&record);
        records.push(record);
        if flow.is_break() {
            break;
        }
    }
    let (best_epoch, best_val_accuracy, params) = best.expect("at least one epoch");
    model.params = params;
    let report = RunReport {
        config: config.clone(),
        epochs: records,
        wall_time: start.elapsed(),
        best_epoch,
        best_val_accuracy,
        optimizer_steps: steps,
    };
    Ok((model, report))
}

/// Gradient of the batch-mean cross-entropy, added into `grads`.
fn batch_gradients(
    model: &Model,
    data: &[Encoded],
    batch: &[usize],
    rng: &mut Rng,
    grads: &mut [Vec<f64>],
) -> Result<()> {
    let mut g = Graph::new();
    let p = model.params.bind(&mut g, true);
    let mut logits = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    for &i in batch {
        let ex = &data[i];
        logits.push(model.forward(&mut g, &p, &ex.ids, ex.len, Mode::Train, rng)?);
        targets.push(ex.label);
    }
    let stacked = g.concat(&logits, 0)?;
    let loss = g.softmax_cross_entropy(stacked, &targets)?;
    if !g.value(loss).data()[0].is_finite() {
        return Err(Error::Numeric("non-finite training loss".into()));
    }
    g.backward(loss)?;
    for id in model.params.ids() {
        if let Some(d) = g.grad(p[id]) {
            grads[id.index()].iter_mut().zip(d).for_each(|(a, b)| *a += b);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub head: HeadKind,
    pub batch_size: usize,
    pub wall_time: Duration,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BenchReport {
    pub rows: Vec<BenchRow>,
}

impl BenchReport {
    /// One block per architecture with the columns
    /// `Training time / Batch Size / Val Acc`.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut heads: Vec<HeadKind> = Vec::new();
        for r in &self.rows {
            if !heads.contains(&r.head) {
                heads.push(r.head);
            }
        }
        for (i, head) in heads.iter().enumerate() {
            if i > 0 {
                s.push('\n');
            }
            let _ = writeln!(s, "# {}", head.table_name());
            let _ = writeln!(s, "{TABLE_HEADER}");
            for r in self.rows.iter().filter(|r| r.head == *head) {
                let _ =
                    writeln!(s, "{}\t{}\t{}", format_hms(r.wall_time), r.batch_size, format_percent(r.val_accuracy));
            }
        }
        s
    }
}

/// Trains every (architecture, batch size) pair from `base` and records
/// wall time and best validation accuracy.
pub fn bench(
    heads: &[HeadKind],
    batches: &[usize],
    train_split: &Dataset,
    val_split: &Dataset,
    base: &TrainConfig,
    mut on_row: impl FnMut(&BenchRow),
) -> Result<BenchReport> {
    let mut report = BenchReport::default();
    for &head in heads {
        for &batch_size in batches {
            let cfg = TrainConfig { head, batch_size, ..base.clone() };
            let (_, run) = train(train_split, val_split, &cfg)?;
            let row = BenchRow { head, batch_size, wall_time: run.wall_time, val_accuracy: run.best_val_accuracy };
            on_row(&row);
            report.rows.push(row);
        }
    }
    Ok(report)
}
