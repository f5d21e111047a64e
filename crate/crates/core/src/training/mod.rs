//! Task data, optimiser, schedule and the training loop.

pub mod data;
mod optim;
mod schedule;

use std::collections::BTreeSet;
use std::io;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expansion::ExpansionPlan;
use crate::interpolators::{divergence_node, project_alphas};
use crate::tensor::{Graph, NodeId, Real};
use crate::transformer::{build_forward, greedy_decode_drafted, ModelSpec, ModelView, ParameterStore};

pub use data::{lm_batch, Example, LmBatch, Split, TaskKind, TaskSpec};
pub use optim::AdamW;
pub use schedule::Schedule;

/// Step budget, schedule and evaluation cadence.
///
/// `schedule_scale` shrinks the reference 1000-step warmup and evaluation
/// interval; `lr_scale` multiplies the reference peak 5e-5 and floor 1e-5.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub schedule_scale: f64,
    pub lr_scale: f64,
    pub weight_decay_ratio: f64,
    pub eval_every: usize,
    /// Held-out examples per task at each evaluation.
    pub eval_examples: usize,
    /// Seed of the task generator, shared by every run so held-out sets agree.
    pub data_seed: u64,
    /// Picks this run's region of the training split.
    pub seed: u64,
}

impl TrainConfig {
    /// Reference values: warmup 1000, peak 5e-5, floor 1e-5, evaluation every 1000 steps.
    pub fn reference(steps: usize) -> Self {
        TrainConfig {
            steps,
            batch_size: 64,
            schedule_scale: 1.0,
            lr_scale: 1.0,
            weight_decay_ratio: 0.1,
            eval_every: 1000,
            eval_examples: 256,
            data_seed: 0,
            seed: 0,
        }
    }

    /// Desk scale: warmup 100, peak 1e-3, floor 2e-4, evaluation every 100 steps.
    pub fn desk(steps: usize) -> Self {
        TrainConfig {
            schedule_scale: 0.1,
            lr_scale: 20.0,
            eval_every: 100,
            ..TrainConfig::reference(steps)
        }
    }

    pub fn schedule(&self) -> Schedule {
        Schedule {
            warmup: ((1000.0 * self.schedule_scale).round() as usize).max(1),
            total: self.steps,
            peak: 5e-5 * self.lr_scale,
            min: 1e-5 * self.lr_scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.batch_size == 0 {
            errs.push("batch_size must be positive");
        }
        if self.eval_every == 0 {
            errs.push("eval_every must be positive");
        }
        if self.eval_examples == 0 {
            errs.push("eval_examples must be positive");
        }
        if !(self.schedule_scale > 0.0 && self.lr_scale > 0.0) {
            errs.push("schedule_scale and lr_scale must be positive");
        }
        if !(self.weight_decay_ratio >= 0.0) {
            errs.push("weight_decay_ratio must be non-negative");
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs.join("; ")))
        }
    }
}

/// One evaluation boundary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub step: usize,
    pub method: String,
    /// Mean task loss over the steps since the previous record.
    pub task_loss: f64,
    pub div_loss: f64,
    pub lr: f64,
    pub task_a_acc: f64,
    pub task_b_acc: f64,
}

impl Record {
    pub fn accuracy(&self, task: TaskKind) -> f64 {
        match task {
            TaskKind::CopyReverse => self.task_a_acc,
            TaskKind::Sort => self.task_b_acc,
        }
    }
}

/// Append-only log of evaluation records.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricLog {
    pub records: Vec<Record>,
}

impl MetricLog {
    pub fn last(&self) -> Option<&Record> {
        self.records.last()
    }

    pub fn write_csv(&self, w: impl io::Write) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.records {
            out.serialize(r)?;
        }
        if self.records.is_empty() {
            out.write_record(["step", "method", "task_loss", "div_loss", "lr", "task_a_acc", "task_b_acc"])?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_csv(r: impl io::Read) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(r);
        let records = rdr.deserialize().collect::<std::result::Result<_, _>>()?;
        Ok(MetricLog { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        crate::checkpoint::write_atomic(path, &buf)
    }
}

/// Step of the record with the best new-task accuracy among `checkpoints`
/// (every record when empty); ties go to the earliest step.
pub fn select_checkpoint(log: &MetricLog, checkpoints: &[usize], new_task: TaskKind) -> Result<usize> {
    let best = log
        .records
        .iter()
        .filter(|r| checkpoints.is_empty() || checkpoints.contains(&r.step))
        .fold(None::<&Record>, |best, r| match best {
            Some(b) if b.accuracy(new_task) >= r.accuracy(new_task) => Some(b),
            _ => Some(r),
        });
    best.map(|r| r.step).ok_or(Error::EmptyLog)
}

/// Per-token accuracy of greedy answers on `n` examples of `split`.
pub fn evaluate_task(view: &ModelView<'_>, task: &TaskSpec, split: Split, n: usize) -> Result<f64> {
    const CHUNK: usize = 128;
    let mut correct = 0usize;
    let mut total = 0usize;
    let examples = task.examples(split, 0, n);
    for chunk in examples.chunks(CHUNK) {
        let prompts: Vec<Vec<u32>> = chunk.iter().map(|e| e.prompt.clone()).collect();
        let drafts: Vec<Vec<u32>> = chunk.iter().map(|e| e.answer.clone()).collect();
        let decoded = greedy_decode_drafted(view, &prompts, &drafts, task.payload_len)?;
        for (ex, d) in chunk.iter().zip(&decoded) {
            let got = &d.tokens[ex.prompt.len()..];
            correct += ex.answer.iter().zip(got).filter(|(a, b)| a == b).count();
            total += ex.answer.len();
        }
    }
    Ok(correct as f64 / total.max(1) as f64)
}

/// What a training run updates.
pub struct TrainTarget<'a> {
    pub spec: &'a ModelSpec,
    pub store: &'a mut ParameterStore,
    /// Expansion used by the forward pass; `None` for a plain model.
    pub plan: Option<&'a ExpansionPlan>,
    pub trainable: &'a BTreeSet<String>,
}

/// Losses of one batch, before the update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub task: f64,
    pub divergence: f64,
}

/// Loss nodes of one batch.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub task: NodeId,
    pub divergence: Option<NodeId>,
    /// `task + lambda * divergence`
    pub total: NodeId,
}

/// Records the forward pass and the training loss of `batch` into `g`.
pub fn build_loss<'a, T: Real>(
    g: &mut Graph<'a, T>,
    view: &ModelView<'a>,
    batch: &LmBatch,
    trainable: Option<&BTreeSet<String>>,
) -> Result<LossNodes> {
    let nodes = build_forward(g, view, &batch.inputs, trainable)?;
    let shape = g.shape(nodes.logits).to_vec();
    let rows = g.reshape(nodes.logits, &[batch.targets.len(), shape[2]])?;
    let task = g.cross_entropy(rows, &batch.targets, &batch.mask)?;
    let divergence = match view.plan {
        Some(plan) => divergence_node(g, &plan.divergence, &nodes.divergence_terms())?,
        None => None,
    };
    let total = match (divergence, view.plan) {
        (Some(div), Some(plan)) => {
            let weighted = g.scale(div, plan.divergence.lambda)?;
            g.add(task, weighted)?
        }
        _ => task,
    };
    Ok(LossNodes {
        task,
        divergence,
        total,
    })
}

/// Forward and backward on one batch followed by an optimiser update.
pub fn train_step(
    target: &mut TrainTarget<'_>,
    opt: &mut AdamW,
    batch: &LmBatch,
    lr: f64,
) -> Result<StepLosses> {
    let (losses, grads) = {
        let view = ModelView::base(target.spec, target.store).with_plan(target.plan);
        let mut g = Graph::<f32>::new();
        let nodes = build_loss(&mut g, &view, batch, Some(target.trainable))?;
        let losses = StepLosses {
            task: g.value(nodes.task).item() as f64,
            divergence: nodes.divergence.map_or(0.0, |d| g.value(d).item() as f64),
        };
        (losses, g.backward(nodes.total)?)
    };
    opt.step(target.store, &grads, lr)?;
    project_alphas(target.store);
    Ok(losses)
}

/// Trains on `task` and evaluates both tasks every `eval_every` steps, before
/// the first update and after the last. `on_record` sees each record together
/// with the weights it was measured on.
pub fn train(
    target: &mut TrainTarget<'_>,
    task: TaskKind,
    cfg: &TrainConfig,
    method: &str,
    on_record: &mut dyn FnMut(&Record, &ParameterStore) -> Result<()>,
) -> Result<MetricLog> {
    cfg.validate()?;
    let schedule = cfg.schedule();
    let data = TaskSpec::new(task, cfg.data_seed);
    let evals = [
        TaskSpec::new(TaskKind::CopyReverse, cfg.data_seed),
        TaskSpec::new(TaskKind::Sort, cfg.data_seed),
    ];
    let offset = cfg.seed.wrapping_mul(1 << 32);
    let mut opt = AdamW::new(cfg.weight_decay_ratio);
    let mut log = MetricLog::default();
    let (mut loss_sum, mut div_sum, mut count) = (0.0, 0.0, 0usize);

    let (spec, plan) = (target.spec, target.plan);
    let mut record = |step: usize, loss: f64, div: f64, lr: f64, store: &ParameterStore, log: &mut MetricLog| -> Result<()> {
        let view = ModelView::base(spec, store).with_plan(plan);
        let r = Record {
            step,
            method: method.to_string(),
            task_loss: loss,
            div_loss: div,
            lr,
            task_a_acc: evaluate_task(&view, &evals[0], Split::Validation, cfg.eval_examples)?,
            task_b_acc: evaluate_task(&view, &evals[1], Split::Validation, cfg.eval_examples)?,
        };
        on_record(&r, store)?;
        log.records.push(r);
        Ok(())
    };

    for step in 0..cfg.steps {
        let lr = schedule.lr_at(step);
        let start = offset.wrapping_add((step * cfg.batch_size) as u64);
        let batch = lm_batch(&data.examples(Split::Train, start, cfg.batch_size))?;
        let before = (step % cfg.eval_every == 0).then(|| target.store.clone());
        let losses = train_step(target, &mut opt, &batch, lr).map_err(|e| abort(step, lr, e))?;
        if !losses.task.is_finite() || !losses.divergence.is_finite() {
            return Err(abort(step, lr, Error::Divergence("non-finite loss".into())));
        }
        loss_sum += losses.task;
        div_sum += losses.divergence;
        count += 1;
        if let Some(store) = before {
            record(step, loss_sum / count as f64, div_sum / count as f64, lr, &store, &mut log)?;
            (loss_sum, div_sum, count) = (0.0, 0.0, 0);
        }
    }
    let lr = schedule.lr_at(cfg.steps.saturating_sub(1));
    let n = count.max(1) as f64;
    let store = target.store.clone();
    record(cfg.steps, loss_sum / n, div_sum / n, lr, &store, &mut log)?;
    Ok(log)
}

fn abort(step: usize, lr: f64, e: Error) -> Error {
    match e {
        Error::TrainingAborted { .. } => e,
        other => Error::TrainingAborted {
            step,
            lr,
            reason: other.to_string(),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(step: usize, b: f64) -> Record {
        Record {
            step,
            method: "m".into(),
            task_loss: 1.0,
            div_loss: 0.0,
            lr: 1e-3,
            task_a_acc: 0.5,
            task_b_acc: b,
        }
    }

    #[test]
    fn checkpoint_selection() {
        let log = MetricLog {
            records: vec![rec(1000, 0.5), rec(2000, 0.9), rec(3000, 0.9)],
        };
        assert_eq!(select_checkpoint(&log, &[], TaskKind::Sort).unwrap(), 2000);
        assert_eq!(select_checkpoint(&log, &[3000], TaskKind::Sort).unwrap(), 3000);
        let rising = MetricLog {
            records: vec![rec(1, 0.1), rec(2, 0.2), rec(3, 0.3)],
        };
        assert_eq!(select_checkpoint(&rising, &[], TaskKind::Sort).unwrap(), 3);
        assert!(matches!(
            select_checkpoint(&MetricLog::default(), &[], TaskKind::Sort),
            Err(Error::EmptyLog)
        ));
    }

    #[test]
    fn csv_round_trip() {
        let log = MetricLog {
            records: vec![rec(0, 0.25), rec(100, 0.75)],
        };
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("step,method,task_loss,div_loss,lr,task_a_acc,task_b_acc\n"));
        assert_eq!(MetricLog::read_csv(buf.as_slice()).unwrap(), log);
    }

    #[test]
    fn reference_schedule_values() {
        let s = TrainConfig::reference(5000).schedule();
        assert_eq!((s.warmup, s.peak, s.min), (1000, 5e-5, 1e-5));
        let d = TrainConfig::desk(3000).schedule();
        assert_eq!(d.warmup, 100);
        assert!((d.peak - 1e-3).abs() < 1e-15 && (d.min - 2e-4).abs() < 1e-15);
    }
}
