//! Run records: per-task checkpoints, stage events and the metric log.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::time::Instant;

use pocon_nn::Scalar;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::models::{build_encoder, restore, Encoder, EncoderSpec, ParamSnapshot};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    ExpertInit,
    Expert,
    Integration,
    Ssl,
    Distillation,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::ExpertInit => "expert_init",
            Stage::Expert => "expert",
            Stage::Integration => "integration",
            Stage::Ssl => "ssl",
            Stage::Distillation => "distillation",
        }
    }
}

/// One logged optimization step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub method: String,
    pub task: usize,
    pub stage: Stage,
    pub step: usize,
    pub loss: f64,
    pub components: BTreeMap<String, f64>,
    pub lr: f64,
    pub wall_ms: u64,
}

/// Append-only metric log with a wall clock.
#[derive(Clone, Debug)]
pub struct MetricLog {
    pub method: String,
    pub records: Vec<MetricRecord>,
    start: Instant,
}

impl MetricLog {
    pub fn new(method: impl Into<String>) -> Self {
        Self { method: method.into(), records: Vec::new(), start: Instant::now() }
    }

    pub fn push(&mut self, task: usize, stage: Stage, step: usize, loss: f64, components: &[(&str, f64)], lr: f64) {
        self.records.push(MetricRecord {
            method: self.method.clone(),
            task,
            stage,
            step,
            loss,
            components: components.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
            lr,
            wall_ms: self.start.elapsed().as_millis() as u64,
        });
    }

    /// Losses of one (task, stage) in step order.
    pub fn losses(&self, task: usize, stage: Stage) -> Vec<f64> {
        self.records.iter().filter(|r| r.task == task && r.stage == stage).map(|r| r.loss).collect()
    }

    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<Vec<MetricRecord>> {
        let mut out = Vec::new();
        for line in r.lines() {
            let line = line?;
            if !line.trim().is_empty() {
                out.push(serde_json::from_str(&line)?);
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageEvent {
    pub task: usize,
    pub stage: Stage,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunCounters {
    pub init_expert: usize,
    pub train_expert: usize,
    pub train_integration: usize,
    pub expert_snapshots: usize,
    pub distill_steps: usize,
    /// Largest number of samples held at once (task-free runs).
    pub max_buffered: usize,
}

/// One expert snapshot of a task-free run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SnapshotTrace {
    pub iteration: usize,
    /// Number of expert-training samples drawn from each task since the
    /// previous snapshot.
    pub expert_task_counts: Vec<usize>,
}

/// Everything a training run produces.
#[derive(Clone, Debug)]
pub struct RunRecord<T> {
    pub method: String,
    pub encoder_spec: EncoderSpec,
    /// Evaluated encoder after each task (or task-free segment).
    pub checkpoints: Vec<ParamSnapshot<T>>,
    pub events: Vec<StageEvent>,
    pub counters: RunCounters,
    pub log: MetricLog,
    pub trace: Vec<SnapshotTrace>,
    pub stream_hash: String,
}

impl<T: Scalar> RunRecord<T> {
    pub fn new(method: &str, encoder_spec: EncoderSpec, stream_hash: String) -> Self {
        Self {
            method: method.to_string(),
            encoder_spec,
            checkpoints: Vec::new(),
            events: Vec::new(),
            counters: RunCounters::default(),
            log: MetricLog::new(method),
            trace: Vec::new(),
            stream_hash,
        }
    }

    pub fn event(&mut self, task: usize, stage: Stage, detail: impl Into<String>) {
        self.events.push(StageEvent { task, stage, detail: detail.into() });
    }

    pub fn num_checkpoints(&self) -> usize {
        self.checkpoints.len()
    }

    /// Rebuilds the evaluated encoder as of checkpoint `t`.
    pub fn encoder_at(&self, t: usize) -> Result<Encoder<T>> {
        let snap = self
            .checkpoints
            .get(t)
            .ok_or_else(|| CoreError::InvalidArgument(format!("no checkpoint for task {t}")))?;
        let mut enc = build_encoder(&self.encoder_spec, 0)?;
        restore(&mut enc, snap)?;
        Ok(enc)
    }

    pub fn final_encoder(&self) -> Result<Encoder<T>> {
        self.encoder_at(self.checkpoints.len().saturating_sub(1))
    }
}
