use rand::Rng;
use serde::{Deserialize, Serialize};

use super::splits::{StreamManifest, TaskStream};
use crate::error::{CoreError, Result};

/// Task-free stream: at iteration `i`, a sample comes from task `t` with
/// probability `schedule[i][t]`.
///
/// Neighbouring tasks hand over through a logistic ramp centred on their
/// boundary. The ramp is rescaled to reach exactly 0 and 1 at the centres
/// of the two adjacent segments. So at most two adjacent tasks are active
/// in any row, and each segment centre is pure. `beta` sets the sharpness.
/// Large values approach hard task boundaries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlurredStream {
    pub schedule: Vec<Vec<f64>>,
    pub beta: f64,
    pub iterations: usize,
    pub seed: u64,
    pub num_tasks: usize,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Share of the later task at offset `u` (in segment widths) from a boundary.
fn handover(u: f64, beta: f64) -> f64 {
    if u <= -0.5 {
        return 0.0;
    }
    if u >= 0.5 {
        return 1.0;
    }
    let lo = sigmoid(-beta / 2.0);
    let hi = sigmoid(beta / 2.0);
    ((sigmoid(beta * u) - lo) / (hi - lo)).clamp(0.0, 1.0)
}

/// Builds the per-iteration task-sampling schedule for `stream`.
pub fn make_blurred_stream(stream: &TaskStream, beta: f64, iterations: usize, seed: u64) -> Result<BlurredStream> {
    blurred_schedule(stream.num_tasks(), beta, iterations, seed)
}

pub fn blurred_schedule(tasks: usize, beta: f64, iterations: usize, seed: u64) -> Result<BlurredStream> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(CoreError::InvalidArgument(format!("beta must be positive and finite, got {beta}")));
    }
    if tasks == 0 || iterations < tasks {
        return Err(CoreError::InvalidArgument(format!(
            "need iterations ({iterations}) >= tasks ({tasks}) > 0"
        )));
    }
    let width = iterations as f64 / tasks as f64;
    let schedule = (0..iterations)
        .map(|i| {
            let pos = i as f64 + 0.5;
            let seg = ((pos / width) as usize).min(tasks - 1);
            let mut row = vec![0.0; tasks];
            let centre = (seg as f64 + 0.5) * width;
            if pos >= centre && seg + 1 < tasks {
                let s = handover((pos - (seg + 1) as f64 * width) / width, beta);
                row[seg] = 1.0 - s;
                row[seg + 1] = s;
            } else if pos < centre && seg > 0 {
                let s = handover((pos - seg as f64 * width) / width, beta);
                row[seg - 1] = 1.0 - s;
                row[seg] = s;
            } else {
                row[seg] = 1.0;
            }
            row
        })
        .collect();
    Ok(BlurredStream { schedule, beta, iterations, seed, num_tasks: tasks })
}

impl BlurredStream {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.schedule[i]
    }

    /// Draws a task id from row `i`.
    pub fn sample_task<R: Rng + ?Sized>(&self, i: usize, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let row = &self.schedule[i];
        let mut acc = 0.0;
        for (t, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return t;
            }
        }
        row.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }

    /// Draws `batch` sample indices for iteration `i`; `pools[t]` lists the
    /// sample indices of task `t`.
    pub fn sample_batch<R: Rng + ?Sized>(
        &self,
        i: usize,
        batch: usize,
        pools: &[Vec<usize>],
        rng: &mut R,
    ) -> (Vec<usize>, Vec<usize>) {
        let mut idx = Vec::with_capacity(batch);
        let mut tasks = Vec::with_capacity(batch);
        for _ in 0..batch {
            let t = self.sample_task(i, rng);
            let pool = &pools[t];
            idx.push(pool[rng.random_range(0..pool.len())]);
            tasks.push(t);
        }
        (idx, tasks)
    }

    pub fn manifest(&self, stream: &TaskStream) -> StreamManifest {
        StreamManifest {
            kind: "blurred".into(),
            class_order: stream.class_order.clone(),
            boundaries: stream.boundaries(),
            beta: Some(self.beta),
            iterations: Some(self.iterations),
            seed: self.seed,
        }
    }
}
