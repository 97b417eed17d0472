//! Task-free variant: expert training and integration interleave on a
//! single pass over a blurred stream, using only the current mini-batch.

use pocon_nn::{Network, Scalar};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{PoconConfig, TaskFreeConfig};
use super::run::first_main;
use crate::datastream::{BlurredStream, LabeledDataset, Normalization, TaskStream};
use crate::error::{CoreError, Result};
use crate::models::{build_projector, snapshot, Encoder, Projector, ProjectorSpec, SslModel};
use crate::record::{RunRecord, SnapshotTrace, Stage};
use crate::seeding::SeedBank;
use crate::train::{ssl_gradients, BatchSource};

/// Iterations after which segment `t` of the stream ends.
pub fn segment_ends(iterations: usize, tasks: usize) -> Vec<usize> {
    (1..=tasks).map(|t| (t * iterations).div_ceil(tasks)).collect()
}

pub fn run_taskfree<T: Scalar>(
    train: &LabeledDataset<T>,
    stream: &TaskStream,
    blurred: &BlurredStream,
    tf: &TaskFreeConfig,
    cfg: &PoconConfig,
    normalization: &Normalization,
    seeds: &SeedBank,
) -> Result<RunRecord<T>> {
    tf.validate()?;
    cfg.validate()?;
    if blurred.num_tasks != stream.num_tasks() {
        return Err(CoreError::InvalidArgument("blurred stream and task stream disagree on task count".into()));
    }
    let pools: Vec<Vec<usize>> = (0..stream.num_tasks())
        .map(|t| {
            let classes = &stream.task_classes[t];
            (0..train.len()).filter(|&i| classes.contains(&train.labels[i])).collect()
        })
        .collect();
    if pools.iter().any(Vec::is_empty) {
        return Err(CoreError::Dataset("a task has no training samples".into()));
    }

    let mut rec = RunRecord::new("pocon_taskfree", cfg.model.main.clone(), blurred.manifest(stream).hash());
    let mut aug_rng = ChaCha8Rng::seed_from_u64(seeds.augmentation());
    let mut sample_rng = ChaCha8Rng::seed_from_u64(seeds.derive("stream").wrapping_add(blurred.seed));
    let mut src = BatchSource { aug: &cfg.aug, normalization, rng: &mut aug_rng };
    let sc = &cfg.stages;
    let iters = blurred.iterations;

    let mut expert = SslModel::<T>::new(cfg.model.expert_spec(), cfg.model.projector_dim, seeds.model())?;
    let mut expert_opt = sc.optimizer.sgd::<T>();
    let mut main: Option<Encoder<T>> = None;
    let mut frozen_expert: Option<Encoder<T>> = None;
    let mut main_prev: Option<Encoder<T>> = None;
    let mut n: Option<Projector<T>> = None;
    let mut m: Option<Projector<T>> = None;
    let mut int_opt = sc.optimizer.sgd::<T>();
    let mut pending = 0;
    let mut task_counts = vec![0usize; stream.num_tasks()];
    let ends = segment_ends(iters, stream.num_tasks());
    let mut segment = 0;
    rec.event(0, Stage::ExpertInit, "random");

    for i in 0..iters {
        let (idx, tasks) = blurred.sample_batch(i, sc.batch_size, &pools, &mut sample_rng);
        rec.counters.max_buffered = rec.counters.max_buffered.max(idx.len());
        for &t in &tasks {
            task_counts[t] += 1;
        }
        let batch = train.subset(&idx);
        let all: Vec<usize> = (0..batch.len()).collect();

        let lr = sc.optimizer.lr_at(i, iters);
        expert_opt.lr = T::lit(lr);
        let (xa, xb) = src.views(&batch, &all)?;
        let (loss, _, _) = ssl_gradients(&mut expert, &xa, &xb, &sc.barlow, None)?;
        if !loss.is_finite() {
            return Err(CoreError::NonFinite { stage: Stage::Expert.as_str().into(), step: i, lr, batch: idx.len() });
        }
        expert_opt.step(&mut [&mut expert.encoder.net, &mut expert.projector.net]);
        rec.log.push(segment, Stage::Expert, i, loss, &[("barlow", loss)], lr);

        if pending > 0 {
            let (Some(mn), Some(fe), Some(nn)) = (main.as_mut(), frozen_expert.as_ref(), n.as_mut()) else {
                unreachable!("integration is only scheduled after a snapshot")
            };
            let x = src.view(&batch, &all)?;
            let l = super::integration::integration_loss(&x, fe, main_prev.as_ref(), mn, nn, m.as_mut(), sc.distance)?;
            if !l.total.is_finite() {
                return Err(CoreError::NonFinite { stage: Stage::Integration.as_str().into(), step: i, lr: sc.optimizer.lr, batch: idx.len() });
            }
            int_opt.lr = T::lit(sc.optimizer.lr);
            let mut nets: Vec<&mut Network<T>> = vec![&mut mn.net, &mut nn.net];
            if let Some(mm) = m.as_mut() {
                nets.push(&mut mm.net);
            }
            int_opt.step(&mut nets);
            rec.log.push(
                segment,
                Stage::Integration,
                rec.counters.distill_steps,
                l.total,
                &[("adaptation", l.adaptation), ("retrospection", l.retrospection)],
                sc.optimizer.lr,
            );
            rec.counters.distill_steps += 1;
            pending -= 1;
        }

        if (i + 1) % tf.s == 0 {
            let snap = expert.encoder.frozen_copy();
            match main.as_ref() {
                None => {
                    let fresh = first_main(cfg, &expert.encoder, seeds.derive("main"))?;
                    n = Some(build_projector(
                        &ProjectorSpec::adaptation(fresh.feature_dim(), snap.feature_dim()),
                        seeds.derive("adaptors/n"),
                    )?);
                    main = Some(fresh);
                }
                Some(cur) => {
                    if m.is_none() {
                        m = Some(build_projector(&ProjectorSpec::retrospection(cur.feature_dim()), seeds.derive("adaptors/m"))?);
                    }
                    main_prev = Some(cur.frozen_copy());
                }
            }
            frozen_expert = Some(snap);
            pending = tf.ds;
            rec.counters.expert_snapshots += 1;
            rec.trace.push(SnapshotTrace { iteration: i + 1, expert_task_counts: std::mem::take(&mut task_counts) });
            task_counts = vec![0; stream.num_tasks()];
        }

        if i + 1 == ends[segment] {
            let enc = match main.as_ref() {
                Some(mn) => mn.clone(),
                None => first_main(cfg, &expert.encoder, seeds.derive("main"))?,
            };
            rec.checkpoints.push(snapshot(&enc, segment as u64));
            segment = (segment + 1).min(ends.len() - 1);
        }
    }
    rec.counters.train_expert = 1;
    Ok(rec)
}
