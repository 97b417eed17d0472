//! Expert initialization for the next task.

use pocon_nn::{Mode, Scalar, Tensor};

use super::config::{InitStrategy, StageConfig};
use crate::datastream::LabeledDataset;
use crate::error::{CoreError, Result};
use crate::models::{build_encoder, build_projector, copy_params, Encoder, EncoderSpec, Projector, ProjectorSpec};
use crate::record::{MetricLog, Stage};
use crate::ssl_losses::FeatureDistance;
use crate::train::{epoch_batches, steps_per_epoch, BatchSource};

#[derive(Clone, Debug)]
pub struct InitOutcome<T> {
    pub expert: Encoder<T>,
    /// D2eOP distillation loss on the evaluation data before and after.
    pub distill_initial: Option<f64>,
    pub distill_final: Option<f64>,
}

/// Creates the expert for the next task from the current main network or
/// the previous expert.
#[allow(clippy::too_many_arguments)]
pub fn init_expert<T: Scalar>(
    strategy: InitStrategy,
    main: &Encoder<T>,
    old_expert: &Encoder<T>,
    new_spec: &EncoderSpec,
    data: &LabeledDataset<T>,
    cfg: &StageConfig,
    src: &mut BatchSource<'_>,
    seed: u64,
    task: usize,
    log: &mut MetricLog,
) -> Result<InitOutcome<T>> {
    let done = |expert| InitOutcome { expert, distill_initial: None, distill_final: None };
    match strategy {
        InitStrategy::CopyOp => {
            if &main.spec != new_spec {
                return Err(CoreError::Heterogeneous);
            }
            let mut expert = build_encoder(new_spec, seed)?;
            copy_params(main, &mut expert)?;
            Ok(done(expert))
        }
        InitStrategy::FtOp => {
            if &old_expert.spec != new_spec {
                return Err(CoreError::Heterogeneous);
            }
            let mut expert = old_expert.clone();
            expert.net.set_frozen(false);
            Ok(done(expert))
        }
        InitStrategy::ScratchOp => Ok(done(build_encoder(new_spec, seed)?)),
        InitStrategy::D2eOp => {
            let mut expert = build_encoder(new_spec, seed)?;
            let mut n = build_projector(&ProjectorSpec::adaptation(new_spec.feature_dim, main.feature_dim()), seed ^ 0xd2e)?;
            let target = main.frozen_copy();
            let eval_x = src.normalization.apply(&data.images)?;
            let initial = distill_loss(&eval_x, &target, &expert, &n, cfg.distance)?;
            distill_expert(&target, &mut expert, &mut n, data, cfg, cfg.d2e_epochs(), src, task, log)?;
            let fin = distill_loss(&eval_x, &target, &expert, &n, cfg.distance)?;
            Ok(InitOutcome { expert, distill_initial: Some(initial), distill_final: Some(fin) })
        }
    }
}

/// `d(n(expert(x)), main(x))` in evaluation mode.
pub fn distill_loss<T: Scalar>(
    x: &Tensor<T>,
    main: &Encoder<T>,
    expert: &Encoder<T>,
    n: &Projector<T>,
    dist: FeatureDistance,
) -> Result<f64> {
    let target = main.infer(x)?;
    let pred = n.infer(&expert.infer(x)?)?;
    Ok(dist.eval(&pred, &target)?.0)
}

/// Trains `expert` and `n` so that `n(expert(x))` regresses `main(x)`.
#[allow(clippy::too_many_arguments)]
pub fn distill_expert<T: Scalar>(
    main: &Encoder<T>,
    expert: &mut Encoder<T>,
    n: &mut Projector<T>,
    data: &LabeledDataset<T>,
    cfg: &StageConfig,
    epochs: usize,
    src: &mut BatchSource<'_>,
    task: usize,
    log: &mut MetricLog,
) -> Result<()> {
    let total = epochs * steps_per_epoch(data.len(), cfg.batch_size);
    let mut opt = cfg.optimizer.sgd::<T>();
    let mut step = 0;
    for _ in 0..epochs {
        for idx in epoch_batches(data.len(), cfg.batch_size, src.rng) {
            let lr = cfg.optimizer.lr_at(step, total);
            opt.lr = T::lit(lr);
            let x = src.view(data, &idx)?;
            let target = main.infer(&x)?;
            let (g, gtape) = expert.forward(&x, Mode::Train)?;
            let (p, ntape) = n.forward(&g, Mode::Train)?;
            let (loss, dp) = cfg.distance.eval(&p, &target)?;
            if !loss.is_finite() {
                return Err(CoreError::NonFinite { stage: Stage::Distillation.as_str().into(), step, lr, batch: idx.len() });
            }
            let dg = n.net.backward(&ntape, &dp)?;
            expert.net.backward_params(&gtape, &dg)?;
            opt.step(&mut [&mut expert.net, &mut n.net]);
            log.push(task, Stage::Distillation, step, loss, &[], lr);
            step += 1;
        }
    }
    Ok(())
}
