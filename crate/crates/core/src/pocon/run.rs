use pocon_nn::Scalar;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::PoconConfig;
use super::init::init_expert;
use super::integration::{train_integration, TaskState};
use crate::datastream::{LabeledDataset, Normalization, TaskStream};
use crate::error::Result;
use crate::models::{build_encoder, copy_params, snapshot, Encoder, SslModel};
use crate::record::{MetricLog, RunRecord, Stage};
use crate::seeding::SeedBank;
use crate::train::{train_ssl, BatchSource, SslStage};

/// Expert SSL training on one task; no regularization of any kind.
pub fn train_expert<T: Scalar>(
    expert: &mut SslModel<T>,
    data: &LabeledDataset<T>,
    cfg: &PoconConfig,
    task: usize,
    src: &mut BatchSource<'_>,
    log: &mut MetricLog,
) -> Result<()> {
    let stage = SslStage {
        method: "pocon",
        task,
        stage: Stage::Expert,
        epochs: cfg.stages.stage1_epochs,
        batch_size: cfg.stages.batch_size,
        optim: &cfg.stages.optimizer,
        barlow: &cfg.stages.barlow,
    };
    train_ssl(expert, data, &stage, src, None, log)
}

/// Main network for the first task: a copy of the expert when the
/// architectures match, otherwise a fresh network.
pub fn first_main<T: Scalar>(cfg: &PoconConfig, expert: &Encoder<T>, seed: u64) -> Result<Encoder<T>> {
    let mut main = build_encoder(&cfg.model.main, seed)?;
    if cfg.model.homogeneous() {
        copy_params(expert, &mut main)?;
    }
    Ok(main)
}

/// Runs expert training, integration and expert re-initialization for every
/// task of `stream`. Checkpoints hold the main network after each task.
pub fn run_pocon<T: Scalar>(
    train: &LabeledDataset<T>,
    stream: &TaskStream,
    cfg: &PoconConfig,
    normalization: &Normalization,
    seeds: &SeedBank,
) -> Result<RunRecord<T>> {
    cfg.validate()?;
    let mut rec = RunRecord::new("pocon", cfg.model.main.clone(), stream.manifest().hash());
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.augmentation());
    let mut src = BatchSource { aug: &cfg.aug, normalization, rng: &mut rng };
    let expert_spec = cfg.model.expert_spec().clone();
    let mut expert = SslModel::<T>::new(&expert_spec, cfg.model.projector_dim, seeds.model())?;
    let mut main: Option<Encoder<T>> = None;
    rec.event(0, Stage::ExpertInit, "random");
    for t in 0..stream.num_tasks() {
        let data = stream.task_data(t, train);
        (|| -> Result<()> {
            train_expert(&mut expert, &data, cfg, t, &mut src, &mut rec.log)?;
            rec.counters.train_expert += 1;
            rec.event(t, Stage::Expert, format!("{} samples", data.len()));

            let adaptor_seed = seeds.derive(&format!("adaptors/{t}"));
            let start = match &main {
                Some(m) => m.clone(),
                None => first_main(cfg, &expert.encoder, seeds.derive("main"))?,
            };
            let mut state = TaskState::new(t, &expert.encoder, main.as_ref(), start, adaptor_seed)?;
            train_integration(&mut state, &data, &cfg.stages, cfg.stages.stage2_epochs, &mut src, &mut rec.log)?;
            rec.counters.train_integration += 1;
            rec.event(t, Stage::Integration, if t == 0 { "adaptation only" } else { "adaptation + retrospection" });
            rec.checkpoints.push(snapshot(&state.main, t as u64));
            let new_main = state.main;

            if t + 1 < stream.num_tasks() {
                let out = init_expert(
                    cfg.stages.init_strategy,
                    &new_main,
                    &expert.encoder,
                    &expert_spec,
                    &data,
                    &cfg.stages,
                    &mut src,
                    seeds.derive(&format!("expert/{}", t + 1)),
                    t + 1,
                    &mut rec.log,
                )?;
                expert.encoder = out.expert;
                rec.counters.init_expert += 1;
                let detail = match (out.distill_initial, out.distill_final) {
                    (Some(a), Some(b)) => format!("{} ({a:.4} -> {b:.4})", cfg.stages.init_strategy.name()),
                    _ => cfg.stages.init_strategy.name().to_string(),
                };
                rec.event(t + 1, Stage::ExpertInit, detail);
            }
            main = Some(new_main);
            Ok(())
        })()
        .map_err(|e| e.in_task(t))?;
    }
    Ok(rec)
}
