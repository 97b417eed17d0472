//! Reference learners sharing the SSL loop: fine-tuning, joint training and
//! the PFR-style and CaSSLe-style regularized variants.

use pocon_nn::{Network, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datastream::{LabeledDataset, Normalization, TaskStream};
use crate::error::{CoreError, Result};
use crate::models::{build_projector, snapshot, Encoder, Projector, ProjectorSpec, SslModel};
use crate::pocon::PoconConfig;
use crate::record::{RunRecord, Stage};
use crate::seeding::SeedBank;
use crate::ssl_losses::{cassle_regularizer, pfr_regularizer, BarlowConfig};
use crate::train::{train_ssl, BatchSource, SslRegularizer, SslStage};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub pfr_lambda: f64,
    pub cassle_lambda: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self { pfr_lambda: 25.0, cassle_lambda: 1.0 }
    }
}

/// Runs `f`, which accumulates gradients into `proj`, and scales only the
/// newly accumulated part by `weight`.
fn weighted<T: Scalar, R>(proj: &mut Projector<T>, weight: f64, f: impl FnOnce(&mut Projector<T>) -> R) -> R {
    let mut old = Vec::new();
    proj.net.visit_params_mut(&mut |_, p| old.push(p.grad.clone()));
    let out = f(proj);
    let w = T::lit(weight);
    let mut i = 0;
    proj.net.visit_params_mut(&mut |_, p| {
        for (g, &o) in p.grad.data_mut().iter_mut().zip(old[i].data()) {
            *g = o + w * (*g - o);
        }
        i += 1;
    });
    out
}

/// Predicts the frozen previous encoder's features from the current ones.
pub struct PfrRegularizer<T> {
    pub past: Encoder<T>,
    pub predictor: Projector<T>,
    pub lambda: f64,
}

impl<T: Scalar> SslRegularizer<T> for PfrRegularizer<T> {
    fn name(&self) -> &'static str {
        "pfr"
    }

    fn apply(
        &mut self,
        x: &Tensor<T>,
        features: &Tensor<T>,
        _: &Tensor<T>,
        weight: f64,
    ) -> Result<(f64, Option<Tensor<T>>, Option<Tensor<T>>)> {
        let past = self.past.infer(x)?;
        let w = weight * self.lambda;
        let (v, mut g) = weighted(&mut self.predictor, w, |p| pfr_regularizer(features, &past, p))?;
        g.scale(T::lit(w));
        Ok((w * v, Some(g), None))
    }

    fn trainable(&mut self) -> Vec<&mut Network<T>> {
        vec![&mut self.predictor.net]
    }
}

/// Barlow loss between predicted current embeddings and the frozen previous
/// model's embeddings.
pub struct CassleRegularizer<T> {
    pub past: SslModel<T>,
    pub predictor: Projector<T>,
    pub barlow: BarlowConfig,
    pub lambda: f64,
}

impl<T: Scalar> SslRegularizer<T> for CassleRegularizer<T> {
    fn name(&self) -> &'static str {
        "cassle"
    }

    fn apply(
        &mut self,
        x: &Tensor<T>,
        _: &Tensor<T>,
        embeddings: &Tensor<T>,
        weight: f64,
    ) -> Result<(f64, Option<Tensor<T>>, Option<Tensor<T>>)> {
        let past = self.past.embed(x)?;
        let w = weight * self.lambda;
        let barlow = self.barlow;
        let (l, mut g) = weighted(&mut self.predictor, w, |p| cassle_regularizer(embeddings, &past, p, &barlow))?;
        g.scale(T::lit(w));
        Ok((w * l.total, None, Some(g)))
    }

    fn trainable(&mut self) -> Vec<&mut Network<T>> {
        vec![&mut self.predictor.net]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Regularization {
    None,
    Pfr,
    Cassle,
}

#[allow(clippy::too_many_arguments)]
fn run_sequential<T: Scalar>(
    method: &str,
    reg_kind: Regularization,
    train: &LabeledDataset<T>,
    stream: &TaskStream,
    cfg: &PoconConfig,
    bl: &BaselineConfig,
    normalization: &Normalization,
    seeds: &SeedBank,
) -> Result<RunRecord<T>> {
    cfg.validate()?;
    let mut rec = RunRecord::new(method, cfg.model.main.clone(), stream.manifest().hash());
    let mut rng = ChaCha8Rng::seed_from_u64(seeds.augmentation());
    let mut src = BatchSource { aug: &cfg.aug, normalization, rng: &mut rng };
    let mut model = SslModel::<T>::new(&cfg.model.main, cfg.model.projector_dim, seeds.model())?;
    for t in 0..stream.num_tasks() {
        let data = stream.task_data(t, train);
        let stage = SslStage {
            method,
            task: t,
            stage: Stage::Ssl,
            epochs: cfg.stages.stage1_epochs,
            batch_size: cfg.stages.batch_size,
            optim: &cfg.stages.optimizer,
            barlow: &cfg.stages.barlow,
        };
        let pred_seed = seeds.derive(&format!("predictor/{t}"));
        let result = match (reg_kind, t) {
            (Regularization::None, _) | (_, 0) => train_ssl(&mut model, &data, &stage, &mut src, None, &mut rec.log),
            (Regularization::Pfr, _) => {
                let mut reg = PfrRegularizer {
                    past: model.encoder.frozen_copy(),
                    predictor: build_projector(&ProjectorSpec::predictor(model.encoder.feature_dim()), pred_seed)?,
                    lambda: bl.pfr_lambda,
                };
                let before = reg.past.state();
                train_ssl(&mut model, &data, &stage, &mut src, Some(&mut reg), &mut rec.log)?;
                if reg.past.state() != before {
                    return Err(CoreError::FreezeViolation("previous encoder".into()).in_task(t));
                }
                Ok(())
            }
            (Regularization::Cassle, _) => {
                let mut past = model.clone();
                past.encoder.net.set_frozen(true);
                past.projector.net.set_frozen(true);
                let mut reg = CassleRegularizer {
                    past,
                    predictor: build_projector(&ProjectorSpec::predictor(cfg.model.projector_dim), pred_seed)?,
                    barlow: cfg.stages.barlow,
                    lambda: bl.cassle_lambda,
                };
                train_ssl(&mut model, &data, &stage, &mut src, Some(&mut reg), &mut rec.log)
            }
        };
        result.map_err(|e| e.in_task(t))?;
        rec.counters.train_expert += 1;
        rec.event(t, Stage::Ssl, format!("{} samples", data.len()));
        rec.checkpoints.push(snapshot(&model.encoder, t as u64));
    }
    Ok(rec)
}

/// Plain sequential SSL with no forgetting mitigation.
pub fn run_finetune<T: Scalar>(
    train: &LabeledDataset<T>,
    stream: &TaskStream,
    cfg: &PoconConfig,
    normalization: &Normalization,
    seeds: &SeedBank,
) -> Result<RunRecord<T>> {
    run_sequential("ft", Regularization::None, train, stream, cfg, &BaselineConfig::default(), normalization, seeds)
}

pub fn run_pfr<T: Scalar>(
    train: &LabeledDataset<T>,
    stream: &TaskStream,
    cfg: &PoconConfig,
    bl: &BaselineConfig,
    normalization: &Normalization,
    seeds: &SeedBank,
) -> Result<RunRecord<T>> {
    run_sequential("pfr", Regularization::Pfr, train, stream, cfg, bl, normalization, seeds)
}

pub fn run_cassle<T: Scalar>(
    train: &LabeledDataset<T>,
    stream: &TaskStream,
    cfg: &PoconConfig,
    bl: &BaselineConfig,
    normalization: &Normalization,
    seeds: &SeedBank,
) -> Result<RunRecord<T>> {
    run_sequential("cassle", Regularization::Cassle, train, stream, cfg, bl, normalization, seeds)
}

/// Single SSL run on the union of all tasks.
pub fn run_joint<T: Scalar>(
    train: &LabeledDataset<T>,
    stream: &TaskStream,
    cfg: &PoconConfig,
    normalization: &Normalization,
    seeds: &SeedBank,
) -> Result<RunRecord<T>> {
    let joint = TaskStream {
        class_order: stream.class_order.clone(),
        task_classes: vec![stream.class_order.clone()],
        seed: stream.seed,
        tasks_with_extra_class: 0,
    };
    let mut rec = run_sequential("joint", Regularization::None, train, &joint, cfg, &BaselineConfig::default(), normalization, seeds)?;
    rec.stream_hash = stream.manifest().hash();
    Ok(rec)
}
