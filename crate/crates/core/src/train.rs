//! Shared SSL training loop used by the expert stage and the baselines.

use pocon_nn::{cosine_lr, Mode, Network, Scalar, Sgd, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datastream::{augment_batch, two_view_augment, AugConfig, LabeledDataset, Normalization};
use crate::error::{CoreError, Result};
use crate::models::SslModel;
use crate::record::{MetricLog, Stage};
use crate::ssl_losses::{barlow_twins, BarlowConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub schedule: LrSchedule,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 0.01, momentum: 0.9, weight_decay: 1e-4, schedule: LrSchedule::Cosine }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(CoreError::InvalidArgument(format!("bad optimizer settings {self:?}")));
        }
        Ok(())
    }

    pub fn sgd<T: Scalar>(&self) -> Sgd<T> {
        Sgd::new(T::lit(self.lr), T::lit(self.momentum), T::lit(self.weight_decay))
    }

    pub fn lr_at(&self, step: usize, total: usize) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => cosine_lr(self.lr, step, total),
        }
    }
}

/// Shuffled index batches for one epoch. The trailing partial batch is
/// dropped unless it would be the only one.
pub fn epoch_batches<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    if n <= batch {
        return vec![idx];
    }
    idx.chunks_exact(batch).map(<[usize]>::to_vec).collect()
}

pub fn steps_per_epoch(n: usize, batch: usize) -> usize {
    if n <= batch {
        1
    } else {
        n / batch
    }
}

/// Data access shared by all training stages: augmentation settings,
/// normalization and the augmentation rng.
pub struct BatchSource<'a> {
    pub aug: &'a AugConfig,
    pub normalization: &'a Normalization,
    pub rng: &'a mut ChaCha8Rng,
}

impl BatchSource<'_> {
    /// Two normalized augmented views of `data[idx]`.
    pub fn views<T: Scalar>(&mut self, data: &LabeledDataset<T>, idx: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
        let raw = data.images.select_rows(idx);
        let pair = two_view_augment(&raw, self.aug, self.rng)?;
        Ok((self.normalization.apply(&pair.view_a)?, self.normalization.apply(&pair.view_b)?))
    }

    /// One normalized augmented view of `data[idx]`.
    pub fn view<T: Scalar>(&mut self, data: &LabeledDataset<T>, idx: &[usize]) -> Result<Tensor<T>> {
        let raw = data.images.select_rows(idx);
        self.normalization.apply(&augment_batch(&raw, self.aug, 0, self.rng)?)
    }
}

/// Additional loss term on top of the Barlow objective, evaluated per view.
pub trait SslRegularizer<T: Scalar> {
    fn name(&self) -> &'static str;

    /// Given the normalized input batch, its backbone features and its
    /// projector embeddings, returns the value and the gradients w.r.t.
    /// features and embeddings, all multiplied by `weight`. Gradients of the
    /// regularizer's own networks are accumulated with the same weight.
    fn apply(
        &mut self,
        x: &Tensor<T>,
        features: &Tensor<T>,
        embeddings: &Tensor<T>,
        weight: f64,
    ) -> Result<(f64, Option<Tensor<T>>, Option<Tensor<T>>)>;

    /// Trainable networks owned by the regularizer.
    fn trainable(&mut self) -> Vec<&mut Network<T>>;
}

pub struct SslStage<'a> {
    pub method: &'a str,
    pub task: usize,
    pub stage: Stage,
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: &'a OptimConfig,
    pub barlow: &'a BarlowConfig,
}

/// One Barlow Twins step on a view pair with optional regularization.
/// Gradients are accumulated, not applied. Returns (total, barlow, reg).
pub fn ssl_gradients<'r, T: Scalar>(
    model: &mut SslModel<T>,
    xa: &Tensor<T>,
    xb: &Tensor<T>,
    barlow: &BarlowConfig,
    reg: Option<&mut (dyn SslRegularizer<T> + 'r)>,
) -> Result<(f64, f64, f64)> {
    let (fa, ta) = model.encoder.forward(xa, Mode::Train)?;
    let (fb, tb) = model.encoder.forward(xb, Mode::Train)?;
    let (za, pa) = model.projector.forward(&fa, Mode::Train)?;
    let (zb, pb) = model.projector.forward(&fb, Mode::Train)?;
    let (loss, dza, dzb) = barlow_twins(&za, &zb, barlow)?;
    let (mut dza, mut dzb) = (dza, dzb);
    let mut dfa_extra = None;
    let mut dfb_extra = None;
    let mut reg_value = 0.0;
    if let Some(reg) = reg {
        for (x, f, z, dz, df) in [(xa, &fa, &za, &mut dza, &mut dfa_extra), (xb, &fb, &zb, &mut dzb, &mut dfb_extra)] {
            let (v, gf, gz) = reg.apply(x, f, z, 0.5)?;
            reg_value += v;
            if let Some(gz) = gz {
                dz.add_assign(&gz)?;
            }
            *df = gf;
        }
    }
    let mut dfa = model.projector.net.backward(&pa, &dza)?;
    let mut dfb = model.projector.net.backward(&pb, &dzb)?;
    if let Some(g) = dfa_extra {
        dfa.add_assign(&g)?;
    }
    if let Some(g) = dfb_extra {
        dfb.add_assign(&g)?;
    }
    model.encoder.net.backward_params(&ta, &dfa)?;
    model.encoder.net.backward_params(&tb, &dfb)?;
    Ok((loss.total + reg_value, loss.total, reg_value))
}

/// Trains `model` with the Barlow objective (plus `reg`) on `data`.
pub fn train_ssl<'r, T: Scalar>(
    model: &mut SslModel<T>,
    data: &LabeledDataset<T>,
    stage: &SslStage<'_>,
    src: &mut BatchSource<'_>,
    mut reg: Option<&mut (dyn SslRegularizer<T> + 'r)>,
    log: &mut MetricLog,
) -> Result<()> {
    if data.len() < 2 {
        return Err(CoreError::InvalidArgument(format!("{} needs at least 2 samples", stage.stage.as_str())));
    }
    let per_epoch = steps_per_epoch(data.len(), stage.batch_size);
    let total = stage.epochs * per_epoch;
    let mut opt = stage.optim.sgd::<T>();
    let mut step = 0;
    for _ in 0..stage.epochs {
        for idx in epoch_batches(data.len(), stage.batch_size, src.rng) {
            let lr = stage.optim.lr_at(step, total);
            opt.lr = T::lit(lr);
            let (xa, xb) = src.views(data, &idx)?;
            let (total_loss, bt, rv) = ssl_gradients(model, &xa, &xb, stage.barlow, reg.as_deref_mut())?;
            if !total_loss.is_finite() {
                return Err(CoreError::NonFinite { stage: stage.stage.as_str().into(), step, lr, batch: idx.len() });
            }
            match reg.as_deref_mut() {
                Some(r) => {
                    let name = r.name();
                    let mut nets: Vec<&mut Network<T>> = vec![&mut model.encoder.net, &mut model.projector.net];
                    nets.extend(r.trainable());
                    opt.step(&mut nets);
                    log.push(stage.task, stage.stage, step, total_loss, &[("barlow", bt), (name, rv)], lr);
                }
                None => {
                    opt.step(&mut [&mut model.encoder.net, &mut model.projector.net]);
                    log.push(stage.task, stage.stage, step, total_loss, &[("barlow", bt)], lr);
                }
            }
            step += 1;
        }
    }
    Ok(())
}
