//! Knowledge integration: the main network learns the expert's features
//! through the adaptation projector while the retrospection projector keeps
//! it predictive of the previous main network.

use pocon_nn::{Mode, Network, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use super::config::StageConfig;
use crate::datastream::LabeledDataset;
use crate::error::{CoreError, Result};
use crate::models::{build_projector, Encoder, Projector, ProjectorSpec};
use crate::record::{MetricLog, Stage};
use crate::ssl_losses::FeatureDistance;
use crate::train::{epoch_batches, steps_per_epoch, BatchSource};

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct IntegrationLoss {
    pub total: f64,
    pub adaptation: f64,
    pub retrospection: f64,
}

/// Networks involved in integrating task `t`.
#[derive(Clone, Debug)]
pub struct TaskState<T> {
    pub t: usize,
    pub expert: Encoder<T>,
    pub main_prev: Option<Encoder<T>>,
    pub main: Encoder<T>,
    /// Adaptation projector: main features to expert features.
    pub n: Projector<T>,
    /// Retrospection projector: main features to previous main features.
    pub m: Option<Projector<T>>,
}

impl<T: Scalar> TaskState<T> {
    /// Freezes `expert` and `main_prev` and builds fresh adaptors.
    pub fn new(t: usize, expert: &Encoder<T>, main_prev: Option<&Encoder<T>>, main: Encoder<T>, seed: u64) -> Result<Self> {
        let n = build_projector(&ProjectorSpec::adaptation(main.feature_dim(), expert.feature_dim()), seed)?;
        let m = match main_prev {
            Some(_) => Some(build_projector(&ProjectorSpec::retrospection(main.feature_dim()), seed.wrapping_add(1))?),
            None => None,
        };
        Ok(Self { t, expert: expert.frozen_copy(), main_prev: main_prev.map(Encoder::frozen_copy), main, n, m })
    }

    fn trainable(&mut self) -> Vec<&mut Network<T>> {
        let mut nets = vec![&mut self.main.net, &mut self.n.net];
        if let Some(m) = self.m.as_mut() {
            nets.push(&mut m.net);
        }
        nets
    }

    /// Loss on `x` with gradients accumulated into main, n and m.
    pub fn loss(&mut self, x: &Tensor<T>, dist: FeatureDistance) -> Result<IntegrationLoss> {
        integration_loss(x, &self.expert, self.main_prev.as_ref(), &mut self.main, &mut self.n, self.m.as_mut(), dist)
    }

    /// One optimizer step on `x`.
    pub fn step(&mut self, x: &Tensor<T>, dist: FeatureDistance, opt: &mut pocon_nn::Sgd<T>) -> Result<IntegrationLoss> {
        let l = self.loss(x, dist)?;
        opt.step(&mut self.trainable());
        Ok(l)
    }
}

/// `d(n(main(x)), expert(x)) + d(m(main(x)), main_prev(x))`; the second term
/// is dropped without a previous main network. Gradients flow into `main`,
/// `n` and `m` only.
pub fn integration_loss<T: Scalar>(
    x: &Tensor<T>,
    expert: &Encoder<T>,
    main_prev: Option<&Encoder<T>>,
    main: &mut Encoder<T>,
    n: &mut Projector<T>,
    m: Option<&mut Projector<T>>,
    dist: FeatureDistance,
) -> Result<IntegrationLoss> {
    if !expert.net.is_frozen() || main_prev.is_some_and(|p| !p.net.is_frozen()) {
        return Err(CoreError::InvalidArgument("integration targets must be frozen".into()));
    }
    if n.spec.in_dim() != main.feature_dim() || n.spec.out_dim() != expert.feature_dim() {
        return Err(CoreError::InvalidArgument(format!(
            "adaptation projector maps {} -> {}, networks need {} -> {}",
            n.spec.in_dim(),
            n.spec.out_dim(),
            main.feature_dim(),
            expert.feature_dim()
        )));
    }
    let (f, tape) = main.forward(x, Mode::Train)?;
    let g = expert.infer(x)?;
    let (p, ntape) = n.forward(&f, Mode::Train)?;
    let (adaptation, dp) = dist.eval(&p, &g)?;
    let mut df = n.net.backward(&ntape, &dp)?;
    let mut retrospection = 0.0;
    match (main_prev, m) {
        (Some(prev), Some(m)) => {
            let target = prev.infer(x)?;
            let (q, mtape) = m.forward(&f, Mode::Train)?;
            let (r, dq) = dist.eval(&q, &target)?;
            retrospection = r;
            df.add_assign(&m.net.backward(&mtape, &dq)?)?;
        }
        (None, _) => {}
        (Some(_), None) => {
            return Err(CoreError::InvalidArgument("retrospection projector missing".into()));
        }
    }
    main.net.backward_params(&tape, &df)?;
    Ok(IntegrationLoss { total: adaptation + retrospection, adaptation, retrospection })
}

/// Runs the integration stage on `data` and checks afterwards that the
/// frozen networks did not change.
pub fn train_integration<T: Scalar>(
    state: &mut TaskState<T>,
    data: &LabeledDataset<T>,
    cfg: &StageConfig,
    epochs: usize,
    src: &mut BatchSource<'_>,
    log: &mut MetricLog,
) -> Result<()> {
    let expert_before = state.expert.state();
    let prev_before = state.main_prev.as_ref().map(Encoder::state);
    let total = epochs * steps_per_epoch(data.len(), cfg.batch_size);
    let mut opt = cfg.optimizer.sgd::<T>();
    let mut step = 0;
    for _ in 0..epochs {
        for idx in epoch_batches(data.len(), cfg.batch_size, src.rng) {
            let lr = cfg.optimizer.lr_at(step, total);
            opt.lr = T::lit(lr);
            let x = src.view(data, &idx)?;
            let l = state.step(&x, cfg.distance, &mut opt)?;
            if !l.total.is_finite() {
                return Err(CoreError::NonFinite { stage: Stage::Integration.as_str().into(), step, lr, batch: idx.len() });
            }
            log.push(
                state.t,
                Stage::Integration,
                step,
                l.total,
                &[("adaptation", l.adaptation), ("retrospection", l.retrospection)],
                lr,
            );
            step += 1;
        }
    }
    if state.expert.state() != expert_before {
        return Err(CoreError::FreezeViolation("expert".into()));
    }
    if state.main_prev.as_ref().map(Encoder::state) != prev_before {
        return Err(CoreError::FreezeViolation("main_prev".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_encoder, EncoderSpec};
    use pocon_nn::Adam;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn inputs(b: usize, seed: u64) -> Tensor<f64> {
        Tensor::randn(&[b, 3, 8, 8], &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn identity_is_realizable_when_all_networks_agree() {
        let enc = build_encoder::<f64>(&EncoderSpec::tiny_conv(2, 8), 0).unwrap();
        let mut state = TaskState::new(1, &enc, Some(&enc), enc.clone(), 3).unwrap();
        state.main.net.set_frozen(true);
        let x = inputs(32, 1);
        let mut opt = Adam::new(2e-3);
        let mut last = f64::INFINITY;
        for _ in 0..1500 {
            last = state.loss(&x, FeatureDistance::L2Sq).unwrap().total;
            opt.step(&mut [&mut state.n.net, &mut state.m.as_mut().unwrap().net]);
        }
        assert!(last < 1e-3, "loss floor {last}");
    }

    #[test]
    fn frozen_expert_receives_no_gradient() {
        let spec = EncoderSpec::tiny_conv(2, 8);
        let expert = build_encoder::<f64>(&spec, 0).unwrap();
        let main = build_encoder::<f64>(&spec, 1).unwrap();
        let mut state = TaskState::new(1, &expert, Some(&main), main.clone(), 3).unwrap();
        state.loss(&inputs(4, 2), FeatureDistance::L2Sq).unwrap();
        let mut zero = true;
        state.expert.net.visit_params_mut(&mut |_, p| zero &= p.grad.data().iter().all(|&g| g == 0.0));
        state.main_prev.as_mut().unwrap().net.visit_params_mut(&mut |_, p| zero &= p.grad.data().iter().all(|&g| g == 0.0));
        assert!(zero);
        assert!(state.main.net.grad_sq_norm() > 0.0);
    }

    #[test]
    fn main_gradient_matches_finite_differences() {
        let spec = EncoderSpec::tiny_conv(2, 4);
        let expert = build_encoder::<f64>(&spec, 0).unwrap();
        let prev = build_encoder::<f64>(&spec, 1).unwrap();
        let mut state = TaskState::new(1, &expert, Some(&prev), prev.clone(), 3).unwrap();
        // move main away from main_prev so both terms are active
        state.main.net.visit_params_mut(&mut |_, p| p.value.scale(1.1));
        let x = inputs(4, 5);
        state.loss(&x, FeatureDistance::L2Sq).unwrap();
        let mut grads = Vec::new();
        state.main.net.visit_params_mut(&mut |_, p| grads.push(p.grad.clone()));
        let eval = |s: &TaskState<f64>| {
            let mut c = s.clone();
            c.loss(&x, FeatureDistance::L2Sq).unwrap().total
        };
        let h = 1e-6;
        let mut checked = 0;
        for (pi, g) in grads.iter().enumerate() {
            for k in (0..g.numel()).step_by(7).take(4) {
                let shift = |s: &mut TaskState<f64>, d: f64| {
                    let mut i = 0;
                    s.main.net.visit_params_mut(&mut |_, p| {
                        if i == pi {
                            p.value.data_mut()[k] += d;
                        }
                        i += 1;
                    });
                };
                let mut plus = state.clone();
                shift(&mut plus, h);
                let mut minus = state.clone();
                shift(&mut minus, -h);
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = g.data()[k];
                let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-7);
                assert!(rel < 1e-3, "param {pi}[{k}]: fd {fd} vs {an}");
                checked += 1;
            }
        }
        assert!(checked > 10);
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let expert = build_encoder::<f64>(&EncoderSpec::tiny_conv(2, 8), 0).unwrap().frozen_copy();
        let mut main = build_encoder::<f64>(&EncoderSpec::tiny_conv(2, 4), 0).unwrap();
        let mut n = build_projector::<f64>(&ProjectorSpec::adaptation(4, 4), 0).unwrap();
        assert!(integration_loss(&inputs(2, 0), &expert, None, &mut main, &mut n, None, FeatureDistance::L2Sq).is_err());
    }
}
