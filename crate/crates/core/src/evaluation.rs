//! Linear-probe evaluation, task-agnostic accuracy and the plasticity and
//! stability protocols.

use pocon_nn::{argmax_rows, softmax_cross_entropy, Adam, Layer, Linear, Mode, Network, Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datastream::{DataBundle, LabeledDataset, Normalization, TaskStream};
use crate::error::{CoreError, Result};
use crate::models::Encoder;
use crate::record::RunRecord;
use crate::train::epoch_batches;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub lr0: f64,
    /// LR multiplier of the first plateau, then of every later plateau.
    pub patience_factors: [f64; 2],
    pub max_drops: usize,
    pub patience_epochs: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { lr0: 5e-2, patience_factors: [0.3, 0.06], max_drops: 3, patience_epochs: 10, max_epochs: 100, batch_size: 256 }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) || self.patience_factors.iter().any(|f| !(*f > 0.0 && *f < 1.0)) {
            return Err(CoreError::InvalidArgument(format!("bad probe settings {self:?}")));
        }
        if self.max_epochs == 0 || self.batch_size == 0 || self.patience_epochs == 0 {
            return Err(CoreError::InvalidArgument("probe epochs, batch size and patience must be positive".into()));
        }
        Ok(())
    }
}

/// Linear classifier over standardized frozen features.
#[derive(Clone, Debug)]
pub struct LinearProbe<T> {
    pub net: Network<T>,
    pub mean: Vec<T>,
    pub std: Vec<T>,
    /// Class id of every output unit, ascending.
    pub classes: Vec<usize>,
    pub lr_history: Vec<f64>,
    pub best_val_accuracy: f64,
    pub epochs_run: usize,
}

impl<T: Scalar> LinearProbe<T> {
    fn standardize(&self, feats: &Tensor<T>) -> Tensor<T> {
        let mut out = feats.clone();
        for r in 0..out.rows() {
            for ((v, &m), &s) in out.row_mut(r).iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        out
    }

    /// Predicted class ids.
    pub fn predict(&self, feats: &Tensor<T>) -> Result<Vec<usize>> {
        let logits = self.net.infer(&self.standardize(feats))?;
        Ok(argmax_rows(&logits).into_iter().map(|i| self.classes[i]).collect())
    }

    pub fn accuracy(&self, feats: &Tensor<T>, labels: &[usize]) -> Result<f64> {
        if labels.is_empty() {
            return Ok(0.0);
        }
        let pred = self.predict(feats)?;
        Ok(pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64)
    }
}

/// Trains a probe on `(features, labels)` with Adam, dropping the LR on
/// validation plateaus, and returns the best-validation weights.
pub fn train_probe_on_features<T: Scalar>(
    train_x: &Tensor<T>,
    train_y: &[usize],
    val_x: &Tensor<T>,
    val_y: &[usize],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<LinearProbe<T>> {
    cfg.validate()?;
    if train_y.is_empty() {
        return Err(CoreError::InvalidArgument("linear probe needs labeled samples".into()));
    }
    let mut classes = train_y.to_vec();
    classes.sort_unstable();
    classes.dedup();
    let local: Vec<usize> = train_y.iter().map(|c| classes.binary_search(c).expect("present")).collect();
    let (n, d) = (train_x.rows(), train_x.cols());
    let mut mean = vec![T::zero(); d];
    let mut var = vec![T::zero(); d];
    for r in 0..n {
        for (m, &v) in mean.iter_mut().zip(train_x.row(r)) {
            *m += v;
        }
    }
    let nt = T::lit(n as f64);
    mean.iter_mut().for_each(|m| *m /= nt);
    for r in 0..n {
        for ((s, &v), &m) in var.iter_mut().zip(train_x.row(r)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std: Vec<T> = var.iter().map(|&s| (s / nt).sqrt().max(T::lit(1e-6))).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = LinearProbe {
        net: Network::new("probe", vec![Layer::Linear(Linear::new(d, classes.len(), &mut rng))]),
        mean,
        std,
        classes,
        lr_history: vec![cfg.lr0],
        best_val_accuracy: -1.0,
        epochs_run: 0,
    };
    let xs = probe.standardize(train_x);
    let (val_x, val_y) = if val_y.is_empty() { (train_x, train_y) } else { (val_x, val_y) };
    let mut opt = Adam::new(T::lit(cfg.lr0));
    let mut best = probe.net.clone();
    let mut stale = 0;
    let mut drops = 0;
    for epoch in 0..cfg.max_epochs {
        for idx in epoch_batches(n, cfg.batch_size, &mut rng) {
            let x = xs.select_rows(&idx);
            let y: Vec<usize> = idx.iter().map(|&i| local[i]).collect();
            let (logits, tape) = probe.net.forward(&x, Mode::Train)?;
            let (_, g) = softmax_cross_entropy(&logits, &y)?;
            probe.net.backward_params(&tape, &g)?;
            opt.step(&mut [&mut probe.net]);
        }
        probe.epochs_run = epoch + 1;
        let acc = probe.accuracy(val_x, val_y)?;
        if acc > probe.best_val_accuracy {
            probe.best_val_accuracy = acc;
            best = probe.net.clone();
            stale = 0;
        } else {
            stale += 1;
        }
        if stale >= cfg.patience_epochs {
            if drops == cfg.max_drops {
                break;
            }
            let factor = if drops == 0 { cfg.patience_factors[0] } else { cfg.patience_factors[1] };
            let lr = probe.lr_history.last().copied().unwrap_or(cfg.lr0) * factor;
            opt.lr = T::lit(lr);
            probe.lr_history.push(lr);
            drops += 1;
            stale = 0;
        }
    }
    probe.net = best;
    Ok(probe)
}

/// Backbone features of `data`, normalized but not augmented.
pub fn extract_features<T: Scalar>(encoder: &Encoder<T>, data: &LabeledDataset<T>, norm: &Normalization) -> Result<Tensor<T>> {
    encoder.infer(&norm.apply(&data.images)?)
}

/// Trains a probe on frozen features of `encoder`.
pub fn train_linear_probe<T: Scalar>(
    encoder: &Encoder<T>,
    train: &LabeledDataset<T>,
    val: &LabeledDataset<T>,
    norm: &Normalization,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<LinearProbe<T>> {
    if train.is_empty() {
        return Err(CoreError::InvalidArgument("linear probe needs labeled samples".into()));
    }
    let tx = extract_features(encoder, train, norm)?;
    let vx = if val.is_empty() { Tensor::zeros(&[0, tx.cols()]) } else { extract_features(encoder, val, norm)? };
    train_probe_on_features(&tx, &train.labels, &vx, &val.labels, cfg, seed)
}

/// Accuracy over all classes of `test` jointly, without task identity.
pub fn task_agnostic_accuracy<T: Scalar>(
    probe: &LinearProbe<T>,
    encoder: &Encoder<T>,
    test: &LabeledDataset<T>,
    norm: &Normalization,
) -> Result<f64> {
    probe.accuracy(&extract_features(encoder, test, norm)?, &test.labels)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityCurve {
    /// One-based index of the anchor task.
    pub anchor_task: usize,
    /// Accuracy on the anchor task's classes after tasks `anchor..=T`.
    pub accuracies: Vec<f64>,
}

/// Frozen features of every split for one checkpoint.
struct SplitFeatures<T> {
    train: Tensor<T>,
    val: Tensor<T>,
    test: Tensor<T>,
}

impl<T: Scalar> SplitFeatures<T> {
    fn new(encoder: &Encoder<T>, bundle: &DataBundle<T>) -> Result<Self> {
        let n = &bundle.normalization;
        Ok(Self {
            train: extract_features(encoder, &bundle.train, n)?,
            val: extract_features(encoder, &bundle.val, n)?,
            test: extract_features(encoder, &bundle.test, n)?,
        })
    }

    /// Probe trained on `classes` and tested on the same classes.
    fn probe_accuracy(&self, bundle: &DataBundle<T>, classes: &[usize], cfg: &ProbeConfig, seed: u64) -> Result<f64> {
        let pick = |ds: &LabeledDataset<T>, x: &Tensor<T>| {
            let idx: Vec<usize> = (0..ds.len()).filter(|&i| classes.contains(&ds.labels[i])).collect();
            let y: Vec<usize> = idx.iter().map(|&i| ds.labels[i]).collect();
            (x.select_rows(&idx), y)
        };
        let (tx, ty) = pick(&bundle.train, &self.train);
        let (vx, vy) = pick(&bundle.val, &self.val);
        let (sx, sy) = pick(&bundle.test, &self.test);
        train_probe_on_features(&tx, &ty, &vx, &vy, cfg, seed)?.accuracy(&sx, &sy)
    }
}

/// Evaluation settings shared by all protocols.
pub struct EvalContext<'a, T> {
    pub bundle: &'a DataBundle<T>,
    pub stream: &'a TaskStream,
    pub probe: &'a ProbeConfig,
    pub seed: u64,
}

/// Per task `t`: probe trained and tested on task `t` classes with the
/// encoder as of the end of task `t`.
pub fn plasticity_curve<T: Scalar>(run: &RunRecord<T>, ctx: &EvalContext<'_, T>) -> Result<Vec<f64>> {
    (0..run.num_checkpoints().min(ctx.stream.num_tasks()))
        .map(|t| {
            let feats = SplitFeatures::new(&run.encoder_at(t)?, ctx.bundle)?;
            feats.probe_accuracy(ctx.bundle, &ctx.stream.task_classes[t], ctx.probe, ctx.seed)
        })
        .collect()
}

/// Probe on the classes of task `anchor` (one-based) retrained after every
/// task from `anchor` on.
pub fn stability_curve<T: Scalar>(run: &RunRecord<T>, ctx: &EvalContext<'_, T>, anchor: usize) -> Result<StabilityCurve> {
    let tasks = run.num_checkpoints();
    if anchor == 0 || anchor > tasks {
        return Err(CoreError::InvalidArgument(format!("anchor task {anchor} outside 1..={tasks}")));
    }
    let classes = &ctx.stream.task_classes[anchor - 1];
    let accuracies = (anchor - 1..tasks)
        .map(|t| SplitFeatures::new(&run.encoder_at(t)?, ctx.bundle)?.probe_accuracy(ctx.bundle, classes, ctx.probe, ctx.seed))
        .collect::<Result<_>>()?;
    Ok(StabilityCurve { anchor_task: anchor, accuracies })
}

/// Task-agnostic accuracy of a probe on all classes after the last task.
pub fn final_accuracy<T: Scalar>(run: &RunRecord<T>, ctx: &EvalContext<'_, T>) -> Result<f64> {
    let feats = SplitFeatures::new(&run.final_encoder()?, ctx.bundle)?;
    let all: Vec<usize> = (0..ctx.bundle.num_classes()).collect();
    feats.probe_accuracy(ctx.bundle, &all, ctx.probe, ctx.seed)
}

/// All metrics of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub final_accuracy: f64,
    pub plasticity: Vec<f64>,
    pub stability: Vec<StabilityCurve>,
}

/// Computes the final accuracy, the plasticity curve and the stability
/// curves of `anchors`, extracting features once per checkpoint.
pub fn evaluate_run<T: Scalar>(run: &RunRecord<T>, ctx: &EvalContext<'_, T>, anchors: &[usize]) -> Result<EvalSummary> {
    let tasks = run.num_checkpoints();
    if tasks == 0 {
        return Err(CoreError::InvalidArgument("run has no checkpoints".into()));
    }
    for &a in anchors {
        if a == 0 || a > tasks {
            return Err(CoreError::InvalidArgument(format!("anchor task {a} outside 1..={tasks}")));
        }
    }
    let all: Vec<usize> = (0..ctx.bundle.num_classes()).collect();
    let mut plasticity = Vec::with_capacity(tasks);
    let mut stability: Vec<StabilityCurve> =
        anchors.iter().map(|&a| StabilityCurve { anchor_task: a, accuracies: Vec::new() }).collect();
    let mut final_acc = 0.0;
    for t in 0..tasks {
        let feats = SplitFeatures::new(&run.encoder_at(t)?, ctx.bundle)?;
        // runs on a single-task stream (joint) have no per-task classes
        let own = ctx.stream.task_classes.get(t).filter(|_| tasks == ctx.stream.num_tasks()).unwrap_or(&all);
        plasticity.push(feats.probe_accuracy(ctx.bundle, own, ctx.probe, ctx.seed)?);
        for curve in &mut stability {
            if t + 1 >= curve.anchor_task {
                let classes = &ctx.stream.task_classes[curve.anchor_task - 1];
                curve.accuracies.push(feats.probe_accuracy(ctx.bundle, classes, ctx.probe, ctx.seed)?);
            }
        }
        if t + 1 == tasks {
            final_acc = feats.probe_accuracy(ctx.bundle, &all, ctx.probe, ctx.seed)?;
        }
    }
    Ok(EvalSummary { final_accuracy: final_acc, plasticity, stability })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{build_encoder, EncoderSpec};

    fn separable(n_per: usize, seed: u64) -> (Tensor<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Tensor::randn(&[3 * n_per, 4], &mut rng);
        let mut y = Vec::new();
        for r in 0..3 * n_per {
            let c = r % 3;
            x.row_mut(r)[c] += 10.0;
            y.push(c);
        }
        (x, y)
    }

    #[test]
    fn separable_features_reach_full_accuracy() {
        let (x, y) = separable(30, 0);
        let (vx, vy) = separable(10, 1);
        let p = train_probe_on_features(&x, &y, &vx, &vy, &ProbeConfig::default(), 0).unwrap();
        assert_eq!(p.accuracy(&vx, &vy).unwrap(), 1.0);
    }

    #[test]
    fn lr_drops_follow_patience_scheme() {
        // labels independent of features: validation never stops fluctuating
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::randn(&[60, 3], &mut rng);
        let y: Vec<usize> = (0..60).map(|i| (i * 7 + i / 3) % 2).collect();
        let cfg = ProbeConfig { patience_epochs: 2, max_epochs: 200, ..Default::default() };
        let p = train_probe_on_features(&x, &y, &x.select_rows(&[0, 1, 2, 3]), &y[..4], &cfg, 0).unwrap();
        let h = &p.lr_history;
        assert!(h.len() <= 4);
        assert!(h.windows(2).all(|w| w[1] < w[0]));
        if h.len() >= 2 {
            assert!((h[1] - 0.3 * h[0]).abs() < 1e-15);
        }
        if h.len() >= 3 {
            assert!((h[2] - 0.06 * h[1]).abs() < 1e-15);
        }
        assert!(p.epochs_run < 200);
    }

    #[test]
    fn constant_probe_scores_one_over_k() {
        let (x, y) = separable(10, 2);
        let mut p = train_probe_on_features(&x, &y, &x, &y, &ProbeConfig::default(), 0).unwrap();
        // zero weights, bias favouring class 1
        p.net.visit_params_mut(&mut |name, prm| {
            prm.value.fill(0.0);
            if name.ends_with("bias") {
                prm.value.data_mut()[1] = 1.0;
            }
        });
        assert!((p.accuracy(&x, &y).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let pred = p.predict(&x).unwrap();
        let brute = pred.iter().zip(&y).filter(|(a, b)| a == b).count() as f64 / y.len() as f64;
        assert_eq!(p.accuracy(&x, &y).unwrap(), brute);
    }

    #[test]
    fn empty_training_set_is_an_error() {
        let x = Tensor::<f64>::zeros(&[0, 2]);
        assert!(train_probe_on_features(&x, &[], &x, &[], &ProbeConfig::default(), 0).is_err());
    }

    #[test]
    fn probing_leaves_encoder_untouched() {
        let spec = crate::datastream::SyntheticSpec { num_classes: 2, train_per_class: 8, test_per_class: 4, ..Default::default() };
        let (train, test) = crate::datastream::synthetic_dataset::<f32>(&spec).unwrap();
        let enc = build_encoder::<f32>(&EncoderSpec::tiny_conv(2, 8), 0).unwrap();
        let before = enc.state();
        let norm = train.channel_stats();
        let p = train_linear_probe(&enc, &train, &test, &norm, &ProbeConfig::default(), 0).unwrap();
        let acc = task_agnostic_accuracy(&p, &enc, &test, &norm).unwrap();
        assert!((0.0..=1.0).contains(&acc));
        assert_eq!(enc.state(), before);
    }
}
