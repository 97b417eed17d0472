//! Nearest-prototype classification on top of a continually learned encoder,
//! with one-pass refinement from unlabeled data and optional semantic drift
//! compensation of old prototypes.

use std::collections::BTreeMap;

use pocon_nn::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::datastream::{LabeledDataset, Normalization, SemiSupDataset, TaskStream};
use crate::error::{CoreError, Result};
use crate::models::Encoder;
use crate::record::RunRecord;

/// Weight sum below which a prototype is left uncompensated.
pub const MIN_DRIFT_WEIGHT: f64 = 1e-12;

/// Rows used when estimating the default drift bandwidth.
const SIGMA_SAMPLE: usize = 512;

/// Anything that maps an image batch to feature rows.
pub trait FeatureMap<T: Scalar> {
    fn features(&self, images: &Tensor<T>) -> Result<Tensor<T>>;
}

/// Normalizes images and runs a frozen encoder.
pub struct EncoderMap<'a, T> {
    pub encoder: &'a Encoder<T>,
    pub normalization: &'a Normalization,
}

impl<T: Scalar> FeatureMap<T> for EncoderMap<'_, T> {
    fn features(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.encoder.infer(&self.normalization.apply(images)?)
    }
}

impl<T: Scalar, F: Fn(&Tensor<T>) -> Result<Tensor<T>>> FeatureMap<T> for F {
    fn features(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self(images)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub prototypes: BTreeMap<usize, Vec<f64>>,
    /// Unlabeled samples assigned in the last refinement.
    pub assign_counts: BTreeMap<usize, usize>,
    pub task_of_class: BTreeMap<usize, usize>,
    labeled_sums: BTreeMap<usize, Vec<f64>>,
    labeled_counts: BTreeMap<usize, usize>,
}

impl PrototypeSet {
    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.prototypes.values().next().map(Vec::len)
    }

    /// Adds the classes of `other`, replacing any already present.
    pub fn merge(&mut self, other: PrototypeSet) {
        self.prototypes.extend(other.prototypes);
        self.assign_counts.extend(other.assign_counts);
        self.task_of_class.extend(other.task_of_class);
        self.labeled_sums.extend(other.labeled_sums);
        self.labeled_counts.extend(other.labeled_counts);
    }

    fn labeled_mean(&self, class: usize) -> Vec<f64> {
        let n = self.labeled_counts[&class] as f64;
        self.labeled_sums[&class].iter().map(|s| s / n).collect()
    }
}

fn rows_f64<T: Scalar>(x: &Tensor<T>) -> Vec<Vec<f64>> {
    (0..x.rows()).map(|r| x.row(r).iter().map(|v| v.as_f64()).collect()).collect()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Class-mean prototypes from labeled features.
pub fn prototypes_from_features<T: Scalar>(
    features: &Tensor<T>,
    labels: &[usize],
    classes: &[usize],
    task: usize,
) -> Result<PrototypeSet> {
    if features.rows() != labels.len() {
        return Err(CoreError::InvalidArgument(format!("{} feature rows for {} labels", features.rows(), labels.len())));
    }
    let d = features.cols();
    let mut set = PrototypeSet::default();
    for &c in classes {
        set.labeled_sums.insert(c, vec![0.0; d]);
        set.labeled_counts.insert(c, 0);
    }
    for (r, &y) in labels.iter().enumerate() {
        if let Some(sum) = set.labeled_sums.get_mut(&y) {
            for (s, v) in sum.iter_mut().zip(features.row(r)) {
                *s += v.as_f64();
            }
            *set.labeled_counts.get_mut(&y).unwrap() += 1;
        }
    }
    for &c in classes {
        if set.labeled_counts[&c] == 0 {
            return Err(CoreError::InvalidArgument(format!("class {c} has no labeled samples")));
        }
        let mean = set.labeled_mean(c);
        set.prototypes.insert(c, mean);
        set.assign_counts.insert(c, 0);
        set.task_of_class.insert(c, task);
    }
    Ok(set)
}

/// Prototypes of `classes` as the mean feature of their labeled samples.
pub fn init_prototypes<T: Scalar>(
    map: &impl FeatureMap<T>,
    labeled: &LabeledDataset<T>,
    classes: &[usize],
    task: usize,
) -> Result<PrototypeSet> {
    let feats = map.features(&labeled.images)?;
    prototypes_from_features(&feats, &labeled.labels, classes, task)
}

/// Assigns every unlabeled row to its nearest prototype among `classes`,
/// then resets each prototype to the mean of its labeled samples and the
/// rows assigned to it. Repeated `passes` times.
pub fn refine_with_features<T: Scalar>(
    protos: &PrototypeSet,
    unlabeled: &Tensor<T>,
    classes: &[usize],
    passes: usize,
) -> Result<PrototypeSet> {
    if protos.is_empty() {
        return Err(CoreError::InvalidArgument("no prototypes to refine".into()));
    }
    if let Some(&c) = classes.iter().find(|c| !protos.labeled_counts.contains_key(c)) {
        return Err(CoreError::InvalidArgument(format!("class {c} has no labeled prototype")));
    }
    let mut out = protos.clone();
    if unlabeled.rows() == 0 || classes.is_empty() {
        return Ok(out);
    }
    let rows = rows_f64(unlabeled);
    let mut candidates = classes.to_vec();
    candidates.sort_unstable();
    candidates.dedup();
    for _ in 0..passes {
        let mut sums: BTreeMap<usize, Vec<f64>> = candidates.iter().map(|&c| (c, out.labeled_sums[&c].clone())).collect();
        let mut counts: BTreeMap<usize, usize> = candidates.iter().map(|&c| (c, 0)).collect();
        for row in &rows {
            let c = nearest(candidates.iter().map(|c| (*c, &out.prototypes[c])), row);
            sums.get_mut(&c).unwrap().iter_mut().zip(row).for_each(|(s, v)| *s += v);
            *counts.get_mut(&c).unwrap() += 1;
        }
        for &c in &candidates {
            let n = (out.labeled_counts[&c] + counts[&c]) as f64;
            out.prototypes.insert(c, sums[&c].iter().map(|s| s / n).collect());
            out.assign_counts.insert(c, counts[&c]);
        }
    }
    Ok(out)
}

pub fn refine_prototypes<T: Scalar>(
    protos: &PrototypeSet,
    map: &impl FeatureMap<T>,
    unlabeled: &LabeledDataset<T>,
    classes: &[usize],
    passes: usize,
) -> Result<PrototypeSet> {
    if unlabeled.is_empty() {
        return Ok(protos.clone());
    }
    refine_with_features(protos, &map.features(&unlabeled.images)?, classes, passes)
}

/// Median pairwise Euclidean distance over the first rows of `x`.
pub fn median_pairwise_distance<T: Scalar>(x: &Tensor<T>) -> f64 {
    let rows = rows_f64(x);
    let rows = &rows[..rows.len().min(SIGMA_SAMPLE)];
    let mut d: Vec<f64> = Vec::with_capacity(rows.len() * rows.len() / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push(sq_dist(&rows[i], &rows[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    let mid = d.len() / 2;
    let (_, m, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    *m
}

/// Shifts every prototype by the Gaussian-weighted mean feature drift of
/// nearby samples. `sigma` defaults to the median pairwise distance of
/// `prev`.
pub fn sdc_with_features<T: Scalar>(
    protos: &PrototypeSet,
    prev: &Tensor<T>,
    now: &Tensor<T>,
    sigma: Option<f64>,
) -> Result<PrototypeSet> {
    if prev.shape() != now.shape() {
        return Err(CoreError::InvalidArgument(format!("feature shapes {:?} and {:?} differ", prev.shape(), now.shape())));
    }
    let sigma = sigma.unwrap_or_else(|| median_pairwise_distance(prev));
    if !(sigma > 0.0) {
        return Err(CoreError::InvalidArgument(format!("drift bandwidth must be positive, got {sigma}")));
    }
    let (p, q) = (rows_f64(prev), rows_f64(now));
    let mut out = protos.clone();
    for (class, proto) in out.prototypes.iter_mut() {
        let mut total = 0.0;
        let mut drift = vec![0.0; proto.len()];
        for (a, b) in p.iter().zip(&q) {
            let w = (-sq_dist(a, proto) / (2.0 * sigma * sigma)).exp();
            total += w;
            for ((d, x), y) in drift.iter_mut().zip(a).zip(b) {
                *d += w * (y - x);
            }
        }
        if total < MIN_DRIFT_WEIGHT {
            log::warn!("prototype of class {class} has no nearby samples; left uncompensated");
            continue;
        }
        for (v, d) in proto.iter_mut().zip(&drift) {
            *v += d / total;
        }
    }
    Ok(out)
}

pub fn sdc_compensate<T: Scalar>(
    protos: &PrototypeSet,
    prev: &impl FeatureMap<T>,
    now: &impl FeatureMap<T>,
    data: &LabeledDataset<T>,
    sigma: Option<f64>,
) -> Result<PrototypeSet> {
    sdc_with_features(protos, &prev.features(&data.images)?, &now.features(&data.images)?, sigma)
}

fn nearest<'a>(protos: impl Iterator<Item = (usize, &'a Vec<f64>)>, x: &[f64]) -> usize {
    let mut best = (usize::MAX, f64::INFINITY);
    for (c, p) in protos {
        let d = sq_dist(p, x);
        // ascending ids, strict comparison: ties keep the smaller id
        if d < best.1 || best.0 == usize::MAX {
            best = (c, d);
        }
    }
    best.0
}

/// Nearest-prototype class of every feature row.
pub fn classify_features<T: Scalar>(protos: &PrototypeSet, features: &Tensor<T>) -> Result<Vec<usize>> {
    if protos.is_empty() {
        return Err(CoreError::InvalidArgument("no prototypes".into()));
    }
    if protos.feature_dim() != Some(features.cols()) {
        return Err(CoreError::InvalidArgument(format!(
            "features have {} dims, prototypes {:?}",
            features.cols(),
            protos.feature_dim()
        )));
    }
    Ok(rows_f64(features).iter().map(|r| nearest(protos.prototypes.iter().map(|(c, p)| (*c, p)), r)).collect())
}

pub fn classify_nearest<T: Scalar>(protos: &PrototypeSet, map: &impl FeatureMap<T>, x: &Tensor<T>) -> Result<Vec<usize>> {
    classify_features(protos, &map.features(x)?)
}

/// Fraction of correctly classified samples of `data`.
pub fn prototype_accuracy<T: Scalar>(protos: &PrototypeSet, map: &impl FeatureMap<T>, data: &LabeledDataset<T>) -> Result<f64> {
    if data.is_empty() {
        return Err(CoreError::InvalidArgument("empty evaluation set".into()));
    }
    let pred = classify_nearest(protos, map, &data.images)?;
    Ok(pred.iter().zip(&data.labels).filter(|(p, y)| p == y).count() as f64 / data.len() as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriftCompensation {
    #[default]
    None,
    Sdc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SemiSupConfig {
    pub label_fraction: f64,
    pub refine_passes: usize,
    pub compensation: DriftCompensation,
    /// Drift bandwidth; the median pairwise feature distance when unset.
    pub sigma: Option<f64>,
}

impl Default for SemiSupConfig {
    fn default() -> Self {
        Self { label_fraction: 0.05, refine_passes: 1, compensation: DriftCompensation::None, sigma: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SemiSupResult {
    /// Accuracy on the test samples of all classes seen so far, after each task.
    pub seen_accuracy: Vec<f64>,
    pub final_accuracy: f64,
    pub prototypes: PrototypeSet,
}

/// Replays the checkpoints of `run`: old prototypes are optionally
/// compensated for the drift between consecutive checkpoints, then the
/// current task's prototypes are built from its labeled samples and refined
/// with its unlabeled ones.
pub fn run_semisup<T: Scalar>(
    run: &RunRecord<T>,
    stream: &TaskStream,
    data: &SemiSupDataset<T>,
    test: &LabeledDataset<T>,
    normalization: &Normalization,
    cfg: &SemiSupConfig,
) -> Result<SemiSupResult> {
    if run.num_checkpoints() != stream.num_tasks() {
        return Err(CoreError::InvalidArgument(format!(
            "{} checkpoints for {} tasks",
            run.num_checkpoints(),
            stream.num_tasks()
        )));
    }
    let labeled = data.labeled();
    let unlabeled = data.unlabeled();
    let mut protos = PrototypeSet::default();
    let mut prev: Option<Encoder<T>> = None;
    let mut seen_accuracy = Vec::new();
    for t in 0..stream.num_tasks() {
        let classes = &stream.task_classes[t];
        let enc = run.encoder_at(t)?;
        let now = EncoderMap { encoder: &enc, normalization };
        if let (Some(p), DriftCompensation::Sdc) = (&prev, cfg.compensation) {
            if !protos.is_empty() {
                let before = EncoderMap { encoder: p, normalization };
                let task_all = stream.task_data(t, &data.base);
                protos = sdc_compensate(&protos, &before, &now, &task_all, cfg.sigma)?;
            }
        }
        let fresh = init_prototypes(&now, &stream.task_data(t, &labeled), classes, t).map_err(|e| e.in_task(t))?;
        let fresh = refine_prototypes(&fresh, &now, &stream.task_data(t, &unlabeled), classes, cfg.refine_passes)?;
        protos.merge(fresh);
        let seen = test.filter_classes(&stream.seen_classes(t));
        seen_accuracy.push(prototype_accuracy(&protos, &now, &seen)?);
        prev = Some(enc);
    }
    let final_accuracy = *seen_accuracy.last().unwrap_or(&0.0);
    Ok(SemiSupResult { seen_accuracy, final_accuracy, prototypes: protos })
}

#[cfg(test)]
mod tests {
    use super::*;
    use pocon_nn::tensor::standard_normal;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_f64(&[rows.len(), rows[0].len()], &flat).unwrap()
    }

    #[test]
    fn init_is_labeled_mean() {
        let f = t(&[&[1.0, 2.0], &[-1.0, -2.0], &[3.0, 0.0]]);
        let p = prototypes_from_features(&f, &[0, 0, 1], &[0, 1], 0).unwrap();
        assert_eq!(p.prototypes[&0], vec![0.0, 0.0]);
        assert_eq!(p.prototypes[&1], vec![3.0, 0.0]);
        assert!(prototypes_from_features(&f, &[0, 0, 0], &[0, 1], 0).is_err());
    }

    #[test]
    fn refine_matches_brute_force_and_keeps_unassigned() {
        let f = t(&[&[0.0, 0.0], &[10.0, 0.0], &[0.0, 50.0]]);
        let p = prototypes_from_features(&f, &[0, 1, 2], &[0, 1, 2], 0).unwrap();
        let u = t(&[&[1.0, 0.0], &[2.0, 1.0], &[9.0, 0.0]]);
        let r = refine_with_features(&p, &u, &[0, 1, 2], 1).unwrap();
        assert_eq!(r.prototypes[&0], vec![1.0, 1.0 / 3.0]);
        assert_eq!(r.prototypes[&1], vec![9.5, 0.0]);
        assert_eq!(r.prototypes[&2], vec![0.0, 50.0]);
        assert_eq!(r.assign_counts[&2], 0);
        let empty = Tensor::<f64>::zeros(&[0, 2]);
        assert_eq!(refine_with_features(&p, &empty, &[0, 1, 2], 1).unwrap(), p);
    }

    #[test]
    fn nearest_ties_pick_smaller_id() {
        let f = t(&[&[1.0, 0.0], &[-1.0, 0.0]]);
        let p = prototypes_from_features(&f, &[3, 1], &[1, 3], 0).unwrap();
        assert_eq!(classify_features(&p, &t(&[&[0.0, 5.0], &[1.0, 0.0]])).unwrap(), vec![1, 3]);
    }

    #[test]
    fn identical_encoders_leave_prototypes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x: Vec<f64> = (0..40).map(|_| standard_normal(&mut rng)).collect();
        let f = Tensor::<f64>::from_f64(&[20, 2], &x).unwrap();
        let p = prototypes_from_features(&f, &[0; 20], &[0], 0).unwrap();
        assert_eq!(sdc_with_features(&p, &f, &f, None).unwrap(), p);
    }

    #[test]
    fn far_prototypes_are_left_alone() {
        let f = t(&[&[0.0, 0.0], &[1.0, 0.0]]);
        let moved = t(&[&[5.0, 0.0], &[6.0, 0.0]]);
        let p = prototypes_from_features(&t(&[&[1e6, 0.0]]), &[0], &[0], 0).unwrap();
        assert_eq!(sdc_with_features(&p, &f, &moved, Some(1.0)).unwrap(), p);
    }
}
