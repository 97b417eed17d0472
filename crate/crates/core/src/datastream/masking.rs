use pocon_nn::Scalar;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dataset::LabeledDataset;
use crate::error::{CoreError, Result};

/// A dataset where only the samples flagged in `labeled_mask` keep their label.
#[derive(Clone, Debug)]
pub struct SemiSupDataset<T> {
    pub base: LabeledDataset<T>,
    pub labeled_mask: Vec<bool>,
    pub fraction: f64,
    pub seed: u64,
}

impl<T: Scalar> SemiSupDataset<T> {
    pub fn labeled(&self) -> LabeledDataset<T> {
        self.base.subset(&self.labeled_indices())
    }

    pub fn unlabeled(&self) -> LabeledDataset<T> {
        let idx: Vec<usize> = (0..self.base.len()).filter(|&i| !self.labeled_mask[i]).collect();
        self.base.subset(&idx)
    }

    pub fn labeled_indices(&self) -> Vec<usize> {
        (0..self.base.len()).filter(|&i| self.labeled_mask[i]).collect()
    }

    /// Restriction to the given classes.
    pub fn filter_classes(&self, classes: &[usize]) -> Self {
        let idx: Vec<usize> = (0..self.base.len())
            .filter(|&i| classes.contains(&self.base.labels[i]))
            .collect();
        Self {
            base: self.base.subset(&idx),
            labeled_mask: idx.iter().map(|&i| self.labeled_mask[i]).collect(),
            fraction: self.fraction,
            seed: self.seed,
        }
    }
}

/// Stratified label masking: every class keeps
/// `max(1, round(fraction * class_count))` labels, chosen by `seed`.
pub fn mask_labels<T: Scalar>(dataset: &LabeledDataset<T>, fraction: f64, seed: u64) -> Result<SemiSupDataset<T>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CoreError::InvalidArgument(format!("label fraction must be in (0, 1], got {fraction}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mask = vec![false; dataset.len()];
    for (_, mut idx) in dataset.indices_by_class() {
        idx.shuffle(&mut rng);
        let k = ((fraction * idx.len() as f64).round() as usize).clamp(1, idx.len());
        for &i in &idx[..k] {
            mask[i] = true;
        }
    }
    Ok(SemiSupDataset { base: dataset.clone(), labeled_mask: mask, fraction, seed })
}
