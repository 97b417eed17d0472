//! Barlow Twins objective and the feature-regression losses used for
//! integration and by the regularized baselines.

use pocon_nn::{Mode, Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::models::Projector;

/// Clamp for column norms in the correlation denominator.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct CrossCorrMatrix<T> {
    /// `[d, d]` correlations.
    pub c: Tensor<T>,
    pub batch_size: usize,
    pub embedding_dim: usize,
}

/// What `cross_correlation_backward` needs from the forward pass.
#[derive(Clone, Debug)]
pub struct CorrCache<T> {
    a_hat: Tensor<T>,
    b_hat: Tensor<T>,
    norms_a: Vec<T>,
    norms_b: Vec<T>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub invariance: f64,
    pub redundancy: f64,
}

impl LossValue {
    pub fn scalar(total: f64) -> Self {
        Self { total, invariance: total, redundancy: 0.0 }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.invariance.is_finite() && self.redundancy.is_finite()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BarlowConfig {
    pub lambda_bt: f64,
    /// Subtract the batch mean of every embedding column first.
    pub center: bool,
}

impl Default for BarlowConfig {
    fn default() -> Self {
        Self { lambda_bt: 5e-3, center: true }
    }
}

fn check_same(a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>, what: &str) -> Result<()> {
    if a.ndim() != 2 || a.shape() != b.shape() {
        return Err(CoreError::InvalidArgument(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn normalize_columns<T: Scalar>(x: &Tensor<T>) -> (Tensor<T>, Vec<T>) {
    let (b, d) = (x.rows(), x.cols());
    let mut norms = vec![T::zero(); d];
    for r in 0..b {
        for (n, &v) in norms.iter_mut().zip(x.row(r)) {
            *n += v * v;
        }
    }
    let eps = T::lit(NORM_EPS);
    for n in &mut norms {
        *n = n.sqrt().max(eps);
    }
    let mut out = x.clone();
    for r in 0..b {
        for (v, &n) in out.row_mut(r).iter_mut().zip(&norms) {
            *v /= n;
        }
    }
    (out, norms)
}

fn normalize_columns_backward<T: Scalar>(x_hat: &Tensor<T>, norms: &[T], grad: &Tensor<T>) -> Tensor<T> {
    let (b, d) = (x_hat.rows(), x_hat.cols());
    let eps = T::lit(NORM_EPS);
    let mut dots = vec![T::zero(); d];
    for r in 0..b {
        for ((s, &h), &g) in dots.iter_mut().zip(x_hat.row(r)).zip(grad.row(r)) {
            *s += h * g;
        }
    }
    let mut out = grad.clone();
    for r in 0..b {
        let hr = x_hat.row(r);
        for (j, v) in out.row_mut(r).iter_mut().enumerate() {
            // a clamped norm is constant, so only the scaling contributes
            let proj = if norms[j] > eps { hr[j] * dots[j] } else { T::zero() };
            *v = (*v - proj) / norms[j];
        }
    }
    out
}

/// Subtracts the column means.
pub fn center_columns<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let mean = x.col_mean();
    let mut out = x.clone();
    for r in 0..out.rows() {
        for (v, &m) in out.row_mut(r).iter_mut().zip(&mean) {
            *v -= m;
        }
    }
    out
}

/// `C[i][j] = sum_b Za[b,i] Zb[b,j] / (|Za[:,i]| |Zb[:,j]|)`.
pub fn cross_correlation<T: Scalar>(za: &Tensor<T>, zb: &Tensor<T>) -> Result<(CrossCorrMatrix<T>, CorrCache<T>)> {
    check_same(za, zb, "cross_correlation")?;
    if za.rows() < 2 {
        return Err(CoreError::InvalidArgument(format!("cross_correlation needs batch >= 2, got {}", za.rows())));
    }
    let (a_hat, norms_a) = normalize_columns(za);
    let (b_hat, norms_b) = normalize_columns(zb);
    let c = a_hat.matmul(&b_hat, true, false)?;
    Ok((
        CrossCorrMatrix { c, batch_size: za.rows(), embedding_dim: za.cols() },
        CorrCache { a_hat, b_hat, norms_a, norms_b },
    ))
}

/// Gradients w.r.t. `Za` and `Zb` given `dL/dC`.
pub fn cross_correlation_backward<T: Scalar>(cache: &CorrCache<T>, dc: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let da_hat = cache.b_hat.matmul(dc, false, true)?;
    let db_hat = cache.a_hat.matmul(dc, false, false)?;
    Ok((
        normalize_columns_backward(&cache.a_hat, &cache.norms_a, &da_hat),
        normalize_columns_backward(&cache.b_hat, &cache.norms_b, &db_hat),
    ))
}

/// `sum_i (1 - C_ii)^2 + lambda * sum_{i != j} C_ij^2`.
pub fn barlow_loss<T: Scalar>(c: &CrossCorrMatrix<T>, lambda_bt: f64) -> LossValue {
    let d = c.embedding_dim;
    let (mut inv, mut red) = (0.0, 0.0);
    for i in 0..d {
        for (j, &v) in c.c.row(i).iter().enumerate() {
            let v = v.as_f64();
            if i == j {
                inv += (1.0 - v).powi(2);
            } else {
                red += v * v;
            }
        }
    }
    LossValue { total: inv + lambda_bt * red, invariance: inv, redundancy: red }
}

/// `dL/dC` of [`barlow_loss`].
pub fn barlow_loss_grad<T: Scalar>(c: &CrossCorrMatrix<T>, lambda_bt: f64) -> Tensor<T> {
    let d = c.embedding_dim;
    let two = T::lit(2.0);
    let lam = T::lit(lambda_bt);
    let mut g = c.c.clone();
    for i in 0..d {
        for (j, v) in g.row_mut(i).iter_mut().enumerate() {
            *v = if i == j { -two * (T::one() - *v) } else { two * lam * *v };
        }
    }
    g
}

/// Full Barlow Twins objective on two embedding batches with gradients.
pub fn barlow_twins<T: Scalar>(za: &Tensor<T>, zb: &Tensor<T>, cfg: &BarlowConfig) -> Result<(LossValue, Tensor<T>, Tensor<T>)> {
    if !(cfg.lambda_bt > 0.0) {
        return Err(CoreError::InvalidArgument(format!("lambda_bt must be positive, got {}", cfg.lambda_bt)));
    }
    let (ca, cb) = if cfg.center { (center_columns(za), center_columns(zb)) } else { (za.clone(), zb.clone()) };
    let (c, cache) = cross_correlation(&ca, &cb)?;
    let loss = barlow_loss(&c, cfg.lambda_bt);
    let (mut da, mut db) = cross_correlation_backward(&cache, &barlow_loss_grad(&c, cfg.lambda_bt))?;
    if cfg.center {
        da = center_columns(&da);
        db = center_columns(&db);
    }
    Ok((loss, da, db))
}

/// Distance used for the feature regressions of integration and D2eOP.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FeatureDistance {
    /// Squared error averaged over batch and feature dims.
    #[default]
    L2Sq,
    /// Squared Euclidean distance per sample, averaged over the batch.
    L2SqSum,
    /// Euclidean distance averaged over the batch.
    L2,
    /// One minus cosine similarity, averaged over the batch.
    Cosine,
}

impl FeatureDistance {
    /// Value and gradient w.r.t. `pred`.
    pub fn eval<T: Scalar>(&self, pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
        check_same(pred, target, "feature distance")?;
        let (b, d) = (pred.rows(), pred.cols());
        match self {
            Self::L2Sq | Self::L2SqSum => {
                let diff = pred.sub(target)?;
                let n = if *self == Self::L2Sq { (b * d) as f64 } else { b as f64 };
                let value = diff.sq_norm().as_f64() / n;
                let mut g = diff;
                g.scale(T::lit(2.0 / n));
                Ok((value, g))
            }
            Self::L2 => {
                let mut g = pred.sub(target)?;
                let mut value = 0.0;
                for r in 0..b {
                    let row = g.row_mut(r);
                    let norm = row.iter().map(|v| v.as_f64() * v.as_f64()).sum::<f64>().sqrt();
                    value += norm;
                    let s = T::lit(1.0 / (b as f64 * norm.max(NORM_EPS)));
                    row.iter_mut().for_each(|v| *v *= s);
                }
                Ok((value / b as f64, g))
            }
            Self::Cosine => {
                let (v, g) = neg_cosine(pred, target)?;
                Ok((1.0 + v, g))
            }
        }
    }
}

/// Mean negative cosine similarity between rows, and its gradient w.r.t. `pred`.
pub fn neg_cosine<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    check_same(pred, target, "negative cosine")?;
    let b = pred.rows();
    let mut g = Tensor::zeros(pred.shape());
    let mut value = 0.0;
    for r in 0..b {
        let (p, t) = (pred.row(r), target.row(r));
        let pn = p.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt().max(NORM_EPS);
        let tn = t.iter().map(|v| v.as_f64().powi(2)).sum::<f64>().sqrt().max(NORM_EPS);
        let dot: f64 = p.iter().zip(t).map(|(a, c)| a.as_f64() * c.as_f64()).sum();
        let cos = dot / (pn * tn);
        value -= cos;
        for ((gv, &pv), &tv) in g.row_mut(r).iter_mut().zip(p).zip(t) {
            let dcos = tv.as_f64() / (pn * tn) - cos * pv.as_f64() / (pn * pn);
            *gv = T::lit(-dcos / b as f64);
        }
    }
    Ok((value / b as f64, g))
}

/// PFR-style term: mean negative cosine between `predictor(features_now)`
/// and `features_past`. Returns the value and the gradient w.r.t.
/// `features_now`; predictor parameter gradients are accumulated.
pub fn pfr_regularizer<T: Scalar>(
    features_now: &Tensor<T>,
    features_past: &Tensor<T>,
    predictor: &mut Projector<T>,
) -> Result<(f64, Tensor<T>)> {
    if features_now.cols() != predictor.spec.in_dim() || features_past.cols() != predictor.spec.out_dim() {
        return Err(CoreError::InvalidArgument(format!(
            "pfr_regularizer: features {} -> {} but predictor maps {} -> {}",
            features_now.cols(),
            features_past.cols(),
            predictor.spec.in_dim(),
            predictor.spec.out_dim()
        )));
    }
    let (p, tape) = predictor.forward(features_now, Mode::Train)?;
    let (value, dp) = neg_cosine(&p, features_past)?;
    let dx = predictor.net.backward(&tape, &dp)?;
    Ok((value, dx))
}

/// CaSSLe-style term: Barlow loss between `predictor(z_now)` and `z_past`.
/// Returns the loss and the gradient w.r.t. `z_now`.
pub fn cassle_regularizer<T: Scalar>(
    z_now: &Tensor<T>,
    z_past: &Tensor<T>,
    predictor: &mut Projector<T>,
    cfg: &BarlowConfig,
) -> Result<(LossValue, Tensor<T>)> {
    if z_now.cols() != predictor.spec.in_dim() || z_past.cols() != predictor.spec.out_dim() {
        return Err(CoreError::InvalidArgument(format!(
            "cassle_regularizer: embeddings {} -> {} but predictor maps {} -> {}",
            z_now.cols(),
            z_past.cols(),
            predictor.spec.in_dim(),
            predictor.spec.out_dim()
        )));
    }
    let (p, tape) = predictor.forward(z_now, Mode::Train)?;
    let (loss, dp, _) = barlow_twins(&p, z_past, cfg)?;
    let dz = predictor.net.backward(&tape, &dp)?;
    Ok((loss, dz))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::ProjectorKind;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::randn(shape, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    // Independent reference: direct evaluation of the formula, no matmul.
    fn oracle_corr(za: &Tensor<f64>, zb: &Tensor<f64>) -> Vec<Vec<f64>> {
        let (b, d) = (za.rows(), za.cols());
        let norm = |z: &Tensor<f64>, j: usize| (0..b).map(|r| z.get2(r, j).powi(2)).sum::<f64>().sqrt();
        (0..d)
            .map(|i| {
                (0..d)
                    .map(|j| (0..b).map(|r| za.get2(r, i) * zb.get2(r, j)).sum::<f64>() / (norm(za, i) * norm(zb, j)))
                    .collect()
            })
            .collect()
    }

    fn oracle_loss(c: &[Vec<f64>], lam: f64) -> f64 {
        let mut s = 0.0;
        for (i, row) in c.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                s += if i == j { (1.0 - v).powi(2) } else { lam * v * v };
            }
        }
        s
    }

    #[test]
    fn orthonormal_columns_give_identity() {
        let z = t(&[4, 2], &[0.5, 0.5, 0.5, -0.5, 0.5, 0.5, 0.5, -0.5]);
        let (c, _) = cross_correlation(&z, &z).unwrap();
        assert!(c.c.max_abs_diff(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0])).unwrap() < 1e-12);
        assert!(barlow_loss(&c, 5e-3).total < 1e-20);
    }

    #[test]
    fn hand_computed_zero_correlation() {
        let (c, _) = cross_correlation(&t(&[2, 1], &[1.0, 1.0]), &t(&[2, 1], &[1.0, -1.0])).unwrap();
        assert!(c.c.data()[0].abs() < 1e-15);
    }

    #[test]
    fn anti_correlated_columns_give_minus_one() {
        let z = t(&[3, 2], &[1.0, -1.0, 2.0, -2.0, -0.5, 0.5]);
        let (c, _) = cross_correlation(&z, &z).unwrap();
        assert!((c.c.get2(0, 1) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn batch_of_one_is_rejected() {
        assert!(cross_correlation(&t(&[1, 2], &[1.0, 2.0]), &t(&[1, 2], &[1.0, 2.0])).is_err());
    }

    #[test]
    fn all_ones_matrix_loss() {
        let c = CrossCorrMatrix { c: t(&[2, 2], &[1.0; 4]), batch_size: 2, embedding_dim: 2 };
        let l = barlow_loss(&c, 1.0);
        assert_eq!((l.invariance, l.redundancy, l.total), (0.0, 2.0, 2.0));
    }

    #[test]
    fn zero_column_is_guarded() {
        let za = t(&[3, 2], &[0.0, 1.0, 0.0, 2.0, 0.0, 3.0]);
        let (c, cache) = cross_correlation(&za, &za).unwrap();
        assert!(c.c.is_finite());
        let (da, _) = cross_correlation_backward(&cache, &barlow_loss_grad(&c, 5e-3)).unwrap();
        assert!(da.is_finite());
    }

    fn loss_of(za: &Tensor<f64>, zb: &Tensor<f64>, cfg: &BarlowConfig) -> f64 {
        let (a, b) = if cfg.center { (center_columns(za), center_columns(zb)) } else { (za.clone(), zb.clone()) };
        oracle_loss(&oracle_corr(&a, &b), cfg.lambda_bt)
    }

    #[test]
    fn barlow_gradient_matches_finite_differences() {
        for center in [false, true] {
            let cfg = BarlowConfig { lambda_bt: 0.3, center };
            let za = rand(&[8, 4], 1);
            let zb = rand(&[8, 4], 2);
            let (l, da, db) = barlow_twins(&za, &zb, &cfg).unwrap();
            assert!((l.total - loss_of(&za, &zb, &cfg)).abs() < 1e-10);
            let h = 1e-6;
            for (which, grad) in [(0, &da), (1, &db)] {
                for k in 0..32 {
                    let (mut p, mut m) = ((za.clone(), zb.clone()), (za.clone(), zb.clone()));
                    if which == 0 {
                        p.0.data_mut()[k] += h;
                        m.0.data_mut()[k] -= h;
                    } else {
                        p.1.data_mut()[k] += h;
                        m.1.data_mut()[k] -= h;
                    }
                    let fd = (loss_of(&p.0, &p.1, &cfg) - loss_of(&m.0, &m.1, &cfg)) / (2.0 * h);
                    let an = grad.data()[k];
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
                    assert!(rel < 1e-4, "center={center} z{which}[{k}]: fd {fd} vs {an}");
                }
            }
        }
    }

    #[test]
    fn feature_distance_gradients_match_finite_differences() {
        let p = rand(&[5, 3], 3);
        let q = rand(&[5, 3], 4);
        for dist in [FeatureDistance::L2Sq, FeatureDistance::L2SqSum, FeatureDistance::L2, FeatureDistance::Cosine] {
            let (_, g) = dist.eval(&p, &q).unwrap();
            for k in 0..15 {
                let (mut a, mut b) = (p.clone(), p.clone());
                a.data_mut()[k] += 1e-6;
                b.data_mut()[k] -= 1e-6;
                let fd = (dist.eval(&a, &q).unwrap().0 - dist.eval(&b, &q).unwrap().0) / 2e-6;
                assert!((fd - g.data()[k]).abs() < 1e-6, "{dist:?}[{k}] {fd} vs {}", g.data()[k]);
            }
        }
    }

    #[test]
    fn feature_distance_values() {
        let p = t(&[2, 2], &[1.0, 0.0, 0.0, 2.0]);
        let q = t(&[2, 2], &[0.0, 0.0, 0.0, 0.0]);
        assert_eq!(FeatureDistance::L2Sq.eval(&p, &q).unwrap().0, 5.0 / 4.0);
        assert_eq!(FeatureDistance::L2SqSum.eval(&p, &q).unwrap().0, 5.0 / 2.0);
        assert_eq!(FeatureDistance::L2.eval(&p, &q).unwrap().0, 1.5);
        assert!(FeatureDistance::Cosine.eval(&p, &p).unwrap().0.abs() < 1e-12);
    }

    #[test]
    fn pfr_identity_self_similarity_and_orthogonality() {
        let mut pred = Projector::identity(ProjectorKind::Predictor, 3, 2);
        let f = t(&[2, 3], &[1.0, 2.0, 0.5, 0.0, 3.0, 1.0]);
        assert!((pfr_regularizer(&f, &f, &mut pred).unwrap().0 + 1.0).abs() < 1e-12);
        let f2 = t(&[2, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let g2 = t(&[2, 3], &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]);
        assert!(pfr_regularizer(&f2, &g2, &mut pred).unwrap().0.abs() < 1e-12);
        assert!(pfr_regularizer(&f2, &t(&[2, 2], &[0.0; 4]), &mut pred).is_err());
    }

    #[test]
    fn cassle_is_barlow_of_predicted_embeddings() {
        let mut pred = crate::models::build_projector::<f64>(&crate::models::ProjectorSpec::predictor(4), 3).unwrap();
        let cfg = BarlowConfig { lambda_bt: 5e-3, center: false };
        let zn = rand(&[6, 4], 5);
        let zp = rand(&[6, 4], 6);
        let (l, dz) = cassle_regularizer(&zn, &zp, &mut pred, &cfg).unwrap();
        let p = pred.forward(&zn, Mode::Train).unwrap().0;
        let (c, _) = cross_correlation(&p, &zp).unwrap();
        assert!((l.total - barlow_loss(&c, cfg.lambda_bt).total).abs() < 1e-12);
        assert!(l.total >= 0.0);
        assert_eq!(dz.shape(), zn.shape());
        // identity predictor and identical embeddings
        let mut id = Projector::identity(ProjectorKind::Predictor, 2, 1);
        let z = t(&[4, 2], &[0.5, 0.5, 0.5, -0.5, 0.5, 0.5, 0.5, -0.5]);
        assert!(cassle_regularizer(&z, &z, &mut id, &cfg).unwrap().0.total < 1e-20);
    }

    proptest! {
        #[test]
        fn correlation_properties(seed in any::<u64>(), b in 2usize..10, d in 1usize..6) {
            let za = rand(&[b, d], seed);
            let zb = rand(&[b, d], seed ^ 1);
            let (cab, _) = cross_correlation(&za, &zb).unwrap();
            let (cba, _) = cross_correlation(&zb, &za).unwrap();
            prop_assert!(cab.c.max_abs_diff(&cba.c.transpose2()).unwrap() < 1e-12);
            prop_assert!(cab.c.data().iter().all(|v| v.abs() <= 1.0 + 1e-5));
            let (caa, _) = cross_correlation(&za, &za).unwrap();
            for i in 0..d {
                prop_assert!((caa.c.get2(i, i) - 1.0).abs() < 1e-12);
            }
            let l = barlow_loss(&cab, 5e-3);
            prop_assert!(l.total >= 0.0 && l.invariance >= 0.0 && l.redundancy >= 0.0);
            // simultaneous permutation of embedding dims
            let perm: Vec<usize> = (0..d).rev().collect();
            let permute = |z: &Tensor<f64>| {
                let mut out = z.clone();
                for r in 0..b {
                    for (j, &p) in perm.iter().enumerate() {
                        out.row_mut(r)[j] = z.get2(r, p);
                    }
                }
                out
            };
            let (cp, _) = cross_correlation(&permute(&za), &permute(&zb)).unwrap();
            prop_assert!((barlow_loss(&cp, 5e-3).total - l.total).abs() < 1e-9);
        }
    }
}
