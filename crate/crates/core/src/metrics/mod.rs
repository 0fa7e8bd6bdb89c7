//! Inception Score and Frechet distance over the features of a pluggable
//! classifier.

mod extractor;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use extractor::{extract_features, train_extractor, ExtractorConfig, ExtractorReport, FeatureExtractor, GlyphClassifier};

pub const DEFAULT_SPLITS: usize = 10;

/// Rows of a [`ClassProbabilities`] must sum to one within this tolerance.
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureSource {
    Real,
    Generated,
}

/// n x d feature matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    features: DMatrix<f64>,
    pub source: FeatureSource,
}

impl FeatureBatch {
    pub fn new(rows: &[Vec<f64>], source: FeatureSource) -> Result<Self> {
        let d = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::Shape("feature rows differ in length".into()));
        }
        Self::from_matrix(DMatrix::from_fn(rows.len(), d, |i, j| rows[i][j]), source)
    }

    pub fn from_matrix(features: DMatrix<f64>, source: FeatureSource) -> Result<Self> {
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidFeatures("non-finite feature value".into()));
        }
        Ok(Self { features, source })
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.features
    }
}

/// n x K matrix of class posteriors, one simplex row per image.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassProbabilities {
    probs: DMatrix<f64>,
}

impl ClassProbabilities {
    pub fn new(rows: &[Vec<f64>]) -> Result<Self> {
        let k = rows.first().map_or(0, Vec::len);
        if k == 0 {
            return Err(Error::InvalidDistribution("no classes".into()));
        }
        for (i, r) in rows.iter().enumerate() {
            if r.len() != k {
                return Err(Error::InvalidDistribution(format!("row {i} has {} classes, expected {k}", r.len())));
            }
            if r.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
                return Err(Error::InvalidDistribution(format!("row {i} has a negative or non-finite entry")));
            }
            let sum: f64 = r.iter().sum();
            if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
                return Err(Error::InvalidDistribution(format!("row {i} sums to {sum}")));
            }
        }
        Ok(Self {
            probs: DMatrix::from_fn(rows.len(), k, |i, j| rows[i][j]),
        })
    }

    pub fn n(&self) -> usize {
        self.probs.nrows()
    }

    pub fn n_classes(&self) -> usize {
        self.probs.ncols()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.probs
    }
}

/// Contiguous split boundaries; the first `n % k` splits get one extra row.
fn split_ranges(n: usize, k: usize) -> Vec<std::ops::Range<usize>> {
    let (base, extra) = (n / k, n % k);
    let mut start = 0;
    (0..k)
        .map(|i| {
            let len = base + usize::from(i < extra);
            let r = start..start + len;
            start += len;
            r
        })
        .collect()
}

/// Mean and population standard deviation over splits of
/// `exp(mean_i KL(p(y|x_i) || p(y)))`, with `p(y)` each split's marginal.
pub fn inception_score(probs: &ClassProbabilities, n_splits: usize) -> Result<(f64, f64)> {
    let n = probs.n();
    if n_splits == 0 || n < n_splits {
        return Err(Error::InvalidParameter(format!("{n} rows cannot form {n_splits} splits")));
    }
    let p = probs.matrix();
    let scores: Vec<f64> = split_ranges(n, n_splits)
        .into_iter()
        .map(|range| {
            let rows = p.rows(range.start, range.len());
            let marginal = rows.row_mean();
            let mut kl = 0.0;
            for row in rows.row_iter() {
                for (q, m) in row.iter().zip(marginal.iter()) {
                    if *q > 0.0 {
                        kl += q * (q / m).ln();
                    }
                }
            }
            (kl / range.len() as f64).exp()
        })
        .collect();
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / scores.len() as f64;
    Ok((mean, var.sqrt()))
}

/// Sample mean and unbiased covariance of a feature set.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
    pub n: usize,
}

impl GaussianStats {
    pub fn fit(batch: &FeatureBatch) -> Result<Self> {
        let n = batch.n();
        if n < 2 {
            return Err(Error::InvalidFeatures(format!("{n} samples cannot estimate a covariance")));
        }
        let x = batch.matrix();
        let mean = x.row_mean().transpose();
        let centered = DMatrix::from_fn(n, x.ncols(), |i, j| x[(i, j)] - mean[j]);
        let cov = centered.transpose() * &centered / (n as f64 - 1.0);
        Ok(Self { mean, cov, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrechetReport {
    pub distance: f64,
    pub n_real: usize,
    pub n_fake: usize,
    pub dim: usize,
    /// Negative eigenvalues set to zero while taking matrix square roots.
    pub clamped_eigenvalues: usize,
    /// Sum of their magnitudes.
    pub clamp_magnitude: f64,
}

impl FrechetReport {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "metric = fid\ndistance = {:.6}\nn_real = {}\nn_fake = {}\ndim = {}\nclamped_eigenvalues = {}\nclamp_magnitude = {:.3e}\n",
            self.distance, self.n_real, self.n_fake, self.dim, self.clamped_eigenvalues, self.clamp_magnitude
        );
        if self.n_real.min(self.n_fake) < self.dim {
            s.push_str("warning = fewer samples than feature dimensions\n");
        }
        s
    }
}

/// Eigendecomposition of the symmetric part of `m` with negative eigenvalues
/// clamped to zero: returns (eigenvalues, eigenvectors, clamped count,
/// clamped magnitude).
fn clamped_eigen(m: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>, usize, f64) {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let (mut count, mut magnitude) = (0, 0.0);
    let values = eig.eigenvalues.map(|v| {
        if v < 0.0 {
            count += 1;
            magnitude += -v;
            0.0
        } else {
            v
        }
    });
    (values, eig.eigenvectors, count, magnitude)
}

/// `||mu_r - mu_f||^2 + Tr(S_r + S_f - 2 (S_r S_f)^(1/2))`. The trace of the
/// square root is taken as `Tr((A S_f A)^(1/2))` with `A = S_r^(1/2)`, which
/// has the same eigenvalues and stays symmetric.
pub fn frechet_from_stats(real: &GaussianStats, fake: &GaussianStats) -> Result<FrechetReport> {
    let d = real.mean.len();
    if fake.mean.len() != d {
        return Err(Error::Shape(format!("feature dimensions differ: {d} vs {}", fake.mean.len())));
    }
    let (values, vectors, c1, m1) = clamped_eigen(&real.cov);
    let sqrt_real = &vectors * DMatrix::from_diagonal(&values.map(f64::sqrt)) * vectors.transpose();
    let inner = &sqrt_real * &fake.cov * &sqrt_real;
    let (inner_values, _, c2, m2) = clamped_eigen(&inner);
    let trace_sqrt: f64 = inner_values.iter().map(|v| v.sqrt()).sum();
    let diff = (&real.mean - &fake.mean).norm_squared();
    let distance = diff + real.cov.trace() + fake.cov.trace() - 2.0 * trace_sqrt;
    if c1 + c2 > 0 {
        log::debug!("frechet distance clamped {} eigenvalues, magnitude {:.3e}", c1 + c2, m1 + m2);
    }
    Ok(FrechetReport {
        distance: distance.max(0.0),
        n_real: real.n,
        n_fake: fake.n,
        dim: d,
        clamped_eigenvalues: c1 + c2,
        clamp_magnitude: m1 + m2,
    })
}

pub fn frechet_report(real: &FeatureBatch, fake: &FeatureBatch) -> Result<FrechetReport> {
    if real.dim() != fake.dim() {
        return Err(Error::Shape(format!("feature dimensions differ: {} vs {}", real.dim(), fake.dim())));
    }
    if real.n().min(fake.n()) < real.dim() {
        log::warn!("frechet distance from {} / {} samples in {} dimensions", real.n(), fake.n(), real.dim());
    }
    frechet_from_stats(&GaussianStats::fit(real)?, &GaussianStats::fit(fake)?)
}

pub fn frechet_distance(real: &FeatureBatch, fake: &FeatureBatch) -> Result<f64> {
    Ok(frechet_report(real, fake)?.distance)
}

/// Structured text for an Inception Score evaluation.
pub fn inception_report_text(mean: f64, std: f64, n: usize, n_classes: usize, n_splits: usize) -> String {
    format!("metric = is\nmean = {mean:.6}\nstd = {std:.6}\nn = {n}\nclasses = {n_classes}\nsplits = {n_splits}\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn random_simplex(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<Vec<f64>> {
        (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 1e-3).collect();
                let s: f64 = raw.iter().sum();
                raw.into_iter().map(|v| v / s).collect()
            })
            .collect()
    }

    fn gaussian_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|_| rng.sample(StandardNormal)).collect()).collect()
    }

    #[test]
    fn uniform_rows_score_one() {
        let rows = vec![vec![0.25; 4]; 20];
        let (mean, std) = inception_score(&ClassProbabilities::new(&rows).unwrap(), 4).unwrap();
        assert_eq!(mean, 1.0);
        assert_eq!(std, 0.0);
    }

    #[test]
    fn distinct_one_hot_rows_score_class_count() {
        let n = 12;
        let rows: Vec<Vec<f64>> = (0..n).map(|i| (0..n).map(|j| f64::from(u8::from(i == j))).collect()).collect();
        let (mean, _) = inception_score(&ClassProbabilities::new(&rows).unwrap(), 1).unwrap();
        assert_relative_eq!(mean, n as f64, max_relative = 1e-12);
    }

    #[test]
    fn matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows = random_simplex(&mut rng, 100, 10);
        let (mean, std) = inception_score(&ClassProbabilities::new(&rows).unwrap(), 10).unwrap();
        let mut scores = Vec::new();
        for s in 0..10 {
            let chunk = &rows[s * 10..(s + 1) * 10];
            let mut marginal = [0.0; 10];
            for r in chunk {
                for j in 0..10 {
                    marginal[j] += r[j] / 10.0;
                }
            }
            let mut total = 0.0;
            for r in chunk {
                for j in 0..10 {
                    total += r[j] * (r[j].ln() - marginal[j].ln());
                }
            }
            scores.push((total / 10.0).exp());
        }
        let m = scores.iter().sum::<f64>() / 10.0;
        let sd = (scores.iter().map(|s| (s - m) * (s - m)).sum::<f64>() / 10.0).sqrt();
        assert_relative_eq!(mean, m, max_relative = 1e-12);
        assert_relative_eq!(std, sd, max_relative = 1e-9);
    }

    #[test]
    fn rejects_invalid_inputs() {
        assert!(matches!(ClassProbabilities::new(&[vec![0.5, 0.6]]), Err(Error::InvalidDistribution(_))));
        assert!(matches!(ClassProbabilities::new(&[vec![1.5, -0.5]]), Err(Error::InvalidDistribution(_))));
        assert!(matches!(ClassProbabilities::new(&[vec![1.0], vec![0.5, 0.5]]), Err(Error::InvalidDistribution(_))));
        let p = ClassProbabilities::new(&[vec![1.0, 0.0]]).unwrap();
        assert!(matches!(inception_score(&p, 2), Err(Error::InvalidParameter(_))));
        assert!(matches!(inception_score(&p, 0), Err(Error::InvalidParameter(_))));
        assert!(matches!(FeatureBatch::new(&[vec![f64::NAN]], FeatureSource::Real), Err(Error::InvalidFeatures(_))));
        let one = FeatureBatch::new(&[vec![1.0]], FeatureSource::Real).unwrap();
        assert!(matches!(frechet_distance(&one, &one), Err(Error::InvalidFeatures(_))));
        let a = FeatureBatch::new(&[vec![1.0], vec![2.0]], FeatureSource::Real).unwrap();
        let b = FeatureBatch::new(&[vec![1.0, 0.0], vec![2.0, 1.0]], FeatureSource::Generated).unwrap();
        assert!(matches!(frechet_distance(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn split_ranges_cover_rows() {
        let r = split_ranges(23, 10);
        assert_eq!(r.iter().map(|r| r.len()).collect::<Vec<_>>(), vec![3, 3, 3, 2, 2, 2, 2, 2, 2, 2]);
        assert_eq!(r.last().unwrap().end, 23);
    }

    #[test]
    fn identical_batches_have_zero_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = FeatureBatch::new(&gaussian_rows(&mut rng, 200, 8), FeatureSource::Real).unwrap();
        assert!(frechet_distance(&b, &b).unwrap() <= 1e-6);
    }

    #[test]
    fn shifted_gaussian_distance_is_squared_shift() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 100_000;
        let real = gaussian_rows(&mut rng, n, 4);
        let mut fake = gaussian_rows(&mut rng, n, 4);
        for r in &mut fake {
            r[0] += 1.0;
        }
        let d = frechet_distance(&FeatureBatch::new(&real, FeatureSource::Real).unwrap(), &FeatureBatch::new(&fake, FeatureSource::Generated).unwrap()).unwrap();
        assert!((d - 1.0).abs() < 0.05, "distance {d}");
    }

    #[test]
    fn diagonal_covariances_match_closed_form() {
        let stats = |mean: [f64; 3], var: [f64; 3]| GaussianStats {
            mean: DVector::from_row_slice(&mean),
            cov: DMatrix::from_diagonal(&DVector::from_row_slice(&var)),
            n: 10,
        };
        let a = stats([0.0, 1.0, -2.0], [4.0, 1.0, 0.25]);
        let b = stats([1.0, 1.0, 0.0], [1.0, 9.0, 0.25]);
        // sum_j (sigma_a - sigma_b)^2 + |dmu|^2 = (1 + 4 + 0) + (1 + 0 + 4)
        let d = frechet_from_stats(&a, &b).unwrap().distance;
        assert!((d - 10.0).abs() <= 1e-8, "distance {d}");
        assert_eq!(frechet_from_stats(&a, &b).unwrap().clamped_eigenvalues, 0);
    }

    #[test]
    fn report_text_lists_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = FeatureBatch::new(&gaussian_rows(&mut rng, 3, 5), FeatureSource::Real).unwrap();
        let text = frechet_report(&a, &a).unwrap().to_text();
        assert!(text.contains("n_real = 3"));
        assert!(text.contains("clamped_eigenvalues = "));
        assert!(text.contains("warning"));
    }

    fn random_rotation(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
        let m = DMatrix::from_fn(d, d, |_, _| rng.sample(StandardNormal));
        m.qr().q()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn inception_score_is_between_one_and_class_count(seed in 0u64..1000, k in 2usize..8, splits in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<f64>> = random_simplex(&mut rng, 20, k)
                .into_iter()
                .map(|r| if rng.random::<f64>() < 0.3 { let mut h = vec![0.0; k]; h[rng.random_range(0..k)] = 1.0; h } else { r })
                .collect();
            let (mean, _) = inception_score(&ClassProbabilities::new(&rows).unwrap(), splits).unwrap();
            prop_assert!(mean >= 1.0 - 1e-12 && mean <= k as f64 + 1e-9);
        }

        #[test]
        fn frechet_is_symmetric_rotation_invariant_and_nonnegative(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = 4;
            let a = DMatrix::from_fn(60, d, |_, _| rng.sample::<f64, _>(StandardNormal));
            let b = DMatrix::from_fn(50, d, |_, j| rng.sample::<f64, _>(StandardNormal) * (1.0 + j as f64 * 0.3) + 0.5);
            let fa = FeatureBatch::from_matrix(a.clone(), FeatureSource::Real).unwrap();
            let fb = FeatureBatch::from_matrix(b.clone(), FeatureSource::Generated).unwrap();
            let ab = frechet_distance(&fa, &fb).unwrap();
            let ba = frechet_distance(&fb, &fa).unwrap();
            prop_assert!(ab >= 0.0);
            prop_assert!((ab - ba).abs() <= 1e-4 * ab.max(1.0));
            let r = random_rotation(&mut rng, d);
            let ra = FeatureBatch::from_matrix(a * &r, FeatureSource::Real).unwrap();
            let rb = FeatureBatch::from_matrix(b * &r, FeatureSource::Generated).unwrap();
            let rotated = frechet_distance(&ra, &rb).unwrap();
            prop_assert!((ab - rotated).abs() <= 1e-4 * ab.max(1.0));
        }
    }
}
