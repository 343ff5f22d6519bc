//! Z-score normalization and PCA with variance-coverage component selection.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::dataset::{DatasetError, TimeSeriesDataset};

#[derive(Debug, Error)]
pub enum PreprocessError {
    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },
    #[error("column `{0}` has zero variance")]
    ZeroVariance(String),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("dataset has targets but the normalizer has no target statistics")]
    MissingTargetStats,
    #[error("coverage threshold must be in (0, 1], got {0}")]
    InvalidCoverage(f64),
    #[error("covariance is not finite or has no variance")]
    DegenerateCovariance,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// Per-feature (and optionally target) mean and standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
    pub target_mean: Option<f64>,
    pub target_std: Option<f64>,
}

/// Sample mean and standard deviation (denominator N−1).
pub(crate) fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

fn is_degenerate(mean: f64, std: f64) -> bool {
    !(std > 1e-12 * mean.abs().max(1.0)) || !std.is_finite()
}

/// Fits per-feature statistics and, when the dataset is complete, target
/// statistics. Fails on fewer than two samples or a constant column.
pub fn fit_normalizer(ds: &TimeSeriesDataset) -> Result<Normalizer, PreprocessError> {
    if ds.len() < 2 {
        return Err(PreprocessError::TooFewSamples {
            needed: 2,
            got: ds.len(),
        });
    }
    let mut means = Vec::with_capacity(ds.n_features());
    let mut stds = Vec::with_capacity(ds.n_features());
    for (j, name) in ds.feature_names().iter().enumerate() {
        let (mean, std) = mean_std(ds.samples().iter().map(move |s| s.features[j]));
        if is_degenerate(mean, std) {
            return Err(PreprocessError::ZeroVariance(name.clone()));
        }
        means.push(mean);
        stds.push(std);
    }
    let (target_mean, target_std) = match ds.targets() {
        Some(y) => {
            let (mean, std) = mean_std(y.iter().copied());
            if is_degenerate(mean, std) {
                return Err(PreprocessError::ZeroVariance("target".into()));
            }
            (Some(mean), Some(std))
        }
        None => (None, None),
    };
    Ok(Normalizer {
        means,
        stds,
        target_mean,
        target_std,
    })
}

impl Normalizer {
    pub fn n_features(&self) -> usize {
        self.means.len()
    }

    pub fn has_target_stats(&self) -> bool {
        self.target_mean.is_some() && self.target_std.is_some()
    }

    pub fn normalize_features(&self, x: &[f64]) -> Result<Vec<f64>, PreprocessError> {
        if x.len() != self.n_features() {
            return Err(PreprocessError::DimensionMismatch {
                expected: self.n_features(),
                got: x.len(),
            });
        }
        Ok(x.iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(v, (m, s))| (v - m) / s)
            .collect())
    }

    pub fn denormalize_features(&self, z: &[f64]) -> Vec<f64> {
        z.iter()
            .zip(self.means.iter().zip(&self.stds))
            .map(|(v, (m, s))| v * s + m)
            .collect()
    }

    pub fn normalize_target(&self, y: f64) -> Option<f64> {
        Some((y - self.target_mean?) / self.target_std?)
    }

    pub fn denormalize_target(&self, y: f64) -> Option<f64> {
        Some(y * self.target_std? + self.target_mean?)
    }
}

/// Z-scores every feature (and the target when present). Timestamps and
/// modes are unchanged.
pub fn apply_normalizer(
    norm: &Normalizer,
    ds: &TimeSeriesDataset,
) -> Result<TimeSeriesDataset, PreprocessError> {
    if ds.n_features() != norm.n_features() {
        return Err(PreprocessError::DimensionMismatch {
            expected: norm.n_features(),
            got: ds.n_features(),
        });
    }
    if ds.is_complete() && !norm.has_target_stats() {
        return Err(PreprocessError::MissingTargetStats);
    }
    Ok(ds.map_samples(|s| {
        let features = s
            .features
            .iter()
            .zip(norm.means.iter().zip(&norm.stds))
            .map(|(v, (m, sd))| (v - m) / sd)
            .collect();
        (features, s.target.and_then(|y| norm.normalize_target(y)))
    })?)
}

/// Principal directions of the feature covariance, truncated to the smallest
/// number of components that reaches the coverage threshold.
///
/// Each loading column is flipped so that its largest-magnitude entry is
/// positive (lowest row index on ties). With distinct eigenvalues this makes
/// the loadings unique; repeated eigenvalues leave them determined only up to
/// rotation within the shared subspace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    /// M×K, columns are principal directions.
    #[serde(with = "row_major")]
    pub loading: DMatrix<f64>,
    /// The K kept eigenvalues, non-increasing.
    pub eigenvalues: Vec<f64>,
    /// Sum of all M eigenvalues (negative round-off clamped to zero).
    pub total_variance: f64,
    /// Kept share of the total variance.
    pub coverage: f64,
}

pub fn fit_pca(ds: &TimeSeriesDataset, coverage_threshold: f64) -> Result<PcaModel, PreprocessError> {
    if !(coverage_threshold > 0.0 && coverage_threshold <= 1.0) {
        return Err(PreprocessError::InvalidCoverage(coverage_threshold));
    }
    if ds.len() < 2 {
        return Err(PreprocessError::TooFewSamples {
            needed: 2,
            got: ds.len(),
        });
    }
    fit_pca_matrix(&ds.feature_matrix(), coverage_threshold)
}

pub(crate) fn fit_pca_matrix(x: &DMatrix<f64>, coverage_threshold: f64) -> Result<PcaModel, PreprocessError> {
    let n = x.nrows();
    let m = x.ncols();
    let means = x.row_mean();
    let mut centered = x.clone();
    for mut row in centered.row_iter_mut() {
        row -= &means;
    }
    let cov = (centered.transpose() * &centered) / (n as f64 - 1.0);
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(PreprocessError::DegenerateCovariance);
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let total: f64 = values.iter().sum();
    if !(total > 0.0) {
        return Err(PreprocessError::DegenerateCovariance);
    }

    let target = coverage_threshold * total * (1.0 - 1e-12);
    let mut cumulative = 0.0;
    let mut k = m;
    for (i, v) in values.iter().enumerate() {
        cumulative += v;
        if cumulative >= target {
            k = i + 1;
            break;
        }
    }

    let mut loading = DMatrix::zeros(m, k);
    for (col, &src) in order.iter().take(k).enumerate() {
        let mut v: DVector<f64> = eig.eigenvectors.column(src).into_owned();
        let mut pivot = 0;
        for r in 1..m {
            if v[r].abs() > v[pivot].abs() {
                pivot = r;
            }
        }
        if v[pivot] < 0.0 {
            v.neg_mut();
        }
        loading.set_column(col, &v);
    }
    let kept: Vec<f64> = values[..k].to_vec();
    let coverage = kept.iter().sum::<f64>() / total;
    Ok(PcaModel {
        loading,
        eigenvalues: kept,
        total_variance: total,
        coverage,
    })
}

impl PcaModel {
    pub fn n_features(&self) -> usize {
        self.loading.nrows()
    }

    pub fn n_components(&self) -> usize {
        self.loading.ncols()
    }

    /// Scores `t = x P`.
    pub fn transform(&self, x: &[f64]) -> Result<Vec<f64>, PreprocessError> {
        if x.len() != self.n_features() {
            return Err(PreprocessError::DimensionMismatch {
                expected: self.n_features(),
                got: x.len(),
            });
        }
        Ok((0..self.n_components())
            .map(|k| self.loading.column(k).iter().zip(x).map(|(p, v)| p * v).sum())
            .collect())
    }

    /// N×K score matrix for an N×M input.
    pub fn transform_matrix(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>, PreprocessError> {
        if x.ncols() != self.n_features() {
            return Err(PreprocessError::DimensionMismatch {
                expected: self.n_features(),
                got: x.ncols(),
            });
        }
        Ok(x * &self.loading)
    }

    /// `t Pᵀ`, the projection of the scores back to feature space.
    pub fn reconstruct(&self, t: &[f64]) -> Vec<f64> {
        (0..self.n_features())
            .map(|r| self.loading.row(r).iter().zip(t).map(|(p, v)| p * v).sum())
            .collect()
    }
}

/// Serializes a matrix as `{ "rows", "cols", "data" }` with `data` row-major.
pub(crate) mod row_major {
    use super::*;

    #[derive(Serialize, Deserialize)]
    struct Repr {
        rows: usize,
        cols: usize,
        data: Vec<f64>,
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let data = (0..m.nrows())
            .flat_map(|r| (0..m.ncols()).map(move |c| m[(r, c)]))
            .collect();
        Repr {
            rows: m.nrows(),
            cols: m.ncols(),
            data,
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let r = Repr::deserialize(d)?;
        if r.data.len() != r.rows * r.cols {
            return Err(serde::de::Error::custom(format!(
                "matrix data has {} values, shape {}x{} needs {}",
                r.data.len(),
                r.rows,
                r.cols,
                r.rows * r.cols
            )));
        }
        Ok(DMatrix::from_row_slice(r.rows, r.cols, &r.data))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Record;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ds_from_rows(rows: &[Vec<f64>], targets: Option<&[f64]>) -> TimeSeriesDataset {
        let m = rows[0].len();
        let names = (0..m).map(|i| format!("x{i}")).collect();
        let recs = rows.iter().enumerate().map(|(i, r)| {
            Record::new(i as f64, "a", r.clone(), targets.map(|t| t[i]))
        });
        TimeSeriesDataset::from_records(names, recs.collect::<Vec<_>>()).unwrap()
    }

    fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
        let u1: f64 = 1.0 - rng.random::<f64>();
        let u2: f64 = rng.random();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    fn random_rows(seed: u64, n: usize, m: usize, mix: bool) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let z: Vec<f64> = (0..m).map(|_| gaussian(&mut rng)).collect();
                if mix {
                    // distinct variances per direction
                    (0..m).map(|j| z[j] * (j + 1) as f64 + 0.3 * z[(j + 1) % m]).collect()
                } else {
                    z
                }
            })
            .collect()
    }

    #[test]
    fn normalizer_hand_values() {
        let ds = ds_from_rows(&[vec![1.0], vec![2.0], vec![3.0]], Some(&[2.0, 4.0, 6.0]));
        let n = fit_normalizer(&ds).unwrap();
        assert_eq!(n.means, vec![2.0]);
        assert_eq!(n.stds, vec![1.0]);
        assert_eq!(n.target_mean, Some(4.0));
        assert_eq!(n.target_std, Some(2.0));
    }

    #[test]
    fn normalizer_constant_column_errors() {
        let ds = ds_from_rows(&[vec![1.0, 5.0], vec![2.0, 5.0], vec![3.0, 5.0]], None);
        match fit_normalizer(&ds) {
            Err(PreprocessError::ZeroVariance(name)) => assert_eq!(name, "x1"),
            other => panic!("unexpected {other:?}"),
        }
        let one = ds_from_rows(&[vec![1.0]], None);
        assert!(matches!(fit_normalizer(&one), Err(PreprocessError::TooFewSamples { .. })));
    }

    #[test]
    fn normalize_gives_zero_mean_unit_variance_and_inverts() {
        let rows = random_rows(3, 200, 3, true);
        let y: Vec<f64> = rows.iter().map(|r| r[0] * 2.0 + 1.0).collect();
        let ds = ds_from_rows(&rows, Some(&y));
        let norm = fit_normalizer(&ds).unwrap();
        let z = apply_normalizer(&norm, &ds).unwrap();
        for j in 0..3 {
            let (m, s) = mean_std(z.samples().iter().map(|s| s.features[j]));
            assert!(m.abs() < 1e-10 && (s - 1.0).abs() < 1e-10);
        }
        let (m, s) = mean_std(z.targets().unwrap().into_iter());
        assert!(m.abs() < 1e-10 && (s - 1.0).abs() < 1e-10);

        // standardized input keeps its statistics
        let again = fit_normalizer(&z).unwrap();
        for j in 0..3 {
            assert!(again.means[j].abs() < 1e-12 && (again.stds[j] - 1.0).abs() < 1e-12);
        }

        for (orig, s) in ds.samples().iter().zip(z.samples()) {
            let back = norm.denormalize_features(&s.features);
            for (a, b) in orig.features.iter().zip(&back) {
                assert!((a - b).abs() < 1e-12 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn normalizer_without_target_stats_rejects_complete_data() {
        let train = ds_from_rows(&[vec![1.0], vec![2.0], vec![4.0]], None);
        let norm = fit_normalizer(&train).unwrap();
        let complete = ds_from_rows(&[vec![1.0], vec![2.0]], Some(&[0.0, 1.0]));
        assert!(matches!(apply_normalizer(&norm, &complete), Err(PreprocessError::MissingTargetStats)));
        let wide = ds_from_rows(&[vec![1.0, 2.0], vec![2.0, 3.0]], None);
        assert!(matches!(apply_normalizer(&norm, &wide), Err(PreprocessError::DimensionMismatch { .. })));
    }

    #[test]
    fn perfectly_correlated_features_give_one_component() {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, 2.0 * i as f64 + 1.0]).collect();
        let pca = fit_pca(&ds_from_rows(&rows, None), 0.8).unwrap();
        assert_eq!(pca.n_components(), 1);
        assert!((pca.coverage - 1.0).abs() < 1e-12);
        let pca = fit_pca(&ds_from_rows(&rows, None), 1.0).unwrap();
        assert_eq!(pca.n_components(), 1);
    }

    #[test]
    fn identity_covariance_selects_four_of_five() {
        // Oracle: eigenvalue shares of the sample covariance of i.i.d. data
        // cluster at 1/5; the smallest is below the mean, so the top four
        // always exceed 80%.
        let rows = random_rows(11, 100_000, 5, false);
        let ds = ds_from_rows(&rows, None);
        let pca = fit_pca(&ds, 0.8).unwrap();
        assert_eq!(pca.n_components(), 4);
        let share: Vec<f64> = pca.eigenvalues.iter().map(|v| v / pca.total_variance).collect();
        for s in &share {
            assert!((s - 0.2).abs() < 0.01, "{share:?}");
        }
    }

    #[test]
    fn loadings_orthonormal_and_sign_convention() {
        let rows = random_rows(5, 500, 6, true);
        let pca = fit_pca(&ds_from_rows(&rows, None), 0.9).unwrap();
        let gram = pca.loading.transpose() * &pca.loading;
        let k = pca.n_components();
        assert!((gram - DMatrix::<f64>::identity(k, k)).amax() < 1e-10);
        for col in pca.loading.column_iter() {
            let pivot = col.iamax();
            assert!(col[pivot] > 0.0);
        }
        assert!(pca.eigenvalues.windows(2).all(|w| w[0] >= w[1]));
        assert!(pca.coverage >= 0.9);
    }

    #[test]
    fn score_variance_matches_eigenvalues() {
        let rows = random_rows(13, 400, 5, true);
        let ds = ds_from_rows(&rows, None);
        let pca = fit_pca(&ds, 0.95).unwrap();
        let t = pca.transform_matrix(&ds.feature_matrix()).unwrap();
        for k in 0..pca.n_components() {
            let (_, s) = mean_std(t.column(k).iter().copied());
            let rel = (s * s - pca.eigenvalues[k]).abs() / pca.eigenvalues[k];
            assert!(rel < 1e-8, "component {k}: {rel}");
        }
    }

    #[test]
    fn reconstruction_error_equals_discarded_variance() {
        let rows = random_rows(17, 300, 5, true);
        let ds = ds_from_rows(&rows, None);
        let pca = fit_pca(&ds, 0.7).unwrap();
        assert!(pca.n_components() < 5);
        let x = ds.feature_matrix();
        let mean = x.row_mean();
        let mut sse = 0.0;
        for r in x.row_iter() {
            let c: Vec<f64> = (r - &mean).iter().copied().collect();
            let back = pca.reconstruct(&pca.transform(&c).unwrap());
            sse += c.iter().zip(&back).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        }
        let discarded = pca.total_variance - pca.eigenvalues.iter().sum::<f64>();
        let per_sample = sse / (x.nrows() as f64 - 1.0);
        assert!((per_sample - discarded).abs() < 1e-8 * pca.total_variance);
    }

    #[test]
    fn fit_is_deterministic() {
        let rows = random_rows(19, 200, 4, true);
        let a = fit_pca(&ds_from_rows(&rows, None), 0.9).unwrap();
        let b = fit_pca(&ds_from_rows(&rows, None), 0.9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn full_threshold_reconstructs() {
        let rows = random_rows(7, 50, 4, true);
        let pca = fit_pca(&ds_from_rows(&rows, None), 1.0).unwrap();
        assert_eq!(pca.n_components(), 4);
        for r in &rows {
            let t = pca.transform(r).unwrap();
            let back = pca.reconstruct(&t);
            for (a, b) in r.iter().zip(&back) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn transform_basics() {
        let rows = random_rows(9, 100, 3, true);
        let pca = fit_pca(&ds_from_rows(&rows, None), 0.99).unwrap();
        let zero = pca.transform(&[0.0; 3]).unwrap();
        assert!(zero.iter().all(|v| *v == 0.0));
        let first: Vec<f64> = pca.loading.column(0).iter().copied().collect();
        let t = pca.transform(&first).unwrap();
        assert!((t[0] - 1.0).abs() < 1e-10);
        assert!(t[1..].iter().all(|v| v.abs() < 1e-10));
        assert!(matches!(pca.transform(&[1.0]), Err(PreprocessError::DimensionMismatch { .. })));
    }

    #[test]
    fn rejects_bad_threshold_and_tiny_data() {
        let rows = random_rows(1, 10, 2, false);
        let ds = ds_from_rows(&rows, None);
        assert!(matches!(fit_pca(&ds, 0.0), Err(PreprocessError::InvalidCoverage(_))));
        assert!(matches!(fit_pca(&ds, 1.5), Err(PreprocessError::InvalidCoverage(_))));
        let one = ds_from_rows(&rows[..1], None);
        assert!(matches!(fit_pca(&one, 0.8), Err(PreprocessError::TooFewSamples { .. })));
    }

    #[test]
    fn serde_row_major_layout() {
        let rows = random_rows(2, 30, 3, true);
        let pca = fit_pca(&ds_from_rows(&rows, None), 0.7).unwrap();
        let json = serde_json::to_value(&pca).unwrap();
        assert_eq!(json["loading"]["rows"], 3);
        let k = pca.n_components();
        assert_eq!(json["loading"]["cols"], k);
        assert_eq!(json["loading"]["data"][k], pca.loading[(1, 0)]);
        let back: PcaModel = serde_json::from_value(json).unwrap();
        assert_eq!(back, pca);
    }
}
