use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Distance used by the embedding detectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EmbeddingMetric {
    /// `1 − cos(a, b)`
    Cosine,
    /// Euclidean distance after whitening with the reference covariance.
    Mahalanobis,
    /// Plain Euclidean distance; exposed for checking the detectors against
    /// brute-force oracles.
    Euclidean,
}

/// `1 − cos(a, b)` clamped to `[0, 2]`. Identical vectors (including two
/// zero vectors) are at distance 0, a zero and a nonzero vector at distance 1.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    if a == b {
        return 0.0;
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 && nb == 0.0 {
        return 0.0;
    }
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    (1.0 - dot / (na.sqrt() * nb.sqrt())).clamp(0.0, 2.0)
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Training embeddings with everything the detectors need precomputed.
#[derive(Clone, Debug)]
pub struct ReferenceSet {
    embeddings: Vec<Vec<f64>>,
    mean: Vec<f64>,
    covariance: DMatrix<f64>,
    inverse: DMatrix<f64>,
    /// `L⁻¹` with `Σ = L Lᵀ`.
    whitener: DMatrix<f64>,
    whitened: Vec<Vec<f64>>,
    whitened_mean: Vec<f64>,
}

/// Unbiased sample covariance of the rows.
pub fn sample_covariance(rows: &[Vec<f64>]) -> (Vec<f64>, DMatrix<f64>) {
    let m = rows.len();
    let d = rows.first().map_or(0, Vec::len);
    let mut mean = vec![0.0; d];
    for r in rows {
        for (acc, v) in mean.iter_mut().zip(r) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m as f64);
    let centered = DMatrix::from_fn(m, d, |i, j| rows[i][j] - mean[j]);
    let cov = centered.transpose() * &centered / (m.saturating_sub(1).max(1)) as f64;
    (mean, cov)
}

impl ReferenceSet {
    /// Shrinks the sample covariance towards `tr(Σ)/d · I` by `shrinkage`.
    pub fn build(embeddings: Vec<Vec<f64>>, shrinkage: f64) -> Result<Self> {
        Self::check(&embeddings)?;
        let (_, mut cov) = sample_covariance(&embeddings);
        let d = cov.nrows();
        let scale = cov.trace() / d as f64;
        // An all-identical reference has zero trace; fall back to a unit ridge.
        let ridge = shrinkage * if scale > 0.0 { scale } else { 1.0 };
        for i in 0..d {
            cov[(i, i)] += ridge;
        }
        Self::with_covariance(embeddings, cov)
    }

    /// Uses `covariance` as given, without shrinkage.
    pub fn with_covariance(embeddings: Vec<Vec<f64>>, covariance: DMatrix<f64>) -> Result<Self> {
        Self::check(&embeddings)?;
        let (mean, _) = sample_covariance(&embeddings);
        let d = mean.len();
        if covariance.shape() != (d, d) {
            return Err(Error::shape((d, d), covariance.shape()));
        }
        let chol = covariance.clone().cholesky().ok_or_else(|| {
            Error::Numerical(
                "reference covariance is not positive definite; raise detection.shrinkage".into(),
            )
        })?;
        let l = chol.l();
        let whitener = l
            .solve_lower_triangular(&DMatrix::identity(d, d))
            .ok_or_else(|| Error::Numerical("singular Cholesky factor".into()))?;
        let inverse = chol.inverse();
        let whiten = |v: &[f64]| -> Vec<f64> {
            (&whitener * DVector::from_column_slice(v))
                .as_slice()
                .to_vec()
        };
        let whitened = embeddings.iter().map(|e| whiten(e)).collect();
        let whitened_mean = whiten(&mean);
        Ok(ReferenceSet {
            embeddings,
            mean,
            covariance,
            inverse,
            whitener,
            whitened,
            whitened_mean,
        })
    }

    fn check(embeddings: &[Vec<f64>]) -> Result<()> {
        if embeddings.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "a reference set needs at least 2 embeddings, got {}",
                embeddings.len()
            )));
        }
        let d = embeddings[0].len();
        if d == 0 || embeddings.iter().any(|e| e.len() != d) {
            return Err(Error::InvalidInput(
                "reference embeddings differ in length".into(),
            ));
        }
        if embeddings.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite reference embedding".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn embeddings(&self) -> &[Vec<f64>] {
        &self.embeddings
    }

    pub fn covariance(&self) -> &DMatrix<f64> {
        &self.covariance
    }

    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.inverse
    }

    /// `max |Σ·Σ⁻¹ − I|`
    pub fn inverse_residual(&self) -> f64 {
        let d = self.dim();
        (&self.covariance * &self.inverse - DMatrix::<f64>::identity(d, d)).amax()
    }

    pub fn whiten(&self, v: &[f64]) -> Vec<f64> {
        (&self.whitener * DVector::from_column_slice(v))
            .as_slice()
            .to_vec()
    }

    /// `sqrt((a − b)ᵀ Σ⁻¹ (a − b))`
    pub fn mahalanobis(&self, a: &[f64], b: &[f64]) -> f64 {
        euclidean(&self.whiten(a), &self.whiten(b))
    }

    /// Distances from a query to every reference embedding. `prepared` is
    /// the query, already whitened for the Mahalanobis metric.
    fn distances(&self, prepared: &[f64], metric: EmbeddingMetric) -> Vec<f64> {
        match metric {
            EmbeddingMetric::Cosine => self
                .embeddings
                .iter()
                .map(|e| cosine_distance(prepared, e))
                .collect(),
            EmbeddingMetric::Mahalanobis => self
                .whitened
                .iter()
                .map(|e| euclidean(prepared, e))
                .collect(),
            EmbeddingMetric::Euclidean => self
                .embeddings
                .iter()
                .map(|e| euclidean(prepared, e))
                .collect(),
        }
    }

    fn prepare(&self, query: &[f64], metric: EmbeddingMetric) -> Vec<f64> {
        match metric {
            EmbeddingMetric::Mahalanobis => self.whiten(query),
            _ => query.to_vec(),
        }
    }

    fn check_query(&self, query: &[f64]) -> Result<()> {
        if query.len() != self.dim() {
            return Err(Error::shape(self.dim(), query.len()));
        }
        Ok(())
    }

    fn check_k(&self, k: usize, what: &str) -> Result<()> {
        if k == 0 || k >= self.len() {
            return Err(Error::Config(format!(
                "{what} = {k} must lie in [1, {}) for a reference set of {} embeddings",
                self.len(),
                self.len()
            )));
        }
        Ok(())
    }

    pub fn dist_to_mean(&self, query: &[f64], metric: EmbeddingMetric) -> Result<f64> {
        self.check_query(query)?;
        Ok(match metric {
            EmbeddingMetric::Cosine => cosine_distance(query, &self.mean),
            EmbeddingMetric::Mahalanobis => euclidean(&self.whiten(query), &self.whitened_mean),
            EmbeddingMetric::Euclidean => euclidean(query, &self.mean),
        })
    }

    /// Mean distance to the `k` nearest reference embeddings. `exclude`
    /// removes the query's own entry when it is drawn from the reference.
    pub fn knn(
        &self,
        query: &[f64],
        k: usize,
        metric: EmbeddingMetric,
        exclude: Option<usize>,
    ) -> Result<f64> {
        self.check_query(query)?;
        self.check_k(k, "knn_k")?;
        let d = self.distances(&self.prepare(query, metric), metric);
        let nearest = nearest(&d, k, exclude);
        Ok(nearest.iter().map(|&i| d[i]).sum::<f64>() / k as f64)
    }

    /// Local outlier factor of a query against the reference, computed the
    /// novelty-detection way: reference densities come from the reference
    /// alone. Reported as `max(LOF, 0)`.
    pub fn lof(&self, query: &[f64], model: &LofModel, exclude: Option<usize>) -> Result<f64> {
        self.check_query(query)?;
        let d = self.distances(&self.prepare(query, model.metric), model.metric);
        let neigh = nearest(&d, model.k, exclude);
        let reach: f64 = neigh
            .iter()
            .map(|&o| d[o].max(model.k_distance[o]))
            .sum::<f64>()
            / model.k as f64;
        let lrd = 1.0 / (reach + LRD_EPS);
        let ratio = neigh.iter().map(|&o| model.lrd[o]).sum::<f64>() / model.k as f64 / lrd;
        Ok(ratio.max(0.0))
    }

    /// Precomputes k-distances and local reachability densities of the
    /// reference under `metric`.
    pub fn lof_model(&self, k: usize, metric: EmbeddingMetric) -> Result<LofModel> {
        self.check_k(k, "lof_neighbors")?;
        let m = self.len();
        let prepared: Vec<Vec<f64>> = match metric {
            EmbeddingMetric::Mahalanobis => self.whitened.clone(),
            _ => self.embeddings.clone(),
        };
        let all: Vec<Vec<f64>> = prepared.iter().map(|p| self.distances(p, metric)).collect();
        let neighbours: Vec<Vec<usize>> = (0..m).map(|i| nearest(&all[i], k, Some(i))).collect();
        let k_distance: Vec<f64> = (0..m).map(|i| all[i][neighbours[i][k - 1]]).collect();
        let lrd = (0..m)
            .map(|i| {
                let reach = neighbours[i]
                    .iter()
                    .map(|&o| all[i][o].max(k_distance[o]))
                    .sum::<f64>()
                    / k as f64;
                1.0 / (reach + LRD_EPS)
            })
            .collect();
        Ok(LofModel {
            k,
            metric,
            k_distance,
            lrd,
        })
    }
}

/// Keeps the reachability density finite when `k` neighbours coincide.
pub const LRD_EPS: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct LofModel {
    pub k: usize,
    pub metric: EmbeddingMetric,
    pub k_distance: Vec<f64>,
    pub lrd: Vec<f64>,
}

/// Indices of the `k` smallest distances, ties broken by index.
fn nearest(d: &[f64], k: usize, exclude: Option<usize>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..d.len()).filter(|&i| Some(i) != exclude).collect();
    let by_distance = |a: &usize, b: &usize| d[*a].total_cmp(&d[*b]).then(a.cmp(b));
    if k < idx.len() {
        idx.select_nth_unstable_by(k - 1, by_distance);
        idx.truncate(k);
    }
    idx.sort_by(by_distance);
    idx
}
