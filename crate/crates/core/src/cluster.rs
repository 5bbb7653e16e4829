//! Feature preprocessing, PCA, k-means, elbow selection and ARI stability.
//!
//! Order of operations: `ln(1 + x)` on long-tailed columns, z-score every
//! column (population sd), PCA on the population covariance, then Lloyd's
//! k-means with greedy k-means++ seeding in the retained component space.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;
use std::ops::RangeInclusive;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAX_ITER: usize = 300;

/// Starts per fit for the elbow and each stability run.
pub const DEFAULT_N_INIT: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum ClusterError {
    #[error("column {column} has negative value {value} at row {row} and cannot be log-transformed")]
    NegativeValueInLogColumn { column: String, row: usize, value: f64 },
    #[error("unknown column {0}")]
    UnknownColumn(String),
    #[error("matrix has zero total variance")]
    DegenerateMatrix,
    #[error("column mismatch: model expects {expected:?}, got {got:?}")]
    ColumnMismatch { expected: Vec<String>, got: Vec<String> },
    #[error("k = {k} exceeds the {distinct} distinct rows")]
    KTooLarge { k: usize, distinct: usize },
    #[error("k must be at least 2, got {0}")]
    InvalidK(usize),
    #[error("elbow needs at least 3 candidate k values, got {0}")]
    RangeTooShort(usize),
    #[error("label vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("{0}")]
    InvalidInput(String),
}

/// Row-major sessions × named features.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub row_ids: Vec<String>,
    pub columns: Vec<String>,
    data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(row_ids: Vec<String>, columns: Vec<String>, data: Vec<f64>) -> Result<Self, ClusterError> {
        if data.len() != row_ids.len() * columns.len() {
            return Err(ClusterError::InvalidInput(format!(
                "{} values for {} rows × {} columns",
                data.len(),
                row_ids.len(),
                columns.len()
            )));
        }
        let unique: HashSet<&String> = columns.iter().collect();
        if unique.len() != columns.len() {
            return Err(ClusterError::InvalidInput("column names must be unique".into()));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(ClusterError::InvalidInput(format!("non-finite value {v}")));
        }
        Ok(FeatureMatrix { row_ids, columns, data })
    }

    /// Rows named `0..n`, handy for synthetic data.
    pub fn from_rows(columns: Vec<String>, rows: &[Vec<f64>]) -> Result<Self, ClusterError> {
        let ids = (0..rows.len()).map(|i| i.to_string()).collect();
        FeatureMatrix::new(ids, columns, rows.concat())
    }

    pub fn n_rows(&self) -> usize {
        self.row_ids.len()
    }

    pub fn n_cols(&self) -> usize {
        self.columns.len()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let d = self.n_cols();
        &self.data[i * d..(i + 1) * d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> + '_ {
        self.data.chunks_exact(self.n_cols().max(1)).take(self.n_rows())
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.n_cols() + col]
    }

    pub fn column(&self, col: usize) -> Vec<f64> {
        self.rows().map(|r| r[col]).collect()
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Keep only the listed rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> FeatureMatrix {
        FeatureMatrix {
            row_ids: rows.iter().map(|&i| self.row_ids[i].clone()).collect(),
            columns: self.columns.clone(),
            data: rows.iter().flat_map(|&i| self.row(i).iter().copied()).collect(),
        }
    }
}

fn mean_and_population_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Fitted log + z-score transform, reusable for re-scoring new rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub columns: Vec<String>,
    pub log_transformed: Vec<bool>,
    pub means: Vec<f64>,
    /// Population sd; 0 for constant columns, which map to 0.
    pub sds: Vec<f64>,
}

impl Standardizer {
    fn transform_value(&self, col: usize, v: f64) -> f64 {
        let v = if self.log_transformed[col] { v.ln_1p() } else { v };
        if self.sds[col] == 0.0 {
            0.0
        } else {
            (v - self.means[col]) / self.sds[col]
        }
    }

    pub fn apply(&self, matrix: &FeatureMatrix) -> Result<FeatureMatrix, ClusterError> {
        if matrix.columns != self.columns {
            return Err(ClusterError::ColumnMismatch {
                expected: self.columns.clone(),
                got: matrix.columns.clone(),
            });
        }
        check_log_columns(matrix, &self.log_transformed)?;
        let d = matrix.n_cols();
        let data = matrix
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| self.transform_value(i % d, v))
            .collect();
        Ok(FeatureMatrix { row_ids: matrix.row_ids.clone(), columns: matrix.columns.clone(), data })
    }
}

fn check_log_columns(matrix: &FeatureMatrix, log_cols: &[bool]) -> Result<(), ClusterError> {
    for (row, values) in matrix.rows().enumerate() {
        for (col, &v) in values.iter().enumerate() {
            if log_cols[col] && v < 0.0 {
                return Err(ClusterError::NegativeValueInLogColumn {
                    column: matrix.columns[col].clone(),
                    row,
                    value: v,
                });
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Preprocessed {
    pub matrix: FeatureMatrix,
    pub standardizer: Standardizer,
    pub warnings: Vec<String>,
}

/// `ln(1 + x)` on the listed columns, then z-score every column.
pub fn preprocess(matrix: &FeatureMatrix, long_tailed_columns: &[&str]) -> Result<Preprocessed, ClusterError> {
    if matrix.n_rows() == 0 {
        return Err(ClusterError::InvalidInput("empty feature matrix".into()));
    }
    let mut log_transformed = vec![false; matrix.n_cols()];
    for name in long_tailed_columns {
        let idx = matrix.column_index(name).ok_or_else(|| ClusterError::UnknownColumn(name.to_string()))?;
        log_transformed[idx] = true;
    }
    check_log_columns(matrix, &log_transformed)?;
    let mut means = Vec::with_capacity(matrix.n_cols());
    let mut sds = Vec::with_capacity(matrix.n_cols());
    let mut warnings = Vec::new();
    for col in 0..matrix.n_cols() {
        let lt = log_transformed[col];
        let values: Vec<f64> = matrix.rows().map(|r| if lt { r[col].ln_1p() } else { r[col] }).collect();
        let (mean, sd) = mean_and_population_sd(&values);
        if sd == 0.0 {
            let msg = format!("column {} is constant; standardized to zeros", matrix.columns[col]);
            log::warn!("{msg}");
            warnings.push(msg);
        }
        means.push(mean);
        sds.push(sd);
    }
    let standardizer = Standardizer { columns: matrix.columns.clone(), log_transformed, means, sds };
    let out = standardizer.apply(matrix)?;
    Ok(Preprocessed { matrix: out, standardizer, warnings })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Retain {
    NComponents(usize),
    /// Smallest number of components whose cumulative ratio reaches the target.
    VarianceTarget(f64),
}

/// Number of leading components needed to reach `target` cumulative ratio.
pub fn components_for_variance(ratios: &[f64], target: f64) -> usize {
    let mut cum = 0.0;
    for (i, r) in ratios.iter().enumerate() {
        cum += r;
        if cum >= target - 1e-12 {
            return i + 1;
        }
    }
    ratios.len()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaModel {
    pub columns: Vec<String>,
    pub means: Vec<f64>,
    /// Column divisors applied after centering; all ones unless fit with scaling.
    pub scales: Vec<f64>,
    /// Retained components, one orthonormal row each.
    pub loadings: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub explained_variance_ratios: Vec<f64>,
    /// Ratios of every component, retained or not.
    pub full_spectrum_ratios: Vec<f64>,
}

impl PcaModel {
    pub fn n_components(&self) -> usize {
        self.loadings.len()
    }

    pub fn cumulative_ratio(&self) -> f64 {
        self.explained_variance_ratios.iter().sum()
    }
}

/// Eigendecomposition of the population covariance (or correlation, with
/// `scale`) sorted by descending eigenvalue. Each component is signed so its
/// largest-magnitude loading is positive.
pub fn fit_pca(matrix: &FeatureMatrix, retain: Retain, scale: bool) -> Result<PcaModel, ClusterError> {
    let (n, d) = (matrix.n_rows(), matrix.n_cols());
    if n == 0 || d == 0 {
        return Err(ClusterError::DegenerateMatrix);
    }
    let mut means = vec![0.0; d];
    let mut scales = vec![1.0; d];
    for col in 0..d {
        let (m, sd) = mean_and_population_sd(&matrix.column(col));
        means[col] = m;
        if scale && sd > 0.0 {
            scales[col] = sd;
        }
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    let mut centered = vec![0.0; d];
    for row in matrix.rows() {
        for j in 0..d {
            centered[j] = (row[j] - means[j]) / scales[j];
        }
        for a in 0..d {
            for b in a..d {
                cov[(a, b)] += centered[a] * centered[b];
            }
        }
    }
    for a in 0..d {
        for b in a..d {
            cov[(a, b)] /= n as f64;
            cov[(b, a)] = cov[(a, b)];
        }
    }
    let total: f64 = (0..d).map(|i| cov[(i, i)]).sum();
    if total <= 0.0 {
        return Err(ClusterError::DegenerateMatrix);
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let eigenvalues: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let full_spectrum_ratios: Vec<f64> = eigenvalues.iter().map(|l| l / total).collect();
    let m = match retain {
        Retain::NComponents(m) => {
            if m == 0 || m > d {
                return Err(ClusterError::InvalidInput(format!("cannot retain {m} of {d} components")));
            }
            m
        }
        Retain::VarianceTarget(v) => {
            if !(v > 0.0 && v <= 1.0) {
                return Err(ClusterError::InvalidInput(format!("variance target {v} outside (0, 1]")));
            }
            components_for_variance(&full_spectrum_ratios, v)
        }
    };
    let loadings = order[..m]
        .iter()
        .map(|&i| {
            let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            let mut pivot = 0;
            for j in 1..d {
                if v[j].abs() > v[pivot].abs() {
                    pivot = j;
                }
            }
            if v[pivot] < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    Ok(PcaModel {
        columns: matrix.columns.clone(),
        means,
        scales,
        loadings,
        eigenvalues: eigenvalues[..m].to_vec(),
        explained_variance_ratios: full_spectrum_ratios[..m].to_vec(),
        full_spectrum_ratios,
    })
}

/// Project rows onto the retained components. Output columns are `pc1..`.
pub fn transform_pca(model: &PcaModel, matrix: &FeatureMatrix) -> Result<FeatureMatrix, ClusterError> {
    if matrix.columns != model.columns {
        return Err(ClusterError::ColumnMismatch { expected: model.columns.clone(), got: matrix.columns.clone() });
    }
    let d = matrix.n_cols();
    let mut centered = vec![0.0; d];
    let mut data = Vec::with_capacity(matrix.n_rows() * model.n_components());
    for row in matrix.rows() {
        for j in 0..d {
            centered[j] = (row[j] - model.means[j]) / model.scales[j];
        }
        for l in &model.loadings {
            data.push(l.iter().zip(&centered).map(|(a, b)| a * b).sum());
        }
    }
    let columns = (1..=model.n_components()).map(|c| format!("pc{c}")).collect();
    Ok(FeatureMatrix { row_ids: matrix.row_ids.clone(), columns, data })
}

/// Map component scores back to the original feature space.
pub fn reconstruct_pca(model: &PcaModel, scores: &FeatureMatrix) -> FeatureMatrix {
    let d = model.columns.len();
    let mut data = Vec::with_capacity(scores.n_rows() * d);
    for s in scores.rows() {
        for j in 0..d {
            let v: f64 = model.loadings.iter().zip(s).map(|(l, c)| l[j] * c).sum();
            data.push(model.means[j] + model.scales[j] * v);
        }
    }
    FeatureMatrix { row_ids: scores.row_ids.clone(), columns: model.columns.clone(), data }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    pub seed: u64,
    pub n_iter: usize,
    /// Inertia after each assignment step; non-increasing.
    #[serde(skip)]
    pub inertia_trace: Vec<f64>,
}

impl KMeansModel {
    /// Nearest centroid, lowest index on ties.
    pub fn predict(&self, point: &[f64]) -> usize {
        nearest(point, &self.centroids).0
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, centroid) in centroids.iter().enumerate() {
        let d = sq_dist(point, centroid);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn distinct_rows(points: &FeatureMatrix, cap: usize) -> usize {
    let mut seen: HashSet<Vec<u64>> = HashSet::new();
    for row in points.rows() {
        seen.insert(row.iter().map(|v| (v + 0.0).to_bits()).collect());
        if seen.len() >= cap {
            break;
        }
    }
    seen.len()
}

/// Draw an index with probability proportional to `weights`.
fn sample_weighted(rng: &mut ChaCha8Rng, weights: &[f64], total: f64) -> usize {
    let mut target = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if *w > 0.0 {
            if target < *w {
                return i;
            }
            target -= w;
        }
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

/// Greedy k-means++: each new center is the best of `2 + ln k` D²-sampled
/// candidates by resulting potential.
fn kmeans_plus_plus(points: &FeatureMatrix, k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.n_rows();
    let trials = 2 + (k as f64).ln().floor() as usize;
    let first = rng.gen_range(0..n);
    let mut centers = vec![points.row(first).to_vec()];
    let mut closest: Vec<f64> = points.rows().map(|r| sq_dist(r, &centers[0])).collect();
    let mut potential: f64 = closest.iter().sum();
    let mut candidate_dist = vec![0.0; n];
    let mut best_dist = vec![0.0; n];
    while centers.len() < k {
        let mut best: Option<(usize, f64)> = None;
        for _ in 0..trials {
            let cand = sample_weighted(rng, &closest, potential);
            let c = points.row(cand);
            let mut pot = 0.0;
            for (i, r) in points.rows().enumerate() {
                let d = sq_dist(r, c).min(closest[i]);
                candidate_dist[i] = d;
                pot += d;
            }
            if best.is_none_or(|(_, p)| pot < p) {
                best = Some((cand, pot));
                std::mem::swap(&mut best_dist, &mut candidate_dist);
            }
        }
        let (idx, pot) = best.expect("at least one trial");
        centers.push(points.row(idx).to_vec());
        std::mem::swap(&mut closest, &mut best_dist);
        potential = pot;
    }
    centers
}

fn update_centroids(points: &FeatureMatrix, labels: &[usize], centroids: &mut [Vec<f64>]) -> Vec<usize> {
    let d = points.n_cols();
    let mut sums = vec![vec![0.0; d]; centroids.len()];
    let mut sizes = vec![0usize; centroids.len()];
    for (row, &l) in points.rows().zip(labels) {
        sizes[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(row) {
            *s += v;
        }
    }
    for (c, (sum, &size)) in sums.into_iter().zip(&sizes).enumerate() {
        if size > 0 {
            centroids[c] = sum.into_iter().map(|s| s / size as f64).collect();
        }
    }
    sizes
}

/// Move the farthest points into empty clusters. Returns whether anything moved.
fn reseed_empty(points: &FeatureMatrix, labels: &mut [usize], centroids: &mut [Vec<f64>], sizes: &mut [usize]) -> bool {
    let mut moved = false;
    for c in 0..centroids.len() {
        if sizes[c] > 0 {
            continue;
        }
        let far = points
            .rows()
            .enumerate()
            .filter(|(i, _)| sizes[labels[*i]] > 1)
            .map(|(i, r)| (i, sq_dist(r, &centroids[labels[i]])))
            .fold(None, |best: Option<(usize, f64)>, (i, d)| match best {
                Some((_, bd)) if bd >= d => best,
                _ => Some((i, d)),
            });
        if let Some((i, _)) = far {
            sizes[labels[i]] -= 1;
            labels[i] = c;
            sizes[c] = 1;
            centroids[c] = points.row(i).to_vec();
            moved = true;
        }
    }
    moved
}

/// Lloyd's algorithm from a seeded greedy k-means++ start. Stops when
/// assignments no longer change or after [`MAX_ITER`] iterations.
pub fn kmeans_fit(points: &FeatureMatrix, k: usize, seed: u64) -> Result<(KMeansModel, Vec<usize>), ClusterError> {
    kmeans_fit_stream(points, k, seed, 0)
}

fn kmeans_fit_stream(points: &FeatureMatrix, k: usize, seed: u64, stream: u64) -> Result<(KMeansModel, Vec<usize>), ClusterError> {
    if k < 2 {
        return Err(ClusterError::InvalidK(k));
    }
    let distinct = distinct_rows(points, k);
    if k > distinct {
        return Err(ClusterError::KTooLarge { k, distinct });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let mut centroids = kmeans_plus_plus(points, k, &mut rng);
    let mut labels = vec![usize::MAX; points.n_rows()];
    let mut trace = Vec::new();
    let mut n_iter = 0;
    while n_iter < MAX_ITER {
        n_iter += 1;
        let mut changed = false;
        let mut inertia = 0.0;
        for (i, row) in points.rows().enumerate() {
            let (c, d) = nearest(row, &centroids);
            inertia += d;
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
        }
        trace.push(inertia);
        if !changed {
            break;
        }
        let mut sizes = update_centroids(points, &labels, &mut centroids);
        if reseed_empty(points, &mut labels, &mut centroids, &mut sizes) {
            update_centroids(points, &labels, &mut centroids);
        }
    }
    let inertia = points.rows().zip(&labels).map(|(r, &l)| sq_dist(r, &centroids[l])).sum();
    let model = KMeansModel { k, centroids, inertia, seed, n_iter, inertia_trace: trace };
    Ok((model, labels))
}

/// Lowest-inertia fit among `n_init` starts drawn from independent streams
/// of `seed`; the first start is [`kmeans_fit`] with the same seed.
pub fn kmeans_best_of(points: &FeatureMatrix, k: usize, seed: u64, n_init: usize) -> Result<(KMeansModel, Vec<usize>), ClusterError> {
    let mut best: Option<(KMeansModel, Vec<usize>)> = None;
    for stream in 0..n_init.max(1) as u64 {
        let fit = kmeans_fit_stream(points, k, seed, stream)?;
        if best.as_ref().is_none_or(|(m, _)| fit.0.inertia < m.inertia) {
            best = Some(fit);
        }
    }
    Ok(best.expect("n_init >= 1"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElbowResult {
    pub chosen_k: usize,
    pub inertias: Vec<(usize, f64)>,
}

/// Interior `k` maximizing `(I[k-1] - I[k]) - (I[k] - I[k+1])`; ties go to
/// the smaller `k`.
pub fn elbow_from_inertias(inertias: &[(usize, f64)]) -> Result<usize, ClusterError> {
    if inertias.len() < 3 {
        return Err(ClusterError::RangeTooShort(inertias.len()));
    }
    let mut best = (inertias[1].0, f64::NEG_INFINITY);
    for w in inertias.windows(3) {
        let second = (w[0].1 - w[1].1) - (w[1].1 - w[2].1);
        if second > best.1 {
            best = (w[1].0, second);
        }
    }
    Ok(best.0)
}

pub fn elbow_select(points: &FeatureMatrix, k_range: RangeInclusive<usize>, seed: u64, n_init: usize) -> Result<ElbowResult, ClusterError> {
    let ks: Vec<usize> = k_range.collect();
    if ks.len() < 3 {
        return Err(ClusterError::RangeTooShort(ks.len()));
    }
    let fits: Vec<Result<(usize, f64), ClusterError>> = ks
        .par_iter()
        .map(|&k| kmeans_best_of(points, k, seed, n_init).map(|(m, _)| (k, m.inertia)))
        .collect();
    let inertias = fits.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(ElbowResult { chosen_k: elbow_from_inertias(&inertias)?, inertias })
}

fn comb2(n: u64) -> u128 {
    let n = n as u128;
    n * n.saturating_sub(1) / 2
}

/// Adjusted Rand Index from the pair-counting contingency table.
/// Evaluated in exact integer arithmetic up to one final division.
pub fn adjusted_rand_index<A: Eq + Hash, B: Eq + Hash>(labels_a: &[A], labels_b: &[B]) -> Result<f64, ClusterError> {
    if labels_a.len() != labels_b.len() {
        return Err(ClusterError::LengthMismatch(labels_a.len(), labels_b.len()));
    }
    if labels_a.len() < 2 {
        return Err(ClusterError::InvalidInput("ARI needs at least 2 items".into()));
    }
    let mut table: HashMap<(&A, &B), u64> = HashMap::new();
    let mut rows: HashMap<&A, u64> = HashMap::new();
    let mut cols: HashMap<&B, u64> = HashMap::new();
    for (a, b) in labels_a.iter().zip(labels_b) {
        *table.entry((a, b)).or_default() += 1;
        *rows.entry(a).or_default() += 1;
        *cols.entry(b).or_default() += 1;
    }
    let index: u128 = table.values().map(|&c| comb2(c)).sum();
    let sum_a: u128 = rows.values().map(|&c| comb2(c)).sum();
    let sum_b: u128 = cols.values().map(|&c| comb2(c)).sum();
    let pairs = comb2(labels_a.len() as u64);
    // ARI = (index - a·b/N) / ((a + b)/2 - a·b/N), scaled by 2N.
    let num = 2 * index as i128 * pairs as i128 - 2 * (sum_a * sum_b) as i128;
    let den = (sum_a + sum_b) as i128 * pairs as i128 - 2 * (sum_a * sum_b) as i128;
    if den == 0 {
        // Both partitions trivial in the same way (all-one or all-singleton).
        return Ok(1.0);
    }
    Ok(num as f64 / den as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub k: usize,
    pub n_runs: usize,
    pub mean_ari: f64,
    /// Population sd over runs.
    pub sd_ari: f64,
    pub reference_seed: u64,
    pub runs: Vec<StabilityRun>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityRun {
    pub seed: u64,
    pub inertia: f64,
    pub ari_vs_reference: f64,
}

/// Fits with seeds `0..n_runs` (each the best of `n_init` starts), each
/// compared by ARI against the lowest-inertia run (lowest seed on ties).
/// Also returns that reference fit.
pub fn stability_with_reference(
    points: &FeatureMatrix,
    k: usize,
    n_runs: usize,
    n_init: usize,
) -> Result<(StabilityReport, KMeansModel, Vec<usize>), ClusterError> {
    if n_runs == 0 {
        return Err(ClusterError::InvalidInput("n_runs must be positive".into()));
    }
    let fits: Vec<Result<(KMeansModel, Vec<usize>), ClusterError>> =
        (0..n_runs as u64).into_par_iter().map(|seed| kmeans_best_of(points, k, seed, n_init)).collect();
    let fits = fits.into_iter().collect::<Result<Vec<_>, _>>()?;
    let mut reference = 0;
    for (i, (m, _)) in fits.iter().enumerate() {
        if m.inertia < fits[reference].0.inertia {
            reference = i;
        }
    }
    let ref_labels = &fits[reference].1;
    let aris: Vec<f64> = fits
        .par_iter()
        .map(|(_, labels)| adjusted_rand_index(labels, ref_labels))
        .collect::<Result<_, _>>()?;
    let n = aris.len() as f64;
    let mean_ari = aris.iter().sum::<f64>() / n;
    let sd_ari = (aris.iter().map(|a| (a - mean_ari).powi(2)).sum::<f64>() / n).sqrt();
    let runs = fits
        .iter()
        .zip(&aris)
        .map(|((m, _), &a)| StabilityRun { seed: m.seed, inertia: m.inertia, ari_vs_reference: a })
        .collect();
    let report = StabilityReport { k, n_runs, mean_ari, sd_ari, reference_seed: reference as u64, runs };
    let (model, labels) = fits.into_iter().nth(reference).expect("reference exists");
    Ok((report, model, labels))
}

pub fn stability(points: &FeatureMatrix, k: usize, n_runs: usize) -> Result<StabilityReport, ClusterError> {
    stability_with_reference(points, k, n_runs, DEFAULT_N_INIT).map(|(r, _, _)| r)
}

/// Mean standardized value of every feature within each cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidTable {
    pub columns: Vec<String>,
    pub sizes: Vec<usize>,
    pub means: Vec<Vec<f64>>,
}

pub fn centroid_summary(k: usize, assignments: &[usize], standardized: &FeatureMatrix) -> Result<CentroidTable, ClusterError> {
    if assignments.len() != standardized.n_rows() {
        return Err(ClusterError::LengthMismatch(assignments.len(), standardized.n_rows()));
    }
    let d = standardized.n_cols();
    let mut sums = vec![vec![0.0; d]; k];
    let mut sizes = vec![0usize; k];
    for (row, &c) in standardized.rows().zip(assignments) {
        if c >= k {
            return Err(ClusterError::InvalidInput(format!("cluster {c} out of range for k = {k}")));
        }
        sizes[c] += 1;
        for (s, v) in sums[c].iter_mut().zip(row) {
            *s += v;
        }
    }
    let means = sums
        .into_iter()
        .zip(&sizes)
        .map(|(s, &n)| s.into_iter().map(|v| if n == 0 { 0.0 } else { v / n as f64 }).collect())
        .collect();
    Ok(CentroidTable { columns: standardized.columns.clone(), sizes, means })
}

/// Renumber clusters by descending size (first appearance breaks ties) so
/// indices are stable for a label map.
pub fn canonical_relabel(model: &mut KMeansModel, labels: &mut [usize]) {
    let k = model.k;
    let mut sizes = vec![0usize; k];
    let mut first = vec![usize::MAX; k];
    for (i, &l) in labels.iter().enumerate() {
        sizes[l] += 1;
        first[l] = first[l].min(i);
    }
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| sizes[b].cmp(&sizes[a]).then(first[a].cmp(&first[b])));
    let mut new_of = vec![0; k];
    for (new, &old) in order.iter().enumerate() {
        new_of[old] = new;
    }
    labels.iter_mut().for_each(|l| *l = new_of[*l]);
    model.centroids = order.iter().map(|&old| model.centroids[old].clone()).collect();
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterConfig {
    pub long_tailed_columns: Vec<String>,
    pub retain: Retain,
    /// Fixed k; when absent the elbow picks from `k_min..=k_max`.
    pub k: Option<usize>,
    pub k_min: usize,
    pub k_max: usize,
    pub elbow_seed: u64,
    pub elbow_n_init: usize,
    pub stability_runs: usize,
    pub stability_n_init: usize,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        ClusterConfig {
            long_tailed_columns: [
                "num_turns",
                "avg_minutes_per_turn",
                "avg_words_per_prompt",
                "copy_paste_events",
                "direct_answer_requests",
                "understanding_queries",
            ]
            .map(String::from)
            .to_vec(),
            retain: Retain::VarianceTarget(0.8),
            k: None,
            k_min: 2,
            k_max: 10,
            elbow_seed: 0,
            elbow_n_init: DEFAULT_N_INIT,
            stability_runs: 50,
            stability_n_init: DEFAULT_N_INIT,
        }
    }
}

/// Everything needed to re-score a raw feature row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    pub standardizer: Standardizer,
    pub pca: PcaModel,
    pub kmeans: KMeansModel,
}

impl ClusterModel {
    pub fn assign(&self, raw: &FeatureMatrix) -> Result<Vec<usize>, ClusterError> {
        let z = self.standardizer.apply(raw)?;
        let scores = transform_pca(&self.pca, &z)?;
        Ok(scores.rows().map(|r| self.kmeans.predict(r)).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterOutcome {
    pub model: ClusterModel,
    pub assignments: Vec<usize>,
    pub standardized: FeatureMatrix,
    pub elbow: Option<ElbowResult>,
    pub stability: StabilityReport,
    pub centroids: CentroidTable,
    pub warnings: Vec<String>,
}

/// Preprocess, reduce, choose k, fit and measure stability. The reported
/// assignment is the reference (lowest-inertia) stability run.
pub fn run_clustering(raw: &FeatureMatrix, config: &ClusterConfig) -> Result<ClusterOutcome, ClusterError> {
    let long: Vec<&str> = config
        .long_tailed_columns
        .iter()
        .map(String::as_str)
        .filter(|c| raw.column_index(c).is_some())
        .collect();
    let pre = preprocess(raw, &long)?;
    let pca = fit_pca(&pre.matrix, config.retain, false)?;
    let scores = transform_pca(&pca, &pre.matrix)?;
    let (k, elbow) = match config.k {
        Some(k) => (k, None),
        None => {
            let e = elbow_select(&scores, config.k_min..=config.k_max, config.elbow_seed, config.elbow_n_init)?;
            (e.chosen_k, Some(e))
        }
    };
    let (stability, mut kmeans, mut assignments) = stability_with_reference(&scores, k, config.stability_runs, config.stability_n_init)?;
    canonical_relabel(&mut kmeans, &mut assignments);
    let centroids = centroid_summary(k, &assignments, &pre.matrix)?;
    Ok(ClusterOutcome {
        model: ClusterModel { standardizer: pre.standardizer, pca, kmeans },
        assignments,
        standardized: pre.matrix,
        elbow,
        stability,
        centroids,
        warnings: pre.warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn cols(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("f{i}")).collect()
    }

    fn matrix(rows: &[Vec<f64>]) -> FeatureMatrix {
        FeatureMatrix::from_rows(cols(rows[0].len()), rows).unwrap()
    }

    #[test]
    fn preprocess_log_then_zscore() {
        let m = FeatureMatrix::from_rows(vec!["a".into(), "b".into()], &[vec![0.0, 3.0], vec![std::f64::consts::E - 1.0, 3.0]]).unwrap();
        let p = preprocess(&m, &["a"]).unwrap();
        let a = p.matrix.column(0);
        assert!((a[0] + 1.0).abs() < 1e-12 && (a[1] - 1.0).abs() < 1e-12);
        assert_eq!(p.matrix.column(1), [0.0, 0.0]);
        assert_eq!(p.warnings.len(), 1);

        let neg = FeatureMatrix::from_rows(vec!["a".into()], &[vec![-1.0], vec![2.0]]).unwrap();
        assert!(matches!(preprocess(&neg, &["a"]), Err(ClusterError::NegativeValueInLogColumn { row: 0, .. })));
        assert!(matches!(preprocess(&neg, &["zz"]), Err(ClusterError::UnknownColumn(_))));
    }

    #[test]
    fn pca_on_a_line() {
        let m = matrix(&(0..20).map(|i| vec![i as f64, i as f64]).collect::<Vec<_>>());
        let p = fit_pca(&m, Retain::NComponents(2), false).unwrap();
        assert!((p.explained_variance_ratios[0] - 1.0).abs() < 1e-12);
        assert!(p.explained_variance_ratios[1].abs() < 1e-12);
        let l = &p.loadings[0];
        assert!((l[0] - l[1]).abs() < 1e-12 && l[0] > 0.0);
    }

    #[test]
    fn variance_target_rule() {
        assert_eq!(components_for_variance(&[0.5, 0.2, 0.13, 0.1, 0.07], 0.823), 3);
        assert_eq!(components_for_variance(&[0.5, 0.5], 1.0), 2);
        assert_eq!(components_for_variance(&[0.9, 0.1], 0.5), 1);
    }

    #[test]
    fn pca_transform_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let rows: Vec<Vec<f64>> = (0..200)
            .map(|_| {
                let a: f64 = rng.gen_range(-1.0..1.0);
                vec![a, 2.0 * a + rng.gen_range(-0.1..0.1), rng.gen_range(-3.0..3.0), 5.0]
            })
            .collect();
        let m = matrix(&rows);
        let p = fit_pca(&m, Retain::NComponents(4), false).unwrap();
        let mean_row = FeatureMatrix::from_rows(m.columns.clone(), std::slice::from_ref(&p.means)).unwrap();
        assert!(transform_pca(&p, &mean_row).unwrap().row(0).iter().all(|v| v.abs() < 1e-12));
        let scores = transform_pca(&p, &m).unwrap();
        let back = reconstruct_pca(&p, &scores);
        for (a, b) in back.data().iter().zip(m.data()) {
            assert!((a - b).abs() < 1e-8);
        }
        for c in 0..4 {
            let col = scores.column(c);
            let var = col.iter().map(|v| v * v).sum::<f64>() / col.len() as f64;
            assert!((var - p.eigenvalues[c]).abs() < 1e-6);
        }
        for (i, a) in p.loadings.iter().enumerate() {
            for (j, b) in p.loadings.iter().enumerate() {
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-8);
            }
        }
        let other = FeatureMatrix::from_rows(cols(3), &[vec![0.0; 3]]).unwrap();
        assert!(matches!(transform_pca(&p, &other), Err(ClusterError::ColumnMismatch { .. })));
        let flat = matrix(&[vec![1.0, 1.0], vec![1.0, 1.0]]);
        assert_eq!(fit_pca(&flat, Retain::NComponents(1), false), Err(ClusterError::DegenerateMatrix));
    }

    #[test]
    fn kmeans_two_pairs() {
        let m = matrix(&[vec![0.0, 0.0], vec![0.0, 1.0], vec![10.0, 0.0], vec![10.0, 1.0]]);
        let (model, labels) = kmeans_fit(&m, 2, 3).unwrap();
        assert_eq!(labels[0], labels[1]);
        assert_eq!(labels[2], labels[3]);
        assert_ne!(labels[0], labels[2]);
        // Each pair contributes 2 · 0.5² around its midpoint.
        assert!((model.inertia - 1.0).abs() < 1e-12);

        let (model, _) = kmeans_fit(&m, 4, 0).unwrap();
        assert_eq!(model.inertia, 0.0);
        assert!(matches!(kmeans_fit(&m, 5, 0), Err(ClusterError::KTooLarge { k: 5, distinct: 4 })));
        assert_eq!(kmeans_fit(&m, 1, 0).unwrap_err(), ClusterError::InvalidK(1));
        assert_eq!(kmeans_fit(&m, 2, 9).unwrap().1, kmeans_fit(&m, 2, 9).unwrap().1);
    }

    #[test]
    fn ari_examples() {
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]).unwrap(), -0.5);
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 2], &[0, 0, 1, 2]).unwrap(), 1.0);
        assert_eq!(adjusted_rand_index(&[0, 0, 1, 2], &["b", "b", "z", "a"]).unwrap(), 1.0);
        assert_eq!(adjusted_rand_index(&[0, 0, 0], &[1, 1, 1]).unwrap(), 1.0);
        assert!(matches!(adjusted_rand_index(&[0, 1], &[0]), Err(ClusterError::LengthMismatch(2, 1))));
    }

    #[test]
    fn elbow_rules() {
        let curve = [(2, 100.0), (3, 60.0), (4, 20.0), (5, 18.0), (6, 17.0)];
        assert_eq!(elbow_from_inertias(&curve).unwrap(), 4);
        let flat = [(2, 10.0), (3, 9.0), (4, 8.0), (5, 7.0)];
        assert_eq!(elbow_from_inertias(&flat).unwrap(), 3);
        assert_eq!(elbow_from_inertias(&curve[..2]), Err(ClusterError::RangeTooShort(2)));
        let m = matrix(&[vec![0.0], vec![1.0], vec![2.0], vec![3.0]]);
        assert_eq!(elbow_select(&m, 2..=3, 0, 1).unwrap_err(), ClusterError::RangeTooShort(2));
    }

    #[test]
    fn stability_single_run_and_k1() {
        let m = matrix(&[vec![0.0], vec![0.1], vec![5.0], vec![5.1]]);
        let s = stability(&m, 2, 1).unwrap();
        assert_eq!((s.mean_ari, s.sd_ari), (1.0, 0.0));
        assert_eq!(stability(&m, 1, 5).unwrap_err(), ClusterError::InvalidK(1));
    }

    #[test]
    fn centroid_summary_identities() {
        let m = matrix(&[vec![1.0, 0.5], vec![1.0, -0.5], vec![-1.0, 0.5], vec![-1.0, -0.5]]);
        let whole = centroid_summary(1, &[0, 0, 0, 0], &m).unwrap();
        assert_eq!(whole.means, [vec![0.0, 0.0]]);
        let split = centroid_summary(2, &[0, 0, 1, 1], &m).unwrap();
        assert_eq!(split.means, [vec![1.0, 0.0], vec![-1.0, 0.0]]);
        assert_eq!(split.sizes, [2, 2]);
    }

    #[test]
    fn relabel_orders_by_size() {
        let m = matrix(&[vec![0.0], vec![9.0], vec![9.1], vec![9.2]]);
        let (mut model, mut labels) = kmeans_fit(&m, 2, 0).unwrap();
        canonical_relabel(&mut model, &mut labels);
        assert_eq!(labels, [1, 0, 0, 0]);
        assert!(model.centroids[0][0] > 9.0);
    }

    fn blobs(seed: u64, n: usize) -> FeatureMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                let c = (i % 3) as f64 * 4.0;
                vec![c + rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), c * 0.5 + rng.gen_range(-1.0..1.0)]
            })
            .collect();
        matrix(&rows)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn lloyd_inertia_never_increases(seed in 0u64..1000, k in 2usize..6) {
            let m = blobs(seed, 60);
            let (model, labels) = kmeans_fit(&m, k, seed).unwrap();
            for w in model.inertia_trace.windows(2) {
                prop_assert!(w[1] <= w[0] + 1e-9);
            }
            for c in 0..k {
                let members: Vec<&[f64]> = m.rows().zip(&labels).filter(|(_, &l)| l == c).map(|(r, _)| r).collect();
                prop_assert!(!members.is_empty());
                for j in 0..m.n_cols() {
                    let mean = members.iter().map(|r| r[j]).sum::<f64>() / members.len() as f64;
                    prop_assert!((mean - model.centroids[c][j]).abs() < 1e-10);
                }
            }
        }

        #[test]
        fn ari_bounds_and_relabel_invariance(a in prop::collection::vec(0usize..4, 2..40), perm_seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(perm_seed);
            let b: Vec<usize> = a.iter().map(|_| rng.gen_range(0..3)).collect();
            let ari = adjusted_rand_index(&a, &b).unwrap();
            prop_assert!((-1.0..=1.0).contains(&ari));
            prop_assert_eq!(adjusted_rand_index(&a, &a).unwrap(), 1.0);
            let renamed: Vec<usize> = a.iter().map(|x| (x + 1) % 4 + 10).collect();
            prop_assert_eq!(adjusted_rand_index(&renamed, &b).unwrap(), ari);
            prop_assert_eq!(adjusted_rand_index(&b, &a).unwrap(), ari);
        }

        #[test]
        fn elbow_scale_invariant(mut inertias in prop::collection::vec(0.0f64..1000.0, 3..10), exp in -4i32..8) {
            inertias.sort_by(|a, b| b.total_cmp(a));
            let curve: Vec<(usize, f64)> = inertias.iter().enumerate().map(|(i, &v)| (i + 2, v)).collect();
            // Power-of-two scaling keeps the second differences exact.
            let factor = 2f64.powi(exp);
            let scaled: Vec<(usize, f64)> = curve.iter().map(|&(k, v)| (k, v * factor)).collect();
            prop_assert_eq!(elbow_from_inertias(&curve).unwrap(), elbow_from_inertias(&scaled).unwrap());
        }
    }
}
