//! OLS with one-way and two-way cluster-robust standard errors.
//!
//! One-way: `V = c · B M B` with bread `B = (X'X)⁻¹`, meat
//! `M = Σ_g s_g s_g'`, cluster scores `s_g = Σ_{i∈g} x_i e_i` and
//! `c = G/(G−1) · (n−1)/(n−k)`. Two-way: `V = V₁ + V₂ − V₁∩₂`, each term with
//! its own correction, using the intersection clustering for the last one.
//! Degrees of freedom are `min(G₁, G₂) − 1`.

use std::collections::HashMap;
use std::hash::Hash;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum StatsError {
    #[error("design matrix is rank deficient")]
    RankDeficient,
    #[error("need at least two clusters, got {0}")]
    SingleCluster(usize),
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("group {0} is empty")]
    EmptyGroup(u8),
    #[error("{0}")]
    InvalidInput(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OlsFit {
    pub x: DMatrix<f64>,
    pub coefficients: DVector<f64>,
    pub residuals: DVector<f64>,
    /// `(X'X)⁻¹`.
    pub bread: DMatrix<f64>,
}

impl OlsFit {
    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn k(&self) -> usize {
        self.x.ncols()
    }
}

/// Least squares via Householder QR. The caller supplies the intercept column.
pub fn ols(y: &DVector<f64>, x: &DMatrix<f64>) -> Result<OlsFit, StatsError> {
    let (n, k) = x.shape();
    if y.len() != n {
        return Err(StatsError::LengthMismatch(format!("{} outcomes for {n} rows", y.len())));
    }
    if n < k || k == 0 {
        return Err(StatsError::RankDeficient);
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let max_diag = (0..k).map(|i| r[(i, i)].abs()).fold(0.0, f64::max);
    if max_diag == 0.0 || (0..k).any(|i| r[(i, i)].abs() <= 1e-10 * max_diag) {
        return Err(StatsError::RankDeficient);
    }
    let qty = qr.q().transpose() * y;
    let coefficients = r
        .solve_upper_triangular(&qty)
        .ok_or(StatsError::RankDeficient)?;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(k, k))
        .ok_or(StatsError::RankDeficient)?;
    let bread = &r_inv * r_inv.transpose();
    let residuals = y - x * &coefficients;
    Ok(OlsFit { x: x.clone(), coefficients, residuals, bread })
}

/// Dense group index per row, numbered by first appearance.
fn group_index<T: Hash + Eq>(ids: &[T]) -> (Vec<usize>, usize) {
    let mut map: HashMap<&T, usize> = HashMap::new();
    let idx = ids
        .iter()
        .map(|id| {
            let next = map.len();
            *map.entry(id).or_insert(next)
        })
        .collect();
    (idx, map.len())
}

fn sandwich(fit: &OlsFit, groups: &[usize], n_groups: usize, factor: f64) -> DMatrix<f64> {
    let k = fit.k();
    let mut scores = vec![DVector::<f64>::zeros(k); n_groups];
    for (i, &g) in groups.iter().enumerate() {
        let e = fit.residuals[i];
        for j in 0..k {
            scores[g][j] += fit.x[(i, j)] * e;
        }
    }
    let mut meat = DMatrix::<f64>::zeros(k, k);
    for s in &scores {
        meat += s * s.transpose();
    }
    (&fit.bread * meat * &fit.bread) * factor
}

/// `G(n−1) / ((G−1)(n−k))`, formed from exact integer products.
fn small_sample_factor(g: usize, n: usize, k: usize) -> f64 {
    (g as f64 * (n - 1) as f64) / ((g - 1) as f64 * (n - k) as f64)
}

fn one_way<T: Hash + Eq>(fit: &OlsFit, ids: &[T]) -> Result<(DMatrix<f64>, usize), StatsError> {
    if ids.len() != fit.n() {
        return Err(StatsError::LengthMismatch(format!("{} cluster ids for {} rows", ids.len(), fit.n())));
    }
    let (groups, g) = group_index(ids);
    if g < 2 {
        return Err(StatsError::SingleCluster(g));
    }
    if fit.n() <= fit.k() {
        return Err(StatsError::InvalidInput("need more rows than coefficients".into()));
    }
    Ok((sandwich(fit, &groups, g, small_sample_factor(g, fit.n(), fit.k())), g))
}

/// HC1 heteroskedasticity-robust covariance, `n/(n−k) · B (Σ x_i x_i' e_i²) B`.
pub fn hc1_vcov(fit: &OlsFit) -> DMatrix<f64> {
    let (n, k) = (fit.n(), fit.k());
    let groups: Vec<usize> = (0..n).collect();
    let factor = n as f64 / (n - k) as f64;
    sandwich(fit, &groups, n, factor)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RobustVcov {
    pub matrix: DMatrix<f64>,
    pub df: usize,
    /// Cluster counts, one per clustering dimension.
    pub n_clusters: Vec<usize>,
    /// Set when a two-way matrix had negative eigenvalues clipped to zero.
    pub truncated: bool,
}

pub enum Clustering<'a, T> {
    OneWay(&'a [T]),
    TwoWay(&'a [T], &'a [T]),
}

pub fn cluster_robust_vcov<T: Hash + Eq>(fit: &OlsFit, clustering: &Clustering<'_, T>) -> Result<RobustVcov, StatsError> {
    match clustering {
        Clustering::OneWay(ids) => {
            let (matrix, g) = one_way(fit, ids)?;
            Ok(RobustVcov { matrix, df: g - 1, n_clusters: vec![g], truncated: false })
        }
        Clustering::TwoWay(a, b) => {
            let (va, ga) = one_way(fit, a)?;
            let (vb, gb) = one_way(fit, b)?;
            let both: Vec<(&T, &T)> = a.iter().zip(b.iter()).collect();
            let (vab, _) = match one_way(fit, &both) {
                Ok(v) => v,
                Err(StatsError::SingleCluster(_)) => unreachable!("intersection has at least as many clusters"),
                Err(e) => return Err(e),
            };
            let mut matrix = va + vb - vab;
            let truncated = clip_negative_eigenvalues(&mut matrix);
            if truncated {
                log::warn!("two-way cluster-robust covariance had negative eigenvalues; clipped to zero");
            }
            Ok(RobustVcov { matrix, df: ga.min(gb) - 1, n_clusters: vec![ga, gb], truncated })
        }
    }
}

fn clip_negative_eigenvalues(m: &mut DMatrix<f64>) -> bool {
    let eig = SymmetricEigen::new(m.clone());
    let scale = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if eig.eigenvalues.iter().all(|&v| v >= -1e-12 * scale) {
        return false;
    }
    let clipped = eig.eigenvalues.map(|v| v.max(0.0));
    *m = &eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose();
    true
}

/// Two-sided p-value of `t` on `df` degrees of freedom.
pub fn two_sided_p(t: f64, df: usize) -> f64 {
    if t.is_nan() {
        return f64::NAN;
    }
    let dist = StudentsT::new(0.0, 1.0, df as f64).expect("df >= 1");
    (2.0 * (1.0 - dist.cdf(t.abs()))).clamp(0.0, 1.0)
}

pub fn t_quantile(p: f64, df: usize) -> f64 {
    StudentsT::new(0.0, 1.0, df as f64).expect("df >= 1").inverse_cdf(p)
}

fn ratio(num: f64, se: f64) -> f64 {
    if se > 0.0 {
        num / se
    } else if num == 0.0 {
        0.0
    } else {
        num.signum() * f64::INFINITY
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegressionResult {
    pub coefficients: Vec<f64>,
    pub vcov: DMatrix<f64>,
    pub se: Vec<f64>,
    pub t: Vec<f64>,
    pub df: usize,
    pub p: Vec<f64>,
    pub n_clusters: Vec<usize>,
}

pub fn regress<T: Hash + Eq>(y: &DVector<f64>, x: &DMatrix<f64>, clustering: &Clustering<'_, T>) -> Result<RegressionResult, StatsError> {
    let fit = ols(y, x)?;
    let v = cluster_robust_vcov(&fit, clustering)?;
    let se: Vec<f64> = (0..fit.k()).map(|j| v.matrix[(j, j)].max(0.0).sqrt()).collect();
    let t: Vec<f64> = fit.coefficients.iter().zip(&se).map(|(b, s)| ratio(*b, *s)).collect();
    let p = t.iter().map(|&t| two_sided_p(t, v.df)).collect();
    Ok(RegressionResult {
        coefficients: fit.coefficients.iter().copied().collect(),
        vcov: v.matrix,
        se,
        t,
        df: v.df,
        p,
        n_clusters: v.n_clusters,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectSize {
    pub cohens_d: f64,
    pub mean_0: f64,
    pub mean_1: f64,
    pub pooled_sd: f64,
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var)
}

/// Cohen's d with the pooled sample sd of the two groups; 0 when the pooled sd is 0.
pub fn cohens_d(group_0: &[f64], group_1: &[f64]) -> EffectSize {
    let (m0, v0) = mean_var(group_0);
    let (m1, v1) = mean_var(group_1);
    let (n0, n1) = (group_0.len() as f64, group_1.len() as f64);
    let dof = n0 + n1 - 2.0;
    let pooled_sd = if dof > 0.0 { (((n0 - 1.0) * v0 + (n1 - 1.0) * v1) / dof).sqrt() } else { 0.0 };
    let diff = m1 - m0;
    let cohens_d = if pooled_sd > 0.0 { diff / pooled_sd } else { 0.0 };
    EffectSize { cohens_d, mean_0: m0, mean_1: m1, pooled_sd }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupComparison {
    /// `mean(group 1) − mean(group 0)`.
    pub diff: f64,
    pub se: f64,
    pub t: f64,
    pub df: usize,
    pub p: f64,
    pub effect: EffectSize,
    pub n: usize,
    pub n_clusters: Vec<usize>,
}

/// Regress `values` on an intercept and the group indicator with clustered
/// errors; the slope's t uses `df = G − 1`.
pub fn group_compare<T: Hash + Eq>(values: &[f64], in_group_1: &[bool], clustering: &Clustering<'_, T>) -> Result<GroupComparison, StatsError> {
    if values.len() != in_group_1.len() {
        return Err(StatsError::LengthMismatch(format!("{} values for {} flags", values.len(), in_group_1.len())));
    }
    let g1: Vec<f64> = values.iter().zip(in_group_1).filter(|(_, &f)| f).map(|(v, _)| *v).collect();
    let g0: Vec<f64> = values.iter().zip(in_group_1).filter(|(_, &f)| !f).map(|(v, _)| *v).collect();
    if g0.is_empty() {
        return Err(StatsError::EmptyGroup(0));
    }
    if g1.is_empty() {
        return Err(StatsError::EmptyGroup(1));
    }
    let n = values.len();
    let x = DMatrix::from_fn(n, 2, |i, j| if j == 0 { 1.0 } else { in_group_1[i] as u8 as f64 });
    let y = DVector::from_column_slice(values);
    let r = regress(&y, &x, clustering)?;
    let effect = cohens_d(&g0, &g1);
    Ok(GroupComparison {
        diff: effect.mean_1 - effect.mean_0,
        se: r.se[1],
        t: r.t[1],
        df: r.df,
        p: r.p[1],
        effect,
        n,
        n_clusters: r.n_clusters,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProportionCi {
    pub proportion: f64,
    pub se: f64,
    pub lo: f64,
    pub hi: f64,
    pub df: usize,
    pub n: usize,
}

/// Mean ± t(df, (1+level)/2) · CRSE from an intercept-only regression,
/// clipped to [0, 1].
pub fn proportion_ci<T: Hash + Eq>(values: &[f64], clustering: &Clustering<'_, T>, level: f64) -> Result<ProportionCi, StatsError> {
    if !(level > 0.0 && level < 1.0) {
        return Err(StatsError::InvalidInput(format!("confidence level {level} outside (0, 1)")));
    }
    if values.is_empty() {
        return Err(StatsError::InvalidInput("no values".into()));
    }
    if let Some(v) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(StatsError::InvalidInput(format!("share {v} outside [0, 1]")));
    }
    // Intercept-only OLS is the sample mean; form it directly so constant
    // shares come out exact.
    let n = values.len();
    let p = values.iter().sum::<f64>() / n as f64;
    let fit = OlsFit {
        x: DMatrix::from_element(n, 1, 1.0),
        coefficients: DVector::from_element(1, p),
        residuals: DVector::from_iterator(n, values.iter().map(|v| v - p)),
        bread: DMatrix::from_element(1, 1, 1.0 / n as f64),
    };
    let v = cluster_robust_vcov(&fit, clustering)?;
    let se = v.matrix[(0, 0)].max(0.0).sqrt();
    let half = t_quantile(0.5 + level / 2.0, v.df) * se;
    Ok(ProportionCi {
        proportion: p,
        se,
        lo: (p - half).clamp(0.0, 1.0),
        hi: (p + half).clamp(0.0, 1.0),
        df: v.df,
        n,
    })
}

/// One line of the stats report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub outcome: String,
    pub contrast: String,
    pub estimate: f64,
    pub se: f64,
    pub t: f64,
    pub df: usize,
    pub p: f64,
    pub d: f64,
    pub n: usize,
    #[serde(rename = "G")]
    pub g: usize,
}

impl StatsRow {
    pub fn from_comparison(outcome: &str, contrast: &str, c: &GroupComparison) -> Self {
        StatsRow {
            outcome: outcome.to_string(),
            contrast: contrast.to_string(),
            estimate: c.diff,
            se: c.se,
            t: c.t,
            df: c.df,
            p: c.p,
            d: c.effect.cohens_d,
            n: c.n,
            g: c.n_clusters.iter().copied().min().unwrap_or(0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn design(xs: &[f64]) -> DMatrix<f64> {
        DMatrix::from_fn(xs.len(), 2, |i, j| if j == 0 { 1.0 } else { xs[i] })
    }

    #[test]
    fn ols_exact_fits() {
        let xs = [1.0, 2.0, 3.0, 4.0];
        let y = DVector::from_vec(xs.iter().map(|x| 2.0 * x).collect());
        let f = ols(&y, &design(&xs)).unwrap();
        assert!(f.coefficients[0].abs() < 1e-12 && (f.coefficients[1] - 2.0).abs() < 1e-12);

        let y = DVector::from_element(4, 3.5);
        let f = ols(&y, &design(&xs)).unwrap();
        assert!((f.coefficients[0] - 3.5).abs() < 1e-12 && f.coefficients[1].abs() < 1e-12);

        let collinear = DMatrix::from_fn(4, 2, |_, _| 1.0);
        assert_eq!(ols(&y, &collinear).unwrap_err(), StatsError::RankDeficient);
    }

    #[test]
    fn singleton_clusters_equal_hc1_exactly() {
        let xs = [0.5, 1.0, 2.5, 3.0, 4.5, 6.0, 7.0];
        let y = DVector::from_vec(vec![1.0, 2.2, 2.9, 4.4, 4.8, 7.1, 6.5]);
        let fit = ols(&y, &design(&xs)).unwrap();
        let ids: Vec<usize> = (0..xs.len()).collect();
        let cr = cluster_robust_vcov(&fit, &Clustering::OneWay(&ids)).unwrap();
        assert_eq!(cr.matrix, hc1_vcov(&fit));
        assert_eq!(cr.df, xs.len() - 1);
    }

    #[test]
    fn two_way_with_identical_clusterings_is_one_way() {
        let xs = [0.5, 1.0, 2.5, 3.0, 4.5, 6.0, 7.0, 8.0];
        let y = DVector::from_vec(vec![1.0, 2.2, 2.9, 4.4, 4.8, 7.1, 6.5, 9.0]);
        let fit = ols(&y, &design(&xs)).unwrap();
        let ids = ["a", "a", "b", "b", "c", "c", "d", "d"];
        let one = cluster_robust_vcov(&fit, &Clustering::OneWay(&ids)).unwrap();
        let two = cluster_robust_vcov(&fit, &Clustering::TwoWay(&ids, &ids)).unwrap();
        assert_eq!(one.matrix, two.matrix);
        assert!(!two.truncated);
        assert_eq!(one.df, two.df);
    }

    #[test]
    fn single_cluster_is_an_error() {
        let xs = [1.0, 2.0, 3.0];
        let fit = ols(&DVector::from_vec(vec![1.0, 3.0, 2.0]), &design(&xs)).unwrap();
        assert_eq!(
            cluster_robust_vcov(&fit, &Clustering::OneWay(&[1, 1, 1])).unwrap_err(),
            StatsError::SingleCluster(1)
        );
        let ids = [1, 1, 1];
        assert!(proportion_ci(&[1.0, 0.0, 1.0], &Clustering::OneWay(&ids), 0.95).is_err());
    }

    #[test]
    fn two_way_df_uses_smaller_dimension() {
        let n = 40;
        let xs: Vec<f64> = (0..n).map(|i| (i % 7) as f64).collect();
        let y = DVector::from_fn(n, |i, _| ((i * 37) % 11) as f64);
        let fit = ols(&y, &design(&xs)).unwrap();
        let students: Vec<usize> = (0..n).map(|i| i / 2).collect();
        let classes: Vec<usize> = (0..n).map(|i| i % 5).collect();
        let v = cluster_robust_vcov(&fit, &Clustering::TwoWay(&students, &classes)).unwrap();
        assert_eq!(v.df, 4);
        assert_eq!(v.n_clusters, [20, 5]);
        let eig = SymmetricEigen::new(v.matrix.clone());
        assert!(eig.eigenvalues.iter().all(|&e| e >= -1e-10));
    }

    #[test]
    fn group_compare_identical_groups() {
        let values = [1.0, 2.0, 3.0, 1.0, 2.0, 3.0];
        let flags = [false, false, false, true, true, true];
        let ids = [0, 1, 2, 3, 4, 5];
        let c = group_compare(&values, &flags, &Clustering::OneWay(&ids)).unwrap();
        assert_eq!(c.diff, 0.0);
        assert_eq!(c.effect.cohens_d, 0.0);
        assert!(c.t.abs() < 1e-9);
        assert!(matches!(group_compare(&values, &[false; 6], &Clustering::OneWay(&ids)), Err(StatsError::EmptyGroup(1))));
    }

    #[test]
    fn df_is_clusters_minus_one() {
        let n = 2000;
        let values: Vec<f64> = (0..n).map(|i| ((i * 7919) % 13) as f64).collect();
        let flags: Vec<bool> = (0..n).map(|i| (i / 10) % 2 == 0).collect();
        let classes: Vec<usize> = (0..n).map(|i| i / 10).collect();
        let c = group_compare(&values, &flags, &Clustering::OneWay(&classes)).unwrap();
        assert_eq!(c.df, 199);
    }

    #[test]
    fn proportion_all_ones() {
        let ids: Vec<usize> = (0..10).collect();
        let ci = proportion_ci(&[1.0; 10], &Clustering::OneWay(&ids), 0.95).unwrap();
        assert_eq!((ci.proportion, ci.lo, ci.hi), (1.0, 1.0, 1.0));
        assert!(proportion_ci(&[1.5], &Clustering::OneWay(&[0]), 0.95).is_err());
    }

    #[test]
    fn p_values() {
        assert!((two_sided_p(0.0, 10) - 1.0).abs() < 1e-12);
        assert!((two_sided_p(2.228138851986, 10) - 0.05).abs() < 1e-6);
        assert!((t_quantile(0.975, 199) - 1.971956544).abs() < 1e-6);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn t_and_d_invariant_under_positive_affine_maps(
            values in prop::collection::vec(-10.0f64..10.0, 12..40),
            a in 0.1f64..10.0,
            b in -5.0f64..5.0,
        ) {
            let n = values.len();
            let flags: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
            let ids: Vec<usize> = (0..n).map(|i| i / 2).collect();
            let c1 = group_compare(&values, &flags, &Clustering::OneWay(&ids)).unwrap();
            let mapped: Vec<f64> = values.iter().map(|v| a * v + b).collect();
            let c2 = group_compare(&mapped, &flags, &Clustering::OneWay(&ids)).unwrap();
            prop_assert!((c1.t - c2.t).abs() <= 1e-7 * (1.0 + c1.t.abs()));
            prop_assert!((c1.effect.cohens_d - c2.effect.cohens_d).abs() <= 1e-9 * (1.0 + c1.effect.cohens_d.abs()));
        }

        #[test]
        fn relabeling_clusters_is_bit_identical(ys in prop::collection::vec(-5.0f64..5.0, 10..30), shift in 1usize..1000) {
            let n = ys.len();
            let xs: Vec<f64> = (0..n).map(|i| (i % 4) as f64).collect();
            let fit = ols(&DVector::from_vec(ys), &design(&xs)).unwrap();
            let ids: Vec<usize> = (0..n).map(|i| i % 5).collect();
            let renamed: Vec<String> = ids.iter().map(|i| format!("c{}", i * 31 + shift)).collect();
            let a = cluster_robust_vcov(&fit, &Clustering::OneWay(&ids)).unwrap();
            let b = cluster_robust_vcov(&fit, &Clustering::OneWay(&renamed)).unwrap();
            prop_assert_eq!(a.matrix, b.matrix);
        }

        #[test]
        fn sandwich_is_symmetric_psd(ys in prop::collection::vec(-5.0f64..5.0, 12..30)) {
            let n = ys.len();
            let xs: Vec<f64> = (0..n).map(|i| ((i * 7) % 5) as f64).collect();
            let fit = ols(&DVector::from_vec(ys), &design(&xs)).unwrap();
            let a: Vec<usize> = (0..n).map(|i| i % 4).collect();
            let b: Vec<usize> = (0..n).map(|i| i / 3).collect();
            for v in [
                cluster_robust_vcov(&fit, &Clustering::OneWay(&a)).unwrap(),
                cluster_robust_vcov(&fit, &Clustering::TwoWay(&a, &b)).unwrap(),
            ] {
                let m = &v.matrix;
                prop_assert!((m[(0, 1)] - m[(1, 0)]).abs() <= 1e-12 * (1.0 + m[(0, 1)].abs()));
                let eig = SymmetricEigen::new(m.clone());
                prop_assert!(eig.eigenvalues.iter().all(|&e| e >= -1e-10));
            }
        }
    }
}
