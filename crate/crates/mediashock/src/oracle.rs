//! Brute-force reference for the event regression: explicit dummies, normal
//! equations solved with a pseudo-inverse, and clustered covariances by
//! direct summation over clusters.

use std::collections::BTreeMap;

use anyhow::ensure;
use mediashock_core::estimator::Design;
use nalgebra::{DMatrix, DVector};

pub const MAX_ROWS: usize = 20_000;

/// Singular values below `RANK_TOL * largest` count as zero.
const RANK_TOL: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct OracleFit {
    /// Coefficients on the leading regressors; `NaN` when not identified.
    pub coef: Vec<f64>,
    pub identified: Vec<bool>,
    pub se_classical: Vec<f64>,
    pub se_two_way: Vec<f64>,
    pub rank: usize,
    pub n_obs: usize,
}

fn rank(m: &DMatrix<f64>) -> usize {
    let sv = m.clone().svd(false, false).singular_values;
    let max = sv.iter().copied().fold(0.0, f64::max);
    sv.iter().filter(|&&s| s > RANK_TOL * max).count()
}

fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let max = svd.singular_values.iter().copied().fold(0.0, f64::max);
    svd.pseudo_inverse(RANK_TOL * max).expect("svd with vectors")
}

/// OLS of `y` on `x` by normal equations and pseudo-inverse.
pub fn dense_ols(x: &DMatrix<f64>, y: &[f64]) -> DVector<f64> {
    let y = DVector::from_column_slice(y);
    pinv(&(x.transpose() * x)) * x.transpose() * y
}

fn cluster_meat(x: &DMatrix<f64>, e: &DVector<f64>, ids: &[u64]) -> (DMatrix<f64>, usize) {
    let p = x.ncols();
    let mut scores: BTreeMap<u64, DVector<f64>> = BTreeMap::new();
    for (r, id) in ids.iter().enumerate() {
        let s = scores.entry(*id).or_insert_with(|| DVector::zeros(p));
        *s += x.row(r).transpose() * e[r];
    }
    let mut meat = DMatrix::zeros(p, p);
    for s in scores.values() {
        meat += s * s.transpose();
    }
    (meat, scores.len())
}

/// Set negative eigenvalues of a symmetric matrix to zero.
fn floor_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    if m.is_empty() {
        return m.clone();
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.clone().symmetric_eigen();
    if eig.eigenvalues.iter().all(|&l| l >= 0.0) {
        return sym;
    }
    let l = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0)));
    &eig.eigenvectors * l * eig.eigenvectors.transpose()
}

/// Regress the design outcome on `columns` plus one dummy per dyad and per
/// day. Standard errors use the same conventions as the estimator:
/// classical with `n - rank` degrees of freedom, and two-way clustered by
/// source and destination with `G/(G-1)` factors and an eigenvalue floor.
pub fn dense_ols_oracle(design: &Design, columns: &[Vec<f64>]) -> anyhow::Result<OracleFit> {
    let n = design.len();
    ensure!(n <= MAX_ROWS, "dense oracle limited to {MAX_ROWS} rows, got {n}");
    let k = columns.len();
    let dyads: Vec<u32> = {
        let mut v = design.dyad.clone();
        v.sort_unstable();
        v.dedup();
        v
    };
    let days: Vec<u32> = {
        let mut v = design.day.clone();
        v.sort_unstable();
        v.dedup();
        v
    };
    let p = k + dyads.len() + days.len().saturating_sub(1);
    let mut x = DMatrix::zeros(n, p);
    for r in 0..n {
        for (j, c) in columns.iter().enumerate() {
            x[(r, j)] = c[r];
        }
        x[(r, k + dyads.binary_search(&design.dyad[r]).expect("dyad"))] = 1.0;
        let d = days.binary_search(&design.day[r]).expect("day");
        if d > 0 {
            x[(r, k + dyads.len() + d - 1)] = 1.0;
        }
    }
    // rank(X) = rank(X'X); dropping column j of X drops row and column j of X'X.
    let xtx = x.transpose() * &x;
    let full_rank = rank(&xtx);
    let identified: Vec<bool> = (0..k)
        .map(|j| {
            let without = xtx.clone().remove_column(j).remove_row(j);
            rank(&without) < full_rank
        })
        .collect();

    let bread = pinv(&xtx);
    let beta = &bread * x.transpose() * DVector::from_column_slice(&design.y);
    let e = DVector::from_column_slice(&design.y) - &x * &beta;

    let kept: Vec<usize> = (0..k).filter(|&j| identified[j]).collect();
    let block = |m: &DMatrix<f64>| DMatrix::from_fn(kept.len(), kept.len(), |a, b| m[(kept[a], kept[b])]);

    let df = n as f64 - full_rank as f64;
    let sigma2 = e.dot(&e) / df;
    let classical = block(&bread) * sigma2;

    let source: Vec<u64> = design.source.iter().map(|&s| s as u64).collect();
    let dest: Vec<u64> = design.dest.iter().map(|&d| d as u64).collect();
    let both: Vec<u64> = design.source.iter().zip(&design.dest).map(|(&s, &d)| ((s as u64) << 16) | d as u64).collect();
    let part = |ids: &[u64]| {
        let (meat, g) = cluster_meat(&x, &e, ids);
        let v = &bread * meat * &bread;
        let factor = if g > 1 { g as f64 / (g as f64 - 1.0) } else { 1.0 };
        block(&v) * factor
    };
    let two_way = floor_psd(&(part(&source) + part(&dest) - part(&both)));

    let mut out = OracleFit {
        coef: vec![f64::NAN; k],
        identified: identified.clone(),
        se_classical: vec![f64::NAN; k],
        se_two_way: vec![f64::NAN; k],
        rank: full_rank,
        n_obs: n,
    };
    for (a, &j) in kept.iter().enumerate() {
        out.coef[j] = beta[j];
        out.se_classical[j] = classical[(a, a)].max(0.0).sqrt();
        out.se_two_way[j] = two_way[(a, a)].max(0.0).sqrt();
    }
    Ok(out)
}

/// Treatment columns as the estimator builds them: pooled, or one per
/// reporting country with treated rows.
pub fn treat_columns(design: &Design, by_report_country: bool) -> Vec<Vec<f64>> {
    if !by_report_country {
        return vec![design.treat.iter().map(|&t| f64::from(u8::from(t))).collect()];
    }
    let mut reporters: Vec<u16> = design
        .treat
        .iter()
        .zip(&design.report_country)
        .filter_map(|(&t, &c)| t.then_some(c))
        .collect();
    reporters.sort_unstable();
    reporters.dedup();
    reporters
        .into_iter()
        .map(|c| {
            design
                .treat
                .iter()
                .zip(&design.report_country)
                .map(|(&t, &rc)| f64::from(u8::from(t && rc == c)))
                .collect()
        })
        .collect()
}
