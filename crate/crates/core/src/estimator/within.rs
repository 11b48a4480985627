//! OLS after absorbing fixed effects, with classical and clustered covariance.

use alloc::vec;
use alloc::vec::Vec;

use crate::absorb::{Absorber, Factor};
use crate::error::{Error, Result};
use crate::linalg::{floor_eigenvalues, independent_columns, Cholesky, Matrix};

/// Relative tolerance under which a demeaned regressor counts as absorbed.
pub const ABSORBED_REL_TOL: f64 = 1e-10;

#[derive(Clone, Debug)]
pub struct WithinFit {
    /// One entry per input column; `NaN` when the column is not identified.
    pub coef: Vec<f64>,
    pub identified: Vec<bool>,
    /// Indices of identified columns, in input order.
    pub kept: Vec<usize>,
    /// `(X'X)^-1` over the kept (demeaned) columns.
    pub bread: Matrix,
    /// Demeaned kept columns.
    pub x_tilde: Vec<Vec<f64>>,
    pub residuals: Vec<f64>,
    pub weights: Option<Vec<f64>>,
    pub n_obs: usize,
    pub absorbed_rank: usize,
    pub converged: bool,
    pub sweeps: usize,
}

impl WithinFit {
    pub fn df_resid(&self) -> isize {
        self.n_obs as isize - self.kept.len() as isize - self.absorbed_rank as isize
    }

    fn weight(&self, r: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[r])
    }

    /// Position of input column `j` among the kept columns.
    pub fn kept_position(&self, j: usize) -> Option<usize> {
        self.kept.iter().position(|&k| k == j)
    }

    /// Expand a kept-column covariance to per-input-column standard errors
    /// (`NaN` for unidentified columns).
    pub fn standard_errors(&self, cov: &Matrix) -> Vec<f64> {
        let mut se = vec![f64::NAN; self.coef.len()];
        for (a, &j) in self.kept.iter().enumerate() {
            let v = cov[(a, a)];
            se[j] = if v >= 0.0 { crate::math::sqrt(v) } else { f64::NAN };
        }
        se
    }
}

/// Regress `y` on `columns` after absorbing the absorber's fixed effects.
pub fn fit_within(y: &[f64], columns: &[Vec<f64>], absorber: &Absorber) -> WithinFit {
    let n = y.len();
    let w = absorber.weights();
    let wdot = |a: &[f64], b: &[f64]| -> f64 {
        match w {
            None => a.iter().zip(b).map(|(x, y)| x * y).sum(),
            Some(w) => a.iter().zip(b).zip(w).map(|((x, y), w)| w * x * y).sum(),
        }
    };

    let mut y_t = y.to_vec();
    let mut rep = absorber.demean(&mut y_t);
    let mut converged = rep.converged;
    let mut sweeps = rep.sweeps;

    let mut candidates: Vec<usize> = Vec::new();
    let mut demeaned: Vec<Vec<f64>> = Vec::new();
    for (j, col) in columns.iter().enumerate() {
        assert_eq!(col.len(), n, "regressor length");
        let raw_ss = wdot(col, col);
        let mut c = col.clone();
        rep = absorber.demean(&mut c);
        converged &= rep.converged;
        sweeps = sweeps.max(rep.sweeps);
        let ss = wdot(&c, &c);
        if raw_ss > 0.0 && ss > ABSORBED_REL_TOL * raw_ss {
            candidates.push(j);
            demeaned.push(c);
        }
    }

    let k = candidates.len();
    let mut gram = Matrix::zeros(k, k);
    for a in 0..k {
        for b in 0..=a {
            let v = wdot(&demeaned[a], &demeaned[b]);
            gram[(a, b)] = v;
            gram[(b, a)] = v;
        }
    }
    let independent = independent_columns(&gram, ABSORBED_REL_TOL);
    let kept: Vec<usize> = independent.iter().map(|&a| candidates[a]).collect();
    let gram = gram.select(&independent);
    let mut x_tilde: Vec<Vec<f64>> = Vec::with_capacity(independent.len());
    {
        let mut taken: Vec<Option<Vec<f64>>> = demeaned.into_iter().map(Some).collect();
        for &a in &independent {
            x_tilde.push(taken[a].take().unwrap_or_default());
        }
    }

    let mut coef = vec![f64::NAN; columns.len()];
    let mut identified = vec![false; columns.len()];
    let (bread, beta) = if kept.is_empty() {
        (Matrix::zeros(0, 0), Vec::new())
    } else {
        let xty: Vec<f64> = x_tilde.iter().map(|c| wdot(c, &y_t)).collect();
        match Cholesky::new(&gram) {
            Some(ch) => (ch.inverse(), ch.solve(&xty)),
            None => (Matrix::zeros(0, 0), Vec::new()),
        }
    };
    let kept = if beta.is_empty() { Vec::new() } else { kept };
    if kept.is_empty() {
        x_tilde.clear();
    }
    for (a, &j) in kept.iter().enumerate() {
        coef[j] = beta[a];
        identified[j] = true;
    }
    let mut residuals = y_t;
    for (a, c) in x_tilde.iter().enumerate() {
        let b = beta[a];
        residuals.iter_mut().zip(c).for_each(|(e, x)| *e -= b * x);
    }

    WithinFit {
        coef,
        identified,
        kept,
        bread,
        x_tilde,
        residuals,
        weights: w.map(<[f64]>::to_vec),
        n_obs: n,
        absorbed_rank: absorber.absorbed_rank(),
        converged,
        sweeps,
    }
}

/// Homoskedastic covariance `s^2 (X'X)^-1` with `s^2 = e'e / (n - k - absorbed)`.
pub fn classical_cov(fit: &WithinFit) -> Option<Matrix> {
    let df = fit.df_resid();
    if df <= 0 || fit.kept.is_empty() {
        return None;
    }
    let sse: f64 = fit
        .residuals
        .iter()
        .enumerate()
        .map(|(r, e)| fit.weight(r) * e * e)
        .sum();
    let mut v = fit.bread.clone();
    v.scale(sse / df as f64);
    Some(v)
}

/// Sum over clusters of outer products of per-cluster scores.
fn cluster_meat(fit: &WithinFit, clusters: &Factor) -> Matrix {
    let k = fit.kept.len();
    let mut scores = vec![0.0; clusters.n_levels() * k];
    for (r, &g) in clusters.ids().iter().enumerate() {
        let we = fit.weight(r) * fit.residuals[r];
        if we == 0.0 {
            continue;
        }
        let row = &mut scores[g as usize * k..(g as usize + 1) * k];
        for (a, col) in fit.x_tilde.iter().enumerate() {
            row[a] += col[r] * we;
        }
    }
    let mut meat = Matrix::zeros(k, k);
    for s in scores.chunks_exact(k.max(1)) {
        for a in 0..k {
            if s[a] == 0.0 {
                continue;
            }
            for b in 0..k {
                meat[(a, b)] += s[a] * s[b];
            }
        }
    }
    meat
}

/// One-way cluster-robust covariance with the `G/(G-1)` small-sample factor.
pub fn cluster_cov(fit: &WithinFit, ids: &[u32], name: &'static str) -> Result<Matrix> {
    let clusters = Factor::new(ids);
    let g = clusters.n_levels();
    if g < 2 {
        return Err(Error::SingleCluster(name));
    }
    let meat = cluster_meat(fit, &clusters);
    let mut v = Matrix::sandwich(&fit.bread, &meat);
    v.scale(g as f64 / (g as f64 - 1.0));
    Ok(v)
}

#[derive(Clone, Debug)]
pub struct TwoWayCov {
    pub cov: Matrix,
    /// True when negative eigenvalues were floored at zero.
    pub floored: bool,
    pub clusters_a: usize,
    pub clusters_b: usize,
    pub clusters_ab: usize,
}

/// Two-way clustered covariance by inclusion-exclusion:
/// `V = V_a + V_b - V_{a x b}`, each with its own `G/(G-1)` factor, followed
/// by an eigenvalue floor at zero.
pub fn cluster_se_two_way(
    fit: &WithinFit,
    a: &[u32],
    b: &[u32],
    names: (&'static str, &'static str),
) -> Result<TwoWayCov> {
    let fa = Factor::new(a);
    let fb = Factor::new(b);
    if fa.n_levels() < 2 {
        return Err(Error::SingleCluster(names.0));
    }
    if fb.n_levels() < 2 {
        return Err(Error::SingleCluster(names.1));
    }
    let n_b = fb.n_levels() as u64;
    let pair: Vec<u64> = fa
        .ids()
        .iter()
        .zip(fb.ids())
        .map(|(&x, &y)| x as u64 * n_b + y as u64)
        .collect();
    let mut uniq = pair.clone();
    uniq.sort_unstable();
    uniq.dedup();
    let pair_ids: Vec<u32> = pair
        .iter()
        .map(|p| uniq.binary_search(p).unwrap_or(0) as u32)
        .collect();
    let fab = Factor::new(&pair_ids);

    let part = |f: &Factor| -> Matrix {
        let g = f.n_levels() as f64;
        let mut v = Matrix::sandwich(&fit.bread, &cluster_meat(fit, f));
        // A single intersection cluster contributes the plain sandwich.
        if g > 1.0 {
            v.scale(g / (g - 1.0));
        }
        v
    };
    let mut cov = part(&fa);
    cov.add_assign(&part(&fb), 1.0);
    cov.add_assign(&part(&fab), -1.0);
    let (cov, floored) = floor_eigenvalues(&cov);
    Ok(TwoWayCov {
        cov,
        floored,
        clusters_a: fa.n_levels(),
        clusters_b: fb.n_levels(),
        clusters_ab: fab.n_levels(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn intercept_only_is_the_mean() {
        let y = [1.0, 2.0, 6.0];
        let absorber = Absorber::new(3, vec![Factor::new(&[0, 0, 0])], None);
        let fit = fit_within(&y, &[], &absorber);
        // Residuals are deviations from the mean 3.
        assert_eq!(fit.residuals, vec![-2.0, -1.0, 3.0]);
    }

    #[test]
    fn simple_regression_recovers_slope() {
        let x: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 + 0.5 * v).collect();
        let absorber = Absorber::new(10, vec![Factor::new(&[0; 10])], None);
        let fit = fit_within(&y, &[x], &absorber);
        assert!((fit.coef[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn absorbed_column_is_unidentified() {
        let g = [0u32, 0, 1, 1];
        let col = vec![1.0, 1.0, 5.0, 5.0];
        let y = [1.0, 2.0, 3.0, 5.0];
        let absorber = Absorber::new(4, vec![Factor::new(&g)], None);
        let fit = fit_within(&y, &[col], &absorber);
        assert!(!fit.identified[0]);
        assert!(fit.coef[0].is_nan());
    }

    #[test]
    fn single_cluster_is_an_error() {
        let x: Vec<f64> = (0..6).map(|i| (i * i) as f64).collect();
        let y: Vec<f64> = (0..6).map(|i| (i % 3) as f64).collect();
        let absorber = Absorber::new(6, vec![Factor::new(&[0; 6])], None);
        let fit = fit_within(&y, &[x], &absorber);
        assert!(matches!(
            cluster_se_two_way(&fit, &[0; 6], &[0, 1, 0, 1, 0, 1], ("a", "b")),
            Err(Error::SingleCluster("a"))
        ));
    }
}
