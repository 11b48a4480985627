//! Fixed-effect absorption by alternating projections.
//!
//! Each factor is a group id per row. Demeaning sweeps over the factors,
//! subtracting (weighted) group means, until every group mean of every
//! factor is below `tol` in absolute value.

use alloc::vec;
use alloc::vec::Vec;

/// One categorical fixed-effect dimension.
#[derive(Clone, Debug)]
pub struct Factor {
    ids: Vec<u32>,
    n_levels: usize,
}

impl Factor {
    /// `ids` need not be dense; they are compacted to `0..n_levels`.
    pub fn new(ids: &[u32]) -> Self {
        let mut seen: Vec<u32> = ids.to_vec();
        seen.sort_unstable();
        seen.dedup();
        let dense = seen.last().is_none_or(|&m| m as usize + 1 == seen.len());
        let ids = if dense {
            ids.to_vec()
        } else {
            ids.iter()
                .map(|v| seen.binary_search(v).unwrap_or(0) as u32)
                .collect()
        };
        Factor {
            ids,
            n_levels: seen.len(),
        }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn n_levels(&self) -> usize {
        self.n_levels
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// True when every level of `self` sits inside a single level of `other`.
    pub fn is_nested_in(&self, other: &Factor) -> bool {
        let mut parent = vec![u32::MAX; self.n_levels];
        for (&a, &b) in self.ids.iter().zip(&other.ids) {
            let p = &mut parent[a as usize];
            if *p == u32::MAX {
                *p = b;
            } else if *p != b {
                return false;
            }
        }
        true
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DemeanReport {
    pub sweeps: usize,
    pub converged: bool,
    pub max_group_mean: f64,
}

#[derive(Clone, Debug)]
pub struct Absorber {
    factors: Vec<Factor>,
    weights: Option<Vec<f64>>,
    inv_mass: Vec<Vec<f64>>,
    n_rows: usize,
    pub tol: f64,
    pub max_sweeps: usize,
}

pub const DEFAULT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_SWEEPS: usize = 200;

impl Absorber {
    /// Build from factors, dropping any factor that another factor is nested in
    /// (its effects are already spanned).
    pub fn new(n_rows: usize, factors: Vec<Factor>, weights: Option<Vec<f64>>) -> Self {
        for f in &factors {
            assert_eq!(f.len(), n_rows, "factor length");
        }
        if let Some(w) = &weights {
            assert_eq!(w.len(), n_rows, "weight length");
        }
        let mut keep = vec![true; factors.len()];
        for a in 0..factors.len() {
            for b in 0..factors.len() {
                if a != b && keep[a] && keep[b] && factors[a].is_nested_in(&factors[b]) {
                    // b is coarser (or identical); a spans it.
                    keep[b] = false;
                }
            }
        }
        let factors: Vec<Factor> = factors
            .into_iter()
            .zip(keep)
            .filter_map(|(f, k)| k.then_some(f))
            .collect();
        let inv_mass = factors
            .iter()
            .map(|f| {
                let mut mass = vec![0.0; f.n_levels];
                for (r, &g) in f.ids.iter().enumerate() {
                    mass[g as usize] += weights.as_ref().map_or(1.0, |w| w[r]);
                }
                mass.into_iter()
                    .map(|m| if m > 0.0 { 1.0 / m } else { 0.0 })
                    .collect()
            })
            .collect();
        Absorber {
            factors,
            weights,
            inv_mass,
            n_rows,
            tol: DEFAULT_TOL,
            max_sweeps: DEFAULT_MAX_SWEEPS,
        }
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    /// Demean one column in place.
    pub fn demean(&self, col: &mut [f64]) -> DemeanReport {
        assert_eq!(col.len(), self.n_rows);
        if self.factors.is_empty() {
            return DemeanReport {
                sweeps: 0,
                converged: true,
                max_group_mean: 0.0,
            };
        }
        let mut sums: Vec<Vec<f64>> = self
            .factors
            .iter()
            .map(|f| vec![0.0; f.n_levels])
            .collect();
        let mut max_mean = f64::INFINITY;
        let mut sweeps = 0;
        while sweeps < self.max_sweeps {
            sweeps += 1;
            max_mean = 0.0f64;
            for (k, f) in self.factors.iter().enumerate() {
                let s = &mut sums[k];
                s.iter_mut().for_each(|v| *v = 0.0);
                match &self.weights {
                    None => {
                        for (&g, &x) in f.ids.iter().zip(col.iter()) {
                            s[g as usize] += x;
                        }
                    }
                    Some(w) => {
                        for ((&g, &x), &wt) in f.ids.iter().zip(col.iter()).zip(w) {
                            s[g as usize] += wt * x;
                        }
                    }
                }
                for (v, &im) in s.iter_mut().zip(&self.inv_mass[k]) {
                    *v *= im;
                    max_mean = max_mean.max(v.abs());
                }
                for (&g, x) in f.ids.iter().zip(col.iter_mut()) {
                    *x -= s[g as usize];
                }
            }
            if max_mean < self.tol {
                return DemeanReport {
                    sweeps,
                    converged: true,
                    max_group_mean: max_mean,
                };
            }
        }
        DemeanReport {
            sweeps,
            converged: false,
            max_group_mean: max_mean,
        }
    }

    /// Largest absolute group mean of `col` over all factors.
    pub fn max_group_mean(&self, col: &[f64]) -> f64 {
        let mut worst = 0.0f64;
        for (k, f) in self.factors.iter().enumerate() {
            let mut s = vec![0.0; f.n_levels];
            for (r, (&g, &x)) in f.ids.iter().zip(col).enumerate() {
                s[g as usize] += self.weights.as_ref().map_or(1.0, |w| w[r]) * x;
            }
            for (v, &im) in s.iter().zip(&self.inv_mass[k]) {
                worst = worst.max((v * im).abs());
            }
        }
        worst
    }

    /// Number of linearly independent absorbed parameters. Exact for up to two
    /// factors (via connected components); for more factors it assumes the
    /// factor graph is connected.
    pub fn absorbed_rank(&self) -> usize {
        match self.factors.len() {
            0 => 0,
            1 => self.factors[0].n_levels,
            2 => {
                let (a, b) = (&self.factors[0], &self.factors[1]);
                a.n_levels + b.n_levels - connected_components(a, b)
            }
            k => {
                log::debug!("absorbed rank for {k} factors assumes a connected design");
                self.factors.iter().map(|f| f.n_levels).sum::<usize>() - (k - 1)
            }
        }
    }
}

/// Components of the bipartite graph linking levels of `a` and `b` that co-occur.
fn connected_components(a: &Factor, b: &Factor) -> usize {
    let n = a.n_levels + b.n_levels;
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for (&x, &y) in a.ids.iter().zip(&b.ids) {
        let rx = find(&mut parent, x as usize);
        let ry = find(&mut parent, a.n_levels + y as usize);
        if rx != ry {
            parent[rx] = ry;
        }
    }
    (0..n).filter(|&i| find(&mut parent, i) == i).count()
}
