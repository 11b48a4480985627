//! Simulated-disaster prediction grids, percentile-normalized views and
//! equivalent-attention inversion on top of a trained forest.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::catalog::DisasterType;
use crate::country::CountryCode;
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::features::{Feature, FeatureTable};
use crate::forest::{DTYPE, DURATION, LOG_DEATHS};
use crate::forest::ForestModel;
use crate::math;

mod invert;
mod normalize;

pub use invert::{equivalent_deaths, isotonic_increasing, Equivalence};
pub use normalize::{anchor_map, normalize_view, NormalizedValue, NormalizedView, UnitAnchors, UnitStatus, View, MIN_UNIT_VALUES};

/// Ascending death tolls at which scenarios are evaluated.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeathGrid(Vec<u32>);

impl Default for DeathGrid {
    fn default() -> Self {
        DeathGrid::range(10, 300, 5).expect("default grid")
    }
}

impl DeathGrid {
    pub fn range(first: u32, last: u32, step: u32) -> Result<Self> {
        if step == 0 || last < first {
            return Err(Error::Grid(format!("bad range {first}..{last} step {step}")));
        }
        DeathGrid::from_values((first..=last).step_by(step as usize).collect())
    }

    pub fn from_values(values: Vec<u32>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::Grid(String::from("a grid needs at least two points")));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Grid(String::from("grid must be strictly ascending")));
        }
        Ok(DeathGrid(values))
    }

    pub fn values(&self) -> &[u32] {
        &self.0
    }

    pub fn first(&self) -> u32 {
        self.0[0]
    }

    pub fn last(&self) -> u32 {
        self.0[self.0.len() - 1]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Largest gap between neighbouring points.
    pub fn max_step(&self) -> u32 {
        self.0.windows(2).map(|w| w[1] - w[0]).max().unwrap_or(0)
    }
}

/// Predicted response over the death grid for one pair and disaster type.
/// `dtype` is `None` for curves averaged over types.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioGrid {
    pub report_country: CountryCode,
    pub affected_country: CountryCode,
    pub dtype: Option<DisasterType>,
    pub grid: DeathGrid,
    pub beta: Vec<f64>,
}

impl ScenarioGrid {
    pub fn new(
        report_country: CountryCode,
        affected_country: CountryCode,
        dtype: Option<DisasterType>,
        grid: DeathGrid,
        beta: Vec<f64>,
    ) -> Result<Self> {
        if beta.len() != grid.len() {
            return Err(Error::DimensionMismatch(format!("{} predictions for {} grid points", beta.len(), grid.len())));
        }
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(Error::Grid(String::from("non-finite prediction")));
        }
        Ok(ScenarioGrid {
            report_country,
            affected_country,
            dtype,
            grid,
            beta,
        })
    }

    /// Linear interpolation of the raw curve at `deaths`.
    pub fn value_at(&self, deaths: f64) -> Option<f64> {
        invert::interpolate(self.grid.values(), &self.beta, deaths)
    }
}

/// One simulated pair (reporting country `j`, affected country `i`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Pair {
    pub report_country: CountryCode,
    pub affected_country: CountryCode,
}

/// A pair that could not be simulated.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedPair {
    pub pair: Pair,
    pub missing: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub dtypes: Vec<DisasterType>,
    pub grid: DeathGrid,
    /// Duration assigned to every simulated disaster.
    pub duration_days: u32,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            dtypes: DisasterType::ALL.to_vec(),
            grid: DeathGrid::default(),
            duration_days: 1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Simulation {
    pub grids: Vec<ScenarioGrid>,
    pub skipped: Vec<SkippedPair>,
}

fn pair_row(model: &ForestModel, features: &FeatureTable, pair: Pair) -> core::result::Result<Vec<Option<f64>>, String> {
    let dyad = features.get(pair.report_country, pair.affected_country);
    model
        .names
        .iter()
        .map(|n| match n.as_str() {
            DTYPE | LOG_DEATHS | DURATION => Ok(None),
            other => Feature::parse(other)
                .and_then(|f| dyad.and_then(|d| d.get(f)))
                .map(Some)
                .ok_or_else(|| String::from(other)),
        })
        .collect()
}

/// Forest predictions for every pair, disaster type and grid point. Pairs with
/// a missing dyadic feature are skipped and reported.
pub fn simulate_grid(
    model: &ForestModel,
    features: &FeatureTable,
    pairs: &[Pair],
    spec: &ScenarioSpec,
    exec: &impl Executor,
) -> Simulation {
    let pos = |name: &str| model.names.iter().position(|n| n == name);
    let (p_dtype, p_deaths, p_duration) = (pos(DTYPE), pos(LOG_DEATHS), pos(DURATION));
    let jobs = exec.map(pairs.len(), |k| {
        let pair = pairs[k];
        let base = pair_row(model, features, pair).map_err(|missing| SkippedPair { pair, missing })?;
        let mut row: Vec<f64> = base.iter().map(|v| v.unwrap_or(0.0)).collect();
        if let Some(p) = p_duration {
            row[p] = spec.duration_days as f64;
        }
        let mut out = Vec::with_capacity(spec.dtypes.len());
        for &dtype in &spec.dtypes {
            if let Some(p) = p_dtype {
                row[p] = dtype.index() as f64;
            }
            let beta = spec
                .grid
                .values()
                .iter()
                .map(|&c| {
                    if let Some(p) = p_deaths {
                        row[p] = math::ln_1p(c as f64);
                    }
                    model.predict_row(&row)
                })
                .collect();
            out.push(ScenarioGrid {
                report_country: pair.report_country,
                affected_country: pair.affected_country,
                dtype: Some(dtype),
                grid: spec.grid.clone(),
                beta,
            });
        }
        Ok(out)
    });
    let mut sim = Simulation::default();
    for job in jobs {
        match job {
            Ok(grids) => sim.grids.extend(grids),
            Err(skip) => sim.skipped.push(skip),
        }
    }
    if !sim.skipped.is_empty() {
        log::warn!("{} pairs skipped for missing features", sim.skipped.len());
    }
    sim
}

/// Average the type-specific curves of each pair with equal weights per
/// simulated disaster, giving one curve per pair with `dtype = None`.
pub fn average_over_types(grids: &[ScenarioGrid]) -> Result<Vec<ScenarioGrid>> {
    let mut out: Vec<(Pair, ScenarioGrid, usize)> = Vec::new();
    for g in grids {
        let pair = Pair {
            report_country: g.report_country,
            affected_country: g.affected_country,
        };
        match out.iter_mut().find(|(p, _, _)| *p == pair) {
            Some((_, acc, n)) => {
                if acc.grid != g.grid {
                    return Err(Error::Grid(String::from("curves of one pair use different grids")));
                }
                for (a, b) in acc.beta.iter_mut().zip(&g.beta) {
                    *a += b;
                }
                *n += 1;
            }
            None => {
                let mut acc = g.clone();
                acc.dtype = None;
                out.push((pair, acc, 1));
            }
        }
    }
    Ok(out
        .into_iter()
        .map(|(_, mut g, n)| {
            g.beta.iter_mut().for_each(|b| *b /= n as f64);
            g
        })
        .collect())
}

/// Every ordered pair of distinct countries.
pub fn all_pairs(countries: &[CountryCode]) -> Vec<Pair> {
    let mut out = Vec::new();
    for &j in countries {
        for &i in countries {
            if i != j {
                out.push(Pair {
                    report_country: j,
                    affected_country: i,
                });
            }
        }
    }
    out
}
