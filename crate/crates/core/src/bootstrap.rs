//! Resampling inference over the fixed set of event estimates.
//!
//! Each draw removes part of the estimates (half of the events, or all
//! estimates tied to a random set of countries) and recomputes a downstream
//! statistic. Draws use independent random streams keyed by draw index.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::analysis::AnalysisTable;
use crate::catalog::DisasterType;
use crate::country::CountryCode;
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::rng::{stream_rng, streams};
use crate::stats;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Keep a random half of the events.
    EventHalf,
    /// Drop every event in `drop_count` random affected countries.
    DisasterCountryDrop,
    /// Drop every estimate from `drop_count` random reporting countries.
    ReportingCountryDrop,
}

impl Scheme {
    pub fn name(self) -> &'static str {
        match self {
            Scheme::EventHalf => "event_half",
            Scheme::DisasterCountryDrop => "disaster_country_drop",
            Scheme::ReportingCountryDrop => "reporting_country_drop",
        }
    }
}

impl core::str::FromStr for Scheme {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "event_half" => Ok(Scheme::EventHalf),
            "disaster_country_drop" => Ok(Scheme::DisasterCountryDrop),
            "reporting_country_drop" => Ok(Scheme::ReportingCountryDrop),
            other => Err(Error::InvalidConfig(format!("unknown bootstrap scheme {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapPlan {
    pub scheme: Scheme,
    pub n_draws: usize,
    pub drop_count: usize,
    pub seed: u64,
}

impl Default for BootstrapPlan {
    fn default() -> Self {
        BootstrapPlan {
            scheme: Scheme::EventHalf,
            n_draws: 100,
            drop_count: 50,
            seed: 0,
        }
    }
}

/// Largest share of missing draws tolerated.
pub const MAX_MISSING_SHARE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Draws<T> {
    pub scheme: Scheme,
    /// One entry per draw; `None` when the statistic was undefined.
    pub values: Vec<Option<T>>,
}

impl<T> Draws<T> {
    pub fn n_missing(&self) -> usize {
        self.values.iter().filter(|v| v.is_none()).count()
    }

    pub fn map<U>(&self, f: impl Fn(&T) -> Option<U>) -> Draws<U> {
        Draws {
            scheme: self.scheme,
            values: self.values.iter().map(|v| v.as_ref().and_then(&f)).collect(),
        }
    }
}

/// Rows kept in draw `draw` of `plan`.
pub fn draw_subset(table: &AnalysisTable, plan: &BootstrapPlan, population: &[CountryCode], draw: usize) -> AnalysisTable {
    let mut rng = stream_rng(plan.seed, streams::BOOTSTRAP, draw as u64);
    match plan.scheme {
        Scheme::EventHalf => {
            let mut ids: Vec<&str> = table.event_ids();
            ids.sort_unstable();
            ids.shuffle(&mut rng);
            let keep_n = ids.len().div_ceil(2);
            let keep: BTreeSet<&str> = ids[..keep_n].iter().copied().collect();
            table.filtered(|r| keep.contains(r.event_id.as_str()))
        }
        Scheme::DisasterCountryDrop | Scheme::ReportingCountryDrop => {
            let mut pop = population.to_vec();
            pop.sort_unstable();
            pop.dedup();
            pop.shuffle(&mut rng);
            let drop: BTreeSet<CountryCode> = pop[..plan.drop_count].iter().copied().collect();
            if plan.scheme == Scheme::DisasterCountryDrop {
                table.filtered(|r| !drop.contains(&r.affected_country))
            } else {
                table.filtered(|r| !drop.contains(&r.report_country))
            }
        }
    }
}

/// Distinct countries on the side of the table a scheme drops from.
pub fn default_population(table: &AnalysisTable, scheme: Scheme) -> Vec<CountryCode> {
    let set: BTreeSet<CountryCode> = table
        .rows
        .iter()
        .map(|r| match scheme {
            Scheme::ReportingCountryDrop => r.report_country,
            _ => r.affected_country,
        })
        .collect();
    set.into_iter().collect()
}

/// Run the plan. For country schemes `population` lists the countries that
/// can be dropped (it may include countries without estimates); when `None`
/// the countries present in the table are used.
pub fn bootstrap<T, S, E>(
    table: &AnalysisTable,
    plan: &BootstrapPlan,
    population: Option<&[CountryCode]>,
    statistic: S,
    exec: &E,
) -> Result<Draws<T>>
where
    T: Send,
    S: Fn(&AnalysisTable) -> Option<T> + Sync + Send,
    E: Executor,
{
    if plan.n_draws < 2 {
        return Err(Error::Bootstrap(format!("need at least 2 draws, got {}", plan.n_draws)));
    }
    let pop: Vec<CountryCode> = match population {
        Some(p) => {
            let set: BTreeSet<CountryCode> = p.iter().copied().collect();
            set.into_iter().collect()
        }
        None => default_population(table, plan.scheme),
    };
    match plan.scheme {
        Scheme::EventHalf => {
            let n = table.event_ids().len();
            if n < 4 {
                return Err(Error::Bootstrap(format!("event bootstrap needs at least 4 events, got {n}")));
            }
        }
        _ => {
            if plan.drop_count >= pop.len() {
                return Err(Error::Bootstrap(format!(
                    "drop_count {} must be below the population of {} countries",
                    plan.drop_count,
                    pop.len()
                )));
            }
        }
    }
    let values = exec.map(plan.n_draws, |d| statistic(&draw_subset(table, plan, &pop, d)));
    let draws = Draws {
        scheme: plan.scheme,
        values,
    };
    let missing = draws.n_missing();
    if missing as f64 > MAX_MISSING_SHARE * plan.n_draws as f64 {
        return Err(Error::Bootstrap(format!(
            "{missing} of {} draws have an undefined statistic",
            plan.n_draws
        )));
    }
    if missing > 0 {
        log::warn!("{missing} of {} bootstrap draws missing", plan.n_draws);
    }
    Ok(draws)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub point: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub p_value: f64,
    pub n_draws: usize,
    pub n_missing: usize,
}

/// Percentile 95% interval and two-sided p-value
/// `max(2 * min(share <= 0, share >= 0), 1 / n_draws)`.
pub fn summarize_bootstrap(draws: &[Option<f64>], point: f64) -> Result<BootstrapSummary> {
    let values: Vec<f64> = draws.iter().flatten().copied().collect();
    if values.len() < 2 {
        return Err(Error::Bootstrap(format!("{} usable draws, need 2", values.len())));
    }
    let sorted = stats::sorted(&values);
    let n = values.len() as f64;
    let le = values.iter().filter(|v| **v <= 0.0).count() as f64 / n;
    let ge = values.iter().filter(|v| **v >= 0.0).count() as f64 / n;
    let floor = 1.0 / draws.len() as f64;
    Ok(BootstrapSummary {
        point,
        ci_lo: stats::quantile_sorted(&sorted, 0.025).unwrap_or(f64::NAN),
        ci_hi: stats::quantile_sorted(&sorted, 0.975).unwrap_or(f64::NAN),
        p_value: (2.0 * le.min(ge)).clamp(floor, 1.0),
        n_draws: draws.len(),
        n_missing: draws.len() - values.len(),
    })
}

/// Mean estimate per disaster type.
pub fn type_means(table: &AnalysisTable, shrunk: bool) -> BTreeMap<DisasterType, f64> {
    let mut acc: BTreeMap<DisasterType, (f64, usize)> = BTreeMap::new();
    for r in &table.rows {
        let e = acc.entry(r.dtype).or_insert((0.0, 0));
        e.0 += r.response(shrunk);
        e.1 += 1;
    }
    acc.into_iter().map(|(d, (s, n))| (d, s / n as f64)).collect()
}

/// Mean estimate per (disaster type, reporting country).
pub fn type_country_means(table: &AnalysisTable, shrunk: bool) -> BTreeMap<(DisasterType, CountryCode), f64> {
    let mut acc: BTreeMap<(DisasterType, CountryCode), (f64, usize)> = BTreeMap::new();
    for r in &table.rows {
        let e = acc.entry((r.dtype, r.report_country)).or_insert((0.0, 0));
        e.0 += r.response(shrunk);
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

/// True when the means are strictly decreasing along `order`; `None` when a
/// type in `order` has no mean.
pub fn ordering_holds(means: &BTreeMap<DisasterType, f64>, order: &[DisasterType]) -> Option<bool> {
    let vals: Option<Vec<f64>> = order.iter().map(|d| means.get(d).copied()).collect();
    Some(vals?.windows(2).all(|w| w[0] > w[1]))
}
