//! Disaster-type averages of event estimates.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::EventEstimate;
use crate::catalog::{Catalog, DisasterType};
use crate::country::CountryCode;
use crate::stats;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypeSummary {
    pub dtype: DisasterType,
    pub mean: f64,
    pub n: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypePooling {
    /// Whether shrunk (`true`) or raw estimates were averaged.
    pub shrunk: bool,
    pub overall: Vec<TypeSummary>,
    pub by_country: Vec<(CountryCode, Vec<TypeSummary>)>,
    /// Per disaster type: no-intercept slope of the reporting-country type
    /// means on the reporting-country earthquake means.
    pub relative_to_earthquake: Vec<(DisasterType, f64)>,
}

impl TypePooling {
    pub fn mean(&self, dtype: DisasterType) -> Option<f64> {
        self.overall.iter().find(|s| s.dtype == dtype).map(|s| s.mean)
    }

    pub fn country_mean(&self, country: CountryCode, dtype: DisasterType) -> Option<f64> {
        let (_, rows) = self.by_country.iter().find(|(c, _)| *c == country)?;
        rows.iter().find(|s| s.dtype == dtype).map(|s| s.mean)
    }
}

fn summarize(groups: &BTreeMap<DisasterType, Vec<f64>>) -> Vec<TypeSummary> {
    groups
        .iter()
        .filter_map(|(&dtype, values)| {
            stats::mean(values).map(|mean| TypeSummary {
                dtype,
                mean,
                n: values.len(),
            })
        })
        .collect()
}

/// Unweighted mean of the estimates per disaster type, overall and per
/// reporting country. Undefined estimates and events missing from the catalog
/// are skipped; types without estimates are absent from the output.
pub fn pool_by_type(estimates: &[EventEstimate], catalog: &Catalog, shrunk: bool) -> TypePooling {
    let mut overall: BTreeMap<DisasterType, Vec<f64>> = BTreeMap::new();
    let mut by_country: BTreeMap<CountryCode, BTreeMap<DisasterType, Vec<f64>>> = BTreeMap::new();
    for e in estimates {
        if !e.is_defined() {
            continue;
        }
        let Some(event) = catalog.get(&e.event_id) else {
            continue;
        };
        let v = if shrunk { e.beta_shrunk } else { e.beta };
        overall.entry(event.dtype).or_default().push(v);
        if let Some(c) = e.report_country {
            by_country.entry(c).or_default().entry(event.dtype).or_default().push(v);
        }
    }
    for dtype in DisasterType::ALL {
        if !overall.contains_key(&dtype) {
            log::debug!("no estimates for disaster type {}", dtype.name());
        }
    }

    let by_country: Vec<(CountryCode, Vec<TypeSummary>)> = by_country
        .iter()
        .map(|(&c, groups)| (c, summarize(groups)))
        .collect();

    let mut relative_to_earthquake = Vec::new();
    for dtype in DisasterType::ALL {
        if dtype == DisasterType::Earthquake {
            continue;
        }
        let (x, y): (Vec<f64>, Vec<f64>) = by_country
            .iter()
            .filter_map(|(_, rows)| {
                let get = |d| rows.iter().find(|s| s.dtype == d).map(|s| s.mean);
                Some((get(DisasterType::Earthquake)?, get(dtype)?))
            })
            .unzip();
        if let Some(slope) = stats::slope_through_origin(&x, &y) {
            relative_to_earthquake.push((dtype, slope));
        }
    }

    TypePooling {
        shrunk,
        overall: summarize(&overall),
        by_country,
        relative_to_earthquake,
    }
}
