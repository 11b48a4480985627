//! Estimates joined with event attributes and dyadic features: the input
//! table for heterogeneity regressions, forests and bootstraps.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::catalog::{Catalog, DisasterType};
use crate::country::CountryCode;
use crate::estimator::EventEstimate;
use crate::features::{Feature, FeatureTable};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisRow {
    pub event_id: String,
    /// Reporting country `i`.
    pub report_country: CountryCode,
    /// Affected country `j`.
    pub affected_country: CountryCode,
    pub dtype: DisasterType,
    pub deaths: u64,
    /// `ln(1 + deaths)`.
    pub log_deaths: f64,
    pub duration_days: u32,
    pub beta: f64,
    pub beta_shrunk: f64,
    pub se: f64,
    pub features: [Option<f64>; Feature::COUNT],
}

impl AnalysisRow {
    pub fn response(&self, shrunk: bool) -> f64 {
        if shrunk {
            self.beta_shrunk
        } else {
            self.beta
        }
    }

    pub fn feature(&self, f: Feature) -> Option<f64> {
        self.features[f.index()]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalysisTable {
    pub rows: Vec<AnalysisRow>,
    /// Estimates skipped because they were undefined or pooled.
    pub skipped_estimates: usize,
    /// Estimates whose event is not in the catalog.
    pub unknown_events: usize,
}

impl AnalysisTable {
    /// Join per-reporting-country estimates with the catalog and, when given,
    /// the (usually z-scored) feature table. Pairs without feature rows keep
    /// all features missing.
    pub fn join(estimates: &[EventEstimate], catalog: &Catalog, features: Option<&FeatureTable>) -> Self {
        let mut table = AnalysisTable::default();
        for e in estimates {
            let Some(i) = e.report_country else {
                table.skipped_estimates += 1;
                continue;
            };
            if !e.is_defined() {
                table.skipped_estimates += 1;
                continue;
            }
            let Some(ev) = catalog.get(&e.event_id) else {
                table.unknown_events += 1;
                continue;
            };
            let features = features
                .and_then(|f| f.get(i, ev.country))
                .map_or([None; Feature::COUNT], |d| d.values);
            table.rows.push(AnalysisRow {
                event_id: e.event_id.clone(),
                report_country: i,
                affected_country: ev.country,
                dtype: ev.dtype,
                deaths: ev.deaths,
                log_deaths: ev.log_deaths(),
                duration_days: ev.duration_days(),
                beta: e.beta,
                beta_shrunk: e.beta_shrunk,
                se: e.se,
                features,
            });
        }
        if table.unknown_events > 0 {
            log::warn!("{} estimates refer to events missing from the catalog", table.unknown_events);
        }
        table
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Distinct event ids in first-appearance order.
    pub fn event_ids(&self) -> Vec<&str> {
        let mut seen = alloc::collections::BTreeSet::new();
        self.rows
            .iter()
            .filter(|r| seen.insert(r.event_id.as_str()))
            .map(|r| r.event_id.as_str())
            .collect()
    }

    /// Keep rows satisfying `keep`.
    pub fn filtered(&self, keep: impl Fn(&AnalysisRow) -> bool) -> AnalysisTable {
        AnalysisTable {
            rows: self.rows.iter().filter(|r| keep(r)).cloned().collect(),
            skipped_estimates: self.skipped_estimates,
            unknown_events: self.unknown_events,
        }
    }
}
