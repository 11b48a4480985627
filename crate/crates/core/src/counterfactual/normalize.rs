use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::country::CountryCode;
use crate::error::{Error, Result};
use crate::stats;

/// Units with fewer values are skipped.
pub const MIN_UNIT_VALUES: usize = 20;

/// Which country a normalization conditions on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum View {
    /// Within each affected country, across reporting countries.
    CountryOfDisaster,
    /// Within each reporting country, across affected countries.
    CountryOfReporting,
}

impl View {
    pub fn name(self) -> &'static str {
        match self {
            View::CountryOfDisaster => "country_of_disaster",
            View::CountryOfReporting => "country_of_reporting",
        }
    }

    fn unit(self, v: &NormalizedValue) -> CountryCode {
        match self {
            View::CountryOfDisaster => v.affected_country,
            View::CountryOfReporting => v.report_country,
        }
    }
}

impl core::str::FromStr for View {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "country_of_disaster" | "disaster" => Ok(View::CountryOfDisaster),
            "country_of_reporting" | "reporting" => Ok(View::CountryOfReporting),
            other => Err(Error::InvalidConfig(alloc::format!("unknown view {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitStatus {
    Ok,
    TooFewValues,
    /// P95 equals P5.
    Degenerate,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnitAnchors {
    pub country: CountryCode,
    pub n: usize,
    pub p5: Option<f64>,
    pub p95: Option<f64>,
    pub status: UnitStatus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedValue {
    pub report_country: CountryCode,
    pub affected_country: CountryCode,
    pub raw: f64,
    /// `None` when the unit was skipped or degenerate.
    pub norm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizedView {
    pub view: View,
    pub units: Vec<UnitAnchors>,
    pub values: Vec<NormalizedValue>,
}

impl NormalizedView {
    pub fn unit(&self, country: CountryCode) -> Option<&UnitAnchors> {
        self.units.iter().find(|u| u.country == country)
    }
}

/// `2 (x - P5) / (P95 - P5) - 1`, clamped to `[-1, 1]`.
#[inline]
pub fn anchor_map(x: f64, p5: f64, p95: f64) -> f64 {
    (2.0 * (x - p5) / (p95 - p5) - 1.0).clamp(-1.0, 1.0)
}

/// Map `(report, affected, value)` triples onto `[-1, 1]` within each
/// conditioning unit of `view`, anchored at the unit's 5th and 95th
/// percentiles.
pub fn normalize_view(values: &[(CountryCode, CountryCode, f64)], view: View) -> Result<NormalizedView> {
    if values.iter().any(|v| !v.2.is_finite()) {
        return Err(Error::Grid(alloc::string::String::from("non-finite value in view input")));
    }
    let mut out: Vec<NormalizedValue> = values
        .iter()
        .map(|&(j, i, raw)| NormalizedValue {
            report_country: j,
            affected_country: i,
            raw,
            norm: None,
        })
        .collect();
    let mut countries: Vec<CountryCode> = out.iter().map(|v| view.unit(v)).collect();
    countries.sort_unstable();
    countries.dedup();
    let mut units = Vec::with_capacity(countries.len());
    for c in countries {
        let raw: Vec<f64> = out.iter().filter(|v| view.unit(v) == c).map(|v| v.raw).collect();
        let n = raw.len();
        if n < MIN_UNIT_VALUES {
            units.push(UnitAnchors {
                country: c,
                n,
                p5: None,
                p95: None,
                status: UnitStatus::TooFewValues,
            });
            continue;
        }
        let sorted = stats::sorted(&raw);
        let p5 = stats::quantile_sorted(&sorted, 0.05).unwrap_or(f64::NAN);
        let p95 = stats::quantile_sorted(&sorted, 0.95).unwrap_or(f64::NAN);
        let status = if p95 > p5 { UnitStatus::Ok } else { UnitStatus::Degenerate };
        if status == UnitStatus::Ok {
            for v in out.iter_mut().filter(|v| view.unit(v) == c) {
                v.norm = Some(anchor_map(v.raw, p5, p95));
            }
        } else {
            log::warn!("{} unit {c}: 5th and 95th percentiles coincide", view.name());
        }
        units.push(UnitAnchors {
            country: c,
            n,
            p5: Some(p5),
            p95: Some(p95),
            status,
        });
    }
    Ok(NormalizedView {
        view,
        units,
        values: out,
    })
}
