//! Per-event two-way fixed-effects estimation.
//!
//! For each disaster the outcome is regressed on a treatment indicator
//! (destination = affected country, day within `[t_k, t_k + tau]`) after
//! absorbing dyad and day effects. Reporting-country and source-level
//! effects are constant within a dyad and therefore already absorbed by
//! the dyad effect, so they are not encoded separately.

mod design;
mod pool;
pub mod within;

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use bitflags::bitflags;
use serde::{Deserialize, Serialize};

pub use design::{build_design, Design, DesignRow};
pub use pool::{pool_by_type, TypePooling, TypeSummary};
pub use within::{classical_cov, cluster_cov, cluster_se_two_way, fit_within, TwoWayCov, WithinFit};

use crate::absorb::{Absorber, Factor};
use crate::country::CountryCode;
use crate::error::{Error, Result};
use crate::linalg::Matrix;

bitflags! {
    #[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
    #[serde(transparent)]
    pub struct EstimateFlags: u16 {
        /// No identifying variation; beta is undefined.
        const UNDEFINED = 1 << 0;
        /// Standard error could not be computed or is zero.
        const SE_UNDEFINED = 1 << 1;
        /// Demeaning hit the sweep cap before reaching tolerance.
        const NOT_CONVERGED = 1 << 2;
        /// Event window truncated at the panel edge.
        const CLIPPED = 1 << 3;
        /// Window overlaps another event in the same country.
        const OVERLAP = 1 << 4;
        /// Clustered covariance had negative eigenvalues floored at zero.
        const PSD_FLOORED = 1 << 5;
        /// Reference category fixed at zero.
        const REFERENCE = 1 << 6;
    }
}

impl EstimateFlags {
    const NAMES: [(EstimateFlags, &'static str); 7] = [
        (EstimateFlags::UNDEFINED, "undefined"),
        (EstimateFlags::SE_UNDEFINED, "se_undefined"),
        (EstimateFlags::NOT_CONVERGED, "not_converged"),
        (EstimateFlags::CLIPPED, "clipped"),
        (EstimateFlags::OVERLAP, "overlap"),
        (EstimateFlags::PSD_FLOORED, "psd_floored"),
        (EstimateFlags::REFERENCE, "reference"),
    ];

    /// `|`-joined flag names, `-` when empty.
    pub fn label(self) -> String {
        let mut out = String::new();
        for (f, name) in Self::NAMES {
            if self.contains(f) {
                if !out.is_empty() {
                    out.push('|');
                }
                out.push_str(name);
            }
        }
        if out.is_empty() {
            out.push('-');
        }
        out
    }

    pub fn parse_label(s: &str) -> Option<EstimateFlags> {
        let mut flags = EstimateFlags::empty();
        if s == "-" || s.is_empty() {
            return Some(flags);
        }
        for part in s.split('|') {
            let (f, _) = Self::NAMES.iter().find(|(_, n)| *n == part)?;
            flags |= *f;
        }
        Some(flags)
    }
}

/// Which covariance estimator supplies the standard error behind `tstat`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeKind {
    /// Two-way clustered by source and destination.
    #[default]
    TwoWay,
    /// Homoskedastic OLS.
    Classical,
    /// One-way clustered by dyad (source x destination).
    Dyad,
}

impl core::str::FromStr for SeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two_way" | "twoway" => Ok(SeKind::TwoWay),
            "classical" => Ok(SeKind::Classical),
            "dyad" => Ok(SeKind::Dyad),
            other => Err(Error::InvalidConfig(alloc::format!("unknown se kind {other:?}"))),
        }
    }
}

/// Hard-thresholding rule applied to t-statistics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShrinkRule {
    pub threshold: f64,
    /// Compare `|t|` instead of `t`.
    pub two_sided: bool,
}

impl Default for ShrinkRule {
    fn default() -> Self {
        ShrinkRule {
            threshold: 1.65,
            two_sided: false,
        }
    }
}

impl ShrinkRule {
    pub fn passes(&self, tstat: f64) -> bool {
        let t = if self.two_sided { tstat.abs() } else { tstat };
        t >= self.threshold
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateOptions {
    pub by_report_country: bool,
    pub se_kind: SeKind,
    pub shrink: ShrinkRule,
}

impl Default for EstimateOptions {
    fn default() -> Self {
        EstimateOptions {
            by_report_country: true,
            se_kind: SeKind::TwoWay,
            shrink: ShrinkRule::default(),
        }
    }
}

/// One coverage-increase estimate for an event and reporting country.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventEstimate {
    pub event_id: String,
    /// `None` for the pooled estimate.
    pub report_country: Option<CountryCode>,
    pub beta: f64,
    pub se: f64,
    pub tstat: f64,
    pub beta_shrunk: f64,
    pub n_obs: usize,
    pub flags: EstimateFlags,
}

impl EventEstimate {
    pub fn is_defined(&self) -> bool {
        !self.flags.contains(EstimateFlags::UNDEFINED) && self.beta.is_finite()
    }

    fn from_parts(
        event_id: &str,
        report_country: Option<CountryCode>,
        beta: f64,
        se: f64,
        n_obs: usize,
        mut flags: EstimateFlags,
        rule: &ShrinkRule,
    ) -> Self {
        if !beta.is_finite() {
            flags |= EstimateFlags::UNDEFINED;
        }
        if !(se > 0.0) || !se.is_finite() {
            flags |= EstimateFlags::SE_UNDEFINED;
        }
        let tstat = if flags.intersects(EstimateFlags::UNDEFINED | EstimateFlags::SE_UNDEFINED) {
            f64::NAN
        } else {
            beta / se
        };
        let mut e = EventEstimate {
            event_id: String::from(event_id),
            report_country,
            beta: if flags.contains(EstimateFlags::UNDEFINED) {
                f64::NAN
            } else {
                beta
            },
            se,
            tstat,
            beta_shrunk: 0.0,
            n_obs,
            flags,
        };
        e.apply_shrink(rule);
        e
    }

    fn apply_shrink(&mut self, rule: &ShrinkRule) {
        self.beta_shrunk = if self.tstat.is_finite() && rule.passes(self.tstat) {
            self.beta
        } else {
            0.0
        };
    }
}

/// Re-apply a shrinkage rule: `beta_shrunk = beta` when the t-statistic
/// passes, else 0 (undefined estimates always shrink to 0 and keep their flag).
pub fn shrink_estimates(estimates: &mut [EventEstimate], rule: &ShrinkRule) {
    for e in estimates {
        e.apply_shrink(rule);
    }
}

/// Regression output for one event.
#[derive(Clone, Debug)]
pub struct EventFit {
    pub estimates: Vec<EventEstimate>,
    pub fit: WithinFit,
    pub two_way: Option<TwoWayCov>,
    pub classical: Option<Matrix>,
}

fn check_design(design: &Design) -> Result<()> {
    let days = Design::n_levels(&design.day);
    if days < 2 {
        return Err(Error::TooFewLevels {
            what: "days",
            needed: 2,
            found: days,
        });
    }
    let dyads = Design::n_levels(&design.dyad);
    if dyads < 2 {
        return Err(Error::TooFewLevels {
            what: "dyads",
            needed: 2,
            found: dyads,
        });
    }
    if !design.treat.iter().any(|t| !*t) {
        return Err(Error::NoBaselineDays(design.event_id.clone()));
    }
    Ok(())
}

fn dyad_day_absorber(design: &Design) -> Absorber {
    Absorber::new(
        design.len(),
        vec![Factor::new(&design.dyad), Factor::new(&design.day)],
        None,
    )
}

/// Fit `y` on the given columns, absorbing dyad and day effects, and compute
/// the covariance matrices. The design is used as given; own-country rows
/// must already be removed.
pub fn fit_design_columns(design: &Design, columns: &[Vec<f64>]) -> (WithinFit, Option<TwoWayCov>, Option<Matrix>, EstimateFlags) {
    let absorber = dyad_day_absorber(design);
    let fit = fit_within(&design.y, columns, &absorber);
    let mut flags = EstimateFlags::empty();
    if !fit.converged {
        log::warn!("demeaning did not converge for event {}", design.event_id);
        flags |= EstimateFlags::NOT_CONVERGED;
    }
    let dest32: Vec<u32> = design.dest.iter().map(|&d| d as u32).collect();
    let two_way = if fit.kept.is_empty() {
        None
    } else {
        match cluster_se_two_way(&fit, &design.source, &dest32, ("source", "dest")) {
            Ok(v) => Some(v),
            Err(e) => {
                log::warn!("event {}: {e}", design.event_id);
                None
            }
        }
    };
    let classical = classical_cov(&fit);
    (fit, two_way, classical, flags)
}

fn standard_errors(
    design: &Design,
    fit: &WithinFit,
    two_way: Option<&TwoWayCov>,
    classical: Option<&Matrix>,
    kind: SeKind,
) -> (Vec<f64>, EstimateFlags) {
    let nan = || vec![f64::NAN; fit.coef.len()];
    match kind {
        SeKind::TwoWay => match two_way {
            Some(v) => (
                fit.standard_errors(&v.cov),
                if v.floored {
                    EstimateFlags::PSD_FLOORED
                } else {
                    EstimateFlags::empty()
                },
            ),
            None => (nan(), EstimateFlags::empty()),
        },
        SeKind::Classical => (
            classical.map_or_else(nan, |v| fit.standard_errors(v)),
            EstimateFlags::empty(),
        ),
        SeKind::Dyad => match cluster_cov(fit, &design.dyad, "dyad") {
            Ok(v) => (fit.standard_errors(&v), EstimateFlags::empty()),
            Err(_) => (nan(), EstimateFlags::empty()),
        },
    }
}

/// Estimate the coverage increase for one event: pooled, or one coefficient
/// per reporting country (treatment interacted with reporting-country
/// indicators in a single regression).
pub fn estimate_event(design: &Design, options: &EstimateOptions) -> Result<EventFit> {
    let design = &own_filtered(design);
    check_design(design)?;
    let n = design.len();
    let mut labels: Vec<Option<CountryCode>> = Vec::new();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    if options.by_report_country {
        let mut reporters: Vec<u16> = design
            .treat
            .iter()
            .zip(&design.report_country)
            .filter_map(|(&t, &c)| t.then_some(c))
            .collect();
        reporters.sort_unstable();
        reporters.dedup();
        for c in reporters {
            let col: Vec<f64> = (0..n)
                .map(|r| f64::from(u8::from(design.treat[r] && design.report_country[r] == c)))
                .collect();
            labels.push(Some(design.countries[c as usize]));
            columns.push(col);
        }
    } else {
        labels.push(None);
        columns.push(design.treat.iter().map(|&t| f64::from(u8::from(t))).collect());
    }

    let (fit, two_way, classical, base_flags) = fit_design_columns(design, &columns);
    let (se, se_flags) = standard_errors(design, &fit, two_way.as_ref(), classical.as_ref(), options.se_kind);
    let estimates = labels
        .iter()
        .enumerate()
        .map(|(j, label)| {
            let mut flags = base_flags | se_flags;
            if !fit.identified[j] {
                flags |= EstimateFlags::UNDEFINED;
            }
            EventEstimate::from_parts(
                &design.event_id,
                *label,
                fit.coef[j],
                se[j],
                n,
                flags,
                &options.shrink,
            )
        })
        .collect();
    Ok(EventFit {
        estimates,
        fit,
        two_way,
        classical,
    })
}

fn own_filtered(design: &Design) -> Design {
    if design.report_country.iter().zip(&design.dest).any(|(a, b)| a == b) {
        design.without_own_country()
    } else {
        design.clone()
    }
}

pub const KAPPA_MAX: i32 = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KappaCoef {
    pub kappa: i32,
    pub beta: f64,
    pub se: f64,
    pub flags: EstimateFlags,
}

/// Day-by-day coverage profile around an event, pooled across reporting countries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlexibleProfile {
    pub event_id: String,
    pub entries: Vec<KappaCoef>,
}

impl FlexibleProfile {
    pub fn get(&self, kappa: i32) -> Option<&KappaCoef> {
        self.entries.iter().find(|e| e.kappa == kappa)
    }
}

/// Replace the single treatment window with one indicator per event day
/// `kappa` in `[-7, 7]` on destination-country rows. When the window leaves
/// no destination-country day outside that grid, `kappa = -7` becomes the
/// reference and is reported as 0 with the `REFERENCE` flag.
pub fn estimate_event_flexible(design: &Design, se_kind: SeKind) -> Result<FlexibleProfile> {
    let design = &own_filtered(design);
    check_design(design)?;
    let j = design.event_country;
    let n = design.len();
    let mut present: Vec<i32> = (-KAPPA_MAX..=KAPPA_MAX)
        .filter(|&k| (0..n).any(|r| design.dest[r] == j && design.event_time[r] == k))
        .collect();
    if present.len() < (2 * KAPPA_MAX + 1) as usize {
        log::warn!(
            "event {}: window covers {} of {} event days",
            design.event_id,
            present.len(),
            2 * KAPPA_MAX + 1
        );
    }
    let has_outside = (0..n).any(|r| {
        design.dest[r] == j && design.event_time[r].abs() > KAPPA_MAX
    });
    let reference = if has_outside || present.is_empty() {
        None
    } else {
        Some(present.remove(0))
    };
    let columns: Vec<Vec<f64>> = present
        .iter()
        .map(|&k| {
            (0..n)
                .map(|r| f64::from(u8::from(design.dest[r] == j && design.event_time[r] == k)))
                .collect()
        })
        .collect();
    let (fit, two_way, classical, base_flags) = fit_design_columns(design, &columns);
    let (se, se_flags) = standard_errors(design, &fit, two_way.as_ref(), classical.as_ref(), se_kind);
    let mut entries: Vec<KappaCoef> = present
        .iter()
        .enumerate()
        .map(|(c, &kappa)| {
            let mut flags = base_flags | se_flags;
            if !fit.identified[c] {
                flags |= EstimateFlags::UNDEFINED;
            }
            if !(se[c] > 0.0) {
                flags |= EstimateFlags::SE_UNDEFINED;
            }
            KappaCoef {
                kappa,
                beta: fit.coef[c],
                se: se[c],
                flags,
            }
        })
        .collect();
    if let Some(kappa) = reference {
        entries.insert(
            0,
            KappaCoef {
                kappa,
                beta: 0.0,
                se: f64::NAN,
                flags: EstimateFlags::REFERENCE,
            },
        );
    }
    Ok(FlexibleProfile {
        event_id: design.event_id.clone(),
        entries,
    })
}

#[cfg(test)]
mod tests;
