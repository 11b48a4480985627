//! How estimates vary with fatalities and with country connectedness.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::absorb::{Absorber, Factor};
use crate::analysis::{AnalysisRow, AnalysisTable};
use crate::catalog::DisasterType;
use crate::country::CountryCode;
use crate::error::{Error, Result};
use crate::estimator::{cluster_se_two_way, fit_within};
use crate::features::Feature;
use crate::math;
use crate::stats;

/// Shared switches for the regressions in this module.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HeteroOptions {
    /// Use shrunk instead of raw estimates as the outcome.
    pub shrunk: bool,
    /// Weight rows by `1 / se^2`.
    pub precision_weighted: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeathBin {
    pub bin: usize,
    pub n_events: usize,
    pub n_estimates: usize,
    pub mean_beta: f64,
    pub mean_deaths: f64,
    pub mean_log_deaths: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinnedCurve {
    pub bins: Vec<DeathBin>,
    pub requested_bins: usize,
    pub residualized: bool,
}

/// Binned scatter of estimates against `ln(1 + deaths)`: events are ranked by
/// fatalities and split into equal-count bins; each bin reports the mean
/// estimate over all its events' estimates. With `residualize_dtype` the
/// disaster-type means are removed first (the grand mean is added back).
pub fn binned_death_curve(
    table: &AnalysisTable,
    n_bins: usize,
    residualize_dtype: bool,
    options: HeteroOptions,
) -> Result<BinnedCurve> {
    if n_bins == 0 {
        return Err(Error::InvalidConfig(String::from("n_bins must be positive")));
    }
    let mut events: BTreeMap<&str, (f64, u64)> = BTreeMap::new();
    for r in &table.rows {
        events.insert(r.event_id.as_str(), (r.log_deaths, r.deaths));
    }
    if events.is_empty() {
        return Err(Error::TooFewRows { needed: 1, found: 0 });
    }
    let mut n = n_bins;
    if events.len() < n_bins {
        log::warn!("{} events for {} bins; using {} bins", events.len(), n_bins, events.len());
        n = events.len();
    }

    let y: Vec<f64> = if residualize_dtype {
        let mut by_type: BTreeMap<DisasterType, Vec<f64>> = BTreeMap::new();
        for r in &table.rows {
            by_type.entry(r.dtype).or_default().push(r.response(options.shrunk));
        }
        let means: BTreeMap<DisasterType, f64> = by_type
            .iter()
            .map(|(d, v)| (*d, stats::mean(v).unwrap_or(0.0)))
            .collect();
        let all: Vec<f64> = table.rows.iter().map(|r| r.response(options.shrunk)).collect();
        let grand = stats::mean(&all).unwrap_or(0.0);
        table
            .rows
            .iter()
            .map(|r| r.response(options.shrunk) - means[&r.dtype] + grand)
            .collect()
    } else {
        table.rows.iter().map(|r| r.response(options.shrunk)).collect()
    };

    let mut order: Vec<(&str, f64, u64)> = events.iter().map(|(id, (ld, d))| (*id, *ld, *d)).collect();
    order.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(b.0)));
    let n_events = order.len();
    let bin_of: BTreeMap<&str, usize> = order
        .iter()
        .enumerate()
        .map(|(rank, (id, _, _))| (*id, rank * n / n_events))
        .collect();

    let mut bins: Vec<DeathBin> = (0..n)
        .map(|bin| DeathBin {
            bin,
            n_events: 0,
            n_estimates: 0,
            mean_beta: 0.0,
            mean_deaths: 0.0,
            mean_log_deaths: 0.0,
        })
        .collect();
    for (id, ld, d) in &order {
        let b = &mut bins[bin_of[id]];
        b.n_events += 1;
        b.mean_deaths += *d as f64;
        b.mean_log_deaths += ld;
    }
    for (r, v) in table.rows.iter().zip(&y) {
        let b = &mut bins[bin_of[r.event_id.as_str()]];
        b.n_estimates += 1;
        b.mean_beta += v;
    }
    for b in &mut bins {
        b.mean_deaths /= b.n_events as f64;
        b.mean_log_deaths /= b.n_events as f64;
        b.mean_beta /= b.n_estimates as f64;
    }
    Ok(BinnedCurve {
        bins,
        requested_bins: n_bins,
        residualized: residualize_dtype,
    })
}

/// Per reporting country: `xi` from `beta = xi`, and the death gradient `nu`
/// from `beta = a + nu * ln(1 + deaths)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientResult {
    pub report_country: CountryCode,
    pub n: usize,
    pub xi: f64,
    pub xi_se: f64,
    pub intercept: Option<f64>,
    /// `None` when fatalities do not vary.
    pub nu: Option<f64>,
    pub nu_se: Option<f64>,
    /// `nu / xi`; `None` when `xi` is exactly zero or `nu` is undefined.
    pub ratio: Option<f64>,
}

pub const DEFAULT_MIN_EVENTS: usize = 10;

pub fn death_gradient_by_country(
    table: &AnalysisTable,
    min_events: usize,
    options: HeteroOptions,
) -> Vec<GradientResult> {
    let mut groups: BTreeMap<CountryCode, Vec<&AnalysisRow>> = BTreeMap::new();
    for r in &table.rows {
        groups.entry(r.report_country).or_default().push(r);
    }
    let mut out = Vec::new();
    for (country, rows) in groups {
        if rows.len() < min_events.max(2) {
            log::debug!("{country}: {} events, below the floor of {min_events}", rows.len());
            continue;
        }
        let y: Vec<f64> = rows.iter().map(|r| r.response(options.shrunk)).collect();
        let x: Vec<f64> = rows.iter().map(|r| r.log_deaths).collect();
        let n = y.len() as f64;
        let xi = stats::mean(&y).unwrap_or(f64::NAN);
        let ss_y: f64 = y.iter().map(|v| (v - xi) * (v - xi)).sum();
        let xi_se = math::sqrt(ss_y / (n - 1.0) / n);

        let (intercept, nu, nu_se) = match stats::simple_ols(&x, &y) {
            Some((a, b)) => {
                let mx = stats::mean(&x).unwrap_or(0.0);
                let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
                let ssr: f64 = x.iter().zip(&y).map(|(xv, yv)| (yv - a - b * xv) * (yv - a - b * xv)).sum();
                let se = if n > 2.0 {
                    Some(math::sqrt(ssr / (n - 2.0) / sxx))
                } else {
                    None
                };
                (Some(a), Some(b), se)
            }
            None => (None, None, None),
        };
        let ratio = match nu {
            Some(nu) if xi != 0.0 => Some(nu / xi),
            _ => None,
        };
        out.push(GradientResult {
            report_country: country,
            n: rows.len(),
            xi,
            xi_se,
            intercept,
            nu,
            nu_se,
            ratio,
        });
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegressionMode {
    /// `beta = nu * w + controls`.
    Univariate,
    /// `beta = gamma * w * ln(1 + deaths) + nu * w + controls`.
    Interaction,
}

impl RegressionMode {
    pub fn name(self) -> &'static str {
        match self {
            RegressionMode::Univariate => "univariate",
            RegressionMode::Interaction => "interaction",
        }
    }
}

impl core::str::FromStr for RegressionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "univariate" => Ok(RegressionMode::Univariate),
            "interaction" => Ok(RegressionMode::Interaction),
            other => Err(Error::InvalidConfig(format!("unknown mode {other:?}"))),
        }
    }
}

/// The six control sets, in order: none, affected country, reporting
/// country, both countries, event, both countries and event.
pub const SPEC_IDS: [u8; 6] = [1, 2, 3, 4, 5, 6];

/// `(affected country, reporting country, event)` effects included in a spec.
pub fn spec_controls(spec_id: u8) -> Result<(bool, bool, bool)> {
    Ok(match spec_id {
        1 => (false, false, false),
        2 => (true, false, false),
        3 => (false, true, false),
        4 => (true, true, false),
        5 => (false, false, true),
        6 => (true, true, true),
        other => return Err(Error::InvalidConfig(format!("spec id {other} not in 1..=6"))),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpecResult {
    pub feature: Feature,
    pub spec_id: u8,
    pub mode: RegressionMode,
    /// `nu` (univariate) or `gamma` (interaction); `NaN` when undefined.
    pub coef: f64,
    pub se: f64,
    pub t: f64,
    pub n: usize,
    pub defined: bool,
}

/// Share of rows allowed to miss a feature before its regression is skipped.
pub const MAX_MISSING_SHARE: f64 = 0.9;

fn ids_of<T: Ord + Copy>(values: impl Iterator<Item = T>) -> Vec<u32> {
    let v: Vec<T> = values.collect();
    let mut uniq = v.clone();
    uniq.sort_unstable();
    uniq.dedup();
    v.iter().map(|x| uniq.binary_search(x).unwrap_or(0) as u32).collect()
}

/// Regress estimates on one z-scored feature under one control set. Returns
/// `Ok(None)` when the feature is missing for more than 90% of rows.
pub fn connectedness_regression(
    table: &AnalysisTable,
    feature: Feature,
    mode: RegressionMode,
    spec_id: u8,
    options: HeteroOptions,
) -> Result<Option<SpecResult>> {
    let (alpha_j, gamma_i, delta_k) = spec_controls(spec_id)?;
    let rows: Vec<&AnalysisRow> = table.rows.iter().filter(|r| r.feature(feature).is_some()).collect();
    let missing = table.rows.len() - rows.len();
    if table.rows.is_empty() || missing as f64 > MAX_MISSING_SHARE * table.rows.len() as f64 {
        log::warn!("{feature}: missing for {missing} of {} rows, skipped", table.rows.len());
        return Ok(None);
    }
    let n = rows.len();
    let y: Vec<f64> = rows.iter().map(|r| r.response(options.shrunk)).collect();
    let w: Vec<f64> = rows.iter().map(|r| r.feature(feature).unwrap_or(0.0)).collect();
    let mut columns = Vec::new();
    match mode {
        RegressionMode::Univariate => columns.push(w.clone()),
        RegressionMode::Interaction => {
            columns.push(w.iter().zip(&rows).map(|(w, r)| w * r.log_deaths).collect());
            columns.push(w.clone());
            if !delta_k {
                columns.push(rows.iter().map(|r| r.log_deaths).collect());
            }
        }
    }

    let mut factors = vec![Factor::new(&vec![0; n])];
    if alpha_j {
        factors.push(Factor::new(&ids_of(rows.iter().map(|r| r.affected_country))));
    }
    if gamma_i {
        factors.push(Factor::new(&ids_of(rows.iter().map(|r| r.report_country))));
    }
    if delta_k {
        factors.push(Factor::new(&ids_of(rows.iter().map(|r| r.event_id.as_str()))));
    }
    let weights = if options.precision_weighted {
        let w: Vec<f64> = rows.iter().map(|r| 1.0 / (r.se * r.se)).collect();
        if w.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig(String::from(
                "precision weights need finite positive standard errors",
            )));
        }
        Some(w)
    } else {
        None
    };
    let absorber = Absorber::new(n, factors, weights);
    let fit = fit_within(&y, &columns, &absorber);

    let report_ids = ids_of(rows.iter().map(|r| r.report_country));
    let affected_ids = ids_of(rows.iter().map(|r| r.affected_country));
    let se = if fit.identified[0] {
        match cluster_se_two_way(&fit, &report_ids, &affected_ids, ("report_country", "affected_country")) {
            Ok(v) => fit.standard_errors(&v.cov)[0],
            Err(e) => {
                log::warn!("{feature} spec {spec_id}: {e}");
                f64::NAN
            }
        }
    } else {
        f64::NAN
    };
    let coef = fit.coef[0];
    Ok(Some(SpecResult {
        feature,
        spec_id,
        mode,
        coef,
        se,
        t: if se > 0.0 { coef / se } else { f64::NAN },
        n,
        defined: fit.identified[0],
    }))
}

/// All six specs for every requested feature, in (feature, spec) order.
pub fn connectedness_grid(
    table: &AnalysisTable,
    features: &[Feature],
    mode: RegressionMode,
    options: HeteroOptions,
) -> Result<Vec<SpecResult>> {
    let mut out = Vec::new();
    for &f in features {
        for spec in SPEC_IDS {
            if let Some(r) = connectedness_regression(table, f, mode, spec, options)? {
                out.push(r);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Robustness {
    Positive,
    Negative,
    /// Signs disagree across specs.
    Mixed,
    /// Fewer than six defined specs.
    Incomplete,
}

/// A feature is robust when its coefficient keeps one strict sign in all six specs.
pub fn classify_robust(results: &[SpecResult]) -> Robustness {
    let specs: BTreeSet<u8> = results.iter().filter(|r| r.defined).map(|r| r.spec_id).collect();
    if specs.len() < SPEC_IDS.len() {
        return Robustness::Incomplete;
    }
    let defined = results.iter().filter(|r| r.defined);
    if defined.clone().all(|r| r.coef > 0.0) {
        Robustness::Positive
    } else if defined.clone().all(|r| r.coef < 0.0) {
        Robustness::Negative
    } else {
        Robustness::Mixed
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::AnalysisRow;
    use crate::rng::stream_rng;
    use alloc::string::ToString;
    use rand::Rng;

    fn c(s: &str) -> CountryCode {
        CountryCode::new(s).unwrap()
    }

    const REPORTERS: [&str; 6] = ["DEU", "ITA", "MEX", "IND", "USA", "FRA"];
    const AFFECTED: [&str; 5] = ["BGD", "CHN", "PER", "TUR", "NPL"];

    /// Rows for `n_events` events, each reported by every reporter, with
    /// `beta = f(event, reporter, affected)` and a feature `w` per pair.
    fn world(
        n_events: usize,
        seed: u64,
        w: impl Fn(usize, usize) -> f64,
        beta: impl Fn(&mut crate::rng::StreamRng, f64, f64) -> f64,
    ) -> AnalysisTable {
        let mut rng = stream_rng(seed, 1, 0);
        let mut rows = Vec::new();
        for k in 0..n_events {
            let j = k % AFFECTED.len();
            let deaths: u64 = rng.random_range(0..2000);
            let ld = math::ln_1p(deaths as f64);
            for (i, rc) in REPORTERS.iter().enumerate() {
                let wij = w(i, j);
                let mut features = [None; Feature::COUNT];
                features[Feature::SocialShare.index()] = Some(wij);
                features[Feature::DistanceKm.index()] = Some(((i * 7 + j * 3) % 11) as f64 - 5.0);
                let b = beta(&mut rng, wij, ld);
                rows.push(AnalysisRow {
                    event_id: alloc::format!("ev{k:03}"),
                    report_country: c(rc),
                    affected_country: c(AFFECTED[j]),
                    dtype: DisasterType::ALL[k % 3],
                    deaths,
                    log_deaths: ld,
                    duration_days: 1 + (k % 4) as u32,
                    beta: b,
                    beta_shrunk: if b > 0.02 { b } else { 0.0 },
                    se: 0.01,
                    features,
                });
            }
        }
        AnalysisTable {
            rows,
            skipped_estimates: 0,
            unknown_events: 0,
        }
    }

    fn pair_w(i: usize, j: usize) -> f64 {
        (((i * 5 + j * 7) % 13) as f64 - 6.0) / 3.0
    }

    fn noise(rng: &mut crate::rng::StreamRng) -> f64 {
        rng.random::<f64>() - 0.5
    }

    #[test]
    fn binned_curve_reduces_bins_and_is_flat_for_constant_beta() {
        let t = world(30, 1, pair_w, |_, _, _| 0.04);
        let curve = binned_death_curve(&t, 50, false, HeteroOptions::default()).unwrap();
        assert_eq!(curve.bins.len(), 30);
        assert!(curve.bins.iter().all(|b| (b.mean_beta - 0.04).abs() < 1e-12));
        assert!(curve.bins.windows(2).all(|w| w[0].mean_log_deaths <= w[1].mean_log_deaths));
    }

    #[test]
    fn binned_curve_tracks_a_gradient() {
        let t = world(200, 2, pair_w, |_, _, ld| 0.01 * ld);
        let curve = binned_death_curve(&t, 10, true, HeteroOptions::default()).unwrap();
        assert_eq!(curve.bins.len(), 10);
        assert!(curve.bins.iter().all(|b| b.n_events == 20));
        assert!(curve.bins.windows(2).all(|w| w[1].mean_beta >= w[0].mean_beta - 1e-3));
    }

    #[test]
    fn gradient_recovers_planted_ratio() {
        // beta = 0.02 + 0.01 * (ld - mean ld) keeps xi at 0.02 on average.
        let t = world(400, 3, pair_w, |rng, _, ld| 0.02 + 0.01 * (ld - 6.5) + 0.002 * noise(rng));
        let res = death_gradient_by_country(&t, DEFAULT_MIN_EVENTS, HeteroOptions::default());
        assert_eq!(res.len(), REPORTERS.len());
        for r in &res {
            assert!((r.nu.unwrap() - 0.01).abs() < 5e-4, "{r:?}");
            assert!(r.ratio.unwrap() > 0.3 && r.ratio.unwrap() < 0.7, "{r:?}");
        }
    }

    #[test]
    fn gradient_floor_and_degenerate_deaths() {
        let mut t = world(8, 4, pair_w, |_, _, _| 0.0);
        assert!(death_gradient_by_country(&t, 10, HeteroOptions::default()).is_empty());
        for r in &mut t.rows {
            r.log_deaths = 1.0;
        }
        let res = death_gradient_by_country(&t, 5, HeteroOptions::default());
        assert!(res.iter().all(|r| r.nu.is_none() && r.ratio.is_none()));
        // xi is exactly zero, so no ratio even with variation.
        let t = world(20, 4, pair_w, |_, _, _| 0.0);
        let res = death_gradient_by_country(&t, 5, HeteroOptions::default());
        assert!(res.iter().all(|r| r.xi == 0.0 && r.ratio.is_none()));
    }

    #[test]
    fn planted_interaction_is_positive_in_every_spec() {
        let t = world(300, 5, pair_w, |rng, w, ld| 0.02 + 0.004 * w * ld + 0.01 * ld + 0.01 * noise(rng));
        let res = connectedness_grid(
            &t,
            &[Feature::SocialShare, Feature::DistanceKm],
            RegressionMode::Interaction,
            HeteroOptions::default(),
        )
        .unwrap();
        let social: Vec<SpecResult> = res.iter().filter(|r| r.feature == Feature::SocialShare).cloned().collect();
        assert_eq!(social.len(), 6);
        for r in &social {
            assert!((r.coef - 0.004).abs() < 1e-3, "{r:?}");
        }
        assert_eq!(classify_robust(&social), Robustness::Positive);
    }

    #[test]
    fn feature_varying_only_by_affected_country_is_absorbed() {
        let t = world(60, 6, |_, j| j as f64, |rng, _, _| noise(rng));
        for spec in [2, 4, 6] {
            let r = connectedness_regression(&t, Feature::SocialShare, RegressionMode::Univariate, spec, HeteroOptions::default())
                .unwrap()
                .unwrap();
            assert!(!r.defined && r.coef.is_nan(), "spec {spec}: {r:?}");
        }
        let r = connectedness_regression(&t, Feature::SocialShare, RegressionMode::Univariate, 1, HeteroOptions::default())
            .unwrap()
            .unwrap();
        assert!(r.defined);
    }

    #[test]
    fn sign_instability_is_not_robust() {
        let mixed = |signs: [f64; 6]| -> Vec<SpecResult> {
            signs
                .iter()
                .enumerate()
                .map(|(k, s)| SpecResult {
                    feature: Feature::Colony,
                    spec_id: k as u8 + 1,
                    mode: RegressionMode::Univariate,
                    coef: *s,
                    se: 1.0,
                    t: *s,
                    n: 10,
                    defined: true,
                })
                .collect()
        };
        assert_eq!(classify_robust(&mixed([1.0, 2.0, 0.5, 1.0, 3.0, -0.1])), Robustness::Mixed);
        assert_eq!(classify_robust(&mixed([-1.0; 6])), Robustness::Negative);
        assert_eq!(classify_robust(&mixed([1.0; 6])[..5]), Robustness::Incomplete);
    }

    #[test]
    fn rescaled_raw_feature_gives_same_zscore_coefficient() {
        use crate::features::{zscore_features, FeatureTable};
        let t = world(80, 7, pair_w, |rng, w, _| 0.03 * w + noise(rng) * 0.01);
        for scale in [1.0, 17.5] {
            let mut raw = FeatureTable::new();
            for i in 0..REPORTERS.len() {
                for j in 0..AFFECTED.len() {
                    raw.set(c(REPORTERS[i]), c(AFFECTED[j]), Feature::CulturalSimilarity, scale * pair_w(i, j))
                        .unwrap();
                }
            }
            let z = zscore_features(&raw).unwrap();
            let mut t2 = t.clone();
            for r in &mut t2.rows {
                r.features[Feature::CulturalSimilarity.index()] =
                    z.table.value(r.report_country, r.affected_country, Feature::CulturalSimilarity);
            }
            let res = connectedness_regression(&t2, Feature::CulturalSimilarity, RegressionMode::Univariate, 4, HeteroOptions::default())
                .unwrap()
                .unwrap();
            // Compare against the unit-scale run.
            if scale == 1.0 {
                continue;
            }
            let mut t1 = t.clone();
            let mut raw1 = FeatureTable::new();
            for i in 0..REPORTERS.len() {
                for j in 0..AFFECTED.len() {
                    raw1.set(c(REPORTERS[i]), c(AFFECTED[j]), Feature::CulturalSimilarity, pair_w(i, j)).unwrap();
                }
            }
            let z1 = zscore_features(&raw1).unwrap();
            for r in &mut t1.rows {
                r.features[Feature::CulturalSimilarity.index()] =
                    z1.table.value(r.report_country, r.affected_country, Feature::CulturalSimilarity);
            }
            let base = connectedness_regression(&t1, Feature::CulturalSimilarity, RegressionMode::Univariate, 4, HeteroOptions::default())
                .unwrap()
                .unwrap();
            assert!((res.coef - base.coef).abs() < 1e-10, "{} vs {}", res.coef, base.coef);
        }
    }

    #[test]
    fn mostly_missing_feature_is_skipped() {
        let mut t = world(20, 8, pair_w, |_, _, _| 0.0);
        for (k, r) in t.rows.iter_mut().enumerate() {
            if k % 20 != 0 {
                r.features[Feature::SocialShare.index()] = None;
            }
        }
        let r = connectedness_regression(&t, Feature::SocialShare, RegressionMode::Univariate, 1, HeteroOptions::default())
            .unwrap();
        assert!(r.is_none());
        assert!(spec_controls(7).is_err());
        assert_eq!("interaction".parse::<RegressionMode>().unwrap().name(), "interaction");
        assert_eq!(Feature::SocialShare.to_string(), "social_share");
    }
}
