//! Dyadic connectedness features `w_ij` between a reporting country `i` and
//! an affected country `j`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::country::CountryCode;
use crate::error::{Error, Result};
use crate::math;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Feature {
    DistanceKm,
    Contiguity,
    SameCountryEver,
    Colony,
    ReligiousSimilarity,
    LinguisticSimilarity,
    CulturalSimilarity,
    SocialShare,
    GeneticSimilarity,
    GeneticSimilarityVsUsa,
    PreferenceDistance,
    ClimateBeliefDistance,
    ExportShare,
    ImportShare,
    DigitalTrade,
}

/// How a feature's values are constrained.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Domain {
    NonNegative,
    Binary,
    UnitInterval,
    Real,
}

impl Feature {
    pub const COUNT: usize = 15;

    pub const ALL: [Feature; Feature::COUNT] = [
        Feature::DistanceKm,
        Feature::Contiguity,
        Feature::SameCountryEver,
        Feature::Colony,
        Feature::ReligiousSimilarity,
        Feature::LinguisticSimilarity,
        Feature::CulturalSimilarity,
        Feature::SocialShare,
        Feature::GeneticSimilarity,
        Feature::GeneticSimilarityVsUsa,
        Feature::PreferenceDistance,
        Feature::ClimateBeliefDistance,
        Feature::ExportShare,
        Feature::ImportShare,
        Feature::DigitalTrade,
    ];

    /// The ten dyadic features used by the forests. Genetic, preference and
    /// climate-belief measures have ragged coverage; digital trade is left out
    /// to keep the set at ten.
    pub const FOREST_SET: [Feature; 10] = [
        Feature::DistanceKm,
        Feature::Contiguity,
        Feature::SameCountryEver,
        Feature::Colony,
        Feature::ReligiousSimilarity,
        Feature::LinguisticSimilarity,
        Feature::CulturalSimilarity,
        Feature::SocialShare,
        Feature::ExportShare,
        Feature::ImportShare,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Feature::DistanceKm => "distance_km",
            Feature::Contiguity => "contiguity",
            Feature::SameCountryEver => "same_country_ever",
            Feature::Colony => "colony",
            Feature::ReligiousSimilarity => "religious_similarity",
            Feature::LinguisticSimilarity => "linguistic_similarity",
            Feature::CulturalSimilarity => "cultural_similarity",
            Feature::SocialShare => "social_share",
            Feature::GeneticSimilarity => "genetic_similarity",
            Feature::GeneticSimilarityVsUsa => "genetic_similarity_vs_usa",
            Feature::PreferenceDistance => "preference_distance",
            Feature::ClimateBeliefDistance => "climate_belief_distance",
            Feature::ExportShare => "export_share",
            Feature::ImportShare => "import_share",
            Feature::DigitalTrade => "digital_trade",
        }
    }

    pub fn parse(s: &str) -> Option<Feature> {
        let s = s.trim();
        Feature::ALL.into_iter().find(|f| f.name() == s).or(match s {
            "religious" => Some(Feature::ReligiousSimilarity),
            "linguistic" => Some(Feature::LinguisticSimilarity),
            "cultural" => Some(Feature::CulturalSimilarity),
            _ => None,
        })
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn domain(self) -> Domain {
        match self {
            Feature::Contiguity | Feature::SameCountryEver | Feature::Colony => Domain::Binary,
            Feature::ReligiousSimilarity
            | Feature::LinguisticSimilarity
            | Feature::SocialShare
            | Feature::ExportShare
            | Feature::ImportShare => Domain::UnitInterval,
            Feature::DistanceKm | Feature::PreferenceDistance | Feature::ClimateBeliefDistance => {
                Domain::NonNegative
            }
            Feature::CulturalSimilarity
            | Feature::GeneticSimilarity
            | Feature::GeneticSimilarityVsUsa
            | Feature::DigitalTrade => Domain::Real,
        }
    }

    /// Features that may be missing for some pairs.
    pub fn is_optional(self) -> bool {
        matches!(
            self,
            Feature::GeneticSimilarity
                | Feature::GeneticSimilarityVsUsa
                | Feature::PreferenceDistance
                | Feature::ClimateBeliefDistance
        )
    }

    /// `w_ij = w_ji` by construction.
    pub fn is_symmetric(self) -> bool {
        !matches!(
            self,
            Feature::SocialShare | Feature::ExportShare | Feature::ImportShare | Feature::DigitalTrade
        )
    }

    pub fn check(self, value: f64) -> Result<()> {
        let ok = value.is_finite()
            && match self.domain() {
                Domain::NonNegative => value >= 0.0,
                Domain::Binary => value == 0.0 || value == 1.0,
                Domain::UnitInterval => (0.0..=1.0).contains(&value),
                Domain::Real => true,
            };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("{} value {value} out of range", self.name())))
        }
    }
}

impl core::fmt::Display for Feature {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.name())
    }
}

/// The connectedness vector for one ordered pair; `None` marks a missing value.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DyadFeatures {
    pub country_i: CountryCode,
    pub country_j: CountryCode,
    pub values: [Option<f64>; Feature::COUNT],
}

impl DyadFeatures {
    pub fn new(country_i: CountryCode, country_j: CountryCode) -> Self {
        DyadFeatures {
            country_i,
            country_j,
            values: [None; Feature::COUNT],
        }
    }

    pub fn get(&self, f: Feature) -> Option<f64> {
        self.values[f.index()]
    }
}

/// All dyads with feature values, keyed by `(i, j)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureTable {
    dyads: BTreeMap<(CountryCode, CountryCode), DyadFeatures>,
}

impl FeatureTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Set one value after checking its domain. Setting the same value twice
    /// is an error, so duplicated input rows are caught.
    pub fn set(&mut self, i: CountryCode, j: CountryCode, feature: Feature, value: f64) -> Result<()> {
        feature.check(value)?;
        let d = self.dyads.entry((i, j)).or_insert_with(|| DyadFeatures::new(i, j));
        let slot = &mut d.values[feature.index()];
        if slot.is_some() {
            return Err(Error::InvalidConfig(format!("duplicate {feature} for {i}-{j}")));
        }
        *slot = Some(value);
        Ok(())
    }

    pub fn get(&self, i: CountryCode, j: CountryCode) -> Option<&DyadFeatures> {
        self.dyads.get(&(i, j))
    }

    pub fn value(&self, i: CountryCode, j: CountryCode, f: Feature) -> Option<f64> {
        self.get(i, j).and_then(|d| d.get(f))
    }

    pub fn len(&self) -> usize {
        self.dyads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dyads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &DyadFeatures> {
        self.dyads.values()
    }

    /// Every country appearing on either side of a pair, sorted.
    pub fn countries(&self) -> Vec<CountryCode> {
        let mut v: Vec<CountryCode> = self.dyads.keys().flat_map(|(i, j)| [*i, *j]).collect();
        v.sort_unstable();
        v.dedup();
        v
    }

    pub fn column(&self, f: Feature) -> Vec<Option<f64>> {
        self.dyads.values().map(|d| d.get(f)).collect()
    }

    pub fn coverage(&self, f: Feature) -> usize {
        self.dyads.values().filter(|d| d.get(f).is_some()).count()
    }
}

/// Mean and population standard deviation of a feature over all pairs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnScale {
    pub feature: Feature,
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

/// A feature table with every populated column z-scored.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub table: FeatureTable,
    pub scales: Vec<ColumnScale>,
}

impl FeatureMatrix {
    pub fn scale(&self, f: Feature) -> Option<&ColumnScale> {
        self.scales.iter().find(|s| s.feature == f)
    }
}

/// Z-score each column over the pairs where it is present (population sd).
/// Columns with no values stay empty; a column with one value or zero
/// variance is an error naming the column.
pub fn zscore_features(table: &FeatureTable) -> Result<FeatureMatrix> {
    let mut out = table.clone();
    let mut scales = Vec::new();
    for f in Feature::ALL {
        let present: Vec<f64> = table.column(f).into_iter().flatten().collect();
        if present.is_empty() {
            continue;
        }
        if present.len() < 2 {
            return Err(Error::TooFewValues(String::from(f.name())));
        }
        let mean = crate::stats::mean(&present).unwrap_or(0.0);
        let sd = crate::stats::std_dev(&present).unwrap_or(0.0);
        if !(sd > 1e-12 * mean.abs().max(1.0)) {
            return Err(Error::ZeroVariance(String::from(f.name())));
        }
        for d in out.dyads.values_mut() {
            if let Some(v) = &mut d.values[f.index()] {
                *v = (*v - mean) / sd;
            }
        }
        scales.push(ColumnScale {
            feature: f,
            mean,
            sd,
            n: present.len(),
        });
    }
    Ok(FeatureMatrix { table: out, scales })
}

/// `SCI_ij / sum_{k != i} SCI_ik`: the share of `i`'s foreign social ties
/// that point to `j`. Own-country entries are ignored.
pub fn foreign_connection_share(
    sci: &BTreeMap<(CountryCode, CountryCode), f64>,
    i: CountryCode,
    j: CountryCode,
) -> Result<f64> {
    Ok(foreign_connection_shares(sci, i)?.get(&j).copied().unwrap_or(0.0))
}

/// Shares of `i`'s foreign ties for every partner; they sum to one.
pub fn foreign_connection_shares(
    sci: &BTreeMap<(CountryCode, CountryCode), f64>,
    i: CountryCode,
) -> Result<BTreeMap<CountryCode, f64>> {
    row_shares(sci, i).ok_or(Error::NoForeignConnections(i))
}

/// Row-normalized bilateral flows (`flow_ij / sum_{k != i} flow_ik`), used
/// for social ties and for export and import shares. `None` when the row
/// has no positive foreign entry.
pub fn row_shares(
    flows: &BTreeMap<(CountryCode, CountryCode), f64>,
    i: CountryCode,
) -> Option<BTreeMap<CountryCode, f64>> {
    let row: Vec<(CountryCode, f64)> = flows
        .range((i, CountryCode::MIN)..=(i, CountryCode::MAX))
        .filter(|((_, k), v)| *k != i && **v > 0.0)
        .map(|((_, k), v)| (*k, *v))
        .collect();
    let total: f64 = row.iter().map(|(_, v)| v).sum();
    if !(total > 0.0) {
        return None;
    }
    Some(row.into_iter().map(|(k, v)| (k, v / total)).collect())
}

/// Euclidean distance between two trait vectors; `Ok(None)` when any
/// component is missing.
pub fn euclidean_distance(x: &[Option<f64>], y: &[Option<f64>]) -> Result<Option<f64>> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch(format!(
            "trait vectors of length {} and {}",
            x.len(),
            y.len()
        )));
    }
    let mut ss = 0.0;
    for (a, b) in x.iter().zip(y) {
        match (a, b) {
            (Some(a), Some(b)) => ss += (a - b) * (a - b),
            _ => return Ok(None),
        }
    }
    Ok(Some(math::sqrt(ss)))
}

/// Distance between standardized preference profiles (six traits).
pub fn preference_distance(x: &[Option<f64>], y: &[Option<f64>]) -> Result<Option<f64>> {
    euclidean_distance(x, y)
}

/// Distance between climate-belief aggregates, same kernel as preferences.
pub fn climate_belief_distance(x: &[Option<f64>], y: &[Option<f64>]) -> Result<Option<f64>> {
    euclidean_distance(x, y)
}

/// Great-circle distance in km between two (lat, lon) points in degrees.
pub fn haversine_km(a: (f64, f64), b: (f64, f64)) -> f64 {
    const R: f64 = 6371.0;
    let rad = core::f64::consts::PI / 180.0;
    let (la1, lo1) = (a.0 * rad, a.1 * rad);
    let (la2, lo2) = (b.0 * rad, b.1 * rad);
    let h = math::powi(libm::sin((la2 - la1) / 2.0), 2)
        + libm::cos(la1) * libm::cos(la2) * math::powi(libm::sin((lo2 - lo1) / 2.0), 2);
    2.0 * R * libm::asin(math::sqrt(h.min(1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn c(s: &str) -> CountryCode {
        CountryCode::new(s).unwrap()
    }

    fn sci(entries: &[(&str, &str, f64)]) -> BTreeMap<(CountryCode, CountryCode), f64> {
        entries.iter().map(|(a, b, v)| ((c(a), c(b)), *v)).collect()
    }

    #[test]
    fn connection_share_examples() {
        let even = sci(&[("DEU", "ITA", 2.0), ("DEU", "MEX", 2.0)]);
        assert_eq!(foreign_connection_share(&even, c("DEU"), c("ITA")).unwrap(), 0.5);
        let skew = sci(&[("DEU", "ITA", 3.0), ("DEU", "MEX", 1.0)]);
        assert_eq!(foreign_connection_share(&skew, c("DEU"), c("ITA")).unwrap(), 0.75);
        let with_own = sci(&[("DEU", "DEU", 1e6), ("DEU", "ITA", 3.0), ("DEU", "MEX", 1.0)]);
        assert_eq!(foreign_connection_share(&with_own, c("DEU"), c("ITA")).unwrap(), 0.75);
        let shares = foreign_connection_shares(&with_own, c("DEU")).unwrap();
        assert!((shares.values().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn all_zero_foreign_row_is_an_error() {
        let only_own = sci(&[("DEU", "DEU", 5.0), ("DEU", "ITA", 0.0), ("ITA", "DEU", 1.0)]);
        assert!(matches!(
            foreign_connection_share(&only_own, c("DEU"), c("ITA")),
            Err(Error::NoForeignConnections(_))
        ));
    }

    #[test]
    fn distance_examples() {
        let z = [Some(0.0); 6];
        assert_eq!(preference_distance(&z, &z).unwrap(), Some(0.0));
        let mut e = z;
        e[0] = Some(1.0);
        assert_eq!(preference_distance(&e, &z).unwrap(), Some(1.0));
        let d = preference_distance(&[Some(1.0), Some(1.0)], &[Some(-1.0), Some(-1.0)]).unwrap().unwrap();
        assert!((d - 8f64.sqrt()).abs() < 1e-15);
        assert!(preference_distance(&[Some(1.0)], &[Some(1.0), Some(2.0)]).is_err());
        assert_eq!(climate_belief_distance(&[None, Some(1.0)], &[Some(0.0), Some(0.0)]).unwrap(), None);
    }

    #[test]
    fn distance_is_a_metric_on_triples() {
        let pts: Vec<Vec<Option<f64>>> = vec![
            vec![Some(0.3), Some(-1.2), Some(0.5)],
            vec![Some(1.0), Some(0.1), Some(-0.4)],
            vec![Some(-0.7), Some(0.9), Some(2.0)],
        ];
        let d = |a: usize, b: usize| euclidean_distance(&pts[a], &pts[b]).unwrap().unwrap();
        for a in 0..3 {
            for b in 0..3 {
                assert_eq!(d(a, b), d(b, a));
                for k in 0..3 {
                    assert!(d(a, b) <= d(a, k) + d(k, b) + 1e-12);
                }
            }
        }
    }

    fn table_with(values: &[Option<f64>]) -> FeatureTable {
        let codes = ["AAA", "BBB", "CCC", "DDD", "EEE"];
        let mut t = FeatureTable::new();
        for (k, v) in values.iter().enumerate() {
            let (i, j) = (c(codes[k]), c(codes[(k + 1) % codes.len()]));
            t.set(i, j, Feature::DistanceKm, 10.0).unwrap();
            if let Some(v) = v {
                t.set(i, j, Feature::CulturalSimilarity, *v).unwrap();
            }
        }
        t
    }

    #[test]
    fn zscore_examples() {
        let mut t = table_with(&[Some(1.0), Some(2.0), Some(3.0)]);
        t.set(c("AAA"), c("BBB"), Feature::ExportShare, 0.2).unwrap();
        t.set(c("BBB"), c("CCC"), Feature::ExportShare, 0.4).unwrap();
        // distance_km is constant in this table.
        assert!(matches!(zscore_features(&t), Err(Error::ZeroVariance(ref s)) if s == "distance_km"));

        let mut t = FeatureTable::new();
        for (k, v) in [1.0, 2.0, 3.0].iter().enumerate() {
            t.set(c("AAA"), c(["BBB", "CCC", "DDD"][k]), Feature::CulturalSimilarity, *v).unwrap();
        }
        let z = zscore_features(&t).unwrap();
        let col: Vec<f64> = z.table.column(Feature::CulturalSimilarity).into_iter().flatten().collect();
        // Population sd of {1, 2, 3} is sqrt(2/3).
        let r = 1.0 / (2.0 / 3.0f64).sqrt();
        let expect = [-r, 0.0, r];
        for (a, b) in col.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert!(crate::stats::mean(&col).unwrap().abs() < 1e-12);
        assert!((crate::stats::std_dev(&col).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn zscore_keeps_missing_entries_missing() {
        let mut t = FeatureTable::new();
        let js = ["BBB", "CCC", "DDD", "EEE"];
        for (k, v) in [Some(1.0), None, Some(4.0), Some(7.0)].iter().enumerate() {
            t.set(c("AAA"), c(js[k]), Feature::DistanceKm, (k + 1) as f64).unwrap();
            if let Some(v) = v {
                t.set(c("AAA"), c(js[k]), Feature::GeneticSimilarity, *v).unwrap();
            }
        }
        let z = zscore_features(&t).unwrap();
        assert_eq!(z.table.value(c("AAA"), c("CCC"), Feature::GeneticSimilarity), None);
        assert_eq!(z.scale(Feature::GeneticSimilarity).unwrap().n, 3);
        let g = z.table.value(c("AAA"), c("DDD"), Feature::GeneticSimilarity).unwrap();
        assert!(g.abs() < 1e-12);
    }

    #[test]
    fn constant_column_error_names_it() {
        let t = table_with(&[Some(2.0), Some(2.0), Some(2.0)]);
        match zscore_features(&t) {
            Err(Error::ZeroVariance(name)) => assert!(name == "distance_km" || name == "cultural_similarity"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn domains_are_enforced() {
        let mut t = FeatureTable::new();
        assert!(t.set(c("AAA"), c("BBB"), Feature::Contiguity, 0.5).is_err());
        assert!(t.set(c("AAA"), c("BBB"), Feature::SocialShare, 1.5).is_err());
        assert!(t.set(c("AAA"), c("BBB"), Feature::DistanceKm, -1.0).is_err());
        t.set(c("AAA"), c("BBB"), Feature::CulturalSimilarity, -3.0).unwrap();
        assert!(t.set(c("AAA"), c("BBB"), Feature::CulturalSimilarity, -3.0).is_err());
    }

    #[test]
    fn feature_names_round_trip() {
        for f in Feature::ALL {
            assert_eq!(Feature::parse(f.name()), Some(f));
        }
        assert_eq!(Feature::FOREST_SET.len(), 10);
        assert!(Feature::FOREST_SET.iter().all(|f| !f.is_optional()));
    }

    #[test]
    fn haversine_known_distance() {
        // Berlin to Rome, about 1181 km.
        let d = haversine_km((52.52, 13.405), (41.9028, 12.4964));
        assert!((d - 1181.0).abs() < 5.0, "{d}");
    }
}
