//! Synthetic media panels with planted event effects.
//!
//! Counts for source `s`, destination `d` and day `t` are drawn with mean
//! `exp(base_sd + shock_t + beta)`, where `beta` is the planted effect of any
//! event in `d` whose treatment days cover `t`, seen by sources from other
//! countries. The planted effect for event `k` and reporting country `c` is
//!
//! `type_effect[dtype_k] + gradient * (ld_k - mean ld) + interaction * z(social_share_cj) * ld_k`
//!
//! with `ld = ln(1 + deaths)`. Every day draws from its own random stream, so
//! the panel does not depend on the number of threads.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure};
use mediashock_core::catalog::{Catalog, DisasterEvent, DisasterType};
use mediashock_core::features::{self, Feature, FeatureTable};
use mediashock_core::panel::{PanelSpan, PanelStore, SourceRecord, SourceRegistry};
use mediashock_core::rng::{stream_rng, streams, StreamRng};
use mediashock_core::{CountryCode, Day};
use rand::Rng;
use rand_distr::{Binomial, Distribution, Gamma, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::io::{self, TruthRow};

/// Country codes used by generated worlds, in assignment order.
pub const COUNTRY_POOL: [&str; 60] = [
    "DEU", "BGD", "ITA", "MEX", "IND", "USA", "FRA", "GBR", "ESP", "BRA", "CHN", "JPN", "IDN", "PHL", "PAK", "NGA",
    "EGY", "TUR", "IRN", "THA", "VNM", "KEN", "ETH", "ZAF", "ARG", "COL", "PER", "CHL", "AUS", "CAN", "RUS", "UKR",
    "POL", "NLD", "BEL", "SWE", "NOR", "GRC", "PRT", "NPL", "HTI", "MMR", "AFG", "SDN", "MAR", "DZA", "SAU", "IRQ",
    "KOR", "MYS", "LKA", "ECU", "BOL", "VEN", "GTM", "CUB", "ROU", "HUN", "AUT", "CHE",
];

/// 2020-01-01.
pub const DEFAULT_FIRST_DAY: Day = Day(18262);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Noise {
    Poisson,
    /// Gamma-Poisson mixture with shape `r` (variance `mu + mu^2 / r`).
    NegBin { r: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub n_sources: usize,
    pub n_countries: usize,
    pub n_days: usize,
    pub first_day: Day,
    pub n_events: usize,
    /// Mean article count of a typical dyad-day.
    pub base_rate: f64,
    /// Sd of log dyad base rates.
    pub dyad_scale: f64,
    /// Sd of the common log day shock.
    pub day_scale: f64,
    pub type_effects: Vec<(DisasterType, f64)>,
    /// Planted slope in centered `ln(1 + deaths)`.
    pub death_gradient: f64,
    /// Planted slope on `z(social_share) * ln(1 + deaths)`.
    pub interaction: f64,
    pub noise: Noise,
    /// Planted treatment days after the start day (inclusive window `[t, t + tau]`).
    pub tau: u32,
    /// Quiet days kept around each event window; same-country windows never overlap.
    pub margin: u32,
    /// Share of articles tagged as disaster coverage.
    pub disaster_share: f64,
    pub seed: u64,
}

impl WorldConfig {
    /// 200 sources, 40 countries, three years, 300 events with effects 0 to 0.08.
    pub fn reference(seed: u64) -> Self {
        WorldConfig {
            n_sources: 200,
            n_countries: 40,
            n_days: 1096,
            first_day: DEFAULT_FIRST_DAY,
            n_events: 300,
            base_rate: 1500.0,
            dyad_scale: 0.3,
            day_scale: 0.1,
            type_effects: vec![
                (DisasterType::Earthquake, 0.08),
                (DisasterType::Technological, 0.06),
                (DisasterType::Wildfire, 0.04),
                (DisasterType::Storm, 0.02),
                (DisasterType::Flood, 0.0),
            ],
            death_gradient: 0.004,
            interaction: 0.0,
            noise: Noise::Poisson,
            tau: 3,
            margin: 14,
            disaster_share: 0.1,
            seed,
        }
    }

    /// No planted effects at all.
    pub fn null(seed: u64) -> Self {
        let mut c = WorldConfig::reference(seed);
        c.n_sources = 80;
        c.n_days = 365;
        c.n_events = 60;
        c.death_gradient = 0.0;
        c.type_effects.iter_mut().for_each(|t| t.1 = 0.0);
        c
    }

    /// Type effects plus a social-ties by fatalities interaction.
    pub fn interaction(seed: u64) -> Self {
        let mut c = WorldConfig::reference(seed);
        c.n_sources = 120;
        c.n_days = 730;
        c.n_events = 160;
        c.interaction = 0.004;
        c
    }

    /// A few thousand rows; for tests and demos.
    pub fn small(seed: u64) -> Self {
        let mut c = WorldConfig::reference(seed);
        c.n_sources = 24;
        c.n_countries = 8;
        c.n_days = 240;
        c.n_events = 40;
        c.base_rate = 200.0;
        c
    }

    pub fn preset(name: &str, seed: u64) -> anyhow::Result<Self> {
        Ok(match name {
            "reference" => WorldConfig::reference(seed),
            "null" => WorldConfig::null(seed),
            "interaction" => WorldConfig::interaction(seed),
            "small" => WorldConfig::small(seed),
            other => bail!("unknown preset {other:?} (reference, null, interaction, small)"),
        })
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        ensure!(self.n_countries >= 2 && self.n_countries <= COUNTRY_POOL.len(), "n_countries must lie in 2..={}", COUNTRY_POOL.len());
        ensure!(self.n_sources >= self.n_countries, "need at least one source per country");
        ensure!(self.base_rate > 0.0, "base_rate must be positive");
        ensure!(self.dyad_scale >= 0.0 && self.day_scale >= 0.0, "scales must be non-negative");
        ensure!((0.0..=1.0).contains(&self.disaster_share), "disaster_share must lie in [0, 1]");
        ensure!(!self.type_effects.is_empty(), "at least one disaster type is needed");
        ensure!(
            self.type_effects.iter().all(|t| t.1.is_finite()) && self.death_gradient.is_finite() && self.interaction.is_finite(),
            "planted effects must be finite"
        );
        if let Noise::NegBin { r } = self.noise {
            ensure!(r > 0.0, "negative binomial shape must be positive");
        }
        ensure!(self.tau <= self.margin, "tau must not exceed the margin");
        Ok(())
    }

    pub fn countries(&self) -> Vec<CountryCode> {
        COUNTRY_POOL[..self.n_countries]
            .iter()
            .map(|c| CountryCode::new(c).expect("valid pool code"))
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct World {
    pub config: WorldConfig,
    pub store: PanelStore,
    pub catalog: Catalog,
    pub features: FeatureTable,
    pub truth: Vec<TruthRow>,
}

impl World {
    pub fn truth_map(&self) -> BTreeMap<(String, CountryCode), f64> {
        self.truth
            .iter()
            .map(|t| ((t.event_id.clone(), t.report_country), t.beta_true))
            .collect()
    }

    /// Write `registry.csv`, `counts.csv`, `events.csv`, `features.csv` and `truth.csv`.
    pub fn write(&self, dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
        Ok(vec![
            io::write_registry(&dir.join("registry.csv"), self.store.registry())?,
            io::write_counts(&dir.join("counts.csv"), &self.store)?,
            io::write_events(&dir.join("events.csv"), &self.catalog)?,
            io::write_features(&dir.join("features.csv"), &self.features)?,
            io::write_truth(&dir.join("truth.csv"), &self.truth)?,
        ])
    }
}

fn normal(rng: &mut StreamRng) -> f64 {
    Normal::new(0.0, 1.0).expect("unit normal").sample(rng)
}

/// Synthetic connectedness for every ordered pair of distinct countries.
pub fn generate_features(countries: &[CountryCode], seed: u64) -> anyhow::Result<FeatureTable> {
    let mut rng = stream_rng(seed, streams::WORLD, 2);
    let n = countries.len();
    let loc: Vec<(f64, f64)> = (0..n)
        .map(|_| (rng.random_range(-50.0..60.0), rng.random_range(-180.0..180.0)))
        .collect();
    let traits = |rng: &mut StreamRng, coverage: f64| -> Vec<Option<Vec<Option<f64>>>> {
        (0..n)
            .map(|_| {
                let v: Vec<Option<f64>> = (0..6).map(|_| Some(normal(rng))).collect();
                (rng.random::<f64>() < coverage).then_some(v)
            })
            .collect()
    };
    let prefs = traits(&mut rng, 0.75);
    let climate = traits(&mut rng, 0.65);
    let genetic: Vec<Option<f64>> = (0..n)
        .map(|_| {
            let g = normal(&mut rng);
            (rng.random::<f64>() < 0.7).then_some(g)
        })
        .collect();
    let usa = countries.iter().position(|c| c.as_str() == "USA");

    // Symmetric pair draws, indexed by the unordered pair.
    let mut sym: BTreeMap<(usize, usize), [f64; 6]> = BTreeMap::new();
    for a in 0..n {
        for b in a + 1..n {
            sym.insert(
                (a, b),
                [
                    rng.random(),
                    rng.random(),
                    rng.random(),
                    rng.random(),
                    normal(&mut rng),
                    normal(&mut rng),
                ],
            );
        }
    }
    // Binary features always have both values, even in tiny worlds: the
    // closest pair is contiguous and the lowest draws flag at least one pair.
    let min_of = |k: usize| sym.values().map(|v| v[k]).fold(f64::INFINITY, f64::min);
    let (same_cut, colony_cut) = (min_of(0).max(0.03), min_of(1).max(0.04));
    let mut nearest = f64::INFINITY;
    for a in 0..n {
        for b in a + 1..n {
            nearest = nearest.min(features::haversine_km(loc[a], loc[b]));
        }
    }
    let mut sci = BTreeMap::new();
    let mut flows = BTreeMap::new();
    let mut digital = BTreeMap::new();
    for a in 0..n {
        for b in 0..n {
            if a == b {
                continue;
            }
            let d = features::haversine_km(loc[a], loc[b]);
            let key = (countries[a], countries[b]);
            let s = sym[&(a.min(b), a.max(b))];
            sci.insert(key, (s[5] + normal(&mut rng) * 0.5).exp() / (1.0 + d / 2000.0));
            flows.insert(key, (normal(&mut rng)).exp() / (1.0 + d / 3000.0));
            digital.insert(key, normal(&mut rng));
        }
    }
    let mut table = FeatureTable::new();
    for a in 0..n {
        let social = features::foreign_connection_shares(&sci, countries[a])?;
        let exports = features::row_shares(&flows, countries[a]).unwrap_or_default();
        let imports_of: BTreeMap<(CountryCode, CountryCode), f64> = flows.iter().map(|(&(i, j), &v)| ((j, i), v)).collect();
        let imports = features::row_shares(&imports_of, countries[a]).unwrap_or_default();
        for b in 0..n {
            if a == b {
                continue;
            }
            let (i, j) = (countries[a], countries[b]);
            let s = sym[&(a.min(b), a.max(b))];
            let d = features::haversine_km(loc[a], loc[b]);
            let mut set = |f: Feature, v: f64| table.set(i, j, f, v);
            set(Feature::DistanceKm, d)?;
            set(Feature::Contiguity, f64::from(u8::from(d < 1200.0 || d <= nearest)))?;
            set(Feature::SameCountryEver, f64::from(u8::from(s[0] <= same_cut)))?;
            set(Feature::Colony, f64::from(u8::from(s[1] <= colony_cut)))?;
            set(Feature::ReligiousSimilarity, s[2])?;
            set(Feature::LinguisticSimilarity, s[3])?;
            set(Feature::CulturalSimilarity, s[4])?;
            set(Feature::SocialShare, social.get(&j).copied().unwrap_or(0.0))?;
            set(Feature::ExportShare, exports.get(&j).copied().unwrap_or(0.0))?;
            set(Feature::ImportShare, imports.get(&j).copied().unwrap_or(0.0))?;
            set(Feature::DigitalTrade, digital[&(i, j)])?;
            if let (Some(x), Some(y)) = (genetic[a], genetic[b]) {
                set(Feature::GeneticSimilarity, -(x - y).abs())?;
            }
            if let (Some(u), Some(x), Some(y)) = (usa, genetic[a], genetic[b]) {
                if let Some(g_usa) = genetic[u] {
                    set(Feature::GeneticSimilarityVsUsa, (x - g_usa).abs() - (y - g_usa).abs())?;
                }
            }
            if let (Some(x), Some(y)) = (&prefs[a], &prefs[b]) {
                if let Some(v) = features::preference_distance(x, y)? {
                    set(Feature::PreferenceDistance, v)?;
                }
            }
            if let (Some(x), Some(y)) = (&climate[a], &climate[b]) {
                if let Some(v) = features::climate_belief_distance(x, y)? {
                    set(Feature::ClimateBeliefDistance, v)?;
                }
            }
        }
    }
    Ok(table)
}

fn generate_events(config: &WorldConfig, countries: &[CountryCode]) -> anyhow::Result<Catalog> {
    let mut rng = stream_rng(config.seed, streams::WORLD, 3);
    let margin = config.margin as usize;
    let max_dur = 5usize;
    ensure!(
        config.n_days > 2 * margin + max_dur,
        "span of {} days is too short for an event window ({} days)",
        config.n_days,
        2 * margin + max_dur + 1
    );
    // Occupied padded windows per country.
    let mut busy: Vec<Vec<(usize, usize)>> = vec![Vec::new(); countries.len()];
    let mut events = Vec::with_capacity(config.n_events);
    let mut attempts = 0usize;
    while events.len() < config.n_events {
        attempts += 1;
        if attempts > config.n_events * 1000 {
            bail!("could not place {} non-overlapping events in {} days", config.n_events, config.n_days);
        }
        let c = rng.random_range(0..countries.len());
        let dtype = config.type_effects[rng.random_range(0..config.type_effects.len())].0;
        let dur = rng.random_range(1..=max_dur);
        let start = rng.random_range(margin..config.n_days - margin - dur + 1);
        let (lo, hi) = (start - margin, start + dur - 1 + margin);
        if busy[c].iter().any(|&(a, b)| lo <= b && a <= hi) {
            continue;
        }
        let ld = 3.0 + 1.5 * normal(&mut rng);
        let deaths = ld.exp().round().clamp(0.0, 1e6) as i64;
        busy[c].push((lo, hi));
        events.push((start, c, dtype, dur, deaths));
    }
    let catalog = events
        .into_iter()
        .enumerate()
        .map(|(k, (start, c, dtype, dur, deaths))| {
            let s = config.first_day.offset(start as i32);
            DisasterEvent::new(format!("EV{:04}", k + 1), countries[c], dtype, s, s.offset(dur as i32 - 1), deaths)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Catalog::new(catalog)?)
}

fn planted_truth(config: &WorldConfig, countries: &[CountryCode], catalog: &Catalog, features: &FeatureTable) -> anyhow::Result<Vec<TruthRow>> {
    let effects: BTreeMap<DisasterType, f64> = config.type_effects.iter().copied().collect();
    let lds: Vec<f64> = catalog.events().iter().map(|e| e.log_deaths()).collect();
    let center = lds.iter().sum::<f64>() / lds.len().max(1) as f64;
    let z = if config.interaction != 0.0 {
        Some(features::zscore_features(features)?)
    } else {
        None
    };
    let mut rows = Vec::new();
    for e in catalog.events() {
        let ld = e.log_deaths();
        for &c in countries {
            if c == e.country {
                continue;
            }
            let mut beta = effects[&e.dtype] + config.death_gradient * (ld - center);
            if let Some(z) = &z {
                let w = z.table.value(c, e.country, Feature::SocialShare).unwrap_or(0.0);
                beta += config.interaction * w * ld;
            }
            rows.push(TruthRow {
                event_id: e.event_id.clone(),
                report_country: c,
                beta_true: beta,
            });
        }
    }
    Ok(rows)
}

/// Generate a complete world from its configuration.
pub fn generate_world(config: &WorldConfig) -> anyhow::Result<World> {
    config.validate()?;
    let pool = config.countries();
    let features = generate_features(&pool, config.seed)?;
    let catalog = generate_events(config, &pool)?;
    let truth = planted_truth(config, &pool, &catalog, &features)?;

    let mut sorted = pool.clone();
    sorted.sort_unstable();
    let idx_of = |c: CountryCode| sorted.binary_search(&c).expect("known country");
    let n_c = sorted.len();
    // Sources are spread round-robin over countries.
    let homes: Vec<usize> = (0..config.n_sources).map(|s| idx_of(pool[s % n_c])).collect();
    let registry = SourceRegistry::new((0..config.n_sources).map(|s| SourceRecord {
        source_id: format!("src{:04}", s + 1),
        home_country: sorted[homes[s]],
    }))?;

    let mut rng = stream_rng(config.seed, streams::WORLD, 1);
    let base: Vec<f64> = (0..config.n_sources * n_c)
        .map(|_| config.base_rate.ln() + config.dyad_scale * normal(&mut rng))
        .collect();

    // Planted effect by (event, reporting country index), and active events per day.
    let truth_by: BTreeMap<(&str, CountryCode), f64> = truth.iter().map(|t| ((t.event_id.as_str(), t.report_country), t.beta_true)).collect();
    let mut active: Vec<Vec<(usize, Vec<f64>)>> = vec![Vec::new(); config.n_days];
    for e in catalog.events() {
        let d = idx_of(e.country);
        let by_reporter: Vec<f64> = sorted
            .iter()
            .map(|&c| truth_by.get(&(e.event_id.as_str(), c)).copied().unwrap_or(0.0))
            .collect();
        let t0 = e.start_day.since(config.first_day) as usize;
        for t in t0..=(t0 + config.tau as usize).min(config.n_days - 1) {
            active[t].push((d, by_reporter.clone()));
        }
    }

    let days: Vec<Vec<(u32, u16, u32, u32)>> = (0..config.n_days)
        .into_par_iter()
        .map(|t| {
            let mut rng = stream_rng(config.seed, streams::DAY, t as u64);
            let shock = config.day_scale * normal(&mut rng);
            let mut cells = Vec::with_capacity(config.n_sources * n_c);
            for (s, &home) in homes.iter().enumerate() {
                for d in 0..n_c {
                    let mut eta = base[s * n_c + d] + shock;
                    if d != home {
                        for (ed, betas) in &active[t] {
                            if *ed == d {
                                eta += betas[home];
                            }
                        }
                    }
                    let mu = eta.exp();
                    let mu = match config.noise {
                        Noise::Poisson => mu,
                        Noise::NegBin { r } => Gamma::new(r, mu / r).expect("gamma").sample(&mut rng),
                    };
                    let total = if mu > 0.0 {
                        Poisson::new(mu).expect("poisson").sample(&mut rng) as u32
                    } else {
                        0
                    };
                    if total == 0 {
                        continue;
                    }
                    let disaster = Binomial::new(total as u64, config.disaster_share).expect("binomial").sample(&mut rng) as u32;
                    cells.push((s as u32, d as u16, total, disaster));
                }
            }
            cells
        })
        .collect();

    let n_cells: usize = days.iter().map(Vec::len).sum();
    let mut day_offsets = Vec::with_capacity(config.n_days + 1);
    let (mut source, mut dest, mut total, mut disaster) =
        (Vec::with_capacity(n_cells), Vec::with_capacity(n_cells), Vec::with_capacity(n_cells), Vec::with_capacity(n_cells));
    for cells in days {
        day_offsets.push(source.len() as u64);
        for (s, d, t, x) in cells {
            source.push(s);
            dest.push(d);
            total.push(t);
            disaster.push(x);
        }
    }
    day_offsets.push(source.len() as u64);
    let span = PanelSpan {
        first_day: config.first_day,
        last_day: config.first_day.offset(config.n_days as i32 - 1),
        n_sources: config.n_sources,
        n_countries: n_c,
    };
    let store = PanelStore::from_columns(registry, sorted, Some(span), day_offsets, source, dest, total, disaster)?;
    Ok(World {
        config: config.clone(),
        store,
        catalog,
        features,
        truth,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(seed: u64) -> WorldConfig {
        let mut c = WorldConfig::small(seed);
        c.n_sources = 6;
        c.n_countries = 3;
        c.n_days = 60;
        c.n_events = 2;
        c
    }

    #[test]
    fn same_seed_same_world() {
        let a = generate_world(&tiny(3)).unwrap();
        let b = generate_world(&tiny(3)).unwrap();
        assert_eq!(a.store, b.store);
        assert_eq!(a.catalog, b.catalog);
        assert_eq!(a.truth, b.truth);
        assert_ne!(generate_world(&tiny(4)).unwrap().store, a.store);
    }

    #[test]
    fn thread_count_does_not_matter() {
        let one = crate::exec::with_threads(1, || generate_world(&tiny(5)).unwrap());
        let three = crate::exec::with_threads(3, || generate_world(&tiny(5)).unwrap());
        assert_eq!(one.store, three.store);
    }

    #[test]
    fn zero_noise_world_has_constant_counts() {
        let mut c = tiny(1);
        c.dyad_scale = 0.0;
        c.day_scale = 0.0;
        c.type_effects.iter_mut().for_each(|t| t.1 = 0.0);
        c.death_gradient = 0.0;
        c.base_rate = 1e-300;
        let w = generate_world(&c).unwrap();
        assert!(w.store.is_empty());
        assert!(w.truth.iter().all(|t| t.beta_true == 0.0));
    }

    #[test]
    fn planted_effect_is_echoed_for_every_reporter() {
        let mut c = tiny(2);
        c.type_effects = vec![(DisasterType::Storm, 0.05)];
        c.death_gradient = 0.0;
        let w = generate_world(&c).unwrap();
        assert_eq!(w.truth.len(), 2 * 2);
        assert!(w.truth.iter().all(|t| t.beta_true == 0.05));
    }

    #[test]
    fn short_span_is_rejected() {
        let mut c = tiny(1);
        c.n_days = 20;
        assert!(generate_world(&c).is_err());
    }

    #[test]
    fn same_country_windows_do_not_overlap() {
        let w = generate_world(&WorldConfig::small(9)).unwrap();
        let m = w.config.margin as i32;
        for a in w.catalog.events() {
            for b in w.catalog.events() {
                if a.event_id < b.event_id && a.country == b.country {
                    let disjoint = a.end_day.offset(m) < b.start_day.offset(-m) || b.end_day.offset(m) < a.start_day.offset(-m);
                    assert!(disjoint, "{} and {}", a.event_id, b.event_id);
                }
            }
        }
    }
}
