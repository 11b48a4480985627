//! Immutable columnar store for the dyadic daily count panel.
//!
//! Cells are kept sorted by `(day, source, dest)` with a per-day offset
//! table, so a day range is one contiguous block. Absent cells are zeros.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::country::CountryCode;
use crate::error::{Error, Result};
use crate::math;

/// Calendar day as an ordinal (days since 1970-01-01, no time zone).
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Day(pub i32);

impl Day {
    pub fn offset(self, days: i32) -> Day {
        Day(self.0 + days)
    }

    /// Signed number of days from `other` to `self`.
    pub fn since(self, other: Day) -> i32 {
        self.0 - other.0
    }
}

impl fmt::Display for Day {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "day{}", self.0)
    }
}

/// Outcome transform applied to article counts before estimation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    Level,
    #[default]
    Log1p,
    Ihs,
}

impl Transform {
    pub fn apply(self, count: u32) -> f64 {
        transform_count(count, self)
    }

    pub fn name(self) -> &'static str {
        match self {
            Transform::Level => "level",
            Transform::Log1p => "log1p",
            Transform::Ihs => "ihs",
        }
    }
}

impl core::str::FromStr for Transform {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "level" => Ok(Transform::Level),
            "log1p" => Ok(Transform::Log1p),
            "ihs" => Ok(Transform::Ihs),
            other => Err(Error::InvalidConfig(alloc::format!("unknown transform {other:?}"))),
        }
    }
}

/// `level` is the identity, `log1p` is `ln(1+y)`, `ihs` is `ln(y + sqrt(y^2+1))`.
pub fn transform_count(count: u32, mode: Transform) -> f64 {
    let y = count as f64;
    match mode {
        Transform::Level => y,
        Transform::Log1p => math::ln_1p(y),
        Transform::Ihs => math::asinh(y),
    }
}

/// Which article channel feeds the outcome.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    #[default]
    Total,
    Disaster,
}

impl core::str::FromStr for Channel {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "total" => Ok(Channel::Total),
            "disaster" => Ok(Channel::Disaster),
            other => Err(Error::InvalidConfig(alloc::format!("unknown channel {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceRecord {
    pub source_id: String,
    pub home_country: CountryCode,
}

/// Registered news sources, each attached to its home country.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceRegistry {
    sources: Vec<SourceRecord>,
    #[serde(skip)]
    index: BTreeMap<String, u32>,
}

impl SourceRegistry {
    pub fn new(records: impl IntoIterator<Item = SourceRecord>) -> Result<Self> {
        let mut reg = SourceRegistry::default();
        for r in records {
            reg.insert(r)?;
        }
        Ok(reg)
    }

    pub fn insert(&mut self, record: SourceRecord) -> Result<u32> {
        if self.index.contains_key(&record.source_id) {
            return Err(Error::DuplicateSource(record.source_id));
        }
        let id = self.sources.len() as u32;
        self.index.insert(record.source_id.clone(), id);
        self.sources.push(record);
        Ok(id)
    }

    pub fn lookup(&self, source_id: &str) -> Option<u32> {
        self.index.get(source_id).copied()
    }

    pub fn get(&self, idx: u32) -> &SourceRecord {
        &self.sources[idx as usize]
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &SourceRecord> {
        self.sources.iter()
    }

    pub fn home_countries(&self) -> BTreeSet<CountryCode> {
        self.sources.iter().map(|s| s.home_country).collect()
    }
}

/// One observed `(source, dest, day)` count as it arrives from ingestion.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PanelCell {
    pub source_id: String,
    pub dest: CountryCode,
    pub day: Day,
    pub count_total: u32,
    pub count_disaster: u32,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PanelSpan {
    pub first_day: Day,
    pub last_day: Day,
    pub n_sources: usize,
    pub n_countries: usize,
}

impl PanelSpan {
    pub fn n_days(&self) -> usize {
        (self.last_day.since(self.first_day) + 1) as usize
    }

    /// Number of cells in the dense `sources x countries x days` cube.
    pub fn dense_cells(&self) -> u64 {
        self.n_sources as u64 * self.n_countries as u64 * self.n_days() as u64
    }

    pub fn contains(&self, day: Day) -> bool {
        self.first_day <= day && day <= self.last_day
    }
}

/// A stored cell, addressed by source and country indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellView {
    pub day: Day,
    pub source: u32,
    pub dest: u16,
    pub count_total: u32,
    pub count_disaster: u32,
}

impl CellView {
    pub fn count(&self, channel: Channel) -> u32 {
        match channel {
            Channel::Total => self.count_total,
            Channel::Disaster => self.count_disaster,
        }
    }
}

const SOURCE_BITS: u32 = 20;
const DEST_BITS: u32 = 12;

/// Accumulates cells and validates them; `build` sorts into the store.
#[derive(Debug)]
pub struct PanelBuilder {
    registry: SourceRegistry,
    span: Option<(Day, Day)>,
    extra_countries: BTreeSet<CountryCode>,
    dest_index: BTreeMap<CountryCode, u16>,
    dest_codes: Vec<CountryCode>,
    // (day, source, provisional dest index, total, disaster)
    cells: Vec<(i32, u32, u16, u32, u32)>,
}

impl PanelBuilder {
    pub fn new(registry: SourceRegistry) -> Self {
        PanelBuilder {
            registry,
            span: None,
            extra_countries: BTreeSet::new(),
            dest_index: BTreeMap::new(),
            dest_codes: Vec::new(),
            cells: Vec::new(),
        }
    }

    /// Fix the panel span; cells outside it are rejected.
    pub fn with_span(mut self, first: Day, last: Day) -> Result<Self> {
        if first > last {
            return Err(Error::EmptyRange {
                start: first.0,
                end: last.0,
            });
        }
        self.span = Some((first, last));
        Ok(self)
    }

    /// Register countries that belong to the panel even if no cell mentions them.
    pub fn with_countries(mut self, countries: impl IntoIterator<Item = CountryCode>) -> Self {
        self.extra_countries.extend(countries);
        self
    }

    pub fn reserve(&mut self, n: usize) {
        self.cells.reserve(n);
    }

    pub fn registry(&self) -> &SourceRegistry {
        &self.registry
    }

    pub fn push(&mut self, cell: PanelCell) -> Result<()> {
        let source = self
            .registry
            .lookup(&cell.source_id)
            .ok_or_else(|| Error::UnknownSource(cell.source_id.clone()))?;
        self.push_indexed(source, cell.dest, cell.day, cell.count_total, cell.count_disaster)
    }

    /// Push a cell whose source is already resolved to its registry index.
    pub fn push_indexed(
        &mut self,
        source: u32,
        dest: CountryCode,
        day: Day,
        count_total: u32,
        count_disaster: u32,
    ) -> Result<()> {
        if source as usize >= self.registry.len() {
            return Err(Error::UnknownSource(source.to_string()));
        }
        if count_disaster > count_total {
            return Err(Error::DisasterExceedsTotal {
                total: count_total,
                disaster: count_disaster,
            });
        }
        if let Some((first, last)) = self.span {
            if day < first || day > last {
                return Err(Error::DayOutsideSpan {
                    day: day.0,
                    first: first.0,
                    last: last.0,
                });
            }
        }
        let d = match self.dest_index.get(&dest) {
            Some(&d) => d,
            None => {
                let d = self.dest_codes.len() as u16;
                self.dest_index.insert(dest, d);
                self.dest_codes.push(dest);
                d
            }
        };
        self.cells.push((day.0, source, d, count_total, count_disaster));
        Ok(())
    }

    pub fn build(self) -> Result<PanelStore> {
        let PanelBuilder {
            registry,
            span,
            extra_countries,
            dest_codes,
            mut cells,
            ..
        } = self;
        if registry.len() >= (1 << SOURCE_BITS) {
            return Err(Error::InvalidConfig("too many sources".into()));
        }
        let mut countries: BTreeSet<CountryCode> = registry.home_countries();
        countries.extend(dest_codes.iter().copied());
        countries.extend(extra_countries);
        let countries: Vec<CountryCode> = countries.into_iter().collect();
        if countries.len() >= (1 << DEST_BITS) {
            return Err(Error::InvalidConfig("too many countries".into()));
        }
        let remap: Vec<u16> = dest_codes
            .iter()
            .map(|c| countries.binary_search(c).map(|i| i as u16).unwrap_or(0))
            .collect();
        for c in cells.iter_mut() {
            c.2 = remap[c.2 as usize];
        }
        cells.sort_unstable_by_key(|&(day, s, d, _, _)| {
            let day_key = (day as i64 - i32::MIN as i64) as u64;
            (day_key << 32) | ((s as u64) << DEST_BITS) | d as u64
        });
        for w in cells.windows(2) {
            if (w[0].0, w[0].1, w[0].2) == (w[1].0, w[1].1, w[1].2) {
                return Err(Error::DuplicateCell {
                    source_id: registry.get(w[0].1).source_id.clone(),
                    dest: countries[w[0].2 as usize],
                    day: w[0].0,
                });
            }
        }
        let span = match (span, cells.first(), cells.last()) {
            (Some((f, l)), _, _) => Some((f, l)),
            (None, Some(a), Some(b)) => Some((Day(a.0), Day(b.0))),
            _ => None,
        };
        let span = span.map(|(first, last)| PanelSpan {
            first_day: first,
            last_day: last,
            n_sources: registry.len(),
            n_countries: countries.len(),
        });
        let n_days = span.map(|s| s.n_days()).unwrap_or(0);
        let mut day_offsets = Vec::with_capacity(n_days + 1);
        let mut source = Vec::with_capacity(cells.len());
        let mut dest = Vec::with_capacity(cells.len());
        let mut total = Vec::with_capacity(cells.len());
        let mut disaster = Vec::with_capacity(cells.len());
        if let Some(sp) = span {
            let mut pos = 0usize;
            for d in 0..n_days as i32 {
                day_offsets.push(pos as u64);
                let day = sp.first_day.0 + d;
                while pos < cells.len() && cells[pos].0 == day {
                    pos += 1;
                }
            }
            day_offsets.push(pos as u64);
        }
        for (_, s, d, t, x) in cells {
            source.push(s);
            dest.push(d);
            total.push(t);
            disaster.push(x);
        }
        Ok(PanelStore {
            registry,
            countries,
            span,
            day_offsets,
            source,
            dest,
            total,
            disaster,
        })
    }
}

/// The immutable panel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PanelStore {
    registry: SourceRegistry,
    countries: Vec<CountryCode>,
    span: Option<PanelSpan>,
    day_offsets: Vec<u64>,
    source: Vec<u32>,
    dest: Vec<u16>,
    total: Vec<u32>,
    disaster: Vec<u32>,
}

/// Raw column access used by binary serialization.
pub struct PanelColumns<'a> {
    pub countries: &'a [CountryCode],
    pub span: Option<PanelSpan>,
    pub day_offsets: &'a [u64],
    pub source: &'a [u32],
    pub dest: &'a [u16],
    pub total: &'a [u32],
    pub disaster: &'a [u32],
}

impl PanelStore {
    pub fn registry(&self) -> &SourceRegistry {
        &self.registry
    }

    pub fn countries(&self) -> &[CountryCode] {
        &self.countries
    }

    pub fn country_index(&self, code: CountryCode) -> Option<u16> {
        self.countries.binary_search(&code).ok().map(|i| i as u16)
    }

    pub fn span(&self) -> Option<PanelSpan> {
        self.span
    }

    /// Number of stored (non-implicit) cells.
    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    /// Home-country index of every source.
    pub fn source_homes(&self) -> Vec<u16> {
        self.registry
            .iter()
            .map(|s| self.country_index(s.home_country).unwrap_or(0))
            .collect()
    }

    fn cell(&self, day: Day, i: usize) -> CellView {
        CellView {
            day,
            source: self.source[i],
            dest: self.dest[i],
            count_total: self.total[i],
            count_disaster: self.disaster[i],
        }
    }

    /// Stored cells for one day, in `(source, dest)` order.
    pub fn day_cells(&self, day: Day) -> impl Iterator<Item = CellView> + '_ {
        let range = match self.span {
            Some(sp) if sp.contains(day) => {
                let d = day.since(sp.first_day) as usize;
                self.day_offsets[d] as usize..self.day_offsets[d + 1] as usize
            }
            _ => 0..0,
        };
        range.map(move |i| self.cell(day, i))
    }

    fn check_range(&self, start: Day, end: Day) -> Result<PanelSpan> {
        if start > end {
            return Err(Error::EmptyRange {
                start: start.0,
                end: end.0,
            });
        }
        let sp = self.span.ok_or(Error::EmptyPanel)?;
        for d in [start, end] {
            if !sp.contains(d) {
                return Err(Error::DayOutsideSpan {
                    day: d.0,
                    first: sp.first_day.0,
                    last: sp.last_day.0,
                });
            }
        }
        Ok(sp)
    }

    /// Stream stored cells in `[start, end]`, ordered by `(day, source, dest)`,
    /// optionally restricted to a set of destination countries.
    pub fn slice_window<'a>(
        &'a self,
        dest_filter: Option<&'a BTreeSet<CountryCode>>,
        start: Day,
        end: Day,
    ) -> Result<impl Iterator<Item = CellView> + 'a> {
        self.check_range(start, end)?;
        let allowed: Option<Vec<bool>> = dest_filter.map(|f| {
            self.countries.iter().map(|c| f.contains(c)).collect()
        });
        Ok((start.0..=end.0).flat_map(move |d| {
            let allowed = allowed.clone();
            self.day_cells(Day(d))
                .filter(move |c| allowed.as_ref().is_none_or(|a| a[c.dest as usize]))
        }))
    }

    /// Like [`slice_window`](Self::slice_window) but materializes implicit
    /// zeros: yields every `(day, source, dest)` combination in order.
    pub fn slice_window_dense<'a>(
        &'a self,
        dest_filter: Option<&'a BTreeSet<CountryCode>>,
        start: Day,
        end: Day,
    ) -> Result<impl Iterator<Item = CellView> + 'a> {
        self.check_range(start, end)?;
        let dests: Vec<u16> = (0..self.countries.len() as u16)
            .filter(|&d| dest_filter.is_none_or(|f| f.contains(&self.countries[d as usize])))
            .collect();
        let n_sources = self.registry.len() as u32;
        Ok((start.0..=end.0).flat_map(move |d| {
            let day = Day(d);
            let dests = dests.clone();
            let mut stored = self.day_cells(day).peekable();
            (0..n_sources)
                .flat_map(move |s| dests.clone().into_iter().map(move |dest| (s, dest)))
                .map(move |(s, dest)| {
                    while let Some(c) = stored.peek() {
                        if (c.source, c.dest) < (s, dest) {
                            stored.next();
                        } else {
                            break;
                        }
                    }
                    match stored.peek() {
                        Some(c) if c.source == s && c.dest == dest => *c,
                        _ => CellView {
                            day,
                            source: s,
                            dest,
                            count_total: 0,
                            count_disaster: 0,
                        },
                    }
                })
        }))
    }

    pub fn columns(&self) -> PanelColumns<'_> {
        PanelColumns {
            countries: &self.countries,
            span: self.span,
            day_offsets: &self.day_offsets,
            source: &self.source,
            dest: &self.dest,
            total: &self.total,
            disaster: &self.disaster,
        }
    }

    /// Reassemble a store from columns previously obtained via [`columns`](Self::columns).
    #[allow(clippy::too_many_arguments)]
    pub fn from_columns(
        registry: SourceRegistry,
        countries: Vec<CountryCode>,
        span: Option<PanelSpan>,
        day_offsets: Vec<u64>,
        source: Vec<u32>,
        dest: Vec<u16>,
        total: Vec<u32>,
        disaster: Vec<u32>,
    ) -> Result<Self> {
        let n = source.len();
        if dest.len() != n || total.len() != n || disaster.len() != n {
            return Err(Error::DimensionMismatch("panel columns".into()));
        }
        let expected_offsets = span.map(|s| s.n_days() + 1).unwrap_or(0);
        if day_offsets.len() != expected_offsets
            || day_offsets.last().map_or(n != 0, |&l| l as usize != n)
        {
            return Err(Error::DimensionMismatch("panel day offsets".into()));
        }
        let mut index = BTreeMap::new();
        for (i, s) in registry.sources.iter().enumerate() {
            index.insert(s.source_id.clone(), i as u32);
        }
        Ok(PanelStore {
            registry: SourceRegistry {
                sources: registry.sources,
                index,
            },
            countries,
            span,
            day_offsets,
            source,
            dest,
            total,
            disaster,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use proptest::prelude::*;

    fn c(s: &str) -> CountryCode {
        CountryCode::new(s).unwrap()
    }

    fn registry() -> SourceRegistry {
        SourceRegistry::new(vec![
            SourceRecord {
                source_id: "src1".into(),
                home_country: c("DEU"),
            },
            SourceRecord {
                source_id: "src2".into(),
                home_country: c("FRA"),
            },
        ])
        .unwrap()
    }

    fn cell(src: &str, dest: &str, day: i32, t: u32, d: u32) -> PanelCell {
        PanelCell {
            source_id: src.into(),
            dest: c(dest),
            day: Day(day),
            count_total: t,
            count_disaster: d,
        }
    }

    #[test]
    fn three_rows_one_day() {
        let mut b = PanelBuilder::new(registry());
        b.push(cell("src1", "BGD", 10, 5, 2)).unwrap();
        b.push(cell("src1", "ITA", 10, 1, 0)).unwrap();
        b.push(cell("src1", "FRA", 10, 3, 1)).unwrap();
        let store = b.build().unwrap();
        assert_eq!(store.len(), 3);
        let sp = store.span().unwrap();
        assert_eq!(sp.n_days(), 1);
        let bgd = store.country_index(c("BGD")).unwrap();
        let got: Vec<_> = store.day_cells(Day(10)).filter(|x| x.dest == bgd).collect();
        assert_eq!((got[0].count_total, got[0].count_disaster), (5, 2));
    }

    #[test]
    fn empty_store_has_no_span() {
        let store = PanelBuilder::new(registry()).build().unwrap();
        assert!(store.is_empty());
        assert!(store.span().is_none());
        assert!(store.slice_window(None, Day(0), Day(1)).is_err());
    }

    #[test]
    fn rejects_bad_cells() {
        let mut b = PanelBuilder::new(registry());
        assert!(matches!(
            b.push(cell("nope", "BGD", 1, 1, 0)),
            Err(Error::UnknownSource(_))
        ));
        assert!(matches!(
            b.push(cell("src1", "BGD", 1, 1, 2)),
            Err(Error::DisasterExceedsTotal { .. })
        ));
        b.push(cell("src1", "BGD", 1, 1, 0)).unwrap();
        b.push(cell("src1", "BGD", 1, 2, 0)).unwrap();
        assert!(matches!(b.build(), Err(Error::DuplicateCell { .. })));
    }

    #[test]
    fn span_is_enforced() {
        let mut b = PanelBuilder::new(registry()).with_span(Day(0), Day(9)).unwrap();
        assert!(b.push(cell("src1", "BGD", 10, 1, 0)).is_err());
    }

    #[test]
    fn transforms() {
        assert_eq!(transform_count(0, Transform::Log1p), 0.0);
        assert!((transform_count(99, Transform::Log1p) - 4.605_170_185_988_091).abs() < 1e-12);
        assert_eq!(transform_count(0, Transform::Ihs), 0.0);
        assert_eq!(transform_count(7, Transform::Level), 7.0);
    }

    #[test]
    fn slicing_errors_and_order() {
        let mut b = PanelBuilder::new(registry());
        b.push(cell("src2", "BGD", 2, 1, 0)).unwrap();
        b.push(cell("src1", "ITA", 1, 1, 0)).unwrap();
        b.push(cell("src1", "BGD", 2, 1, 0)).unwrap();
        let store = b.build().unwrap();
        assert!(matches!(
            store.slice_window(None, Day(2), Day(1)),
            Err(Error::EmptyRange { .. })
        ));
        let all: Vec<_> = store.slice_window(None, Day(1), Day(2)).unwrap().collect();
        assert_eq!(all.len(), store.len());
        let keys: Vec<_> = all.iter().map(|c| (c.day, c.source, c.dest)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        let filter: BTreeSet<_> = [c("ITA")].into_iter().collect();
        assert_eq!(store.slice_window(Some(&filter), Day(1), Day(2)).unwrap().count(), 1);
        // 2 days x 2 sources x 4 countries (BGD, DEU, FRA, ITA)
        assert_eq!(store.slice_window_dense(None, Day(1), Day(2)).unwrap().count(), 16);
    }

    proptest! {
        #[test]
        fn transforms_are_increasing(y in 0u32..100_000) {
            for m in [Transform::Level, Transform::Log1p, Transform::Ihs] {
                prop_assert!(m.apply(y + 1) > m.apply(y));
            }
            if y >= 1 {
                let gap = Transform::Ihs.apply(y) - Transform::Log1p.apply(y);
                prop_assert!(gap.abs() < 0.7);
                prop_assert!(gap < core::f64::consts::LN_2 + 1e-12);
            }
        }

        #[test]
        fn sparse_sum_matches_dense(
            cells in proptest::collection::btree_map((0u8..2, 0u8..4, 0i32..6), (0u32..50, 0u32..50), 0..40)
        ) {
            let dests = ["BGD", "DEU", "FRA", "ITA"];
            let mut b = PanelBuilder::new(registry()).with_span(Day(0), Day(5)).unwrap();
            for ((s, d, day), (t, x)) in &cells {
                let src = if *s == 0 { "src1" } else { "src2" };
                b.push(cell(src, dests[*d as usize], *day, *t.max(x), *t.min(x))).unwrap();
            }
            let store = b.build().unwrap();
            for mode in [Transform::Level, Transform::Log1p, Transform::Ihs] {
                let sparse: f64 = store.slice_window(None, Day(1), Day(4)).unwrap()
                    .map(|c| mode.apply(c.count_total)).sum();
                let dense: f64 = store.slice_window_dense(None, Day(1), Day(4)).unwrap()
                    .map(|c| mode.apply(c.count_total)).sum();
                prop_assert!((sparse - dense).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn ihs_minus_log1p_tends_to_ln2() {
        let y = 1_000_000_000u32;
        let gap = Transform::Ihs.apply(y) - Transform::Log1p.apply(y);
        assert!((gap - core::f64::consts::LN_2).abs() < 1e-8);
    }
}
