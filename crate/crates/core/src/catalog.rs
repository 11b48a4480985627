//! Disaster catalog and event-window construction.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::country::CountryCode;
use crate::error::{Error, Result};
use crate::panel::{Day, PanelSpan};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DisasterType {
    Earthquake,
    Flood,
    Storm,
    Drought,
    ExtremeTemperature,
    Wildfire,
    Technological,
    Other,
}

impl DisasterType {
    pub const ALL: [DisasterType; 8] = [
        DisasterType::Earthquake,
        DisasterType::Flood,
        DisasterType::Storm,
        DisasterType::Drought,
        DisasterType::ExtremeTemperature,
        DisasterType::Wildfire,
        DisasterType::Technological,
        DisasterType::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DisasterType::Earthquake => "earthquake",
            DisasterType::Flood => "flood",
            DisasterType::Storm => "storm",
            DisasterType::Drought => "drought",
            DisasterType::ExtremeTemperature => "extreme_temperature",
            DisasterType::Wildfire => "wildfire",
            DisasterType::Technological => "technological",
            DisasterType::Other => "other",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<DisasterType> {
        DisasterType::ALL.get(i).copied()
    }

    /// Strict parse of a known type name (case- and separator-insensitive).
    pub fn parse(s: &str) -> Option<DisasterType> {
        let norm: String = s
            .trim()
            .chars()
            .map(|c| match c {
                ' ' | '-' => '_',
                c => c.to_ascii_lowercase(),
            })
            .collect();
        DisasterType::ALL.iter().copied().find(|t| t.name() == norm)
    }

    /// Catalog parse: unknown strings map to `Other`; the flag reports the fallback.
    pub fn parse_lenient(s: &str) -> (DisasterType, bool) {
        match DisasterType::parse(s) {
            Some(t) => (t, false),
            None => {
                log::warn!("unknown disaster type {s:?}; mapped to other");
                (DisasterType::Other, true)
            }
        }
    }
}

impl fmt::Display for DisasterType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DisasterEvent {
    pub event_id: String,
    pub country: CountryCode,
    pub dtype: DisasterType,
    pub start_day: Day,
    pub end_day: Day,
    pub deaths: u64,
}

impl DisasterEvent {
    pub fn new(
        event_id: impl Into<String>,
        country: CountryCode,
        dtype: DisasterType,
        start_day: Day,
        end_day: Day,
        deaths: i64,
    ) -> Result<Self> {
        let event_id = event_id.into();
        if end_day < start_day {
            return Err(Error::EventEndsBeforeStart(event_id));
        }
        if deaths < 0 {
            return Err(Error::NegativeDeaths(event_id));
        }
        Ok(DisasterEvent {
            event_id,
            country,
            dtype,
            start_day,
            end_day,
            deaths: deaths as u64,
        })
    }

    pub fn duration_days(&self) -> u32 {
        (self.end_day.since(self.start_day) + 1) as u32
    }

    /// `ln(1 + deaths)`, defined for zero-death events.
    pub fn log_deaths(&self) -> f64 {
        crate::math::ln_1p(self.deaths as f64)
    }
}

/// Events sorted by start day (ties by id), with unique ids.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Catalog {
    events: Vec<DisasterEvent>,
    by_id: BTreeMap<String, usize>,
}

impl Catalog {
    pub fn new(mut events: Vec<DisasterEvent>) -> Result<Self> {
        events.sort_by(|a, b| (a.start_day, &a.event_id).cmp(&(b.start_day, &b.event_id)));
        let mut by_id = BTreeMap::new();
        for (i, e) in events.iter().enumerate() {
            if by_id.insert(e.event_id.clone(), i).is_some() {
                return Err(Error::DuplicateEvent(e.event_id.clone()));
            }
        }
        Ok(Catalog { events, by_id })
    }

    pub fn events(&self) -> &[DisasterEvent] {
        &self.events
    }

    pub fn get(&self, event_id: &str) -> Option<&DisasterEvent> {
        self.by_id.get(event_id).map(|&i| &self.events[i])
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Ids of events whose padded windows overlap another event in the same country.
    pub fn overlapping(&self, pad: u32) -> BTreeSet<String> {
        let mut by_country: BTreeMap<CountryCode, Vec<&DisasterEvent>> = BTreeMap::new();
        for e in &self.events {
            by_country.entry(e.country).or_default().push(e);
        }
        let pad = pad as i32;
        let mut out = BTreeSet::new();
        for evs in by_country.values() {
            // Sorted by start day already.
            let mut reach: Option<(Day, &str)> = None;
            for e in evs {
                let lo = e.start_day.offset(-pad);
                let hi = e.end_day.offset(pad);
                if let Some((prev_hi, prev_id)) = reach {
                    if lo <= prev_hi {
                        out.insert(String::from(prev_id));
                        out.insert(e.event_id.clone());
                    }
                }
                if reach.is_none_or(|(h, _)| hi > h) {
                    reach = Some((hi, &e.event_id));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventWindow {
    pub event_id: String,
    pub window_start: Day,
    pub window_end: Day,
    pub treat_start: Day,
    pub treat_end: Day,
    /// Event start day `t_k`; event time is measured from here.
    pub anchor: Day,
    pub clipped: bool,
}

impl EventWindow {
    pub fn n_days(&self) -> usize {
        (self.window_end.since(self.window_start) + 1) as usize
    }

    pub fn n_treat_days(&self) -> usize {
        (self.treat_end.since(self.treat_start) + 1) as usize
    }

    pub fn n_baseline_days(&self) -> usize {
        self.n_days() - self.n_treat_days()
    }

    pub fn is_treated(&self, day: Day) -> bool {
        self.treat_start <= day && day <= self.treat_end
    }
}

/// Analysis window `[start - pad, end + pad]` with treatment days
/// `[start, start + tau]`, clipped to the panel span when one is given.
pub fn build_event_window(
    event: &DisasterEvent,
    pad: u32,
    tau: u32,
    span: Option<&PanelSpan>,
) -> Result<EventWindow> {
    if tau > pad {
        return Err(Error::InvalidConfig(alloc::format!(
            "treatment length tau={tau} exceeds window pad={pad}"
        )));
    }
    let mut w = EventWindow {
        event_id: event.event_id.clone(),
        window_start: event.start_day.offset(-(pad as i32)),
        window_end: event.end_day.offset(pad as i32),
        treat_start: event.start_day,
        treat_end: event.start_day.offset(tau as i32),
        anchor: event.start_day,
        clipped: false,
    };
    if let Some(sp) = span {
        if w.window_end < sp.first_day || w.window_start > sp.last_day {
            return Err(Error::WindowOutsideSpan(event.event_id.clone()));
        }
        if w.window_start < sp.first_day || w.window_end > sp.last_day {
            log::warn!("window for event {} clipped to panel span", event.event_id);
            w.clipped = true;
            w.window_start = w.window_start.max(sp.first_day);
            w.window_end = w.window_end.min(sp.last_day);
            w.treat_start = w.treat_start.max(w.window_start);
            w.treat_end = w.treat_end.min(w.window_end);
            if w.treat_start > w.treat_end {
                return Err(Error::WindowOutsideSpan(event.event_id.clone()));
            }
        }
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn c(s: &str) -> CountryCode {
        CountryCode::new(s).unwrap()
    }

    // 2020-03-10 as a day ordinal.
    const MAR10: i32 = 18331;

    fn ev(id: &str, start: i32, end: i32) -> DisasterEvent {
        DisasterEvent::new(id, c("ITA"), DisasterType::Earthquake, Day(start), Day(end), 12).unwrap()
    }

    #[test]
    fn one_day_event() {
        let e = ev("ev1", MAR10, MAR10);
        assert_eq!(e.duration_days(), 1);
        assert_eq!(e.deaths, 12);
    }

    #[test]
    fn lenient_type_parse() {
        assert_eq!(DisasterType::parse_lenient("Tsunami"), (DisasterType::Other, true));
        assert_eq!(
            DisasterType::parse_lenient("Extreme temperature"),
            (DisasterType::ExtremeTemperature, false)
        );
    }

    #[test]
    fn catalog_rejects_duplicates_and_bad_rows() {
        assert!(matches!(
            Catalog::new(vec![ev("a", 1, 1), ev("a", 2, 2)]),
            Err(Error::DuplicateEvent(_))
        ));
        assert!(matches!(
            DisasterEvent::new("x", c("ITA"), DisasterType::Flood, Day(2), Day(1), 0),
            Err(Error::EventEndsBeforeStart(_))
        ));
        assert!(matches!(
            DisasterEvent::new("x", c("ITA"), DisasterType::Flood, Day(1), Day(1), -1),
            Err(Error::NegativeDeaths(_))
        ));
        let cat = Catalog::new(vec![ev("b", 5, 5), ev("a", 1, 1)]).unwrap();
        assert_eq!(cat.events()[0].event_id, "a");
    }

    #[test]
    fn seven_day_window_around_event() {
        let e = ev("ev1", MAR10, MAR10 + 2);
        let w = build_event_window(&e, 7, 3, None).unwrap();
        // 2020-03-03 .. 2020-03-19
        assert_eq!(w.window_start, Day(MAR10 - 7));
        assert_eq!(w.window_end, Day(MAR10 + 9));
        // 2020-03-10 .. 2020-03-13
        assert_eq!((w.treat_start, w.treat_end), (Day(MAR10), Day(MAR10 + 3)));
        assert_eq!(w.n_days(), 3 + 14);
    }

    #[test]
    fn zero_pad_window_is_event_day() {
        let e = ev("ev1", MAR10, MAR10);
        let w = build_event_window(&e, 0, 0, None).unwrap();
        assert_eq!((w.window_start, w.window_end), (Day(MAR10), Day(MAR10)));
    }

    #[test]
    fn clipping_and_outside_span() {
        let span = PanelSpan {
            first_day: Day(MAR10 - 3),
            last_day: Day(MAR10 + 100),
            n_sources: 1,
            n_countries: 1,
        };
        let w = build_event_window(&ev("a", MAR10, MAR10), 7, 3, Some(&span)).unwrap();
        assert!(w.clipped);
        assert_eq!(w.window_start, span.first_day);
        assert!(matches!(
            build_event_window(&ev("b", MAR10 + 200, MAR10 + 200), 7, 3, Some(&span)),
            Err(Error::WindowOutsideSpan(_))
        ));
    }

    #[test]
    fn overlap_flags() {
        let cat = Catalog::new(vec![ev("a", 0, 0), ev("b", 10, 10), ev("c", 40, 40)]).unwrap();
        let o = cat.overlapping(7);
        assert!(o.contains("a") && o.contains("b") && !o.contains("c"));
    }
}
