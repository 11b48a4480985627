//! Per-event regression sample: one row per `(source, dest, day)` in the
//! event window, own-country dyads removed, implicit zeros materialized.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::catalog::{DisasterEvent, EventWindow};
use crate::country::CountryCode;
use crate::error::{Error, Result};
use crate::panel::{Channel, PanelStore, Transform};

/// One design row, in index form.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DesignRow {
    pub y: f64,
    /// Houses the dyad fixed effect.
    pub dyad: u32,
    /// Houses the day fixed effect.
    pub day: u32,
    pub source: u32,
    pub dest: u16,
    /// Home country of the source.
    pub report_country: u16,
    /// `1(dest = event country) * 1(day in treatment window)`.
    pub treat: bool,
    /// Day offset from the event start.
    pub event_time: i32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Design {
    pub event_id: String,
    pub event_country: u16,
    /// Country table that `dest` and `report_country` index into.
    pub countries: Vec<CountryCode>,
    pub y: Vec<f64>,
    pub dyad: Vec<u32>,
    pub day: Vec<u32>,
    pub source: Vec<u32>,
    pub dest: Vec<u16>,
    pub report_country: Vec<u16>,
    pub treat: Vec<bool>,
    pub event_time: Vec<i32>,
}

impl Design {
    pub fn from_rows(
        event_id: impl Into<String>,
        event_country: u16,
        countries: Vec<CountryCode>,
        rows: &[DesignRow],
    ) -> Self {
        Design {
            event_id: event_id.into(),
            event_country,
            countries,
            y: rows.iter().map(|r| r.y).collect(),
            dyad: rows.iter().map(|r| r.dyad).collect(),
            day: rows.iter().map(|r| r.day).collect(),
            source: rows.iter().map(|r| r.source).collect(),
            dest: rows.iter().map(|r| r.dest).collect(),
            report_country: rows.iter().map(|r| r.report_country).collect(),
            treat: rows.iter().map(|r| r.treat).collect(),
            event_time: rows.iter().map(|r| r.event_time).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, r: usize) -> DesignRow {
        DesignRow {
            y: self.y[r],
            dyad: self.dyad[r],
            day: self.day[r],
            source: self.source[r],
            dest: self.dest[r],
            report_country: self.report_country[r],
            treat: self.treat[r],
            event_time: self.event_time[r],
        }
    }

    pub fn rows(&self) -> impl Iterator<Item = DesignRow> + '_ {
        (0..self.len()).map(|r| self.row(r))
    }

    /// Drop rows whose source is based in the destination country.
    pub fn without_own_country(&self) -> Design {
        let rows: Vec<DesignRow> = self.rows().filter(|r| r.report_country != r.dest).collect();
        Design::from_rows(self.event_id.clone(), self.event_country, self.countries.clone(), &rows)
    }

    pub fn n_levels(ids: &[u32]) -> usize {
        let mut v = ids.to_vec();
        v.sort_unstable();
        v.dedup();
        v.len()
    }

    /// Multiply every outcome by `c`.
    pub fn scaled(&self, c: f64) -> Design {
        let mut d = self.clone();
        d.y.iter_mut().for_each(|v| *v *= c);
        d
    }
}

/// Build the event design from the panel.
pub fn build_design(
    store: &PanelStore,
    window: &EventWindow,
    event: &DisasterEvent,
    transform: Transform,
    channel: Channel,
) -> Result<Design> {
    let span = store.span().ok_or(Error::EmptyPanel)?;
    if !span.contains(window.window_start) || !span.contains(window.window_end) {
        return Err(Error::DayOutsideSpan {
            day: if span.contains(window.window_start) {
                window.window_end.0
            } else {
                window.window_start.0
            },
            first: span.first_day.0,
            last: span.last_day.0,
        });
    }
    if window.n_baseline_days() == 0 {
        return Err(Error::NoBaselineDays(event.event_id.clone()));
    }
    let event_country = store
        .country_index(event.country)
        .ok_or(Error::EventCountryAbsent(event.country))?;

    let n_countries = store.countries().len();
    let homes = store.source_homes();
    let n_sources = homes.len();
    // (source, dest) -> dyad index, u32::MAX for own-country pairs.
    let mut dyad_of = vec![u32::MAX; n_sources * n_countries];
    let mut dyad_source = Vec::new();
    let mut dyad_dest = Vec::new();
    for (s, &home) in homes.iter().enumerate() {
        for d in 0..n_countries {
            if d as u16 != home {
                dyad_of[s * n_countries + d] = dyad_source.len() as u32;
                dyad_source.push(s as u32);
                dyad_dest.push(d as u16);
            }
        }
    }
    let n_dyads = dyad_source.len();
    let n_days = window.n_days();
    let n = n_dyads * n_days;
    let zero = transform.apply(0);

    let mut y = vec![zero; n];
    let mut dyad = Vec::with_capacity(n);
    let mut day = Vec::with_capacity(n);
    let mut source = Vec::with_capacity(n);
    let mut dest = Vec::with_capacity(n);
    let mut report_country = Vec::with_capacity(n);
    let mut treat = Vec::with_capacity(n);
    let mut event_time = Vec::with_capacity(n);
    for t in 0..n_days {
        let date = window.window_start.offset(t as i32);
        let treated_day = window.is_treated(date);
        let kappa = date.since(window.anchor);
        for q in 0..n_dyads {
            let d = dyad_dest[q];
            dyad.push(q as u32);
            day.push(t as u32);
            source.push(dyad_source[q]);
            dest.push(d);
            report_country.push(homes[dyad_source[q] as usize]);
            treat.push(treated_day && d == event_country);
            event_time.push(kappa);
        }
        for cell in store.day_cells(date) {
            let q = dyad_of[cell.source as usize * n_countries + cell.dest as usize];
            if q != u32::MAX {
                y[t * n_dyads + q as usize] = transform.apply(cell.count(channel));
            }
        }
    }

    Ok(Design {
        event_id: event.event_id.clone(),
        event_country,
        countries: store.countries().to_vec(),
        y,
        dyad,
        day,
        source,
        dest,
        report_country,
        treat,
        event_time,
    })
}
