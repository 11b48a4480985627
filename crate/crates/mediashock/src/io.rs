//! Delimited-text readers and writers for every file the pipeline touches.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use mediashock_core::bootstrap::BootstrapSummary;
use mediashock_core::catalog::{Catalog, DisasterEvent, DisasterType};
use mediashock_core::estimator::{EstimateFlags, EventEstimate};
use mediashock_core::features::{Feature, FeatureTable};
use mediashock_core::panel::{PanelBuilder, PanelStore, SourceRecord, SourceRegistry};
use mediashock_core::{CountryCode, Day};

/// A problem with an input file. The CLI maps these to exit status 1.
#[derive(Debug, thiserror::Error)]
pub enum InputError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Row { path: PathBuf, line: u64, message: String },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

pub type InputResult<T> = Result<T, InputError>;

fn epoch() -> NaiveDate {
    NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid date")
}

/// Parse `YYYY-MM-DD` into days since 1970-01-01.
pub fn parse_day(s: &str) -> Result<Day, String> {
    let d = NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").map_err(|e| format!("bad date {s:?}: {e}"))?;
    Ok(Day((d - epoch()).num_days() as i32))
}

pub fn format_day(day: Day) -> String {
    (epoch() + chrono::Duration::days(day.0 as i64)).format("%Y-%m-%d").to_string()
}

/// Shortest round-trip text for a float; `NaN` for undefined values.
pub fn fmt_f64(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else {
        format!("{x}")
    }
}

pub fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_f64).unwrap_or_default()
}

struct Rows {
    path: PathBuf,
    reader: csv::Reader<BufReader<File>>,
}

fn open(path: &Path, header: &[&str]) -> InputResult<Rows> {
    let file = File::open(path).map_err(|source| InputError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(BufReader::new(file));
    let found = reader.headers().map_err(|e| InputError::Invalid {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let found: Vec<&str> = found.iter().collect();
    if found != header {
        return Err(InputError::Row {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected header {:?}, found {:?}", header.join(","), found.join(",")),
        });
    }
    Ok(Rows {
        path: path.to_path_buf(),
        reader,
    })
}

impl Rows {
    /// Visit every record with its 1-based line number.
    fn each(mut self, mut f: impl FnMut(&csv::StringRecord) -> Result<(), String>) -> InputResult<()> {
        let mut rec = csv::StringRecord::new();
        loop {
            let more = self.reader.read_record(&mut rec).map_err(|e| InputError::Row {
                path: self.path.clone(),
                line: e.position().map_or(0, |p| p.line()),
                message: e.to_string(),
            })?;
            if !more {
                return Ok(());
            }
            let line = rec.position().map_or(0, |p| p.line());
            f(&rec).map_err(|message| InputError::Row {
                path: self.path.clone(),
                line,
                message,
            })?;
        }
    }
}

fn country(s: &str) -> Result<CountryCode, String> {
    s.parse::<CountryCode>().map_err(|e| e.to_string())
}

fn uint<T: std::str::FromStr>(s: &str, what: &str) -> Result<T, String> {
    s.parse::<T>().map_err(|_| format!("bad {what} {s:?}"))
}

fn float(s: &str, what: &str) -> Result<f64, String> {
    s.parse::<f64>().map_err(|_| format!("bad {what} {s:?}"))
}

pub struct CsvOut {
    path: PathBuf,
    writer: csv::Writer<BufWriter<File>>,
}

impl CsvOut {
    pub fn create(path: &Path, header: &[&str]) -> anyhow::Result<Self> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut writer = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(BufWriter::new(File::create(path)?));
        writer.write_record(header)?;
        Ok(CsvOut {
            path: path.to_path_buf(),
            writer,
        })
    }

    pub fn row<I, S>(&mut self, fields: I) -> anyhow::Result<()>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<[u8]>,
    {
        self.writer.write_record(fields)?;
        Ok(())
    }

    pub fn finish(mut self) -> anyhow::Result<PathBuf> {
        self.writer.flush()?;
        Ok(self.path)
    }
}

pub const REGISTRY_HEADER: [&str; 2] = ["source_id", "source_country"];
pub const COUNTS_HEADER: [&str; 6] = ["day", "source_id", "source_country", "dest_country", "count_total", "count_disaster"];
pub const EVENTS_HEADER: [&str; 6] = ["event_id", "country", "dtype", "start_day", "end_day", "deaths"];
pub const FEATURES_HEADER: [&str; 4] = ["country_i", "country_j", "feature", "value"];
pub const TRUTH_HEADER: [&str; 3] = ["event_id", "report_country", "beta_true"];
pub const ESTIMATES_HEADER: [&str; 8] = ["event_id", "report_country", "beta", "se", "tstat", "beta_shrunk", "n_obs", "flags"];

pub fn read_registry(path: &Path) -> InputResult<SourceRegistry> {
    let mut reg = SourceRegistry::default();
    open(path, &REGISTRY_HEADER)?.each(|r| {
        let home = country(&r[1])?;
        reg.insert(SourceRecord {
            source_id: r[0].to_string(),
            home_country: home,
        })
        .map(|_| ())
        .map_err(|e| e.to_string())
    })?;
    Ok(reg)
}

pub fn write_registry(path: &Path, reg: &SourceRegistry) -> anyhow::Result<PathBuf> {
    let mut out = CsvOut::create(path, &REGISTRY_HEADER)?;
    for s in reg.iter() {
        out.row([s.source_id.as_str(), s.home_country.as_str()])?;
    }
    out.finish()
}

/// Read a counts file. Without a registry, sources are registered in order of
/// first appearance from the `source_country` column.
pub fn read_counts(path: &Path, registry: Option<SourceRegistry>) -> InputResult<PanelStore> {
    let fixed = registry.is_some();
    let mut reg = registry.unwrap_or_default();
    let mut pending: Vec<(u32, CountryCode, Day, u32, u32)> = Vec::new();
    open(path, &COUNTS_HEADER)?.each(|r| {
        let day = parse_day(&r[0])?;
        let home = country(&r[2])?;
        let dest = country(&r[3])?;
        let total: u32 = uint(&r[4], "count_total")?;
        let disaster: u32 = uint(&r[5], "count_disaster")?;
        if disaster > total {
            return Err(format!("count_disaster {disaster} exceeds count_total {total}"));
        }
        let idx = match reg.lookup(&r[1]) {
            Some(i) => {
                if reg.get(i).home_country != home {
                    return Err(format!("source {:?} listed with country {home}, registered as {}", &r[1], reg.get(i).home_country));
                }
                i
            }
            None if fixed => return Err(format!("unknown source_id {:?}", &r[1])),
            None => reg
                .insert(SourceRecord {
                    source_id: r[1].to_string(),
                    home_country: home,
                })
                .map_err(|e| e.to_string())?,
        };
        pending.push((idx, dest, day, total, disaster));
        Ok(())
    })?;
    let invalid = |e: mediashock_core::Error| InputError::Invalid {
        path: path.to_path_buf(),
        message: e.to_string(),
    };
    let mut builder = PanelBuilder::new(reg);
    builder.reserve(pending.len());
    for (s, dest, day, t, d) in pending {
        builder.push_indexed(s, dest, day, t, d).map_err(invalid)?;
    }
    builder.build().map_err(invalid)
}

pub fn write_counts(path: &Path, store: &PanelStore) -> anyhow::Result<PathBuf> {
    let mut out = CsvOut::create(path, &COUNTS_HEADER)?;
    if let Some(span) = store.span() {
        let reg = store.registry();
        let countries = store.countries();
        for k in 0..span.n_days() as i32 {
            let day = span.first_day.offset(k);
            let date = format_day(day);
            for c in store.day_cells(day) {
                let s = reg.get(c.source);
                out.row([
                    date.as_str(),
                    s.source_id.as_str(),
                    s.home_country.as_str(),
                    countries[c.dest as usize].as_str(),
                    &c.count_total.to_string(),
                    &c.count_disaster.to_string(),
                ])?;
            }
        }
    }
    out.finish()
}

pub fn read_events(path: &Path) -> InputResult<Catalog> {
    let mut events = Vec::new();
    open(path, &EVENTS_HEADER)?.each(|r| {
        let (dtype, _) = DisasterType::parse_lenient(&r[2]);
        let deaths: i64 = uint(&r[5], "deaths")?;
        let ev = DisasterEvent::new(&r[0], country(&r[1])?, dtype, parse_day(&r[3])?, parse_day(&r[4])?, deaths)
            .map_err(|e| e.to_string())?;
        events.push(ev);
        Ok(())
    })?;
    Catalog::new(events).map_err(|e| InputError::Invalid {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn write_events(path: &Path, catalog: &Catalog) -> anyhow::Result<PathBuf> {
    let mut out = CsvOut::create(path, &EVENTS_HEADER)?;
    for e in catalog.events() {
        out.row([
            e.event_id.as_str(),
            e.country.as_str(),
            e.dtype.name(),
            &format_day(e.start_day),
            &format_day(e.end_day),
            &e.deaths.to_string(),
        ])?;
    }
    out.finish()
}

pub fn read_features(path: &Path) -> InputResult<FeatureTable> {
    let mut table = FeatureTable::new();
    open(path, &FEATURES_HEADER)?.each(|r| {
        let f = Feature::parse(&r[2]).ok_or_else(|| format!("unknown feature {:?}", &r[2]))?;
        table
            .set(country(&r[0])?, country(&r[1])?, f, float(&r[3], "value")?)
            .map_err(|e| e.to_string())
    })?;
    Ok(table)
}

pub fn write_features(path: &Path, table: &FeatureTable) -> anyhow::Result<PathBuf> {
    let mut out = CsvOut::create(path, &FEATURES_HEADER)?;
    for d in table.iter() {
        for f in Feature::ALL {
            if let Some(v) = d.get(f) {
                out.row([d.country_i.as_str(), d.country_j.as_str(), f.name(), &fmt_f64(v)])?;
            }
        }
    }
    out.finish()
}

/// Planted effect for one (event, reporting country).
#[derive(Clone, Debug, PartialEq)]
pub struct TruthRow {
    pub event_id: String,
    pub report_country: CountryCode,
    pub beta_true: f64,
}

pub fn read_truth(path: &Path) -> InputResult<Vec<TruthRow>> {
    let mut rows = Vec::new();
    open(path, &TRUTH_HEADER)?.each(|r| {
        rows.push(TruthRow {
            event_id: r[0].to_string(),
            report_country: country(&r[1])?,
            beta_true: float(&r[2], "beta_true")?,
        });
        Ok(())
    })?;
    Ok(rows)
}

pub fn write_truth(path: &Path, rows: &[TruthRow]) -> anyhow::Result<PathBuf> {
    let mut out = CsvOut::create(path, &TRUTH_HEADER)?;
    for t in rows {
        out.row([t.event_id.as_str(), t.report_country.as_str(), &fmt_f64(t.beta_true)])?;
    }
    out.finish()
}

pub fn read_estimates(path: &Path) -> InputResult<Vec<EventEstimate>> {
    let mut rows = Vec::new();
    open(path, &ESTIMATES_HEADER)?.each(|r| {
        let report_country = if r[1].is_empty() { None } else { Some(country(&r[1])?) };
        rows.push(EventEstimate {
            event_id: r[0].to_string(),
            report_country,
            beta: float(&r[2], "beta")?,
            se: float(&r[3], "se")?,
            tstat: float(&r[4], "tstat")?,
            beta_shrunk: float(&r[5], "beta_shrunk")?,
            n_obs: uint(&r[6], "n_obs")?,
            flags: EstimateFlags::parse_label(&r[7]).ok_or_else(|| format!("bad flags {:?}", &r[7]))?,
        });
        Ok(())
    })?;
    Ok(rows)
}

pub fn write_estimates(path: &Path, rows: &[EventEstimate]) -> anyhow::Result<PathBuf> {
    let mut out = CsvOut::create(path, &ESTIMATES_HEADER)?;
    for e in rows {
        out.row([
            e.event_id.clone(),
            e.report_country.map(|c| c.to_string()).unwrap_or_default(),
            fmt_f64(e.beta),
            fmt_f64(e.se),
            fmt_f64(e.tstat),
            fmt_f64(e.beta_shrunk),
            e.n_obs.to_string(),
            e.flags.label(),
        ])?;
    }
    out.finish()
}

pub fn summary_fields(s: &BootstrapSummary) -> [String; 6] {
    [
        fmt_f64(s.point),
        fmt_f64(s.ci_lo),
        fmt_f64(s.ci_hi),
        fmt_f64(s.p_value),
        s.n_draws.to_string(),
        s.n_missing.to_string(),
    ]
}

/// Write arbitrary bytes, creating parent directories.
pub fn write_bytes(path: &Path, bytes: &[u8]) -> anyhow::Result<PathBuf> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(bytes)?;
    f.flush()?;
    Ok(path.to_path_buf())
}

pub fn read_bytes(path: &Path) -> InputResult<Vec<u8>> {
    std::fs::read(path).map_err(|source| InputError::Io {
        path: path.to_path_buf(),
        source,
    })
}
