use alloc::string::String;

use thiserror::Error;

use crate::country::CountryCode;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid country code {0:?}")]
    InvalidCountry(String),
    #[error("unknown source id {0:?}")]
    UnknownSource(String),
    #[error("duplicate source id {0:?}")]
    DuplicateSource(String),
    #[error("duplicate panel cell (source {source_id}, dest {dest}, day {day})")]
    DuplicateCell {
        source_id: String,
        dest: CountryCode,
        day: i32,
    },
    #[error("disaster count {disaster} exceeds total count {total}")]
    DisasterExceedsTotal { total: u32, disaster: u32 },
    #[error("day {day} outside panel span [{first}, {last}]")]
    DayOutsideSpan { day: i32, first: i32, last: i32 },
    #[error("empty panel")]
    EmptyPanel,
    #[error("empty day range: start {start} > end {end}")]
    EmptyRange { start: i32, end: i32 },
    #[error("duplicate event id {0:?}")]
    DuplicateEvent(String),
    #[error("event {0:?} ends before it starts")]
    EventEndsBeforeStart(String),
    #[error("event {0:?} has negative deaths")]
    NegativeDeaths(String),
    #[error("unknown event id {0:?}")]
    UnknownEvent(String),
    #[error("window for event {0:?} lies entirely outside the panel span")]
    WindowOutsideSpan(String),
    #[error("event {0:?} has no baseline days in its window")]
    NoBaselineDays(String),
    #[error("event country {0} does not appear in the panel")]
    EventCountryAbsent(CountryCode),
    #[error("design needs at least {needed} distinct {what}, found {found}")]
    TooFewLevels {
        what: &'static str,
        needed: usize,
        found: usize,
    },
    #[error("only one cluster on the {0} dimension; clustered covariance undefined")]
    SingleCluster(&'static str),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("zero variance in column {0:?}")]
    ZeroVariance(String),
    #[error("column {0:?} needs at least two non-missing values")]
    TooFewValues(String),
    #[error("no positive foreign social connections for {0}")]
    NoForeignConnections(CountryCode),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("too few rows: need {needed}, have {found}")]
    TooFewRows { needed: usize, found: usize },
    #[error("missing feature {0:?}")]
    MissingFeature(String),
    #[error("bootstrap: {0}")]
    Bootstrap(String),
    #[error("grid: {0}")]
    Grid(String),
}
