//! Read-only JSON service over a trained forest and its feature table.
//!
//! Every response is a pure function of the loaded snapshot and the query.
//! Snapshots are immutable; a reload builds a new one and swaps it in
//! between requests.

use std::collections::HashMap;
use std::path::Path;
use std::sync::{Arc, RwLock};

use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use mediashock_core::catalog::DisasterType;
use mediashock_core::counterfactual::{
    equivalent_deaths, isotonic_increasing, normalize_view, simulate_grid, DeathGrid, Equivalence, Pair, ScenarioGrid,
    ScenarioSpec, UnitStatus, View,
};
use mediashock_core::exec::Sequential;
use mediashock_core::features::FeatureTable;
use mediashock_core::forest::ForestModel;
use mediashock_core::CountryCode;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::{binfmt, io, pipeline};

pub const API_VERSION: &str = "v1";

/// Everything a request needs, fixed at load time.
#[derive(Debug)]
pub struct Snapshot {
    model: ForestModel,
    model_hash: String,
    features: FeatureTable,
    countries: Vec<CountryCode>,
    grid: DeathGrid,
}

impl Snapshot {
    /// `features` is the raw table; it is z-scored the same way as for training.
    pub fn new(model: ForestModel, features: &FeatureTable, grid: DeathGrid) -> anyhow::Result<Self> {
        let model_hash = hex::encode(Sha256::digest(binfmt::encode_model(&model)?));
        let features = pipeline::zscored(features)?;
        Ok(Snapshot {
            model,
            model_hash,
            countries: features.countries(),
            features,
            grid,
        })
    }

    pub fn load(model: &Path, features: &Path) -> anyhow::Result<Self> {
        let m = binfmt::load_model(model)?;
        let f = io::read_features(features)?;
        Snapshot::new(m, &f, DeathGrid::default())
    }

    pub fn model_hash(&self) -> &str {
        &self.model_hash
    }

    pub fn meta(&self) -> Meta {
        Meta {
            api_version: API_VERSION,
            countries: self.countries.iter().map(|c| c.to_string()).collect(),
            dtypes: DisasterType::ALL.iter().map(|d| d.name()).collect(),
            grid: GridMeta {
                min: self.grid.first(),
                max: self.grid.last(),
                step: self.grid.max_step(),
                points: self.grid.values().to_vec(),
            },
            model_hash: self.model_hash.clone(),
            n_trees: self.model.trees.len(),
            features: self.model.names.clone(),
        }
    }

    fn curves(&self, pairs: &[Pair], dtype: DisasterType) -> (Vec<ScenarioGrid>, Vec<Pair>) {
        let spec = ScenarioSpec {
            dtypes: vec![dtype],
            grid: self.grid.clone(),
            ..ScenarioSpec::default()
        };
        let sim = simulate_grid(&self.model, &self.features, pairs, &spec, &Sequential);
        (sim.grids, sim.skipped.into_iter().map(|s| s.pair).collect())
    }

    fn country(&self, q: &HashMap<String, String>, key: &str) -> Result<CountryCode, ApiError> {
        let raw = param(q, key)?;
        raw.parse::<CountryCode>()
            .ok()
            .filter(|c| self.countries.contains(c))
            .ok_or_else(|| ApiError::new(ErrorCode::UnknownCountry, format!("{key}={raw} is not a known country")))
    }

    fn deaths(&self, q: &HashMap<String, String>) -> Result<f64, ApiError> {
        let raw = param(q, "deaths")?;
        let d: f64 = raw
            .parse()
            .ok()
            .filter(|d: &f64| d.is_finite())
            .ok_or_else(|| ApiError::new(ErrorCode::BadRequest, format!("deaths={raw} is not a number")))?;
        if d < self.grid.first() as f64 || d > self.grid.last() as f64 {
            return Err(ApiError::new(
                ErrorCode::DeathsOutOfRange,
                format!("deaths must lie in [{}, {}]", self.grid.first(), self.grid.last()),
            ));
        }
        Ok(d)
    }

    /// Predicted curve for one pair plus the toll in every other affected
    /// country that draws the same predicted coverage.
    pub fn counterfactual(&self, q: &HashMap<String, String>) -> Result<CounterfactualResponse, ApiError> {
        let reporting = self.country(q, "reporting")?;
        let affected = self.country(q, "affected")?;
        let dtype = dtype(q)?;
        let deaths = self.deaths(q)?;
        if reporting == affected {
            return Err(ApiError::new(ErrorCode::BadRequest, "reporting and affected must differ".into()));
        }
        let target_pair = Pair {
            report_country: reporting,
            affected_country: affected,
        };
        let (mut target, _) = self.curves(&[target_pair], dtype);
        let Some(target) = target.pop() else {
            return Err(ApiError::new(
                ErrorCode::MissingFeatures,
                format!("no connectedness features for {reporting}-{affected}"),
            ));
        };
        let beta_hat = target.value_at(deaths).unwrap_or(f64::NAN);
        let smooth = isotonic_increasing(&target.beta);
        let curve = self
            .grid
            .values()
            .iter()
            .zip(target.beta.iter().zip(&smooth))
            .map(|(&d, (&b, &s))| CurvePoint {
                deaths: d,
                beta_hat: b,
                beta_monotone: s,
            })
            .collect();

        let others: Vec<Pair> = self
            .countries
            .iter()
            .filter(|&&c| c != reporting && c != affected)
            .map(|&c| Pair {
                report_country: reporting,
                affected_country: c,
            })
            .collect();
        let (queries, skipped) = self.curves(&others, dtype);
        let mut equivalents = Vec::with_capacity(queries.len());
        for g in &queries {
            let eq = equivalent_deaths(&target, g, deaths).map_err(|e| ApiError::new(ErrorCode::BadRequest, e.to_string()))?;
            equivalents.push(EquivalentEntry::new(g.affected_country, eq));
        }
        Ok(CounterfactualResponse {
            reporting: reporting.to_string(),
            affected: affected.to_string(),
            dtype: dtype.name(),
            deaths,
            beta_hat,
            curve,
            equivalents,
            skipped: skipped.iter().map(|p| p.affected_country.to_string()).collect(),
        })
    }

    /// Percentile-normalized values of one unit at one toll. Anchors come
    /// from every counterpart and every grid point for the requested type.
    pub fn view(&self, q: &HashMap<String, String>) -> Result<ViewResponse, ApiError> {
        let view: View = param(q, "view")?
            .parse()
            .map_err(|_| ApiError::new(ErrorCode::BadRequest, "view must be reporting or disaster".into()))?;
        let country = self.country(q, "country")?;
        let dtype = dtype(q)?;
        let deaths = self.deaths(q)?;
        let pairs: Vec<Pair> = self
            .countries
            .iter()
            .filter(|&&c| c != country)
            .map(|&c| match view {
                View::CountryOfDisaster => Pair {
                    report_country: c,
                    affected_country: country,
                },
                View::CountryOfReporting => Pair {
                    report_country: country,
                    affected_country: c,
                },
            })
            .collect();
        let (grids, _) = self.curves(&pairs, dtype);
        let triples: Vec<(CountryCode, CountryCode, f64)> = grids
            .iter()
            .flat_map(|g| g.beta.iter().map(move |&b| (g.report_country, g.affected_country, b)))
            .collect();
        let nv = normalize_view(&triples, view).map_err(|e| ApiError::new(ErrorCode::BadRequest, e.to_string()))?;
        let unit = nv.unit(country).cloned();
        let (p5, p95, status, n) = match &unit {
            Some(u) => (u.p5, u.p95, u.status, u.n),
            None => (None, None, UnitStatus::TooFewValues, 0),
        };
        let values = grids
            .iter()
            .map(|g| {
                let counterpart = match view {
                    View::CountryOfDisaster => g.report_country,
                    View::CountryOfReporting => g.affected_country,
                };
                let raw = g.value_at(deaths).unwrap_or(f64::NAN);
                let norm = match (status, p5, p95) {
                    (UnitStatus::Ok, Some(lo), Some(hi)) => Some(mediashock_core::counterfactual::anchor_map(raw, lo, hi)),
                    _ => None,
                };
                ViewValue {
                    country: counterpart.to_string(),
                    beta_hat: raw,
                    norm,
                }
            })
            .collect();
        Ok(ViewResponse {
            view: view.name(),
            country: country.to_string(),
            dtype: dtype.name(),
            deaths,
            anchors: Anchors { p5, p95, status, n },
            values,
        })
    }
}

fn param<'a>(q: &'a HashMap<String, String>, key: &str) -> Result<&'a str, ApiError> {
    q.get(key)
        .map(|s| s.as_str())
        .ok_or_else(|| ApiError::new(ErrorCode::BadRequest, format!("missing query parameter {key}")))
}

fn dtype(q: &HashMap<String, String>) -> Result<DisasterType, ApiError> {
    let raw = param(q, "dtype")?;
    DisasterType::parse(raw).ok_or_else(|| ApiError::new(ErrorCode::UnknownDtype, format!("dtype={raw} is not a known disaster type")))
}

#[derive(Clone, Debug, Serialize)]
pub struct GridMeta {
    pub min: u32,
    pub max: u32,
    pub step: u32,
    pub points: Vec<u32>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Meta {
    pub api_version: &'static str,
    pub countries: Vec<String>,
    pub dtypes: Vec<&'static str>,
    pub grid: GridMeta,
    pub model_hash: String,
    pub n_trees: usize,
    pub features: Vec<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct CurvePoint {
    pub deaths: u32,
    pub beta_hat: f64,
    /// The curve after isotonic smoothing, as used for inversion.
    pub beta_monotone: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct EquivalentEntry {
    pub country: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub deaths_star: Option<f64>,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub out_of_range: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nearest: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub side: Option<&'static str>,
    #[serde(skip_serializing_if = "std::ops::Not::not")]
    pub undefined: bool,
}

impl EquivalentEntry {
    fn new(country: CountryCode, eq: Equivalence) -> Self {
        let mut e = EquivalentEntry {
            country: country.to_string(),
            deaths_star: None,
            out_of_range: false,
            nearest: None,
            side: None,
            undefined: false,
        };
        match eq {
            Equivalence::Deaths { deaths } => e.deaths_star = Some(deaths),
            Equivalence::OutOfRange { nearest, above } => {
                e.out_of_range = true;
                e.nearest = Some(nearest);
                e.side = Some(if above { "above" } else { "below" });
            }
            Equivalence::Undefined => e.undefined = true,
        }
        e
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CounterfactualResponse {
    pub reporting: String,
    pub affected: String,
    pub dtype: &'static str,
    pub deaths: f64,
    pub beta_hat: f64,
    pub curve: Vec<CurvePoint>,
    pub equivalents: Vec<EquivalentEntry>,
    /// Affected countries without connectedness features for this reporter.
    pub skipped: Vec<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct Anchors {
    pub p5: Option<f64>,
    pub p95: Option<f64>,
    pub status: UnitStatus,
    pub n: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct ViewValue {
    pub country: String,
    pub beta_hat: f64,
    pub norm: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ViewResponse {
    pub view: &'static str,
    pub country: String,
    pub dtype: &'static str,
    pub deaths: f64,
    pub anchors: Anchors,
    pub values: Vec<ViewValue>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorCode {
    BadRequest,
    UnknownCountry,
    UnknownDtype,
    DeathsOutOfRange,
    MissingFeatures,
    ModelNotLoaded,
}

#[derive(Clone, Debug, Serialize)]
pub struct ApiError {
    pub error: ErrorCode,
    pub message: String,
}

impl ApiError {
    pub fn new(error: ErrorCode, message: String) -> Self {
        ApiError { error, message }
    }

    pub fn status(&self) -> StatusCode {
        match self.error {
            ErrorCode::ModelNotLoaded => StatusCode::SERVICE_UNAVAILABLE,
            _ => StatusCode::BAD_REQUEST,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status(), Json(self)).into_response()
    }
}

/// Shared handle to the current snapshot.
#[derive(Clone, Debug, Default)]
pub struct AppState {
    current: Arc<RwLock<Option<Arc<Snapshot>>>>,
}

impl AppState {
    pub fn new(snapshot: Option<Snapshot>) -> Self {
        AppState {
            current: Arc::new(RwLock::new(snapshot.map(Arc::new))),
        }
    }

    /// Replace the snapshot; requests in flight keep the one they started with.
    pub fn swap(&self, snapshot: Option<Snapshot>) {
        *self.current.write().unwrap_or_else(|e| e.into_inner()) = snapshot.map(Arc::new);
    }

    pub fn snapshot(&self) -> Result<Arc<Snapshot>, ApiError> {
        self.current
            .read()
            .unwrap_or_else(|e| e.into_inner())
            .clone()
            .ok_or_else(|| ApiError::new(ErrorCode::ModelNotLoaded, "no model is loaded".into()))
    }
}

type Params = Query<HashMap<String, String>>;

async fn meta(State(state): State<AppState>) -> Result<Json<Meta>, ApiError> {
    Ok(Json(state.snapshot()?.meta()))
}

async fn counterfactual(State(state): State<AppState>, Query(q): Params) -> Result<Json<CounterfactualResponse>, ApiError> {
    let snap = state.snapshot()?;
    tokio::task::spawn_blocking(move || snap.counterfactual(&q))
        .await
        .map_err(|e| ApiError::new(ErrorCode::BadRequest, e.to_string()))?
        .map(Json)
}

async fn view(State(state): State<AppState>, Query(q): Params) -> Result<Json<ViewResponse>, ApiError> {
    let snap = state.snapshot()?;
    tokio::task::spawn_blocking(move || snap.view(&q))
        .await
        .map_err(|e| ApiError::new(ErrorCode::BadRequest, e.to_string()))?
        .map(Json)
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/v1/meta", get(meta))
        .route("/v1/counterfactual", get(counterfactual))
        .route("/v1/view", get(view))
        .with_state(state)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn error_codes_serialize_in_snake_case() {
        let e = ApiError::new(ErrorCode::UnknownDtype, "x".into());
        let v = serde_json::to_value(&e).unwrap();
        assert_eq!(v["error"], "unknown_dtype");
        assert_eq!(e.status(), StatusCode::BAD_REQUEST);
        assert_eq!(ApiError::new(ErrorCode::ModelNotLoaded, String::new()).status(), StatusCode::SERVICE_UNAVAILABLE);
    }

    #[test]
    fn empty_state_is_unavailable() {
        let s = AppState::default();
        assert_eq!(s.snapshot().unwrap_err().error, ErrorCode::ModelNotLoaded);
    }

    #[test]
    fn equivalents_flatten_to_flags() {
        let e = EquivalentEntry::new(CountryCode::new("ITA").unwrap(), Equivalence::OutOfRange { nearest: 300, above: true });
        let v = serde_json::to_value(&e).unwrap();
        assert_eq!(v["out_of_range"], true);
        assert_eq!(v["side"], "above");
        assert!(v.get("deaths_star").is_none());
        let v = serde_json::to_value(EquivalentEntry::new(e.country.parse().unwrap(), Equivalence::Deaths { deaths: 43.0 })).unwrap();
        assert_eq!(v["deaths_star"], 43.0);
        assert!(v.get("out_of_range").is_none());
    }
}
