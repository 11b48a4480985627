//! Shared fixture helpers for the service tests.
#![allow(dead_code)]

use std::path::PathBuf;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use mediashock::service::{router, AppState, Snapshot};
use mediashock::synth::{generate_features, WorldConfig};
use mediashock_core::counterfactual::DeathGrid;
use mediashock_core::features::FeatureTable;
use tower::ServiceExt;

/// Seed of the reference world the fixture model was trained on.
pub const FIXTURE_SEED: u64 = 7;

pub fn fixture_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn model_path() -> PathBuf {
    fixture_dir().join("model.bin")
}

pub fn golden_path(name: &str) -> PathBuf {
    fixture_dir().join("golden").join(format!("{name}.json"))
}

/// The raw feature table of the fixture world, regenerated from its seed.
pub fn fixture_features() -> FeatureTable {
    generate_features(&WorldConfig::reference(FIXTURE_SEED).countries(), FIXTURE_SEED).expect("features")
}

pub fn fixture_snapshot() -> Snapshot {
    let model = mediashock::binfmt::load_model(&model_path()).expect("fixture model");
    Snapshot::new(model, &fixture_features(), DeathGrid::default()).expect("snapshot")
}

/// The queries whose responses are pinned as golden files.
pub const GOLDEN: [(&str, &str); 4] = [
    ("meta", "/v1/meta"),
    ("counterfactual_deu_bgd_storm_100", "/v1/counterfactual?reporting=DEU&affected=BGD&dtype=storm&deaths=100"),
    ("view_disaster_bgd_storm_100", "/v1/view?view=disaster&country=BGD&dtype=storm&deaths=100"),
    ("view_reporting_deu_storm_100", "/v1/view?view=reporting&country=DEU&dtype=storm&deaths=100"),
];

pub async fn get(state: &AppState, uri: &str) -> (StatusCode, serde_json::Value) {
    let resp = router(state.clone())
        .oneshot(Request::get(uri).body(Body::empty()).expect("request"))
        .await
        .expect("response");
    let status = resp.status();
    let bytes = axum::body::to_bytes(resp.into_body(), usize::MAX).await.expect("body");
    (status, serde_json::from_slice(&bytes).expect("json body"))
}

pub fn to_pretty(v: &serde_json::Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("json");
    s.push('\n');
    s
}
