mod common;

use axum::http::StatusCode;
use common::*;
use mediashock::service::AppState;
use serde_json::Value;

fn state() -> AppState {
    AppState::new(Some(fixture_snapshot()))
}

#[tokio::test]
async fn responses_match_golden_files() {
    let s = state();
    for (name, uri) in GOLDEN {
        let (status, body) = get(&s, uri).await;
        assert_eq!(status, StatusCode::OK, "{uri}: {body}");
        let want = std::fs::read_to_string(golden_path(name)).expect("golden file; regenerate with --ignored");
        assert_eq!(to_pretty(&body), want, "{name} drifted from its golden file");
    }
}

#[tokio::test]
async fn meta_describes_the_snapshot() {
    let (status, m) = get(&state(), "/v1/meta").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(m["api_version"], "v1");
    assert_eq!(m["countries"].as_array().unwrap().len(), 40);
    assert_eq!(m["dtypes"].as_array().unwrap().len(), 8);
    assert_eq!(m["grid"]["min"], 10);
    assert_eq!(m["grid"]["max"], 300);
    assert_eq!(m["grid"]["points"].as_array().unwrap().len(), 59);
    let bytes = std::fs::read(model_path()).unwrap();
    use sha2::Digest;
    assert_eq!(m["model_hash"], hex::encode(sha2::Sha256::digest(bytes)));
}

#[tokio::test]
async fn counterfactual_curve_and_equivalents() {
    let (status, r) = get(&state(), "/v1/counterfactual?reporting=DEU&affected=BGD&dtype=storm&deaths=100").await;
    assert_eq!(status, StatusCode::OK);
    let curve = r["curve"].as_array().unwrap();
    assert_eq!(curve.len(), 59);
    let mono: Vec<f64> = curve.iter().map(|p| p["beta_monotone"].as_f64().unwrap()).collect();
    assert!(mono.windows(2).all(|w| w[0] <= w[1]));
    // 100 deaths is a grid point, so the headline value is the curve's.
    let at_100 = curve.iter().find(|p| p["deaths"] == 100).unwrap();
    assert_eq!(r["beta_hat"], at_100["beta_hat"]);

    let eqs = r["equivalents"].as_array().unwrap();
    assert_eq!(eqs.len() + r["skipped"].as_array().unwrap().len(), 38);
    for e in eqs {
        assert!(e["country"] != "DEU" && e["country"] != "BGD");
        let kinds = [e.get("deaths_star").is_some(), e.get("out_of_range").is_some(), e.get("undefined").is_some()];
        assert_eq!(kinds.iter().filter(|k| **k).count(), 1, "{e}");
        if let Some(d) = e["deaths_star"].as_f64() {
            assert!((10.0..=300.0).contains(&d));
        }
        if e.get("out_of_range").is_some() {
            assert!(e["side"] == "above" || e["side"] == "below");
            assert!(e["nearest"] == 10 || e["nearest"] == 300);
        }
    }
}

#[tokio::test]
async fn views_are_bounded() {
    for uri in [
        "/v1/view?view=disaster&country=BGD&dtype=earthquake&deaths=250",
        "/v1/view?view=country_of_reporting&country=ITA&dtype=flood&deaths=10",
    ] {
        let (status, v) = get(&state(), uri).await;
        assert_eq!(status, StatusCode::OK, "{v}");
        assert_eq!(v["anchors"]["status"], "ok");
        let values = v["values"].as_array().unwrap();
        assert_eq!(values.len(), 39);
        for x in values {
            let n = x["norm"].as_f64().unwrap();
            assert!((-1.0..=1.0).contains(&n));
        }
    }
}

async fn error_of(uri: &str) -> (StatusCode, Value) {
    get(&state(), uri).await
}

#[tokio::test]
async fn bad_queries_get_typed_errors() {
    let cases = [
        ("/v1/counterfactual?reporting=XXX&affected=BGD&dtype=storm&deaths=100", "unknown_country"),
        ("/v1/counterfactual?reporting=DEU&affected=BGD&dtype=tsunami&deaths=100", "unknown_dtype"),
        ("/v1/counterfactual?reporting=DEU&affected=BGD&dtype=storm&deaths=5", "deaths_out_of_range"),
        ("/v1/counterfactual?reporting=DEU&affected=BGD&dtype=storm&deaths=many", "bad_request"),
        ("/v1/counterfactual?reporting=DEU&affected=DEU&dtype=storm&deaths=100", "bad_request"),
        ("/v1/counterfactual?reporting=DEU&dtype=storm&deaths=100", "bad_request"),
        ("/v1/view?view=sideways&country=DEU&dtype=storm&deaths=100", "bad_request"),
        ("/v1/view?view=disaster&country=deu&dtype=storm&deaths=100", "unknown_country"),
    ];
    for (uri, code) in cases {
        let (status, body) = error_of(uri).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{uri}");
        assert_eq!(body["error"], code, "{uri}: {body}");
        assert!(body["message"].as_str().is_some_and(|m| !m.is_empty()));
    }
}

#[tokio::test]
async fn no_model_means_unavailable() {
    let empty = AppState::default();
    for uri in ["/v1/meta", "/v1/view?view=disaster&country=BGD&dtype=storm&deaths=100"] {
        let (status, body) = get(&empty, uri).await;
        assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
        assert_eq!(body["error"], "model_not_loaded");
    }
}

#[tokio::test]
async fn swap_replaces_the_snapshot() {
    let s = AppState::default();
    s.swap(Some(fixture_snapshot()));
    let (status, _) = get(&s, "/v1/meta").await;
    assert_eq!(status, StatusCode::OK);
    s.swap(None);
    let (status, _) = get(&s, "/v1/meta").await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
}

/// Rebuild the fixture model and golden files from the reference world.
/// Run with `cargo test -p mediashock --test service -- --ignored regenerate`.
#[tokio::test]
#[ignore]
async fn regenerate_fixtures() {
    use mediashock::exec::Rayon;
    use mediashock::pipeline::{estimate_events, zscored, EstimateParams};
    use mediashock::synth::{generate_world, WorldConfig};
    use mediashock_core::analysis::AnalysisTable;
    use mediashock_core::forest::{train_forest, Dataset, FeatureSet, ForestConfig};

    let w = generate_world(&WorldConfig::reference(FIXTURE_SEED)).unwrap();
    assert_eq!(w.features, fixture_features());
    let run = estimate_events(&w.store, &w.catalog, &EstimateParams::default(), &Rayon);
    let table = AnalysisTable::join(&run.estimates, &w.catalog, Some(&zscored(&w.features).unwrap()));
    let (data, _) = Dataset::from_table(&table, FeatureSet::Combined, false).unwrap();
    let cfg = ForestConfig {
        n_trees: 50,
        ..ForestConfig::default()
    };
    let model = train_forest(&data, &cfg, &Rayon).unwrap().model;
    mediashock::io::write_bytes(&model_path(), &mediashock::binfmt::encode_model(&model).unwrap()).unwrap();

    let s = state();
    for (name, uri) in GOLDEN {
        let (status, body) = get(&s, uri).await;
        assert_eq!(status, StatusCode::OK, "{uri}");
        std::fs::write(golden_path(name), to_pretty(&body)).unwrap();
    }
}
