use alloc::string::ToString;

use super::*;
use crate::rng::stream_rng;

fn numeric(names: &[&str], columns: Vec<Vec<f64>>, y: Vec<f64>) -> Dataset {
    let kinds = vec![ColumnKind::Numeric; names.len()];
    Dataset::new(names.iter().map(|s| s.to_string()).collect(), kinds, columns, y).unwrap()
}

fn uniform(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream_rng(seed, 9, 0);
    (0..n).map(|_| rng.random::<f64>()).collect()
}

fn small(n_trees: usize) -> ForestConfig {
    ForestConfig {
        n_trees,
        seed: 11,
        ..ForestConfig::default()
    }
}

#[test]
fn refuses_tiny_training_sets() {
    let d = numeric(&["a"], vec![uniform(50, 1)], uniform(50, 2));
    assert!(matches!(
        train_forest(&d, &small(5), &Sequential),
        Err(Error::TooFewRows { needed: 100, found: 50 })
    ));
}

#[test]
fn config_is_validated() {
    let bad = ForestConfig {
        min_terminal: 40,
        ..ForestConfig::default()
    };
    assert!(bad.validate().is_err());
    assert_eq!(ForestConfig::default().mtry_for(13), 5);
    assert_eq!(ForestConfig::default().mtry_for(10), 4);
    assert_eq!(ForestConfig::default().mtry_for(3), 1);
}

#[test]
fn same_seed_same_model() {
    let x = uniform(300, 3);
    let y: Vec<f64> = x.iter().map(|v| v * v).collect();
    let d = numeric(&["x"], vec![x], y);
    let a = train_forest(&d, &small(20), &Sequential).unwrap();
    let b = train_forest(&d, &small(20), &Sequential).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.oob_prediction, b.oob_prediction);
}

#[test]
fn constant_outcome_predicts_the_constant() {
    let d = numeric(&["x"], vec![uniform(200, 4)], vec![0.25; 200]);
    let t = train_forest(&d, &small(10), &Sequential).unwrap();
    assert_eq!(t.model.predict_row(&[0.3]), 0.25);
    assert_eq!(t.model.predict(&d).unwrap(), vec![0.25; 200]);
}

#[test]
fn outcome_determined_by_type_is_learned() {
    let n = 2000;
    let dtype: Vec<f64> = (0..n).map(|i| ((i * 7) % 5) as f64).collect();
    let y: Vec<f64> = dtype.iter().map(|t| [0.08, 0.0, 0.02, 0.06, 0.04][*t as usize]).collect();
    let d = Dataset::new(
        vec![DTYPE.into(), LOG_DEATHS.into(), DURATION.into()],
        vec![ColumnKind::Categorical { levels: 8 }, ColumnKind::Numeric, ColumnKind::Numeric],
        vec![dtype, uniform(n, 5), uniform(n, 6)],
        y,
    )
    .unwrap();
    let t = train_forest(&d, &small(50), &Sequential).unwrap();
    assert!(t.r2_oob >= 0.95, "{}", t.r2_oob);
}

#[test]
fn pure_noise_has_no_oob_fit() {
    let n = 600;
    let d = numeric(&["a", "b"], vec![uniform(n, 7), uniform(n, 8)], uniform(n, 9));
    let t = train_forest(&d, &small(60), &Sequential).unwrap();
    assert!(t.r2_oob <= 0.02, "{}", t.r2_oob);
}

#[test]
fn importance_is_scaled_and_ignores_noise() {
    let n = 600;
    let x = uniform(n, 10);
    let noise = uniform(n, 11);
    let y: Vec<f64> = x.iter().map(|v| if *v > 0.5 { 1.0 } else { 0.0 }).collect();
    let d = numeric(&["signal", "noise"], vec![x.clone(), noise], y.clone());
    let (_, report) = train_with_report(&d, 0, &small(40), 5, &Sequential).unwrap();
    assert_eq!(report.scaled("signal"), Some(1.0));
    assert!(report.scaled("noise").unwrap() < 0.05);

    let single = numeric(&["signal"], vec![x], y);
    let (_, report) = train_with_report(&single, 0, &small(20), 3, &Sequential).unwrap();
    assert_eq!(report.scaled("signal"), Some(1.0));
    assert!(report.importance.iter().all(|i| i.raw >= 0.0));
}

#[test]
fn predict_needs_every_feature() {
    let d = numeric(&["a", "b"], vec![uniform(120, 12), uniform(120, 13)], uniform(120, 14));
    let t = train_forest(&d, &small(3), &Sequential).unwrap();
    let err = t.model.predict_named(|n| (n == "a").then_some(0.5)).unwrap_err();
    assert!(matches!(err, Error::MissingFeature(ref n) if n == "b"));
    assert!(t.model.predict_named(|_| Some(0.5)).unwrap().is_finite());
}

#[test]
fn subset_path_has_one_row_per_nonempty_subset() {
    let n = 120;
    let mut names: Vec<String> = Feature::FOREST_SET.iter().map(|f| f.name().to_string()).collect();
    names.extend([DTYPE, LOG_DEATHS, DURATION].map(String::from));
    let mut kinds = vec![ColumnKind::Numeric; 13];
    kinds[10] = ColumnKind::Categorical { levels: 8 };
    let mut columns: Vec<Vec<f64>> = (0..13).map(|c| uniform(n, 100 + c)).collect();
    columns[10] = (0..n).map(|i| (i % 4) as f64).collect();
    let y: Vec<f64> = columns[7].iter().zip(&columns[11]).map(|(s, d)| s * d).collect();
    let d = Dataset::new(names, kinds, columns, y).unwrap();
    let path = best_subset_path(&d, &small(100), 3, &Sequential).unwrap();
    assert_eq!(path.rows.len(), 1023);
    assert!(path.reduced_trees);
    assert_eq!(path.upper_envelope().len(), 10);
    let mut masks: Vec<u16> = path.rows.iter().map(|r| r.mask).collect();
    masks.dedup();
    assert_eq!(masks.len(), 1023);
}
