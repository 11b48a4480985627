use mediashock_core::absorb::{Absorber, Factor};
use mediashock_core::counterfactual::{anchor_map, isotonic_increasing};
use mediashock_core::estimator::{estimate_event, fit_within, shrink_estimates, Design, DesignRow, EstimateOptions, ShrinkRule};
use mediashock_core::exec::{Executor, Sequential};
use mediashock_core::forest::{train_forest, ColumnKind, Dataset, ForestConfig};
use mediashock_core::CountryCode;
use proptest::prelude::*;

/// Runs jobs last-to-first; results must still come back in index order.
struct Reversed;

impl Executor for Reversed {
    fn map<T, F>(&self, n: usize, f: F) -> Vec<T>
    where
        T: Send,
        F: Fn(usize) -> T + Sync + Send,
    {
        let mut out: Vec<(usize, T)> = (0..n).rev().map(|i| (i, f(i))).collect();
        out.reverse();
        out.into_iter().map(|(_, t)| t).collect()
    }
}

fn countries(n: usize) -> Vec<CountryCode> {
    ["AAA", "BBB", "CCC", "DDD", "EEE"][..n].iter().map(|c| CountryCode::new(c).unwrap()).collect()
}

#[derive(Debug, Clone)]
struct Spec {
    homes: Vec<u16>,
    n_countries: usize,
    n_days: u32,
    t0: u32,
    y: Vec<f64>,
}

fn spec() -> impl Strategy<Value = Spec> {
    (3usize..=5, 3usize..=7, 6u32..=10).prop_flat_map(|(nc, ns, nd)| {
        let cells = ns * nc * nd as usize;
        (
            proptest::collection::vec(0..nc as u16, ns),
            Just(nc),
            Just(nd),
            2..nd - 1,
            proptest::collection::vec(-2.0f64..2.0, cells),
        )
            .prop_map(|(homes, n_countries, n_days, t0, y)| Spec {
                homes,
                n_countries,
                n_days,
                t0,
                y,
            })
    })
}

/// Every source reports on every country every day; country 0 is hit.
fn design(s: &Spec) -> Design {
    let mut rows = Vec::new();
    let mut k = 0;
    for (src, &home) in s.homes.iter().enumerate() {
        for dest in 0..s.n_countries as u16 {
            for day in 0..s.n_days {
                let treat = dest == 0 && day >= s.t0;
                rows.push(DesignRow {
                    y: s.y[k] + if treat { 0.3 } else { 0.0 },
                    dyad: (src * s.n_countries) as u32 + dest as u32,
                    day,
                    source: src as u32,
                    dest,
                    report_country: home,
                    treat,
                    event_time: day as i32 - s.t0 as i32,
                });
                k += 1;
            }
        }
    }
    Design::from_rows("E", 0, countries(s.n_countries), &rows)
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a.is_nan() && b.is_nan()) || (a - b).abs() <= tol * (1.0 + a.abs().max(b.abs()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scaling_outcomes_scales_estimates(s in spec(), c in 0.1f64..20.0, per_reporter in any::<bool>()) {
        let d = design(&s);
        let opts = EstimateOptions { by_report_country: per_reporter, ..EstimateOptions::default() };
        let (Ok(a), Ok(b)) = (estimate_event(&d, &opts), estimate_event(&d.scaled(c), &opts)) else {
            return Ok(());
        };
        for (x, y) in a.estimates.iter().zip(&b.estimates) {
            prop_assert!(close(x.beta * c, y.beta, 1e-9));
            prop_assert!(close(x.se * c, y.se, 1e-7));
            // A covariance floored to (numerically) zero leaves t as rounding noise.
            if x.se.is_nan() || x.se <= 1e-6 * (1.0 + x.beta.abs()) {
                continue;
            }
            prop_assert!(close(x.tstat, y.tstat, 1e-7), "{:?} vs {:?}", x, y);
            if (x.tstat - 1.65).abs() > 1e-6 {
                prop_assert_eq!(x.beta_shrunk == 0.0, y.beta_shrunk == 0.0);
            }
        }
    }

    #[test]
    fn own_country_rows_never_matter(s in spec()) {
        let d = design(&s);
        let opts = EstimateOptions::default();
        match (estimate_event(&d, &opts), estimate_event(&d.without_own_country(), &opts)) {
            // Debug output spells NaN, so undefined fields compare equal.
            (Ok(a), Ok(b)) => prop_assert_eq!(format!("{:?}", a.estimates), format!("{:?}", b.estimates)),
            (Err(a), Err(b)) => prop_assert_eq!(a, b),
            (a, b) => prop_assert!(false, "{:?} vs {:?}", a.is_ok(), b.is_ok()),
        }
    }

    #[test]
    fn residuals_are_orthogonal_to_absorbed_groups(s in spec()) {
        let d = design(&s).without_own_country();
        let absorber = Absorber::new(d.len(), vec![Factor::new(&d.dyad), Factor::new(&d.day)], None);
        let treat: Vec<f64> = d.treat.iter().map(|&t| f64::from(u8::from(t))).collect();
        let fit = fit_within(&d.y, &[treat], &absorber);
        prop_assert!(fit.converged);
        prop_assert!(absorber.max_group_mean(&fit.residuals) < 1e-8);
    }

    #[test]
    fn shrinkage_is_exact(s in spec(), threshold in 0.5f64..3.0, two_sided in any::<bool>()) {
        let Ok(fit) = estimate_event(&design(&s), &EstimateOptions::default()) else { return Ok(()); };
        let mut est = fit.estimates;
        let rule = ShrinkRule { threshold, two_sided };
        shrink_estimates(&mut est, &rule);
        for e in &est {
            let t = if two_sided { e.tstat.abs() } else { e.tstat };
            if t >= threshold {
                prop_assert_eq!(e.beta_shrunk, e.beta);
            } else {
                prop_assert_eq!(e.beta_shrunk, 0.0);
            }
        }
    }

    #[test]
    fn isotonic_fit_is_monotone_and_mean_preserving(y in proptest::collection::vec(-5.0f64..5.0, 1..60)) {
        let q = isotonic_increasing(&y);
        prop_assert_eq!(q.len(), y.len());
        prop_assert!(q.windows(2).all(|w| w[0] <= w[1] + 1e-12));
        let (sy, sq): (f64, f64) = (y.iter().sum(), q.iter().sum());
        prop_assert!((sy - sq).abs() < 1e-9);
        let again = isotonic_increasing(&q);
        for (a, b) in q.iter().zip(&again) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn anchor_map_is_bounded_and_monotone(a in -10.0f64..10.0, b in -10.0f64..10.0, lo in -5.0f64..5.0, width in 1e-3f64..5.0) {
        let (x, y) = (a.min(b), a.max(b));
        let (fx, fy) = (anchor_map(x, lo, lo + width), anchor_map(y, lo, lo + width));
        prop_assert!((-1.0..=1.0).contains(&fx) && (-1.0..=1.0).contains(&fy));
        prop_assert!(fx <= fy);
    }
}

#[test]
fn forest_does_not_depend_on_job_order() {
    let n = 300;
    let x0: Vec<f64> = (0..n).map(|i| ((i * 37) % 101) as f64 / 101.0).collect();
    let x1: Vec<f64> = (0..n).map(|i| (i % 5) as f64).collect();
    let y: Vec<f64> = x0.iter().zip(&x1).map(|(a, b)| a * 2.0 + if *b == 3.0 { 1.0 } else { 0.0 }).collect();
    let data = Dataset::new(
        vec!["x0".into(), "x1".into()],
        vec![ColumnKind::Numeric, ColumnKind::Categorical { levels: 5 }],
        vec![x0, x1],
        y,
    )
    .unwrap();
    let cfg = ForestConfig {
        n_trees: 25,
        seed: 3,
        ..ForestConfig::default()
    };
    let a = train_forest(&data, &cfg, &Sequential).unwrap();
    let b = train_forest(&data, &cfg, &Reversed).unwrap();
    assert_eq!(a.model, b.model);
    assert_eq!(a.r2_oob, b.r2_oob);
    assert!(a.r2_oob > 0.8, "{}", a.r2_oob);
}
