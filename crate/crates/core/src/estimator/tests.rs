use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::catalog::{build_event_window, Catalog, DisasterEvent, DisasterType};
use crate::panel::{Channel, Day, PanelBuilder, PanelStore, SourceRecord, SourceRegistry, Transform};

fn c(s: &str) -> CountryCode {
    CountryCode::new(s).unwrap()
}

const T0: i32 = 18331;

/// Sources with the given homes, a fixed country set, deterministic
/// pseudo-random counts over `days` days, and `lift` added on the event
/// country during the treatment window.
fn toy_store(homes: &[&str], dests: &[&str], days: i32, lift: u32) -> PanelStore {
    let registry = SourceRegistry::new(homes.iter().enumerate().map(|(k, h)| SourceRecord {
        source_id: alloc::format!("s{k}"),
        home_country: c(h),
    }))
    .unwrap();
    let mut b = PanelBuilder::new(registry)
        .with_span(Day(T0), Day(T0 + days - 1))
        .unwrap()
        .with_countries(dests.iter().map(|d| c(d)));
    let mut state = 12345u64;
    for t in 0..days {
        for (s, _) in homes.iter().enumerate() {
            for (d, dest) in dests.iter().enumerate() {
                state = crate::rng::mix64(state);
                let mut n = 5 + (state % 7) as u32 + (s * 3 + d) as u32;
                if *dest == "BGD" && (10..=13).contains(&t) {
                    n += lift;
                }
                b.push_indexed(s as u32, c(dest), Day(T0 + t), n, n / 2).unwrap();
            }
        }
    }
    b.build().unwrap()
}

fn bgd_event() -> DisasterEvent {
    DisasterEvent::new("ev1", c("BGD"), DisasterType::Storm, Day(T0 + 10), Day(T0 + 10), 100).unwrap()
}

fn toy_design(lift: u32) -> Design {
    let store = toy_store(&["DEU", "DEU", "ITA", "BGD"], &["DEU", "ITA", "BGD", "MEX"], 21, lift);
    let ev = bgd_event();
    let w = build_event_window(&ev, 7, 3, store.span().as_ref()).unwrap();
    build_design(&store, &w, &ev, Transform::Log1p, Channel::Total).unwrap()
}

#[test]
fn design_counts_rows_without_own_country() {
    let store = toy_store(&["DEU", "DEU"], &["DEU", "ITA", "BGD"], 10, 0);
    let ev = DisasterEvent::new("e", c("BGD"), DisasterType::Flood, Day(T0 + 5), Day(T0 + 5), 0).unwrap();
    let w = build_event_window(&ev, 4, 1, store.span().as_ref()).unwrap();
    let d = build_design(&store, &w, &ev, Transform::Log1p, Channel::Total).unwrap();
    // 2 sources x 3 dests x 9 days, minus the DEU->DEU rows.
    assert_eq!(w.n_days(), 9);
    assert_eq!(d.len(), 2 * 3 * 9 - 2 * 9);
    assert!(d.rows().all(|r| r.report_country != r.dest));
}

#[test]
fn treat_marks_event_country_for_tau_plus_one_days() {
    let d = toy_design(0);
    let bgd = d.event_country;
    let treated: Vec<DesignRow> = d.rows().filter(|r| r.treat).collect();
    assert!(treated.iter().all(|r| r.dest == bgd && (0..=3).contains(&r.event_time)));
    let mut days: Vec<u32> = treated.iter().map(|r| r.day).collect();
    days.sort_unstable();
    days.dedup();
    assert_eq!(days.len(), 4);
    // The BGD source never reports on BGD.
    let bgd_source = 3;
    assert!(!d.rows().any(|r| r.source == bgd_source && r.dest == bgd));
}

#[test]
fn event_country_must_be_in_panel() {
    let store = toy_store(&["DEU"], &["ITA", "MEX"], 10, 0);
    let ev = DisasterEvent::new("e", c("BGD"), DisasterType::Flood, Day(T0 + 5), Day(T0 + 5), 0).unwrap();
    let w = build_event_window(&ev, 3, 1, store.span().as_ref()).unwrap();
    assert!(matches!(
        build_design(&store, &w, &ev, Transform::Log1p, Channel::Total),
        Err(Error::EventCountryAbsent(_))
    ));
}

#[test]
fn lift_gives_positive_estimates_per_reporter() {
    let fit = estimate_event(&toy_design(40), &EstimateOptions::default()).unwrap();
    let reporters: Vec<_> = fit.estimates.iter().map(|e| e.report_country.unwrap().to_string()).collect();
    assert_eq!(reporters, ["DEU", "ITA"]);
    for e in &fit.estimates {
        assert!(e.beta > 0.5, "{e:?}");
        assert!(e.is_defined());
    }
}

#[test]
fn pooled_estimate_is_between_reporters() {
    let d = toy_design(40);
    let per = estimate_event(&d, &EstimateOptions::default()).unwrap();
    let opts = EstimateOptions {
        by_report_country: false,
        ..EstimateOptions::default()
    };
    let pooled = estimate_event(&d, &opts).unwrap();
    assert_eq!(pooled.estimates.len(), 1);
    let b = pooled.estimates[0].beta;
    let lo = per.estimates.iter().map(|e| e.beta).fold(f64::INFINITY, f64::min);
    let hi = per.estimates.iter().map(|e| e.beta).fold(f64::NEG_INFINITY, f64::max);
    assert!(lo - 1e-12 <= b && b <= hi + 1e-12);
}

#[test]
fn no_treated_rows_is_undefined() {
    let mut d = toy_design(0);
    d.treat.iter_mut().for_each(|t| *t = false);
    let opts = EstimateOptions {
        by_report_country: false,
        ..EstimateOptions::default()
    };
    let fit = estimate_event(&d, &opts).unwrap();
    let e = &fit.estimates[0];
    assert!(e.flags.contains(EstimateFlags::UNDEFINED));
    assert!(e.beta.is_nan());
    assert_eq!(e.beta_shrunk, 0.0);
}

#[test]
fn residuals_are_orthogonal_to_fixed_effects() {
    let d = toy_design(10);
    let fit = estimate_event(&d, &EstimateOptions::default()).unwrap();
    let absorber = dyad_day_absorber(&d);
    assert!(absorber.max_group_mean(&fit.fit.residuals) < 1e-8);
}

#[test]
fn scaling_outcomes_scales_beta_and_se() {
    let d = toy_design(25);
    let a = estimate_event(&d, &EstimateOptions::default()).unwrap();
    let b = estimate_event(&d.scaled(3.0), &EstimateOptions::default()).unwrap();
    for (x, y) in a.estimates.iter().zip(&b.estimates) {
        assert!((3.0 * x.beta - y.beta).abs() < 1e-9);
        assert!((3.0 * x.se - y.se).abs() < 1e-9);
        assert!((x.tstat - y.tstat).abs() < 1e-6);
        assert_eq!(x.beta_shrunk == 0.0, y.beta_shrunk == 0.0);
    }
}

#[test]
fn own_country_rows_do_not_matter() {
    let store = toy_store(&["DEU", "DEU", "ITA", "BGD"], &["DEU", "ITA", "BGD", "MEX"], 21, 30);
    let ev = bgd_event();
    let w = build_event_window(&ev, 7, 3, store.span().as_ref()).unwrap();
    let d = build_design(&store, &w, &ev, Transform::Log1p, Channel::Total).unwrap();
    let mut rows: Vec<DesignRow> = d.rows().collect();
    let extra = rows.len() as u32;
    for r in 0..20u32 {
        rows.push(DesignRow {
            y: 50.0 + r as f64,
            dyad: extra + r,
            day: r % 21,
            source: 0,
            dest: 0,
            report_country: 0,
            treat: r % 3 == 0,
            event_time: 0,
        });
    }
    let polluted = Design::from_rows("ev1", d.event_country, d.countries.clone(), &rows);
    let a = estimate_event(&d, &EstimateOptions::default()).unwrap();
    let b = estimate_event(&polluted, &EstimateOptions::default()).unwrap();
    assert_eq!(a.estimates, b.estimates);
}

#[test]
fn shrink_examples() {
    let rule = ShrinkRule::default();
    let mk = |beta: f64, se: f64| {
        EventEstimate::from_parts("e", None, beta, se, 10, EstimateFlags::empty(), &rule)
    };
    assert_eq!(mk(0.05, 0.04).beta_shrunk, 0.0);
    assert_eq!(mk(0.05, 0.02).beta_shrunk, 0.05);
    assert_eq!(mk(-0.10, 0.01).beta_shrunk, 0.0);
    let mut v = vec![mk(-0.10, 0.01)];
    shrink_estimates(&mut v, &ShrinkRule { threshold: 1.65, two_sided: true });
    assert_eq!(v[0].beta_shrunk, -0.10);
    let undefined = mk(0.3, 0.0);
    assert!(undefined.flags.contains(EstimateFlags::SE_UNDEFINED));
    assert_eq!(undefined.beta_shrunk, 0.0);
}

#[test]
fn flag_labels_round_trip() {
    let f = EstimateFlags::CLIPPED | EstimateFlags::OVERLAP;
    assert_eq!(f.label(), "clipped|overlap");
    assert_eq!(EstimateFlags::parse_label(&f.label()), Some(f));
    assert_eq!(EstimateFlags::empty().label(), "-");
    assert_eq!(EstimateFlags::parse_label("-"), Some(EstimateFlags::empty()));
    assert_eq!(EstimateFlags::parse_label("bogus"), None);
}

#[test]
fn flexible_profile_has_fifteen_days_and_finds_the_lift() {
    let store = toy_store(&["DEU", "DEU", "ITA", "BGD", "MEX"], &["DEU", "ITA", "BGD", "MEX"], 40, 40);
    let ev = bgd_event();
    // Wide pad so that dest-country days exist outside the kappa grid.
    let w = build_event_window(&ev, 10, 3, store.span().as_ref()).unwrap();
    let d = build_design(&store, &w, &ev, Transform::Log1p, Channel::Total).unwrap();
    let p = estimate_event_flexible(&d, SeKind::TwoWay).unwrap();
    assert_eq!(p.entries.len(), 15);
    assert!(p.entries.iter().all(|e| !e.flags.contains(EstimateFlags::REFERENCE)));
    for e in &p.entries {
        if (0..=3).contains(&e.kappa) {
            assert!(e.beta > 0.5, "{e:?}");
        } else {
            assert!(e.beta.abs() < 0.3, "{e:?}");
        }
    }
}

#[test]
fn flexible_profile_uses_first_day_as_reference_when_window_is_tight() {
    let d = toy_design(40);
    let p = estimate_event_flexible(&d, SeKind::TwoWay).unwrap();
    assert_eq!(p.entries.len(), 15);
    let first = &p.entries[0];
    assert_eq!(first.kappa, -7);
    assert!(first.flags.contains(EstimateFlags::REFERENCE));
    assert_eq!(first.beta, 0.0);
}

#[test]
fn pool_single_event_type_mean_is_that_estimate() {
    let cat = Catalog::new(vec![bgd_event()]).unwrap();
    let fit = estimate_event(&toy_design(40), &EstimateOptions::default()).unwrap();
    let pooled = pool_by_type(&fit.estimates, &cat, false);
    let m = pooled.mean(DisasterType::Storm).unwrap();
    let expect = (fit.estimates[0].beta + fit.estimates[1].beta) / 2.0;
    assert!((m - expect).abs() < 1e-15);
    assert_eq!(pooled.country_mean(c("DEU"), DisasterType::Storm), Some(fit.estimates[0].beta));
    assert!(pooled.mean(DisasterType::Flood).is_none());
}

#[test]
fn pool_all_zero_shrunk_is_zero() {
    let cat = Catalog::new(vec![bgd_event()]).unwrap();
    let mut est = estimate_event(&toy_design(0), &EstimateOptions::default()).unwrap().estimates;
    shrink_estimates(&mut est, &ShrinkRule { threshold: 1e9, two_sided: false });
    assert_eq!(pool_by_type(&est, &cat, true).mean(DisasterType::Storm), Some(0.0));
}

#[test]
fn slopes_relative_to_earthquake_have_no_intercept() {
    let quake = |id: &str, country: &str| {
        DisasterEvent::new(id, c(country), DisasterType::Earthquake, Day(T0), Day(T0), 1).unwrap()
    };
    let fire = |id: &str, country: &str| {
        DisasterEvent::new(id, c(country), DisasterType::Wildfire, Day(T0), Day(T0), 1).unwrap()
    };
    let cat = Catalog::new(vec![quake("q1", "ITA"), fire("f1", "MEX")]).unwrap();
    let mk = |id: &str, rc: &str, beta: f64| EventEstimate {
        event_id: id.into(),
        report_country: Some(c(rc)),
        beta,
        se: 1.0,
        tstat: beta,
        beta_shrunk: beta,
        n_obs: 1,
        flags: EstimateFlags::empty(),
    };
    let est = [mk("q1", "DEU", 1.0), mk("f1", "DEU", 0.5), mk("q1", "USA", 2.0), mk("f1", "USA", 1.0)];
    let pooled = pool_by_type(&est, &cat, false);
    let slope = pooled
        .relative_to_earthquake
        .iter()
        .find(|(d, _)| *d == DisasterType::Wildfire)
        .unwrap()
        .1;
    assert!((slope - 0.5).abs() < 1e-12);
}
