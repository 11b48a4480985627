//! Whole-catalog drivers over the per-event estimator.

use mediashock_core::catalog::{build_event_window, Catalog};
use mediashock_core::estimator::{self, EstimateFlags, EstimateOptions, EventEstimate, FlexibleProfile, SeKind};
use mediashock_core::exec::Executor;
use mediashock_core::features::{zscore_features, FeatureTable};
use mediashock_core::panel::{Channel, PanelStore, Transform};
use serde::{Deserialize, Serialize};

/// Window and outcome settings shared by every event.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EstimateParams {
    pub pad: u32,
    pub tau: u32,
    pub transform: Transform,
    pub channel: Channel,
    pub options: EstimateOptions,
}

impl Default for EstimateParams {
    fn default() -> Self {
        EstimateParams {
            pad: 7,
            tau: 3,
            transform: Transform::Log1p,
            channel: Channel::Total,
            options: EstimateOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub event_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default)]
pub struct EstimateRun {
    pub estimates: Vec<EventEstimate>,
    pub skipped: Vec<Skipped>,
}

/// Estimate every event in catalog order. Events whose design cannot be
/// built or fitted are skipped with a reason.
pub fn estimate_events(store: &PanelStore, catalog: &Catalog, params: &EstimateParams, exec: &impl Executor) -> EstimateRun {
    let overlapping = catalog.overlapping(params.pad);
    let span = store.span();
    let events = catalog.events();
    let results = exec.map(events.len(), |k| {
        let ev = &events[k];
        let window = build_event_window(ev, params.pad, params.tau, span.as_ref())?;
        let design = estimator::build_design(store, &window, ev, params.transform, params.channel)?;
        let mut fit = estimator::estimate_event(&design, &params.options)?;
        let mut extra = EstimateFlags::empty();
        if window.clipped {
            extra |= EstimateFlags::CLIPPED;
        }
        if overlapping.contains(&ev.event_id) {
            extra |= EstimateFlags::OVERLAP;
        }
        fit.estimates.iter_mut().for_each(|e| e.flags |= extra);
        Ok::<_, mediashock_core::Error>(fit.estimates)
    });
    let mut run = EstimateRun::default();
    for (ev, r) in events.iter().zip(results) {
        match r {
            Ok(est) => run.estimates.extend(est),
            Err(e) => {
                log::warn!("event {} skipped: {e}", ev.event_id);
                run.skipped.push(Skipped {
                    event_id: ev.event_id.clone(),
                    reason: e.to_string(),
                });
            }
        }
    }
    run
}

/// Day-by-day profiles for every event.
pub fn flexible_profiles(
    store: &PanelStore,
    catalog: &Catalog,
    params: &EstimateParams,
    se_kind: SeKind,
    exec: &impl Executor,
) -> (Vec<FlexibleProfile>, Vec<Skipped>) {
    let span = store.span();
    let events = catalog.events();
    let results = exec.map(events.len(), |k| {
        let ev = &events[k];
        let window = build_event_window(ev, params.pad, params.tau, span.as_ref())?;
        let design = estimator::build_design(store, &window, ev, params.transform, params.channel)?;
        estimator::estimate_event_flexible(&design, se_kind)
    });
    let mut profiles = Vec::new();
    let mut skipped = Vec::new();
    for (ev, r) in events.iter().zip(results) {
        match r {
            Ok(p) => profiles.push(p),
            Err(e) => skipped.push(Skipped {
                event_id: ev.event_id.clone(),
                reason: e.to_string(),
            }),
        }
    }
    (profiles, skipped)
}

/// The feature table with every populated column z-scored, as used for
/// regressions, forests and scenario predictions alike.
pub fn zscored(raw: &FeatureTable) -> anyhow::Result<FeatureTable> {
    Ok(zscore_features(raw)?.table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_world, WorldConfig};
    use mediashock_core::exec::Sequential;

    #[test]
    fn small_world_recovers_planted_effects() {
        let w = generate_world(&WorldConfig::small(1)).unwrap();
        let run = estimate_events(&w.store, &w.catalog, &EstimateParams::default(), &Sequential);
        assert!(run.skipped.is_empty(), "{:?}", run.skipped);
        assert_eq!(run.estimates.len(), w.truth.len());
        let truth = w.truth_map();
        let err: f64 = run
            .estimates
            .iter()
            .map(|e| (e.beta - truth[&(e.event_id.clone(), e.report_country.unwrap())]).abs())
            .sum::<f64>()
            / run.estimates.len() as f64;
        assert!(err < 0.03, "{err}");
    }

    #[test]
    fn executor_does_not_change_estimates() {
        let w = generate_world(&WorldConfig::small(2)).unwrap();
        let p = EstimateParams::default();
        let a = estimate_events(&w.store, &w.catalog, &p, &Sequential);
        let b = estimate_events(&w.store, &w.catalog, &p, &crate::exec::Rayon);
        assert_eq!(a.estimates, b.estimates);
    }
}
