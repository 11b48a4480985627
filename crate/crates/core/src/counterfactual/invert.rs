use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::ScenarioGrid;
use crate::error::{Error, Result};

/// Least-squares non-decreasing fit (pool adjacent violators, equal weights).
pub fn isotonic_increasing(y: &[f64]) -> Vec<f64> {
    // Blocks of (sum, count).
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(y.len());
    for &v in y {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (s1, n1) = blocks[blocks.len() - 1];
            let (s0, n0) = blocks[blocks.len() - 2];
            if s0 / n0 as f64 <= s1 / n1 as f64 {
                break;
            }
            blocks.pop();
            let last = blocks.len() - 1;
            blocks[last] = (s0 + s1, n0 + n1);
        }
    }
    let mut out = Vec::with_capacity(y.len());
    for (s, n) in blocks {
        out.extend(core::iter::repeat_n(s / n as f64, n));
    }
    out
}

pub(super) fn interpolate(x: &[u32], y: &[f64], at: f64) -> Option<f64> {
    let (first, last) = (x[0] as f64, x[x.len() - 1] as f64);
    if !(at >= first && at <= last) {
        return None;
    }
    let k = x.partition_point(|&v| (v as f64) < at);
    if x[k] as f64 == at {
        return Some(y[k]);
    }
    let (x0, x1) = (x[k - 1] as f64, x[k] as f64);
    Some(y[k - 1] + (at - x0) / (x1 - x0) * (y[k] - y[k - 1]))
}

/// Result of inverting a query curve.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Equivalence {
    Deaths { deaths: f64 },
    /// The target level lies outside the query curve; `nearest` is the grid
    /// endpoint on that side.
    OutOfRange { nearest: u32, above: bool },
    /// The query curve is flat, so no toll is singled out.
    Undefined,
}

impl Equivalence {
    pub fn deaths(&self) -> Option<f64> {
        match self {
            Equivalence::Deaths { deaths } => Some(*deaths),
            _ => None,
        }
    }
}

/// Deaths in the query scenario that produce the response the target
/// scenario predicts at `deaths_ref`. The query curve is made monotone first
/// and the smallest crossing is returned.
pub fn equivalent_deaths(target: &ScenarioGrid, query: &ScenarioGrid, deaths_ref: f64) -> Result<Equivalence> {
    if target.grid != query.grid {
        return Err(Error::Grid(String::from("target and query use different death grids")));
    }
    let level = target
        .value_at(deaths_ref)
        .ok_or_else(|| Error::Grid(alloc::format!("{deaths_ref} deaths lies outside the grid")))?;
    Ok(invert_level(query.grid.values(), &query.beta, level))
}

pub(super) fn invert_level(x: &[u32], y: &[f64], level: f64) -> Equivalence {
    let q = isotonic_increasing(y);
    let (lo, hi) = (q[0], q[q.len() - 1]);
    if lo == hi {
        return Equivalence::Undefined;
    }
    // Levels read off another interpolated curve can miss an endpoint by
    // rounding; treat those as hitting it.
    let eps = 1e-12 * (hi - lo).max(lo.abs()).max(hi.abs());
    let level = if (level - lo).abs() <= eps {
        lo
    } else if (level - hi).abs() <= eps {
        hi
    } else {
        level
    };
    if level < lo {
        return Equivalence::OutOfRange { nearest: x[0], above: false };
    }
    if level > hi {
        return Equivalence::OutOfRange {
            nearest: x[x.len() - 1],
            above: true,
        };
    }
    let k = q.partition_point(|&v| v < level);
    if k == 0 || q[k] == level {
        return Equivalence::Deaths { deaths: x[k] as f64 };
    }
    let (x0, x1) = (x[k - 1] as f64, x[k] as f64);
    let deaths = x0 + (level - q[k - 1]) / (q[k] - q[k - 1]) * (x1 - x0);
    Equivalence::Deaths { deaths }
}
