//! Bagged regression forests over event estimates, with out-of-bag fit,
//! permutation importance and the best-subset path over dyadic features.

mod data;
mod tree;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use data::{ColumnKind, Dataset, FeatureSet, DTYPE, DURATION, LOG_DEATHS};
pub use tree::{grow_tree, Node, SplitRule, Tree, TreeParams};

use crate::error::{Error, Result};
use crate::exec::{Executor, Sequential};
use crate::features::Feature;
use crate::rng::{stream_rng, streams, sub_seed};

pub const MODEL_VERSION: u32 = 1;
pub const MIN_TRAINING_ROWS: usize = 100;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub min_node_size: usize,
    pub min_terminal: usize,
    /// Candidate features per split; `None` means `ceil(p / 3)`.
    pub mtry: Option<usize>,
    pub seed: u64,
    pub feature_set: FeatureSet,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig {
            n_trees: 1000,
            min_node_size: 30,
            min_terminal: 10,
            mtry: None,
            seed: 0,
            feature_set: FeatureSet::Combined,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::InvalidConfig(String::from("n_trees must be at least 1")));
        }
        if self.min_terminal > self.min_node_size {
            return Err(Error::InvalidConfig(format!(
                "min_terminal {} exceeds min_node_size {}",
                self.min_terminal, self.min_node_size
            )));
        }
        if self.mtry == Some(0) {
            return Err(Error::InvalidConfig(String::from("mtry must be positive")));
        }
        Ok(())
    }

    pub fn mtry_for(&self, p: usize) -> usize {
        self.mtry.unwrap_or(p.div_ceil(3)).clamp(1, p.max(1))
    }
}

/// A trained forest: enough to predict, nothing about the training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub version: u32,
    pub config: ForestConfig,
    pub names: Vec<String>,
    pub kinds: Vec<ColumnKind>,
    pub n_train: usize,
    pub trees: Vec<Tree>,
}

impl ForestModel {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        let s: f64 = self.trees.iter().map(|t| t.predict(row)).sum();
        s / self.trees.len() as f64
    }

    /// Predict from named feature values; a missing feature is an error naming it.
    pub fn predict_named(&self, get: impl Fn(&str) -> Option<f64>) -> Result<f64> {
        let row: Vec<f64> = self
            .names
            .iter()
            .map(|n| get(n).ok_or_else(|| Error::MissingFeature(n.clone())))
            .collect::<Result<_>>()?;
        Ok(self.predict_row(&row))
    }

    /// Predict every row of a dataset, matching columns by name.
    pub fn predict(&self, data: &Dataset) -> Result<Vec<f64>> {
        let idx: Vec<usize> = self
            .names
            .iter()
            .map(|n| data.position(n).ok_or_else(|| Error::MissingFeature(n.clone())))
            .collect::<Result<_>>()?;
        Ok((0..data.n_rows())
            .map(|r| {
                let row: Vec<f64> = idx.iter().map(|&c| data.columns[c][r]).collect();
                self.predict_row(&row)
            })
            .collect())
    }
}

/// A model plus its out-of-bag bookkeeping.
#[derive(Clone, Debug)]
pub struct TrainedForest {
    pub model: ForestModel,
    /// Mean out-of-bag prediction per training row (`None` if never out of bag).
    pub oob_prediction: Vec<Option<f64>>,
    pub r2_oob: f64,
    pub mse_oob: f64,
    in_bag: Vec<Vec<u64>>,
}

impl TrainedForest {
    fn is_oob(&self, tree: usize, row: usize) -> bool {
        self.in_bag[tree][row / 64] & (1u64 << (row % 64)) == 0
    }
}

fn r2(y: &[f64], pred: &[Option<f64>]) -> (f64, f64) {
    let pairs: Vec<(f64, f64)> = y.iter().zip(pred).filter_map(|(y, p)| p.map(|p| (*y, p))).collect();
    if pairs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = pairs.len() as f64;
    let mean = pairs.iter().map(|p| p.0).sum::<f64>() / n;
    let sse: f64 = pairs.iter().map(|(y, p)| (y - p) * (y - p)).sum();
    let sst: f64 = pairs.iter().map(|(y, _)| (y - mean) * (y - mean)).sum();
    let r2 = if sst > 0.0 { 1.0 - sse / sst } else { 0.0 };
    (r2, sse / n)
}

/// Train a forest: tree `t` uses its own random stream, so results do not
/// depend on the executor.
pub fn train_forest<E: Executor>(data: &Dataset, config: &ForestConfig, exec: &E) -> Result<TrainedForest> {
    config.validate()?;
    let n = data.n_rows();
    if n < MIN_TRAINING_ROWS {
        return Err(Error::TooFewRows {
            needed: MIN_TRAINING_ROWS,
            found: n,
        });
    }
    let params = TreeParams {
        min_node_size: config.min_node_size,
        min_terminal: config.min_terminal,
        mtry: config.mtry_for(data.n_features()),
    };
    let words = n.div_ceil(64);
    let fitted: Vec<(Tree, Vec<u64>)> = exec.map(config.n_trees, |t| {
        let mut rng = stream_rng(config.seed, streams::TREE, t as u64);
        let sample: Vec<u32> = (0..n).map(|_| rng.random_range(0..n as u32)).collect();
        let mut bag = vec![0u64; words];
        for &r in &sample {
            bag[r as usize / 64] |= 1u64 << (r % 64);
        }
        (grow_tree(data, &sample, &params, &mut rng), bag)
    });
    let (trees, in_bag): (Vec<Tree>, Vec<Vec<u64>>) = fitted.into_iter().unzip();

    let mut sum = vec![0.0; n];
    let mut cnt = vec![0u32; n];
    for (t, bag) in trees.iter().zip(&in_bag) {
        for r in 0..n {
            if bag[r / 64] & (1u64 << (r % 64)) == 0 {
                sum[r] += t.predict_with(|f| data.columns[f][r]);
                cnt[r] += 1;
            }
        }
    }
    let oob_prediction: Vec<Option<f64>> = sum
        .iter()
        .zip(&cnt)
        .map(|(s, &c)| (c > 0).then(|| s / c as f64))
        .collect();
    let (r2_oob, mse_oob) = r2(&data.y, &oob_prediction);
    Ok(TrainedForest {
        model: ForestModel {
            version: MODEL_VERSION,
            config: *config,
            names: data.names.clone(),
            kinds: data.kinds.clone(),
            n_train: n,
            trees,
        },
        oob_prediction,
        r2_oob,
        mse_oob,
        in_bag,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Importance {
    pub feature: String,
    /// Mean increase of out-of-bag MSE when the feature is permuted, floored at 0.
    pub raw: f64,
    /// `raw / max(raw)`.
    pub scaled: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestReport {
    pub feature_set: FeatureSet,
    pub n_rows: usize,
    pub dropped_rows: usize,
    pub n_trees: usize,
    pub r2_oob: f64,
    pub importance: Vec<Importance>,
}

impl ForestReport {
    pub fn scaled(&self, feature: &str) -> Option<f64> {
        self.importance.iter().find(|i| i.feature == feature).map(|i| i.scaled)
    }
}

pub const DEFAULT_REPEATS: usize = 10;

/// Out-of-bag permutation importance. Each feature is permuted `n_repeats`
/// times across the training rows; the out-of-bag predictions are recomputed
/// for trees that split on it.
pub fn permutation_importance<E: Executor>(
    trained: &TrainedForest,
    data: &Dataset,
    n_repeats: usize,
    seed: u64,
    exec: &E,
) -> Vec<Importance> {
    let n = data.n_rows();
    let p = data.n_features();
    let trees = &trained.model.trees;
    let oob_sum: Vec<f64> = trained.oob_prediction.iter().map(|v| v.unwrap_or(0.0)).collect();
    let cnt: Vec<u32> = (0..n)
        .map(|r| (0..trees.len()).filter(|&t| trained.is_oob(t, r)).count() as u32)
        .collect();
    let base_mse = trained.mse_oob;

    let raw: Vec<f64> = exec.map(p, |f| {
        let users: Vec<usize> = (0..trees.len()).filter(|&t| trees[t].uses_feature(f)).collect();
        let mut total = 0.0;
        for rep in 0..n_repeats.max(1) {
            let mut perm: Vec<u32> = (0..n as u32).collect();
            let mut rng = stream_rng(seed, streams::PERMUTE, (f * 100_000 + rep) as u64);
            perm.shuffle(&mut rng);
            let mut delta = vec![0.0; n];
            for &t in &users {
                for r in 0..n {
                    if !trained.is_oob(t, r) {
                        continue;
                    }
                    let base = trees[t].predict_with(|c| data.columns[c][r]);
                    let permuted = trees[t].predict_with(|c| {
                        if c == f {
                            data.columns[c][perm[r] as usize]
                        } else {
                            data.columns[c][r]
                        }
                    });
                    delta[r] += permuted - base;
                }
            }
            let mut sse = 0.0;
            let mut m = 0usize;
            for r in 0..n {
                if cnt[r] == 0 {
                    continue;
                }
                let pred = oob_sum[r] + delta[r] / cnt[r] as f64;
                sse += (data.y[r] - pred) * (data.y[r] - pred);
                m += 1;
            }
            total += sse / m.max(1) as f64 - base_mse;
        }
        (total / n_repeats.max(1) as f64).max(0.0)
    });
    let max = raw.iter().copied().fold(0.0, f64::max);
    data.names
        .iter()
        .zip(raw)
        .map(|(name, raw)| Importance {
            feature: name.clone(),
            raw,
            scaled: if max > 0.0 { raw / max } else { 0.0 },
        })
        .collect()
}

/// Train and summarize in one step.
pub fn train_with_report<E: Executor>(
    data: &Dataset,
    dropped_rows: usize,
    config: &ForestConfig,
    n_repeats: usize,
    exec: &E,
) -> Result<(TrainedForest, ForestReport)> {
    let trained = train_forest(data, config, exec)?;
    let importance = permutation_importance(&trained, data, n_repeats, config.seed, exec);
    let report = ForestReport {
        feature_set: config.feature_set,
        n_rows: data.n_rows(),
        dropped_rows,
        n_trees: config.n_trees,
        r2_oob: trained.r2_oob,
        importance,
    };
    Ok((trained, report))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathRow {
    /// Bit `b` set when dyadic feature `b` (in forest-set order) is included.
    pub mask: u16,
    pub n_dyadic: usize,
    pub r2_oob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetPath {
    pub dyadic: Vec<String>,
    pub n_trees: usize,
    /// True when fewer trees than the main forest were used.
    pub reduced_trees: bool,
    pub rows: Vec<PathRow>,
}

impl SubsetPath {
    pub fn contains(&self, row: &PathRow, feature: &str) -> bool {
        self.dyadic
            .iter()
            .position(|n| n == feature)
            .is_some_and(|b| row.mask & (1 << b) != 0)
    }

    /// Best row for each number of dyadic features.
    pub fn upper_envelope(&self) -> Vec<&PathRow> {
        (1..=self.dyadic.len())
            .filter_map(|m| {
                self.rows
                    .iter()
                    .filter(|r| r.n_dyadic == m)
                    .max_by(|a, b| a.r2_oob.total_cmp(&b.r2_oob).then(b.mask.cmp(&a.mask)))
            })
            .collect()
    }
}

/// Train one forest per non-empty subset of the ten dyadic features, each
/// alongside the three disaster characteristics. `data` must be the combined
/// feature set.
pub fn best_subset_path<E: Executor>(data: &Dataset, config: &ForestConfig, path_trees: usize, exec: &E) -> Result<SubsetPath> {
    let dyadic_idx: Vec<usize> = Feature::FOREST_SET
        .iter()
        .map(|f| data.position(f.name()).ok_or_else(|| Error::MissingFeature(String::from(f.name()))))
        .collect::<Result<_>>()?;
    let disaster_idx: Vec<usize> = [DTYPE, LOG_DEATHS, DURATION]
        .iter()
        .map(|n| data.position(n).ok_or_else(|| Error::MissingFeature(String::from(*n))))
        .collect::<Result<_>>()?;
    let k = dyadic_idx.len();
    let n_fits = (1usize << k) - 1;
    let results: Vec<Result<PathRow>> = exec.map(n_fits, |m| {
        let mask = (m + 1) as u16;
        let mut idx: Vec<usize> = (0..k).filter(|b| mask & (1 << b) != 0).map(|b| dyadic_idx[b]).collect();
        idx.extend(&disaster_idx);
        let sub = data.select(&idx);
        let cfg = ForestConfig {
            n_trees: path_trees,
            mtry: None,
            seed: sub_seed(config.seed, streams::SPLIT, mask as u64),
            ..*config
        };
        let trained = train_forest(&sub, &cfg, &Sequential)?;
        Ok(PathRow {
            mask,
            n_dyadic: mask.count_ones() as usize,
            r2_oob: trained.r2_oob,
        })
    });
    Ok(SubsetPath {
        dyadic: Feature::FOREST_SET.iter().map(|f| String::from(f.name())).collect(),
        n_trees: path_trees,
        reduced_trees: path_trees < config.n_trees,
        rows: results.into_iter().collect::<Result<_>>()?,
    })
}

#[cfg(test)]
mod tests;
