use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::analysis::AnalysisTable;
use crate::catalog::DisasterType;
use crate::error::{Error, Result};
use crate::features::Feature;

/// How a column is split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Numeric,
    /// Values are level indices `0..levels`.
    Categorical { levels: u8 },
}

pub const DTYPE: &str = "dtype";
pub const LOG_DEATHS: &str = "log_deaths";
pub const DURATION: &str = "duration_days";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSet {
    DyadicOnly,
    DisasterOnly,
    Combined,
}

impl FeatureSet {
    pub fn name(self) -> &'static str {
        match self {
            FeatureSet::DyadicOnly => "dyadic_only",
            FeatureSet::DisasterOnly => "disaster_only",
            FeatureSet::Combined => "combined",
        }
    }

    pub fn dyadic(self) -> &'static [Feature] {
        match self {
            FeatureSet::DisasterOnly => &[],
            _ => &Feature::FOREST_SET,
        }
    }

    pub fn has_disaster(self) -> bool {
        self != FeatureSet::DyadicOnly
    }

    pub fn width(self) -> usize {
        self.dyadic().len() + if self.has_disaster() { 3 } else { 0 }
    }
}

impl core::str::FromStr for FeatureSet {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dyadic_only" | "dyadic" => Ok(FeatureSet::DyadicOnly),
            "disaster_only" | "disaster" => Ok(FeatureSet::DisasterOnly),
            "combined" => Ok(FeatureSet::Combined),
            other => Err(Error::InvalidConfig(format!("unknown feature set {other:?}"))),
        }
    }
}

/// Column-major training data.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub names: Vec<String>,
    pub kinds: Vec<ColumnKind>,
    pub columns: Vec<Vec<f64>>,
    pub y: Vec<f64>,
}

impl Dataset {
    pub fn new(names: Vec<String>, kinds: Vec<ColumnKind>, columns: Vec<Vec<f64>>, y: Vec<f64>) -> Result<Self> {
        if names.len() != kinds.len() || names.len() != columns.len() {
            return Err(Error::DimensionMismatch(String::from("names, kinds and columns differ in length")));
        }
        if let Some(c) = columns.iter().find(|c| c.len() != y.len()) {
            return Err(Error::DimensionMismatch(format!("column of length {} for {} rows", c.len(), y.len())));
        }
        for (k, c) in kinds.iter().zip(&columns) {
            if let ColumnKind::Categorical { levels } = k {
                if c.iter().any(|v| !(*v >= 0.0 && *v < *levels as f64 && v.fract() == 0.0)) {
                    return Err(Error::InvalidConfig(String::from("categorical value out of range")));
                }
            }
        }
        Ok(Dataset { names, kinds, columns, y })
    }

    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    pub fn n_features(&self) -> usize {
        self.columns.len()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Keep only the listed columns, in the given order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            names: idx.iter().map(|&i| self.names[i].clone()).collect(),
            kinds: idx.iter().map(|&i| self.kinds[i]).collect(),
            columns: idx.iter().map(|&i| self.columns[i].clone()).collect(),
            y: self.y.clone(),
        }
    }

    /// Feature values of row `r`.
    pub fn row(&self, r: usize) -> Vec<f64> {
        self.columns.iter().map(|c| c[r]).collect()
    }

    /// Build the training set for a feature set from the joined table. Rows
    /// missing any selected dyadic feature are dropped; the count is returned.
    pub fn from_table(table: &AnalysisTable, set: FeatureSet, shrunk: bool) -> Result<(Dataset, usize)> {
        let dyadic = set.dyadic();
        let mut names: Vec<String> = dyadic.iter().map(|f| f.name().to_string()).collect();
        let mut kinds = alloc::vec![ColumnKind::Numeric; dyadic.len()];
        if set.has_disaster() {
            names.extend([DTYPE, LOG_DEATHS, DURATION].map(String::from));
            kinds.extend([
                ColumnKind::Categorical {
                    levels: DisasterType::ALL.len() as u8,
                },
                ColumnKind::Numeric,
                ColumnKind::Numeric,
            ]);
        }
        let mut columns: Vec<Vec<f64>> = alloc::vec![Vec::new(); names.len()];
        let mut y = Vec::new();
        let mut dropped = 0;
        for r in &table.rows {
            let vals: Option<Vec<f64>> = dyadic.iter().map(|f| r.feature(*f)).collect();
            let Some(mut vals) = vals else {
                dropped += 1;
                continue;
            };
            if set.has_disaster() {
                vals.extend([r.dtype.index() as f64, r.log_deaths, r.duration_days as f64]);
            }
            for (c, v) in columns.iter_mut().zip(vals) {
                c.push(v);
            }
            y.push(r.response(shrunk));
        }
        if dropped > 0 {
            log::info!("{} feature set: dropped {dropped} rows with missing features", set.name());
        }
        Ok((Dataset::new(names, kinds, columns, y)?, dropped))
    }
}
