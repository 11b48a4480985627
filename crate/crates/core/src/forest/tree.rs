//! Regression trees grown by variance reduction.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::data::{ColumnKind, Dataset};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitRule {
    /// `x <= threshold` goes left.
    Below(f64),
    /// Categories whose bit is set go left.
    InSet(u64),
}

impl SplitRule {
    #[inline]
    pub fn goes_left(&self, x: f64) -> bool {
        match *self {
            SplitRule::Below(t) => x <= t,
            SplitRule::InSet(mask) => {
                let level = x as u32;
                level < 64 && mask & (1u64 << level) != 0
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Leaf { value: f64 },
    Split { feature: u16, rule: SplitRule, left: u32, right: u32 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    /// Follow the splits with feature values supplied by `x(feature)`.
    #[inline]
    pub fn predict_with(&self, x: impl Fn(usize) -> f64) -> f64 {
        let mut k = 0usize;
        loop {
            match &self.nodes[k] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    rule,
                    left,
                    right,
                } => {
                    k = if rule.goes_left(x(*feature as usize)) {
                        *left as usize
                    } else {
                        *right as usize
                    };
                }
            }
        }
    }

    pub fn predict(&self, row: &[f64]) -> f64 {
        self.predict_with(|f| row[f])
    }

    pub fn uses_feature(&self, f: usize) -> bool {
        self.nodes
            .iter()
            .any(|n| matches!(n, Node::Split { feature, .. } if *feature as usize == f))
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TreeParams {
    /// Nodes with fewer rows are not split.
    pub min_node_size: usize,
    /// Splits leaving fewer rows in a child are rejected.
    pub min_terminal: usize,
    /// Candidate features per split.
    pub mtry: usize,
}

struct Candidate {
    feature: usize,
    rule: SplitRule,
    score: f64,
}

fn sum_sq(rows: &[u32], y: &[f64]) -> (f64, f64) {
    rows.iter().fold((0.0, 0.0), |(s, q), &r| {
        let v = y[r as usize];
        (s + v, q + v * v)
    })
}

fn best_numeric(rows: &[u32], x: &[f64], y: &[f64], min_terminal: usize, buf: &mut Vec<(f64, f64)>) -> Option<(f64, f64)> {
    buf.clear();
    buf.extend(rows.iter().map(|&r| (x[r as usize], y[r as usize])));
    buf.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
    let n = buf.len();
    if buf[0].0 == buf[n - 1].0 {
        return None;
    }
    let total: f64 = buf.iter().map(|p| p.1).sum();
    let mut left = 0.0;
    let mut best: Option<(f64, f64)> = None;
    let lo = min_terminal.max(1);
    for p in 0..n - 1 {
        left += buf[p].1;
        let nl = p + 1;
        if nl < lo {
            continue;
        }
        if n - nl < lo {
            break;
        }
        if buf[p].0 == buf[p + 1].0 {
            continue;
        }
        let right = total - left;
        let score = left * left / nl as f64 + right * right / (n - nl) as f64;
        if best.is_none_or(|(s, _)| score > s) {
            best = Some((score, 0.5 * (buf[p].0 + buf[p + 1].0)));
        }
    }
    best
}

fn best_categorical(rows: &[u32], x: &[f64], y: &[f64], levels: u8, min_terminal: usize) -> Option<(f64, u64)> {
    let levels = (levels as usize).min(64);
    let mut sum = vec![0.0; levels];
    let mut cnt = vec![0usize; levels];
    for &r in rows {
        let l = x[r as usize] as usize;
        sum[l] += y[r as usize];
        cnt[l] += 1;
    }
    let mut present: Vec<usize> = (0..levels).filter(|&l| cnt[l] > 0).collect();
    if present.len() < 2 {
        return None;
    }
    // Ordering categories by their mean response makes the best prefix
    // split optimal among all partitions.
    present.sort_by(|&a, &b| {
        (sum[a] / cnt[a] as f64)
            .total_cmp(&(sum[b] / cnt[b] as f64))
            .then(a.cmp(&b))
    });
    let n = rows.len();
    let total: f64 = sum.iter().sum();
    let (mut sl, mut nl, mut mask) = (0.0, 0usize, 0u64);
    let mut best: Option<(f64, u64)> = None;
    let lo = min_terminal.max(1);
    for &l in &present[..present.len() - 1] {
        sl += sum[l];
        nl += cnt[l];
        mask |= 1u64 << l;
        if nl < lo || n - nl < lo {
            continue;
        }
        let sr = total - sl;
        let score = sl * sl / nl as f64 + sr * sr / (n - nl) as f64;
        if best.is_none_or(|(s, _)| score > s) {
            best = Some((score, mask));
        }
    }
    best
}

/// Grow one tree on `sample` (row indices, repeats allowed).
pub fn grow_tree<R: Rng>(data: &Dataset, sample: &[u32], params: &TreeParams, rng: &mut R) -> Tree {
    let p = data.n_features();
    let mtry = params.mtry.clamp(1, p.max(1));
    let mut nodes: Vec<Node> = Vec::new();
    let mut buf = Vec::with_capacity(sample.len());
    let mut order: Vec<usize> = (0..p).collect();
    // (node slot, rows)
    let mut stack: Vec<(usize, Vec<u32>)> = vec![(0, sample.to_vec())];
    nodes.push(Node::Leaf { value: 0.0 });
    while let Some((slot, rows)) = stack.pop() {
        let n = rows.len();
        let (s, q) = sum_sq(&rows, &data.y);
        let mean = if n > 0 { s / n as f64 } else { 0.0 };
        nodes[slot] = Node::Leaf { value: mean };
        let parent = s * s / n as f64;
        if n < params.min_node_size || n < 2 || q - parent <= 1e-12 * q.abs().max(1e-300) {
            continue;
        }
        for k in 0..mtry {
            let j = rng.random_range(k..p);
            order.swap(k, j);
        }
        let mut best: Option<Candidate> = None;
        for &f in &order[..mtry] {
            let x = &data.columns[f];
            let found = match data.kinds[f] {
                ColumnKind::Numeric => {
                    best_numeric(&rows, x, &data.y, params.min_terminal, &mut buf).map(|(sc, t)| (sc, SplitRule::Below(t)))
                }
                ColumnKind::Categorical { levels } => {
                    best_categorical(&rows, x, &data.y, levels, params.min_terminal).map(|(sc, m)| (sc, SplitRule::InSet(m)))
                }
            };
            if let Some((score, rule)) = found {
                if best.as_ref().is_none_or(|b| score > b.score) {
                    best = Some(Candidate { feature: f, rule, score });
                }
            }
        }
        let Some(best) = best else { continue };
        if best.score <= parent * (1.0 + 1e-12) + 1e-15 {
            continue;
        }
        let x = &data.columns[best.feature];
        let (left, right): (Vec<u32>, Vec<u32>) = rows.iter().partition(|&&r| best.rule.goes_left(x[r as usize]));
        let l = nodes.len();
        nodes.push(Node::Leaf { value: 0.0 });
        nodes.push(Node::Leaf { value: 0.0 });
        nodes[slot] = Node::Split {
            feature: best.feature as u16,
            rule: best.rule,
            left: l as u32,
            right: l as u32 + 1,
        };
        stack.push((l + 1, right));
        stack.push((l, left));
    }
    Tree { nodes }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;
    use alloc::string::String;

    fn data(columns: Vec<Vec<f64>>, kinds: Vec<ColumnKind>, y: Vec<f64>) -> Dataset {
        let names = (0..columns.len()).map(|i| alloc::format!("x{i}")).collect::<Vec<String>>();
        Dataset::new(names, kinds, columns, y).unwrap()
    }

    #[test]
    fn step_function_is_learned_exactly() {
        let x: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| if *v < 40.0 { 1.0 } else { 5.0 }).collect();
        let d = data(vec![x], vec![ColumnKind::Numeric], y);
        let sample: Vec<u32> = (0..100).collect();
        let params = TreeParams {
            min_node_size: 30,
            min_terminal: 10,
            mtry: 1,
        };
        let t = grow_tree(&d, &sample, &params, &mut stream_rng(1, 0, 0));
        assert_eq!(t.predict(&[3.0]), 1.0);
        assert_eq!(t.predict(&[77.0]), 5.0);
        assert_eq!(t.n_leaves(), 2);
    }

    #[test]
    fn children_respect_min_terminal() {
        // The only informative cut isolates 5 rows, fewer than min_terminal.
        let x: Vec<f64> = (0..60).map(|i| i as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| if *v < 5.0 { 100.0 } else { 0.0 }).collect();
        let d = data(vec![x], vec![ColumnKind::Numeric], y);
        let sample: Vec<u32> = (0..60).collect();
        let params = TreeParams {
            min_node_size: 30,
            min_terminal: 10,
            mtry: 1,
        };
        let t = grow_tree(&d, &sample, &params, &mut stream_rng(1, 0, 0));
        fn leaf_sizes(t: &Tree, d: &Dataset) -> Vec<usize> {
            let mut counts = alloc::collections::BTreeMap::new();
            for r in 0..d.n_rows() {
                let v = t.predict(&d.row(r));
                *counts.entry(v.to_bits()).or_insert(0usize) += 1;
            }
            counts.into_values().collect()
        }
        assert!(leaf_sizes(&t, &d).iter().all(|&n| n >= 10));
    }

    #[test]
    fn categorical_split_groups_levels_by_mean() {
        let x: Vec<f64> = (0..90).map(|i| (i % 3) as f64).collect();
        let y: Vec<f64> = x.iter().map(|v| [2.0, 0.0, 2.0][*v as usize]).collect();
        let d = data(vec![x], vec![ColumnKind::Categorical { levels: 3 }], y);
        let sample: Vec<u32> = (0..90).collect();
        let params = TreeParams {
            min_node_size: 30,
            min_terminal: 10,
            mtry: 1,
        };
        let t = grow_tree(&d, &sample, &params, &mut stream_rng(1, 0, 0));
        assert_eq!(t.n_leaves(), 2);
        assert_eq!(t.predict(&[0.0]), 2.0);
        assert_eq!(t.predict(&[1.0]), 0.0);
        assert_eq!(t.predict(&[2.0]), 2.0);
    }

    #[test]
    fn small_nodes_are_leaves() {
        let d = data(vec![vec![1.0, 2.0, 3.0]], vec![ColumnKind::Numeric], vec![1.0, 2.0, 9.0]);
        let params = TreeParams {
            min_node_size: 30,
            min_terminal: 1,
            mtry: 1,
        };
        let t = grow_tree(&d, &[0, 1, 2], &params, &mut stream_rng(1, 0, 0));
        assert_eq!(t.nodes, vec![Node::Leaf { value: 4.0 }]);
    }
}
