//! Least-squares gradient boosted regression trees.
//!
//! Trees are grown level by level with exact greedy splits: every feature is
//! presorted once, and one pass over a feature's sorted order scores the
//! candidate thresholds of all open nodes at that depth. A split's gain is
//! the reduction in squared error of the residuals, and the same gain is
//! credited to the split feature's importance.

use serde::{Deserialize, Serialize};

use crate::dataset::Observations;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbtSpec {
    pub max_depth: usize,
    pub n_estimators: usize,
    pub learning_rate: f64,
    /// Negative sampling factor used to build the training set.
    pub k: usize,
}

impl GbtSpec {
    pub fn validate(&self) -> Result<()> {
        if self.max_depth == 0 || self.n_estimators == 0 {
            return Err(Error::InvalidConfig(
                "gbt needs max_depth >= 1 and n_estimators >= 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "gbt learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// A regression tree node. Rows with `x[feature] < threshold` go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
    Leaf {
        value: f64,
    },
}

impl Node {
    pub fn eval(&self, row: &[f64]) -> f64 {
        let mut node = self;
        loop {
            match node {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => node = if row[*feature] < *threshold { left } else { right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            Node::Leaf { .. } => 0,
            Node::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtModel {
    pub spec: GbtSpec,
    pub columns: Vec<String>,
    pub base_score: f64,
    pub trees: Vec<Node>,
    /// Share of the total squared-error reduction per feature; sums to 1
    /// unless no split was ever made.
    pub importance: Vec<f64>,
    /// Training RMSE after each boosting round.
    pub train_rmse: Vec<f64>,
}

impl GbtModel {
    /// Raw additive prediction (may be negative).
    pub fn predict_raw(&self, row: &[f64]) -> f64 {
        self.base_score + self.spec.learning_rate * self.trees.iter().map(|t| t.eval(row)).sum::<f64>()
    }

    /// `(column, importance)` sorted by decreasing importance.
    pub fn ranked_importance(&self) -> Vec<(String, f64)> {
        let mut v: Vec<(String, f64)> = self
            .columns
            .iter()
            .cloned()
            .zip(self.importance.iter().copied())
            .collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        v
    }
}

/// Relative gain below which a node is left as a leaf.
const MIN_RELATIVE_GAIN: f64 = 1e-12;

pub fn fit_gbt<O: Observations>(spec: &GbtSpec, train: &O) -> Result<GbtModel> {
    spec.validate()?;
    let (n, w) = (train.n_rows(), train.n_cols());
    let y = train.targets();
    let base_score = if n == 0 { 0.0 } else { y.iter().sum::<f64>() / n as f64 };
    let x = train.data();

    let sorted: Vec<Vec<u32>> = (0..w)
        .map(|f| {
            let mut idx: Vec<u32> = (0..n as u32).collect();
            idx.sort_by(|&a, &b| x[a as usize * w + f].total_cmp(&x[b as usize * w + f]));
            idx
        })
        .collect();

    let mut pred = vec![base_score; n];
    let mut gains = vec![0.0; w];
    let mut trees = Vec::with_capacity(spec.n_estimators);
    let mut train_rmse = Vec::with_capacity(spec.n_estimators);
    let mut residual = vec![0.0; n];
    for _ in 0..spec.n_estimators {
        for r in 0..n {
            residual[r] = y[r] - pred[r];
        }
        let grown = grow_tree(x, w, &sorted, &residual, spec.max_depth, &mut gains);
        for (p, v) in pred.iter_mut().zip(&grown.leaf_value_of_row) {
            *p += spec.learning_rate * v;
        }
        trees.push(grown.root);
        let sse: f64 = y.iter().zip(&pred).map(|(a, b)| (a - b) * (a - b)).sum();
        train_rmse.push(if n == 0 { 0.0 } else { (sse / n as f64).sqrt() });
    }

    let total: f64 = gains.iter().sum();
    let importance = if total > 0.0 {
        gains.iter().map(|g| g / total).collect()
    } else {
        gains
    };
    Ok(GbtModel {
        spec: *spec,
        columns: train.columns().to_vec(),
        base_score,
        trees,
        importance,
        train_rmse,
    })
}

struct Grown {
    root: Node,
    leaf_value_of_row: Vec<f64>,
}

#[derive(Clone)]
enum Slot {
    Open,
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Clone)]
struct ArenaNode {
    sum: f64,
    sum_sq: f64,
    count: usize,
    slot: Slot,
}

#[derive(Clone, Copy)]
struct Best {
    gain: f64,
    feature: usize,
    threshold: f64,
}

fn grow_tree(x: &[f64], w: usize, sorted: &[Vec<u32>], residual: &[f64], max_depth: usize, gains: &mut [f64]) -> Grown {
    let n = residual.len();
    let mut nodes = vec![ArenaNode {
        sum: residual.iter().sum(),
        sum_sq: residual.iter().map(|r| r * r).sum(),
        count: n,
        slot: Slot::Open,
    }];
    let mut node_of = vec![0u32; n];
    let mut frontier = vec![0usize];

    for _ in 0..max_depth {
        let open: Vec<usize> = frontier.iter().copied().filter(|&a| nodes[a].count >= 2).collect();
        if open.is_empty() {
            break;
        }
        let mut is_open = vec![false; nodes.len()];
        for &a in &open {
            is_open[a] = true;
        }
        let mut best: Vec<Option<Best>> = vec![None; nodes.len()];
        let mut left_sum = vec![0.0; nodes.len()];
        let mut left_cnt = vec![0usize; nodes.len()];
        let mut last = vec![f64::NAN; nodes.len()];

        for (f, order) in sorted.iter().enumerate() {
            for &a in &open {
                left_sum[a] = 0.0;
                left_cnt[a] = 0;
            }
            for &r in order {
                let r = r as usize;
                let a = node_of[r] as usize;
                if !is_open[a] {
                    continue;
                }
                let v = x[r * w + f];
                if left_cnt[a] > 0 && v > last[a] {
                    let node = &nodes[a];
                    let (ls, lc) = (left_sum[a], left_cnt[a] as f64);
                    let rs = node.sum - ls;
                    let rc = node.count as f64 - lc;
                    let gain = ls * ls / lc + rs * rs / rc - node.sum * node.sum / node.count as f64;
                    if best[a].is_none_or(|b| gain > b.gain) {
                        let mut threshold = last[a] + (v - last[a]) / 2.0;
                        if threshold <= last[a] {
                            threshold = v;
                        }
                        best[a] = Some(Best {
                            gain,
                            feature: f,
                            threshold,
                        });
                    }
                }
                left_sum[a] += residual[r];
                left_cnt[a] += 1;
                last[a] = v;
            }
        }

        let mut next = Vec::new();
        for &a in &open {
            let Some(b) = best[a] else { continue };
            let node = &nodes[a];
            let sse = node.sum_sq - node.sum * node.sum / node.count as f64;
            // also stops on a NaN gain
            if b.gain.partial_cmp(&(MIN_RELATIVE_GAIN * sse.max(f64::MIN_POSITIVE)))
                != Some(std::cmp::Ordering::Greater)
            {
                continue;
            }
            gains[b.feature] += b.gain;
            let (l, r) = (nodes.len(), nodes.len() + 1);
            let child = ArenaNode {
                sum: 0.0,
                sum_sq: 0.0,
                count: 0,
                slot: Slot::Open,
            };
            nodes.push(child.clone());
            nodes.push(child);
            nodes[a].slot = Slot::Split {
                feature: b.feature,
                threshold: b.threshold,
                left: l,
                right: r,
            };
            next.push(l);
            next.push(r);
        }
        if next.is_empty() {
            break;
        }
        for r in 0..n {
            let a = node_of[r] as usize;
            if let Slot::Split {
                feature,
                threshold,
                left,
                right,
            } = nodes[a].slot
            {
                let c = if x[r * w + feature] < threshold { left } else { right };
                node_of[r] = c as u32;
                let node = &mut nodes[c];
                node.sum += residual[r];
                node.sum_sq += residual[r] * residual[r];
                node.count += 1;
            }
        }
        frontier = next;
    }

    let leaf_value = |a: usize| {
        if nodes[a].count == 0 {
            0.0
        } else {
            nodes[a].sum / nodes[a].count as f64
        }
    };
    let leaf_value_of_row = node_of.iter().map(|&a| leaf_value(a as usize)).collect();
    Grown {
        root: to_tree(&nodes, 0, &leaf_value),
        leaf_value_of_row,
    }
}

fn to_tree(nodes: &[ArenaNode], a: usize, leaf_value: &impl Fn(usize) -> f64) -> Node {
    match nodes[a].slot {
        Slot::Open => Node::Leaf { value: leaf_value(a) },
        Slot::Split {
            feature,
            threshold,
            left,
            right,
        } => Node::Split {
            feature,
            threshold,
            left: Box::new(to_tree(nodes, left, leaf_value)),
            right: Box::new(to_tree(nodes, right, leaf_value)),
        },
    }
}
