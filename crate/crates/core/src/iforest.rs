//! Isolation Forest with rank-based flagging.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{csv_reader, csv_writer, fmt_f64, parse_f64};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub subsample: usize,
    /// Defaults to `ceil(log2(subsample))`.
    pub max_depth: Option<usize>,
    pub contamination: f64,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        ForestConfig { n_trees: 100, subsample: 256, max_depth: None, contamination: 0.15, seed: 7 }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 || self.subsample < 2 {
            return Err(Error::InvalidConfig("n_trees must be >= 1 and subsample >= 2".into()));
        }
        check_contamination(self.contamination)
    }

    pub fn depth_limit(&self) -> usize {
        self.max_depth.unwrap_or_else(|| (self.subsample as f64).log2().ceil() as usize)
    }
}

fn check_contamination(c: f64) -> Result<()> {
    if c > 0.0 && c <= 0.5 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("contamination {c} outside (0, 0.5]")))
    }
}

/// Harmonic number `H(n) = Σ_{j=1..n} 1/j`, summed exactly rather than via
/// the `ln n + γ` approximation.
fn harmonic(n: usize) -> f64 {
    (1..=n).rev().map(|j| 1.0 / j as f64).sum()
}

/// Average path length of an unsuccessful search in a binary search tree of
/// `n` nodes.
pub fn c_factor(n: usize) -> f64 {
    match n {
        0 | 1 => 0.0,
        _ => 2.0 * harmonic(n - 1) - 2.0 * (n - 1) as f64 / n as f64,
    }
}

#[derive(Clone, Debug, PartialEq)]
enum Node {
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf { size: usize },
}

#[derive(Clone, Debug, PartialEq)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn build(points: ArrayView2<f64>, sample: Vec<usize>, max_depth: usize, rng: &mut seed::Rng) -> Tree {
        let mut tree = Tree { nodes: Vec::new() };
        tree.grow(points, sample, 0, max_depth, rng);
        tree
    }

    fn grow(&mut self, points: ArrayView2<f64>, idx: Vec<usize>, depth: usize, max_depth: usize, rng: &mut seed::Rng) -> usize {
        let me = self.nodes.len();
        self.nodes.push(Node::Leaf { size: idx.len() });
        if idx.len() <= 1 || depth >= max_depth {
            return me;
        }
        let ranges: Vec<(usize, f64, f64)> = (0..points.ncols())
            .filter_map(|f| {
                let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                    (lo.min(points[[i, f]]), hi.max(points[[i, f]]))
                });
                (hi > lo).then_some((f, lo, hi))
            })
            .collect();
        if ranges.is_empty() {
            return me;
        }
        let (feature, lo, hi) = ranges[rng.random_range(0..ranges.len())];
        let threshold = loop {
            let t = lo + rng.random::<f64>() * (hi - lo);
            if t > lo && t <= hi {
                break t;
            }
        };
        let (l, r): (Vec<usize>, Vec<usize>) = idx.into_iter().partition(|&i| points[[i, feature]] < threshold);
        let left = self.grow(points, l, depth + 1, max_depth, rng);
        let right = self.grow(points, r, depth + 1, max_depth, rng);
        self.nodes[me] = Node::Split { feature, threshold, left, right };
        me
    }

    fn path_length(&self, x: &[f64]) -> f64 {
        let mut node = 0;
        let mut depth = 0.0;
        loop {
            match self.nodes[node] {
                Node::Leaf { size } => return depth + c_factor(size),
                Node::Split { feature, threshold, left, right } => {
                    node = if x[feature] < threshold { left } else { right };
                    depth += 1.0;
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IsolationForest {
    trees: Vec<Tree>,
    psi: usize,
    dim: usize,
}

impl IsolationForest {
    /// Fit on an `N × d` matrix. Each tree sees `subsample` rows drawn without
    /// replacement, or with replacement when `N < subsample`.
    pub fn fit(points: ArrayView2<f64>, cfg: &ForestConfig) -> Result<IsolationForest> {
        cfg.validate()?;
        let (n, d) = points.dim();
        if n < 2 {
            return Err(Error::TooFewPoints { needed: 2, got: n });
        }
        if d == 0 {
            return Err(Error::EmptyInput("feature columns"));
        }
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidConfig("isolation forest input must be finite".into()));
        }
        let first = points.row(0);
        if points.axis_iter(Axis(0)).all(|r| r == first) {
            return Err(Error::DegenerateInput("all points identical"));
        }
        let psi = cfg.subsample;
        let max_depth = cfg.depth_limit();
        let trees = (0..cfg.n_trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = seed::child_rng(cfg.seed, &format!("iforest/tree/{t}"));
                let sample: Vec<usize> = if n >= psi {
                    index::sample(&mut rng, n, psi).into_vec()
                } else {
                    (0..psi).map(|_| rng.random_range(0..n)).collect()
                };
                Tree::build(points, sample, max_depth, &mut rng)
            })
            .collect();
        Ok(IsolationForest { trees, psi, dim: d })
    }

    pub fn mean_path_length(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        self.trees.iter().map(|t| t.path_length(x)).sum::<f64>() / self.trees.len() as f64
    }

    /// `2^(−E[h(x)] / c(ψ))`.
    pub fn score(&self, x: &[f64]) -> f64 {
        iso_score(self.mean_path_length(x), self.psi)
    }

    pub fn score_all(&self, points: ArrayView2<f64>) -> Vec<f64> {
        let rows: Vec<Vec<f64>> = points.axis_iter(Axis(0)).map(|r| r.to_vec()).collect();
        rows.par_iter().map(|r| self.score(r)).collect()
    }
}

pub fn iso_score(mean_path: f64, psi: usize) -> f64 {
    2f64.powf(-mean_path / c_factor(psi))
}

/// Flag exactly `round(contamination · N)` highest scores; ties go to the
/// lexicographically smaller scene id.
pub fn flag(ids: &[String], scores: &[f64], contamination: f64) -> Result<Vec<bool>> {
    check_contamination(contamination)?;
    if ids.len() != scores.len() {
        return Err(Error::SeriesLengthMismatch(ids.len(), scores.len()));
    }
    let k = (contamination * scores.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| ids[a].cmp(&ids[b])));
    let mut flags = vec![false; scores.len()];
    for &i in order.iter().take(k) {
        flags[i] = true;
    }
    Ok(flags)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestScoreRow {
    pub scene_id: String,
    pub iso_score: f64,
    pub flagged: bool,
}

/// One-column point matrix from a score vector.
pub fn column(values: &[f64]) -> Array2<f64> {
    Array2::from_shape_fn((values.len(), 1), |(i, _)| values[i])
}

/// Fit, score and flag in one step.
pub fn detect(ids: &[String], points: ArrayView2<f64>, cfg: &ForestConfig) -> Result<Vec<ForestScoreRow>> {
    if ids.len() != points.nrows() {
        return Err(Error::SeriesLengthMismatch(ids.len(), points.nrows()));
    }
    let forest = IsolationForest::fit(points, cfg)?;
    let scores = forest.score_all(points);
    let flags = flag(ids, &scores, cfg.contamination)?;
    Ok(ids
        .iter()
        .zip(scores)
        .zip(flags)
        .map(|((id, iso_score), flagged)| ForestScoreRow { scene_id: id.clone(), iso_score, flagged })
        .collect())
}

pub fn write_rows_csv(path: &Path, rows: &[ForestScoreRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["scene_id", "iso_score", "flagged"])?;
    for r in rows {
        w.write_record([r.scene_id.clone(), fmt_f64(r.iso_score), r.flagged.to_string()])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_rows_csv(path: &Path) -> Result<Vec<ForestScoreRow>> {
    let mut r = csv_reader(path)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |reason: &str| Error::MalformedRow { line: i as u64 + 2, reason: reason.to_string() };
        if rec.len() != 3 {
            return Err(bad("expected scene_id,iso_score,flagged"));
        }
        out.push(ForestScoreRow {
            scene_id: rec[0].to_string(),
            iso_score: parse_f64(&rec[1]).ok_or_else(|| bad("iso_score is not a number"))?,
            flagged: rec[2].parse().map_err(|_| bad("flagged must be true or false"))?,
        });
    }
    Ok(out)
}
