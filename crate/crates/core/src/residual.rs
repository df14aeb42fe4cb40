//! Per-agent residuals and scene-level aggregation.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use accurate::sum::OnlineExactSum;
use accurate::traits::*;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{csv_reader, csv_writer, fmt_f64, parse_f64};
use crate::predictor::PredictionResult;
use crate::scene::{FEAT_V, FEAT_X, FEAT_Y};
use crate::stats::quantile_sorted;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResidualWeights {
    pub alpha_pos: f64,
    pub alpha_vel: f64,
}

impl Default for ResidualWeights {
    fn default() -> Self {
        ResidualWeights { alpha_pos: 1.0, alpha_vel: 0.5 }
    }
}

impl ResidualWeights {
    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha_pos >= 0.0 && self.alpha_vel >= 0.0 && (self.alpha_pos > 0.0 || self.alpha_vel > 0.0);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig("residual weights must be >= 0 and not both zero".into()))
        }
    }
}

pub const DEFAULT_TOP_K: usize = 5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Aggregator {
    Max,
    Q95,
    Mean,
    TopK(usize),
}

impl Aggregator {
    pub const DEFAULTS: [Aggregator; 4] = [Aggregator::Max, Aggregator::Q95, Aggregator::Mean, Aggregator::TopK(DEFAULT_TOP_K)];
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Aggregator::Max => f.write_str("max"),
            Aggregator::Q95 => f.write_str("q95"),
            Aggregator::Mean => f.write_str("mean"),
            Aggregator::TopK(k) => write!(f, "topk{k}"),
        }
    }
}

impl FromStr for Aggregator {
    type Err = Error;

    /// Accepts `max`, `q95`, `mean`, `topk` (k = 5) and `topkN`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "max" => Ok(Aggregator::Max),
            "q95" => Ok(Aggregator::Q95),
            "mean" => Ok(Aggregator::Mean),
            "topk" | "top-k" => Ok(Aggregator::TopK(DEFAULT_TOP_K)),
            _ => match s.strip_prefix("topk").map(str::parse::<usize>) {
                Some(Ok(k)) if k >= 1 => Ok(Aggregator::TopK(k)),
                _ => Err(Error::InvalidConfig(format!("unknown aggregator {s:?}"))),
            },
        }
    }
}

impl TryFrom<String> for Aggregator {
    type Error = Error;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Aggregator> for String {
    fn from(a: Aggregator) -> String {
        a.to_string()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneScore {
    pub scene_id: String,
    pub aggregator: Aggregator,
    pub residual_score: f64,
}

/// `α_pos·|p̂−p| + α_vel·|v̂−v|` for every present agent-timestep.
pub fn residuals(pred: &PredictionResult, w: &ResidualWeights) -> Vec<f64> {
    pred.entries()
        .map(|(t, s)| {
            let (p, a) = (pred.predicted[t][s], pred.actual[t][s]);
            w.alpha_pos * (p[FEAT_X] - a[FEAT_X]).hypot(p[FEAT_Y] - a[FEAT_Y]) + w.alpha_vel * (p[FEAT_V] - a[FEAT_V]).abs()
        })
        .collect()
}

/// Correctly rounded mean of sorted values. Exact summation keeps the result
/// monotone in every input and independent of order; the clamp guards the
/// final division.
fn exact_mean(sorted: &[f64]) -> f64 {
    let sum: f64 = sorted.iter().copied().sum_with_accumulator::<OnlineExactSum<f64>>();
    (sum / sorted.len() as f64).clamp(sorted[0], sorted[sorted.len() - 1])
}

/// Reduce a residual set to one scene-level score.
pub fn aggregate(residuals: &[f64], f: Aggregator) -> Result<f64> {
    if residuals.is_empty() {
        return Err(Error::EmptyResiduals);
    }
    let mut sorted = residuals.to_vec();
    sorted.sort_by(f64::total_cmp);
    let max = sorted[sorted.len() - 1];
    Ok(match f {
        Aggregator::Max => max,
        Aggregator::Mean => exact_mean(&sorted),
        Aggregator::Q95 => quantile_sorted(&sorted, 0.95),
        Aggregator::TopK(k) => {
            let top = &sorted[sorted.len().saturating_sub(k.max(1))..];
            exact_mean(top).clamp(exact_mean(&sorted), max)
        }
    })
}

/// Score every prediction under every aggregator; rows are grouped by
/// aggregator, scenes in input order.
pub fn score_scenes(preds: &[PredictionResult], w: &ResidualWeights, aggs: &[Aggregator]) -> Result<Vec<SceneScore>> {
    w.validate()?;
    let per_scene: Vec<Vec<f64>> = preds
        .par_iter()
        .map(|p| {
            let r = residuals(p, w);
            aggs.iter().map(|&a| aggregate(&r, a)).collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<_>>()?;
    let mut out = Vec::with_capacity(preds.len() * aggs.len());
    for (j, &a) in aggs.iter().enumerate() {
        for (p, s) in preds.iter().zip(&per_scene) {
            out.push(SceneScore { scene_id: p.scene_id.clone(), aggregator: a, residual_score: s[j] });
        }
    }
    Ok(out)
}

pub fn write_scores_csv(path: &Path, scores: &[SceneScore]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["scene_id", "aggregator", "residual_score"])?;
    for s in scores {
        w.write_record([s.scene_id.clone(), s.aggregator.to_string(), fmt_f64(s.residual_score)])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scores_csv(path: &Path) -> Result<Vec<SceneScore>> {
    let mut r = csv_reader(path)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i as u64 + 2;
        let bad = |reason: &str| Error::MalformedRow { line, reason: reason.to_string() };
        if rec.len() != 3 {
            return Err(bad("expected scene_id,aggregator,residual_score"));
        }
        out.push(SceneScore {
            scene_id: rec[0].to_string(),
            aggregator: rec[1].parse().map_err(|_| bad("unknown aggregator"))?,
            residual_score: parse_f64(&rec[2]).ok_or_else(|| bad("residual_score is not a number"))?,
        });
    }
    Ok(out)
}
