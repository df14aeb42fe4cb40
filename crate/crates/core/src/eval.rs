//! Ranking stability, proxy alignment, configuration selection and baselines.

use std::collections::{BTreeMap, BTreeSet};

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::iforest::{column, flag, ForestConfig, ForestScoreRow, IsolationForest};
use crate::proxies::{ProxyRow, ALIGNMENT_PROXIES};
use crate::residual::{Aggregator, SceneScore};
use crate::stats::{mean_std, spearman};

pub use crate::stats::{jaccard, kendall_tau};

pub const DEFAULT_LEVELS: [f64; 3] = [0.10, 0.15, 0.20];

/// Scene-level residual scores of one aggregator, in scene order.
#[derive(Clone, Debug, PartialEq)]
pub struct AggScores {
    pub aggregator: Aggregator,
    pub ids: Vec<String>,
    pub scores: Vec<f64>,
}

/// Split long-format score rows by aggregator, keeping first-seen order.
pub fn group_scores(rows: &[SceneScore]) -> Vec<AggScores> {
    let mut out: Vec<AggScores> = Vec::new();
    for r in rows {
        let slot = match out.iter().position(|g| g.aggregator == r.aggregator) {
            Some(i) => i,
            None => {
                out.push(AggScores { aggregator: r.aggregator, ids: Vec::new(), scores: Vec::new() });
                out.len() - 1
            }
        };
        out[slot].ids.push(r.scene_id.clone());
        out[slot].scores.push(r.residual_score);
    }
    out
}

/// Isolation Forest output for one (aggregator, contamination) cell.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelFit {
    pub aggregator: Aggregator,
    pub contamination: f64,
    pub ids: Vec<String>,
    pub iso_scores: Vec<f64>,
    pub flags: Vec<bool>,
}

impl LevelFit {
    pub fn rows(&self) -> Vec<ForestScoreRow> {
        self.ids
            .iter()
            .zip(&self.iso_scores)
            .zip(&self.flags)
            .map(|((id, &iso_score), &flagged)| ForestScoreRow { scene_id: id.clone(), iso_score, flagged })
            .collect()
    }

    pub fn flagged_ids(&self) -> BTreeSet<&str> {
        self.ids.iter().zip(&self.flags).filter(|(_, f)| **f).map(|(id, _)| id.as_str()).collect()
    }

    /// Scene indices by descending score, ties to the smaller id.
    fn ranking(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.ids.len()).collect();
        order.sort_by(|&a, &b| {
            self.iso_scores[b].total_cmp(&self.iso_scores[a]).then_with(|| self.ids[a].cmp(&self.ids[b]))
        });
        order
    }
}

/// Fit the forest for every aggregator and contamination level. With `refit`
/// each level gets its own forest seeded `seed ^ level_index`; without it one
/// forest is shared and only the flag threshold moves.
pub fn fit_levels(groups: &[AggScores], levels: &[f64], forest: &ForestConfig, refit: bool) -> Result<Vec<LevelFit>> {
    if levels.is_empty() {
        return Err(Error::InvalidConfig("no contamination levels".into()));
    }
    let cells: Vec<(usize, usize)> = (0..groups.len()).flat_map(|g| (0..levels.len()).map(move |l| (g, l))).collect();
    let shared: Vec<Option<Vec<f64>>> = groups
        .iter()
        .map(|g| -> Result<Option<Vec<f64>>> {
            if refit {
                return Ok(None);
            }
            let pts = column(&g.scores);
            Ok(Some(IsolationForest::fit(pts.view(), forest)?.score_all(pts.view())))
        })
        .collect::<Result<_>>()?;
    cells
        .par_iter()
        .map(|&(g, l)| {
            let group = &groups[g];
            let c = levels[l];
            let iso_scores = match &shared[g] {
                Some(s) => s.clone(),
                None => {
                    let cfg = ForestConfig { seed: forest.seed ^ l as u64, contamination: c, ..forest.clone() };
                    let pts = column(&group.scores);
                    IsolationForest::fit(pts.view(), &cfg)?.score_all(pts.view())
                }
            };
            let flags = flag(&group.ids, &iso_scores, c)?;
            Ok(LevelFit { aggregator: group.aggregator, contamination: c, ids: group.ids.clone(), iso_scores, flags })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityRow {
    pub aggregator: Aggregator,
    pub c1: f64,
    pub c2: f64,
    pub kendall_tau: f64,
    /// Jaccard@K of the two top-K sets, K = the smaller flag count.
    pub jaccard: f64,
    /// Jaccard of the raw flag sets.
    pub jaccard_flags: f64,
}

fn top_k(fit: &LevelFit, k: usize) -> BTreeSet<usize> {
    fit.ranking().into_iter().take(k).collect()
}

pub fn stability_row(a: &LevelFit, b: &LevelFit) -> Result<StabilityRow> {
    if a.ids != b.ids {
        return Err(Error::SceneSetMismatch(format!("{} fits disagree on scene order", a.aggregator)));
    }
    let k = a.flags.iter().filter(|f| **f).count().min(b.flags.iter().filter(|f| **f).count());
    Ok(StabilityRow {
        aggregator: a.aggregator,
        c1: a.contamination,
        c2: b.contamination,
        kendall_tau: kendall_tau(&a.iso_scores, &b.iso_scores)?,
        jaccard: jaccard(&top_k(a, k), &top_k(b, k)),
        jaccard_flags: jaccard(&a.flagged_ids(), &b.flagged_ids()),
    })
}

/// One row per aggregator and unordered level pair.
pub fn stability_rows(fits: &[LevelFit]) -> Result<Vec<StabilityRow>> {
    let mut out = Vec::new();
    for agg in aggregators_in(fits) {
        let cells: Vec<&LevelFit> = fits.iter().filter(|f| f.aggregator == agg).collect();
        if cells.len() < 2 {
            return Err(Error::InvalidConfig("stability needs at least two contamination levels".into()));
        }
        for i in 0..cells.len() {
            for j in i + 1..cells.len() {
                out.push(stability_row(cells[i], cells[j])?);
            }
        }
    }
    Ok(out)
}

pub fn stability_sweep(groups: &[AggScores], levels: &[f64], forest: &ForestConfig, refit: bool) -> Result<Vec<StabilityRow>> {
    stability_rows(&fit_levels(groups, levels, forest, refit)?)
}

fn aggregators_in(fits: &[LevelFit]) -> Vec<Aggregator> {
    let mut seen = Vec::new();
    for f in fits {
        if !seen.contains(&f.aggregator) {
            seen.push(f.aggregator);
        }
    }
    seen
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilitySummary {
    pub aggregator: Aggregator,
    pub mean_tau: f64,
    pub mean_jaccard: f64,
    pub mean_jaccard_flags: f64,
}

pub fn summarize_stability(rows: &[StabilityRow]) -> Vec<StabilitySummary> {
    let mut aggs: Vec<Aggregator> = Vec::new();
    for r in rows {
        if !aggs.contains(&r.aggregator) {
            aggs.push(r.aggregator);
        }
    }
    aggs.into_iter()
        .map(|a| {
            let sel: Vec<&StabilityRow> = rows.iter().filter(|r| r.aggregator == a).collect();
            let avg = |f: fn(&StabilityRow) -> f64| sel.iter().map(|r| f(r)).sum::<f64>() / sel.len() as f64;
            StabilitySummary {
                aggregator: a,
                mean_tau: avg(|r| r.kendall_tau),
                mean_jaccard: avg(|r| r.jaccard),
                mean_jaccard_flags: avg(|r| r.jaccard_flags),
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlignmentRow {
    pub aggregator: Aggregator,
    pub proxy: String,
    pub spearman_rho: f64,
    pub per_level: Vec<f64>,
}

fn proxy_index(ids: &[String], proxies: &[ProxyRow]) -> Result<Vec<usize>> {
    let by_id: BTreeMap<&str, usize> = proxies.iter().enumerate().map(|(i, p)| (p.scene_id.as_str(), i)).collect();
    if by_id.len() != ids.len() {
        return Err(Error::SceneSetMismatch(format!("{} scored scenes vs {} proxy rows", ids.len(), by_id.len())));
    }
    ids.iter()
        .map(|id| by_id.get(id.as_str()).copied().ok_or_else(|| Error::SceneSetMismatch(format!("no proxies for {id}"))))
        .collect()
}

/// Spearman's ρ between iso-scores and each proxy, averaged over levels. A
/// constant proxy column contributes ρ = 0.
pub fn alignment_rows(fits: &[LevelFit], proxies: &[ProxyRow], names: &[&str]) -> Result<Vec<AlignmentRow>> {
    let mut out = Vec::new();
    for agg in aggregators_in(fits) {
        let cells: Vec<&LevelFit> = fits.iter().filter(|f| f.aggregator == agg).collect();
        let idx = proxy_index(&cells[0].ids, proxies)?;
        for &name in names {
            let col: Vec<f64> = idx
                .iter()
                .map(|&i| proxies[i].get(name).ok_or_else(|| Error::InvalidConfig(format!("unknown proxy {name}"))))
                .collect::<Result<_>>()?;
            let per_level = cells
                .iter()
                .map(|c| match spearman(&c.iso_scores, &col) {
                    Err(Error::ZeroVariance) => {
                        log::warn!("{agg}/{name}: constant column, rho set to 0");
                        Ok(0.0)
                    }
                    r => r,
                })
                .collect::<Result<Vec<f64>>>()?;
            out.push(AlignmentRow {
                aggregator: agg,
                proxy: name.to_string(),
                spearman_rho: per_level.iter().sum::<f64>() / per_level.len() as f64,
                per_level,
            });
        }
    }
    Ok(out)
}

pub fn alignment_sweep(groups: &[AggScores], proxies: &[ProxyRow], levels: &[f64], forest: &ForestConfig) -> Result<Vec<AlignmentRow>> {
    alignment_rows(&fit_levels(groups, levels, forest, true)?, proxies, &ALIGNMENT_PROXIES)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionCandidate {
    pub aggregator: Aggregator,
    pub mean_tau: f64,
    pub mean_abs_rho: f64,
    pub qualifies: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub aggregator: Aggregator,
    pub contamination: f64,
    pub tau_min: f64,
    /// False when no aggregator passed the τ gate and the fallback was used.
    pub qualified: bool,
    pub candidates: Vec<SelectionCandidate>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub tau_min: f64,
    pub contamination: f64,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig { tau_min: 0.95, contamination: 0.15 }
    }
}

/// Among aggregators with mean τ ≥ `tau_min`, take the largest mean |ρ|;
/// equal |ρ| goes to the lexicographically smaller name. When none pass,
/// fall back to `max` (or, if absent, the most stable aggregator).
pub fn select_config(stability: &[StabilityRow], alignment: &[AlignmentRow], cfg: &SelectionConfig) -> Result<Selection> {
    let summary = summarize_stability(stability);
    if summary.is_empty() {
        return Err(Error::EmptyInput("no stability rows"));
    }
    let mut candidates: Vec<SelectionCandidate> = summary
        .iter()
        .map(|s| {
            let rhos: Vec<f64> = alignment.iter().filter(|a| a.aggregator == s.aggregator).map(|a| a.spearman_rho.abs()).collect();
            let mean_abs_rho = if rhos.is_empty() { 0.0 } else { rhos.iter().sum::<f64>() / rhos.len() as f64 };
            SelectionCandidate { aggregator: s.aggregator, mean_tau: s.mean_tau, mean_abs_rho, qualifies: s.mean_tau >= cfg.tau_min }
        })
        .collect();
    candidates.sort_by_key(|c| c.aggregator.to_string());
    let best = candidates
        .iter()
        .filter(|c| c.qualifies)
        .fold(None::<&SelectionCandidate>, |best, c| match best {
            Some(b) if b.mean_abs_rho >= c.mean_abs_rho => Some(b),
            _ => Some(c),
        });
    let (aggregator, qualified) = match best {
        Some(b) => (b.aggregator, true),
        None => {
            log::warn!("no aggregator reaches mean tau {}; falling back", cfg.tau_min);
            let fallback = candidates
                .iter()
                .find(|c| c.aggregator == Aggregator::Max)
                .or_else(|| candidates.iter().fold(None::<&SelectionCandidate>, |b, c| match b {
                    Some(b) if b.mean_tau >= c.mean_tau => Some(b),
                    _ => Some(c),
                }))
                .expect("non-empty");
            (fallback.aggregator, false)
        }
    };
    Ok(Selection { aggregator, contamination: cfg.contamination, tau_min: cfg.tau_min, qualified, candidates })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BaselineConfig {
    pub ttc_threshold: f64,
    /// Replaces non-finite feature values before the feature forest.
    pub ttc_cap: f64,
    pub contamination: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig { ttc_threshold: 1.5, ttc_cap: 100.0, contamination: 0.15 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OverlapReport {
    pub ours_total: usize,
    pub ttc_total: usize,
    pub if_total: usize,
    pub unique_ours: usize,
    pub ours_ttc_only: usize,
    pub ours_if_only: usize,
    pub ours_both: usize,
}

impl OverlapReport {
    pub fn partition_holds(&self) -> bool {
        self.unique_ours + self.ours_ttc_only + self.ours_if_only + self.ours_both == self.ours_total
    }
}

pub fn overlap(ours: &[bool], ttc: &[bool], feat: &[bool]) -> OverlapReport {
    let mut r = OverlapReport {
        ours_total: ours.iter().filter(|f| **f).count(),
        ttc_total: ttc.iter().filter(|f| **f).count(),
        if_total: feat.iter().filter(|f| **f).count(),
        ..Default::default()
    };
    for ((&o, &t), &f) in ours.iter().zip(ttc).zip(feat) {
        if !o {
            continue;
        }
        match (t, f) {
            (false, false) => r.unique_ours += 1,
            (true, false) => r.ours_ttc_only += 1,
            (false, true) => r.ours_if_only += 1,
            (true, true) => r.ours_both += 1,
        }
    }
    r
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineResult {
    pub ids: Vec<String>,
    pub ttc_flags: Vec<bool>,
    pub feature_rows: Vec<ForestScoreRow>,
    pub overlap: OverlapReport,
}

impl BaselineResult {
    pub fn feature_flags(&self) -> Vec<bool> {
        self.feature_rows.iter().map(|r| r.flagged).collect()
    }
}

pub fn ttc_threshold_flags(proxies: &[ProxyRow], threshold: f64) -> Vec<bool> {
    proxies.iter().map(|p| p.min_ttc < threshold).collect()
}

fn cap(v: f64, cap: f64) -> f64 {
    if v.is_finite() { v.min(cap) } else { cap }
}

pub fn feature_matrix(proxies: &[ProxyRow], ttc_cap: f64) -> Array2<f64> {
    Array2::from_shape_fn((proxies.len(), 4), |(i, j)| {
        let p = &proxies[i];
        match j {
            0 => cap(p.min_ttc, ttc_cap),
            1 => cap(p.min_dist, ttc_cap),
            2 => p.max_dv,
            _ => p.max_acc,
        }
    })
}

/// Both baselines, compared against `ours` (flags in `ids` order).
pub fn baselines(ids: &[String], ours: &[bool], proxies: &[ProxyRow], cfg: &BaselineConfig, forest: &ForestConfig) -> Result<BaselineResult> {
    if ours.len() != ids.len() {
        return Err(Error::SeriesLengthMismatch(ids.len(), ours.len()));
    }
    let idx = proxy_index(ids, proxies)?;
    let rows: Vec<ProxyRow> = idx.iter().map(|&i| proxies[i].clone()).collect();
    let ttc_flags = ttc_threshold_flags(&rows, cfg.ttc_threshold);
    let fcfg = ForestConfig { contamination: cfg.contamination, ..forest.clone() };
    let feature_rows = crate::iforest::detect(ids, feature_matrix(&rows, cfg.ttc_cap).view(), &fcfg)?;
    let feat: Vec<bool> = feature_rows.iter().map(|r| r.flagged).collect();
    Ok(BaselineResult { ids: ids.to_vec(), overlap: overlap(ours, &ttc_flags, &feat), ttc_flags, feature_rows })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CcdfPoint {
    pub score: f64,
    pub prob: f64,
}

/// Empirical P(S ≥ s) at each distinct score, ascending in s.
pub fn ccdf(scores: &[f64]) -> Vec<CcdfPoint> {
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mut out = Vec::new();
    let mut i = 0;
    while i < s.len() {
        out.push(CcdfPoint { score: s[i], prob: (s.len() - i) as f64 / n });
        let v = s[i];
        while i < s.len() && s[i] == v {
            i += 1;
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContrastRow {
    pub metric: String,
    pub flagged_mean: f64,
    pub flagged_std: f64,
    pub normal_mean: f64,
    pub normal_std: f64,
}

/// Mean ± std of every proxy for flagged vs unflagged scenes; non-finite
/// values are replaced by `value_cap`.
pub fn contrast(ids: &[String], flags: &[bool], proxies: &[ProxyRow], value_cap: f64) -> Result<Vec<ContrastRow>> {
    let idx = proxy_index(ids, proxies)?;
    Ok(crate::proxies::PROXY_COLUMNS[1..]
        .iter()
        .map(|&name| {
            let (mut a, mut n) = (Vec::new(), Vec::new());
            for (&i, &f) in idx.iter().zip(flags) {
                let v = cap(proxies[i].get(name).expect("known column"), value_cap);
                if f { a.push(v) } else { n.push(v) }
            }
            let ((fm, fs), (nm, ns)) = (mean_std(&a), mean_std(&n));
            ContrastRow { metric: name.to_string(), flagged_mean: fm, flagged_std: fs, normal_mean: nm, normal_std: ns }
        })
        .collect())
}
