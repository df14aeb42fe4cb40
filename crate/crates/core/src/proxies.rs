//! Surrogate safety measures per scene.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{csv_reader, csv_writer, fmt_f64, parse_f64};
use crate::scene::{Role, SceneTensor, FEAT_X, FRAME_DT, SCENE_LEN};
use crate::stats::mean_std;

pub use crate::stats::spearman;

/// Same-lane (leader, follower) pairs used for gaps, TTC and closing speed.
pub const LEADER_PAIRS: [(Role, Role); 4] = [
    (Role::Front, Role::Ego),
    (Role::Ego, Role::Rear),
    (Role::FrontLeft, Role::RearLeft),
    (Role::FrontRight, Role::RearRight),
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProxyConfig {
    /// Closing speed above which a frame counts as harsh (m/s).
    pub harsh_threshold: f64,
    /// Subtracted from center distance to approximate bumper gaps (m).
    pub vehicle_length: f64,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        ProxyConfig { harsh_threshold: 3.0, vehicle_length: 4.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyRow {
    pub scene_id: String,
    pub harsh_closing_ratio: f64,
    pub lateral_excursion: f64,
    pub min_long_gap: f64,
    pub min_ttc: f64,
    pub rel_speed_std: f64,
    pub min_dist: f64,
    pub max_dv: f64,
    pub max_acc: f64,
}

pub const PROXY_COLUMNS: [&str; 9] = [
    "scene_id",
    "harsh_closing_ratio",
    "lateral_excursion",
    "min_long_gap",
    "min_ttc",
    "rel_speed_std",
    "min_dist",
    "max_dv",
    "max_acc",
];

/// The five alignment proxies, in reporting order.
pub const ALIGNMENT_PROXIES: [&str; 5] = [
    "harsh_closing_ratio",
    "lateral_excursion",
    "min_long_gap",
    "min_ttc",
    "rel_speed_std",
];

impl ProxyRow {
    pub fn get(&self, name: &str) -> Option<f64> {
        Some(match name {
            "harsh_closing_ratio" => self.harsh_closing_ratio,
            "lateral_excursion" => self.lateral_excursion,
            "min_long_gap" => self.min_long_gap,
            "min_ttc" => self.min_ttc,
            "rel_speed_std" => self.rel_speed_std,
            "min_dist" => self.min_dist,
            "max_dv" => self.max_dv,
            "max_acc" => self.max_acc,
            _ => return None,
        })
    }
}

/// Time to collision: `gap / closing_speed` while closing, otherwise infinite.
pub fn ttc(gap: f64, closing_speed: f64) -> f64 {
    if closing_speed > 0.0 {
        gap.max(0.0) / closing_speed
    } else {
        f64::INFINITY
    }
}

/// Central-difference acceleration at frame `t`, one-sided at the ends.
fn accel(scene: &SceneTensor, slot: usize, t: usize) -> f64 {
    let v = |t: usize| scene.speed(t, slot);
    match t {
        0 => (v(1) - v(0)) / FRAME_DT,
        t if t == SCENE_LEN - 1 => (v(t) - v(t - 1)) / FRAME_DT,
        t => (v(t + 1) - v(t - 1)) / (2.0 * FRAME_DT),
    }
}

pub fn compute_proxies(scene: &SceneTensor, cfg: &ProxyConfig) -> ProxyRow {
    let pairs: Vec<(usize, usize)> = LEADER_PAIRS
        .iter()
        .filter(|(l, f)| scene.is_present(*l) && scene.is_present(*f))
        .map(|(l, f)| (l.index(), f.index()))
        .collect();
    let present: Vec<usize> = scene.present_slots().collect();

    let mut min_gap = f64::INFINITY;
    let mut min_ttc = f64::INFINITY;
    let mut harsh_frames = 0usize;
    let mut min_dist = f64::INFINITY;
    let mut max_dv: f64 = 0.0;
    for t in 0..SCENE_LEN {
        let mut harsh = false;
        for &(l, f) in &pairs {
            let (_, yl) = scene.position(t, l);
            let (_, yf) = scene.position(t, f);
            let gap = (yl - yf - cfg.vehicle_length).max(0.0);
            let closing = scene.speed(t, f) - scene.speed(t, l);
            min_gap = min_gap.min(gap);
            min_ttc = min_ttc.min(ttc(gap, closing));
            harsh |= closing > cfg.harsh_threshold;
        }
        harsh_frames += harsh as usize;
        for (i, &a) in present.iter().enumerate() {
            for &b in &present[i + 1..] {
                let (xa, ya) = scene.position(t, a);
                let (xb, yb) = scene.position(t, b);
                min_dist = min_dist.min((xa - xb).hypot(ya - yb));
                max_dv = max_dv.max((scene.speed(t, a) - scene.speed(t, b)).abs());
            }
        }
    }

    let lateral_excursion = present
        .iter()
        .flat_map(|&k| {
            let x0 = scene.values[0][k][FEAT_X];
            (0..SCENE_LEN).map(move |t| (scene.values[t][k][FEAT_X] - x0).abs())
        })
        .fold(0.0, f64::max);

    let rel_speed_std = if scene.is_present(Role::Front) {
        let dv: Vec<f64> = (0..SCENE_LEN)
            .map(|t| scene.speed(t, Role::Front.index()) - scene.speed(t, Role::Ego.index()))
            .collect();
        mean_std(&dv).1
    } else {
        0.0
    };

    let max_acc = present
        .iter()
        .flat_map(|&k| (0..SCENE_LEN).map(move |t| accel(scene, k, t).abs()))
        .fold(0.0, f64::max);

    ProxyRow {
        scene_id: scene.scene_id.clone(),
        harsh_closing_ratio: harsh_frames as f64 / SCENE_LEN as f64,
        lateral_excursion,
        min_long_gap: min_gap,
        min_ttc,
        rel_speed_std,
        min_dist,
        max_dv,
        max_acc,
    }
}

pub fn compute_all(scenes: &[SceneTensor], cfg: &ProxyConfig) -> Vec<ProxyRow> {
    use rayon::prelude::*;
    scenes.par_iter().map(|s| compute_proxies(s, cfg)).collect()
}

pub fn write_proxies_csv(path: &Path, rows: &[ProxyRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(PROXY_COLUMNS)?;
    for r in rows {
        let mut rec = vec![r.scene_id.clone()];
        rec.extend(PROXY_COLUMNS[1..].iter().map(|c| fmt_f64(r.get(c).expect("known column"))));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_proxies_csv(path: &Path) -> Result<Vec<ProxyRow>> {
    let mut r = csv_reader(path)?;
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |reason: String| Error::MalformedRow { line: i as u64 + 2, reason };
        if rec.len() != PROXY_COLUMNS.len() {
            return Err(bad(format!("expected {} columns", PROXY_COLUMNS.len())));
        }
        let num = |j: usize| parse_f64(&rec[j]).ok_or_else(|| bad(format!("{} is not a number", PROXY_COLUMNS[j])));
        out.push(ProxyRow {
            scene_id: rec[0].to_string(),
            harsh_closing_ratio: num(1)?,
            lateral_excursion: num(2)?,
            min_long_gap: num(3)?,
            min_ttc: num(4)?,
            rel_speed_std: num(5)?,
            min_dist: num(6)?,
            max_dv: num(7)?,
            max_acc: num(8)?,
        });
    }
    Ok(out)
}
