//! NGSIM-style CSV ingestion: per-vehicle tracks, ego-centric 5-s scenes with
//! role-slotted neighbors, and the jump/stationary quality filters.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::scene::{to_ego_frame, Role, SceneTensor, TrackPoint, SCENE_LEN};

pub const FEET_TO_METERS: f64 = 0.3048;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Unit {
    Feet,
    Meters,
}

impl Unit {
    fn factor(self) -> f64 {
        match self {
            Unit::Feet => FEET_TO_METERS,
            Unit::Meters => 1.0,
        }
    }
}

impl FromStr for Unit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "feet" | "ft" => Ok(Unit::Feet),
            "meters" | "m" | "metres" => Ok(Unit::Meters),
            other => Err(Error::InvalidConfig(format!("unknown unit `{other}`"))),
        }
    }
}

/// One parsed CSV row, already in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct CsvRow {
    pub vehicle_id: i64,
    pub frame_id: u64,
    pub local_x: f64,
    pub local_y: f64,
    pub v_vel: f64,
    pub v_acc: Option<f64>,
    pub lane_id: Option<i64>,
    pub preceding_id: Option<i64>,
    pub following_id: Option<i64>,
}

/// Vehicle id → frame-sorted track.
pub type TrackTable = BTreeMap<i64, Vec<TrackPoint>>;

struct Columns {
    vehicle_id: usize,
    frame_id: usize,
    local_x: usize,
    local_y: usize,
    v_vel: usize,
    v_acc: Option<usize>,
    lane_id: Option<usize>,
    preceding: Option<usize>,
    following: Option<usize>,
}

impl Columns {
    fn from_header(header: &csv::StringRecord) -> Result<Self> {
        let names: Vec<String> = header.iter().map(|h| h.trim().to_ascii_lowercase()).collect();
        let find = |aliases: &[&str]| names.iter().position(|n| aliases.contains(&n.as_str()));
        let need = |aliases: &[&str]| {
            find(aliases).ok_or_else(|| Error::MalformedRow {
                line: 1,
                reason: format!("missing column `{}`", aliases[0]),
            })
        };
        Ok(Columns {
            vehicle_id: need(&["vehicle_id"])?,
            frame_id: need(&["frame_id"])?,
            local_x: need(&["local_x"])?,
            local_y: need(&["local_y"])?,
            v_vel: need(&["v_vel"])?,
            v_acc: find(&["v_acc"]),
            lane_id: find(&["lane_id"]),
            preceding: find(&["preceding", "preceding_id"]),
            following: find(&["following", "following_id"]),
        })
    }

    fn parse(&self, rec: &csv::StringRecord, line: u64, scale: f64) -> Result<CsvRow> {
        let bad = |what: &str| Error::MalformedRow {
            line,
            reason: format!("bad or missing `{what}`"),
        };
        let field = |i: usize| rec.get(i).map(str::trim).filter(|s| !s.is_empty());
        let float = |i: usize, what: &str| {
            field(i)
                .and_then(|s| s.parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| bad(what))
        };
        let int_opt = |i: Option<usize>| i.and_then(field).and_then(|s| s.parse::<f64>().ok()).map(|v| v as i64);
        let vehicle_id = field(self.vehicle_id)
            .and_then(|s| s.parse::<f64>().ok())
            .filter(|v| v.fract() == 0.0)
            .ok_or_else(|| bad("vehicle_id"))? as i64;
        let frame_id = field(self.frame_id)
            .and_then(|s| s.parse::<f64>().ok())
            .filter(|v| *v >= 0.0 && v.fract() == 0.0)
            .ok_or_else(|| bad("frame_id"))? as u64;
        let v_vel = float(self.v_vel, "v_vel")? * scale;
        if v_vel < 0.0 {
            return Err(bad("v_vel"));
        }
        Ok(CsvRow {
            vehicle_id,
            frame_id,
            local_x: float(self.local_x, "local_x")? * scale,
            local_y: float(self.local_y, "local_y")? * scale,
            v_vel,
            v_acc: self
                .v_acc
                .and_then(field)
                .and_then(|s| s.parse::<f64>().ok())
                .map(|a| a * scale),
            lane_id: int_opt(self.lane_id),
            preceding_id: int_opt(self.preceding),
            following_id: int_opt(self.following),
        })
    }
}

/// Parse a trajectory CSV into per-vehicle tracks sorted by frame.
pub fn parse_csv(path: &Path, unit: Unit) -> Result<TrackTable> {
    let mut reader = io::csv_reader(path)?;
    let header = reader.headers()?.clone();
    let cols = Columns::from_header(&header)?;
    let scale = unit.factor();
    let mut table: TrackTable = BTreeMap::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| Error::MalformedRow {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let row = cols.parse(&rec, line, scale)?;
        table.entry(row.vehicle_id).or_default().push(TrackPoint {
            frame_index: row.frame_id,
            x: row.local_x,
            y: row.local_y,
            v: row.v_vel,
            a: row.v_acc,
            lane_id: row.lane_id,
        });
    }
    for (id, track) in table.iter_mut() {
        track.sort_by_key(|p| p.frame_index);
        if track.windows(2).any(|w| w[1].frame_index <= w[0].frame_index) {
            return Err(Error::NonMonotoneFrames(id.to_string()));
        }
    }
    Ok(table)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildConfig {
    /// Window length in frames; scenes are fixed at 50.
    pub window: usize,
    pub stride: usize,
    /// Minimum net displacement (m) any present agent must cover.
    pub stationary_eps: f64,
    /// Largest allowed single-frame displacement (m).
    pub jump_threshold: f64,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            window: SCENE_LEN,
            stride: 50,
            stationary_eps: 0.5,
            jump_threshold: 10.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub scenes_kept: usize,
    pub dropped_jump: usize,
    pub dropped_stationary: usize,
    pub dropped_incomplete: usize,
}

impl FilterReport {
    pub fn candidates(&self) -> usize {
        self.scenes_kept + self.dropped_jump + self.dropped_stationary + self.dropped_incomplete
    }

    fn record(&mut self, outcome: &Outcome) {
        match outcome {
            Outcome::Kept(_) => self.scenes_kept += 1,
            Outcome::Dropped(FilterVerdict::Jump) => self.dropped_jump += 1,
            Outcome::Dropped(FilterVerdict::Stationary) => self.dropped_stationary += 1,
            Outcome::Dropped(FilterVerdict::Pass) | Outcome::Incomplete => self.dropped_incomplete += 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FilterVerdict {
    Pass,
    Jump,
    Stationary,
}

/// Quality filters on a scene's present agents. Distances are translation
/// invariant, so ego-frame tensors give the same verdict as absolute tracks.
pub fn check_filters(scene: &SceneTensor, cfg: &BuildConfig) -> FilterVerdict {
    let slots: Vec<usize> = scene.present_slots().collect();
    let dist = |a: (f64, f64), b: (f64, f64)| (a.0 - b.0).hypot(a.1 - b.1);
    for &s in &slots {
        if (1..SCENE_LEN).any(|t| dist(scene.position(t, s), scene.position(t - 1, s)) > cfg.jump_threshold) {
            return FilterVerdict::Jump;
        }
    }
    for &s in &slots {
        if dist(scene.position(SCENE_LEN - 1, s), scene.position(0, s)) < cfg.stationary_eps {
            return FilterVerdict::Stationary;
        }
    }
    FilterVerdict::Pass
}

enum Outcome {
    Kept(SceneTensor),
    Dropped(FilterVerdict),
    Incomplete,
}

/// Per-frame lookup of which vehicles are observed.
struct FrameIndex<'a> {
    tracks: &'a TrackTable,
    at_frame: HashMap<u64, Vec<(i64, usize)>>,
}

impl<'a> FrameIndex<'a> {
    fn new(tracks: &'a TrackTable) -> Self {
        let mut at_frame: HashMap<u64, Vec<(i64, usize)>> = HashMap::new();
        for (&id, track) in tracks {
            for (i, p) in track.iter().enumerate() {
                at_frame.entry(p.frame_index).or_default().push((id, i));
            }
        }
        FrameIndex { tracks, at_frame }
    }

    fn point(&self, id: i64, i: usize) -> &TrackPoint {
        &self.tracks[&id][i]
    }
}

/// Window of `len` consecutive frames starting at `start`, if fully observed.
fn full_window(track: &[TrackPoint], start: u64, len: usize) -> Option<&[TrackPoint]> {
    let i = track.binary_search_by_key(&start, |p| p.frame_index).ok()?;
    let w = track.get(i..i + len)?;
    (w[len - 1].frame_index == start + len as u64 - 1).then_some(w)
}

/// Role of every neighbor relative to the ego at one frame: same lane gives
/// Front/Rear, lane ∓ 1 gives the left/right diagonals, nearest by
/// longitudinal distance with ties to the smaller vehicle id.
pub fn assign_roles(ego: (i64, &TrackPoint), others: &[(i64, &TrackPoint)]) -> BTreeMap<Role, i64> {
    let mut best: BTreeMap<Role, (f64, i64)> = BTreeMap::new();
    let Some(lane) = ego.1.lane_id else {
        return BTreeMap::new();
    };
    for &(id, p) in others {
        if id == ego.0 {
            continue;
        }
        let Some(other_lane) = p.lane_id else { continue };
        let dy = p.y - ego.1.y;
        if dy == 0.0 {
            continue;
        }
        let ahead = dy > 0.0;
        let role = match other_lane - lane {
            0 if ahead => Role::Front,
            0 => Role::Rear,
            -1 if ahead => Role::FrontLeft,
            -1 => Role::RearLeft,
            1 if ahead => Role::FrontRight,
            1 => Role::RearRight,
            _ => continue,
        };
        let key = (dy.abs(), id);
        let slot = best.entry(role).or_insert(key);
        if key.0 < slot.0 || (key.0 == slot.0 && key.1 < slot.1) {
            *slot = key;
        }
    }
    best.into_iter().map(|(r, (_, id))| (r, id)).collect()
}

fn build_for_ego(index: &FrameIndex<'_>, ego_id: i64, cfg: &BuildConfig) -> Vec<Outcome> {
    let track = &index.tracks[&ego_id];
    let (Some(first), Some(last)) = (track.first(), track.last()) else {
        return Vec::new();
    };
    let len = cfg.window as u64;
    let mut out = Vec::new();
    let mut start = first.frame_index;
    while start + len - 1 <= last.frame_index {
        out.push(build_window(index, ego_id, track, start, cfg));
        start += cfg.stride as u64;
    }
    out
}

fn build_window(index: &FrameIndex<'_>, ego_id: i64, track: &[TrackPoint], start: u64, cfg: &BuildConfig) -> Outcome {
    let Some(ego_window) = full_window(track, start, cfg.window) else {
        return Outcome::Incomplete;
    };
    let mid = start + cfg.window as u64 / 2;
    let mid_ego = &ego_window[(mid - start) as usize];
    let others: Vec<(i64, &TrackPoint)> = index
        .at_frame
        .get(&mid)
        .map(|v| v.iter().map(|&(id, i)| (id, index.point(id, i))).collect())
        .unwrap_or_default();

    let mut tracks = BTreeMap::new();
    tracks.insert(Role::Ego, ego_window.to_vec());
    for (role, id) in assign_roles((ego_id, mid_ego), &others) {
        if let Some(w) = full_window(&index.tracks[&id], start, cfg.window) {
            tracks.insert(role, w.to_vec());
        }
    }
    let scene = match to_ego_frame(format!("{ego_id}_{start}"), ego_id.to_string(), &tracks) {
        Ok(s) => s,
        Err(_) => return Outcome::Incomplete,
    };
    match check_filters(&scene, cfg) {
        FilterVerdict::Pass => Outcome::Kept(scene),
        v => Outcome::Dropped(v),
    }
}

/// Build every stride-aligned ego-centric scene, filtered. Scenes come out in
/// (ego id, start frame) order.
pub fn build_scenes(tracks: &TrackTable, cfg: &BuildConfig) -> Result<(Vec<SceneTensor>, FilterReport)> {
    if cfg.window != SCENE_LEN {
        return Err(Error::InvalidConfig(format!("window must be {SCENE_LEN} frames")));
    }
    if cfg.stride == 0 {
        return Err(Error::InvalidConfig("stride must be >= 1".into()));
    }
    let index = FrameIndex::new(tracks);
    let ids: Vec<i64> = tracks.keys().copied().collect();
    let outcomes: Vec<Vec<Outcome>> = ids.par_iter().map(|&id| build_for_ego(&index, id, cfg)).collect();
    let mut report = FilterReport::default();
    let mut scenes = Vec::new();
    for outcome in outcomes.into_iter().flatten() {
        report.record(&outcome);
        if let Outcome::Kept(s) = outcome {
            scenes.push(s);
        }
    }
    Ok((scenes, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    const HEADER: &str = "Vehicle_ID,Frame_ID,Local_X,Local_Y,v_Vel,v_Acc,Lane_ID,Preceding,Following\n";

    fn write_csv(rows: &[String]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(HEADER.as_bytes()).unwrap();
        for r in rows {
            writeln!(f, "{r}").unwrap();
        }
        f
    }

    fn vehicle_rows(id: i64, frames: std::ops::Range<u64>, lane: i64, x: f64, y0: f64, v: f64) -> Vec<String> {
        frames
            .map(|f| {
                let y = y0 + v * 0.1 * f as f64;
                format!("{id},{f},{x},{y},{v},0,{lane},0,0")
            })
            .collect()
    }

    #[test]
    fn feet_converted() {
        let f = write_csv(&["1,1,10,0,0,0,1,0,0".to_string()]);
        let t = parse_csv(f.path(), Unit::Feet).unwrap();
        assert!((t[&1][0].x - 3.048).abs() < 1e-12);
        let t = parse_csv(f.path(), Unit::Meters).unwrap();
        assert_eq!(t[&1][0].x, 10.0);
    }

    #[test]
    fn two_vehicles_and_shuffle_invariance() {
        let mut rows = vehicle_rows(1, 0..100, 2, 5.0, 0.0, 10.0);
        rows.extend(vehicle_rows(2, 0..100, 2, 5.0, 30.0, 10.0));
        let sorted = parse_csv(write_csv(&rows).path(), Unit::Meters).unwrap();
        assert_eq!(sorted.len(), 2);
        assert!(sorted.values().all(|t| t.len() == 100));
        // deterministic shuffle
        let mut shuffled = rows.clone();
        let n = shuffled.len();
        for i in 0..n {
            shuffled.swap(i, (i * 7919 + 13) % n);
        }
        assert_eq!(parse_csv(write_csv(&shuffled).path(), Unit::Meters).unwrap(), sorted);
    }

    #[test]
    fn malformed_and_duplicate_frames() {
        let f = write_csv(&["1,1,abc,0,0,0,1,0,0".to_string()]);
        match parse_csv(f.path(), Unit::Meters) {
            Err(Error::MalformedRow { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        let f = write_csv(&["1,1,0,0,0,0,1,0,0".to_string(), "1,1,0,1,0,0,1,0,0".to_string()]);
        assert!(matches!(parse_csv(f.path(), Unit::Meters), Err(Error::NonMonotoneFrames(_))));
    }

    fn table(rows: Vec<String>) -> TrackTable {
        parse_csv(write_csv(&rows).path(), Unit::Meters).unwrap()
    }

    #[test]
    fn jump_and_stationary_filters() {
        let mut rows = vehicle_rows(1, 0..50, 2, 0.0, 0.0, 10.0);
        // 12 m jump between frames 20 and 21
        for r in rows.iter_mut().skip(21) {
            let mut parts: Vec<String> = r.split(',').map(String::from).collect();
            let y: f64 = parts[3].parse().unwrap();
            parts[3] = (y + 12.0).to_string();
            *r = parts.join(",");
        }
        rows.extend(vehicle_rows(2, 0..50, 5, 0.0, 0.0, 0.0));
        let (scenes, report) = build_scenes(&table(rows), &BuildConfig::default()).unwrap();
        assert!(scenes.is_empty());
        assert_eq!(report.dropped_jump, 1);
        assert_eq!(report.dropped_stationary, 1);
        assert_eq!(report.candidates(), 2);
    }

    #[test]
    fn incomplete_windows_counted() {
        let mut rows = vehicle_rows(1, 0..40, 2, 0.0, 0.0, 10.0);
        rows.extend(vehicle_rows(1, 45..120, 2, 0.0, 0.0, 10.0));
        let (scenes, report) = build_scenes(&table(rows), &BuildConfig::default()).unwrap();
        // windows at 0 (gap) and 50 (complete); 100..149 out of range
        assert_eq!(report.dropped_incomplete, 1);
        assert_eq!(scenes.len(), 1);
        assert_eq!(scenes[0].scene_id, "1_50");
        assert_eq!(report.candidates(), 2);
    }

    /// Three lanes, ego (id 10) in lane 2 with six neighbors plus distractors.
    fn platoon_rows() -> Vec<String> {
        let spec: &[(i64, i64, f64)] = &[
            (10, 2, 100.0), // ego
            (3, 2, 125.0),  // front
            (4, 2, 160.0),  // farther ahead, same lane
            (5, 2, 80.0),   // rear
            (6, 1, 110.0),  // front-left
            (7, 1, 95.0),   // rear-left
            (8, 3, 130.0),  // front-right, tie with 9
            (9, 3, 70.0),   // rear-right (|dy| 30)
            (2, 3, 130.0),  // same spot as 8: smaller id wins
            (11, 4, 101.0), // two lanes away: ignored
        ];
        spec.iter()
            .flat_map(|&(id, lane, y0)| vehicle_rows(id, 0..50, lane, lane as f64 * 3.7, y0, 15.0))
            .collect()
    }

    #[test]
    fn platoon_roles_match_brute_force() {
        let rows = platoon_rows();
        let tracks = table(rows);
        let (scenes, _) = build_scenes(&tracks, &BuildConfig { stride: 50, ..Default::default() }).unwrap();
        let ego_scene = scenes.iter().find(|s| s.ego_vehicle_id == "10").unwrap();

        // brute-force oracle: enumerate every neighbor for every slot at the midpoint
        let mid = 25usize;
        let ego = &tracks[&10][mid];
        let lane_of = |p: &TrackPoint| p.lane_id.unwrap();
        let mut expected: BTreeMap<Role, i64> = BTreeMap::new();
        for role in &Role::ALL[1..] {
            let mut cands: Vec<(f64, i64)> = Vec::new();
            for (&id, tr) in &tracks {
                if id == 10 {
                    continue;
                }
                let p = &tr[mid];
                let dl = lane_of(p) - lane_of(ego);
                let dy = p.y - ego.y;
                let ok = match role {
                    Role::Front => dl == 0 && dy > 0.0,
                    Role::Rear => dl == 0 && dy < 0.0,
                    Role::FrontLeft => dl == -1 && dy > 0.0,
                    Role::RearLeft => dl == -1 && dy < 0.0,
                    Role::FrontRight => dl == 1 && dy > 0.0,
                    Role::RearRight => dl == 1 && dy < 0.0,
                    Role::Ego => false,
                };
                if ok {
                    cands.push((dy.abs(), id));
                }
            }
            cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            if let Some(&(_, id)) = cands.first() {
                expected.insert(*role, id);
            }
        }
        assert_eq!(expected[&Role::FrontRight], 2);
        let roles = assign_roles((10, ego), &tracks.iter().map(|(&id, t)| (id, &t[mid])).collect::<Vec<_>>());
        assert_eq!(roles, expected);

        assert!(ego_scene.present.iter().all(|&p| p));
        // the Front slot holds vehicle 3: 25 m ahead, same lateral position
        let (x, y) = ego_scene.position(0, Role::Front.index());
        assert!((x - 0.0).abs() < 1e-9 && (y - 25.0).abs() < 1e-9);
        let (x, _) = ego_scene.position(0, Role::FrontLeft.index());
        assert!((x + 3.7).abs() < 1e-9);
    }

    #[test]
    fn partial_neighbor_masked_absent() {
        let mut rows = vehicle_rows(1, 0..50, 2, 0.0, 0.0, 10.0);
        rows.extend(vehicle_rows(2, 10..50, 2, 0.0, 20.0, 10.0));
        let (scenes, _) = build_scenes(&table(rows), &BuildConfig::default()).unwrap();
        let s = scenes.iter().find(|s| s.ego_vehicle_id == "1").unwrap();
        assert!(!s.is_present(Role::Front));
    }

    #[test]
    fn emitted_scenes_pass_filters_and_counts_are_stable() {
        let tracks = table(platoon_rows());
        let cfg = BuildConfig { stride: 10, ..Default::default() };
        let (a, ra) = build_scenes(&tracks, &cfg).unwrap();
        let (b, rb) = build_scenes(&tracks, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra, rb);
        assert!(a.iter().all(|s| check_filters(s, &cfg) == FilterVerdict::Pass));
        for s in &a {
            if s.is_present(Role::Front) {
                let (_, y) = s.position(25, Role::Front.index());
                let (_, ey) = s.position(25, Role::Ego.index());
                assert!(y > ey);
            }
        }
    }
}
