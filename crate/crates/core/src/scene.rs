//! Canonical scene types shared by every stage: role slots, the 50×7×3 ego-frame
//! tensor with its presence mask, feature standardization and the grouped
//! train/val/test split.
//!
//! Absent slots are stored as `0.0` and must be skipped through [`SceneTensor::present`];
//! nothing downstream reads them.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Frames per scene (5 s at 10 Hz).
pub const SCENE_LEN: usize = 50;
pub const N_SLOTS: usize = 7;
pub const N_FEATURES: usize = 3;
/// Seconds between frames.
pub const FRAME_DT: f64 = 0.1;

pub const FEAT_X: usize = 0;
pub const FEAT_Y: usize = 1;
pub const FEAT_V: usize = 2;

/// One frame: `[slot][x, y, v]`.
pub type Frame = [[f64; N_FEATURES]; N_SLOTS];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    Ego,
    Front,
    Rear,
    FrontLeft,
    FrontRight,
    RearLeft,
    RearRight,
}

impl Role {
    pub const ALL: [Role; N_SLOTS] = [
        Role::Ego,
        Role::Front,
        Role::Rear,
        Role::FrontLeft,
        Role::FrontRight,
        Role::RearLeft,
        Role::RearRight,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Role> {
        Role::ALL.get(i).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub frame_index: u64,
    /// Lateral position (m).
    pub x: f64,
    /// Longitudinal position (m).
    pub y: f64,
    /// Speed (m/s), never negative.
    pub v: f64,
    pub a: Option<f64>,
    pub lane_id: Option<i64>,
}

/// One ego-centric scene. Serialized as a single JSON line
/// `{scene_id, frame0, ego_id, present[7], values[50][7][3]}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawScene")]
pub struct SceneTensor {
    pub scene_id: String,
    #[serde(rename = "frame0")]
    pub source_frame0: i64,
    #[serde(rename = "ego_id")]
    pub ego_vehicle_id: String,
    pub present: [bool; N_SLOTS],
    pub values: Vec<Frame>,
}

#[derive(Deserialize)]
struct RawScene {
    scene_id: String,
    frame0: i64,
    ego_id: String,
    present: [bool; N_SLOTS],
    values: Vec<Frame>,
}

impl TryFrom<RawScene> for SceneTensor {
    type Error = Error;

    fn try_from(raw: RawScene) -> Result<Self> {
        SceneTensor::new(raw.scene_id, raw.frame0, raw.ego_id, raw.present, raw.values)
    }
}

impl SceneTensor {
    /// Validates the tensor and zeroes every absent slot.
    pub fn new(
        scene_id: String,
        source_frame0: i64,
        ego_vehicle_id: String,
        present: [bool; N_SLOTS],
        mut values: Vec<Frame>,
    ) -> Result<Self> {
        let invalid = |reason: String| Error::InvalidScene {
            scene_id: scene_id.clone(),
            reason,
        };
        if values.len() != SCENE_LEN {
            return Err(invalid(format!("{} frames, expected {SCENE_LEN}", values.len())));
        }
        if !present[Role::Ego.index()] {
            return Err(invalid("ego slot marked absent".into()));
        }
        for (t, frame) in values.iter_mut().enumerate() {
            for (slot, feats) in frame.iter_mut().enumerate() {
                if !present[slot] {
                    *feats = [0.0; N_FEATURES];
                } else if feats.iter().any(|v| !v.is_finite()) {
                    return Err(invalid(format!("non-finite value at frame {t}, slot {slot}")));
                }
            }
        }
        Ok(SceneTensor {
            scene_id,
            source_frame0,
            ego_vehicle_id,
            present,
            values,
        })
    }

    pub fn is_present(&self, role: Role) -> bool {
        self.present[role.index()]
    }

    pub fn present_slots(&self) -> impl Iterator<Item = usize> + '_ {
        (0..N_SLOTS).filter(|&s| self.present[s])
    }

    pub fn get(&self, t: usize, slot: usize) -> [f64; N_FEATURES] {
        self.values[t][slot]
    }

    pub fn position(&self, t: usize, slot: usize) -> (f64, f64) {
        let f = self.values[t][slot];
        (f[FEAT_X], f[FEAT_Y])
    }

    pub fn speed(&self, t: usize, slot: usize) -> f64 {
        self.values[t][slot][FEAT_V]
    }
}

/// Translate absolute tracks into the ego frame: the ego's frame-0 position
/// becomes the origin, speed is carried over unchanged.
pub fn to_ego_frame(
    scene_id: impl Into<String>,
    ego_vehicle_id: impl Into<String>,
    tracks: &BTreeMap<Role, Vec<TrackPoint>>,
) -> Result<SceneTensor> {
    let ego = tracks.get(&Role::Ego).ok_or(Error::MissingEgo)?;
    for (&role, track) in tracks {
        if track.len() != SCENE_LEN {
            return Err(Error::LengthMismatch {
                role,
                len: track.len(),
                expected: SCENE_LEN,
            });
        }
        if let Some(t) = (0..SCENE_LEN).find(|&t| track[t].frame_index != ego[t].frame_index) {
            return Err(Error::FrameMismatch { role, frame: t });
        }
    }
    let (ox, oy) = (ego[0].x, ego[0].y);
    let mut present = [false; N_SLOTS];
    let mut values = vec![[[0.0; N_FEATURES]; N_SLOTS]; SCENE_LEN];
    for (&role, track) in tracks {
        let slot = role.index();
        present[slot] = true;
        for (t, p) in track.iter().enumerate() {
            values[t][slot] = [p.x - ox, p.y - oy, p.v];
        }
    }
    SceneTensor::new(
        scene_id.into(),
        ego[0].frame_index as i64,
        ego_vehicle_id.into(),
        present,
        values,
    )
}

/// Per-feature standardization statistics (population convention).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: [f64; N_FEATURES],
    pub std: [f64; N_FEATURES],
}

impl NormStats {
    pub fn identity() -> Self {
        NormStats {
            mean: [0.0; N_FEATURES],
            std: [1.0; N_FEATURES],
        }
    }

    pub fn normalize(&self, f: [f64; N_FEATURES]) -> [f64; N_FEATURES] {
        std::array::from_fn(|k| (f[k] - self.mean[k]) / self.std[k])
    }

    pub fn denormalize(&self, f: [f64; N_FEATURES]) -> [f64; N_FEATURES] {
        std::array::from_fn(|k| f[k] * self.std[k] + self.mean[k])
    }

    /// Standardized copy of a scene's frames, absent slots left at zero.
    pub fn normalize_scene(&self, scene: &SceneTensor) -> Vec<Frame> {
        scene
            .values
            .iter()
            .map(|frame| {
                std::array::from_fn(|s| {
                    if scene.present[s] {
                        self.normalize(frame[s])
                    } else {
                        [0.0; N_FEATURES]
                    }
                })
            })
            .collect()
    }
}

/// Mean and population std over present entries only. A constant feature
/// gets std 1.0.
pub fn fit_norm(scenes: &[SceneTensor]) -> Result<NormStats> {
    // Welford accumulation per feature.
    let mut count = 0u64;
    let mut mean = [0.0f64; N_FEATURES];
    let mut m2 = [0.0f64; N_FEATURES];
    for scene in scenes {
        for frame in &scene.values {
            for slot in scene.present_slots() {
                count += 1;
                let n = count as f64;
                for k in 0..N_FEATURES {
                    let x = frame[slot][k];
                    let delta = x - mean[k];
                    mean[k] += delta / n;
                    m2[k] += delta * (x - mean[k]);
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::EmptyInput("no present agent-timesteps to fit normalization"));
    }
    let std = std::array::from_fn(|k| {
        let s = (m2[k] / count as f64).sqrt();
        if s > 1e-12 {
            s
        } else {
            1.0
        }
    });
    Ok(NormStats { mean, std })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_fraction: 0.7,
            val_fraction: 0.2,
            test_fraction: 0.1,
            seed: 42,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let f = [self.train_fraction, self.val_fraction, self.test_fraction];
        if f.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
            return Err(Error::InvalidConfig(format!("split fractions must be >= 0: {f:?}")));
        }
        if (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!("split fractions must sum to 1: {f:?}")));
        }
        Ok(())
    }
}

/// Index sets of a three-way split.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Grouped split: all scenes of one ego vehicle land in the same part. Groups
/// are shuffled with the split seed and assigned by cumulative scene count.
pub fn split_indices(scenes: &[SceneTensor], spec: &SplitSpec) -> Result<SplitIndices> {
    spec.validate()?;
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in scenes.iter().enumerate() {
        groups.entry(s.ego_vehicle_id.as_str()).or_default().push(i);
    }
    let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
    groups.shuffle(&mut seed::rng(spec.seed));

    let n = scenes.len() as f64;
    let train_end = (spec.train_fraction * n).round() as usize;
    let val_end = ((spec.train_fraction + spec.val_fraction) * n).round() as usize;
    let mut out = SplitIndices::default();
    let mut assigned = 0usize;
    for g in groups {
        let len = g.len();
        let part = if assigned < train_end {
            &mut out.train
        } else if assigned < val_end {
            &mut out.val
        } else {
            &mut out.test
        };
        part.extend(g);
        assigned += len;
    }
    for part in [&mut out.train, &mut out.val, &mut out.test] {
        part.sort_unstable();
    }
    Ok(out)
}

pub fn split(
    scenes: &[SceneTensor],
    spec: &SplitSpec,
) -> Result<(Vec<SceneTensor>, Vec<SceneTensor>, Vec<SceneTensor>)> {
    let idx = split_indices(scenes, spec)?;
    let pick = |ix: &[usize]| ix.iter().map(|&i| scenes[i].clone()).collect::<Vec<_>>();
    Ok((pick(&idx.train), pick(&idx.val), pick(&idx.test)))
}
