//! Labeled synthetic scenes: IDM car-following on a three-lane road plus four
//! injected anomaly archetypes (follow instability, sudden braking, lateral
//! drift, abrupt lane change).
//!
//! Every scene draws from its own random streams derived from the master seed,
//! so scenes can be generated in any order or in parallel. The base traffic and
//! the anomaly parameters use separate streams; `generate_scene` with
//! [`AnomalyKind::None`] gives the exact normal counterpart of an anomalous
//! scene.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scene::{to_ego_frame, Role, SceneTensor, TrackPoint, FRAME_DT, N_SLOTS, SCENE_LEN};
use crate::seed;

pub const LANE_WIDTH: f64 = 3.7;
pub const VEHICLE_LENGTH: f64 = 4.5;
/// Physical braking limit applied to IDM followers.
const MAX_DECEL: f64 = 9.0;
/// Frames simulated before recording starts.
const WARMUP_FRAMES: usize = 20;
const NEIGHBOR_PRESENCE: f64 = 0.9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IdmParams {
    /// m/s
    pub desired_speed: f64,
    /// s
    pub time_headway: f64,
    /// m/s²
    pub max_accel: f64,
    /// m/s²
    pub comfortable_decel: f64,
    /// m
    pub jam_distance: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        IdmParams {
            desired_speed: 30.0,
            time_headway: 1.5,
            max_accel: 1.0,
            comfortable_decel: 1.5,
            jam_distance: 2.0,
        }
    }
}

impl IdmParams {
    /// IDM acceleration for a follower at speed `v` behind a leader at
    /// `v_lead` with bumper gap `gap`.
    pub fn accel(&self, v: f64, v0: f64, v_lead: f64, gap: f64) -> f64 {
        let dv = v - v_lead;
        let s_star = self.jam_distance
            + (v * self.time_headway + v * dv / (2.0 * (self.max_accel * self.comfortable_decel).sqrt())).max(0.0);
        let free = 1.0 - (v / v0).powi(4);
        let a = self.max_accel * (free - (s_star / gap.max(0.1)).powi(2));
        a.clamp(-MAX_DECEL, self.max_accel)
    }

    /// Steady-state bumper gap when following at speed `v`.
    pub fn equilibrium_gap(&self, v: f64, v0: f64) -> f64 {
        let free = (1.0 - (v / v0).powi(4)).max(0.05);
        (self.jam_distance + v * self.time_headway) / free.sqrt()
    }

    fn validate(&self) -> Result<()> {
        let p = [
            self.desired_speed,
            self.time_headway,
            self.max_accel,
            self.comfortable_decel,
            self.jam_distance,
        ];
        if p.iter().all(|v| v.is_finite() && *v > 0.0) {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("IDM parameters must be positive: {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_scenes: usize,
    pub anomaly_fraction: f64,
    pub seed: u64,
    pub idm: IdmParams,
    /// Std of per-frame lateral position noise (m).
    pub noise_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_scenes: 2000,
            anomaly_fraction: 0.1,
            seed: 7,
            idm: IdmParams::default(),
            noise_std: 0.03,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.anomaly_fraction) {
            return Err(Error::InvalidConfig("anomaly_fraction must lie in [0, 1]".into()));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::InvalidConfig("noise_std must be >= 0".into()));
        }
        self.idm.validate()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum AnomalyKind {
    None,
    FollowInstability,
    SuddenBrake,
    LateralDrift,
    AbruptLaneChange,
}

impl AnomalyKind {
    pub const INJECTED: [AnomalyKind; 4] = [
        AnomalyKind::FollowInstability,
        AnomalyKind::SuddenBrake,
        AnomalyKind::LateralDrift,
        AnomalyKind::AbruptLaneChange,
    ];
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthLabel {
    pub scene_id: String,
    pub is_anomaly: bool,
    pub kind: AnomalyKind,
    /// First affected frame; -1 for normal scenes.
    pub onset_frame: i64,
}

pub fn scene_id(index: usize) -> String {
    format!("syn{index:05}")
}

/// Which scene indices carry which anomaly: exactly `round(n · fraction)`
/// anomalies, kinds assigned round-robin so they are evenly spread.
pub fn anomaly_plan(cfg: &SynthConfig) -> Vec<AnomalyKind> {
    let n_anom = ((cfg.n_scenes as f64) * cfg.anomaly_fraction).round() as usize;
    let mut order: Vec<usize> = (0..cfg.n_scenes).collect();
    order.shuffle(&mut seed::child_rng(cfg.seed, "synth/plan"));
    let mut kinds = vec![AnomalyKind::None; cfg.n_scenes];
    for (j, &i) in order.iter().take(n_anom).enumerate() {
        kinds[i] = AnomalyKind::INJECTED[j % AnomalyKind::INJECTED.len()];
    }
    kinds
}

pub fn generate(cfg: &SynthConfig) -> Result<(Vec<SceneTensor>, Vec<GroundTruthLabel>)> {
    cfg.validate()?;
    let plan = anomaly_plan(cfg);
    let out: Vec<(SceneTensor, GroundTruthLabel)> = plan
        .par_iter()
        .enumerate()
        .map(|(i, &kind)| generate_scene(i, kind, cfg))
        .collect::<Result<_>>()?;
    Ok(out.into_iter().unzip())
}

#[derive(Clone, Copy, Debug)]
enum Control {
    /// Cruise with a gentle sinusoidal speed variation.
    Cruise { amp: f64, omega: f64, phase: f64 },
    /// IDM behind the agent at the given index.
    Follow { leader: usize },
    /// Hard braking during `[onset, onset + frames)` (recording frames), then hold.
    Brake { base: (f64, f64, f64), onset: i64, frames: i64, decel: f64 },
    /// Match the leader's acceleration, plus a speed oscillation from `onset`.
    Oscillate { leader: usize, onset: i64, amp: f64, omega: f64 },
}

#[derive(Clone, Debug)]
struct Agent {
    slot: usize,
    lane_x: f64,
    offset: f64,
    y: f64,
    v: f64,
    v0: f64,
    control: Control,
    /// Lateral maneuver: (onset frame, duration frames, signed displacement).
    lateral: Option<(i64, i64, f64)>,
    /// Driver reaction window (onset frame, frames) during which the agent
    /// keeps its speed.
    reaction: Option<(i64, i64)>,
}

fn smoothstep(u: f64) -> f64 {
    let u = u.clamp(0.0, 1.0);
    u * u * (3.0 - 2.0 * u)
}

impl Agent {
    fn lateral_at(&self, frame: i64) -> f64 {
        let shift = self.lateral.map_or(0.0, |(onset, dur, d)| {
            d * smoothstep((frame - onset) as f64 / dur as f64)
        });
        self.lane_x + self.offset + shift
    }
}

struct BaseDraw {
    present: [bool; N_SLOTS],
    lane_speed: [f64; 3],
    v0: [f64; N_SLOTS],
    gap_factor: [f64; N_SLOTS],
    speed_jitter: [f64; N_SLOTS],
    offset: [f64; N_SLOTS],
    cruise: [(f64, f64, f64); N_SLOTS],
    adjacent_lead_y: [f64; 2],
}

fn draw_base(rng: &mut seed::Rng, idm: &IdmParams) -> BaseDraw {
    let mut present = [true; N_SLOTS];
    for p in present.iter_mut().skip(1) {
        *p = rng.random_bool(NEIGHBOR_PRESENCE);
    }
    let ego_lane = rng.random_range(12.0..25.0);
    let lane_speed = [
        (ego_lane + rng.random_range(-3.0..3.0f64)).max(8.0),
        ego_lane,
        (ego_lane + rng.random_range(-3.0..3.0f64)).max(8.0),
    ];
    let jitter = Normal::new(0.0, 0.4).expect("valid normal");
    BaseDraw {
        present,
        lane_speed,
        v0: std::array::from_fn(|_| idm.desired_speed * rng.random_range(0.95..1.05)),
        gap_factor: std::array::from_fn(|_| rng.random_range(0.85..1.15)),
        speed_jitter: std::array::from_fn(|_| jitter.sample(rng)),
        offset: std::array::from_fn(|_| rng.random_range(-0.3..0.3)),
        cruise: std::array::from_fn(|_| {
            (
                rng.random_range(0.0..0.4),
                std::f64::consts::TAU / rng.random_range(6.0..15.0),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        }),
        adjacent_lead_y: [rng.random_range(3.0..30.0), rng.random_range(3.0..30.0)],
    }
}

/// Lay out one lane's platoon (front to back). Returns the agents in order.
fn lane_platoon(
    slots: &[(Role, Option<f64>)],
    lane_x: f64,
    lane_speed: f64,
    base: &BaseDraw,
    idm: &IdmParams,
    first_index: usize,
) -> Vec<Agent> {
    let mut agents: Vec<Agent> = Vec::new();
    for &(role, anchor_y) in slots {
        let s = role.index();
        if !base.present[s] {
            continue;
        }
        let agent = match agents.last() {
            None => Agent {
                slot: s,
                lane_x,
                offset: base.offset[s],
                y: anchor_y.unwrap_or(0.0),
                v: lane_speed,
                v0: base.v0[s],
                control: {
                    let (amp, omega, phase) = base.cruise[s];
                    Control::Cruise { amp, omega, phase }
                },
                lateral: None,
                reaction: None,
            },
            Some(prev) => {
                let v = (prev.v + base.speed_jitter[s]).max(1.0);
                let gap = idm.equilibrium_gap(prev.v, base.v0[s]) * base.gap_factor[s];
                Agent {
                    slot: s,
                    lane_x,
                    offset: base.offset[s],
                    y: prev.y - VEHICLE_LENGTH - gap,
                    v,
                    v0: base.v0[s],
                    control: Control::Follow {
                        leader: first_index + agents.len() - 1,
                    },
                    lateral: None,
                    reaction: None,
                }
            }
        };
        agents.push(agent);
    }
    agents
}

/// Generate scene `index` with the given anomaly kind.
pub fn generate_scene(index: usize, kind: AnomalyKind, cfg: &SynthConfig) -> Result<(SceneTensor, GroundTruthLabel)> {
    let scene_seed = seed::derive_seed(cfg.seed, &format!("synth/scene/{index}"));
    let mut base_rng = seed::child_rng(scene_seed, "base");
    let mut anomaly_rng = seed::child_rng(scene_seed, "anomaly");
    let mut noise_rng = seed::child_rng(scene_seed, "noise");
    let idm = &cfg.idm;
    let mut base = draw_base(&mut base_rng, idm);
    if matches!(kind, AnomalyKind::SuddenBrake | AnomalyKind::FollowInstability) {
        base.present[Role::Front.index()] = true;
    }

    // Ego lane is anchored so that the ego starts at y = 0.
    let mut agents = Vec::new();
    let ego_lane = lane_platoon(
        &[(Role::Front, None), (Role::Ego, None), (Role::Rear, None)],
        0.0,
        base.lane_speed[1],
        &base,
        idm,
        0,
    );
    let ego_y = ego_lane.iter().find(|a| a.slot == Role::Ego.index()).map(|a| a.y).unwrap_or(0.0);
    agents.extend(ego_lane.into_iter().map(|mut a| {
        a.y -= ego_y;
        a
    }));
    for (k, (lane_x, front, rear)) in [
        (-LANE_WIDTH, Role::FrontLeft, Role::RearLeft),
        (LANE_WIDTH, Role::FrontRight, Role::RearRight),
    ]
    .into_iter()
    .enumerate()
    {
        let lead_y = base.adjacent_lead_y[k];
        let lane = lane_platoon(
            &[(front, Some(lead_y)), (rear, Some(-lead_y))],
            lane_x,
            base.lane_speed[k * 2],
            &base,
            idm,
            agents.len(),
        );
        agents.extend(lane);
    }

    let slot_index = |role: Role| agents.iter().position(|a| a.slot == role.index());
    let mut onset_frame = -1i64;
    match kind {
        AnomalyKind::None => {}
        AnomalyKind::SuddenBrake => {
            let i = slot_index(Role::Front).expect("front forced present");
            let ego = slot_index(Role::Ego).expect("ego always present");
            let onset = anomaly_rng.random_range(25..=32);
            let frames = anomaly_rng.random_range(14..=18);
            let decel = anomaly_rng.random_range(6.5..8.5);
            let reaction = anomaly_rng.random_range(10..=15);
            let gap_scale = anomaly_rng.random_range(0.4..0.6);
            let cruise = match agents[i].control {
                Control::Cruise { amp, omega, phase } => (amp, omega, phase),
                _ => (0.0, 1.0, 0.0),
            };
            agents[i].control = Control::Brake { base: cruise, onset, frames, decel };
            // The ego follows closely and reacts late.
            let gap = idm.equilibrium_gap(agents[i].v, agents[ego].v0) * gap_scale;
            let shift = (agents[i].y - VEHICLE_LENGTH - gap) - agents[ego].y;
            agents[ego].v = agents[i].v;
            agents[ego].reaction = Some((onset, reaction));
            for (k, a) in agents.iter_mut().enumerate() {
                if k != ego {
                    a.y -= shift;
                }
            }
            onset_frame = onset;
        }
        AnomalyKind::FollowInstability => {
            let front = slot_index(Role::Front).expect("front forced present");
            let ego = slot_index(Role::Ego).expect("ego always present");
            let onset = anomaly_rng.random_range(2..=6);
            let amp = anomaly_rng.random_range(2.2..3.0);
            let period = anomaly_rng.random_range(1.2..1.6);
            let gap_scale = anomaly_rng.random_range(0.5..0.65);
            // Tailgating at the front vehicle's speed, then oscillating.
            let lead = agents[front].clone();
            let gap = idm.equilibrium_gap(lead.v, agents[ego].v0) * gap_scale;
            let shift = (lead.y - VEHICLE_LENGTH - gap) - agents[ego].y;
            agents[ego].v = lead.v;
            agents[ego].control = Control::Oscillate {
                leader: front,
                onset,
                amp,
                omega: std::f64::consts::TAU / period,
            };
            // Keep the ego at the origin: move everything else instead.
            for (k, a) in agents.iter_mut().enumerate() {
                if k != ego {
                    a.y -= shift;
                }
            }
            onset_frame = onset;
        }
        AnomalyKind::LateralDrift => {
            let candidates: Vec<usize> = (0..agents.len()).collect();
            let i = candidates[anomaly_rng.random_range(0..candidates.len())];
            let onset = anomaly_rng.random_range(20..=26);
            let dur = anomaly_rng.random_range(20..=23);
            let d = anomaly_rng.random_range(1.7..2.2) * if anomaly_rng.random_bool(0.5) { 1.0 } else { -1.0 };
            agents[i].lateral = Some((onset, dur, d));
            onset_frame = onset;
        }
        AnomalyKind::AbruptLaneChange => {
            let i = anomaly_rng.random_range(0..agents.len());
            let onset = anomaly_rng.random_range(26..=32);
            let dur = anomaly_rng.random_range(10..=14);
            let d = LANE_WIDTH * if anomaly_rng.random_bool(0.5) { 1.0 } else { -1.0 };
            agents[i].lateral = Some((onset, dur, d));
            onset_frame = onset;
        }
    }

    let tracks = simulate(&mut agents, idm, cfg.noise_std, &mut noise_rng);
    let id = scene_id(index);
    let scene = to_ego_frame(id.clone(), format!("{id}-ego"), &tracks)?;
    let label = GroundTruthLabel {
        scene_id: id,
        is_anomaly: kind != AnomalyKind::None,
        kind,
        onset_frame,
    };
    Ok((scene, label))
}

fn scripted_accel(control: &Control, frame: i64, v: f64) -> Option<f64> {
    let t = frame as f64 * FRAME_DT;
    match *control {
        Control::Cruise { amp, omega, phase } => Some(amp * omega * (omega * t + phase).cos()),
        Control::Brake { base: (amp, omega, phase), onset, frames, decel } => Some(if frame < onset {
            amp * omega * (omega * t + phase).cos()
        } else if frame < onset + frames {
            if v > 0.0 {
                -decel
            } else {
                0.0
            }
        } else {
            0.0
        }),
        Control::Follow { .. } | Control::Oscillate { .. } => None,
    }
}

/// Explicit-Euler integration: `y[t+1] = y[t] + v[t]·dt` exactly, so the
/// recorded speed column is the position derivative.
fn simulate(
    agents: &mut [Agent],
    idm: &IdmParams,
    noise_std: f64,
    noise_rng: &mut seed::Rng,
) -> BTreeMap<Role, Vec<TrackPoint>> {
    let noise = Normal::new(0.0, noise_std.max(0.0)).expect("valid normal");
    let mut tracks: BTreeMap<Role, Vec<TrackPoint>> = agents
        .iter()
        .map(|a| (Role::from_index(a.slot).expect("slot"), Vec::with_capacity(SCENE_LEN)))
        .collect();
    let first = -(WARMUP_FRAMES as i64);
    for frame in first..SCENE_LEN as i64 {
        if frame >= 0 {
            for a in agents.iter() {
                let x = a.lateral_at(frame) + if noise_std > 0.0 { noise.sample(noise_rng) } else { 0.0 };
                tracks.get_mut(&Role::from_index(a.slot).expect("slot")).expect("track").push(TrackPoint {
                    frame_index: frame as u64,
                    x,
                    y: a.y,
                    v: a.v,
                    a: None,
                    lane_id: None,
                });
            }
        }
        let scripted: Vec<Option<f64>> = agents.iter().map(|a| scripted_accel(&a.control, frame, a.v)).collect();
        let accels: Vec<f64> = agents
            .iter()
            .zip(&scripted)
            .map(|(a, s)| match (a.control, s) {
                (_, Some(acc)) => *acc,
                _ if a.reaction.is_some_and(|(onset, n)| (onset..onset + n).contains(&frame)) => 0.0,
                (Control::Follow { leader }, None) => {
                    let l = &agents[leader];
                    idm.accel(a.v, a.v0, l.v, l.y - a.y - VEHICLE_LENGTH)
                }
                (Control::Oscillate { leader, onset, amp, omega }, None) => {
                    let base = scripted[leader].unwrap_or(0.0);
                    if frame < onset {
                        base
                    } else {
                        base + amp * (omega * (frame - onset) as f64 * FRAME_DT).cos()
                    }
                }
                _ => unreachable!("scripted controls always yield an acceleration"),
            })
            .collect();
        for (a, acc) in agents.iter_mut().zip(accels) {
            a.y += a.v * FRAME_DT;
            a.v = (a.v + acc * FRAME_DT).max(0.0);
        }
    }
    tracks
}
