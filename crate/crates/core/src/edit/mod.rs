//! Trajectory-level scene edits: speed, lane and heading changes, asset
//! insertion and removal, seeded trajectory perturbation, and the oriented-box
//! conflict check.

mod conflict;
mod script;

pub use conflict::{check_conflicts, obb_overlap, Conflict};
pub use script::{parse_edit_script, ScriptParseError};

use crate::geometry::sample_trajectory;
use crate::scene::{Pose, RigidAsset, Scene, TimedPose, Trajectory, EGO_ID};
use nalgebra::{UnitQuaternion, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum EditError {
    #[error("unknown asset {0}")]
    UnknownAsset(String),
    #[error("window [{t0}, {t1}] outside timeline [{start}, {end}]")]
    WindowOutOfRange { t0: f64, t1: f64, start: f64, end: f64 },
    #[error("degenerate window [{0}, {1}]")]
    DegenerateWindow(f64, f64),
    #[error("asset id {0} already exists")]
    DuplicateInsertId(String),
    #[error("speed factor must be positive, got {0}")]
    BadFactor(f64),
    #[error("ramp must be non-negative, got {0}")]
    BadRamp(f64),
}

/// What a command acts on.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Target {
    Ego,
    Asset(String),
}

impl Target {
    pub fn id(&self) -> &str {
        match self {
            Target::Ego => EGO_ID,
            Target::Asset(id) => id,
        }
    }

    pub fn parse(s: &str) -> Self {
        if s == EGO_ID {
            Target::Ego
        } else {
            Target::Asset(s.to_string())
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum EditCommand {
    SpeedChange { target: Target, factor: f64, window: (f64, f64) },
    /// Positive offset moves toward the vehicle's local left.
    LaneShift { target: Target, offset: f64, ramp: f64 },
    HeadingChange { target: Target, yaw_delta: f64, window: (f64, f64) },
    Insert { asset: Box<RigidAsset>, trajectory: Trajectory },
    Remove { id: String },
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct EditScript {
    pub commands: Vec<EditCommand>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub lateral_range: f64,
    pub vertical_range: f64,
    pub heading_range: f64,
    pub seed: u64,
}

impl PerturbationSpec {
    pub fn zero(seed: u64) -> Self {
        Self {
            lateral_range: 0.0,
            vertical_range: 0.0,
            heading_range: 0.0,
            seed,
        }
    }
}

fn check_window(window: (f64, f64), timeline: &[f64]) -> Result<(), EditError> {
    let (t0, t1) = window;
    if !(t1 > t0) {
        return Err(EditError::DegenerateWindow(t0, t1));
    }
    let start = timeline.first().copied().unwrap_or(0.0);
    let end = timeline.last().copied().unwrap_or(0.0);
    if t0 < start || t1 > end {
        return Err(EditError::WindowOutOfRange { t0, t1, start, end });
    }
    Ok(())
}

/// Retimes the path inside `window` so it is traversed `factor` times as fast.
///
/// Output time `t` in the window maps to path time `t0 + factor·(t − t0)`;
/// after the window the path continues from the reached point with the
/// original timing. Path times past the last sample clamp to it.
/// The output is sampled at `timeline`.
pub fn speed_change(
    traj: &Trajectory,
    factor: f64,
    window: (f64, f64),
    timeline: &[f64],
) -> Result<Trajectory, EditError> {
    let (t0, t1) = window;
    if !(t1 > t0) {
        return Err(EditError::DegenerateWindow(t0, t1));
    }
    if !(factor > 0.0) {
        return Err(EditError::BadFactor(factor));
    }
    let reached = t0 + factor * (t1 - t0);
    let path_time = |t: f64| -> f64 {
        if t < t0 {
            t
        } else if t <= t1 {
            t0 + factor * (t - t0)
        } else {
            reached + (t - t1)
        }
    };
    Ok(Trajectory::new(
        traj.asset_id.clone(),
        timeline
            .iter()
            .map(|&t| TimedPose {
                time: t,
                pose: sample_trajectory(traj, path_time(t)),
            })
            .collect(),
    ))
}

/// Moves every pose `s(t)·offset` along its own local +y axis, where `s`
/// ramps linearly from 0 to 1 over the first `ramp` seconds.
pub fn lane_shift(traj: &Trajectory, offset: f64, ramp: f64) -> Result<Trajectory, EditError> {
    if !(ramp >= 0.0) {
        return Err(EditError::BadRamp(ramp));
    }
    if offset == 0.0 {
        return Ok(traj.clone());
    }
    let start = traj.start_time();
    let samples = traj
        .samples
        .iter()
        .map(|s| {
            let w = if ramp == 0.0 {
                1.0
            } else {
                ((s.time - start) / ramp).clamp(0.0, 1.0)
            };
            let left = s.pose.rotation * Vector3::y();
            TimedPose {
                time: s.time,
                pose: Pose::new(s.pose.rotation, s.pose.translation + left * (w * offset)),
            }
        })
        .collect();
    Ok(Trajectory::new(traj.asset_id.clone(), samples))
}

/// Rigidly rotates the part of the path from `window.0` onward by `yaw_delta`
/// about the window-start position. A sample is inserted at the pivot when
/// it falls between existing samples.
pub fn heading_change(
    traj: &Trajectory,
    yaw_delta: f64,
    window: (f64, f64),
) -> Result<Trajectory, EditError> {
    let (t0, t1) = window;
    if !(t1 > t0) {
        return Err(EditError::DegenerateWindow(t0, t1));
    }
    if yaw_delta == 0.0 {
        return Ok(traj.clone());
    }
    let pivot_pose = sample_trajectory(traj, t0);
    let pivot = pivot_pose.translation;
    let rot = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw_delta);
    let turn = |p: &Pose| -> Pose {
        Pose::new(
            UnitQuaternion::new_normalize(rot.quaternion() * p.rotation.quaternion()),
            pivot + rot * (p.translation - pivot),
        )
    };
    let mut samples = Vec::with_capacity(traj.samples.len() + 1);
    let inside = t0 > traj.start_time() && t0 < traj.end_time();
    let has_pivot = traj.samples.iter().any(|s| s.time == t0);
    for s in &traj.samples {
        if inside && !has_pivot && s.time > t0 && samples.last().is_none_or(|l: &TimedPose| l.time < t0) {
            samples.push(TimedPose {
                time: t0,
                pose: turn(&pivot_pose),
            });
        }
        samples.push(if s.time >= t0 {
            TimedPose {
                time: s.time,
                pose: turn(&s.pose),
            }
        } else {
            *s
        });
    }
    Ok(Trajectory::new(traj.asset_id.clone(), samples))
}

/// Adds `asset` with trajectory `traj`; returns the new scene and the
/// conflicts present after insertion.
pub fn insert_asset(
    scene: &Scene,
    asset: RigidAsset,
    traj: Trajectory,
) -> Result<(Scene, Vec<Conflict>), EditError> {
    if asset.id == EGO_ID || scene.asset(&asset.id).is_some() {
        return Err(EditError::DuplicateInsertId(asset.id));
    }
    let mut out = scene.clone();
    let mut traj = traj;
    traj.asset_id = asset.id.clone();
    out.assets.push(asset);
    out.trajectories.push(traj);
    let conflicts = check_conflicts(&out);
    Ok((out, conflicts))
}

pub fn remove_asset(scene: &Scene, id: &str) -> Result<Scene, EditError> {
    if scene.asset(id).is_none() {
        return Err(EditError::UnknownAsset(id.into()));
    }
    let mut out = scene.clone();
    out.assets.retain(|a| a.id != id);
    out.trajectories.retain(|t| t.asset_id != id);
    Ok(out)
}

/// Applies one δ per trajectory: a lateral lane shift (ramp 0), a world +z
/// offset, and a rigid heading change about the trajectory's first sample.
/// Each component is drawn uniformly from `[−range, range]` in that order
/// from a single stream seeded by `spec.seed`.
pub fn perturb_trajectories(trajs: &[Trajectory], spec: &PerturbationSpec) -> Vec<Trajectory> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut draw = |range: f64| -> f64 { (rng.random::<f64>() * 2.0 - 1.0) * range };
    trajs
        .iter()
        .map(|traj| {
            let lateral = draw(spec.lateral_range);
            let vertical = draw(spec.vertical_range);
            let heading = draw(spec.heading_range);
            let mut t = lane_shift(traj, lateral, 0.0).expect("ramp 0 is valid");
            if vertical != 0.0 {
                for s in &mut t.samples {
                    s.pose.translation.z += vertical;
                }
            }
            if heading != 0.0 && !t.samples.is_empty() {
                let start = t.start_time();
                let end = t.end_time().max(start + 1.0);
                t = heading_change(&t, heading, (start, end)).expect("window is nondegenerate");
            }
            t
        })
        .collect()
}

/// Applies `script` to a copy of `scene`, command by command.
pub fn apply_edit_script(scene: &Scene, script: &EditScript) -> Result<Scene, EditError> {
    let mut out = scene.clone();
    for cmd in &script.commands {
        match cmd {
            EditCommand::SpeedChange { target, factor, window } => {
                check_window(*window, &out.timeline)?;
                let timeline = out.timeline.clone();
                let traj = traj_mut(&mut out, target)?;
                *traj = speed_change(traj, *factor, *window, &timeline)?;
            }
            EditCommand::LaneShift { target, offset, ramp } => {
                let traj = traj_mut(&mut out, target)?;
                *traj = lane_shift(traj, *offset, *ramp)?;
            }
            EditCommand::HeadingChange { target, yaw_delta, window } => {
                check_window(*window, &out.timeline)?;
                let traj = traj_mut(&mut out, target)?;
                *traj = heading_change(traj, *yaw_delta, *window)?;
            }
            EditCommand::Insert { asset, trajectory } => {
                out = insert_asset(&out, (**asset).clone(), trajectory.clone())?.0;
            }
            EditCommand::Remove { id } => {
                out = remove_asset(&out, id)?;
            }
        }
    }
    Ok(out)
}

fn traj_mut<'a>(scene: &'a mut Scene, target: &Target) -> Result<&'a mut Trajectory, EditError> {
    if let Target::Asset(id) = target {
        if scene.asset(id).is_none() {
            return Err(EditError::UnknownAsset(id.clone()));
        }
    }
    scene
        .trajectory_mut(target.id())
        .ok_or_else(|| EditError::UnknownAsset(target.id().to_string()))
}
