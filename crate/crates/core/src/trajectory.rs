//! Demonstrations as (state, observation, action) sequences split into
//! object-centric subtask segments.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pose::{Pose, Rotation, Vec3};
use crate::randomize::Embodiment;

/// Length of a flattened [`Action`].
pub const ACTION_DIM: usize = 7;

macro_rules! string_id {
    ($name:ident) => {
        #[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(s: impl Into<String>) -> Self {
                Self(s.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_string())
            }
        }
    };
}

string_id!(ObjectId);
string_id!(SubtaskId);

#[derive(Debug, Error, PartialEq)]
pub enum TrajectoryError {
    #[error("demonstration has no timesteps")]
    EmptyDemonstration,
    #[error("expected {expected} world states (timesteps + 1), got {got}")]
    WorldCountMismatch { expected: usize, got: usize },
    #[error("subtask {index} ({id}) never terminated")]
    SubtaskNeverTerminated { index: usize, id: SubtaskId },
    #[error("no segments for subtask {0} in the pool")]
    EmptyPool(SubtaskId),
    #[error("reference object {0} missing from world state")]
    MissingObject(ObjectId),
    #[error("segments do not partition the timesteps: {0}")]
    BadPartition(String),
    #[error("value out of range: {0}")]
    OutOfRange(String),
}

/// Proprioceptive state: end-effector pose and scalar gripper opening in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EeState {
    pub pose: Pose,
    pub gripper_opening: f64,
}

/// Delta pose in the end-effector frame plus an absolute gripper command.
///
/// `rotation` is an axis-angle vector (radians). `gripper` is the commanded
/// opening: 0 closed, 1 open.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Action {
    pub translation: Vec3,
    pub rotation: Vec3,
    pub gripper: f64,
}

impl Action {
    /// Action moving from `from` to `to` (both world-frame controller poses).
    pub fn between(from: &Pose, to: &Pose, gripper: f64) -> Self {
        Self::from_delta(&from.delta_to(to), gripper)
    }

    pub fn from_delta(delta: &Pose, gripper: f64) -> Self {
        Self {
            translation: delta.translation,
            rotation: delta.rotation.to_rotation_vector(),
            gripper,
        }
    }

    pub fn hold(gripper: f64) -> Self {
        Self { gripper, ..Default::default() }
    }

    pub fn delta_pose(&self) -> Pose {
        Pose::new(Rotation::from_rotation_vector(&self.rotation), self.translation)
    }

    pub fn to_array(&self) -> [f64; ACTION_DIM] {
        let (t, r) = (&self.translation, &self.rotation);
        [t.x, t.y, t.z, r.x, r.y, r.z, self.gripper]
    }

    pub fn from_slice(v: &[f64]) -> Self {
        assert!(v.len() >= ACTION_DIM, "action slice too short");
        Self {
            translation: Vec3::new(v[0], v[1], v[2]),
            rotation: Vec3::new(v[3], v[4], v[5]),
            gripper: v[6],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.to_array().iter().all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timestep {
    pub state: EeState,
    pub observation: Vec<f64>,
    pub action: Action,
}

impl Timestep {
    /// Controller target commanded at this step, in the world frame.
    pub fn target_pose(&self) -> Pose {
        self.state.pose.compose(&self.action.delta_pose())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoSource {
    HumanSeed,
    Generated,
}

/// Half-open index range `[start_idx, end_idx)` solving one subtask relative to
/// one reference object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskSegment {
    pub start_idx: usize,
    pub end_idx: usize,
    pub subtask_id: SubtaskId,
    pub reference_object_id: ObjectId,
    /// World-frame pose of the reference object at `start_idx`.
    pub reference_object_pose: Pose,
}

impl SubtaskSegment {
    pub fn len(&self) -> usize {
        self.end_idx - self.start_idx
    }

    pub fn is_empty(&self) -> bool {
        self.end_idx == self.start_idx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Demonstration {
    timesteps: Vec<Timestep>,
    segments: Vec<SubtaskSegment>,
    pub embodiment: Embodiment,
    pub source: DemoSource,
}

impl Demonstration {
    /// Validates that `segments` partition `timesteps` contiguously.
    pub fn new(
        timesteps: Vec<Timestep>,
        segments: Vec<SubtaskSegment>,
        embodiment: Embodiment,
        source: DemoSource,
    ) -> Result<Self, TrajectoryError> {
        if timesteps.is_empty() {
            return Err(TrajectoryError::EmptyDemonstration);
        }
        check_partition(&segments, timesteps.len())?;
        for t in &timesteps {
            let g = t.state.gripper_opening;
            if !(0.0..=1.0).contains(&g) || !(0.0..=1.0).contains(&t.action.gripper) {
                return Err(TrajectoryError::OutOfRange(format!(
                    "gripper opening {g} / command {}",
                    t.action.gripper
                )));
            }
        }
        Ok(Self { timesteps, segments, embodiment, source })
    }

    pub fn timesteps(&self) -> &[Timestep] {
        &self.timesteps
    }

    pub(crate) fn timesteps_mut(&mut self) -> &mut [Timestep] {
        &mut self.timesteps
    }

    pub fn segments(&self) -> &[SubtaskSegment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.timesteps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps.is_empty()
    }

    /// The segment's controller-pose sequence: the end-effector pose at its
    /// first step followed by the target pose of every step.
    pub fn segment_waypoints(&self, seg: &SubtaskSegment) -> Vec<Pose> {
        let steps = &self.timesteps[seg.start_idx..seg.end_idx];
        std::iter::once(steps[0].state.pose)
            .chain(steps.iter().map(Timestep::target_pose))
            .collect()
    }

    /// Gripper commands aligned with the targets of [`Self::segment_waypoints`].
    pub fn segment_gripper_commands(&self, seg: &SubtaskSegment) -> Vec<f64> {
        self.timesteps[seg.start_idx..seg.end_idx]
            .iter()
            .map(|t| t.action.gripper)
            .collect()
    }
}

fn check_partition(segments: &[SubtaskSegment], len: usize) -> Result<(), TrajectoryError> {
    if segments.is_empty() {
        return Err(TrajectoryError::BadPartition("no segments".into()));
    }
    let mut cursor = 0;
    for s in segments {
        if s.start_idx != cursor || s.end_idx <= s.start_idx {
            return Err(TrajectoryError::BadPartition(format!(
                "segment {} spans [{}, {}) at cursor {cursor}",
                s.subtask_id, s.start_idx, s.end_idx
            )));
        }
        cursor = s.end_idx;
    }
    if cursor != len {
        return Err(TrajectoryError::BadPartition(format!("segments end at {cursor}, demo has {len} steps")));
    }
    Ok(())
}

/// Read access to object poses of a world snapshot.
pub trait ObjectPoses {
    fn object_pose(&self, id: &ObjectId) -> Option<Pose>;
}

/// Rule-based termination signal for one subtask.
pub struct SubtaskSignal<S> {
    pub subtask_id: SubtaskId,
    pub reference_object: ObjectId,
    pub terminated: Box<dyn Fn(&S) -> bool + Send + Sync>,
}

impl<S> fmt::Debug for SubtaskSignal<S> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SubtaskSignal")
            .field("subtask_id", &self.subtask_id)
            .field("reference_object", &self.reference_object)
            .finish_non_exhaustive()
    }
}

/// Splits a raw demonstration at the first state where each successive
/// termination signal fires.
///
/// `worlds[t]` is the world before step `t`; `worlds[len]` is the terminal
/// state. A boundary at `t` closes the current segment at `t` and opens the
/// next one there. The final segment always runs to the end.
pub fn segment_demonstration<S: ObjectPoses>(
    timesteps: Vec<Timestep>,
    worlds: &[S],
    signals: &[SubtaskSignal<S>],
    embodiment: Embodiment,
    source: DemoSource,
) -> Result<Demonstration, TrajectoryError> {
    let len = timesteps.len();
    if len == 0 {
        return Err(TrajectoryError::EmptyDemonstration);
    }
    if worlds.len() != len + 1 {
        return Err(TrajectoryError::WorldCountMismatch { expected: len + 1, got: worlds.len() });
    }
    let mut segments = Vec::with_capacity(signals.len());
    let mut start = 0;
    for (index, signal) in signals.iter().enumerate() {
        let last = index + 1 == signals.len();
        // non-final subtasks must leave at least one step for the next one
        let search_end = if last { len } else { len - 1 };
        let fired = (start + 1..=search_end).find(|&t| (signal.terminated)(&worlds[t]));
        let Some(t) = fired else {
            return Err(TrajectoryError::SubtaskNeverTerminated { index, id: signal.subtask_id.clone() });
        };
        let end = if last { len } else { t };
        let reference_object_pose = worlds[start]
            .object_pose(&signal.reference_object)
            .ok_or_else(|| TrajectoryError::MissingObject(signal.reference_object.clone()))?;
        segments.push(SubtaskSegment {
            start_idx: start,
            end_idx: end,
            subtask_id: signal.subtask_id.clone(),
            reference_object_id: signal.reference_object.clone(),
            reference_object_pose,
        });
        start = end;
    }
    Demonstration::new(timesteps, segments, embodiment, source)
}

/// A segment together with the index of the demonstration it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledSegment {
    pub demo_index: usize,
    pub segment: SubtaskSegment,
}

/// Every segment across `demos` that solves `subtask_id`.
pub fn segment_pool(demos: &[Demonstration], subtask_id: &SubtaskId) -> Result<Vec<PooledSegment>, TrajectoryError> {
    let pool: Vec<_> = demos
        .iter()
        .enumerate()
        .flat_map(|(demo_index, d)| {
            d.segments
                .iter()
                .filter(|s| &s.subtask_id == subtask_id)
                .map(move |s| PooledSegment { demo_index, segment: s.clone() })
        })
        .collect();
    if pool.is_empty() {
        return Err(TrajectoryError::EmptyPool(subtask_id.clone()));
    }
    Ok(pool)
}
