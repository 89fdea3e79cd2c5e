//! Kinematic tabletop world.
//!
//! The end effector follows pose commands exactly; grasping is a rigid
//! attachment triggered by gripper thresholds; released objects settle
//! instantly onto whatever support lies beneath them. Observations are
//! feature vectors expressed in the selected camera frame.

mod expert;
mod task;

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use expert::{record_expert_demo, ExpertRun, ScriptedExpert};
pub use task::{ObjectSpec, PlacementRegion, Predicate, Shape, SubtaskDef, TaskKind, TaskSpec, Thresholds};

use crate::pose::{Pose, Rotation, Vec3};
use crate::randomize::{map_gripper_to_scalar, CameraRig, EmbodimentSpec, SceneConfig, PLACEMENT_RETRIES, TEXTURE_COUNT};
use crate::trajectory::{Action, EeState, ObjectId, ObjectPoses, SubtaskSignal};

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("task config: {0}")]
    Config(String),
    #[error("scene is missing a placement for {0}")]
    MissingPlacement(ObjectId),
    #[error("placement of {0} lies outside the task region")]
    OutsideRegion(ObjectId),
    #[error("objects overlap and no separated placement found after {0} draws")]
    Overlap(usize),
    #[error("camera index {index} out of range for rig with {count} poses")]
    CameraIndex { index: usize, count: usize },
    #[error("expert failed to finish the task within {0} steps")]
    ExpertTimeout(usize),
    #[error(transparent)]
    Trajectory(#[from] crate::trajectory::TrajectoryError),
}

/// Held object and its fixed pose relative to the end effector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Attachment {
    pub object: ObjectId,
    pub relative: Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub objects: BTreeMap<ObjectId, Pose>,
    pub ee_pose: Pose,
    pub gripper_opening: f64,
    pub attached: Option<Attachment>,
    /// Absolute table surface height.
    pub table_height: f64,
    pub time: usize,
}

impl WorldState {
    pub fn is_attached(&self, id: &ObjectId) -> bool {
        self.attached.as_ref().is_some_and(|a| &a.object == id)
    }
}

impl ObjectPoses for WorldState {
    fn object_pose(&self, id: &ObjectId) -> Option<Pose> {
        self.objects.get(id).copied()
    }
}

/// Length of the observation vector for a task with `num_objects` objects.
pub fn observation_dim(num_objects: usize) -> usize {
    9 + 1 + 9 * num_objects + 3 + TEXTURE_COUNT + 1
}

/// A task bound to one embodiment.
#[derive(Debug, Clone)]
pub struct Simulator {
    task: Arc<TaskSpec>,
    embodiment: EmbodimentSpec,
}

impl Simulator {
    pub fn new(task: Arc<TaskSpec>, embodiment: EmbodimentSpec) -> Self {
        Self { task, embodiment }
    }

    /// Simulator for the scene's embodiment with its default spec.
    pub fn for_scene(task: Arc<TaskSpec>, scene: &SceneConfig) -> Self {
        Self::new(task, EmbodimentSpec::default_for(scene.embodiment))
    }

    pub fn task(&self) -> &TaskSpec {
        &self.task
    }

    pub fn task_arc(&self) -> &Arc<TaskSpec> {
        &self.task
    }

    pub fn embodiment(&self) -> &EmbodimentSpec {
        &self.embodiment
    }

    pub fn observation_dim(&self) -> usize {
        observation_dim(self.task.objects.len())
    }

    /// Places objects at the scene's placements resting on the (shifted) table,
    /// end effector at home, gripper open. Overlapping placements are redrawn
    /// inside the region.
    pub fn reset<R: Rng + ?Sized>(&self, scene: &SceneConfig, rng: &mut R) -> Result<WorldState, SimError> {
        let task = &self.task;
        let table = task.table_z + scene.table_height_delta;
        let mut objects = BTreeMap::new();
        for o in &task.objects {
            let p = scene.object_placements.get(&o.id).ok_or_else(|| SimError::MissingPlacement(o.id.clone()))?;
            if !task.region.contains_xy(&p.translation) {
                return Err(SimError::OutsideRegion(o.id.clone()));
            }
            objects.insert(o.id.clone(), rest_on(p, table + o.shape.half_height()));
        }
        if !task.placements_separated(&objects) {
            let mut fixed = None;
            for _ in 0..PLACEMENT_RETRIES {
                let candidate: BTreeMap<_, _> = task
                    .objects
                    .iter()
                    .map(|o| {
                        let r = &task.region;
                        let pose = Pose::from_xyz_yaw(
                            rng.random_range(r.x[0]..=r.x[1]),
                            rng.random_range(r.y[0]..=r.y[1]),
                            table + o.shape.half_height(),
                            rng.random_range(r.yaw[0]..=r.yaw[1]),
                        );
                        (o.id.clone(), pose)
                    })
                    .collect();
                if task.placements_separated(&candidate) {
                    fixed = Some(candidate);
                    break;
                }
            }
            objects = fixed.ok_or(SimError::Overlap(PLACEMENT_RETRIES))?;
        }
        Ok(WorldState {
            objects,
            ee_pose: self.embodiment.home_pose(),
            gripper_opening: 1.0,
            attached: None,
            table_height: table,
            time: 0,
        })
    }

    /// Applies one delta-pose action. Oversized or non-finite commands are
    /// clamped, never rejected.
    pub fn step(&self, state: &WorldState, action: &Action) -> WorldState {
        let th = &self.task.thresholds;
        let mut a = *action;
        if !a.is_finite() {
            log::warn!("non-finite action {action:?} replaced by hold");
            a = Action::hold(if action.gripper.is_finite() { action.gripper } else { state.gripper_opening });
        }
        let tn = a.translation.norm();
        if tn > th.max_step_translation {
            log::warn!("clamping translation step {tn:.4} m");
            a.translation *= th.max_step_translation / tn;
        }
        let rn = a.rotation.norm();
        if rn > th.max_step_rotation {
            log::warn!("clamping rotation step {rn:.4} rad");
            a.rotation *= th.max_step_rotation / rn;
        }
        let command = a.gripper.clamp(0.0, 1.0);

        let mut next = state.clone();
        next.time += 1;
        next.ee_pose = state.ee_pose.compose(&a.delta_pose());
        let prev = state.gripper_opening;
        let opening = prev + (command - prev).clamp(-th.gripper_rate, th.gripper_rate);
        next.gripper_opening = opening.clamp(0.0, 1.0);

        if next.attached.is_none() && prev >= th.grasp_close && next.gripper_opening < th.grasp_close {
            if let Some(id) = self.graspable_near(&next) {
                let relative = next.ee_pose.inverse().compose(&next.objects[&id]);
                next.attached = Some(Attachment { object: id, relative });
            }
        }
        if let Some(att) = &next.attached {
            let pose = next.ee_pose.compose(&att.relative);
            next.objects.insert(att.object.clone(), pose);
        }
        if next.attached.is_some() && prev <= th.release_open && next.gripper_opening > th.release_open {
            let released = next.attached.take().expect("checked above").object;
            self.settle(&mut next, &released);
        }
        next
    }

    /// Nearest movable object whose grasp point is within the grasp radius.
    fn graspable_near(&self, state: &WorldState) -> Option<ObjectId> {
        let ee = state.ee_pose.translation;
        self.task
            .objects
            .iter()
            .filter_map(|o| {
                let local = o.shape.grasp_point()?;
                let d = (state.objects[&o.id].transform_point(&local) - ee).norm();
                (d <= self.task.thresholds.grasp_radius + 1e-12).then_some((d, o.id.clone()))
            })
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .map(|(_, id)| id)
    }

    /// Drops `id` straight down onto the highest support under its center and
    /// levels it to its heading.
    fn settle(&self, state: &mut WorldState, id: &ObjectId) {
        let shape = self.task.shape(id).expect("settling a known object");
        let pose = state.objects[id];
        let bottom = pose.translation.z - shape.half_height();
        let c = pose.translation.xy();
        let mut support = state.table_height;
        for other in &self.task.objects {
            if &other.id == id {
                continue;
            }
            let op = state.objects[&other.id];
            let top = op.translation.z + other.shape.half_height();
            if top > bottom + 1e-9 {
                continue;
            }
            let d = c - op.translation.xy();
            let under = match (shape, other.shape) {
                (Shape::Ring { inner_radius, outer_radius, .. }, Shape::Post { radius, .. }) => {
                    // threads over the post when the axis is inside the hole
                    d.norm() >= inner_radius - radius && d.norm() < outer_radius + radius
                }
                (_, Shape::Cube { half_extent }) => {
                    let local = op.rotation.inverse().rotate(&Vec3::new(d.x, d.y, 0.0));
                    local.x.abs() <= half_extent && local.y.abs() <= half_extent
                }
                (_, Shape::Post { radius, .. }) => d.norm() <= radius,
                (_, Shape::Ring { outer_radius, .. }) => d.norm() <= outer_radius,
            };
            if under {
                support = support.max(top);
            }
        }
        let yaw = pose.rotation.yaw();
        let rested = Pose::from_xyz_yaw(pose.translation.x, pose.translation.y, support + shape.half_height(), yaw);
        state.objects.insert(id.clone(), rested);
    }

    pub fn ee_state(&self, state: &WorldState) -> EeState {
        let gripper = self.embodiment.gripper;
        let joints = gripper.joints_for_opening(state.gripper_opening);
        let opening = map_gripper_to_scalar(gripper, &joints).expect("joint vector built for this gripper");
        EeState { pose: state.ee_pose, gripper_opening: opening }
    }

    /// Feature observation in the scene's camera frame:
    /// ee (3 + 6), gripper (1), each object (3 + 6), light (3), texture one-hot, height delta.
    pub fn observe(&self, state: &WorldState, scene: &SceneConfig, rig: &CameraRig) -> Result<Vec<f64>, SimError> {
        let camera = rig
            .pose(scene.camera_index)
            .ok_or(SimError::CameraIndex { index: scene.camera_index, count: rig.num_poses() })?;
        let to_camera = camera.inverse();
        let mut obs = Vec::with_capacity(self.observation_dim());
        let push_pose = |obs: &mut Vec<f64>, world: &Pose| {
            let p = to_camera.compose(world);
            obs.extend_from_slice(p.translation.as_slice());
            obs.extend_from_slice(&p.rotation_6d());
        };
        push_pose(&mut obs, &state.ee_pose);
        obs.push(self.ee_state(state).gripper_opening);
        for o in &self.task.objects {
            push_pose(&mut obs, &state.objects[&o.id]);
        }
        obs.extend_from_slice(&scene.light_rgb);
        let mut onehot = [0.0; TEXTURE_COUNT];
        onehot[scene.texture_id.min(TEXTURE_COUNT - 1)] = 1.0;
        obs.extend_from_slice(&onehot);
        obs.push(scene.table_height_delta);
        Ok(obs)
    }

    pub fn check_predicate(&self, predicate: &Predicate, state: &WorldState) -> bool {
        check_predicate(&self.task, predicate, state)
    }

    pub fn check_success(&self, state: &WorldState) -> bool {
        self.task.success.iter().all(|p| self.check_predicate(p, state))
    }

    pub fn check_subtask(&self, index: usize, state: &WorldState) -> bool {
        self.task.subtasks.get(index).is_some_and(|s| self.check_predicate(&s.done, state))
    }

    /// Termination signals in subtask order, for segmentation.
    pub fn signals(&self) -> Vec<SubtaskSignal<WorldState>> {
        self.task
            .subtasks
            .iter()
            .map(|s| {
                let task = Arc::clone(&self.task);
                let done = s.done.clone();
                SubtaskSignal {
                    subtask_id: s.id.clone(),
                    reference_object: s.reference_object.clone(),
                    terminated: Box::new(move |w: &WorldState| check_predicate(&task, &done, w)),
                }
            })
            .collect()
    }
}

fn rest_on(p: &Pose, z: f64) -> Pose {
    Pose::new(Rotation::rot_z(p.rotation.yaw()), Vec3::new(p.translation.x, p.translation.y, z))
}

pub fn check_predicate(task: &TaskSpec, predicate: &Predicate, state: &WorldState) -> bool {
    let rest = task.thresholds.rest_tolerance;
    match predicate {
        Predicate::Grasped { object } => state.is_attached(object),
        Predicate::StackedOn { top, bottom } => {
            let (Some(ts), Some(bs)) = (task.shape(top), task.shape(bottom)) else {
                return false;
            };
            let Shape::Cube { half_extent: hb } = bs else {
                return false;
            };
            if state.is_attached(top) {
                return false;
            }
            let (tp, bp) = (state.objects[top].translation, state.objects[bottom].translation);
            let xy = (tp.xy() - bp.xy()).norm();
            let resting = (tp.z - (bp.z + hb + ts.half_height())).abs() <= rest;
            xy <= hb && resting
        }
        Predicate::RingOnPost { ring, post } => {
            let (Some(Shape::Ring { inner_radius, .. }), Some(Shape::Post { height, .. })) =
                (task.shape(ring), task.shape(post))
            else {
                return false;
            };
            if state.is_attached(ring) {
                return false;
            }
            let (rp, pp) = (state.objects[ring].translation, state.objects[post].translation);
            let post_top = pp.z + 0.5 * height;
            (rp.xy() - pp.xy()).norm() < inner_radius && rp.z < post_top
        }
    }
}
