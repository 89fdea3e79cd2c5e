//! Declarative task definitions: objects, placement region, subtask order,
//! termination and success predicates.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::SimError;
use crate::pose::{Pose, Vec3};
use crate::trajectory::{ObjectId, SubtaskId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Stack,
    StackThree,
    SquarePost,
}

impl TaskKind {
    pub const ALL: [TaskKind; 3] = [TaskKind::Stack, TaskKind::StackThree, TaskKind::SquarePost];

    pub fn name(&self) -> &'static str {
        match self {
            TaskKind::Stack => "stack",
            TaskKind::StackThree => "stack_three",
            TaskKind::SquarePost => "square_post",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskKind::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| SimError::UnknownTask(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Shape {
    /// Axis-aligned (in its own frame) cube, grasped at its center.
    Cube { half_extent: f64 },
    /// Flat ring with a handle sticking out along the ring's +x axis.
    Ring { inner_radius: f64, outer_radius: f64, half_height: f64, handle_length: f64 },
    /// Fixed vertical post, not graspable.
    Post { radius: f64, height: f64 },
}

impl Shape {
    pub fn half_height(&self) -> f64 {
        match *self {
            Shape::Cube { half_extent } => half_extent,
            Shape::Ring { half_height, .. } => half_height,
            Shape::Post { height, .. } => 0.5 * height,
        }
    }

    /// Radius of a disc covering the footprint.
    pub fn footprint_radius(&self) -> f64 {
        match *self {
            Shape::Cube { half_extent } => half_extent * std::f64::consts::SQRT_2,
            Shape::Ring { outer_radius, handle_length, .. } => outer_radius + handle_length,
            Shape::Post { radius, .. } => radius,
        }
    }

    /// Grasp point in the object frame, if graspable.
    pub fn grasp_point(&self) -> Option<Vec3> {
        match *self {
            Shape::Cube { .. } => Some(Vec3::zeros()),
            Shape::Ring { outer_radius, handle_length, .. } => {
                Some(Vec3::new(outer_radius + 0.5 * handle_length, 0.0, 0.0))
            }
            Shape::Post { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub id: ObjectId,
    pub shape: Shape,
}

/// Where objects may be placed: xy bounds (meters) and yaw range (radians).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlacementRegion {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub yaw: [f64; 2],
    /// Extra gap required between object footprints.
    pub min_gap: f64,
}

impl PlacementRegion {
    pub fn contains_xy(&self, p: &Vec3) -> bool {
        let eps = 1e-9;
        self.x[0] - eps <= p.x && p.x <= self.x[1] + eps && self.y[0] - eps <= p.y && p.y <= self.y[1] + eps
    }
}

/// Pure geometric predicate over a world state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Predicate {
    Grasped { object: ObjectId },
    /// `top` rests on `bottom`, centered within `bottom`'s half extent, released.
    StackedOn { top: ObjectId, bottom: ObjectId },
    /// Ring encircles the post axis below the post top, released.
    RingOnPost { ring: ObjectId, post: ObjectId },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskDef {
    pub id: SubtaskId,
    pub reference_object: ObjectId,
    pub done: Predicate,
}

/// Gripper and motion thresholds of the kinematic world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    /// Opening below which a grasp closes on a nearby object.
    pub grasp_close: f64,
    /// Opening above which a held object is released.
    pub release_open: f64,
    /// Max distance between end effector and grasp point for attachment.
    pub grasp_radius: f64,
    /// Max change of gripper opening per step.
    pub gripper_rate: f64,
    pub max_step_translation: f64,
    pub max_step_rotation: f64,
    /// Vertical slack for resting-contact checks.
    pub rest_tolerance: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            grasp_close: 0.1,
            release_open: 0.5,
            grasp_radius: 0.01,
            gripper_rate: 0.2,
            max_step_translation: 0.05,
            max_step_rotation: 0.2,
            rest_tolerance: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub objects: Vec<ObjectSpec>,
    pub region: PlacementRegion,
    pub subtasks: Vec<SubtaskDef>,
    /// All must hold for success.
    pub success: Vec<Predicate>,
    /// Nominal table surface height in the robot base frame.
    #[serde(default)]
    pub table_z: f64,
    #[serde(default)]
    pub thresholds: Thresholds,
}

impl TaskSpec {
    pub fn builtin(kind: TaskKind) -> Self {
        let cube = |id: &str, h: f64| ObjectSpec { id: id.into(), shape: Shape::Cube { half_extent: h } };
        let grasp = |s: &str, o: &str| SubtaskDef {
            id: s.into(),
            reference_object: o.into(),
            done: Predicate::Grasped { object: o.into() },
        };
        let place = |s: &str, top: &str, bottom: &str| SubtaskDef {
            id: s.into(),
            reference_object: bottom.into(),
            done: Predicate::StackedOn { top: top.into(), bottom: bottom.into() },
        };
        let yaw = [-std::f64::consts::FRAC_PI_6, std::f64::consts::FRAC_PI_6];
        match kind {
            TaskKind::Stack => Self {
                kind,
                objects: vec![cube("cube_a", 0.02), cube("cube_b", 0.025)],
                region: PlacementRegion { x: [0.42, 0.62], y: [-0.15, 0.15], yaw, min_gap: 0.03 },
                subtasks: vec![grasp("stack/grasp_a", "cube_a"), place("stack/place_a_on_b", "cube_a", "cube_b")],
                success: vec![Predicate::StackedOn { top: "cube_a".into(), bottom: "cube_b".into() }],
                table_z: 0.0,
                thresholds: Thresholds::default(),
            },
            TaskKind::StackThree => Self {
                kind,
                objects: vec![cube("cube_a", 0.02), cube("cube_b", 0.025), cube("cube_c", 0.02)],
                region: PlacementRegion { x: [0.40, 0.64], y: [-0.18, 0.18], yaw, min_gap: 0.03 },
                subtasks: vec![
                    grasp("stack_three/grasp_a", "cube_a"),
                    place("stack_three/place_a_on_b", "cube_a", "cube_b"),
                    grasp("stack_three/grasp_c", "cube_c"),
                    place("stack_three/place_c_on_a", "cube_c", "cube_a"),
                ],
                success: vec![
                    Predicate::StackedOn { top: "cube_a".into(), bottom: "cube_b".into() },
                    Predicate::StackedOn { top: "cube_c".into(), bottom: "cube_a".into() },
                ],
                table_z: 0.0,
                thresholds: Thresholds::default(),
            },
            TaskKind::SquarePost => Self {
                kind,
                objects: vec![
                    ObjectSpec {
                        id: "ring".into(),
                        shape: Shape::Ring { inner_radius: 0.03, outer_radius: 0.045, half_height: 0.01, handle_length: 0.04 },
                    },
                    ObjectSpec { id: "post".into(), shape: Shape::Post { radius: 0.012, height: 0.10 } },
                ],
                region: PlacementRegion { x: [0.40, 0.64], y: [-0.18, 0.18], yaw, min_gap: 0.03 },
                subtasks: vec![
                    grasp("square_post/grasp_ring", "ring"),
                    SubtaskDef {
                        id: "square_post/insert".into(),
                        reference_object: "post".into(),
                        done: Predicate::RingOnPost { ring: "ring".into(), post: "post".into() },
                    },
                ],
                success: vec![Predicate::RingOnPost { ring: "ring".into(), post: "post".into() }],
                table_z: 0.0,
                thresholds: Thresholds::default(),
            },
        }
    }

    /// Loads a task definition from TOML.
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        let spec: TaskSpec = toml::from_str(text).map_err(|e| SimError::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let fail = |m: String| Err(SimError::Config(m));
        if self.objects.is_empty() || self.subtasks.is_empty() || self.success.is_empty() {
            return fail("task needs objects, subtasks and a success predicate".into());
        }
        let r = &self.region;
        if !(r.x[0] <= r.x[1] && r.y[0] <= r.y[1] && r.yaw[0] <= r.yaw[1]) {
            return fail("placement region bounds must be ordered".into());
        }
        let mut ids: Vec<&ObjectId> = self.objects.iter().map(|o| &o.id).collect();
        ids.sort();
        ids.dedup();
        if ids.len() != self.objects.len() {
            return fail("duplicate object ids".into());
        }
        for s in &self.subtasks {
            if self.object(&s.reference_object).is_none() {
                return fail(format!("subtask {} references unknown object {}", s.id, s.reference_object));
            }
        }
        for p in self.subtasks.iter().map(|s| &s.done).chain(&self.success) {
            for id in p.objects() {
                if self.object(id).is_none() {
                    return fail(format!("predicate references unknown object {id}"));
                }
            }
        }
        Ok(())
    }

    pub fn object(&self, id: &ObjectId) -> Option<&ObjectSpec> {
        self.objects.iter().find(|o| &o.id == id)
    }

    pub fn shape(&self, id: &ObjectId) -> Option<Shape> {
        self.object(id).map(|o| o.shape)
    }

    /// Vertical room above the table used by approach and lift motions.
    pub fn approach_clearance(&self) -> f64 {
        let tallest = self.objects.iter().map(|o| 2.0 * o.shape.half_height()).fold(0.0, f64::max);
        tallest + 0.15
    }

    /// Footprints pairwise separated by at least `region.min_gap`.
    pub fn placements_separated(&self, placements: &BTreeMap<ObjectId, Pose>) -> bool {
        for (i, a) in self.objects.iter().enumerate() {
            for b in &self.objects[i + 1..] {
                let (Some(pa), Some(pb)) = (placements.get(&a.id), placements.get(&b.id)) else {
                    return false;
                };
                let d = (pa.translation.xy() - pb.translation.xy()).norm();
                if d < a.shape.footprint_radius() + b.shape.footprint_radius() + self.region.min_gap {
                    return false;
                }
            }
        }
        true
    }
}

impl Predicate {
    pub fn objects(&self) -> Vec<&ObjectId> {
        match self {
            Predicate::Grasped { object } => vec![object],
            Predicate::StackedOn { top, bottom } => vec![top, bottom],
            Predicate::RingOnPost { ring, post } => vec![ring, post],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_validate() {
        for kind in TaskKind::ALL {
            let t = TaskSpec::builtin(kind);
            t.validate().unwrap();
            assert_eq!(t.kind.name().parse::<TaskKind>().unwrap(), kind);
        }
    }

    #[test]
    fn toml_round_trip() {
        let t = TaskSpec::builtin(TaskKind::SquarePost);
        let text = toml::to_string(&t).unwrap();
        assert_eq!(TaskSpec::from_toml(&text).unwrap(), t);
    }

    #[test]
    fn invalid_reference_rejected() {
        let mut t = TaskSpec::builtin(TaskKind::Stack);
        t.subtasks[0].reference_object = "ghost".into();
        assert!(t.validate().is_err());
    }
}
