//! Arm and gripper registry for cross-embodiment generation.
//!
//! Arms are modeled only by their base placement, home pose, reach sphere and
//! Cartesian workspace box; control happens at the end-effector pose level.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::RandomizeError;
use crate::pose::{Pose, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Embodiment {
    Panda,
    Ur5e,
    Iiwa,
    Kinova3,
    Jaco,
}

impl Embodiment {
    pub const ALL: [Embodiment; 5] =
        [Embodiment::Panda, Embodiment::Ur5e, Embodiment::Iiwa, Embodiment::Kinova3, Embodiment::Jaco];

    pub fn name(&self) -> &'static str {
        match self {
            Embodiment::Panda => "panda",
            Embodiment::Ur5e => "ur5e",
            Embodiment::Iiwa => "iiwa",
            Embodiment::Kinova3 => "kinova3",
            Embodiment::Jaco => "jaco",
        }
    }
}

impl fmt::Display for Embodiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Embodiment {
    type Err = RandomizeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Embodiment::ALL
            .into_iter()
            .find(|e| e.name() == s)
            .ok_or_else(|| RandomizeError::UnknownName(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gripper {
    PandaGripper,
    Robotiq85,
}

impl Gripper {
    /// Per-joint `(closed, open)` positions.
    pub fn joint_limits(&self) -> &'static [(f64, f64)] {
        match self {
            Gripper::PandaGripper => &[(0.0, 0.04), (0.0, -0.04)],
            // finger, left inner knuckle, left inner finger,
            // right outer knuckle, right inner knuckle, right inner finger
            Gripper::Robotiq85 => &[(0.8, 0.0), (0.8, 0.0), (-0.8, 0.0), (0.8, 0.0), (0.8, 0.0), (-0.8, 0.0)],
        }
    }

    pub fn num_joints(&self) -> usize {
        self.joint_limits().len()
    }

    /// Joint positions realizing a scalar opening in `[0, 1]`.
    pub fn joints_for_opening(&self, opening: f64) -> Vec<f64> {
        let u = opening.clamp(0.0, 1.0);
        self.joint_limits().iter().map(|&(closed, open)| closed + (open - closed) * u).collect()
    }
}

/// Collapses a gripper joint vector to one open/close degree of freedom:
/// mean normalized opening, 0 fully closed, 1 fully open.
pub fn map_gripper_to_scalar(gripper: Gripper, joints: &[f64]) -> Result<f64, RandomizeError> {
    let limits = gripper.joint_limits();
    if joints.len() != limits.len() {
        return Err(RandomizeError::GripperJointCount { expected: limits.len(), got: joints.len() });
    }
    let sum: f64 = joints
        .iter()
        .zip(limits)
        .map(|(&q, &(closed, open))| ((q - closed) / (open - closed)).clamp(0.0, 1.0))
        .sum();
    Ok(sum / limits.len() as f64)
}

/// Axis-aligned box, meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn is_empty(&self) -> bool {
        (0..3).any(|i| self.min[i] >= self.max[i])
    }

    /// Strict interior test.
    pub fn contains_strict(&self, p: &Vec3) -> bool {
        (0..3).all(|i| self.min[i] < p[i] && p[i] < self.max[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbodimentSpec {
    pub id: Embodiment,
    pub gripper: Gripper,
    pub base_pose: Pose,
    /// End-effector home pose relative to the base.
    pub home_offset: Pose,
    pub reach_radius: f64,
    pub workspace: Aabb,
}

impl EmbodimentSpec {
    pub fn default_for(id: Embodiment) -> Self {
        // (base x, home x, home z, reach)
        let (base_x, home_x, home_z, reach) = match id {
            Embodiment::Panda => (0.0, 0.45, 0.30, 0.855),
            Embodiment::Ur5e => (-0.02, 0.47, 0.28, 0.85),
            Embodiment::Iiwa => (0.03, 0.42, 0.32, 0.80),
            Embodiment::Kinova3 => (0.0, 0.46, 0.27, 0.90),
            Embodiment::Jaco => (0.02, 0.43, 0.29, 0.90),
        };
        let gripper = if id == Embodiment::Panda { Gripper::PandaGripper } else { Gripper::Robotiq85 };
        Self {
            id,
            gripper,
            base_pose: Pose::from_translation(Vec3::new(base_x, 0.0, 0.0)),
            home_offset: Pose::from_translation(Vec3::new(home_x, 0.0, home_z)),
            reach_radius: reach,
            workspace: Aabb { min: [0.15, -0.45, -0.2], max: [0.85, 0.45, 0.7] },
        }
    }

    pub fn validate(&self) -> Result<(), RandomizeError> {
        if !(self.reach_radius > 0.0) || self.workspace.is_empty() {
            return Err(RandomizeError::InvalidEmbodiment(self.id.to_string()));
        }
        Ok(())
    }

    pub fn home_pose(&self) -> Pose {
        self.base_pose.compose(&self.home_offset)
    }

    /// Point inside both the reach sphere and the workspace box (strictly).
    pub fn can_reach(&self, p: &Vec3) -> bool {
        (p - self.base_pose.translation).norm() < self.reach_radius && self.workspace.contains_strict(p)
    }
}

/// True iff every corner of `region` (x, y bounds times the z band) is
/// reachable. Both the reach sphere and the box are convex, so corners suffice.
pub fn compatible(spec: &EmbodimentSpec, x: [f64; 2], y: [f64; 2], z: [f64; 2]) -> bool {
    x.iter().all(|&xi| y.iter().all(|&yi| z.iter().all(|&zi| spec.can_reach(&Vec3::new(xi, yi, zi)))))
}
