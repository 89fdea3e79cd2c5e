//! Scripted pick-and-place expert used to record seed demonstrations.

use std::collections::VecDeque;

use rand::Rng;

use super::{Predicate, Shape, SimError, Simulator, WorldState};
use crate::augment::{build_bridge, BridgePlan};
use crate::pose::{Pose, Rotation, Vec3};
use crate::randomize::{CameraRig, SceneConfig};
use crate::trajectory::{segment_demonstration, Action, DemoSource, Demonstration, ObjectId, Timestep};

const PREGRASP_HEIGHT: f64 = 0.10;
const CLOSE_STEPS: usize = 8;
const OPEN_STEPS: usize = 5;
const PLACE_CLEARANCE: f64 = 0.003;
const RETREAT_HEIGHT: f64 = 0.08;
/// Depth of the ring center below the post top at release.
const RING_DROP_DEPTH: f64 = 0.01;

/// A target pose with a gripper command, reached by a bridged motion and then
/// held for `hold` extra steps.
#[derive(Debug, Clone, Copy)]
struct Waypoint {
    pose: Pose,
    gripper: f64,
    hold: usize,
}

impl Waypoint {
    fn go(pose: Pose, gripper: f64) -> Self {
        Self { pose, gripper, hold: 0 }
    }
}

/// Closed-loop state machine over the task's subtask list. Each subtask is
/// planned from the current world, executed open loop, then checked; an
/// unfinished subtask is replanned.
#[derive(Debug, Clone, Default)]
pub struct ScriptedExpert {
    stage: usize,
    queue: VecDeque<(Pose, f64)>,
    plan: BridgePlan,
}

impl ScriptedExpert {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn next_action(&mut self, sim: &Simulator, state: &WorldState) -> Action {
        if self.queue.is_empty() {
            let n = sim.task().subtasks.len();
            while self.stage < n && sim.check_subtask(self.stage, state) {
                self.stage += 1;
            }
            if self.stage == n {
                return Action::hold(1.0);
            }
            let waypoints = plan_subtask(sim, state, &sim.task().subtasks[self.stage].done);
            self.queue = expand(&state.ee_pose, &waypoints, &self.plan);
        }
        match self.queue.pop_front() {
            Some((target, gripper)) => Action::between(&state.ee_pose, &target, gripper),
            None => Action::hold(state.gripper_opening),
        }
    }
}

fn expand(start: &Pose, waypoints: &[Waypoint], plan: &BridgePlan) -> VecDeque<(Pose, f64)> {
    let mut out = VecDeque::new();
    let mut from = *start;
    for w in waypoints {
        let moving = from.translation_distance(&w.pose) > 1e-12 || from.rotation_distance(&w.pose) > 1e-12;
        if moving {
            out.extend(build_bridge(&from, &w.pose, plan).into_iter().map(|p| (p, w.gripper)));
        }
        out.extend(std::iter::repeat_n((w.pose, w.gripper), w.hold));
        from = w.pose;
    }
    out
}

fn plan_subtask(sim: &Simulator, state: &WorldState, done: &Predicate) -> Vec<Waypoint> {
    let task = sim.task();
    let safe_z = state.table_height + task.approach_clearance();
    match done {
        Predicate::Grasped { object } => plan_pick(sim, state, object),
        Predicate::StackedOn { top, bottom } => {
            let (Some(top_shape), Some(bottom_shape)) = (task.shape(top), task.shape(bottom)) else {
                return Vec::new();
            };
            let b = state.objects[bottom];
            let z = b.translation.z + bottom_shape.half_height() + top_shape.half_height() + PLACE_CLEARANCE;
            let target = Pose::new(Rotation::rot_z(b.rotation.yaw()), Vec3::new(b.translation.x, b.translation.y, z));
            plan_place(state, top, target, safe_z)
                .unwrap_or_else(|| plan_pick(sim, state, top))
        }
        Predicate::RingOnPost { ring, post } => {
            let Some(Shape::Post { height, .. }) = task.shape(post) else {
                return Vec::new();
            };
            let p = state.objects[post].translation;
            let ring_yaw = state.objects[ring].rotation.yaw();
            let z = p.z + 0.5 * height - RING_DROP_DEPTH;
            let target = Pose::new(Rotation::rot_z(ring_yaw), Vec3::new(p.x, p.y, z));
            plan_place(state, ring, target, safe_z + height)
                .unwrap_or_else(|| plan_pick(sim, state, ring))
        }
    }
}

fn plan_pick(sim: &Simulator, state: &WorldState, object: &ObjectId) -> Vec<Waypoint> {
    let Some(local) = sim.task().shape(object).and_then(|s| s.grasp_point()) else {
        return Vec::new();
    };
    let o = state.objects[object];
    let grasp = Pose::new(Rotation::rot_z(o.rotation.yaw()), o.transform_point(&local));
    let pregrasp = Pose::new(grasp.rotation, grasp.translation + Vec3::new(0.0, 0.0, PREGRASP_HEIGHT));
    vec![
        Waypoint::go(pregrasp, 1.0),
        Waypoint::go(grasp, 1.0),
        Waypoint { pose: grasp, gripper: 0.0, hold: CLOSE_STEPS },
    ]
}

/// Carries the held `object` so that it ends at `target`; `None` if it is not held.
fn plan_place(state: &WorldState, object: &ObjectId, target: Pose, safe_z: f64) -> Option<Vec<Waypoint>> {
    let att = state.attached.as_ref().filter(|a| &a.object == object)?;
    let goal = target.compose(&att.relative.inverse());
    let ee = state.ee_pose;
    let lift_z = safe_z.max(ee.translation.z).max(goal.translation.z);
    let lift = Pose::new(ee.rotation, Vec3::new(ee.translation.x, ee.translation.y, lift_z));
    let above = Pose::new(goal.rotation, Vec3::new(goal.translation.x, goal.translation.y, lift_z));
    let retreat = Pose::new(goal.rotation, goal.translation + Vec3::new(0.0, 0.0, RETREAT_HEIGHT));
    Some(vec![
        Waypoint::go(lift, 0.0),
        Waypoint::go(above, 0.0),
        Waypoint::go(goal, 0.0),
        Waypoint { pose: goal, gripper: 1.0, hold: OPEN_STEPS },
        Waypoint::go(retreat, 1.0),
    ])
}

/// A recorded expert episode with the world before every step and after the last.
#[derive(Debug, Clone)]
pub struct ExpertRun {
    pub demo: Demonstration,
    pub worlds: Vec<WorldState>,
}

/// Runs the scripted expert from a reset of `scene` until the task succeeds.
pub fn record_expert_demo<R: Rng + ?Sized>(
    sim: &Simulator,
    scene: &SceneConfig,
    rig: &CameraRig,
    rng: &mut R,
    max_steps: usize,
) -> Result<ExpertRun, SimError> {
    let mut world = sim.reset(scene, rng)?;
    let mut expert = ScriptedExpert::new();
    let mut timesteps = Vec::new();
    let mut worlds = vec![world.clone()];
    while !sim.check_success(&world) {
        if timesteps.len() == max_steps {
            return Err(SimError::ExpertTimeout(max_steps));
        }
        let action = expert.next_action(sim, &world);
        timesteps.push(Timestep { state: sim.ee_state(&world), observation: sim.observe(&world, scene, rig)?, action });
        world = sim.step(&world, &action);
        worlds.push(world.clone());
    }
    let demo = segment_demonstration(timesteps, &worlds, &sim.signals(), sim.embodiment().id, DemoSource::HumanSeed)?;
    Ok(ExpertRun { demo, worlds })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::randomize::{fibonacci_cap, sample_placements, CameraRigConfig, EmbodimentSpec};
    use crate::sim::{TaskKind, TaskSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    #[test]
    fn expert_solves_every_builtin_task() {
        let rig = fibonacci_cap(&CameraRigConfig::default()).unwrap();
        for kind in TaskKind::ALL {
            let task = Arc::new(TaskSpec::builtin(kind));
            for seed in 0..5 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let placements = sample_placements(&task, 0.0, &mut rng).unwrap();
                let scene = SceneConfig::canonical(placements);
                let sim = Simulator::for_scene(Arc::clone(&task), &scene);
                let run = record_expert_demo(&sim, &scene, &rig, &mut rng, 2000).unwrap();
                assert!(sim.check_success(run.worlds.last().unwrap()), "{kind} seed {seed}");
                assert_eq!(run.demo.segments().len(), task.subtasks.len());
                assert_eq!(run.worlds.len(), run.demo.len() + 1);
            }
        }
    }

    #[test]
    fn expert_motion_respects_step_bounds() {
        let rig = fibonacci_cap(&CameraRigConfig::default()).unwrap();
        let task = Arc::new(TaskSpec::builtin(TaskKind::Stack));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let scene = SceneConfig::canonical(sample_placements(&task, 0.0, &mut rng).unwrap());
        let sim = Simulator::new(task, EmbodimentSpec::default_for(scene.embodiment));
        let run = record_expert_demo(&sim, &scene, &rig, &mut rng, 2000).unwrap();
        let plan = BridgePlan::default();
        for t in run.demo.timesteps() {
            assert!(t.action.translation.norm() <= plan.max_pos_step + 1e-12);
            assert!(t.action.rotation.norm() <= plan.max_rot_step + 1e-12);
        }
    }
}
