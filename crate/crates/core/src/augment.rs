//! Trajectory augmentation: re-anchor seed subtask segments to new object
//! poses and stitch them into continuous episodes.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::pose::Pose;
use crate::randomize::{
    sample_placements, sample_scene, CameraRig, CameraScheduler, Factor, RandomizationConfig, RandomizeError, SceneConfig,
};
use crate::sim::{record_expert_demo, SimError, Simulator, TaskSpec, WorldState};
use crate::trajectory::{
    segment_pool, Action, DemoSource, Demonstration, PooledSegment, SubtaskId, SubtaskSegment, Timestep, TrajectoryError,
};

/// Position weight (per meter) of the segment selection distance.
pub const SELECT_POSITION_WEIGHT: f64 = 1.0;
/// Rotation weight (per radian) of the segment selection distance.
pub const SELECT_ROTATION_WEIGHT: f64 = 0.1;
/// Step budget for a scripted seed demonstration.
pub const SEED_MAX_STEPS: usize = 2000;

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error(transparent)]
    Trajectory(#[from] TrajectoryError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Randomize(#[from] RandomizeError),
    #[error("invalid bridge plan: {0}")]
    InvalidPlan(String),
}

/// Step bounds for interpolation segments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BridgePlan {
    /// Lower bound on the number of steps.
    pub num_steps: usize,
    pub max_pos_step: f64,
    pub max_rot_step: f64,
}

impl Default for BridgePlan {
    fn default() -> Self {
        Self { num_steps: 1, max_pos_step: 0.01, max_rot_step: 0.05 }
    }
}

impl BridgePlan {
    pub fn validate(&self) -> Result<(), AugmentError> {
        if self.num_steps == 0 || !(self.max_pos_step > 0.0) || !(self.max_rot_step > 0.0) {
            return Err(AugmentError::InvalidPlan(format!("{self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMode {
    /// Segment whose reference object pose is closest to the new pose.
    #[default]
    Nearest,
    /// Uniformly random segment.
    Uniform,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub bridge: BridgePlan,
    pub selection: SelectionMode,
}

/// Maps every waypoint from the source object frame to the new one:
/// `new ∘ src⁻¹ ∘ p`.
pub fn transform_segment(seg: &[Pose], src_object_pose: &Pose, new_object_pose: &Pose) -> Vec<Pose> {
    let m = new_object_pose.compose(&src_object_pose.inverse());
    seg.iter().map(|p| m.compose(p)).collect()
}

/// Weighted distance used to pick a source segment.
pub fn selection_distance(a: &Pose, b: &Pose) -> f64 {
    SELECT_POSITION_WEIGHT * a.translation_distance(b) + SELECT_ROTATION_WEIGHT * a.rotation_distance(b)
}

/// Index into `pool` of the chosen source segment.
pub fn select_source_segment<R: Rng + ?Sized>(
    pool: &[PooledSegment],
    new_object_pose: &Pose,
    mode: SelectionMode,
    rng: &mut R,
) -> Result<usize, TrajectoryError> {
    if pool.is_empty() {
        return Err(TrajectoryError::EmptyPool(SubtaskId::new("")));
    }
    Ok(match mode {
        SelectionMode::Uniform => rng.random_range(0..pool.len()),
        SelectionMode::Nearest => {
            let mut best = (0, f64::INFINITY);
            for (i, p) in pool.iter().enumerate() {
                let d = selection_distance(&p.segment.reference_object_pose, new_object_pose);
                // strict comparison keeps the lowest index on ties
                if d < best.1 {
                    best = (i, d);
                }
            }
            best.0
        }
    })
}

/// Interpolated poses from `from` (exclusive) to `to` (inclusive) with every
/// step inside the plan's bounds. The last pose is `to` exactly.
pub fn build_bridge(from: &Pose, to: &Pose, plan: &BridgePlan) -> Vec<Pose> {
    let steps = |d: f64, max: f64| (d / max - 1e-9).ceil().max(0.0) as usize;
    let n = plan
        .num_steps
        .max(1)
        .max(steps(from.translation_distance(to), plan.max_pos_step))
        .max(steps(from.rotation_distance(to), plan.max_rot_step));
    (1..=n)
        .map(|k| {
            if k == n {
                *to
            } else {
                from.interpolate(to, k as f64 / n as f64).expect("fraction within [0, 1]")
            }
        })
        .collect()
}

/// A successful generated episode with the world before every step and after the last.
#[derive(Debug, Clone)]
pub struct GeneratedEpisode {
    pub demo: Demonstration,
    pub worlds: Vec<WorldState>,
}

impl GeneratedEpisode {
    /// Recomputes observations for a different scene labeling (camera index).
    pub fn relabel(&mut self, sim: &Simulator, scene: &SceneConfig, rig: &CameraRig) -> Result<(), SimError> {
        let obs = self.worlds[..self.demo.len()]
            .iter()
            .map(|w| sim.observe(w, scene, rig))
            .collect::<Result<Vec<_>, _>>()?;
        for (t, o) in self.demo.timesteps_mut().iter_mut().zip(obs) {
            t.observation = o;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureReason {
    /// A transformed waypoint lies outside the embodiment's reach.
    Unreachable,
    /// The subtask's termination predicate did not hold after execution.
    SubtaskIncomplete,
    /// All subtasks ran but the task success predicate is false.
    TaskIncomplete,
}

#[derive(Debug, Clone)]
pub enum EpisodeOutcome {
    Success(GeneratedEpisode),
    Failure { subtask: usize, reason: FailureReason },
}

impl EpisodeOutcome {
    pub fn is_success(&self) -> bool {
        matches!(self, EpisodeOutcome::Success(_))
    }
}

struct Recorder<'a> {
    sim: &'a Simulator,
    scene: &'a SceneConfig,
    rig: &'a CameraRig,
    world: WorldState,
    timesteps: Vec<Timestep>,
    worlds: Vec<WorldState>,
}

impl Recorder<'_> {
    fn exec(&mut self, target: &Pose, gripper: f64) -> Result<(), SimError> {
        let action = Action::between(&self.world.ee_pose, target, gripper);
        let observation = self.sim.observe(&self.world, self.scene, self.rig)?;
        self.timesteps.push(Timestep { state: self.sim.ee_state(&self.world), observation, action });
        self.world = self.sim.step(&self.world, &action);
        self.worlds.push(self.world.clone());
        Ok(())
    }
}

/// Builds one episode for `scene` by re-anchoring seed segments subtask by
/// subtask and executing them in the simulator.
pub fn generate_episode<R: Rng + ?Sized>(
    sim: &Simulator,
    seeds: &[Demonstration],
    scene: &SceneConfig,
    rig: &CameraRig,
    config: &AugmentConfig,
    rng: &mut R,
) -> Result<EpisodeOutcome, AugmentError> {
    config.bridge.validate()?;
    let world = sim.reset(scene, rng)?;
    let mut rec = Recorder { sim, scene, rig, world: world.clone(), timesteps: Vec::new(), worlds: vec![world] };
    let mut gripper = rec.world.gripper_opening;
    let mut segments = Vec::new();

    for (index, subtask) in sim.task().subtasks.iter().enumerate() {
        let start_idx = rec.timesteps.len();
        let object_pose = rec.world.objects[&subtask.reference_object];
        let pool = segment_pool(seeds, &subtask.id)?;
        let chosen = &pool[select_source_segment(&pool, &object_pose, config.selection, rng)
            .map_err(|_| TrajectoryError::EmptyPool(subtask.id.clone()))?];
        let source = &seeds[chosen.demo_index];
        let waypoints = source.segment_waypoints(&chosen.segment);
        let commands = source.segment_gripper_commands(&chosen.segment);
        let moved = transform_segment(&waypoints, &chosen.segment.reference_object_pose, &object_pose);
        if !moved.iter().all(|p| sim.embodiment().can_reach(&p.translation)) {
            return Ok(EpisodeOutcome::Failure { subtask: index, reason: FailureReason::Unreachable });
        }

        let ee = rec.world.ee_pose;
        if ee.translation_distance(&moved[0]) > 1e-12 || ee.rotation_distance(&moved[0]) > 1e-12 {
            for p in build_bridge(&ee, &moved[0], &config.bridge) {
                rec.exec(&p, gripper)?;
            }
        }
        for (p, &g) in moved[1..].iter().zip(&commands) {
            rec.exec(p, g)?;
            gripper = g;
        }
        if !sim.check_subtask(index, &rec.world) {
            return Ok(EpisodeOutcome::Failure { subtask: index, reason: FailureReason::SubtaskIncomplete });
        }
        segments.push(SubtaskSegment {
            start_idx,
            end_idx: rec.timesteps.len(),
            subtask_id: subtask.id.clone(),
            reference_object_id: subtask.reference_object.clone(),
            reference_object_pose: object_pose,
        });
    }
    if !sim.check_success(&rec.world) {
        let last = sim.task().subtasks.len() - 1;
        return Ok(EpisodeOutcome::Failure { subtask: last, reason: FailureReason::TaskIncomplete });
    }
    let demo = Demonstration::new(rec.timesteps, segments, scene.embodiment, DemoSource::Generated)?;
    Ok(EpisodeOutcome::Success(GeneratedEpisode { demo, worlds: rec.worlds }))
}

/// Records `count` scripted seed demonstrations on canonical scenes with
/// random placements; demonstration `k` uses rng seed `seed + k`.
pub fn record_seed_demos(
    task: &Arc<TaskSpec>,
    count: usize,
    seed: u64,
    rig: &CameraRig,
) -> Result<Vec<Demonstration>, AugmentError> {
    (0..count)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
            let scene = SceneConfig::canonical(sample_placements(task, 0.0, &mut rng)?);
            let sim = Simulator::for_scene(Arc::clone(task), &scene);
            Ok(record_expert_demo(&sim, &scene, rig, &mut rng, SEED_MAX_STEPS)?.demo)
        })
        .collect()
}

/// Everything needed to turn an attempt index into a scene and an episode.
#[derive(Debug, Clone)]
pub struct GenerationContext {
    pub task: Arc<TaskSpec>,
    pub seeds: Vec<Demonstration>,
    pub rig: CameraRig,
    pub randomization: RandomizationConfig,
    pub augment: AugmentConfig,
}

/// One generation attempt; its scene still carries camera index 0.
#[derive(Debug, Clone)]
pub struct Attempt {
    pub index: u64,
    pub seed: u64,
    pub scene: SceneConfig,
    pub outcome: EpisodeOutcome,
}

/// A stored episode: successful, camera assigned, observations relabeled.
#[derive(Debug, Clone)]
pub struct AcceptedEpisode {
    pub episode_index: usize,
    pub seed: u64,
    pub scene: SceneConfig,
    pub demo: Demonstration,
}

impl GenerationContext {
    pub fn sim_for(&self, scene: &SceneConfig) -> Simulator {
        Simulator::for_scene(Arc::clone(&self.task), scene)
    }

    /// Attempt `index` draws everything from the stream `master_seed ^ index`,
    /// so attempts are independent and can run in any order.
    pub fn attempt(&self, index: u64) -> Result<Attempt, AugmentError> {
        let seed = self.randomization.master_seed ^ index;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scene = sample_scene(&self.task, &self.randomization.factors, 0, &self.randomization, &mut rng)?;
        let sim = self.sim_for(&scene);
        let outcome = generate_episode(&sim, &self.seeds, &scene, &self.rig, &self.augment, &mut rng)?;
        Ok(Attempt { index, seed, scene, outcome })
    }
}

/// Consumes attempts in index order, assigning cameras through the scheduler
/// (advancing only on success) and keeping successful episodes.
#[derive(Debug)]
pub struct EpisodeCollector {
    scheduler: CameraScheduler,
    pub accepted: Vec<AcceptedEpisode>,
    pub attempts: usize,
    pub failures_by_subtask: BTreeMap<usize, usize>,
}

impl EpisodeCollector {
    pub fn new(num_cameras: usize) -> Self {
        Self {
            scheduler: CameraScheduler::new(num_cameras),
            accepted: Vec::new(),
            attempts: 0,
            failures_by_subtask: BTreeMap::new(),
        }
    }

    pub fn push(&mut self, ctx: &GenerationContext, attempt: Attempt) -> Result<(), AugmentError> {
        self.attempts += 1;
        match attempt.outcome {
            EpisodeOutcome::Success(mut episode) => {
                let camera = self.scheduler.next_camera(true);
                let mut scene = attempt.scene;
                if ctx.randomization.factors.contains(Factor::Camera) {
                    scene.camera_index = camera;
                    episode.relabel(&ctx.sim_for(&scene), &scene, &ctx.rig)?;
                }
                self.accepted.push(AcceptedEpisode {
                    episode_index: self.accepted.len(),
                    seed: attempt.seed,
                    scene,
                    demo: episode.demo,
                });
            }
            EpisodeOutcome::Failure { subtask, reason } => {
                self.scheduler.next_camera(false);
                log::debug!("attempt {} failed at subtask {subtask}: {reason:?}", attempt.index);
                *self.failures_by_subtask.entry(subtask).or_default() += 1;
            }
        }
        Ok(())
    }

    pub fn success_rate(&self) -> f64 {
        if self.attempts == 0 { 0.0 } else { self.accepted.len() as f64 / self.attempts as f64 }
    }
}

/// Sequential generation of `episodes` successful episodes, trying at most
/// `max_attempts` scenes.
pub fn generate_dataset(
    ctx: &GenerationContext,
    episodes: usize,
    max_attempts: usize,
) -> Result<EpisodeCollector, AugmentError> {
    let mut collector = EpisodeCollector::new(ctx.rig.num_poses());
    let mut index = 0u64;
    while collector.accepted.len() < episodes && (index as usize) < max_attempts {
        collector.push(ctx, ctx.attempt(index)?)?;
        index += 1;
    }
    Ok(collector)
}
