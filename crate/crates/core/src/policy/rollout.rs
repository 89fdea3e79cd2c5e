use rand::RngCore;

use super::{ChunkingConfig, DiffusionPolicy, PolicyError};
use crate::randomize::{CameraRig, SceneConfig};
use crate::sim::{ScriptedExpert, Simulator, WorldState};
use crate::trajectory::Action;

/// Anything that maps the current world and observation to an action chunk.
pub trait ChunkPolicy {
    fn plan(&mut self, sim: &Simulator, world: &WorldState, observation: &[f64], rng: &mut dyn RngCore) -> Vec<Action>;
}

impl ChunkPolicy for &DiffusionPolicy {
    fn plan(&mut self, _sim: &Simulator, _world: &WorldState, observation: &[f64], rng: &mut dyn RngCore) -> Vec<Action> {
        self.sample_chunk(observation, rng)
    }
}

/// The scripted expert behind the policy interface; it reads the true world
/// state instead of the observation.
#[derive(Debug, Clone)]
pub struct ExpertPolicy {
    expert: ScriptedExpert,
    horizon: usize,
    /// World time of the last plan and the expert after each planned step,
    /// so the next plan resumes after however many actions were executed.
    planned_at: usize,
    after: Vec<ScriptedExpert>,
}

impl ExpertPolicy {
    pub fn new(horizon: usize) -> Self {
        Self { expert: ScriptedExpert::new(), horizon: horizon.max(1), planned_at: 0, after: Vec::new() }
    }
}

impl ChunkPolicy for ExpertPolicy {
    fn plan(&mut self, sim: &Simulator, world: &WorldState, _observation: &[f64], _rng: &mut dyn RngCore) -> Vec<Action> {
        let executed = world.time.saturating_sub(self.planned_at);
        if executed > 0 {
            if let Some(e) = self.after.get(executed - 1) {
                self.expert = e.clone();
            }
        }
        self.planned_at = world.time;
        self.after.clear();
        let mut expert = self.expert.clone();
        let mut w = world.clone();
        (0..self.horizon)
            .map(|_| {
                let a = expert.next_action(sim, &w);
                self.after.push(expert.clone());
                w = sim.step(&w, &a);
                a
            })
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct RolloutResult {
    pub success: bool,
    pub steps: usize,
    pub actions: Vec<Action>,
    /// World before every step and after the last.
    pub worlds: Vec<WorldState>,
}

/// Receding-horizon execution: observe, plan a chunk, execute its first `t_a`
/// actions, repeat until success or `max_steps`.
pub fn rollout(
    policy: &mut dyn ChunkPolicy,
    sim: &Simulator,
    scene: &SceneConfig,
    rig: &CameraRig,
    chunking: ChunkingConfig,
    max_steps: usize,
    rng: &mut dyn RngCore,
) -> Result<RolloutResult, PolicyError> {
    chunking.validate()?;
    let mut world = sim.reset(scene, rng)?;
    let mut worlds = vec![world.clone()];
    let mut actions = Vec::new();
    let mut success = sim.check_success(&world);
    while !success && actions.len() < max_steps {
        let obs = sim.observe(&world, scene, rig)?;
        let chunk = policy.plan(sim, &world, &obs, rng);
        if chunk.is_empty() {
            break;
        }
        for a in chunk.into_iter().take(chunking.t_a) {
            world = sim.step(&world, &a);
            actions.push(a);
            worlds.push(world.clone());
            success = sim.check_success(&world);
            if success || actions.len() == max_steps {
                break;
            }
        }
    }
    Ok(RolloutResult { success, steps: actions.len(), actions, worlds })
}
