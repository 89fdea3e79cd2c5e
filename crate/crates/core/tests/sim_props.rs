use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use scenegen::policy::{rollout, ChunkingConfig, ExpertPolicy};
use scenegen::pose::Vec3;
use scenegen::randomize::{fibonacci_cap, sample_scene, CameraRigConfig, FactorSet, RandomizationConfig, SceneConfig};
use scenegen::sim::{Simulator, TaskKind, TaskSpec, WorldState};
use scenegen::tolerance::{ALGEBRA, ATTACHMENT, RESTING};
use scenegen::trajectory::Action;

fn task_kind() -> impl Strategy<Value = TaskKind> {
    prop::sample::select(TaskKind::ALL.to_vec())
}

fn scene(task: &TaskSpec, factors: &str, camera: usize, seed: u64) -> SceneConfig {
    let factors: FactorSet = factors.parse().unwrap();
    sample_scene(task, &factors, camera, &RandomizationConfig::default(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

fn action() -> impl Strategy<Value = Action> {
    (prop::array::uniform3(-0.08..0.08f64), prop::array::uniform3(-0.3..0.3f64), 0.0..1.0f64).prop_map(|(t, r, g)| Action {
        translation: Vec3::from(t),
        rotation: Vec3::from(r),
        gripper: g,
    })
}

fn check_resting(sim: &Simulator, w: &WorldState) -> Result<(), TestCaseError> {
    for (id, p) in &w.objects {
        if !w.is_attached(id) {
            let bottom = p.translation.z - sim.task().object(id).unwrap().shape.half_height();
            prop_assert!(bottom >= w.table_height - RESTING, "{id:?} below table");
        }
    }
    if w.attached.is_some() {
        prop_assert!(w.gripper_opening <= sim.task().thresholds.release_open);
    }
    prop_assert!((0.0..=1.0).contains(&w.gripper_opening));
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn random_actions_never_tunnel(kind in task_kind(), seed in any::<u64>(), actions in prop::collection::vec(action(), 1..60)) {
        let task = Arc::new(TaskSpec::builtin(kind));
        let sc = scene(&task, "height", 0, seed);
        let sim = Simulator::for_scene(task, &sc);
        let mut w = sim.reset(&sc, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        check_resting(&sim, &w)?;
        for a in &actions {
            let next = sim.step(&w, a);
            let th = &sim.task().thresholds;
            prop_assert!(w.ee_pose.translation_distance(&next.ee_pose) <= th.max_step_translation + ALGEBRA);
            prop_assert!(w.ee_pose.rotation_distance(&next.ee_pose) <= th.max_step_rotation + ALGEBRA);
            prop_assert!((next.gripper_opening - w.gripper_opening).abs() <= th.gripper_rate + ALGEBRA);
            w = next;
            check_resting(&sim, &w)?;
        }
    }

    #[test]
    fn expert_rollouts_succeed_and_hold_rigidly(kind in task_kind(), seed in any::<u64>(), t_a in 1usize..=8) {
        let task = Arc::new(TaskSpec::builtin(kind));
        let rig = fibonacci_cap(&CameraRigConfig::default()).unwrap();
        let sc = scene(&task, "height", 0, seed);
        let sim = Simulator::for_scene(task, &sc);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut expert = ExpertPolicy::new(8);
        let res = rollout(&mut expert, &sim, &sc, &rig, ChunkingConfig { t_p: 8, t_a }, 2000, &mut rng).unwrap();
        prop_assert!(res.success);
        prop_assert!(res.worlds.iter().any(|w| w.attached.is_some()));
        for pair in res.worlds.windows(2) {
            check_resting(&sim, &pair[1])?;
            if let (Some(a), Some(b)) = (&pair[0].attached, &pair[1].attached) {
                prop_assert_eq!(&a.object, &b.object);
                let rel = |w: &WorldState| w.ee_pose.inverse().compose(&w.objects[&a.object]);
                prop_assert!(rel(&pair[0]).translation_distance(&rel(&pair[1])) <= ATTACHMENT);
                prop_assert!(rel(&pair[0]).rotation_distance(&rel(&pair[1])) <= 1e-9);
            }
        }
        prop_assert!(!sim.check_success(&res.worlds[0]));
    }

    #[test]
    fn observation_frame_round_trip(kind in task_kind(), seed in any::<u64>(), cam in 0usize..100) {
        let task = Arc::new(TaskSpec::builtin(kind));
        let rig = fibonacci_cap(&CameraRigConfig::default()).unwrap();
        let sc = scene(&task, "all", cam, seed);
        let sim = Simulator::for_scene(task.clone(), &sc);
        let w = sim.reset(&sc, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let obs = sim.observe(&w, &sc, &rig).unwrap();
        prop_assert_eq!(obs.len(), sim.observation_dim());
        let camera = rig.pose(sc.camera_index).unwrap();
        let world_ees = std::iter::once(w.ee_pose).chain(task.objects.iter().map(|o| w.objects[&o.id]));
        let offsets = std::iter::once(0).chain((0..task.objects.len()).map(|i| 10 + 9 * i));
        for (world, at) in world_ees.zip(offsets) {
            let seen = camera.inverse().compose(&world);
            let t = Vec3::new(obs[at], obs[at + 1], obs[at + 2]);
            let back = camera.transform_point(&t);
            prop_assert!((back - world.translation).norm() <= ALGEBRA);
            let c0 = Vec3::new(obs[at + 3], obs[at + 4], obs[at + 5]);
            let c1 = Vec3::new(obs[at + 6], obs[at + 7], obs[at + 8]);
            prop_assert!((c0.norm() - 1.0).abs() <= ALGEBRA && (c1.norm() - 1.0).abs() <= ALGEBRA && c0.dot(&c1).abs() <= ALGEBRA);
            prop_assert_eq!(seen.rotation_6d().to_vec(), obs[at + 3..at + 9].to_vec());
        }
    }
}

#[test]
fn camera_changes_observation() {
    let task = Arc::new(TaskSpec::builtin(TaskKind::Stack));
    let rig = fibonacci_cap(&CameraRigConfig::default()).unwrap();
    let a = scene(&task, "camera", 3, 1);
    let b = SceneConfig { camera_index: 4, ..a.clone() };
    let sim = Simulator::for_scene(task, &a);
    let w = sim.reset(&a, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    assert_ne!(sim.observe(&w, &a, &rig).unwrap(), sim.observe(&w, &b, &rig).unwrap());
    let bad = SceneConfig { camera_index: 100, ..a };
    assert!(sim.observe(&w, &bad, &rig).is_err());
}
