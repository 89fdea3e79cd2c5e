//! Scene randomization: camera lattice and scheduling, lighting, tabletop
//! texture, table height, embodiment substitution and object placement.

mod camera;
mod embodiment;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use camera::{fibonacci_cap, lattice_angles, look_at, CameraRig, CameraRigConfig, CameraScheduler};
pub use embodiment::{compatible, map_gripper_to_scalar, Aabb, Embodiment, EmbodimentSpec, Gripper};

use crate::pose::Pose;
use crate::sim::TaskSpec;
use crate::trajectory::ObjectId;

/// Number of tabletop texture patterns.
pub const TEXTURE_COUNT: usize = 17;
/// Upper bound of each light channel intensity.
pub const LIGHT_MAX: f64 = 0.5;
/// Embodiment draws attempted before giving up on compatibility.
const EMBODIMENT_RETRIES: usize = 5;
/// Placement draws attempted before giving up on non-overlap.
pub const PLACEMENT_RETRIES: usize = 20;

#[derive(Debug, Error, PartialEq)]
pub enum RandomizeError {
    #[error("invalid camera cap: {0}")]
    InvalidCap(String),
    #[error("look-at target coincides with the eye")]
    DegenerateLookAt,
    #[error("gripper expects {expected} joints, got {got}")]
    GripperJointCount { expected: usize, got: usize },
    #[error("invalid embodiment spec for {0}")]
    InvalidEmbodiment(String),
    #[error("unknown name {0:?}")]
    UnknownName(String),
    #[error("no compatible embodiment after {0} draws")]
    NoCompatibleEmbodiment(usize),
    #[error("could not place objects without overlap after {0} draws")]
    PlacementFailed(usize),
    #[error("invalid randomization config: {0}")]
    InvalidConfig(String),
}

/// One randomization axis that can be switched on for a dataset or evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Factor {
    Camera,
    Light,
    Texture,
    Height,
    Embodiment,
}

impl Factor {
    pub const ALL: [Factor; 5] = [Factor::Camera, Factor::Light, Factor::Texture, Factor::Height, Factor::Embodiment];

    pub fn name(&self) -> &'static str {
        match self {
            Factor::Camera => "camera",
            Factor::Light => "light",
            Factor::Texture => "texture",
            Factor::Height => "height",
            Factor::Embodiment => "embodiment",
        }
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Factor {
    type Err = RandomizeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Factor::ALL
            .into_iter()
            .find(|f| f.name() == s.trim())
            .ok_or_else(|| RandomizeError::UnknownName(s.to_string()))
    }
}

/// Enabled factors. Parses `none`, `all`, or a comma-separated list.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub struct FactorSet(BTreeSet<Factor>);

impl FactorSet {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn all() -> Self {
        Self(Factor::ALL.into_iter().collect())
    }

    pub fn only(f: Factor) -> Self {
        Self([f].into_iter().collect())
    }

    pub fn contains(&self, f: Factor) -> bool {
        self.0.contains(&f)
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = Factor> + '_ {
        self.0.iter().copied()
    }
}

impl FromIterator<Factor> for FactorSet {
    fn from_iter<I: IntoIterator<Item = Factor>>(iter: I) -> Self {
        Self(iter.into_iter().collect())
    }
}

impl fmt::Display for FactorSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("none");
        }
        let names: Vec<_> = self.0.iter().map(Factor::name).collect();
        f.write_str(&names.join("+"))
    }
}

impl FromStr for FactorSet {
    type Err = RandomizeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "" | "none" => Ok(Self::none()),
            "all" => Ok(Self::all()),
            list => list.split([',', '+']).map(str::parse).collect(),
        }
    }
}

impl From<FactorSet> for String {
    fn from(f: FactorSet) -> String {
        f.to_string()
    }
}

impl TryFrom<String> for FactorSet {
    type Error = RandomizeError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

/// Sampling ranges and registries for every factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RandomizationConfig {
    pub factors: FactorSet,
    pub light_max: f64,
    pub texture_count: usize,
    /// Half-open table height delta range, meters.
    pub height_range: [f64; 2],
    pub camera: CameraRigConfig,
    pub embodiments: Vec<Embodiment>,
    pub master_seed: u64,
}

impl Default for RandomizationConfig {
    fn default() -> Self {
        Self {
            factors: FactorSet::none(),
            light_max: LIGHT_MAX,
            texture_count: TEXTURE_COUNT,
            height_range: [-0.05, 0.05],
            camera: CameraRigConfig::default(),
            embodiments: Embodiment::ALL.to_vec(),
            master_seed: 0,
        }
    }
}

impl RandomizationConfig {
    pub fn validate(&self) -> Result<(), RandomizeError> {
        let bad = |m: &str| Err(RandomizeError::InvalidConfig(m.to_string()));
        if !(self.light_max > 0.0) {
            return bad("light_max must be positive");
        }
        if self.texture_count == 0 || self.texture_count > TEXTURE_COUNT {
            return bad("texture_count must be in 1..=17");
        }
        if !(self.height_range[0] < self.height_range[1]) {
            return bad("height_range must be increasing");
        }
        if self.embodiments.is_empty() {
            return bad("embodiment list is empty");
        }
        Ok(())
    }
}

/// One sampled assignment of every scene factor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub camera_index: usize,
    pub light_rgb: [f64; 3],
    pub texture_id: usize,
    pub table_height_delta: f64,
    pub embodiment: Embodiment,
    pub object_placements: BTreeMap<ObjectId, Pose>,
}

impl SceneConfig {
    pub const DEFAULT_LIGHT: [f64; 3] = [LIGHT_MAX, LIGHT_MAX, LIGHT_MAX];

    /// Canonical scene with the given placements: camera 0, full light,
    /// texture 0, nominal height, Panda.
    pub fn canonical(object_placements: BTreeMap<ObjectId, Pose>) -> Self {
        Self {
            camera_index: 0,
            light_rgb: Self::DEFAULT_LIGHT,
            texture_id: 0,
            table_height_delta: 0.0,
            embodiment: Embodiment::Panda,
            object_placements,
        }
    }
}

pub fn sample_light<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    sample_light_max(rng, LIGHT_MAX)
}

fn sample_light_max<R: Rng + ?Sized>(rng: &mut R, max: f64) -> [f64; 3] {
    [rng.random_range(0.0..=max), rng.random_range(0.0..=max), rng.random_range(0.0..=max)]
}

pub fn sample_texture<R: Rng + ?Sized>(rng: &mut R) -> usize {
    rng.random_range(0..TEXTURE_COUNT)
}

/// Uniform in the half-open `[range[0], range[1])`.
pub fn sample_table_height<R: Rng + ?Sized>(rng: &mut R, range: [f64; 2]) -> f64 {
    rng.random_range(range[0]..range[1])
}

/// Object placements uniform in the task region, non-overlapping, resting on
/// a table shifted by `height_delta`.
pub fn sample_placements<R: Rng + ?Sized>(
    task: &TaskSpec,
    height_delta: f64,
    rng: &mut R,
) -> Result<BTreeMap<ObjectId, Pose>, RandomizeError> {
    for _ in 0..PLACEMENT_RETRIES {
        let xy: Vec<(f64, f64, f64)> = task
            .objects
            .iter()
            .map(|_| {
                let r = &task.region;
                (
                    rng.random_range(r.x[0]..=r.x[1]),
                    rng.random_range(r.y[0]..=r.y[1]),
                    rng.random_range(r.yaw[0]..=r.yaw[1]),
                )
            })
            .collect();
        let placements: BTreeMap<_, _> = task
            .objects
            .iter()
            .zip(&xy)
            .map(|(o, &(x, y, yaw))| {
                (o.id.clone(), Pose::from_xyz_yaw(x, y, task.table_z + height_delta + o.shape.half_height(), yaw))
            })
            .collect();
        if task.placements_separated(&placements) {
            return Ok(placements);
        }
    }
    Err(RandomizeError::PlacementFailed(PLACEMENT_RETRIES))
}

/// Whether `spec` can reach the task's placement region at every table height
/// in `height_range`, including the space above objects used for approach.
pub fn embodiment_fits(spec: &EmbodimentSpec, task: &TaskSpec, height_range: [f64; 2]) -> bool {
    let r = &task.region;
    let z = [task.table_z + height_range[0], task.table_z + height_range[1] + task.approach_clearance()];
    compatible(spec, r.x, r.y, z)
}

/// Samples a scene with `factors` enabled; disabled factors keep canonical values.
///
/// Every factor is drawn in a fixed order regardless of which are enabled, so
/// object placements for a given rng state do not depend on the factor set.
/// `camera_index` comes from the caller (scheduler during generation).
pub fn sample_scene<R: Rng + ?Sized>(
    task: &TaskSpec,
    factors: &FactorSet,
    camera_index: usize,
    config: &RandomizationConfig,
    rng: &mut R,
) -> Result<SceneConfig, RandomizeError> {
    config.validate()?;
    let light = sample_light_max(rng, config.light_max);
    let texture = rng.random_range(0..config.texture_count);
    let height = sample_table_height(rng, config.height_range);

    let embodiment = if factors.contains(Factor::Embodiment) {
        let mut chosen = None;
        for _ in 0..EMBODIMENT_RETRIES {
            let e = config.embodiments[rng.random_range(0..config.embodiments.len())];
            let spec = EmbodimentSpec::default_for(e);
            let heights = if factors.contains(Factor::Height) { config.height_range } else { [0.0, 0.0] };
            if embodiment_fits(&spec, task, heights) {
                chosen = Some(e);
                break;
            }
        }
        chosen.ok_or(RandomizeError::NoCompatibleEmbodiment(EMBODIMENT_RETRIES))?
    } else {
        Embodiment::Panda
    };

    let height = if factors.contains(Factor::Height) { height } else { 0.0 };
    let object_placements = sample_placements(task, height, rng)?;
    Ok(SceneConfig {
        camera_index: if factors.contains(Factor::Camera) { camera_index } else { 0 },
        light_rgb: if factors.contains(Factor::Light) { light } else { SceneConfig::DEFAULT_LIGHT },
        texture_id: if factors.contains(Factor::Texture) { texture } else { 0 },
        table_height_delta: height,
        embodiment,
        object_placements,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::TaskKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn light_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let draws: Vec<[f64; 3]> = (0..10_000).map(|_| sample_light(&mut rng)).collect();
        for c in 0..3 {
            let col: Vec<f64> = draws.iter().map(|d| d[c]).collect();
            assert!(col.iter().all(|&v| (0.0..=0.5).contains(&v)));
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            assert!((mean - 0.25).abs() < 0.01, "channel {c} mean {mean}");
        }
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            let r = pearson(draws.iter().map(|d| d[a]), draws.iter().map(|d| d[b]));
            assert!(r.abs() < 0.05, "r({a},{b}) = {r}");
        }
    }

    fn pearson(a: impl Iterator<Item = f64>, b: impl Iterator<Item = f64>) -> f64 {
        let a: Vec<f64> = a.collect();
        let b: Vec<f64> = b.collect();
        let n = a.len() as f64;
        let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
        let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    }

    #[test]
    fn light_is_reproducible() {
        let a = sample_light(&mut ChaCha8Rng::seed_from_u64(3));
        let b = sample_light(&mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(a, b);
    }

    #[test]
    fn texture_frequencies() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut counts = [0usize; TEXTURE_COUNT];
        for _ in 0..17 * 1000 {
            counts[sample_texture(&mut rng)] += 1;
        }
        // 4 binomial standard deviations: sqrt(17000 * (1/17) * (16/17)) ≈ 30.7
        assert!(counts.iter().all(|&c| (880..=1120).contains(&c)), "{counts:?}");
    }

    #[test]
    fn heights_within_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10_000 {
            let h = sample_table_height(&mut rng, [-0.05, 0.05]);
            assert!((-0.05..0.05).contains(&h));
        }
    }

    #[test]
    fn factor_set_parsing() {
        assert_eq!("none".parse::<FactorSet>().unwrap(), FactorSet::none());
        assert_eq!("all".parse::<FactorSet>().unwrap(), FactorSet::all());
        let fs: FactorSet = "camera,height".parse().unwrap();
        assert!(fs.contains(Factor::Camera) && fs.contains(Factor::Height) && !fs.contains(Factor::Light));
        assert_eq!(fs.to_string(), "camera+height");
        assert_eq!(fs.to_string().parse::<FactorSet>().unwrap(), fs);
        assert!("camera,sunshine".parse::<FactorSet>().is_err());
    }

    #[test]
    fn empty_factor_set_gives_defaults() {
        let task = TaskSpec::builtin(TaskKind::Stack);
        let cfg = RandomizationConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = sample_scene(&task, &FactorSet::none(), 42, &cfg, &mut rng).unwrap();
        assert_eq!(s.camera_index, 0);
        assert_eq!(s.light_rgb, [0.5; 3]);
        assert_eq!(s.texture_id, 0);
        assert_eq!(s.table_height_delta, 0.0);
        assert_eq!(s.embodiment, Embodiment::Panda);
        assert_eq!(s.object_placements.len(), 2);
    }

    #[test]
    fn single_factor_isolation() {
        let task = TaskSpec::builtin(TaskKind::Stack);
        let cfg = RandomizationConfig::default();
        let light_only = FactorSet::only(Factor::Light);
        let a = sample_scene(&task, &light_only, 3, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = sample_scene(&task, &light_only, 9, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_ne!(a.light_rgb, b.light_rgb);
        assert_eq!((a.camera_index, a.texture_id, a.embodiment), (0, 0, Embodiment::Panda));
        assert_eq!((b.camera_index, b.texture_id, b.embodiment), (0, 0, Embodiment::Panda));
        assert_eq!(a.table_height_delta, b.table_height_delta);
    }

    #[test]
    fn placements_independent_of_factor_set() {
        let task = TaskSpec::builtin(TaskKind::Stack);
        let cfg = RandomizationConfig::default();
        let a = sample_scene(&task, &FactorSet::none(), 0, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_scene(&task, &FactorSet::only(Factor::Light), 0, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.object_placements, b.object_placements);
    }

    #[test]
    fn placements_rest_on_shifted_table() {
        let task = TaskSpec::builtin(TaskKind::Stack);
        let cfg = RandomizationConfig::default();
        let fs = FactorSet::only(Factor::Height);
        let s = sample_scene(&task, &fs, 0, &cfg, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        for o in &task.objects {
            let z = s.object_placements[&o.id].translation.z;
            assert!((z - (task.table_z + s.table_height_delta + o.shape.half_height())).abs() < 1e-12);
        }
    }

    #[test]
    fn every_embodiment_fits_every_builtin_task() {
        let cfg = RandomizationConfig::default();
        for kind in TaskKind::ALL {
            let task = TaskSpec::builtin(kind);
            for e in Embodiment::ALL {
                assert!(embodiment_fits(&EmbodimentSpec::default_for(e), &task, cfg.height_range), "{kind:?} {e}");
            }
        }
    }

    #[test]
    fn incompatible_embodiment_errors() {
        let mut task = TaskSpec::builtin(TaskKind::Stack);
        task.region.x = [1.9, 2.1];
        let cfg = RandomizationConfig::default();
        let err = sample_scene(&task, &FactorSet::only(Factor::Embodiment), 0, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(err, Err(RandomizeError::NoCompatibleEmbodiment(5)));
    }
}
