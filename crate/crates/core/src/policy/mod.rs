//! Desk-scale diffusion policy over feature observations.
//!
//! A DDPM denoiser predicts the noise added to a normalized action chunk,
//! conditioned on the normalized observation and the diffusion step. Sampling
//! runs the reverse chain from pure noise; rollouts execute the first `T_a`
//! actions of each chunk and replan.

mod net;
mod rollout;
mod schedule;
mod train;

use std::collections::BTreeMap;
use std::io::{self, Read, Write};
use std::path::Path;

use ndarray::{Array2, Zip};
use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use net::{step_embedding, Cache, Denoiser, DenoiserShape, Grads, Mlp, EMBED_DIM};
pub use rollout::{rollout, ChunkPolicy, ExpertPolicy, RolloutResult};
pub use schedule::NoiseSchedule;
pub use train::{
    bc_loss, bc_loss_with, build_training_set, mse_loss, train, LrSchedule, Optimizer, OptimizerKind, TrainConfig,
    TrainLog, TrainingSet,
};

use crate::sim::{observation_dim, SimError};
use crate::trajectory::{Action, ACTION_DIM};

/// Leading line of every checkpoint file.
pub const CHECKPOINT_VERSION: &str = "scenegen-checkpoint v1";

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),
    #[error("diffusion step {k} outside 1..={max}")]
    StepOutOfRange { k: usize, max: usize },
    #[error("invalid chunking: T_a = {t_a}, T_p = {t_p}")]
    InvalidChunking { t_p: usize, t_a: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite loss at sample {sample}")]
    NonFiniteLoss { sample: usize },
    #[error("training set is empty")]
    EmptyDataset,
    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint version {found:?} is not supported (expected {expected:?}); re-train or upgrade")]
    UnsupportedVersion { found: String, expected: String },
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Prediction horizon `t_p` and execution horizon `t_a`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChunkingConfig {
    pub t_p: usize,
    pub t_a: usize,
}

impl Default for ChunkingConfig {
    fn default() -> Self {
        Self { t_p: 8, t_a: 4 }
    }
}

impl ChunkingConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.t_a == 0 || self.t_a > self.t_p {
            return Err(PolicyError::InvalidChunking { t_p: self.t_p, t_a: self.t_a });
        }
        Ok(())
    }
}

/// Per-dimension affine map of `[lo, hi]` onto `[-1, 1]`. Constant dimensions
/// normalize to 0 and denormalize back to their constant whatever the input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMaxNormalizer {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl MinMaxNormalizer {
    pub fn fit<'a>(dim: usize, rows: impl IntoIterator<Item = &'a [f64]>) -> Self {
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for r in rows {
            for (i, &v) in r.iter().enumerate().take(dim) {
                lo[i] = lo[i].min(v);
                hi[i] = hi[i].max(v);
            }
        }
        for i in 0..dim {
            if !lo[i].is_finite() {
                (lo[i], hi[i]) = (0.0, 0.0);
            }
        }
        Self { lo, hi }
    }

    fn center_scale(&self, i: usize) -> (f64, f64) {
        let (lo, hi) = (self.lo[i], self.hi[i]);
        let half = 0.5 * (hi - lo);
        (0.5 * (hi + lo), if half > 1e-12 { half } else { 1.0 })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    /// Dimension `i` of the input is `x[i % dim]`, so a flattened chunk can be
    /// normalized with a per-action normalizer.
    pub fn normalize(&self, x: &mut [f64]) {
        for (j, v) in x.iter_mut().enumerate() {
            let (c, s) = self.center_scale(j % self.dim());
            *v = (*v - c) / s;
        }
    }

    pub fn denormalize(&self, x: &mut [f64]) {
        for (j, v) in x.iter_mut().enumerate() {
            let i = j % self.dim();
            let (c, s) = self.center_scale(i);
            *v = if self.hi[i] - self.lo[i] > 2e-12 { *v * s + c } else { c };
        }
    }
}

/// Per-dimension standardization with unit scale for constant dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit<'a>(dim: usize, rows: impl IntoIterator<Item = &'a [f64]> + Clone) -> Self {
        let mut n = 0usize;
        let mut mean = vec![0.0; dim];
        for r in rows.clone() {
            n += 1;
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        let n = n.max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        let std = var.iter().map(|s| (s / n).sqrt()).map(|s| if s > 1e-8 { s } else { 1.0 }).collect();
        Self { mean, std }
    }

    pub fn normalize(&self, x: &mut [f64]) {
        for ((v, m), s) in x.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = (*v - m) / s;
        }
    }

    pub fn denormalize(&self, x: &mut [f64]) {
        for ((v, m), s) in x.iter_mut().zip(&self.mean).zip(&self.std) {
            *v = *v * s + m;
        }
    }
}

/// What the denoiser sees besides the raw observation vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObservationFeatures {
    #[default]
    Raw,
    /// Appends each object's position minus the ee position, still in the
    /// camera frame, so precision near grasp does not hinge on the net
    /// learning a subtraction.
    Relative,
    /// `Relative` plus each object's position and orientation in the ee
    /// frame. Both poses share the camera frame, so the camera drops out and
    /// the features line up with ee-frame actions.
    EeFrame,
}

impl ObservationFeatures {
    pub fn apply(&self, observation: &[f64]) -> Vec<f64> {
        let mut v = observation.to_vec();
        if *self == ObservationFeatures::Raw {
            return v;
        }
        let objects = (observation.len().saturating_sub(observation_dim(0))) / 9;
        for i in 0..objects {
            let at = 10 + 9 * i;
            v.extend((0..3).map(|a| observation[at + a] - observation[a]));
        }
        if *self == ObservationFeatures::EeFrame {
            let ee = frame_from_6d(&observation[3..9]);
            for i in 0..objects {
                let at = 10 + 9 * i;
                let d = Vector3::from_fn(|a, _| observation[at + a] - observation[a]);
                v.extend_from_slice((ee.transpose() * d).as_slice());
                let rel = ee.transpose() * frame_from_6d(&observation[at + 3..at + 9]);
                v.extend_from_slice(&rel.as_slice()[..6]);
            }
        }
        v
    }

    pub fn output_dim(&self, observation_dim_raw: usize) -> usize {
        match self {
            ObservationFeatures::Raw => observation_dim_raw,
            ObservationFeatures::Relative => {
                observation_dim_raw + 3 * (observation_dim_raw.saturating_sub(observation_dim(0)) / 9)
            }
            ObservationFeatures::EeFrame => {
                observation_dim_raw + 12 * (observation_dim_raw.saturating_sub(observation_dim(0)) / 9)
            }
        }
    }
}

/// Rotation matrix from its first two columns, re-orthonormalized.
fn frame_from_6d(c: &[f64]) -> Matrix3<f64> {
    let a = Vector3::new(c[0], c[1], c[2]).normalize();
    let b = Vector3::new(c[3], c[4], c[5]);
    let b = (b - a * a.dot(&b)).normalize();
    Matrix3::from_columns(&[a, b, a.cross(&b)])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    layer_sizes: Vec<usize>,
    shape: DenoiserShape,
    schedule: NoiseSchedule,
    chunking: ChunkingConfig,
    features: ObservationFeatures,
    clip_sample: bool,
    action_norm: MinMaxNormalizer,
    obs_norm: Standardizer,
    num_params: usize,
    meta: BTreeMap<String, String>,
}

/// Trained denoiser plus everything needed to turn observations into actions.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionPolicy {
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
    pub chunking: ChunkingConfig,
    pub features: ObservationFeatures,
    /// Clamp the implied clean chunk to `[-1, 1]` at every reverse step.
    pub clip_sample: bool,
    pub action_norm: MinMaxNormalizer,
    pub obs_norm: Standardizer,
    /// Free-form provenance such as task and training factors.
    pub meta: BTreeMap<String, String>,
}

impl DiffusionPolicy {
    pub fn obs_dim(&self) -> usize {
        self.denoiser.shape.obs_dim
    }

    /// Runs the reverse chain for a batch of raw observations; returns one
    /// de-normalized chunk of `t_p` actions per observation.
    pub fn sample_chunks<R: Rng + ?Sized>(&self, observations: &[&[f64]], rng: &mut R) -> Vec<Vec<Action>> {
        let b = observations.len();
        let sh = self.denoiser.shape;
        let mut obs = Array2::zeros((b, sh.obs_dim));
        for (i, o) in observations.iter().enumerate() {
            let mut row = self.features.apply(o);
            self.obs_norm.normalize(&mut row);
            obs.row_mut(i).assign(&ndarray::ArrayView1::from(&row[..]));
        }
        let mut x = Array2::from_shape_simple_fn((b, sh.chunk_dim), || rng.sample::<f64, _>(StandardNormal));
        let s = &self.schedule;
        for k in (1..=s.num_steps()).rev() {
            let mut eps = self.denoiser.predict(x.view(), obs.view(), &vec![k; b]);
            if self.clip_sample {
                // recompute eps from the clamped x0 estimate
                let (a, c) = (s.alpha_bar(k).sqrt(), (1.0 - s.alpha_bar(k)).sqrt());
                Zip::from(&mut eps).and(&x).for_each(|e, &xv| {
                    let x0 = ((xv - c * *e) / a).clamp(-1.0, 1.0);
                    *e = (xv - a * x0) / c;
                });
            }
            Zip::from(&mut x).and(&eps).for_each(|xv, &e| *xv = s.posterior_mean(*xv, e, k));
            let sigma = s.sigma(k);
            if k > 1 && sigma > 0.0 {
                x.mapv_inplace(|v| v + sigma * rng.sample::<f64, _>(StandardNormal));
            }
        }
        x.rows()
            .into_iter()
            .map(|row| {
                let mut flat = row.to_vec();
                self.action_norm.denormalize(&mut flat);
                flat.chunks(ACTION_DIM).map(Action::from_slice).collect()
            })
            .collect()
    }

    pub fn sample_chunk<R: Rng + ?Sized>(&self, observation: &[f64], rng: &mut R) -> Vec<Action> {
        self.sample_chunks(&[observation], rng).pop().expect("one chunk per observation")
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), PolicyError> {
        let params = self.denoiser.mlp.flat_params();
        let header = CheckpointHeader {
            layer_sizes: self.denoiser.mlp.sizes(),
            shape: self.denoiser.shape,
            schedule: self.schedule.clone(),
            chunking: self.chunking,
            features: self.features,
            clip_sample: self.clip_sample,
            action_norm: self.action_norm.clone(),
            obs_norm: self.obs_norm.clone(),
            num_params: params.len(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_string(&header).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        writeln!(w, "{CHECKPOINT_VERSION}")?;
        writeln!(w, "{json}")?;
        let mut bytes = Vec::with_capacity(params.len() * 8);
        for p in params {
            bytes.extend_from_slice(&p.to_le_bytes());
        }
        w.write_all(&bytes)?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, PolicyError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        let mut lines = buf.splitn(3, |&b| b == b'\n');
        let version = String::from_utf8_lossy(lines.next().unwrap_or_default()).into_owned();
        if version != CHECKPOINT_VERSION {
            return Err(PolicyError::UnsupportedVersion { found: version, expected: CHECKPOINT_VERSION.into() });
        }
        let header_line = lines.next().ok_or_else(|| PolicyError::Checkpoint("missing header".into()))?;
        let header: CheckpointHeader =
            serde_json::from_slice(header_line).map_err(|e| PolicyError::Checkpoint(e.to_string()))?;
        let data = lines.next().unwrap_or_default();
        if data.len() != header.num_params * 8 {
            return Err(PolicyError::Checkpoint(format!(
                "expected {} parameter bytes, found {}",
                header.num_params * 8,
                data.len()
            )));
        }
        let params: Vec<f64> =
            data.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        let mlp = Mlp::from_flat(&header.layer_sizes, &params)
            .ok_or_else(|| PolicyError::Checkpoint("layer sizes do not match parameter count".into()))?;
        let sizes = mlp.sizes();
        if sizes[0] != header.shape.input_dim() || *sizes.last().expect("nonempty") != header.shape.chunk_dim {
            return Err(PolicyError::Checkpoint("layer sizes disagree with denoiser shape".into()));
        }
        header.chunking.validate()?;
        Ok(Self {
            denoiser: Denoiser { shape: header.shape, mlp },
            schedule: header.schedule,
            chunking: header.chunking,
            features: header.features,
            clip_sample: header.clip_sample,
            action_norm: header.action_norm,
            obs_norm: header.obs_norm,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), PolicyError> {
        let mut f = io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PolicyError> {
        Self::read_from(io::BufReader::new(std::fs::File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_policy(k: usize) -> DiffusionPolicy {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let shape = DenoiserShape { chunk_dim: 2 * ACTION_DIM, obs_dim: 3, embed_dim: EMBED_DIM };
        DiffusionPolicy {
            denoiser: Denoiser::new(shape, &[8, 8], &mut rng),
            schedule: NoiseSchedule::scaled_linear(k).unwrap(),
            chunking: ChunkingConfig { t_p: 2, t_a: 1 },
            features: ObservationFeatures::Raw,
            clip_sample: false,
            action_norm: MinMaxNormalizer { lo: vec![-0.01; ACTION_DIM], hi: vec![0.01; ACTION_DIM] },
            obs_norm: Standardizer { mean: vec![0.0; 3], std: vec![1.0; 3] },
            meta: BTreeMap::from([("task".to_string(), "stack".to_string())]),
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = tiny_policy(10);
        let mut bytes = Vec::new();
        p.write_to(&mut bytes).unwrap();
        assert!(bytes.starts_with(CHECKPOINT_VERSION.as_bytes()));
        assert_eq!(DiffusionPolicy::read_from(&bytes[..]).unwrap(), p);
    }

    #[test]
    fn checkpoint_rejects_truncation_and_version() {
        let p = tiny_policy(10);
        let mut bytes = Vec::new();
        p.write_to(&mut bytes).unwrap();
        assert!(matches!(DiffusionPolicy::read_from(&bytes[..bytes.len() - 3]), Err(PolicyError::Checkpoint(_))));
        let mut old = b"scenegen-checkpoint v0".to_vec();
        old.extend_from_slice(&bytes[CHECKPOINT_VERSION.len()..]);
        assert!(matches!(DiffusionPolicy::read_from(&old[..]), Err(PolicyError::UnsupportedVersion { .. })));
    }

    #[test]
    fn sampling_is_deterministic() {
        let p = tiny_policy(10);
        let obs = [0.1, -0.2, 0.3];
        let a = p.sample_chunk(&obs, &mut ChaCha8Rng::seed_from_u64(4));
        let b = p.sample_chunk(&obs, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(a, b);
        assert_eq!(a.len(), 2);
    }

    #[test]
    fn single_step_closed_form() {
        // K = 1 with a zero network: x0 = x1 / sqrt(alpha_1), no added noise.
        let mut p = tiny_policy(1);
        p.denoiser.mlp.weights.iter_mut().for_each(|w| w.fill(0.0));
        p.action_norm = MinMaxNormalizer { lo: vec![-1.0; ACTION_DIM], hi: vec![1.0; ACTION_DIM] };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x1: Vec<f64> = (0..2 * ACTION_DIM).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let chunk = p.sample_chunk(&[0.0; 3], &mut ChaCha8Rng::seed_from_u64(8));
        let flat: Vec<f64> = chunk.iter().flat_map(|a| a.to_array()).collect();
        let alpha = p.schedule.alpha(1);
        for (got, x) in flat.iter().zip(&x1) {
            assert!((got - x / alpha.sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn normalizer_round_trip() {
        let rows = [vec![0.0, 1.0, 5.0], vec![2.0, 1.0, -3.0], vec![1.0, 1.0, 0.5]];
        let n = MinMaxNormalizer::fit(3, rows.iter().map(|r| r.as_slice()));
        let mut x = vec![2.0, 1.0, -3.0, 0.3, 1.0, 4.0];
        let orig = x.clone();
        n.normalize(&mut x);
        assert_eq!(&x[..3], &[1.0, 0.0, -1.0]);
        n.denormalize(&mut x);
        for (a, b) in x.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-9);
        }
        let s = Standardizer::fit(3, rows.iter().map(|r| r.as_slice()));
        assert_eq!(s.std[1], 1.0);
        let mut y = orig[..3].to_vec();
        s.normalize(&mut y);
        s.denormalize(&mut y);
        for (a, b) in y.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
