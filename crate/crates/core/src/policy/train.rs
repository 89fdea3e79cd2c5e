//! Behavior-cloning objective, optimizers and the training loop.

use std::collections::BTreeMap;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{
    ChunkingConfig, Denoiser, DenoiserShape, DiffusionPolicy, Grads, MinMaxNormalizer, NoiseSchedule,
    ObservationFeatures, PolicyError, Standardizer, EMBED_DIM,
};
use crate::trajectory::{Action, Demonstration, ACTION_DIM};

/// Mean squared error over all entries and its gradient w.r.t. `pred`.
pub fn mse_loss(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> Result<(f64, Array2<f64>), PolicyError> {
    let n = pred.len();
    if n == 0 {
        return Err(PolicyError::EmptyBatch);
    }
    let diff = &pred - &target;
    for (i, row) in diff.rows().into_iter().enumerate() {
        if !row.iter().all(|v| v.is_finite()) {
            return Err(PolicyError::NonFiniteLoss { sample: i });
        }
    }
    let loss = diff.iter().map(|d| d * d).sum::<f64>() / n as f64;
    Ok((loss, diff * (2.0 / n as f64)))
}

/// Loss and gradients for fixed diffusion steps `ks` and noise `eps`.
pub fn bc_loss_with(
    net: &Denoiser,
    schedule: &NoiseSchedule,
    obs: ArrayView2<f64>,
    x0: ArrayView2<f64>,
    ks: &[usize],
    eps: ArrayView2<f64>,
) -> Result<(f64, Grads), PolicyError> {
    if x0.nrows() == 0 {
        return Err(PolicyError::EmptyBatch);
    }
    let xk = noise_batch(schedule, x0, ks, eps)?;
    let input = net.build_input(xk.view(), obs, ks);
    let (pred, cache) = net.mlp.forward_cached(input.view());
    let (loss, d_out) = mse_loss(pred.view(), eps)?;
    Ok((loss, net.mlp.backward(&cache, d_out)))
}

fn noise_batch(
    schedule: &NoiseSchedule,
    x0: ArrayView2<f64>,
    ks: &[usize],
    eps: ArrayView2<f64>,
) -> Result<Array2<f64>, PolicyError> {
    let mut xk = x0.to_owned();
    for (i, &k) in ks.iter().enumerate() {
        if k == 0 || k > schedule.num_steps() {
            return Err(PolicyError::StepOutOfRange { k, max: schedule.num_steps() });
        }
        let (a, b) = (schedule.alpha_bar(k).sqrt(), (1.0 - schedule.alpha_bar(k)).sqrt());
        xk.row_mut(i).zip_mut_with(&eps.row(i), |v, e| *v = a * *v + b * e);
    }
    Ok(xk)
}

/// Draws `k ~ U{1..K}` and `eps ~ N(0, I)` per sample, then evaluates [`bc_loss_with`].
pub fn bc_loss<R: Rng + ?Sized>(
    net: &Denoiser,
    schedule: &NoiseSchedule,
    obs: ArrayView2<f64>,
    x0: ArrayView2<f64>,
    rng: &mut R,
) -> Result<(f64, Grads), PolicyError> {
    let ks: Vec<usize> = (0..x0.nrows()).map(|_| rng.random_range(1..=schedule.num_steps())).collect();
    let eps = Array2::from_shape_simple_fn(x0.raw_dim(), || rng.sample::<f64, _>(StandardNormal));
    bc_loss_with(net, schedule, obs, x0, &ks, eps.view())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Learning rate over epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine decay from the base rate to zero over the run.
    Cosine,
}

impl LrSchedule {
    pub fn rate(&self, base: f64, epoch: usize, epochs: usize) -> f64 {
        match self {
            LrSchedule::Constant => base,
            LrSchedule::Cosine => 0.5 * base * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs.max(1) as f64).cos()),
        }
    }
}

/// First-order optimizer over the flat parameter order of [`super::Mlp`].
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Optimizer {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(kind: OptimizerKind, lr: f64, num_params: usize) -> Self {
        let state = if kind == OptimizerKind::Adam { num_params } else { 0 };
        Self { kind, lr, m: vec![0.0; state], v: vec![0.0; state], t: 0 }
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step(&mut self, net: &mut Denoiser, grads: &Grads) {
        self.t += 1;
        let lr = self.lr;
        match self.kind {
            OptimizerKind::Sgd => net.mlp.for_each_param(grads, |_, p, g| *p -= lr * g),
            OptimizerKind::Adam => {
                let (m, v) = (&mut self.m, &mut self.v);
                let c1 = 1.0 - Self::BETA1.powi(self.t);
                let c2 = 1.0 - Self::BETA2.powi(self.t);
                net.mlp.for_each_param(grads, |i, p, g| {
                    m[i] = Self::BETA1 * m[i] + (1.0 - Self::BETA1) * g;
                    v[i] = Self::BETA2 * v[i] + (1.0 - Self::BETA2) * g * g;
                    *p -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + Self::EPS);
                });
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub lr_schedule: LrSchedule,
    pub hidden: Vec<usize>,
    pub diffusion_steps: usize,
    pub chunking: ChunkingConfig,
    pub features: ObservationFeatures,
    /// Clamp the implied clean chunk to the normalized range while sampling.
    pub clip_sample: bool,
    pub holdout_fraction: f64,
    pub divergence_threshold: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 64,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            lr_schedule: LrSchedule::Cosine,
            hidden: vec![512, 512],
            diffusion_steps: 5,
            chunking: ChunkingConfig::default(),
            features: ObservationFeatures::EeFrame,
            clip_sample: true,
            holdout_fraction: 0.05,
            divergence_threshold: 1e3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Training loss before the first update.
    pub initial_loss: f64,
    /// Mean minibatch loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Held-out loss after each epoch; empty when nothing was held out.
    pub holdout_losses: Vec<f64>,
    pub train_samples: usize,
    pub holdout_samples: usize,
}

/// Raw observation rows and flattened action chunks, one per timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub obs: Array2<f64>,
    pub chunks: Array2<f64>,
}

impl TrainingSet {
    pub fn len(&self) -> usize {
        self.obs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.nrows() == 0
    }

    fn select(&self, idx: &[usize]) -> (Array2<f64>, Array2<f64>) {
        (self.obs.select(Axis(0), idx), self.chunks.select(Axis(0), idx))
    }
}

/// One sample per timestep: the observation and the next `t_p` actions,
/// padded past the end with zero-motion actions holding the last gripper command.
pub fn build_training_set<'a>(
    demos: impl IntoIterator<Item = &'a Demonstration>,
    t_p: usize,
    features: ObservationFeatures,
) -> Result<TrainingSet, PolicyError> {
    let mut obs_rows: Vec<f64> = Vec::new();
    let mut chunk_rows: Vec<f64> = Vec::new();
    let mut obs_dim = None;
    let mut n = 0;
    for demo in demos {
        let steps = demo.timesteps();
        let pad = Action::hold(steps.last().map_or(1.0, |t| t.action.gripper));
        for (t, step) in steps.iter().enumerate() {
            let ob = features.apply(&step.observation);
            let d = *obs_dim.get_or_insert(ob.len());
            if d != ob.len() {
                return Err(PolicyError::SchemaMismatch(format!(
                    "observation length {} differs from {d}",
                    step.observation.len()
                )));
            }
            obs_rows.extend_from_slice(&ob);
            for j in t..t + t_p {
                let a = steps.get(j).map_or(pad, |s| s.action);
                chunk_rows.extend_from_slice(&a.to_array());
            }
            n += 1;
        }
    }
    let obs_dim = obs_dim.ok_or(PolicyError::EmptyDataset)?;
    Ok(TrainingSet {
        obs: Array2::from_shape_vec((n, obs_dim), obs_rows).expect("rows sized above"),
        chunks: Array2::from_shape_vec((n, t_p * ACTION_DIM), chunk_rows).expect("rows sized above"),
    })
}

fn normalized(set: &TrainingSet, obs_norm: &Standardizer, act_norm: &MinMaxNormalizer) -> TrainingSet {
    let mut obs = set.obs.clone();
    for mut row in obs.rows_mut() {
        obs_norm.normalize(row.as_slice_mut().expect("standard layout"));
    }
    let mut chunks = set.chunks.clone();
    for mut row in chunks.rows_mut() {
        act_norm.normalize(row.as_slice_mut().expect("standard layout"));
    }
    TrainingSet { obs, chunks }
}

fn mean_loss(
    net: &Denoiser,
    schedule: &NoiseSchedule,
    set: &TrainingSet,
    batch: usize,
    seed: u64,
) -> Result<f64, PolicyError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let idx: Vec<usize> = (0..set.len()).collect();
    let mut total = 0.0;
    for c in idx.chunks(batch) {
        let (o, x) = set.select(c);
        let ks: Vec<usize> = c.iter().map(|_| rng.random_range(1..=schedule.num_steps())).collect();
        let eps = Array2::from_shape_simple_fn(x.raw_dim(), || rng.sample::<f64, _>(StandardNormal));
        let xk = noise_batch(schedule, x.view(), &ks, eps.view())?;
        let pred = net.predict(xk.view(), o.view(), &ks);
        let (loss, _) = mse_loss(pred.view(), eps.view())?;
        total += loss * c.len() as f64;
    }
    Ok(total / set.len() as f64)
}

/// Fits a diffusion policy to `demos` by minibatch noise-prediction regression.
///
/// Whole episodes are held out (`holdout_fraction`), chosen by a seeded shuffle.
/// Identical inputs and config give bit-identical parameters.
pub fn train(demos: &[Demonstration], config: &TrainConfig) -> Result<(DiffusionPolicy, TrainLog), PolicyError> {
    config.chunking.validate()?;
    if demos.is_empty() || config.batch_size == 0 {
        return Err(PolicyError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..demos.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = if demos.len() > 1 { (demos.len() as f64 * config.holdout_fraction).round() as usize } else { 0 };
    let (hold_idx, train_idx) = order.split_at(n_hold.min(demos.len() - 1));
    let mut train_idx = train_idx.to_vec();
    train_idx.sort_unstable();
    let mut hold_idx = hold_idx.to_vec();
    hold_idx.sort_unstable();

    let t_p = config.chunking.t_p;
    let raw = build_training_set(train_idx.iter().map(|&i| &demos[i]), t_p, config.features)?;
    let obs_dim = raw.obs.ncols();
    let obs_norm = Standardizer::fit(obs_dim, raw.obs.rows().into_iter().map(|r| r.to_slice().expect("standard layout")));
    let act_norm = MinMaxNormalizer::fit(
        ACTION_DIM,
        raw.chunks
            .as_slice()
            .expect("standard layout")
            .chunks(ACTION_DIM),
    );
    let set = normalized(&raw, &obs_norm, &act_norm);
    let holdout = if hold_idx.is_empty() {
        None
    } else {
        let h = build_training_set(hold_idx.iter().map(|&i| &demos[i]), t_p, config.features)?;
        if h.obs.ncols() != obs_dim {
            return Err(PolicyError::SchemaMismatch("held-out observation length differs".into()));
        }
        Some(normalized(&h, &obs_norm, &act_norm))
    };

    let schedule = NoiseSchedule::scaled_linear(config.diffusion_steps)?;
    let shape = DenoiserShape { chunk_dim: t_p * ACTION_DIM, obs_dim, embed_dim: EMBED_DIM };
    let mut net = Denoiser::new(shape, &config.hidden, &mut rng);
    let mut opt = Optimizer::new(config.optimizer, config.learning_rate, net.mlp.num_params());
    let eval_seed = config.seed ^ 0x5e_ed0f_e7a1;
    let initial_loss = mean_loss(&net, &schedule, &set, config.batch_size, eval_seed)?;

    let mut epoch_losses = Vec::with_capacity(config.epochs);
    let mut holdout_losses = Vec::new();
    let mut idx: Vec<usize> = (0..set.len()).collect();
    for epoch in 0..config.epochs {
        opt.set_learning_rate(config.lr_schedule.rate(config.learning_rate, epoch, config.epochs));
        idx.shuffle(&mut rng);
        let mut total = 0.0;
        for c in idx.chunks(config.batch_size) {
            let (o, x) = set.select(c);
            let (loss, grads) = bc_loss(&net, &schedule, o.view(), x.view(), &mut rng)?;
            if !loss.is_finite() || loss > config.divergence_threshold {
                log::error!("diverged at epoch {epoch}, batch loss {loss}");
                return Err(PolicyError::Diverged { epoch, loss });
            }
            opt.step(&mut net, &grads);
            total += loss * c.len() as f64;
        }
        let epoch_loss = total / set.len() as f64;
        epoch_losses.push(epoch_loss);
        if let Some(h) = &holdout {
            let hl = mean_loss(&net, &schedule, h, config.batch_size, eval_seed)?;
            holdout_losses.push(hl);
            log::info!("epoch {epoch}: train {epoch_loss:.5} held-out {hl:.5}");
        } else {
            log::info!("epoch {epoch}: train {epoch_loss:.5}");
        }
    }

    let policy = DiffusionPolicy {
        denoiser: net,
        schedule,
        chunking: config.chunking,
        features: config.features,
        clip_sample: config.clip_sample,
        action_norm: act_norm,
        obs_norm,
        meta: BTreeMap::new(),
    };
    let log = TrainLog {
        initial_loss,
        epoch_losses,
        holdout_losses,
        train_samples: set.len(),
        holdout_samples: holdout.as_ref().map_or(0, |h| h.len()),
    };
    Ok((policy, log))
}
