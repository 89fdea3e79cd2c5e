//! On-disk dataset: a JSON `manifest`, an `episodes.idx` file with one JSON
//! record per episode, and an `episodes.bin` file of little-endian f64 blocks
//! referenced by offset from the index.
//!
//! Every file starts with a schema version line. The manifest carries a
//! SHA-256 over the index and block payloads (everything after the version
//! lines), so any flipped bit or truncation is caught on read.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{self, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::augment::{AcceptedEpisode, AugmentConfig};
use crate::pose::{Pose, Vec3};
use crate::randomize::{Embodiment, FactorSet, RandomizationConfig, SceneConfig};
use crate::sim::TaskSpec;
use crate::trajectory::{Action, DemoSource, Demonstration, EeState, SubtaskSegment, Timestep, ACTION_DIM};

pub const SCHEMA_VERSION: &str = "scenegen-dataset/1";
pub const GENERATOR_VERSION: &str = concat!("scenegen ", env!("CARGO_PKG_VERSION"));

pub const MANIFEST_FILE: &str = "manifest";
pub const INDEX_FILE: &str = "episodes.idx";
pub const BLOCKS_FILE: &str = "episodes.bin";

/// Pose (7) plus gripper opening.
const STATE_DIM: usize = 8;
const HEIGHT_BINS: usize = 10;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error("{file}: schema version {found:?}, this build reads {expected:?}; regenerate the dataset with this version")]
    Version { file: String, found: String, expected: String },
    #[error("{file}: corrupt: {reason}")]
    Corrupt { file: String, reason: String },
    #[error("content hash mismatch: manifest says {expected}, data hashes to {actual}")]
    HashMismatch { expected: String, actual: String },
    #[error("episode {index} rejected: {reason}")]
    InvalidEpisode { index: usize, reason: String },
    #[error("episode {0} out of range")]
    NoSuchEpisode(usize),
}

impl DatasetError {
    /// True for damage to stored bytes, as opposed to io or version problems.
    pub fn is_corruption(&self) -> bool {
        matches!(self, DatasetError::Corrupt { .. } | DatasetError::HashMismatch { .. })
    }

    fn corrupt(file: &str, reason: impl Into<String>) -> Self {
        DatasetError::Corrupt { file: file.to_string(), reason: reason.into() }
    }
}

/// Everything that determines a dataset's content besides the worker count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationConfig {
    pub task: TaskSpec,
    pub randomization: RandomizationConfig,
    pub augment: AugmentConfig,
    pub seed_demos: usize,
    pub seed_demo_seed: u64,
    pub max_attempts: usize,
}

/// One stored, successful episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRecord {
    pub episode_index: usize,
    pub seed: u64,
    pub scene: SceneConfig,
    pub demo: Demonstration,
    pub success: bool,
    pub generator_version: String,
}

impl From<AcceptedEpisode> for EpisodeRecord {
    fn from(e: AcceptedEpisode) -> Self {
        Self {
            episode_index: e.episode_index,
            seed: e.seed,
            scene: e.scene,
            demo: e.demo,
            success: true,
            generator_version: GENERATOR_VERSION.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct IndexEntry {
    episode_index: usize,
    seed: u64,
    scene: SceneConfig,
    embodiment: Embodiment,
    source: DemoSource,
    segments: Vec<SubtaskSegment>,
    success: bool,
    generator_version: String,
    steps: usize,
    obs_dim: usize,
    offset: u64,
    bytes: u64,
}

/// Summary of the sampled scene factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorMarginals {
    pub camera_counts: BTreeMap<usize, usize>,
    pub light_mean: [f64; 3],
    pub texture_counts: BTreeMap<usize, usize>,
    /// Bin edges span the configured height range.
    pub height_histogram: Vec<usize>,
    pub embodiment_counts: BTreeMap<String, usize>,
}

impl FactorMarginals {
    pub fn from_scenes<'a>(scenes: impl IntoIterator<Item = &'a SceneConfig>, height_range: [f64; 2]) -> Self {
        let mut m = FactorMarginals {
            camera_counts: BTreeMap::new(),
            light_mean: [0.0; 3],
            texture_counts: BTreeMap::new(),
            height_histogram: vec![0; HEIGHT_BINS],
            embodiment_counts: BTreeMap::new(),
        };
        let mut n = 0usize;
        for s in scenes {
            n += 1;
            *m.camera_counts.entry(s.camera_index).or_default() += 1;
            for (acc, v) in m.light_mean.iter_mut().zip(s.light_rgb) {
                *acc += v;
            }
            *m.texture_counts.entry(s.texture_id).or_default() += 1;
            let [lo, hi] = height_range;
            let u = ((s.table_height_delta - lo) / (hi - lo) * HEIGHT_BINS as f64).floor();
            m.height_histogram[(u.max(0.0) as usize).min(HEIGHT_BINS - 1)] += 1;
            *m.embodiment_counts.entry(s.embodiment.name().to_string()).or_default() += 1;
        }
        if n > 0 {
            m.light_mean.iter_mut().for_each(|v| *v /= n as f64);
        }
        m
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub task: String,
    pub factors: FactorSet,
    pub master_seed: u64,
    pub episode_count: usize,
    pub attempts: usize,
    pub generation_success_rate: f64,
    /// Failed attempts keyed by the subtask index they stopped at.
    pub failures_by_subtask: BTreeMap<usize, usize>,
    pub config: GenerationConfig,
    pub marginals: FactorMarginals,
    pub content_hash: String,
}

/// Generation bookkeeping that goes into the manifest next to the episodes.
#[derive(Debug, Clone, PartialEq)]
pub struct GenerationSummary {
    pub config: GenerationConfig,
    pub attempts: usize,
    pub failures_by_subtask: BTreeMap<usize, usize>,
}

fn version_line() -> Vec<u8> {
    format!("{SCHEMA_VERSION}\n").into_bytes()
}

fn block_bytes(demo: &Demonstration) -> Vec<u8> {
    let steps = demo.timesteps();
    let obs_dim = steps.first().map_or(0, |t| t.observation.len());
    let mut out = Vec::with_capacity(16 + steps.len() * (STATE_DIM + obs_dim + ACTION_DIM) * 8);
    out.extend_from_slice(&(steps.len() as u64).to_le_bytes());
    out.extend_from_slice(&(obs_dim as u64).to_le_bytes());
    for t in steps {
        let floats = t
            .state
            .pose
            .to_array7()
            .into_iter()
            .chain([t.state.gripper_opening])
            .chain(t.observation.iter().copied())
            .chain(t.action.to_array());
        for v in floats {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Appends episodes in order and writes the manifest on [`DatasetWriter::finish`].
pub struct DatasetWriter {
    dir: PathBuf,
    idx: BufWriter<File>,
    bin: BufWriter<File>,
    hasher: Sha256,
    offset: u64,
    scenes: Vec<SceneConfig>,
}

impl DatasetWriter {
    pub fn create(dir: &Path) -> Result<Self, DatasetError> {
        fs::create_dir_all(dir)?;
        let mut idx = BufWriter::new(File::create(dir.join(INDEX_FILE))?);
        let mut bin = BufWriter::new(File::create(dir.join(BLOCKS_FILE))?);
        idx.write_all(&version_line())?;
        bin.write_all(&version_line())?;
        Ok(Self { dir: dir.to_path_buf(), idx, bin, hasher: Sha256::new(), offset: 0, scenes: Vec::new() })
    }

    pub fn append(&mut self, record: &EpisodeRecord) -> Result<(), DatasetError> {
        let expected = self.scenes.len();
        let reject = |reason: &str| DatasetError::InvalidEpisode { index: record.episode_index, reason: reason.into() };
        if record.episode_index != expected {
            return Err(reject(&format!("expected episode_index {expected}")));
        }
        if !record.success {
            return Err(reject("only successful episodes are stored"));
        }
        let obs_dim = record.demo.timesteps()[0].observation.len();
        if record.demo.timesteps().iter().any(|t| t.observation.len() != obs_dim) {
            return Err(reject("observation lengths differ within the episode"));
        }
        let block = block_bytes(&record.demo);
        let entry = IndexEntry {
            episode_index: record.episode_index,
            seed: record.seed,
            scene: record.scene.clone(),
            embodiment: record.demo.embodiment,
            source: record.demo.source,
            segments: record.demo.segments().to_vec(),
            success: record.success,
            generator_version: record.generator_version.clone(),
            steps: record.demo.len(),
            obs_dim,
            offset: self.offset,
            bytes: block.len() as u64,
        };
        let mut line = serde_json::to_vec(&entry).map_err(|e| reject(&e.to_string()))?;
        line.push(b'\n');
        self.hasher.update(&line);
        self.hasher.update(&block);
        self.idx.write_all(&line)?;
        self.bin.write_all(&block)?;
        self.offset += block.len() as u64;
        self.scenes.push(record.scene.clone());
        Ok(())
    }

    pub fn finish(mut self, summary: GenerationSummary) -> Result<Manifest, DatasetError> {
        self.idx.flush()?;
        self.bin.flush()?;
        let episode_count = self.scenes.len();
        let cfg = summary.config;
        let manifest = Manifest {
            task: cfg.task.kind.name().to_string(),
            factors: cfg.randomization.factors.clone(),
            master_seed: cfg.randomization.master_seed,
            episode_count,
            attempts: summary.attempts,
            generation_success_rate: if summary.attempts == 0 {
                0.0
            } else {
                episode_count as f64 / summary.attempts as f64
            },
            failures_by_subtask: summary.failures_by_subtask,
            marginals: FactorMarginals::from_scenes(&self.scenes, cfg.randomization.height_range),
            config: cfg,
            content_hash: hex::encode(self.hasher.finalize()),
        };
        let mut text = version_line();
        serde_json::to_writer_pretty(&mut text, &manifest).map_err(io::Error::other)?;
        text.push(b'\n');
        fs::write(self.dir.join(MANIFEST_FILE), text)?;
        Ok(manifest)
    }
}

/// Writes `records` (in episode order) and the manifest into `dir`.
pub fn write_dataset<'a>(
    dir: &Path,
    records: impl IntoIterator<Item = &'a EpisodeRecord>,
    summary: GenerationSummary,
) -> Result<Manifest, DatasetError> {
    let mut w = DatasetWriter::create(dir)?;
    for r in records {
        w.append(r)?;
    }
    w.finish(summary)
}

/// Splits off and checks the version line.
fn strip_version<'a>(file: &str, bytes: &'a [u8]) -> Result<&'a [u8], DatasetError> {
    let Some(nl) = bytes.iter().position(|&b| b == b'\n') else {
        return Err(DatasetError::corrupt(file, "missing schema version line"));
    };
    let found = String::from_utf8_lossy(&bytes[..nl]).into_owned();
    if found != SCHEMA_VERSION {
        return Err(DatasetError::Version { file: file.to_string(), found, expected: SCHEMA_VERSION.to_string() });
    }
    Ok(&bytes[nl + 1..])
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, DatasetError> {
    let bytes = fs::read(dir.join(MANIFEST_FILE))?;
    let body = strip_version(MANIFEST_FILE, &bytes)?;
    serde_json::from_slice(body).map_err(|e| DatasetError::corrupt(MANIFEST_FILE, e.to_string()))
}

/// Index plus random access to episode blocks. Opening does not verify the
/// content hash; [`read_dataset`] does.
pub struct DatasetReader {
    pub manifest: Manifest,
    entries: Vec<IndexEntry>,
    bin: File,
    bin_len: u64,
}

impl DatasetReader {
    pub fn open(dir: &Path) -> Result<Self, DatasetError> {
        let manifest = read_manifest(dir)?;
        let idx = fs::read(dir.join(INDEX_FILE))?;
        let body = strip_version(INDEX_FILE, &idx)?;
        let mut entries = Vec::new();
        if !body.is_empty() && body.last() != Some(&b'\n') {
            return Err(DatasetError::corrupt(INDEX_FILE, "last record is truncated"));
        }
        for (i, line) in body.split(|&b| b == b'\n').filter(|l| !l.is_empty()).enumerate() {
            let e: IndexEntry = serde_json::from_slice(line)
                .map_err(|err| DatasetError::corrupt(INDEX_FILE, format!("record {i}: {err}")))?;
            if e.episode_index != i {
                return Err(DatasetError::corrupt(INDEX_FILE, format!("record {i} has episode_index {}", e.episode_index)));
            }
            entries.push(e);
        }
        if entries.len() != manifest.episode_count {
            return Err(DatasetError::corrupt(
                INDEX_FILE,
                format!("{} records, manifest lists {}", entries.len(), manifest.episode_count),
            ));
        }
        let mut bin = File::open(dir.join(BLOCKS_FILE))?;
        let mut head = vec![0u8; SCHEMA_VERSION.len() + 1];
        bin.read_exact(&mut head).map_err(|_| DatasetError::corrupt(BLOCKS_FILE, "missing schema version line"))?;
        strip_version(BLOCKS_FILE, &head)?;
        let bin_len = bin.metadata()?.len() - head.len() as u64;
        let mut expected_offset = 0;
        for e in &entries {
            if e.offset != expected_offset {
                return Err(DatasetError::corrupt(INDEX_FILE, format!("episode {} block offset out of order", e.episode_index)));
            }
            expected_offset += e.bytes;
        }
        if expected_offset != bin_len {
            return Err(DatasetError::corrupt(BLOCKS_FILE, format!("{bin_len} payload bytes, index expects {expected_offset}")));
        }
        Ok(Self { manifest, entries, bin, bin_len })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn raw_block(&mut self, i: usize) -> Result<Vec<u8>, DatasetError> {
        let e = self.entries.get(i).ok_or(DatasetError::NoSuchEpisode(i))?;
        if e.offset + e.bytes > self.bin_len {
            return Err(DatasetError::corrupt(BLOCKS_FILE, format!("episode {i} extends past end of file")));
        }
        let mut buf = vec![0u8; e.bytes as usize];
        self.bin.seek(SeekFrom::Start(SCHEMA_VERSION.len() as u64 + 1 + e.offset))?;
        self.bin.read_exact(&mut buf)?;
        Ok(buf)
    }

    pub fn episode(&mut self, i: usize) -> Result<EpisodeRecord, DatasetError> {
        let block = self.raw_block(i)?;
        decode(&self.entries[i], &block)
    }

    /// Recomputes the content hash over index records and blocks.
    pub fn verify(&mut self) -> Result<(), DatasetError> {
        let mut hasher = Sha256::new();
        for i in 0..self.entries.len() {
            let mut line = serde_json::to_vec(&self.entries[i]).map_err(io::Error::other)?;
            line.push(b'\n');
            hasher.update(&line);
            hasher.update(self.raw_block(i)?);
        }
        let actual = hex::encode(hasher.finalize());
        if actual != self.manifest.content_hash {
            return Err(DatasetError::HashMismatch { expected: self.manifest.content_hash.clone(), actual });
        }
        Ok(())
    }
}

fn decode(e: &IndexEntry, block: &[u8]) -> Result<EpisodeRecord, DatasetError> {
    let bad = |reason: String| DatasetError::corrupt(BLOCKS_FILE, format!("episode {}: {reason}", e.episode_index));
    let word = |k: usize| u64::from_le_bytes(block[8 * k..8 * k + 8].try_into().expect("8 bytes"));
    if block.len() < 16 || !(block.len() - 16).is_multiple_of(8) {
        return Err(bad(format!("block of {} bytes", block.len())));
    }
    let (steps, obs_dim) = (word(0) as usize, word(1) as usize);
    if steps != e.steps || obs_dim != e.obs_dim {
        return Err(bad(format!("block header {steps}x{obs_dim} disagrees with index {}x{}", e.steps, e.obs_dim)));
    }
    let row = STATE_DIM + obs_dim + ACTION_DIM;
    if block.len() - 16 != steps * row * 8 {
        return Err(bad(format!("expected {} floats", steps * row)));
    }
    let floats: Vec<f64> = block[16..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let mut timesteps = Vec::with_capacity(steps);
    for r in floats.chunks_exact(row) {
        let pose = Pose::from_array7(&r[..7]).map_err(|err| bad(err.to_string()))?;
        let a = &r[STATE_DIM + obs_dim..];
        timesteps.push(Timestep {
            state: EeState { pose, gripper_opening: r[7] },
            observation: r[STATE_DIM..STATE_DIM + obs_dim].to_vec(),
            action: Action {
                translation: Vec3::new(a[0], a[1], a[2]),
                rotation: Vec3::new(a[3], a[4], a[5]),
                gripper: a[6],
            },
        });
    }
    let demo = Demonstration::new(timesteps, e.segments.clone(), e.embodiment, e.source)
        .map_err(|err| bad(err.to_string()))?;
    Ok(EpisodeRecord {
        episode_index: e.episode_index,
        seed: e.seed,
        scene: e.scene.clone(),
        demo,
        success: e.success,
        generator_version: e.generator_version.clone(),
    })
}

/// A fully loaded and hash-verified dataset.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub episodes: Vec<EpisodeRecord>,
}

impl Dataset {
    pub fn demonstrations(&self) -> Vec<Demonstration> {
        self.episodes.iter().map(|e| e.demo.clone()).collect()
    }
}

pub fn read_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let mut reader = DatasetReader::open(dir)?;
    reader.verify()?;
    let episodes = (0..reader.len()).map(|i| reader.episode(i)).collect::<Result<Vec<_>, _>>()?;
    Ok(Dataset { manifest: reader.manifest, episodes })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

impl RangeStats {
    fn of(values: impl IntoIterator<Item = f64>) -> Self {
        let (mut min, mut max, mut sum, mut n) = (f64::INFINITY, f64::NEG_INFINITY, 0.0, 0usize);
        for v in values {
            min = min.min(v);
            max = max.max(v);
            sum += v;
            n += 1;
        }
        if n == 0 {
            return Self { min: 0.0, max: 0.0, mean: 0.0 };
        }
        Self { min, max, mean: sum / n as f64 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub task: String,
    pub factors: FactorSet,
    pub episodes: usize,
    pub generation_success_rate: f64,
    /// Indexed by camera; length is the rig size.
    pub camera_counts: Vec<usize>,
    /// Every camera used floor(E/N) or ceil(E/N) times. Vacuously true when
    /// camera randomization is off.
    pub camera_balanced: bool,
    pub light_mean: [f64; 3],
    pub texture_counts: BTreeMap<usize, usize>,
    pub height_histogram: Vec<usize>,
    pub embodiment_counts: BTreeMap<String, usize>,
    pub episode_length: RangeStats,
    pub action_translation_norm: RangeStats,
    pub action_rotation_norm: RangeStats,
    /// Largest distance between a stored ee position and the one reached by
    /// accumulating delta actions from the episode's first state.
    pub action_roundtrip_max_error: f64,
}

pub fn dataset_stats(dir: &Path) -> Result<DatasetStats, DatasetError> {
    let ds = read_dataset(dir)?;
    Ok(stats_of(&ds))
}

pub fn stats_of(ds: &Dataset) -> DatasetStats {
    let m = &ds.manifest;
    let n_cam = m.config.randomization.camera.num_poses.max(1);
    let mut camera_counts = vec![0; n_cam];
    for e in &ds.episodes {
        if let Some(c) = camera_counts.get_mut(e.scene.camera_index) {
            *c += 1;
        }
    }
    let camera_balanced = !m.factors.contains(crate::randomize::Factor::Camera) || {
        let lo = ds.episodes.len() / n_cam;
        let hi = ds.episodes.len().div_ceil(n_cam);
        camera_counts.iter().all(|&c| c == lo || c == hi)
    };
    let marg = FactorMarginals::from_scenes(ds.episodes.iter().map(|e| &e.scene), m.config.randomization.height_range);
    let actions = || ds.episodes.iter().flat_map(|e| e.demo.timesteps().iter().map(|t| t.action));
    DatasetStats {
        task: m.task.clone(),
        factors: m.factors.clone(),
        episodes: ds.episodes.len(),
        generation_success_rate: m.generation_success_rate,
        camera_counts,
        camera_balanced,
        light_mean: marg.light_mean,
        texture_counts: marg.texture_counts,
        height_histogram: marg.height_histogram,
        embodiment_counts: marg.embodiment_counts,
        episode_length: RangeStats::of(ds.episodes.iter().map(|e| e.demo.len() as f64)),
        action_translation_norm: RangeStats::of(actions().map(|a| a.translation.norm())),
        action_rotation_norm: RangeStats::of(actions().map(|a| a.rotation.norm())),
        action_roundtrip_max_error: ds.episodes.iter().map(|e| roundtrip_error(&e.demo)).fold(0.0, f64::max),
    }
}

/// Replays the delta actions from the first stored pose and returns the
/// largest position error against the stored poses.
pub fn roundtrip_error(demo: &Demonstration) -> f64 {
    let steps = demo.timesteps();
    let mut pose = steps[0].state.pose;
    let mut worst: f64 = 0.0;
    for w in steps.windows(2) {
        pose = pose.compose(&w[0].action.delta_pose());
        worst = worst.max(pose.translation_distance(&w[1].state.pose));
    }
    worst
}
