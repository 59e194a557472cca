//! Run configuration, read from a TOML file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use msn::decoder::{DecoderKind, PercentileSpec};
use msn::detector::{DetectOptions, PostprocessConfig, StreamSelection};
use msn::encoder::{BackboneSource, Encoder, FEATURE_DIM, GRID};
use msn::imaging::Rotation;
use msn::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

/// Overrides `weights.dir` when set.
pub const WEIGHTS_ENV: &str = "MSN_WEIGHTS_DIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 uses one per core.
    pub workers: usize,
    pub paths: PathsConfig,
    pub weights: WeightsConfig,
    pub detect: DetectConfig,
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub schedule: TrainSchedule,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            workers: 0,
            paths: PathsConfig::default(),
            weights: WeightsConfig::default(),
            detect: DetectConfig::default(),
            synth: SynthConfig::default(),
            train: TrainConfig::desk(),
            schedule: TrainSchedule::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub corpus: PathBuf,
    pub dataset: PathBuf,
    pub run_dir: PathBuf,
    /// Encoder features are cached here during training; in memory when unset.
    pub feature_cache: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            corpus: "corpus".into(),
            dataset: "dataset".into(),
            run_dir: "runs".into(),
            feature_cache: Some("cache/features".into()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WeightsConfig {
    /// Holds `theta_<deg>.ckpt` per direction; sorted-percentile baselines
    /// live in its `1d` subdirectory.
    pub dir: PathBuf,
    /// Backbone checkpoint; a seeded random backbone is used when unset.
    pub encoder: Option<PathBuf>,
    pub encoder_seed: u64,
    /// Per-direction checkpoint overrides keyed `theta_0` .. `theta_270`.
    pub directions: BTreeMap<String, PathBuf>,
}

impl Default for WeightsConfig {
    fn default() -> Self {
        Self { dir: "weights".into(), encoder: None, encoder_seed: 0, directions: BTreeMap::new() }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Streams {
    Full,
    Rotations,
    Upright,
}

impl Streams {
    pub fn selection(self) -> StreamSelection {
        match self {
            Streams::Full => StreamSelection::full(),
            Streams::Rotations => StreamSelection::rotations_only(),
            Streams::Upright => StreamSelection::upright_only(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DetectConfig {
    pub threshold: f32,
    pub verdict_fraction: f64,
    pub min_component_fraction: f64,
    /// Multiplier applied to cosine similarities.
    pub similarity_scale: f32,
    /// Feature grid side; fixed by the backbone.
    pub grid: usize,
    /// Feature depth; fixed by the backbone.
    pub feature_dim: usize,
    pub streams: Streams,
}

impl Default for DetectConfig {
    fn default() -> Self {
        let post = PostprocessConfig::default();
        Self {
            threshold: post.threshold,
            verdict_fraction: post.verdict_fraction,
            min_component_fraction: post.min_component_fraction,
            similarity_scale: 1.0,
            grid: GRID,
            feature_dim: FEATURE_DIM,
            streams: Streams::Full,
        }
    }
}

impl DetectConfig {
    pub fn postprocess(&self) -> PostprocessConfig {
        PostprocessConfig {
            threshold: self.threshold,
            min_component_fraction: self.min_component_fraction,
            verdict_fraction: self.verdict_fraction,
        }
    }

    pub fn options(&self, dump_similarity: Option<PathBuf>) -> DetectOptions {
        DetectOptions {
            selection: self.streams.selection(),
            postprocess: self.postprocess(),
            similarity_scale: self.similarity_scale,
            dump_similarity,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub count: usize,
    pub rotation_range: (f64, f64),
    pub scale_range: (f64, f64),
    pub shape_decoupled_fraction: f64,
    /// Images in the procedural corpus generated when `paths.corpus` has no
    /// annotations; 0 disables generation.
    pub corpus_images: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 2000,
            rotation_range: (0.0, 360.0),
            scale_range: (0.8, 1.2),
            shape_decoupled_fraction: 0.0,
            corpus_images: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    /// Directions to train, in degrees.
    pub directions: Vec<u32>,
    pub scale_stream: bool,
    pub scale_epochs: usize,
    pub scale_max_samples: Option<usize>,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self { directions: vec![0, 90, 180, 270], scale_stream: true, scale_epochs: 6, scale_max_samples: Some(800) }
    }
}

impl TrainSchedule {
    pub fn rotations(&self) -> anyhow::Result<Vec<Rotation>> {
        self.directions.iter().map(|&d| Ok(Rotation::from_degrees(d as i64)?)).collect()
    }
}

/// Which decoder family a command trains or loads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    SimilarityMaps,
    SortedPercentiles,
}

impl Family {
    pub fn subdir(self) -> Option<&'static str> {
        match self {
            Family::SimilarityMaps => None,
            Family::SortedPercentiles => Some("1d"),
        }
    }

    /// Replaces a configured decoder of the other family with this family's default.
    pub fn decoder(self, configured: &DecoderKind) -> DecoderKind {
        match (self, configured) {
            (Family::SimilarityMaps, k @ DecoderKind::SimilarityMaps { .. }) => k.clone(),
            (Family::SimilarityMaps, _) => TrainConfig::desk().decoder,
            (Family::SortedPercentiles, k @ DecoderKind::SortedPercentiles { .. }) => k.clone(),
            (Family::SortedPercentiles, _) => {
                DecoderKind::SortedPercentiles { spec: PercentileSpec::default(), hidden: 64 }
            }
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> anyhow::Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let cfg: RunConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// The file if given, defaults otherwise.
    pub fn load_or_default(path: Option<&Path>) -> anyhow::Result<Self> {
        match path {
            Some(p) => Self::load(p),
            None => Ok(Self::default()),
        }
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let d = &self.detect;
        for (name, v) in [
            ("threshold", d.threshold as f64),
            ("verdict_fraction", d.verdict_fraction),
            ("min_component_fraction", d.min_component_fraction),
        ] {
            if !(v > 0.0 && v < 1.0) {
                bail!("detect.{name} must lie in (0, 1), got {v}");
            }
        }
        if !(d.similarity_scale > 0.0) {
            bail!("detect.similarity_scale must be positive");
        }
        if d.grid != GRID || d.feature_dim != FEATURE_DIM {
            bail!("the backbone produces a {GRID}x{GRID}x{FEATURE_DIM} grid; detect.grid and detect.feature_dim must match");
        }
        self.train.validate()?;
        self.schedule.rotations()?;
        for key in self.weights.directions.keys() {
            if !Rotation::ALL.iter().any(|r| key == &format!("theta_{}", r.degrees())) {
                bail!("unknown weights.directions key {key}; expected theta_0, theta_90, theta_180 or theta_270");
            }
        }
        Ok(())
    }

    /// Weights directory after the environment override.
    pub fn weights_dir(&self) -> PathBuf {
        match std::env::var_os(WEIGHTS_ENV) {
            Some(dir) if !dir.is_empty() => PathBuf::from(dir),
            _ => self.weights.dir.clone(),
        }
    }

    pub fn family_dir(&self, family: Family) -> PathBuf {
        let base = self.weights_dir();
        match family.subdir() {
            Some(sub) => base.join(sub),
            None => base,
        }
    }

    pub fn encoder(&self) -> anyhow::Result<Encoder> {
        let source = match &self.weights.encoder {
            Some(p) => BackboneSource::Checkpoint(p.clone()),
            None => {
                log::warn!("no encoder weights configured; using a random backbone (seed {})", self.weights.encoder_seed);
                BackboneSource::RandomInit { seed: self.weights.encoder_seed }
            }
        };
        Ok(Encoder::from_source(&source)?)
    }
}
