//! Pipeline configuration, read from TOML.
//!
//! Every section is optional and falls back to its documented default; only
//! `version` is required. Unknown keys are rejected at every level.
//!
//! ```toml
//! version = 1
//! seed = 7
//!
//! [views]
//! mode = "SD_FRONT"
//! count = 8
//!
//! [volume]
//! resolution = 150
//!
//! [refine]
//! iterations = 100
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::camera::{Intrinsics, PoseDistribution, SamplingMode, SamplingStrategy, DEFAULT_RADIUS};
use crate::costvolume::{GridSpec, DEFAULT_RESOLUTION};
use crate::error::{config_err, Error, Result};
use crate::features::ExtractorKind;
use crate::fields::FieldConfig;
use crate::mesh::MeshFinetuneConfig;
use crate::metrics::{CircleConfig, EmbeddingProvider, ExternalEmbedder, Modality, ToyEmbedder};
use crate::refine::{
    AnalyticGaussian, DiffusionSchedule, ExactNoise, External, Parameterization, ProviderKind, RefineConfig,
    ScheduleConfig, ScoreProvider, SmallNet, SmallNetConfig,
};
use crate::render::RenderConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub version: u32,
    /// Master seed; module seeds are XOR-ed with it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub views: ViewsConfig,
    #[serde(default)]
    pub volume: VolumeConfig,
    #[serde(default)]
    pub fields: FieldConfig,
    #[serde(default)]
    pub render: RenderConfig,
    #[serde(default)]
    pub schedule: ScheduleConfig,
    #[serde(default)]
    pub refine: RefineConfig,
    #[serde(default)]
    pub poses: PosesConfig,
    #[serde(default)]
    pub providers: ProvidersConfig,
    #[serde(default)]
    pub mesh: MeshFinetuneConfig,
    #[serde(default)]
    pub metrics: MetricsConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            version: CONFIG_VERSION,
            seed: 0,
            views: ViewsConfig::default(),
            volume: VolumeConfig::default(),
            fields: FieldConfig::default(),
            render: RenderConfig::default(),
            schedule: ScheduleConfig::default(),
            refine: RefineConfig::default(),
            poses: PosesConfig::default(),
            providers: ProvidersConfig::default(),
            mesh: MeshFinetuneConfig::default(),
            metrics: MetricsConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ViewsConfig {
    pub mode: SamplingMode,
    pub count: usize,
    pub resolution: u32,
    pub fov: f64,
    pub radius: f64,
    /// Overrides the mode's source-view bounds when set.
    pub azimuth_limit: Option<f64>,
    pub elevation_limit: Option<f64>,
}

impl Default for ViewsConfig {
    fn default() -> Self {
        ViewsConfig {
            mode: SamplingMode::SdFront,
            count: 8,
            resolution: 64,
            fov: 45.0,
            radius: DEFAULT_RADIUS,
            azimuth_limit: None,
            elevation_limit: None,
        }
    }
}

impl ViewsConfig {
    pub fn strategy(&self, seed: u64) -> SamplingStrategy {
        let k = Intrinsics::square(self.resolution, self.fov);
        let mut s = match self.mode {
            SamplingMode::SdFront => SamplingStrategy::sd_front(self.count, seed, k),
            SamplingMode::MvdreamFour => SamplingStrategy::mvdream_four(self.count, seed, k),
        };
        s.radius = self.radius;
        if let Some(a) = self.azimuth_limit {
            s.azimuth_limit = a;
        }
        if let Some(e) = self.elevation_limit {
            s.elevation_limit = e;
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VolumeConfig {
    /// Voxels per side.
    pub resolution: usize,
    /// Grid spans `[-half_extent, half_extent]³`.
    pub half_extent: f64,
    pub extractor: ExtractorKind,
    pub extractor_weights: Option<PathBuf>,
    /// 3D convolution weights; identity when unset.
    pub conv3d_weights: Option<PathBuf>,
}

impl Default for VolumeConfig {
    fn default() -> Self {
        VolumeConfig {
            resolution: DEFAULT_RESOLUTION,
            half_extent: 1.0,
            extractor: ExtractorKind::Identity,
            extractor_weights: None,
            conv3d_weights: None,
        }
    }
}

impl VolumeConfig {
    pub fn grid(&self) -> GridSpec {
        GridSpec::cube(self.resolution, self.half_extent)
    }
}

/// Camera distribution for refinement renders.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PosesConfig {
    pub azimuth: [f64; 2],
    pub elevation: [f64; 2],
    pub radius: [f64; 2],
    pub resolution: u32,
    pub fov: f64,
}

impl Default for PosesConfig {
    fn default() -> Self {
        PosesConfig {
            azimuth: [0.0, 360.0],
            elevation: [-10.0, 45.0],
            radius: [DEFAULT_RADIUS, DEFAULT_RADIUS],
            resolution: 32,
            fov: 45.0,
        }
    }
}

impl PosesConfig {
    pub fn distribution(&self) -> PoseDistribution {
        PoseDistribution {
            azimuth: self.azimuth,
            elevation: self.elevation,
            radius: self.radius,
            intrinsics: Intrinsics::square(self.resolution, self.fov),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProviderSpec {
    pub kind: ProviderKind,
    pub parameterization: Parameterization,
    /// Constant image mean of the analytic Gaussian provider.
    pub mean: f64,
    pub variance: f64,
    pub small_net: SmallNetConfig,
    /// `host:port` of an external provider.
    pub address: Option<String>,
    /// Program and arguments of an external provider speaking over stdio.
    pub command: Vec<String>,
}

impl Default for ProviderSpec {
    fn default() -> Self {
        ProviderSpec {
            kind: ProviderKind::AnalyticGaussian,
            parameterization: Parameterization::Epsilon,
            mean: 0.5,
            variance: 0.05,
            small_net: SmallNetConfig::default(),
            address: None,
            command: Vec::new(),
        }
    }
}

impl ProviderSpec {
    /// `pixels` is the length of one rendered image (`w·h·3`).
    pub fn build(&self, pixels: usize, schedule: &DiffusionSchedule, seed: u64) -> Result<Box<dyn ScoreProvider>> {
        Ok(match self.kind {
            ProviderKind::AnalyticGaussian => Box::new(AnalyticGaussian {
                mean: vec![self.mean; pixels],
                variance: self.variance,
            }),
            ProviderKind::ExactNoise => Box::new(ExactNoise),
            ProviderKind::TrainableSmallNet => {
                let cfg = SmallNetConfig {
                    seed: self.small_net.seed ^ seed,
                    ..self.small_net.clone()
                };
                Box::new(SmallNet::new(cfg, schedule.config.steps)?)
            }
            ProviderKind::External => match (&self.address, self.command.split_first()) {
                (Some(addr), _) => Box::new(External::connect(addr, self.parameterization)?),
                (None, Some((prog, args))) => Box::new(External::spawn(prog, args, self.parameterization)?),
                (None, None) => return Err(config_err("external provider needs `address` or `command`")),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProvidersConfig {
    pub pretrained: ProviderSpec,
    pub lora: ProviderSpec,
}

impl Default for ProvidersConfig {
    fn default() -> Self {
        ProvidersConfig {
            pretrained: ProviderSpec::default(),
            lora: ProviderSpec {
                kind: ProviderKind::TrainableSmallNet,
                ..ProviderSpec::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EmbedderSource {
    ToyDeterministic,
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderSpec {
    pub kind: EmbedderSource,
    pub dimension: usize,
    pub address: Option<String>,
    pub command: Vec<String>,
}

impl Default for EmbedderSpec {
    fn default() -> Self {
        EmbedderSpec {
            kind: EmbedderSource::ToyDeterministic,
            dimension: 64,
            address: None,
            command: Vec::new(),
        }
    }
}

impl EmbedderSpec {
    pub fn build(&self, modality: Modality, seed: u64) -> Result<Box<dyn EmbeddingProvider>> {
        Ok(match self.kind {
            EmbedderSource::ToyDeterministic => Box::new(ToyEmbedder::new(modality, self.dimension, seed)?),
            EmbedderSource::External => match (&self.address, self.command.split_first()) {
                (Some(addr), _) => Box::new(ExternalEmbedder::connect(addr, modality, self.dimension)?),
                (None, Some((prog, args))) => Box::new(ExternalEmbedder::spawn(prog, args, modality, self.dimension)?),
                (None, None) => return Err(config_err("external embedder needs `address` or `command`")),
            },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub circle: CircleConfig,
    pub captions: Vec<String>,
    /// Index of the caption describing the evaluated asset.
    pub correct: usize,
    /// Directory of reference PNGs for the Fréchet distance.
    pub reference_dir: Option<PathBuf>,
    pub image: EmbedderSpec,
    pub text: EmbedderSpec,
    pub points: EmbedderSpec,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig {
            circle: CircleConfig::default(),
            captions: ["a sphere", "a cube", "a chair", "a car"].map(String::from).to_vec(),
            correct: 0,
            reference_dir: None,
            image: EmbedderSpec::default(),
            text: EmbedderSpec::default(),
            points: EmbedderSpec::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<PipelineConfig> {
        let cfg: PipelineConfig = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::from(e).at(path))?;
        PipelineConfig::from_toml(&text).map_err(|e| e.at(path))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err(e.to_string()))
    }

    /// SHA-256 of the canonical TOML form, hex encoded.
    pub fn hash(&self) -> Result<String> {
        let digest = Sha256::digest(self.to_toml()?.as_bytes());
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(config_err(format!(
                "unsupported config version {}, expected {CONFIG_VERSION}",
                self.version
            )));
        }
        self.volume.grid().validate()?;
        self.render.validate()?;
        self.refine.validate()?;
        self.poses.distribution().validate()?;
        DiffusionSchedule::new(self.schedule.clone())?;
        if self.metrics.circle.count == 0 {
            return Err(config_err("metrics.circle.count must be at least 1"));
        }
        if self.metrics.correct >= self.metrics.captions.len() {
            return Err(config_err("metrics.correct must index into metrics.captions"));
        }
        Ok(())
    }

    /// Seed used by a module whose own configured seed is `module_seed`.
    pub fn derived_seed(&self, module_seed: u64) -> u64 {
        self.seed ^ module_seed
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg = PipelineConfig::from_toml("version = 1\n").unwrap();
        assert_eq!(cfg, PipelineConfig::default());
        assert_eq!(cfg.volume.grid().dims, [150; 3]);
    }

    #[test]
    fn version_is_mandatory_and_checked() {
        assert!(PipelineConfig::from_toml("seed = 1\n").is_err());
        assert!(PipelineConfig::from_toml("version = 2\n").is_err());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(PipelineConfig::from_toml("version = 1\ncolour = 3\n").is_err());
        assert!(PipelineConfig::from_toml("version = 1\n[render]\nsample = 3\n").is_err());
        assert!(PipelineConfig::from_toml("version = 1\n[fields.hash]\nlevel = 3\n").is_err());
    }

    #[test]
    fn round_trip_is_a_fixed_point() {
        let mut cfg = PipelineConfig::default();
        cfg.seed = 11;
        cfg.views.mode = SamplingMode::MvdreamFour;
        cfg.views.azimuth_limit = Some(30.0);
        cfg.render.resolution = Some(128);
        cfg.providers.pretrained.address = Some("127.0.0.1:9000".into());
        let text = cfg.to_toml().unwrap();
        let back = PipelineConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.to_toml().unwrap(), text);
    }
}
