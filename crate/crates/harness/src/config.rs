use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use semedit_core::container::config_hash;
use semedit_core::directions::{GanspaceConfig, Method};
use semedit_core::discovery::DiscoveryConfig;
use semedit_core::generator::{GeneratorConfig, TapSpec};
use semedit_core::metrics::Metric;
use semedit_core::rng::derive_seed;
use semedit_core::synth::SyntheticSceneSpec;
use semedit_core::training::{SegmenterConfig, TrainConfig};

use crate::error::{HarnessError, Result};

const TAG_TRAIN: u64 = 0x7a1;
const TAG_SEGMENTER: u64 = 0x5e6;
const TAG_DISCOVERY_MAPS: u64 = 0xd1;
const TAG_EVAL_MAPS: u64 = 0xe1;
const TAG_QUALITY_MAPS: u64 = 0xe2;
const TAG_PROTOCOL: u64 = 0xe3;
const TAG_METHOD: u64 = 0x3e;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscoverySection {
    pub methods: Vec<Method>,
    /// Empty means every class of the scene spec.
    #[serde(default)]
    pub classes: Vec<usize>,
    pub map_seed: u64,
    pub ctrl_sis: DiscoveryConfig,
    pub ganspace: GanspaceConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub label_maps: usize,
    pub map_seed: u64,
    pub latent_codes: usize,
    pub global_edits: usize,
    pub protocol_seed: u64,
    /// Images per method for FID-lite and mIoU-proxy.
    pub quality_samples: usize,
    pub distance: String,
    pub metrics: Vec<Metric>,
    pub ablation_seeds: Vec<u64>,
}

/// Everything one experiment needs. Section seeds are mixed with the
/// global `seed`, so changing it alone re-draws every stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub scene: SyntheticSceneSpec,
    pub generator: GeneratorConfig,
    pub training: TrainConfig,
    pub segmenter: SegmenterConfig,
    pub discovery: DiscoverySection,
    pub eval: EvalSection,
}

impl Default for ExperimentConfig {
    /// 64×64 scenes, D=64, 20k GAN steps, 2k joint discovery steps.
    fn default() -> Self {
        let generator = GeneratorConfig::default();
        Self {
            seed: 0,
            output_dir: PathBuf::from("runs/default"),
            scene: SyntheticSceneSpec::default(),
            generator: generator.clone(),
            training: TrainConfig::default(),
            segmenter: SegmenterConfig::default(),
            discovery: DiscoverySection {
                methods: Method::ALL.to_vec(),
                classes: Vec::new(),
                map_seed: 0,
                ctrl_sis: DiscoveryConfig { taps: TapSpec::norm_layers(generator.blocks), ..DiscoveryConfig::default() },
                ganspace: GanspaceConfig::default(),
            },
            eval: EvalSection {
                label_maps: 100,
                map_seed: 0,
                latent_codes: 5,
                global_edits: 10,
                protocol_seed: 0,
                quality_samples: 500,
                distance: "features".into(),
                metrics: Metric::ALL.to_vec(),
                ablation_seeds: vec![0, 1, 2],
            },
        }
    }
}

impl ExperimentConfig {
    /// 32×32 scenes, D=16, three blocks, 600 GAN steps and 300 discovery
    /// steps: the budget the test suite trains end to end.
    pub fn test_scale() -> Self {
        let generator = GeneratorConfig { class_count: 6, latent_channels: 16, blocks: 3, width: 16, hidden: 16, image_size: 32 };
        let base = Self::default();
        Self {
            seed: 1,
            output_dir: PathBuf::from("runs/test_scale"),
            scene: SyntheticSceneSpec::with_size(32),
            generator: generator.clone(),
            training: TrainConfig {
                steps: 600,
                batch_size: 16,
                lr_generator: 1e-3,
                lr_discriminator: 2e-3,
                discriminator_width: 16,
                ..TrainConfig::default()
            },
            segmenter: SegmenterConfig { steps: 150, ..SegmenterConfig::default() },
            discovery: DiscoverySection {
                ctrl_sis: DiscoveryConfig {
                    epochs: 30,
                    dataset_maps: 160,
                    taps: TapSpec::norm_layers(generator.blocks),
                    ..DiscoveryConfig::default()
                },
                ..base.discovery
            },
            eval: EvalSection { label_maps: 12, latent_codes: 3, global_edits: 4, quality_samples: 64, ..base.eval },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| HarnessError::Usage(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| HarnessError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is plain data")
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.generator.validate()?;
        self.discovery.ctrl_sis.validate()?;
        if self.scene.class_count != self.generator.class_count
            || self.scene.height != self.generator.image_size
            || self.scene.width != self.generator.image_size
        {
            return Err(HarnessError::Usage("scene spec and generator config disagree on size or classes".into()));
        }
        if let Some(&c) = self.discovery.classes.iter().find(|&&c| c >= self.scene.class_count) {
            return Err(HarnessError::Usage(format!("class {c} out of range")));
        }
        if self.eval.label_maps == 0 || self.eval.latent_codes < 2 {
            return Err(HarnessError::Usage("evaluation needs label maps and at least two latent codes".into()));
        }
        semedit_core::metrics::Distance::parse(&self.eval.distance)?;
        Ok(())
    }

    /// Canonical hash of the whole config; the output directory is left out
    /// so the same experiment hashes alike wherever it is written.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        Ok(config_hash(&c)?)
    }

    /// Hash of everything that shapes the checkpoint.
    pub fn training_lineage(&self) -> Result<String> {
        Ok(config_hash(&serde_json::json!({
            "seed": self.seed,
            "scene": self.scene,
            "generator": self.generator,
            "training": self.training,
            "segmenter": self.segmenter,
        }))?)
    }

    /// Hash of what shapes the directions given a checkpoint. The method
    /// and class lists are left out; every record names its own.
    pub fn discovery_lineage(&self) -> Result<String> {
        Ok(config_hash(&serde_json::json!({
            "training": self.training_lineage()?,
            "map_seed": self.discovery.map_seed,
            "ctrl_sis": self.discovery.ctrl_sis,
            "ganspace": self.discovery.ganspace,
        }))?)
    }

    pub fn classes(&self) -> Vec<usize> {
        if self.discovery.classes.is_empty() {
            (0..self.scene.class_count).collect()
        } else {
            self.discovery.classes.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: derive_seed(self.seed, &[TAG_TRAIN, self.training.seed]), ..self.training.clone() }
    }

    pub fn segmenter_config(&self) -> SegmenterConfig {
        SegmenterConfig { seed: derive_seed(self.seed, &[TAG_SEGMENTER, self.segmenter.seed]), ..self.segmenter.clone() }
    }

    pub fn discovery_map_seed(&self) -> u64 {
        derive_seed(self.seed, &[TAG_DISCOVERY_MAPS, self.discovery.map_seed])
    }

    pub fn eval_map_seed(&self) -> u64 {
        derive_seed(self.seed, &[TAG_EVAL_MAPS, self.eval.map_seed])
    }

    pub fn quality_map_seed(&self) -> u64 {
        derive_seed(self.seed, &[TAG_QUALITY_MAPS, self.eval.map_seed])
    }

    pub fn protocol_seed(&self) -> u64 {
        derive_seed(self.seed, &[TAG_PROTOCOL, self.eval.protocol_seed])
    }

    /// Seed of `method` for `class`; `run` separates ablation repeats.
    pub fn method_seed(&self, method: Method, class: usize, run: u64) -> u64 {
        derive_seed(self.seed, &[TAG_METHOD, method as u64, class as u64, run])
    }

    /// `n`: the configured bound or `E‖z‖` of the latent prior.
    pub fn alpha_bound(&self) -> f64 {
        self.discovery.ctrl_sis.resolve_alpha_bound(self.generator.latent_channels, self.seed)
    }
}
