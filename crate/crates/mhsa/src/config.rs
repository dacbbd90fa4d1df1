//! Run configuration: one TOML document validated up front. Unknown keys are
//! rejected so typos cannot silently fall back to defaults.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::backbone::Provider;
use crate::branch::FusionMode;
use crate::data::{GridSpec, SyntheticSpec};
use crate::error::{Error, Result};
use crate::eval::Variant;
use crate::losses::LossWeights;
use crate::model::ModelConfig;
use crate::optim::LrSchedule;
use crate::sampler::SamplerConfig;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub backbone: BackboneSection,
    pub branch: BranchSection,
    pub loss: LossSection,
    pub sampler: SamplerSection,
    pub schedule: ScheduleSection,
    pub data: SyntheticSpec,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub paths: PathsSection,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BackboneSection {
    pub provider: String,
    pub hf: usize,
    pub wf: usize,
    pub c: usize,
    pub d: usize,
    /// Attention bottleneck width; defaults to c/4.
    #[serde(default)]
    pub hidden: Option<usize>,
    /// Encoder input channels (tiny-encoder provider).
    #[serde(default = "default_ci")]
    pub ci: usize,
    pub train_gfb_ce: bool,
}

fn default_ci() -> usize {
    8
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct BranchSection {
    pub enabled: bool,
    pub k: usize,
    pub fusion: String,
    pub rlm_enabled: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct LossSection {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub gamma: f64,
    pub margin: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    pub p_ids: usize,
    pub k_inst: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSection {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    /// Absolute decay points: [[epoch, lr], ...].
    #[serde(default)]
    pub decay: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    pub variant: String,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { variant: "full".to_string() }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct PathsSection {
    #[serde(default)]
    pub data: Option<String>,
    #[serde(default)]
    pub out: Option<String>,
}

impl RunConfig {
    /// The reference desk operating point: published balance weights and
    /// K = 8 on a 6x4 grid with C = 64, D = 32.
    pub fn desk_default() -> Self {
        RunConfig {
            seed: 7,
            backbone: BackboneSection {
                provider: "synthetic".into(),
                hf: 6,
                wf: 4,
                c: 64,
                d: 32,
                hidden: None,
                ci: 8,
                train_gfb_ce: true,
            },
            branch: BranchSection {
                enabled: true,
                k: 8,
                fusion: "saffm".into(),
                rlm_enabled: true,
            },
            loss: LossSection {
                lambda1: 1e-4,
                lambda2: 1.0,
                lambda3: 1e-3,
                gamma: 1e-3,
                margin: 3.0,
            },
            sampler: SamplerSection { p_ids: 4, k_inst: 4 },
            schedule: ScheduleSection {
                base_lr: 1e-3,
                warmup_epochs: 5,
                total_epochs: 150,
                decay: vec![(90, 1e-4), (130, 1e-5)],
            },
            data: SyntheticSpec::default(),
            eval: EvalSection::default(),
            paths: PathsSection::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("parsing config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Io(format!("reading {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn provider(&self) -> Result<Provider> {
        Provider::parse(&self.backbone.provider)
    }

    pub fn fusion(&self) -> Result<FusionMode> {
        FusionMode::parse(&self.branch.fusion)
    }

    pub fn variant(&self) -> Result<Variant> {
        Variant::parse(&self.eval.variant)
    }

    pub fn hidden(&self) -> usize {
        self.backbone.hidden.unwrap_or_else(|| (self.backbone.c / 4).max(1))
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda1: self.loss.lambda1,
            lambda2: self.loss.lambda2,
            lambda3: self.loss.lambda3,
            gamma: self.loss.gamma,
            margin: self.loss.margin,
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig { p_ids: self.sampler.p_ids, k_inst: self.sampler.k_inst }
    }

    pub fn lr_schedule(&self) -> LrSchedule {
        LrSchedule {
            base_lr: self.schedule.base_lr,
            warmup_epochs: self.schedule.warmup_epochs,
            decay: self.schedule.decay.clone(),
            total_epochs: self.schedule.total_epochs,
        }
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        Ok(GridSpec {
            hf: self.backbone.hf,
            wf: self.backbone.wf,
            c: self.backbone.c,
            ci: self.backbone.ci,
            provider: self.provider()?,
        })
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        Ok(ModelConfig {
            provider: self.provider()?,
            hf: self.backbone.hf,
            wf: self.backbone.wf,
            c: self.backbone.c,
            d: self.backbone.d,
            k: self.branch.k,
            hidden: self.hidden(),
            ci: self.backbone.ci,
            n_classes: self.data.n_ids,
            fusion: self.fusion()?,
            rlm_enabled: self.branch.rlm_enabled,
            train_gfb_ce: self.backbone.train_gfb_ce,
            branch_enabled: self.branch.enabled,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.provider()?;
        self.fusion()?;
        self.variant()?;
        self.model_config()?.validate()?;
        self.loss_weights().validate()?;
        self.sampler_config().validate()?;
        self.lr_schedule().validate()?;
        self.data.validate()?;
        if self.sampler.p_ids > self.data.n_ids {
            return Err(Error::Config(format!(
                "sampler wants {} identities per batch, dataset has {}",
                self.sampler.p_ids, self.data.n_ids
            )));
        }
        Ok(())
    }
}
