//! Run configuration: a TOML file with a top-level `seed` and the sections
//! `[data]`, `[model]`, `[curriculum]` and `[optimizer]`. Every key has a
//! default; unknown keys are rejected.

use std::path::PathBuf;

use evipar_autodiff::SgdConfig;
use serde::{Deserialize, Serialize};

use crate::curriculum::CurriculumSchedule;
use crate::error::{Error, Result};
use crate::evidential::HeadSharing;
use crate::fusion::FusionConfig;
use crate::model::{InputDims, Model, ModelConfig};
use crate::seed::{self, tag};
use crate::raer::RaerConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Dataset directory written by `synth`.
    pub dataset: PathBuf,
    /// Run output directory.
    pub out_dir: PathBuf,
    pub batch_size: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            dataset: PathBuf::from("data"),
            out_dir: PathBuf::from("run"),
            batch_size: 48,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub common_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_multiplier: usize,
    pub use_raer: bool,
    pub use_spm: bool,
    pub gamma_init: f64,
    pub gate_bias_init: f64,
    pub query_init_std: f64,
    pub evidence_head: HeadSharing,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            common_dim: m.fusion.common_dim,
            blocks: m.fusion.blocks,
            heads: m.fusion.heads,
            ffn_multiplier: m.fusion.ffn_multiplier,
            use_raer: m.use_raer,
            use_spm: m.raer.use_spm,
            gamma_init: m.raer.gamma_init,
            gate_bias_init: m.raer.gate_bias_init,
            query_init_std: m.raer.query_init_std,
            evidence_head: m.evidence_head,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CurriculumSection {
    /// Loss-ranked pacing in Stage I and vacuity weighting in Stage II.
    pub enabled: bool,
    /// Evidential objective after warm-up; when off, Stage I runs throughout.
    pub use_edl: bool,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub q0: f64,
    pub center_start: f64,
    pub center_end: f64,
    pub sigma: f64,
    pub lambda_max: f64,
    pub lambda_awr: f64,
    pub renormalize: bool,
}

impl Default for CurriculumSection {
    fn default() -> Self {
        let s = CurriculumSchedule::default();
        Self {
            enabled: true,
            use_edl: true,
            warmup_epochs: s.warmup_epochs,
            total_epochs: s.total_epochs,
            q0: s.q0,
            center_start: s.center_start,
            center_end: s.center_end,
            sigma: s.sigma,
            lambda_max: s.lambda_max,
            lambda_awr: s.lambda_awr,
            renormalize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerSection {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub max_skipped_fraction: f64,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let o = SgdConfig::default();
        Self {
            learning_rate: o.learning_rate,
            momentum: o.momentum,
            weight_decay: o.weight_decay,
            max_skipped_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSection,
    pub model: ModelSection,
    pub curriculum: CurriculumSection,
    pub optimizer: OptimizerSection,
}

/// Component switches of the ablation study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Components {
    pub edl: bool,
    pub curriculum: bool,
    pub raer: bool,
    pub awr: bool,
}

impl Components {
    /// The seven rows of the component ablation, `1..=7`.
    pub fn ablation_row(row: usize) -> Option<Self> {
        let (edl, curriculum, raer, awr) = match row {
            1 => (false, false, false, false),
            2 => (true, false, false, false),
            3 => (true, true, false, false),
            4 => (true, false, true, false),
            5 => (true, true, true, false),
            6 => (true, false, false, true),
            7 => (true, true, true, true),
            _ => return None,
        };
        Some(Self {
            edl,
            curriculum,
            raer,
            awr,
        })
    }
}

/// Flag-style overrides applied on top of a loaded config.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Ablation {
    pub no_spm: bool,
    pub no_cl: bool,
    pub no_awr: bool,
    pub no_raer: bool,
    pub no_edl: bool,
}

fn toml_key(e: &toml::de::Error) -> String {
    e.message()
        .split('`')
        .nth(1)
        .map(str::to_string)
        .unwrap_or_else(|| "config".into())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::config(toml_key(&e), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().fusion.validate()?;
        self.train_config().validate()?;
        if !(0.0..=1.0).contains(&self.optimizer.max_skipped_fraction) {
            return Err(Error::config("optimizer.max_skipped_fraction", "must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn apply(&mut self, a: Ablation) {
        if a.no_spm {
            self.model.use_spm = false;
        }
        if a.no_cl {
            self.curriculum.enabled = false;
        }
        if a.no_awr {
            self.curriculum.lambda_awr = 0.0;
        }
        if a.no_raer {
            self.model.use_raer = false;
        }
        if a.no_edl {
            self.curriculum.use_edl = false;
        }
    }

    /// Sets the component switches. Turning AWR on restores the default
    /// weight if it had been zeroed.
    pub fn set_components(&mut self, c: Components) {
        self.curriculum.use_edl = c.edl;
        self.curriculum.enabled = c.curriculum;
        self.model.use_raer = c.raer;
        self.curriculum.lambda_awr = match (c.awr, self.curriculum.lambda_awr) {
            (false, _) => 0.0,
            (true, 0.0) => CurriculumSection::default().lambda_awr,
            (true, w) => w,
        };
    }

    pub fn components(&self) -> Components {
        Components {
            edl: self.curriculum.use_edl,
            curriculum: self.curriculum.enabled,
            raer: self.model.use_raer,
            awr: self.curriculum.use_edl && self.curriculum.lambda_awr > 0.0,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            fusion: FusionConfig {
                common_dim: m.common_dim,
                blocks: m.blocks,
                heads: m.heads,
                ffn_multiplier: m.ffn_multiplier,
            },
            use_raer: m.use_raer,
            raer: RaerConfig {
                use_spm: m.use_spm,
                gamma_init: m.gamma_init,
                gate_bias_init: m.gate_bias_init,
                query_init_std: m.query_init_std,
            },
            evidence_head: m.evidence_head,
        }
    }

    /// A freshly initialized model; initialization draws from the run seed.
    pub fn build_model(&self, dims: InputDims) -> Result<Model> {
        Model::new(self.model_config(), dims, &mut seed::rng(self.seed, &[tag::INIT]))
    }

    pub fn train_config(&self) -> TrainConfig {
        let c = &self.curriculum;
        let o = &self.optimizer;
        TrainConfig {
            seed: self.seed,
            schedule: CurriculumSchedule {
                warmup_epochs: c.warmup_epochs,
                total_epochs: c.total_epochs,
                q0: c.q0,
                center_start: c.center_start,
                center_end: c.center_end,
                sigma: c.sigma,
                lambda_max: c.lambda_max,
                lambda_awr: c.lambda_awr,
            },
            optimizer: SgdConfig {
                learning_rate: o.learning_rate,
                momentum: o.momentum,
                weight_decay: o.weight_decay,
            },
            batch_size: self.data.batch_size,
            use_curriculum: c.enabled,
            use_edl: c.use_edl,
            renormalize: c.renormalize,
            max_skipped_fraction: o.max_skipped_fraction,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trip_and_sections() {
        let text = "seed = 9\n[model]\ncommon_dim = 16\nheads = 2\n[curriculum]\ntotal_epochs = 4\nwarmup_epochs = 2\n";
        let cfg = RunConfig::from_toml(text).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.model.common_dim, 16);
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn unknown_and_invalid_keys_named() {
        let err = RunConfig::from_toml("[model]\nwidth = 3\n").unwrap_err();
        assert!(err.to_string().contains("width"), "{err}");
        let err = RunConfig::from_toml("[model]\nheads = 3\n").unwrap_err();
        assert!(err.to_string().contains("model.heads"), "{err}");
        let err = RunConfig::from_toml("[curriculum]\nq0 = 0\n").unwrap_err();
        assert!(err.to_string().contains("curriculum.q0"), "{err}");
    }

    #[test]
    fn flags_reproduce_ablation_rows() {
        let full = RunConfig::default();
        assert_eq!(full.components(), Components::ablation_row(7).unwrap());
        let flags = [
            (Ablation { no_edl: true, no_cl: true, no_raer: true, no_awr: true, no_spm: false }, 1),
            (Ablation { no_cl: true, no_raer: true, no_awr: true, ..Default::default() }, 2),
            (Ablation { no_raer: true, no_awr: true, ..Default::default() }, 3),
            (Ablation { no_cl: true, no_awr: true, ..Default::default() }, 4),
            (Ablation { no_awr: true, ..Default::default() }, 5),
            (Ablation { no_cl: true, no_raer: true, ..Default::default() }, 6),
            (Ablation::default(), 7),
        ];
        for (flags, row) in flags {
            let mut cfg = RunConfig::default();
            cfg.apply(flags);
            assert_eq!(cfg.components(), Components::ablation_row(row).unwrap(), "row {row}");
            let mut preset = RunConfig::default();
            preset.set_components(Components::ablation_row(row).unwrap());
            assert_eq!(preset.components(), cfg.components());
        }
        let mut cfg = RunConfig::default();
        cfg.apply(Ablation { no_spm: true, ..Default::default() });
        assert!(!cfg.model_config().raer.use_spm);
    }
}
