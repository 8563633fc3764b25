//! Pipeline configuration: one TOML document drives every subcommand.
//!
//! The same file configures dataset generation, both training stages, and
//! evaluation, so a single config plus a dataset directory pins down an
//! entire experiment. The serialized form is canonical: serializing a parsed
//! config reproduces the input byte for byte (for files already in canonical
//! form), which is what makes config snapshots in run manifests comparable.

use crate::dataset::DatasetSpec;
use crate::error::{Error, Result};
use crate::evaluation::EvalOptions;
use crate::masking::{build_mask, MaskConfig};
use crate::solver::SolverParams;
use crate::training::TrainConfig;
use crate::vqvae::ArchConfig;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

/// Everything a pipeline run needs, in one TOML document.
///
/// Every field and section has a default, so the empty document is the
/// desk-scale default experiment; any subset can be overridden.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Master seed. The dataset uses it as the run-0 seed, and both
    /// training stages derive their init/shuffle streams from it.
    pub seed: u64,
    pub solver: SolverParams,
    pub dataset: DatasetSection,
    /// Mask families by name; `train-stage2` and `evaluate` refer to these
    /// with `--mask <name>`.
    pub masks: BTreeMap<String, MaskConfig>,
    pub model: ArchConfig,
    pub training: TrainingSection,
    pub evaluation: EvalOptions,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let dataset = DatasetSection::default();
        let masks = crate::masking::standard_configs(dataset.out_grid)
            .into_iter()
            .collect();
        PipelineConfig {
            seed: 0,
            solver: SolverParams::default(),
            dataset,
            masks,
            model: ArchConfig::default(),
            training: TrainingSection::default(),
            evaluation: EvalOptions::default(),
        }
    }
}

/// The dataset recipe minus what the config holds elsewhere (the solver
/// section and the master seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub num_runs: usize,
    pub train_runs: usize,
    pub duration: f64,
    pub sample_interval: f64,
    pub sim_grid: usize,
    pub out_grid: usize,
    pub skip_initial_seconds: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        let spec = DatasetSpec::default();
        DatasetSection {
            num_runs: spec.num_runs,
            train_runs: spec.train_runs,
            duration: spec.duration,
            sample_interval: spec.sample_interval,
            sim_grid: spec.sim_grid,
            out_grid: spec.out_grid,
            skip_initial_seconds: spec.skip_initial_seconds,
        }
    }
}

/// Per-stage hyperparameters.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    pub stage1: StageSection,
    pub stage2: StageSection,
}

/// One stage's knobs: [`TrainConfig`] minus the stage tag and the seed,
/// which the pipeline fills in itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageSection {
    pub beta: f64,
    pub lr_model: f64,
    pub lr_disc: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub gan_enabled: bool,
    pub gan_start_step: Option<usize>,
    pub percept_enabled: bool,
    pub percept_weights: Option<std::path::PathBuf>,
    pub lambda_clamp: f64,
    pub warm_start_disc: bool,
    pub warm_start_post_quant: bool,
}

impl Default for StageSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        StageSection {
            beta: t.beta,
            lr_model: t.lr_model,
            lr_disc: t.lr_disc,
            steps: t.steps,
            batch_size: t.batch_size,
            gan_enabled: t.gan_enabled,
            gan_start_step: t.gan_start_step,
            percept_enabled: t.percept_enabled,
            percept_weights: t.percept_weights,
            lambda_clamp: t.lambda_clamp,
            warm_start_disc: t.warm_start_disc,
            warm_start_post_quant: t.warm_start_post_quant,
        }
    }
}

impl StageSection {
    fn to_train(&self, stage: u8, seed: u64) -> TrainConfig {
        TrainConfig {
            stage,
            beta: self.beta,
            lr_model: self.lr_model,
            lr_disc: self.lr_disc,
            steps: self.steps,
            batch_size: self.batch_size,
            gan_enabled: self.gan_enabled,
            gan_start_step: self.gan_start_step,
            percept_enabled: self.percept_enabled,
            percept_weights: self.percept_weights.clone(),
            lambda_clamp: self.lambda_clamp,
            warm_start_disc: self.warm_start_disc,
            warm_start_post_quant: self.warm_start_post_quant,
            seed,
        }
    }
}

impl PipelineConfig {
    /// Parse and validate a TOML document.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = toml::from_str(text)
            .map_err(|e| Error::Config(format!("config parse error: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read, parse, and validate a config file.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.to_path_buf(), e))?;
        Self::from_toml_str(&text).map_err(|e| Error::Annotated {
            context: format!("config {}", path.display()),
            source: Box::new(e),
        })
    }

    /// Serialize to the canonical TOML form (fixed key order, defaults
    /// spelled out, `None` fields omitted).
    pub fn to_canonical_toml(&self) -> String {
        toml::to_string_pretty(self).expect("a validated config serializes to TOML")
    }

    /// The full dataset recipe this config describes.
    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            num_runs: self.dataset.num_runs,
            train_runs: self.dataset.train_runs,
            duration: self.dataset.duration,
            sample_interval: self.dataset.sample_interval,
            sim_grid: self.dataset.sim_grid,
            out_grid: self.dataset.out_grid,
            base_seed: self.seed,
            skip_initial_seconds: self.dataset.skip_initial_seconds,
            solver: self.solver,
        }
    }

    /// The full training recipe for one stage (1 or 2).
    pub fn train_config(&self, stage: u8) -> TrainConfig {
        let section = if stage == 1 {
            &self.training.stage1
        } else {
            &self.training.stage2
        };
        section.to_train(stage, self.seed)
    }

    /// Look up a named mask; the error lists what is available.
    pub fn mask(&self, name: &str) -> Result<&MaskConfig> {
        self.masks.get(name).ok_or_else(|| {
            let known: Vec<&str> = self.masks.keys().map(String::as_str).collect();
            Error::Config(format!(
                "unknown mask '{name}' (config defines: {})",
                if known.is_empty() {
                    "none".to_string()
                } else {
                    known.join(", ")
                }
            ))
        })
    }

    /// Cross-field checks beyond each section's own validation.
    pub fn validate(&self) -> Result<()> {
        self.dataset_spec().validate()?;
        self.model.validate()?;
        if self.model.in_channels != 1 {
            return Err(Error::Config(format!(
                "model.in_channels must be 1 (stage 2 expands the input to 3 \
                 channels itself), got {}",
                self.model.in_channels
            )));
        }
        if self.model.input_grid != self.dataset.out_grid {
            return Err(Error::Config(format!(
                "model.input_grid {} does not match dataset.out_grid {}",
                self.model.input_grid, self.dataset.out_grid
            )));
        }
        for (name, mask) in &self.masks {
            if name.is_empty()
                || !name
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
            {
                return Err(Error::Config(format!(
                    "mask name '{name}' must be non-empty [A-Za-z0-9_-] \
                     (names appear in file names)"
                )));
            }
            // Build once at the dataset grid so impossible placements are
            // rejected up front, not at train time.
            build_mask(mask, self.dataset.out_grid, self.dataset.out_grid).map_err(|e| {
                Error::Annotated {
                    context: format!("mask '{name}'"),
                    source: Box::new(e),
                }
            })?;
        }
        self.train_config(1).validate()?;
        self.train_config(2).validate()?;
        self.evaluation.validate()?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::MaskLayout;

    #[test]
    fn default_config_validates_and_round_trips_canonically() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_canonical_toml();
        let back = PipelineConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, cfg);
        // Fixpoint: canonical text reproduces itself exactly.
        assert_eq!(back.to_canonical_toml(), text);
    }

    #[test]
    fn empty_and_partial_documents_fill_defaults() {
        let empty = PipelineConfig::from_toml_str("").unwrap();
        assert_eq!(empty, PipelineConfig::default());
        let partial = PipelineConfig::from_toml_str("seed = 5\n[solver]\nreynolds = 250.0\n")
            .unwrap();
        assert_eq!(partial.seed, 5);
        assert_eq!(partial.solver.reynolds, 250.0);
        assert_eq!(partial.dataset, DatasetSection::default());
        assert_eq!(partial.dataset_spec().base_seed, 5);
    }

    #[test]
    fn unknown_keys_are_rejected_with_the_key_named() {
        let err = PipelineConfig::from_toml_str("sed = 1\n").unwrap_err();
        assert!(err.to_string().contains("sed"), "{err}");
        let err =
            PipelineConfig::from_toml_str("[solver]\nviscosty = 2.0\n").unwrap_err();
        assert!(err.to_string().contains("viscosty"), "{err}");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn cross_field_mismatches_are_rejected() {
        let mut cfg = PipelineConfig::default();
        cfg.dataset.out_grid = 32; // model still expects 64
        assert!(matches!(cfg.validate().unwrap_err(), Error::Config(_)));

        let mut cfg = PipelineConfig::default();
        cfg.model.in_channels = 3;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("in_channels"), "{err}");

        // A mask that cannot be placed on the dataset grid is caught here.
        let mut cfg = PipelineConfig::default();
        cfg.masks.insert(
            "huge".into(),
            MaskConfig {
                layout: MaskLayout::Grid,
                mask_side: 40,
                grid_rows: 4,
                grid_cols: 4,
            },
        );
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("huge"), "{err}");

        let mut cfg = PipelineConfig::default();
        cfg.masks.insert("bad name".into(), MaskConfig::single(8));
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("bad name"), "{err}");
    }

    #[test]
    fn mask_lookup_reports_available_names() {
        let cfg = PipelineConfig::default();
        assert_eq!(cfg.mask("single1").unwrap(), &MaskConfig::single(32));
        let err = cfg.mask("nope").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("nope") && msg.contains("single1"), "{msg}");
    }

    #[test]
    fn stage_sections_expand_to_full_train_configs() {
        let mut cfg = PipelineConfig::default();
        cfg.seed = 17;
        cfg.training.stage2.steps = 77;
        cfg.training.stage2.warm_start_disc = false;
        let t1 = cfg.train_config(1);
        assert_eq!((t1.stage, t1.seed), (1, 17));
        t1.validate().unwrap();
        let t2 = cfg.train_config(2);
        assert_eq!((t2.stage, t2.steps, t2.warm_start_disc), (2, 77, false));
        t2.validate().unwrap();
    }

    #[test]
    fn custom_masks_parse_from_toml_tables() {
        let text = r#"
[masks.corner-pair]
layout = "grid"
mask_side = 8
grid_rows = 1
grid_cols = 2
"#;
        let cfg = PipelineConfig::from_toml_str(text).unwrap();
        let m = cfg.mask("corner-pair").unwrap();
        assert_eq!(m.layout, MaskLayout::Grid);
        assert_eq!((m.grid_rows, m.grid_cols, m.mask_side), (1, 2, 8));
        // Named masks replace the default set entirely when given.
        assert!(cfg.mask("single1").is_err());
    }
}
