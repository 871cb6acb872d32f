//! Experiment configuration: a single versioned TOML file.
//!
//! Exactly one data section (`[generator]` or `[real_data]`) must be
//! present. The `seed` inside `[generator]` is ignored by `run`, which
//! derives all stage seeds from each entry of `seeds`. Environment
//! variables `MTLCM_OUTPUT_DIR` and `MTLCM_THREADS` override the output
//! directory and worker count; explicit command-line flags win over both.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::datagen::GenConfig;
use crate::error::{Error, Result};
use crate::ingest::RealDatasetSpec;
use crate::mtrn::{ExtractorSpec, TrainConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub version: u32,
    /// One full pipeline run per seed.
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<GenConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub real_data: Option<RealDataSection>,
    #[serde(default)]
    pub mtrn: MtrnSection,
    #[serde(default)]
    pub mtlcm: MtlcmSection,
    #[serde(default)]
    pub eval: EvalSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RealDataSection {
    #[serde(flatten)]
    pub spec: RealDatasetSpec,
    /// Optional desk-scale subsampling, applied after ingestion.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsample_rows: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subsample_tasks: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MtrnSection {
    /// "identity", "linear" or "mlp".
    pub arch: String,
    /// Feature dimension; defaults to the generator latent dimension.
    /// Required for real data with non-identity extractors.
    pub latent_dim: Option<usize>,
    /// MLP hidden width; defaults to `2 * obs_dim`.
    pub hidden: Option<usize>,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    /// Standardize observation columns (globally) before training.
    pub standardize_features: bool,
}

impl Default for MtrnSection {
    fn default() -> Self {
        MtrnSection {
            arch: "identity".into(),
            latent_dim: None,
            hidden: None,
            learning_rate: 1e-3,
            batch_size: 256,
            max_epochs: 200,
            patience: 20,
            standardize_features: true,
        }
    }
}

impl MtrnSection {
    pub fn extractor_spec(&self, default_latent: Option<usize>) -> Result<ExtractorSpec> {
        let latent = self.latent_dim.or(default_latent);
        match self.arch.as_str() {
            "identity" => Ok(ExtractorSpec::Identity),
            "linear" => Ok(ExtractorSpec::Linear {
                latent_dim: latent.ok_or_else(|| {
                    Error::Config("mtrn.latent_dim required for the linear extractor".into())
                })?,
            }),
            "mlp" => Ok(ExtractorSpec::Mlp {
                latent_dim: latent.ok_or_else(|| {
                    Error::Config("mtrn.latent_dim required for the mlp extractor".into())
                })?,
                hidden: self.hidden,
            }),
            other => Err(Error::Config(format!(
                "unknown mtrn.arch {other:?} (expected identity, linear or mlp)"
            ))),
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            patience: self.patience,
            seed,
            ..TrainConfig::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MtlcmSection {
    pub learning_rate: f64,
    pub max_steps: usize,
    pub patience: usize,
    pub sigma_s: f64,
    pub sigma_o: f64,
    /// Cross-validation grids over the fixed noise scales; when both are
    /// present the pair with the best held-out marginal likelihood wins.
    pub sigma_s_grid: Option<Vec<f64>>,
    pub sigma_o_grid: Option<Vec<f64>>,
    /// Standardize feature columns before stage 2.
    pub standardize_features: bool,
    /// Trace interval in steps.
    pub trace_every: usize,
}

impl Default for MtlcmSection {
    fn default() -> Self {
        MtlcmSection {
            learning_rate: 1e-2,
            max_steps: 3000,
            patience: 300,
            sigma_s: 0.1,
            sigma_o: 0.01,
            sigma_s_grid: None,
            sigma_o_grid: None,
            standardize_features: true,
            trace_every: 50,
        }
    }
}

impl MtlcmSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            learning_rate: self.learning_rate,
            // Stage 2 trains full-batch; the field is unused there.
            batch_size: 256,
            max_epochs: self.max_steps,
            patience: self.patience,
            seed,
            ..TrainConfig::default()
        }
    }

    /// The (sigma_s, sigma_o) grid to cross-validate, if configured.
    pub fn sigma_grid(&self) -> Option<Vec<(f64, f64)>> {
        match (&self.sigma_s_grid, &self.sigma_o_grid) {
            (None, None) => None,
            (s_grid, o_grid) => {
                let ss = s_grid.clone().unwrap_or_else(|| vec![self.sigma_s]);
                let os = o_grid.clone().unwrap_or_else(|| vec![self.sigma_o]);
                let mut grid = Vec::new();
                for &s in &ss {
                    for &o in &os {
                        grid.push((s, o));
                    }
                }
                Some(grid)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSection {
    /// Run the sufficient-variability diagnostic.
    pub variability: bool,
    /// Target values at which prior moments are probed for the diagnostic.
    pub y_probe: Vec<f64>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection { variability: true, y_probe: vec![-1.0, 0.0, 1.0] }
    }
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<ExperimentConfig> {
        let raw = std::fs::read_to_string(path)?;
        let cfg: ExperimentConfig = toml::from_str(&raw)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be non-empty".into()));
        }
        match (&self.generator, &self.real_data) {
            (Some(gen), None) => gen.validate()?,
            (None, Some(_)) => {}
            _ => {
                return Err(Error::Config(
                    "exactly one of [generator] and [real_data] must be present".into(),
                ))
            }
        }
        if self.mtlcm.sigma_s <= 0.0 || self.mtlcm.sigma_o <= 0.0 {
            return Err(Error::Config("mtlcm noise scales must be positive".into()));
        }
        // Surface arch typos at config time.
        self.mtrn.extractor_spec(Some(1)).map(|_| ())?;
        Ok(())
    }

    /// Hash of the canonical JSON serialization: whitespace and comments in
    /// the TOML file do not affect it.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config is serializable");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        hasher.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
version = 1
seeds = [1, 2]
output_dir = "runs/demo"

[generator]
latent_dim = 3
n_causal = 2
n_tasks = 8
n_per_task = 20
obs_dim = 3
mixing = "random-linear"
"#;

    #[test]
    fn parses_minimal_config_with_defaults() {
        let cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.seeds, vec![1, 2]);
        assert_eq!(cfg.mtrn.arch, "identity");
        assert_eq!(cfg.mtlcm.sigma_s, 0.1);
        assert_eq!(cfg.generator.as_ref().unwrap().sigma_s, 0.1);
        assert!(cfg.eval.variability);
    }

    #[test]
    fn rejects_both_or_neither_data_section() {
        let mut cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        cfg.real_data = Some(RealDataSection {
            spec: RealDatasetSpec {
                features_path: "a.csv".into(),
                targets_path: "b.csv".into(),
                n_expected_rows: None,
                standardize: true,
                expected_sha256_features: None,
                expected_sha256_targets: None,
            },
            subsample_rows: None,
            subsample_tasks: None,
        });
        assert!(cfg.validate().is_err());
        cfg.real_data = None;
        cfg.generator = None;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn rejects_empty_seeds_and_bad_arch() {
        let mut cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        cfg.seeds.clear();
        assert!(cfg.validate().is_err());
        let mut cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        cfg.mtrn.arch = "transformer".into();
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_ignores_toml_formatting() {
        let a: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        let reformatted = MINIMAL.replace("seeds = [1, 2]", "seeds = [ 1,2 ]");
        let b: ExperimentConfig = toml::from_str(&reformatted).unwrap();
        assert_eq!(a.hash(), b.hash());
    }

    #[test]
    fn sigma_grid_combinations() {
        let mut section = MtlcmSection::default();
        assert!(section.sigma_grid().is_none());
        section.sigma_s_grid = Some(vec![0.05, 0.1]);
        section.sigma_o_grid = Some(vec![0.005, 0.01, 0.05]);
        assert_eq!(section.sigma_grid().unwrap().len(), 6);
        section.sigma_o_grid = None;
        assert_eq!(section.sigma_grid().unwrap(), vec![(0.05, 0.01), (0.1, 0.01)]);
    }
}
