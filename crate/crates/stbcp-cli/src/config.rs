//! Experiment configuration: a flat JSON file, with CLI flags overriding
//! individual fields. The merged effective config is echoed into the
//! output directory for provenance.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use stbcp::SizeRule;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub score_path: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_path: Option<PathBuf>,
    pub rule: SizeRule,
    pub transform: String,
    pub n: usize,
    pub m: usize,
    pub seed: u64,
    #[serde(default = "default_grid_step")]
    pub grid_step: f64,
    pub output_dir: PathBuf,
}

fn default_grid_step() -> f64 {
    1e-5
}

/// CLI-side overrides applied on top of the file.
#[derive(Debug, Default, clap::Args)]
pub struct ConfigOverrides {
    /// Score CSV path (overrides the config file)
    #[arg(long)]
    pub scores: Option<PathBuf>,
    /// Feature CSV path (overrides the config file)
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Size rule as a JSON object, e.g. '{"rule":"constant","t":2}'
    #[arg(long)]
    pub rule: Option<String>,
    /// Transform selector: identity | iw | iro | iw_eps:<eps> | optimal_oracle
    #[arg(long)]
    pub transform: Option<String>,
    /// Calibration set size
    #[arg(long)]
    pub n: Option<usize>,
    /// Number of trials
    #[arg(long)]
    pub m: Option<usize>,
    /// Master seed
    #[arg(long)]
    pub seed: Option<u64>,
    /// Grid step for the infimum oracle
    #[arg(long)]
    pub grid_step: Option<f64>,
    /// Output directory
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn load(path: &Path, overrides: &ConfigOverrides) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut config: ExperimentConfig =
            serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if let Some(scores) = &overrides.scores {
            config.score_path = scores.clone();
        }
        if let Some(features) = &overrides.features {
            config.feature_path = Some(features.clone());
        }
        if let Some(rule) = &overrides.rule {
            config.rule = serde_json::from_str(rule).context("parsing --rule JSON")?;
        }
        if let Some(transform) = &overrides.transform {
            config.transform = transform.clone();
        }
        if let Some(n) = overrides.n {
            config.n = n;
        }
        if let Some(m) = overrides.m {
            config.m = m;
        }
        if let Some(seed) = overrides.seed {
            config.seed = seed;
        }
        if let Some(grid_step) = overrides.grid_step {
            config.grid_step = grid_step;
        }
        if let Some(output_dir) = &overrides.output_dir {
            config.output_dir = output_dir.clone();
        }
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            bail!("n must be at least 2, got {}", self.n);
        }
        if self.m < 1 {
            bail!("m must be at least 1, got {}", self.m);
        }
        if !(self.grid_step > 0.0 && self.grid_step <= 0.01) {
            bail!(
                "grid_step must lie in (0, 0.01], got {}",
                self.grid_step
            );
        }
        stbcp::Transform::from_selector(&self.transform)
            .map_err(|e| anyhow::anyhow!("{e}"))?;
        Ok(())
    }

    /// Writes the merged effective config next to the run's outputs.
    pub fn echo_to(&self, dir: &Path) -> Result<()> {
        let path = dir.join("config.json");
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(&path, text)
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}
