//! `stbcp`: budgeted backward conformal prediction from score files.
//!
//! Subcommands: `predict` (one prediction set with its estimated coverage
//! bound), `experiment` (Monte-Carlo trials with metrics), `synth`
//! (synthetic score/feature files), and `verify` (theorem suites).

mod config;

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use config::{ConfigOverrides, ExperimentConfig};
use stbcp::data::trial_rng;
use stbcp::engine::{run_stbcp, EngineInputs};
use stbcp::experiment::{
    oracle_agreement, run_experiment, save_metrics_json, save_trials_csv, ExperimentSetup,
};
use stbcp::synth::{generate, GeneratorSpec, ScoreLaw};
use stbcp::verify;
use stbcp::{CalibrationSplit, FeatureMatrix, ScoreTable, ScoreTransform, Transform};

#[derive(Parser)]
#[command(
    name = "stbcp",
    about = "Backward conformal prediction under hard size budgets",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build one prediction set for a designated test row
    Predict {
        /// JSON config file
        #[arg(long)]
        config: PathBuf,
        /// Row index of the test point in the score file
        #[arg(long)]
        test_row: usize,
        #[command(flatten)]
        overrides: ConfigOverrides,
    },
    /// Run repeated random trials and write metrics.json / trials.csv
    Experiment {
        /// JSON config file
        #[arg(long)]
        config: PathBuf,
        /// Cross-check the closed-form level against the grid-infimum
        /// oracle on every trial (strictly increasing transforms only)
        #[arg(long)]
        verify_oracle: bool,
        #[command(flatten)]
        overrides: ConfigOverrides,
    },
    /// Generate synthetic score/feature CSV files
    Synth {
        /// Generator: exchangeable | dirichlet | clustered
        #[arg(long)]
        kind: String,
        #[arg(long, default_value_t = 10)]
        num_labels: usize,
        #[arg(long, default_value_t = 1000)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Score law for `exchangeable`: uniform:<lo>:<hi> or exp:<rate>
        #[arg(long, default_value = "uniform:0:1")]
        law: String,
        /// Dirichlet concentration for `dirichlet`
        #[arg(long, default_value_t = 0.3)]
        concentration: f64,
        /// Softmax temperature for `dirichlet` (< 1 sharpens)
        #[arg(long, default_value_t = 1.0)]
        temperature: f64,
        /// Cluster count for `clustered`
        #[arg(long, default_value_t = 5)]
        clusters: usize,
        /// Cluster spread for `clustered`
        #[arg(long, default_value_t = 0.5)]
        spread: f64,
        #[arg(long)]
        out_scores: PathBuf,
        #[arg(long)]
        out_features: Option<PathBuf>,
    },
    /// Run a named verification suite on synthetic data
    Verify {
        /// One of: invariance | consistency | optimality | epsilon |
        /// evariable | oracle
        #[arg(long)]
        suite: String,
        #[arg(long, default_value_t = 20_240_817)]
        seed: u64,
    },
}

fn main() {
    env_logger::init();
    if let Ok(workers) = std::env::var("STBCP_WORKERS") {
        if let Ok(count) = workers.parse::<usize>() {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(count)
                .build_global();
        }
    }
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Predict {
            config,
            test_row,
            overrides,
        } => predict(&ExperimentConfig::load(&config, &overrides)?, test_row),
        Command::Experiment {
            config,
            verify_oracle,
            overrides,
        } => experiment(&ExperimentConfig::load(&config, &overrides)?, verify_oracle),
        Command::Synth {
            kind,
            num_labels,
            size,
            seed,
            law,
            concentration,
            temperature,
            clusters,
            spread,
            out_scores,
            out_features,
        } => {
            let spec = build_spec(
                &kind,
                num_labels,
                size,
                seed,
                &law,
                concentration,
                temperature,
                clusters,
                spread,
            )?;
            let data = generate(&spec)?;
            data.table.save(&out_scores)?;
            println!("wrote {} ({} samples)", out_scores.display(), size);
            if let Some(path) = out_features {
                data.features.save(&path)?;
                println!("wrote {}", path.display());
            }
            Ok(())
        }
        Command::Verify { suite, seed } => {
            let report = verify::run_suite(&suite, seed)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            if !report.passed {
                std::process::exit(1);
            }
            Ok(())
        }
    }
}

fn load_inputs(config: &ExperimentConfig) -> Result<(ScoreTable, Option<FeatureMatrix>)> {
    let table = ScoreTable::load(&config.score_path)
        .with_context(|| format!("loading scores from {}", config.score_path.display()))?;
    let features = match &config.feature_path {
        Some(path) => {
            let features = FeatureMatrix::load(path)
                .with_context(|| format!("loading features from {}", path.display()))?;
            if features.num_rows() != table.num_samples() {
                bail!(
                    "feature file has {} rows but the score file has {} samples",
                    features.num_rows(),
                    table.num_samples()
                );
            }
            Some(features)
        }
        None => None,
    };
    Ok((table, features))
}

fn resolve_transform(config: &ExperimentConfig) -> Result<Transform> {
    let transform = Transform::from_selector(&config.transform)
        .map_err(|e| anyhow::anyhow!("{e}"))?;
    if matches!(transform, Transform::OptimalOracle { .. }) {
        bail!(
            "transform `optimal_oracle` needs the exact label law, which score \
             files do not carry; it is exercised by `verify --suite optimality`"
        );
    }
    Ok(transform)
}

fn predict(config: &ExperimentConfig, test_row: usize) -> Result<()> {
    let (table, features) = load_inputs(config)?;
    let transform = resolve_transform(config)?;
    if test_row >= table.num_samples() {
        bail!(
            "test row {test_row} out of range (file has {} rows)",
            table.num_samples()
        );
    }
    let mut remaining: Vec<usize> = (0..table.num_samples()).filter(|&i| i != test_row).collect();
    if config.n < remaining.len() {
        // sample a calibration subset of the requested size
        let mut rng = trial_rng(config.seed, 0);
        let picks = rand_sample(&mut rng, remaining.len(), config.n);
        remaining = picks.into_iter().map(|i| remaining[i]).collect();
    }
    let split = CalibrationSplit::new(remaining, test_row)?;
    let outcome = run_stbcp(EngineInputs {
        table: &table,
        features: features.as_ref(),
        split: &split,
        rule: &config.rule,
        transform: &transform,
        oracle: None,
    })?;
    println!("{}", serde_json::to_string_pretty(&outcome)?);
    Ok(())
}

fn rand_sample(rng: &mut impl rand::Rng, len: usize, amount: usize) -> Vec<usize> {
    rand::seq::index::sample(rng, len, amount).into_vec()
}

fn experiment(config: &ExperimentConfig, verify_oracle: bool) -> Result<()> {
    let (table, features) = load_inputs(config)?;
    let transform = resolve_transform(config)?;
    std::fs::create_dir_all(&config.output_dir)
        .with_context(|| format!("creating {}", config.output_dir.display()))?;
    let setup = ExperimentSetup {
        table: &table,
        features: features.as_ref(),
        rule: &config.rule,
        transform: &transform,
        oracle: None,
    };
    let (reports, summary) = run_experiment(&setup, config.n, config.m, config.seed)?;
    save_trials_csv(&reports, config.output_dir.join("trials.csv"))?;
    save_metrics_json(&summary, config.output_dir.join("metrics.json"))?;
    config.echo_to(&config.output_dir)?;
    println!("{}", serde_json::to_string_pretty(&summary)?);
    if verify_oracle {
        if !transform.strictly_increasing() {
            bail!(
                "--verify-oracle needs a strictly increasing transform (identity or \
                 iw_eps:<eps>); the infimum definition cannot rank `{}`",
                transform.name()
            );
        }
        let max_gap = oracle_agreement(&setup, config.n, config.m, config.seed, config.grid_step)?;
        let tolerance = 2.0 * config.grid_step;
        println!(
            "oracle agreement: max |closed - infimum| = {max_gap:.3e} over {} trials (tolerance {tolerance:.1e})",
            config.m
        );
        if max_gap > tolerance {
            bail!("closed-form level disagrees with the infimum oracle");
        }
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn build_spec(
    kind: &str,
    num_labels: usize,
    size: usize,
    seed: u64,
    law: &str,
    concentration: f64,
    temperature: f64,
    clusters: usize,
    spread: f64,
) -> Result<GeneratorSpec> {
    match kind {
        "exchangeable" => Ok(GeneratorSpec::ExchangeableIid {
            law: parse_law(law)?,
            num_labels,
            size,
            seed,
        }),
        "dirichlet" => Ok(GeneratorSpec::DirichletSoftmax {
            concentration,
            num_labels,
            temperature,
            size,
            seed,
        }),
        "clustered" => Ok(GeneratorSpec::ClusteredFeatures {
            num_clusters: clusters,
            spread,
            num_labels,
            size,
            seed,
        }),
        other => bail!("unknown generator `{other}` (expected exchangeable | dirichlet | clustered)"),
    }
}

fn parse_law(text: &str) -> Result<ScoreLaw> {
    let parts: Vec<&str> = text.split(':').collect();
    match parts.as_slice() {
        ["uniform", lo, hi] => Ok(ScoreLaw::Uniform {
            lo: lo.parse().context("uniform lo")?,
            hi: hi.parse().context("uniform hi")?,
        }),
        ["exp", rate] => Ok(ScoreLaw::Exponential {
            rate: rate.parse().context("exp rate")?,
        }),
        _ => bail!("bad score law `{text}` (expected uniform:<lo>:<hi> or exp:<rate>)"),
    }
}
