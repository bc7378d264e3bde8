//! Run configuration. Everything is defaulted so the pipeline runs with no
//! config file at all; a TOML file (`--config`) overrides any subset of
//! fields, and a few flags (`--seed`, `--eps`) override the file.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// Synthetic dataset parameters. The default grade-group mix follows the
/// published validation distribution 77:134:62:58, and the per-group event
/// rates rise threefold per grade group so the ground truth is genuinely
/// prognostic.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_slides: usize,
    pub rows: usize,
    pub cols: usize,
    /// Target grade-group proportions (normalized internally).
    pub gg_mix: [f64; 4],
    /// Tumor fraction of the slide, drawn uniformly from this range.
    pub tumor_fraction: [f64; 2],
    /// Blob size range (patches) for region growing.
    pub blob_size: [usize; 2],
    /// Share of the tumor taken by the primary pattern on two-pattern
    /// slides, drawn uniformly from this range. Must stay above 0.5.
    pub primary_share: [f64; 2],
    /// Adverse-event hazard per month for each grade group; must be
    /// strictly increasing.
    pub lambda_per_gg: [f64; 4],
    /// Independent exponential censoring hazard per month.
    pub censor_rate: f64,
    /// Emit a synthetic 29-rater panel (10 full-coverage raters plus 19
    /// raters covering each slide three times).
    pub rater_panel: bool,
    /// Probability that a panel rating differs from the reference.
    pub rater_noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_slides: 120,
            rows: 48,
            cols: 48,
            gg_mix: [77.0, 134.0, 62.0, 58.0],
            tumor_fraction: [0.35, 0.65],
            blob_size: [12, 60],
            primary_share: [0.60, 0.75],
            lambda_per_gg: [0.002, 0.006, 0.018, 0.054],
            censor_rate: 0.01,
            rater_panel: true,
            rater_noise: 0.35,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(CliError::domain(format!("synthetic config: {m}")));
        if self.n_slides == 0 {
            return fail("n_slides must be positive");
        }
        if self.rows * self.cols < 64 {
            return fail("grid must hold at least 64 patches");
        }
        if self.gg_mix.iter().any(|&p| !(p >= 0.0)) || self.gg_mix.iter().sum::<f64>() <= 0.0 {
            return fail("gg_mix must be non-negative with positive sum");
        }
        if !(0.0 < self.tumor_fraction[0]
            && self.tumor_fraction[0] <= self.tumor_fraction[1]
            && self.tumor_fraction[1] <= 1.0)
        {
            return fail("tumor_fraction must be an ordered range within (0, 1]");
        }
        if self.blob_size[0] == 0 || self.blob_size[0] > self.blob_size[1] {
            return fail("blob_size must be an ordered positive range");
        }
        if !(0.5 < self.primary_share[0]
            && self.primary_share[0] <= self.primary_share[1]
            && self.primary_share[1] < 1.0)
        {
            return fail("primary_share must be an ordered range within (0.5, 1)");
        }
        if self.lambda_per_gg.iter().any(|&l| !(l > 0.0)) {
            return fail("lambda_per_gg must be positive");
        }
        if self.lambda_per_gg.windows(2).any(|w| w[1] <= w[0]) {
            return fail("lambda_per_gg must be strictly increasing in grade group");
        }
        if !(self.censor_rate > 0.0) {
            return fail("censor_rate must be positive");
        }
        if !(0.0..=1.0).contains(&self.rater_noise) {
            return fail("rater_noise must lie in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningConfig {
    pub rounds: usize,
    pub samples_per_round: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig { rounds: 3, samples_per_round: 2000 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleConfig {
    /// Noise mixed into the synthetic oracle's output; 0 reproduces the
    /// ground truth exactly.
    pub noise_eps: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        OracleConfig { noise_eps: 0.0, seed: 11 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub bootstrap_replicates: usize,
    pub permutation_iterations: usize,
    /// Sampling iterations for the single-rating cohort analyses; the
    /// iteration with the median downstream metric is reported.
    pub cohort_iterations: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            bootstrap_replicates: 1000,
            permutation_iterations: 5000,
            cohort_iterations: 999,
            seed: 17,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Category draw ratios for (non-tumor, GP3, GP4, GP5).
    pub sampler_ratios: [f64; 4],
    pub sampler_seed: u64,
    pub mining: MiningConfig,
    pub oracle: OracleConfig,
    pub knn_k: usize,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            sampler_ratios: [4.0, 2.0, 2.0, 1.0],
            sampler_seed: 13,
            mining: MiningConfig::default(),
            oracle: OracleConfig::default(),
            knn_k: gleason_core::stage2::DEFAULT_K,
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sampler_ratios.iter().any(|&r| !(r >= 0.0)) || self.sampler_ratios.iter().sum::<f64>() <= 0.0 {
            return Err(CliError::domain("run config: sampler_ratios must be non-negative with positive sum"));
        }
        if !(0.0..=1.0).contains(&self.oracle.noise_eps) {
            return Err(CliError::domain("run config: oracle.noise_eps must lie in [0, 1]"));
        }
        if self.knn_k == 0 {
            return Err(CliError::domain("run config: knn_k must be positive"));
        }
        Ok(())
    }
}

/// Top-level config file: `[synthetic]` and `[run]` tables, both optional.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub synthetic: SyntheticConfig,
    pub run: RunConfig,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let config = match path {
            None => FileConfig::default(),
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .map_err(|e| CliError::io(format!("reading config {}", path.display()), e))?;
                toml::from_str(&text).map_err(|e| CliError::schema(path, e))?
            }
        };
        config.synthetic.validate()?;
        config.run.validate()?;
        Ok(config)
    }
}
