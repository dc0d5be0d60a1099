use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use latent_abundance::model::HyperParams;
use latent_abundance::sampler::{PositiveKernel, SamplerOptions, ZeroKernel};
use latent_abundance::schedule::ExecMode;
use latent_abundance::sim::SimConfig;
use latent_abundance::summary::DEFAULT_MIDPOINTS;
use serde::{Deserialize, Serialize};

use crate::UsageError;

/// Everything a run needs. Missing keys take their defaults, and the
/// resolved file is echoed next to the outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub mcmc: Mcmc,
    pub prior: Prior,
    pub model: ModelSettings,
    pub summarize: Summarize,
    pub bench: Bench,
    pub simulate: SimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            paths: Paths::default(),
            mcmc: Mcmc::default(),
            prior: Prior::default(),
            model: ModelSettings::default(),
            summarize: Summarize::default(),
            bench: Bench::default(),
            simulate: SimConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub cells: PathBuf,
    pub sites: PathBuf,
    /// Output directory of every subcommand.
    pub out: PathBuf,
    /// Chain read by `summarize`; defaults to `<out>/chain.csv`.
    pub chain: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            cells: "cells.csv".into(),
            sites: "sites.csv".into(),
            out: "out".into(),
            chain: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Mcmc {
    pub iterations: u64,
    pub burn_in: u64,
    pub thin: u64,
    pub mode: ExecMode,
    pub workers: usize,
    /// Number of separator blocks `L` for the θ sweep.
    pub blocks: usize,
    pub checkpoint_every: u64,
    pub check_every: u64,
}

impl Default for Mcmc {
    fn default() -> Self {
        Self {
            iterations: 12_500,
            burn_in: 7_500,
            thin: 5,
            mode: ExecMode::Sequential,
            workers: 1,
            blocks: 11,
            checkpoint_every: 500,
            check_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Prior {
    pub prior_var_beta: f64,
    pub car_scale: f64,
    pub alpha_cap: f64,
}

impl Default for Prior {
    fn default() -> Self {
        let h = HyperParams::default();
        Self {
            prior_var_beta: h.prior_var_beta,
            car_scale: h.car_scale,
            alpha_cap: SamplerOptions::default().alpha_cap,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    /// Cells closer than this are neighbours.
    pub threshold: f64,
    pub positive_kernel: PositiveKernel,
    pub zero_kernel: ZeroKernel,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            threshold: 1.5,
            positive_kernel: PositiveKernel::default(),
            zero_kernel: ZeroKernel::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Summarize {
    pub midpoints: [f64; 4],
}

impl Default for Summarize {
    fn default() -> Self {
        Self { midpoints: DEFAULT_MIDPOINTS }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Bench {
    /// Synthetic grid used when no cells file is given on the command line.
    pub nx: usize,
    pub ny: usize,
    pub blocks: Vec<usize>,
    pub workers: Vec<usize>,
    pub repetitions: usize,
}

impl Default for Bench {
    fn default() -> Self {
        Self {
            nx: 192,
            ny: 192,
            blocks: vec![1, 2, 4, 8, 11, 16],
            workers: vec![1, 2, 4],
            repetitions: 5,
        }
    }
}

impl RunConfig {
    /// Parses the file and makes relative paths relative to its directory.
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.rebase(base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.paths.cells);
        fix(&mut self.paths.sites);
        fix(&mut self.paths.out);
        if let Some(c) = self.paths.chain.as_mut() {
            fix(c);
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        let m = &self.mcmc;
        if m.thin == 0 {
            bail!(UsageError("mcmc.thin must be at least 1".into()));
        }
        if m.burn_in >= m.iterations {
            bail!(UsageError(format!(
                "mcmc.burn_in ({}) must be below mcmc.iterations ({})",
                m.burn_in, m.iterations
            )));
        }
        if m.workers == 0 || m.blocks == 0 {
            bail!(UsageError("mcmc.workers and mcmc.blocks must be positive".into()));
        }
        if !(self.model.threshold > 0.0) {
            bail!(UsageError("model.threshold must be positive".into()));
        }
        if !(self.prior.alpha_cap > 0.0) {
            bail!(UsageError("prior.alpha_cap must be positive".into()));
        }
        self.hyper().validate().map_err(|e| UsageError(e.to_string()))?;
        Ok(())
    }

    pub fn hyper(&self) -> HyperParams {
        HyperParams {
            prior_var_beta: self.prior.prior_var_beta,
            car_scale: self.prior.car_scale,
        }
    }

    pub fn sampler_options(&self) -> SamplerOptions {
        SamplerOptions {
            alpha_cap: self.prior.alpha_cap,
            positive_kernel: self.model.positive_kernel,
            zero_kernel: self.model.zero_kernel,
            check_every: self.mcmc.check_every,
            fault: None,
        }
    }

    /// Restores the reference run length and priors.
    pub fn apply_reference_settings(&mut self) {
        let (m, p) = (Mcmc::default(), Prior::default());
        self.mcmc.iterations = m.iterations;
        self.mcmc.burn_in = m.burn_in;
        self.mcmc.thin = m.thin;
        self.prior.prior_var_beta = p.prior_var_beta;
        self.prior.car_scale = p.car_scale;
    }

    pub fn chain_path(&self) -> PathBuf {
        self.paths.chain.clone().unwrap_or_else(|| self.paths.out.join("chain.csv"))
    }

    /// Writes the fully resolved configuration, paths made absolute so the
    /// echo can be rerun from anywhere.
    pub fn echo(&self, path: &Path) -> anyhow::Result<()> {
        let mut cfg = self.clone();
        let cwd = std::env::current_dir()?;
        cfg.rebase(&cwd);
        let text = toml::to_string_pretty(&cfg).context("serialising config")?;
        std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}
