use std::path::PathBuf;

use clap::{Args, ValueEnum};
use ugt_core::finetune::FinetuneMode;
use ugt_core::pipeline::PipelineConfig;
use ugt_core::{PsiMode, Result};

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum PsiModeArg {
    Fixed,
    Monotone,
    DataDependent,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FinetuneModeArg {
    Refit,
    Gradient,
    RefitThenGradient,
}

/// Flags mirroring the pipeline config. A value given here beats the config
/// file, which beats the built-in default.
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// JSON pipeline config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dictionary size K.
    #[arg(long)]
    pub kernels: Option<usize>,
    /// vMF concentration.
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Spatial mixtures per class.
    #[arg(long)]
    pub mixtures: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub em_max_iters: Option<usize>,
    /// Relative log-likelihood tolerance of EM.
    #[arg(long)]
    pub em_tol: Option<f64>,
    /// Independent k-means initialisations tried by EM.
    #[arg(long)]
    pub restarts: Option<usize>,
    #[arg(long, value_enum)]
    pub psi_mode: Option<PsiModeArg>,
    #[arg(long)]
    pub psi_init: Option<f64>,
    /// One value for all kernels or one per kernel, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub omega: Option<Vec<f64>>,
    #[arg(long)]
    pub adapt_max_iters: Option<usize>,
    /// Also adapt the mixing weights.
    #[arg(long)]
    pub adapt_pi: bool,
    /// Pseudo-label confidence threshold.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// GCE exponent.
    #[arg(long)]
    pub q: Option<f64>,
    #[arg(long)]
    pub zeta_v: Option<f64>,
    #[arg(long)]
    pub zeta_alpha: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub finetune_kernels: bool,
    #[arg(long, value_enum)]
    pub mode: Option<FinetuneModeArg>,
    /// Pseudo-label / finetune rounds.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Background feature tensor for the occlusion model.
    #[arg(long)]
    pub background: Option<PathBuf>,
    #[arg(long)]
    pub background_kernels: Option<usize>,
    /// Occlusion prior.
    #[arg(long)]
    pub tau: Option<f64>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

impl ConfigArgs {
    pub fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        set(&mut cfg.kernels, self.kernels);
        set(&mut cfg.sigma, self.sigma);
        set(&mut cfg.mixtures, self.mixtures);
        set(&mut cfg.seed, self.seed);
        set(&mut cfg.em.max_iters, self.em_max_iters);
        set(&mut cfg.em.ll_tol, self.em_tol);
        set(&mut cfg.em.kmeans_restarts, self.restarts);
        set(
            &mut cfg.adapt.psi_mode,
            self.psi_mode.map(|m| match m {
                PsiModeArg::Fixed => PsiMode::Fixed,
                PsiModeArg::Monotone => PsiMode::MonotoneSchedule,
                PsiModeArg::DataDependent => PsiMode::DataDependent,
            }),
        );
        set(&mut cfg.adapt.psi_init, self.psi_init);
        set(&mut cfg.adapt.omega, self.omega.clone());
        set(&mut cfg.adapt.max_iters, self.adapt_max_iters);
        if self.adapt_pi {
            cfg.adapt.adapt_pi = true;
        }
        set(&mut cfg.finetune.threshold, self.threshold);
        set(&mut cfg.finetune.q, self.q);
        set(&mut cfg.finetune.zeta_v, self.zeta_v);
        set(&mut cfg.finetune.zeta_alpha, self.zeta_alpha);
        set(&mut cfg.finetune.learning_rate, self.learning_rate);
        set(&mut cfg.finetune.epochs, self.epochs);
        if self.finetune_kernels {
            cfg.finetune.finetune_kernels = true;
        }
        set(
            &mut cfg.finetune.mode,
            self.mode.map(|m| match m {
                FinetuneModeArg::Refit => FinetuneMode::Refit,
                FinetuneModeArg::Gradient => FinetuneMode::Gradient,
                FinetuneModeArg::RefitThenGradient => FinetuneMode::RefitThenGradient,
            }),
        );
        set(&mut cfg.finetune.rounds, self.iterations);
        if let Some(p) = &self.background {
            // Relative to the working directory, unlike paths inside a config file.
            cfg.occlusion.background = Some(std::path::absolute(p).unwrap_or_else(|_| p.clone()));
        }
        set(&mut cfg.occlusion.kernels, self.background_kernels);
        set(&mut cfg.occlusion.tau, self.tau);
        cfg.validate()?;
        Ok(cfg)
    }
}
