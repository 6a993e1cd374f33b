//! Run settings: command-line flags over a TOML file over built-in defaults.

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::Args;
use serde::{Deserialize, Serialize};

use hoproute_core::embedding::EmbedProviderConfig;
use hoproute_core::experiments::{default_taus, SigmaMode, SyntheticParams};
use hoproute_core::linear_model::TrainConfig;
use hoproute_core::routing::{AlphaMode, LabelMode, RouterConfig};

/// Every setting can come from a flag or from the config file; flags win.
#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    /// Queries file (JSON lines)
    #[arg(long)]
    pub queries: Option<PathBuf>,
    /// Passages file (JSON lines)
    #[arg(long)]
    pub passages: Option<PathBuf>,
    /// Hop-1 ranks file; queries ranked below 5 are dropped
    #[arg(long)]
    pub hop1_ranks: Option<PathBuf>,
    /// Vector store file
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Selector model artifact
    #[arg(long)]
    pub selector: Option<PathBuf>,
    /// Router model artifact
    #[arg(long)]
    pub router: Option<PathBuf>,
    /// Out-of-fold router probabilities written by `train`; replaces --router
    #[arg(long)]
    pub oof: Option<PathBuf>,
    /// Sentence annotations (JSON lines)
    #[arg(long)]
    pub annotations: Option<PathBuf>,
    /// Second annotator's file, for the kappa experiment
    #[arg(long)]
    pub annotations_b: Option<PathBuf>,
    /// Directory with lexicon files overriding the built-in lists
    #[arg(long)]
    pub lexicon_dir: Option<PathBuf>,
    /// Remote embedding cache file
    #[arg(long)]
    pub cache: Option<PathBuf>,
    /// Output directory [default: out]
    #[arg(long)]
    pub out_dir: Option<PathBuf>,

    /// Fusion weight of the selected sentence [default: 0.25]
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Union threshold on the router probability [default: 0.5]
    #[arg(long)]
    pub tau: Option<f64>,
    /// frozen or p_weighted [default: frozen]
    #[arg(long)]
    pub alpha_mode: Option<AlphaMode>,
    /// Recall cutoff [default: 5]
    #[arg(long)]
    pub k: Option<usize>,
    /// Selector abstains below this probability [default: 0]
    #[arg(long)]
    pub abstain_threshold: Option<f64>,
    /// Worker threads [default: all cores]
    #[arg(long)]
    pub parallelism: Option<usize>,

    /// Cross-fitting folds [default: 5]
    #[arg(long)]
    pub folds: Option<usize>,
    /// strict_recall or rank_gain [default: strict_recall]
    #[arg(long)]
    pub label_mode: Option<LabelMode>,
    /// L2 penalty on standardized weights [default: 1.0]
    #[arg(long)]
    pub l2_penalty: Option<f64>,
    /// Gradient-norm tolerance [default: 1e-8]
    #[arg(long)]
    pub tol: Option<f64>,
    /// Newton iteration cap [default: 200]
    #[arg(long)]
    pub max_iter: Option<usize>,

    /// Synthetic queries [default: 10000]
    #[arg(long)]
    pub n: Option<usize>,
    /// Synthetic pool size [default: 200]
    #[arg(long)]
    pub pool_size: Option<usize>,
    /// Synthetic pool standard deviation [default: 0.1]
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Synthetic standardized margin range [default: 5]
    #[arg(long)]
    pub z_max: Option<f64>,
    /// Synthetic RNG seed [default: 7]
    #[arg(long)]
    pub seed: Option<u64>,
    /// Comma-separated thresholds for the sweep [default: 0.5,0.55,...,0.75]
    #[arg(long, value_delimiter = ',')]
    pub taus: Option<Vec<f64>>,
    /// Knockout fusion weight of the bridge variant; 1 scores with the variant alone [default: 1]
    #[arg(long)]
    pub knockout_alpha: Option<f64>,
    /// per_query or global [default: per_query]
    #[arg(long)]
    pub sigma_mode: Option<SigmaMode>,
    /// Cantelli threshold on AUC [default: 0.6]
    #[arg(long)]
    pub cantelli_t: Option<f64>,

    /// Embedding provider, config file only
    #[arg(skip)]
    pub provider: Option<EmbedProviderConfig>,
}

macro_rules! overlay {
    ($cli:ident, $file:ident, $($f:ident),* $(,)?) => {
        Settings { $($f: $cli.$f.or($file.$f),)* }
    };
}

impl Settings {
    pub fn load_file(path: &Path) -> anyhow::Result<Settings> {
        let raw = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&raw).map_err(|e| anyhow::Error::new(e).context(format!("parsing config {}", path.display())))
    }

    /// Flags in `self` take precedence over `file`.
    pub fn over(self, file: Settings) -> Settings {
        let cli = self;
        overlay!(
            cli, file, queries, passages, hop1_ranks, store, selector, router, oof, annotations, annotations_b,
            lexicon_dir, cache, out_dir, alpha, tau, alpha_mode, k, abstain_threshold, parallelism, folds,
            label_mode, l2_penalty, tol, max_iter, n, pool_size, sigma, z_max, seed, taus, knockout_alpha,
            sigma_mode, cantelli_t, provider,
        )
    }

    pub fn effective(&self) -> anyhow::Result<EffectiveConfig> {
        let router = RouterConfig {
            tau: self.tau.unwrap_or(0.5),
            alpha: self.alpha.unwrap_or(0.25),
            alpha_mode: self.alpha_mode.unwrap_or_default(),
            k: self.k.unwrap_or(5),
            abstain_threshold: self.abstain_threshold.unwrap_or(0.0),
        };
        router.validate()?;
        if !(0.0..=1.0).contains(&router.tau) {
            anyhow::bail!("tau {} outside [0, 1]", router.tau);
        }
        let defaults = TrainConfig::default();
        let synth = SyntheticParams::default();
        Ok(EffectiveConfig {
            inputs: Inputs {
                queries: self.queries.clone(),
                passages: self.passages.clone(),
                hop1_ranks: self.hop1_ranks.clone(),
                store: self.store.clone(),
                selector: self.selector.clone(),
                router: self.router.clone(),
                oof: self.oof.clone(),
                annotations: self.annotations.clone(),
                annotations_b: self.annotations_b.clone(),
                lexicon_dir: self.lexicon_dir.clone(),
            },
            router,
            train: TrainConfig {
                l2_penalty: self.l2_penalty.unwrap_or(defaults.l2_penalty),
                tol: self.tol.unwrap_or(defaults.tol),
                max_iter: self.max_iter.unwrap_or(defaults.max_iter),
            },
            folds: self.folds.unwrap_or(5),
            label_mode: self.label_mode.unwrap_or_default(),
            experiment: ExperimentParams {
                synthetic: SyntheticParams {
                    n: self.n.unwrap_or(synth.n),
                    pool_size: self.pool_size.unwrap_or(synth.pool_size),
                    sigma: self.sigma.unwrap_or(synth.sigma),
                    z_max: self.z_max.unwrap_or(synth.z_max),
                    seed: self.seed.unwrap_or(synth.seed),
                },
                taus: self.taus.clone().unwrap_or_else(default_taus),
                knockout_alpha: self.knockout_alpha.unwrap_or(1.0),
                sigma_mode: self.sigma_mode.unwrap_or_default(),
                cantelli_t: self.cantelli_t.unwrap_or(0.6),
            },
        })
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Inputs {
    pub queries: Option<PathBuf>,
    pub passages: Option<PathBuf>,
    pub hop1_ranks: Option<PathBuf>,
    pub store: Option<PathBuf>,
    pub selector: Option<PathBuf>,
    pub router: Option<PathBuf>,
    pub oof: Option<PathBuf>,
    pub annotations: Option<PathBuf>,
    pub annotations_b: Option<PathBuf>,
    pub lexicon_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentParams {
    pub synthetic: SyntheticParams,
    pub taus: Vec<f64>,
    pub knockout_alpha: f64,
    pub sigma_mode: SigmaMode,
    pub cantelli_t: f64,
}

/// Resolved configuration, embedded in every report. The output directory
/// is left out so reports do not depend on where they are written.
#[derive(Debug, Clone, Serialize)]
pub struct EffectiveConfig {
    pub inputs: Inputs,
    pub router: RouterConfig,
    pub train: TrainConfig,
    pub folds: usize,
    pub label_mode: LabelMode,
    pub experiment: ExperimentParams,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_beat_file_beat_defaults() {
        let file: Settings = toml::from_str("alpha = 0.4\ntau = 0.6\nk = 10\n").unwrap();
        let cli = Settings {
            alpha: Some(0.3),
            ..Default::default()
        };
        let eff = cli.over(file).effective().unwrap();
        assert_eq!(eff.router.alpha, 0.3);
        assert_eq!(eff.router.tau, 0.6);
        assert_eq!(eff.router.k, 10);
        assert_eq!(eff.router.alpha_mode, AlphaMode::Frozen);
        assert_eq!(eff.folds, 5);
    }

    #[test]
    fn file_parses_enums_and_provider() {
        let file: Settings = toml::from_str(
            "alpha_mode = \"p_weighted\"\nlabel_mode = \"rank_gain\"\n[provider]\nendpoint = \"http://x/embed\"\nmodel = \"m\"\n",
        )
        .unwrap();
        assert_eq!(file.alpha_mode, Some(AlphaMode::PWeighted));
        assert_eq!(file.label_mode, Some(LabelMode::RankGain));
        assert_eq!(file.provider.unwrap().model, "m");
        assert!(toml::from_str::<Settings>("bogus = 1\n").is_err());
    }

    #[test]
    fn out_of_range_alpha_is_rejected() {
        let s = Settings {
            alpha: Some(1.5),
            ..Default::default()
        };
        assert!(s.effective().is_err());
    }
}
