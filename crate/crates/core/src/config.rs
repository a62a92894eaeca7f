//! Engine configuration, stored as TOML.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster::KSelectionConfig;
use crate::controller::{Phase, PhasePriors, StrategyState, Thresholds, DEFAULT_BETA};
use crate::corpus::{DEFAULT_OVERLAP, DEFAULT_WINDOW};
use crate::embedding::DEFAULT_ALPHA;
use crate::error::{Error, Result};
use crate::providers::{ProviderEndpoint, ProviderSet};
use crate::tree::{TreeConfig, DEFAULT_ROOT_THRESHOLD, DEFAULT_SUMMARY_BUDGET};

pub const DEFAULT_SEED: u64 = 42;
pub const DEFAULT_BEAM: usize = 4;
pub const DEFAULT_TOP_K: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeSettings {
    pub summary_budget: usize,
    pub root_threshold: usize,
    pub k_selection: KSelectionConfig,
}

impl Default for TreeSettings {
    fn default() -> Self {
        Self {
            summary_budget: DEFAULT_SUMMARY_BUDGET,
            root_threshold: DEFAULT_ROOT_THRESHOLD,
            k_selection: KSelectionConfig::default(),
        }
    }
}

/// Every tunable of the engine. The single `seed` drives the projection, the
/// clustering, and the local providers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub alpha: f64,
    /// Off means leaves carry text embeddings only (`alpha` is treated as 1)
    /// and no visual tokens enter late interaction.
    pub visual_fusion: bool,
    pub beta: f64,
    pub beam: usize,
    pub top_k: usize,
    pub window: usize,
    pub overlap: usize,
    pub thresholds: Thresholds,
    pub tree: TreeSettings,
    pub phase_priors: PhasePriors,
    pub providers: Vec<ProviderEndpoint>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: DEFAULT_SEED,
            alpha: DEFAULT_ALPHA,
            visual_fusion: true,
            beta: DEFAULT_BETA,
            beam: DEFAULT_BEAM,
            top_k: DEFAULT_TOP_K,
            window: DEFAULT_WINDOW,
            overlap: DEFAULT_OVERLAP,
            thresholds: Thresholds::default(),
            tree: TreeSettings::default(),
            phase_priors: PhasePriors::default(),
            providers: Vec::new(),
        }
    }
}

impl Config {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Config = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad(format!("beta {} outside (0, 1)", self.beta));
        }
        let t = self.thresholds;
        if !(0.0 <= t.low && t.low <= t.high && t.high <= 1.0) {
            return bad(format!("thresholds must satisfy 0 <= low <= high <= 1, got {} and {}", t.low, t.high));
        }
        if self.beam == 0 || self.top_k == 0 {
            return bad("beam and top_k must be at least 1".into());
        }
        if self.window <= self.overlap {
            return bad(format!("window {} must exceed overlap {}", self.window, self.overlap));
        }
        if self.tree.summary_budget == 0 {
            return bad("summary_budget must be at least 1".into());
        }
        let k = self.tree.k_selection;
        if k.k_min < 2 || k.k_max < k.k_min || k.restarts == 0 || k.max_scoring_points < 2 {
            return bad("k_selection needs 2 <= k_min <= k_max, restarts >= 1, max_scoring_points >= 2".into());
        }
        for phase in Phase::OPERATIONAL {
            self.phase_priors
                .profile(phase)
                .validate()
                .map_err(|e| Error::Config(e.to_string()))?;
        }
        for ep in &self.providers {
            ep.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// Fusion weight actually applied to leaves.
    pub fn effective_alpha(&self) -> f64 {
        if self.visual_fusion {
            self.alpha
        } else {
            1.0
        }
    }

    pub fn tree_config(&self) -> TreeConfig {
        TreeConfig {
            k_selection: self.tree.k_selection,
            summary_budget: self.tree.summary_budget,
            root_threshold: self.tree.root_threshold,
            seed: self.seed,
        }
    }

    pub fn provider_set(&self) -> Result<ProviderSet> {
        Ok(ProviderSet::from_endpoints(&self.providers, self.seed)?)
    }

    pub fn fresh_state(&self) -> StrategyState {
        StrategyState::canonical(self.beta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::providers::{ProviderKind, Transport};

    #[test]
    fn round_trip() {
        let mut c = Config::default();
        c.providers.push(ProviderEndpoint {
            address: Some("http://127.0.0.1:9".into()),
            transport: Transport::RemoteHttp,
            ..ProviderEndpoint::local(ProviderKind::Summarize)
        });
        let text = c.to_toml();
        assert_eq!(Config::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn partial_file_takes_defaults() {
        let c = Config::from_toml("seed = 7\nalpha = 0.5\n[thresholds]\nlow = 0.2\nhigh = 0.8\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.alpha, 0.5);
        assert_eq!(c.thresholds.low, 0.2);
        assert_eq!(c.beam, DEFAULT_BEAM);
        assert_eq!(c.tree_config().seed, 7);
    }

    #[test]
    fn rejects_bad_values() {
        for text in [
            "alpha = 1.5",
            "beta = 1.0",
            "beam = 0",
            "window = 100\noverlap = 100",
            "bogus = 1",
            "[thresholds]\nlow = 0.8\nhigh = 0.2",
            "[tree.k_selection]\nk_min = 1\nk_max = 3\nmax_scoring_points = 10",
            "[[providers]]\nkind = \"text_embed\"\ntransport = \"remote_http\"\ntimeout_ms = 10",
        ] {
            assert!(matches!(Config::from_toml(text), Err(Error::Config(_))), "{text}");
        }
    }

    #[test]
    fn text_only_forces_alpha_one() {
        let c = Config {
            visual_fusion: false,
            ..Config::default()
        };
        assert_eq!(c.effective_alpha(), 1.0);
        assert_eq!(Config::default().effective_alpha(), 0.7);
    }
}
