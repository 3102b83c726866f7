//! Experiment configuration: one file drives every command.
//!
//! TOML is canonical, JSON is accepted (detected by extension). Precedence is
//! flag > file > default, and the `FRL_SEED` environment variable overrides
//! the seed from any source.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Target dimension α ∈ (0, d).
    pub alpha: f64,
    /// Ambient dimension d.
    pub d: usize,
    /// Experiment exponent; defaults to 2d/α when absent.
    pub p: Option<f64>,
    /// Stage depth k ≥ 0.
    pub depth: usize,
    /// First branching factor n₁ ≥ 2.
    pub n1: u64,
    /// Requested sandwich constant for t_j = floor(c0·n_j^α).
    pub c0: f64,
    pub seed: u64,
    pub node_budget: u64,
    pub out_dir: PathBuf,
    /// Experiments executed by `frl run` after search + build.
    pub experiments: Vec<String>,
    pub tolerances: Tolerances,
    pub search: SearchSection,
    pub decay: DecaySection,
    pub restrict: RestrictSection,
    pub sharpness: SharpnessSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Tolerances {
    /// Relative agreement required between successive quadrature refinements.
    pub quadrature_rel: f64,
    /// Base quadrature spacing for extension norms (≤ 1/2).
    pub spacing: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances {
            quadrature_rel: 1e-3,
            spacing: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSection {
    /// Acceptance threshold on the certified Λ(p) constant.
    pub constant_cap: f64,
    pub swap_rounds: usize,
    pub starts: usize,
    pub iters_per_start: usize,
}

impl Default for SearchSection {
    fn default() -> Self {
        SearchSection {
            constant_cap: 4.0,
            swap_rounds: 200,
            starts: 6,
            iters_per_start: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecaySection {
    /// Largest sampled radius; defaults to max(N_k, 256).
    pub r_max: Option<f64>,
    pub per_annulus: usize,
}

impl Default for DecaySection {
    fn default() -> Self {
        DecaySection {
            r_max: None,
            per_annulus: 48,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RestrictSection {
    /// Experiment exponent; defaults to the config-level p.
    pub p: Option<f64>,
    /// Overrides the default C₀ (max per-level certified constant × 2^d).
    pub c0_override: Option<f64>,
    pub power_starts: usize,
    pub power_iters: usize,
}

impl Default for RestrictSection {
    fn default() -> Self {
        RestrictSection {
            p: None,
            c0_override: None,
            power_starts: 2,
            power_iters: 12,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SharpnessSection {
    /// Exponents to probe; defaults to {p_plan − 1, p_plan + 1}.
    pub p_list: Option<Vec<f64>>,
    pub r_list: Vec<f64>,
}

impl Default for SharpnessSection {
    fn default() -> Self {
        SharpnessSection {
            p_list: None,
            r_list: vec![8.0, 16.0, 32.0, 64.0],
        }
    }
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            alpha: 0.5,
            d: 1,
            p: None,
            depth: 2,
            n1: 8,
            c0: 1.0,
            seed: 0,
            node_budget: 1_000_000,
            out_dir: PathBuf::from("runs"),
            experiments: vec![],
            tolerances: Tolerances::default(),
            search: SearchSection::default(),
            decay: DecaySection::default(),
            restrict: RestrictSection::default(),
            sharpness: SharpnessSection::default(),
        }
    }
}

/// Command-line overrides (flag > file > default).
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub alpha: Option<f64>,
    pub d: Option<usize>,
    pub p: Option<f64>,
    pub depth: Option<usize>,
    pub n1: Option<u64>,
    pub c0: Option<f64>,
    pub seed: Option<u64>,
    pub node_budget: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Construction exponent p = 2d/α (the multiscale sets are Λ(p) sets for
    /// this exponent regardless of the experiment-level p).
    pub fn plan_p(&self) -> f64 {
        2.0 * self.d as f64 / self.alpha
    }

    /// Experiment exponent.
    pub fn effective_p(&self) -> f64 {
        self.p.unwrap_or_else(|| self.plan_p())
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < self.d as f64) {
            return Err(CliError::Validation(format!(
                "alpha = {} must lie in (0, d = {})",
                self.alpha, self.d
            )));
        }
        if self.effective_p() <= 2.0 {
            return Err(CliError::Validation(format!(
                "p = {} must exceed 2",
                self.effective_p()
            )));
        }
        if self.n1 < 2 {
            return Err(CliError::Validation(format!(
                "n1 = {} must be ≥ 2",
                self.n1
            )));
        }
        if self.tolerances.quadrature_rel <= 0.0
            || self.tolerances.spacing <= 0.0
            || self.tolerances.spacing > 0.5
        {
            return Err(CliError::Validation(
                "tolerances must be positive (spacing ≤ 1/2)".into(),
            ));
        }
        if self.c0 <= 0.0 {
            return Err(CliError::Validation(format!(
                "c0 = {} must be positive",
                self.c0
            )));
        }
        Ok(())
    }

    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut config = match path {
            None => ExperimentConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    CliError::Validation(format!("cannot read config {}: {e}", p.display()))
                })?;
                if p.extension().and_then(|e| e.to_str()) == Some("json") {
                    serde_json::from_str(&text)
                        .map_err(|e| CliError::Validation(format!("bad JSON config: {e}")))?
                } else {
                    toml::from_str(&text)
                        .map_err(|e| CliError::Validation(format!("bad TOML config: {e}")))?
                }
            }
        };
        let o = overrides;
        if let Some(v) = o.alpha {
            config.alpha = v;
        }
        if let Some(v) = o.d {
            config.d = v;
        }
        if let Some(v) = o.p {
            config.p = Some(v);
        }
        if let Some(v) = o.depth {
            config.depth = v;
        }
        if let Some(v) = o.n1 {
            config.n1 = v;
        }
        if let Some(v) = o.c0 {
            config.c0 = v;
        }
        if let Some(v) = o.seed {
            config.seed = v;
        }
        if let Some(v) = o.node_budget {
            config.node_budget = v;
        }
        if let Some(v) = &o.out_dir {
            config.out_dir = v.clone();
        }
        if let Ok(env_seed) = std::env::var("FRL_SEED") {
            config.seed = env_seed.parse().map_err(|_| {
                CliError::Validation(format!("FRL_SEED = {env_seed:?} is not a valid u64"))
            })?;
        }
        config.validate()?;
        Ok(config)
    }

    /// Hash of the canonical JSON serialization; embedded in every output
    /// file so artifacts from different configs cannot be mixed.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(canonical.as_bytes());
        hex_string(&hasher.finalize())
    }
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn effective_p_defaults_to_critical() {
        let cfg = ExperimentConfig {
            alpha: 0.5,
            d: 1,
            ..Default::default()
        };
        assert_eq!(cfg.effective_p(), 4.0);
        assert_eq!(cfg.plan_p(), 4.0);
    }

    #[test]
    fn rejects_bad_alpha() {
        let cfg = ExperimentConfig {
            alpha: 1.0,
            d: 1,
            ..Default::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_changes_with_content() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.seed = 99;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), ExperimentConfig::default().hash());
    }

    #[test]
    fn toml_round_trip() {
        let cfg = ExperimentConfig {
            alpha: 0.66,
            d: 2,
            depth: 3,
            ..Default::default()
        };
        let text = toml::to_string(&cfg).unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(cfg, back);
    }
}
