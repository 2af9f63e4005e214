//! Experiment configuration file: everything a session run needs, in
//! one JSON document with no ambient defaults hiding in the binary.
//! Unknown keys are rejected so a typo cannot silently change a run.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use psc::netsim::{ChannelModel, SessionSetup, SourceSpec, DEFAULT_DRAIN_TIMEOUT_S};
use psc::predictor::{Distribution, MarkovChain, PredictorSpec, Token};
use psc::protocol::{FaultPlan, GenerationPolicy, SessionConfig};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub predictor: PredictorSpec,
    pub source: SourceConfig,
    pub channel: ChannelModel,
    pub session: SessionConfig,
    #[serde(default = "GenerationPolicy::greedy")]
    pub policy: GenerationPolicy,
    #[serde(default)]
    pub seeds: SeedsConfig,
    #[serde(default)]
    pub fault: FaultConfig,
    #[serde(default)]
    pub adaptive: bool,
    #[serde(default = "default_window_tokens")]
    pub window_tokens: u64,
    #[serde(default = "default_drain_timeout")]
    pub drain_timeout_s: f64,
    #[serde(default)]
    pub tokenizer_id: Option<String>,
    #[serde(default)]
    pub output: OutputPaths,
}

fn default_window_tokens() -> u64 {
    psc::monitor::DEFAULT_WINDOW_TOKENS
}

fn default_drain_timeout() -> f64 {
    DEFAULT_DRAIN_TIMEOUT_S
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum SourceConfig {
    /// Sample a general Markov chain.
    Markov {
        transition: Vec<Vec<f64>>,
        initial: Option<Vec<f64>>,
        seed: u64,
        tokens: u64,
    },
    /// Two-state symmetric chain that flips with probability `p`.
    Flip { p: f64, seed: u64, tokens: u64 },
    /// Replay this exact token sequence.
    Corpus { tokens: Vec<Token> },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeedsConfig {
    pub key: u64,
    pub divergence: u64,
}

impl Default for SeedsConfig {
    fn default() -> Self {
        Self {
            key: 1,
            divergence: 2,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultConfig {
    #[serde(default)]
    pub stale_baseline_patches: Vec<u64>,
    #[serde(default)]
    pub corrupt_patch_wire: Vec<u64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputPaths {
    #[serde(default)]
    pub transcript: Option<PathBuf>,
    #[serde(default)]
    pub metrics: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Builds the runnable setup, validating every component. `seed`
    /// reseeds source, channel, and divergence randomness when given.
    pub fn to_setup(&self, seed: Option<u64>) -> Result<SessionSetup, String> {
        let source = match &self.source {
            SourceConfig::Markov {
                transition,
                initial,
                seed: src_seed,
                tokens,
            } => {
                let init = match initial {
                    Some(probs) => Some(Distribution::new(probs.clone()).map_err(err_str)?),
                    None => None,
                };
                let chain = MarkovChain::new(transition.clone(), init).map_err(err_str)?;
                (
                    SourceSpec::Markov {
                        chain,
                        seed: seed.unwrap_or(*src_seed),
                    },
                    *tokens,
                )
            }
            SourceConfig::Flip {
                p,
                seed: src_seed,
                tokens,
            } => {
                let chain = MarkovChain::binary_flip(*p).map_err(err_str)?;
                (
                    SourceSpec::Markov {
                        chain,
                        seed: seed.unwrap_or(*src_seed),
                    },
                    *tokens,
                )
            }
            SourceConfig::Corpus { tokens } => {
                let n = tokens.len() as u64;
                (
                    SourceSpec::Corpus {
                        tokens: tokens.clone(),
                    },
                    n,
                )
            }
        };
        let mut channel = self.channel;
        if let Some(s) = seed {
            channel.seed = s.wrapping_mul(0x9e37_79b9).wrapping_add(1);
        }
        let (source_spec, max_tokens) = source;
        let mut setup = SessionSetup::new(
            self.session,
            channel,
            self.predictor.clone(),
            source_spec,
            max_tokens,
        );
        setup.policy = self.policy.clone();
        setup.key_seed = self.seeds.key;
        setup.divergence_seed = seed
            .map(|s| s.wrapping_mul(0x2545_f491).wrapping_add(2))
            .unwrap_or(self.seeds.divergence);
        setup.fault = FaultPlan {
            stale_baseline_patches: self.fault.stale_baseline_patches.clone(),
            corrupt_patch_wire: self.fault.corrupt_patch_wire.clone(),
        };
        setup.adaptive = self.adaptive;
        setup.window_tokens = self.window_tokens;
        setup.drain_timeout_s = self.drain_timeout_s;
        if let Some(id) = &self.tokenizer_id {
            setup.tokenizer_id = id.clone();
        }
        Ok(setup)
    }
}

fn err_str<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "predictor": {"type": "markov", "order": 1, "V": 2,
                      "parameters": {"transition": [[0.9, 0.1], [0.1, 0.9]],
                                     "initial": [0.5, 0.5]}},
        "source": {"kind": "flip", "p": 0.1, "seed": 7, "tokens": 100},
        "channel": {"capacity_bps": 10000.0, "latency_s": 0.005, "eta": 0.8},
        "session": {"w": 64, "h": 48, "k": 8, "rho": 0.25, "r": 100.0,
                    "regime": "reproducible"}
    }"#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str(MINIMAL).unwrap();
        assert_eq!(cfg.window_tokens, 256);
        assert!(!cfg.adaptive);
        let setup = cfg.to_setup(None).unwrap();
        assert_eq!(setup.max_tokens, 100);
        assert_eq!(setup.key_seed, 1);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let text = MINIMAL.replacen("\"adaptive\"", "\"adaptiv\"", 1);
        // the minimal config has no adaptive key, so inject a bogus one
        let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
        v.as_object_mut()
            .unwrap()
            .insert("bogus".into(), serde_json::json!(1));
        let res: Result<ExperimentConfig, _> = serde_json::from_value(v);
        assert!(res.is_err());
    }

    #[test]
    fn seed_override_reseeds_source_and_divergence() {
        let cfg: ExperimentConfig = serde_json::from_str(MINIMAL).unwrap();
        let a = cfg.to_setup(Some(5)).unwrap();
        let b = cfg.to_setup(None).unwrap();
        assert_ne!(a.divergence_seed, b.divergence_seed);
        assert_ne!(a.channel.seed, b.channel.seed);
    }
}
