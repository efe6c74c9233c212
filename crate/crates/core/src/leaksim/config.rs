//! JSON configuration of the simulator.

use serde::{Deserialize, Serialize};

use super::{default_layers, LayerSpec, LeakageModel, LlmSpec, SimError, VictimSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VictimConfig {
    pub layers: Vec<LayerSpec>,
    pub input_dim: usize,
    pub n_classes: usize,
    pub input_noise: f64,
    pub template_seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pad_to: Option<usize>,
}

impl Default for VictimConfig {
    fn default() -> Self {
        Self {
            layers: default_layers(),
            input_dim: 64,
            n_classes: 10,
            input_noise: 0.05,
            template_seed: 0,
            pad_to: None,
        }
    }
}

impl VictimConfig {
    pub fn build(&self) -> Result<VictimSpec, SimError> {
        let mut spec = VictimSpec::new(
            self.layers.clone(),
            self.input_dim,
            self.n_classes,
            self.input_noise,
            self.template_seed,
        )?;
        spec.pad_to = self.pad_to;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmConfig {
    pub vocab: usize,
    pub ops_per_token: usize,
    pub operand_seed: u64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            vocab: 32,
            ops_per_token: 64,
            operand_seed: 0,
        }
    }
}

impl LlmConfig {
    pub fn build(&self, leakage: LeakageModel) -> Result<LlmSpec, SimError> {
        LlmSpec::new(self.vocab, self.ops_per_token, self.operand_seed, leakage)
    }
}

/// The `leakage` / `victim` / `llm` sections of a run configuration.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub leakage: LeakageModel,
    pub victim: VictimConfig,
    pub llm: LlmConfig,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::leaksim::{OpKind, ZeroSkip};

    #[test]
    fn parses_documented_keys() {
        let cfg: SimConfig = serde_json::from_str(
            r#"{
                "leakage": {"a": 2.0, "b": 0.1, "sigma": 0.5, "zero_skip": "time", "samples_per_op": 2},
                "victim": {"layers": [{"kind": "conv", "ops": 10}, {"kind": "fc", "ops": 5, "leak_scale": 0.0}],
                           "input_dim": 16, "n_classes": 4, "input_noise": 0.0, "template_seed": 3},
                "llm": {"vocab": 8, "ops_per_token": 4}
            }"#,
        )
        .unwrap();
        assert_eq!(cfg.leakage.zero_skip, ZeroSkip::Time);
        assert_eq!(cfg.victim.layers[1].kind, OpKind::Fc);
        assert_eq!(cfg.victim.layers[0].leak_scale, 1.0);
        assert_eq!(cfg.victim.layers[1].leak_scale, 0.0);
        let spec = cfg.victim.build().unwrap();
        assert_eq!(spec.full_len(&cfg.leakage), 30);
        assert_eq!(cfg.llm.build(cfg.leakage).unwrap().segment_len(), 8);
    }

    #[test]
    fn empty_object_gives_defaults() {
        let cfg: SimConfig = serde_json::from_str("{}").unwrap();
        assert_eq!(cfg, SimConfig::default());
        assert_eq!(cfg.victim.build().unwrap().full_len(&cfg.leakage), 1792);
    }

    #[test]
    fn unknown_zero_skip_mode_is_rejected() {
        assert!(serde_json::from_str::<SimConfig>(r#"{"leakage": {"zero_skip": "sometimes"}}"#).is_err());
    }
}
