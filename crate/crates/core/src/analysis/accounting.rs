//! Trainable-parameter accounting against a base model.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::lora::{lora_param_count, LoraAdapter};
use crate::plan::QuantaPlan;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdaptedModule {
    pub name: String,
    pub out_dim: usize,
    pub in_dim: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub total_base_params: u64,
    /// Modules adapted in every layer.
    pub adapted: Vec<AdaptedModule>,
}

/// Decoder-only transformer with gated MLP, untied embeddings and RMS norms.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderArchitecture {
    pub vocab_size: u64,
    pub hidden_dim: u64,
    pub intermediate_dim: u64,
    pub num_layers: u64,
}

impl DecoderArchitecture {
    pub const LLAMA2_7B: Self = Self { vocab_size: 32_000, hidden_dim: 4096, intermediate_dim: 11_008, num_layers: 32 };

    pub fn param_count(&self) -> u64 {
        let h = self.hidden_dim;
        let attention = 4 * h * h;
        let mlp = 3 * h * self.intermediate_dim;
        let norms = 2 * h;
        let embeddings = 2 * self.vocab_size * h;
        self.num_layers * (attention + mlp + norms) + embeddings + h
    }
}

impl ModelConfig {
    /// LLaMA2-7B with query and value projections adapted.
    pub fn llama2_7b() -> Self {
        let arch = DecoderArchitecture::LLAMA2_7B;
        let h = arch.hidden_dim as usize;
        Self {
            name: "llama2-7b".into(),
            num_layers: arch.num_layers as usize,
            hidden_dim: h,
            total_base_params: arch.param_count(),
            adapted: vec![
                AdaptedModule { name: "q_proj".into(), out_dim: h, in_dim: h },
                AdaptedModule { name: "v_proj".into(), out_dim: h, in_dim: h },
            ],
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.total_base_params > 0, Config, "total_base_params must be positive");
        ensure!(self.num_layers > 0, Config, "num_layers must be positive");
        Ok(())
    }
}

/// Anything that can report its trainable-parameter count when placed on
/// an `out_dim x in_dim` weight.
pub trait TrainableParams {
    fn params_for(&self, out_dim: usize, in_dim: usize) -> Result<u64>;
}

impl TrainableParams for QuantaPlan {
    fn params_for(&self, out_dim: usize, in_dim: usize) -> Result<u64> {
        ensure!(
            (self.output_len(), self.input_len()) == (out_dim, in_dim),
            DimensionMismatch,
            "plan maps {} -> {} but module is {out_dim}x{in_dim}",
            self.input_len(),
            self.output_len()
        );
        Ok(self.cost().trainable_params)
    }
}

impl TrainableParams for LoraAdapter {
    fn params_for(&self, out_dim: usize, in_dim: usize) -> Result<u64> {
        ensure!(
            (self.out_dim(), self.in_dim()) == (out_dim, in_dim),
            DimensionMismatch,
            "adapter is {}x{} but module is {out_dim}x{in_dim}",
            self.out_dim(),
            self.in_dim()
        );
        Ok(self.param_count() as u64)
    }
}

/// Rank-only LoRA description, sized by whichever module it lands on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoraRank(pub usize);

impl TrainableParams for LoraRank {
    fn params_for(&self, out_dim: usize, in_dim: usize) -> Result<u64> {
        Ok(lora_param_count(self.0, in_dim, out_dim) as u64)
    }
}

pub fn total_trainable(adapter: &dyn TrainableParams, model: &ModelConfig) -> Result<u64> {
    let per_layer = model
        .adapted
        .iter()
        .map(|m| adapter.params_for(m.out_dim, m.in_dim))
        .sum::<Result<u64>>()?;
    Ok(per_layer * model.num_layers as u64)
}

/// Trainable parameters over all adapted modules and layers, as a
/// percentage of the base model's parameters.
pub fn param_fraction(adapter: &dyn TrainableParams, model: &ModelConfig) -> Result<f64> {
    model.validate()?;
    Ok(total_trainable(adapter, model)? as f64 / model.total_base_params as f64 * 100.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::plan::{build_plan, PlanScheme};
    use crate::tensor::AxisShape;

    #[test]
    fn llama2_7b_param_count() {
        assert_eq!(DecoderArchitecture::LLAMA2_7B.param_count(), 6_738_415_616);
    }

    #[test]
    fn table_fractions() {
        let model = ModelConfig::llama2_7b();
        let shape: AxisShape = "16-8-8-4".parse().unwrap();
        let plan = build_plan(&shape, &PlanScheme::AllPairs, 0, 1.0).unwrap();
        let q = param_fraction(&plan, &model).unwrap();
        assert!((q - 0.041).abs() <= 0.001, "{q}");
        let l = param_fraction(&LoraRank(128), &model).unwrap();
        assert!((l - 0.996).abs() <= 0.001, "{l}");
        assert_eq!(total_trainable(&LoraRank(128), &model).unwrap(), 67_108_864);
    }

    #[test]
    fn zero_gate_plan_is_zero_percent() {
        let shape = AxisShape::new(vec![4096]).unwrap();
        let plan = QuantaPlan::new(shape, vec![]).unwrap();
        assert_eq!(param_fraction(&plan, &ModelConfig::llama2_7b()).unwrap(), 0.0);
    }

    #[test]
    fn mismatched_plan_is_rejected() {
        let plan = build_plan(&AxisShape::new(vec![4, 4]).unwrap(), &PlanScheme::AllPairs, 0, 1.0).unwrap();
        assert!(param_fraction(&plan, &ModelConfig::llama2_7b()).is_err());
    }

    #[test]
    fn config_parsing_is_strict() {
        let text = r#"
            name = "tiny"
            num_layers = 2
            hidden_dim = 8
            total_base_params = 1000
            adapted = [{ name = "q", out_dim = 8, in_dim = 8 }]
        "#;
        let cfg = ModelConfig::parse(text).unwrap();
        assert_eq!(param_fraction(&LoraRank(1), &cfg).unwrap(), 3.2);
        assert!(ModelConfig::parse(&format!("{text}\nbogus = 1")).is_err());
        assert!(ModelConfig::parse(&text.replace("1000", "0")).is_err());
    }
}
