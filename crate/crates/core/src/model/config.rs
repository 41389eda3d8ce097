// SPDX-License-Identifier: MIT OR Apache-2.0

//! Architecture constants.

use serde::{Deserialize, Serialize};

use super::ModelError;

/// Shape constants of a GPT-2 style decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_ctx: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub layer_norm_eps: f32,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::gpt2_small()
    }
}

impl ModelConfig {
    /// The 124M-parameter release: 12 layers, 12 heads, width 768.
    pub fn gpt2_small() -> Self {
        Self {
            vocab_size: 50257,
            n_ctx: 1024,
            d_model: 768,
            n_layers: 12,
            n_heads: 12,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn d_mlp(&self) -> usize {
        4 * self.d_model
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: &str| Err(ModelError::InvalidConfig(msg.to_string()));
        if self.vocab_size == 0 || self.n_ctx == 0 || self.d_model == 0 {
            return bad("vocab_size, n_ctx and d_model must be positive");
        }
        if self.n_layers == 0 || self.n_heads == 0 {
            return bad("n_layers and n_heads must be positive");
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return bad("d_model must be divisible by n_heads");
        }
        if !(self.layer_norm_eps > 0.0 && self.layer_norm_eps.is_finite()) {
            return bad("layer_norm_eps must be positive and finite");
        }
        Ok(())
    }

    /// Canonical tensor names and shapes, in file order.
    pub fn tensor_table(&self) -> Vec<(String, Vec<usize>)> {
        let (d, f) = (self.d_model, self.d_mlp());
        let mut table = vec![
            ("wte".to_string(), vec![self.vocab_size, d]),
            ("wpe".to_string(), vec![self.n_ctx, d]),
        ];
        for i in 0..self.n_layers {
            let p = |s: &str| format!("h.{i}.{s}");
            table.extend([
                (p("ln_1.g"), vec![d]),
                (p("ln_1.b"), vec![d]),
                (p("attn.c_attn.w"), vec![d, 3 * d]),
                (p("attn.c_attn.b"), vec![3 * d]),
                (p("attn.c_proj.w"), vec![d, d]),
                (p("attn.c_proj.b"), vec![d]),
                (p("ln_2.g"), vec![d]),
                (p("ln_2.b"), vec![d]),
                (p("mlp.c_fc.w"), vec![d, f]),
                (p("mlp.c_fc.b"), vec![f]),
                (p("mlp.c_proj.w"), vec![f, d]),
                (p("mlp.c_proj.b"), vec![d]),
            ]);
        }
        table.push(("ln_f.g".to_string(), vec![d]));
        table.push(("ln_f.b".to_string(), vec![d]));
        table
    }

    pub fn num_parameters(&self) -> usize {
        self.tensor_table()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gpt2_small_parameter_count() {
        let c = ModelConfig::gpt2_small();
        c.validate().unwrap();
        assert_eq!(c.d_head(), 64);
        // Published size of the small checkpoint with tied embeddings.
        assert_eq!(c.num_parameters(), 124_439_808);
        assert_eq!(c.tensor_table().len(), 2 + 12 * 12 + 2);
    }

    #[test]
    fn rejects_indivisible_heads() {
        let c = ModelConfig {
            n_heads: 5,
            ..ModelConfig::gpt2_small()
        };
        assert!(c.validate().is_err());
    }
}
