// SPDX-License-Identifier: MIT OR Apache-2.0

//! Weight container, loader and writer.
//!
//! Linear layers use the `[in × out]` layout so `y = x · W + b`. The fused
//! attention input projection `c_attn.w` is `[d × 3d]` with columns
//! `[q | k | v]`, each block holding the heads contiguously.

use std::collections::HashMap;
use std::path::Path;

use super::{ModelConfig, ModelError};
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::tensor_file::{read_tensor_file, write_tensor_file, MODEL_MAGIC};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub qkv_w: Tensor,
    pub qkv_b: Tensor,
    pub attn_out_w: Tensor,
    pub attn_out_b: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub fc_w: Tensor,
    pub fc_b: Tensor,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
}

impl LayerWeights {
    fn tensors(&self) -> [&Tensor; 12] {
        [
            &self.ln1_g,
            &self.ln1_b,
            &self.qkv_w,
            &self.qkv_b,
            &self.attn_out_w,
            &self.attn_out_b,
            &self.ln2_g,
            &self.ln2_b,
            &self.fc_w,
            &self.fc_b,
            &self.proj_w,
            &self.proj_b,
        ]
    }
}

/// Immutable model parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelWeights {
    config: ModelConfig,
    pub wte: Tensor,
    pub wpe: Tensor,
    pub layers: Vec<LayerWeights>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
}

impl ModelWeights {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Load and validate a weight file against `config`.
    pub fn load(path: &Path, config: &ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let tensors = read_tensor_file(path, MODEL_MAGIC)?;
        Self::from_named(config.clone(), tensors)
    }

    /// Assemble from named tensors, checking names and shapes exactly.
    pub fn from_named(config: ModelConfig, tensors: Vec<(String, Tensor)>) -> Result<Self, ModelError> {
        config.validate()?;
        let table = config.tensor_table();
        let mut by_name: HashMap<String, Tensor> = tensors.into_iter().collect();
        for (name, shape) in &table {
            match by_name.get(name) {
                None => return Err(ModelError::MissingTensor(name.clone())),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(ModelError::Shape {
                        name: name.clone(),
                        expected: shape.clone(),
                        found: t.shape().to_vec(),
                    })
                }
                Some(t) if !t.is_finite() => return Err(ModelError::NonFinite(format!("tensor {name}"))),
                Some(_) => {}
            }
        }
        if by_name.len() > table.len() {
            let mut extra: Vec<&String> = by_name
                .keys()
                .filter(|k| !table.iter().any(|(n, _)| n == *k))
                .collect();
            extra.sort();
            return Err(ModelError::UnexpectedTensor(extra[0].clone()));
        }
        let mut take = |name: String| by_name.remove(&name).expect("validated above");
        let layers = (0..config.n_layers)
            .map(|i| {
                let mut t = |s: &str| take(format!("h.{i}.{s}"));
                LayerWeights {
                    ln1_g: t("ln_1.g"),
                    ln1_b: t("ln_1.b"),
                    qkv_w: t("attn.c_attn.w"),
                    qkv_b: t("attn.c_attn.b"),
                    attn_out_w: t("attn.c_proj.w"),
                    attn_out_b: t("attn.c_proj.b"),
                    ln2_g: t("ln_2.g"),
                    ln2_b: t("ln_2.b"),
                    fc_w: t("mlp.c_fc.w"),
                    fc_b: t("mlp.c_fc.b"),
                    proj_w: t("mlp.c_proj.w"),
                    proj_b: t("mlp.c_proj.b"),
                }
            })
            .collect();
        Ok(Self {
            wte: take("wte".into()),
            wpe: take("wpe".into()),
            layers,
            lnf_g: take("ln_f.g".into()),
            lnf_b: take("ln_f.b".into()),
            config,
        })
    }

    /// Tensors with canonical names, in file order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let names = self.config.tensor_table();
        let mut refs: Vec<&Tensor> = vec![&self.wte, &self.wpe];
        for layer in &self.layers {
            refs.extend(layer.tensors());
        }
        refs.push(&self.lnf_g);
        refs.push(&self.lnf_b);
        names.into_iter().map(|(n, _)| n).zip(refs).collect()
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let named = self.named_tensors();
        let refs: Vec<(&str, &Tensor)> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        write_tensor_file(path, MODEL_MAGIC, &refs)?;
        Ok(())
    }

    /// Synthetic checkpoint with GPT-2 style initialization statistics.
    ///
    /// Used to exercise the pipeline end to end when real weights are not
    /// at hand; its numbers carry no meaning about the released model.
    pub fn random(config: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = SeededRng::named(seed, "synthetic-weights");
        let tensors = config
            .tensor_table()
            .into_iter()
            .map(|(name, shape)| {
                let n: usize = shape.iter().product();
                let data: Vec<f32> = if name.ends_with(".g") {
                    vec![1.0; n]
                } else if name.ends_with(".b") {
                    vec![0.0; n]
                } else {
                    // Uniform with standard deviation 0.02.
                    let a = 0.02 * 3f32.sqrt();
                    (0..n).map(|_| rng.uniform_range(-a, a)).collect()
                };
                (name, Tensor::new(shape, data).expect("sized from shape"))
            })
            .collect();
        Self::from_named(config.clone(), tensors)
    }
}
