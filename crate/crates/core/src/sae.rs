// SPDX-License-Identifier: MIT OR Apache-2.0

//! Sparse autoencoder over residual-stream activations.
//!
//! ```text
//! f = ReLU((h − b_dec)·W_enc + b_enc)        W_enc: [d_model × d_sae]
//! ĥ = f·W_dec + b_dec                        W_dec: [d_sae × d_model]
//! loss = mean_batch(‖h − ĥ‖² + λ·‖f‖₁)
//! ```
//!
//! Decoder rows are the feature directions and are kept at unit L2 norm:
//! before each optimizer step the gradient component parallel to each row is
//! removed, and after the step each row is renormalized. Gradients are
//! analytic; training is single-threaded, seeded and bit-reproducible.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, ModelWeights};
use crate::rng::SeededRng;
use crate::tensor::{matmul_into, transpose_into, Tensor};
use crate::tensor_file::{read_tensor_file, write_tensor_file, FormatError, ACTIVATIONS_MAGIC, SAE_MAGIC};

/// Tensor names in an SAE parameter file.
const TENSOR_NAMES: [&str; 4] = ["W_enc", "b_enc", "W_dec", "b_dec"];
/// Tensor name in an activation dataset file.
const ACTIVATIONS_TENSOR: &str = "activations";
/// Prompts per batched forward when collecting activations.
const COLLECT_CHUNK: usize = 16;

#[derive(Debug, Error)]
pub enum SaeError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{0}")]
    Io(String),
    #[error("SAE tensor {name}: expected shape {expected:?}, found {found:?}")]
    Shape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("missing SAE tensor {0}")]
    MissingTensor(String),
    #[error("non-finite values in {0}")]
    NonFinite(String),
    #[error("invalid SAE training config: {0}")]
    InvalidConfig(String),
    #[error("dataset needs at least {needed} rows, has {found}")]
    TooFewRows { needed: usize, found: usize },
    #[error("dataset has zero total variance")]
    ZeroVariance,
    #[error("training diverged at step {step}: loss {loss} (mse {mse}, l1 {l1}, max |param| {max_param})")]
    Diverged {
        step: usize,
        loss: f64,
        mse: f64,
        l1: f64,
        max_param: f32,
    },
}

// ---------------------------------------------------------------------------
// Parameters
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct SaeParams {
    /// `[d_model × d_sae]`.
    pub w_enc: Tensor,
    /// `[d_sae]`.
    pub b_enc: Tensor,
    /// `[d_sae × d_model]`; row `i` is feature `i`'s direction.
    pub w_dec: Tensor,
    /// `[d_model]`.
    pub b_dec: Tensor,
}

impl SaeParams {
    pub fn new(w_enc: Tensor, b_enc: Tensor, w_dec: Tensor, b_dec: Tensor) -> Result<Self, SaeError> {
        let d = *b_dec.shape().first().unwrap_or(&0);
        let f = *b_enc.shape().first().unwrap_or(&0);
        let expect = [vec![d, f], vec![f], vec![f, d], vec![d]];
        for ((name, t), expected) in TENSOR_NAMES.iter().zip([&w_enc, &b_enc, &w_dec, &b_dec]).zip(expect) {
            if t.shape() != expected.as_slice() || d == 0 || f == 0 {
                return Err(SaeError::Shape {
                    name: name.to_string(),
                    expected,
                    found: t.shape().to_vec(),
                });
            }
            if !t.is_finite() {
                return Err(SaeError::NonFinite(name.to_string()));
            }
        }
        Ok(Self { w_enc, b_enc, w_dec, b_dec })
    }

    /// Seeded initialization: encoder and decoder uniform in `±1/√d_model`,
    /// decoder rows normalized, `b_enc = 0`, `b_dec = mean`.
    pub fn init(d_model: usize, d_sae: usize, mean: &[f32], seed: u64) -> Result<Self, SaeError> {
        if mean.len() != d_model {
            return Err(SaeError::Shape {
                name: "b_dec".into(),
                expected: vec![d_model],
                found: vec![mean.len()],
            });
        }
        let mut rng = SeededRng::named(seed, "sae-init");
        let bound = 1.0 / (d_model as f32).sqrt();
        let mut draw = |n: usize| (0..n).map(|_| rng.uniform_range(-bound, bound)).collect::<Vec<f32>>();
        let w_enc = draw(d_model * d_sae);
        let w_dec = draw(d_sae * d_model);
        let mut params = Self::new(
            Tensor::new(vec![d_model, d_sae], w_enc).expect("shape"),
            Tensor::zeros(vec![d_sae]),
            Tensor::new(vec![d_sae, d_model], w_dec).expect("shape"),
            Tensor::vector(mean.to_vec()),
        )?;
        params.normalize_decoder();
        Ok(params)
    }

    pub fn d_model(&self) -> usize {
        self.b_dec.numel()
    }

    pub fn d_sae(&self) -> usize {
        self.b_enc.numel()
    }

    /// Unit-norm direction of feature `i`.
    pub fn direction(&self, i: usize) -> &[f32] {
        self.w_dec.row(i)
    }

    /// Rescale every decoder row to unit L2 norm (rows of zero norm are left).
    pub fn normalize_decoder(&mut self) {
        let d = self.d_model();
        for row in self.w_dec.data_mut().chunks_exact_mut(d) {
            let norm = row.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
            if norm > 0.0 {
                let inv = (1.0 / norm) as f32;
                row.iter_mut().for_each(|x| *x *= inv);
            }
        }
    }

    /// Largest `|‖row‖ − 1|` over decoder rows.
    pub fn decoder_norm_error(&self) -> f64 {
        self.w_dec
            .data()
            .chunks_exact(self.d_model())
            .map(|row| (row.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Pre-activations `(h − b_dec)·W_enc + b_enc` for `n` rows.
    fn pre_activations(&self, rows: &[f32], n: usize) -> Vec<f32> {
        let (d, f) = (self.d_model(), self.d_sae());
        let centered: Vec<f32> = rows
            .chunks_exact(d)
            .flat_map(|r| r.iter().zip(self.b_dec.data()).map(|(x, b)| x - b))
            .collect();
        let mut pre = vec![0.0; n * f];
        matmul_into(&centered, self.w_enc.data(), n, d, f, &mut pre);
        for row in pre.chunks_exact_mut(f) {
            row.iter_mut().zip(self.b_enc.data()).for_each(|(p, b)| *p += b);
        }
        pre
    }

    /// Feature activations for one residual vector.
    pub fn encode(&self, h: &[f32]) -> Vec<f32> {
        self.encode_batch(h)
    }

    /// Feature activations for row-major `[n × d_model]` input (`[n × d_sae]`).
    /// Each row's result is identical to encoding it alone.
    pub fn encode_batch(&self, rows: &[f32]) -> Vec<f32> {
        let n = rows.len() / self.d_model();
        let mut pre = self.pre_activations(rows, n);
        pre.iter_mut().for_each(|x| *x = x.max(0.0));
        pre
    }

    /// Reconstruction for one feature vector.
    pub fn decode(&self, f: &[f32]) -> Vec<f32> {
        self.decode_batch(f)
    }

    /// Reconstructions for row-major `[n × d_sae]` features (`[n × d_model]`).
    pub fn decode_batch(&self, feats: &[f32]) -> Vec<f32> {
        let (d, f) = (self.d_model(), self.d_sae());
        let n = feats.len() / f;
        let mut out = vec![0.0; n * d];
        matmul_into(feats, self.w_dec.data(), n, f, d, &mut out);
        for row in out.chunks_exact_mut(d) {
            row.iter_mut().zip(self.b_dec.data()).for_each(|(o, b)| *o += b);
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), SaeError> {
        let named: Vec<(&str, &Tensor)> = TENSOR_NAMES
            .iter()
            .copied()
            .zip([&self.w_enc, &self.b_enc, &self.w_dec, &self.b_dec])
            .collect();
        Ok(write_tensor_file(path, SAE_MAGIC, &named)?)
    }

    pub fn load(path: &Path) -> Result<Self, SaeError> {
        let mut tensors = read_tensor_file(path, SAE_MAGIC)?;
        let mut take = |name: &str| {
            let i = tensors
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| SaeError::MissingTensor(name.to_string()))?;
            Ok::<_, SaeError>(tensors.swap_remove(i).1)
        };
        let (w_enc, b_enc, w_dec, b_dec) = (take("W_enc")?, take("b_enc")?, take("W_dec")?, take("b_dec")?);
        Self::new(w_enc, b_enc, w_dec, b_dec)
    }
}

// ---------------------------------------------------------------------------
// Loss and analytic gradients
// ---------------------------------------------------------------------------

/// Batch-mean loss decomposition.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub loss: f64,
    /// Mean squared reconstruction error per input (summed over dimensions).
    pub mse: f64,
    /// Mean L1 norm of the feature vector.
    pub l1: f64,
    /// Mean number of active features.
    pub l0: f64,
}

/// Gradients of the batch loss, laid out like the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SaeGrads {
    pub w_enc: Vec<f32>,
    pub b_enc: Vec<f32>,
    pub w_dec: Vec<f32>,
    pub b_dec: Vec<f32>,
}

/// Loss and unconstrained gradients for a row-major `[B × d_model]` batch.
///
/// The unit-norm decoder constraint enters at the optimizer step
/// ([`project_decoder_grad`] then renormalization), so these are plain partial
/// derivatives and can be checked against finite differences.
pub fn loss_and_grads(params: &SaeParams, batch: &[f32], lambda: f32) -> Result<(LossParts, SaeGrads), SaeError> {
    let (d, f) = (params.d_model(), params.d_sae());
    if batch.is_empty() || !batch.len().is_multiple_of(d) {
        return Err(SaeError::TooFewRows { needed: 1, found: batch.len() / d });
    }
    let b = batch.len() / d;
    let inv_b = 1.0 / b as f32;

    let pre = params.pre_activations(batch, b);
    let feats: Vec<f32> = pre.iter().map(|x| x.max(0.0)).collect();
    let recon = params.decode_batch(&feats);

    // Loss terms (f64 accumulation, reporting only).
    let mut sq = 0.0f64;
    for (r, h) in recon.iter().zip(batch) {
        sq += ((r - h) as f64).powi(2);
    }
    let l1: f64 = feats.iter().map(|&x| x as f64).sum();
    let active = feats.iter().filter(|&&x| x > 0.0).count();
    let mse = sq / b as f64;
    let l1 = l1 / b as f64;
    let parts = LossParts {
        loss: mse + lambda as f64 * l1,
        mse,
        l1,
        l0: active as f64 / b as f64,
    };

    // dL/dĥ = 2(ĥ − h)/B.
    let g_out: Vec<f32> = recon.iter().zip(batch).map(|(r, h)| 2.0 * (r - h) * inv_b).collect();

    // Decoder: dW_dec = fᵀ·g_out; db_dec (direct) = Σ_b g_out.
    let mut feats_t = vec![0.0; b * f];
    transpose_into(&feats, b, f, &mut feats_t);
    let mut w_dec_grad = vec![0.0; f * d];
    matmul_into(&feats_t, &g_out, f, b, d, &mut w_dec_grad);
    let mut b_dec_grad = vec![0.0f32; d];
    for row in g_out.chunks_exact(d) {
        b_dec_grad.iter_mut().zip(row).for_each(|(a, g)| *a += g);
    }

    // Features: df = g_out·W_decᵀ + λ/B, gated by the ReLU.
    let mut w_dec_t = vec![0.0; d * f];
    transpose_into(params.w_dec.data(), f, d, &mut w_dec_t);
    let mut d_pre = vec![0.0; b * f];
    matmul_into(&g_out, &w_dec_t, b, d, f, &mut d_pre);
    let l1_grad = lambda * inv_b;
    for (g, &p) in d_pre.iter_mut().zip(&pre) {
        *g = if p > 0.0 { *g + l1_grad } else { 0.0 };
    }

    // Encoder: dW_enc = (h − b_dec)ᵀ·d_pre; db_enc = Σ_b d_pre.
    let centered: Vec<f32> = batch
        .chunks_exact(d)
        .flat_map(|r| r.iter().zip(params.b_dec.data()).map(|(x, bd)| x - bd))
        .collect();
    let mut centered_t = vec![0.0; d * b];
    transpose_into(&centered, b, d, &mut centered_t);
    let mut w_enc_grad = vec![0.0; d * f];
    matmul_into(&centered_t, &d_pre, d, b, f, &mut w_enc_grad);
    let mut b_enc_grad = vec![0.0f32; f];
    for row in d_pre.chunks_exact(f) {
        b_enc_grad.iter_mut().zip(row).for_each(|(a, g)| *a += g);
    }

    // b_dec also enters through the centering: −Σ_b d_pre·W_encᵀ.
    let mut w_enc_t = vec![0.0; f * d];
    transpose_into(params.w_enc.data(), d, f, &mut w_enc_t);
    let mut d_centered = vec![0.0; b * d];
    matmul_into(&d_pre, &w_enc_t, b, f, d, &mut d_centered);
    for row in d_centered.chunks_exact(d) {
        b_dec_grad.iter_mut().zip(row).for_each(|(a, g)| *a -= g);
    }

    Ok((
        parts,
        SaeGrads {
            w_enc: w_enc_grad,
            b_enc: b_enc_grad,
            w_dec: w_dec_grad,
            b_dec: b_dec_grad,
        },
    ))
}

/// Remove from each decoder-row gradient its component along that (unit) row.
pub fn project_decoder_grad(w_dec: &[f32], grad: &mut [f32], d_model: usize) {
    for (w, g) in w_dec.chunks_exact(d_model).zip(grad.chunks_exact_mut(d_model)) {
        let along: f32 = w.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
        g.iter_mut().zip(w).for_each(|(gi, wi)| *gi -= along * wi);
    }
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

/// Where an activation dataset came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetProvenance {
    pub seed: u64,
    pub pool_variant: String,
    /// Index `L` of the `resid_pre_L` site (read at the END position).
    pub resid_pre_layer: usize,
    pub n_prompts: usize,
}

/// Residual activations, row-major `[n × d_model]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationDataset {
    pub rows: Tensor,
    pub provenance: DatasetProvenance,
}

impl ActivationDataset {
    pub fn new(rows: Tensor, provenance: DatasetProvenance) -> Result<Self, SaeError> {
        if rows.rank() != 2 {
            return Err(SaeError::Shape {
                name: ACTIVATIONS_TENSOR.into(),
                expected: vec![provenance.n_prompts, 0],
                found: rows.shape().to_vec(),
            });
        }
        if !rows.is_finite() {
            return Err(SaeError::NonFinite(ACTIVATIONS_TENSOR.into()));
        }
        Ok(Self { rows, provenance })
    }

    pub fn len(&self) -> usize {
        self.rows.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn d_model(&self) -> usize {
        self.rows.shape()[1]
    }

    pub fn row(&self, i: usize) -> &[f32] {
        self.rows.row(i)
    }

    /// Per-dimension mean (f64 accumulation).
    pub fn mean(&self) -> Vec<f32> {
        column_mean(self.rows.data(), self.d_model())
    }

    /// Sidecar JSON holding the provenance next to the tensor file.
    pub fn provenance_path(path: &Path) -> PathBuf {
        path.with_extension("json")
    }

    pub fn save(&self, path: &Path) -> Result<(), SaeError> {
        write_tensor_file(path, ACTIVATIONS_MAGIC, &[(ACTIVATIONS_TENSOR, &self.rows)])?;
        let json = serde_json::to_string_pretty(&self.provenance).expect("provenance serializes");
        let side = Self::provenance_path(path);
        std::fs::write(&side, json).map_err(|e| SaeError::Io(format!("{}: {e}", side.display())))
    }

    pub fn load(path: &Path) -> Result<Self, SaeError> {
        let mut tensors = read_tensor_file(path, ACTIVATIONS_MAGIC)?;
        let i = tensors
            .iter()
            .position(|(n, _)| n == ACTIVATIONS_TENSOR)
            .ok_or_else(|| SaeError::MissingTensor(ACTIVATIONS_TENSOR.into()))?;
        let rows = tensors.swap_remove(i).1;
        let side = Self::provenance_path(path);
        let text = std::fs::read_to_string(&side).map_err(|e| SaeError::Io(format!("{}: {e}", side.display())))?;
        let provenance = serde_json::from_str(&text).map_err(|e| SaeError::Io(format!("{}: {e}", side.display())))?;
        Self::new(rows, provenance)
    }
}

fn column_mean(rows: &[f32], d: usize) -> Vec<f32> {
    let n = rows.len() / d;
    let mut acc = vec![0.0f64; d];
    for row in rows.chunks_exact(d) {
        acc.iter_mut().zip(row).for_each(|(a, &x)| *a += x as f64);
    }
    acc.into_iter().map(|a| (a / n as f64) as f32).collect()
}

/// `resid_pre_layer` at each prompt's `end` position, in prompt order.
pub fn collect_end_activations(
    weights: &ModelWeights,
    prompts: &[(&[u32], usize)],
    resid_pre_layer: usize,
) -> Result<Vec<f32>, SaeError> {
    let d = weights.config().d_model;
    let chunks: Vec<Vec<f32>> = prompts
        .par_chunks(COLLECT_CHUNK)
        .map(|chunk| {
            let tokens: Vec<&[u32]> = chunk.iter().map(|p| p.0).collect();
            let resid = weights.resid_pre_batch(&tokens, resid_pre_layer)?;
            Ok(chunk
                .iter()
                .zip(&resid)
                .flat_map(|(&(_, end), r)| r[end * d..(end + 1) * d].to_vec())
                .collect())
        })
        .collect::<Result<_, ModelError>>()?;
    Ok(chunks.concat())
}

// ---------------------------------------------------------------------------
// Metrics
// ---------------------------------------------------------------------------

/// `1 − Σ‖h − ĥ‖² / Σ‖h − h̄‖²` over row-major `[n × d]` matrices, with `h̄`
/// the per-dimension mean of `h`; f64 accumulation.
pub fn fraction_variance_explained(h: &[f32], recon: &[f32], d: usize) -> Result<f64, SaeError> {
    let n = h.len() / d;
    if n < 2 {
        return Err(SaeError::TooFewRows { needed: 2, found: n });
    }
    let mean = column_mean(h, d);
    let (mut resid, mut total) = (0.0f64, 0.0f64);
    for (hr, rr) in h.chunks_exact(d).zip(recon.chunks_exact(d)) {
        for ((&x, &r), &m) in hr.iter().zip(rr).zip(&mean) {
            resid += ((x - r) as f64).powi(2);
            total += ((x - m) as f64).powi(2);
        }
    }
    if total <= 0.0 {
        return Err(SaeError::ZeroVariance);
    }
    Ok(1.0 - resid / total)
}

/// Full-reconstruction variance explained on a dataset.
pub fn variance_explained(params: &SaeParams, dataset: &ActivationDataset) -> Result<f64, SaeError> {
    let recon = params.decode_batch(&params.encode_batch(dataset.rows.data()));
    fraction_variance_explained(dataset.rows.data(), &recon, dataset.d_model())
}

/// Dataset-level sparsity and fidelity of a trained SAE.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SaeMetrics {
    /// Mean number of features with activation > 0 per input.
    pub l0: f64,
    pub variance_explained: f64,
    /// Features that never activate on the dataset.
    pub dead_features: usize,
}

pub fn evaluate(params: &SaeParams, dataset: &ActivationDataset) -> Result<SaeMetrics, SaeError> {
    let feats = params.encode_batch(dataset.rows.data());
    let f = params.d_sae();
    let active = feats.iter().filter(|&&x| x > 0.0).count();
    let mut alive = vec![false; f];
    for row in feats.chunks_exact(f) {
        for (a, &x) in alive.iter_mut().zip(row) {
            *a |= x > 0.0;
        }
    }
    let recon = params.decode_batch(&feats);
    Ok(SaeMetrics {
        l0: active as f64 / dataset.len() as f64,
        variance_explained: fraction_variance_explained(dataset.rows.data(), &recon, dataset.d_model())?,
        dead_features: alive.iter().filter(|a| !**a).count(),
    })
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SaeTrainConfig {
    pub d_sae: usize,
    pub l1_coefficient: f32,
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub adam_eps: f32,
    pub seed: u64,
}

impl Default for SaeTrainConfig {
    fn default() -> Self {
        Self {
            d_sae: 1024,
            l1_coefficient: 0.5,
            steps: 3000,
            batch_size: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
        }
    }
}

impl SaeTrainConfig {
    pub fn validate(&self) -> Result<(), SaeError> {
        let bad = |m: &str| Err(SaeError::InvalidConfig(m.to_string()));
        if self.d_sae == 0 {
            return bad("d_sae must be positive");
        }
        if !(self.l1_coefficient >= 0.0 && self.l1_coefficient.is_finite()) {
            return bad("l1_coefficient must be finite and ≥ 0");
        }
        if self.steps == 0 {
            return bad("steps must be ≥ 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be ≥ 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be finite and > 0");
        }
        if !((0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2)) {
            return bad("betas must lie in [0, 1)");
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return bad("adam_eps must be > 0");
        }
        Ok(())
    }
}

/// One optimizer step's batch statistics (before the update).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: f64,
    pub mse: f64,
    pub l1: f64,
    pub l0: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub steps: Vec<StepLog>,
    pub metrics: SaeMetrics,
}

impl TrainingLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,loss,mse,l1,l0\n");
        for s in &self.steps {
            out.push_str(&format!("{},{:.6},{:.6},{:.6},{:.3}\n", s.step, s.loss, s.mse, s.l1, s.l0));
        }
        out
    }

    /// Trailing moving average of the loss over `window` steps.
    pub fn moving_average(&self, window: usize) -> Vec<f64> {
        let losses: Vec<f64> = self.steps.iter().map(|s| s.loss).collect();
        losses.windows(window.max(1)).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect()
    }
}

/// Adam moment buffers for one parameter tensor.
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
}

impl Moments {
    fn new(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n] }
    }

    fn step(&mut self, param: &mut [f32], grad: &[f32], cfg: &SaeTrainConfig, t: usize) {
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let c1 = (1.0 - (b1 as f64).powi(t as i32)) as f32;
        let c2 = (1.0 - (b2 as f64).powi(t as i32)) as f32;
        for (((p, &g), m), v) in param.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
        }
    }
}

/// Train with the default (silent) progress hook.
pub fn train(dataset: &ActivationDataset, config: &SaeTrainConfig) -> Result<(SaeParams, TrainingLog), SaeError> {
    train_with(dataset, config, |_, _| {})
}

/// Train, calling `on_step` with each step's log and the updated parameters.
///
/// Batches are drawn without replacement from seeded per-epoch permutations
/// of the dataset rows.
pub fn train_with(
    dataset: &ActivationDataset,
    config: &SaeTrainConfig,
    mut on_step: impl FnMut(&StepLog, &SaeParams),
) -> Result<(SaeParams, TrainingLog), SaeError> {
    config.validate()?;
    if dataset.len() < 2 {
        return Err(SaeError::TooFewRows { needed: 2, found: dataset.len() });
    }
    let d = dataset.d_model();
    let mut params = SaeParams::init(d, config.d_sae, &dataset.mean(), config.seed)?;
    let mut rng = SeededRng::named(config.seed, "sae-batches");
    let mut moments = [
        Moments::new(d * config.d_sae),
        Moments::new(config.d_sae),
        Moments::new(config.d_sae * d),
        Moments::new(d),
    ];

    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut batch = Vec::with_capacity(config.batch_size * d);
    let mut steps = Vec::with_capacity(config.steps);
    for step in 1..=config.steps {
        batch.clear();
        for _ in 0..config.batch_size {
            if cursor == order.len() {
                order = (0..dataset.len()).collect();
                rng.shuffle(&mut order);
                cursor = 0;
            }
            batch.extend_from_slice(dataset.row(order[cursor]));
            cursor += 1;
        }
        let (parts, mut grads) = loss_and_grads(&params, &batch, config.l1_coefficient)?;
        if !parts.loss.is_finite() {
            let max_param = [&params.w_enc, &params.b_enc, &params.w_dec, &params.b_dec]
                .iter()
                .flat_map(|t| t.data().iter())
                .fold(0.0f32, |a, &x| a.max(x.abs()));
            return Err(SaeError::Diverged {
                step,
                loss: parts.loss,
                mse: parts.mse,
                l1: parts.l1,
                max_param,
            });
        }
        project_decoder_grad(params.w_dec.data(), &mut grads.w_dec, d);
        let [m_we, m_be, m_wd, m_bd] = &mut moments;
        m_we.step(params.w_enc.data_mut(), &grads.w_enc, config, step);
        m_be.step(params.b_enc.data_mut(), &grads.b_enc, config, step);
        m_wd.step(params.w_dec.data_mut(), &grads.w_dec, config, step);
        m_bd.step(params.b_dec.data_mut(), &grads.b_dec, config, step);
        params.normalize_decoder();

        let log = StepLog {
            step,
            loss: parts.loss,
            mse: parts.mse,
            l1: parts.l1,
            l0: parts.l0,
        };
        on_step(&log, &params);
        steps.push(log);
    }
    for (name, t) in TENSOR_NAMES.iter().zip([&params.w_enc, &params.b_enc, &params.w_dec, &params.b_dec]) {
        if !t.is_finite() {
            return Err(SaeError::NonFinite(format!("trained {name}")));
        }
    }
    let metrics = evaluate(&params, dataset)?;
    Ok((params, TrainingLog { steps, metrics }))
}
