// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forward pass with activation capture and patching.
//!
//! Every kernel used here computes each output row independently of the
//! other rows in its batch, with a fixed reduction order. Consequently a
//! run resumed from a stored [`RunTrace`] — recomputing only the positions
//! and layers downstream of a patch — is bit-identical to a full patched
//! run. The patching sweeps rely on this to avoid redundant work.

use super::hooks::{ActivationCache, PatchSet, SiteKind};
use super::{ModelError, ModelWeights};
use crate::tensor::{dot, gelu_scalar, layer_norm_row, linear_into, softmax_in_place, Tensor};

/// Per-layer activations of one run, each `[seq × d_model]` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    pub resid_pre: Vec<f32>,
    pub k: Vec<f32>,
    pub v: Vec<f32>,
    /// Per-head attention outputs before the output projection, heads
    /// concatenated along the row.
    pub z: Vec<f32>,
}

/// Everything needed to resume a run from any (layer, position) frontier.
#[derive(Clone, Debug, PartialEq)]
pub struct RunTrace {
    tokens: Vec<u32>,
    d_model: usize,
    layers: Vec<LayerTrace>,
    final_resid: Vec<f32>,
}

impl RunTrace {
    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }

    pub fn layer(&self, layer: usize) -> &LayerTrace {
        &self.layers[layer]
    }

    /// Residual stream entering `layer`, row `pos`.
    pub fn resid_pre(&self, layer: usize, pos: usize) -> &[f32] {
        let d = self.d_model;
        &self.layers[layer].resid_pre[pos * d..(pos + 1) * d]
    }

    /// Residual stream leaving `layer`, row `pos`.
    pub fn resid_post(&self, layer: usize, pos: usize) -> &[f32] {
        let d = self.d_model;
        if layer + 1 < self.layers.len() {
            self.resid_pre(layer + 1, pos)
        } else {
            &self.final_resid[pos * d..(pos + 1) * d]
        }
    }

    /// Attention output of one head at one position, before projection.
    pub fn z_head(&self, layer: usize, head: usize, pos: usize, d_head: usize) -> &[f32] {
        let start = pos * self.d_model + head * d_head;
        &self.layers[layer].z[start..start + d_head]
    }

    /// Residual stream after the last block (input to the final layer norm).
    pub fn final_resid(&self) -> &[f32] {
        &self.final_resid
    }

    /// Collect the requested site kinds into a cache.
    pub fn to_cache(&self, capture: &[SiteKind], d_head: usize) -> ActivationCache {
        let (seq, d) = (self.seq_len(), self.d_model);
        let n_layers = self.layers.len();
        let mut cache = ActivationCache::new(n_layers);
        let full = |data: &[f32]| Tensor::new(vec![seq, d], data.to_vec()).expect("trace rows");
        if capture.contains(&SiteKind::ResidPre) {
            for (l, layer) in self.layers.iter().enumerate() {
                cache.insert(SiteKind::ResidPre, l, None, full(&layer.resid_pre));
            }
        }
        if capture.contains(&SiteKind::ResidPost) {
            cache.insert(SiteKind::ResidPost, n_layers - 1, None, full(&self.final_resid));
            if !capture.contains(&SiteKind::ResidPre) {
                for l in 1..n_layers {
                    cache.insert(SiteKind::ResidPre, l, None, full(&self.layers[l].resid_pre));
                }
            }
        }
        if capture.contains(&SiteKind::AttnZ) {
            let n_heads = d / d_head;
            for (l, layer) in self.layers.iter().enumerate() {
                for h in 0..n_heads {
                    let mut data = Vec::with_capacity(seq * d_head);
                    for row in layer.z.chunks_exact(d) {
                        data.extend_from_slice(&row[h * d_head..(h + 1) * d_head]);
                    }
                    let t = Tensor::new(vec![seq, d_head], data).expect("head rows");
                    cache.insert(SiteKind::AttnZ, l, Some(h), t);
                }
            }
        }
        cache
    }
}

impl ModelWeights {
    fn check_tokens(&self, tokens: &[u32]) -> Result<(), ModelError> {
        let c = self.config();
        if tokens.is_empty() || tokens.len() > c.n_ctx {
            return Err(ModelError::SequenceLength {
                len: tokens.len(),
                max: c.n_ctx,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= c.vocab_size) {
            return Err(ModelError::TokenOutOfRange {
                id,
                vocab: c.vocab_size,
            });
        }
        Ok(())
    }

    /// Full unpatched run, recording every activation.
    pub fn trace(&self, tokens: &[u32]) -> Result<RunTrace, ModelError> {
        let empty = PatchSet::new();
        Ok(self.run_batch(&[Job::fresh(tokens, &empty)], self.config().n_layers, true)?.remove(0))
    }

    /// Unpatched runs of several prompts, batched through shared matmuls.
    /// Each result is bit-identical to [`ModelWeights::trace`] on its prompt.
    pub fn trace_batch<T: AsRef<[u32]>>(&self, prompts: &[T]) -> Result<Vec<RunTrace>, ModelError> {
        let empty = PatchSet::new();
        let jobs: Vec<Job> = prompts.iter().map(|p| Job::fresh(p.as_ref(), &empty)).collect();
        self.run_batch(&jobs, self.config().n_layers, true)
    }

    /// Full run with patches applied.
    pub fn trace_patched(&self, tokens: &[u32], patches: &PatchSet) -> Result<RunTrace, ModelError> {
        Ok(self.run_batch(&[Job::fresh(tokens, patches)], self.config().n_layers, true)?.remove(0))
    }

    /// Resume `base` with `patches`, recomputing only the rows and layers
    /// at or after the earliest patched (layer, position). Bit-identical to
    /// [`ModelWeights::trace_patched`] on the same tokens.
    pub fn retrace(&self, base: &RunTrace, patches: &PatchSet) -> Result<RunTrace, ModelError> {
        Ok(self.run_batch(&[Job::resume(base, patches)], self.config().n_layers, true)?.remove(0))
    }

    /// Batched [`ModelWeights::retrace`].
    pub fn retrace_batch(&self, jobs: &[(&RunTrace, &PatchSet)]) -> Result<Vec<RunTrace>, ModelError> {
        let jobs: Vec<Job> = jobs.iter().map(|(b, p)| Job::resume(b, p)).collect();
        self.run_batch(&jobs, self.config().n_layers, true)
    }

    /// Batched resume returning only the final residual stream
    /// (`[seq × d_model]` per job); skips recording per-layer activations.
    pub fn retrace_final_batch(&self, jobs: &[(&RunTrace, &PatchSet)]) -> Result<Vec<Vec<f32>>, ModelError> {
        let jobs: Vec<Job> = jobs.iter().map(|(b, p)| Job::resume(b, p)).collect();
        Ok(self
            .run_batch(&jobs, self.config().n_layers, false)?
            .into_iter()
            .map(|t| t.final_resid)
            .collect())
    }

    /// Residual stream entering `layer` (`[seq × d_model]` per prompt),
    /// computing only the blocks before it. Equal to the corresponding rows
    /// of a full trace; `layer == n_layers` gives the final residual.
    pub fn resid_pre_batch<T: AsRef<[u32]>>(&self, prompts: &[T], layer: usize) -> Result<Vec<Vec<f32>>, ModelError> {
        if layer > self.config().n_layers {
            return Err(ModelError::InvalidSite(format!("resid_pre.L{layer}")));
        }
        let empty = PatchSet::new();
        let jobs: Vec<Job> = prompts.iter().map(|p| Job::fresh(p.as_ref(), &empty)).collect();
        Ok(self
            .run_batch(&jobs, layer, false)?
            .into_iter()
            .map(|t| t.final_resid)
            .collect())
    }

    /// Logits at every position plus the requested activations.
    pub fn forward(&self, tokens: &[u32], capture: &[SiteKind]) -> Result<(Tensor, ActivationCache), ModelError> {
        let trace = self.trace(tokens)?;
        let logits = self.all_logits(&trace);
        Ok((logits, trace.to_cache(capture, self.config().d_head())))
    }

    /// Logits at every position of a patched run.
    pub fn forward_with_patches(&self, tokens: &[u32], patches: &PatchSet) -> Result<Tensor, ModelError> {
        let trace = self.trace_patched(tokens, patches)?;
        Ok(self.all_logits(&trace))
    }

    /// Final-norm output at one position.
    pub fn final_norm(&self, trace: &RunTrace, pos: usize) -> Vec<f32> {
        let d = self.config().d_model;
        self.final_norm_row(&trace.final_resid[pos * d..(pos + 1) * d])
    }

    /// Final layer norm of one residual row.
    pub fn final_norm_row(&self, resid: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0; self.config().d_model];
        layer_norm_row(
            resid,
            self.lnf_g.data(),
            self.lnf_b.data(),
            self.config().layer_norm_eps,
            &mut out,
        );
        out
    }

    /// Logits at `pos` for selected token ids only (tied unembedding).
    pub fn logits_for(&self, trace: &RunTrace, pos: usize, ids: &[u32]) -> Vec<f32> {
        let d = self.config().d_model;
        self.logits_for_resid(&trace.final_resid[pos * d..(pos + 1) * d], ids)
    }

    /// Logits for selected ids from one final residual row.
    pub fn logits_for_resid(&self, resid: &[f32], ids: &[u32]) -> Vec<f32> {
        let x = self.final_norm_row(resid);
        ids.iter().map(|&id| dot(&x, self.wte.row(id as usize))).collect()
    }

    /// Full-vocabulary logits at one position.
    pub fn logits_row(&self, trace: &RunTrace, pos: usize) -> Vec<f32> {
        let x = self.final_norm(trace, pos);
        (0..self.config().vocab_size).map(|v| dot(&x, self.wte.row(v))).collect()
    }

    fn all_logits(&self, trace: &RunTrace) -> Tensor {
        let (seq, vocab) = (trace.seq_len(), self.config().vocab_size);
        let mut data = Vec::with_capacity(seq * vocab);
        for pos in 0..seq {
            data.extend(self.logits_row(trace, pos));
        }
        Tensor::new(vec![seq, vocab], data).expect("seq × vocab")
    }

    fn run_batch(&self, jobs: &[Job<'_>], stop: usize, record: bool) -> Result<Vec<RunTrace>, ModelError> {
        let c = self.config();
        let (d, dh, n_heads, n_layers, d_mlp) = (c.d_model, c.d_head(), c.n_heads, c.n_layers, c.d_mlp());
        let eps = c.layer_norm_eps;
        let scale = (dh as f32).sqrt();

        let mut states = Vec::with_capacity(jobs.len());
        for job in jobs {
            self.check_tokens(job.tokens)?;
            job.patches.validate(c, job.tokens.len())?;
            states.push(JobState::start(self, job, record));
        }
        let first_layer = states.iter().map(|s| s.l0).min().unwrap_or(n_layers);

        let mut scores = vec![0.0f32; c.n_ctx];
        for (l, w) in self.layers.iter().enumerate().take(stop).skip(first_layer) {
            let active: Vec<usize> = (0..states.len()).filter(|&i| states[i].l0 <= l).collect();
            let total: usize = active.iter().map(|&i| states[i].rows()).sum();

            // Residual patches, layer norm, fused q/k/v projection.
            let mut normed = Vec::with_capacity(total * d);
            for &i in &active {
                let (job, st) = (&jobs[i], &mut states[i]);
                job.patches.apply(SiteKind::ResidPre, l, &mut st.x, st.p0, d, dh);
                let mut resid_pre = st.prefix(job, l, |t| &t.resid_pre);
                resid_pre.extend_from_slice(&st.x);
                st.pending_resid = resid_pre;
                for src in st.x.chunks_exact(d) {
                    let start = normed.len();
                    normed.resize(start + d, 0.0);
                    layer_norm_row(src, w.ln1_g.data(), w.ln1_b.data(), eps, &mut normed[start..]);
                }
            }
            let mut qkv = vec![0.0f32; total * 3 * d];
            linear_into(&normed, w.qkv_w.data(), w.qkv_b.data(), total, d, 3 * d, &mut qkv);

            // Causal attention per job and row.
            let mut z_rows = Vec::with_capacity(total * d);
            let mut offset = 0;
            let mut traces = Vec::with_capacity(active.len());
            for &i in &active {
                let (job, st) = (&jobs[i], &states[i]);
                let (seq, p0, rows) = (job.tokens.len(), st.p0, st.rows());
                let qkv_job = &qkv[offset * 3 * d..(offset + rows) * 3 * d];
                offset += rows;
                let mut k = st.prefix(job, l, |t| &t.k);
                let mut v = st.prefix(job, l, |t| &t.v);
                for row in qkv_job.chunks_exact(3 * d) {
                    k.extend_from_slice(&row[d..2 * d]);
                    v.extend_from_slice(&row[2 * d..]);
                }
                let mut z = st.prefix(job, l, |t| &t.z);
                z.resize(seq * d, 0.0);
                for r in 0..rows {
                    let t = p0 + r;
                    let q_row = &qkv_job[r * 3 * d..r * 3 * d + d];
                    for h in 0..n_heads {
                        let q = &q_row[h * dh..(h + 1) * dh];
                        for (j, s) in scores[..=t].iter_mut().enumerate() {
                            *s = dot(q, &k[j * d + h * dh..j * d + (h + 1) * dh]) / scale;
                        }
                        softmax_in_place(&mut scores[..=t]);
                        let out = &mut z[t * d + h * dh..t * d + (h + 1) * dh];
                        for (j, &a) in scores[..=t].iter().enumerate() {
                            let vj = &v[j * d + h * dh..j * d + (h + 1) * dh];
                            for (o, &val) in out.iter_mut().zip(vj) {
                                *o += a * val;
                            }
                        }
                    }
                }
                job.patches.apply(SiteKind::AttnZ, l, &mut z[p0 * d..], p0, d, dh);
                z_rows.extend_from_slice(&z[p0 * d..]);
                traces.push((k, v, z));
            }
            let mut proj = vec![0.0f32; total * d];
            linear_into(&z_rows, w.attn_out_w.data(), w.attn_out_b.data(), total, d, d, &mut proj);

            // MLP.
            let mut offset = 0;
            for &i in &active {
                let st = &mut states[i];
                let rows = st.rows();
                for (xi, &pi) in st.x.iter_mut().zip(&proj[offset * d..(offset + rows) * d]) {
                    *xi += pi;
                }
                for (r, src) in st.x.chunks_exact(d).enumerate() {
                    let dst = &mut normed[(offset + r) * d..(offset + r + 1) * d];
                    layer_norm_row(src, w.ln2_g.data(), w.ln2_b.data(), eps, dst);
                }
                offset += rows;
            }
            let mut hidden = vec![0.0f32; total * d_mlp];
            linear_into(&normed, w.fc_w.data(), w.fc_b.data(), total, d, d_mlp, &mut hidden);
            hidden.iter_mut().for_each(|h| *h = gelu_scalar(*h));
            linear_into(&hidden, w.proj_w.data(), w.proj_b.data(), total, d_mlp, d, &mut proj);

            let mut offset = 0;
            for (&i, (k, v, z)) in active.iter().zip(traces) {
                let (job, st) = (&jobs[i], &mut states[i]);
                let rows = st.rows();
                for (xi, &pi) in st.x.iter_mut().zip(&proj[offset * d..(offset + rows) * d]) {
                    *xi += pi;
                }
                offset += rows;
                job.patches.apply(SiteKind::ResidPost, l, &mut st.x, st.p0, d, dh);
                let resid_pre = std::mem::take(&mut st.pending_resid);
                if st.record {
                    st.layers.push(LayerTrace { resid_pre, k, v, z });
                }
            }
        }

        jobs.iter()
            .zip(states)
            .map(|(job, st)| st.finish(job, d))
            .collect()
    }
}

/// One run in a batch: fresh from embeddings, or resumed from a base trace.
struct Job<'a> {
    tokens: &'a [u32],
    base: Option<&'a RunTrace>,
    patches: &'a PatchSet,
}

impl<'a> Job<'a> {
    fn fresh(tokens: &'a [u32], patches: &'a PatchSet) -> Self {
        Self {
            tokens,
            base: None,
            patches,
        }
    }

    fn resume(base: &'a RunTrace, patches: &'a PatchSet) -> Self {
        Self {
            tokens: &base.tokens,
            base: Some(base),
            patches,
        }
    }
}

/// Mutable progress of one job: residual rows `p0..` entering the next
/// layer, and the layers finished so far.
struct JobState {
    d: usize,
    l0: usize,
    p0: usize,
    seq: usize,
    x: Vec<f32>,
    layers: Vec<LayerTrace>,
    pending_resid: Vec<f32>,
    /// Keep per-layer activations; off when only the final residual is needed.
    record: bool,
}

impl JobState {
    fn start(model: &ModelWeights, job: &Job<'_>, record: bool) -> Self {
        let c = model.config();
        let (d, seq) = (c.d_model, job.tokens.len());
        match job.base {
            Some(base) => {
                // No patches: nothing to recompute.
                let (l0, p0) = job.patches.frontier().unwrap_or((c.n_layers, seq));
                let x = if l0 < c.n_layers {
                    base.layers[l0].resid_pre[p0 * d..].to_vec()
                } else {
                    Vec::new()
                };
                Self {
                    d,
                    l0,
                    p0,
                    seq,
                    x,
                    layers: if record { base.layers[..l0].to_vec() } else { Vec::new() },
                    pending_resid: Vec::new(),
                    record,
                }
            }
            None => {
                let mut x = vec![0.0f32; seq * d];
                for (i, &tok) in job.tokens.iter().enumerate() {
                    let row = &mut x[i * d..(i + 1) * d];
                    for ((dst, &te), &pe) in row.iter_mut().zip(model.wte.row(tok as usize)).zip(model.wpe.row(i)) {
                        *dst = te + pe;
                    }
                }
                Self {
                    d,
                    l0: 0,
                    p0: 0,
                    seq,
                    x,
                    layers: Vec::with_capacity(c.n_layers),
                    pending_resid: Vec::new(),
                    record,
                }
            }
        }
    }

    fn rows(&self) -> usize {
        self.seq - self.p0
    }

    /// Rows `..p0` of a per-layer buffer, taken from the base trace.
    fn prefix(&self, job: &Job<'_>, layer: usize, field: impl Fn(&LayerTrace) -> &Vec<f32>) -> Vec<f32> {
        let d = self.d;
        let mut v = Vec::with_capacity(self.seq * d);
        if let Some(base) = job.base {
            v.extend_from_slice(&field(&base.layers[layer])[..self.p0 * d]);
        }
        v
    }

    fn finish(self, job: &Job<'_>, d: usize) -> Result<RunTrace, ModelError> {
        if let Some(base) = job.base {
            if self.l0 >= base.layers.len() {
                return Ok(if self.record {
                    base.clone()
                } else {
                    RunTrace {
                        tokens: Vec::new(),
                        d_model: d,
                        layers: Vec::new(),
                        final_resid: base.final_resid.clone(),
                    }
                });
            }
        }
        if self.x.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::NonFinite("residual stream".into()));
        }
        let mut final_resid = Vec::with_capacity(self.seq * d);
        if let Some(base) = job.base {
            final_resid.extend_from_slice(&base.final_resid[..self.p0 * d]);
        }
        final_resid.extend_from_slice(&self.x);
        Ok(RunTrace {
            tokens: job.tokens.to_vec(),
            d_model: d,
            layers: self.layers,
            final_resid,
        })
    }
}
