// SPDX-License-Identifier: MIT OR Apache-2.0

//! Forward pass against a float64 run of an independent GPT-2
//! implementation on a small randomized checkpoint, plus patching
//! identities and loader integrity checks.

use std::path::PathBuf;

use circuitbench_core::model::{
    HookSite, ModelConfig, ModelError, ModelWeights, PatchSet, Position, SiteKind,
};
use circuitbench_core::rng::SeededRng;
use circuitbench_core::tensor::Tensor;
use circuitbench_core::tensor_file::{read_tensor_file, write_tensor_file, FormatError, MODEL_MAGIC};
use serde_json::Value;

fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn tiny_config() -> ModelConfig {
    ModelConfig {
        vocab_size: 96,
        n_ctx: 32,
        d_model: 16,
        n_layers: 3,
        n_heads: 4,
        layer_norm_eps: 1e-5,
    }
}

fn tiny() -> ModelWeights {
    ModelWeights::load(&fixtures().join("tiny_gpt2.bin"), &tiny_config()).unwrap()
}

fn reference() -> Value {
    serde_json::from_str(&std::fs::read_to_string(fixtures().join("tiny_gpt2_reference.json")).unwrap()).unwrap()
}

fn matrix(v: &Value) -> Vec<Vec<f64>> {
    v.as_array()
        .unwrap()
        .iter()
        .map(|r| r.as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).collect())
        .collect()
}

fn assert_close(got: &[f32], want: &[f64], tol: f64, what: &str) {
    assert_eq!(got.len(), want.len(), "{what}: length");
    for (i, (&g, &w)) in got.iter().zip(want).enumerate() {
        let err = (g as f64 - w).abs() / w.abs().max(1.0);
        assert!(err < tol, "{what}[{i}]: {g} vs {w}");
    }
}

fn reference_tokens() -> Vec<u32> {
    reference()["tokens"]
        .as_array()
        .unwrap()
        .iter()
        .map(|t| t.as_u64().unwrap() as u32)
        .collect()
}

#[test]
fn logits_and_activations_match_reference() {
    let model = tiny();
    let reference = reference();
    let tokens = reference_tokens();
    let (logits, cache) = model
        .forward(&tokens, &[SiteKind::ResidPre, SiteKind::ResidPost, SiteKind::AttnZ])
        .unwrap();
    let want = matrix(&reference["logits"]);
    assert_eq!(logits.shape(), &[tokens.len(), 96]);
    for (pos, row) in want.iter().enumerate() {
        assert_close(logits.row(pos), row, 1e-4, &format!("logits[{pos}]"));
    }
    for layer in 0..3 {
        let resid = cache.get(&HookSite::resid_pre(layer, Position::All)).unwrap();
        let want: Vec<f64> = matrix(&reference["resid_pre"][layer]).concat();
        assert_close(resid.data(), &want, 1e-4, &format!("resid_pre {layer}"));

        let want_z = matrix(&reference["attn_z"][layer]);
        for head in 0..4 {
            let z = cache.get(&HookSite::attn_z(layer, head, Position::All)).unwrap();
            let want: Vec<f64> = want_z.iter().flat_map(|r| r[head * 4..(head + 1) * 4].to_vec()).collect();
            assert_close(z.data(), &want, 1e-4, &format!("attn_z {layer}/{head}"));
        }
    }
    let post = cache.get(&HookSite::resid_post(2, Position::All)).unwrap();
    let want: Vec<f64> = matrix(&reference["resid_post_last"]).concat();
    assert_close(post.data(), &want, 1e-4, "resid_post");
    // resid_post of an inner layer is the next layer's resid_pre.
    assert_eq!(
        cache.get(&HookSite::resid_post(0, Position::At(3))),
        cache.get(&HookSite::resid_pre(1, Position::At(3)))
    );
}

#[test]
fn cache_shapes_and_determinism() {
    let model = tiny();
    let tokens = reference_tokens();
    let (a, cache) = model.forward(&tokens, &[SiteKind::ResidPre]).unwrap();
    let (b, _) = model.forward(&tokens, &[]).unwrap();
    assert_eq!(a, b);
    assert_eq!(cache.len(), 3);
    for site in cache.sites() {
        assert_eq!(cache.get(&site).unwrap().shape(), &[tokens.len(), 16]);
    }
    let trace = model.trace(&tokens).unwrap();
    let pair = model.logits_for(&trace, 10, &[5, 7]);
    assert_eq!(pair, vec![a.row(10)[5], a.row(10)[7]]);
}

fn random_tokens(rng: &mut SeededRng, len: usize) -> Vec<u32> {
    (0..len).map(|_| rng.below(96) as u32).collect()
}

#[test]
fn self_patch_and_full_state_replacement_are_identities() {
    let model = tiny();
    let mut rng = SeededRng::new(3);
    for _ in 0..20 {
        let len = 2 + rng.below(14);
        let tokens = random_tokens(&mut rng, len);
        let (logits, cache) = model
            .forward(&tokens, &[SiteKind::ResidPre, SiteKind::AttnZ])
            .unwrap();
        let mut patches = PatchSet::new();
        for site in cache.sites() {
            patches.push(site, cache.get(&site).unwrap()).unwrap();
        }
        assert_eq!(model.forward_with_patches(&tokens, &patches).unwrap(), logits);

        let donor_tokens = random_tokens(&mut rng, len);
        let (donor_logits, donor_cache) = model.forward(&donor_tokens, &[SiteKind::ResidPre]).unwrap();
        let site = HookSite::resid_pre(0, Position::All);
        let patches = PatchSet::new().with(site, donor_cache.get(&site).unwrap()).unwrap();
        assert_eq!(model.forward_with_patches(&tokens, &patches).unwrap(), donor_logits);
    }
}

#[test]
fn resumed_runs_are_bit_identical_to_full_patched_runs() {
    let model = tiny();
    let mut rng = SeededRng::new(4);
    for _ in 0..30 {
        let len = 3 + rng.below(12);
        let tokens = random_tokens(&mut rng, len);
        let base = model.trace(&tokens).unwrap();
        let layer = rng.below(3);
        let pos = rng.below(len);
        let mut patches = PatchSet::new();
        let noise = |rng: &mut SeededRng, n| Tensor::vector((0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect());
        match rng.below(3) {
            0 => patches.push(HookSite::resid_pre(layer, Position::At(pos)), noise(&mut rng, 16)),
            1 => patches.push(HookSite::resid_post(layer, Position::At(pos)), noise(&mut rng, 16)),
            _ => patches.push(HookSite::attn_z(layer, rng.below(4), Position::At(pos)), noise(&mut rng, 4)),
        }
        .unwrap();
        let full = model.trace_patched(&tokens, &patches).unwrap();
        let resumed = model.retrace(&base, &patches).unwrap();
        assert_eq!(full, resumed);
        // Layers upstream of the patch are untouched; positions before it too.
        for l in 0..layer {
            assert_eq!(full.layer(l), base.layer(l));
        }
        for l in layer..3 {
            for p in 0..pos {
                assert_eq!(full.resid_pre(l, p), base.resid_pre(l, p));
            }
        }
    }
}

#[test]
fn patch_validation_errors() {
    let model = tiny();
    let tokens = reference_tokens();
    let wrong = PatchSet::new()
        .with(HookSite::resid_pre(1, Position::At(2)), Tensor::vector(vec![0.0; 15]))
        .unwrap();
    assert!(matches!(
        model.forward_with_patches(&tokens, &wrong),
        Err(ModelError::PatchShape { .. })
    ));
    let out_of_range = PatchSet::new()
        .with(HookSite::resid_pre(1, Position::At(40)), Tensor::vector(vec![0.0; 16]))
        .unwrap();
    assert!(matches!(
        model.forward_with_patches(&tokens, &out_of_range),
        Err(ModelError::InvalidSite(_))
    ));
    assert!(matches!(model.trace(&[96]), Err(ModelError::TokenOutOfRange { id: 96, .. })));
    assert!(matches!(model.trace(&[]), Err(ModelError::SequenceLength { .. })));
    assert!(matches!(model.trace(&[0; 33]), Err(ModelError::SequenceLength { .. })));
}

#[test]
fn loader_integrity_errors() {
    let dir = tempfile::tempdir().unwrap();
    let source = fixtures().join("tiny_gpt2.bin");
    let bytes = std::fs::read(&source).unwrap();

    // Truncated mid-tensor: the error names the tensor being read.
    let cut = dir.path().join("cut.bin");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    match ModelWeights::load(&cut, &tiny_config()) {
        Err(ModelError::Format(FormatError::Truncated { context })) => assert!(context.starts_with("tensor "), "{context}"),
        other => panic!("{other:?}"),
    }

    // A tensor with the wrong declared shape.
    let mut tensors = read_tensor_file(&source, MODEL_MAGIC).unwrap();
    let idx = tensors.iter().position(|(n, _)| n == "h.1.mlp.c_fc.w").unwrap();
    tensors[idx].1 = Tensor::zeros(vec![16, 16]);
    let bad = dir.path().join("shape.bin");
    let refs: Vec<(&str, &Tensor)> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
    write_tensor_file(&bad, MODEL_MAGIC, &refs).unwrap();
    match ModelWeights::load(&bad, &tiny_config()) {
        Err(ModelError::Shape { name, expected, found }) => {
            assert_eq!(name, "h.1.mlp.c_fc.w");
            assert_eq!(expected, vec![16, 64]);
            assert_eq!(found, vec![16, 16]);
        }
        other => panic!("{other:?}"),
    }

    // Missing tensor.
    let intact = read_tensor_file(&source, MODEL_MAGIC).unwrap();
    let refs: Vec<(&str, &Tensor)> = intact.iter().map(|(n, t)| (n.as_str(), t)).collect();
    let missing = dir.path().join("missing.bin");
    write_tensor_file(&missing, MODEL_MAGIC, &refs[..refs.len() - 1]).unwrap();
    match ModelWeights::load(&missing, &tiny_config()) {
        Err(ModelError::MissingTensor(name)) => assert_eq!(name, "ln_f.b"),
        other => panic!("{other:?}"),
    }

    // Bad magic and version.
    let mut b = bytes.clone();
    b[0] = b'X';
    let p = dir.path().join("magic.bin");
    std::fs::write(&p, &b).unwrap();
    assert!(matches!(
        ModelWeights::load(&p, &tiny_config()),
        Err(ModelError::Format(FormatError::BadMagic { .. }))
    ));
    let mut b = bytes.clone();
    b[8] = 9;
    std::fs::write(&p, &b).unwrap();
    assert!(matches!(
        ModelWeights::load(&p, &tiny_config()),
        Err(ModelError::Format(FormatError::Version { found: 9 }))
    ));
}

#[test]
fn save_load_round_trip_and_synthetic_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let model = tiny();
    let path = dir.path().join("copy.bin");
    model.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(fixtures().join("tiny_gpt2.bin")).unwrap());

    let synthetic = ModelWeights::random(&tiny_config(), 5).unwrap();
    assert_eq!(synthetic, ModelWeights::random(&tiny_config(), 5).unwrap());
    assert_ne!(synthetic, ModelWeights::random(&tiny_config(), 6).unwrap());
    let trace = synthetic.trace(&[1, 2, 3]).unwrap();
    assert!(synthetic.logits_row(&trace, 2).iter().all(|v| v.is_finite()));
}

#[test]
fn batched_runs_match_individual_runs_bit_exactly() {
    let model = tiny();
    let mut rng = SeededRng::new(5);
    let prompts: Vec<Vec<u32>> = (0..7).map(|i| random_tokens(&mut rng, 3 + (i * 5) % 13)).collect();
    let batched = model.trace_batch(&prompts).unwrap();
    for (p, t) in prompts.iter().zip(&batched) {
        assert_eq!(&model.trace(p).unwrap(), t);
    }
    let patch_sets: Vec<PatchSet> = batched
        .iter()
        .enumerate()
        .map(|(i, t)| {
            if i == 3 {
                return PatchSet::new();
            }
            let layer = i % 3;
            let pos = (i * 7) % t.seq_len();
            let value = Tensor::vector((0..4).map(|_| rng.uniform_range(-2.0, 2.0)).collect());
            PatchSet::new()
                .with(HookSite::attn_z(layer, i % 4, Position::At(pos)), value)
                .unwrap()
        })
        .collect();
    let jobs: Vec<_> = batched.iter().zip(&patch_sets).collect();
    let resumed = model.retrace_batch(&jobs).unwrap();
    for ((base, patches), got) in jobs.iter().zip(&resumed) {
        assert_eq!(&model.retrace(base, patches).unwrap(), got);
        assert_eq!(&model.trace_patched(base.tokens(), patches).unwrap(), got);
    }
}

#[test]
fn prefix_runs_match_full_trace_rows() {
    let model = tiny();
    let prompts = vec![reference_tokens(), vec![1, 2, 3]];
    let traces = model.trace_batch(&prompts).unwrap();
    for layer in 0..=3 {
        let got = model.resid_pre_batch(&prompts, layer).unwrap();
        for (t, g) in traces.iter().zip(&got) {
            let want: Vec<f32> = (0..t.seq_len())
                .flat_map(|p| if layer < 3 { t.resid_pre(layer, p) } else { t.resid_post(2, p) }.to_vec())
                .collect();
            assert_eq!(&want, g);
        }
    }
    assert!(model.resid_pre_batch(&prompts, 4).is_err());
}
