#!/usr/bin/env python3
# SPDX-License-Identifier: MIT OR Apache-2.0
"""Convert the public GPT-2 small checkpoint into the files circuitbench reads.

Subcommands:

  weights  fetch GPT-2 small (Hugging Face `transformers`) and write
           model.bin, vocab.json, merges.txt and manifest.json into --out.
  fixture  re-tokenize every pool word and the template prompts with the
           reference tokenizer (`tokenizers`) and write tokenizer_fixture.json;
           with --weights, also record the reference next-token argmax for
           five prompts so the Rust forward pass can be spot-checked.

model.bin layout (little endian): magic b"GPT2TNSR", u32 version = 1,
u32 tensor count, then per tensor: u16 name length, UTF-8 name, u8 rank,
rank x u64 dims, f32 row-major payload; finally a 32-byte SHA-256 of all
tensor records. Conv1D weights are stored [in, out] exactly as GPT-2 keeps
them, so no transposition is needed.

Requires network access and torch/transformers/tokenizers; the Rust
workspace never needs this script at test time.
"""

import argparse
import hashlib
import json
import struct
from pathlib import Path

MAGIC = b"GPT2TNSR"
VERSION = 1
POOL_KEYS = ["names", "places", "objects", "ood_places", "ood_objects", "heldout_names", "multi_token_probe_names"]
MISC_STRINGS = [
    "", "Hello world", "It's what they'll do, isn't it?", "Hello  world\n\n  x", "   leading spaces", "trailing   ",
    "numbers 12345 and 3.14159", "café naïve résumé", "日本語のテキスト", "emoji \U0001F600 mix",
    "tabs\tand\r\nnewlines", "<|endoftext|>",
]
ARGMAX_PROMPTS = [
    "When Mary and John went to the store, John gave a drink to",
    "When Tom and James went to the park, James gave a ball to",
    "After Carol and Eve arrived at the office, it was Eve who handed a book to",
    "The capital of France is",
    "Hello, my name is",
]


def tensor_table(sd, n_layer):
    """(name, tensor) pairs in the order the Rust loader's table lists them."""
    out = [("wte", sd["wte.weight"]), ("wpe", sd["wpe.weight"])]
    for i in range(n_layer):
        p = f"h.{i}."
        for ours, theirs in [
            ("ln_1.g", "ln_1.weight"), ("ln_1.b", "ln_1.bias"),
            ("attn.c_attn.w", "attn.c_attn.weight"), ("attn.c_attn.b", "attn.c_attn.bias"),
            ("attn.c_proj.w", "attn.c_proj.weight"), ("attn.c_proj.b", "attn.c_proj.bias"),
            ("ln_2.g", "ln_2.weight"), ("ln_2.b", "ln_2.bias"),
            ("mlp.c_fc.w", "mlp.c_fc.weight"), ("mlp.c_fc.b", "mlp.c_fc.bias"),
            ("mlp.c_proj.w", "mlp.c_proj.weight"), ("mlp.c_proj.b", "mlp.c_proj.bias"),
        ]:
            out.append((p + ours, sd[p + theirs]))
    out += [("ln_f.g", sd["ln_f.weight"]), ("ln_f.b", sd["ln_f.bias"])]
    return out


def write_tensor_file(path, tensors):
    body = bytearray()
    for name, t in tensors:
        t = t.detach().to("cpu").float().contiguous()
        nb = name.encode()
        body += struct.pack("<H", len(nb)) + nb + struct.pack("<B", t.dim())
        for d in t.shape:
            body += struct.pack("<Q", d)
        body += t.numpy().astype("<f4").tobytes()
    tmp = path.with_suffix(".tmp")
    tmp.write_bytes(MAGIC + struct.pack("<II", VERSION, len(tensors)) + bytes(body) + hashlib.sha256(body).digest())
    tmp.replace(path)


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def cmd_weights(args):
    from transformers import GPT2LMHeadModel, GPT2TokenizerFast

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model = GPT2LMHeadModel.from_pretrained(args.model).eval()
    write_tensor_file(out / "model.bin", tensor_table(model.transformer.state_dict(), model.config.n_layer))
    tok = GPT2TokenizerFast.from_pretrained(args.model)
    saved = tok.save_vocabulary(str(out))
    for src, dst in zip(saved, ["vocab.json", "merges.txt"]):
        if Path(src) != out / dst:
            Path(src).replace(out / dst)
    manifest = {
        "source": args.model,
        "files": [{"path": n, "sha256": sha256(out / n), "bytes": (out / n).stat().st_size}
                  for n in ["model.bin", "vocab.json", "merges.txt"]],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def cmd_fixture(args):
    from tokenizers import Tokenizer, models, pre_tokenizers

    assets = Path(args.assets)
    bpe = models.BPE.from_file(str(assets / "gpt2/vocab.json"), str(assets / "gpt2/merges.txt"))
    tok = Tokenizer(bpe)
    tok.pre_tokenizer = pre_tokenizers.ByteLevel(add_prefix_space=False)
    pools = json.loads((assets / "pools.json").read_text())
    entries = []

    def add(kind, text, **extra):
        entries.append({"kind": kind, "text": text, "ids": tok.encode(text).ids, **extra})

    for key in POOL_KEYS:
        for w in pools[key]:
            add("pool_word", " " + w)
    names, places, objects = pools["names"], pools["places"], pools["objects"]
    for i in range(30):
        a, b = names[i % len(names)], names[(i * 7 + 3) % len(names)]
        if a == b:
            b = names[(i + 1) % len(names)]
        s = b if i % 2 == 0 else a
        add("canonical", f"When {a} and {b} went to the {places[i % len(places)]}, {s} gave a {objects[(i * 3) % len(objects)]} to")
    held, ood_p, ood_o = pools["heldout_names"], pools["ood_places"], pools["ood_objects"]
    for i in range(10):
        a, b = held[i % len(held)], held[(i + 3) % len(held)]
        s = b if i % 2 == 0 else a
        add("cleft", f"After {a} and {b} arrived at the {ood_p[i % len(ood_p)]}, it was {s} who handed a {ood_o[i % len(ood_o)]} to")
    for text in MISC_STRINGS:
        add("misc", text)
    if args.weights:
        import torch
        from transformers import GPT2LMHeadModel

        model = GPT2LMHeadModel.from_pretrained(args.weights).eval()
        for text in ARGMAX_PROMPTS:
            ids = tok.encode(text).ids
            with torch.no_grad():
                logits = model(torch.tensor([ids])).logits[0, -1]
            add("argmax", text, next_token_argmax=int(logits.argmax()))
    doc = {"source": "reference GPT-2 byte-level BPE (vocab.json + merges.txt)", "entries": entries}
    (assets / "gpt2/tokenizer_fixture.json").write_text(json.dumps(doc, indent=1, ensure_ascii=False) + "\n")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="cmd", required=True)
    w = sub.add_parser("weights", help="write model.bin, vocab.json, merges.txt, manifest.json")
    w.add_argument("--model", default="gpt2")
    w.add_argument("--out", default="assets/gpt2")
    f = sub.add_parser("fixture", help="write tokenizer_fixture.json")
    f.add_argument("--assets", default="assets")
    f.add_argument("--weights", help="model id for the argmax spot-check entries")
    args = ap.parse_args()
    {"weights": cmd_weights, "fixture": cmd_fixture}[args.cmd](args)


if __name__ == "__main__":
    main()
