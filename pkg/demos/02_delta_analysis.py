"""
Where do per-language fine-tuning updates agree?
================================================

Six synthetic "specialists" are derived from one base. In the middle of the
stack every specialist moves along a shared direction; at the edges each moves
in its own direction. The per-layer mean pairwise cosine and top-1 variance
share pick out the shared band.
"""

import tempfile
from pathlib import Path

import numpy as np

from layerswap.deltas import analyze_stack
from layerswap.tensorstore import group_layers, open_checkpoint, write_checkpoint

NUM_LAYERS = 12
SHARED = range(4, 8)
tmp = Path(tempfile.mkdtemp())
rng = np.random.default_rng(1)


def save(path, arrays):
    write_checkpoint([(k, "BF16", list(v.shape), _bf16(v)) for k, v in arrays.items()], None, path)


def _bf16(x):
    return (np.asarray(x, dtype="<f4").view("<u4") >> 16).astype("<u2").tobytes()


base = {"model.embed_tokens.weight": rng.standard_normal((50, 16))}
for i in range(NUM_LAYERS):
    base[f"model.layers.{i}.mlp.down_proj.weight"] = rng.standard_normal((16, 32))
    base[f"model.layers.{i}.input_layernorm.weight"] = np.ones(16)
base["lm_head.weight"] = rng.standard_normal((50, 16))
save(tmp / "base.safetensors", base)

shared = {k: rng.standard_normal(v.shape) for k, v in base.items()}
labels = ["en", "fr", "de", "es", "zh", "sw"]
for lang in labels:
    spec = {}
    for name, value in base.items():
        in_band = any(name.startswith(f"model.layers.{i}.") for i in SHARED)
        direction = shared[name] + 0.3 * rng.standard_normal(value.shape) if in_band else rng.standard_normal(value.shape)
        spec[name] = value + 0.05 * direction
    save(tmp / f"{lang}.safetensors", spec)

base_h = open_checkpoint(tmp / "base.safetensors")
specs = [open_checkpoint(tmp / f"{lang}.safetensors") for lang in labels]
stats = analyze_stack(specs, base_h, group_layers(base_h), labels, threads=4)

print(f"{'group':>6} {'c_bar':>7} {'s':>6} {'|d| mean':>9} {'std':>7}")
for st in stats:
    bar = "#" * int(round(st.top1_share * 30))
    print(f"{st.layer!s:>6} {st.mean_pairwise_cosine:7.3f} {st.top1_share:6.3f} {st.norm_mean:9.4f} {st.norm_std:7.4f}  {bar}")
