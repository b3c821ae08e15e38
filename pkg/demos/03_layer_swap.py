"""
Layer Swap: transplanting a window of layers
============================================

Build a target and a source checkpoint, swap layers 3-6 from source into the
target, and verify what came from where. Then plan a sweep of windows and
show that swapping the window back restores the target exactly.
"""

import tempfile
from pathlib import Path

import numpy as np

from layerswap.surgery import SwapPlan, plan_sweep, swap_layers, validate_compat
from layerswap.tensorstore import group_layers, open_checkpoint, rewrite_canonical, write_checkpoint

tmp = Path(tempfile.mkdtemp())
rng = np.random.default_rng(2)


def checkpoint(path, num_layers=10):
    entries = [("model.embed_tokens.weight", "F32", [20, 8], rng.standard_normal((20, 8)).astype("<f4").tobytes())]
    for i in range(num_layers):
        entries.append((f"model.layers.{i}.self_attn.q_proj.weight", "F32", [8, 8], rng.standard_normal((8, 8)).astype("<f4").tobytes()))
    entries.append(("model.norm.weight", "F32", [8], rng.standard_normal(8).astype("<f4").tobytes()))
    write_checkpoint(entries, {"format": "pt"}, path)
    return open_checkpoint(path)


target = checkpoint(tmp / "fr.safetensors")
source = checkpoint(tmp / "en.safetensors")
print("compatible:", validate_compat(target, source).compatible)

lm = group_layers(target)
plan = SwapPlan("fr", "en", (3, 6))
hybrid = swap_layers(target, source, plan, lm, tmp / f"{plan.output_name}.safetensors")
print("wrote", plan.output_name, "metadata", hybrid.metadata)

for name in hybrid.names:
    origin = "source" if hybrid.read_bytes(name) == source.read_bytes(name) else "target"
    print(f"  {name:40s} <- {origin}")

# swapping the same window back from the original target undoes the swap
swap_layers(hybrid, target, SwapPlan("fr", "fr", (3, 6)), lm, tmp / "back.safetensors")
rewrite_canonical(target, tmp / "fr.canonical.safetensors")
same = (tmp / "back.safetensors").read_bytes() == (tmp / "fr.canonical.safetensors").read_bytes()
print("involution restores target:", same)

# a 36-layer stack swept with width 10, stride 5
for p in plan_sweep(36, 10, stride=5, target_label="fr", source_label="en"):
    print("  sweep window", p.window, p.output_name)
