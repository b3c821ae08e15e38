"""
Reading and writing safetensors containers
==========================================

Write a small checkpoint, inspect its header lazily, decode a tensor, and
check that the canonical writer is idempotent.
"""

import hashlib
import tempfile
from pathlib import Path

import numpy as np

from layerswap.tensorstore import open_checkpoint, read_tensor_f64, rewrite_canonical, write_checkpoint

tmp = Path(tempfile.mkdtemp())
rng = np.random.default_rng(0)

# entries are (name, dtype, shape, raw little-endian bytes); order does not matter
w = rng.standard_normal((4, 3)).astype("<f4")
b = np.arange(3, dtype="<f2")
write_checkpoint(
    [("model.layers.0.mlp.bias", "F16", [3], b.tobytes()), ("model.layers.0.mlp.weight", "F32", [4, 3], w.tobytes())],
    {"format": "pt"},
    tmp / "tiny.safetensors",
)

h = open_checkpoint(tmp / "tiny.safetensors")
print("metadata:", h.metadata)
for name in h.names:
    m = h.meta(name)
    print(f"  {name:28s} {m.dtype:4s} {str(m.shape):8s} bytes {m.data_offsets}")

# numeric decode always widens to f64
print("bias as f64:", read_tensor_f64(h, "model.layers.0.mlp.bias"))

# canonical form: writing it again changes nothing
rewrite_canonical(h, tmp / "again.safetensors")
digest = lambda p: hashlib.sha256(p.read_bytes()).hexdigest()[:16]
print("sha256", digest(tmp / "tiny.safetensors"), digest(tmp / "again.safetensors"))
