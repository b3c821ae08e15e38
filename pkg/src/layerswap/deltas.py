"""Per-layer statistics of fine-tuning deltas across N specialists sharing a base.

For each layer group the deltas ``specialist - base`` are never materialized
as a whole. Inner products are streamed chunk by chunk and reduced in a
fixed order:

* elements are cut into blocks of :data:`BLOCK` in storage order and each
  block is summed by numpy,
* block sums of one tensor are combined by pairwise (tree) summation,
* per-tensor sums, in name order, are combined by tree summation again.

The reduction tree depends only on tensor shapes, so results are
bit-identical across chunk sizes, runs and thread counts.

Singular values of the stacked N x P delta matrix come from the N x N Gram
matrix (``D D^T``), whose eigenvalues are the squared singular values.
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegenerateError, IncompatibleError, LayerSwapError, PreconditionError
from .tensorstore import DEFAULT_CHUNK_BYTES, CheckpointHandle, LayerMap, iter_tensor_f64

BLOCK = 8192
PSD_TOLERANCE = 1e-9


def tree_sum(values: Sequence[float]) -> float:
    """Pairwise summation with a split point fixed by ``len(values)``."""
    n = len(values)
    if n == 0:
        return 0.0
    if n == 1:
        return float(values[0])
    if n == 2:
        return float(values[0]) + float(values[1])
    mid = n // 2
    return tree_sum(values[:mid]) + tree_sum(values[mid:])


def _block_sums(x: np.ndarray) -> list[float]:
    full = (x.size // BLOCK) * BLOCK
    out: list[float] = []
    if full:
        out.extend(np.add.reduce(x[:full].reshape(-1, BLOCK), axis=1).tolist())
    if full < x.size:
        out.append(float(np.add.reduce(x[full:])))
    return out


def _check_group(handles: Sequence[CheckpointHandle], base: CheckpointHandle, names: Sequence[str]) -> None:
    for name in names:
        ref = base.meta(name)
        for h in handles:
            m = h.tensors.get(name)
            if m is None:
                raise IncompatibleError(f"tensor {name!r} missing from {h.path}")
            if m.shape != ref.shape:
                raise IncompatibleError(f"tensor {name!r}: shape {m.shape} in {h.path} vs {ref.shape} in base")
            if m.dtype != ref.dtype:
                raise IncompatibleError(f"tensor {name!r}: dtype {m.dtype} in {h.path} vs {ref.dtype} in base")


def group_inner_products(
    handles: Sequence[CheckpointHandle],
    base: CheckpointHandle,
    names: Sequence[str],
    pairs: Sequence[tuple[int, int]],
    chunk_bytes: int = DEFAULT_CHUNK_BYTES,
) -> dict[tuple[int, int], float]:
    """``<delta_i, delta_j>`` over the tensors ``names`` for each requested pair.

    All checkpoints are streamed once; every pair uses the same reduction tree.
    """
    names = sorted(names)
    _check_group(handles, base, names)
    per_tensor: dict[tuple[int, int], list[float]] = {p: [] for p in pairs}
    used = sorted({i for p in pairs for i in p})
    for name in names:
        streams = [iter_tensor_f64(handles[i], name, chunk_bytes, align=BLOCK) for i in used]
        base_stream = iter_tensor_f64(base, name, chunk_bytes, align=BLOCK)
        blocks: dict[tuple[int, int], list[float]] = {p: [] for p in pairs}
        for base_chunk, *chunks in zip(base_stream, *streams):
            deltas = {i: c - base_chunk for i, c in zip(used, chunks)}
            for i, j in pairs:
                blocks[(i, j)].extend(_block_sums(deltas[i] * deltas[j]))
        for p in pairs:
            per_tensor[p].append(tree_sum(blocks[p]))
    return {p: tree_sum(v) for p, v in per_tensor.items()}


def accumulate_pair(
    specialist_a: CheckpointHandle,
    specialist_b: CheckpointHandle,
    base: CheckpointHandle,
    group: int | str,
    layer_map: LayerMap,
    chunk_bytes: int = DEFAULT_CHUNK_BYTES,
) -> tuple[float, float, float]:
    """Return ``(dot, |a - base|^2, |b - base|^2)`` over one layer group."""
    names = layer_map.names(group)
    res = group_inner_products([specialist_a, specialist_b], base, names, [(0, 1), (0, 0), (1, 1)], chunk_bytes)
    return res[(0, 1)], res[(0, 0)], res[(1, 1)]


def gram_matrix(
    specialists: Sequence[CheckpointHandle],
    base: CheckpointHandle,
    group: int | str,
    layer_map: LayerMap,
    chunk_bytes: int = DEFAULT_CHUNK_BYTES,
) -> np.ndarray:
    n = len(specialists)
    pairs = [(i, j) for i in range(n) for j in range(i, n)]
    res = group_inner_products(specialists, base, layer_map.names(group), pairs, chunk_bytes)
    gram = np.zeros((n, n))
    for (i, j), v in res.items():
        gram[i, j] = gram[j, i] = v
    return gram


def cosine_from_gram(gram: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """Cosine matrix from a Gram matrix, plus indices of zero-norm rows.

    Entries involving a zero delta are set to 0. The matrix is symmetric by
    construction and clipped to [-1, 1].
    """
    gram = np.asarray(gram, dtype=np.float64)
    n = gram.shape[0]
    norms = np.sqrt(np.clip(np.diag(gram), 0.0, None))
    zero = [i for i in range(n) if norms[i] == 0.0]
    cos = np.zeros((n, n))
    for i in range(n):
        if norms[i] > 0:
            cos[i, i] = 1.0
        for j in range(i + 1, n):
            if norms[i] > 0 and norms[j] > 0:
                # sqrt of the product keeps c == +-1 exact for (anti)parallel deltas
                denom = math.sqrt(gram[i, i] * gram[j, j])
                if not math.isfinite(denom) or denom == 0.0:
                    denom = norms[i] * norms[j]
                c = gram[i, j] / denom
                cos[i, j] = cos[j, i] = min(1.0, max(-1.0, c))
    return cos, zero


def mean_pairwise_cosine(cosine: np.ndarray) -> float:
    """Mean of the strictly upper-triangular entries."""
    cosine = np.asarray(cosine, dtype=np.float64)
    n = cosine.shape[0]
    if n < 2:
        raise PreconditionError("mean pairwise cosine needs at least two specialists")
    return tree_sum(cosine[np.triu_indices(n, k=1)].tolist()) / math.comb(n, 2)


def spectrum_from_gram(gram: np.ndarray) -> tuple[np.ndarray, float]:
    """Descending eigenvalues of ``gram`` (= squared singular values) and the top-1 share."""
    gram = np.asarray(gram, dtype=np.float64)
    trace = float(np.trace(gram))
    if not trace > 0.0:
        raise DegenerateError("degenerate: no fine-tuning signal (all deltas are zero)")
    eig = np.linalg.eigh(gram)[0][::-1].copy()
    if eig[-1] < -PSD_TOLERANCE * trace:
        raise LayerSwapError(f"gram matrix is not positive semidefinite: eigenvalue {eig[-1]!r}, trace {trace!r}")
    eig = np.clip(eig, 0.0, None)
    return eig, float(eig[0] / eig.sum())


def cosine_matrix(
    specialists: Sequence[CheckpointHandle],
    base: CheckpointHandle,
    group: int | str,
    layer_map: LayerMap,
    chunk_bytes: int = DEFAULT_CHUNK_BYTES,
) -> np.ndarray:
    if len(specialists) < 2:
        raise PreconditionError("need at least two specialists")
    return cosine_from_gram(gram_matrix(specialists, base, group, layer_map, chunk_bytes))[0]


def gram_and_share(
    specialists: Sequence[CheckpointHandle],
    base: CheckpointHandle,
    group: int | str,
    layer_map: LayerMap,
    chunk_bytes: int = DEFAULT_CHUNK_BYTES,
) -> tuple[np.ndarray, np.ndarray, float]:
    if len(specialists) < 2:
        raise PreconditionError("need at least two specialists")
    gram = gram_matrix(specialists, base, group, layer_map, chunk_bytes)
    eig, share = spectrum_from_gram(gram)
    return gram, eig, share


@dataclass
class DeltaStats:
    layer: int | str
    labels: list[str]
    cosine_matrix: np.ndarray
    mean_pairwise_cosine: float
    gram: np.ndarray
    eigenvalues: np.ndarray
    top1_share: float
    delta_norms: np.ndarray
    warnings: list[str] = field(default_factory=list)

    @property
    def norm_mean(self) -> float:
        return float(np.mean(self.delta_norms))

    @property
    def norm_std(self) -> float:
        # population std over the specialists
        return float(np.std(self.delta_norms))

    def to_dict(self) -> dict:
        return {
            "group": self.layer,
            "cosine_matrix": self.cosine_matrix.tolist(),
            "mean_pairwise_cosine": self.mean_pairwise_cosine,
            "gram": self.gram.tolist(),
            "eigenvalues": self.eigenvalues.tolist(),
            "top1_share": self.top1_share,
            "delta_norms": self.delta_norms.tolist(),
            "norm_mean": self.norm_mean,
            "norm_std": self.norm_std,
            "warnings": list(self.warnings),
        }


def stats_from_gram(group: int | str, labels: Sequence[str], gram: np.ndarray) -> DeltaStats:
    cos, zero = cosine_from_gram(gram)
    eig, share = spectrum_from_gram(gram)
    warnings = [f"zero delta for {labels[i]!r}; its cosines are reported as 0" for i in zero]
    return DeltaStats(
        layer=group,
        labels=list(labels),
        cosine_matrix=cos,
        mean_pairwise_cosine=mean_pairwise_cosine(cos),
        gram=np.asarray(gram, dtype=np.float64),
        eigenvalues=eig,
        top1_share=share,
        delta_norms=np.sqrt(np.clip(np.diag(gram), 0.0, None)),
        warnings=warnings,
    )


def analyze_stack(
    specialists: Sequence[CheckpointHandle],
    base: CheckpointHandle,
    layer_map: LayerMap,
    labels: Sequence[str] | None = None,
    threads: int = 1,
    chunk_bytes: int = DEFAULT_CHUNK_BYTES,
) -> list[DeltaStats]:
    """Statistics for every non-empty group: ``pre``, layers ``0..L-1``, ``post``.

    Groups are processed concurrently when ``threads > 1``; each group's
    reduction order is fixed, so the output does not depend on ``threads``.
    """
    if len(specialists) < 2:
        raise PreconditionError("need at least two specialists")
    if labels is None:
        labels = [os.path.splitext(os.path.basename(h.path))[0] for h in specialists]
    if len(labels) != len(specialists):
        raise PreconditionError("labels and specialists differ in length")
    expected = set(layer_map.layer_of)
    for h in [base, *specialists]:
        if set(h.tensors) != expected:
            diff = sorted(set(h.tensors) ^ expected)
            raise IncompatibleError(f"{h.path}: tensor names differ from the layer map, e.g. {diff[:3]}")

    def one(group: int | str) -> DeltaStats:
        return stats_from_gram(group, labels, gram_matrix(specialists, base, group, layer_map, chunk_bytes))

    groups = layer_map.groups()
    if threads <= 1:
        return [one(g) for g in groups]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(one, groups))


def write_csv(stats: Sequence[DeltaStats], path: str | os.PathLike) -> None:
    """Columns ``layer,c_bar,s,norm_mean,norm_std``, one row per group."""
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["layer", "c_bar", "s", "norm_mean", "norm_std"])
        for st in stats:
            w.writerow([st.layer, repr(st.mean_pairwise_cosine), repr(st.top1_share), repr(st.norm_mean), repr(st.norm_std)])
