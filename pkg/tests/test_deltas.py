import math
import statistics

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from builders import layered_arrays, single_layer_stack, write_arrays
from layerswap.deltas import (
    BLOCK,
    accumulate_pair,
    analyze_stack,
    cosine_from_gram,
    cosine_matrix,
    gram_and_share,
    mean_pairwise_cosine,
    spectrum_from_gram,
    stats_from_gram,
    tree_sum,
    write_csv,
)
from layerswap.errors import DegenerateError, IncompatibleError, PreconditionError
from layerswap.tensorstore import group_layers, open_checkpoint, read_tensor_f64


def _open(base_path, paths):
    base = open_checkpoint(base_path)
    specs = [open_checkpoint(p) for p in paths]
    return base, specs, group_layers(base)


def test_tree_sum_small_cases():
    assert tree_sum([]) == 0.0
    assert tree_sum([3.0]) == 3.0
    assert tree_sum([1e16, 1.0, -1e16, 1.0]) == (1e16 + 1.0) + (-1e16 + 1.0)


def test_zero_deltas(tmp_path):
    base_path, paths = single_layer_stack(tmp_path, np.zeros((2, 5)), base=np.arange(5.0))
    base, (a, b), lm = _open(base_path, paths)
    assert accumulate_pair(a, b, base, 0, lm) == (0.0, 0.0, 0.0)


def test_identical_deltas(tmp_path):
    d = np.array([1.0, -2.0, 0.5, 3.0])
    base_path, paths = single_layer_stack(tmp_path, np.stack([d, d]), base=np.ones(4))
    base, (a, b), lm = _open(base_path, paths)
    dot, na, nb = accumulate_pair(a, b, base, 0, lm)
    assert dot == na == nb > 0


def test_three_tensor_layer_against_naive_loop(tmp_path):
    rng = np.random.default_rng(3)
    names = ["model.layers.0.z", "model.layers.0.a", "model.layers.0.m"]
    shapes = [(2, 3), (4,), (3, 2, 2)]
    ckpts = {}
    for label in ("base", "a", "b"):
        arrays = {n: rng.integers(-5, 6, size=s).astype(np.float64) for n, s in zip(names, shapes)}
        ckpts[label] = arrays
        write_arrays(tmp_path / f"{label}.safetensors", arrays, dtype="F32")

    def flat(label):
        out = []
        for n in sorted(names):
            out.extend(ckpts[label][n].ravel().tolist())
        return out

    fb, fa, fbb = flat("base"), flat("a"), flat("b")
    dot = na = nb = 0
    for x, y, z in zip(fa, fbb, fb):
        dot += (x - z) * (y - z)
        na += (x - z) ** 2
        nb += (y - z) ** 2
    base = open_checkpoint(tmp_path / "base.safetensors")
    a = open_checkpoint(tmp_path / "a.safetensors")
    b = open_checkpoint(tmp_path / "b.safetensors")
    assert accumulate_pair(a, b, base, 0, group_layers(base)) == (dot, na, nb)


def test_incompatible_shapes(tmp_path):
    write_arrays(tmp_path / "base.safetensors", {"model.layers.0.w": np.zeros(4)})
    write_arrays(tmp_path / "a.safetensors", {"model.layers.0.w": np.zeros(5)})
    base = open_checkpoint(tmp_path / "base.safetensors")
    a = open_checkpoint(tmp_path / "a.safetensors")
    with pytest.raises(IncompatibleError, match="shape"):
        accumulate_pair(a, a, base, 0, group_layers(base))


def test_copies_give_all_ones(tmp_path):
    d = np.array([0.3, -1.0, 2.0])
    base_path, paths = single_layer_stack(tmp_path, np.stack([d] * 4))
    base, specs, lm = _open(base_path, paths)
    assert np.array_equal(cosine_matrix(specs, base, 0, lm), np.ones((4, 4)))


def test_negated_deltas(tmp_path):
    d = np.array([0.25, -1.5, 2.0, 4.0])
    base_path, paths = single_layer_stack(tmp_path, np.stack([d, -d]))
    base, specs, lm = _open(base_path, paths)
    cos = cosine_matrix(specs, base, 0, lm)
    assert cos[0, 1] == cos[1, 0] == -1.0


def test_six_random_specialists_against_materialized_oracle(tmp_path):
    rng = np.random.default_rng(11)
    base_vec = rng.standard_normal(300)
    deltas = rng.standard_normal((6, 300)) * 0.01
    base_path, paths = single_layer_stack(tmp_path, deltas, base=base_vec, split=120)
    base, specs, lm = _open(base_path, paths)
    got = cosine_matrix(specs, base, 0, lm)
    stored = (base_vec + deltas) - base_vec
    for i in range(6):
        for j in range(6):
            u, v = stored[i], stored[j]
            want = math.fsum(u * v) / math.sqrt(math.fsum(u * u) * math.fsum(v * v))
            assert abs(got[i, j] - want) <= 1e-12


def test_single_specialist_is_rejected(tmp_path):
    base_path, paths = single_layer_stack(tmp_path, np.ones((1, 3)))
    base, specs, lm = _open(base_path, paths)
    with pytest.raises(PreconditionError):
        cosine_matrix(specs, base, 0, lm)


def test_mean_pairwise_cosine_examples():
    assert mean_pairwise_cosine(np.ones((5, 5))) == 1.0
    assert mean_pairwise_cosine(np.array([[1.0, 0.37], [0.37, 1.0]])) == 0.37
    m = np.eye(6)
    vals = [round(0.1 * k, 1) for k in range(1, 16)]
    m[np.triu_indices(6, 1)] = vals
    m = np.triu(m) + np.triu(m, 1).T
    assert mean_pairwise_cosine(m) == pytest.approx(statistics.fmean(vals), abs=1e-15)
    assert statistics.fmean(vals) == pytest.approx(0.8, abs=1e-15)
    with pytest.raises(PreconditionError):
        mean_pairwise_cosine(np.ones((1, 1)))


def test_rank_one_and_isotropic_shares(tmp_path):
    d = np.array([1.0, 2.0, -3.0, 0.5])
    base_path, paths = single_layer_stack(tmp_path, np.stack([d] * 3), prefix="r")
    base, specs, lm = _open(base_path, paths)
    assert gram_and_share(specs, base, 0, lm)[2] == pytest.approx(1.0, abs=1e-12)

    ortho = np.eye(5)[:4] * 2.5
    base_path, paths = single_layer_stack(tmp_path, ortho, prefix="o")
    base, specs, lm = _open(base_path, paths)
    assert gram_and_share(specs, base, 0, lm)[2] == pytest.approx(0.25, abs=1e-12)


def test_share_matches_direct_svd(tmp_path):
    rng = np.random.default_rng(5)
    deltas = rng.standard_normal((6, 128))
    base_path, paths = single_layer_stack(tmp_path, deltas)
    base, specs, lm = _open(base_path, paths)
    gram, eig, share = gram_and_share(specs, base, 0, lm)
    sv = np.linalg.svd(deltas, compute_uv=False)
    assert share == pytest.approx(sv[0] ** 2 / np.sum(sv**2), rel=1e-9)
    assert np.allclose(eig, sv**2, rtol=1e-9, atol=0)
    assert np.array_equal(gram, gram.T)


def test_degenerate_when_base_compared_with_itself(tmp_path):
    write_arrays(tmp_path / "base.safetensors", {"model.layers.0.w": np.arange(4.0)})
    base = open_checkpoint(tmp_path / "base.safetensors")
    with pytest.raises(DegenerateError, match="degenerate: no fine-tuning signal"):
        gram_and_share([base, base], base, 0, group_layers(base))


def test_clamp_and_hard_negative():
    eig, share = spectrum_from_gram(np.array([[1.0, 1.0], [1.0, 1.0 - 1e-14]]))
    assert eig.min() >= 0.0 and share == pytest.approx(1.0)
    with pytest.raises(Exception, match="positive semidefinite"):
        spectrum_from_gram(np.array([[1.0, 2.0], [2.0, 1.0]]))


def test_zero_delta_cosines_are_zero_and_flagged():
    gram = np.array([[4.0, 0.0, 2.0], [0.0, 0.0, 0.0], [2.0, 0.0, 1.0]])
    cos, zero = cosine_from_gram(gram)
    assert zero == [1]
    assert cos[1].tolist() == [0.0, 0.0, 0.0]
    st = stats_from_gram(3, ["a", "b", "c"], gram)
    assert len(st.warnings) == 1 and "'b'" in st.warnings[0]


def _planted_stack(tmp_path, rng, n=6, size=256):
    """Layers 1-2 share a direction plus small noise; layers 0 and 3 get orthogonal deltas."""
    base = layered_arrays(rng, 4, shapes=((size,),))
    shared = {k: rng.standard_normal(v.shape) for k, v in base.items()}
    paths = []
    for i in range(n):
        arrays = {}
        for name, arr in base.items():
            if name.startswith(("model.layers.1.", "model.layers.2.")):
                delta = shared[name] + 0.1 * rng.standard_normal(arr.shape)
            elif name.startswith(("model.layers.0.", "model.layers.3.")):
                delta = np.zeros(arr.shape)
                delta.ravel()[i * 40 : (i + 1) * 40] = rng.standard_normal(40)
            else:
                delta = rng.standard_normal(arr.shape)
            arrays[name] = arr + delta
        paths.append(write_arrays(tmp_path / f"spec{i}.safetensors", arrays))
    base_path = write_arrays(tmp_path / "base.safetensors", base)
    return base_path, paths


def test_planted_ordering_matches_oracle(tmp_path):
    rng = np.random.default_rng(2024)
    base_path, paths = _planted_stack(tmp_path, rng)
    base, specs, lm = _open(base_path, paths)
    stats = {s.layer: s for s in analyze_stack(specs, base, lm)}
    assert list(stats) == ["pre", 0, 1, 2, 3, "post"]
    for planted in (1, 2):
        for edge in (0, 3):
            assert stats[planted].mean_pairwise_cosine > stats[edge].mean_pairwise_cosine
            assert stats[planted].top1_share > stats[edge].top1_share
    # materialized oracle for one planted layer
    names = lm.names(1)
    mat = np.stack([_flat(p, names) - _flat(base_path, names) for p in paths])
    sv = np.linalg.svd(mat, compute_uv=False)
    assert stats[1].top1_share == pytest.approx(sv[0] ** 2 / np.sum(sv**2), rel=1e-9)
    st = stats[1]
    assert st.norm_mean == pytest.approx(statistics.fmean(np.linalg.norm(mat, axis=1)), rel=1e-12)
    assert st.norm_std == pytest.approx(statistics.pstdev(np.linalg.norm(mat, axis=1)), rel=1e-9)


def _flat(path, names):
    h = open_checkpoint(path)
    return np.concatenate([read_tensor_f64(h, n) for n in sorted(names)])


def test_analyze_rejects_mismatched_names(tmp_path):
    write_arrays(tmp_path / "base.safetensors", {"model.layers.0.w": np.zeros(3)})
    write_arrays(tmp_path / "a.safetensors", {"model.layers.0.w": np.ones(3)})
    write_arrays(tmp_path / "b.safetensors", {"model.layers.0.w": np.ones(3), "extra": np.ones(1)})
    base = open_checkpoint(tmp_path / "base.safetensors")
    specs = [open_checkpoint(tmp_path / "a.safetensors"), open_checkpoint(tmp_path / "b.safetensors")]
    with pytest.raises(IncompatibleError):
        analyze_stack(specs, base, group_layers(base))


def test_chunk_size_and_threads_do_not_change_results(tmp_path):
    rng = np.random.default_rng(9)
    p = 3 * BLOCK + 17
    base_path, paths = single_layer_stack(tmp_path, rng.standard_normal((4, p)), base=rng.standard_normal(p), split=BLOCK + 5)
    base, specs, lm = _open(base_path, paths)
    ref = analyze_stack(specs, base, lm, chunk_bytes=8 * BLOCK * 8)
    for chunk in (8, 1000, 8 * BLOCK, 1 << 22):
        for threads in (1, 3):
            got = analyze_stack(specs, base, lm, chunk_bytes=chunk, threads=threads)
            assert [s.to_dict() for s in got] == [s.to_dict() for s in ref]


@settings(max_examples=25, deadline=None)
@given(
    n=st.integers(2, 6),
    p=st.integers(3, 40),
    seed=st.integers(0, 2**32 - 1),
    scale=st.sampled_from([1e-3, 0.5, 7.0, -2.0, 1e4]),
)
def test_gram_invariants(n, p, seed, scale):
    rng = np.random.default_rng(seed)
    d = rng.standard_normal((n, p))
    gram = d @ d.T
    gram = (gram + gram.T) / 2
    st_ = stats_from_gram(0, [str(i) for i in range(n)], gram)
    assert np.array_equal(st_.cosine_matrix, st_.cosine_matrix.T)
    assert np.all(np.diag(st_.cosine_matrix) == 1.0)
    assert np.all(np.abs(st_.cosine_matrix) <= 1.0)
    assert 1.0 / n - 1e-12 <= st_.top1_share <= 1.0 + 1e-12
    assert np.all(np.diff(st_.eigenvalues) <= 0)
    assert np.allclose(st_.delta_norms**2, np.diag(gram), rtol=1e-10, atol=0)
    scaled = stats_from_gram(0, st_.labels, gram * scale * scale)
    assert scaled.top1_share == pytest.approx(st_.top1_share, abs=1e-12)
    assert np.allclose(scaled.cosine_matrix, st_.cosine_matrix, atol=1e-12, rtol=0)
    perm = rng.permutation(n)
    permuted = stats_from_gram(0, st_.labels, gram[np.ix_(perm, perm)])
    assert np.allclose(permuted.cosine_matrix, st_.cosine_matrix[np.ix_(perm, perm)], atol=1e-15, rtol=0)
    assert permuted.mean_pairwise_cosine == pytest.approx(st_.mean_pairwise_cosine, abs=1e-12)
    assert permuted.top1_share == pytest.approx(st_.top1_share, abs=1e-12)


def test_csv_columns(tmp_path):
    st_ = stats_from_gram(0, ["a", "b"], np.array([[1.0, 0.5], [0.5, 1.0]]))
    write_csv([st_], tmp_path / "out.csv")
    lines = (tmp_path / "out.csv").read_text().splitlines()
    assert lines[0] == "layer,c_bar,s,norm_mean,norm_std"
    assert lines[1] == "0,0.5,0.75,1.0,0.0"
