import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from builders import layered_arrays, paired_corpus, write_arrays
from layerswap.cli import RunConfig, main
from layerswap.errors import ErrorCode, PreconditionError
from layerswap.lid import bundled_corpus
from layerswap.tensorstore import open_checkpoint

NUM_LAYERS = 4


@pytest.fixture
def stack(tmp_path):
    rng = np.random.default_rng(0)
    base = layered_arrays(rng, NUM_LAYERS)
    base_path = write_arrays(tmp_path / "base.safetensors", base, dtype="F32")
    specs = []
    for lang in ("en", "fr", "de", "es", "zh", "sw"):
        arrays = {k: v + 0.01 * rng.standard_normal(v.shape) for k, v in base.items()}
        specs.append(f"{lang}={write_arrays(tmp_path / f'{lang}.safetensors', arrays, dtype='F32')}")
    return base_path, specs


def _run(capsys, argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_analyze_report(tmp_path, capsys, stack):
    base, specs = stack
    argv = ["analyze", "--base", base, "--out", tmp_path / "r.json", "--csv", tmp_path / "r.csv"]
    for s in specs:
        argv += ["--specialist", s]
    code, _, err = _run(capsys, argv)
    assert code == 0, err
    report = json.loads((tmp_path / "r.json").read_text())
    assert report["labels"] == ["en", "fr", "de", "es", "zh", "sw"]
    assert report["num_layers"] == NUM_LAYERS
    assert [r["group"] for r in report["layers"]] == ["pre", 0, 1, 2, 3, "post"]
    assert report["config"]["deflate"]["level"] == 9
    assert set(report["inputs"]) == {"base", "en", "fr", "de", "es", "zh", "sw"}
    assert all(len(v["sha256"]) == 64 for v in report["inputs"].values())
    rows = list(csv.DictReader((tmp_path / "r.csv").open()))
    assert [r["layer"] for r in rows] == ["pre", "0", "1", "2", "3", "post"]
    assert float(rows[1]["s"]) == report["layers"][1]["top1_share"]


def test_analyze_one_specialist(tmp_path, capsys, stack):
    base, specs = stack
    code, _, err = _run(capsys, ["analyze", "--base", base, "--specialist", specs[0]])
    assert code == ErrorCode.PRECONDITION == 3
    assert json.loads(err)["error"]["code"] == "PRECONDITION"


def test_analyze_missing_file(tmp_path, capsys, stack):
    base, specs = stack
    out = tmp_path / "never.json"
    argv = ["analyze", "--base", base, "--out", out, "--specialist", specs[0], "--specialist", tmp_path / "nope.safetensors"]
    code, _, err = _run(capsys, argv)
    assert code == ErrorCode.IO == 4
    assert json.loads(err)["error"]["code"] == "IO"
    assert not out.exists()


def test_analyze_dry_run(tmp_path, capsys, stack):
    base, specs = stack
    before = sorted(p.name for p in tmp_path.iterdir())
    code, out, _ = _run(capsys, ["analyze", "--dry-run", "--base", base, "--out", tmp_path / "x.json", "--specialist", specs[0], "--specialist", specs[1]])
    assert code == 0
    assert json.loads(out)["plan"]["num_layers"] == NUM_LAYERS
    assert sorted(p.name for p in tmp_path.iterdir()) == before


def test_analyze_degenerate(tmp_path, capsys, stack):
    base, _ = stack
    code, _, err = _run(capsys, ["analyze", "--base", base, "--specialist", f"a={base}", "--specialist", f"b={base}"])
    assert code == ErrorCode.DEGENERATE
    assert "degenerate" in json.loads(err)["error"]["message"]


def test_corrupt_checkpoint_is_format_error(tmp_path, capsys, stack):
    _, specs = stack
    bad = tmp_path / "bad.safetensors"
    bad.write_bytes(b"\x05\x00")
    code, _, _ = _run(capsys, ["analyze", "--base", bad, "--specialist", specs[0], "--specialist", specs[1]])
    assert code == ErrorCode.FORMAT


def test_sweep_dry_run(tmp_path, capsys):
    code, out, _ = _run(capsys, ["sweep", "--layers", 36, "--width", 10, "--stride", 5, "--dry-run", "--out", tmp_path / "p.json"])
    assert code == 0
    plans = json.loads(out)
    assert len(plans) == 7 and plans[-1]["window"] == [26, 35]
    assert not (tmp_path / "p.json").exists()


def test_swap_reversed_window(tmp_path, capsys, stack):
    _, specs = stack
    fr, en = specs[1].split("=")[1], specs[0].split("=")[1]
    code, _, err = _run(capsys, ["swap", "--target", fr, "--source", en, "--window", "22:13", "--out", tmp_path / "h"])
    assert code == ErrorCode.PRECONDITION
    assert "22:13" in json.loads(err)["error"]["message"]
    assert not (tmp_path / "h").exists()


def test_swap_window_and_plan(tmp_path, capsys, stack):
    _, specs = stack
    fr, en = specs[1].split("=")[1], specs[0].split("=")[1]
    code, out, _ = _run(capsys, ["swap", "--target", fr, "--source", en, "--window", "1:2", "--out", tmp_path / "h.safetensors"])
    assert code == 0
    result = json.loads(out)
    assert result["outputs"][0]["window"] == [1, 2]
    assert open_checkpoint(tmp_path / "h.safetensors").metadata["layerswap.window"] == "1:2"

    code, _, _ = _run(capsys, ["sweep", "--layers", NUM_LAYERS, "--width", 2, "--stride", 2, "--target-label", "fr", "--source-label", "en", "--out", tmp_path / "plans.json"])
    assert code == 0
    outdir = tmp_path / "hybrids"
    outdir.mkdir()
    code, out, _ = _run(capsys, ["swap", "--target", fr, "--source", en, "--plan", tmp_path / "plans.json", "--out-dir", outdir])
    assert code == 0
    assert sorted(p.name for p in outdir.iterdir()) == ["fr-swap-en-L0-L1.safetensors", "fr-swap-en-L2-L3.safetensors"]


def test_swap_dry_run_and_range(tmp_path, capsys, stack):
    _, specs = stack
    fr, en = specs[1].split("=")[1], specs[0].split("=")[1]
    code, out, _ = _run(capsys, ["swap", "--dry-run", "--target", fr, "--source", en, "--window", "0:1", "--out", tmp_path / "h"])
    assert code == 0 and json.loads(out)["compat"]["compatible"] is True
    assert not (tmp_path / "h").exists()
    code, _, _ = _run(capsys, ["swap", "--target", fr, "--source", en, "--window", "0:9", "--out", tmp_path / "h"])
    assert code == ErrorCode.PRECONDITION


def test_fidelity_empty_traces(tmp_path, capsys):
    traces = tmp_path / "t.jsonl"
    traces.write_text("")
    code, _, err = _run(capsys, ["fidelity", "--target", "fr", "--traces", traces])
    assert code == ErrorCode.PRECONDITION
    assert "no traces" in err


def test_fidelity_and_profiles(tmp_path, capsys):
    corpus = bundled_corpus()
    traces = tmp_path / "t.jsonl"
    traces.write_text("".join(json.dumps({"text": t}) + "\n" for t in corpus["fr"][:4] + corpus["en"][:4]))
    code, _, _ = _run(capsys, ["train-profiles", "--out", tmp_path / "p.json"])
    assert code == 0
    code, _, _ = _run(capsys, ["fidelity", "--target", "fr", "--traces", traces, "--profiles", tmp_path / "p.json", "--out", tmp_path / "f.json"])
    assert code == 0
    report = json.loads((tmp_path / "f.json").read_text())
    assert report["fidelity"] == 0.5 and report["per_label_counts"] == {"en": 4, "fr": 4}
    code, _, _ = _run(capsys, ["fidelity", "--target", "xx", "--traces", traces])
    assert code == ErrorCode.PRECONDITION


def test_filter_command(tmp_path, capsys):
    pairs = paired_corpus(40)
    s, t = pairs[7]
    rows = [{"source": vars(s), "translated": vars(t)} for s, t in pairs]
    rows[7]["translated"] = {"reasoning": " ".join([t.full_text] * 5)}
    path = tmp_path / "pairs.jsonl"
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    code, out, _ = _run(capsys, ["filter", "--pairs", path, "--report", tmp_path / "v.jsonl", "--k-sigma", 3])
    assert code == 0
    summary = json.loads(out)
    assert summary["dropped"] == 1 and summary["total"] == 40
    verdicts = [json.loads(line) for line in (tmp_path / "v.jsonl").read_text().splitlines()]
    assert [v["id"] for v in verdicts if not v["kept"]] == ["s007"]
    assert summary["config"]["k_sigma"] == 3.0


def test_prefilter_command(tmp_path, capsys):
    rows = [{"id": "a", "question": "Compute 2+2."}, {"id": "b", "question": "Answer in French: what is 2+2?"}]
    (tmp_path / "s.jsonl").write_text("".join(json.dumps(r) + "\n" for r in rows))
    code, out, _ = _run(capsys, ["prefilter", "--samples", tmp_path / "s.jsonl", "--out", tmp_path / "k.jsonl"])
    assert code == 0 and json.loads(out)["dropped"] == 1
    assert [json.loads(x)["id"] for x in (tmp_path / "k.jsonl").read_text().splitlines()] == ["a"]


def test_chunk_command():
    text = "First paragraph here.\n\nSecond one. It has two sentences."
    proc = subprocess.run(
        [sys.executable, "-m", "layerswap.cli", "chunk", "--budget", "8"],
        input=text, capture_output=True, text=True, check=True,
    )
    chunks = [json.loads(line) for line in proc.stdout.splitlines()]
    assert "".join(c["text"] for c in chunks) == text
    assert all(c["tokens"] <= 8 for c in chunks)


def test_config_file(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"k_sigma": 2.5, "lid_k": 100}))
    loaded = RunConfig.load(str(cfg))
    assert loaded.k_sigma == 2.5 and loaded.lid_k == 100
    cfg.write_text(json.dumps({"bogus": 1}))
    with pytest.raises(PreconditionError, match="unknown"):
        RunConfig.load(str(cfg))
    cfg.write_text(json.dumps({"deflate": {"level": 6}}))
    code, _, _ = _run(capsys, ["sweep", "--config", cfg, "--layers", 4, "--width", 2, "--stride", 1])
    assert code == ErrorCode.PRECONDITION


def test_usage_error():
    with pytest.raises(SystemExit) as exc:
        main(["sweep", "--width", "3"])
    assert exc.value.code == ErrorCode.USAGE
