"""Command-line entry point: ``layerswap <command> ...``.

Commands: analyze, swap, sweep, fidelity, filter, chunk, prefilter,
train-profiles. Failures print ``{"error": {...}}`` on stderr and exit with
the code of :class:`layerswap.errors.ErrorCode`.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Sequence

from . import __version__
from . import corpus, deltas, lid, surgery, tensorstore
from .errors import ErrorCode, LayerSwapError, PreconditionError


@dataclass
class RunConfig:
    layer_pattern: str = tensorstore.DEFAULT_LAYER_PATTERN
    pre_prefixes: tuple[str, ...] = tensorstore.DEFAULT_PRE_PREFIXES
    chunk_size_bytes: int = tensorstore.DEFAULT_CHUNK_BYTES
    k_sigma: float = corpus.DEFAULT_K_SIGMA
    max_tokens: int = corpus.DEFAULT_MAX_TOKENS
    chars_per_token: float = corpus.DEFAULT_CHARS_PER_TOKEN
    chunk_budget: int = corpus.DEFAULT_CHUNK_BUDGET
    lid_ngram_min: int = lid.NGRAM_RANGE[0]
    lid_ngram_max: int = lid.NGRAM_RANGE[1]
    lid_k: int = lid.DEFAULT_K

    def validate(self) -> "RunConfig":
        checks = [
            (self.chunk_size_bytes >= 1, "chunk_size_bytes must be >= 1"),
            (self.k_sigma > 0, "k_sigma must be > 0"),
            (self.max_tokens >= 1, "max_tokens must be >= 1"),
            (self.chars_per_token > 0, "chars_per_token must be > 0"),
            (self.chunk_budget >= 1, "chunk_budget must be >= 1"),
            (1 <= self.lid_ngram_min <= self.lid_ngram_max, "need 1 <= lid_ngram_min <= lid_ngram_max"),
            (self.lid_k >= 1, "lid_k must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise PreconditionError(f"invalid config: {msg}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["pre_prefixes"] = list(self.pre_prefixes)
        d["deflate"] = dict(corpus.DEFLATE)
        return d

    @classmethod
    def load(cls, path: str | None) -> "RunConfig":
        if path is None:
            return cls()
        with open(path, encoding="utf-8") as f:
            raw = json.load(f)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known - {"deflate"}
        if unknown:
            raise PreconditionError(f"unknown config keys: {sorted(unknown)}")
        if "deflate" in raw and raw["deflate"] != corpus.DEFLATE:
            raise PreconditionError(f"deflate parameters are fixed at {corpus.DEFLATE}")
        raw.pop("deflate", None)
        if "pre_prefixes" in raw:
            raw["pre_prefixes"] = tuple(raw["pre_prefixes"])
        return cls(**raw).validate()


def sha256_file(path: str | os.PathLike) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for buf in iter(lambda: f.read(1 << 20), b""):
            h.update(buf)
    return h.hexdigest()


def _provenance(cfg: RunConfig, inputs: dict[str, str]) -> dict:
    return {
        "tool": "layerswap",
        "version": __version__,
        "config": cfg.to_dict(),
        "inputs": {k: {"path": str(p), "sha256": sha256_file(p)} for k, p in inputs.items()},
    }


def _emit(obj, out: str | None) -> None:
    text = json.dumps(obj, indent=2, ensure_ascii=False)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def _label_path(spec: str) -> tuple[str, str]:
    if "=" in spec:
        label, path = spec.split("=", 1)
    else:
        path = spec
        label = Path(spec).stem
    return label, path


# ---------------------------------------------------------------------------
# commands


def cmd_analyze(args: argparse.Namespace, cfg: RunConfig) -> int:
    specs = [_label_path(s) for s in args.specialist]
    if len(specs) < 2:
        raise PreconditionError("analyze needs at least two --specialist checkpoints")
    labels = [label for label, _ in specs]
    if len(set(labels)) != len(labels):
        raise PreconditionError(f"duplicate specialist labels: {labels}")
    base = tensorstore.open_checkpoint(args.base)
    handles = [tensorstore.open_checkpoint(p) for _, p in specs]
    layer_map = tensorstore.group_layers(base, cfg.layer_pattern, cfg.pre_prefixes)
    if args.dry_run:
        _emit(
            {
                "plan": {
                    "base": args.base,
                    "specialists": {label: p for label, p in specs},
                    "num_layers": layer_map.num_layers,
                    "groups": layer_map.groups(),
                },
                "config": cfg.to_dict(),
            },
            None,
        )
        return 0
    stats = deltas.analyze_stack(handles, base, layer_map, labels, threads=args.threads, chunk_bytes=cfg.chunk_size_bytes)
    report = {
        **_provenance(cfg, {"base": args.base, **{label: p for label, p in specs}}),
        "labels": labels,
        "num_layers": layer_map.num_layers,
        "layers": [st.to_dict() for st in stats],
    }
    _emit(report, args.out)
    if args.csv:
        deltas.write_csv(stats, args.csv)
    return 0


def _resolve_swaps(args: argparse.Namespace) -> list[tuple[surgery.SwapPlan, str]]:
    target_label = args.target_label or Path(args.target).stem
    source_label = args.source_label or Path(args.source).stem
    if bool(args.window) == bool(args.plan):
        raise PreconditionError("give exactly one of --window or --plan")
    if args.window:
        if not args.out:
            raise PreconditionError("--window needs --out")
        plan = surgery.SwapPlan(target_label, source_label, surgery.parse_window(args.window))
        return [(plan, args.out)]
    with open(args.plan, encoding="utf-8") as f:
        raw = json.load(f)
    if not isinstance(raw, list) or not raw:
        raise PreconditionError(f"{args.plan}: expected a non-empty JSON list of plans")
    out_dir = Path(args.out_dir or ".")
    plans = [surgery.SwapPlan.from_dict(d) for d in raw]
    return [(p, str(out_dir / f"{p.output_name}.safetensors")) for p in plans]


def cmd_swap(args: argparse.Namespace, cfg: RunConfig) -> int:
    target = tensorstore.open_checkpoint(args.target)
    source = tensorstore.open_checkpoint(args.source)
    layer_map = tensorstore.group_layers(target, cfg.layer_pattern, cfg.pre_prefixes)
    jobs = _resolve_swaps(args)
    for plan, _ in jobs:
        plan.check_range(layer_map.num_layers)
    compat = surgery.validate_compat(target, source)
    resolved = [{**plan.to_dict(), "out": out} for plan, out in jobs]
    if args.dry_run:
        _emit({"plans": resolved, "compat": compat.to_dict(), "config": cfg.to_dict()}, None)
        return 0
    outputs = []
    for plan, out in jobs:
        surgery.swap_layers(target, source, plan, layer_map, out)
        outputs.append({**plan.to_dict(), "out": out, "sha256": sha256_file(out)})
    _emit({**_provenance(cfg, {"target": args.target, "source": args.source}), "outputs": outputs}, None)
    return 0


def cmd_sweep(args: argparse.Namespace, cfg: RunConfig) -> int:
    plans = surgery.plan_sweep(
        args.layers, args.width, starts=args.starts, stride=args.stride,
        target_label=args.target_label, source_label=args.source_label,
    )
    _emit([p.to_dict() for p in plans], None if args.dry_run else args.out)
    return 0


def _profiles(args: argparse.Namespace, cfg: RunConfig) -> list[lid.LanguageProfile]:
    if args.profiles:
        return lid.load_profiles(args.profiles)
    return lid.train_profiles(lid.bundled_corpus(), cfg.lid_k, (cfg.lid_ngram_min, cfg.lid_ngram_max))


def cmd_fidelity(args: argparse.Namespace, cfg: RunConfig) -> int:
    traces = lid.read_traces(args.traces)
    if not traces:
        raise PreconditionError(f"{args.traces}: no traces")
    profiles = _profiles(args, cfg)
    if args.target not in {p.label for p in profiles}:
        raise PreconditionError(f"target {args.target!r} has no profile")
    if args.dry_run:
        _emit({"target": args.target, "traces": len(traces), "labels": [p.label for p in profiles], "config": cfg.to_dict()}, None)
        return 0
    report = lid.fidelity(traces, args.target, profiles, cfg.lid_k, args.prefix_chars)
    inputs = {"traces": args.traces}
    if args.profiles:
        inputs["profiles"] = args.profiles
    _emit({**_provenance(cfg, inputs), "prefix_chars": args.prefix_chars, **report.to_dict()}, args.out)
    return 0


def cmd_train_profiles(args: argparse.Namespace, cfg: RunConfig) -> int:
    if args.corpus_dir:
        corpora = {
            p.stem: [ln.strip() for ln in p.read_text(encoding="utf-8").splitlines() if ln.strip()]
            for p in sorted(Path(args.corpus_dir).glob("*.txt"))
        }
    else:
        corpora = lid.bundled_corpus()
    profiles = lid.train_profiles(corpora, cfg.lid_k, (cfg.lid_ngram_min, cfg.lid_ngram_max))
    if args.dry_run:
        _emit({"labels": sorted(corpora), "config": cfg.to_dict()}, None)
        return 0
    lid.save_profiles(profiles, args.out)
    return 0


def cmd_filter(args: argparse.Namespace, cfg: RunConfig) -> int:
    pairs = corpus.read_pairs(args.pairs)
    counts = corpus.read_token_counts(args.token_counts) if args.token_counts else None
    estimator = corpus.CharTokenEstimator(cfg.chars_per_token)
    if args.dry_run:
        _emit({"pairs": len(pairs), "config": cfg.to_dict()}, None)
        return 0
    verdicts = corpus.anomaly_filters(
        pairs, cfg.k_sigma, cfg.max_tokens, estimator, counts,
        corpus.DEFAULT_SELF_REFERENCE_PATTERNS if args.self_reference else None,
    )
    corpus.write_jsonl((v.to_dict() for v in verdicts), args.report)
    reasons: dict[str, int] = {}
    for v in verdicts:
        for r in v.reasons:
            reasons[r] = reasons.get(r, 0) + 1
    inputs = {"pairs": args.pairs, "report": args.report}
    if args.token_counts:
        inputs["token_counts"] = args.token_counts
    summary = {
        **_provenance(cfg, inputs),
        "estimator": {"kind": "sidecar"} if counts else estimator.describe(),
        "total": len(verdicts),
        "kept": sum(v.kept for v in verdicts),
        "dropped": sum(not v.kept for v in verdicts),
        "reasons": dict(sorted(reasons.items())),
    }
    _emit(summary, None)
    return 0


def cmd_prefilter(args: argparse.Namespace, cfg: RunConfig) -> int:
    samples = corpus.read_samples(args.samples)
    kept = [s for s in samples if not corpus.self_reference_filter(s)]
    if not args.dry_run:
        corpus.write_jsonl((asdict(s) for s in kept), args.out)
    _emit({"total": len(samples), "kept": len(kept), "dropped": len(samples) - len(kept)}, None)
    return 0


def cmd_chunk(args: argparse.Namespace, cfg: RunConfig) -> int:
    budget = args.budget or cfg.chunk_budget
    estimator = corpus.CharTokenEstimator(cfg.chars_per_token)
    text = sys.stdin.read()
    chunks = corpus.chunk_text(text, budget, estimator)
    if args.dry_run:
        _emit({"chunks": len(chunks), "budget": budget, "config": cfg.to_dict()}, None)
        return 0
    if args.delimiter is not None:
        sys.stdout.write(args.delimiter.join(chunks))
    else:
        for i, c in enumerate(chunks):
            sys.stdout.write(json.dumps({"index": i, "tokens": estimator(c), "text": c}, ensure_ascii=False) + "\n")
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="layerswap", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"layerswap {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name: str, func, help: str) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, help=help)
        sp.add_argument("--config", help="RunConfig JSON file")
        sp.add_argument("--dry-run", action="store_true", help="print the resolved plan and write nothing")
        sp.set_defaults(func=func)
        return sp

    sp = add("analyze", cmd_analyze, "per-layer delta statistics of specialists against a base")
    sp.add_argument("--base", required=True)
    sp.add_argument("--specialist", action="append", default=[], metavar="[LABEL=]PATH")
    sp.add_argument("--out", help="JSON report path (default: stdout)")
    sp.add_argument("--csv", help="CSV summary path")
    sp.add_argument("--threads", type=int, default=1)

    sp = add("swap", cmd_swap, "transplant a layer window from source into target")
    sp.add_argument("--target", required=True)
    sp.add_argument("--source", required=True)
    sp.add_argument("--window", help="inclusive START:END")
    sp.add_argument("--plan", help="JSON plan list from `sweep`")
    sp.add_argument("--out", help="output checkpoint (with --window)")
    sp.add_argument("--out-dir", help="output directory (with --plan)")
    sp.add_argument("--target-label")
    sp.add_argument("--source-label")

    sp = add("sweep", cmd_sweep, "plan contiguous swap windows")
    sp.add_argument("--layers", type=int, required=True)
    sp.add_argument("--width", type=int, required=True)
    sp.add_argument("--stride", type=int)
    sp.add_argument("--starts", type=int, nargs="+")
    sp.add_argument("--target-label", default="target")
    sp.add_argument("--source-label", default="source")
    sp.add_argument("--out", help="plan list path (default: stdout)")

    sp = add("fidelity", cmd_fidelity, "fraction of traces classified as the target language")
    sp.add_argument("--target", required=True)
    sp.add_argument("--traces", required=True, help="JSON-lines of {\"text\": ...}")
    sp.add_argument("--profiles", help="profile JSON (default: trained on the bundled corpus)")
    sp.add_argument("--prefix-chars", type=int, help="classify only this many leading characters")
    sp.add_argument("--out")

    sp = add("train-profiles", cmd_train_profiles, "build language profiles from text files")
    sp.add_argument("--corpus-dir", help="directory of LABEL.txt files, one sentence per line")
    sp.add_argument("--out", required=True)

    sp = add("filter", cmd_filter, "post-translation filters over a paired corpus")
    sp.add_argument("--pairs", required=True)
    sp.add_argument("--report", required=True, help="verdict JSON-lines output")
    sp.add_argument("--k-sigma", type=float)
    sp.add_argument("--max-tokens", type=int)
    sp.add_argument("--chars-per-token", type=float)
    sp.add_argument("--token-counts", help="sidecar JSON-lines of exact token counts")
    sp.add_argument("--self-reference", action="store_true", help="also apply the self-reference filter to sources")

    sp = add("prefilter", cmd_prefilter, "drop samples that reference a target language")
    sp.add_argument("--samples", required=True)
    sp.add_argument("--out", required=True)

    sp = add("chunk", cmd_chunk, "split standard input into token-budgeted chunks")
    sp.add_argument("--budget", type=int)
    sp.add_argument("--chars-per-token", type=float)
    sp.add_argument("--delimiter", help="join chunks with this string instead of emitting JSON lines")
    return p


def _apply_overrides(cfg: RunConfig, args: argparse.Namespace) -> RunConfig:
    for key in ("k_sigma", "max_tokens", "chars_per_token"):
        value = getattr(args, key, None)
        if value is not None:
            setattr(cfg, key, value)
    return cfg.validate()


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _apply_overrides(RunConfig.load(args.config), args)
        return args.func(args, cfg)
    except LayerSwapError as e:
        err = e.to_dict()
    except OSError as e:
        err = {"code": ErrorCode.IO.name, "exit": int(ErrorCode.IO), "message": str(e)}
    except json.JSONDecodeError as e:
        err = {"code": ErrorCode.FORMAT.name, "exit": int(ErrorCode.FORMAT), "message": str(e)}
    print(json.dumps({"error": err}), file=sys.stderr)
    return err["exit"]


if __name__ == "__main__":
    sys.exit(main())
