"""Layer Swap: transplant an inclusive window of transformer layers between checkpoints.

Swapping is a byte-level operation. Tensors inside the window are copied
verbatim from the source checkpoint, all others from the target; nothing is
decoded, so exotic dtypes and NaN payloads survive untouched.

Provenance lives in the output's ``__metadata__``:

``layerswap.target``
    label of the original (un-swapped) checkpoint
``layerswap.source``
    label of the source, or a comma-joined list when several were used
``layerswap.window``
    inclusive ranges such as ``13:22``; ``en=13:22;de=0:3`` for several sources

The record is a map from layer to source label, so swapping disjoint windows
in either order yields the same file, and swapping a window back from the
original target removes it (an empty record drops the keys entirely).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .errors import IncompatibleError, PreconditionError
from .tensorstore import (
    CheckpointHandle,
    LayerMap,
    TensorRef,
    open_checkpoint,
    write_checkpoint,
)

META_TARGET = "layerswap.target"
META_SOURCE = "layerswap.source"
META_WINDOW = "layerswap.window"
_RESERVED = set(",;=: ")


@dataclass(frozen=True)
class SwapPlan:
    target_label: str
    source_label: str
    window: tuple[int, int]
    output_name: str = ""

    def __post_init__(self) -> None:
        start, end = self.window
        if start < 0 or start > end:
            raise PreconditionError(f"invalid window {start}:{end}: need 0 <= start <= end")
        for label in (self.target_label, self.source_label):
            if not label or _RESERVED & set(label):
                raise PreconditionError(f"invalid label {label!r}: must be non-empty without ',;=: '")
        if not self.output_name:
            object.__setattr__(self, "output_name", default_output_name(self.target_label, self.source_label, self.window))

    @property
    def layers(self) -> range:
        return range(self.window[0], self.window[1] + 1)

    def check_range(self, num_layers: int) -> None:
        if self.window[1] > num_layers - 1:
            raise PreconditionError(
                f"window {self.window[0]}:{self.window[1]} out of range for {num_layers} layers"
            )

    def to_dict(self) -> dict:
        return {
            "target_label": self.target_label,
            "source_label": self.source_label,
            "window": list(self.window),
            "output_name": self.output_name,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SwapPlan":
        try:
            start, end = d["window"]
            return cls(str(d["target_label"]), str(d["source_label"]), (int(start), int(end)), str(d.get("output_name", "")))
        except (KeyError, TypeError, ValueError) as e:
            raise PreconditionError(f"malformed swap plan {dict(d)!r}: {e}") from None


def default_output_name(target_label: str, source_label: str, window: tuple[int, int]) -> str:
    return f"{target_label}-swap-{source_label}-L{window[0]}-L{window[1]}"


def parse_window(text: str) -> tuple[int, int]:
    """``"13:22"`` -> ``(13, 22)``; both ends inclusive."""
    try:
        a, b = text.split(":")
        start, end = int(a), int(b)
    except ValueError:
        raise PreconditionError(f"window must look like START:END, got {text!r}") from None
    if start < 0 or start > end:
        raise PreconditionError(f"invalid window {text!r}: need 0 <= start <= end")
    return start, end


@dataclass
class CompatReport:
    compatible: bool
    mismatches: list[tuple[str, str]] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"compatible": self.compatible, "mismatches": [list(m) for m in self.mismatches]}


def validate_compat(target: CheckpointHandle, source: CheckpointHandle) -> CompatReport:
    """Compare tensor names, shapes and dtypes of two headers."""
    mismatches: list[tuple[str, str]] = []
    for name in sorted(set(target.tensors) | set(source.tensors)):
        t, s = target.tensors.get(name), source.tensors.get(name)
        if t is None or s is None:
            mismatches.append((name, "missing"))
        elif t.shape != s.shape:
            mismatches.append((name, "shape"))
        elif t.dtype != s.dtype:
            mismatches.append((name, "dtype"))
    return CompatReport(not mismatches, mismatches)


def _ranges(layers: Sequence[int]) -> list[tuple[int, int]]:
    out: list[tuple[int, int]] = []
    for i in sorted(layers):
        if out and out[-1][1] == i - 1:
            out[-1] = (out[-1][0], i)
        else:
            out.append((i, i))
    return out


def _format_ranges(layers: Sequence[int]) -> str:
    return ",".join(f"{a}:{b}" for a, b in _ranges(layers))


def _parse_ranges(text: str) -> list[int]:
    layers: list[int] = []
    for part in text.split(","):
        a, b = parse_window(part)
        layers.extend(range(a, b + 1))
    return layers


def read_provenance(metadata: Mapping[str, str]) -> tuple[str | None, dict[int, str]]:
    """Return ``(original target label, {layer: source label})`` from swap metadata."""
    if META_TARGET not in metadata:
        return None, {}
    source = metadata.get(META_SOURCE, "")
    window = metadata.get(META_WINDOW, "")
    assign: dict[int, str] = {}
    try:
        if "=" in window:
            for part in window.split(";"):
                label, ranges = part.split("=", 1)
                for i in _parse_ranges(ranges):
                    assign[i] = label
        elif window:
            for i in _parse_ranges(window):
                assign[i] = source
    except (ValueError, PreconditionError):
        raise PreconditionError(f"unreadable swap provenance: source={source!r} window={window!r}") from None
    return metadata[META_TARGET], assign


def swap_metadata(metadata: Mapping[str, str], plan: SwapPlan) -> dict[str, str]:
    """Metadata for the output of applying ``plan`` to a target carrying ``metadata``."""
    root, assign = read_provenance(metadata)
    root = root or plan.target_label
    for i in plan.layers:
        if plan.source_label == root:
            assign.pop(i, None)
        else:
            assign[i] = plan.source_label
    out = {k: v for k, v in metadata.items() if not k.startswith("layerswap.")}
    if not assign:
        return out
    by_source: dict[str, list[int]] = {}
    for i, label in assign.items():
        by_source.setdefault(label, []).append(i)
    out[META_TARGET] = root
    out[META_SOURCE] = ",".join(sorted(by_source))
    if len(by_source) == 1:
        out[META_WINDOW] = _format_ranges(next(iter(by_source.values())))
    else:
        out[META_WINDOW] = ";".join(f"{label}={_format_ranges(by_source[label])}" for label in sorted(by_source))
    return out


def swap_layers(
    target: CheckpointHandle,
    source: CheckpointHandle,
    plan: SwapPlan,
    layer_map: LayerMap,
    out_path: str | os.PathLike,
) -> CheckpointHandle:
    """Write the hybrid checkpoint described by ``plan`` and return its handle.

    Tensors of ``Layer(i)`` for ``i`` in the window come from ``source``;
    every other tensor, including ``pre`` and ``post``, comes from ``target``.
    """
    report = validate_compat(target, source)
    if not report.compatible:
        head = ", ".join(f"{n} ({k})" for n, k in report.mismatches[:5])
        raise IncompatibleError(f"{len(report.mismatches)} mismatched tensors: {head}")
    plan.check_range(layer_map.num_layers)
    unmapped = sorted(set(target.tensors) - set(layer_map.layer_of))
    if unmapped:
        raise PreconditionError(f"layer map does not cover tensors {unmapped[:3]}")

    window = set(plan.layers)
    entries = []
    for name, meta in target.tensors.items():
        group = layer_map.layer_of[name]
        donor = source if isinstance(group, int) and group in window else target
        entries.append((name, meta.dtype, meta.shape, TensorRef(donor, name)))
    write_checkpoint(entries, swap_metadata(target.metadata, plan), out_path)
    return open_checkpoint(out_path)


def plan_sweep(
    num_layers: int,
    width: int,
    starts: Sequence[int] | None = None,
    stride: int | None = None,
    target_label: str = "target",
    source_label: str = "source",
) -> list[SwapPlan]:
    """Contiguous windows of ``width`` layers.

    With ``stride`` the starts are ``0, stride, 2*stride, ...``; if the last
    of these does not reach the final layer, one more window flush with the
    end of the stack is appended.
    """
    if not 1 <= width <= num_layers:
        raise PreconditionError(f"width {width} out of range 1..{num_layers}")
    if starts is None:
        if stride is None:
            raise PreconditionError("give explicit starts or a stride")
        if stride < 1:
            raise PreconditionError(f"stride must be >= 1, got {stride}")
        starts = list(range(0, num_layers - width + 1, stride))
        if starts[-1] + width - 1 < num_layers - 1:
            starts.append(num_layers - width)
    plans = []
    for s in starts:
        plan = SwapPlan(target_label, source_label, (int(s), int(s) + width - 1))
        plan.check_range(num_layers)
        plans.append(plan)
    return plans
