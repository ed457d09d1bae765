"""Declarative layer tables and shape tracing for the four networks."""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass
from typing import TYPE_CHECKING, Sequence

from .errors import ModelSpecError

if TYPE_CHECKING:  # torch is imported lazily so layer tables stay cheap
    import torch
    from torch import nn

Shape = tuple[int, int, int]  # (width, height, channels)


@dataclass(frozen=True)
class LayerSpec:
    index: int
    kind: str  # conv, max, detection, enc, dec, up
    filters: int | None = None
    kernel: int | None = None
    stride: int | None = None
    input_shape: Shape | None = None
    output_shape: Shape | None = None

    def with_shapes(self, input_shape: Shape | None, output_shape: Shape | None) -> "LayerSpec":
        return LayerSpec(self.index, self.kind, self.filters, self.kernel, self.stride,
                         input_shape, output_shape)


@dataclass(frozen=True)
class ModelSpec:
    name: str
    layers: tuple[LayerSpec, ...]
    show_stride: bool = True

    def check_chain(self) -> None:
        shaped = [l for l in self.layers if l.output_shape is not None]
        for prev, nxt in zip(shaped, shaped[1:]):
            if prev.output_shape != nxt.input_shape:
                raise ModelSpecError(
                    f"{self.name}: layer {prev.index} outputs {prev.output_shape} "
                    f"but layer {nxt.index} expects {nxt.input_shape}")

    def to_dict(self) -> dict:
        return {"name": self.name, "show_stride": self.show_stride,
                "layers": [asdict(l) for l in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        layers = []
        for l in d["layers"]:
            l = dict(l)
            for key in ("input_shape", "output_shape"):
                if l[key] is not None:
                    l[key] = tuple(l[key])
            layers.append(LayerSpec(**l))
        return cls(d["name"], tuple(layers), d.get("show_stride", True))

    def describe(self) -> str:
        return describe(self)


def _fmt_shape(s: Shape | None) -> str:
    return "" if s is None else f"{s[0]} x {s[1]} x {s[2]}"


def _fmt_size(layer: LayerSpec, show_stride: bool) -> str:
    if layer.kernel is None:
        return ""
    size = f"{layer.kernel} x {layer.kernel}"
    if show_stride and layer.stride is not None:
        size += f" / {layer.stride}"
    return size


def describe(spec: ModelSpec) -> str:
    """Aligned text table: layer, type, filters, size, input, output."""
    header = ("layer", "type", "filters", "size", "input", "output")
    rows = [header]
    for l in spec.layers:
        rows.append((str(l.index), l.kind, "" if l.filters is None else str(l.filters),
                     _fmt_size(l, spec.show_stride), _fmt_shape(l.input_shape),
                     _fmt_shape(l.output_shape)))
    widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
    lines = [spec.name]
    for r in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
    return "\n".join(lines) + "\n"


def nchw_to_whc(t: torch.Size | Sequence[int]) -> Shape:
    _, c, h, w = t
    return int(w), int(h), int(c)


def trace(model: nn.Module, input_whc: Shape, spec: ModelSpec) -> ModelSpec:
    """Run a meta-device copy of ``model`` and fill ``spec`` with observed shapes.

    ``model.table_layers()`` must return one module per shaped row of
    ``spec``, in order. Rows without a module (the detection row) keep empty
    shapes.
    """
    import torch

    if all(p.is_meta for p in model.parameters()):
        meta = copy.copy(model).eval() if not model.training else model.eval()
    else:
        meta = copy.deepcopy(model).to("meta").eval()
    modules = list(meta.table_layers())
    shaped = [l for l in spec.layers if l.kind != "detection"]
    if len(modules) != len(shaped):
        raise ModelSpecError(f"{spec.name}: {len(modules)} modules for {len(shaped)} table rows")
    seen: dict[int, tuple[Shape, Shape]] = {}

    def recorder(index: int):
        def hook(_m, args, out):
            out = out[0] if isinstance(out, tuple) else out
            seen[index] = (nchw_to_whc(args[0].shape), nchw_to_whc(out.shape))
        return hook

    for row, mod in zip(shaped, modules):
        mod.register_forward_hook(recorder(row.index))
    w, h, c = input_whc
    with torch.no_grad():
        meta(torch.empty(1, c, h, w, device="meta"))
    layers = tuple(l.with_shapes(*seen[l.index]) if l.index in seen else l for l in spec.layers)
    return ModelSpec(spec.name, layers, spec.show_stride)
