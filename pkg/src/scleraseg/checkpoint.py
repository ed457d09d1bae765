"""Self-describing checkpoint container shared by the detector and the segmenters.

A checkpoint is a ``torch.save`` dict holding the model kind, the arguments
needed to rebuild the network, its layer table, the per-layer weight arrays
(``state_dict``) and free-form metadata (training databases, selection metric).
"""
from __future__ import annotations

from pathlib import Path

import torch
from torch import nn

from .dataset import SegmenterKind, as_kind
from .detector import DetectorConfig, FastYolo, detector_spec
from .errors import CheckpointError
from .segmenters import build_segmenter, model_spec, segnet_spec

FORMAT = "scleraseg-checkpoint"
VERSION = 1
DETECTOR = "detector"


def _spec_for(kind: str, net: nn.Module, build: dict) -> dict:
    if kind == DETECTOR:
        return detector_spec(net.cfg).to_dict()
    if kind == SegmenterKind.SEGNET.value:
        return segnet_spec(tuple(build["input_size"]), 3, build["width_divisor"]).to_dict()
    return model_spec(net).to_dict()


def save_checkpoint(path: str | Path, kind: str, net: nn.Module, build: dict,
                    meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    kind = DETECTOR if kind == DETECTOR else as_kind(kind).value
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "kind": kind,
        "build": build,
        "spec": _spec_for(kind, net, build),
        "state_dict": {k: v.detach().cpu().clone() for k, v in net.state_dict().items()},
        "meta": dict(meta or {}),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def build_from(kind: str, build: dict) -> nn.Module:
    if kind == DETECTOR:
        return FastYolo(DetectorConfig.from_dict(build))
    return build_segmenter(kind, width_divisor=build.get("width_divisor", 1),
                           input_size=tuple(build["input_size"]))


def load_checkpoint(path: str | Path) -> tuple[str, nn.Module, dict]:
    """Return ``(kind, network in eval mode, payload)``."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except (OSError, RuntimeError, EOFError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} file")
    net = build_from(payload["kind"], payload["build"])
    net.load_state_dict(payload["state_dict"])
    net.eval()
    return payload["kind"], net, payload
