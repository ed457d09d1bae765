"""Arithmetic layer tables for Fast-YOLO and SegNet.

Nothing here needs torch, so the tables can be printed and checked cheaply.
The network modules build themselves from these rows.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .modelspec import LayerSpec, ModelSpec, ModelSpecError

# YOLOv2 VOC priors, (width, height) in grid cells
VOC_ANCHORS = ((1.3221, 1.73145), (3.19275, 4.00944), (5.05587, 8.09892),
               (9.47112, 4.84053), (11.2364, 10.0071))

# (kind, filters, kernel, stride) per Table-1 row; the head row is filled from the config
FAST_YOLO_BACKBONE = (
    ("conv", 16, 3, 1), ("max", None, 2, 2),
    ("conv", 32, 3, 1), ("max", None, 2, 2),
    ("conv", 64, 3, 1), ("max", None, 2, 2),
    ("conv", 128, 3, 1), ("max", None, 2, 2),
    ("conv", 256, 3, 1), ("max", None, 2, 2),
    ("conv", 512, 3, 1), ("max", None, 2, 1),
    ("conv", 1024, 3, 1),
    ("conv", 1024, 3, 1),
)


@dataclass
class DetectorConfig:
    input_size: int = 416
    grid: int = 13
    anchors: tuple[tuple[float, float], ...] = VOC_ANCHORS
    classes: int = 1
    confidence_threshold: float = 0.25
    in_channels: int = 3
    final_filters: int | None = None
    # divides every backbone filter count; 1 reproduces the published network
    width_divisor: int = 1
    lambda_coord: float = 5.0
    lambda_noobj: float = 0.5

    def __post_init__(self):
        self.anchors = tuple((float(w), float(h)) for w, h in self.anchors)
        expected = len(self.anchors) * (5 + self.classes)
        if self.final_filters is None:
            self.final_filters = expected
        elif self.final_filters != expected:
            raise ModelSpecError(
                f"{len(self.anchors)} anchors x (5 + {self.classes} classes) = {expected} "
                f"!= final filters {self.final_filters}")
        if self.in_channels not in (1, 3):
            raise ModelSpecError("detector input must be grayscale (1) or RGB (3)")
        if self.input_size // 32 != self.grid or self.input_size % 32:
            raise ModelSpecError(f"input {self.input_size} does not produce a {self.grid}x{self.grid} grid")

    @property
    def anchor_array(self) -> np.ndarray:
        return np.asarray(self.anchors, dtype=np.float64)

    def to_dict(self) -> dict:
        return {"input_size": self.input_size, "grid": self.grid,
                "anchors": [list(a) for a in self.anchors], "classes": self.classes,
                "confidence_threshold": self.confidence_threshold,
                "in_channels": self.in_channels, "final_filters": self.final_filters,
                "width_divisor": self.width_divisor, "lambda_coord": self.lambda_coord,
                "lambda_noobj": self.lambda_noobj}

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        d = dict(d)
        d["anchors"] = tuple(tuple(a) for a in d["anchors"])
        return cls(**d)


def detector_spec(cfg: DetectorConfig) -> ModelSpec:
    """Table-1 rows with shapes propagated arithmetically."""
    rows = [(k, None if f is None else f // cfg.width_divisor, ks, s) for k, f, ks, s in FAST_YOLO_BACKBONE]
    rows.append(("conv", cfg.final_filters, 1, 1))
    size, ch = cfg.input_size, cfg.in_channels
    layers = []
    for i, (kind, filters, kernel, stride) in enumerate(rows):
        shape_in = (size, size, ch)
        if kind == "conv":
            ch = filters
        else:
            size = math.ceil(size / stride)
        layers.append(LayerSpec(i, kind, filters, kernel, stride, shape_in, (size, size, ch)))
    layers.append(LayerSpec(len(rows), "detection"))
    spec = ModelSpec("Fast-YOLO", tuple(layers))
    spec.check_chain()
    return spec


# --------------------------------------------------------------------------
# SegNet

# (kind, filters) for rows 1..36; "max"/"up" rows carry no filters
SEGNET_ROWS = (
    ("enc", 64), ("enc", 64), ("max", None),
    ("enc", 128), ("enc", 128), ("max", None),
    ("enc", 256), ("enc", 256), ("enc", 256), ("max", None),
    ("enc", 512), ("enc", 512), ("enc", 512), ("max", None),
    ("enc", 512), ("enc", 512), ("enc", 512), ("max", None),
    ("up", None), ("dec", 512), ("dec", 512), ("dec", 512),
    ("up", None), ("dec", 512), ("dec", 512), ("dec", 256),
    ("up", None), ("dec", 256), ("dec", 256), ("dec", 128),
    ("up", None), ("dec", 128), ("dec", 64),
    ("up", None), ("dec", 64), ("dec", 2),
)


def scaled(filters: int, divisor: int) -> int:
    return max(1, filters // divisor)


def segnet_spec(input_size=(320, 240), in_channels: int = 3, width_divisor: int = 1,
                classes: int = 2) -> ModelSpec:
    """Layer table with shapes propagated arithmetically (ceil-mode pooling)."""
    w, h = input_size
    ch = in_channels
    stack = []
    layers = []
    last = len(SEGNET_ROWS)
    for i, (kind, filters) in enumerate(SEGNET_ROWS, start=1):
        shape_in = (w, h, ch)
        if kind in ("enc", "dec"):
            ch = classes if i == last else scaled(filters, width_divisor)
            filters = ch
            kernel = 3
        elif kind == "max":
            stack.append((w, h))
            w, h = math.ceil(w / 2), math.ceil(h / 2)
            kernel = 2
        else:
            w, h = stack.pop()
            kernel = 2
        layers.append(LayerSpec(i, kind, filters, kernel, None, shape_in, (w, h, ch)))
    spec = ModelSpec("SegNet", tuple(layers), show_stride=False)
    spec.check_chain()
    return spec
