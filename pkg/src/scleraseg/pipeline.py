"""Two-stage inference: periocular detection, ROI crop, segmentation, mapping back."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
from torch import nn

from .dataset import (DEFAULT_PADDING, INPUT_SIZES, RoiTransform, SegmenterKind, as_kind,
                      crop_mask, crop_roi, map_mask_to_original, resize_for)
from .detector import BoundingBox, FastYolo, detect, select_periocular
from .segmenters import binarize, segment

log = logging.getLogger(__name__)


class NetworkSegmenter:
    def __init__(self, kind: SegmenterKind | str, net: nn.Module):
        self.kind = as_kind(kind)
        self.net = net

    def __call__(self, image: np.ndarray, reference: np.ndarray | None = None) -> np.ndarray:
        return segment(self.kind, self.net, image)


class StubSegmenter:
    """Test double that ignores the image.

    ``gt-echo`` returns the (resized) ground truth as probabilities,
    ``background`` returns all zeros.
    """

    MODES = ("gt-echo", "background")

    def __init__(self, kind: SegmenterKind | str, mode: str = "gt-echo"):
        if mode not in self.MODES:
            raise ValueError(f"unknown stub mode {mode!r}")
        self.kind = as_kind(kind)
        self.mode = mode

    def __call__(self, image: np.ndarray, reference: np.ndarray | None = None) -> np.ndarray:
        h, w = image.shape[:2]
        if self.mode == "background":
            return np.zeros((h, w))
        if reference is None:
            raise ValueError("gt-echo stub needs the ground truth")
        ref = np.asarray(reference, dtype=bool)
        return (ref[..., 0] if ref.ndim == 3 else ref).astype(np.float64)


@dataclass
class PipelineResult:
    mask: np.ndarray  # original resolution
    network_mask: np.ndarray
    probability: np.ndarray
    transform: RoiTransform
    box: BoundingBox | None
    network_gt: np.ndarray | None = None


@dataclass
class Pipeline:
    segmenter: NetworkSegmenter | StubSegmenter
    detector: FastYolo | None = None
    padding: tuple[float, float] = DEFAULT_PADDING
    threshold: float = 0.5
    metrics_at: str = "original"
    confidence_threshold: float | None = None  # None keeps the detector's own setting

    @property
    def kind(self) -> SegmenterKind:
        return self.segmenter.kind

    def locate(self, image: np.ndarray) -> BoundingBox | None:
        if self.detector is None:
            return None
        return select_periocular(detect(self.detector, image, self.confidence_threshold))

    def run(self, image: np.ndarray, gt: np.ndarray | None = None) -> PipelineResult:
        h, w = image.shape[:2]
        box = self.locate(image)
        roi = crop_roi(image, box.clamped(), self.padding) if box is not None else None
        if roi is None:
            if self.detector is not None:
                log.info("no periocular region detected; segmenting the full image")
            crop, t = image, RoiTransform.full_image((w, h))
        else:
            crop, t = roi
        gt_crop = crop_mask(gt, t) if gt is not None else None
        net_image, net_gt = resize_for(self.kind, crop, gt_crop)
        t = replace(t, resized_to=INPUT_SIZES[self.kind])
        prob = self.segmenter(net_image, net_gt)
        binary = binarize(prob, self.threshold)
        full = map_mask_to_original(binary, t, (w, h))
        return PipelineResult(full, binary, prob, t, box,
                              None if net_gt is None else net_gt[..., 0])

    def __call__(self, image: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Predictor interface for :func:`scleraseg.evaluation.evaluate`."""
        result = self.run(image, gt)
        if self.metrics_at == "network":
            return result.network_mask, result.network_gt
        if self.metrics_at != "original":
            raise ValueError(f"metrics_at must be 'original' or 'network', not {self.metrics_at!r}")
        return result.mask, np.asarray(gt, dtype=bool)
