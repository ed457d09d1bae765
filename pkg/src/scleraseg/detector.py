"""Single-class periocular detector (Fast-YOLO) with grid decoding and argmax selection."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import nn

from . import kernels
from .architectures import DetectorConfig, detector_spec
from .modelspec import ModelSpec, ModelSpecError, trace


@dataclass(frozen=True)
class BoundingBox:
    cx: float
    cy: float
    w: float
    h: float
    confidence: float = 1.0

    def clamped(self) -> "BoundingBox":
        x0, y0 = max(0.0, self.cx - self.w / 2), max(0.0, self.cy - self.h / 2)
        x1, y1 = min(1.0, self.cx + self.w / 2), min(1.0, self.cy + self.h / 2)
        return BoundingBox((x0 + x1) / 2, (y0 + y1) / 2, max(0.0, x1 - x0), max(0.0, y1 - y0),
                           self.confidence)

    def corners(self) -> tuple[float, float, float, float]:
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)


@dataclass(frozen=True)
class Detection(BoundingBox):
    objectness: float = 0.0
    class_score: float = 0.0
    row: int = 0
    col: int = 0
    anchor: int = 0

    def box(self) -> BoundingBox:
        return BoundingBox(self.cx, self.cy, self.w, self.h, self.confidence)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    ax0, ay0, ax1, ay1 = a.corners()
    bx0, by0, bx1, by1 = b.corners()
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a.w * a.h + b.w * b.h - inter
    return inter / union if union > 0 else 0.0


# --------------------------------------------------------------------------
# architecture

class _SamePool(nn.Module):
    """2x2 max-pool with stride 1 that keeps the spatial size (darknet semantics)."""

    def forward(self, x):
        return F.max_pool2d(F.pad(x, (0, 1, 0, 1), mode="replicate"), 2, 1)


def _conv_block(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, cout, 3, 1, 1, bias=False), nn.BatchNorm2d(cout),
                         nn.LeakyReLU(0.1))


class FastYolo(nn.Module):
    def __init__(self, cfg: DetectorConfig):
        super().__init__()
        self.cfg = cfg
        spec = detector_spec(cfg)
        layers = []
        cin = cfg.in_channels
        for row in spec.layers:
            if row.kind == "conv" and row.kernel == 3:
                layers.append(_conv_block(cin, row.filters))
                cin = row.filters
            elif row.kind == "conv":
                layers.append(nn.Conv2d(cin, row.filters, 1))
            elif row.kind == "max":
                layers.append(nn.MaxPool2d(2, 2, ceil_mode=True) if row.stride == 2 else _SamePool())
        self.layers = nn.ModuleList(layers)
        for m in self.modules():
            if isinstance(m, nn.Conv2d) and not m.weight.is_meta:
                nn.init.kaiming_normal_(m.weight, a=0.1, nonlinearity="leaky_relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    def table_layers(self):
        return list(self.layers)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x


def build_fast_yolo(cfg: DetectorConfig | None = None, seed: int | None = None
                    ) -> tuple[ModelSpec, FastYolo]:
    cfg = cfg or DetectorConfig()
    if seed is not None:
        torch.manual_seed(seed)
    net = FastYolo(cfg)
    spec = trace(net, (cfg.input_size, cfg.input_size, cfg.in_channels), detector_spec(cfg))
    if spec != detector_spec(cfg):
        raise ModelSpecError("Fast-YOLO module does not reproduce its layer table")
    return spec, net


def prepare_input(image: np.ndarray, cfg: DetectorConfig) -> torch.Tensor:
    """uint8 ``(H, W, 3)`` -> ``(1, C, S, S)`` float tensor in [0, 1]."""
    im = Image.fromarray(np.asarray(image, dtype=np.uint8))
    if cfg.in_channels == 1:
        im = im.convert("L")
    im = im.resize((cfg.input_size, cfg.input_size), Image.BILINEAR)
    arr = np.asarray(im, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = arr[..., None]
    return torch.from_numpy(arr.transpose(2, 0, 1).copy()).unsqueeze(0)


def head_to_grid(out: torch.Tensor) -> np.ndarray:
    """``(1, A*(5+C), H, W)`` network output -> channel-last ``(H, W, A*(5+C))``."""
    if out.dim() == 4:
        if out.shape[0] != 1:
            raise ValueError("head_to_grid expects a single image")
        out = out[0]
    return out.detach().cpu().double().numpy().transpose(1, 2, 0)


# --------------------------------------------------------------------------
# decoding and selection

def decode_predictions(raw: np.ndarray, cfg: DetectorConfig,
                       threshold: float | None = None) -> list[Detection]:
    """Decode a channel-last head; keep boxes with objectness * class >= threshold."""
    raw = np.asarray(raw, dtype=np.float64)
    expected = (cfg.grid, cfg.grid, cfg.final_filters)
    if raw.shape != expected:
        raise ValueError(f"raw head has shape {raw.shape}, expected {expected}")
    thr = cfg.confidence_threshold if threshold is None else threshold
    rows = kernels.decode_grid(raw, cfg.anchor_array, cfg.classes, thr)
    return [Detection(float(r[0]), float(r[1]), float(r[2]), float(r[3]), float(r[4]),
                      float(r[5]), float(r[6]), int(r[7]), int(r[8]), int(r[9])) for r in rows]


def select_periocular(detections) -> BoundingBox | None:
    """Highest-confidence detection; the earliest wins an exact tie."""
    best = None
    for d in detections:
        if best is None or d.confidence > best.confidence:
            best = d
    if best is None:
        return None
    return BoundingBox(best.cx, best.cy, best.w, best.h, best.confidence)


def detect(net: FastYolo, image: np.ndarray, threshold: float | None = None) -> list[Detection]:
    net.eval()
    with torch.no_grad():
        out = net(prepare_input(image, net.cfg))
    return decode_predictions(head_to_grid(out), net.cfg, threshold)


# --------------------------------------------------------------------------
# encoding and loss

def _shape_iou(w1, h1, w2, h2):
    inter = min(w1, w2) * min(h1, h2)
    return inter / (w1 * h1 + w2 * h2 - inter)


@dataclass(frozen=True)
class EncodedBox:
    row: int
    col: int
    anchor: int
    offset_x: float  # in (0, 1) within the cell
    offset_y: float
    tw: float  # log(width / anchor width)
    th: float


def encode_box(box: BoundingBox, cfg: DetectorConfig) -> EncodedBox:
    """Cell holding the box centre and the anchor with the best shape IoU."""
    g = cfg.grid
    col = min(int(box.cx * g), g - 1)
    row = min(int(box.cy * g), g - 1)
    gw, gh = box.w * g, box.h * g
    ious = [_shape_iou(gw, gh, aw, ah) for aw, ah in cfg.anchors]
    a = int(np.argmax(ious))
    aw, ah = cfg.anchors[a]
    return EncodedBox(row, col, a, box.cx * g - col, box.cy * g - row,
                      math.log(gw / aw), math.log(gh / ah))


def _logit(p: float, eps: float = 1e-12) -> float:
    p = min(max(p, eps), 1 - eps)
    return math.log(p / (1 - p))


def encode_raw(box: BoundingBox, cfg: DetectorConfig, saturation: float = 30.0) -> np.ndarray:
    """Channel-last head that decodes to exactly ``box`` in its responsible slot."""
    e = encode_box(box, cfg)
    stride = 5 + cfg.classes
    raw = np.zeros((cfg.grid, cfg.grid, cfg.final_filters))
    raw[..., 4::stride] = -saturation
    base = e.anchor * stride
    raw[e.row, e.col, base:base + 4] = (_logit(e.offset_x), _logit(e.offset_y), e.tw, e.th)
    raw[e.row, e.col, base + 4] = saturation
    raw[e.row, e.col, base + 5:base + stride] = saturation
    return raw


def detector_loss(pred: torch.Tensor, boxes, cfg: DetectorConfig,
                  components: bool = False):
    """YOLOv2-style sum of squares, averaged over images.

    ``pred`` is the raw ``(N, A*(5+C), H, W)`` head; ``boxes`` holds one
    ``(cx, cy, w, h)`` normalized ground-truth box per image.
    """
    n, _, gh, gw = pred.shape
    na, stride = len(cfg.anchors), 5 + cfg.classes
    p = pred.view(n, na, stride, gh, gw)
    obj = torch.sigmoid(p[:, :, 4])
    responsible = torch.zeros_like(obj, dtype=torch.bool)
    coord = pred.new_zeros(())
    obj_term = pred.new_zeros(())
    cls_term = pred.new_zeros(())
    for i, b in enumerate(boxes):
        b = b if isinstance(b, BoundingBox) else BoundingBox(*[float(v) for v in b[:4]])
        e = encode_box(b, cfg)
        responsible[i, e.anchor, e.row, e.col] = True
        t = p[i, e.anchor, :, e.row, e.col]
        target = pred.new_tensor([e.offset_x, e.offset_y, e.tw, e.th])
        pred_xywh = torch.stack([torch.sigmoid(t[0]), torch.sigmoid(t[1]), t[2], t[3]])
        coord = coord + ((pred_xywh - target) ** 2).sum()
        obj_term = obj_term + (obj[i, e.anchor, e.row, e.col] - 1.0) ** 2
        cls_term = cls_term + ((torch.sigmoid(t[5:]) - 1.0) ** 2).sum()
    noobj = (obj[~responsible] ** 2).sum()
    parts = {
        "coord": cfg.lambda_coord * coord / n,
        "obj": obj_term / n,
        "noobj": cfg.lambda_noobj * noobj / n,
        "cls": cls_term / n,
    }
    total = parts["coord"] + parts["obj"] + parts["noobj"] + parts["cls"]
    return (total, parts) if components else total


# --------------------------------------------------------------------------
# box annotation file: "id cx cy w h" per line, normalized

def read_boxes(path) -> dict[str, BoundingBox]:
    boxes = {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            sid, cx, cy, w, h = line.split()
            boxes[sid] = BoundingBox(float(cx), float(cy), float(w), float(h))
    return boxes


def write_boxes(path, boxes: dict[str, BoundingBox]) -> None:
    with open(path, "w") as fh:
        fh.write("# id cx cy w h (normalized)\n")
        for sid in sorted(boxes):
            b = boxes[sid]
            fh.write(f"{sid} {b.cx:.6f} {b.cy:.6f} {b.w:.6f} {b.h:.6f}\n")
