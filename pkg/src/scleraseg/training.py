"""Losses, optimisation loops and best-on-validation checkpointing."""
from __future__ import annotations

import contextlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import DETECTOR, save_checkpoint
from .dataset import (DEFAULT_PADDING, INPUT_SIZES, DatasetError, ImageSample, RoiTransform,
                      as_kind, crop_mask, crop_roi, read_image, read_mask, resize_for, resolve)
from .detector import (BoundingBox, DetectorConfig, FastYolo, decode_predictions,
                       detector_loss, head_to_grid, iou, prepare_input, select_periocular)
from .errors import NumericalError
from .evaluation import metrics, pixel_counts
from .segmenters import (binarize, build_segmenter, images_to_tensor,
                         masks_to_target, segment_batch)

log = logging.getLogger(__name__)

KINDS = (DETECTOR, "fcn", "segnet", "gan")


@dataclass
class TrainConfig:
    kind: str
    epochs: int = 50
    batch_size: int = 4
    learning_rate: float | None = None
    seed: int = 0
    lambda_l1: float = 100.0
    checkpoint_dir: Path = Path("checkpoints")
    select_on: str = "f_score"
    width_divisor: int = 1
    sclera_weight: float | None = None
    grad_clip: float | None = 10.0
    deterministic: bool = True
    threshold: float = 0.5
    train_db: str = ""
    stop_at: float | None = None  # end early once the validation metric reaches this

    def __post_init__(self):
        if self.kind != DETECTOR:
            self.kind = as_kind(self.kind).value
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lambda_l1 < 0:
            raise ValueError("lambda_l1 must be >= 0")
        self.checkpoint_dir = Path(self.checkpoint_dir)

    @property
    def lr(self) -> float:
        if self.learning_rate is not None:
            return self.learning_rate
        return 1e-3 if self.kind == DETECTOR else 1e-4


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_metric: float
    wall_time: float


@dataclass
class TrainLog:
    metric: str = "f_score"
    entries: list[EpochRecord] = field(default_factory=list)

    def append(self, rec: EpochRecord) -> None:
        if self.entries and rec.epoch <= self.entries[-1].epoch:
            raise ValueError("train log is append-only in epoch order")
        self.entries.append(rec)

    def __len__(self) -> int:
        return len(self.entries)

    def best(self) -> EpochRecord:
        # earliest epoch wins ties, matching the strict-improvement save rule
        return max(self.entries, key=lambda r: (r.val_metric, -r.epoch))

    def to_jsonl(self) -> str:
        return "".join(json.dumps({"metric": self.metric, **asdict(r)}) + "\n" for r in self.entries)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def read(cls, path: str | Path) -> "TrainLog":
        log_ = cls()
        for line in Path(path).read_text().splitlines():
            if line.strip():
                d = json.loads(line)
                log_.metric = d.pop("metric", log_.metric)
                log_.append(EpochRecord(**d))
        return log_


@dataclass
class TrainResult:
    checkpoint: Path
    log: TrainLog
    best_metric: float
    net: nn.Module


# --------------------------------------------------------------------------
# losses

def segmentation_loss(logits: torch.Tensor, gt: torch.Tensor,
                      sclera_weight: float | None = None) -> torch.Tensor:
    """Mean per-pixel two-class cross-entropy; ``logits`` is ``(N, 2, H, W)``."""
    if logits.dim() != 4 or logits.shape[1] != 2:
        raise ValueError(f"expected (N, 2, H, W) logits, got {tuple(logits.shape)}")
    if gt.shape != (logits.shape[0],) + tuple(logits.shape[2:]):
        raise ValueError(f"ground truth {tuple(gt.shape)} does not match logits {tuple(logits.shape)}")
    weight = None
    if sclera_weight is not None:
        weight = logits.new_tensor([1.0, sclera_weight])
    return F.cross_entropy(logits, gt.long(), weight=weight)


class GanLosses(NamedTuple):
    g_loss: float
    d_loss: float
    l1: float
    adversarial: float


def gan_step(generator: nn.Module, discriminator: nn.Module, opt_g, opt_d,
             image: torch.Tensor, gt_mask: torch.Tensor, lambda_l1: float = 100.0,
             grad_clip: float | None = None) -> GanLosses:
    """One discriminator update followed by one generator update.

    The discriminator sees (image, ground truth) as real and (image, G(image))
    as fake; its loss is the sum of both binary cross-entropies. The generator
    minimises its adversarial loss plus ``lambda_l1`` times the L1 distance to
    the ground truth.
    """
    fake = generator(image)

    opt_d.zero_grad()
    real_logits = discriminator(image, gt_mask)
    fake_logits = discriminator(image, fake.detach())
    d_loss = (F.binary_cross_entropy_with_logits(real_logits, torch.ones_like(real_logits))
              + F.binary_cross_entropy_with_logits(fake_logits, torch.zeros_like(fake_logits)))
    d_loss.backward()
    _clip(discriminator, grad_clip)
    opt_d.step()

    opt_g.zero_grad()
    fake_logits = discriminator(image, fake)
    adversarial = F.binary_cross_entropy_with_logits(fake_logits, torch.ones_like(fake_logits))
    l1 = F.l1_loss(fake, gt_mask)
    g_loss = adversarial + lambda_l1 * l1 if lambda_l1 else adversarial
    g_loss.backward()
    _clip(generator, grad_clip)
    opt_g.step()
    return GanLosses(g_loss.item(), d_loss.item(), l1.item(), adversarial.item())


def _clip(net: nn.Module, max_norm: float | None) -> None:
    if max_norm is not None:
        nn.utils.clip_grad_norm_(net.parameters(), max_norm)


def _check_finite(value: float, what: str, epoch: int) -> None:
    if not math.isfinite(value):
        raise NumericalError(f"non-finite {what} ({value}) at epoch {epoch}")


# --------------------------------------------------------------------------
# data

@dataclass
class SegmentationSet:
    ids: list[str]
    images: np.ndarray  # (N, H, W, 3) uint8 at network resolution
    masks: np.ndarray  # (N, H, W) bool at network resolution

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class DetectionSet:
    ids: list[str]
    inputs: torch.Tensor  # (N, C, S, S)
    boxes: list[BoundingBox]

    def __len__(self) -> int:
        return len(self.ids)


def prepare_segmentation_set(root, samples: Sequence[ImageSample], kind,
                             boxes: dict[str, BoundingBox] | None = None,
                             padding=DEFAULT_PADDING) -> SegmentationSet:
    """Crop each sample around its box (full image when absent) and resize for ``kind``."""
    kind = as_kind(kind)
    ids, images, masks = [], [], []
    for s in samples:
        if s.mask_path is None:
            raise DatasetError(f"training sample {s.id} has no mask")
        image_path, mask_path = resolve(root, s)
        image, mask = read_image(image_path), read_mask(mask_path)
        box = (boxes or {}).get(s.id)
        roi = crop_roi(image, box, padding) if box is not None else None
        if roi is None:
            crop, t = image, RoiTransform.full_image(s.original_size)
        else:
            crop, t = roi
        img, m = resize_for(kind, crop, crop_mask(mask, t))
        ids.append(s.id)
        images.append(img)
        masks.append(m[..., 0])
    return SegmentationSet(ids, np.stack(images) if images else np.zeros((0, 1, 1, 3), np.uint8),
                           np.stack(masks) if masks else np.zeros((0, 1, 1), bool))


def prepare_detection_set(root, samples: Sequence[ImageSample], boxes: dict[str, BoundingBox],
                          cfg: DetectorConfig) -> DetectionSet:
    ids, inputs, out_boxes = [], [], []
    for s in samples:
        if s.id not in boxes:
            log.warning("excluding %s from detector training: no box annotation", s.id)
            continue
        image_path, _ = resolve(root, s)
        ids.append(s.id)
        inputs.append(prepare_input(read_image(image_path), cfg))
        out_boxes.append(boxes[s.id])
    tensor = torch.cat(inputs) if inputs else torch.zeros(0, cfg.in_channels, cfg.input_size,
                                                          cfg.input_size)
    return DetectionSet(ids, tensor, out_boxes)


# --------------------------------------------------------------------------
# validation metrics

def validation_f_score(kind, net: nn.Module, data: SegmentationSet, threshold: float = 0.5,
                       batch_size: int = 8) -> float:
    scores = []
    for start in range(0, len(data), batch_size):
        prob = segment_batch(kind, net, data.images[start:start + batch_size])
        for p, gt in zip(prob, data.masks[start:start + batch_size]):
            scores.append(metrics(pixel_counts(binarize(p, threshold), gt)).f_score)
    return float(np.mean(scores))


def validation_iou(net: FastYolo, data: DetectionSet) -> float:
    net.eval()
    scores = []
    with torch.no_grad():
        for x, box in zip(data.inputs, data.boxes):
            raw = head_to_grid(net(x[None]))
            best = select_periocular(decode_predictions(raw, net.cfg))
            scores.append(0.0 if best is None else iou(best, box))
    return float(np.mean(scores))


# --------------------------------------------------------------------------
# loops

@contextlib.contextmanager
def _deterministic(enabled: bool):
    prev = torch.are_deterministic_algorithms_enabled()
    torch.use_deterministic_algorithms(enabled)
    try:
        yield
    finally:
        torch.use_deterministic_algorithms(prev)


def _batches(n: int, batch_size: int, gen: torch.Generator):
    order = torch.randperm(n, generator=gen).tolist()
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


def build_network(config: TrainConfig, detector_cfg: DetectorConfig | None = None,
                  input_size=None) -> tuple[nn.Module, dict]:
    torch.manual_seed(config.seed)
    if config.kind == DETECTOR:
        cfg = detector_cfg or DetectorConfig(width_divisor=config.width_divisor)
        return FastYolo(cfg), cfg.to_dict()
    kind = as_kind(config.kind)
    size = tuple(input_size or INPUT_SIZES[kind])
    net = build_segmenter(kind, config.width_divisor, size)
    return net, {"width_divisor": config.width_divisor, "input_size": list(size)}


def train(config: TrainConfig, train_set, val_set, detector_cfg: DetectorConfig | None = None,
          meta: dict | None = None) -> TrainResult:
    """Train ``config.kind`` and keep the checkpoint with the best validation metric.

    Segmenters are selected on mean validation F-score, the detector on mean
    IoU of the selected box.
    """
    if len(train_set) == 0:
        raise DatasetError("training split is empty")
    if len(val_set) == 0:
        raise DatasetError("validation split is empty")
    config.checkpoint_dir.mkdir(parents=True, exist_ok=True)
    input_size = None
    if config.kind != DETECTOR:
        input_size = (train_set.images.shape[2], train_set.images.shape[1])
    net, build = build_network(config, detector_cfg, input_size)
    metric = "iou" if config.kind == DETECTOR else config.select_on
    tlog = TrainLog(metric)
    ckpt = config.checkpoint_dir / f"{config.kind}_best.pt"
    best = -math.inf
    gen = torch.Generator().manual_seed(config.seed)
    meta = {"train_db": config.train_db, **(meta or {})}

    with _deterministic(config.deterministic):
        if config.kind == "gan":
            pair = net
            opt_g = torch.optim.Adam(pair.generator.parameters(), lr=config.lr, betas=(0.5, 0.999))
            opt_d = torch.optim.Adam(pair.discriminator.parameters(), lr=config.lr, betas=(0.5, 0.999))
        else:
            opt = torch.optim.Adam(net.parameters(), lr=config.lr)
        for epoch in range(1, config.epochs + 1):
            t0 = time.perf_counter()
            net.train()
            losses = []
            for idx in _batches(len(train_set), config.batch_size, gen):
                if config.kind == DETECTOR:
                    opt.zero_grad()
                    loss = detector_loss(net(train_set.inputs[idx]),
                                         [train_set.boxes[i] for i in idx], net.cfg)
                    loss.backward()
                    _clip(net, config.grad_clip)
                    opt.step()
                    value = loss.item()
                elif config.kind == "gan":
                    x = images_to_tensor("gan", train_set.images[idx])
                    y = masks_to_target("gan", train_set.masks[idx])
                    step = gan_step(pair.generator, pair.discriminator, opt_g, opt_d, x, y,
                                    config.lambda_l1, config.grad_clip)
                    value = step.g_loss
                    _check_finite(step.d_loss, "discriminator loss", epoch)
                else:
                    x = images_to_tensor(config.kind, train_set.images[idx])
                    y = masks_to_target(config.kind, train_set.masks[idx])
                    opt.zero_grad()
                    loss = segmentation_loss(net(x), y, config.sclera_weight)
                    loss.backward()
                    _clip(net, config.grad_clip)
                    opt.step()
                    value = loss.item()
                _check_finite(value, "training loss", epoch)
                losses.append(value)
            if config.kind == DETECTOR:
                score = validation_iou(net, val_set)
            else:
                score = validation_f_score(config.kind, net, val_set, config.threshold)
            rec = EpochRecord(epoch, float(np.mean(losses)), score, time.perf_counter() - t0)
            tlog.append(rec)
            log.info("epoch %d loss %.5f val %s %.4f", epoch, rec.train_loss, metric, score)
            if score > best:
                best = score
                save_checkpoint(ckpt, config.kind, net, build,
                                {**meta, "epoch": epoch, "metric": metric, "val_metric": score})
            if config.stop_at is not None and score >= config.stop_at:
                log.info("validation %s reached %.4f; stopping", metric, score)
                break
    tlog.write(config.checkpoint_dir / f"{config.kind}_train_log.jsonl")
    return TrainResult(ckpt, tlog, best, net)
