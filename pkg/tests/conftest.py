from pathlib import Path

import numpy as np
import pytest

from scleraseg.dataset import synthetic_eye, write_image, write_mask

HERE = Path(__file__).parent
GOLDEN = HERE / "golden"
FIXTURES = HERE / "fixtures"


def make_eye_dir(root: Path, n: int, size=(320, 240), seed: int = 0, subdir: str = "",
                 masks: bool = True) -> list[str]:
    """Write ``n`` synthetic eye images (and masks) under ``root/subdir``; return their ids."""
    rng = np.random.default_rng(seed)
    where = root / subdir
    where.mkdir(parents=True, exist_ok=True)
    ids = []
    for i in range(n):
        image, mask, _ = synthetic_eye(size[0], size[1], rng)
        write_image(where / f"eye{i:03d}.png", image)
        if masks:
            write_mask(where / f"eye{i:03d}_mask.png", mask)
        ids.append(f"{subdir}/eye{i:03d}" if subdir else f"eye{i:03d}")
    return ids


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
