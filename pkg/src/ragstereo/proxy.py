"""Proxy supervision: move the colour statistics of labelled synthetic pairs
towards an unlabelled real scene by global moment matching in the lαβ space.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scenes import SceneDataset

_RGB2LMS = np.array([[0.3811, 0.5783, 0.0402],
                     [0.1967, 0.7244, 0.0782],
                     [0.0241, 0.1288, 0.8444]])
_LMS2RGB = np.linalg.inv(_RGB2LMS)
_LOG2LAB = np.diag([1 / np.sqrt(3), 1 / np.sqrt(6), 1 / np.sqrt(2)]) @ np.array(
    [[1, 1, 1], [1, 1, -2], [1, -1, 0]], dtype=np.float64)
_LAB2LOG = np.linalg.inv(_LOG2LAB)
# offset keeps the logarithm finite on black pixels
LMS_OFFSET = 1.0 / 255.0
# spreads below this are rounding noise of a flat channel
FLAT_STD = 1e-12


def rgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    lms = np.asarray(rgb, dtype=np.float64) @ _RGB2LMS.T
    return np.log10(lms + LMS_OFFSET) @ _LOG2LAB.T


def lab_to_rgb(lab: np.ndarray) -> np.ndarray:
    lms = 10.0 ** (np.asarray(lab, dtype=np.float64) @ _LAB2LOG.T) - LMS_OFFSET
    return lms @ _LMS2RGB.T


@dataclass(frozen=True)
class ColorStats:
    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": [float(x) for x in self.mean], "std": [float(x) for x in self.std]}


def scene_color_stats(images) -> ColorStats:
    """Per-channel lαβ mean and standard deviation over every pixel of ``images``."""
    images = list(images)
    if not images:
        raise ValueError("colour statistics need at least one image")
    pix = np.concatenate([rgb_to_lab(im).reshape(-1, 3) for im in images])
    std = pix.std(axis=0)
    std[std < FLAT_STD] = 0.0
    return ColorStats(pix.mean(axis=0), std)


def transfer_lab(image, source: ColorStats, target: ColorStats) -> np.ndarray:
    lab = rgb_to_lab(image)
    # a flat source channel keeps unit gain; only its mean is moved
    flat = source.std <= FLAT_STD
    gain = np.where(flat, 1.0, target.std / np.where(flat, 1.0, source.std))
    return (lab - source.mean) * gain + target.mean


def color_transfer(image, source: ColorStats, target: ColorStats, clip: bool = True) -> np.ndarray:
    out = lab_to_rgb(transfer_lab(image, source, target))
    if clip:
        out = np.clip(out, 0.0, 1.0)
    return out.astype(np.asarray(image).dtype if clip else np.float64)


def transfer_pair(left, right, source: ColorStats, target: ColorStats):
    return color_transfer(left, source, target), color_transfer(right, source, target)


def mean_color(images) -> np.ndarray:
    return np.mean([np.asarray(im, dtype=np.float64).reshape(-1, 3).mean(axis=0) for im in images],
                   axis=0)


def mean_color_distance(images_a, images_b) -> float:
    return float(np.linalg.norm(mean_color(images_a) - mean_color(images_b)))


def build_proxy_dataset(synthetic: SceneDataset, real_images, name: str | None = None) -> SceneDataset:
    """Colour-transfer every synthetic pair towards the real scene; geometry is copied."""
    real_images = list(real_images)
    source = scene_color_stats(list(synthetic.left) + list(synthetic.right))
    target = scene_color_stats(real_images)
    lefts, rights = [], []
    for l, r in zip(synthetic.left, synthetic.right):
        tl, tr = transfer_pair(l, r, source, target)
        lefts.append(tl)
        rights.append(tr)
    meta = {
        "source": synthetic.name,
        "target": name,
        "source_stats": source.to_dict(),
        "target_stats": target.to_dict(),
    }
    return SceneDataset(f"{synthetic.name}->{name}" if name else f"{synthetic.name}->proxy",
                        np.stack(lefts).astype(np.float32), np.stack(rights).astype(np.float32),
                        synthetic.disparity.copy(), synthetic.mask.copy(),
                        synthetic.train_idx.copy(), synthetic.test_idx.copy(), synthetic.spec, meta)
