"""Synthetic stereo scenes built from fronto-parallel textured layers.

Each layer owns a texture defined in right-image coordinates. The right view
shows, per pixel, the nearest layer covering it; the left view samples the
nearest layer's texture at ``x - d``. Wherever both interpolation taps of a
left pixel land on that same layer in the right view, warping the right image
by the ground truth reproduces the left image exactly; all other pixels are
marked invalid (occluded or out of view).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter


@dataclass(frozen=True)
class SceneSpec:
    name: str
    tint: tuple = (1.0, 1.0, 1.0)
    brightness: float = 0.0
    noise: float = 0.0
    texture_density: float = 0.3
    disp_min: float = 2.0
    disp_max: float = 12.0
    layers: int = 3
    height: int = 48
    width: int = 48
    pairs: int = 20
    test_pairs: int = 4
    seed: int = 0
    max_disparity: float = 24.0
    blur: float = 0.8
    half_integer: bool = True

    def validate(self):
        if not 0 <= self.disp_min < self.disp_max <= self.max_disparity:
            raise ValueError(f"scene {self.name!r}: need 0 <= disp_min < disp_max <= "
                             f"max_disparity, got {self.disp_min}, {self.disp_max}, "
                             f"{self.max_disparity}")
        if self.pairs < 2:
            raise ValueError(f"scene {self.name!r}: need at least 2 pairs, got {self.pairs}")
        if not 1 <= self.test_pairs < self.pairs:
            raise ValueError(f"scene {self.name!r}: test_pairs must be in [1, pairs)")
        if len(self.tint) != 3:
            raise ValueError(f"scene {self.name!r}: tint needs 3 gains")
        if self.layers < 1:
            raise ValueError(f"scene {self.name!r}: need at least one layer")
        if self.height < 3 or self.width <= self.disp_max + 2:
            raise ValueError(f"scene {self.name!r}: image too small for its disparities")
        if not 0.0 < self.texture_density <= 1.0:
            raise ValueError(f"scene {self.name!r}: texture_density must be in (0, 1]")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["tint"] = list(self.tint)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        d = dict(d)
        if "tint" in d:
            d["tint"] = tuple(float(x) for x in d["tint"])
        return cls(**d)


@dataclass
class SceneDataset:
    name: str
    left: np.ndarray        # N x H x W x 3, float32 in [0, 1]
    right: np.ndarray
    disparity: np.ndarray   # N x H x W, float32, pixels
    mask: np.ndarray        # N x H x W, bool
    train_idx: np.ndarray
    test_idx: np.ndarray
    spec: SceneSpec | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.left)

    def subset(self, idx) -> dict:
        idx = np.asarray(idx)
        return {
            "left": self.left[idx],
            "right": self.right[idx],
            "disparity": self.disparity[idx],
            "mask": self.mask[idx],
        }

    def train_split(self) -> dict:
        return self.subset(self.train_idx)

    def test_split(self) -> dict:
        return self.subset(self.test_idx)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for a in (self.left, self.right, self.disparity, self.mask):
            h.update(np.ascontiguousarray(a).tobytes())
        return h.hexdigest()[:16]

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        np.savez_compressed(directory / "pairs.npz", left=self.left, right=self.right,
                            disparity=self.disparity, mask=self.mask,
                            train_idx=self.train_idx, test_idx=self.test_idx)
        manifest = {"name": self.name, "pairs": len(self), "fingerprint": self.fingerprint(),
                    "spec": self.spec.to_dict() if self.spec else None, "meta": self.meta}
        (directory / "scene.json").write_text(json.dumps(manifest, indent=2))

    @classmethod
    def load(cls, directory) -> "SceneDataset":
        directory = Path(directory)
        manifest = json.loads((directory / "scene.json").read_text())
        with np.load(directory / "pairs.npz") as z:
            ds = cls(manifest["name"], z["left"], z["right"], z["disparity"], z["mask"],
                     z["train_idx"], z["test_idx"],
                     SceneSpec.from_dict(manifest["spec"]) if manifest.get("spec") else None,
                     manifest.get("meta", {}))
        if ds.fingerprint() != manifest["fingerprint"]:
            raise ValueError(f"scene {directory}: data does not match manifest fingerprint")
        return ds


def _texture(rng, spec: SceneSpec, h: int, w: int) -> np.ndarray:
    """Styled RGB texture, h x w x 3, float32 values in [0, 1]."""
    dots = (rng.random((h, w)) < spec.texture_density).astype(np.float64)
    dots = dots + 0.5 * rng.random((h, w))
    if spec.blur > 0:
        dots = gaussian_filter(dots, spec.blur, mode="nearest")
    lo, hi = dots.min(), dots.max()
    pattern = (dots - lo) / (hi - lo) if hi > lo else np.zeros_like(dots)
    base = 0.3 + 0.5 * rng.random(3)
    rgb = base[None, None, :] * (0.35 + 0.65 * pattern[..., None])
    rgb = rgb * np.asarray(spec.tint)[None, None, :] + spec.brightness
    if spec.noise > 0:
        rgb = rgb + spec.noise * rng.standard_normal(rgb.shape)
    return np.clip(rgb, 0.0, 1.0).astype(np.float32).astype(np.float64)


def _layer_disparities(rng, spec: SceneSpec) -> np.ndarray:
    # integer or half-integer grid inside [disp_min, disp_max]
    step = 2 if spec.half_integer else 1
    grid = np.arange(np.ceil(spec.disp_min * step), np.floor(spec.disp_max * step) + 1) / step
    grid = grid[grid > 0] if spec.disp_min == 0 else grid
    d = rng.choice(grid, size=spec.layers, replace=True)
    # background is the farthest layer
    d[0] = d.min()
    return d


def render_pair(rng, spec: SceneSpec):
    h, w = spec.height, spec.width
    pad = int(np.ceil(spec.disp_max)) + 2
    disps = _layer_disparities(rng, spec)
    # rectangles in left-image coordinates; layer 0 covers the whole frame
    rects = [(0, h, -pad, w + pad)]
    for _ in range(1, spec.layers):
        rh = rng.integers(h // 4, max(h // 4 + 1, 2 * h // 3))
        rw = rng.integers(w // 4, max(w // 4 + 1, 2 * w // 3))
        y0 = rng.integers(0, h - rh + 1)
        x0 = rng.integers(0, w - rw + 1)
        rects.append((y0, y0 + rh, x0, x0 + rw))
    # texture k sampled at right-image column u lives at index u + pad
    textures = [_texture(rng, spec, h, w + 2 * pad) for _ in range(spec.layers)]
    order = np.argsort(disps, kind="stable")   # far to near

    def visible(xcoords, shift):
        """Index of the nearest layer covering (row, column) in a view shifted by ``shift``."""
        vis = np.full((h, len(xcoords)), -1, dtype=np.int64)
        for k in order:
            y0, y1, x0, x1 = rects[k]
            s = disps[k] if shift else 0.0
            cover = (xcoords >= x0 - s) & (xcoords < x1 - s)
            vis[y0:y1, cover] = k
        return vis

    cols = np.arange(w, dtype=np.float64)
    vis_left = visible(cols, shift=False)
    vis_right = visible(cols, shift=True)

    right = np.zeros((h, w, 3))
    left = np.zeros((h, w, 3))
    gt = np.zeros((h, w))
    valid = np.zeros((h, w), dtype=bool)
    for k in range(spec.layers):
        tex = textures[k]
        rsel = vis_right == k
        right[rsel] = tex[:, pad:pad + w][rsel]
        lsel = vis_left == k
        u = cols - disps[k]
        u0 = np.floor(u).astype(np.int64)
        f = u - u0
        t0 = tex[:, u0 + pad]
        t1 = tex[:, u0 + 1 + pad]
        sample = (1 - f)[None, :, None] * t0 + f[None, :, None] * t1
        left[lsel] = sample[lsel]
        gt[lsel] = disps[k]
        # both taps must hit layer k in the right view
        u1 = np.where(f > 0, u0 + 1, u0)
        inside = (u0 >= 0) & (u1 <= w - 1)
        ok = np.zeros((h, w), dtype=bool)
        ok[:, inside] = ((vis_right[:, np.clip(u0, 0, w - 1)] == k)
                         & (vis_right[:, np.clip(u1, 0, w - 1)] == k))[:, inside]
        valid |= lsel & ok
    valid &= (gt > 0) & (gt < spec.max_disparity)
    return (left.astype(np.float32), right.astype(np.float32),
            gt.astype(np.float32), valid)


def generate_scene(spec: SceneSpec) -> SceneDataset:
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    lefts, rights, disps, masks = [], [], [], []
    for _ in range(spec.pairs):
        l, r, d, m = render_pair(rng, spec)
        lefts.append(l)
        rights.append(r)
        disps.append(d)
        masks.append(m)
    n_test = spec.test_pairs
    idx = np.arange(spec.pairs)
    return SceneDataset(spec.name, np.stack(lefts), np.stack(rights), np.stack(disps),
                        np.stack(masks), idx[: spec.pairs - n_test], idx[spec.pairs - n_test:],
                        spec)
