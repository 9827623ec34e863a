"""Scene router: one small autoencoder per task over a fixed image
representation; an input is sent to the task whose autoencoder reconstructs
it best.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

REPR_DIM = 64
GRID = 16
BINS = 8
HIST_SCALE = float(BINS)
BOTTLENECK = 16
EPOCHS = 200
LR = 1e-2
TAU = 2.0
LAMBDA = 0.1
EPS = 1e-8


class RepresentationEncoder:
    """Downsampled grayscale + per-channel colour histogram, randomly projected
    to ``dim`` values and squashed into (0, 1). Fixed once built."""

    def __init__(self, dim: int = REPR_DIM, seed: int = 0, grid: int = GRID, bins: int = BINS):
        self.dim, self.seed, self.grid, self.bins = dim, seed, grid, bins
        n_in = grid * grid + 3 * bins
        rng = np.random.default_rng(seed)
        self.projection = rng.standard_normal((n_in, dim)) / np.sqrt(n_in)
        self.projection.setflags(write=False)

    def parts(self, image: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        img = np.asarray(image, dtype=np.float64)
        gray = img.mean(axis=2)
        t = torch.from_numpy(gray)[None, None]
        small = F.adaptive_avg_pool2d(t, self.grid)[0, 0].numpy().ravel()
        hist = np.concatenate([
            np.histogram(img[..., c], bins=self.bins, range=(0.0, 1.0))[0] / gray.size
            for c in range(3)
        ])
        return small, hist

    def __call__(self, image: np.ndarray) -> np.ndarray:
        small, hist = self.parts(image)
        feat = np.concatenate([small - 0.5, HIST_SCALE * hist])
        return 1.0 / (1.0 + np.exp(-(feat @ self.projection)))

    def encode_many(self, images) -> np.ndarray:
        return np.stack([self(im) for im in images])

    def to_dict(self) -> dict:
        return {"dim": self.dim, "seed": self.seed, "grid": self.grid, "bins": self.bins}


def encode_representation(image, encoder: RepresentationEncoder | None = None) -> np.ndarray:
    return (encoder or RepresentationEncoder())(image)


class Autoencoder(nn.Module):
    """Linear encoder, linear decoder, sigmoid on the reconstruction."""

    def __init__(self, dim: int = REPR_DIM, bottleneck: int = BOTTLENECK):
        super().__init__()
        self.enc = nn.Linear(dim, bottleneck)
        self.dec = nn.Linear(bottleneck, dim)

    def forward(self, x):
        return torch.sigmoid(self.dec(self.enc(x)))

    @torch.no_grad()
    def reconstruct(self, x: np.ndarray) -> np.ndarray:
        t = torch.as_tensor(np.asarray(x), dtype=torch.float64)
        return self.double()(t).numpy()


def reconstruction_error(x, autoencoder) -> float | np.ndarray:
    """Mean squared error between ``x`` and its reconstruction (per row for 2-D input)."""
    x = np.asarray(x, dtype=np.float64)
    rec = np.asarray(autoencoder.reconstruct(x), dtype=np.float64)
    if rec.shape != x.shape:
        raise ValueError(f"reconstruction shape {rec.shape} does not match input {x.shape}")
    err = ((x - rec) ** 2).mean(axis=-1)
    return float(err) if err.ndim == 0 else err


def scene_contrastive_loss(recon, x, old_recons, tau: float = TAU, eps: float = EPS):
    """-log softmax of the own-reconstruction similarity against similarities to
    old autoencoders' reconstructions; similarity is 1 / (MSE + eps).

    Works on numpy vectors or on torch tensors (rows = samples, returns the mean).
    """
    if len(old_recons) == 0:
        return 0.0 if not torch.is_tensor(recon) else recon.new_zeros(())
    if torch.is_tensor(recon):
        sim_nn = 1.0 / (((recon - x) ** 2).mean(-1) + eps)
        sims = [sim_nn] + [1.0 / (((recon - o) ** 2).mean(-1) + eps) for o in old_recons]
        logits = torch.stack(sims, dim=-1) / tau
        return (torch.logsumexp(logits, dim=-1) - logits[..., 0]).mean()
    recon, x = np.asarray(recon, np.float64), np.asarray(x, np.float64)
    sim_nn = 1.0 / (((recon - x) ** 2).mean(-1) + eps)
    sims = [sim_nn] + [1.0 / (((recon - np.asarray(o)) ** 2).mean(-1) + eps) for o in old_recons]
    logits = np.stack(sims, axis=-1) / tau
    top = logits.max(axis=-1, keepdims=True)
    lse = top[..., 0] + np.log(np.exp(logits - top).sum(axis=-1))
    return float(np.mean(lse - logits[..., 0]))


class RouterBank:
    def __init__(self, encoder: RepresentationEncoder | None = None, tau: float = TAU,
                 lam: float = LAMBDA, bottleneck: int = BOTTLENECK, epochs: int = EPOCHS,
                 lr: float = LR):
        self.encoder = encoder or RepresentationEncoder()
        self.tau, self.lam, self.bottleneck, self.epochs, self.lr = tau, lam, bottleneck, epochs, lr
        self.autoencoders: list[Autoencoder] = []

    def __len__(self):
        return len(self.autoencoders)

    def errors(self, image) -> np.ndarray:
        x = self.encoder(image)
        return np.array([reconstruction_error(x, ae) for ae in self.autoencoders])

    def config(self) -> dict:
        return {"encoder": self.encoder.to_dict(), "tau": self.tau, "lam": self.lam,
                "bottleneck": self.bottleneck, "epochs": self.epochs, "lr": self.lr}

    def save(self, directory):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        arrays = {}
        for t, ae in enumerate(self.autoencoders):
            for k, v in ae.state_dict().items():
                arrays[f"ae{t}.{k}"] = v.double().numpy()
        np.savez(directory / "router.npz", **arrays)
        doc = dict(self.config(), tasks=len(self.autoencoders))
        (directory / "router.json").write_text(json.dumps(doc, indent=2))

    @classmethod
    def load(cls, directory) -> "RouterBank":
        directory = Path(directory)
        doc = json.loads((directory / "router.json").read_text())
        enc = RepresentationEncoder(**doc["encoder"])
        bank = cls(enc, doc["tau"], doc["lam"], doc["bottleneck"], doc["epochs"], doc["lr"])
        with np.load(directory / "router.npz") as z:
            for t in range(doc["tasks"]):
                ae = Autoencoder(enc.dim, bank.bottleneck).double()
                state = {k: torch.from_numpy(z[f"ae{t}.{k}"]) for k in ae.state_dict()}
                ae.load_state_dict(state)
                ae.requires_grad_(False)
                bank.autoencoders.append(ae)
        return bank


def train_router_entry(images, bank: RouterBank, seed: int = 0, lam: float | None = None) -> RouterBank:
    """Fit a new autoencoder on ``images`` and append it; earlier ones stay frozen."""
    lam = bank.lam if lam is None else lam
    x = torch.from_numpy(bank.encoder.encode_many(images))
    torch.manual_seed(seed)
    ae = Autoencoder(bank.encoder.dim, bank.bottleneck).double()
    with torch.no_grad():
        olds = [old(x) for old in bank.autoencoders]
    opt = torch.optim.Adam(ae.parameters(), lr=bank.lr)
    for _ in range(bank.epochs):
        recon = ae(x)
        loss = F.mse_loss(recon, x)
        if olds and lam > 0:
            loss = loss + lam * scene_contrastive_loss(recon, x, olds, bank.tau)
        opt.zero_grad()
        loss.backward()
        opt.step()
    ae.requires_grad_(False)
    bank.autoencoders.append(ae)
    return bank


def route(image, bank: RouterBank) -> int:
    """Task (numbered from 1) whose autoencoder reconstructs ``image`` best; ties go low."""
    if len(bank) == 0:
        raise ValueError("cannot route with an empty router bank")
    return int(np.argmin(bank.errors(image))) + 1
