"""Epoch-level training and evaluation helpers shared by search, growth and
the continual loop."""

from __future__ import annotations

import numpy as np
import torch

from .metrics import d1_all, epe
from .stereo_net import self_supervised_loss, smooth_l1_loss, supervision_mask

LR = 1e-3
BATCH_SIZE = 8


def to_tensors(split: dict):
    left = torch.from_numpy(np.ascontiguousarray(split["left"])).permute(0, 3, 1, 2).float()
    right = torch.from_numpy(np.ascontiguousarray(split["right"])).permute(0, 3, 1, 2).float()
    disp = torch.from_numpy(np.ascontiguousarray(split["disparity"])).float()
    mask = torch.from_numpy(np.ascontiguousarray(split["mask"])).bool()
    return left, right, disp, mask


def make_optimizer(params, lr: float = LR):
    # first-moment decay 0: adaptive step sizes without momentum
    return torch.optim.Adam(list(params), lr=lr, betas=(0.0, 0.999))


def train_epoch(model, split: dict, optimizer, rng: np.random.Generator, mode: str = "supervised",
                batch_size: int = BATCH_SIZE, max_disparity: float | None = None) -> float:
    """One pass over ``split`` in a shuffled order; returns the mean batch loss."""
    left, right, disp, mask = to_tensors(split)
    n = len(left)
    max_disparity = max_disparity or model.topology.max_disparity
    order = rng.permutation(n)
    model.train()
    losses = []
    for start in range(0, n, batch_size):
        idx = torch.from_numpy(order[start:start + batch_size])
        l, r = left[idx], right[idx]
        pred = model(l, r)
        if mode == "supervised":
            m = supervision_mask(disp[idx], max_disparity, mask[idx])
            if not m.any():
                continue
            loss = smooth_l1_loss(pred, disp[idx], m)
        elif mode == "self":
            loss = self_supervised_loss(l, r, pred)
        else:
            raise ValueError(f"unknown training mode {mode!r}")
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        losses.append(float(loss.detach()))
    return float(np.mean(losses)) if losses else float("nan")


@torch.no_grad()
def predict(model, split: dict, batch_size: int = BATCH_SIZE) -> np.ndarray:
    left, right, _, _ = to_tensors(split)
    was_training = model.training
    model.eval()
    out = []
    for start in range(0, len(left), batch_size):
        out.append(model(left[start:start + batch_size], right[start:start + batch_size]))
    model.train(was_training)
    return torch.cat(out).numpy()


def evaluation_mask(split: dict, max_disparity: float) -> np.ndarray:
    gt = split["disparity"]
    return split["mask"] & (gt > 0) & (gt < max_disparity)


def score_predictions(pred: np.ndarray, split: dict, max_disparity: float) -> tuple[float, float]:
    """(EPE, D1-all %) pooled over all valid pixels of the split."""
    mask = evaluation_mask(split, max_disparity)
    return epe(pred, split["disparity"], mask), d1_all(pred, split["disparity"], mask)


def evaluate(model, split: dict, batch_size: int = BATCH_SIZE):
    pred = predict(model, split, batch_size)
    return score_predictions(pred, split, model.topology.max_disparity), pred
