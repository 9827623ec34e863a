"""Disparity error metrics and continual-learning summaries."""

from __future__ import annotations

import math

import numpy as np

D1_ABS = 3.0
D1_REL = 0.05


def _masked(pred, gt, mask):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("metric needs at least one valid pixel")
    return pred[mask], gt[mask]


def epe(pred, gt, mask) -> float:
    """Mean absolute disparity error over valid pixels."""
    p, g = _masked(pred, gt, mask)
    # correctly rounded sum, so the value does not depend on summation order
    return math.fsum(np.abs(p - g).tolist()) / p.size


def d1_all(pred, gt, mask) -> float:
    """Percentage of valid pixels whose error exceeds both 3 px and 5% of the ground truth."""
    p, g = _masked(pred, gt, mask)
    err = np.abs(p - g)
    bad = (err > D1_ABS) & (err > D1_REL * np.abs(g))
    return 100.0 * int(np.count_nonzero(bad)) / bad.size


class ErrorMatrix:
    """E[t, i]: error of the model after task t on the test set of task i (tasks from 1)."""

    def __init__(self):
        self.entries: dict[tuple[int, int], tuple[float, float]] = {}

    def set(self, t: int, i: int, epe_value: float, d1_value: float):
        self.entries[(int(t), int(i))] = (float(epe_value), float(d1_value))

    def get(self, t: int, i: int) -> tuple[float, float]:
        try:
            return self.entries[(t, i)]
        except KeyError:
            raise KeyError(f"error matrix has no entry for model {t} on task {i}") from None

    def __contains__(self, key):
        return key in self.entries

    @property
    def tasks(self) -> int:
        return max((t for t, _ in self.entries), default=0)

    def to_rows(self) -> list[dict]:
        return [{"model_task": t, "eval_task": i, "epe": e, "d1": d}
                for (t, i), (e, d) in sorted(self.entries.items())]

    @classmethod
    def from_rows(cls, rows) -> "ErrorMatrix":
        m = cls()
        for r in rows:
            m.set(int(r["model_task"]), int(r["eval_task"]), float(r["epe"]), float(r["d1"]))
        return m

    def to_csv(self) -> str:
        lines = ["model_task,eval_task,epe,d1"]
        lines += [f"{t},{i},{e!r},{d!r}" for (t, i), (e, d) in sorted(self.entries.items())]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_csv(cls, text: str) -> "ErrorMatrix":
        m = cls()
        for line in text.strip().splitlines()[1:]:
            t, i, e, d = line.split(",")
            m.set(int(t), int(i), float(e), float(d))
        return m

    def __eq__(self, other):
        return isinstance(other, ErrorMatrix) and self.entries == other.entries


def compute_fae(E: ErrorMatrix, N: int) -> tuple[float, float]:
    """Average error of the final model over all N tasks."""
    rows = [E.get(N, i) for i in range(1, N + 1)]
    return (sum(r[0] for r in rows) / N, sum(r[1] for r in rows) / N)


def compute_bwt(E: ErrorMatrix, N: int) -> tuple[float, float]:
    """Mean rise in error on tasks 1..N-1 between learning them and the end.

    Positive means forgetting.
    """
    if N < 2:
        raise ValueError("backward transfer needs at least two tasks")
    de = dd = 0.0
    for i in range(1, N):
        fin, first = E.get(N, i), E.get(i, i)
        de += fin[0] - first[0]
        dd += fin[1] - first[1]
    return de / (N - 1), dd / (N - 1)
