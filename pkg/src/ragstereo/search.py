"""Cell-level search by multinomial distribution learning.

Every edge keeps, per candidate operation, the latest validation score, the
number of trials it was sampled in and a selection probability. A trial
samples one candidate per edge, scores the sampled network and moves
probability mass towards candidates that score better while having been tried
less often.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Hashable, Sequence

import numpy as np

from .arch import CANDIDATES, EDGES, CellGenotype, validate_genotype

logger = logging.getLogger(__name__)

MOMENTUM = 0.01
# Repeated softmax drives untouched rows to a 1-ulp fixed point instead of an exact
# tie; gaps below this tolerance are ties.
TIE_TOL = 1e-12


def softmax(x: np.ndarray) -> np.ndarray:
    z = np.exp(x - x.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def multinomial_update(prob, delta, count, selected, alpha=MOMENTUM):
    """Apply the gain/decay rule to one row of candidates, then renormalise.

    The selected candidate gains ``alpha`` for every rival that has been tried
    more often yet scores lower, and loses ``alpha`` for every rival tried less
    often yet scoring higher. The row is then pushed through a softmax.
    """
    prob = np.array(prob, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    count = np.asarray(count)
    m = selected
    gain = np.sum((count[m] < count) & (delta[m] > delta))
    decay = np.sum((count[m] > count) & (delta[m] < delta))
    prob[m] += alpha * (int(gain) - int(decay))
    return softmax(prob)


@dataclass
class SearchState:
    edges: list
    delta: np.ndarray
    count: np.ndarray
    prob: np.ndarray
    alpha: float = MOMENTUM
    seed: int = 0
    rng: np.random.Generator = field(default=None, repr=False)
    trials: int = 0

    @property
    def K(self) -> int:
        return self.prob.shape[1]

    def copy(self) -> "SearchState":
        rng = np.random.default_rng()
        rng.bit_generator.state = self.rng.bit_generator.state
        return SearchState(
            list(self.edges), self.delta.copy(), self.count.copy(), self.prob.copy(),
            self.alpha, self.seed, rng, self.trials,
        )


def init_search_state(edges: Sequence[Hashable], K: int = 2, seed: int = 0,
                      alpha: float = MOMENTUM) -> SearchState:
    if K < 2:
        raise ValueError(f"need at least two candidates per edge, got K={K}")
    n = len(edges)
    return SearchState(
        edges=list(edges),
        delta=np.zeros((n, K)),
        count=np.zeros((n, K), dtype=np.int64),
        prob=np.full((n, K), 1.0 / K),
        alpha=alpha,
        seed=seed,
        rng=np.random.default_rng(seed),
    )


def sample_selection(state: SearchState) -> tuple[int, ...]:
    """Draw one candidate per edge from the current categorical distributions."""
    u = state.rng.random(len(state.edges))
    cdf = np.cumsum(state.prob, axis=1)
    # guard against the last cdf entry rounding below 1
    cdf[:, -1] = 1.0
    return tuple(int(np.searchsorted(row, x, side="right")) for row, x in zip(cdf, u))


def record_trial(state: SearchState, sel: Sequence[int], error_rate: float) -> SearchState:
    if not 0.0 <= error_rate <= 1.0:
        raise ValueError(f"error rate must lie in [0, 1], got {error_rate}")
    rows = np.arange(len(state.edges))
    sel = np.asarray(sel)
    state.delta[rows, sel] = 1.0 - error_rate
    state.count[rows, sel] += 1
    state.trials += 1
    return state


def update_probabilities(state: SearchState, sel: Sequence[int]) -> SearchState:
    for e, m in enumerate(sel):
        state.prob[e] = multinomial_update(
            state.prob[e], state.delta[e], state.count[e], int(m), state.alpha
        )
    return state


def argmax_lowest(row, tol: float = TIE_TOL) -> int:
    row = np.asarray(row)
    return int(np.flatnonzero(row >= row.max() - tol)[0])


def finalize_selection(state: SearchState) -> tuple[int, ...]:
    if state.trials == 0:
        raise ValueError("cannot finalize a search without recorded trials")
    return tuple(argmax_lowest(row) for row in state.prob)


def finalize_cell(state: SearchState, family: str) -> CellGenotype:
    """Pick the most probable candidate on every edge of a single-cell state."""
    choice = finalize_selection(state)
    g = CellGenotype.from_choices(family, choice)
    verdict = validate_genotype(g)
    if not verdict:
        raise RuntimeError(f"finalized genotype is invalid: {verdict.reason}")
    return g


# -- joint feature/matching search ---------------------------------------------------

JOINT_EDGES = [("feature",) + e for e in EDGES] + [("matching",) + e for e in EDGES]


def split_selection(sel: Sequence[int]) -> tuple[tuple[int, ...], tuple[int, ...]]:
    n = len(EDGES)
    return tuple(sel[:n]), tuple(sel[n:])


def finalize_joint(state: SearchState) -> tuple[CellGenotype, CellGenotype]:
    f, m = split_selection(finalize_selection(state))
    feature = CellGenotype.from_choices("feature", f)
    matching = CellGenotype.from_choices("matching", m)
    for g in (feature, matching):
        verdict = validate_genotype(g)
        if not verdict:
            raise RuntimeError(f"finalized genotype is invalid: {verdict.reason}")
    return feature, matching


class TraceWriter:
    """Line-delimited JSON trace of a search: one record per trial."""

    def __init__(self, path=None):
        self.path = path
        self.records: list[dict] = []

    def write(self, trial: int, sel, error_rate: float, prob: np.ndarray, **extra):
        rec = {
            "trial": trial,
            "selection": [int(s) for s in sel],
            "error_rate": float(error_rate),
            "prob": prob.tolist(),
        }
        rec.update(extra)
        self.records.append(rec)
        if self.path is not None:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(rec) + "\n")


def read_trace(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def search_loop(state: SearchState, evaluate: Callable[[tuple[int, ...]], float],
                trials: int, trace: TraceWriter | None = None) -> SearchState:
    """sample -> evaluate -> record -> update, ``trials`` times."""
    if trials <= 0:
        raise ValueError("search needs at least one trial")
    for t in range(trials):
        sel = sample_selection(state)
        err = float(evaluate(sel))
        record_trial(state, sel, err)
        update_probabilities(state, sel)
        if trace is not None:
            trace.write(t, sel, err, state.prob)
        logger.debug("trial %d sel=%s err=%.4f", t, sel, err)
    return state


def run_cell_search(train_split: dict, val_split: dict, topology, trials: int = 60,
                    epochs_per_trial: int = 1, seed: int = 0, evaluator=None,
                    trace: TraceWriter | None = None, batch_size: int = 8, lr: float = 1e-3):
    """Joint feature/matching cell search on one task.

    Every trial trains the sampled sub-network of a weight-sharing supernet for
    ``epochs_per_trial`` epochs and scores it by D1-all on ``val_split``. A
    stub ``evaluator(selection) -> error rate`` replaces training when given.

    Returns (feature genotype, matching genotype, supernet or None, state).
    """
    if trials <= 0:
        raise ValueError("cell search needs at least one trial")
    state = init_search_state(JOINT_EDGES, K=2, seed=seed)
    supernet = None
    if evaluator is None:
        import torch

        from .stereo_net import SuperNet
        from .training import make_optimizer, predict, score_predictions, train_epoch

        torch.manual_seed(seed)
        supernet = SuperNet(topology)
        opt = make_optimizer(supernet.parameters(), lr)
        rng = np.random.default_rng([seed, 1])

        def evaluator(sel):
            f, m = split_selection(sel)
            supernet.select(f, m)
            for _ in range(epochs_per_trial):
                train_epoch(supernet, train_split, opt, rng, batch_size=batch_size)
            pred = predict(supernet, val_split, batch_size)
            _, d1 = score_predictions(pred, val_split, topology.max_disparity)
            return d1 / 100.0

    search_loop(state, evaluator, trials, trace)
    feature, matching = finalize_joint(state)
    logger.info("search finished: feature=%s matching=%s", feature.choices(), matching.choices())
    return feature, matching, supernet, state
