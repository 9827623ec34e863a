"""Network-level architecture growth over a ledger of frozen cells.

Each layer of a new task either reuses a cell learned on an earlier task
(frozen) or adopts the cell searched for the current task. The choice is
learned with the same multinomial gain/decay rule as the cell search, with
old cells given a head start in both probability and trial count, and a
validation score that rewards reused parameters.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .arch import CellGenotype, NetworkTopology, count_parameters
from .search import MOMENTUM, TIE_TOL, multinomial_update

logger = logging.getLogger(__name__)

NEW = "new"


def growth_score(error_rate: float, reused_params: float, target: float) -> float:
    """sqrt(1 - err) * ln(reused / target + 1)."""
    if target <= 0:
        raise ValueError(f"target parameter count must be positive, got {target}")
    if not 0.0 <= error_rate <= 1.0:
        raise ValueError(f"error rate must lie in [0, 1], got {error_rate}")
    return math.sqrt(1.0 - error_rate) * math.log(reused_params / target + 1.0)


def growth_score_linear(error_rate: float, reused_params: float, target: float,
                        weight: float = 0.9) -> float:
    """Weighted sum of sqrt(1 - err) and ln(reused / target + 1)."""
    if target <= 0:
        raise ValueError(f"target parameter count must be positive, got {target}")
    if not 0.0 <= error_rate <= 1.0:
        raise ValueError(f"error rate must lie in [0, 1], got {error_rate}")
    return (weight * math.sqrt(1.0 - error_rate)
            + (1.0 - weight) * math.log(reused_params / target + 1.0))


def error_only_score(error_rate: float, reused_params: float, target: float) -> float:
    return 1.0 - error_rate


SCORERS = {
    "sqrt_log": growth_score,
    "linear": growth_score_linear,
    "error": error_only_score,
}


# -- ledger ---------------------------------------------------------------------------

@dataclass
class CellRecord:
    cell_id: int
    layer: int
    genotype: CellGenotype
    owner: int
    frozen: bool = False

    def to_dict(self) -> dict:
        return {
            "cell_id": self.cell_id,
            "layer": self.layer,
            "owner": self.owner,
            "frozen": self.frozen,
            "genotype": self.genotype.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CellRecord":
        return cls(int(d["cell_id"]), int(d["layer"]), CellGenotype.from_dict(d["genotype"]),
                   int(d["owner"]), bool(d["frozen"]))


@dataclass
class GrowthLedger:
    """Per-layer registry of cells and the architecture path of every task."""

    topology: NetworkTopology
    cells: dict = field(default_factory=dict)     # cell id -> CellRecord
    paths: dict = field(default_factory=dict)     # task -> list of cell ids, one per layer
    next_id: int = 0

    def add_cell(self, layer: int, genotype: CellGenotype, owner: int) -> int:
        if genotype.family != self.topology.family_of(layer):
            raise ValueError(f"layer {layer} takes {self.topology.family_of(layer)} cells, "
                             f"got {genotype.family}")
        cid = self.next_id
        self.next_id += 1
        self.cells[cid] = CellRecord(cid, layer, genotype, owner)
        return cid

    def cells_at(self, layer: int, before_task: int | None = None) -> list[CellRecord]:
        out = [c for c in self.cells.values() if c.layer == layer
               and (before_task is None or c.owner < before_task)]
        return sorted(out, key=lambda c: (c.owner, c.cell_id))

    def set_path(self, task: int, path: Sequence[int]):
        path = [int(c) for c in path]
        if len(path) != self.topology.num_layers:
            raise ValueError(f"path has {len(path)} layers, topology has "
                             f"{self.topology.num_layers}")
        for layer, cid in enumerate(path):
            rec = self.cells.get(cid)
            if rec is None:
                raise KeyError(f"layer {layer}: unknown cell {cid}")
            if rec.layer != layer:
                raise ValueError(f"cell {cid} belongs to layer {rec.layer}, not {layer}")
            if rec.owner > task:
                raise ValueError(f"task {task} path references cell {cid} of later task "
                                 f"{rec.owner}")
        self.paths[int(task)] = path

    def freeze_task(self, task: int):
        for c in self.cells.values():
            if c.owner <= task:
                c.frozen = True

    def path_genotypes(self, task: int) -> list[CellGenotype]:
        return [self.cells[c].genotype for c in self.paths[task]]

    @property
    def tasks(self) -> list[int]:
        return sorted(self.paths)

    def check(self):
        """Raise if any recorded path no longer resolves."""
        for task, path in self.paths.items():
            for layer, cid in enumerate(path):
                rec = self.cells.get(cid)
                if rec is None or rec.layer != layer or rec.owner > task:
                    raise RuntimeError(f"ledger corrupt: task {task} layer {layer} -> {cid}")

    def to_dict(self) -> dict:
        return {
            "topology": self.topology.to_dict(),
            "next_id": self.next_id,
            "cells": [self.cells[k].to_dict() for k in sorted(self.cells)],
            "paths": {str(t): p for t, p in sorted(self.paths.items())},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "GrowthLedger":
        topo = NetworkTopology(**d["topology"])
        led = cls(topo, next_id=int(d["next_id"]))
        for c in d["cells"]:
            rec = CellRecord.from_dict(c)
            led.cells[rec.cell_id] = rec
        led.paths = {int(t): [int(x) for x in p] for t, p in d["paths"].items()}
        led.check()
        return led

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def path_parameters(ledger: GrowthLedger, path: Sequence[int], owner_below: int | None = None):
    """Edge parameters of the cells in ``path``; optionally only those owned by earlier tasks."""
    topo = ledger.topology
    cells, widths = [], []
    for layer, cid in enumerate(path):
        rec = ledger.cells[cid]
        if owner_below is not None and rec.owner >= owner_below:
            continue
        cells.append(rec.genotype)
        widths.append(topo.width_of(layer))
    return count_parameters(cells, widths)


def average_reuse_rate(ledger: GrowthLedger, up_to_task: int) -> float:
    """Mean over tasks 2..N of the fraction of path parameters owned by earlier tasks.

    Tasks are numbered from 1. A path whose cells carry no parameters at all
    contributes a reuse fraction of 0.
    """
    if up_to_task < 2:
        raise ValueError("reuse rate needs at least two tasks")
    ratios = []
    for t in range(2, up_to_task + 1):
        path = ledger.paths[t]
        total = path_parameters(ledger, path)
        reused = path_parameters(ledger, path, owner_below=t)
        ratios.append(reused / total if total > 0 else 0.0)
    return float(sum(ratios) / len(ratios))


def prune_unadopted(ledger: GrowthLedger, task: int, chosen: Sequence[int]) -> list[int]:
    """Drop the cells of ``task`` that ``chosen`` does not use. Returns removed ids."""
    chosen = set(int(c) for c in chosen)
    doomed = [cid for cid, rec in ledger.cells.items() if rec.owner == task and cid not in chosen]
    for t, path in ledger.paths.items():
        if t != task and any(c in doomed for c in path):
            raise RuntimeError(f"pruning task {task} would break the path of task {t}")
    for cid in doomed:
        del ledger.cells[cid]
    ledger.check()
    return doomed


# -- growth state ---------------------------------------------------------------------

@dataclass
class GrowthState:
    candidates: list             # per layer: list of cell ids (old first, new last)
    owners: list                 # per layer: owner task of each candidate
    delta: list                  # per layer: np.ndarray
    count: list
    prob: list
    gamma: float
    c0: int
    target: float                # phi
    total: float                 # Phi
    alpha: float = MOMENTUM
    trials: int = 0


def init_growth_state(t: int, layers: int, gamma: float = 2.0, c0: int = 10,
                      target: float = 1.0, total: float = 1.0,
                      candidates: Sequence[Sequence[int]] | None = None,
                      owners: Sequence[Sequence[int]] | None = None,
                      alpha: float = MOMENTUM) -> GrowthState:
    """Initial growth state for task ``t`` (tasks numbered from 1).

    Without explicit ``candidates`` every layer holds the ``t - 1`` old cells
    followed by the new one. Old cells start with probability ``gamma`` times
    that of the new cell and with ``c0`` recorded trials.
    """
    if t < 2:
        raise ValueError("growth starts at the second task")
    if gamma < 1:
        raise ValueError(f"gamma must be >= 1, got {gamma}")
    if candidates is None:
        candidates = [list(range(t)) for _ in range(layers)]
        owners = [list(range(1, t + 1)) for _ in range(layers)]
    if len(candidates) != layers:
        raise ValueError(f"{len(candidates)} candidate lists for {layers} layers")
    deltas, counts, probs = [], [], []
    for cands in candidates:
        n_old = len(cands) - 1
        denom = gamma * n_old + 1.0
        p = np.array([gamma / denom] * n_old + [1.0 / denom])
        c = np.array([c0] * n_old + [0], dtype=np.int64)
        deltas.append(np.zeros(len(cands)))
        counts.append(c)
        probs.append(p)
    return GrowthState([list(c) for c in candidates], [list(o) for o in owners],
                       deltas, counts, probs, gamma, c0, target, total, alpha)


def sample_path(state: GrowthState, rng: np.random.Generator) -> tuple[int, ...]:
    """Candidate index per layer, drawn from each layer's distribution."""
    out = []
    for p in state.prob:
        cdf = np.cumsum(p)
        cdf[-1] = 1.0
        out.append(int(np.searchsorted(cdf, rng.random(), side="right")))
    return tuple(out)


def record_growth_trial(state: GrowthState, sel: Sequence[int], score: float) -> GrowthState:
    for layer, k in enumerate(sel):
        state.delta[layer][k] = score
        state.count[layer][k] += 1
    state.trials += 1
    return state


def update_growth_probabilities(state: GrowthState, sel: Sequence[int]) -> GrowthState:
    for layer, k in enumerate(sel):
        state.prob[layer] = multinomial_update(
            state.prob[layer], state.delta[layer], state.count[layer], int(k), state.alpha)
    return state


def finalize_path(state: GrowthState) -> tuple[int, ...]:
    """Most probable candidate per layer; ties go to the oldest owner, then lowest id."""
    out = []
    for cands, owners, p in zip(state.candidates, state.owners, state.prob):
        best = max(p)
        tied = [k for k in range(len(p)) if p[k] >= best - TIE_TOL]
        out.append(min(tied, key=lambda k: (owners[k], cands[k])))
    return tuple(out)


def growth_loop(state: GrowthState, evaluate: Callable[[tuple[int, ...]], float],
                reused_params: Callable[[tuple[int, ...]], float], trials: int,
                rng: np.random.Generator, scorer: str | Callable = "sqrt_log",
                trace: list | None = None) -> tuple[int, ...]:
    """Run ``trials`` growth trials and return the finalized candidate index per layer.

    ``evaluate`` maps a selection to an error rate in [0, 1]; ``reused_params``
    maps it to the parameter count of the old cells it reuses.
    """
    score_fn = SCORERS[scorer] if isinstance(scorer, str) else scorer
    for i in range(trials):
        sel = sample_path(state, rng)
        err = float(evaluate(sel))
        phi_m = float(reused_params(sel))
        score = score_fn(err, phi_m, state.target)
        record_growth_trial(state, sel, score)
        update_growth_probabilities(state, sel)
        if trace is not None:
            trace.append({"trial": i, "selection": [int(s) for s in sel], "error_rate": err,
                          "reused_params": phi_m, "score": score,
                          "prob": [p.tolist() for p in state.prob]})
        logger.debug("growth trial %d sel=%s err=%.4f phi=%g score=%.4f",
                     i, sel, err, phi_m, score)
    return finalize_path(state)


def growth_dot(ledger: GrowthLedger) -> str:
    """DOT description of the grown network: one node per cell, one edge chain per task."""
    lines = ["digraph growth {", "  rankdir=LR;"]
    for cid in sorted(ledger.cells):
        rec = ledger.cells[cid]
        shape = "circle" if rec.genotype.family == "feature" else "doublecircle"
        lines.append(f'  c{cid} [label="L{rec.layer}\\nT{rec.owner}", shape={shape}];')
    palette = ["red", "blue", "darkgreen", "orange", "purple", "brown", "gray"]
    for task, path in sorted(ledger.paths.items()):
        color = palette[(task - 1) % len(palette)]
        for a, b in zip(path, path[1:]):
            lines.append(f'  c{a} -> c{b} [color={color}, label="T{task}"];')
    lines.append("}")
    return "\n".join(lines)


def run_growth(train_split: dict, val_split: dict, ledger: GrowthLedger, task: int,
               new_cells: dict, cell_modules: dict, head=None, trials: int = 60,
               gamma: float = 2.0, c0: int = 10, target: float | None = None,
               target_fraction: float = 0.5, scorer: str = "sqrt_log", seed: int = 0,
               evaluator=None, batch_size: int = 8, lr: float = 1e-3, trace: list | None = None):
    """Choose, per layer, an old frozen cell or the task's new cell.

    ``new_cells`` maps layer -> (genotype, module). They are registered in the
    ledger, the unadopted ones are pruned afterwards and the chosen path is
    recorded for ``task``. ``cell_modules`` (cell id -> module) is updated in
    place. Returns (chosen cell ids, growth state).
    """
    from .arch import full_model_parameters

    topo = ledger.topology
    new_ids = {}
    for layer in range(topo.num_layers):
        genotype, module = new_cells[layer]
        cid = ledger.add_cell(layer, genotype, task)
        cell_modules[cid] = module
        new_ids[layer] = cid
    if task == 1:
        path = [new_ids[j] for j in range(topo.num_layers)]
        ledger.set_path(task, path)
        return path, None

    candidates, owners = [], []
    for layer in range(topo.num_layers):
        old = ledger.cells_at(layer, before_task=task)
        candidates.append([c.cell_id for c in old] + [new_ids[layer]])
        owners.append([c.owner for c in old] + [task])
    total = full_model_parameters(topo)
    target = target if target is not None else target_fraction * total
    state = init_growth_state(task, topo.num_layers, gamma, c0, target, total, candidates, owners)

    def ids_of(sel):
        return [candidates[j][k] for j, k in enumerate(sel)]

    def reused(sel):
        return path_parameters(ledger, ids_of(sel), owner_below=task)

    if evaluator is None:
        import torch

        from .stereo_net import TaskModel
        from .training import make_optimizer, predict, score_predictions, train_epoch

        trainable = list(head.parameters()) + [
            p for j in range(topo.num_layers) for p in cell_modules[new_ids[j]].parameters()]
        opt = make_optimizer(trainable, lr)
        rng = np.random.default_rng([seed, 2])

        def evaluator(sel):
            model = TaskModel(topo, head, [cell_modules[c] for c in ids_of(sel)], task)
            train_epoch(model, train_split, opt, rng, batch_size=batch_size)
            pred = predict(model, val_split, batch_size)
            return score_predictions(pred, val_split, topo.max_disparity)[1] / 100.0

    rng = np.random.default_rng([seed, 3])
    sel = growth_loop(state, evaluator, reused, trials, rng, scorer, trace)
    path = ids_of(sel)
    for cid in prune_unadopted(ledger, task, path):
        cell_modules.pop(cid, None)
    ledger.set_path(task, path)
    logger.info("task %d path %s (reused layers: %d)", task, path,
                sum(ledger.cells[c].owner < task for c in path))
    return path, state
