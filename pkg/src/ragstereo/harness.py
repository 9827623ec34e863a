"""Continual training loop over a sequence of scenes, its incremental
finetuning baseline and the run report."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .arch import build_base_topology
from .checkpoint import ContinualState, load_checkpoint, save_checkpoint
from .config import RunConfig
from .growth import GrowthLedger, average_reuse_rate, run_growth
from .metrics import ErrorMatrix, compute_bwt, compute_fae
from .proxy import build_proxy_dataset
from .router import RepresentationEncoder, RouterBank, route, train_router_entry
from .scenes import SceneDataset, SceneSpec, generate_scene
from .search import TraceWriter, run_cell_search
from .stereo_net import TaskModel
from .training import make_optimizer, predict, score_predictions, train_epoch

logger = logging.getLogger(__name__)

# phase tags mixed into per-task seeds
_SEARCH, _GROWTH, _TRAIN, _ROUTER, _ADAPT = range(5)


def derive_seed(seed: int, task: int, phase: int) -> int:
    return int(np.random.SeedSequence([seed, task, phase]).generate_state(1)[0])


def topology_of(config: RunConfig):
    m = config.model
    return build_base_topology(feature_layers=m.feature_layers, matching_layers=m.matching_layers,
                               feature_channels=m.feature_channels,
                               matching_channels=m.matching_channels,
                               max_disparity=m.max_disparity)


class TaskStream:
    """Serves scene data task by task (tasks numbered from 1).

    The loop announces each step with ``begin_step``; subclasses may log or
    police access. Training data of a task is the only labelled data the loop
    is allowed to read during that task's step.
    """

    def __init__(self, specs, source_seed_offset: int = 1000):
        self.specs = list(specs)
        self.source_seed_offset = source_seed_offset
        self._cache: dict = {}
        self.step = 0

    def __len__(self):
        return len(self.specs)

    def begin_step(self, task: int):
        self.step = task

    def _scene(self, task: int) -> SceneDataset:
        if task not in self._cache:
            self._cache[task] = generate_scene(self.specs[task - 1])
        return self._cache[task]

    def training_data(self, task: int) -> SceneDataset:
        return self._scene(task)

    def test_data(self, task: int) -> dict:
        return self._scene(task).test_split()

    def source_data(self, task: int) -> SceneDataset:
        """Clean-style labelled synthetic set sharing the task's geometry settings."""
        spec = self.specs[task - 1]
        clean = SceneSpec.from_dict(dict(spec.to_dict(), name=f"{spec.name}-source",
                                         tint=(1.0, 1.0, 1.0), brightness=0.0, noise=0.0,
                                         seed=spec.seed + self.source_seed_offset))
        return generate_scene(clean)


@dataclass
class RunReport:
    kind: str
    regime: str
    seed: int
    config_hash: str
    scenes: list
    errors: ErrorMatrix
    fae: tuple
    bwt: tuple | None
    arr: float | None
    routing_accuracy: float | None
    paths: dict = field(default_factory=dict)
    prediction_hashes: dict = field(default_factory=dict)
    wall_clock: float = 0.0

    def to_dict(self) -> dict:
        return {
            "kind": self.kind, "regime": self.regime, "seed": self.seed,
            "config_hash": self.config_hash, "scenes": list(self.scenes),
            "errors": self.errors.to_rows(),
            "fae": {"epe": self.fae[0], "d1": self.fae[1]},
            "bwt": None if self.bwt is None else {"epe": self.bwt[0], "d1": self.bwt[1]},
            "arr": self.arr, "routing_accuracy": self.routing_accuracy,
            "paths": {str(k): v for k, v in self.paths.items()},
            "prediction_hashes": dict(self.prediction_hashes),
            "wall_clock": self.wall_clock,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "RunReport":
        return cls(d["kind"], d["regime"], d["seed"], d["config_hash"], d["scenes"],
                   ErrorMatrix.from_rows(d["errors"]), (d["fae"]["epe"], d["fae"]["d1"]),
                   None if d["bwt"] is None else (d["bwt"]["epe"], d["bwt"]["d1"]),
                   d["arr"], d["routing_accuracy"],
                   {int(k): v for k, v in d["paths"].items()}, d["prediction_hashes"],
                   d["wall_clock"])

    def comparable(self) -> dict:
        """Everything except wall-clock time."""
        d = self.to_dict()
        d.pop("wall_clock")
        return d


def _hash_array(a: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(a).tobytes()).hexdigest()[:16]


def _split_for_search(split: dict, val_fraction: float):
    n = len(split["left"])
    n_val = min(n - 1, max(1, int(round(n * val_fraction))))
    cut = n - n_val
    take = lambda sl: {k: v[sl] for k, v in split.items()}
    return take(slice(0, cut)), take(slice(cut, n))


def _unlabelled(split: dict) -> dict:
    """Copy of a split with its labels blanked out."""
    return {"left": split["left"], "right": split["right"],
            "disparity": np.zeros_like(split["disparity"]),
            "mask": np.zeros_like(split["mask"])}


def _labelled_data(config: RunConfig, stream: TaskStream, task: int):
    """(labelled training split, real scene dataset) for one step."""
    real = stream.training_data(task)
    if config.regime.mode == "supervised":
        return real.train_split(), real
    real_train = real.train_split()
    proxy = build_proxy_dataset(stream.source_data(task),
                                list(real_train["left"]) + list(real_train["right"]),
                                real.name)
    return proxy.train_split(), real


def _fit(model, config: RunConfig, labelled: dict, real: SceneDataset, seed: int):
    """Train a task model under the configured regime."""
    reg = config.regime
    opt = make_optimizer(model.trainable_parameters(), reg.lr)
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    if reg.mode == "supervised":
        for _ in range(reg.epochs):
            train_epoch(model, labelled, opt, rng, "supervised", reg.batch_size)
        return
    for _ in range(reg.pretrain_epochs):
        train_epoch(model, labelled, opt, rng, "supervised", reg.batch_size)
    adapt = _unlabelled(real.train_split())
    for _ in range(reg.adapt_epochs):
        train_epoch(model, adapt, opt, rng, "self", reg.batch_size)


def _search(config: RunConfig, topo, labelled: dict, task: int, seed: int):
    s_train, s_val = _split_for_search(labelled, config.search.val_fraction)
    trace = TraceWriter()
    gf, gm, supernet, _ = run_cell_search(
        s_train, s_val, topo, config.search.trials, config.search.epochs_per_trial,
        seed=derive_seed(seed, task, _SEARCH), trace=trace,
        batch_size=config.regime.batch_size, lr=config.regime.lr)
    return gf, gm, supernet, trace.records, (s_train, s_val)


def _evaluate_all(state: ContinualState, stream: TaskStream, task: int, model_for):
    topo = state.topology
    for i in range(1, task + 1):
        split = stream.test_data(i)
        pred = predict(model_for(i), split, state.config.regime.batch_size)
        e, d = score_predictions(pred, split, topo.max_disparity)
        state.errors.set(task, i, e, d)
        state.predictions[(task, i)] = pred
        logger.info("after task %d on task %d: EPE %.3f D1 %.2f%%", task, i, e, d)


def new_state(config: RunConfig) -> ContinualState:
    topo = topology_of(config)
    r = config.router
    bank = RouterBank(RepresentationEncoder(r.dim, seed=config.seed), r.tau, r.lam, r.bottleneck,
                      r.epochs, r.lr)
    return ContinualState(config, topo, GrowthLedger(topo), bank)


def learn_task(state: ContinualState, stream: TaskStream, task: int) -> ContinualState:
    """Search, grow, train and freeze one task, then update the router and error matrix."""
    config, topo, seed = state.config, state.topology, state.config.seed
    stream.begin_step(task)
    labelled, real = _labelled_data(config, stream, task)
    gf, gm, supernet, search_trace, (s_train, s_val) = _search(config, topo, labelled, task, seed)
    state.search_traces[task] = search_trace
    head = supernet.head
    new_cells = {j: (gf if topo.family_of(j) == "feature" else gm, c)
                 for j, c in enumerate(supernet.extract(gf, gm))}
    growth_trace: list = []
    path, _ = run_growth(
        s_train, s_val, state.ledger, task, new_cells, state.cells, head,
        trials=config.growth.trials, gamma=config.growth.gamma, c0=config.c0,
        target_fraction=config.target_fraction, scorer=config.growth.scorer,
        seed=derive_seed(seed, task, _GROWTH), batch_size=config.regime.batch_size,
        lr=config.regime.lr, trace=growth_trace)
    state.growth_traces[task] = growth_trace
    model = TaskModel(topo, head, [state.cells[c] for c in path], task, path)
    _fit(model, config, labelled, real, derive_seed(seed, task, _TRAIN))
    head.freeze()
    for c in path:
        state.cells[c].freeze()
    state.ledger.freeze_task(task)
    state.heads[task] = head
    train_router_entry(list(real.train_split()["left"]), state.router,
                       seed=derive_seed(seed, task, _ROUTER))
    _evaluate_all(state, stream, task, state.model_for)
    state.completed = task
    return state


def routing_accuracy(state: ContinualState, stream: TaskStream) -> float:
    hits = total = 0
    for i in range(1, state.completed + 1):
        routed = [route(im, state.router) for im in stream.test_data(i)["left"]]
        state.routing[i] = routed
        hits += sum(r == i for r in routed)
        total += len(routed)
    return hits / total


def _report(kind: str, config: RunConfig, errors: ErrorMatrix, predictions: dict, n: int,
            arr, acc, paths, wall) -> RunReport:
    return RunReport(kind, config.regime.mode, config.seed, config.config_hash(),
                     [s.name for s in config.scenes], errors, compute_fae(errors, n),
                     compute_bwt(errors, n) if n >= 2 else None, arr, acc, paths,
                     {f"{t},{i}": _hash_array(p) for (t, i), p in sorted(predictions.items())},
                     wall)


def report_from_state(state: ContinualState, stream: TaskStream) -> RunReport:
    n = state.completed
    arr = average_reuse_rate(state.ledger, n) if n >= 2 else None
    acc = routing_accuracy(state, stream)
    return _report("rag", state.config, state.errors, state.predictions, n, arr, acc,
                   dict(state.ledger.paths), state.wall_clock)


def run_continual(config: RunConfig, stream: TaskStream | None = None, checkpoint_dir=None,
                  resume_from=None, stop_after: int | None = None):
    """Learn every scene in order with search, growth and frozen history.

    Returns (RunReport, final state). With ``stop_after`` the run halts after
    that task and the report covers the tasks learned so far.
    """
    config.validate()
    stream = stream or TaskStream(config.scenes, config.regime.source_seed_offset)
    if resume_from is not None:
        state = load_checkpoint(resume_from)
        if state.config.config_hash() != config.config_hash():
            raise ValueError("checkpoint was written by a different config")
    else:
        state = new_state(config)
    last = len(config.scenes) if stop_after is None else min(stop_after, len(config.scenes))
    for task in range(state.completed + 1, last + 1):
        start = time.perf_counter()
        logger.info("learning task %d (%s)", task, config.scenes[task - 1].name)
        learn_task(state, stream, task)
        state.wall_clock += time.perf_counter() - start
        if checkpoint_dir is not None:
            save_checkpoint(state, Path(checkpoint_dir) / f"task_{task}")
    return report_from_state(state, stream), state


def run_finetune_baseline(config: RunConfig, stream: TaskStream | None = None):
    """One architecture searched on the first scene, then finetuned scene after scene."""
    config.validate()
    stream = stream or TaskStream(config.scenes, config.regime.source_seed_offset)
    topo, seed = topology_of(config), config.seed
    errors, predictions = ErrorMatrix(), {}
    start = time.perf_counter()
    model = None
    for task in range(1, len(config.scenes) + 1):
        stream.begin_step(task)
        labelled, real = _labelled_data(config, stream, task)
        if model is None:
            gf, gm, supernet, _, _ = _search(config, topo, labelled, task, seed)
            model = TaskModel(topo, supernet.head, supernet.extract(gf, gm), 1)
        _fit(model, config, labelled, real, derive_seed(seed, task, _TRAIN))
        for i in range(1, task + 1):
            split = stream.test_data(i)
            pred = predict(model, split, config.regime.batch_size)
            errors.set(task, i, *score_predictions(pred, split, topo.max_disparity))
            predictions[(task, i)] = pred
    n = len(config.scenes)
    return _report("finetune", config, errors, predictions, n, None, None, {},
                   time.perf_counter() - start)
