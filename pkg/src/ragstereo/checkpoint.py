"""Continual-run state and its on-disk checkpoint.

Layout of a checkpoint directory::

    manifest.json      version, progress, config, parameter manifest, checksums
    ledger.json        cells, owners and task paths
    genotypes.json     cell id -> genotype document
    params.bin         flat little-endian float64 of every parameter and buffer
    router/            router bank
    errors.csv         error matrix so far
    predictions.npz    test-set predictions per (model task, eval task)
    traces/            search and growth traces per task
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .arch import NetworkTopology
from .config import RunConfig
from .growth import GrowthLedger
from .metrics import ErrorMatrix
from .router import RouterBank
from .stereo_net import Cell, TaskHead, TaskModel

FORMAT_VERSION = 1


class CheckpointError(ValueError):
    def __init__(self, component: str, message: str):
        super().__init__(f"checkpoint {component}: {message}")
        self.component = component


@dataclass
class ContinualState:
    config: RunConfig
    topology: NetworkTopology
    ledger: GrowthLedger
    router: RouterBank
    cells: dict = field(default_factory=dict)         # cell id -> Cell
    heads: dict = field(default_factory=dict)         # task -> TaskHead
    errors: ErrorMatrix = field(default_factory=ErrorMatrix)
    predictions: dict = field(default_factory=dict)   # (model task, eval task) -> array
    search_traces: dict = field(default_factory=dict)
    growth_traces: dict = field(default_factory=dict)
    routing: dict = field(default_factory=dict)       # task -> list of routed task ids
    completed: int = 0
    wall_clock: float = 0.0

    def model_for(self, task: int) -> TaskModel:
        path = self.ledger.paths[task]
        return TaskModel(self.topology, self.heads[task], [self.cells[c] for c in path], task, path)


def _components(state: ContinualState):
    for cid in sorted(state.cells):
        yield f"cell:{cid}", state.cells[cid]
    for t in sorted(state.heads):
        yield f"head:{t}", state.heads[t]


def _flatten(state: ContinualState):
    chunks, manifest, offset = [], [], 0
    for name, module in _components(state):
        entries = []
        for key, tensor in module.state_dict().items():
            arr = tensor.detach().cpu().numpy().astype("<f8").ravel()
            entries.append({"key": key, "offset": offset, "length": int(arr.size),
                            "shape": list(tensor.shape), "dtype": str(tensor.dtype)})
            chunks.append(arr)
            offset += arr.size
        manifest.append({"component": name, "entries": entries})
    flat = np.concatenate(chunks) if chunks else np.zeros(0, "<f8")
    return flat, manifest


def save_checkpoint(state: ContinualState, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = Path(tempfile.mkdtemp(prefix=".ckpt-", dir=path.parent))
    try:
        flat, param_manifest = _flatten(state)
        (tmp / "params.bin").write_bytes(flat.tobytes())
        (tmp / "ledger.json").write_text(state.ledger.dumps())
        (tmp / "genotypes.json").write_text(json.dumps(
            {str(c): r.genotype.to_dict() for c, r in sorted(state.ledger.cells.items())}, indent=2))
        state.router.save(tmp / "router")
        (tmp / "errors.csv").write_text(state.errors.to_csv())
        np.savez(tmp / "predictions.npz",
                 **{f"t{t}_i{i}": p for (t, i), p in sorted(state.predictions.items())})
        (tmp / "traces").mkdir()
        for kind, traces in (("search", state.search_traces), ("growth", state.growth_traces)):
            for t, recs in traces.items():
                with open(tmp / "traces" / f"{kind}_t{t}.jsonl", "w") as fh:
                    for r in recs:
                        fh.write(json.dumps(r) + "\n")
        manifest = {
            "version": FORMAT_VERSION,
            "completed": state.completed,
            "wall_clock": state.wall_clock,
            "config": state.config.to_dict(),
            "topology": state.topology.to_dict(),
            "routing": {str(t): r for t, r in state.routing.items()},
            "parameters": param_manifest,
            "params_sha256": hashlib.sha256(flat.tobytes()).hexdigest(),
        }
        (tmp / "manifest.json").write_text(json.dumps(manifest, indent=2))
        if path.exists():
            shutil.rmtree(path)
        os.replace(tmp, path)
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    return path


def _read_json(path: Path, component: str):
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise CheckpointError(component, f"missing {path.name}") from None
    except json.JSONDecodeError as e:
        raise CheckpointError(component, f"corrupt {path.name} ({e})") from None


def load_checkpoint(path) -> ContinualState:
    """Rebuild the full run state; nothing is returned unless every part loads."""
    path = Path(path)
    manifest = _read_json(path / "manifest.json", "manifest")
    required = ("version", "completed", "config", "topology", "parameters", "params_sha256")
    if not isinstance(manifest, dict) or any(k not in manifest for k in required):
        raise CheckpointError("manifest", "corrupt (missing required fields)")
    if manifest["version"] != FORMAT_VERSION:
        raise CheckpointError("manifest", f"version {manifest['version']!r} unsupported, "
                                          f"expected {FORMAT_VERSION}")
    try:
        config = RunConfig.from_dict(manifest["config"])
        topology = NetworkTopology(**manifest["topology"])
    except (TypeError, ValueError) as e:
        raise CheckpointError("config", str(e)) from None
    try:
        ledger = GrowthLedger.from_dict(_read_json(path / "ledger.json", "ledger"))
    except (KeyError, TypeError, ValueError, RuntimeError) as e:
        raise CheckpointError("ledger", str(e)) from None

    try:
        raw = (path / "params.bin").read_bytes()
    except FileNotFoundError:
        raise CheckpointError("parameters", "missing params.bin") from None
    if hashlib.sha256(raw).hexdigest() != manifest["params_sha256"]:
        raise CheckpointError("parameters", "params.bin checksum mismatch")
    flat = np.frombuffer(raw, dtype="<f8")

    modules = {}
    for cid, rec in ledger.cells.items():
        modules[f"cell:{cid}"] = Cell(rec.genotype, topology.width_of(rec.layer))
    for t in ledger.tasks:
        modules[f"head:{t}"] = TaskHead(topology)
    listed = {c["component"] for c in manifest["parameters"]}
    if listed != set(modules):
        raise CheckpointError("parameters", f"manifest components {sorted(listed ^ set(modules))} "
                                            "do not match the ledger")
    for comp in manifest["parameters"]:
        module = modules[comp["component"]]
        target = module.state_dict()
        loaded = {}
        for e in comp["entries"]:
            if e["key"] not in target:
                raise CheckpointError("parameters", f"{comp['component']}: unknown key {e['key']}")
            end = e["offset"] + e["length"]
            if end > flat.size:
                raise CheckpointError("parameters", f"{comp['component']}: entry past end of data")
            ref = target[e["key"]]
            values = torch.from_numpy(flat[e["offset"]:end].copy()).to(ref.dtype)
            if values.numel() != ref.numel():
                raise CheckpointError("parameters", f"{comp['component']}.{e['key']}: size mismatch")
            loaded[e["key"]] = values.reshape(ref.shape)
        if set(loaded) != set(target):
            raise CheckpointError("parameters", f"{comp['component']}: incomplete state")
        module.load_state_dict(loaded)

    cells = {cid: modules[f"cell:{cid}"] for cid in ledger.cells}
    heads = {t: modules[f"head:{t}"] for t in ledger.tasks}
    for m in list(cells.values()) + list(heads.values()):
        m.freeze()

    try:
        router = RouterBank.load(path / "router")
    except (OSError, KeyError, ValueError) as e:
        raise CheckpointError("router", str(e)) from None
    try:
        errors = ErrorMatrix.from_csv((path / "errors.csv").read_text())
    except (OSError, ValueError) as e:
        raise CheckpointError("errors", str(e)) from None
    predictions = {}
    try:
        with np.load(path / "predictions.npz") as z:
            for key in z.files:
                t, i = key[1:].split("_i")
                predictions[(int(t), int(i))] = z[key]
    except (OSError, ValueError) as e:
        raise CheckpointError("predictions", str(e)) from None
    traces = {"search": {}, "growth": {}}
    tdir = path / "traces"
    if tdir.is_dir():
        for f in sorted(tdir.glob("*.jsonl")):
            kind, t = f.stem.split("_t")
            traces[kind][int(t)] = [json.loads(l) for l in f.read_text().splitlines() if l.strip()]

    return ContinualState(config, topology, ledger, router, cells, heads, errors, predictions,
                          traces["search"], traces["growth"],
                          {int(t): r for t, r in manifest.get("routing", {}).items()},
                          int(manifest["completed"]), float(manifest.get("wall_clock", 0.0)))
