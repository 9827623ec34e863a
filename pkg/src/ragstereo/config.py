"""Run configuration: TOML sections, dotted-name overrides and validation."""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field, fields

import tomli

from .scenes import SceneSpec

REGIMES = ("supervised", "self")


@dataclass
class SearchConfig:
    trials: int = 40
    epochs_per_trial: int = 1
    val_fraction: float = 0.25


@dataclass
class GrowthConfig:
    trials: int = 60
    gamma: float = 2.0
    c0: int | None = None              # regime default when unset
    target_fraction: float | None = None
    scorer: str = "sqrt_log"


@dataclass
class RouterConfig:
    lam: float = 0.1
    tau: float = 2.0
    epochs: int = 200
    bottleneck: int = 16
    dim: int = 64
    lr: float = 1e-2


@dataclass
class RegimeConfig:
    mode: str = "supervised"
    epochs: int = 30              # supervised training epochs per task
    pretrain_epochs: int = 20     # self regime: supervised epochs on proxy data
    adapt_epochs: int = 10        # self regime: photometric epochs on the real scene
    lr: float = 1e-3
    batch_size: int = 8
    source_seed_offset: int = 1000


@dataclass
class ModelConfig:
    feature_layers: int = 4
    matching_layers: int = 8
    feature_channels: int = 8
    matching_channels: int = 4
    max_disparity: int = 24


# regime defaults for growth
GROWTH_DEFAULTS = {"supervised": {"c0": 10, "target_fraction": 0.5},
                   "self": {"c0": 5, "target_fraction": 1.0}}


@dataclass
class RunConfig:
    scenes: list = field(default_factory=list)
    search: SearchConfig = field(default_factory=SearchConfig)
    growth: GrowthConfig = field(default_factory=GrowthConfig)
    router: RouterConfig = field(default_factory=RouterConfig)
    regime: RegimeConfig = field(default_factory=RegimeConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int | None = None

    @property
    def c0(self) -> int:
        g = self.growth.c0
        return GROWTH_DEFAULTS[self.regime.mode]["c0"] if g is None else g

    @property
    def target_fraction(self) -> float:
        g = self.growth.target_fraction
        return GROWTH_DEFAULTS[self.regime.mode]["target_fraction"] if g is None else g

    def validate(self) -> "RunConfig":
        problems = []
        if len(self.scenes) < 2:
            problems.append("need at least 2 scenes")
        for s in self.scenes:
            try:
                s.validate()
            except ValueError as e:
                problems.append(str(e))
            if s.max_disparity != self.model.max_disparity:
                problems.append(f"scene {s.name!r}: max_disparity differs from model")
        if self.regime.mode not in REGIMES:
            problems.append(f"regime.mode must be one of {REGIMES}, got {self.regime.mode!r}")
        if self.seed is None:
            problems.append("seed is required")
        if self.search.trials < 1 or self.growth.trials < 1:
            problems.append("search.trials and growth.trials must be >= 1")
        if self.search.epochs_per_trial < 1:
            problems.append("search.epochs_per_trial must be >= 1")
        if not 0 < self.search.val_fraction < 1:
            problems.append("search.val_fraction must be in (0, 1)")
        if self.growth.gamma < 1:
            problems.append("growth.gamma must be >= 1")
        if self.growth.scorer not in ("sqrt_log", "linear", "error"):
            problems.append(f"unknown growth.scorer {self.growth.scorer!r}")
        if self.model.max_disparity % 3:
            problems.append("model.max_disparity must be a multiple of 3")
        for s in self.scenes:
            n_train = s.pairs - s.test_pairs
            if n_train < 2:
                problems.append(f"scene {s.name!r}: need at least 2 training pairs")
        if problems:
            raise ValueError("invalid config: " + "; ".join(problems))
        return self

    def to_dict(self) -> dict:
        out = {"scenes": [s.to_dict() for s in self.scenes], "seed": self.seed}
        for name in ("search", "growth", "router", "regime", "model"):
            sec = getattr(self, name)
            out[name] = {f.name: getattr(sec, f.name) for f in fields(sec)}
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = copy.deepcopy(d)
        sections = {"search": SearchConfig, "growth": GrowthConfig, "router": RouterConfig,
                    "regime": RegimeConfig, "model": ModelConfig}
        kw = {}
        for name, typ in sections.items():
            raw = d.pop(name, {}) or {}
            known = {f.name for f in fields(typ)}
            unknown = set(raw) - known
            if unknown:
                raise ValueError(f"unknown keys in [{name}]: {sorted(unknown)}")
            kw[name] = typ(**raw)
        kw["scenes"] = _parse_scenes(d.pop("scenes", []))
        kw["seed"] = d.pop("seed", None)
        if d:
            raise ValueError(f"unknown config sections: {sorted(d)}")
        return cls(**kw)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _parse_scenes(raw) -> list:
    """Accept a list of scene tables, or a table of shared defaults plus a ``list`` array."""
    if isinstance(raw, dict):
        shared = {k: v for k, v in raw.items() if k != "list"}
        items = [dict(shared, **s) for s in raw.get("list", [])]
    else:
        items = list(raw)
    return [s if isinstance(s, SceneSpec) else SceneSpec.from_dict(s) for s in items]


def _coerce(text: str):
    try:
        return tomli.loads(f"v = {text}")["v"]
    except tomli.TOMLDecodeError:
        return text


def apply_override(doc: dict, dotted: str, value):
    """Set ``doc[a][b]...`` from ``a.b...``; integer parts index into lists."""
    parts = dotted.split(".")
    node = doc
    for i, key in enumerate(parts[:-1]):
        if isinstance(node, list):
            node = node[int(key)]
            continue
        nxt = node.get(key)
        if nxt is None:
            nxt = [] if parts[i + 1].isdigit() else {}
            node[key] = nxt
        node = nxt
    last = parts[-1]
    value = _coerce(value) if isinstance(value, str) else value
    if isinstance(node, list):
        node[int(last)] = value
    else:
        node[last] = value
    return doc


def load_config(path=None, overrides=None) -> RunConfig:
    doc = {}
    if path is not None:
        with open(path, "rb") as f:
            doc = tomli.load(f)
    for key, value in (overrides or {}).items():
        apply_override(doc, key, value)
    return RunConfig.from_dict(doc)
