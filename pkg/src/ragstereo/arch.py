"""Cell genotypes, candidate operation sets and the fixed base topology."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Sequence

# node indices: 0, 1 are the inputs, 2..4 intermediates, 5 the output
INPUT_NODES = (0, 1)
INTERMEDIATE_NODES = (2, 3, 4)
OUTPUT_NODE = 5
NODE_NAMES = {0: "input0", 1: "input1", 2: "n2", 3: "n3", 4: "n4", 5: "output"}

FAMILIES = ("feature", "matching")


class OperationKind(str, Enum):
    CONV2D_3X3 = "conv2d_3x3"
    CONV3D_3X3X3 = "conv3d_3x3x3"
    SKIP = "skip"


# candidate lists are ordered: index 0 is the convolution, index 1 the skip
CANDIDATES = {
    "feature": (OperationKind.CONV2D_3X3, OperationKind.SKIP),
    "matching": (OperationKind.CONV3D_3X3X3, OperationKind.SKIP),
}

KERNEL_VOLUME = {
    OperationKind.CONV2D_3X3: 9,
    OperationKind.CONV3D_3X3X3: 27,
    OperationKind.SKIP: 0,
}


def cell_edges() -> list[tuple[int, int]]:
    """All edges of the fully connected cell DAG, ordered by target then source."""
    return [(i, j) for j in INTERMEDIATE_NODES for i in range(j)]


EDGES = tuple(cell_edges())


@dataclass(frozen=True)
class CellGenotype:
    family: str
    edges: dict = field(default_factory=dict)

    @classmethod
    def from_choices(cls, family: str, choices: Sequence[int]) -> "CellGenotype":
        """Build a genotype from one candidate index per edge (in ``EDGES`` order)."""
        if len(choices) != len(EDGES):
            raise ValueError(f"expected {len(EDGES)} choices, got {len(choices)}")
        ops = CANDIDATES[family]
        return cls(family, {e: ops[int(k)] for e, k in zip(EDGES, choices)})

    @classmethod
    def uniform(cls, family: str, op: OperationKind) -> "CellGenotype":
        return cls(family, {e: op for e in EDGES})

    def choices(self) -> list[int]:
        ops = CANDIDATES[self.family]
        return [ops.index(self.edges[e]) for e in EDGES]

    def ordered_edges(self) -> list[tuple[tuple[int, int], OperationKind]]:
        return sorted(self.edges.items())

    def __hash__(self):
        return hash((self.family, tuple(self.ordered_edges())))

    def to_dict(self) -> dict:
        return {
            "family": self.family,
            "edges": [
                {"source": i, "target": j, "op": OperationKind(op).value}
                for (i, j), op in self.ordered_edges()
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "CellGenotype":
        edges = {
            (int(e["source"]), int(e["target"])): OperationKind(e["op"]) for e in doc["edges"]
        }
        return cls(doc["family"], edges)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def loads(cls, text: str) -> "CellGenotype":
        return cls.from_dict(json.loads(text))


@dataclass(frozen=True)
class Verdict:
    valid: bool
    reason: str = ""

    def __bool__(self):
        return self.valid


def validate_genotype(g: CellGenotype) -> Verdict:
    """Check the node/edge structure of ``g``; the first violated rule is reported."""
    if g.family not in FAMILIES:
        return Verdict(False, f"unknown family {g.family!r}")
    allowed = CANDIDATES[g.family]
    for (i, j), op in g.ordered_edges():
        if i not in NODE_NAMES or j not in NODE_NAMES:
            return Verdict(False, f"unknown node in edge ({i}, {j})")
        if i >= j:
            return Verdict(False, f"non-ascending edge ({NODE_NAMES[i]} -> {NODE_NAMES[j]})")
        if j not in INTERMEDIATE_NODES:
            return Verdict(False, f"edge into non-intermediate node {NODE_NAMES[j]}")
        if op not in allowed:
            return Verdict(False, f"operation {op} not allowed in a {g.family} cell")
    for i, j in EDGES:
        if (i, j) not in g.edges:
            return Verdict(False, f"missing edge ({NODE_NAMES[i]} -> {NODE_NAMES[j]})")
    return Verdict(True)


@dataclass(frozen=True)
class NetworkTopology:
    feature_layers: int = 4
    matching_layers: int = 8
    feature_channels: int = 8
    matching_channels: int = 4
    max_disparity: int = 24
    stem_stride: int = 3
    # (kernel, stride) of each stem conv
    feature_stems: tuple = ((3, 3), (3, 1), (3, 1))
    matching_stems: tuple = ((3, 1), (3, 1))

    @property
    def num_layers(self) -> int:
        return self.feature_layers + self.matching_layers

    @property
    def max_disp_feat(self) -> int:
        return self.max_disparity // self.stem_stride

    def family_of(self, layer: int) -> str:
        if not 0 <= layer < self.num_layers:
            raise IndexError(f"layer {layer} outside [0, {self.num_layers})")
        return "feature" if layer < self.feature_layers else "matching"

    def channels(self) -> list[int]:
        return [self.width_of(j) for j in range(self.num_layers)]

    def width_of(self, layer: int) -> int:
        if self.family_of(layer) == "feature":
            return self.feature_channels
        return self.matching_channels

    def to_dict(self) -> dict:
        return {
            "feature_layers": self.feature_layers,
            "matching_layers": self.matching_layers,
            "feature_channels": self.feature_channels,
            "matching_channels": self.matching_channels,
            "max_disparity": self.max_disparity,
        }


def build_base_topology(**overrides) -> NetworkTopology:
    """The fixed 4-layer feature / 8-layer matching topology."""
    return NetworkTopology(**overrides)


def _edge_params(op: OperationKind, c_in: int, c_out: int) -> int:
    k = KERNEL_VOLUME[OperationKind(op)]
    if k == 0:
        return 0
    return k * c_in * c_out + c_out


def count_parameters(cells: Iterable[CellGenotype], channels: Sequence[int] | int) -> int:
    """Trainable scalars on the conv edges of ``cells``.

    ``channels`` is one width per cell (or a single width used for all). Skip
    edges carry no parameters.
    """
    cells = list(cells)
    if isinstance(channels, int):
        channels = [channels] * len(cells)
    if len(channels) != len(cells):
        raise ValueError(f"got {len(channels)} channel widths for {len(cells)} cells")
    total = 0
    for layer, (g, c) in enumerate(zip(cells, channels)):
        if c <= 0:
            raise ValueError(f"layer {layer}: channel width must be positive, got {c}")
        for op in g.edges.values():
            if g.family == "feature" and op == OperationKind.CONV3D_3X3X3:
                raise ValueError(f"layer {layer}: 3D conv in a feature cell")
            total += _edge_params(op, c, c)
    return total


def full_model_parameters(topology: NetworkTopology) -> int:
    """Parameter total of a base model whose cells are all convolutions."""
    cells = [
        CellGenotype.uniform(topology.family_of(j), CANDIDATES[topology.family_of(j)][0])
        for j in range(topology.num_layers)
    ]
    return count_parameters(cells, topology.channels())
