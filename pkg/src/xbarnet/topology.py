"""Compile block/stride layer specifications into a graph of crossbar cores.

Layer 1 tiles the input image with square pixel blocks; every later layer
tiles the core grid of the layer below with square blocks of cores.  Each
block becomes one core with at most 256 axons and 256 neurons.

Axon sources are kept as integer index arrays, one row per core:

* layer 1: flat pixel index ``(row * width + col) * channels + channel``
* layer k > 1: flat neuron index ``lower_core * 256 + neuron`` into the
  layer below, cores numbered row-major over the grid
* ``-1`` marks an unused axon
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import TopologyError

AXONS_PER_CORE = 256
NEURONS_PER_CORE = 256
UNUSED = -1


class Unit(str, Enum):
    PIXELS = "pixels"
    CORES = "cores"


@dataclass(frozen=True)
class LayerSpec:
    block_size: int
    stride: int
    unit: Unit = Unit.CORES

    def __post_init__(self):
        object.__setattr__(self, "unit", Unit(self.unit))
        if self.block_size < 1 or self.stride < 1:
            raise TopologyError(f"block size and stride must be positive: {self}")
        if self.stride > self.block_size:
            raise TopologyError(
                f"stride {self.stride} exceeds block size {self.block_size}")

    def to_dict(self) -> dict:
        return {"blockSize": self.block_size, "stride": self.stride,
                "unit": self.unit.value}


@dataclass(frozen=True)
class TopologySpec:
    """Parsed topology spec file (also the form stored inside network files)."""

    input_shape: tuple[int, int, int]
    layers: tuple[LayerSpec, ...]
    template: str = "s1"
    classes: int = 10

    def to_dict(self) -> dict:
        h, w, ch = self.input_shape
        return {
            "input": {"h": h, "w": w, "ch": ch},
            "layers": [spec.to_dict() for spec in self.layers],
            "template": self.template,
            "classes": self.classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TopologySpec":
        try:
            inp = d["input"]
            input_shape = (int(inp["h"]), int(inp["w"]), int(inp.get("ch", 1)))
            raw_layers = list(d["layers"])
        except (KeyError, TypeError, ValueError) as exc:
            raise TopologyError(f"malformed topology spec: missing or bad {exc}") from exc
        layers = []
        for i, x in enumerate(raw_layers):
            try:
                layers.append(LayerSpec(int(x["blockSize"]), int(x["stride"]),
                                        Unit(x.get("unit", "pixels" if i == 0 else "cores"))))
            except (KeyError, TypeError, ValueError, TopologyError) as exc:
                raise TopologyError(f"layer {i + 1}: malformed layer spec: {exc}") from exc
        try:
            classes = int(d.get("classes", 10))
        except (TypeError, ValueError) as exc:
            raise TopologyError(f"malformed topology spec: classes {exc}") from exc
        return cls(input_shape=input_shape, layers=tuple(layers),
                   template=d.get("template", "s1"), classes=classes)

    def digest(self) -> str:
        text = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()


def _preset(blocks, template="s1"):
    layers = tuple(
        LayerSpec(b, s, Unit.PIXELS if i == 0 else Unit.CORES)
        for i, (b, s) in enumerate(blocks))
    return TopologySpec((28, 28, 1), layers, template, 10)


PRESETS = {
    "mnist-small": _preset([(16, 12), (2, 1)]),
    "mnist-large": _preset([(16, 4), (2, 1), (2, 1), (2, 1)]),
}


def load_topology_spec(name_or_path: str | Path) -> TopologySpec:
    """Resolve a preset name or read a topology spec JSON file."""
    if str(name_or_path) in PRESETS:
        return PRESETS[str(name_or_path)]
    try:
        d = json.loads(Path(name_or_path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise TopologyError(f"cannot read topology spec {name_or_path}: {exc}") from exc
    return TopologySpec.from_dict(d)


@dataclass
class LayerPlan:
    grid_rows: int
    grid_cols: int
    sources: np.ndarray  # (cores, axons) int64
    neurons_per_core: int = NEURONS_PER_CORE

    @property
    def num_cores(self) -> int:
        return self.grid_rows * self.grid_cols

    def used_axons(self) -> np.ndarray:
        return (self.sources != UNUSED).sum(axis=1)


@dataclass
class TopologyPlan:
    input_shape: tuple[int, int, int]
    layers: list[LayerPlan]
    class_assignment: np.ndarray  # output neuron (flat) -> class
    num_classes: int
    spec: TopologySpec | None = field(default=None, repr=False)

    @property
    def total_cores(self) -> int:
        return sum(layer.num_cores for layer in self.layers)

    @property
    def grids(self) -> list[tuple[int, int]]:
        return [(layer.grid_rows, layer.grid_cols) for layer in self.layers]

    def axon_source(self, layer: int, core: int, axon: int):
        """Describe where an axon's spikes come from.

        Returns ``("pixel", r, c, ch)``, ``("neuron", layer, core_row,
        core_col, neuron)`` or ``None`` for an unused axon.  Layers are
        zero-based.
        """
        src = int(self.layers[layer].sources[core, axon])
        if src == UNUSED:
            return None
        if layer == 0:
            _, w, ch = self.input_shape
            pix, chan = divmod(src, ch)
            r, c = divmod(pix, w)
            return ("pixel", r, c, chan)
        lower = self.layers[layer - 1]
        k, n = divmod(src, lower.neurons_per_core)
        kr, kc = divmod(k, lower.grid_cols)
        return ("neuron", layer - 1, kr, kc, n)

    def summary(self) -> str:
        lines = [f"layers: {len(self.layers)}, cores: {self.total_cores}"]
        for i, layer in enumerate(self.layers):
            used = layer.used_axons()
            lines.append(
                f"  layer {i + 1}: grid {layer.grid_rows}x{layer.grid_cols} "
                f"({layer.num_cores} cores), axons used {used.min()}-{used.max()}")
        return "\n".join(lines)


def tile_positions(extent: int, block: int, stride: int, layer: int | None = None) -> list[int]:
    """Offsets ``0, stride, 2*stride, ...`` of blocks that fit inside ``extent``."""
    where = f"layer {layer}: " if layer is not None else ""
    if stride < 1:
        raise TopologyError(f"{where}stride must be >= 1, got {stride}")
    if block > extent:
        raise TopologyError(f"{where}block {block} larger than extent {extent}")
    return list(range(0, extent - block + 1, stride))


def route_interlayer(lower_grid: tuple[int, int], block_cores: int, stride: int,
                     layer: int | None = None) -> tuple[tuple[int, int], np.ndarray]:
    """Wire the neurons of a lower core grid to the axons of the upper grid.

    Every lower core's 256 neurons are cut into ``block_cores**2`` contiguous
    groups.  The group with index ``dr * block_cores + dc`` feeds the upper
    core that sees this lower core at relative block position ``(dr, dc)``,
    landing on the same axon indices.  Groups without such an upper core stay
    unrouted.

    Returns the upper grid dimensions and its ``(cores, 256)`` source array.
    """
    where = f"layer {layer}: " if layer is not None else ""
    groups = block_cores * block_cores
    if NEURONS_PER_CORE % groups:
        raise TopologyError(
            f"{where}block of {block_cores}x{block_cores} cores does not divide "
            f"{NEURONS_PER_CORE} neurons into equal groups")
    size = NEURONS_PER_CORE // groups
    rows = tile_positions(lower_grid[0], block_cores, stride, layer)
    cols = tile_positions(lower_grid[1], block_cores, stride, layer)
    sources = np.full((len(rows) * len(cols), AXONS_PER_CORE), UNUSED, dtype=np.int64)
    for u, r0 in enumerate(rows):
        for v, c0 in enumerate(cols):
            k = u * len(cols) + v
            for dr in range(block_cores):
                for dc in range(block_cores):
                    q = dr * block_cores + dc
                    lower = (r0 + dr) * lower_grid[1] + (c0 + dc)
                    span = np.arange(q * size, (q + 1) * size)
                    sources[k, span] = lower * NEURONS_PER_CORE + span
    return (len(rows), len(cols)), sources


def assign_classes(output_neurons: int, num_classes: int) -> np.ndarray:
    """Round-robin readout: neuron ``n`` votes for class ``n % num_classes``."""
    if num_classes < 1 or num_classes > output_neurons:
        raise TopologyError(
            f"cannot spread {num_classes} classes over {output_neurons} output neurons")
    return np.arange(output_neurons, dtype=np.int64) % num_classes


def _first_layer(spec: LayerSpec, input_shape) -> LayerPlan:
    h, w, ch = input_shape
    b = spec.block_size
    if b * b * ch > AXONS_PER_CORE:
        raise TopologyError(
            f"layer 1: block {b}x{b} with {ch} channel(s) needs {b * b * ch} axons "
            f"> {AXONS_PER_CORE}")
    rows = tile_positions(h, b, spec.stride, 1)
    cols = tile_positions(w, b, spec.stride, 1)
    dy, dx, cc = np.meshgrid(np.arange(b), np.arange(b), np.arange(ch), indexing="ij")
    sources = np.full((len(rows) * len(cols), AXONS_PER_CORE), UNUSED, dtype=np.int64)
    for u, r0 in enumerate(rows):
        for v, c0 in enumerate(cols):
            flat = ((r0 + dy) * w + (c0 + dx)) * ch + cc
            sources[u * len(cols) + v, : b * b * ch] = flat.ravel()
    return LayerPlan(len(rows), len(cols), sources)


def plan_network(specs: Sequence[LayerSpec], input_shape: tuple[int, int, int],
                 num_classes: int = 10) -> TopologyPlan:
    if not specs:
        raise TopologyError("at least one layer is required")
    for i, spec in enumerate(specs):
        expected = Unit.PIXELS if i == 0 else Unit.CORES
        if spec.unit != expected:
            raise TopologyError(f"layer {i + 1}: unit must be {expected.value}")
    layers = [_first_layer(specs[0], input_shape)]
    for i, spec in enumerate(specs[1:], start=2):
        lower = layers[-1]
        (gr, gc), sources = route_interlayer(
            (lower.grid_rows, lower.grid_cols), spec.block_size, spec.stride, i)
        layers.append(LayerPlan(gr, gc, sources))
    out_neurons = layers[-1].num_cores * NEURONS_PER_CORE
    return TopologyPlan(tuple(input_shape), layers,
                        assign_classes(out_neurons, num_classes), num_classes)


def plan_from_spec(spec: TopologySpec) -> TopologyPlan:
    plan = plan_network(spec.layers, spec.input_shape, spec.classes)
    plan.spec = spec
    return plan


def validate(plan: TopologyPlan) -> list[str]:
    """Audit a plan; an empty list means it is deployable."""
    problems = []
    h, w, ch = plan.input_shape
    n_inputs = h * w * ch
    for li, layer in enumerate(plan.layers):
        src = np.asarray(layer.sources)
        if src.shape[0] != layer.num_cores:
            problems.append(
                f"layer {li + 1}: {src.shape[0]} source rows for {layer.num_cores} cores")
        if layer.neurons_per_core > NEURONS_PER_CORE:
            problems.append(
                f"layer {li + 1}: {layer.neurons_per_core} neurons per core "
                f"> {NEURONS_PER_CORE}")
        limit = n_inputs if li == 0 else (
            plan.layers[li - 1].num_cores * plan.layers[li - 1].neurons_per_core)
        for k in range(src.shape[0]):
            used = int((src[k] != UNUSED).sum())
            if used > AXONS_PER_CORE:
                problems.append(
                    f"layer {li + 1} core {k}: {used} used axons > {AXONS_PER_CORE}")
            bad = src[k][(src[k] < UNUSED) | (src[k] >= limit)]
            if bad.size:
                problems.append(
                    f"layer {li + 1} core {k}: {bad.size} axon(s) with invalid source")
        if li > 0:
            flat = src[src != UNUSED]
            vals, counts = np.unique(flat, return_counts=True)
            for v in vals[counts > 1]:
                problems.append(
                    f"layer {li + 1}: fan-out violation, lower neuron {int(v)} "
                    f"feeds {int(counts[vals == v][0])} axons")
    out = plan.layers[-1].num_cores * plan.layers[-1].neurons_per_core
    ca = np.asarray(plan.class_assignment)
    if ca.shape != (out,):
        problems.append(f"class assignment covers {ca.size} neurons, expected {out}")
    elif ca.size and (ca.min() < 0 or ca.max() >= plan.num_classes):
        problems.append("class assignment refers to an unknown class")
    return problems
