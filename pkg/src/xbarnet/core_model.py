"""Crossbar core types in continuous (training) and discrete (deployed) form."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, SchemaViolationError
from .topology import AXONS_PER_CORE, NEURONS_PER_CORE, TopologyPlan, TopologySpec

TEMPLATES = {
    "s1": (-1, 1),
    "s2": (-2, -1, 1, 2),
}


@dataclass(frozen=True)
class SynapseTemplate:
    """Per-axon synaptic strengths, assigned cyclically by axon index."""

    weights: tuple[int, ...]
    name: str = "custom"

    def __post_init__(self):
        w = tuple(int(x) for x in self.weights)
        if not w:
            raise ConfigError("synapse template must not be empty")
        if any(x == 0 or abs(x) > 8 for x in w):
            raise ConfigError(f"template weights must be nonzero integers in [-8, 8]: {w}")
        object.__setattr__(self, "weights", w)

    @classmethod
    def named(cls, name: str) -> "SynapseTemplate":
        try:
            return cls(TEMPLATES[name], name)
        except KeyError:
            raise ConfigError(f"unknown template {name!r}; choose from {sorted(TEMPLATES)}")

    @classmethod
    def from_json(cls, obj) -> "SynapseTemplate":
        if isinstance(obj, str):
            return cls.named(obj)
        return cls(tuple(obj["weights"]), obj.get("name", "custom"))

    def to_json(self) -> dict:
        return {"name": self.name, "weights": list(self.weights)}

    def axon_strengths(self, n_axons: int = AXONS_PER_CORE) -> np.ndarray:
        """Vector of strengths for axons ``0..n_axons-1``."""
        w = np.asarray(self.weights, dtype=np.int64)
        return w[np.arange(n_axons) % len(w)]

    @property
    def max_abs(self) -> int:
        return max(abs(x) for x in self.weights)


def template_weights(t: SynapseTemplate, axon_index: int) -> int:
    if not 0 <= axon_index < AXONS_PER_CORE:
        raise IndexError(f"axon index {axon_index} out of range")
    return t.weights[axon_index % len(t.weights)]


def effective_weight(cbin: int, s: int) -> int:
    return cbin * s


def binarize_crossbar(c) -> np.ndarray:
    """Connected (1) iff the connection value is strictly above 0.5."""
    c = np.asarray(c, dtype=np.float64)
    if not np.all((c >= 0.0) & (c <= 1.0)):
        raise ValueError("connection values outside [0, 1]: corrupted parameter state")
    return (c > 0.5).astype(np.uint8)


def quantize_bias(b):
    """Round to nearest integer, ties away from zero.

    Works on scalars (returns ``int``) and arrays (returns int64 array).
    """
    arr = np.asarray(b, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError("non-finite bias cannot be quantized")
    q = (np.sign(arr) * np.floor(np.abs(arr) + 0.5)).astype(np.int64)
    if q.ndim == 0:
        return int(q)
    return q


@dataclass
class CoreParams:
    """Trainable state of one core.  ``c`` is axon-major (axons x neurons)."""

    c: np.ndarray
    s: np.ndarray
    b: np.ndarray
    num_axons_used: int = AXONS_PER_CORE
    num_neurons_used: int = NEURONS_PER_CORE

    @classmethod
    def fresh(cls, template: SynapseTemplate, rng: np.random.Generator,
              num_axons_used=AXONS_PER_CORE, num_neurons_used=NEURONS_PER_CORE):
        c = rng.random((AXONS_PER_CORE, NEURONS_PER_CORE))
        c[num_axons_used:, :] = 0.0
        c[:, num_neurons_used:] = 0.0
        s = np.repeat(template.axon_strengths()[:, None], NEURONS_PER_CORE, axis=1)
        return cls(c, s, np.zeros(NEURONS_PER_CORE), num_axons_used, num_neurons_used)

    def binarized(self) -> np.ndarray:
        return binarize_crossbar(self.c)


@dataclass
class DeployedCore:
    cbin: np.ndarray  # uint8 (axons, neurons)
    s: np.ndarray     # int64 (axons,) axon-type strengths
    leak: np.ndarray  # int64 (neurons,)

    def effective_weights(self) -> np.ndarray:
        return self.cbin.astype(np.int64) * self.s[:, None]


@dataclass
class ContinuousNetwork:
    """All core parameters of a network under training.

    Cores of one layer are stacked: ``c[l]`` has shape ``(cores, 256, 256)``
    and ``b[l]`` has shape ``(cores, 256)``.
    """

    plan: TopologyPlan
    template: SynapseTemplate
    c: list[np.ndarray]
    b: list[np.ndarray]
    seed: int = 0

    def core(self, layer: int, k: int) -> CoreParams:
        s = np.repeat(self.template.axon_strengths()[:, None], NEURONS_PER_CORE, axis=1)
        used = int(self.plan.layers[layer].used_axons()[k])
        return CoreParams(self.c[layer][k], s, self.b[layer][k], used,
                          self.plan.layers[layer].neurons_per_core)

    def axon_masks(self) -> list[np.ndarray]:
        """Per layer ``(cores, 256, 1)`` float mask of axons that have a source."""
        return [(layer.sources >= 0)[:, :, None].astype(np.float64)
                for layer in self.plan.layers]

    def copy(self) -> "ContinuousNetwork":
        return ContinuousNetwork(self.plan, self.template,
                                 [x.copy() for x in self.c],
                                 [x.copy() for x in self.b], self.seed)


@dataclass
class DeployedNetwork:
    plan: TopologyPlan
    template: SynapseTemplate
    cbin: list[np.ndarray]  # per layer uint8 (cores, 256, 256)
    leak: list[np.ndarray]  # per layer int64 (cores, 256)
    meta: dict = field(default_factory=dict)

    @property
    def class_assignment(self) -> np.ndarray:
        return self.plan.class_assignment

    @property
    def num_classes(self) -> int:
        return self.plan.num_classes

    def core(self, layer: int, k: int) -> DeployedCore:
        return DeployedCore(self.cbin[layer][k], self.template.axon_strengths(),
                            self.leak[layer][k])

    def layer_weights(self, layer: int) -> np.ndarray:
        """Integer effective weights of a layer, ``(cores, 256, 256)`` int64."""
        s = self.template.axon_strengths()
        return self.cbin[layer].astype(np.int64) * s[None, :, None]

    def check(self) -> None:
        for li, (cb, lk) in enumerate(zip(self.cbin, self.leak)):
            if cb.dtype != np.uint8 or not np.all(cb <= 1):
                raise SchemaViolationError(f"layer {li + 1}: crossbar entries must be bits")
            if not np.issubdtype(lk.dtype, np.integer):
                raise SchemaViolationError(f"layer {li + 1}: leaks must be integers")


def same_topology(a, b) -> bool:
    sa: TopologySpec | None = a.plan.spec
    sb: TopologySpec | None = b.plan.spec
    if sa is not None and sb is not None:
        return sa.input_shape == sb.input_shape and sa.layers == sb.layers \
            and sa.classes == sb.classes
    return a.plan.grids == b.plan.grids and a.plan.num_classes == b.plan.num_classes

