"""Weight/bias histograms, accuracy-vs-ticks tables and a linear energy model."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .core_model import DeployedNetwork
from .deploy_sim import EvalReport
from .errors import ConfigError

BIAS_EDGES = np.round(np.arange(-4.0, 4.0 + 0.125, 0.25), 2)
TICK_AXIS = (1, 2, 4, 8, 16, 32, 64)


@dataclass
class WeightHistogram:
    values: list[int]                 # effective weight values counted
    weight_counts: list[np.ndarray]   # per layer, aligned with ``values``
    bias_edges: np.ndarray            # 33 edges over [-4, 4]
    bias_counts: list[np.ndarray]     # per layer: [underflow, 32 bins, overflow]

    def zero_fraction(self, layer: int | None = None) -> float:
        counts = self.weight_counts if layer is None else [self.weight_counts[layer]]
        total = sum(int(c.sum()) for c in counts)
        zero = sum(int(c[self.values.index(0)]) for c in counts)
        return zero / total if total else 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "kind", "value", "count"])
        for li, counts in enumerate(self.weight_counts):
            for v, c in zip(self.values, counts):
                w.writerow([li + 1, "weight", v, int(c)])
        labels = (["<-4"] + [f"[{a:g},{b:g})" for a, b in zip(self.bias_edges[:-1],
                                                             self.bias_edges[1:])] + [">=4"])
        for li, counts in enumerate(self.bias_counts):
            for lab, c in zip(labels, counts):
                w.writerow([li + 1, "bias", lab, int(c)])
        return buf.getvalue()


def consumed_neurons(plan, layer: int) -> np.ndarray:
    """Bool ``(cores, neurons)`` mask of neurons whose spikes go somewhere."""
    lp = plan.layers[layer]
    mask = np.zeros(lp.num_cores * lp.neurons_per_core, dtype=bool)
    if layer + 1 < len(plan.layers):
        src = plan.layers[layer + 1].sources
        mask[src[src >= 0]] = True
    else:
        mask[:plan.class_assignment.size] = True
    return mask.reshape(lp.num_cores, lp.neurons_per_core)


def weight_histogram(net: DeployedNetwork) -> WeightHistogram:
    """Tally effective weights ``cbin * s`` and leaks per layer.

    Only synapses between an axon with a source and a neuron whose output is
    consumed are counted; leaks likewise cover consumed neurons only.
    """
    m = max(2, net.template.max_abs)
    values = list(range(-m, m + 1))
    weight_counts, bias_counts = [], []
    for li, layer in enumerate(net.plan.layers):
        eff = net.layer_weights(li)
        axons = layer.sources >= 0
        neurons = consumed_neurons(net.plan, li)
        used = axons[:, :, None] & neurons[:, None, :]
        picked = eff[used]
        weight_counts.append(np.array([(picked == v).sum() for v in values], dtype=np.int64))
        leak = net.leak[li][neurons].astype(np.float64)
        inner, _ = np.histogram(leak[(leak >= -4) & (leak < 4)], bins=BIAS_EDGES)
        bias_counts.append(np.concatenate([[np.sum(leak < -4)], inner, [np.sum(leak >= 4)]]))
    return WeightHistogram(values, weight_counts, BIAS_EDGES, bias_counts)


@dataclass(frozen=True)
class EnergyModel:
    """Static energy per core per tick plus energy per neuron spike (arbitrary units)."""

    e_static_per_core_tick: float = 1.0
    e_per_spike: float = 0.0

    def __post_init__(self):
        if not (self.e_static_per_core_tick >= 0 and self.e_per_spike >= 0):
            raise ConfigError(f"energy constants must be non-negative: {self}")


def energy_estimate(model: EnergyModel, cores: int, ticks: int, ensemble_size: int,
                    mean_spikes_per_core_tick: float) -> float:
    if min(cores, ticks, ensemble_size, mean_spikes_per_core_tick) < 0:
        raise ConfigError("energy inputs must be non-negative")
    core_ticks = ensemble_size * ticks * cores
    return core_ticks * model.e_static_per_core_tick \
        + core_ticks * mean_spikes_per_core_tick * model.e_per_spike


REPORT_FIELDS = ["config", "ticks", "members", "cores", "accuracy",
                 "mean_spikes_per_core_tick", "energy"]


@dataclass
class ReportRow:
    config: str
    ticks: int
    members: int
    cores: int
    accuracy: float
    mean_spikes_per_core_tick: float

    @classmethod
    def from_eval(cls, r: EvalReport) -> "ReportRow":
        return cls(r.ensemble_id, r.ticks, r.members, r.cores, r.accuracy,
                   r.mean_spikes_per_core_tick)


def read_eval_csv(text: str) -> list[ReportRow]:
    rows = []
    for rec in csv.DictReader(io.StringIO(text)):
        rows.append(ReportRow(rec["ensemble"], int(rec["ticks"]), int(rec["members"]),
                              int(rec["cores"]), float(rec["accuracy"]),
                              float(rec["mean_spikes_per_core_tick"])))
    return rows


def accuracy_report(rows: Sequence[EvalReport | ReportRow], energy: EnergyModel) -> str:
    """CSV table of accuracy and modelled energy, one row per (config, ticks)."""
    if not rows:
        raise ConfigError("no evaluation rows to report")
    rows = [r if isinstance(r, ReportRow) else ReportRow.from_eval(r) for r in rows]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_FIELDS)
    for r in sorted(rows, key=lambda r: (r.config, r.ticks)):
        e = energy_estimate(energy, r.cores, r.ticks, r.members, r.mean_spikes_per_core_tick)
        w.writerow([r.config, r.ticks, r.members, r.cores, f"{r.accuracy:.6f}",
                    f"{r.mean_spikes_per_core_tick:.6f}", f"{e:.6f}"])
    return buf.getvalue()
