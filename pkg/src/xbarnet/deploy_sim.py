"""Discrete deployment and tick-based spiking evaluation.

Deployed neurons are stateless: on every tick ``I_j = leak_j + sum_i x_i
cbin_ij s_i`` is evaluated in integer arithmetic and the neuron spikes iff
``I_j > 0``.  Every tick is a full feed-forward pass over all layers.
"""
from __future__ import annotations

import csv
import io
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .core_model import (ContinuousNetwork, DeployedCore, DeployedNetwork,
                         binarize_crossbar, quantize_bias, same_topology)
from .dataio import ImageBatch, rate_encode_batch
from .errors import XbarError
from .topology import UNUSED

TALLY_DTYPE = np.int64


def deploy(net) -> DeployedNetwork:
    """Binarize crossbars and quantize biases of a trained network.

    Accepts a :class:`ContinuousNetwork` or anything with a ``.net`` holding one
    (e.g. a ``TrainRun``).
    """
    if not isinstance(net, ContinuousNetwork):
        net = net.net
    cbin = [binarize_crossbar(c) for c in net.c]
    leak = [quantize_bias(b) for b in net.b]
    spec = net.plan.spec
    meta = {"template": net.template.name, "seed": net.seed,
            "topologyHash": spec.digest() if spec is not None else None}
    return DeployedNetwork(net.plan, net.template, cbin, leak, meta)


def core_tick(x, core: DeployedCore) -> np.ndarray:
    """One stateless tick of one core; ``x`` is a bit vector over axons."""
    x = np.asarray(x, dtype=TALLY_DTYPE)
    w = core.cbin.astype(TALLY_DTYPE) * np.asarray(core.s, dtype=TALLY_DTYPE)[:, None]
    potential = core.leak.astype(TALLY_DTYPE) + x @ w
    return (potential > 0).astype(np.uint8)


def _pack_bits(bits: np.ndarray) -> np.ndarray:
    """``(..., 256)`` bits -> ``(..., 4)`` uint64 words (little-endian bit order)."""
    packed = np.packbits(bits.astype(bool), axis=-1, bitorder="little")
    return np.ascontiguousarray(packed).view(np.uint64)


class _Compiled:
    """Per-network connection bitmasks and gather indices, built once.

    A neuron's input sum is ``sum_v v * popcount(x & mask_v)`` over the
    template's distinct strengths ``v``, with ``mask_v`` marking connected
    axons of strength ``v``.  Everything stays in integers.
    """

    def __init__(self, net: DeployedNetwork):
        self.net = net
        s = net.template.axon_strengths()
        self.masks = []
        for cb in net.cbin:
            per_value = []
            for v in sorted(set(int(x) for x in s) - {0}):
                sel = (cb.astype(bool) & (s == v)[None, :, None]).transpose(0, 2, 1)
                # (words, cores, 1, neurons)
                per_value.append((v, np.ascontiguousarray(
                    _pack_bits(sel).transpose(2, 0, 1)[:, :, None, :])))
            self.masks.append(per_value)
        self.leaks = [lk.astype(TALLY_DTYPE)[:, None, :] for lk in net.leak]
        self.sources = [layer.sources for layer in net.plan.layers]
        ca = net.plan.class_assignment
        self.readout = np.zeros((ca.size, net.num_classes), dtype=TALLY_DTYPE)
        self.readout[np.arange(ca.size), ca] = 1

    def layers(self, frame: np.ndarray) -> list[np.ndarray]:
        """Spikes of every layer for one ``(batch, pixels)`` bit frame.

        Each entry is ``(batch, cores * neurons)`` int64, cores in grid order.
        """
        prev = np.asarray(frame).astype(np.uint8)
        outs = []
        for masks, leak, src in zip(self.masks, self.leaks, self.sources):
            batch, m = prev.shape
            ext = np.concatenate([prev, np.zeros((batch, 1), np.uint8)], axis=1)
            x = ext[:, np.where(src == UNUSED, m, src)].transpose(1, 0, 2)
            # (words, cores, batch, 1)
            words = np.ascontiguousarray(_pack_bits(x).transpose(2, 0, 1))[..., None]
            potential = np.broadcast_to(leak, (leak.shape[0], batch, leak.shape[2])).copy()
            scratch = np.empty(potential.shape, dtype=np.uint64)
            for v, mask in masks:
                hits = np.zeros(potential.shape, dtype=np.uint16)
                for k in range(words.shape[0]):
                    np.bitwise_and(words[k], mask[k], out=scratch)
                    hits += np.bitwise_count(scratch)
                potential += v * hits.astype(TALLY_DTYPE)
            spikes = (potential > 0).astype(np.uint8)
            prev = spikes.transpose(1, 0, 2).reshape(batch, -1)
            outs.append(prev.astype(TALLY_DTYPE))
        return outs

    def tick(self, frame: np.ndarray):
        """Propagate one ``(batch, pixels)`` bit frame.

        Returns per-class spike counts ``(batch, classes)`` and the number of
        neuron spikes ``(batch,)`` summed over all cores.
        """
        outs = self.layers(frame)
        spikes = sum(o.sum(axis=1) for o in outs)
        return outs[-1] @ self.readout, spikes


def layer_spikes(net: DeployedNetwork, frame: np.ndarray) -> list[np.ndarray]:
    """Per-layer neuron outputs of a single tick for ``(pixels,)`` or ``(batch, pixels)`` bits."""
    frame = np.asarray(frame)
    single = frame.ndim == 1
    outs = _Compiled(net).layers(np.atleast_2d(frame))
    return [o[0] for o in outs] if single else outs


def simulate(net: DeployedNetwork, frames: np.ndarray, return_spikes: bool = False):
    """Run ``frames`` (``(ticks, pixels)`` or ``(ticks, batch, pixels)``) through the network.

    Returns integer class spike totals after all ticks, shaped ``(classes,)``
    or ``(batch, classes)``.
    """
    frames = np.asarray(frames)
    single = frames.ndim == 2
    if single:
        frames = frames[:, None, :]
    h, w, ch = net.plan.input_shape
    if frames.shape[2] != h * w * ch:
        raise XbarError(f"frames have {frames.shape[2]} pixels, network expects {h * w * ch}")
    if frames.size and frames.max() > 1:
        raise XbarError("input frames must be binary")
    comp = _Compiled(net)
    counts = np.zeros((frames.shape[1], net.num_classes), dtype=TALLY_DTYPE)
    spikes = np.zeros(frames.shape[1], dtype=TALLY_DTYPE)
    for frame in frames:
        c, s = comp.tick(frame)
        counts += c
        spikes += s
    if single:
        counts, spikes = counts[0], spikes[0]
    return (counts, spikes) if return_spikes else counts


def classify(counts) -> int:
    """Argmax; ties go to the lowest class index."""
    return int(np.argmax(np.asarray(counts)))


def ensemble_classify(counts_list) -> int:
    if len(counts_list) == 0:
        raise XbarError("ensemble has no members")
    return classify(ensemble_counts(counts_list))


def ensemble_counts(counts_list) -> np.ndarray:
    arrays = [np.asarray(c, dtype=TALLY_DTYPE) for c in counts_list]
    if len({a.shape for a in arrays}) != 1:
        raise XbarError("ensemble members disagree on the number of classes")
    return np.sum(arrays, axis=0, dtype=TALLY_DTYPE)


@dataclass
class EvalReport:
    ticks: int
    members: int
    total: int
    correct: int
    confusion: np.ndarray  # (true, predicted) int64
    total_core_ticks: int  # cores * ticks * images, summed over members
    total_spikes: int
    ensemble_id: str = "E1"
    cores: int = 0

    @property
    def accuracy(self) -> float:
        return self.correct / self.total if self.total else 0.0

    @property
    def mean_spikes_per_core_tick(self) -> float:
        return self.total_spikes / self.total_core_ticks if self.total_core_ticks else 0.0


def _evaluate_chunk(compiled, flat, ticks):
    frames = rate_encode_batch(flat, ticks)
    per_member, spikes = [], 0
    for comp in compiled:
        counts = np.zeros((flat.shape[0], comp.net.num_classes), dtype=TALLY_DTYPE)
        for frame in frames:
            c, s = comp.tick(frame)
            counts += c
            spikes += int(s.sum())
        per_member.append(counts)
    return per_member, spikes


def evaluate(nets: Sequence[DeployedNetwork] | DeployedNetwork, data: ImageBatch, ticks: int,
             *, chunk: int = 250, threads: int = 1, ensemble_id: str | None = None,
             return_counts: bool = False):
    """Rate-encode every image, run all members and tally ensemble accuracy.

    Work is split into fixed image chunks and reduced in chunk order, so the
    report does not depend on ``threads``.
    """
    if isinstance(nets, DeployedNetwork):
        nets = [nets]
    nets = list(nets)
    if not nets:
        raise XbarError("no networks to evaluate")
    if len(data) == 0:
        raise XbarError("evaluation set is empty")
    for other in nets[1:]:
        if not same_topology(nets[0], other):
            raise XbarError("ensemble members have different topologies or class counts")
    if ticks < 1:
        raise XbarError("tick count must be >= 1")
    compiled = [_Compiled(n) for n in nets]
    flat = data.flat()
    starts = range(0, len(data), chunk)
    work = lambda s: _evaluate_chunk(compiled, flat[s:s + chunk], ticks)  # noqa: E731
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(work, starts))
    else:
        results = [work(s) for s in starts]
    members = [np.concatenate([r[0][m] for r in results]) for m in range(len(nets))]
    spikes = sum(r[1] for r in results)
    summed = ensemble_counts(members)
    pred = summed.argmax(axis=1)
    k = nets[0].num_classes
    confusion = np.zeros((k, k), dtype=TALLY_DTYPE)
    np.add.at(confusion, (data.labels, pred), 1)
    cores = nets[0].plan.total_cores
    report = EvalReport(
        ticks=ticks, members=len(nets), total=len(data),
        correct=int((pred == data.labels).sum()), confusion=confusion,
        total_core_ticks=cores * ticks * len(data) * len(nets),
        total_spikes=int(spikes), ensemble_id=ensemble_id or f"E{len(nets)}",
        cores=cores)
    return (report, members) if return_counts else report


EVAL_FIELDS = ["ticks", "ensemble", "members", "cores", "images", "correct",
               "accuracy", "mean_spikes_per_core_tick"]


def report_row(r: EvalReport) -> dict:
    return {
        "ticks": r.ticks, "ensemble": r.ensemble_id, "members": r.members,
        "cores": r.cores, "images": r.total, "correct": r.correct,
        "accuracy": f"{r.accuracy:.6f}",
        "mean_spikes_per_core_tick": f"{r.mean_spikes_per_core_tick:.6f}",
    }


def reports_to_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=EVAL_FIELDS, lineterminator="\n")
    writer.writeheader()
    for r in sorted(reports, key=lambda r: (r.ensemble_id, r.ticks)):
        writer.writerow(report_row(r))
    return buf.getvalue()
