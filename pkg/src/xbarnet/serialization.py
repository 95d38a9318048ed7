"""Network file format shared by deployed networks and training checkpoints.

One JSON document per file::

    {formatVersion, template, topologySpec, topologyHash,
     layers: [{cores: [{cbin: [256 x "0101..."], leak: [...]}          # deployed
                      | {c: [[...256 floats] x 256], b: [...]}]}],     # continuous
     classAssignment, seed, checksum, ...extra}

The checksum is the SHA-256 of the canonical JSON encoding (sorted keys,
no whitespace) of every other field.  Floats are written with ``repr`` so
a load returns bit-identical values.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from pathlib import Path

import numpy as np

from .core_model import ContinuousNetwork, DeployedNetwork, SynapseTemplate
from .errors import (ChecksumMismatchError, ParseError, SchemaViolationError,
                     VersionMismatchError, XbarError)
from .topology import AXONS_PER_CORE, NEURONS_PER_CORE, TopologySpec, plan_from_spec

FORMAT_VERSION = 1


def _canonical(doc: dict) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":"),
                      allow_nan=False).encode()


def compute_checksum(doc: dict) -> str:
    body = {k: v for k, v in doc.items() if k != "checksum"}
    return hashlib.sha256(_canonical(body)).hexdigest()


def network_to_document(net, extra: dict | None = None) -> dict:
    spec = net.plan.spec
    if spec is None:
        raise XbarError("network plan carries no topology spec; cannot serialize")
    layers = []
    if isinstance(net, DeployedNetwork):
        for cb, lk in zip(net.cbin, net.leak):
            cores = []
            for k in range(cb.shape[0]):
                rows = ["".join("1" if v else "0" for v in row) for row in cb[k]]
                cores.append({"cbin": rows, "leak": [int(x) for x in lk[k]]})
            layers.append({"cores": cores})
        seed = net.meta.get("seed", 0)
    elif isinstance(net, ContinuousNetwork):
        for c, b in zip(net.c, net.b):
            layers.append({"cores": [{"c": c[k].tolist(), "b": b[k].tolist()}
                                     for k in range(c.shape[0])]})
        seed = net.seed
    else:
        raise TypeError(f"cannot serialize {type(net).__name__}")
    doc = {
        "formatVersion": FORMAT_VERSION,
        "template": net.template.to_json(),
        "topologySpec": spec.to_dict(),
        "topologyHash": spec.digest(),
        "layers": layers,
        "classAssignment": [int(x) for x in net.plan.class_assignment],
        "seed": int(seed),
    }
    if extra:
        doc.update(extra)
    doc["checksum"] = compute_checksum(doc)
    return doc


def write_json_atomic(path: str | Path, doc, *, canonical: bool = False) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    data = _canonical(doc) if canonical else json.dumps(doc, indent=None).encode()
    with open(tmp, "wb") as fh:
        fh.write(data)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def save_network(net, path: str | Path, extra: dict | None = None) -> dict:
    doc = network_to_document(net, extra)
    write_json_atomic(path, doc)
    return doc


def _schema(cond: bool, msg: str):
    if not cond:
        raise SchemaViolationError(msg)


def _parse_deployed_core(core: dict, where: str):
    rows = core.get("cbin")
    _schema(isinstance(rows, list) and len(rows) == AXONS_PER_CORE,
            f"{where}: cbin must have {AXONS_PER_CORE} rows")
    for r in rows:
        _schema(isinstance(r, str) and len(r) == NEURONS_PER_CORE
                and set(r) <= {"0", "1"},
                f"{where}: cbin rows must be {NEURONS_PER_CORE} characters of '0'/'1'")
    cb = (np.frombuffer("".join(rows).encode(), dtype=np.uint8) - ord("0"))
    leak = core.get("leak")
    _schema(isinstance(leak, list) and len(leak) == NEURONS_PER_CORE
            and all(isinstance(x, int) and not isinstance(x, bool) for x in leak),
            f"{where}: leak must be {NEURONS_PER_CORE} integers")
    return cb.reshape(AXONS_PER_CORE, NEURONS_PER_CORE).copy(), np.asarray(leak, np.int64)


def _parse_continuous_core(core: dict, where: str):
    c = core.get("c")
    _schema(isinstance(c, list) and len(c) == AXONS_PER_CORE
            and all(isinstance(r, list) and len(r) == NEURONS_PER_CORE for r in c),
            f"{where}: c must be {AXONS_PER_CORE} rows of {NEURONS_PER_CORE} numbers")
    try:
        arr = np.asarray(c, dtype=np.float64)
    except (TypeError, ValueError):
        raise SchemaViolationError(f"{where}: c must hold numbers")
    _schema(bool(np.all((arr >= 0.0) & (arr <= 1.0))), f"{where}: c entries outside [0, 1]")
    b = core.get("b")
    _schema(isinstance(b, list) and len(b) == NEURONS_PER_CORE
            and all(isinstance(x, (int, float)) and not isinstance(x, bool)
                    and math.isfinite(x) for x in b),
            f"{where}: b must be {NEURONS_PER_CORE} finite numbers")
    return arr, np.asarray(b, dtype=np.float64)


def document_to_network(doc: dict):
    if not isinstance(doc, dict):
        raise SchemaViolationError("top level must be an object")
    version = doc.get("formatVersion")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(
            f"format version {version!r} not supported (expected {FORMAT_VERSION})")
    try:
        spec = TopologySpec.from_dict(doc["topologySpec"])
        template = SynapseTemplate.from_json(doc["template"])
        plan = plan_from_spec(spec)
        layers = doc["layers"]
    except XbarError as exc:
        raise SchemaViolationError(str(exc)) from exc
    except (KeyError, TypeError) as exc:
        raise SchemaViolationError(f"missing or malformed field: {exc}") from exc
    _schema(doc.get("topologyHash") == spec.digest(), "topologyHash does not match topologySpec")
    _schema(isinstance(layers, list) and len(layers) == len(plan.layers),
            f"expected {len(plan.layers)} layers")
    ca = doc.get("classAssignment")
    _schema(isinstance(ca, list) and np.array_equal(np.asarray(ca), plan.class_assignment),
            "class assignment does not match topology")
    _schema(all(isinstance(layer, dict) and isinstance(layer.get("cores"), list)
                and layer["cores"] and isinstance(layer["cores"][0], dict)
                for layer in layers), "every layer must be an object with a cores list")
    deployed = "cbin" in layers[0]["cores"][0]
    first = layers[0]["cores"][0]
    _schema(deployed or "c" in first, "cores must carry either cbin or c")
    mats, vecs = [], []
    for li, (layer, lp) in enumerate(zip(layers, plan.layers)):
        cores = layer["cores"]
        _schema(len(cores) == lp.num_cores,
                f"layer {li + 1}: expected {lp.num_cores} cores")
        parsed = []
        for k, core in enumerate(cores):
            where = f"layer {li + 1} core {k}"
            _schema(isinstance(core, dict), f"{where}: core must be an object")
            _schema(("cbin" in core) == deployed and ("c" in core) != deployed,
                    f"{where}: mixed deployed/continuous cores")
            parsed.append(_parse_deployed_core(core, where) if deployed
                          else _parse_continuous_core(core, where))
        mats.append(np.stack([p[0] for p in parsed]))
        vecs.append(np.stack([p[1] for p in parsed]))
    seed = doc.get("seed", 0)
    _schema(isinstance(seed, int), "seed must be an integer")
    # Structure is validated first so a bad field is reported as such; the
    # checksum then guards against silent edits of well-formed content.
    if doc.get("checksum") != compute_checksum(doc):
        raise ChecksumMismatchError("checksum does not match file contents")
    if deployed:
        meta = {"template": template.name, "topologyHash": spec.digest(), "seed": seed}
        return DeployedNetwork(plan, template, mats, vecs, meta)
    return ContinuousNetwork(plan, template, mats, vecs, seed)


def load_document(path: str | Path) -> dict:
    try:
        text = Path(path).read_text()
    except UnicodeDecodeError as exc:
        raise ParseError(f"{path}: not a text document: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: truncated or malformed JSON: {exc}") from exc


def load_network(path: str | Path):
    """Load a deployed or continuous network; nothing is returned on error."""
    return document_to_network(load_document(path))
