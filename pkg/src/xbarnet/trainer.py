"""Binary-crossbar training with a Gaussian activation and straight-through gradients.

Each iteration binarizes every core's connection matrix, runs the forward
pass with the binary crossbar, scores classes by summing the activations of
the output neurons assigned to them, and backpropagates a softmax log loss.
Gradients computed with the binary crossbar update the continuous
connection values, which are clamped back into [0, 1].

Neuron model during training (per core, ``x`` are axon inputs in [0, 1])::

    mu_j     = b_j + sum_i x_i c_ij s_i
    sigma_j2 = sum_i x_i c_ij (1 - x_i c_ij) s_i**2
    out_j    = Phi(mu_j / max(sigma_j, sigma_floor))

``Phi`` is the standard normal CDF, i.e. the probability that the deployed
step neuron ``I_j > 0`` fires when ``I_j`` is Gaussian.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy.special import ndtr

from .core_model import ContinuousNetwork, SynapseTemplate, binarize_crossbar
from .dataio import AugmentConfig, ImageBatch, augment, image_rng
from .errors import DivergenceError, NumericalError, XbarError
from .serialization import load_document, document_to_network, save_network
from .topology import TopologyPlan

log = logging.getLogger(__name__)

_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)

# Stream tags for image_rng keys.
_INIT, _SHUFFLE, _AUGMENT = 0, 1, 2


def normal_cdf(z):
    return ndtr(z)


def normal_pdf(z):
    return _INV_SQRT_2PI * np.exp(-0.5 * np.square(z))


@dataclass
class TrainConfig:
    total_iterations: int
    batch_size: int = 100
    lr0: float = 0.1
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 1_000_000
    sigma_floor: float = 1e-3
    seed: int = 0
    augment: AugmentConfig | None = None
    template: str = "s1"
    log_every: int = 100
    sigma_path: bool = False
    init_width: float = 0.1  # spread of the initial c around 0.5

    def __post_init__(self):
        if self.batch_size < 1:
            raise XbarError("batch size must be >= 1")
        if not (self.lr0 > 0 and math.isfinite(self.lr0)):
            raise XbarError("initial learning rate must be finite and > 0")
        if not self.sigma_floor > 0:
            raise XbarError("sigma floor must be > 0")
        if not 0 < self.init_width <= 1:
            raise XbarError("init width must be in (0, 1]")
        if self.total_iterations < 0 or self.lr_decay_every < 1:
            raise XbarError("iteration counts must be non-negative")

    def to_json(self) -> dict:
        d = asdict(self)
        d["augment"] = asdict(self.augment) if self.augment else None
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if d.get("augment"):
            d["augment"] = AugmentConfig(**d["augment"])
        return cls(**d)


def lr_at(iteration: int, cfg: TrainConfig) -> float:
    return cfg.lr0 * cfg.lr_decay_factor ** (iteration // cfg.lr_decay_every)


# ---------------------------------------------------------------------------
# forward

def core_forward_train(x, conn, s, b, sigma_floor: float, binary: bool = True):
    """Gaussian forward pass of one core (or a stack of cores).

    ``x`` is ``(..., axons)``, ``conn`` is ``(axons, neurons)`` holding either
    the binary crossbar or, for the smooth surrogate, continuous values; ``s``
    holds per-axon strengths ``(axons,)`` or a full ``(axons, neurons)``
    matrix.  Leading dimensions broadcast through ``np.matmul``.

    Returns ``(mu, sigma, out)``.
    """
    x = np.asarray(x, dtype=np.float64)
    conn = np.asarray(conn, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if s.ndim == 1:
        s = s[:, None]
    w = conn * s
    mu = np.matmul(x, w) + np.asarray(b)[..., None, :] if x.ndim > 1 else x @ w + b
    if binary:
        # c in {0,1}: x c (1 - x c) = (x - x^2) c
        var = np.matmul(x - x * x, w * s)
    else:
        var = np.matmul(x, w * s) - np.matmul(x * x, w * w)
    sigma = np.sqrt(np.maximum(var, sigma_floor * sigma_floor))
    return mu, sigma, normal_cdf(mu / sigma)


@dataclass
class LayerTrace:
    x: np.ndarray      # (cores, batch, axons)
    conn: np.ndarray   # (cores, axons, neurons) crossbar used in the forward pass
    mu: np.ndarray     # (cores, batch, neurons)
    sigma: np.ndarray
    out: np.ndarray
    floored: np.ndarray  # sigma clamped at the floor


@dataclass
class ForwardTrace:
    layers: list[LayerTrace]
    scores: np.ndarray  # (batch, classes)


def gather_inputs(prev_flat: np.ndarray, sources: np.ndarray) -> np.ndarray:
    """Route a flat ``(batch, sources)`` array onto core axons: ``(cores, batch, axons)``."""
    batch, m = prev_flat.shape
    ext = np.concatenate([prev_flat, np.zeros((batch, 1), prev_flat.dtype)], axis=1)
    idx = np.where(sources < 0, m, sources)
    return np.ascontiguousarray(ext[:, idx].transpose(1, 0, 2))


def class_matrix(plan: TopologyPlan) -> np.ndarray:
    onehot = np.zeros((plan.class_assignment.size, plan.num_classes))
    onehot[np.arange(plan.class_assignment.size), plan.class_assignment] = 1.0
    return onehot


def _check_finite(arr, what, layer):
    if not np.all(np.isfinite(arr)):
        k, bi, n = np.argwhere(~np.isfinite(arr))[0]
        raise NumericalError(
            f"non-finite {what} at layer {layer + 1}, core {k}, neuron {n} (batch item {bi})")


def network_forward_train(net: ContinuousNetwork, images_flat: np.ndarray,
                          sigma_floor: float, surrogate: bool = False) -> ForwardTrace:
    """Forward pass over a batch of flattened images.

    With ``surrogate=True`` the continuous ``c`` replaces the binary crossbar
    everywhere (used for gradient checking).
    """
    plan = net.plan
    prev = np.atleast_2d(np.asarray(images_flat, dtype=np.float64))
    h, w, ch = plan.input_shape
    if prev.shape[1] != h * w * ch:
        raise XbarError(f"image has {prev.shape[1]} pixels, plan expects {h * w * ch}")
    s = net.template.axon_strengths().astype(np.float64)
    traces = []
    for li, layer in enumerate(plan.layers):
        x = gather_inputs(prev, layer.sources)
        conn = net.c[li] if surrogate else binarize_crossbar(net.c[li]).astype(np.float64)
        mu, sigma, out = core_forward_train(x, conn, s[:x.shape[2]], net.b[li],
                                            sigma_floor, binary=not surrogate)
        _check_finite(mu, "potential mean", li)
        _check_finite(sigma, "potential deviation", li)
        traces.append(LayerTrace(x, conn, mu, sigma, out, sigma <= sigma_floor))
        prev = out.transpose(1, 0, 2).reshape(out.shape[1], -1)
    scores = prev @ class_matrix(plan)
    return ForwardTrace(traces, scores)


# ---------------------------------------------------------------------------
# loss and backward

def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def loss(class_scores, label):
    """Softmax cross-entropy.  Batched input returns per-item losses."""
    z = np.asarray(class_scores, dtype=np.float64)
    shifted = z - z.max(axis=-1, keepdims=True)
    logsum = np.log(np.exp(shifted).sum(axis=-1))
    picked = np.take_along_axis(shifted, np.asarray(label).reshape(z.shape[:-1] + (1,)),
                                axis=-1)[..., 0]
    out = logsum - picked
    return float(out) if np.ndim(out) == 0 else out


def _swap(a):
    return np.swapaxes(a, -1, -2)


def core_backward(x, conn, s, mu, sigma, d_out, floored=None, sigma_path: bool = False,
                  need_input: bool = True):
    """Backward pass through :func:`core_forward_train`.

    ``d_out`` is ``d_loss/d_out`` shaped like ``mu`` (``(..., batch, neurons)``).
    The crossbar is treated as the identity of ``c`` (straight-through), so
    ``d mu_j / d c_ij = x_i s_i``.  Only the mean path is followed unless
    ``sigma_path`` is set.  Returns ``(grad_c, grad_b, grad_x)``; ``grad_x``
    is ``None`` when ``need_input`` is false.
    """
    s = np.asarray(s, dtype=np.float64)[:, None]
    if floored is None:
        floored = np.zeros(mu.shape, dtype=bool)
    dens = normal_pdf(mu / sigma)
    d_mu = d_out * dens / sigma
    grad_c = np.matmul(_swap(x), d_mu) * s
    grad_b = d_mu.sum(axis=-2)
    w = conn * s
    if sigma_path:
        d_sigma = -d_out * dens * mu / (sigma * sigma)
        d_var = np.where(floored, 0.0, d_sigma / (2.0 * sigma))
        grad_c = grad_c + s * s * (np.matmul(_swap(x), d_var)
                                   - 2.0 * conn * np.matmul(_swap(x * x), d_var))
    grad_x = None
    if need_input:
        grad_x = np.matmul(d_mu, _swap(w))
        if sigma_path:
            ws2 = w * s
            grad_x = grad_x + np.matmul(d_var, _swap(ws2)) \
                - 2.0 * x * np.matmul(d_var, _swap(ws2 * conn))
    return grad_c, grad_b, grad_x


def backward_from_outputs(net: ContinuousNetwork, trace: ForwardTrace, d_out: np.ndarray,
                          sigma_path: bool = False):
    """Backpropagate ``d_loss/d_out`` of the output-layer activations.

    ``d_out`` is ``(batch, output_neurons)``.  Returns per-layer lists
    ``(grad_c, grad_b)``.
    """
    plan = net.plan
    s = net.template.axon_strengths().astype(np.float64)
    grads_c = [None] * len(plan.layers)
    grads_b = [None] * len(plan.layers)
    d_flat = d_out
    for li in range(len(plan.layers) - 1, -1, -1):
        lt = trace.layers[li]
        k, batch, n = lt.out.shape
        d_act = d_flat.reshape(batch, k, n).transpose(1, 0, 2)
        gc, gb, d_x = core_backward(lt.x, lt.conn, s[:lt.x.shape[2]], lt.mu, lt.sigma, d_act,
                                    lt.floored, sigma_path, need_input=li > 0)
        _check_finite(gc, "connection gradient", li)
        grads_c[li], grads_b[li] = gc, gb
        if li == 0:
            break
        # fan-out <= 1: each lower neuron receives gradient from at most one axon
        lower = plan.layers[li - 1]
        src = plan.layers[li].sources
        used = src >= 0
        d_prev = np.zeros((batch, lower.num_cores * lower.neurons_per_core))
        d_prev[:, src[used]] = d_x.transpose(1, 0, 2)[:, used]
        d_flat = d_prev
    return grads_c, grads_b


def backward(net: ContinuousNetwork, trace: ForwardTrace, labels, sigma_path: bool = False):
    """Gradients of the batch-mean log loss with respect to every ``c`` and ``b``."""
    labels = np.atleast_1d(np.asarray(labels))
    probs = softmax(trace.scores)
    probs[np.arange(len(labels)), labels] -= 1.0
    d_scores = probs / len(labels)
    d_out = d_scores @ class_matrix(net.plan).T
    return backward_from_outputs(net, trace, d_out, sigma_path)


def sgd_update(net: ContinuousNetwork, grads, lr: float) -> ContinuousNetwork:
    """In-place ``c <- clamp(c - lr*grad, 0, 1)``, ``b <- b - lr*grad``.

    New values are computed first; if any is non-finite nothing is written
    and :class:`NumericalError` is raised.
    """
    grads_c, grads_b = grads
    new_c = [np.clip(c - lr * g, 0.0, 1.0) for c, g in zip(net.c, grads_c)]
    new_b = [b - lr * g for b, g in zip(net.b, grads_b)]
    for li, (c, b) in enumerate(zip(new_c, new_b)):
        if not (np.all(np.isfinite(c)) and np.all(np.isfinite(b))):
            raise NumericalError(f"update produced non-finite parameters in layer {li + 1}")
    for li in range(len(net.c)):
        net.c[li][...] = new_c[li]
        net.b[li][...] = new_b[li]
    return net


# ---------------------------------------------------------------------------
# training loop

@dataclass
class TrainRun:
    net: ContinuousNetwork
    config: TrainConfig
    iteration: int = 0
    history: list = field(default_factory=list)  # (iteration, loss, accuracy|None)

    @property
    def rng_state(self) -> dict:
        # Every random draw is keyed by (seed, stream, epoch, index), so the
        # iteration count pins the generator position.
        return {"generator": "PCG64/SeedSequence", "seed": self.config.seed,
                "iteration": self.iteration}


def init_network(plan: TopologyPlan, template: SynapseTemplate, seed: int,
                 width: float = 1.0) -> ContinuousNetwork:
    """``c ~ U[0.5 - width/2, 0.5 + width/2]`` on axons that have a source (0 elsewhere), ``b = 0``."""
    rng = image_rng(seed, _INIT)
    cs, bs = [], []
    for layer in plan.layers:
        c = rng.random((layer.num_cores, layer.sources.shape[1], layer.neurons_per_core))
        c = 0.5 + width * (c - 0.5)
        c *= (layer.sources >= 0)[:, :, None]
        cs.append(c)
        bs.append(np.zeros((layer.num_cores, layer.neurons_per_core)))
    return ContinuousNetwork(plan, template, cs, bs, seed)


def batch_indices(iteration: int, batch_size: int, n: int, seed: int):
    """Dataset indices and epochs for one iteration (reshuffled every epoch)."""
    g = iteration * batch_size + np.arange(batch_size)
    epochs, pos = np.divmod(g, n)
    idx = np.empty(batch_size, dtype=np.int64)
    for e in np.unique(epochs):
        perm = image_rng(seed, _SHUFFLE, int(e)).permutation(n)
        sel = epochs == e
        idx[sel] = perm[pos[sel]]
    return idx, epochs


def make_batch(data: ImageBatch, iteration: int, cfg: TrainConfig):
    idx, epochs = batch_indices(iteration, cfg.batch_size, len(data), cfg.seed)
    images = data.images[idx]
    if cfg.augment is not None and not cfg.augment.is_identity:
        images = np.stack([
            augment(img, cfg.augment, image_rng(cfg.seed, _AUGMENT, int(e), int(i)))
            for img, e, i in zip(images, epochs, idx)])
    return images.reshape(len(idx), -1).astype(np.float64), data.labels[idx]


def train(cfg: TrainConfig, plan: TopologyPlan, data: ImageBatch, *,
          run: TrainRun | None = None,
          eval_fn: Callable[[TrainRun], float] | None = None,
          eval_every: int = 0,
          on_log: Callable[[int, float, float], None] | None = None,
          checkpoint_fn: Callable[[TrainRun], None] | None = None,
          checkpoint_every: int = 0) -> TrainRun:
    """Run (or resume) training until ``cfg.total_iterations``."""
    if len(data) == 0:
        raise XbarError("training set is empty")
    if run is None:
        template = SynapseTemplate.named(cfg.template)
        run = TrainRun(init_network(plan, template, cfg.seed, cfg.init_width), cfg)
    net = run.net
    window = []
    while run.iteration < cfg.total_iterations:
        it = run.iteration
        x, y = make_batch(data, it, cfg)
        lr = lr_at(it, cfg)
        try:
            trace = network_forward_train(net, x, cfg.sigma_floor)
            batch_loss = float(np.mean(loss(trace.scores, y)))
            if not math.isfinite(batch_loss):
                raise NumericalError(f"non-finite loss {batch_loss}")
            grads = backward(net, trace, y, cfg.sigma_path)
            sgd_update(net, grads, lr)
        except NumericalError as exc:
            # parameters are untouched, so the run is still the last good state
            raise DivergenceError(f"iteration {it}: {exc}", last_good=run) from exc
        run.iteration += 1
        window.append(batch_loss)
        if cfg.log_every and run.iteration % cfg.log_every == 0:
            mean_loss = float(np.mean(window))
            window = []
            acc = None
            if eval_fn is not None and eval_every and run.iteration % eval_every == 0:
                acc = eval_fn(run)
            run.history.append((run.iteration, mean_loss, acc))
            if on_log:
                on_log(run.iteration, lr, mean_loss)
            log.info("iter %d lr %g loss %.5f%s", run.iteration, lr, mean_loss,
                     "" if acc is None else f" acc {acc}")
        if checkpoint_fn and checkpoint_every and run.iteration % checkpoint_every == 0:
            checkpoint_fn(run)
    return run


def save_checkpoint(run: TrainRun, path) -> dict:
    extra = {
        "iteration": run.iteration,
        "rngState": run.rng_state,
        "history": [[i, l, a] for i, l, a in run.history],
        "trainConfig": run.config.to_json(),
    }
    return save_network(run.net, path, extra)


def load_checkpoint(path) -> TrainRun:
    doc = load_document(path)
    net = document_to_network(doc)
    if not isinstance(net, ContinuousNetwork):
        raise XbarError(f"{path} holds a deployed network, not a training checkpoint")
    cfg = TrainConfig.from_json(doc["trainConfig"])
    history = [tuple(h) for h in doc.get("history", [])]
    return TrainRun(net, cfg, int(doc.get("iteration", 0)), history)
