"""Dense feed-forward networks with hand-written reverse-mode gradients.

Matrices are plain ``float64`` numpy arrays. A network is an ordered chain of
:class:`Affine` and :class:`Relu` layers; :func:`forward` records every
intermediate output so :func:`backward` can return gradients for all
parameters and for the network input (the latter drives PGD, VAT and UDP).
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import ConfigError, TrainingError

PROB_FLOOR = 1e-12
PROB_CEIL = 1.0 - 1e-12
LOG_FLOOR = np.log(PROB_FLOOR)
LOG_CEIL = np.log1p(-1e-12)


# ---------------------------------------------------------------------------
# randomness


def make_rng(seed: int, *purpose: Union[str, int]) -> np.random.Generator:
    """PCG64 generator for ``seed`` split by a purpose path.

    ``make_rng(7, "data")`` and ``make_rng(7, "init", 3)`` are independent
    streams. String keys are mapped through CRC32 so the mapping is stable
    across interpreters and platforms.
    """
    key = tuple(zlib.crc32(p.encode()) if isinstance(p, str) else int(p) for p in purpose)
    seq = np.random.SeedSequence(entropy=int(seed) & 0xFFFFFFFFFFFFFFFF, spawn_key=key)
    return np.random.Generator(np.random.PCG64(seq))


def as_matrix(x, name: str = "matrix") -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim != 2:
        raise ConfigError(f"{name} must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ConfigError(f"{name} has non-finite entries")
    return a


# ---------------------------------------------------------------------------
# graph


@dataclass
class Affine:
    """``z = x @ weight.T + bias`` with ``weight`` shaped (out, in)."""

    weight: np.ndarray
    bias: np.ndarray

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    def copy(self) -> "Affine":
        return Affine(self.weight.copy(), self.bias.copy())


@dataclass
class Relu:
    def copy(self) -> "Relu":
        return Relu()


Layer = Union[Affine, Relu]


@dataclass
class ComputationGraph:
    layers: List[Layer]

    def __post_init__(self):
        if not self.layers or not isinstance(self.layers[-1], Affine):
            raise ConfigError("graph must end with an affine layer")
        dim = None
        for layer in self.layers:
            if isinstance(layer, Affine):
                if layer.bias.shape != (layer.out_dim,):
                    raise ConfigError("bias shape does not match weight rows")
                if dim is not None and layer.in_dim != dim:
                    raise ConfigError(f"layer expects {layer.in_dim} inputs, previous layer gives {dim}")
                dim = layer.out_dim
            elif not isinstance(layer, Relu):
                raise ConfigError(f"unknown layer {layer!r}")

    @property
    def input_dim(self) -> int:
        return self.affines()[0].in_dim

    @property
    def output_dim(self) -> int:
        return self.affines()[-1].out_dim

    def affines(self) -> List[Affine]:
        return [l for l in self.layers if isinstance(l, Affine)]

    def params(self) -> List[np.ndarray]:
        """Flat parameter list: ``[W0, b0, W1, b1, ...]`` (views, not copies)."""
        out = []
        for a in self.affines():
            out += [a.weight, a.bias]
        return out

    def copy(self) -> "ComputationGraph":
        return ComputationGraph([l.copy() for l in self.layers])


def mlp(widths: Sequence[int], rng: np.random.Generator) -> ComputationGraph:
    """He-initialised relu MLP; the last layer is affine without activation."""
    layers: List[Layer] = []
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_out, fan_in))
        layers.append(Affine(w, np.zeros(fan_out)))
        if i < len(widths) - 2:
            layers.append(Relu())
    return ComputationGraph(layers)


def forward(graph: ComputationGraph, x) -> List[np.ndarray]:
    """Return ``[x, out_1, ..., logits]``, one entry per layer plus the input."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != graph.input_dim:
        raise ConfigError(f"input shape {x.shape} incompatible with graph input dim {graph.input_dim}")
    acts = [x]
    for layer in graph.layers:
        if isinstance(layer, Affine):
            x = x @ layer.weight.T + layer.bias
        else:
            x = np.maximum(x, 0.0)
        acts.append(x)
    return acts


# ---------------------------------------------------------------------------
# probabilities


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def clamped_log(p: np.ndarray) -> np.ndarray:
    return np.log(np.clip(p, PROB_FLOOR, PROB_CEIL))


def entropy(probs: np.ndarray) -> np.ndarray:
    """Row-wise Shannon entropy in nats (clamped-log convention)."""
    return -(probs * clamped_log(probs)).sum(axis=1)


# ---------------------------------------------------------------------------
# losses; each returns (mean loss, d loss / d logits)


@dataclass
class SoftmaxCE:
    labels: np.ndarray


@dataclass
class KL:
    """Mean ``KL(reference || softmax(logits))``; the reference is a constant."""

    reference_probs: np.ndarray


@dataclass
class Entropy:
    """Mean prediction entropy of ``softmax(logits)``."""


@dataclass
class MSE:
    """Mean over all entries of ``(logits - target)**2``."""

    target: np.ndarray


Loss = Union[SoftmaxCE, KL, Entropy, MSE]


def loss_and_grad(logits: np.ndarray, loss: Loss) -> Tuple[float, np.ndarray]:
    n = logits.shape[0]
    if isinstance(loss, SoftmaxCE):
        y = np.asarray(loss.labels, dtype=np.int64)
        logp = np.clip(log_softmax(logits), LOG_FLOOR, LOG_CEIL)
        value = -logp[np.arange(n), y].mean()
        g = softmax(logits)
        g[np.arange(n), y] -= 1.0
        return float(value), g / n
    if isinstance(loss, KL):
        r = np.asarray(loss.reference_probs, dtype=np.float64)
        logp = np.clip(log_softmax(logits), LOG_FLOOR, LOG_CEIL)
        value = (r * (clamped_log(r) - logp)).sum(axis=1).mean()
        g = softmax(logits) * r.sum(axis=1, keepdims=True) - r
        return float(value), g / n
    if isinstance(loss, Entropy):
        logp = log_softmax(logits)
        p = np.exp(logp)
        h = -(p * np.clip(logp, LOG_FLOOR, LOG_CEIL)).sum(axis=1, keepdims=True)
        g = -p * (np.clip(logp, LOG_FLOOR, LOG_CEIL) + h)
        return float(h.mean()), g / n
    if isinstance(loss, MSE):
        diff = logits - np.asarray(loss.target, dtype=np.float64)
        return float((diff**2).mean()), 2.0 * diff / diff.size
    raise ConfigError(f"unknown loss kind {type(loss).__name__}")


@dataclass
class Gradients:
    params: List[np.ndarray]  # aligned with ComputationGraph.params()
    input: np.ndarray
    loss: float = 0.0


def backward_from(graph: ComputationGraph, acts: Sequence[np.ndarray], dout: np.ndarray,
                  need_input: bool = True) -> Gradients:
    """Back-propagate an upstream gradient on the logits through ``graph``."""
    if len(acts) != len(graph.layers) + 1:
        raise ConfigError("activations were not produced by this graph")
    grads: List[np.ndarray] = []
    g = dout
    for i in range(len(graph.layers) - 1, -1, -1):
        layer = graph.layers[i]
        if isinstance(layer, Affine):
            grads += [g.sum(axis=0), g.T @ acts[i]]  # reversed below
            if i > 0 or need_input:
                g = g @ layer.weight
        else:
            g = g * (acts[i + 1] > 0.0)
    grads.reverse()
    return Gradients(grads, g if need_input else None)


def backward(graph: ComputationGraph, acts: Sequence[np.ndarray], loss: Loss,
             need_input: bool = True) -> Gradients:
    value, dout = loss_and_grad(acts[-1], loss)
    out = backward_from(graph, acts, dout, need_input=need_input)
    out.loss = value
    return out


# ---------------------------------------------------------------------------
# optimisation


@dataclass
class SGD:
    """Heavy-ball SGD: ``v <- momentum*v + g``; ``p <- p - lr*v`` (in place)."""

    lr: float
    momentum: float = 0.0
    velocity: Optional[List[np.ndarray]] = field(default=None, repr=False)

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("learning rate must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")

    def step(self, params: Sequence[np.ndarray], grads: Sequence[np.ndarray]) -> None:
        if len(params) != len(grads):
            raise ConfigError("parameter/gradient count mismatch")
        for p, g in zip(params, grads):
            if p.shape != g.shape:
                raise ConfigError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            if not np.all(np.isfinite(g)):
                raise TrainingError("non-finite gradient encountered; aborting run")
        if self.velocity is None:
            self.velocity = [np.zeros_like(p) for p in params]
        for p, g, v in zip(params, grads, self.velocity):
            v *= self.momentum
            v += g
            p -= self.lr * v


def sgd_step(params, grads, velocity, lr: float, momentum: float):
    """Functional form of one SGD step; returns ``(new_params, new_velocity)``."""
    opt = SGD(lr, momentum, [v.copy() for v in velocity])
    new = [p.copy() for p in params]
    opt.step(new, grads)
    return new, opt.velocity
