"""Feature extractor, linear head and the multi-task pretraining recipe."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy.optimize import minimize

from . import data_gen
from .errors import ConfigError, PretrainingError
from .numerics import (SGD, Affine, ComputationGraph, Relu, backward_from, forward, loss_and_grad,
                       make_rng, mlp, softmax, SoftmaxCE, MSE)

log = logging.getLogger(__name__)

HIDDEN = (64, 64)
REPR_DIM = 32


@dataclass
class ModelState:
    extractor: ComputationGraph
    head: Affine
    pretrained_snapshot: ComputationGraph

    def graph(self) -> ComputationGraph:
        """Extractor followed by the head; shares parameter arrays with ``self``."""
        return ComputationGraph(self.extractor.layers + [self.head])

    def copy(self) -> "ModelState":
        return ModelState(self.extractor.copy(), self.head.copy(), self.pretrained_snapshot)


def new_extractor(d_in: int, rng: np.random.Generator, widths=HIDDEN, p: int = REPR_DIM) -> ComputationGraph:
    return mlp([d_in, *widths, p], rng)


def new_head(p: int, C: int, rng: Optional[np.random.Generator] = None, scale: float = 0.0) -> Affine:
    """Linear head; zero-initialised unless ``rng`` and a positive ``scale`` are given."""
    if rng is None or scale == 0.0:
        return Affine(np.zeros((C, p)), np.zeros(C))
    return Affine(rng.normal(0.0, scale, size=(C, p)), np.zeros(C))


def embed(extractor: ComputationGraph, x) -> np.ndarray:
    return forward(extractor, x)[-1]


def predict(model: ModelState, x) -> np.ndarray:
    h = embed(model.extractor, x)
    return softmax(h @ model.head.weight.T + model.head.bias)


def logits(model: ModelState, x) -> np.ndarray:
    return forward(model.graph(), x)[-1]


# ---------------------------------------------------------------------------
# decodability probes (independent of the SGD training path)


def fit_softmax_probe(h: np.ndarray, y: np.ndarray, C: int, l2: float = 1e-4) -> Affine:
    """Multinomial logistic regression by L-BFGS on standardised features."""
    mu, sd = h.mean(axis=0), h.std(axis=0) + 1e-8
    z = (h - mu) / sd
    n, p = z.shape
    onehot = np.eye(C)[y]

    def f(theta):
        w = theta[: C * p].reshape(C, p)
        b = theta[C * p:]
        s = z @ w.T + b
        s = s - s.max(axis=1, keepdims=True)
        logp = s - np.log(np.exp(s).sum(axis=1, keepdims=True))
        loss = -(onehot * logp).sum() / n + 0.5 * l2 * (w**2).sum()
        g = (np.exp(logp) - onehot) / n
        return loss, np.concatenate([(g.T @ z + l2 * w).ravel(), g.sum(axis=0)])

    res = minimize(f, np.zeros(C * p + C), jac=True, method="L-BFGS-B", options={"maxiter": 500})
    w = res.x[: C * p].reshape(C, p) / sd
    b = res.x[C * p:] - w @ mu
    return Affine(w, b)


def probe_accuracy(probe: Affine, h: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(np.argmax(h @ probe.weight.T + probe.bias, axis=1) == y))


def regression_r2(h_train, t_train, h_test, t_test) -> float:
    """Held-out R^2 of an ordinary least-squares map ``[h, 1] -> t``."""
    a = np.hstack([h_train, np.ones((len(h_train), 1))])
    coef, *_ = np.linalg.lstsq(a, t_train, rcond=None)
    pred = np.hstack([h_test, np.ones((len(h_test), 1))]) @ coef
    ss_res = ((t_test - pred) ** 2).sum()
    ss_tot = ((t_test - t_test.mean(axis=0)) ** 2).sum()
    return float(1.0 - ss_res / ss_tot)


# ---------------------------------------------------------------------------
# pretraining


@dataclass(frozen=True)
class PretrainConfig:
    epochs: int = 50
    n: int = 20000
    lr: float = 0.02
    momentum: float = 0.9
    batch_size: int = 128
    recon_weight: float = 1.0
    rho: float = 0.0
    seed: int = 0
    min_probe_acc: float = 0.90
    min_simple_r2: float = 0.8


@dataclass
class PretrainReport:
    losses: List[float] = field(default_factory=list)
    probe_acc: float = float("nan")
    simple_r2: float = float("nan")


def pretrain(gen: data_gen.GeneratorState, cfg: PretrainConfig = PretrainConfig(),
             report: Optional[PretrainReport] = None, check: bool = True) -> ComputationGraph:
    """Train an extractor that linearly exposes both the complex class and the simple block.

    The extractor is trained jointly with a throwaway classification head
    (cross-entropy on the complex-determined label) and a throwaway linear
    decoder reconstructing the simple block from ``h`` (mean squared error,
    weighted by ``recon_weight``). The pretraining stream uses ``cfg.rho``
    (default 0, i.e. the simple block carries no label information), so the
    classifier cannot lean on it while the decoder still forces it into ``h``.
    """
    report = report if report is not None else PretrainReport()
    C, d = gen.cfg.C, gen.cfg.dim
    rng_init = make_rng(cfg.seed, "pretrain", "init")
    rng_data = make_rng(cfg.seed, "pretrain", "data")
    rng_shuf = make_rng(cfg.seed, "pretrain", "shuffle")

    ext = new_extractor(d, rng_init)
    cls_head = new_head(REPR_DIM, C, rng_init, scale=np.sqrt(1.0 / REPR_DIM))
    dec_head = new_head(REPR_DIM, C, rng_init, scale=np.sqrt(1.0 / REPR_DIM))
    params = ext.params() + [cls_head.weight, cls_head.bias, dec_head.weight, dec_head.bias]
    opt = SGD(cfg.lr, cfg.momentum)

    ds = data_gen.sample(gen, cfg.n, rng_data, rho=cfg.rho, provenance="train")
    simple = ds.inputs[:, :C]
    for epoch in range(cfg.epochs):
        order = rng_shuf.permutation(cfg.n)
        total = 0.0
        for start in range(0, cfg.n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            acts = forward(ext, ds.inputs[idx])
            h = acts[-1]
            z_cls = h @ cls_head.weight.T + cls_head.bias
            z_dec = h @ dec_head.weight.T + dec_head.bias
            l_cls, g_cls = loss_and_grad(z_cls, SoftmaxCE(ds.labels[idx]))
            l_dec, g_dec = loss_and_grad(z_dec, MSE(simple[idx]))
            g_dec = cfg.recon_weight * g_dec
            dh = g_cls @ cls_head.weight + g_dec @ dec_head.weight
            grads = backward_from(ext, acts, dh, need_input=False).params
            grads += [g_cls.T @ h, g_cls.sum(axis=0), g_dec.T @ h, g_dec.sum(axis=0)]
            opt.step(params, grads)
            total += (l_cls + cfg.recon_weight * l_dec) * len(idx)
        report.losses.append(total / cfg.n)
        if not np.isfinite(report.losses[-1]):
            raise PretrainingError(f"pretraining loss diverged at epoch {epoch}")

    if check:
        report.probe_acc, report.simple_r2 = decodability(ext, gen, cfg.seed)
        log.info("pretrain: probe acc %.4f, simple R2 %.4f", report.probe_acc, report.simple_r2)
        problems = []
        if report.probe_acc < cfg.min_probe_acc:
            problems.append(f"complex-feature probe accuracy {report.probe_acc:.4f} < {cfg.min_probe_acc}")
        if report.simple_r2 < cfg.min_simple_r2:
            problems.append(f"simple-block R^2 {report.simple_r2:.4f} < {cfg.min_simple_r2}")
        if problems:
            raise PretrainingError("pretrained extractor failed checks: " + "; ".join(problems))
    return ext


def decodability(ext: ComputationGraph, gen: data_gen.GeneratorState, seed: int = 0,
                 n_train: int = 5000, n_test: int = 5000) -> Tuple[float, float]:
    """(complex-class probe accuracy at rho=0, simple-block regression R^2)."""
    C = gen.cfg.C
    rng = make_rng(seed, "pretrain", "checks")
    tr = data_gen.sample(gen, n_train, rng, rho=0.0)
    te = data_gen.sample(gen, n_test, rng, rho=0.0)
    h_tr, h_te = embed(ext, tr.inputs), embed(ext, te.inputs)
    probe = fit_softmax_probe(h_tr, tr.labels, C)
    acc = probe_accuracy(probe, h_te, te.labels)
    r2 = regression_r2(h_tr, tr.inputs[:, :C], h_te, te.inputs[:, :C])
    return acc, r2


# ---------------------------------------------------------------------------
# checkpoints
#
# Text format, one array per record:
#   adaptlab-checkpoint 1
#   <name> <rows> <cols>
#   <rows*cols whitespace-separated values, row-major>
# Biases are stored as 1 x n. Records appear as extractor W0 b0 W1 b1 ...,
# then head W/b, then snapshot W0 b0 ... when present.

MAGIC = "adaptlab-checkpoint 1"


def _records(prefix: str, graph: ComputationGraph):
    for i, a in enumerate(graph.affines()):
        yield f"{prefix}.W{i}", a.weight
        yield f"{prefix}.b{i}", a.bias.reshape(1, -1)


def save_checkpoint(path, extractor: ComputationGraph, head: Optional[Affine] = None,
                    snapshot: Optional[ComputationGraph] = None) -> None:
    recs = list(_records("extractor", extractor))
    if head is not None:
        recs += [("head.W", head.weight), ("head.b", head.bias.reshape(1, -1))]
    if snapshot is not None:
        recs += list(_records("snapshot", snapshot))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(MAGIC + "\n")
        for name, arr in recs:
            fh.write(f"{name} {arr.shape[0]} {arr.shape[1]}\n")
            fh.write(" ".join(repr(float(v)) for v in arr.ravel()) + "\n")


def _graph_from(arrays: Dict[str, np.ndarray], prefix: str) -> Optional[ComputationGraph]:
    layers = []
    i = 0
    while f"{prefix}.W{i}" in arrays:
        w = arrays[f"{prefix}.W{i}"]
        b = arrays.get(f"{prefix}.b{i}")
        if b is None or b.shape != (1, w.shape[0]):
            raise ConfigError(f"checkpoint bias {prefix}.b{i} missing or mis-shaped")
        if layers:
            layers.append(Relu())
        layers.append(Affine(w, b.ravel().copy()))
        i += 1
    return ComputationGraph(layers) if layers else None


def load_checkpoint(path) -> Tuple[ComputationGraph, Optional[Affine], Optional[ComputationGraph]]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0].strip() != MAGIC:
        raise ConfigError(f"{path}: not an adaptlab checkpoint")
    if (len(lines) - 1) % 2:
        raise ConfigError(f"{path}: truncated checkpoint")
    arrays: Dict[str, np.ndarray] = {}
    for hdr, body in zip(lines[1::2], lines[2::2]):
        parts = hdr.split()
        if len(parts) != 3:
            raise ConfigError(f"{path}: bad record header {hdr!r}")
        name, rows, cols = parts[0], int(parts[1]), int(parts[2])
        vals = np.array([float(v) for v in body.split()], dtype=np.float64)
        if vals.size != rows * cols:
            raise ConfigError(f"{path}: {name} declares {rows}x{cols} but holds {vals.size} values")
        arrays[name] = vals.reshape(rows, cols)
    ext = _graph_from(arrays, "extractor")
    if ext is None:
        raise ConfigError(f"{path}: no extractor in checkpoint")
    head = None
    if "head.W" in arrays:
        w, b = arrays["head.W"], arrays.get("head.b")
        if b is None or b.shape != (1, w.shape[0]) or w.shape[1] != ext.output_dim:
            raise ConfigError(f"{path}: head shape does not match extractor")
        head = Affine(w, b.ravel().copy())
    snap = _graph_from(arrays, "snapshot")
    return ext, head, snap
