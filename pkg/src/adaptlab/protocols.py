"""Adaptation protocols: LP, FT, LP+FT and the hardness-promoting probes.

Every protocol is plain minibatch SGD with momentum. Randomness is split by
purpose (head init, shuffling, perturbation noise, soup masks) so that a
mitigation with a vanishing knob (VAT alpha=0, UDP eps=0, Soup k=1/s=0)
consumes exactly the same shuffle stream as plain LP and reproduces it
bit for bit.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from .data_gen import Dataset
from .errors import ConfigError, TrainingError
from .model import ModelState, embed, new_extractor, new_head
from .numerics import (KL, SGD, Affine, ComputationGraph, Entropy, SoftmaxCE, backward_from,
                       entropy, forward, loss_and_grad, make_rng, softmax)

log = logging.getLogger(__name__)

KINDS = ("LP", "FT", "LP_FT")
MITIGATIONS = ("none", "VAT", "UDP", "Soup")
STAGES = ("lp", "ft", "both")


@dataclass(frozen=True)
class VATConfig:
    alpha: float = 0.1
    epsilon: float = 0.1
    xi: float = 1e-6
    power_iters: int = 1

    def __post_init__(self):
        if self.epsilon <= 0 or self.alpha < 0:
            raise ConfigError("VAT needs epsilon > 0 and alpha >= 0")


@dataclass(frozen=True)
class UDPConfig:
    epsilon: float = 0.1
    ascent_steps: int = 5
    step_size: Optional[float] = None  # defaults to epsilon / 4

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError("UDP epsilon must be non-negative")

    @property
    def step(self) -> float:
        return self.epsilon / 4 if self.step_size is None else self.step_size


@dataclass(frozen=True)
class SoupConfig:
    k: int = 5
    sparsity: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ConfigError("soup needs k >= 1")
        if not 0.0 <= self.sparsity < 1.0:
            raise ConfigError("soup sparsity must lie in [0, 1)")


@dataclass(frozen=True)
class ProtocolConfig:
    kind: str = "LP"
    mitigation: str = "none"
    stage: str = "lp"
    lp_lr: float = 0.1
    ft_lr: float = 1e-3
    lp_epochs: int = 100
    ft_epochs: int = 20
    batch_size: int = 128
    momentum: float = 0.9
    seed: int = 0
    init: str = "pretrained"  # or "scratch" (FT only)
    head_init_scale: float = 0.5  # std of freshly initialised heads
    vat: VATConfig = field(default_factory=VATConfig)
    udp: UDPConfig = field(default_factory=UDPConfig)
    soup: SoupConfig = field(default_factory=SoupConfig)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown protocol kind {self.kind!r}")
        if self.mitigation not in MITIGATIONS:
            raise ConfigError(f"unknown mitigation {self.mitigation!r}")
        if self.stage not in STAGES:
            raise ConfigError(f"unknown mitigation stage {self.stage!r}")
        if self.mitigation == "Soup" and self.stage != "lp":
            raise ConfigError("Soup is an LP-stage mitigation only")
        if self.kind == "FT" and self.mitigation != "none" and self.stage != "ft":
            raise ConfigError("FT has no LP stage; use stage='ft' for FT mitigations")
        if self.kind == "LP" and self.mitigation != "none" and self.stage != "lp":
            raise ConfigError("LP has no FT stage; use stage='lp'")
        if self.init not in ("pretrained", "scratch"):
            raise ConfigError(f"unknown init {self.init!r}")
        if self.init == "scratch" and self.kind != "FT":
            raise ConfigError("scratch init only applies to FT")
        if self.lp_lr < 0 or self.ft_lr < 0:
            raise ConfigError("learning rates must be non-negative")
        if self.lp_epochs < 0 or self.ft_epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")

    def mitigates(self, stage: str) -> bool:
        return self.mitigation != "none" and self.stage in (stage, "both")

    @property
    def name(self) -> str:
        """Display name, e.g. ``LP(VAT)+FT`` or ``LP+FT(UDP)``."""
        m = self.mitigation
        lp = f"LP({m})" if self.mitigates("lp") else "LP"
        ft = f"FT({m})" if self.mitigates("ft") else "FT"
        if self.kind == "LP":
            return lp
        if self.kind == "FT":
            return "FT(Scratch)" if self.init == "scratch" else ft
        return f"{lp}+{ft}"


@dataclass
class AdaptedModel:
    model: ModelState
    config: ProtocolConfig
    lp_losses: List[float] = field(default_factory=list)
    ft_losses: List[float] = field(default_factory=list)

    @property
    def losses(self) -> List[float]:
        return self.lp_losses + self.ft_losses


# ---------------------------------------------------------------------------
# latent perturbations


def _head_logits(head: Affine, h: np.ndarray) -> np.ndarray:
    return h @ head.weight.T + head.bias


def _unit_rows(g: np.ndarray, floor: float = 1e-12) -> Tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(g, axis=1, keepdims=True)
    ok = norms >= floor
    return np.where(ok, g / np.where(ok, norms, 1.0), 0.0), ok[:, 0]


def vat_perturbation(head: Affine, h: np.ndarray, vcfg: VATConfig, rng: np.random.Generator) -> np.ndarray:
    """Approximate the KL-maximising latent perturbation of radius ``epsilon``.

    Power iteration on the KL Hessian: start from random unit rows ``d``,
    take the gradient of ``KL(p(h) || p(h + r))`` at ``r = xi*d`` and
    renormalise. Rows whose gradient vanishes get a zero perturbation.
    """
    ref = softmax(_head_logits(head, h))
    d, _ = _unit_rows(rng.normal(size=h.shape))
    for _ in range(vcfg.power_iters):
        r = vcfg.xi * d
        _, dz = loss_and_grad(_head_logits(head, h + r), KL(ref))
        g = dz @ head.weight
        d, ok = _unit_rows(g)
    return vcfg.epsilon * d


def _project_l2(delta: np.ndarray, radius: float) -> np.ndarray:
    norms = np.linalg.norm(delta, axis=1, keepdims=True)
    scale = np.minimum(1.0, radius / np.maximum(norms, 1e-300))
    return delta * scale


def udp_perturbation(head: Affine, h: np.ndarray, ucfg: UDPConfig) -> np.ndarray:
    """Projected normalised-gradient ascent on prediction entropy in latent space.

    A step is kept per row only when that row's entropy does not decrease,
    so every sample ends at least as uncertain as it started.
    """
    delta = np.zeros_like(h)
    if ucfg.epsilon == 0 or ucfg.ascent_steps == 0:
        return delta
    z = _head_logits(head, h)
    current = entropy(softmax(z))
    for _ in range(ucfg.ascent_steps):
        _, dz = loss_and_grad(_head_logits(head, h + delta), Entropy())
        step, _ = _unit_rows(dz @ head.weight)
        cand = _project_l2(delta + ucfg.step * step, ucfg.epsilon)
        cand_h = entropy(softmax(_head_logits(head, h + cand)))
        accept = cand_h >= current
        delta = np.where(accept[:, None], cand, delta)
        current = np.where(accept, cand_h, current)
    return delta


def vat_loss(head: Affine, h: np.ndarray, y: np.ndarray, vcfg: VATConfig,
             rng: np.random.Generator, delta: Optional[np.ndarray] = None):
    """``CE(g(h), y) + alpha * KL(stopgrad p(h) || p(h + delta))``.

    Returns ``(loss, d loss / d h, head gradients [dW, db])``.
    """
    if delta is None:
        delta = vat_perturbation(head, h, vcfg, rng)
    z = _head_logits(head, h)
    l_ce, g_ce = loss_and_grad(z, SoftmaxCE(y))
    hp = h + delta
    l_kl, g_kl = loss_and_grad(_head_logits(head, hp), KL(softmax(z)))
    a = vcfg.alpha
    dW = g_ce.T @ h + a * (g_kl.T @ hp)
    db = g_ce.sum(axis=0) + a * g_kl.sum(axis=0)
    dh = (g_ce + a * g_kl) @ head.weight
    return l_ce + a * l_kl, dh, [dW, db]


# ---------------------------------------------------------------------------
# per-batch objectives on the head; each returns (loss, dL/dh, [dW, db])


def _plain_objective(head, h, y, cfg, rng):
    z = _head_logits(head, h)
    l, g = loss_and_grad(z, SoftmaxCE(y))
    return l, g @ head.weight, [g.T @ h, g.sum(axis=0)]


def _udp_objective(head, h, y, cfg, rng):
    hp = h + udp_perturbation(head, h, cfg.udp)
    return _plain_objective(head, hp, y, cfg, rng)


def _vat_objective(head, h, y, cfg, rng):
    return vat_loss(head, h, y, cfg.vat, rng)


OBJECTIVES = {"none": _plain_objective, "VAT": _vat_objective, "UDP": _udp_objective}


def _check_finite(loss: float, what: str, epoch: int) -> None:
    if not np.isfinite(loss):
        raise TrainingError(f"{what}: non-finite loss at epoch {epoch}")


def _fresh_head(cfg: ProtocolConfig, p: int, C: int, stream: str, index: int = 0) -> Affine:
    return new_head(p, C, make_rng(cfg.seed, stream, index), scale=cfg.head_init_scale)


# ---------------------------------------------------------------------------
# linear probing


def soup_masks(p: int, scfg: SoupConfig) -> np.ndarray:
    """``k x p`` binary masks, each zeroing ``round(s*p)`` seeded latent dims."""
    rng = make_rng(scfg.seed, "soup", "masks")
    n_off = int(np.floor(scfg.sparsity * p + 0.5))
    masks = np.ones((scfg.k, p))
    for i in range(scfg.k):
        masks[i, rng.permutation(p)[:n_off]] = 0.0
    return masks


def soup_average(weights: Sequence[np.ndarray], biases: Sequence[np.ndarray],
                 masks: np.ndarray) -> Affine:
    """Uniform soup of masked probes: mean of ``W_i * m_i`` and of ``b_i``."""
    k = len(weights)
    w = sum(wi * mi for wi, mi in zip(weights, masks)) / k
    b = sum(biases) / k
    return Affine(np.asarray(w, dtype=np.float64), np.asarray(b, dtype=np.float64))


def _train_probes(h: np.ndarray, y: np.ndarray, heads: List[Affine], masks: np.ndarray,
                  cfg: ProtocolConfig, objective) -> List[float]:
    """Jointly train ``heads`` (head ``i`` sees ``h * masks[i]``) on the mean objective."""
    n = h.shape[0]
    k = len(heads)
    rng_shuf = make_rng(cfg.seed, "lp", "shuffle")
    rng_pert = make_rng(cfg.seed, "lp", "perturb")
    params = [p for hd in heads for p in (hd.weight, hd.bias)]
    opt = SGD(cfg.lp_lr, cfg.momentum)
    losses = []
    for epoch in range(cfg.lp_epochs):
        order = rng_shuf.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            hb, yb = h[idx], y[idx]
            grads, batch_loss = [], 0.0
            for hd, m in zip(heads, masks):
                l, _, (dW, db) = objective(hd, hb * m, yb, cfg, rng_pert)
                grads += [dW / k, db / k]
                batch_loss += l / k
            opt.step(params, grads)
            total += batch_loss * len(idx)
        losses.append(total / n)
        _check_finite(losses[-1], "LP", epoch)
    return losses


def soup_train(h: np.ndarray, y: np.ndarray, scfg: SoupConfig, cfg: ProtocolConfig,
               C: Optional[int] = None, objective=_plain_objective) -> Tuple[Affine, List[float]]:
    """Train ``k`` sparse probes jointly and return their weight soup."""
    C = int(y.max()) + 1 if C is None else C
    p = h.shape[1]
    heads = [_fresh_head(cfg, p, C, "lp_head", i) for i in range(scfg.k)]
    masks = soup_masks(p, scfg)
    losses = _train_probes(h, y, heads, masks, cfg, objective)
    return soup_average([hd.weight for hd in heads], [hd.bias for hd in heads], masks), losses


def run_lp(pretrained: ComputationGraph, train: Dataset, cfg: ProtocolConfig, C: int) -> AdaptedModel:
    """Fit a linear head on frozen features; the extractor is shared, never modified."""
    h = embed(pretrained, train.inputs)
    p = h.shape[1]
    mitig = cfg.mitigation if cfg.mitigates("lp") else "none"
    if mitig == "Soup":
        head, losses = soup_train(h, train.labels, cfg.soup, cfg, C)
    else:
        head = _fresh_head(cfg, p, C, "lp_head", 0)
        losses = _train_probes(h, train.labels, [head], np.ones((1, p)), cfg, OBJECTIVES[mitig])
    return AdaptedModel(ModelState(pretrained, head, pretrained), cfg, lp_losses=losses)


# ---------------------------------------------------------------------------
# fine-tuning


def run_ft(init: ModelState, train: Dataset, cfg: ProtocolConfig) -> AdaptedModel:
    """Update extractor and head together; returns a new model, ``init`` is untouched."""
    state = init.copy()
    ext, head = state.extractor, state.head
    mitig = cfg.mitigation if cfg.mitigates("ft") else "none"
    objective = OBJECTIVES[mitig]
    rng_shuf = make_rng(cfg.seed, "ft", "shuffle")
    rng_pert = make_rng(cfg.seed, "ft", "perturb")
    params = ext.params() + [head.weight, head.bias]
    opt = SGD(cfg.ft_lr, cfg.momentum)
    n = len(train)
    losses = []
    for epoch in range(cfg.ft_epochs):
        order = rng_shuf.permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            acts = forward(ext, train.inputs[idx])
            l, dh, head_grads = objective(head, acts[-1], train.labels[idx], cfg, rng_pert)
            grads = backward_from(ext, acts, dh, need_input=False).params + head_grads
            opt.step(params, grads)
            total += l * len(idx)
        losses.append(total / n)
        _check_finite(losses[-1], "FT", epoch)
    return AdaptedModel(state, cfg, ft_losses=losses)


def run_protocol(pretrained: ComputationGraph, train: Dataset, cfg: ProtocolConfig, C: int) -> AdaptedModel:
    """Dispatch on ``cfg.kind``; the result always carries the pretrained snapshot."""
    if cfg.kind == "LP":
        return run_lp(pretrained, train, cfg, C)
    if cfg.kind == "LP_FT":
        lp = run_lp(pretrained, train, cfg, C)
        ft = run_ft(lp.model, train, cfg)
        ft.lp_losses = lp.lp_losses
        return ft
    # plain FT: fresh head on either the pretrained or a random extractor
    if cfg.init == "scratch":
        ext = new_extractor(pretrained.input_dim, make_rng(cfg.seed, "scratch", "init"),
                            p=pretrained.output_dim)
    else:
        ext = pretrained
    head = _fresh_head(cfg, ext.output_dim, C, "ft_head", 0)
    return run_ft(ModelState(ext, head, pretrained), train, cfg)
