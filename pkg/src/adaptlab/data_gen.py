"""Vector "dominoes": a simple one-hot block glued to a complex antipodal block.

Each sample is ``[simple | complex]``. The label is the class of the complex
block, which sits at ``±v_c`` for an orthonormal direction ``v_c``. The two
signs cancel, so every class mean in the complex block is zero and the
likelihood-optimal linear softmax map on that block is the zero map. Linear
argmax rules can still beat chance by reading the half-space of ``v_c . x``.

The simple block is a noisy one-hot code that agrees with the label with
probability ``rho`` (otherwise its class is drawn uniformly over all
classes), so it is linearly trivial but can be a shortcut.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np

from .errors import ConfigError
from .numerics import make_rng

CORRUPTION_KINDS = ("gaussian_noise", "uniform_noise", "mask_zero", "scale_down", "constant_shift")
CORRUPTION_MAGNITUDES: Dict[str, Tuple[float, float, float]] = {
    "gaussian_noise": (0.1, 0.2, 0.4),
    "uniform_noise": (0.1, 0.2, 0.4),
    "mask_zero": (0.1, 0.25, 0.5),
    "scale_down": (0.8, 0.6, 0.4),
    "constant_shift": (0.2, 0.5, 1.0),
}
ANOMALY_KINDS = ("gaussian", "uniform", "blob", "heldout_class")
HELDOUT_CLASSES = 2


@dataclass(frozen=True)
class DominoConfig:
    C: int = 5
    d_c: int = 8
    rho: float = 1.0
    sigma_s: float = 0.1
    sigma_c: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.C < 2:
            raise ConfigError("need at least two classes")
        if self.d_c < self.C:
            raise ConfigError(f"complex block width d_c={self.d_c} must be >= C={self.C}")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError(f"rho must lie in [0, 1], got {self.rho}")
        if self.sigma_s <= 0 or self.sigma_c <= 0:
            raise ConfigError("noise scales must be positive")

    @property
    def d_s(self) -> int:
        return self.C

    @property
    def dim(self) -> int:
        return self.C + self.d_c


@dataclass(frozen=True)
class ShiftConfig:
    rotation_angle: float = np.pi / 6
    noise_scale: float = 1.5


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int

    def __post_init__(self):
        if self.kind not in CORRUPTION_MAGNITUDES:
            raise ConfigError(f"unknown corruption kind {self.kind!r}")
        if self.severity not in (1, 2, 3):
            raise ConfigError(f"severity must be 1, 2 or 3, got {self.severity!r}")

    @property
    def magnitude(self) -> float:
        return CORRUPTION_MAGNITUDES[self.kind][self.severity - 1]

    @property
    def name(self) -> str:
        return f"{self.kind}_{self.severity}"


def all_corruptions():
    return [CorruptionSpec(k, s) for k in CORRUPTION_KINDS for s in (1, 2, 3)]


@dataclass
class Dataset:
    inputs: np.ndarray
    labels: np.ndarray
    simple_labels: np.ndarray
    provenance: str = "train"

    def __len__(self) -> int:
        return self.inputs.shape[0]

    def subset(self, idx, provenance: Optional[str] = None) -> "Dataset":
        return Dataset(self.inputs[idx], self.labels[idx], self.simple_labels[idx],
                       provenance or self.provenance)

    def to_csv(self, path) -> None:
        """Write ``x_0..x_{d-1}, y, l_s, provenance`` rows."""
        d = self.inputs.shape[1]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow([f"x_{j}" for j in range(d)] + ["y", "l_s", "provenance"])
            for x, y, s in zip(self.inputs, self.labels, self.simple_labels):
                w.writerow([repr(float(v)) for v in x] + [int(y), int(s), self.provenance])

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        d = len(header) - 3
        if header[:d] != [f"x_{j}" for j in range(d)] or header[d:] != ["y", "l_s", "provenance"]:
            raise ConfigError(f"unexpected dataset header in {path}")
        x = np.array([[float(v) for v in r[:d]] for r in body], dtype=np.float64).reshape(-1, d)
        y = np.array([int(r[d]) for r in body], dtype=np.int64)
        s = np.array([int(r[d + 1]) for r in body], dtype=np.int64)
        prov = body[0][d + 2] if body else "train"
        return cls(x, y, s, prov)


@dataclass(frozen=True)
class GeneratorState:
    cfg: DominoConfig
    directions: np.ndarray            # d_c x C, orthonormal columns
    heldout_directions: np.ndarray    # d_c x HELDOUT_CLASSES (may be empty)
    blob_direction: np.ndarray        # unit vector in R^dim
    frame: np.ndarray = field(repr=False)  # d_c x d_c orthogonal basis for shift rotations

    @property
    def prototypes(self) -> np.ndarray:
        return np.eye(self.cfg.C)


def build_generators(cfg: DominoConfig) -> GeneratorState:
    rng = make_rng(cfg.seed, "generators")
    k = min(cfg.d_c, cfg.C + HELDOUT_CLASSES)
    q, r = np.linalg.qr(rng.normal(size=(cfg.d_c, k)))
    q = q * np.sign(np.diag(r))  # unique QR
    frame, r2 = np.linalg.qr(rng.normal(size=(cfg.d_c, cfg.d_c)))
    frame = frame * np.sign(np.diag(r2))
    u = rng.normal(size=cfg.dim)
    return GeneratorState(cfg, q[:, :cfg.C], q[:, cfg.C:], u / np.linalg.norm(u), frame)


def shift_rotation(gen: GeneratorState, angle: float) -> np.ndarray:
    """Orthogonal map turning every complex-block vector by exactly ``angle``.

    The complex space is split into planes (columns of the generator's seeded
    frame, taken in pairs) and each plane is rotated by ``angle``. With an odd
    width the last frame axis is left fixed.
    """
    d = gen.cfg.d_c
    if angle == 0:
        return np.eye(d)
    block = np.eye(d)
    c, s = np.cos(angle), np.sin(angle)
    for i in range(0, d - 1, 2):
        block[i:i + 2, i:i + 2] = [[c, -s], [s, c]]
    return gen.frame @ block @ gen.frame.T


def _draw(gen: GeneratorState, n: int, rho: float, directions: np.ndarray,
          sigma_c: float, rng: np.random.Generator, provenance: str) -> Dataset:
    cfg = gen.cfg
    if n < 1:
        raise ConfigError("n must be at least 1")
    if not 0.0 <= rho <= 1.0:
        raise ConfigError(f"rho must lie in [0, 1], got {rho}")
    C = cfg.C
    y = rng.integers(0, C, size=n)
    sign = rng.choice(np.array([-1.0, 1.0]), size=n)
    keep = rng.random(n) < rho
    other = rng.integers(0, C, size=n)
    simple_labels = np.where(keep, y, other)
    noise_c = rng.normal(size=(n, cfg.d_c))
    noise_s = rng.normal(size=(n, C))
    complex_block = sign[:, None] * directions[:, y].T + sigma_c * noise_c
    simple_block = np.eye(C)[simple_labels] + cfg.sigma_s * noise_s
    x = np.hstack([simple_block, complex_block])
    return Dataset(x, y.astype(np.int64), simple_labels.astype(np.int64), provenance)


def sample(gen: GeneratorState, n: int, rng: np.random.Generator, rho: Optional[float] = None,
           provenance: str = "train") -> Dataset:
    rho = gen.cfg.rho if rho is None else rho
    return _draw(gen, n, rho, gen.directions, gen.cfg.sigma_c, rng, provenance)


def sample_ood(gen: GeneratorState, shift: ShiftConfig, n: int, rng: np.random.Generator,
               rho: Optional[float] = None, provenance: str = "ood_test") -> Dataset:
    """Like :func:`sample` with rotated complex directions and inflated noise."""
    rho = gen.cfg.rho if rho is None else rho
    directions = gen.directions if shift.rotation_angle == 0 else \
        shift_rotation(gen, shift.rotation_angle) @ gen.directions
    return _draw(gen, n, rho, directions, shift.noise_scale * gen.cfg.sigma_c, rng, provenance)


def mask_count(fraction: float, d: int) -> int:
    return int(np.floor(fraction * d + 0.5))


def corrupt(ds: Dataset, spec: CorruptionSpec, rng: np.random.Generator,
            magnitude: Optional[float] = None) -> Dataset:
    """Apply one synthetic corruption; ``magnitude`` overrides the severity table."""
    m = spec.magnitude if magnitude is None else magnitude
    x = ds.inputs
    n, d = x.shape
    if spec.kind == "gaussian_noise":
        out = x + m * rng.normal(size=x.shape)
    elif spec.kind == "uniform_noise":
        out = x + rng.uniform(-m, m, size=x.shape)
    elif spec.kind == "mask_zero":
        k = mask_count(m, d)
        order = np.argsort(rng.random((n, d)), axis=1)[:, :k]
        out = x.copy()
        np.put_along_axis(out, order, 0.0, axis=1)
    elif spec.kind == "scale_down":
        out = m * x
    else:
        out = x + m
    return Dataset(out, ds.labels.copy(), ds.simple_labels.copy(), f"corrupted({spec.kind},{spec.severity})")


def sample_anomalies(kind: str, n: int, gen: GeneratorState, rng: np.random.Generator) -> np.ndarray:
    """Unlabelled out-of-task inputs for anomaly detection."""
    if n < 1:
        raise ConfigError("n must be at least 1")
    d = gen.cfg.dim
    if kind == "gaussian":
        return rng.normal(size=(n, d))
    if kind == "uniform":
        return rng.uniform(-2.0, 2.0, size=(n, d))
    if kind == "blob":
        s = rng.uniform(-2.0, 2.0, size=n)
        return s[:, None] * gen.blob_direction + 0.1 * rng.normal(size=(n, d))
    if kind == "heldout_class":
        if gen.heldout_directions.shape[1] == 0:
            raise ConfigError("heldout_class anomalies need d_c >= C + 1 reserved directions")
        held = gen.heldout_directions
        idx = rng.integers(0, held.shape[1], size=n)
        sign = rng.choice(np.array([-1.0, 1.0]), size=n)
        complex_block = sign[:, None] * held[:, idx].T + gen.cfg.sigma_c * rng.normal(size=(n, gen.cfg.d_c))
        # simple half carries an ordinary one-hot code so only the complex half is novel
        simple_block = np.eye(gen.cfg.C)[rng.integers(0, gen.cfg.C, size=n)] \
            + gen.cfg.sigma_s * rng.normal(size=(n, gen.cfg.C))
        return np.hstack([simple_block, complex_block])
    raise ConfigError(f"unknown anomaly kind {kind!r}")


def load_dataset(path) -> Dataset:
    return Dataset.from_csv(Path(path))
