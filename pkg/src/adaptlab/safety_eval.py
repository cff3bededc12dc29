"""Generalisation and safety metrics for adapted models."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from . import data_gen
from .data_gen import Dataset, GeneratorState, ShiftConfig
from .errors import ConfigError
from .model import ModelState, embed, predict
from .numerics import SoftmaxCE, backward, forward, make_rng

REPORT_FIELDS = ("id_acc", "ood_acc", "corr_acc", "rand_acc", "mca", "adv_acc",
                 "calib_id", "calib_corrupted", "calib_ood", "anomaly_auroc", "cka")


@dataclass
class MetricReport:
    id_acc: float
    ood_acc: float
    corr_acc: float
    rand_acc: float
    mca: float
    adv_acc: float
    calib_id: float         # 1 - RMS calibration error
    calib_corrupted: float  # mean over corrupted sets of 1 - RMS
    calib_ood: float
    anomaly_auroc: float    # mean over anomaly kinds
    cka: float
    corruption_accs: Dict[str, float] = field(default_factory=dict)
    anomaly_aurocs: Dict[str, float] = field(default_factory=dict)

    def row(self) -> Dict[str, float]:
        return {k: getattr(self, k) for k in REPORT_FIELDS}


@dataclass(frozen=True)
class PgdConfig:
    epsilon: float = 0.05
    steps: int = 10
    step_size: Optional[float] = None  # epsilon / 4
    random_start: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.epsilon < 0:
            raise ConfigError("PGD epsilon must be non-negative")

    @property
    def step(self) -> float:
        return self.epsilon / 4 if self.step_size is None else self.step_size


def _require_nonempty(n: int, what: str) -> None:
    if n == 0:
        raise ConfigError(f"{what} is empty")


def accuracy(model: ModelState, ds: Dataset) -> float:
    """Fraction of samples whose argmax prediction (lowest index on ties) equals the label."""
    _require_nonempty(len(ds), "dataset")
    return float(np.mean(np.argmax(predict(model, ds.inputs), axis=1) == ds.labels))


def calibration_rmse(confidences, correct, bins: int = 15) -> float:
    """Binned RMS calibration error over ``bins`` equal-width confidence bins."""
    conf = np.asarray(confidences, dtype=np.float64).ravel()
    hit = np.asarray(correct, dtype=np.float64).ravel()
    _require_nonempty(conf.size, "confidence vector")
    if conf.shape != hit.shape:
        raise ConfigError("confidences and correctness flags differ in length")
    if np.any(conf < 0) or np.any(conf > 1):
        raise ConfigError("confidences must lie in [0, 1]")
    idx = np.minimum((conf * bins).astype(np.int64), bins - 1)
    count = np.bincount(idx, minlength=bins).astype(np.float64)
    acc_sum = np.bincount(idx, weights=hit, minlength=bins)
    conf_sum = np.bincount(idx, weights=conf, minlength=bins)
    used = count > 0
    gap = (acc_sum[used] - conf_sum[used]) / count[used]
    return float(np.sqrt(np.sum(count[used] * gap**2) / conf.size))


def confidence_and_correct(model: ModelState, ds: Dataset):
    probs = predict(model, ds.inputs)
    pred = np.argmax(probs, axis=1)
    return probs[np.arange(len(ds)), pred], pred == ds.labels


def auroc(id_scores, anomaly_scores) -> float:
    """P(id score > anomaly score) + 0.5 * P(tie), computed from sorted ranks."""
    a = np.asarray(id_scores, dtype=np.float64).ravel()
    b = np.sort(np.asarray(anomaly_scores, dtype=np.float64).ravel())
    _require_nonempty(a.size, "id score list")
    _require_nonempty(b.size, "anomaly score list")
    below = np.searchsorted(b, a, side="left")
    ties = np.searchsorted(b, a, side="right") - below
    return float((below.sum() + 0.5 * ties.sum()) / (a.size * b.size))


def msp(model: ModelState, x) -> np.ndarray:
    """Maximum softmax probability, the anomaly score (higher = more in-distribution)."""
    return predict(model, x).max(axis=1)


def pgd_examples(model: ModelState, x: np.ndarray, y: np.ndarray, pcfg: PgdConfig) -> np.ndarray:
    """L-inf PGD on the input: signed-gradient ascent on CE, projected to the eps-box."""
    graph = model.graph()
    eps = pcfg.epsilon
    rng = make_rng(pcfg.seed, "pgd")
    if pcfg.random_start:
        adv = x + rng.uniform(-eps, eps, size=x.shape)
    else:
        adv = x.copy()
    for _ in range(pcfg.steps):
        g = backward(graph, forward(graph, adv), SoftmaxCE(y)).input
        adv = adv + pcfg.step * np.sign(g)
        adv = x + np.clip(adv - x, -eps, eps)
    return adv


def pgd_attack(model: ModelState, ds: Dataset, pcfg: PgdConfig = PgdConfig()) -> float:
    adv = pgd_examples(model, ds.inputs, ds.labels, pcfg)
    return float(np.mean(np.argmax(predict(model, adv), axis=1) == ds.labels))


def linear_cka(h1, h2) -> float:
    """Linear centred kernel alignment between two ``n x p`` representations."""
    a = np.asarray(h1, dtype=np.float64)
    b = np.asarray(h2, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] != b.shape[0]:
        raise ConfigError(f"CKA needs matrices with equal row counts, got {a.shape} and {b.shape}")
    a = a - a.mean(axis=0)
    b = b - b.mean(axis=0)
    # copies keep all three products on the general matmul path; the
    # symmetric a.T @ a kernel rounds differently and breaks CKA(H, H) == 1
    cross = np.linalg.norm(a.T @ b.copy())
    norm_a = np.linalg.norm(a.T @ a.copy())
    norm_b = np.linalg.norm(b.T @ b.copy())
    if norm_a == 0 or norm_b == 0:
        raise ConfigError("CKA undefined for a zero-variance representation")
    return float(min(1.0, cross * cross / (norm_a * norm_b)))


# ---------------------------------------------------------------------------
# full suite


@dataclass
class EvalSets:
    id_test: Dataset
    ood_test: Dataset
    correlated: Dataset
    randomized: Dataset
    corrupted: Dict[str, Dataset]
    anomalies: Dict[str, np.ndarray]


def build_eval_sets(gen: GeneratorState, rho: float, seed: int, n: int = 5000,
                    shift: ShiftConfig = ShiftConfig()) -> EvalSets:
    """All evaluation splits for one dominoes setting.

    ``ood_test`` uses the training correlation on shifted complex features;
    ``correlated`` and ``randomized`` are the same shift with the simple block
    always agreeing (rho=1) or independent of the label (rho=0).
    """
    rng = make_rng(seed, "eval", "splits")
    id_test = data_gen.sample(gen, n, rng, rho=rho, provenance="id_test")
    ood = data_gen.sample_ood(gen, shift, n, rng, rho=rho, provenance="ood_test")
    corr = data_gen.sample_ood(gen, shift, n, rng, rho=1.0, provenance="correlated")
    rand = data_gen.sample_ood(gen, shift, n, rng, rho=0.0, provenance="randomized")
    rng_c = make_rng(seed, "eval", "corrupt")
    corrupted = {s.name: data_gen.corrupt(id_test, s, rng_c) for s in data_gen.all_corruptions()}
    rng_a = make_rng(seed, "eval", "anomaly")
    anomalies = {k: data_gen.sample_anomalies(k, n, gen, rng_a) for k in data_gen.ANOMALY_KINDS}
    return EvalSets(id_test, ood, corr, rand, corrupted, anomalies)


def _one_minus_rms(model: ModelState, ds: Dataset) -> float:
    conf, hit = confidence_and_correct(model, ds)
    return 1.0 - calibration_rmse(conf, hit)


def evaluate_suite(model: ModelState, sets: EvalSets, pcfg: PgdConfig = PgdConfig()) -> MetricReport:
    missing = [name for name in ("id_test", "ood_test", "correlated", "randomized")
               if getattr(sets, name, None) is None]
    missing += [f"corrupted:{s.name}" for s in data_gen.all_corruptions() if s.name not in sets.corrupted]
    missing += [f"anomaly:{k}" for k in data_gen.ANOMALY_KINDS if k not in sets.anomalies]
    if missing:
        raise ConfigError("evaluation sets missing: " + ", ".join(missing))

    corr_accs = {name: accuracy(model, ds) for name, ds in sets.corrupted.items()}
    id_scores = msp(model, sets.id_test.inputs)
    anomaly = {k: auroc(id_scores, msp(model, x)) for k, x in sets.anomalies.items()}
    h_pre = embed(model.pretrained_snapshot, sets.id_test.inputs)
    h_post = embed(model.extractor, sets.id_test.inputs)
    return MetricReport(
        id_acc=accuracy(model, sets.id_test),
        ood_acc=accuracy(model, sets.ood_test),
        corr_acc=accuracy(model, sets.correlated),
        rand_acc=accuracy(model, sets.randomized),
        mca=float(np.mean(list(corr_accs.values()))),
        adv_acc=pgd_attack(model, sets.id_test, pcfg),
        calib_id=_one_minus_rms(model, sets.id_test),
        calib_corrupted=float(np.mean([_one_minus_rms(model, ds) for ds in sets.corrupted.values()])),
        calib_ood=_one_minus_rms(model, sets.ood_test),
        anomaly_auroc=float(np.mean(list(anomaly.values()))),
        cka=linear_cka(h_pre, h_post),
        corruption_accs=corr_accs,
        anomaly_aurocs=anomaly,
    )
