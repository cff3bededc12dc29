"""Seeded studies: sweep protocols over dominoes settings, select, rank, report.

Outputs written by :func:`run_study` into the output directory:

``runs.csv``     one row per (rho, protocol, hyperparameter point, seed)
``summary.csv``  seed-averaged rows at the selected hyperparameter point
``ranks.csv``    mean rank per (metric, protocol) across rho settings
``summary.md``   the summary as a markdown table
"""
from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import logging
import re
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from . import data_gen, model, protocols, safety_eval
from .errors import ConfigError, TrainingError
from .numerics import make_rng

log = logging.getLogger(__name__)

HP_KEYS = ("lp_lr", "ft_lr", "vat_alpha", "udp_epsilon", "soup_k")
RUN_COLUMNS = ("run_id", "rho", "protocol", *HP_KEYS, "seed", "status", "error", "id_val_acc",
               *safety_eval.REPORT_FIELDS)
SUMMARY_COLUMNS = ("rho", "protocol", *HP_KEYS, "n_seeds", "id_val_acc", *safety_eval.REPORT_FIELDS)
RANK_METRICS = safety_eval.REPORT_FIELDS

_NAME = re.compile(r"^LP(?:\((VAT|UDP|Soup)\))?(?:\+FT(?:\((VAT|UDP)\))?)?$")


@dataclass(frozen=True)
class StudyConfig:
    rhos: Tuple[float, ...] = (0.95, 0.99, 1.0)
    protocols: Tuple[str, ...] = ("LP", "FT", "LP+FT", "LP(VAT)+FT", "LP(UDP)+FT", "LP(Soup)+FT")
    seeds: Tuple[int, ...] = (0, 1, 2)
    lp_lr: Tuple[float, ...] = (0.01, 0.1, 1.0)
    ft_lr: Tuple[float, ...] = (1e-4, 1e-3)
    lpft_ft_lr: Tuple[float, ...] = (1e-5, 1e-4)
    vat_alpha: Tuple[float, ...] = (0.001, 0.01, 0.1)
    udp_epsilon: Tuple[float, ...] = (0.005, 0.01, 0.02, 0.1)
    soup_k: Tuple[int, ...] = (5, 10, 20)
    vat_epsilon: float = 0.1
    soup_sparsity: float = 0.5
    lp_epochs: int = 100
    ft_epochs: int = 20
    batch_size: int = 128
    momentum: float = 0.9
    head_init_scale: float = 0.5
    C: int = 5
    d_c: int = 8
    sigma_s: float = 0.1
    sigma_c: float = 0.15
    domino_seed: int = 0
    n_train: int = 20000
    n_test: int = 5000
    val_fraction: float = 0.1
    shift_angle: float = float(np.pi / 6)
    shift_noise_scale: float = 1.5
    pgd_epsilon: float = 0.05
    pretrain_epochs: int = 50
    pretrain_lr: float = 0.02
    pretrain_recon_weight: float = 1.0
    pretrain_n: int = 20000
    output_dir: str = "study_out"

    def __post_init__(self):
        if not self.protocols:
            raise ConfigError("protocol list is empty")
        for p in self.protocols:
            parse_protocol(p)
        if len(set(self.protocols)) != len(self.protocols):
            raise ConfigError("protocol list has duplicates")
        if not self.seeds or len(set(self.seeds)) != len(self.seeds):
            raise ConfigError("seeds must be a non-empty list of distinct integers")
        if not self.rhos:
            raise ConfigError("rho list is empty")
        for name in ("lp_lr", "ft_lr", "lpft_ft_lr", "vat_alpha", "udp_epsilon", "soup_k"):
            if not getattr(self, name):
                raise ConfigError(f"grid {name} is empty")
        if not 0.0 < self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in (0, 1)")
        # surfaces generator config errors before any compute
        self.domino(self.rhos[0])
        for r in self.rhos:
            if not 0.0 <= r <= 1.0:
                raise ConfigError(f"rho {r} outside [0, 1]")

    def domino(self, rho: float) -> data_gen.DominoConfig:
        return data_gen.DominoConfig(C=self.C, d_c=self.d_c, rho=rho, sigma_s=self.sigma_s,
                                     sigma_c=self.sigma_c, seed=self.domino_seed)

    def pretrain_config(self) -> model.PretrainConfig:
        return model.PretrainConfig(epochs=self.pretrain_epochs, n=self.pretrain_n, lr=self.pretrain_lr,
                                    recon_weight=self.pretrain_recon_weight, seed=self.domino_seed)

    def shift(self) -> data_gen.ShiftConfig:
        return data_gen.ShiftConfig(self.shift_angle, self.shift_noise_scale)


def load_config(path, **overrides) -> StudyConfig:
    """Read a flat JSON config; unknown keys are rejected."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return config_from_dict(raw, **overrides)


def config_from_dict(raw: dict, **overrides) -> StudyConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    known = {f.name: f for f in fields(StudyConfig)}
    unknown = sorted(set(raw) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    raw = {**raw, **{k: v for k, v in overrides.items() if v is not None}}
    kwargs = {}
    for k, v in raw.items():
        default = known[k].default
        if isinstance(default, tuple) and not isinstance(v, (list, tuple)):
            raise ConfigError(f"config key {k} must be a list")
        kwargs[k] = tuple(v) if isinstance(default, tuple) else v
    try:
        return StudyConfig(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def parse_protocol(name: str) -> Tuple[str, str, str, str]:
    """Map a display name to ``(kind, mitigation, stage, init)``.

    Accepted: ``LP``, ``LP(M)``, ``FT``, ``FT(Scratch)``, ``FT(M)``,
    ``LP+FT``, ``LP(M)+FT``, ``LP+FT(M)``, ``LP(M)+FT(M)``.
    """
    if name == "FT":
        return "FT", "none", "lp", "pretrained"
    if name == "FT(Scratch)":
        return "FT", "none", "lp", "scratch"
    m = re.fullmatch(r"FT\((VAT|UDP)\)", name)
    if m:
        return "FT", m.group(1), "ft", "pretrained"
    m = _NAME.fullmatch(name)
    if not m:
        raise ConfigError(f"unknown protocol {name!r}")
    lp_m, ft_m = m.group(1), m.group(2)
    kind = "LP_FT" if "+FT" in name else "LP"
    if lp_m and ft_m:
        if lp_m != ft_m:
            raise ConfigError(f"{name}: LP and FT stages must use the same mitigation")
        return kind, lp_m, "both", "pretrained"
    if ft_m:
        return kind, ft_m, "ft", "pretrained"
    if lp_m:
        return kind, lp_m, "lp", "pretrained"
    return kind, "none", "lp", "pretrained"


# ---------------------------------------------------------------------------
# run enumeration


@dataclass(frozen=True)
class RunSpec:
    run_id: int
    rho: float
    protocol: str
    hp: Tuple[Tuple[str, object], ...]
    seed: int

    def hp_dict(self) -> Dict[str, object]:
        return dict(self.hp)


def hp_grid(cfg: StudyConfig, protocol: str) -> List[Dict[str, object]]:
    kind, mitig, _, _ = parse_protocol(protocol)
    axes: Dict[str, Sequence] = {}
    if kind in ("LP", "LP_FT"):
        axes["lp_lr"] = cfg.lp_lr
    if kind == "FT":
        axes["ft_lr"] = cfg.ft_lr
    if kind == "LP_FT":
        axes["ft_lr"] = cfg.lpft_ft_lr
    if mitig == "VAT":
        axes["vat_alpha"] = cfg.vat_alpha
    elif mitig == "UDP":
        axes["udp_epsilon"] = cfg.udp_epsilon
    elif mitig == "Soup":
        axes["soup_k"] = cfg.soup_k
    keys = list(axes)
    return [dict(zip(keys, vals)) for vals in itertools.product(*(axes[k] for k in keys))]


def enumerate_runs(cfg: StudyConfig, protocols_: Optional[Sequence[str]] = None) -> List[RunSpec]:
    runs = []
    for rho in cfg.rhos:
        for proto in protocols_ or cfg.protocols:
            for hp in hp_grid(cfg, proto):
                for seed in cfg.seeds:
                    runs.append(RunSpec(len(runs), rho, proto, tuple(sorted(hp.items())), seed))
    return runs


def protocol_config(cfg: StudyConfig, spec: RunSpec) -> protocols.ProtocolConfig:
    kind, mitig, stage, init = parse_protocol(spec.protocol)
    hp = spec.hp_dict()
    return protocols.ProtocolConfig(
        kind=kind, mitigation=mitig, stage=stage, init=init,
        lp_lr=float(hp.get("lp_lr", cfg.lp_lr[0])), ft_lr=float(hp.get("ft_lr", cfg.ft_lr[0])),
        lp_epochs=cfg.lp_epochs, ft_epochs=cfg.ft_epochs, batch_size=cfg.batch_size,
        momentum=cfg.momentum, seed=spec.seed, head_init_scale=cfg.head_init_scale,
        vat=protocols.VATConfig(alpha=float(hp.get("vat_alpha", cfg.vat_alpha[0])), epsilon=cfg.vat_epsilon),
        udp=protocols.UDPConfig(epsilon=float(hp.get("udp_epsilon", cfg.udp_epsilon[0]))),
        soup=protocols.SoupConfig(k=int(hp.get("soup_k", cfg.soup_k[0])), sparsity=cfg.soup_sparsity,
                                  seed=spec.seed),
    )


# ---------------------------------------------------------------------------
# data and pretraining


@dataclass
class Setting:
    gen: data_gen.GeneratorState
    train: data_gen.Dataset
    val: data_gen.Dataset
    sets: safety_eval.EvalSets


def make_setting(cfg: StudyConfig, rho: float) -> Setting:
    gen = data_gen.build_generators(cfg.domino(rho))
    rng = make_rng(cfg.domino_seed, "study", "train", int(round(rho * 1e6)))
    full = data_gen.sample(gen, cfg.n_train, rng, rho=rho)
    n_val = int(round(cfg.val_fraction * cfg.n_train))
    val = full.subset(slice(cfg.n_train - n_val, None), provenance="id_val")
    train = full.subset(slice(0, cfg.n_train - n_val))
    sets = safety_eval.build_eval_sets(gen, rho, cfg.domino_seed + int(round(rho * 1e6)),
                                       n=cfg.n_test, shift=cfg.shift())
    return Setting(gen, train, val, sets)


def pretrain_key(cfg: StudyConfig) -> str:
    blob = json.dumps({"domino": asdict(cfg.domino(0.0)), "pretrain": asdict(cfg.pretrain_config())},
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def pretrained_extractor(cfg: StudyConfig, cache_dir: Optional[Path] = None):
    """Pretrain once per (generator seed, pretraining config); reuse a cached checkpoint if present."""
    path = None
    if cache_dir is not None:
        path = Path(cache_dir) / f"pretrained_{pretrain_key(cfg)}.ckpt"
        if path.exists():
            return model.load_checkpoint(path)[0]
    gen = data_gen.build_generators(cfg.domino(0.0))
    ext = model.pretrain(gen, cfg.pretrain_config())
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        model.save_checkpoint(path, ext)
        # reload so every consumer sees the exact same (round-tripped) values
        ext = model.load_checkpoint(path)[0]
    return ext


# ---------------------------------------------------------------------------
# execution

_WORKER: Dict[str, object] = {}


def _init_worker(cfg: StudyConfig, extractor):
    _WORKER.clear()
    _WORKER.update(cfg=cfg, ext=extractor, settings={})


def _setting(rho: float) -> Setting:
    settings = _WORKER["settings"]
    if rho not in settings:
        settings[rho] = make_setting(_WORKER["cfg"], rho)
    return settings[rho]


def execute_run(spec: RunSpec, keep_model: bool = False):
    """Adapt and evaluate one run inside a worker; failures become error rows."""
    cfg: StudyConfig = _WORKER["cfg"]
    row = {"run_id": spec.run_id, "rho": spec.rho, "protocol": spec.protocol, "seed": spec.seed,
           **{k: spec.hp_dict().get(k, "") for k in HP_KEYS}}
    adapted = None
    try:
        st = _setting(spec.rho)
        pcfg = protocol_config(cfg, spec)
        adapted = protocols.run_protocol(_WORKER["ext"], st.train, pcfg, cfg.C)
        report = safety_eval.evaluate_suite(adapted.model, st.sets,
                                            safety_eval.PgdConfig(epsilon=cfg.pgd_epsilon, seed=spec.seed))
        row.update(status="ok", error="", id_val_acc=safety_eval.accuracy(adapted.model, st.val), **report.row())
    except (TrainingError, ConfigError, FloatingPointError, np.linalg.LinAlgError) as exc:
        log.warning("run %d (%s) failed: %s", spec.run_id, spec.protocol, exc)
        row.update(status="failed", error=f"{type(exc).__name__}: {exc}", id_val_acc="",
                   **{k: "" for k in safety_eval.REPORT_FIELDS})
        adapted = None
    return (row, adapted) if keep_model else (row, None)


def execute_runs(cfg: StudyConfig, runs: Sequence[RunSpec], extractor, workers: int = 1,
                 keep_models: bool = False) -> List[Tuple[dict, object]]:
    if workers <= 1:
        _init_worker(cfg, extractor)
        out = [execute_run(r, keep_models) for r in runs]
    else:
        with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker,
                                 initargs=(cfg, extractor)) as pool:
            out = list(pool.map(execute_run, runs, [keep_models] * len(runs)))
    return sorted(out, key=lambda t: t[0]["run_id"])


# ---------------------------------------------------------------------------
# selection, aggregation, ranking


def _hp_tuple(row: dict) -> Tuple[float, ...]:
    return tuple(float(row[k]) if row.get(k, "") != "" else float("-inf") for k in HP_KEYS)


def select_hyperparameters(rows: Iterable[dict]) -> Dict[Tuple[float, str], Tuple[float, ...]]:
    """Best grid point per (rho, protocol) by mean ``id_val_acc`` over successful seeds.

    Ties go to the lexicographically smallest hyperparameter tuple (absent
    hyperparameters sort first).
    """
    groups: Dict[Tuple[float, str], Dict[Tuple[float, ...], List[float]]] = {}
    for r in rows:
        if r.get("status", "ok") != "ok":
            continue
        groups.setdefault((float(r["rho"]), r["protocol"]), {}).setdefault(_hp_tuple(r), []).append(
            float(r["id_val_acc"]))
    best = {}
    for key, points in groups.items():
        best[key] = min(points, key=lambda hp: (-float(np.mean(points[hp])), hp))
    return best


def summarize(rows: Sequence[dict]) -> List[dict]:
    """Seed-averaged rows at the selected grid point, ordered as the runs were."""
    chosen = select_hyperparameters(rows)
    out: Dict[Tuple[float, str], dict] = {}
    order: List[Tuple[float, str]] = []
    for r in rows:
        key = (float(r["rho"]), r["protocol"])
        if key not in order:
            order.append(key)
        if r.get("status", "ok") != "ok" or chosen.get(key) != _hp_tuple(r):
            continue
        out.setdefault(key, {"rho": key[0], "protocol": key[1], **{k: r.get(k, "") for k in HP_KEYS},
                             "_rows": []})["_rows"].append(r)
    summary = []
    for key in order:
        if key not in out:
            continue
        agg = out[key]
        seed_rows = agg.pop("_rows")
        agg["n_seeds"] = len(seed_rows)
        for col in ("id_val_acc", *safety_eval.REPORT_FIELDS):
            agg[col] = float(np.mean([float(s[col]) for s in seed_rows]))
        summary.append(agg)
    return summary


def _average_ranks(values: Sequence[float]) -> List[float]:
    """Rank 1 = largest value; tied values share the mean of their positions."""
    order = sorted(range(len(values)), key=lambda i: -values[i])
    ranks = [0.0] * len(values)
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and values[order[j + 1]] == values[order[i]]:
            j += 1
        for t in range(i, j + 1):
            ranks[order[t]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def rank_protocols(summary: Sequence[dict], metrics: Sequence[str] = RANK_METRICS) -> List[dict]:
    """Per metric: rank protocols within every rho setting, then average over settings."""
    protos = list(dict.fromkeys(r["protocol"] for r in summary))
    rhos = list(dict.fromkeys(float(r["rho"]) for r in summary))
    if len(protos) < 2:
        raise ConfigError("ranking needs at least two protocols")
    table = {(float(r["rho"]), r["protocol"]): r for r in summary}
    out = []
    for metric in metrics:
        per_setting: Dict[float, Dict[str, float]] = {}
        for rho in rhos:
            vals = []
            for p in protos:
                row = table.get((rho, p))
                if row is None or row.get(metric, "") == "":
                    raise ConfigError(f"metric {metric} missing for protocol {p} at rho={rho}")
                vals.append(float(row[metric]))
            per_setting[rho] = dict(zip(protos, _average_ranks(vals)))
        for p in protos:
            rec = {"metric": metric, "protocol": p,
                   "mean_rank": float(np.mean([per_setting[r][p] for r in rhos]))}
            rec.update({f"rank@{r!r}": per_setting[r][p] for r in rhos})
            out.append(rec)
    return out


# ---------------------------------------------------------------------------
# reporting


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path, rows: Sequence[dict], columns: Sequence[str]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c, "")) for c in columns])
    Path(path).write_text(buf.getvalue(), encoding="utf-8")


def read_csv(path) -> List[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def markdown_table(summary: Sequence[dict]) -> str:
    cols = ["rho", "protocol", *safety_eval.REPORT_FIELDS]
    lines = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for r in summary:
        cells = [f"{r[c]:.4f}" if isinstance(r[c], float) and c != "rho" else str(r[c]) for c in cols]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def write_reports(out_dir, rows: Sequence[dict]) -> Tuple[List[dict], Optional[List[dict]]]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "runs.csv", rows, RUN_COLUMNS)
    summary = summarize(rows)
    write_csv(out / "summary.csv", summary, SUMMARY_COLUMNS)
    ranks = None
    if len({r["protocol"] for r in summary}) >= 2:
        ranks = rank_protocols(summary)
        write_csv(out / "ranks.csv", ranks, list(ranks[0]))
    (out / "summary.md").write_text(markdown_table(summary), encoding="utf-8")
    return summary, ranks


@dataclass
class StudyResult:
    rows: List[dict]
    summary: List[dict]
    ranks: Optional[List[dict]]
    models: Dict[int, object] = field(default_factory=dict)

    @property
    def failed(self) -> int:
        return sum(r["status"] != "ok" for r in self.rows)


def run_study(cfg: StudyConfig, out_dir=None, workers: int = 1, keep_models: bool = False,
              protocols_: Optional[Sequence[str]] = None) -> StudyResult:
    out = Path(out_dir or cfg.output_dir)
    ext = pretrained_extractor(cfg, out / "cache")
    runs = enumerate_runs(cfg, protocols_)
    log.info("study: %d runs on %d worker(s)", len(runs), workers)
    results = execute_runs(cfg, runs, ext, workers, keep_models)
    rows = [r for r, _ in results]
    summary, ranks = write_reports(out, rows)
    models = {r["run_id"]: m for r, m in results if m is not None}
    return StudyResult(rows, summary, ranks, models)
