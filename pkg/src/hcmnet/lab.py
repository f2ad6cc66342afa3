"""Data generation and rate-of-convergence sweeps.

A sweep fits the truncated least-squares estimator for every sample size of
an ``n`` grid and several replicates, measures L2 errors on fresh Monte-Carlo
points and regresses log error on log n.  All outputs are reproducible from
the manifest written next to them; wall times go to a separate file because
they never reproduce.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np

from . import __version__
from .approx import schedule
from .estimator import Dataset, Predictor, TrainConfig, fit, l2_error
from .hcm import HCMSpec, evaluate_hcm, hcm_from_dict, hcm_to_dict, load_hcm
from .network import NetworkClass, in_class

log = logging.getLogger(__name__)

RATE_COLUMNS = ("n", "replicate", "l2_error", "train_risk", "seed")
AGGREGATE_COLUMNS = ("n", "mean_err", "stderr", "count")
TIMING_COLUMNS = ("n", "replicate", "seconds")


@dataclass
class ExperimentConfig:
    """Everything a sweep needs.  ``hcm`` is a path (relative to the config file) or an inline model."""

    hcm: str | dict
    n_grid: list
    replications: int = 10
    noise_sd: float = 0.3
    mc_points: int = 20_000
    a: float = 1.0
    train: TrainConfig = field(default_factory=TrainConfig)
    c3: float = 2.0
    c4: float = 1.0
    c18: float = 1.0
    width_scale: float = 1.0
    seed: int = 0
    out: str = "runs/rate"
    expect: dict = field(default_factory=dict)

    def __post_init__(self):
        self.n_grid = [int(n) for n in self.n_grid]
        if len(self.n_grid) < 3 or any(b <= a for a, b in zip(self.n_grid, self.n_grid[1:])):
            raise ValueError(f"n grid must be strictly increasing with >= 3 points, got {self.n_grid}")
        if self.n_grid[0] < 2:
            raise ValueError("sample sizes must be >= 2")
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if isinstance(self.train, dict):
            self.train = TrainConfig(**self.train)

    def spec(self, base: Path | None = None) -> HCMSpec:
        if isinstance(self.hcm, dict):
            return hcm_from_dict(self.hcm)
        path = Path(self.hcm)
        if not path.is_absolute() and base is not None:
            path = base / path
        return load_hcm(path)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["train"] = asdict(self.train)
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        obj = dict(obj.get("config", obj))
        known = {f for f in cls.__dataclass_fields__}
        extra = set(obj) - known
        if extra:
            raise ValueError(f"unknown config keys: {sorted(extra)}")
        return cls(**obj)

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentConfig":
        """Read a config, or the ``config`` entry of a manifest.

        A manifest carries the model inline, so re-running it does not depend
        on the original model file.
        """
        path = Path(path)
        obj = json.loads(path.read_text())
        cfg = cls.from_dict(obj)
        if not isinstance(cfg.hcm, dict):
            cfg.hcm = hcm_to_dict(cfg.spec(path.parent))
        return cfg


def generate_dataset(spec: HCMSpec, n: int, noise_sd: float, a: float = 1.0, seed: int = 0) -> Dataset:
    """``X`` uniform on ``[-a, a]^d``, ``Y = m(X) + N(0, noise_sd^2)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    X = rng.uniform(-a, a, (n, spec.d))
    y = evaluate_hcm(spec, X) + noise_sd * rng.standard_normal(n)
    return Dataset(X, y, {"a": a, "noise_sd": noise_sd, "seed": seed, "n": n})


class SlopeFit(NamedTuple):
    slope: float
    intercept: float
    r2: float


def fit_slope(pairs: Sequence[tuple[float, float]]) -> SlopeFit:
    """Least squares of ``ln err`` on ``ln n``; nonpositive errors are dropped with a warning."""
    kept = []
    for n, err in pairs:
        if not (err > 0 and math.isfinite(err)):
            warnings.warn(f"dropping point n={n} with error {err}", RuntimeWarning, stacklevel=2)
            continue
        kept.append((float(n), float(err)))
    if len({n for n, _ in kept}) < 2:
        raise ValueError("need at least two distinct n with positive error")
    x = np.log([n for n, _ in kept])
    y = np.log([e for _, e in kept])
    slope, intercept = np.polyfit(x, y, 1)
    resid = y - (slope * x + intercept)
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - float(np.sum(resid ** 2)) / ss_tot
    return SlopeFit(float(slope), float(intercept), r2)


def cell_seeds(master: int, n: int, replicate: int) -> tuple[int, int, int]:
    """Independent seeds for data, training and Monte-Carlo evaluation of one cell."""
    data, train, mc = np.random.SeedSequence([master, n, replicate]).generate_state(3)
    return int(data), int(train), int(mc)


@dataclass
class RateRow:
    n: int
    replicate: int
    l2_error: float
    train_risk: float
    seed: int
    seconds: float
    in_class: bool
    error: str | None = None


def run_cell(cfg_dict: dict, n: int, replicate: int) -> RateRow:
    cfg = ExperimentConfig.from_dict(cfg_dict)
    spec = cfg.spec()
    s_data, s_train, s_mc = cell_seeds(cfg.seed, n, replicate)
    start = time.perf_counter()
    try:
        data = generate_dataset(spec, n, cfg.noise_sd, cfg.a, s_data)
        sch = schedule(n, spec, cfg.c3, cfg.c4, cfg.width_scale)
        cls = NetworkClass(sch.L_n, sch.r_n, sch.alpha_n)
        res = fit(data, cls, cfg.train.replace(seed=s_train))
        if res.network is None:
            raise RuntimeError("; ".join(res.flags))
        pred = Predictor(res.network, sch.beta_n)
        est = l2_error(pred, spec, points=cfg.mc_points, seed=s_mc, a=cfg.a)
        ok = bool(in_class(res.network, cls))
        return RateRow(n, replicate, est.value, res.risk, s_data, time.perf_counter() - start, ok)
    except Exception as exc:  # a failed replicate is recorded, the sweep goes on
        log.warning("n=%d replicate=%d failed: %s", n, replicate, exc)
        return RateRow(n, replicate, math.nan, math.nan, s_data, time.perf_counter() - start, False, str(exc))


@dataclass
class Aggregate:
    n: int
    mean_err: float
    stderr: float
    count: int


@dataclass
class RateReport:
    rows: list
    aggregates: list
    slope: SlopeFit | None
    predicted_exponent: float
    schedules: dict
    checks: dict
    files: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(self.checks.values())

    def means(self) -> dict[int, float]:
        return {a.n: a.mean_err for a in self.aggregates}


def aggregate(rows: Sequence[RateRow]) -> list[Aggregate]:
    out = []
    for n in sorted({r.n for r in rows}):
        errs = np.array([r.l2_error for r in rows if r.n == n and r.error is None])
        if len(errs) == 0:
            out.append(Aggregate(n, math.nan, math.nan, 0))
            continue
        se = float(np.std(errs, ddof=1) / math.sqrt(len(errs))) if len(errs) > 1 else 0.0
        out.append(Aggregate(n, float(np.mean(errs)), se, len(errs)))
    return out


def _csv_text(columns, records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for rec in records:
        w.writerow([repr(v) if isinstance(v, float) else v for v in rec])
    return buf.getvalue()


def run_rate_experiment(cfg: ExperimentConfig, *, threads: int = 1, out: str | Path | None = None,
                        write: bool = True) -> RateReport:
    spec = cfg.spec()
    if not isinstance(cfg.hcm, dict):
        cfg.hcm = hcm_to_dict(spec)
    cfg_dict = cfg.to_dict()
    cells = [(n, k) for n in cfg.n_grid for k in range(cfg.replications)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(run_cell, [cfg_dict] * len(cells), *zip(*cells)))
    else:
        rows = [run_cell(cfg_dict, n, k) for n, k in cells]
    rows.sort(key=lambda r: (r.n, r.replicate))
    aggs = aggregate(rows)
    usable = [(a.n, a.mean_err) for a in aggs if a.count > 0]
    try:
        slope = fit_slope(usable)
    except ValueError:
        slope = None
    schedules = {n: schedule(n, spec, cfg.c3, cfg.c4, cfg.width_scale) for n in cfg.n_grid}
    predicted = schedules[cfg.n_grid[0]].exponent
    checks = {
        "all_replicates_succeeded": all(r.error is None for r in rows),
        "networks_in_class": all(r.in_class for r in rows if r.error is None),
        "slope_finite": slope is not None and math.isfinite(slope.slope),
        "exponent_stable_over_n": all(s.exponent == predicted for s in schedules.values()),
    }
    means = [a.mean_err for a in aggs]
    if cfg.expect.get("decreasing"):
        checks["means_decreasing"] = all(b < a for a, b in zip(means, means[1:]))
    if "slope_range" in cfg.expect:
        lo, hi = cfg.expect["slope_range"]
        checks["slope_in_range"] = slope is not None and lo <= slope.slope <= hi
    if "halving" in cfg.expect:
        checks["error_ratio"] = means[-1] <= means[0] / float(cfg.expect["halving"])
    report = RateReport(rows, aggs, slope, predicted,
                        {n: s.as_dict() for n, s in schedules.items()}, checks)
    if write:
        write_report(report, cfg, Path(out or cfg.out))
    return report


def write_report(report: RateReport, cfg: ExperimentConfig, out: Path) -> dict:
    """Write rate.csv, aggregate.csv, timings.csv and manifest.json; return their paths."""
    out.mkdir(parents=True, exist_ok=True)
    texts = {
        "rate.csv": _csv_text(RATE_COLUMNS, [(r.n, r.replicate, r.l2_error, r.train_risk, r.seed)
                                             for r in report.rows]),
        "aggregate.csv": _csv_text(AGGREGATE_COLUMNS, [(a.n, a.mean_err, a.stderr, a.count)
                                                       for a in report.aggregates]),
    }
    for name, text in texts.items():
        (out / name).write_text(text)
    (out / "timings.csv").write_text(_csv_text(TIMING_COLUMNS, [(r.n, r.replicate, r.seconds)
                                                                for r in report.rows]))
    manifest = {
        "package": {"name": "hcmnet", "version": __version__},
        "config": cfg.to_dict(),
        "seeds": {f"{r.n},{r.replicate}": list(cell_seeds(cfg.seed, r.n, r.replicate)) for r in report.rows},
        "schedules": {str(n): s for n, s in report.schedules.items()},
        "predicted_exponent": report.predicted_exponent,
        "slope": report.slope._asdict() if report.slope else None,
        "failures": {f"{r.n},{r.replicate}": r.error for r in report.rows if r.error},
        "checks": report.checks,
        "sha256": {name: hashlib.sha256(text.encode()).hexdigest() for name, text in texts.items()},
        "notes": "n grid, noise level and Monte-Carlo size are experimental choices of this run.",
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_jsonable) + "\n")
    report.files = {name: str(out / name) for name in (*texts, "timings.csv", "manifest.json")}
    return report.files


def _jsonable(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")
