"""Least-squares fitting over F(L, r, alpha) and the truncated estimate."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from .hcm import HCMSpec, evaluate_hcm
from .network import Network, NetworkClass, forward, in_class, sigmoid

log = logging.getLogger(__name__)


@dataclass
class Dataset:
    xs: np.ndarray
    ys: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.xs = np.atleast_2d(np.asarray(self.xs, dtype=float))
        self.ys = np.asarray(self.ys, dtype=float).reshape(-1)
        if len(self.xs) != len(self.ys) or len(self.ys) < 1:
            raise ValueError(f"got {len(self.xs)} inputs and {len(self.ys)} responses")
        a = self.meta.get("a")
        if a is not None and np.max(np.abs(self.xs)) > a:
            raise ValueError(f"covariates leave the support [-{a}, {a}]^d")

    @property
    def n(self) -> int:
        return len(self.ys)

    @property
    def d(self) -> int:
        return self.xs.shape[1]

    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([f"x{k + 1}" for k in range(self.d)] + ["y"])
            for x, y in zip(self.xs, self.ys):
                w.writerow([repr(float(v)) for v in x] + [repr(float(y))])
        path.with_suffix(".json").write_text(json.dumps(self.meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_csv(cls, path: str | Path) -> "Dataset":
        path = Path(path)
        rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        sidecar = path.with_suffix(".json")
        meta = json.loads(sidecar.read_text()) if sidecar.exists() else {}
        return cls(rows[:, :-1], rows[:, -1], meta)


@dataclass(frozen=True)
class TrainConfig:
    """Projected full-batch gradient descent with heavy-ball momentum.

    The step size at epoch ``t`` is ``lr / (1 + lr_decay * t)``.  ``alpha``
    optionally tightens the clamp below the class bound.  ``init`` is either
    ``"uniform"`` (every coefficient uniform in ``[-init_scale, init_scale]``,
    capped at alpha) or ``"identity_chain"``, which starts hidden-to-hidden
    layers at the chained identity block ``sigma(4h - 2)`` plus uniform noise
    of size ``chain_noise``.  The output layer is drawn from
    ``[-output_scale * init_scale, output_scale * init_scale]``; a small output
    layer keeps the first steps from saturating the hidden units.
    """

    epochs: int = 3000
    lr: float = 0.05
    lr_decay: float = 0.0
    momentum: float = 0.9
    restarts: int = 2
    init: str = "identity_chain"
    init_scale: float = 1.0
    chain_noise: float = 0.1
    output_scale: float = 0.1
    alpha: float | None = None
    seed: int = 0
    tol: float = 0.0
    max_retries: int = 3

    def __post_init__(self):
        if self.restarts < 1:
            raise ValueError("restarts must be >= 1")
        if not self.lr > 0 or self.lr_decay < 0:
            raise ValueError("step sizes must be positive")
        if self.init not in ("uniform", "identity_chain"):
            raise ValueError(f"unknown init {self.init!r}")

    def replace(self, **kw) -> "TrainConfig":
        return TrainConfig(**{**asdict(self), **kw})


@dataclass
class FitResult:
    network: Network | None
    risk: float
    restart_risks: list[float]
    success: bool
    flags: list[str] = field(default_factory=list)


def empirical_risk(net: Network, data: Dataset) -> float:
    res = forward(net, data.xs) - data.ys
    return float(np.mean(res * res))


def loss_and_grad(weights: list[np.ndarray], X: np.ndarray, y: np.ndarray):
    """Empirical risk and its gradient with respect to every coefficient matrix."""
    lin = [np.ascontiguousarray(W[:, 1:].T) for W in weights]
    acts = [X]
    h = X
    for Wt, W in zip(lin[:-1], weights[:-1]):
        z = h @ Wt
        z += W[:, 0]
        h = sigmoid(z)
        acts.append(h)
    res = (h @ lin[-1])[:, 0] + weights[-1][0, 0] - y
    delta = (2.0 / len(y)) * res[:, None]
    grads = [None] * len(weights)
    for s in range(len(weights) - 1, -1, -1):
        a = acts[s]
        G = np.empty_like(weights[s])
        G[:, 0] = delta.sum(axis=0)
        G[:, 1:] = delta.T @ a
        grads[s] = G
        if s:
            delta = delta @ lin[s].T
            delta *= a
            delta *= 1.0 - a
    return float(np.mean(res * res)), grads


def risk_gradient(net: Network, data: Dataset) -> list[np.ndarray]:
    return loss_and_grad(list(net.weights), data.xs, data.ys)[1]


def init_weights(d: int, cls: NetworkClass, cfg: TrainConfig, rng: np.random.Generator) -> list[np.ndarray]:
    alpha = cls.alpha if cfg.alpha is None else min(cls.alpha, cfg.alpha)
    scale = min(cfg.init_scale, alpha)
    dims = [d] + [cls.r] * cls.L
    ws = []
    for s in range(cls.L):
        shape = (cls.r, dims[s] + 1)
        if s > 0 and cfg.init == "identity_chain" and alpha >= 4:
            W = np.zeros(shape)
            W[:, 0] = -2.0
            W[:, 1:] = 4.0 * np.eye(cls.r)
            W += rng.uniform(-cfg.chain_noise, cfg.chain_noise, shape)
        else:
            W = rng.uniform(-scale, scale, shape)
        ws.append(np.clip(W, -alpha, alpha))
    ws.append(rng.uniform(-scale, scale, (1, cls.r + 1)) * cfg.output_scale)
    return ws


def _descend(data: Dataset, cls: NetworkClass, cfg: TrainConfig, rng, lr: float):
    # overflow is detected through the loss value, so numpy need not warn about it
    with np.errstate(over="ignore", invalid="ignore"):
        return _descend_loop(data, cls, cfg, rng, lr)


def _descend_loop(data: Dataset, cls: NetworkClass, cfg: TrainConfig, rng, lr: float):
    alpha = cls.alpha if cfg.alpha is None else min(cls.alpha, cfg.alpha)
    ws = init_weights(data.d, cls, cfg, rng)
    vel = [np.zeros_like(W) for W in ws]
    best_risk, best = math.inf, [W.copy() for W in ws]
    for t in range(cfg.epochs):
        risk, grads = loss_and_grad(ws, data.xs, data.ys)
        if not math.isfinite(risk):
            return None, best_risk, best
        if risk < best_risk:
            best_risk, best = risk, [W.copy() for W in ws]
        if risk <= cfg.tol:
            break
        step = lr / (1.0 + cfg.lr_decay * t)
        for W, V, G in zip(ws, vel, grads):
            V *= cfg.momentum
            V -= step * G
            W += V
            np.clip(W, -alpha, alpha, out=W)
    else:
        risk = loss_and_grad(ws, data.xs, data.ys)[0]
        if not math.isfinite(risk):
            return None, best_risk, best
        if risk < best_risk:
            best_risk, best = risk, [W.copy() for W in ws]
    return ws, best_risk, best


def fit(data: Dataset, cls: NetworkClass, cfg: TrainConfig = TrainConfig()) -> FitResult:
    """Best of ``cfg.restarts`` projected descents, ranked by empirical risk.

    Restart ``k`` draws its initialization from ``default_rng([seed, k, attempt])``,
    so the first ``k`` restarts are the same whatever the total count.  A
    non-finite loss retries the restart with half the step size.
    """
    flags: list[str] = []
    risks: list[float] = []
    best_net, best_risk = None, math.inf
    for k in range(cfg.restarts):
        lr = cfg.lr
        for attempt in range(cfg.max_retries + 1):
            rng = np.random.default_rng([cfg.seed, k, attempt])
            final, risk, best = _descend(data, cls, cfg, rng, lr)
            if final is not None:
                break
            flags.append(f"restart {k}: non-finite loss at lr={lr:g}, halving")
            lr /= 2
        if final is None:
            if math.isfinite(risk):
                flags.append(f"restart {k}: diverged, keeping best-seen weights")
            else:
                risks.append(math.inf)
                continue
        risks.append(risk)
        if risk < best_risk:
            best_risk, best_net = risk, Network(tuple(best))
    if best_net is None:
        return FitResult(None, math.inf, risks, False, flags + ["every restart was non-finite"])
    check = in_class(best_net, NetworkClass(cls.L, cls.r, cls.alpha))
    if not check:
        flags.append(f"projection failed: {check.violation}")
    return FitResult(best_net, best_risk, risks, bool(check), flags)


def truncate(u, beta: float):
    """``T_beta u``: clamp to ``[-beta, beta]``."""
    if not beta > 0:
        raise ValueError(f"truncation level must be positive, got {beta}")
    return np.clip(u, -beta, beta) if np.ndim(u) else float(min(max(u, -beta), beta))


@dataclass(frozen=True)
class Predictor:
    """A fitted network followed by truncation at ``beta`` (``None``: no truncation)."""

    network: Network
    beta: float | None = None

    def __call__(self, x):
        return predict(self.network, self.beta, x)


def predict(fitted: Network, beta: float | None, x):
    out = forward(fitted, x)
    if beta is None or math.isinf(beta):
        return out
    return truncate(out, beta)


class L2Estimate(NamedTuple):
    value: float
    stderr: float


def l2_error(predictor: Callable, spec, *, points: int, seed: int, a: float = 1.0,
             d: int | None = None) -> L2Estimate:
    """Monte-Carlo estimate of the L2 error for X uniform on ``[-a, a]^d``.

    ``spec`` is an :class:`HCMSpec` or any callable on ``(N, d)`` batches (then
    ``d`` is required).
    """
    if isinstance(spec, HCMSpec):
        d = spec.d
        target = lambda X: evaluate_hcm(spec, X)  # noqa: E731
    else:
        target = spec
    if d is None:
        raise ValueError("input dimension needed for a plain callable target")
    rng = np.random.default_rng(seed)
    X = rng.uniform(-a, a, (points, d))
    sq = (np.asarray(predictor(X)) - np.asarray(target(X))) ** 2
    stderr = float(np.std(sq, ddof=1) / math.sqrt(points)) if points > 1 else math.inf
    return L2Estimate(float(np.mean(sq)), stderr)
