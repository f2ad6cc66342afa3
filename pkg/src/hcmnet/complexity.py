"""Covers of F(L, r, alpha) by weight discretization, and the risk-bound arithmetic.

A member of the class is snapped coordinate-wise to a grid whose step in each
layer is small enough that the layerwise perturbation chain stays below
``epsilon``.  The grid networks form a sup-norm cover on ``[-a, a]^d``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterator, Sequence

import mpmath
import numpy as np

from .approx import base_depth, dominating_pair
from .network import SIGMA_D1_SUP, Network, NetworkClass, sigmoid


class CoverBudgetError(ValueError):
    def __init__(self, required: int, budget: int):
        super().__init__(f"cover needs {required} networks, budget is {budget}")
        self.required = required
        self.budget = budget


@dataclass(frozen=True)
class CoverSpec:
    epsilon: float
    cls: NetworkClass
    a: float = 1.0
    d: int = 1
    c_lip: float = SIGMA_D1_SUP

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.cls.L < 1 or self.d < 1 or not self.a > 0:
            raise ValueError("cover needs L >= 1, d >= 1 and a > 0")

    @property
    def growth(self) -> float:
        """Per-layer amplification ``alpha C (r + 1)``."""
        return self.cls.alpha * self.c_lip * (self.cls.r + 1)

    def tolerance(self, s: int) -> float:
        """Largest admissible coefficient perturbation in weight matrix ``s``.

        Matrix 0 reads the input, matrices ``1..L-1`` connect hidden layers and
        matrix ``L`` is the output layer.
        """
        L, r, alpha = self.cls.L, self.cls.r, self.cls.alpha
        eps, G = self.epsilon, self.growth
        if s == L:
            return eps / ((L + 1) * (r + 1))
        if 1 <= s < L:
            return eps / ((L + 1) * r * G ** (L - s))
        if s == 0:
            return eps / ((L + 1) * r * G ** (L - 1) * alpha * self.c_lip * (self.d + 1) * max(self.a, 1.0))
        raise IndexError(s)

    def step(self, s: int) -> float:
        """Grid step of matrix ``s``: nearest grid point within the tolerance."""
        return 2.0 * self.tolerance(s)

    def shapes(self) -> list[tuple[int, int]]:
        L, r = self.cls.L, self.cls.r
        return [(r, self.d + 1)] + [(r, r + 1)] * (L - 1) + [(1, r + 1)]


def covering_bound_log(spec: CoverSpec, c28: float = 1.0) -> float:
    """``ln(c28 ((L+1) (alpha C (r+1))^L (d+1) a / eps)^((L+1)(r+1)^2))``."""
    L, r, alpha = spec.cls.L, spec.cls.r, spec.cls.alpha
    inner = (math.log(L + 1) + L * (math.log(alpha) + math.log(spec.c_lip) + math.log(r + 1))
             + math.log(spec.d + 1) + math.log(spec.a) - math.log(spec.epsilon))
    return math.log(c28) + (L + 1) * (r + 1) ** 2 * inner


def layer_grid(step: float, alpha: float) -> np.ndarray:
    """Points ``k * step`` inside ``[-alpha, alpha]``, plus ``+-alpha`` when the lattice
    alone leaves the ends more than ``step / 2`` from a grid point."""
    k = int(math.floor(alpha / step + 1e-12))
    pts = step * np.arange(-k, k + 1)
    if alpha - k * step > step / 2:
        pts = np.concatenate([[-alpha], pts, [alpha]])
    return pts


def snap(values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Nearest grid point for every entry (grid sorted ascending)."""
    idx = np.clip(np.searchsorted(grid, values), 1, len(grid) - 1)
    lo, hi = grid[idx - 1], grid[idx]
    return np.where(np.abs(values - lo) <= np.abs(hi - values), lo, hi)


class Cover(Sequence):
    """All networks with coefficients on the layer grids, indexed in mixed radix."""

    def __init__(self, spec: CoverSpec):
        self.spec = spec
        self.shapes = spec.shapes()
        self.grids = [layer_grid(spec.step(s), spec.cls.alpha) for s in range(len(self.shapes))]
        self._slots = [g for shape, g in zip(self.shapes, self.grids) for _ in range(shape[0] * shape[1])]

    def __len__(self) -> int:
        return math.prod(len(g) for g in self._slots)

    def _params(self, index: int) -> np.ndarray:
        vals = np.empty(len(self._slots))
        for pos in range(len(self._slots) - 1, -1, -1):
            g = self._slots[pos]
            index, k = divmod(index, len(g))
            vals[pos] = g[k]
        return vals

    def _network(self, vals: np.ndarray) -> Network:
        mats, off = [], 0
        for rows, cols in self.shapes:
            mats.append(vals[off:off + rows * cols].reshape(rows, cols))
            off += rows * cols
        return Network(tuple(mats))

    def __getitem__(self, index):
        if isinstance(index, slice):
            return [self[i] for i in range(*index.indices(len(self)))]
        if index < 0:
            index += len(self)
        if not 0 <= index < len(self):
            raise IndexError(index)
        return self._network(self._params(index))

    def __iter__(self) -> Iterator[Network]:
        for vals in itertools.product(*self._slots):
            yield self._network(np.array(vals))

    def snap(self, net: Network) -> Network:
        return Network(tuple(snap(W, g) for W, g in zip(net.weights, self.grids)))

    def parameter_table(self) -> np.ndarray:
        """Every element's flattened coefficients, one row per element."""
        mesh = np.meshgrid(*self._slots, indexing="ij")
        return np.stack([m.reshape(-1) for m in mesh], axis=1)


def build_cover(spec: CoverSpec, budget: int = 10 ** 6) -> Cover:
    cover = Cover(spec)
    if len(cover) > budget:
        raise CoverBudgetError(len(cover), budget)
    return cover


def batch_forward(params: np.ndarray, shapes: Sequence[tuple[int, int]], X: np.ndarray) -> np.ndarray:
    """Outputs ``(B, N)`` of ``B`` networks given as flattened coefficient rows."""
    B = len(params)
    h = np.broadcast_to(X, (B,) + X.shape)
    off = 0
    for s, (rows, cols) in enumerate(shapes):
        W = params[:, off:off + rows * cols].reshape(B, rows, cols)
        off += rows * cols
        z = np.einsum("bnk,bjk->bnj", h, W[:, :, 1:]) + W[:, None, :, 0]
        h = z if s == len(shapes) - 1 else sigmoid(z)
    return h[:, :, 0]


def random_member(spec: CoverSpec, rng: np.random.Generator) -> Network:
    alpha = spec.cls.alpha
    return Network(tuple(rng.uniform(-alpha, alpha, shape) for shape in spec.shapes()))


def perturbation_chain_bound(net: Network, other: Network, spec: CoverSpec) -> tuple[list[float], float]:
    """Per-layer terms of the perturbation chain between two class members and their sum.

    Matrix ``s < L`` contributes ``(r alpha C)^(L-s) w_s delta_s`` with
    ``w_0 = (d+1) max(a, 1)`` and ``w_s = r + 1``; the output layer contributes
    ``(r + 1) delta_L``.  The sum bounds ``|net(x) - other(x)|`` on ``[-a, a]^d``.
    """
    L, r, alpha, C = spec.cls.L, spec.cls.r, spec.cls.alpha, spec.c_lip
    deltas = [float(np.max(np.abs(W - V))) for W, V in zip(net.weights, other.weights)]
    terms = []
    for s, delta in enumerate(deltas):
        if s == L:
            terms.append((r + 1) * delta)
        else:
            w = (spec.d + 1) * max(spec.a, 1.0) if s == 0 else r + 1
            terms.append((r * alpha * C) ** (L - s) * w * delta)
    return terms, sum(terms)


@dataclass
class CoverCheck:
    members: int
    within: int
    worst: float
    count: int
    log_bound: float

    @property
    def pass_rate(self) -> float:
        return self.within / self.members

    def as_dict(self) -> dict:
        return {"log_bound": self.log_bound, "enumerated_count": self.count,
                "verify_pass_rate": self.pass_rate, "worst_distance": self.worst,
                "members": self.members}


def verify_cover(cover: Cover, members: int = 10_000, grid_points: int = 200, seed: int = 0,
                 nearest: bool = False, c28: float = 1.0) -> CoverCheck:
    """Sample class members and measure their sup distance to the cover on a grid.

    With ``nearest=False`` the distance is to the snapped element (an upper
    bound on the nearest one); ``nearest=True`` searches every element.
    Multivariate inputs use uniform random grid points instead of a lattice.
    """
    spec = cover.spec
    rng = np.random.default_rng(seed)
    if spec.d == 1:
        X = np.linspace(-spec.a, spec.a, grid_points)[:, None]
    else:
        X = rng.uniform(-spec.a, spec.a, (grid_points, spec.d))
    shapes = cover.shapes
    sample = np.stack([np.concatenate([W.reshape(-1) for W in random_member(spec, rng).weights])
                       for _ in range(members)])
    f = batch_forward(sample, shapes, X)
    off, snapped = 0, np.empty_like(sample)
    for (rows, cols), g in zip(shapes, cover.grids):
        snapped[:, off:off + rows * cols] = snap(sample[:, off:off + rows * cols], g)
        off += rows * cols
    dist = np.max(np.abs(f - batch_forward(snapped, shapes, X)), axis=1)
    if nearest:
        # exact search, pruned: an element can only beat the snapped one if it
        # is already closer on a handful of probe points
        table = batch_forward(cover.parameter_table(), shapes, X)
        probes = np.linspace(0, len(X) - 1, min(8, len(X))).astype(int)
        for m in range(members):
            lower = np.max(np.abs(table[:, probes] - f[m, probes]), axis=1)
            cand = table[lower < dist[m]]
            if len(cand):
                dist[m] = min(dist[m], float(np.min(np.max(np.abs(cand - f[m]), axis=1))))
    return CoverCheck(members, int(np.sum(dist < spec.epsilon)), float(dist.max()), len(cover),
                      covering_bound_log(spec, c28))


def generalization_bound(n: int, log_cover: float, approx_err_sq: float, c18: float = 1.0) -> float:
    """``c18 (ln n)^2 (log_cover + 1) / n + 2 approx_err_sq``."""
    if n < 2:
        raise ValueError("n must be at least 2")
    if log_cover < 0 or approx_err_sq < 0 or c18 < 0:
        raise ValueError("inputs must be nonnegative")
    return c18 * math.log(n) ** 2 * (log_cover + 1) / n + 2 * approx_err_sq


# ---------------------------------------------------------------------------
# exponent assembly

@dataclass(frozen=True)
class Term:
    """``coef * n^power * (ln n)^logs`` with exact rational exponents."""

    coef: float
    power: Fraction
    logs: Fraction

    def __mul__(self, other: "Term") -> "Term":
        return Term(self.coef * other.coef, self.power + other.power, self.logs + other.logs)

    def __pow__(self, k) -> "Term":
        k = Fraction(k)
        return Term(self.coef ** float(k), self.power * k, self.logs * k)

    def order(self) -> tuple[Fraction, Fraction]:
        return self.power, self.logs


def const(c: float) -> Term:
    return Term(c, Fraction(0), Fraction(0))


def leading(terms: Sequence[Term]) -> Term:
    """Dominant term of a sum as n grows."""
    return max(terms, key=Term.order)


def _frac(x: float) -> Fraction:
    return Fraction(x).limit_denominator(10 ** 6)


@dataclass(frozen=True)
class Assembly:
    estimation: Term
    approximation: Term
    total: Term

    @property
    def exponent(self) -> Fraction:
        return self.total.power


def assemble_exponent(pset, c3: float = 2.0, level: int = 1) -> Assembly:
    """Leading order of the risk bound along the estimator's schedule.

    The entropy term is ``(ln n)^2 log N / n`` with the cover at
    ``eps = 1/(n c4 ln n)`` for the class ``(L_n, r_n, n^c3)``; the
    approximation term is the squared plan error ``a_n^(5 p_max + 3) M^(-2p)``
    at ``M ~ n^(1/(2(2p+K)))``.  Returns exact exponents.
    """
    pairs = [(_frac(p), int(K)) for p, K in pset]
    p_max = max(p for p, _ in pairs)
    # width and its square: (r+1)^2 ~ n^(2 max K / (2 (2p + K)))
    r = leading([Term(1.0, Fraction(K, 1) / (2 * (2 * p + K)), Fraction(0)) for p, K in pairs])
    # ln((L+1) (alpha C (r+1))^L (d+1) a / eps) ~ (L (c3 + power of r) + 1) ln n
    L = level * base_depth(max(K for _, K in pairs), float(p_max))
    log_arg = Term(float(L * (_frac(c3) + r.power) + 1), Fraction(0), Fraction(1))
    log_cover = const(L + 1) * (r ** 2) * log_arg
    estimation = Term(1.0, Fraction(-1), Fraction(2)) * log_cover
    # a_n^(2 (5 p_max + 3)) = (ln n)^3 ; M^(-4p) ~ n^(-2p / (2p + K))
    a_pow = Term(1.0, Fraction(0), Fraction(3, 2) / (5 * p_max + 3) * 2 * (5 * p_max + 3))
    approx = leading([a_pow * Term(1.0, -Fraction(4) * p / (2 * (2 * p + K)), Fraction(0)) for p, K in pairs])
    return Assembly(estimation, approx, leading([estimation, approx]))


def stripped_exponent(pset, c3: float = 2.0, level: int = 1) -> float:
    return float(assemble_exponent(pset, c3, level).exponent)


def numeric_log_total(lam, pset, *, level: int = 1, N1: int = 1, K_lip: float = 1.0, d: int = 1,
                      c3: float = 2.0, c4: float = 1.0, c18: float = 1.0, c13: float = 1.0,
                      width_scale: float = 1.0):
    """``ln`` of the full risk bound at ``ln n = lam``, evaluated with mpmath.

    Nothing is simplified: the class comes from the schedule formulas, the
    cover bound is the closed form, and the approximation term is the squared
    propagated plan error with ``K_lip = K_max C_Lip``.
    """
    lam = mpmath.mpf(lam)
    pairs = [(mpmath.mpf(p), int(K)) for p, K in pset]
    K_max = max(K for _, K in pairs)
    p_max = max(p for p, _ in pairs)
    L = level * base_depth(K_max, float(p_max))
    pref = width_scale * 2 ** K_max * N1 * 29 * mpmath.binomial(K_max + p_max, p_max) * K_max ** 2 * p_max
    r = pref * max(mpmath.exp(lam * K / (2 * (2 * p + K))) for p, K in pairs)
    log_alpha = c3 * lam
    a_n = lam ** (mpmath.mpf(3) / (2 * (5 * p_max + 3)))
    log_inv_eps = lam + mpmath.log(c4 * lam)
    inner = (mpmath.log(L + 1) + L * (log_alpha + mpmath.log(SIGMA_D1_SUP) + mpmath.log(r + 1))
             + mpmath.log(d + 1) + mpmath.log(a_n) + log_inv_eps)
    log_cover = (L + 1) * (r + 1) ** 2 * inner
    estimation = c18 * lam ** 2 * (log_cover + 1) * mpmath.exp(-lam)
    node_err = max(c13 * a_n ** (5 * p_max + 3) * mpmath.exp(lam / (2 * (2 * p + K))) ** (-2 * p)
                   for p, K in pairs)
    approx = level * K_lip ** (level - 1) * node_err
    return mpmath.log(estimation + 2 * approx ** 2)


def numeric_exponent(pset, lam1: float = 1e14, lam2: float = 1e15, **kw) -> float:
    """Slope of ``ln(total) - 3 ln ln n`` against ``ln n`` far out."""
    with mpmath.workdps(60):
        f1 = numeric_log_total(lam1, pset, **kw) - 3 * mpmath.log(lam1)
        f2 = numeric_log_total(lam2, pset, **kw) - 3 * mpmath.log(lam2)
        return float((f2 - f1) / (mpmath.mpf(lam2) - lam1))


def predicted_exponent(pset) -> float:
    p, K = dominating_pair(pset)
    return -2.0 * p / (2.0 * p + K)
