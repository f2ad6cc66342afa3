"""Architecture sizing and the composed approximant of a hierarchical model.

Every node ``g_j^(i)`` gets its own subnetwork of a prescribed shape; the
subnetworks of one level run in parallel and the levels are stacked.  The
subnetworks are trained, so their sup-norm errors are measured quantities,
and :func:`error_propagation_bound` turns the measured node errors into a
bound for the composed network.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Mapping, NamedTuple

import numpy as np
from scipy.special import binom

from .estimator import Dataset, TrainConfig, fit
from .hcm import HCMSpec, NodeFunction, NodeKey, evaluate_hcm
from .network import (SIGMA_D2_SUP, Network, NetworkClass, NetworkError, forward, in_class,
                      pad_depth, pad_width, parallel_compose, stack_levels)


def ceil_int(v: float) -> int:
    """Ceiling that forgives float noise, e.g. ``4096 ** (1/12)`` -> 2."""
    return int(math.ceil(v - 1e-9 * max(1.0, abs(v))))


def base_depth(K_max: int, p_max: float) -> int:
    """``8 + ceil(log2(max(K_max, p_max + 1)))`` hidden layers per level."""
    return 8 + ceil_int(math.log2(max(K_max, p_max + 1)))


def resolution(n: int, p: float, K: int) -> int:
    """``M = ceil(n^(1 / (2 (2p + K))))``."""
    return max(1, ceil_int(n ** (1.0 / (2.0 * (2.0 * p + K)))))


def rate_exponent(p: float, K: int) -> float:
    return -2.0 * p / (2.0 * p + K)


def dominating_pair(pset) -> tuple[float, int]:
    """The pair with the slowest rate; ties go to the lexicographically smallest."""
    pairs = sorted(pset)
    worst = max(rate_exponent(p, K) for p, K in pairs)
    return next(pk for pk in pairs if rate_exponent(*pk) == worst)


@dataclass(frozen=True)
class ArchitectureSchedule:
    n: int
    L_n: int
    r_n_raw: float
    r_n: int
    alpha_n: float
    beta_n: float
    a_n: float
    M: dict
    width_scale: float
    dominating: tuple[float, int]
    exponent: float
    c3: float
    c4: float

    def as_dict(self) -> dict:
        out = asdict(self)
        out["M"] = {f"{i},{j}": m for (i, j), m in self.M.items()}
        out["dominating"] = list(self.dominating)
        return out


def width_prefactor(spec: HCMSpec) -> float:
    """``2^K_max N_1 29 binom(K_max + p_max, p_max) K_max^2 p_max``."""
    K, p = spec.K_max, spec.p_max
    return 2.0 ** K * spec.N_tilde[0] * 29.0 * float(binom(K + p, p)) * K * K * p


def schedule(n: int, spec: HCMSpec, c3: float = 2.0, c4: float = 1.0,
             width_scale: float = 1.0) -> ArchitectureSchedule:
    if n < 2:
        raise ValueError("schedule needs n >= 2")
    if spec.level < 1:
        raise ValueError("schedule needs a model of level >= 1")
    pset = spec.pset
    growth = max(n ** (K / (2.0 * (2.0 * p + K))) for p, K in pset)
    raw = width_prefactor(spec) * growth
    p_bar, K_bar = dominating_pair(pset)
    M = {key: resolution(n, node.g.smoothness.p, node.g.arity) for key, node in spec.nodes().items()}
    return ArchitectureSchedule(
        n=n,
        L_n=spec.level * base_depth(spec.K_max, spec.p_max),
        r_n_raw=raw,
        r_n=max(1, ceil_int(width_scale * raw)),
        alpha_n=float(n) ** c3,
        beta_n=c4 * math.log(n),
        a_n=math.log(n) ** (3.0 / (2.0 * (5.0 * spec.p_max + 3.0))),
        M=M,
        width_scale=width_scale,
        dominating=(p_bar, K_bar),
        exponent=rate_exponent(p_bar, K_bar),
        c3=c3,
        c4=c4,
    )


# ---------------------------------------------------------------------------
# plans

def node_width(K: int, q: int, M: int) -> int:
    """``29 binom(K + q, q) K^2 (q + 1) M^K``."""
    return 29 * math.comb(K + q, q) * K * K * (q + 1) * M ** K


@dataclass(frozen=True)
class NodePlan:
    key: NodeKey
    K: int
    p: float
    q: int
    M: int
    L0: int
    r_full: int
    r: int
    target_error: float


@dataclass(frozen=True)
class ApproxPlan:
    nodes: dict
    L0: int
    L: int
    r: int
    level_widths: dict
    log_alpha0: float
    width_scale: float
    a: float

    @property
    def alpha0(self) -> float:
        return math.exp(self.log_alpha0) if self.log_alpha0 < 700 else math.inf

    @property
    def alpha(self) -> float:
        """Coefficient bound of the composed network, ``alpha0^2``."""
        return math.exp(2 * self.log_alpha0) if 2 * self.log_alpha0 < 700 else math.inf

    def network_class(self) -> NetworkClass:
        return NetworkClass(self.L, self.r, self.alpha)

    def node_shape(self, key: NodeKey) -> tuple[int, int, float]:
        return self.L0, self.nodes[key].r, self.alpha0

    def as_dict(self) -> dict:
        return {
            "L0": self.L0, "L": self.L, "r": self.r, "log_alpha0": self.log_alpha0,
            "width_scale": self.width_scale, "a": self.a,
            "level_widths": {str(i): w for i, w in self.level_widths.items()},
            "nodes": {f"{k[0]},{k[1]}": asdict(v) for k, v in self.nodes.items()},
        }


def plan(spec: HCMSpec, M, *, width_scale: float = 1.0, a: float = 1.0, c8: float = 1.0,
         c13: float = 1.0) -> ApproxPlan:
    """Subnetwork shapes for every node and the class of the composed network.

    ``M`` is a map node -> resolution, a single integer for all nodes, or an
    :class:`ArchitectureSchedule`.  ``width_scale`` shrinks every node width
    (rounded up, at least 1); ``r_full`` keeps the unscaled value.
    """
    if isinstance(M, ArchitectureSchedule):
        M = M.M
    nodes = spec.nodes()
    if isinstance(M, int):
        M = {key: M for key in nodes}
    if any(M[key] < 1 for key in nodes):
        raise ValueError("resolutions must be >= 1")
    K_max, p_max = spec.K_max, spec.p_max
    L0 = base_depth(K_max, p_max)
    plans = {}
    for key, node in nodes.items():
        K, sm = node.g.arity, node.g.smoothness
        full = node_width(K, sm.q, M[key])
        plans[key] = NodePlan(key=key, K=K, p=sm.p, q=sm.q, M=M[key], L0=L0, r_full=full,
                              r=max(1, ceil_int(width_scale * full)),
                              target_error=c13 * a ** (5 * p_max + 3) * M[key] ** (-2 * sm.p))
    level_widths = {}
    for (i, _), np_ in plans.items():
        level_widths[i] = level_widths.get(i, 0) + np_.r
    log_alpha0 = (math.log(c8) + 12 * math.log(a) + 6 * 2 ** (2 * (K_max + 1) + 1) * a * K_max
                  + (10 * p_max + 2 * K_max + 10) * math.log(max(M[k] for k in nodes)))
    return ApproxPlan(nodes=plans, L0=L0, L=spec.level * L0, r=max(level_widths.values()),
                      level_widths=level_widths, log_alpha0=log_alpha0, width_scale=width_scale, a=a)


# ---------------------------------------------------------------------------
# fitting one node

class SubnetFit(NamedTuple):
    network: Network
    sup_error: float
    flags: list


def cube_grid(K: int, radius: float, max_points: int = 60_000) -> np.ndarray:
    """Tensor grid of ``[-radius, radius]^K`` with at most ``max_points`` points."""
    per_axis = max(2, min(2001, int(math.floor(max_points ** (1.0 / K)))))
    axis = np.linspace(-radius, radius, per_axis)
    mesh = np.meshgrid(*([axis] * K), indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


def sup_error(net: Network, g, grid: np.ndarray) -> float:
    return float(np.max(np.abs(forward(net, grid) - g(grid))))


def _zero_network(K: int, depth: int, width: int) -> Network:
    dims = [K] + [width] * depth
    return Network(tuple(np.zeros((width if s < depth else 1, dims[s] + 1)) for s in range(depth + 1)))


def fit_subnetwork(g: NodeFunction, shape: tuple[int, int, float], cube_radius: float,
                   budget: TrainConfig = TrainConfig(), *, trained_depth: int = 1,
                   train_points: int = 4000, grid_points: int = 60_000, drift_tol: float = 1e-6,
                   warm_start: Network | None = None) -> SubnetFit:
    """Fit a network of exactly ``shape = (L0, r, alpha)`` to ``g`` on a cube.

    ``trained_depth`` hidden layers are trained; the remaining depth is added
    with identity blocks whose radius keeps the total padding drift near
    ``drift_tol``.  Candidates are the trained network, the zero network and
    ``warm_start``; the one with the smallest grid sup error is returned
    together with that error.
    """
    L0, r, alpha = shape
    K = g.arity
    flags: list[str] = []
    grid = cube_grid(K, cube_radius, grid_points)
    rng = np.random.default_rng([budget.seed, 7919])
    U = np.concatenate([cube_grid(K, cube_radius, train_points // 2),
                        rng.uniform(-cube_radius, cube_radius, (train_points // 2, K))])
    depth = min(trained_depth, L0)
    clamp = alpha if budget.alpha is None else min(alpha, budget.alpha)
    res = fit(Dataset(U, g(U)), NetworkClass(depth, r, clamp), budget)
    flags.extend(res.flags)
    candidates = [_zero_network(K, depth, r)]
    if res.network is not None:
        candidates.append(res.network)
    if warm_start is not None:
        candidates.append(warm_start)

    B = max(1.0, float(np.max(np.abs(g(grid)))))
    s = L0 - depth
    R = max(1.0, max(s - 1, 1) * 8.0 * SIGMA_D2_SUP * B * B / drift_tol)
    if s > 0 and 4 * R > alpha:
        R = max(1.0, alpha / 4)
        flags.append(f"identity radius capped at {R:g} by alpha")
    best, best_err = None, math.inf
    for cand in candidates:
        if cand.L > L0 or any(k > r for k in cand.widths):
            flags.append(f"candidate of shape {cand.widths} does not fit {shape}")
            continue
        padded = pad_width(pad_depth(cand, L0 - cand.L, R), r)
        err = sup_error(padded, g, grid)
        if err < best_err:
            best, best_err = padded, err
    check = in_class(best, NetworkClass(L0, r, alpha))
    if not check:
        flags.append(f"subnetwork outside its class: {check.violation}")
    return SubnetFit(best, best_err, flags)


# ---------------------------------------------------------------------------
# composition

def _level_inputs(spec: HCMSpec, i: int) -> list[list[int]]:
    rows = spec.levels()
    if i == 1:
        return [[int(c) - 1 for c in node.children] for node in rows[1]]
    maps, offset = [], 0
    for node in rows[i]:
        maps.append(list(range(offset, offset + node.g.arity)))
        offset += node.g.arity
    return maps


def assemble(spec: HCMSpec, plan_: ApproxPlan, subnets: Mapping[NodeKey, Network]) -> Network:
    """One network computing the nested subnetworks, in class (l L0, r, alpha0^2)."""
    rows = spec.levels()
    groups = []
    for i in range(1, spec.level + 1):
        nets = []
        for j, node in enumerate(rows[i], start=1):
            key = (i, j)
            net = subnets[key]
            want = (plan_.L0, plan_.nodes[key].r)
            if net.L != want[0] or set(net.widths) != {want[1]} or net.d != node.g.arity:
                raise NetworkError(f"subnetwork {key} has depth {net.L}, widths {net.widths}, "
                                   f"{net.d} inputs; plan wants depth {want[0]}, width {want[1]}, "
                                   f"{node.g.arity} inputs")
            nets.append(net)
        d_in = spec.d if i == 1 else spec.N_tilde[i - 2]
        groups.append(parallel_compose(nets, _level_inputs(spec, i), d=d_in))
    return stack_levels(groups, width=plan_.r)


def nested_forward(spec: HCMSpec, subnets: Mapping[NodeKey, Network], X: np.ndarray) -> dict[int, np.ndarray]:
    """Per-level outputs of the subnetworks evaluated one inside the other."""
    rows = spec.levels()
    outs: dict[int, np.ndarray] = {}
    for i in range(1, spec.level + 1):
        maps = _level_inputs(spec, i)
        src = X if i == 1 else outs[i - 1]
        outs[i] = np.stack([forward(subnets[(i, j + 1)], src[:, idx]) for j, idx in enumerate(maps)],
                           axis=1)
    return outs


@dataclass
class PropagationBound:
    node_bounds: dict
    level_bounds: dict
    root: float
    closed_form: float
    range_violations: list = field(default_factory=list)


def error_propagation_bound(spec: HCMSpec, node_errors: Mapping[NodeKey, float], a: float = 1.0) -> PropagationBound:
    """``E_j^(i) = eps_j^(i) + K_j^(i) C_Lip max(child E)``, bottom-up.

    ``closed_form`` is ``l (K_max C_Lip)^(l-1) max eps``; the recurrence never
    exceeds it.  A child violates the range condition when its output could
    leave ``[-2 g_max, 2 g_max]``, i.e. when ``sup|g_child| + E_child > 2 g_max``.
    """
    if any(e < 0 for e in node_errors.values()):
        raise ValueError("node errors must be nonnegative")
    rows = spec.levels()
    C, g_max = spec.C_lip, spec.g_max
    bounds: dict[NodeKey, float] = {}
    violations = []
    for i in range(1, spec.level + 1):
        offset = 0
        for j, node in enumerate(rows[i], start=1):
            eps = float(node_errors[(i, j)])
            if i == 1:
                bounds[(i, j)] = eps
                continue
            kids = [(i - 1, offset + t + 1) for t in range(node.g.arity)]
            offset += node.g.arity
            for kid, child in zip(kids, node.children):
                if child.g.smoothness.sup_bound + bounds[kid] > 2 * g_max:
                    violations.append(kid)
            bounds[(i, j)] = eps + node.g.arity * C * max(bounds[k] for k in kids)
    levels = {i: max(bounds[(i, j)] for j in range(1, len(rows[i]) + 1)) for i in rows}
    l = spec.level
    closed = l * (spec.K_max * C) ** (l - 1) * max(node_errors.values())
    return PropagationBound(bounds, levels, bounds[(l, 1)], closed, violations)


def input_radii(spec: HCMSpec, a: float = 1.0, margin: float = 0.1) -> dict[NodeKey, float]:
    """Half-width of the cube each node's subnetwork must cover.

    Level-1 nodes see ``[-a, a]``; a parent sees its children's output bounds
    enlarged by ``margin`` to absorb the children's approximation error.
    """
    rows = spec.levels()
    radius: dict[NodeKey, float] = {}
    out_bound: dict[NodeKey, float] = {}
    for i in range(1, spec.level + 1):
        offset = 0
        for j, node in enumerate(rows[i], start=1):
            if i == 1:
                rad = a
            else:
                kids = [(i - 1, offset + t + 1) for t in range(node.g.arity)]
                offset += node.g.arity
                rad = (1 + margin) * max(out_bound[k] for k in kids)
            radius[(i, j)] = max(rad, 1e-3)
            out_bound[(i, j)] = node.g.sup_on(radius[(i, j)])
    return radius


@dataclass
class Approximant:
    network: Network
    plan: ApproxPlan
    subnets: dict
    node_errors: dict
    radii: dict
    flags: list = field(default_factory=list)


def build_approximant(spec: HCMSpec, plan_: ApproxPlan, budget: TrainConfig = TrainConfig(), *,
                      a: float = 1.0, margin: float = 0.1, **fit_kw) -> Approximant:
    """Train every node's subnetwork on its input cube and assemble them."""
    radii = input_radii(spec, a, margin)
    subnets, errors, flags = {}, {}, []
    for key, node in spec.nodes().items():
        seed = budget.seed * 1000 + key[0] * 100 + key[1]
        res = fit_subnetwork(node.g, plan_.node_shape(key), radii[key], budget.replace(seed=seed), **fit_kw)
        subnets[key], errors[key] = res.network, res.sup_error
        flags.extend(f"{key}: {f}" for f in res.flags)
    return Approximant(assemble(spec, plan_, subnets), plan_, subnets, errors, radii, flags)


@dataclass
class ApproxCheck:
    measured: float
    bound: float
    passed: bool
    class_ok: bool
    class_violation: str | None
    root_range_ok: bool
    propagation: PropagationBound

    def as_dict(self) -> dict:
        return {"measured_sup_error": self.measured, "propagation_bound": self.bound,
                "passed": self.passed, "class_ok": self.class_ok,
                "class_violation": self.class_violation, "range_violations":
                [list(k) for k in self.propagation.range_violations],
                "node_bounds": {f"{k[0]},{k[1]}": v for k, v in self.propagation.node_bounds.items()}}


def evaluation_grid(d: int, a: float = 1.0, points: int = 10_000) -> np.ndarray:
    """Tensor grid of ``[-a, a]^d`` with at least ``points`` points."""
    per_axis = max(2, ceil_int(points ** (1.0 / d)))
    while per_axis ** d < points:
        per_axis += 1
    axis = np.linspace(-a, a, per_axis)
    mesh = np.meshgrid(*([axis] * d), indexing="ij")
    return np.stack([m.reshape(-1) for m in mesh], axis=1)


def check_approximant(spec: HCMSpec, approx: Approximant, *, a: float = 1.0, points: int = 10_000) -> ApproxCheck:
    """Measured sup error of the composed network against the propagated bound."""
    X = evaluation_grid(spec.d, a, points)
    measured = float(np.max(np.abs(forward(approx.network, X) - evaluate_hcm(spec, X))))
    prop = error_propagation_bound(spec, approx.node_errors, a)
    check = in_class(approx.network, approx.plan.network_class())
    # children must stay inside the cubes their parents were trained on
    inside = True
    outs = nested_forward(spec, approx.subnets, X)
    for i in range(2, spec.level + 1):
        for j, idx in enumerate(_level_inputs(spec, i), start=1):
            if np.max(np.abs(outs[i - 1][:, idx])) > approx.radii[(i, j)]:
                inside = False
    return ApproxCheck(measured, prop.root, measured <= prop.root, bool(check), check.violation,
                       inside and not prop.range_violations, prop)
