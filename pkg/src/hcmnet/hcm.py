"""Hierarchical composition models.

A model of level ``l`` is a tree whose root applies a smooth function to the
outputs of level ``l - 1`` models; level-1 nodes read input coordinates
directly.  Coordinates are 1-based throughout the public API, matching the
usual ``x^(1), ..., x^(d)`` notation; they are converted at evaluation time.

Node keys are ``(level, index)`` pairs, both 1-based, where ``index`` counts
nodes of one level from left to right.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from itertools import product as iproduct
from pathlib import Path
from typing import Iterator, Sequence, Union

import numpy as np
from scipy.optimize import minimize_scalar

NodeKey = tuple[int, int]

KINDS = ("affine", "product", "polynomial", "bump")
DEFAULT_P = {"affine": 1.0, "product": 2.0, "polynomial": 2.0, "bump": 2.0}


class HCMError(ValueError):
    pass


@dataclass(frozen=True)
class SmoothnessSpec:
    p: float
    q: int
    s: float
    C: float
    lipschitz: float
    sup_bound: float

    @classmethod
    def from_p(cls, p: float, C: float, lipschitz: float, sup_bound: float):
        q = max(math.ceil(p) - 1, 0)
        return cls(p=float(p), q=q, s=float(p) - q, C=float(C),
                   lipschitz=float(lipschitz), sup_bound=float(sup_bound))

    def problems(self) -> list[str]:
        out = []
        if abs(self.p - (self.q + self.s)) > 1e-12:
            out.append(f"p={self.p} != q+s={self.q + self.s}")
        if not 0 < self.s <= 1:
            out.append(f"s={self.s} outside (0, 1]")
        if self.p < 1:
            out.append(f"p={self.p} < 1")
        if not self.C > 0:
            out.append(f"C={self.C} must be positive")
        if self.lipschitz < 1:
            out.append(f"lipschitz={self.lipschitz} < 1")
        if self.sup_bound < 0:
            out.append(f"sup_bound={self.sup_bound} negative")
        return out


# ---------------------------------------------------------------------------
# polynomial engine (affine and product nodes are polynomials too)

def _monomials(kind: str, params: Sequence[float], arity: int) -> list[tuple[float, tuple[int, ...]]]:
    if kind == "affine":
        if len(params) != arity + 1:
            raise HCMError(f"affine node needs {arity + 1} params (bias, weights), got {len(params)}")
        mons = [(float(params[0]), (0,) * arity)]
        for k in range(arity):
            e = [0] * arity
            e[k] = 1
            mons.append((float(params[k + 1]), tuple(e)))
        return mons
    if kind == "product":
        scale = float(params[0]) if params else 1.0
        return [(scale, (1,) * arity)]
    if kind == "polynomial":
        if len(params) % (arity + 1):
            raise HCMError(f"polynomial params must come in groups of {arity + 1} (coef, exponents)")
        mons = []
        for g in range(0, len(params), arity + 1):
            exps = params[g + 1:g + 1 + arity]
            if any(e < 0 or e != int(e) for e in exps):
                raise HCMError(f"polynomial exponents must be nonnegative integers, got {list(exps)}")
            mons.append((float(params[g]), tuple(int(e) for e in exps)))
        return mons
    raise HCMError(f"not a polynomial kind: {kind}")


def _falling(e: int, k: int) -> int:
    out = 1
    for t in range(k):
        out *= e - t
    return out


def _poly_deriv_sup(mons, beta: tuple[int, ...], radius: float) -> float:
    """Upper bound of sup |d^beta f| over the cube of the given radius."""
    total = 0.0
    for c, e in mons:
        if any(b > ek for b, ek in zip(beta, e)):
            continue
        coeff = abs(c)
        for b, ek in zip(beta, e):
            coeff *= _falling(ek, b)
        total += coeff * radius ** (sum(e) - sum(beta))
    return total


def _multi_indices(arity: int, order: int) -> Iterator[tuple[int, ...]]:
    for idx in iproduct(range(order + 1), repeat=arity):
        if sum(idx) == order:
            yield idx


def _poly_gradient_lipschitz(mons, arity: int, order: int, radius: float) -> float:
    # Lipschitz bound of every order-`order` partial: sup of the Euclidean norm
    # of its gradient, bounded componentwise.
    worst = 0.0
    for alpha in _multi_indices(arity, order):
        comps = []
        for k in range(arity):
            beta = list(alpha)
            beta[k] += 1
            comps.append(_poly_deriv_sup(mons, tuple(beta), radius))
        worst = max(worst, math.sqrt(sum(v * v for v in comps)))
    return worst


# ---------------------------------------------------------------------------
# compactly supported radial bump  psi(s) = exp(1 - 1/(1 - s^2)), s < 1

def _psi(s):
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    inside = np.abs(s) < 1
    out[inside] = np.exp(1.0 - 1.0 / (1.0 - s[inside] ** 2))
    return out


@lru_cache(maxsize=None)
def _bump_constants() -> tuple[float, float]:
    """(sup |psi'|, sup of the Hessian norm of u -> psi(|u|)) on the unit ball."""
    def dpsi(s):  # |psi'(s)|
        return float(_psi(s) * 2 * s / (1 - s * s) ** 2)

    def hess(s):
        if s == 0.0:
            return 2.0
        psi = float(_psi(s))
        second = abs(psi * (6 * s ** 4 - 2) / (1 - s * s) ** 4)
        radial = abs(psi * 2 / (1 - s * s) ** 2)  # |psi'(s)| / s
        return max(second, radial)

    grid = np.linspace(0.0, 0.999, 20001)
    out = []
    for fn in (dpsi, hess):
        vals = np.array([fn(s) for s in grid])
        i = int(np.argmax(vals))
        lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
        res = minimize_scalar(lambda s: -fn(s), bounds=(lo, hi), method="bounded",
                              options={"xatol": 1e-12})
        out.append(max(vals[i], -res.fun))
    return out[0], out[1]


@dataclass(frozen=True)
class NodeFunction:
    """One node function ``g: R^K -> R`` from the catalog, with metadata."""

    kind: str
    params: tuple[float, ...]
    arity: int
    smoothness: SmoothnessSpec

    def __call__(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        if u.ndim == 1:
            u = u[None, :]
        if u.shape[1] != self.arity:
            raise HCMError(f"{self.kind} node expects {self.arity} inputs, got {u.shape[1]}")
        if self.kind == "bump":
            rho, height = _bump_params(self.params)
            return height * _psi(np.linalg.norm(u, axis=1) / rho)
        out = np.zeros(u.shape[0])
        for c, e in _monomials(self.kind, self.params, self.arity):
            term = np.full(u.shape[0], c)
            for k, ek in enumerate(e):
                if ek:
                    term = term * u[:, k] ** ek
            out = out + term
        return out

    def sup_on(self, radius: float) -> float:
        """Upper bound of |g| over ``[-radius, radius]^K``."""
        if self.kind == "bump":
            return abs(_bump_params(self.params)[1])
        return _poly_deriv_sup(_monomials(self.kind, self.params, self.arity),
                               (0,) * self.arity, radius)

    def lipschitz_on(self, radius: float) -> float:
        """Euclidean Lipschitz bound over the cube (not floored at 1)."""
        if self.kind == "bump":
            rho, height = _bump_params(self.params)
            return abs(height) * _bump_constants()[0] / rho
        return _poly_gradient_lipschitz(_monomials(self.kind, self.params, self.arity),
                                        self.arity, 0, radius)


def _bump_params(params) -> tuple[float, float]:
    rho = float(params[0]) if len(params) > 0 else 1.0
    height = float(params[1]) if len(params) > 1 else 1.0
    if rho <= 0:
        raise HCMError(f"bump radius must be positive, got {rho}")
    return rho, height


def _holder_constant(fn: NodeFunction, q: int, s: float, cube: float) -> float | None:
    diam = 2 * cube * math.sqrt(fn.arity)
    if fn.kind == "bump":
        if q > 1:
            return None
        rho, height = _bump_params(fn.params)
        d1, d2 = _bump_constants()
        lip = abs(height) * (d1 / rho if q == 0 else d2 / rho ** 2)
    else:
        lip = _poly_gradient_lipschitz(_monomials(fn.kind, fn.params, fn.arity), fn.arity, q, cube)
    # on a bounded set a Lipschitz map is s-Hoelder with constant lip * diam^(1-s)
    c = lip * diam ** (1 - s)
    return c if c > 0 else 1.0


def make_node_function(kind: str, params: Sequence[float], arity: int, *, p: float | None = None,
                       C: float | None = None, lipschitz: float | None = None,
                       sup_bound: float | None = None, cube: float = 2.0) -> NodeFunction:
    """Build a catalog node with metadata derived over ``[-cube, cube]^arity``.

    Explicit ``C``, ``lipschitz`` or ``sup_bound`` override the derived values.
    """
    if kind not in KINDS:
        raise HCMError(f"unknown node kind {kind!r}; expected one of {KINDS}")
    if arity < 1:
        raise HCMError(f"arity must be positive, got {arity}")
    params = tuple(float(v) for v in params)
    p = DEFAULT_P[kind] if p is None else float(p)
    bare = NodeFunction(kind, params, arity, SmoothnessSpec.from_p(p, 1.0, 1.0, 0.0))
    q = bare.smoothness.q
    if C is None:
        C = _holder_constant(bare, q, p - q, cube)
        if C is None:
            raise HCMError(f"{kind} node with p={p}: Hoelder constant must be given explicitly")
    if lipschitz is None:
        lipschitz = max(1.0, bare.lipschitz_on(cube))
    if sup_bound is None:
        sup_bound = bare.sup_on(cube)
    return NodeFunction(kind, params, arity, SmoothnessSpec.from_p(p, C, lipschitz, sup_bound))


# ---------------------------------------------------------------------------
# trees

@dataclass(frozen=True)
class HCMNode:
    g: NodeFunction
    children: tuple[Union["HCMNode", int], ...]
    level: int

    @property
    def is_leaf(self) -> bool:
        return self.level == 1


@dataclass(frozen=True)
class HCMSpec:
    """A hierarchical composition model on ``R^d``.

    ``root`` is an :class:`HCMNode`, or a 1-based coordinate index when
    ``level == 0`` (the model ``m(x) = x^(K)``).  ``cube`` is the radius of the
    working cube the node metadata refers to.
    """

    d: int
    level: int
    root: Union[HCMNode, int]
    cube: float = 2.0

    def levels(self) -> dict[int, list[HCMNode]]:
        """Nodes per level, left to right."""
        out: dict[int, list[HCMNode]] = {}
        if self.level == 0:
            return out
        frontier = [self.root]
        lev = self.level
        while frontier and lev >= 1:
            out[lev] = frontier
            frontier = [c for node in frontier for c in node.children if isinstance(c, HCMNode)]
            lev -= 1
        return out

    def nodes(self) -> dict[NodeKey, HCMNode]:
        return {(i, j + 1): node for i, row in self.levels().items() for j, node in enumerate(row)}

    @property
    def pset(self) -> set[tuple[float, int]]:
        """The order and smoothness constraint actually used by the tree."""
        return {(n.g.smoothness.p, n.g.arity) for n in self.nodes().values()}

    @property
    def K_max(self) -> int:
        return max((n.g.arity for n in self.nodes().values()), default=0)

    @property
    def p_max(self) -> float:
        return max((n.g.smoothness.p for n in self.nodes().values()), default=0.0)

    @property
    def N_tilde(self) -> tuple[int, ...]:
        """``(N_1, ..., N_l)`` from the counting recursion."""
        if self.level == 0:
            return ()
        rows = self.levels()
        counts = {self.level: 1}
        for i in range(self.level - 1, 0, -1):
            counts[i] = sum(n.g.arity for n in rows.get(i + 1, []))
        return tuple(counts[i] for i in range(1, self.level + 1))

    @property
    def g_max(self) -> float:
        return max([1.0] + [n.g.smoothness.sup_bound for n in self.nodes().values()])

    @property
    def C_lip(self) -> float:
        return max([1.0] + [n.g.smoothness.lipschitz for n in self.nodes().values()])


@dataclass(frozen=True)
class DerivedConstants:
    K_max: int
    p_max: float
    N_tilde: tuple[int, ...]
    g_max: float
    C_lip: float

    def as_dict(self) -> dict:
        return {"K_max": self.K_max, "p_max": self.p_max, "N_tilde": list(self.N_tilde),
                "g_max": self.g_max, "C_lip": self.C_lip}


def derived_constants(spec: HCMSpec) -> DerivedConstants:
    return DerivedConstants(spec.K_max, spec.p_max, spec.N_tilde, spec.g_max, spec.C_lip)


# ---------------------------------------------------------------------------
# evaluation

def evaluate_hcm(spec: HCMSpec, x: np.ndarray) -> np.ndarray | float:
    """Evaluate ``m`` bottom-up.  Accepts a single point or an ``(N, d)`` batch."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != spec.d:
        raise HCMError(f"expected inputs of dimension {spec.d}, got shape {x.shape}")
    if spec.level == 0:
        out = X[:, int(spec.root) - 1].copy()
    else:
        out = level_outputs(spec, X)[spec.level][:, 0]
    return float(out[0]) if single else out


def level_outputs(spec: HCMSpec, X: np.ndarray) -> dict[int, np.ndarray]:
    """Outputs ``h_j^(i)(X)`` of every level, as ``{i: (N, N_i) array}``."""
    rows = spec.levels()
    outs: dict[int, np.ndarray] = {}
    for i in range(1, spec.level + 1):
        cols = []
        offset = 0
        for node in rows[i]:
            if i == 1:
                u = X[:, [int(c) - 1 for c in node.children]]
            else:
                k = len(node.children)
                u = outs[i - 1][:, offset:offset + k]
                offset += k
            cols.append(node.g(u))
        outs[i] = np.stack(cols, axis=1)
    return outs


# ---------------------------------------------------------------------------
# validation

@dataclass
class Issue:
    code: str
    where: str
    message: str

    def as_dict(self) -> dict:
        return {"code": self.code, "where": self.where, "message": self.message}


@dataclass
class ValidationReport:
    valid: bool
    errors: list[Issue] = field(default_factory=list)
    warnings: list[Issue] = field(default_factory=list)
    constants: dict | None = None

    def as_dict(self) -> dict:
        return {"valid": self.valid, "errors": [e.as_dict() for e in self.errors],
                "warnings": [w.as_dict() for w in self.warnings], "constants": self.constants}


def validate_hcm(spec: HCMSpec) -> ValidationReport:
    """Structural check of membership in H(l, P).  Never raises."""
    errors: list[Issue] = []
    warnings: list[Issue] = []
    if spec.d < 1:
        errors.append(Issue("dimension", "spec", f"d={spec.d} must be positive"))
    if spec.level == 0:
        if not isinstance(spec.root, (int, np.integer)) or not 1 <= spec.root <= spec.d:
            errors.append(Issue("pi_range", "root", f"coordinate {spec.root!r} not in 1..{spec.d}"))
        return ValidationReport(not errors, errors, warnings, None)
    if not isinstance(spec.root, HCMNode):
        errors.append(Issue("level", "root", f"level {spec.level} spec needs a node root"))
        return ValidationReport(False, errors, warnings, None)

    def walk(node, path: str, expected_level: int):
        if not isinstance(node, HCMNode):
            errors.append(Issue("level", path, f"expected a level-{expected_level} node, got {node!r}"))
            return
        if node.level != expected_level:
            errors.append(Issue("level", path, f"node level {node.level}, expected {expected_level}"))
        if len(node.children) != node.g.arity:
            errors.append(Issue("arity", path,
                                f"arity {node.g.arity} but {len(node.children)} children"))
        for msg in node.g.smoothness.problems():
            errors.append(Issue("smoothness", path, msg))
        for k, child in enumerate(node.children):
            cpath = f"{path}.{k + 1}"
            if expected_level == 1:
                if isinstance(child, HCMNode) or not isinstance(child, (int, np.integer)):
                    errors.append(Issue("level", cpath, "level-1 nodes must read coordinates"))
                elif not 1 <= child <= spec.d:
                    errors.append(Issue("pi_range", cpath, f"coordinate {child} not in 1..{spec.d}"))
            else:
                walk(child, cpath, expected_level - 1)
                if isinstance(child, HCMNode):
                    # metadata of the parent holds on its working cube only
                    if child.g.smoothness.sup_bound > spec.cube:
                        warnings.append(Issue("range", cpath,
                                              f"child output bound {child.g.smoothness.sup_bound:g} "
                                              f"exceeds the working cube {spec.cube:g}"))

    walk(spec.root, "root", spec.level)
    constants = None
    if not errors:
        consts = derived_constants(spec)
        constants = consts.as_dict()
        counted = [len(row) for _, row in sorted(spec.levels().items())]
        if list(consts.N_tilde) != counted:
            errors.append(Issue("counting", "spec", f"N recursion {consts.N_tilde} != tree {counted}"))
    return ValidationReport(not errors, errors, warnings, constants)


# ---------------------------------------------------------------------------
# JSON

def _node_from_dict(obj: dict, level: int, cube: float) -> HCMNode:
    kind = obj["kind"]
    if "coords" in obj:
        children: tuple = tuple(int(c) for c in obj["coords"])
    else:
        children = tuple(_node_from_dict(c, level - 1, cube) for c in obj.get("children", []))
    arity = int(obj.get("arity", len(children)))
    g = make_node_function(kind, obj.get("params", []), arity, p=obj.get("p"), C=obj.get("C"),
                           lipschitz=obj.get("lipschitz"), sup_bound=obj.get("sup_bound"), cube=cube)
    return HCMNode(g=g, children=children, level=int(obj.get("level", level)))


def hcm_from_dict(obj: dict) -> HCMSpec:
    d = int(obj["d"])
    level = int(obj["level"])
    cube = float(obj.get("cube", 2.0))
    root = obj["root"]
    if level == 0:
        coord = root["coord"] if isinstance(root, dict) else root
        return HCMSpec(d=d, level=0, root=int(coord), cube=cube)
    return HCMSpec(d=d, level=level, root=_node_from_dict(root, level, cube), cube=cube)


def _node_to_dict(node: HCMNode) -> dict:
    sm = node.g.smoothness
    out = {"kind": node.g.kind, "params": list(node.g.params), "p": sm.p, "C": sm.C,
           "lipschitz": sm.lipschitz, "sup_bound": sm.sup_bound}
    if node.level == 1:
        out["coords"] = [int(c) for c in node.children]
    else:
        out["children"] = [_node_to_dict(c) for c in node.children]
    return out


def hcm_to_dict(spec: HCMSpec) -> dict:
    root = {"coord": int(spec.root)} if spec.level == 0 else _node_to_dict(spec.root)
    return {"d": spec.d, "level": spec.level, "cube": spec.cube, "root": root}


def load_hcm(path: str | Path) -> HCMSpec:
    return hcm_from_dict(json.loads(Path(path).read_text()))


def save_hcm(spec: HCMSpec, path: str | Path) -> None:
    Path(path).write_text(json.dumps(hcm_to_dict(spec), indent=2) + "\n")


# ---------------------------------------------------------------------------
# ready-made models used by the experiments

def leaf(kind: str, params, coords: Sequence[int], **meta) -> HCMNode:
    return HCMNode(make_node_function(kind, params, len(coords), **meta), tuple(coords), 1)


def inner(kind: str, params, children: Sequence[HCMNode], **meta) -> HCMNode:
    level = children[0].level + 1
    return HCMNode(make_node_function(kind, params, len(children), **meta), tuple(children), level)


def fig3_model(d: int = 6, pi: Sequence[int] = (1, 2, 3, 4, 5, 6)) -> HCMSpec:
    """Two-level model with three level-1 nodes of arities 1, 2, 3.

    ``g_1^(2)(u,v,w) = (u+v+w)/3``, ``g_1^(1)(t) = t^2``, ``g_2^(1)(t,u) = t*u``
    and ``g_3^(1)(t,u,v) = (t+u+v)/3``; all level-1 outputs stay in [-1, 1]
    on the unit cube.
    """
    third = 1.0 / 3.0
    nodes = [
        leaf("polynomial", [1.0, 2], pi[0:1]),
        leaf("product", [1.0], pi[1:3]),
        leaf("affine", [0.0, third, third, third], pi[3:6]),
    ]
    return HCMSpec(d=d, level=2, root=inner("affine", [0.0, third, third, third], nodes))


def single_node_model(d: int, kind: str = "bump", params=(1.0, 1.0), coords=(1,), p: float = 2.0) -> HCMSpec:
    return HCMSpec(d=d, level=1, root=leaf(kind, list(params), coords, p=p))
