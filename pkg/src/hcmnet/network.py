"""Fully connected sigmoid networks and the combinators used to compose them.

A network with ``L`` hidden layers is stored as ``L + 1`` coefficient
matrices.  Matrix ``s`` has shape ``(k_{s+1}, 1 + k_s)`` with the bias in
column 0, so row ``i`` holds ``c_{i,0}^(s), c_{i,1}^(s), ...``.  The last
matrix is the output layer; it has one row for an ordinary network and
several rows for the intermediate multi-output networks built while stacking
levels.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

# sup |sigma''| = sqrt(3)/18, attained where sigma = 1/2 -+ sqrt(3)/6
SIGMA_D2_SUP = math.sqrt(3.0) / 18.0
SIGMA_D1_SUP = 0.25


class NetworkError(ValueError):
    pass


def sigmoid(x):
    """Logistic function; ``exp`` overflowing to inf gives the correct limit 0."""
    x = np.asarray(x, dtype=float)
    with np.errstate(over="ignore", under="ignore"):
        out = np.exp(-x, out=np.empty_like(x))
    out += 1.0
    np.reciprocal(out, out=out)
    return out if out.ndim else float(out)


def sigma_d1(x):
    s = sigmoid(x)
    return s * (1 - s)


def sigma_d2(x):
    s = sigmoid(x)
    return s * (1 - s) * (1 - 2 * s)


@dataclass(frozen=True, eq=False)
class Network:
    weights: tuple[np.ndarray, ...]
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ws = []
        for s, W in enumerate(self.weights):
            W = np.array(W, dtype=float)
            if W.ndim != 2 or W.shape[1] < 1:
                raise NetworkError(f"layer {s}: expected a 2-d coefficient matrix, got shape {W.shape}")
            if not np.all(np.isfinite(W)):
                raise NetworkError(f"layer {s}: non-finite coefficients")
            if s > 0 and W.shape[1] != ws[-1].shape[0] + 1:
                raise NetworkError(f"layer {s} expects {W.shape[1] - 1} inputs, "
                                   f"layer {s - 1} has {ws[-1].shape[0]} units")
            W.setflags(write=False)
            ws.append(W)
        if len(ws) < 2:
            raise NetworkError("a network needs at least one hidden layer")
        object.__setattr__(self, "weights", tuple(ws))

    @property
    def d(self) -> int:
        return self.weights[0].shape[1] - 1

    @property
    def L(self) -> int:
        return len(self.weights) - 1

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(W.shape[0] for W in self.weights[:-1])

    @property
    def n_out(self) -> int:
        return self.weights[-1].shape[0]

    @property
    def n_params(self) -> int:
        return sum(W.size for W in self.weights)

    def hidden(self, X: np.ndarray) -> list[np.ndarray]:
        """Activations of every layer, input included."""
        acts = [X]
        h = X
        for W in self.weights[:-1]:
            h = sigmoid(h @ W[:, 1:].T + W[:, 0])
            acts.append(h)
        return acts

    def __call__(self, x):
        return forward(self, x)

    def max_abs_coefficient(self) -> float:
        return max(float(np.max(np.abs(W))) for W in self.weights)


def forward(net: Network, x):
    """Evaluate the network at one point (scalar result) or an ``(N, d)`` batch."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != net.d:
        raise NetworkError(f"network takes {net.d} inputs, got shape {x.shape}")
    h = net.hidden(X)[-1]
    W = net.weights[-1]
    out = h @ W[:, 1:].T + W[:, 0]
    if net.n_out == 1:
        out = out[:, 0]
        return float(out[0]) if single else out
    return out[0] if single else out


@dataclass(frozen=True)
class NetworkClass:
    """F(L, r, alpha): L hidden layers of width r, coefficients in [-alpha, alpha]."""

    L: int
    r: int
    alpha: float

    def __post_init__(self):
        if self.L < 1 or self.r < 1:
            raise NetworkError(f"need L >= 1 and r >= 1, got L={self.L}, r={self.r}")
        if not self.alpha > 0:
            raise NetworkError(f"alpha must be positive, got {self.alpha}")


@dataclass(frozen=True)
class ClassCheck:
    ok: bool
    violation: str | None = None

    def __bool__(self):
        return self.ok


def in_class(net: Network, cls: NetworkClass) -> ClassCheck:
    if net.n_out != 1:
        return ClassCheck(False, f"network has {net.n_out} outputs")
    if net.L != cls.L:
        return ClassCheck(False, f"depth {net.L} != {cls.L}")
    for s, k in enumerate(net.widths):
        if k != cls.r:
            return ClassCheck(False, f"width of hidden layer {s + 1} is {k}, expected {cls.r}")
    for s, W in enumerate(net.weights):
        bad = np.argwhere(np.abs(W) > cls.alpha)
        if len(bad):
            i, j = (int(v) for v in bad[0])
            return ClassCheck(False, f"|c[{s}][{i},{j}]| = {abs(W[i, j])!r} > alpha = {cls.alpha!r}")
    return ClassCheck(True)


# ---------------------------------------------------------------------------
# building blocks

def identity_block(R: float) -> Network:
    """``f_id(x) = 4R (sigma(x/R) - 1/2)`` as a network in F(1, 1, 4R)."""
    if R < 1:
        raise NetworkError(f"identity block needs R >= 1, got {R}")
    return Network((np.array([[0.0, 1.0 / R]]), np.array([[-2.0 * R, 4.0 * R]])))


def identity_error_bound(a: float, R: float) -> float:
    """Worst-case ``|f_id(x) - x|`` on ``[-a, a]``."""
    return 2.0 * SIGMA_D2_SUP * a * a / R


def padding_radius(s: int, B: float, M: float, p: float) -> float:
    """Smallest admissible R for padding ``s`` identity blocks onto an output in [-2B, 2B].

    With this R every block moves its input by at most ``M^(-2p)``.  The
    ``(s - 1)`` growth factor is kept for ``s >= 2``; for a single block it is
    replaced by 1, which is what the one-step error bound needs.
    """
    return max(1.0, max(s - 1, 1) * 8.0 * SIGMA_D2_SUP * B * B * M ** (2 * p))


def pad_depth(net: Network, extra_layers: int, R: float, *, B: float | None = None,
              M: float | None = None, p: float | None = None) -> Network:
    """Append ``extra_layers`` identity blocks to every output of ``net``.

    The first block absorbs the output layer of ``net``; later blocks are
    ``sigma(4h - 2)``.  When ``B, M, p`` are given the result carries a
    ``drift_bound`` of ``s / M^(2p)`` in its metadata, plus a warning if
    ``R`` is below :func:`padding_radius`.
    """
    if extra_layers < 0:
        raise NetworkError("extra_layers must be nonnegative")
    if extra_layers == 0:
        return net
    if R < 1:
        raise NetworkError(f"identity blocks need R >= 1, got {R}")
    out_W = net.weights[-1]
    m = net.n_out
    layers = list(net.weights[:-1])
    layers.append(out_W / R)
    chain = np.zeros((m, m + 1))
    chain[:, 0] = -2.0
    chain[:, 1:] = 4.0 * np.eye(m)
    layers.extend([chain] * (extra_layers - 1))
    final = np.zeros((m, m + 1))
    final[:, 0] = -2.0 * R
    final[:, 1:] = 4.0 * R * np.eye(m)
    layers.append(final)
    meta = dict(net.meta)
    meta["padding"] = {"layers": extra_layers, "R": R}
    if B is not None and M is not None and p is not None:
        meta["padding"]["drift_bound"] = extra_layers / M ** (2 * p)
        rule = padding_radius(extra_layers, B, M, p)
        if R < rule:
            meta["padding"]["warning"] = f"R={R:g} below the rule {rule:g}; drift bound not guaranteed"
    return Network(tuple(layers), meta)


def pad_width(net: Network, width: int) -> Network:
    """Widen every hidden layer to ``width`` with inert units (zero in, zero out)."""
    ws = net.weights
    if any(k > width for k in net.widths):
        raise NetworkError(f"cannot pad widths {net.widths} down to {width}")
    out = []
    for s, W in enumerate(ws):
        rows = width if s < len(ws) - 1 else W.shape[0]
        cols = 1 + (net.d if s == 0 else width)
        P = np.zeros((rows, cols))
        P[:W.shape[0], :W.shape[1]] = W
        out.append(P)
    return Network(tuple(out), dict(net.meta))


def parallel_compose(nets: Sequence[Network], inputs: Sequence[Sequence[int]] | None = None,
                     d: int | None = None) -> Network:
    """Run several networks side by side in the same layers.

    By default all networks read the same input vector.  ``inputs[j]`` lists
    the (0-based) coordinates of a shared input of dimension ``d`` that feed
    network ``j``, in order; repeated coordinates are allowed.  Outputs are
    concatenated.
    """
    nets = list(nets)
    if not nets:
        raise NetworkError("nothing to compose")
    L = nets[0].L
    if any(n.L != L for n in nets):
        raise NetworkError(f"depth mismatch: {[n.L for n in nets]}")
    if inputs is None:
        if any(n.d != nets[0].d for n in nets):
            raise NetworkError(f"input dimension mismatch: {[n.d for n in nets]}")
        inputs = [list(range(nets[0].d))] * len(nets)
        d = nets[0].d
    else:
        if len(inputs) != len(nets):
            raise NetworkError("one input map per network required")
        for n, idx in zip(nets, inputs):
            if len(idx) != n.d:
                raise NetworkError(f"input map {list(idx)} does not match network input dimension {n.d}")
        d = d if d is not None else 1 + max(max(idx) for idx in inputs)
    layers = []
    for s in range(L + 1):
        rows = sum(n.weights[s].shape[0] for n in nets)
        cols = 1 + (d if s == 0 else sum(n.widths[s - 1] for n in nets))
        W = np.zeros((rows, cols))
        r0 = c0 = 0
        for n, idx in zip(nets, inputs):
            Wn = n.weights[s]
            W[r0:r0 + Wn.shape[0], 0] = Wn[:, 0]
            if s == 0:
                for k, coord in enumerate(idx):
                    W[r0:r0 + Wn.shape[0], 1 + coord] += Wn[:, 1 + k]
            else:
                W[r0:r0 + Wn.shape[0], 1 + c0:1 + c0 + Wn.shape[1] - 1] = Wn[:, 1:]
                c0 += Wn.shape[1] - 1
            r0 += Wn.shape[0]
        layers.append(W)
    return Network(tuple(layers))


def stack_levels(levels: Sequence[Network], width: int | None = None) -> Network:
    """Feed the outputs of each level into the next one.

    The output layer of level ``i`` is linear, so it folds into the first
    layer of level ``i + 1``: ``sigma(b + A (c + C h)) = sigma((b + A c) + (A C) h)``.
    The result has the summed depth; narrower layers are padded with inert
    units up to ``width`` (default: the widest layer).
    """
    levels = list(levels)
    if not levels:
        raise NetworkError("nothing to stack")
    layers = list(levels[0].weights)
    for prev, nxt in zip(levels, levels[1:]):
        if prev.n_out != nxt.d:
            raise NetworkError(f"level produces {prev.n_out} outputs but the next level reads {nxt.d}")
    for nxt in levels[1:]:
        out_W = layers.pop()
        first = nxt.weights[0]
        A = first[:, 1:]
        joined = np.empty((first.shape[0], out_W.shape[1]))
        joined[:, 0] = first[:, 0] + A @ out_W[:, 0]
        joined[:, 1:] = A @ out_W[:, 1:]
        layers.append(joined)
        layers.extend(nxt.weights[1:])
    net = Network(tuple(layers))
    width = width if width is not None else max(net.widths)
    return pad_width(net, width)


# ---------------------------------------------------------------------------
# serialization

def network_to_dict(net: Network) -> dict:
    out = {"d": net.d, "L": net.L, "widths": list(net.widths),
           "weights": [W.tolist() for W in net.weights]}
    if net.meta:
        out["meta"] = net.meta
    return out


def network_from_dict(obj: dict) -> Network:
    net = Network(tuple(np.array(W, dtype=float) for W in obj["weights"]), dict(obj.get("meta", {})))
    if "d" in obj and obj["d"] != net.d:
        raise NetworkError(f"declared d={obj['d']} but weights give {net.d}")
    if "widths" in obj and list(obj["widths"]) != list(net.widths):
        raise NetworkError(f"declared widths {obj['widths']} but weights give {list(net.widths)}")
    if "L" in obj and obj["L"] != net.L:
        raise NetworkError(f"declared L={obj['L']} but weights give {net.L}")
    return net


def save_network(net: Network, path: str | Path, **extra) -> None:
    obj = network_to_dict(net)
    obj.update(extra)
    Path(path).write_text(json.dumps(obj) + "\n")


def load_network(path: str | Path) -> Network:
    return network_from_dict(json.loads(Path(path).read_text()))
