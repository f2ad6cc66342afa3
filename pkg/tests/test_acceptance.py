"""Acceptance checks, one test per criterion.

Each test prints a single ``PASS``/``FAIL`` line with the measured numbers
and then asserts.  The two rate sweeps are run once per module and shared by
criteria 6, 7 and 8.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from hcmnet.approx import build_approximant, check_approximant, plan, schedule
from hcmnet.complexity import (CoverSpec, assemble_exponent, build_cover, covering_bound_log, numeric_exponent,
                               predicted_exponent, verify_cover)
from hcmnet.estimator import TrainConfig
from hcmnet.hcm import fig3_model
from hcmnet.lab import ExperimentConfig, run_cell, run_rate_experiment
from hcmnet.network import (SIGMA_D2_SUP, NetworkClass, forward, identity_block, identity_error_bound, in_class,
                            pad_depth, padding_radius, stack_levels)

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture
def verdict(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return emit


def test_criterion_1_identity_block(verdict):
    start = time.perf_counter()
    x2 = np.linspace(-10, 10, 2_000_001)
    s = 1 / (1 + np.exp(-x2))
    d2 = float(np.max(np.abs(s * (1 - s) * (1 - 2 * s))))
    worst, ok = 0.0, abs(d2 - math.sqrt(3) / 18) <= 1e-6 and abs(SIGMA_D2_SUP - math.sqrt(3) / 18) <= 1e-6
    for a in (1, 2):
        for R in (10, 100, 1000):
            x = np.linspace(-a, a, 1001)
            err = float(np.max(np.abs(forward(identity_block(R), x[:, None]) - x)))
            bound = 2 * (math.sqrt(3) / 18) * a * a / R
            ok &= err <= bound and identity_error_bound(a, R) == pytest.approx(bound, rel=1e-12)
            worst = max(worst, err / bound)
    elapsed = time.perf_counter() - start
    ok &= elapsed < 1.0
    verdict(1, ok, f"sup|sigma''| = {d2:.8f}, worst err/bound = {worst:.4f}, {elapsed:.2f}s")


def test_criterion_2_depth_padding(verdict):
    start = time.perf_counter()
    ok, worst = True, 0.0
    x = np.linspace(-1, 1, 1001)
    for s in (1, 2, 4):
        for M in (2, 3):
            for p in (1, 2):
                R = padding_radius(s, 1.0, M, p)
                chain = stack_levels([identity_block(R)] * s)
                drift = float(np.max(np.abs(forward(chain, x[:, None]) - x)))
                padded = pad_depth(identity_block(R), s, R, B=1.0, M=M, p=p)
                ok &= drift <= s / M ** (2 * p) and "warning" not in padded.meta["padding"]
                worst = max(worst, drift * M ** (2 * p) / s)
    elapsed = time.perf_counter() - start
    ok &= elapsed < 1.0
    verdict(2, ok, f"worst drift / (s M^-2p) = {worst:.4f}, {elapsed:.2f}s")


def test_criterion_3_cover_soundness(verdict):
    start = time.perf_counter()
    ok, parts = True, []
    for eps in (0.25, 0.5):
        spec = CoverSpec(eps, NetworkClass(1, 1, 1.0), a=1.0, d=1)
        cover = build_cover(spec)
        chk = verify_cover(cover, members=10_000, grid_points=200, seed=0, nearest=True)
        bound = covering_bound_log(spec, c28=1.0)
        ok &= chk.pass_rate == 1.0 and math.log(len(cover)) <= bound
        parts.append(f"eps={eps}: {chk.within}/{chk.members} within, worst {chk.worst:.4f}, "
                     f"|cover|={len(cover)} <= e^{bound:.2f}")
    elapsed = time.perf_counter() - start
    ok &= elapsed < 120
    verdict(3, ok, "; ".join(parts) + f", {elapsed:.1f}s")


def test_criterion_4_error_propagation(verdict):
    start = time.perf_counter()
    spec = fig3_model()
    pl = plan(spec, 1, width_scale=0.01)
    approx = build_approximant(spec, pl, TrainConfig(epochs=1500, restarts=1))
    chk = check_approximant(spec, approx, points=10_000)
    elapsed = time.perf_counter() - start
    ok = chk.measured <= chk.bound and elapsed < 300
    errs = ", ".join(f"{k}: {v:.3g}" for k, v in sorted(approx.node_errors.items()))
    verdict(4, ok, f"measured {chk.measured:.5f} <= bound {chk.bound:.5f} (node errors {errs}), "
                   f"class_ok={chk.class_ok}, {elapsed:.1f}s")


def test_criterion_5_exponent_assembly(verdict):
    start = time.perf_counter()
    ok, parts = True, []
    for pset in ({(2.0, 2)}, {(1.0, 3)}, {(3.0, 1), (2.0, 4)}):
        target = predicted_exponent(pset)
        sym = float(assemble_exponent(pset).exponent)
        num = numeric_exponent(pset)
        ok &= abs(sym - target) <= 1e-9 and abs(num - target) <= 1e-9
        parts.append(f"{sorted(pset)}: symbolic {sym:.12f}, numeric {num:.12f}, target {target:.12f}")
    elapsed = time.perf_counter() - start
    ok &= elapsed < 1.0
    verdict(5, ok, "; ".join(parts) + f", {elapsed:.2f}s")


class Sweep:
    def __init__(self, name, tmp):
        self.cfg = ExperimentConfig.from_json(CONFIGS / name)
        self.out = tmp / Path(name).stem
        start = time.perf_counter()
        self.report = run_rate_experiment(self.cfg, out=self.out)
        self.seconds = time.perf_counter() - start


@pytest.fixture(scope="module")
def sweeps(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("sweeps")
    cache = {}

    def get(name):
        if name not in cache:
            cache[name] = Sweep(name, tmp)
        return cache[name]
    return get


@pytest.mark.slow
def test_criterion_6_rate_experiment(sweeps, verdict):
    sw = sweeps("rate_d4.json")
    rep, cfg = sw.report, sw.cfg
    spec = cfg.spec()
    widths = [schedule(n, spec, cfg.c3, cfg.c4, cfg.width_scale).r_n for n in cfg.n_grid]
    means = [rep.means()[n] for n in cfg.n_grid]
    slope = rep.slope.slope if rep.slope else math.nan
    ok = (spec.pset == {(2.0, 1)} and spec.d == 4 and cfg.n_grid == [250, 500, 1000, 2000, 4000]
          and cfg.replications == 10 and all(8 <= r <= 64 for r in widths)
          and all(b < a for a, b in zip(means, means[1:])) and -1.1 <= slope <= -0.30
          and means[-1] <= means[0] / 2 and rep.checks["all_replicates_succeeded"])
    verdict(6, ok, f"means {[f'{m:.5f}' for m in means]}, slope {slope:.3f} (predicted "
                   f"{rep.predicted_exponent}), r_n {widths}, {sw.seconds:.0f}s on one core")


@pytest.mark.slow
def test_criterion_7_dimension_independence(sweeps, verdict):
    d4, d8 = sweeps("rate_d4.json"), sweeps("rate_d8.json")
    s4, s8 = d4.cfg.spec(), d8.cfg.spec()
    exps = {n: (schedule(n, s4).exponent, schedule(n, s8).exponent) for n in d4.cfg.n_grid}
    same_pset = s4.pset == s8.pset and (s4.d, s8.d) == (4, 8)
    exact = all(a == b for a, b in exps.values()) and d4.report.predicted_exponent == d8.report.predicted_exponent
    a, b = d4.report.slope.slope, d8.report.slope.slope
    ok = same_pset and exact and abs(a - b) <= 0.25
    verdict(7, ok, f"predicted {d4.report.predicted_exponent} vs {d8.report.predicted_exponent}, "
                   f"slopes d4 {a:.3f} d8 {b:.3f} (gap {abs(a - b):.3f}), d8 means "
                   f"{[f'{m:.5f}' for m in d8.report.means().values()]}, {d8.seconds:.0f}s")


@pytest.mark.slow
def test_criterion_8_determinism(sweeps, tmp_path, verdict):
    # full rerun of the smoke sweep from its manifest, plus a recomputation of
    # one replicate per n of the d=4 sweep from that sweep's manifest
    smoke = sweeps("rate_smoke.json")
    again = ExperimentConfig.from_json(smoke.out / "manifest.json")
    run_rate_experiment(again, out=tmp_path / "smoke")
    same = all((smoke.out / f).read_bytes() == (tmp_path / "smoke" / f).read_bytes()
               for f in ("rate.csv", "aggregate.csv"))
    d4 = sweeps("rate_d4.json")
    man = json.loads((d4.out / "manifest.json").read_text())
    cfg = ExperimentConfig.from_dict(man).to_dict()
    lines = (d4.out / "rate.csv").read_text().splitlines()[1:]
    spot = True
    for n in d4.cfg.n_grid:
        row = run_cell(cfg, n, 0)
        text = ",".join([str(row.n), str(row.replicate), repr(row.l2_error), repr(row.train_risk), str(row.seed)])
        spot &= text in lines
    verdict(8, same and spot, f"smoke rerun byte-identical: {same}; d4 spot cells reproduced: {spot}")
