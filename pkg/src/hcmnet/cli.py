"""Command line interface: ``hcmnet <verb> ...``.

Global flags (``--config``, ``--seed``, ``--out``, ``--threads``) may appear
before or after the verb.  Results are printed as JSON on stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from .approx import build_approximant, check_approximant, plan, schedule
from .complexity import (CoverBudgetError, CoverSpec, assemble_exponent, build_cover, covering_bound_log,
                         generalization_bound, numeric_exponent, predicted_exponent, verify_cover)
from .estimator import TrainConfig, predict
from .hcm import HCMError, load_hcm, validate_hcm
from .lab import ExperimentConfig, run_rate_experiment
from .network import NetworkClass, load_network, save_network

log = logging.getLogger("hcmnet")


def _globals(suppress: bool) -> argparse.ArgumentParser:
    d = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", default=d(None), help="JSON file with options for the verb")
    p.add_argument("--seed", type=int, default=d(None), help="master seed")
    p.add_argument("--out", default=d(None), help="output file or directory")
    p.add_argument("--threads", type=int, default=d(1), help="worker processes")
    return p


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True, default=float))


def _options(args, **defaults) -> dict:
    """CLI values, then config file values, then defaults."""
    conf = json.loads(Path(args.config).read_text()) if args.config else {}
    out = {}
    for key, default in defaults.items():
        val = getattr(args, key, None)
        out[key] = val if val is not None else conf.get(key, default)
    return out


def _parse_point(text: str) -> np.ndarray:
    return np.array([float(v) for v in text.split(",")])


# ---------------------------------------------------------------------------
# verbs

def cmd_hcm_validate(args) -> int:
    try:
        spec = load_hcm(args.file)
    except (HCMError, ValueError, KeyError, TypeError) as exc:
        _emit({"valid": False, "errors": [{"code": "parse", "where": args.file, "message": str(exc)}]})
        return 1
    report = validate_hcm(spec)
    _emit(report.as_dict())
    return 0 if report.valid else 1


def cmd_net_eval(args) -> int:
    net = load_network(args.weights)
    if args.x is not None:
        X = np.atleast_2d(_parse_point(args.x))
    elif args.input is not None:
        X = np.loadtxt(args.input, delimiter=",", ndmin=2)
    else:
        raise SystemExit("net eval needs --x or --input")
    beta = math.inf if args.beta is None else args.beta
    _emit({"outputs": np.asarray(predict(net, beta, X)).reshape(-1).tolist()})
    return 0


def _plan_for(args):
    opt = _options(args, n=None, M=None, width_scale=1.0, a=1.0)
    spec = load_hcm(args.hcm)
    sch = None
    if opt["n"] is not None:
        sch = schedule(int(opt["n"]), spec, width_scale=float(opt["width_scale"]))
        M = sch.M
    else:
        M = int(opt["M"] or 1)
    return spec, sch, plan(spec, M, width_scale=float(opt["width_scale"]), a=float(opt["a"])), opt


def cmd_approx_plan(args) -> int:
    _, sch, pl, _ = _plan_for(args)
    _emit({"schedule": sch.as_dict() if sch else None, "plan": pl.as_dict()})
    return 0


def _train_config(args) -> TrainConfig:
    conf = json.loads(Path(args.config).read_text()).get("train", {}) if args.config else {}
    cfg = TrainConfig(**conf)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if getattr(args, "epochs", None) is not None:
        cfg = cfg.replace(epochs=args.epochs)
    return cfg


def cmd_approx_assemble(args, check: bool = False) -> int:
    spec, _, pl, opt = _plan_for(args)
    approx = build_approximant(spec, pl, _train_config(args), a=float(opt["a"]))
    result = {"plan": pl.as_dict(), "node_errors": {f"{k[0]},{k[1]}": v for k, v in approx.node_errors.items()},
              "input_radii": {f"{k[0]},{k[1]}": v for k, v in approx.radii.items()}, "flags": approx.flags}
    if args.out:
        save_network(approx.network, args.out)
        result["network"] = args.out
    code = 0
    if check:
        chk = check_approximant(spec, approx, a=float(opt["a"]), points=args.points)
        result["check"] = chk.as_dict()
        code = 0 if chk.passed and chk.class_ok else 1
    _emit(result)
    return code


def cmd_cover(args) -> int:
    opt = _options(args, epsilon=0.5, L=1, r=1, alpha=1.0, a=1.0, d=1, budget=10 ** 6, members=10_000,
                   grid=200, c28=1.0)
    spec = CoverSpec(float(opt["epsilon"]), NetworkClass(int(opt["L"]), int(opt["r"]), float(opt["alpha"])),
                     a=float(opt["a"]), d=int(opt["d"]))
    log_bound = covering_bound_log(spec, float(opt["c28"]))
    try:
        cover = build_cover(spec, int(opt["budget"]))
    except CoverBudgetError as exc:
        _emit({"log_bound": log_bound, "refused": True, "required_count": exc.required, "budget": exc.budget})
        return 2
    chk = verify_cover(cover, int(opt["members"]), int(opt["grid"]), seed=args.seed or 0,
                       nearest=args.nearest, c28=float(opt["c28"]))
    _emit(chk.as_dict())
    return 0 if chk.pass_rate == 1.0 and chk.count <= math.exp(log_bound) else 1


def cmd_bound(args) -> int:
    if args.pset:
        pset = {tuple(float(v) for v in pair.split(",")) for pair in args.pset.split(";")}
        pset = {(p, int(K)) for p, K in pset}
        asm = assemble_exponent(pset)
        _emit({"pset": sorted(pset), "symbolic_exponent": str(asm.exponent),
               "log_power": str(asm.total.logs), "numeric_exponent": numeric_exponent(pset),
               "predicted": predicted_exponent(pset)})
        return 0
    if args.n is None or args.log_cover is None:
        raise SystemExit("bound needs --n and --log-cover, or --pset")
    _emit({"bound": generalization_bound(args.n, args.log_cover, args.approx_err_sq, args.c18)})
    return 0


def cmd_rate(args) -> int:
    if not args.config:
        raise SystemExit("rate needs --config")
    cfg = ExperimentConfig.from_json(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    report = run_rate_experiment(cfg, threads=args.threads, out=args.out)
    _emit({"aggregates": [vars(a) for a in report.aggregates],
           "slope": report.slope._asdict() if report.slope else None,
           "predicted_exponent": report.predicted_exponent, "checks": report.checks, "files": report.files})
    return 0 if report.ok else 1


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    sub_globals = _globals(suppress=True)
    parser = argparse.ArgumentParser(prog="hcmnet", parents=[_globals(suppress=False)],
                                     description="Sigmoid networks for hierarchical composition models.")
    parser.add_argument("-v", "--verbose", action="store_true")
    verbs = parser.add_subparsers(dest="verb", required=True)

    hcm = verbs.add_parser("hcm", help="model files").add_subparsers(dest="action", required=True)
    p = hcm.add_parser("validate", parents=[sub_globals], help="check a model file")
    p.add_argument("file")
    p.set_defaults(func=cmd_hcm_validate)

    net = verbs.add_parser("net", help="network files").add_subparsers(dest="action", required=True)
    p = net.add_parser("eval", parents=[sub_globals], help="evaluate a weight file")
    p.add_argument("weights")
    p.add_argument("--x", help="one input point, comma separated")
    p.add_argument("--input", help="CSV of input points")
    p.add_argument("--beta", type=float, help="truncation level (default: none)")
    p.set_defaults(func=cmd_net_eval)

    approx = verbs.add_parser("approx", help="composed approximants").add_subparsers(dest="action", required=True)
    for name, func, doc in [("plan", cmd_approx_plan, "subnetwork shapes and class"),
                            ("assemble", cmd_approx_assemble, "train subnetworks and compose them"),
                            ("check", lambda a: cmd_approx_assemble(a, check=True),
                             "compose and compare with the propagated bound")]:
        p = approx.add_parser(name, parents=[sub_globals], help=doc)
        p.add_argument("hcm")
        p.add_argument("--n", type=int, help="size the plan from the schedule at this n")
        p.add_argument("--M", type=int, help="one resolution for every node")
        p.add_argument("--width-scale", dest="width_scale", type=float)
        p.add_argument("--a", type=float)
        if name != "plan":
            p.add_argument("--epochs", type=int)
            p.add_argument("--points", type=int, default=10_000)
        p.set_defaults(func=func)

    p = verbs.add_parser("cover", parents=[sub_globals], help="enumerate and verify a weight-grid cover")
    for flag, typ in [("epsilon", float), ("L", int), ("r", int), ("alpha", float), ("a", float), ("d", int),
                      ("budget", int), ("members", int), ("grid", int), ("c28", float)]:
        p.add_argument(f"--{flag}", type=typ)
    p.add_argument("--nearest", action="store_true", help="exhaustive nearest-element search")
    p.set_defaults(func=cmd_cover)

    p = verbs.add_parser("bound", parents=[sub_globals], help="risk bound arithmetic")
    p.add_argument("--n", type=int)
    p.add_argument("--log-cover", dest="log_cover", type=float)
    p.add_argument("--approx-err-sq", dest="approx_err_sq", type=float, default=0.0)
    p.add_argument("--c18", type=float, default=1.0)
    p.add_argument("--pset", help="exponent assembly for pairs 'p,K;p,K'")
    p.set_defaults(func=cmd_bound)

    p = verbs.add_parser("rate", parents=[sub_globals], help="rate-of-convergence sweep")
    p.set_defaults(func=cmd_rate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
