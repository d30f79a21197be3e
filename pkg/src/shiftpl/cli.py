"""Command-line entry point: ``shiftpl <command> ...``.

Commands write their outputs plus one ``manifest.json`` into ``--out``.
Exit codes: 0 success, 2 invalid input or configuration, 3 runtime or data
error.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
import warnings

import numpy as np

from shiftpl import __version__
from shiftpl.distributions import parse_law
from shiftpl.errors import ShiftplError, ValidationError
from shiftpl.fitting import RISK_INDEX_A, ViolationCurve, empirical_violation_curve, fit_shifted_power_law
from shiftpl.metrics import EmptyTailWarning, evaluate, reports_to_csv, reports_to_json
from shiftpl.predictor import (
    DEFAULT_EPS,
    ReferencePredictor,
    ResidualSet,
    compute_residuals,
    fit_reference_predictor,
    load_predictor,
    load_residuals,
)
from shiftpl.simulator import (
    SimConfig,
    canonical_digest,
    generate_recording,
    run_rollouts,
    spec_from_config,
)
from shiftpl.trajectory import DEFAULT_DT, DEFAULT_T, build_state_windows, parse_trajectory_csv
from shiftpl.validation import crash_rate_z_test

EXIT_OK = 0
EXIT_INVALID = 2
EXIT_RUNTIME = 3
MANIFEST = "manifest.json"


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


class _Run:
    """Collects inputs and outputs of one command and writes its manifest."""

    def __init__(self, command: str, out_dir: str, config: dict):
        self.command = command
        self.out_dir = out_dir
        self.config = config
        self.inputs: dict = {}
        self.outputs: list = []
        self.extra: dict = {}
        self.t0 = time.perf_counter()
        os.makedirs(out_dir, exist_ok=True)

    def input(self, path):
        if not os.path.isfile(path):
            raise ValidationError(f"input file not found: {path}")
        self.inputs[str(path)] = file_digest(path)
        return path

    def path(self, name: str) -> str:
        p = os.path.join(self.out_dir, name)
        self.outputs.append(p)
        return p

    def finish(self) -> str:
        outputs = {os.path.basename(p): file_digest(p) for p in self.outputs}
        manifest = {
            "command": self.command,
            "config": self.config,
            "inputs": self.inputs,
            "outputs": outputs,
            "outputs_digest": canonical_digest(outputs),
            "version": __version__,
            "wall_seconds": time.perf_counter() - self.t0,
            **self.extra,
        }
        return _write_json(os.path.join(self.out_dir, MANIFEST), manifest)


# ---------------------------------------------------------------------------
# commands

def cmd_residuals(args) -> int:
    run = _Run("residuals", args.out, _config(args))
    run.input(args.dataset)
    table = parse_trajectory_csv(args.dataset, args.schema, dt=args.dt, target_dt=args.target_dt)
    windows = build_state_windows(table, args.T, args.direction, ring_length=args.ring_length)
    if args.predictor == "fit":
        pred = fit_reference_predictor(windows, eps=args.eps, dt=table.dt)
        pred.save(run.path("predictor.json"))
    elif args.predictor == "reference":
        pred = (ReferencePredictor.longitudinal(dt=table.dt, T=args.T) if args.direction == "longitudinal"
                else ReferencePredictor.lateral(dt=table.dt, T=args.T))
        pred.save(run.path("predictor.json"))
    else:
        pred = load_predictor(run.input(args.predictor))
    if len(windows) == 0:
        raise ShiftplError(f"no vehicle in {args.dataset} has {args.T + 1} consecutive frames")
    name = args.name or os.path.splitext(os.path.basename(args.dataset))[0]
    res = compute_residuals(pred, windows, args.eps, dataset=name)
    csv_path = run.path("residuals.csv")
    res.save(csv_path)
    run.outputs.append(os.path.join(args.out, "residuals.json"))
    run.extra["n_windows"] = len(windows)
    run.extra["n_residuals"] = res.n
    run.finish()
    print(f"{res.n} residuals -> {csv_path}")
    return EXIT_OK


def _read_fit_input(path):
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().replace(" ", "")
    if header == "sigma,delta":
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        return None, ViolationCurve(data[:, 0], data[:, 1], policy="file")
    res = load_residuals(path)
    return res, empirical_violation_curve(res)


def cmd_fit(args) -> int:
    run = _Run("fit", args.out, _config(args))
    run.input(args.input)
    res, curve = _read_fit_input(args.input)
    mode = "free-a" if args.fixed_a is None else float(args.fixed_a)
    fit = fit_shifted_power_law(curve, mode)
    d = fit.to_dict()
    if res is not None:
        d["dataset"] = res.dataset
    _write_json(run.path("fit.json"), d)
    curve.to_csv(run.path("curve.csv"))
    # the linearized pairs: log(1 + sigma/a) = k log(delta)
    lines = ["log_delta,log1p_sigma_over_a"]
    lines += [f"{u!r},{v!r}" for u, v in zip(np.log(curve.delta).tolist(), np.log1p(curve.sigma / fit.a).tolist())]
    with open(run.path("loglog.csv"), "w", encoding="utf-8", newline="\n") as fh:
        fh.write("\n".join(lines) + "\n")
    run.finish()
    flag = " (low confidence)" if fit.low_confidence else ""
    print(f"{fit.mode}: a={fit.a:.6g} k={fit.k:.6g} R2={fit.r2:.6f} risk_index={fit.risk_index:.6g}{flag}")
    return EXIT_OK


def _models(specs, res):
    out = []
    for s in specs:
        key = s.strip().lower()
        if key in ("spl:fit", "spl:free-a"):
            out.append(fit_shifted_power_law(empirical_violation_curve(res), "free-a").law())
        elif key in ("spl:fit-fixed", "spl:fixed-a"):
            out.append(fit_shifted_power_law(empirical_violation_curve(res), RISK_INDEX_A).law())
        else:
            out.append(parse_law(s))
    return out


def cmd_eval(args) -> int:
    if not args.model:
        raise ValidationError("eval needs at least one --model")
    run = _Run("eval", args.out, _config(args))
    res = load_residuals(run.input(args.residuals))
    models = _models(args.model, res)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", EmptyTailWarning)
        reps = evaluate(res, models, dataset=res.dataset, bins=args.bins, half_width=args.half_width)
    for w in caught:
        if issubclass(w.category, EmptyTailWarning):
            print(f"warning: {w.message}", file=sys.stderr)
    reports_to_csv(reps, run.path("metrics.csv"))
    reports_to_json(reps, run.path("metrics.json"))
    run.finish()
    for r in reps:
        print(f"{r.model:28s} RP5={r.rp5:.6g} LL={r.log_likelihood:.6g} KL={r.kl:.6g}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    run = _Run("simulate", args.out, _config(args))
    with open(run.input(args.config), encoding="utf-8") as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"simulation config {args.config} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise ValidationError("simulation config must be a JSON object")
    spec, seeds = spec_from_config(cfg, os.path.dirname(os.path.abspath(args.config)))
    report = run_rollouts(spec, seeds, workers=args.workers, batch_size=args.batch_size)
    report.to_json(run.path("report.json"))
    report.events_csv(run.path("events.csv"))
    run.extra["report_digest"] = canonical_digest(report.to_dict())
    run.finish()
    print(f"{len(seeds)} rollouts, {report.vmt_miles:.6g} miles, {report.crashes} crashes, "
          f"{report.rate_per_million:.6g} per million miles")
    return EXIT_OK


def cmd_ztest(args) -> int:
    run = _Run("ztest", args.out, _config(args))
    with open(run.input(args.report), encoding="utf-8") as fh:
        try:
            report = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"report {args.report} is not valid JSON: {exc}") from None
    for key in ("vmt_miles", "crashes"):
        if key not in report:
            raise ValidationError(f"report is missing field '{key}'")
    t = crash_rate_z_test(args.baseline, report["crashes"], report["vmt_miles"])
    report["ztest"] = t.to_dict()
    _write_json(run.path("ztest.json"), report)
    run.finish()
    verdict = "reject" if t.reject else "do not reject"
    print(f"z = {t.z:.4f} ({verdict} equal rates at the 95% level)")
    return EXIT_OK


def cmd_synth_residuals(args) -> int:
    run = _Run("synth-residuals", args.out, _config(args))
    law = parse_law(args.law)
    res = ResidualSet(law.sample(args.n, args.seed), dataset=args.name or law.name, predictor="synthetic",
                      extra={"law": law.to_dict(), "seed": args.seed})
    res.save(run.path("residuals.csv"))
    run.outputs.append(os.path.join(args.out, "residuals.json"))
    run.finish()
    print(f"{args.n} residuals from {law.name}")
    return EXIT_OK


def cmd_synth_traffic(args) -> int:
    """Record a ring-road run and write a matching predictor and simulation config."""
    run = _Run("synth-traffic", args.out, _config(args))
    pred = ReferencePredictor.longitudinal(tau=args.tau, std=args.std)
    table, ring = generate_recording(pred, parse_law(args.law), args.frames, SimConfig(dt=DEFAULT_DT),
                                     seed=args.seed, n_lanes=args.lanes, per_lane=args.per_lane,
                                     speed=args.speed, tau=args.tau)
    table.to_csv(run.path("trajectories.csv"))
    pred.save(run.path("predictor.json"))
    sim = {"dataset": "trajectories.csv", "schema": "neutral", "dt": DEFAULT_DT, "predictor": "predictor.json",
           "law": {"type": "gaussian"}, "steps": 300, "n_rollouts": 32, "seed": 0, "ring_length": ring}
    _write_json(run.path("simulate.json"), sim)
    run.finish()
    print(f"{len(table)} rows on a {ring:.6g} m ring")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing

def _config(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k != "func"}


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected an integer >= 1, got {text}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shiftpl", description="Heavy-tailed residual modeling of driving behavior.")
    p.add_argument("--version", action="version", version=f"shiftpl {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("residuals", help="normalized residuals of a trajectory dataset under a predictor")
    r.add_argument("dataset")
    r.add_argument("--schema", default="neutral")
    r.add_argument("--dt", type=float, default=None, help="recording timestep in s (required for neutral CSVs)")
    r.add_argument("--target-dt", type=float, default=DEFAULT_DT, help="decimate to this timestep (default 0.2)")
    r.add_argument("--predictor", default="fit",
                   help="predictor JSON file, 'fit' (fit the reference rule) or 'reference' (default rule)")
    r.add_argument("--direction", choices=("longitudinal", "lateral"), default="longitudinal")
    r.add_argument("--T", type=_positive_int, default=DEFAULT_T)
    r.add_argument("--eps", type=float, default=DEFAULT_EPS)
    r.add_argument("--ring-length", type=float, default=None)
    r.add_argument("--name", default=None, help="dataset label stored with the residuals")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_residuals)

    f = sub.add_parser("fit", help="fit the shifted power law to residuals or to a (sigma, delta) curve")
    f.add_argument("input", help="residual CSV (header sigma) or curve CSV (header sigma,delta)")
    g = f.add_mutually_exclusive_group()
    g.add_argument("--free-a", action="store_true", help="fit both a and k (default)")
    g.add_argument("--fixed-a", type=float, nargs="?", const=RISK_INDEX_A, default=None,
                   help="fix a (default 5) and fit k only")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit)

    e = sub.add_parser("eval", help="RP5, integral log-likelihood and KL of residual laws")
    e.add_argument("residuals")
    e.add_argument("--model", action="append", default=[],
                   help="law spec, repeatable: gaussian, laplace, student-t:3, spl:a=5,k=-0.2, spl:fit, spl:fit-fixed")
    e.add_argument("--bins", type=_positive_int, default=401)
    e.add_argument("--half-width", type=float, default=None, help="domain half width L (default max(10, max|sigma|))")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("simulate", help="run rollouts from a JSON config")
    s.add_argument("config")
    s.add_argument("--workers", type=_positive_int, default=None, help="worker processes (default $SHIFTPL_WORKERS or 1)")
    s.add_argument("--batch-size", type=_positive_int, default=32)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    z = sub.add_parser("ztest", help="Z-test of a report's crash rate against a baseline per-mile rate")
    z.add_argument("report")
    z.add_argument("--baseline", type=float, required=True, help="baseline crashes per mile, in (0, 1)")
    z.add_argument("--out", required=True)
    z.set_defaults(func=cmd_ztest)

    sr = sub.add_parser("synth-residuals", help="sample residuals from a law")
    sr.add_argument("--law", required=True)
    sr.add_argument("--n", type=_positive_int, default=10**5)
    sr.add_argument("--seed", type=int, default=0)
    sr.add_argument("--name", default=None)
    sr.add_argument("--out", required=True)
    sr.set_defaults(func=cmd_synth_residuals)

    st = sub.add_parser("synth-traffic", help="record a synthetic ring-road dataset with predictor and config")
    st.add_argument("--frames", type=_positive_int, default=100)
    st.add_argument("--lanes", type=_positive_int, default=3)
    st.add_argument("--per-lane", type=_positive_int, default=20)
    st.add_argument("--speed", type=float, default=30.0)
    st.add_argument("--tau", type=float, default=1.0)
    st.add_argument("--std", type=float, default=1.0)
    st.add_argument("--law", default="gaussian")
    st.add_argument("--seed", type=int, default=0)
    st.add_argument("--out", required=True)
    st.set_defaults(func=cmd_synth_traffic)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ShiftplError, OSError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
