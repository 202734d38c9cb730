"""Command-line interface.

Exit codes: 0 success, 1 usage, 2 input parsing, 3 numerical failure,
4 non-convergence.  Errors are reported on stderr as a one-line JSON
object.  File formats are described in ``docs/formats.md``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Optional

import numpy as np

from .anomaly import detect
from .changepoint import detect_multiple, detect_single
from .core import (
    AnomalySet,
    ConvergenceError,
    DataMatrix,
    InvalidArgumentError,
    NumericalError,
    PenaltyScheme,
    PrecisionModel,
    default_penalties,
)
from .estimate import estimate_model
from .graph import banded_adjacency, lattice_adjacency, plan_for
from .saving import approx_saving, segment_stats
from .simlab import (
    DetectorConfig,
    PrecisionSpec,
    SimScenario,
    evaluate_anomalies,
    known_segment_power,
    replicate_seeds,
    sample_null,
    sample_scenario,
    tune_scale,
)

log = logging.getLogger("capacc")

EXIT_USAGE, EXIT_PARSE, EXIT_NUMERIC, EXIT_CONVERGENCE = 1, 2, 3, 4


class UsageError(Exception):
    pass


class ParseError(Exception):
    pass


# ---------------------------------------------------------------------------
# Serialisation


def _fmt(value) -> str:
    if isinstance(value, bool) or value is None:
        return json.dumps(value)
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return "%.17g" % value if math.isfinite(value) else "null"
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, dict):
        return "{" + ", ".join(f"{json.dumps(str(k))}: {_fmt(v)}" for k, v in value.items()) + "}"
    if isinstance(value, (list, tuple, np.ndarray)):
        return "[" + ", ".join(_fmt(v) for v in value) + "]"
    raise TypeError(f"cannot serialise {type(value).__name__}")


def dumps(obj) -> str:
    """JSON with insertion-ordered keys and floats at 17 significant digits.

    Non-finite floats become ``null``.
    """
    return _fmt(obj) + "\n"


def anomaly_report(result: AnomalySet, n: int, p: int, scheme: Optional[PenaltyScheme]) -> dict:
    d = result.to_dict()
    out = {"n": n, "p": p, "penalties": scheme.as_dict() if scheme is not None else {}}
    out.update(d)
    return out


def read_report(path: str) -> tuple:
    """Read an anomaly report; returns ``(AnomalySet, n, p)``."""
    d = _load_json(path)
    try:
        return AnomalySet.from_dict(d), int(d["n"]), int(d["p"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"{path}: malformed anomaly report ({exc})") from exc


def _load_json(path: str):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON ({exc})") from exc


def _write(text: str, path: Optional[str]):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def _rows(path: str) -> list:
    try:
        with open(path, encoding="utf-8", newline="") as fh:
            return [row for row in csv.reader(fh) if row]
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc.strerror}") from exc


def _floats(rows, path, first_line) -> np.ndarray:
    try:
        arr = np.array([[float(v) for v in row] for row in rows], dtype=float)
    except ValueError as exc:
        raise ParseError(f"{path}: non-numeric entry ({exc})") from exc
    widths = {len(r) for r in rows}
    if len(widths) > 1:
        raise ParseError(f"{path}: rows from line {first_line} have unequal lengths")
    return arr


def read_data(path: str) -> DataMatrix:
    """CSV with a header row of column names and one row per time point."""
    rows = _rows(path)
    if len(rows) < 2:
        raise ParseError(f"{path}: need a header and at least one data row")
    header, body = rows[0], rows[1:]
    values = _floats(body, path, 2)
    if values.shape[1] != len(header):
        raise ParseError(f"{path}: header has {len(header)} columns, data has {values.shape[1]}")
    try:
        return DataMatrix(values, tuple(h.strip() for h in header))
    except InvalidArgumentError as exc:
        raise ParseError(f"{path}: {exc}") from exc


def write_data(dm: DataMatrix) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(dm.column_names)
    for row in dm.values:
        w.writerow(["%.17g" % v for v in row])
    return buf.getvalue()


def read_matrix(path: str, p: Optional[int] = None) -> np.ndarray:
    """Dense symmetric CSV (optional header) or ``i,j,value`` triplets (1-based)."""
    rows = _rows(path)
    if not rows:
        raise ParseError(f"{path}: empty matrix file")
    head = [h.strip().lower() for h in rows[0]]
    if head == ["i", "j", "value"]:
        trip = _floats(rows[1:], path, 2)
        if trip.size and trip.shape[1] != 3:
            raise ParseError(f"{path}: triplet rows need three fields")
        if p is None:
            p = int(trip[:, :2].max()) if trip.size else 0
        M = np.zeros((p, p))
        for i, j, v in trip:
            if i != int(i) or j != int(j) or not (1 <= i <= p and 1 <= j <= p):
                raise ParseError(f"{path}: index ({i}, {j}) out of range 1..{p}")
            M[int(i) - 1, int(j) - 1] = v
            M[int(j) - 1, int(i) - 1] = v
        return M
    try:
        [float(v) for v in rows[0]]
        body = rows
    except ValueError:
        body = rows[1:]
    M = _floats(body, path, 1 if body is rows else 2)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ParseError(f"{path}: dense matrix must be square, got {M.shape}")
    return M


def write_matrix(M: np.ndarray) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"x{i + 1}" for i in range(len(M))])
    for row in M:
        w.writerow(["%.17g" % v for v in row])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Configuration helpers


def parse_adjacency(spec: str, p: int) -> np.ndarray:
    """``banded:R``, ``lattice:M``, ``full``, ``none`` or ``file:PATH``."""
    kind, _, arg = spec.partition(":")
    try:
        if kind == "banded":
            return banded_adjacency(p, int(arg))
        if kind == "lattice":
            m = int(arg)
            if m * m != p:
                raise UsageError(f"lattice side {m} does not match p={p}")
            return lattice_adjacency(m)
    except ValueError as exc:
        raise UsageError(f"bad adjacency spec '{spec}'") from exc
    if kind == "full":
        return ~np.eye(p, dtype=bool)
    if kind == "none":
        return np.zeros((p, p), dtype=bool)
    if kind == "file":
        W = read_matrix(arg, p) != 0
        np.fill_diagonal(W, False)
        return W
    raise UsageError(f"unknown adjacency spec '{spec}'")


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("CAPACC_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError as exc:
        raise UsageError(f"CAPACC_SEED must be an integer, got '{env}'") from exc


def build_model(args, data: DataMatrix) -> tuple:
    """Precision model for ``data`` plus estimation metadata."""
    p = data.p
    meta = {}
    if args.precision_source == "identity":
        model = PrecisionModel.identity(p)
    elif args.precision_source == "file":
        if not args.precision:
            raise UsageError("--precision-source file needs --precision PATH")
        model = PrecisionModel(mu0=None, Q=read_matrix(args.precision, p))
    else:
        est = estimate_model(data, parse_adjacency(args.adjacency, p), mad_constant=args.mad_constant)
        model = est.model()
        meta["repaired"] = est.repaired
    if args.mu0 == "median" and args.precision_source != "estimate":
        model = PrecisionModel(mu0=np.median(data.values, axis=0), Q=model.Q)
    elif args.mu0 == "zero":
        model = PrecisionModel(mu0=None, Q=model.Q)
    if model.p != p:
        raise UsageError(f"precision has p={model.p}, data has p={p}")
    return model, meta


def build_scheme(args, n: int, p: int) -> PenaltyScheme:
    scheme = default_penalties(n, p, args.b, args.b_point if args.b_point is not None else args.b)
    overrides = {
        k: getattr(args, k)
        for k in ("alpha_sparse", "alpha_dense", "beta", "beta_point")
        if getattr(args, k) is not None
    }
    if overrides:
        d = {f: getattr(scheme, f) for f in PenaltyScheme.__dataclass_fields__}
        d.update(overrides)
        scheme = PenaltyScheme(**d)
    return scheme


def _precision_spec(args) -> PrecisionSpec:
    return PrecisionSpec(kind=args.precision_kind, rho=args.rho, r=args.r, m=args.m)


# ---------------------------------------------------------------------------
# Commands


def cmd_detect(args) -> int:
    data = read_data(args.input)
    model, meta = build_model(args, data)
    scheme = build_scheme(args, data.n, data.p)
    max_len = args.max_len if args.max_len is not None else data.n
    if not 2 <= args.min_len <= max_len:
        raise UsageError("need 2 <= --min-len <= --max-len")
    result = detect(data, model, plan_for(model), scheme, args.min_len, max_len,
                    points=not args.no_points, refine_subsets=args.refine)
    report = anomaly_report(result, data.n, data.p, scheme)
    report.update(meta)
    _write(dumps(report), args.output)
    return 0


def cmd_cpt(args) -> int:
    data = read_data(args.input)
    model, meta = build_model(args, data)
    scheme = build_scheme(args, data.n, data.p)
    if args.min_len < 1:
        raise UsageError("--min-len must be at least 1")
    if args.multiple:
        found = detect_multiple(data, model, plan_for(model), scheme, args.min_len,
                                segment_penalties=args.segment_penalties, baseline=args.baseline)
    else:
        res = detect_single(data, model, plan_for(model), scheme, args.min_len)
        found = [res]
    out = {"n": data.n, "p": data.p, "penalties": scheme.as_dict(),
           "changepoints": [c.to_dict() for c in found]}
    out.update(meta)
    _write(dumps(out), args.output)
    return 0


def cmd_estimate(args) -> int:
    data = read_data(args.input)
    W = parse_adjacency(args.adjacency, data.p)
    est = estimate_model(data, W, mad_constant=args.mad_constant, max_sweeps=args.max_sweeps)
    _write(write_matrix(est.Q_hat.Q), args.output)
    if args.report:
        _write(dumps({"p": data.p, "mu0": est.mu0_hat, "bandwidth": est.Q_hat.bandwidth,
                      "repaired": est.repaired}), args.report)
    return 0


def cmd_simulate(args) -> int:
    if args.config:
        d = _load_json(args.config)
        try:
            scenario = SimScenario.from_dict(d)
        except (KeyError, TypeError) as exc:
            raise ParseError(f"{args.config}: malformed scenario ({exc})") from exc
        if args.seed is not None or "seed" not in d:
            scenario = SimScenario.from_dict({**scenario.to_dict(), "seed": _seed(args)})
    else:
        if args.n is None or args.p is None:
            raise UsageError("simulate needs --config or --n and --p")
        scenario = SimScenario(args.n, args.p, _precision_spec(args), seed=_seed(args))
    data, truth = sample_scenario(scenario)
    _write(write_data(data), args.output)
    if args.truth:
        _write(dumps(anomaly_report(truth, scenario.n, scenario.p, None)), args.truth)
    return 0


def _map(fn, items, threads: int) -> list:
    if threads <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def cmd_tune(args) -> int:
    p, n = args.p, args.n
    null_model = _precision_spec(args).build(p)
    det_model = null_model if args.detector == "true" else PrecisionModel.identity(p)
    config = DetectorConfig(det_model, kind=args.kind, min_len=args.min_len,
                            segment=tuple(args.segment) if args.segment else None)
    seed = _seed(args)
    if config.kind == "segment":
        crit = None
    else:
        seeds = replicate_seeds(seed, args.reps)
        crit = np.array(_map(
            lambda s: config.critical_scale(sample_null(null_model, n, np.random.default_rng(s))),
            seeds, args.threads))
    res = tune_scale(null_model, n, p, args.target_alpha, args.delta, args.reps, config, seed=seed, critical=crit)
    _write(dumps({"b": res.b, "alpha_hat": res.alpha_hat, "within_band": res.within_band,
                  "target_alpha": args.target_alpha, "delta": args.delta, "reps": args.reps,
                  "seed": seed}), args.output)
    return 0


def cmd_evaluate(args) -> int:
    did = False
    if args.truth or args.detected:
        if not (args.truth and args.detected):
            raise UsageError("--truth and --detected must be given together")
        truth, n, p = read_report(args.truth)
        found, n2, p2 = read_report(args.detected)
        if (n, p) != (n2, p2):
            raise UsageError("truth and detection reports disagree on (n, p)")
        _write(dumps(evaluate_anomalies(truth, found, n).to_dict()), args.output)
        did = True
    if args.emit_curves:
        p = args.p
        true_model = _precision_spec(args).build(p)
        s, e = args.segment if args.segment else (args.n // 2, args.n // 2 + 10)
        rows = known_segment_power(
            true_model, {"true": true_model, "identity": PrecisionModel.identity(p)},
            args.n, s, e, tuple(args.J), args.thetas, args.reps,
            change_class=args.change_class, rho_c=args.rho_c, seed=_seed(args),
        )
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["method", "parameter", "theta", "power"])
        for row in rows:
            w.writerow([row["method"], "%.17g" % row["parameter"], "%.17g" % row["theta"], "%.17g" % row["power"]])
        _write(buf.getvalue(), args.emit_curves)
        did = True
    if not did:
        raise UsageError("evaluate needs --truth/--detected or --emit-curves")
    return 0


def cmd_bench(args) -> int:
    rng = np.random.default_rng(_seed(args))
    rows = []
    for p in args.sizes:
        model = PrecisionSpec(kind="banded", rho=0.5, r=args.r).build(p)
        plan = plan_for(model)
        x = sample_null(model, 20, rng)
        x[:10, : max(1, p // 10)] += 1.0
        stats = segment_stats(x, model.mu0, 0, 10)
        scheme = default_penalties(20, p)
        approx_saving(model.Q, plan, stats, scheme)
        times = []
        for _ in range(args.repeat):
            t0 = time.perf_counter()
            approx_saving(model.Q, plan, stats, scheme)
            times.append(time.perf_counter() - t0)
        rows.append({"p": p, "r": args.r, "seconds": float(np.median(times))})
    lp = np.log([r["p"] for r in rows])
    lt = np.log([r["seconds"] for r in rows])
    slope = float(np.polyfit(lp, lt, 1)[0]) if len(rows) > 1 else math.nan
    _write(dumps({"rows": rows, "slope": slope}), args.output)
    return 0


# ---------------------------------------------------------------------------
# Parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_model_args(sp):
    sp.add_argument("--precision-source", choices=("identity", "file", "estimate"), default="identity")
    sp.add_argument("--precision", help="precision matrix file (dense or triplet CSV)")
    sp.add_argument("--adjacency", default="banded:1", help="banded:R | lattice:M | full | none | file:PATH")
    sp.add_argument("--mu0", choices=("zero", "median"), default="median",
                    help="baseline mean when the precision is not estimated")
    sp.add_argument("--mad-constant", type=float, default=1.4826)


def _add_penalty_args(sp):
    sp.add_argument("--b", type=float, default=1.0, help="collective penalty scale")
    sp.add_argument("--b-point", type=float, default=None, help="point penalty scale (default: b)")
    for name in ("alpha-sparse", "alpha-dense", "beta", "beta-point"):
        sp.add_argument(f"--{name}", type=float, default=None, help="override after scaling")


def _add_sim_args(sp, need_size=False):
    sp.add_argument("--n", type=int, required=need_size)
    sp.add_argument("--p", type=int, required=need_size)
    sp.add_argument("--precision-kind", choices=("identity", "banded", "lattice", "constant"), default="identity")
    sp.add_argument("--rho", type=float, default=0.5)
    sp.add_argument("--r", type=int, default=1)
    sp.add_argument("--m", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="capacc", description=__doc__.splitlines()[0])
    parser.add_argument("--seed", type=int, default=None, help="random seed (falls back to $CAPACC_SEED)")
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("-v", "--verbose", action="store_true")
    # The same options after the command name; SUPPRESS keeps the top-level value otherwise.
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS)
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sp = sub.add_parser("detect", parents=[common], help="collective and point anomalies")
    sp.add_argument("--input", required=True)
    sp.add_argument("--output")
    _add_model_args(sp)
    _add_penalty_args(sp)
    sp.add_argument("--min-len", type=int, default=2)
    sp.add_argument("--max-len", type=int, default=None)
    sp.add_argument("--no-points", action="store_true")
    sp.add_argument("--refine", action="store_true", help="re-estimate subsets under the sparse penalty")
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("cpt", parents=[common], help="changepoints in the mean")
    sp.add_argument("--input", required=True)
    sp.add_argument("--output")
    _add_model_args(sp)
    _add_penalty_args(sp)
    sp.add_argument("--min-len", type=int, default=1)
    sp.add_argument("--multiple", action="store_true", help="binary segmentation")
    sp.add_argument("--segment-penalties", action="store_true")
    sp.add_argument("--baseline", choices=("segment", "global"), default="segment")
    sp.set_defaults(func=cmd_cpt)

    sp = sub.add_parser("estimate", parents=[common], help="robust structured precision estimate")
    sp.add_argument("--input", required=True)
    sp.add_argument("--output")
    sp.add_argument("--report", help="JSON file for the baseline and metadata")
    sp.add_argument("--adjacency", default="banded:1")
    sp.add_argument("--mad-constant", type=float, default=1.4826)
    sp.add_argument("--max-sweeps", type=int, default=500)
    sp.set_defaults(func=cmd_estimate)

    sp = sub.add_parser("simulate", parents=[common], help="draw a dataset from a scenario")
    sp.add_argument("--config", help="scenario JSON")
    sp.add_argument("--output")
    sp.add_argument("--truth", help="write the ground truth report here")
    _add_sim_args(sp)
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("tune", parents=[common], help="tune the penalty scale for a false-positive rate")
    _add_sim_args(sp, need_size=True)
    sp.add_argument("--output")
    sp.add_argument("--kind", choices=("anomaly", "segment", "cpt"), default="anomaly")
    sp.add_argument("--detector", choices=("true", "identity"), default="true")
    sp.add_argument("--segment", type=int, nargs=2, metavar=("S", "E"))
    sp.add_argument("--min-len", type=int, default=2)
    sp.add_argument("--target-alpha", type=float, default=0.05)
    sp.add_argument("--delta", type=float, default=0.02)
    sp.add_argument("--reps", type=int, default=1000)
    sp.set_defaults(func=cmd_tune)

    sp = sub.add_parser("evaluate", parents=[common], help="score detections or emit power curves")
    sp.add_argument("--truth")
    sp.add_argument("--detected")
    sp.add_argument("--output")
    sp.add_argument("--emit-curves", metavar="CSV")
    _add_sim_args(sp)
    sp.add_argument("--segment", type=int, nargs=2, metavar=("S", "E"))
    sp.add_argument("--J", type=int, nargs="+", default=[1])
    sp.add_argument("--thetas", type=float, nargs="+", default=[0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0])
    sp.add_argument("--reps", type=int, default=500)
    sp.add_argument("--change-class", choices=("mu_sigma", "mu_rho"), default="mu_sigma")
    sp.add_argument("--rho-c", type=float, default=0.0)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("bench", parents=[common], help="time single-segment savings against p")
    sp.add_argument("--sizes", type=int, nargs="+", default=[50, 100, 200, 400])
    sp.add_argument("--r", type=int, default=2)
    sp.add_argument("--repeat", type=int, default=5)
    sp.add_argument("--output")
    sp.set_defaults(func=cmd_bench)
    return parser


def _fail(code: int, exc: BaseException) -> int:
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    if isinstance(exc, ConvergenceError):
        payload["gap"] = exc.gap
    sys.stderr.write(dumps(payload))
    return code


def run(argv=None) -> int:
    """Parse ``argv`` and run the command; returns the exit code."""
    try:
        args = build_parser().parse_args(argv)
        if args.threads < 1:
            raise UsageError("--threads must be at least 1")
        if args.command == "evaluate" and args.emit_curves and (args.n is None or args.p is None):
            raise UsageError("--emit-curves needs --n and --p")
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except (UsageError, InvalidArgumentError) as exc:
        return _fail(EXIT_USAGE, exc)
    except ParseError as exc:
        return _fail(EXIT_PARSE, exc)
    except ConvergenceError as exc:
        return _fail(EXIT_CONVERGENCE, exc)
    except (NumericalError, np.linalg.LinAlgError) as exc:
        return _fail(EXIT_NUMERIC, exc)


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
