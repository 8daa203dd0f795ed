"""Command-line interface: ``privplf {run,compare,validate,mc}``.

Exit codes: 0 success, 1 numerical failure, 2 input error, 3 non-convergence.
Failures print one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
import time
import warnings
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .apc import ApcConfig
from .consensus import load_graph, validate_graph
from .errors import (
    CaseSyntaxError,
    ConvergenceError,
    InputError,
    PlfError,
    ProtocolError,
)
from .gmm import Gmm, load_gmm, read_samples
from .network import assemble_dlpf, load_case, partition_system
from .oracle import (
    ComparisonReport,
    apc_relative_error,
    centralized_b,
    centralized_plf,
    compare,
    mc_dlpf,
)
from .protocol import (
    DEFAULT_POWER_FACTOR,
    PlfConfig,
    RegionalOutput,
    injection_from_samples,
    run_distributed_plf,
)

logger = logging.getLogger("privplf")

EXIT_OK, EXIT_NUMERIC, EXIT_INPUT, EXIT_CONVERGENCE = 0, 1, 2, 3


@dataclass
class RunConfig:
    case: str | None = None
    graph: str | None = None
    gmm: str | None = None
    samples: str | None = None
    k: int = 3
    power_factor: float = DEFAULT_POWER_FACTOR
    seed: int = 0
    rho: float = 1.0
    sigma: float = 0.5
    apc_tol: float = 1e-9
    inner_tol: float = 1e-13
    max_iters: int = 5000
    distributed_stop: bool = False
    out: str | None = None
    mc: int = 0
    jsd_samples: int = 200_000

    def check(self) -> None:
        for name in ("apc_tol", "inner_tol"):
            if not getattr(self, name) > 0:
                raise InputError(f"{name} must be positive")
        if not 0 <= self.sigma < 1:
            raise InputError("sigma must lie in [0, 1)")
        if self.rho < 0:
            raise InputError("rho must be nonnegative")
        if self.k < 1 or self.max_iters < 1:
            raise InputError("k and max_iters must be positive")


def _resolve(args: argparse.Namespace) -> RunConfig:
    """Defaults, then the config file, then explicit flags."""
    values: dict[str, Any] = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.is_file():
            raise InputError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise CaseSyntaxError(f"invalid config JSON: {exc.msg}", exc.lineno, exc.colno) from None
        known = {f.name for f in fields(RunConfig)}
        bad = set(loaded) - known
        if bad:
            raise InputError(f"unknown config keys {sorted(bad)}")
        base = path.parent
        for key in ("case", "graph", "gmm", "samples"):
            if loaded.get(key) is not None and not Path(loaded[key]).is_absolute():
                loaded[key] = str(base / loaded[key])
        values.update(loaded)
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    cfg = RunConfig(**values)
    cfg.check()
    return cfg


def _require(path: str | None, what: str) -> Path:
    if path is None:
        raise InputError(f"no {what} given")
    p = Path(path)
    if not p.is_file():
        raise InputError(f"{what} not found: {p}")
    return p


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


class _Output:
    """Writes files under ``--out`` and keeps the manifest."""

    def __init__(self, out: str | None):
        if out is None:
            raise InputError("no output directory given (--out)")
        self.root = Path(out)
        self.root.mkdir(parents=True, exist_ok=True)
        self.files: dict[str, str] = {}

    def write(self, name: str, text: str) -> None:
        data = text.encode("utf-8")
        (self.root / name).write_bytes(data)
        self.files[name] = hashlib.sha256(data).hexdigest()

    def finish(self) -> None:
        manifest = {"files": [{"name": n, "sha256": h} for n, h in sorted(self.files.items())]}
        (self.root / "manifest.json").write_text(_dump(manifest))


def _load_model(cfg: RunConfig):
    net = load_case(_require(cfg.case, "case file"))
    sys_ = assemble_dlpf(net)
    part = partition_system(sys_, net)
    return net, sys_, part


def _injection(cfg: RunConfig, m: int) -> tuple[Gmm, np.ndarray | None]:
    if cfg.gmm is not None:
        g = load_gmm(_require(cfg.gmm, "gmm file"))
        obs = None
        if cfg.samples is not None:
            _, x = read_samples(_require(cfg.samples, "samples file"))
            obs = x if x.shape[1] == 2 * m else None
        return g, obs
    _, x = read_samples(_require(cfg.samples, "samples file"))
    return injection_from_samples(x, m, cfg.k, cfg.seed, cfg.power_factor)


def cmd_run(args) -> int:
    cfg = _resolve(args)
    out = _Output(cfg.out)
    t0 = time.perf_counter()
    net, sys_, part = _load_model(cfg)
    graph = load_graph(_require(cfg.graph, "graph file"))
    injection, obs = _injection(cfg, sys_.m)
    plf_cfg = PlfConfig(
        rho=cfg.rho,
        sigma=cfg.sigma,
        seed=cfg.seed,
        apc=ApcConfig(
            tol=cfg.apc_tol,
            max_iters=cfg.max_iters,
            inner_tol=cfg.inner_tol,
            distributed_stop=cfg.distributed_stop,
        ),
    )
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        run = run_distributed_plf(net, sys_, part, graph, injection, plf_cfg, observations=obs)
    elapsed = time.perf_counter() - t0

    # verification only: the simulator can see every agent
    x_direct = np.linalg.solve(sys_.a_matrix, centralized_b(sys_, run.plan, [a.secret for a in run.agents]))
    apc_err = [apc_relative_error(x, x_direct) for x in run.apc.estimates()]

    for o in run.outputs:
        out.write(f"region_{o.region:02d}.json", _dump(o.to_dict()))
    out.write("injection.json", _dump(injection.to_dict()))
    diagnostics = {
        "h": part.h,
        "n": sys_.n,
        "m": sys_.m,
        "m_hat": run.plan.m_hat,
        "plan": run.plan.to_dict(),
        "apc_iters": run.apc.iterations,
        "aac_rounds": run.aac_rounds,
        "apc_rel_error": apc_err,
        "messages": run.bus.audit(),
        "warnings": sorted({str(w.message) for w in caught}),
    }
    if args.timings:
        diagnostics["runtime_s"] = elapsed
    out.write("diagnostics.json", _dump(diagnostics))
    # the output location is left out so results are byte-identical wherever they land
    resolved = {k: v for k, v in vars(cfg).items() if k != "out"}
    for key in ("case", "graph", "gmm", "samples"):
        if resolved[key] is not None:
            resolved[key] = str(Path(resolved[key]).resolve())
    out.write("run.json", _dump(resolved))
    out.finish()
    for w in caught:
        logger.warning("%s", w.message)
    logger.info("wrote %d regional outputs to %s", len(run.outputs), out.root)
    return EXIT_OK


def _read_run(run_dir: str) -> tuple[dict, Gmm, list[RegionalOutput], dict]:
    root = Path(run_dir)
    if not (root / "run.json").is_file():
        raise InputError(f"not a run directory (missing run.json): {root}")
    try:
        cfg = json.loads((root / "run.json").read_text())
        injection = Gmm.from_dict(json.loads((root / "injection.json").read_text()))
        diag = json.loads((root / "diagnostics.json").read_text())
    except FileNotFoundError as exc:
        raise InputError(f"missing run artifact: {exc.filename}") from None
    outputs = []
    for r in range(1, int(diag["h"]) + 1):
        path = root / f"region_{r:02d}.json"
        if not path.is_file():
            raise InputError(f"missing run artifact: {path}")
        outputs.append(RegionalOutput.from_dict(json.loads(path.read_text())))
    return cfg, injection, outputs, diag


def cmd_compare(args) -> int:
    t0 = time.perf_counter()
    cfg, injection, outputs, diag = _read_run(args.run)
    out = _Output(args.out)
    net = load_case(_require(cfg["case"], "case file"))
    sys_ = assemble_dlpf(net)
    part = partition_system(sys_, net)
    dist = [o.gmm for o in outputs]
    if args.against:
        _, _, ref_outputs, _ = _read_run(args.against)
        ref = [o.gmm for o in ref_outputs]
    else:
        ref = [centralized_plf(sys_, injection, o.theta_indices) for o in outputs]
    seed = args.seed if args.seed is not None else int(cfg.get("seed", 0))
    mc = mc_dlpf(sys_, injection, args.mc, seed) if args.mc else None
    jsd_n = args.jsd_samples or int(cfg.get("jsd_samples", 200_000))
    report = compare(
        net, sys_, part, dist, ref, mc, jsd_samples=jsd_n, seed=seed,
        apc_errors=diag.get("apc_rel_error", []),
    )
    if args.timings:
        report.runtimes["compare_s"] = time.perf_counter() - t0
    out.write("report.json", report.to_json() + "\n")
    out.write("jsd.csv", report.jsd_csv())
    out.write("apc_error.csv", report.apc_csv())
    if mc is not None:
        out.write("mean_error.csv", report.mean_error_csv())
    out.finish()
    for r in report.regions:
        line = " ".join(
            f"{q}:avg={s['avg']:.3e},max={s['max']:.3e}" for q, s in r.jsd.items() if s["count"]
        )
        print(f"region {r.region}: {line}")
    return EXIT_OK


def cmd_mc(args) -> int:
    cfg = _resolve(args)
    if not cfg.mc:
        raise InputError("mc needs --n")
    out = _Output(cfg.out)
    _, sys_, _ = _load_model(cfg)
    injection, _ = _injection(cfg, sys_.m)
    res = mc_dlpf(sys_, injection, cfg.mc, cfg.seed, histograms=True)
    payload = res.to_dict()
    payload["states"] = [f"{q}@{b}" for b, q in sys_.state_order]
    out.write("mc.json", _dump(payload))
    out.finish()
    return EXIT_OK


def cmd_validate(args) -> int:
    if not args.case and not args.graph:
        raise InputError("validate needs --case and/or --graph")
    findings = []
    if args.case:
        net = load_case(_require(args.case, "case file"))
        sys_ = assemble_dlpf(net)
        part = partition_system(sys_, net)
        findings.append(
            f"case: {len(net.buses)} buses, {len(net.branches)} branches, "
            f"{sys_.m} uncertain buses, {part.h} regions, cond(A)={sys_.condition:.3e}"
        )
    if args.graph:
        graph = load_graph(_require(args.graph, "graph file"))
        report = validate_graph(graph)
        if not report.connected:
            raise InputError("graph is not connected")
        if not report.ok:
            findings.extend(f"warning: {line}" for line in report.lines())
    if not any(f.startswith("warning") for f in findings):
        findings.append("ok")
    print("\n".join(findings))
    return EXIT_OK


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON file with run settings (flags override it)")
    p.add_argument("--case", help="case JSON")
    p.add_argument("--gmm", help="injection mixture JSON over [P_W, Q_W]")
    p.add_argument("--samples", help="CSV of historical W-bus injections")
    p.add_argument("--k", type=int, help="mixture components when fitting --samples")
    p.add_argument("--power-factor", type=float, dest="power_factor")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="privplf", description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=None, help="master seed")
    ap.add_argument("-v", "--verbose", action="count", default=0)
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the distributed PLF simulation")
    _add_run_flags(run)
    run.add_argument("--graph", help="ISO communication graph JSON")
    run.add_argument("--rho", type=float, help="initial noise amplitude")
    run.add_argument("--sigma", "--sigma-decay", type=float, dest="sigma", help="noise decay factor in [0, 1)")
    run.add_argument("--apc-tol", type=float, dest="apc_tol")
    run.add_argument("--inner-tol", "--inner-aac-tol", type=float, dest="inner_tol")
    run.add_argument("--max-iters", "--apc-max-iters", type=int, dest="max_iters")
    run.add_argument("--distributed-stop", action="store_true", default=None, dest="distributed_stop")
    run.add_argument("--timings", action="store_true", help="record wall-clock time")
    run.set_defaults(func=cmd_run)

    cmp_ = sub.add_parser("compare", help="compare a run against oracles")
    cmp_.add_argument("--run", required=True, help="run output directory")
    cmp_.add_argument("--against", help="second run directory (instead of the centralized oracle)")
    cmp_.add_argument("--mc", type=int, default=0, help="Monte Carlo scenarios")
    cmp_.add_argument("--jsd-samples", type=int, default=None, dest="jsd_samples")
    cmp_.add_argument("--out", required=True)
    cmp_.add_argument("--timings", action="store_true")
    cmp_.set_defaults(func=cmd_compare)

    val = sub.add_parser("validate", help="check a case and/or graph file")
    val.add_argument("--case")
    val.add_argument("--graph")
    val.set_defaults(func=cmd_validate)

    mc = sub.add_parser("mc", help="DLPF Monte Carlo moments and histograms")
    _add_run_flags(mc)
    mc.add_argument("--n", type=int, dest="mc", help="number of scenarios")
    mc.set_defaults(func=cmd_mc)
    return ap


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, ProtocolError):
        return _exit_code(exc.cause)
    if isinstance(exc, ConvergenceError):
        return EXIT_CONVERGENCE
    if isinstance(exc, InputError):
        return EXIT_INPUT
    return EXIT_NUMERIC


def _error_payload(exc: BaseException) -> dict:
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": _exit_code(exc)}
    if isinstance(exc, ProtocolError):
        payload["step"] = exc.step
        payload["cause"] = type(exc.cause).__name__
    if isinstance(exc, CaseSyntaxError):
        payload["line"], payload["column"] = exc.line, exc.column
    residuals = getattr(exc, "residuals", None)
    if residuals:
        payload["residuals"] = {str(k): v for k, v in residuals.items()}
    return payload


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * min(args.verbose, 2),
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except PlfError as exc:
        print(json.dumps(_error_payload(exc)), file=sys.stderr)
        return _exit_code(exc)
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": 1}), file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
