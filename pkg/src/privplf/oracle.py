"""Centralized ground truth and the metrics used to judge the distributed method."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg

from .errors import InputError, SingularSystemError
from .gmm import AffineMap, Gmm, JsdEstimate, jsd, marginal, sample, transform
from .network import DlpfSystem, PowerNetwork, RegionPartition, region_flow_map, state_kinds

QUANTITIES = ("voltage", "angle", "flow")


def centralized_lambda(sys: DlpfSystem) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``(alpha, beta, gamma)`` from a direct inverse of ``A``."""
    try:
        lu = scipy.linalg.lu_factor(sys.a_matrix, check_finite=True)
    except (ValueError, np.linalg.LinAlgError) as exc:
        raise SingularSystemError(f"cannot factor A: {exc}", float("inf")) from exc
    a_inv = scipy.linalg.lu_solve(lu, np.eye(sys.n))
    gamma = scipy.linalg.lu_solve(lu, np.asarray(sys.rhs_base))
    return a_inv[:, sys.w_p_rows], a_inv[:, sys.w_q_rows], gamma


def centralized_plf(
    sys: DlpfSystem,
    injection: Gmm,
    region: Sequence[int] | None = None,
    state_offset: np.ndarray | None = None,
) -> Gmm:
    """Mixture of the states ``region`` (all states if ``None``) by direct inversion."""
    if injection.dim != 2 * sys.m:
        raise InputError(f"injection GMM has dimension {injection.dim}, expected {2 * sys.m}")
    alpha, beta, gamma = centralized_lambda(sys)
    if state_offset is not None:
        gamma = gamma + np.asarray(state_offset, dtype=float)
    rows = np.arange(sys.n) if region is None else np.asarray(region, dtype=int)
    amap = AffineMap(np.hstack([alpha[rows], beta[rows]]), gamma[rows])
    return transform(injection, amap)


def centralized_b(sys: DlpfSystem, plan, secrets) -> np.ndarray:
    """Full augmented right-hand side ``[b(1) ... b(M^)]`` built in one place."""
    obs = np.vstack([plan.pw_obs, plan.qw_obs])
    b = sys.rhs_base[:, None] + sys.injection_matrix() @ obs
    for i, s in enumerate(secrets):
        b[s.chosen_row] = plan.pl_obs[i]
    return b


@dataclass
class Histogram:
    counts: np.ndarray
    edges: np.ndarray

    def to_dict(self) -> dict:
        return {"counts": self.counts.tolist(), "edges": self.edges.tolist()}


@dataclass
class McResult:
    n: int
    seed: int
    mean: np.ndarray
    cov: np.ndarray
    histograms: list[Histogram] | None = None

    def std_error(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.cov), 0.0, None) / self.n)

    def to_dict(self) -> dict:
        out = {"n": self.n, "seed": self.seed, "mean": self.mean.tolist(), "cov": self.cov.tolist()}
        if self.histograms is not None:
            out["histograms"] = [h.to_dict() for h in self.histograms]
        return out


def mc_dlpf(
    sys: DlpfSystem,
    injection: Gmm,
    n: int,
    seed: int = 0,
    *,
    chunk: int = 20_000,
    histograms: bool = False,
    state_offset: np.ndarray | None = None,
) -> McResult:
    """DLPF Monte Carlo: sample injections, solve with one reused LU factorization."""
    if n < 1000:
        raise InputError("Monte Carlo needs at least 1000 scenarios")
    if injection.dim != 2 * sys.m:
        raise InputError(f"injection GMM has dimension {injection.dim}, expected {2 * sys.m}")
    lu = scipy.linalg.lu_factor(sys.a_matrix)
    e = sys.injection_matrix()
    base = np.asarray(sys.rhs_base)
    offset = 0.0 if state_offset is None else np.asarray(state_offset, dtype=float)
    rng = np.random.default_rng(seed)

    shift = None
    total = np.zeros(sys.n)
    cross = np.zeros((sys.n, sys.n))
    kept = [] if histograms else None
    done = 0
    while done < n:
        size = min(chunk, n - done)
        z = sample(injection, size, rng)
        x = scipy.linalg.lu_solve(lu, base[:, None] + e @ z.T).T + offset
        if shift is None:
            shift = x[0].copy()
        d = x - shift
        total += d.sum(axis=0)
        cross += d.T @ d
        if kept is not None:
            kept.append(x)
        done += size
    mean_d = total / n
    cov = (cross - n * np.outer(mean_d, mean_d)) / (n - 1)
    hists = None
    if kept is not None:
        states = np.vstack(kept)
        hists = []
        for col in states.T:
            if np.ptp(col) == 0:
                counts, edges = np.array([len(col)]), np.array([col[0], col[0]])
            else:
                counts, edges = np.histogram(col, bins="fd")
            hists.append(Histogram(counts, edges))
    return McResult(n=n, seed=seed, mean=shift + mean_d, cov=0.5 * (cov + cov.T), histograms=hists)


def relative_error(estimate, reference) -> np.ndarray:
    est, ref = np.asarray(estimate, dtype=float), np.asarray(reference, dtype=float)
    return np.abs(est - ref) / np.abs(ref)


def apc_relative_error(x_est: np.ndarray, x_ref: np.ndarray) -> float:
    """Average element-wise relative error of an APC estimate."""
    return float(np.mean(relative_error(x_est, x_ref)))


@dataclass
class RegionMetrics:
    region: int
    jsd: dict[str, dict[str, float]]
    mean_rel_error: dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"region": self.region, "jsd": self.jsd, "mean_rel_error": self.mean_rel_error}

    @classmethod
    def from_dict(cls, data: dict) -> "RegionMetrics":
        return cls(
            region=int(data["region"]),
            jsd={q: dict(v) for q, v in data["jsd"].items()},
            mean_rel_error=dict(data.get("mean_rel_error", {})),
        )


@dataclass
class ComparisonReport:
    regions: list[RegionMetrics]
    apc_rel_error: list[float] = field(default_factory=list)
    runtimes: dict[str, float] = field(default_factory=dict)
    jsd_samples: int = 0
    mc_scenarios: int = 0

    def __post_init__(self):
        for r in self.regions:
            for q, stats in r.jsd.items():
                for key in ("avg", "max"):
                    v = stats.get(key)
                    if v is not None and not (0.0 <= v <= 1.0):
                        raise ValueError(f"region {r.region} {q} JSD {key}={v} outside [0, 1]")
            if any(v < 0 for v in r.mean_rel_error.values()):
                raise ValueError(f"region {r.region}: negative relative error")
        if any(v < 0 for v in self.apc_rel_error):
            raise ValueError("negative APC relative error")

    def to_dict(self) -> dict:
        return {
            "regions": [r.to_dict() for r in self.regions],
            "apc_rel_error": list(self.apc_rel_error),
            "runtimes": dict(self.runtimes),
            "jsd_samples": self.jsd_samples,
            "mc_scenarios": self.mc_scenarios,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ComparisonReport":
        return cls(
            regions=[RegionMetrics.from_dict(r) for r in data["regions"]],
            apc_rel_error=[float(v) for v in data.get("apc_rel_error", [])],
            runtimes={k: float(v) for k, v in data.get("runtimes", {}).items()},
            jsd_samples=int(data.get("jsd_samples", 0)),
            mc_scenarios=int(data.get("mc_scenarios", 0)),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ComparisonReport":
        return cls.from_dict(json.loads(text))

    def jsd_csv(self) -> str:
        """One row per region: average and maximum JSD per quantity."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        header = ["region"]
        for q in QUANTITIES:
            header += [f"{q}_avg", f"{q}_max", f"{q}_max_stderr"]
        w.writerow(header)
        for r in self.regions:
            row = [r.region]
            for q in QUANTITIES:
                s = r.jsd.get(q, {})
                row += [repr(s.get("avg", "")), repr(s.get("max", "")), repr(s.get("max_stderr", ""))]
            w.writerow(row)
        return buf.getvalue()

    def mean_error_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["region", *QUANTITIES])
        for r in self.regions:
            w.writerow([r.region, *(repr(r.mean_rel_error.get(q, "")) for q in QUANTITIES)])
        return buf.getvalue()

    def apc_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["agent", "avg_relative_error"])
        for i, v in enumerate(self.apc_rel_error, start=1):
            w.writerow([i, repr(v)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, jsd_text: str, mean_text: str | None = None, apc_text: str | None = None):
        """Rebuild a report from the CSV tables (runtimes are not part of the tables)."""
        regions = {}
        for row in csv.DictReader(io.StringIO(jsd_text)):
            stats = {}
            for q in QUANTITIES:
                if row[f"{q}_avg"] != "":
                    stats[q] = {
                        "avg": float(row[f"{q}_avg"]),
                        "max": float(row[f"{q}_max"]),
                        "max_stderr": float(row[f"{q}_max_stderr"]),
                    }
            regions[int(row["region"])] = RegionMetrics(int(row["region"]), stats)
        if mean_text:
            for row in csv.DictReader(io.StringIO(mean_text)):
                regions[int(row["region"])].mean_rel_error = {
                    q: float(row[q]) for q in QUANTITIES if row[q] != ""
                }
        apc = []
        if apc_text:
            apc = [float(row["avg_relative_error"]) for row in csv.DictReader(io.StringIO(apc_text))]
        return cls(regions=[regions[k] for k in sorted(regions)], apc_rel_error=apc)


def _summarize(estimates: list[JsdEstimate]) -> dict[str, float]:
    if not estimates:
        return {"avg": 0.0, "max": 0.0, "max_stderr": 0.0, "count": 0}
    values = np.array([e.value for e in estimates])
    k = int(np.argmax(values))
    return {
        "avg": float(values.mean()),
        "max": float(values[k]),
        "max_stderr": float(estimates[k].stderr),
        "count": len(estimates),
    }


def _quantity_views(net, sys, partition, region):
    """Per quantity: affine map from the region's states to the 1-D quantities."""
    theta = partition.theta_sets[region - 1]
    kinds = state_kinds(sys, theta)
    eye = np.eye(len(theta))
    views = {}
    for q in ("voltage", "angle"):
        rows = np.flatnonzero(kinds == q)
        views[q] = AffineMap(eye[rows], np.zeros(len(rows)))
    f_mat, f0, _ = region_flow_map(net, sys, partition, region)
    views["flow"] = AffineMap(f_mat, f0)
    return views


def compare(
    net: PowerNetwork,
    sys: DlpfSystem,
    partition: RegionPartition,
    distributed: Sequence[Gmm],
    centralized: Sequence[Gmm],
    mc: McResult | None = None,
    *,
    jsd_samples: int = 200_000,
    seed: int = 0,
    apc_errors: Sequence[float] | None = None,
    runtimes: dict[str, float] | None = None,
) -> ComparisonReport:
    """Per-region 1-D marginal JSD and, with ``mc``, expected-value relative errors."""
    if len(distributed) != partition.h or len(centralized) != partition.h:
        raise InputError(f"expected {partition.h} regional mixtures on each side")
    regions = []
    for r in range(1, partition.h + 1):
        g_d, g_c = distributed[r - 1], centralized[r - 1]
        n_r = len(partition.theta_sets[r - 1])
        if g_d.dim != n_r or g_c.dim != n_r:
            raise InputError(f"region {r}: mixture dimension does not match its {n_r} states")
        views = _quantity_views(net, sys, partition, r)
        stats, errs = {}, {}
        for qi, q in enumerate(QUANTITIES):
            amap = views[q]
            td, tc = transform(g_d, amap), transform(g_c, amap)
            ests = []
            for j in range(amap.matrix.shape[0]):
                s = int(np.random.SeedSequence([seed, r, qi, j]).generate_state(1)[0])
                ests.append(jsd(marginal(td, [j]), marginal(tc, [j]), n=jsd_samples, seed=s))
            stats[q] = _summarize(ests)
            if mc is not None and amap.matrix.shape[0]:
                theta = partition.theta_sets[r - 1]
                ref = amap(mc.mean[theta])
                errs[q] = float(np.mean(relative_error(td.mean(), ref)))
        regions.append(RegionMetrics(r, stats, errs))
    return ComparisonReport(
        regions=regions,
        apc_rel_error=[float(v) for v in (apc_errors or [])],
        runtimes=dict(runtimes or {}),
        jsd_samples=jsd_samples,
        mc_scenarios=0 if mc is None else mc.n,
    )


def cdf_points(g: Gmm, dim: int, n_points: int = 201, span: float = 5.0) -> np.ndarray:
    """``(x, cdf, pdf)`` rows for plotting a 1-D marginal."""
    from .gmm import cdf_1d, pdf

    m = marginal(g, [dim])
    mu = float(m.mean()[0])
    sd = math.sqrt(max(float(m.covariance()[0, 0]), 0.0)) or 1e-6
    xs = np.linspace(mu - span * sd, mu + span * sd, n_points)
    cdf = np.array([cdf_1d(m, 0, x) for x in xs])
    dens = np.asarray(pdf(m, xs[:, None]))
    return np.column_stack([xs, cdf, dens])
