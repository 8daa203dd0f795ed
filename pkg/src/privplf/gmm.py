"""Gaussian mixture models: EM fitting, affine propagation, sampling and JSD."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import logsumexp, ndtr

from .errors import ConvergenceError, InputError

logger = logging.getLogger(__name__)

COV_FLOOR = 1e-10
_EIG_TOL = 1e-10
_LN2 = math.log(2.0)


def _symmetrize(cov: np.ndarray) -> np.ndarray:
    return 0.5 * (cov + np.swapaxes(cov, -1, -2))


@dataclass(frozen=True, eq=False)
class Gmm:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        mu = np.asarray(self.means, dtype=float)
        if mu.ndim == 1:
            mu = mu.reshape(len(w), -1)
        cov = np.asarray(self.covariances, dtype=float)
        k, d = mu.shape
        if cov.shape != (k, d, d) or len(w) != k:
            raise InputError(
                f"inconsistent mixture shapes: weights {w.shape}, means {mu.shape}, "
                f"covariances {cov.shape}"
            )
        if k == 0:
            raise InputError("mixture needs at least one component")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise InputError(f"weights must be nonnegative and sum to 1 (sum={w.sum()!r})")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(cov))):
            raise InputError("non-finite mixture parameters")
        cov = _symmetrize(cov)
        scale = max(1.0, float(np.abs(cov).max()))
        for c in cov:
            if np.linalg.eigvalsh(c)[0] < -_EIG_TOL * scale:
                raise InputError("covariance is not positive semidefinite")
        for arr in (w, mu, cov):
            arr.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "covariances", cov)

    @property
    def k(self) -> int:
        return len(self.weights)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def covariance(self) -> np.ndarray:
        """Covariance of the whole mixture (law of total covariance)."""
        mu = self.mean()
        diff = self.means - mu
        return np.einsum("k,kij->ij", self.weights, self.covariances) + np.einsum(
            "k,ki,kj->ij", self.weights, diff, diff
        )

    def to_dict(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Gmm":
        extra = set(data) - {"weights", "means", "covariances"}
        if extra:
            raise InputError(f"unknown GMM keys {sorted(extra)}")
        try:
            return cls(
                np.array(data["weights"], dtype=float),
                np.array(data["means"], dtype=float),
                np.array(data["covariances"], dtype=float),
            )
        except KeyError as exc:
            raise InputError(f"GMM is missing key {exc}") from None

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_json(cls, text: str) -> "Gmm":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise InputError(f"invalid GMM JSON at line {exc.lineno}: {exc.msg}") from None

    def allclose(self, other: "Gmm", rtol: float = 0.0, atol: float = 0.0) -> bool:
        return (
            self.k == other.k
            and self.dim == other.dim
            and np.array_equal(self.weights, other.weights)
            and np.allclose(self.means, other.means, rtol=rtol, atol=atol)
            and np.allclose(self.covariances, other.covariances, rtol=rtol, atol=atol)
        )


@dataclass(frozen=True, eq=False)
class AffineMap:
    """``z -> matrix @ z + offset``."""

    matrix: np.ndarray
    offset: np.ndarray

    def __post_init__(self):
        mat = np.atleast_2d(np.asarray(self.matrix, dtype=float))
        off = np.asarray(self.offset, dtype=float).reshape(-1)
        if off.shape[0] != mat.shape[0]:
            raise InputError(f"offset length {off.shape[0]} != matrix rows {mat.shape[0]}")
        if not (np.all(np.isfinite(mat)) and np.all(np.isfinite(off))):
            raise InputError("affine map has non-finite entries")
        object.__setattr__(self, "matrix", mat)
        object.__setattr__(self, "offset", off)

    def compose(self, inner: "AffineMap") -> "AffineMap":
        """``self o inner``."""
        return AffineMap(self.matrix @ inner.matrix, self.matrix @ inner.offset + self.offset)

    def __call__(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z) @ self.matrix.T + self.offset


def transform(g: Gmm, amap: AffineMap) -> Gmm:
    """Push a mixture through an affine map; weights are carried over unchanged."""
    if amap.matrix.shape[1] != g.dim:
        raise InputError(f"map expects dimension {amap.matrix.shape[1]}, mixture has {g.dim}")
    m = amap.matrix
    means = g.means @ m.T + amap.offset
    covs = _symmetrize(np.einsum("ij,kjl,ml->kim", m, g.covariances, m))
    return Gmm(g.weights, means, covs)


def marginal(g: Gmm, dims: Sequence[int]) -> Gmm:
    dims = np.asarray(dims, dtype=int).reshape(-1)
    if dims.size and (dims.min() < 0 or dims.max() >= g.dim):
        raise InputError(f"marginal dimensions {dims.tolist()} out of range for D={g.dim}")
    return Gmm(g.weights, g.means[:, dims], g.covariances[:, dims][:, :, dims])


def _factor(cov: np.ndarray) -> np.ndarray:
    """Square-root factor ``L`` with ``L L^T = cov`` that tolerates PSD input."""
    vals, vecs = np.linalg.eigh(cov)
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def sample(g: Gmm, n: int, seed: int | np.random.Generator | None = 0) -> np.ndarray:
    """Draw ``n`` rows: component by weight, then a Gaussian draw."""
    rng = np.random.default_rng(seed)
    comp = rng.choice(g.k, size=n, p=g.weights)
    z = rng.standard_normal((n, g.dim))
    out = np.empty((n, g.dim))
    for k in range(g.k):
        sel = comp == k
        if sel.any():
            out[sel] = g.means[k] + z[sel] @ _factor(g.covariances[k]).T
    return out


def _component_logpdf(x: np.ndarray, mean: np.ndarray, cov: np.ndarray) -> np.ndarray:
    d = mean.shape[0]
    vals, vecs = np.linalg.eigh(cov)
    vals = np.clip(vals, COV_FLOOR, None)
    proj = (x - mean) @ vecs
    maha = np.sum(proj**2 / vals, axis=1)
    return -0.5 * (maha + np.sum(np.log(vals)) + d * math.log(2 * math.pi))


def logpdf(g: Gmm, points: np.ndarray) -> np.ndarray:
    """Log density at each row of ``points``.

    Eigenvalues below the covariance floor are lifted to it, so degenerate
    components evaluate as very narrow Gaussians instead of failing.
    """
    x = np.atleast_2d(np.asarray(points, dtype=float))
    if x.shape[1] != g.dim:
        x = x.reshape(-1, g.dim)
    with np.errstate(divide="ignore"):
        logw = np.log(g.weights)
    comps = np.stack(
        [_component_logpdf(x, g.means[k], g.covariances[k]) for k in range(g.k)], axis=1
    )
    return logsumexp(comps + logw, axis=1)


def pdf(g: Gmm, point) -> float | np.ndarray:
    x = np.asarray(point, dtype=float)
    vals = np.exp(logpdf(g, x))
    return float(vals[0]) if x.ndim <= 1 else vals


def cdf_1d(g: Gmm, dim: int, value: float) -> float:
    if not 0 <= dim < g.dim:
        raise InputError(f"dimension {dim} out of range for D={g.dim}")
    mu = g.means[:, dim]
    sd = np.sqrt(np.clip(g.covariances[:, dim, dim], 0.0, None))
    total = 0.0
    for w, m, s in zip(g.weights, mu, sd):
        if s == 0.0:
            total += w * (1.0 if value >= m else 0.0)
        else:
            total += w * ndtr((value - m) / s)
    return float(min(max(total, 0.0), 1.0))


@dataclass(frozen=True)
class JsdEstimate:
    value: float
    stderr: float

    def __float__(self) -> float:
        return self.value


def _half_log2_ratio(d: np.ndarray) -> np.ndarray:
    """``log2(p / ((p + q) / 2))`` written in terms of ``d = ln q - ln p``.

    Exactly zero when ``d == 0`` so identical mixtures give an exact zero.
    """
    small = np.abs(d) < 1.0
    out = np.empty_like(d)
    out[small] = -np.log1p(np.expm1(d[small]) / 2.0)
    out[~small] = _LN2 - np.logaddexp(0.0, d[~small])
    return out / _LN2


def jsd(
    g1: Gmm,
    g2: Gmm,
    n: int = 200_000,
    seed: int = 0,
    samples: tuple[np.ndarray, np.ndarray] | None = None,
) -> JsdEstimate:
    """Monte Carlo Jensen-Shannon divergence in bits, clamped to ``[0, 1]``.

    ``samples`` may supply the two draw sets (from ``g1`` and ``g2``) so that
    callers can share one sample plan across symmetric evaluations.
    """
    if g1.dim != g2.dim:
        raise InputError(f"dimension mismatch: {g1.dim} vs {g2.dim}")
    if samples is None:
        ss = np.random.SeedSequence(seed).spawn(2)
        x1 = sample(g1, n, np.random.default_rng(ss[0]))
        x2 = sample(g2, n, np.random.default_rng(ss[1]))
    else:
        x1, x2 = samples
    t1 = _half_log2_ratio(logpdf(g2, x1) - logpdf(g1, x1))
    t2 = _half_log2_ratio(logpdf(g1, x2) - logpdf(g2, x2))
    value = 0.5 * (t1.mean() + t2.mean())
    se = 0.5 * math.sqrt(t1.var() / len(t1) + t2.var() / len(t2))
    return JsdEstimate(float(min(max(value, 0.0), 1.0)), float(se))


def _kmeans_pp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [x[rng.integers(len(x))]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.integers(len(x)) if total <= 0 else rng.choice(len(x), p=d2 / total)
        centers.append(x[idx])
        d2 = np.minimum(d2, np.sum((x - x[idx]) ** 2, axis=1))
    return np.array(centers)


def _em_once(x, k, rng, max_iter, rel_tol):
    n, d = x.shape
    centers = _kmeans_pp(x, k, rng)
    assign = np.argmin(((x[:, None, :] - centers[None]) ** 2).sum(-1), axis=1)
    resp = np.zeros((n, k))
    resp[np.arange(n), assign] = 1.0
    history = []
    for _ in range(max_iter):
        nk = resp.sum(axis=0)
        if np.any(nk < 1e-8 * n):
            return None, history
        weights = nk / n
        means = (resp.T @ x) / nk[:, None]
        covs = np.empty((k, d, d))
        for j in range(k):
            diff = x - means[j]
            covs[j] = (resp[:, j, None] * diff).T @ diff / nk[j] + COV_FLOOR * np.eye(d)
        weights = weights / weights.sum()
        g = Gmm(weights, means, _symmetrize(covs))
        comp = np.stack([_component_logpdf(x, means[j], covs[j]) for j in range(k)], axis=1)
        comp += np.log(weights)
        ll_point = logsumexp(comp, axis=1)
        ll = float(ll_point.sum())
        history.append(ll)
        resp = np.exp(comp - ll_point[:, None])
        if len(history) > 1 and abs(history[-1] - history[-2]) <= rel_tol * abs(history[-2]):
            break
    return g, history


def fit_em(
    samples: np.ndarray,
    k: int,
    seed: int = 0,
    *,
    max_iter: int = 500,
    rel_tol: float = 1e-8,
    max_restarts: int = 5,
    return_trace: bool = False,
):
    """Fit a ``k``-component mixture by EM with k-means++ seeding.

    A component whose responsibility mass collapses triggers a restart with a
    fresh seed.  With ``return_trace`` the per-iteration log-likelihoods are
    returned alongside the model.
    """
    x = np.asarray(samples, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    if k < 1:
        raise InputError("component count must be at least 1")
    if x.shape[1] < 1 or x.shape[0] < 10 * k:
        raise InputError(f"need at least {10 * k} samples for k={k}, got {x.shape[0]}")
    for attempt in range(max_restarts + 1):
        rng = np.random.default_rng([seed, attempt])
        g, history = _em_once(x, k, rng, max_iter, rel_tol)
        if g is not None:
            return (g, history) if return_trace else g
        logger.warning("EM component collapsed (attempt %d), restarting", attempt + 1)
    raise ConvergenceError(f"EM degenerated in {max_restarts + 1} attempts")


def read_samples(path: str | Path) -> tuple[list[str], np.ndarray]:
    """Read a CSV with a header row and one observation per row."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise InputError(f"{path}: empty sample file") from None
        rows = []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError:
                raise InputError(f"{path}:{line}: non-numeric value") from None
            if len(rows[-1]) != len(header):
                raise InputError(f"{path}:{line}: expected {len(header)} columns")
    if not rows:
        raise InputError(f"{path}: no observations")
    return header, np.array(rows)


def load_gmm(path: str | Path) -> Gmm:
    return Gmm.from_json(Path(path).read_text(encoding="utf-8"))
