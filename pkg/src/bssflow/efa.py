"""Exploratory factor analysis of standardized station panels.

The pipeline is correlation -> parallel analysis -> MINRES extraction ->
varimax rotation -> canonical sign/order -> regression factor scores.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.optimize import minimize

from .panel import StandardizedPanel

logger = logging.getLogger(__name__)

#: Bounds on the uniqueness of each variable during MINRES.
PSI_BOUNDS = (1e-6, 1.0 - 1e-6)
PSD_TOLERANCE = 1e-8


class EfaError(ValueError):
    """Raised when an EFA stage receives unusable input."""


@dataclass(frozen=True)
class CorrelationMatrix:
    values: np.ndarray
    station_ids: tuple[str, ...]

    @property
    def size(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class ParallelAnalysisResult:
    data_eigenvalues: np.ndarray
    reference_eigenvalues: np.ndarray
    retained: int
    replicates: int
    quantile: float | None


@dataclass(frozen=True)
class MinresResult:
    loadings: np.ndarray
    uniqueness: np.ndarray
    objective: float
    n_iter: int
    converged: bool
    heywood: tuple[int, ...]
    history: tuple[float, ...]


@dataclass(frozen=True)
class VarimaxResult:
    loadings: np.ndarray
    rotation: np.ndarray
    criterion: float
    n_sweeps: int
    converged: bool
    history: tuple[float, ...]


@dataclass(frozen=True)
class EfaConfig:
    """Settings for :func:`run_efa`.

    ``n_factors`` forces the factor count and skips the retention decision
    (parallel analysis is still run for its eigenvalue curves).
    ``pa_quantile=None`` compares against mean reference eigenvalues.
    """

    n_factors: int | None = None
    pa_replicates: int = 100
    pa_quantile: float | None = 0.99
    seed: int = 0
    kaiser_normalize: bool = True
    minres_tol: float = 1e-12
    minres_max_iter: int = 5000
    varimax_tol: float = 1e-10
    varimax_max_iter: int = 1000
    ridge: float = 1e-8


@dataclass(frozen=True)
class EfaModel:
    station_ids: tuple[str, ...]
    bin_start: object
    loadings: np.ndarray
    uniqueness: np.ndarray
    rotation: np.ndarray
    scores: np.ndarray
    explained_variance: np.ndarray
    total_variance_share: float
    parallel: ParallelAnalysisResult
    minres: MinresResult | None
    varimax: VarimaxResult | None
    config: EfaConfig = field(default_factory=EfaConfig)

    @property
    def n_factors(self) -> int:
        return self.loadings.shape[1]

    @property
    def communality(self) -> np.ndarray:
        return np.sum(self.loadings**2, axis=1)


def correlation(panel: StandardizedPanel) -> CorrelationMatrix:
    """Pearson correlation of the retained columns of a standardized panel."""
    z = np.asarray(panel.values, dtype=float)
    q, p = z.shape
    if p < 2:
        raise EfaError(f"need at least 2 retained columns, got {p}")
    if q < 2:
        raise EfaError(f"need at least 2 rows, got {q}")
    r = z.T @ z / q
    r = 0.5 * (r + r.T)
    np.fill_diagonal(r, 1.0)
    return CorrelationMatrix(r, tuple(panel.station_ids))


def _corr_eigenvalues(x: np.ndarray) -> np.ndarray:
    x = x - x.mean(axis=0)
    x /= np.sqrt(np.sum(x**2, axis=0))
    return np.linalg.eigvalsh(x.T @ x)[::-1]


def retained_count(data_eigenvalues: np.ndarray, reference_eigenvalues: np.ndarray) -> int:
    """Largest r such that the first r data eigenvalues all beat the reference."""
    above = np.asarray(data_eigenvalues) > np.asarray(reference_eigenvalues)
    if above.all():
        return above.size
    return int(np.argmin(above))


def parallel_analysis(
    panel: StandardizedPanel,
    replicates: int = 100,
    quantile: float | None = 0.99,
    seed: int = 0,
) -> ParallelAnalysisResult:
    """Horn's parallel analysis against independent standard-normal panels.

    Replicate ``i`` draws from a generator spawned from ``seed``, so results
    do not depend on evaluation order.
    """
    if replicates < 1:
        raise EfaError("replicates must be >= 1")
    if quantile is not None and not 0.0 < quantile <= 1.0:
        raise EfaError(f"quantile must lie in (0, 1], got {quantile}")
    q, p = panel.values.shape
    if p < 2 or q < 3:
        raise EfaError(f"panel too small for parallel analysis ({q}x{p})")

    data_eig = np.linalg.eigvalsh(correlation(panel).values)[::-1]
    children = np.random.SeedSequence(seed).spawn(replicates)
    ref = np.empty((replicates, p))
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        ref[i] = _corr_eigenvalues(rng.standard_normal((q, p)))
    if quantile is None:
        reference = ref.mean(axis=0)
    else:
        reference = np.quantile(ref, quantile, axis=0)
    return ParallelAnalysisResult(
        data_eigenvalues=data_eig,
        reference_eigenvalues=reference,
        retained=retained_count(data_eig, reference),
        replicates=replicates,
        quantile=quantile,
    )


def offdiagonal_residual(corr: np.ndarray, loadings: np.ndarray) -> float:
    """Sum over i != j of (corr_ij - (loadings @ loadings.T)_ij) ** 2."""
    resid = np.asarray(corr) - loadings @ loadings.T
    np.fill_diagonal(resid, 0.0)
    return float(np.sum(resid**2))


def _top_loadings(reduced: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    vals, vecs = np.linalg.eigh(reduced)
    vals, vecs = vals[::-1], vecs[:, ::-1]
    lam = vecs[:, :k] * np.sqrt(np.clip(vals[:k], 0.0, None))
    return lam, vals


def _minres_objective(psi: np.ndarray, r: np.ndarray, k: int) -> tuple[float, np.ndarray]:
    # min over loadings of ||R - diag(psi) - L L^T||_F^2, evaluated through the
    # spectrum of the reduced matrix; the gradient follows by the envelope theorem.
    vals, vecs = np.linalg.eigh(r - np.diag(psi))
    vals, vecs = vals[::-1], vecs[:, ::-1]
    dropped = vals.copy()
    dropped[:k] = np.minimum(vals[:k], 0.0)
    f = float(np.sum(dropped**2))
    grad = -2.0 * np.sum(vecs**2 * dropped, axis=1)
    return f, grad


def _initial_uniqueness(r: np.ndarray) -> np.ndarray:
    try:
        psi = 1.0 / np.diag(linalg.inv(r))
    except (linalg.LinAlgError, ValueError):
        psi = np.full(r.shape[0], 0.5)
    if not np.all(np.isfinite(psi)):
        psi = np.full(r.shape[0], 0.5)
    return np.clip(psi, *PSI_BOUNDS)


def minres_extract(
    corr: CorrelationMatrix | np.ndarray,
    n_factors: int,
    tol: float = 1e-12,
    max_iter: int = 5000,
) -> MinresResult:
    """Minimum-residual factor extraction.

    Minimizes the off-diagonal squared residual between ``corr`` and
    ``L @ L.T`` by a bounded quasi-Newton search over the uniquenesses, with
    the loadings for fixed uniquenesses given by the top eigenpairs of the
    reduced correlation matrix.

    Parameters
    ----------
    corr : CorrelationMatrix or ndarray
        Symmetric positive semidefinite correlation matrix.
    n_factors : int
        Number of factors, ``1 <= n_factors < p``.
    tol : float
        Convergence tolerance on the relative objective decrease.
    max_iter : int
        Iteration cap; hitting it flags the result as not converged.

    Returns
    -------
    MinresResult
        Unrotated loadings, uniquenesses and a convergence report. Variables
        whose uniqueness ends on the lower bound are listed as Heywood cases.
    """
    r = np.asarray(corr.values if isinstance(corr, CorrelationMatrix) else corr, dtype=float)
    p = r.shape[0]
    if r.ndim != 2 or r.shape != (p, p):
        raise EfaError("correlation matrix must be square")
    if not 1 <= n_factors < p:
        raise EfaError(f"n_factors must satisfy 1 <= K < p={p}, got {n_factors}")
    if not np.allclose(r, r.T, atol=1e-10):
        raise EfaError("correlation matrix is not symmetric")
    min_eig = np.linalg.eigvalsh(r)[0]
    if min_eig < -PSD_TOLERANCE:
        raise EfaError(f"correlation matrix is not positive semidefinite (min eigenvalue {min_eig:.3e})")

    psi0 = _initial_uniqueness(r)
    history = [_minres_objective(psi0, r, n_factors)[0]]

    def record(xk):
        history.append(_minres_objective(xk, r, n_factors)[0])

    res = minimize(
        _minres_objective,
        psi0,
        args=(r, n_factors),
        jac=True,
        method="L-BFGS-B",
        bounds=[PSI_BOUNDS] * p,
        callback=record,
        options={"maxiter": max_iter, "ftol": tol * np.finfo(float).eps ** 0.5,
                 "gtol": tol, "maxcor": 20},
    )
    psi = np.clip(res.x, *PSI_BOUNDS)
    loadings, _ = _top_loadings(r - np.diag(psi), n_factors)
    communality = np.sum(loadings**2, axis=1)
    uniqueness = np.clip(1.0 - communality, 0.0, 1.0)
    heywood = tuple(int(i) for i in np.flatnonzero(psi <= PSI_BOUNDS[0] * (1 + 1e-6)))
    if heywood:
        logger.warning("MINRES: %d Heywood case(s) at variables %s", len(heywood), heywood)

    converged = bool(res.success)
    if len(history) >= 2 and not converged:
        prev, last = history[-2], history[-1]
        converged = abs(prev - last) <= tol * max(abs(prev), np.finfo(float).tiny)
    if not converged:
        logger.warning("MINRES did not converge in %d iterations: %s", res.nit, res.message)
    return MinresResult(
        loadings=loadings,
        uniqueness=uniqueness,
        objective=offdiagonal_residual(r, loadings),
        n_iter=int(res.nit),
        converged=converged,
        heywood=heywood,
        history=tuple(history),
    )


def varimax_criterion(loadings: np.ndarray, kaiser_normalize: bool = False) -> float:
    """Sum over factors of the variance of the squared loadings."""
    a = _kaiser_rows(loadings)[0] if kaiser_normalize else np.asarray(loadings)
    sq = a**2
    return float(np.sum(np.mean(sq**2, axis=0) - np.mean(sq, axis=0) ** 2))


def _kaiser_rows(loadings: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    h = np.sqrt(np.sum(loadings**2, axis=1))
    scale = np.where(h > 0, h, 1.0)
    return loadings / scale[:, None], scale


def varimax(
    loadings: np.ndarray,
    kaiser_normalize: bool = True,
    tol: float = 1e-10,
    max_iter: int = 1000,
) -> VarimaxResult:
    """Orthogonal varimax rotation by pairwise planar (Kaiser) rotations.

    Each planar step is the exact maximizer of the criterion for its pair of
    columns, so the criterion never decreases from one sweep to the next.
    Sweeps stop once the criterion gains less than ``tol``.
    """
    a = np.array(loadings, dtype=float)
    p, k = a.shape
    rotation = np.eye(k)
    if kaiser_normalize:
        a, scale = _kaiser_rows(a)
    else:
        scale = np.ones(p)

    crit = varimax_criterion(a)
    history = [crit]
    converged = k < 2
    sweeps = 0
    while not converged and sweeps < max_iter:
        sweeps += 1
        for i in range(k - 1):
            for j in range(i + 1, k):
                x, y = a[:, i], a[:, j]
                u = x**2 - y**2
                v = 2.0 * x * y
                num = 2.0 * (np.dot(u, v) - u.sum() * v.sum() / p)
                den = np.dot(u, u) - np.dot(v, v) - (u.sum() ** 2 - v.sum() ** 2) / p
                phi = 0.25 * np.arctan2(num, den)
                c, s = np.cos(phi), np.sin(phi)
                plane = np.array([[c, -s], [s, c]])
                a[:, [i, j]] = a[:, [i, j]] @ plane
                rotation[:, [i, j]] = rotation[:, [i, j]] @ plane
        new = varimax_criterion(a)
        history.append(new)
        converged = abs(new - crit) < tol
        crit = new

    rotated = a * scale[:, None]
    return VarimaxResult(
        loadings=rotated,
        rotation=rotation,
        criterion=varimax_criterion(rotated, kaiser_normalize),
        n_sweeps=sweeps,
        converged=converged,
        history=tuple(history),
    )


def canonicalize(loadings: np.ndarray, rotation: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Flip columns to non-negative sums and sort by explained variance.

    The same column operations are applied to ``rotation`` so the rotated
    loadings remain ``unrotated @ rotation``.
    """
    signs = np.where(loadings.sum(axis=0) < 0, -1.0, 1.0)
    lam = loadings * signs
    rot = rotation * signs
    order = np.argsort(-np.sum(lam**2, axis=0), kind="stable")
    return lam[:, order], rot[:, order]


def factor_scores(
    panel: StandardizedPanel,
    corr: CorrelationMatrix | np.ndarray,
    loadings: np.ndarray,
    ridge: float = 1e-8,
) -> np.ndarray:
    """Regression (Thurstone) factor scores, standardized per column."""
    r = np.asarray(corr.values if isinstance(corr, CorrelationMatrix) else corr, dtype=float)
    lam = np.asarray(loadings, dtype=float)
    try:
        cho = linalg.cho_factor(r)
        if np.min(np.diag(cho[0])) ** 2 < 1e-12 * np.max(np.diag(r)):
            raise linalg.LinAlgError("near-singular correlation matrix")
        weights = linalg.cho_solve(cho, lam)
    except linalg.LinAlgError:
        warnings.warn(
            f"singular correlation matrix; using ridge-regularized solve (ridge={ridge:g})",
            RuntimeWarning,
            stacklevel=2,
        )
        weights = linalg.solve(r + ridge * np.eye(r.shape[0]), lam, assume_a="pos")
    scores = np.asarray(panel.values, dtype=float) @ weights
    scores -= scores.mean(axis=0)
    std = scores.std(axis=0)
    if np.any(std == 0):
        raise EfaError("a factor score column has zero variance")
    return scores / std


def run_efa(panel: StandardizedPanel, config: EfaConfig | None = None) -> EfaModel:
    """Run the full EFA pipeline on a standardized panel."""
    config = config or EfaConfig()
    corr = correlation(panel)
    p = corr.size
    pa = parallel_analysis(panel, config.pa_replicates, config.pa_quantile, config.seed)
    k = pa.retained if config.n_factors is None else int(config.n_factors)
    if k < 0 or k >= p:
        raise EfaError(f"cannot extract {k} factors from {p} variables")
    logger.info("EFA: p=%d, q=%d, retaining K=%d", p, panel.values.shape[0], k)

    if k == 0:
        q = panel.values.shape[0]
        return EfaModel(
            station_ids=corr.station_ids, bin_start=panel.bin_start,
            loadings=np.zeros((p, 0)), uniqueness=np.ones(p), rotation=np.zeros((0, 0)),
            scores=np.zeros((q, 0)), explained_variance=np.zeros(0), total_variance_share=0.0,
            parallel=pa, minres=None, varimax=None, config=config,
        )

    extracted = minres_extract(corr, k, config.minres_tol, config.minres_max_iter)
    rotated = varimax(extracted.loadings, config.kaiser_normalize,
                      config.varimax_tol, config.varimax_max_iter)
    loadings, rotation = canonicalize(rotated.loadings, rotated.rotation)
    explained = np.sum(loadings**2, axis=0)
    scores = factor_scores(panel, corr, loadings, config.ridge)
    return EfaModel(
        station_ids=corr.station_ids,
        bin_start=panel.bin_start,
        loadings=loadings,
        uniqueness=extracted.uniqueness,
        rotation=rotation,
        scores=scores,
        explained_variance=explained,
        total_variance_share=float(explained.sum() / p),
        parallel=pa,
        minres=extracted,
        varimax=rotated,
        config=config,
    )
