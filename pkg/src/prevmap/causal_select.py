"""Causal feature selection for the prevalence model.

The PC skeleton search, restricted to edges touching the response, finds the
features that stay dependent on prevalence under every tested conditioning
set.  Repeating it on bootstrap resamples gives each feature a certainty
score; thresholding the scores gives nested candidate sets, and the set with
the best cross-validated correlation wins.

Conditional independence is tested with random Fourier features: x, y and z
are lifted into Gaussian-kernel feature spaces, the x and y features are
residualised on the z features by ridge regression, and the squared residual
cross-covariance is compared with its weighted chi-square null.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from itertools import combinations
from typing import Callable, Sequence

import numpy as np
from scipy import stats
from scipy.spatial.distance import pdist

from .errors import TestUndefinedError, ValidationError

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLDS = tuple(round(0.1 * k, 1) for k in range(1, 10))


def _standardize(a: np.ndarray, what: str) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    sd = a.std(axis=0)
    if np.any(sd == 0):
        raise TestUndefinedError(f"{what} has a constant column")
    return (a - a.mean(axis=0)) / sd


def _fourier_features(a: np.ndarray, n_features: int, rng: np.random.Generator) -> np.ndarray:
    sub = a[:500]
    width = float(np.median(pdist(sub))) if sub.shape[0] > 1 else 1.0
    if not width > 0:
        width = 1.0
    W = rng.standard_normal((a.shape[1], n_features)) / width
    b = rng.uniform(0.0, 2.0 * np.pi, n_features)
    feats = np.sqrt(2.0) * np.cos(a @ W + b)
    feats = feats - feats.mean(axis=0)
    sd = feats.std(axis=0)
    return feats / np.where(sd > 0, sd, 1.0)


def _hbe_sf(weights: np.ndarray, stat: float) -> float:
    """Upper tail of sum_i w_i chi2_1 by three-cumulant matching."""
    k1 = weights.sum()
    k2 = 2.0 * np.sum(weights**2)
    k3 = 8.0 * np.sum(weights**3)
    if not (k2 > 0 and k3 > 0):
        return 1.0
    nu = 8.0 * k2**3 / k3**2
    q = (stat - k1) / np.sqrt(k2) * np.sqrt(2.0 * nu) + nu
    return float(np.clip(stats.chi2.sf(q, nu), 0.0, 1.0))


def rcit(x, y, z=None, n_features: int = 25, seed: int = 0, n_features_xy: int = 5) -> float:
    """p-value for x independent of y given z (unconditional when z is empty)."""
    x = _standardize(x, "x")
    y = _standardize(y, "y")
    n = x.shape[0]
    if y.shape[0] != n:
        raise ValidationError("x and y need the same number of samples")
    rng = np.random.Generator(np.random.PCG64(seed))
    fx = _fourier_features(x, n_features_xy, rng)
    fy = _fourier_features(y, n_features_xy, rng)
    if z is not None and np.size(z) > 0:
        z = np.asarray(z, dtype=np.float64)
        z = z[:, None] if z.ndim == 1 else z
        if z.shape[0] != n:
            raise ValidationError("z needs the same number of samples as x")
        z = z[:, z.std(axis=0) > 0]
    if z is not None and np.size(z) > 0:
        fz = _fourier_features(_standardize(z, "z"), n_features, rng)
        Czz = fz.T @ fz / n
        P = np.linalg.solve(Czz + 1e-10 * np.eye(Czz.shape[0]), fz.T @ np.column_stack([fx, fy]) / n)
        res = np.column_stack([fx, fy]) - fz @ P
        rx, ry = res[:, : fx.shape[1]], res[:, fx.shape[1]:]
    else:
        rx, ry = fx, fy
    C = rx.T @ ry / n
    stat = n * float(np.sum(C**2))
    prods = (rx[:, :, None] * ry[:, None, :]).reshape(n, -1)
    prods = prods - prods.mean(axis=0)
    lam = np.linalg.eigvalsh(prods.T @ prods / n)
    lam = lam[lam > 1e-12 * max(1.0, lam.max())]
    return _hbe_sf(lam, stat)


def _test_seed(seed: int, *key: int) -> int:
    return int(np.random.SeedSequence([seed, *key]).generate_state(1)[0])


def pc_adjacency(
    data,
    alpha: float = 0.05,
    max_cond_size: int = 3,
    seed: int = 0,
    names: Sequence[str] | None = None,
    n_features: int = 25,
) -> set:
    """Features left adjacent to the response (last column of ``data``).

    Levels 0..max_cond_size are run in order.  Within a level the candidate
    conditioning sets come from the response's neighbours at the start of the
    level (order-independent PC), enumerated lexicographically; a feature is
    removed the first time a test accepts independence.
    """
    data = np.asarray(data, dtype=np.float64)
    p = data.shape[1] - 1
    if p < 1:
        raise ValidationError("need at least one feature column besides the response")
    if not 0 < alpha < 1:
        raise ValidationError("alpha must lie in (0, 1)")
    names = list(names) if names is not None else list(range(p))
    response = data[:, -1]
    adj = list(range(p))
    for level in range(max_cond_size + 1):
        snapshot = list(adj)
        if not any(len(snapshot) - 1 >= level for _ in snapshot):
            break
        for j in snapshot:
            others = [k for k in snapshot if k != j]
            if len(others) < level:
                continue
            for S in combinations(others, level):
                z = data[:, list(S)] if S else None
                pval = rcit(data[:, j], response, z, n_features=n_features, seed=_test_seed(seed, j, level, *S))
                if pval > alpha:
                    adj.remove(j)
                    break
    return {names[j] for j in adj}


@dataclass
class CertaintyScores:
    names: list[str]
    scores: np.ndarray
    repeats: int

    def as_dict(self) -> dict[str, float]:
        return {n: float(s) for n, s in zip(self.names, self.scores)}


def bootstrap_certainty(
    data,
    B: int = 100,
    alpha: float = 0.05,
    seed: int = 0,
    names: Sequence[str] | None = None,
    max_cond_size: int = 3,
    n_features: int = 25,
) -> CertaintyScores:
    """Share of bootstrap resamples in which each feature stays adjacent to the response."""
    if B < 1:
        raise ValidationError("need at least one bootstrap repeat")
    data = np.asarray(data, dtype=np.float64)
    n, p = data.shape[0], data.shape[1] - 1
    names = list(names) if names is not None else [str(j) for j in range(p)]
    counts = np.zeros(p)
    for b, child in enumerate(np.random.SeedSequence(seed).spawn(B)):
        rng = np.random.Generator(np.random.PCG64(child))
        rows = rng.integers(0, n, n)
        rep_seed = int(child.generate_state(1)[0])
        try:
            found = pc_adjacency(data[rows], alpha, max_cond_size, rep_seed, list(range(p)), n_features)
        except TestUndefinedError:
            logger.warning("bootstrap repeat %d skipped: degenerate resample", b)
            found = set()
        for j in found:
            counts[j] += 1
    return CertaintyScores(names, counts / B, B)


@dataclass
class CandidateFeatureSet:
    threshold: float
    members: tuple[str, ...]
    cv_score: float
    candidates: list[tuple[float, tuple[str, ...], float]] = field(default_factory=list)


def candidate_sets(scores: CertaintyScores, thresholds: Sequence[float]) -> list[tuple[float, tuple[str, ...]]]:
    """Nested feature sets, one per threshold (members have certainty >= threshold)."""
    out = []
    for t in sorted(thresholds):
        if not 0 <= t <= 1:
            raise ValidationError(f"threshold {t} outside [0, 1]")
        members = tuple(n for n, s in zip(scores.names, scores.scores) if s >= t)
        out.append((float(t), members))
    return out


def select_final(
    scores: CertaintyScores,
    evaluate: Callable[[Sequence[str]], float],
    thresholds: Sequence[float] = DEFAULT_THRESHOLDS,
) -> CandidateFeatureSet:
    """Best-scoring candidate set; ties go to the smaller set.

    ``evaluate`` maps a feature list to its cross-validated correlation, see
    :func:`prevalence_cv_evaluator`.
    """
    cands = candidate_sets(scores, thresholds)
    if all(len(m) == 0 for _, m in cands):
        logger.warning("every candidate feature set is empty; falling back to the incidence-only model")
        t = cands[0][0] if cands else 0.0
        s = evaluate(())
        return CandidateFeatureSet(t, (), s, [(t, (), s)])
    seen: dict[tuple[str, ...], float] = {}
    results = []
    for t, members in cands:
        if not members:
            continue
        if members not in seen:
            seen[members] = float(evaluate(members))
        results.append((t, members, seen[members]))
    finite = [r for r in results if np.isfinite(r[2])]
    pool = finite or results
    best = max(pool, key=lambda r: (r[2], -len(r[1]), r[0]))
    return CandidateFeatureSet(best[0], best[1], best[2], results)


def prevalence_cv_evaluator(surveys, covariates, surfaces, k: int = 5, seed: int = 0, priors=None,
                            n_samples: int = 100) -> Callable[[Sequence[str]], float]:
    from .prevalence import PriorSpec, cross_validate

    priors = priors or PriorSpec()

    def evaluate(features):
        return cross_validate(surveys, covariates, surfaces, list(features), k=k, seed=seed, priors=priors,
                              n_samples=n_samples).score

    return evaluate


def select_feature_set(scores: CertaintyScores, surveys, covariates, surfaces,
                       thresholds: Sequence[float] = DEFAULT_THRESHOLDS, seed: int = 0, k: int = 5, priors=None,
                       n_samples: int = 100) -> CandidateFeatureSet:
    """:func:`select_final` scored by k-fold prevalence cross-validation."""
    evaluate = prevalence_cv_evaluator(surveys, covariates, surfaces, k, seed, priors, n_samples)
    return select_final(scores, evaluate, thresholds)


def feature_table(surveys, covariates, surfaces, features: Sequence[str]) -> np.ndarray:
    """Raw feature values at the survey clusters with observed prevalence as the last column."""
    from .prevalence import extract_inputs

    X, _, _ = extract_inputs(surveys.coords(), surveys.months, list(features), covariates, surfaces,
                             labels=surveys.ids)
    return np.column_stack([X, surveys.observed()])


def write_features_json(path, chosen: CandidateFeatureSet, scores: CertaintyScores, settings: dict) -> None:
    import re

    lags = {}
    for f in chosen.members:
        m = re.match(r"^(.+)_lag(\d+)$", f)
        lags[f] = {"covariate": m.group(1), "lag": int(m.group(2))} if m else {"covariate": f, "lag": None}
    doc = {
        "features": list(chosen.members),
        "lags": lags,
        "threshold": chosen.threshold,
        "cv_score": chosen.cv_score,
        "certainty": scores.as_dict(),
        "bootstrap_repeats": scores.repeats,
        "candidates": [{"threshold": t, "members": list(m), "cv_score": s} for t, m, s in chosen.candidates],
        "settings": settings,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)


def read_features_json(path) -> list[str]:
    with open(path) as fh:
        return list(json.load(fh)["features"])
