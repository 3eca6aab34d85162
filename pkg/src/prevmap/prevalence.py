"""Binomial prevalence model calibrated to survey clusters.

    y_i ~ Binomial(N_i, p_i)
    logit p_i = b0 + X_i beta + c0 g(a_i) + c1 g(a'_i) + f(s_i)

a_i and a'_i are the (standardised) log incidence at the survey month and
the month after, g is a unit-variance squared-exponential GP over incidence
held at 51 knots and interpolated linearly, f is a Matérn spatial field and
c0, c1 = exp(.) are non-negative weights.  Both fields are whitened (field =
Cholesky factor @ standard normal vector) and everything, hyperparameters
included, is fitted jointly by MAP.  The Laplace approximation at the mode
supplies posterior draws.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import linalg
from scipy.special import expit
from scipy.spatial.distance import cdist

from .errors import ExtractionError, ValidationError
from .gp_core import (
    MaternKernel,
    SquaredExpKernel,
    cholesky_derivative,
    find_mode,
    jittered_cholesky,
    laplace_sample,
    matern_nu1,
    matern_nu1_dlogrho,
    squared_exp,
    squared_exp_dlogkappa,
)
from .incidence import IncidenceSurfaceSet
from .months import Month, dynamic_path, scan_covariate_dir, static_path
from .raster import GridSpec, Raster, cell_index, read_ascii_grid

logger = logging.getLogger(__name__)

N_KNOTS = 51
JITTER = 1e-8
# the knot Gram of a long-scale squared-exponential kernel has condition number ~1e9;
# 1e-8 leaves the objective rough in kappa at the 1e-9 level
KNOT_JITTER = 1e-6
CUBE_MAGIC = b"PVCUBE01"


@dataclass(frozen=True)
class PriorSpec:
    beta0_sd: float = 1.0
    beta_sd: float = 0.25
    inc_sd: float = 0.25
    log_rho_mean: float = 3.0
    log_rho_sd: float = 0.1
    log_sigma_mean: float = 0.0
    log_sigma_sd: float = 0.1
    log_kappa_mean: float = 3.0
    log_kappa_sd: float = 0.1

    def to_dict(self) -> dict:
        return asdict(self)


# --------------------------------------------------------------------------
# surveys


@dataclass
class SurveyTable:
    ids: list[str]
    x: np.ndarray
    y: np.ndarray
    months: list[Month]
    n_tested: np.ndarray
    n_positive: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.y = np.asarray(self.y, dtype=float)
        self.n_tested = np.asarray(self.n_tested, dtype=float)
        self.n_positive = np.asarray(self.n_positive, dtype=float)
        if np.any(self.n_tested <= 0):
            raise ValidationError("every cluster needs n_tested > 0")
        if np.any(self.n_positive < 0) or np.any(self.n_positive > self.n_tested):
            raise ValidationError("n_positive must lie in [0, n_tested]")

    def __len__(self):
        return len(self.ids)

    def coords(self) -> np.ndarray:
        return np.column_stack([self.x, self.y])

    def observed(self) -> np.ndarray:
        return self.n_positive / self.n_tested

    def subset(self, index) -> "SurveyTable":
        index = np.asarray(index)
        return SurveyTable(
            [self.ids[i] for i in index], self.x[index], self.y[index],
            [self.months[i] for i in index], self.n_tested[index], self.n_positive[index],
        )


def read_surveys_csv(path) -> SurveyTable:
    ids, xs, ys, months, nt, npos = [], [], [], [], [], []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        need = ("cluster_id", "x", "y", "year", "month", "n_tested", "n_positive")
        for col in need:
            if col not in (reader.fieldnames or []):
                raise ValidationError(f"{path}: missing column {col!r}")
        for rec in reader:
            ids.append(rec["cluster_id"])
            xs.append(float(rec["x"]))
            ys.append(float(rec["y"]))
            months.append(Month(int(rec["year"]), int(rec["month"])))
            nt.append(int(rec["n_tested"]))
            npos.append(int(rec["n_positive"]))
    return SurveyTable(ids, xs, ys, months, nt, npos)


def write_surveys_csv(surveys: SurveyTable, path) -> None:
    from .raster import format_float

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cluster_id", "x", "y", "year", "month", "n_tested", "n_positive"])
        for i, cid in enumerate(surveys.ids):
            m = surveys.months[i]
            w.writerow([cid, format_float(surveys.x[i]), format_float(surveys.y[i]), m.year, m.month,
                        int(surveys.n_tested[i]), int(surveys.n_positive[i])])


# --------------------------------------------------------------------------
# covariates

_LAG_RE = re.compile(r"^(?P<name>.+)_lag(?P<lag>\d+)$")


class CovariateStack:
    """Static rasters by name and dynamic rasters by name and month.

    Features are named ``<static name>`` or ``<dynamic name>_lag<k>``; a lag-k
    feature for month t reads the month t - k raster.
    """

    def __init__(self, static=None, dynamic=None, directory=None):
        self.static: dict[str, Raster] = dict(static or {})
        self.dynamic: dict[str, dict[Month, Raster]] = {k: dict(v) for k, v in (dynamic or {}).items()}
        self.directory = Path(directory) if directory is not None else None
        self._dynamic_months: dict[str, list[Month]] = {}
        if self.directory is not None:
            names, dyn = scan_covariate_dir(self.directory)
            self._static_names = names
            self._dynamic_months = dyn
        else:
            self._static_names = []

    @classmethod
    def from_directory(cls, directory) -> "CovariateStack":
        return cls(directory=directory)

    def static_names(self) -> list[str]:
        return sorted(set(self.static) | set(self._static_names))

    def dynamic_names(self) -> list[str]:
        return sorted(set(self.dynamic) | set(self._dynamic_months))

    def feature_names(self, lags: Sequence[int] = (0, 1, 2)) -> list[str]:
        return self.static_names() + [f"{n}_lag{k}" for n in self.dynamic_names() for k in lags]

    def parse(self, feature: str) -> tuple[str, int | None]:
        if feature in self.static_names():
            return feature, None
        m = _LAG_RE.match(feature)
        if m and m["name"] in self.dynamic_names():
            return m["name"], int(m["lag"])
        raise ValidationError(f"unknown feature {feature!r}")

    def raster(self, feature: str, month: Month) -> Raster:
        name, lag = self.parse(feature)
        if lag is None:
            if name not in self.static:
                self.static[name] = read_ascii_grid(static_path(self.directory, name))
            return self.static[name]
        m = month.shift(-lag)
        by_month = self.dynamic.setdefault(name, {})
        if m not in by_month:
            if self.directory is None or m not in self._dynamic_months.get(name, []):
                raise ExtractionError(f"no {name} raster for {m} (feature {feature}, month {month})")
            by_month[m] = read_ascii_grid(dynamic_path(self.directory, name, m))
        return by_month[m]


# --------------------------------------------------------------------------
# design


@dataclass
class Design:
    """Model inputs for a set of survey clusters plus the standardisation used."""

    features: list[str]
    X: np.ndarray  # standardised covariates (n, p)
    x_mean: np.ndarray
    x_sd: np.ndarray
    inc_now: np.ndarray  # raw log incidence at t and t+1
    inc_next: np.ndarray
    inc_mean: float
    inc_sd: float
    coords: np.ndarray
    n_tested: np.ndarray
    n_positive: np.ndarray
    dropped: list[str] = field(default_factory=list)

    @property
    def a_now(self) -> np.ndarray:
        return (self.inc_now - self.inc_mean) / self.inc_sd

    @property
    def a_next(self) -> np.ndarray:
        return (self.inc_next - self.inc_mean) / self.inc_sd


def _lead_month(surfaces: IncidenceSurfaceSet, month: Month, final_month: str) -> Month:
    nxt = month.shift(1)
    if nxt in surfaces.months:
        return nxt
    if final_month == "reuse":
        return month
    raise ExtractionError(f"no incidence surface for {nxt} (lead month of {month})")


def extract_inputs(
    coords: np.ndarray,
    months: Sequence[Month],
    features: Sequence[str],
    covariates: CovariateStack,
    surfaces: IncidenceSurfaceSet,
    final_month: str = "reuse",
    labels: Sequence[str] | None = None,
):
    """Raw covariate values and log incidence (t, t+1) at the cells containing each point."""
    spec = surfaces.spec
    n = len(months)
    labels = labels if labels is not None else [str(i) for i in range(n)]
    X = np.empty((n, len(features)))
    inc = np.empty((n, 2))
    bad: set[str] = set()
    for i, m in enumerate(months):
        try:
            r, c = cell_index(spec, coords[i, 0], coords[i, 1])
        except IndexError:
            bad.add(labels[i])
            continue
        for j, feat in enumerate(features):
            ras = covariates.raster(feat, m)
            if ras.spec != spec:
                raise ValidationError(f"covariate {feat} is on a different grid from the incidence surfaces")
            X[i, j] = ras.values[r, c]
            if ras.mask[r, c] or not np.isfinite(X[i, j]):
                bad.add(labels[i])
        for k, mm in enumerate((m, _lead_month(surfaces, m, final_month))):
            ras = surfaces.get(mm)
            inc[i, k] = ras.values[r, c]
            if ras.mask[r, c]:
                bad.add(labels[i])
    if bad:
        listed = sorted(bad)
        raise ExtractionError(f"missing inputs at {len(listed)} site(s): {listed[:10]}", sites=listed)
    return X, inc[:, 0], inc[:, 1]


def build_design(
    surveys: SurveyTable,
    covariates: CovariateStack,
    surfaces: IncidenceSurfaceSet,
    features: Sequence[str] = (),
    final_month: str = "reuse",
) -> Design:
    """Standardised design matrix and incidence inputs for the survey clusters.

    Constant covariate columns are dropped with a warning.
    """
    features = list(features)
    X, now, nxt = extract_inputs(surveys.coords(), surveys.months, features, covariates, surfaces,
                                 final_month, surveys.ids)
    mean = X.mean(axis=0) if features else np.zeros(0)
    sd = X.std(axis=0) if features else np.zeros(0)
    const = sd <= 1e-12 * (1.0 + np.abs(mean))
    dropped = [f for f, c in zip(features, const) if c]
    if dropped:
        logger.warning("dropping constant covariates: %s", dropped)
    keep = ~const
    X = (X[:, keep] - mean[keep]) / sd[keep]
    both = np.concatenate([now, nxt])
    inc_mean = float(both.mean())
    inc_sd = float(both.std())
    if not inc_sd > 1e-12:
        inc_sd = 1.0
    return Design(
        [f for f, k in zip(features, keep) if k], X, mean[keep], sd[keep], now, nxt, inc_mean, inc_sd,
        surveys.coords(), surveys.n_tested.copy(), surveys.n_positive.copy(), dropped,
    )


# --------------------------------------------------------------------------
# objective


@dataclass(frozen=True)
class Layout:
    n_beta: int
    n_sites: int
    n_knots: int

    @property
    def size(self) -> int:
        return 1 + self.n_beta + 2 + 3 + self.n_sites + self.n_knots

    @property
    def beta(self) -> slice:
        return slice(1, 1 + self.n_beta)

    @property
    def inc(self) -> slice:
        s = 1 + self.n_beta
        return slice(s, s + 2)

    @property
    def hyper(self) -> slice:
        s = 3 + self.n_beta
        return slice(s, s + 3)

    @property
    def uf(self) -> slice:
        s = 6 + self.n_beta
        return slice(s, s + self.n_sites)

    @property
    def ug(self) -> slice:
        s = 6 + self.n_beta + self.n_sites
        return slice(s, s + self.n_knots)

    def nonlinear(self) -> np.ndarray:
        return np.r_[np.arange(self.size)[self.inc], np.arange(self.size)[self.hyper]]

    def names(self, features: Sequence[str]) -> list[str]:
        return (["beta0"] + [f"beta[{f}]" for f in features] + ["log_beta0_inc", "log_beta1_inc",
                "log_rho", "log_sigma", "log_kappa"] + [f"u_f[{i}]" for i in range(self.n_sites)]
                + [f"u_g[{i}]" for i in range(self.n_knots)])


def interp_matrix(a: np.ndarray, knots: np.ndarray) -> np.ndarray:
    """Rows of linear-interpolation weights onto ``knots`` (constant beyond the ends)."""
    a = np.clip(np.asarray(a, dtype=float), knots[0], knots[-1])
    h = knots[1] - knots[0]
    j = np.minimum(((a - knots[0]) / h).astype(int), knots.size - 2)
    t = (a - knots[j]) / h
    W = np.zeros((a.size, knots.size))
    rows = np.arange(a.size)
    W[rows, j] = 1.0 - t
    W[rows, j + 1] += t
    return W


def unique_sites(coords: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    sites, inverse = np.unique(np.asarray(coords, dtype=float), axis=0, return_inverse=True)
    return sites, inverse.reshape(-1)


def knot_grid(design: Design, n_knots: int = N_KNOTS) -> np.ndarray:
    both = np.concatenate([design.a_now, design.a_next])
    lo, hi = float(both.min()), float(both.max())
    if hi - lo < 1e-9:
        lo, hi = lo - 1.0, hi + 1.0
    return np.linspace(lo, hi, n_knots)


class PrevalenceObjective:
    """Negative log joint posterior of the prevalence model and its derivatives."""

    def __init__(self, design: Design, priors: PriorSpec = PriorSpec(), knots: np.ndarray | None = None,
                 sites: np.ndarray | None = None, site_index: np.ndarray | None = None):
        self.design = design
        self.priors = priors
        self.knots = knot_grid(design) if knots is None else knots
        if sites is None:
            sites, site_index = unique_sites(design.coords)
        self.sites = sites
        self.site_index = site_index
        self.layout = Layout(design.X.shape[1], sites.shape[0], self.knots.size)
        self.D_sites = cdist(sites, sites)
        self.D_knots = np.abs(self.knots[:, None] - self.knots[None, :])
        self.W_now = interp_matrix(design.a_now, self.knots)
        self.W_next = interp_matrix(design.a_next, self.knots)
        k = self.knots.size
        self.C = np.eye(k) - np.full((k, k), 1.0 / k)
        p = priors
        lay = self.layout
        self.prior_mean = np.zeros(lay.size)
        self.prior_prec = np.ones(lay.size)
        self.prior_prec[0] = 1.0 / p.beta0_sd**2
        self.prior_prec[lay.beta] = 1.0 / p.beta_sd**2
        self.prior_prec[lay.inc] = 1.0 / p.inc_sd**2
        self.prior_mean[lay.hyper] = [p.log_rho_mean, p.log_sigma_mean, p.log_kappa_mean]
        self.prior_prec[lay.hyper] = [1.0 / p.log_rho_sd**2, 1.0 / p.log_sigma_sd**2, 1.0 / p.log_kappa_sd**2]
        self._cache_key = None

    # ---- pieces -------------------------------------------------------
    def factors(self, x: np.ndarray):
        """Cholesky factors of the site and knot Gram matrices at the hyperparameters in ``x``."""
        lr, ls, lk = x[self.layout.hyper]
        key = (float(lr), float(ls), float(lk))
        if key != self._cache_key:
            sigma2 = math.exp(2 * ls)
            R = matern_nu1(self.D_sites, MaternKernel(math.exp(lr), 1.0))
            Ls1, nug_s = jittered_cholesky(R, JITTER, scale=1.0)
            Lk, nug_k = jittered_cholesky(squared_exp(self.D_knots, SquaredExpKernel(math.exp(lk))), KNOT_JITTER, scale=1.0)
            self._factors = (math.sqrt(sigma2) * Ls1, Ls1, nug_s, Lk, nug_k)
            self._cache_key = key
        return self._factors

    def components(self, x: np.ndarray) -> dict:
        lay = self.layout
        Ls, _, _, Lk, _ = self.factors(x)
        f_sites = Ls @ x[lay.uf]
        g_knots = self.C @ (Lk @ x[lay.ug])
        c0, c1 = np.exp(x[lay.inc])
        return {
            "intercept": np.full(self.design.X.shape[0], x[0]),
            "covariates": self.design.X @ x[lay.beta],
            "inc_now": c0 * (self.W_now @ g_knots),
            "inc_next": c1 * (self.W_next @ g_knots),
            "spatial": f_sites[self.site_index],
            "f_sites": f_sites,
            "g_knots": g_knots,
        }

    def linear_predictor(self, x: np.ndarray) -> np.ndarray:
        c = self.components(x)
        return c["intercept"] + c["covariates"] + c["inc_now"] + c["inc_next"] + c["spatial"]

    # ---- value and gradient -------------------------------------------
    def __call__(self, x: np.ndarray):
        x = np.asarray(x, dtype=float)
        lay = self.layout
        d = self.design
        Ls, Ls1, _, Lk, _ = self.factors(x)
        uf, ug = x[lay.uf], x[lay.ug]
        f_sites = Ls @ uf
        h_knots = Lk @ ug
        g_knots = self.C @ h_knots
        g_now = self.W_now @ g_knots
        g_next = self.W_next @ g_knots
        c0, c1 = np.exp(x[lay.inc])
        eta = x[0] + d.X @ x[lay.beta] + c0 * g_now + c1 * g_next + f_sites[self.site_index]

        N, y = d.n_tested, d.n_positive
        dev = x - self.prior_mean
        value = float(np.sum(N * np.logaddexp(0.0, eta) - y * eta) + 0.5 * np.sum(self.prior_prec * dev * dev))
        r = N * expit(eta) - y

        grad = self.prior_prec * dev
        grad[0] += r.sum()
        grad[lay.beta] += d.X.T @ r
        grad[lay.inc] += [c0 * (r @ g_now), c1 * (r @ g_next)]
        r_sites = np.bincount(self.site_index, weights=r, minlength=lay.n_sites)
        grad[lay.uf] += Ls.T @ r_sites
        q = self.C.T @ (self.W_now.T @ (c0 * r) + self.W_next.T @ (c1 * r))
        grad[lay.ug] += Lk.T @ q

        lr, ls, lk = x[lay.hyper]
        sigma = math.exp(ls)
        dR = matern_nu1_dlogrho(self.D_sites, MaternKernel(math.exp(lr), 1.0))
        dLs = sigma * cholesky_derivative(Ls1, dR)
        dKk = squared_exp_dlogkappa(self.D_knots, SquaredExpKernel(math.exp(lk)))
        dLk = cholesky_derivative(Lk, dKk)
        h = lay.hyper.start
        grad[h] += r_sites @ (dLs @ uf)
        grad[h + 1] += r_sites @ f_sites
        grad[h + 2] += q @ (dLk @ ug)
        return value, grad

    # ---- curvature ----------------------------------------------------
    def jacobian_linear(self, x: np.ndarray) -> np.ndarray:
        """d eta / dx for the coordinates eta is linear in (others left zero)."""
        lay = self.layout
        d = self.design
        Ls, _, _, Lk, _ = self.factors(x)
        c0, c1 = np.exp(x[lay.inc])
        J = np.zeros((d.X.shape[0], lay.size))
        J[:, 0] = 1.0
        J[:, lay.beta] = d.X
        J[:, lay.uf] = Ls[self.site_index]
        J[:, lay.ug] = (c0 * self.W_now + c1 * self.W_next) @ self.C @ Lk
        return J

    def hess(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        lay = self.layout
        d = self.design
        eta = self.linear_predictor(x)
        p = expit(eta)
        w = d.n_tested * p * (1.0 - p)
        J = self.jacobian_linear(x)
        H = (J.T * w) @ J
        H[np.diag_indices_from(H)] += self.prior_prec
        nl = lay.nonlinear()
        cols = np.empty((lay.size, nl.size))
        for k, i in enumerate(nl):
            step = 1e-5 * (1.0 + abs(x[i]))
            xp, xm = x.copy(), x.copy()
            xp[i] += step
            xm[i] -= step
            cols[:, k] = (self(xp)[1] - self(xm)[1]) / (2 * step)
        H[:, nl] = cols
        H[nl, :] = cols.T
        block = cols[nl]
        H[np.ix_(nl, nl)] = 0.5 * (block + block.T)
        return H

    def initial_point(self) -> np.ndarray:
        lay = self.layout
        x = self.prior_mean.copy()
        pbar = (self.design.n_positive.sum() + 0.5) / (self.design.n_tested.sum() + 1.0)
        x[0] = math.log(pbar / (1 - pbar))
        return x


# --------------------------------------------------------------------------
# fitted model


@dataclass
class PrevalenceModel:
    """Mode and curvature of the fitted prevalence model, plus what prediction needs."""

    features: list[str]
    x_mean: np.ndarray
    x_sd: np.ndarray
    inc_mean: float
    inc_sd: float
    knots: np.ndarray
    sites: np.ndarray
    priors: PriorSpec
    mode: np.ndarray
    hessian: np.ndarray
    final_month: str = "reuse"
    info: dict = field(default_factory=dict)

    @property
    def layout(self) -> Layout:
        return Layout(len(self.features), self.sites.shape[0], self.knots.size)

    def params(self, x: np.ndarray | None = None) -> dict:
        x = self.mode if x is None else x
        lay = self.layout
        lr, ls, lk = x[lay.hyper]
        return {
            "beta0": float(x[0]),
            "beta": dict(zip(self.features, map(float, x[lay.beta]))),
            "beta0_inc": float(math.exp(x[lay.inc][0])),
            "beta1_inc": float(math.exp(x[lay.inc][1])),
            "log_rho": float(lr),
            "log_sigma": float(ls),
            "log_kappa": float(lk),
        }

    def posterior_sd(self) -> np.ndarray:
        return np.sqrt(np.diag(linalg.inv(self.hessian)))

    def to_json(self) -> str:
        doc = {
            "format": "prevmap-prevalence-model",
            "version": 1,
            "features": self.features,
            "x_mean": self.x_mean.tolist(),
            "x_sd": self.x_sd.tolist(),
            "inc_mean": self.inc_mean,
            "inc_sd": self.inc_sd,
            "knots": self.knots.tolist(),
            "sites": self.sites.tolist(),
            "priors": self.priors.to_dict(),
            "final_month": self.final_month,
            "params": self.params(),
            "mode": self.mode.tolist(),
            "hessian": self.hessian.tolist(),
            "info": self.info,
        }
        return json.dumps(doc, sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "PrevalenceModel":
        doc = json.loads(Path(path).read_text())
        if doc.get("format") != "prevmap-prevalence-model":
            raise ValidationError(f"{path} is not a prevalence model file")
        return cls(
            doc["features"], np.array(doc["x_mean"]), np.array(doc["x_sd"]), doc["inc_mean"], doc["inc_sd"],
            np.array(doc["knots"]), np.array(doc["sites"]).reshape(-1, 2), PriorSpec(**doc["priors"]),
            np.array(doc["mode"]), np.array(doc["hessian"]), doc.get("final_month", "reuse"), doc.get("info", {}),
        )


def fit_prevalence(design: Design, priors: PriorSpec = PriorSpec(), seed: int = 0) -> PrevalenceModel:
    """Joint posterior mode (gradient max-norm < 1e-6) and dense curvature.

    The fit itself is deterministic; ``seed`` is recorded for provenance.
    """
    sites, _ = unique_sites(design.coords)
    if sites.shape[0] < 2:
        raise ValidationError("need at least two distinct survey locations")
    if not (np.all(np.isfinite(design.X)) and np.all(np.isfinite(design.inc_now))
            and np.all(np.isfinite(design.inc_next))):
        raise ValidationError("design contains non-finite values")
    obj = PrevalenceObjective(design, priors)
    res = find_mode(obj, obj.initial_point(), hess=obj.hess)
    flags = []
    if design.n_positive.sum() == 0:
        flags.append("all clusters negative; estimates are prior-driven")
    info = {
        "iterations": res.iterations,
        "grad_norm": res.grad_norm,
        "objective": res.value,
        "n_clusters": int(design.X.shape[0]),
        "n_sites": int(sites.shape[0]),
        "dropped_features": design.dropped,
        "seed": int(seed),
        "flags": flags,
    }
    return PrevalenceModel(
        list(design.features), design.x_mean, design.x_sd, design.inc_mean, design.inc_sd, obj.knots, sites,
        priors, res.x, res.hessian, info=info,
    )


# --------------------------------------------------------------------------
# prediction


@dataclass
class PredictionPoints:
    """Where (coords), with which standardised covariates and incidence inputs, per month."""

    coords: np.ndarray  # (P, 2)
    X: list[np.ndarray]  # per month, (P, p) standardised
    a_now: list[np.ndarray]  # per month, (P,) standardised
    a_next: list[np.ndarray]


def _field_at(model: PrevalenceModel, x: np.ndarray, coords: np.ndarray) -> np.ndarray:
    lay = model.layout
    lr, ls, _ = x[lay.hyper]
    kern = MaternKernel(math.exp(lr), 1.0)
    Ls1, nugget = jittered_cholesky(matern_nu1(cdist(model.sites, model.sites), kern), JITTER, scale=1.0)
    d = cdist(coords, model.sites)
    K = matern_nu1(d, kern) + nugget * (d == 0)
    # K_ps K_ss^-1 L u with K_ss = L L^T  ->  K_ps L^-T u, in unit-variance form times sigma
    return math.exp(ls) * (K @ linalg.solve_triangular(Ls1.T, x[lay.uf], lower=False))


def _g_knots(model: PrevalenceModel, x: np.ndarray) -> np.ndarray:
    lay = model.layout
    k = model.knots
    Kk = squared_exp(np.abs(k[:, None] - k[None, :]), SquaredExpKernel(math.exp(x[lay.hyper][2])))
    Lk, _ = jittered_cholesky(Kk, KNOT_JITTER, scale=1.0)
    g = Lk @ x[lay.ug]
    return g - g.mean()


def linear_predictor_at(model: PrevalenceModel, x: np.ndarray, pts: PredictionPoints) -> np.ndarray:
    """Logit prevalence, shape (months, P), for parameter vector ``x``."""
    lay = model.layout
    f = _field_at(model, x, pts.coords)
    g = _g_knots(model, x)
    c0, c1 = np.exp(x[lay.inc])
    out = np.empty((len(pts.X), pts.coords.shape[0]))
    for t in range(len(pts.X)):
        out[t] = (x[0] + pts.X[t] @ x[lay.beta] + c0 * np.interp(pts.a_now[t], model.knots, g)
                  + c1 * np.interp(pts.a_next[t], model.knots, g) + f)
    return out


def prediction_points(
    model: PrevalenceModel,
    coords: np.ndarray,
    months: Sequence[Month],
    covariates: CovariateStack,
    surfaces: IncidenceSurfaceSet,
    per_point_months: bool = False,
) -> PredictionPoints:
    """Standardised inputs at ``coords`` for each of ``months``.

    With ``per_point_months`` the i-th point is evaluated only at months[i]
    and the result holds a single "month" slice.
    """
    if per_point_months:
        X, now, nxt = extract_inputs(coords, months, model.features, covariates, surfaces, model.final_month)
        X = (X - model.x_mean) / model.x_sd
        return PredictionPoints(coords, [X], [(now - model.inc_mean) / model.inc_sd],
                                [(nxt - model.inc_mean) / model.inc_sd])
    Xs, nows, nxts = [], [], []
    for m in months:
        X, now, nxt = extract_inputs(coords, [m] * coords.shape[0], model.features, covariates, surfaces,
                                     model.final_month)
        Xs.append((X - model.x_mean) / model.x_sd)
        nows.append((now - model.inc_mean) / model.inc_sd)
        nxts.append((nxt - model.inc_mean) / model.inc_sd)
    return PredictionPoints(coords, Xs, nows, nxts)


@dataclass
class PosteriorSampleCube:
    """Prevalence draws with shape (samples, months, nrows, ncols); NaN on missing cells."""

    data: np.ndarray
    spec: GridSpec
    months: list[Month]
    seed: int
    provenance: dict = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return self.data.shape[0]

    def write(self, path) -> None:
        """Flat binary cube plus a JSON sidecar (``<path>.json``) with grid, months and provenance."""
        path = Path(path)
        dims = np.array(self.data.shape, dtype="<i8")
        with open(path, "wb") as fh:
            fh.write(CUBE_MAGIC)
            fh.write(dims.tobytes())
            fh.write(np.ascontiguousarray(self.data, dtype="<f4").tobytes())
        meta = {
            "grid": asdict(self.spec),
            "months": [str(m) for m in self.months],
            "seed": self.seed,
            "provenance": self.provenance,
        }
        Path(f"{path}.json").write_text(json.dumps(meta, sort_keys=True, indent=1))

    @classmethod
    def read(cls, path) -> "PosteriorSampleCube":
        path = Path(path)
        raw = path.read_bytes()
        if raw[:8] != CUBE_MAGIC:
            raise ValidationError(f"{path}: not a prevalence cube file")
        dims = tuple(int(v) for v in np.frombuffer(raw[8:40], dtype="<i8"))
        data = np.frombuffer(raw[40:], dtype="<f4")
        if data.size != int(np.prod(dims)):
            raise ValidationError(f"{path}: payload has {data.size} values, header says {dims}")
        meta = json.loads(Path(f"{path}.json").read_text())
        spec = GridSpec(**meta["grid"])
        return cls(data.reshape(dims).astype(np.float64), spec, [Month.parse(m) for m in meta["months"]],
                   meta["seed"], meta.get("provenance", {}))


def predict_prevalence(
    model: PrevalenceModel,
    covariates: CovariateStack,
    surfaces: IncidenceSurfaceSet,
    grid: Raster | GridSpec,
    months: Sequence[Month],
    n_samples: int,
    seed: int,
    hessian: np.ndarray | None = None,
) -> PosteriorSampleCube:
    """Posterior prevalence draws for every valid cell and month.

    Parameter vectors are drawn from the Laplace approximation, the linear
    predictor is evaluated per draw and only then mapped through the inverse
    logit.  Cells missing in ``grid`` (if a raster) stay NaN.
    """
    spec = grid.spec if isinstance(grid, Raster) else grid
    valid = grid.valid if isinstance(grid, Raster) else np.ones(spec.shape, bool)
    xs, ys = spec.centers()
    coords = np.column_stack([xs[valid], ys[valid]])
    pts = prediction_points(model, coords, months, covariates, surfaces)

    lay = model.layout
    kappa_scale = 3.0 * math.exp(model.mode[lay.hyper][2])
    lo, hi = model.knots[0] - kappa_scale, model.knots[-1] + kappa_scale
    extrap = np.zeros(coords.shape[0], bool)
    for a, b in zip(pts.a_now, pts.a_next):
        extrap |= (a < lo) | (a > hi) | (b < lo) | (b > hi)
    if extrap.any():
        logger.warning("%d pixels have incidence inputs beyond 3 kernel scales of the training range", int(extrap.sum()))

    H = model.hessian if hessian is None else hessian
    draws = laplace_sample(model.mode, H, n_samples, seed)
    cube = np.full((n_samples, len(months)) + spec.shape, np.nan)
    for s in range(n_samples):
        eta = linear_predictor_at(model, draws[s], pts)
        cube[s][:, valid] = expit(eta)
    extrap_cells = [list(map(int, rc)) for rc in np.argwhere(valid)[extrap]]
    prov = {
        "model_sha256": model.digest(),
        "n_samples": n_samples,
        "extrapolation_cells": extrap_cells,
    }
    return PosteriorSampleCube(cube, spec, list(months), int(seed), prov)


def plug_in_prevalence(model: PrevalenceModel, pts: PredictionPoints) -> np.ndarray:
    return expit(linear_predictor_at(model, model.mode, pts))


# --------------------------------------------------------------------------
# validation


@dataclass
class CVResult:
    fold_correlations: list[float]
    skipped_folds: list[int]
    predicted: np.ndarray
    observed: np.ndarray

    @property
    def score(self) -> float:
        """Mean Pearson correlation over scored folds (nan if none)."""
        return float(np.mean(self.fold_correlations)) if self.fold_correlations else float("nan")


def pearson(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a = a - a.mean()
    b = b - b.mean()
    denom = math.sqrt(float(a @ a) * float(b @ b))
    return float(a @ b / denom) if denom > 0 else float("nan")


def posterior_mean_at_clusters(model: PrevalenceModel, surveys: SurveyTable, covariates: CovariateStack,
                               surfaces: IncidenceSurfaceSet, n_samples: int, seed: int) -> np.ndarray:
    pts = prediction_points(model, surveys.coords(), surveys.months, covariates, surfaces, per_point_months=True)
    draws = laplace_sample(model.mode, model.hessian, n_samples, seed)
    acc = np.zeros(len(surveys))
    for s in range(n_samples):
        acc += expit(linear_predictor_at(model, draws[s], pts)[0])
    return acc / n_samples


def cross_validate(
    surveys: SurveyTable,
    covariates: CovariateStack,
    surfaces: IncidenceSurfaceSet,
    features: Sequence[str] = (),
    k: int | None = 5,
    seed: int = 0,
    split: tuple[int, int] | None = None,
    priors: PriorSpec = PriorSpec(),
    n_samples: int = 100,
) -> CVResult:
    """Held-out correlation between posterior-mean and observed prevalence.

    Either ``k`` random folds (seeded shuffle of clusters) or a temporal
    ``split=(train_year, test_year)``.
    """
    n = len(surveys)
    if split is not None:
        years = np.array([m.year for m in surveys.months])
        folds = [(np.flatnonzero(years == split[0]), np.flatnonzero(years == split[1]))]
    else:
        if k is None or k < 2:
            raise ValidationError("need k >= 2 folds or a temporal split")
        perm = np.random.Generator(np.random.PCG64(seed)).permutation(n)
        tests = [np.sort(f) for f in np.array_split(perm, k)]
        folds = [(np.setdiff1d(np.arange(n), t), t) for t in tests]
    obs = surveys.observed()
    pred = np.full(n, np.nan)
    cors, skipped = [], []
    for i, (train, test) in enumerate(folds):
        if test.size < 2 or np.ptp(obs[test]) == 0:
            logger.warning("fold %d skipped: no variation in held-out observations", i)
            skipped.append(i)
            continue
        design = build_design(surveys.subset(train), covariates, surfaces, features)
        model = fit_prevalence(design, priors, seed)
        p = posterior_mean_at_clusters(model, surveys.subset(test), covariates, surfaces, n_samples, seed + i)
        pred[test] = p
        cors.append(pearson(p, obs[test]))
    return CVResult(cors, skipped, pred, obs)
