"""Run configuration, stage orchestration and the ``prevmap`` command line.

Stages run in a fixed order and talk to each other only through files:

    catchment   -> catchment/catchments.csv, facilities_with_catchments.csv
    incidence   -> incidence/incidence_YYYY_MM.asc, fit_report.jsonl
    features    -> features/features.json
    prevalence  -> prevalence/model.json
    predict     -> cubes/cube.bin (+ .json sidecar), mean_YYYY_MM.asc
    aggregate   -> products/*.asc, series.csv

Each stage's random stream is derived from the run seed and the stage name
(see :func:`stage_seed`), so a full run is reproducible from one integer.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import platform
import re
import shutil
import sys
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Sequence

import numpy as np
import scipy
import yaml

from . import __version__
from .catchment import (
    FacilityPanel,
    FrictionSurface,
    SeekCurveParams,
    attach_catchments,
    compute_catchments,
    read_catchments_csv,
    read_facilities_csv,
    travel_time_matrix,
    write_catchments_csv,
    write_facilities_csv,
    write_unreachable_csv,
)
from .causal_select import (
    DEFAULT_THRESHOLDS,
    CandidateFeatureSet,
    CertaintyScores,
    bootstrap_certainty,
    feature_table,
    prevalence_cv_evaluator,
    read_features_json,
    select_final,
    write_features_json,
)
from .errors import NumericalError, PrevmapError, ValidationError
from .incidence import (
    IncidenceModelConfig,
    IncidenceSurfaceSet,
    fit_incidence,
    predict_incidence_surface,
    select_hyperparameters,
    write_fit_report,
)
from .mapgen import (
    ZoneMap,
    annual_mean_prevalence,
    exceedance,
    iqr_map,
    parse_products,
    to_raster,
    weighted_series,
    write_series_csv,
    years_in,
)
from .months import Month, parse_month_span
from .prevalence import (
    PosteriorSampleCube,
    PrevalenceModel,
    PriorSpec,
    build_design,
    CovariateStack,
    fit_prevalence,
    predict_prevalence,
    read_surveys_csv,
)
from .raster import Raster, read_ascii_grid, write_ascii_grid
from .synth import SyntheticScenario, generate_synthetic

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
STAGES = ("catchment", "incidence", "features", "prevalence", "predict", "aggregate")
MANIFEST = "manifest.json"


# --------------------------------------------------------------------------
# configuration


@dataclass
class InputPaths:
    friction: str
    population: dict[int, str]
    facilities: str
    surveys: str
    covariate_dir: str
    zones: str | None = None
    catchments: str | None = None  # externally supplied catchment populations


@dataclass
class CatchmentSettings:
    alpha: float = 0.6
    sigma: float = 0.00916
    beta: float = 0.15

    def params(self) -> SeekCurveParams:
        return SeekCurveParams(self.alpha, self.sigma, self.beta)


@dataclass
class IncidenceSettings:
    """``sigma`` is the marginal standard deviation; the kernel uses its square."""

    rho: float = 0.9048374180359595  # exp(-0.1)
    sigma: float = 0.1353352832366127  # exp(-2)
    search: list[list[float]] | None = None  # candidate [rho, sigma2] pairs
    folds: int = 5

    @property
    def sigma2(self) -> float:
        return self.sigma**2


@dataclass
class FeatureSettings:
    alpha: float = 0.05
    bootstrap: int = 100
    max_cond_size: int = 3
    n_features: int = 25
    thresholds: list[float] = field(default_factory=lambda: list(DEFAULT_THRESHOLDS))
    lags: list[int] = field(default_factory=lambda: [0, 1, 2])
    cv_folds: int = 5
    cv_samples: int = 100
    fixed: list[str] | None = None  # skip selection and use these features


@dataclass
class PredictSettings:
    months: str | None = None  # "YYYY-MM:YYYY-MM"; default: every incidence month
    samples: int = 200
    final_month: str = "reuse"


@dataclass
class AggregateSettings:
    products: str = "mean,iqr,exceed:0.15:above,exceed:0.05:below"


@dataclass
class RunConfig:
    inputs: InputPaths
    seed: int
    output_dir: str = "run"
    catchment: CatchmentSettings = field(default_factory=CatchmentSettings)
    incidence: IncidenceSettings = field(default_factory=IncidenceSettings)
    features: FeatureSettings = field(default_factory=FeatureSettings)
    priors: PriorSpec = field(default_factory=PriorSpec)
    predict: PredictSettings = field(default_factory=PredictSettings)
    aggregate: AggregateSettings = field(default_factory=AggregateSettings)
    schema_version: int = SCHEMA_VERSION
    base_dir: str = field(default=".", repr=False, compare=False)

    def to_dict(self) -> dict:
        d = {"schema_version": self.schema_version, "seed": self.seed, "output_dir": self.output_dir}
        for name in ("inputs", "catchment", "incidence", "features", "priors", "predict", "aggregate"):
            d[name] = asdict(getattr(self, name))
        return d

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def save(self, path) -> None:
        Path(path).write_text(self.dump())

    @classmethod
    def from_dict(cls, doc: dict, base_dir=".") -> "RunConfig":
        if not isinstance(doc, dict):
            raise ValidationError("configuration must be a mapping")
        version = doc.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ValidationError(f"unsupported schema_version {version!r} (expected {SCHEMA_VERSION})")
        if doc.get("seed") is None:
            raise ValidationError("seed is mandatory")
        known = {"schema_version", "seed", "output_dir", "inputs", "catchment", "incidence", "features", "priors",
                 "predict", "aggregate"}
        extra = set(doc) - known
        if extra:
            raise ValidationError(f"unknown configuration keys: {sorted(extra)}")
        if "inputs" not in doc:
            raise ValidationError("missing 'inputs' section")
        inputs = _section(InputPaths, doc["inputs"], "inputs")
        inputs.population = {int(k): str(v) for k, v in (inputs.population or {}).items()}
        inc = dict(doc.get("incidence") or {})
        # log-scale spellings of the published operating point are accepted on input
        if "log_rho" in inc:
            inc["rho"] = float(np.exp(inc.pop("log_rho")))
        if "log_sigma" in inc:
            inc["sigma"] = float(np.exp(inc.pop("log_sigma")))
        if "sigma2" in inc:
            inc["sigma"] = float(np.sqrt(inc.pop("sigma2")))
        cfg = cls(
            inputs=inputs,
            seed=int(doc["seed"]),
            output_dir=str(doc.get("output_dir", "run")),
            catchment=_section(CatchmentSettings, doc.get("catchment"), "catchment"),
            incidence=_section(IncidenceSettings, inc, "incidence"),
            features=_section(FeatureSettings, doc.get("features"), "features"),
            priors=_section(PriorSpec, doc.get("priors"), "priors"),
            predict=_section(PredictSettings, doc.get("predict"), "predict"),
            aggregate=_section(AggregateSettings, doc.get("aggregate"), "aggregate"),
            base_dir=str(base_dir),
        )
        cfg.check_values()
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        try:
            doc = yaml.safe_load(path.read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise ValidationError(f"cannot read configuration {path}: {exc}") from exc
        return cls.from_dict(doc, path.parent)

    def resolve(self, p: str | None) -> Path | None:
        if p is None:
            return None
        p = Path(p)
        return p if p.is_absolute() else Path(self.base_dir) / p

    @property
    def out(self) -> Path:
        return self.resolve(self.output_dir)

    def check_values(self) -> None:
        self.catchment.params()
        IncidenceModelConfig(self.incidence.rho, self.incidence.sigma2)
        f = self.features
        if not 0 < f.alpha < 1 or f.bootstrap < 1 or f.cv_folds < 2:
            raise ValidationError("features: need 0 < alpha < 1, bootstrap >= 1, cv_folds >= 2")
        if any(not 0 <= t <= 1 for t in f.thresholds):
            raise ValidationError("features: thresholds must lie in [0, 1]")
        if self.predict.samples < 1:
            raise ValidationError("predict: samples must be positive")
        if self.predict.final_month not in ("reuse", "drop"):
            raise ValidationError("predict: final_month must be 'reuse' or 'drop'")
        if self.predict.months:
            parse_month_span(self.predict.months)
        parse_products(self.aggregate.products)

    def check_files(self) -> None:
        """Every referenced input must exist."""
        i = self.inputs
        paths = [i.friction, i.facilities, i.surveys, *i.population.values()]
        paths += [p for p in (i.zones, i.catchments) if p]
        missing = [p for p in paths if not self.resolve(p).is_file()]
        if not self.resolve(i.covariate_dir).is_dir():
            missing.append(i.covariate_dir)
        if not i.population:
            raise ValidationError("inputs.population needs at least one year")
        if missing:
            raise ValidationError(f"missing input files: {missing}")


def _section(cls, doc, name):
    doc = dict(doc or {})
    names = {f.name for f in fields(cls)}
    extra = set(doc) - names
    if extra:
        raise ValidationError(f"{name}: unknown keys {sorted(extra)}")
    try:
        return cls(**doc)
    except TypeError as exc:
        raise ValidationError(f"{name}: {exc}") from exc


def apply_overrides(doc: dict, items: Sequence[str]) -> dict:
    """Apply ``section.key=value`` overrides (values parsed as YAML) to a raw config mapping."""
    for item in items:
        key, sep, value = item.partition("=")
        if not sep:
            raise ValidationError(f"override {item!r} is not of the form key=value")
        node = doc
        parts = key.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = yaml.safe_load(value)
    return doc


def stage_seed(seed: int, stage: str) -> int:
    """Per-stage seed: first 32 bits of SeedSequence([seed, *utf8(stage)])."""
    return int(np.random.SeedSequence([int(seed), *stage.encode()]).generate_state(1)[0])


# --------------------------------------------------------------------------
# stages (each reads only files)


def _year_from_name(path) -> int:
    m = re.search(r"(\d{4})(?!.*\d{4})", Path(path).stem)
    if not m:
        raise ValidationError(f"cannot find a year in population file name {path}")
    return int(m.group(1))


def run_catchment(friction_path, population_paths: dict[int, Any], facilities_path, params: SeekCurveParams,
                  out_dir, official=None) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    friction = read_ascii_grid(friction_path)
    panel = read_facilities_csv(facilities_path)
    years = sorted({m.year for m in panel.months})
    if official is not None:
        panel = attach_catchments(panel, read_catchments_csv(official))
        unreachable = []
    else:
        missing = [y for y in years if y not in population_paths]
        if missing:
            raise ValidationError(f"no population raster for year(s) {missing}")
        fr = FrictionSurface(friction)
        facilities = panel.to_facilities(friction.spec)
        catchments, unreachable = {}, []
        times = travel_time_matrix(fr, facilities)
        for yr in years:
            pop = read_ascii_grid(population_paths[yr])
            res = compute_catchments(fr, pop, facilities, params, times=times)
            catchments[yr] = res.populations
            unreachable += [(yr, r, c) for r, c in res.unreachable]
        panel = replace(panel, catchments=catchments)
    paths = {
        "catchments": out / "catchments.csv",
        "facilities": out / "facilities_with_catchments.csv",
        "unreachable": out / "unreachable.csv",
    }
    write_catchments_csv(panel, paths["catchments"])
    write_facilities_csv(panel, paths["facilities"])
    write_unreachable_csv(unreachable, friction.spec, paths["unreachable"])
    return paths


def run_incidence(facilities_path, grid_path, rho: float, sigma2: float, out_dir,
                  search: Sequence[Sequence[float]] | None = None, folds: int = 5, seed: int = 0) -> dict[str, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    panel = read_facilities_csv(facilities_path)
    template = read_ascii_grid(grid_path)
    chosen = {"rho": float(rho), "sigma2": float(sigma2), "search": None}
    if search:
        result = select_hyperparameters(panel, [tuple(map(float, c)) for c in search], folds, seed)
        chosen = {"rho": result.rho, "sigma2": result.sigma2,
                  "search": [{"rho": r, "sigma2": s, "heldout_loglik": v} for r, s, v in result.scores],
                  "folds": folds, "seed": seed}
    cfg = IncidenceModelConfig(chosen["rho"], chosen["sigma2"])
    flds = fit_incidence(panel, cfg)
    surfaces = IncidenceSurfaceSet(list(panel.months), [predict_incidence_surface(f, template) for f in flds])
    surfaces.write(out)
    write_fit_report(flds, out / "fit_report.jsonl")
    (out / "hyperparameters.json").write_text(json.dumps(chosen, indent=1, sort_keys=True))
    return {"dir": out}


def run_features(surveys_path, covariate_dir, incidence_dir, settings: FeatureSettings, seed: int, out_path,
                 priors: PriorSpec = PriorSpec()) -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    surveys = read_surveys_csv(surveys_path)
    covariates = CovariateStack.from_directory(covariate_dir)
    surfaces = IncidenceSurfaceSet.read(incidence_dir)
    names = covariates.feature_names(settings.lags)
    sdict = asdict(settings)
    if settings.fixed is not None:
        unknown = [f for f in settings.fixed if f not in names]
        if unknown:
            raise ValidationError(f"unknown fixed features {unknown}")
        scores = CertaintyScores(names, np.array([1.0 if n in settings.fixed else 0.0 for n in names]), 0)
        chosen = CandidateFeatureSet(1.0, tuple(settings.fixed), float("nan"))
    else:
        data = feature_table(surveys, covariates, surfaces, names)
        scores = bootstrap_certainty(data, settings.bootstrap, settings.alpha, seed, names,
                                     settings.max_cond_size, settings.n_features)
        evaluate = prevalence_cv_evaluator(surveys, covariates, surfaces, settings.cv_folds, seed, priors,
                                           settings.cv_samples)
        chosen = select_final(scores, evaluate, settings.thresholds)
    write_features_json(out_path, chosen, scores, {**sdict, "seed": seed})
    return out_path


def run_prevalence(surveys_path, covariate_dir, incidence_dir, features_path, priors: PriorSpec, seed: int,
                   out_path, final_month: str = "reuse") -> Path:
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    surveys = read_surveys_csv(surveys_path)
    covariates = CovariateStack.from_directory(covariate_dir)
    surfaces = IncidenceSurfaceSet.read(incidence_dir)
    features = read_features_json(features_path)
    design = build_design(surveys, covariates, surfaces, features, final_month)
    model = fit_prevalence(design, priors, seed)
    model.final_month = final_month
    model.save(out_path)
    return out_path


def run_predict(model_path, covariate_dir, incidence_dir, months: str | None, samples: int, seed: int,
                out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    model = PrevalenceModel.load(model_path)
    covariates = CovariateStack.from_directory(covariate_dir)
    surfaces = IncidenceSurfaceSet.read(incidence_dir)
    span = parse_month_span(months) if months else list(surfaces.months)
    if model.final_month == "drop":
        span = [m for m in span if m.shift(1) in surfaces.months]
    template = surfaces.surfaces[0]
    cube = predict_prevalence(model, covariates, surfaces, template, span, samples, seed)
    path = out / "cube.bin"
    cube.write(path)
    means = np.mean(cube.data, axis=0)
    for t, m in enumerate(cube.months):
        write_ascii_grid(to_raster(means[t], cube), out / f"mean_{m.tag}.asc")
    return path


def _cube_months(cube: PosteriorSampleCube, idx: Sequence[int]) -> PosteriorSampleCube:
    return PosteriorSampleCube(cube.data[:, list(idx)], cube.spec, [cube.months[t] for t in idx], cube.seed,
                               cube.provenance)


def run_aggregate(cube_path, populations: dict[int, Any] | Any, products: str, out_dir, zones_path=None) -> Path:
    """Annual maps for every complete year plus the weighted monthly series.

    ``populations`` is either one raster path (used for every month) or a
    mapping year -> raster path.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cube_path = Path(cube_path)
    if cube_path.is_dir():
        cube_path = cube_path / "cube.bin"
    cube = PosteriorSampleCube.read(cube_path)
    prods = parse_products(products)
    zones = ZoneMap(read_ascii_grid(zones_path)) if zones_path else None
    if isinstance(populations, dict):
        pops = {int(y): read_ascii_grid(p) for y, p in populations.items()}
    else:
        single = read_ascii_grid(populations)
        pops = {m.year: single for m in cube.months}
    rows = []
    for yr in sorted({m.year for m in cube.months}):
        if yr not in pops:
            raise ValidationError(f"no population raster for {yr}")
        idx = [t for t, m in enumerate(cube.months) if m.year == yr]
        rows += weighted_series(_cube_months(cube, idx), pops[yr], zones)
    write_series_csv(rows, out / "series.csv")
    full_years = years_in(cube.months)
    if not full_years:
        logger.warning("no complete calendar year in the cube; annual maps skipped")
    for yr in full_years:
        annual = annual_mean_prevalence(cube, yr)
        for p in prods:
            if p[0] == "mean":
                write_ascii_grid(to_raster(annual.mean(axis=0), cube), out / f"mean_{yr}.asc")
            elif p[0] == "median":
                write_ascii_grid(to_raster(np.median(annual, axis=0), cube), out / f"median_{yr}.asc")
            elif p[0] == "iqr":
                write_ascii_grid(to_raster(iqr_map(annual), cube), out / f"iqr_{yr}.asc")
            elif p[0] == "exceed":
                _, thr, direction = p
                name = f"exceed_{thr:g}_{direction}_{yr}.asc"
                write_ascii_grid(to_raster(exceedance(annual, thr, direction), cube), out / name)
    return out


# --------------------------------------------------------------------------
# orchestration


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _digest_tree(root: Path, sub: Path) -> dict[str, str]:
    if sub.is_file():
        return {sub.relative_to(root).as_posix(): sha256_file(sub)}
    if not sub.exists():
        return {}
    return {p.relative_to(root).as_posix(): sha256_file(p) for p in sorted(sub.rglob("*")) if p.is_file()}


def _fingerprint(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()


def versions() -> dict[str, str]:
    return {"prevmap": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "pyyaml": yaml.__version__}


def _stage_plan(cfg: RunConfig) -> list[dict]:
    out = cfg.out
    i = cfg.inputs
    r = cfg.resolve
    pops = {yr: r(p) for yr, p in sorted(i.population.items())}
    seeds = {s: stage_seed(cfg.seed, s) for s in STAGES}
    fac = out / "catchment" / "facilities_with_catchments.csv"
    inc = out / "incidence"
    feats = out / "features" / "features.json"
    model = out / "prevalence" / "model.json"
    cubes = out / "cubes"
    plan = [
        dict(name="catchment", output=out / "catchment",
             inputs=[r(i.friction), r(i.facilities), *pops.values()] + ([r(i.catchments)] if i.catchments else []),
             params=asdict(cfg.catchment),
             run=lambda: run_catchment(r(i.friction), pops, r(i.facilities), cfg.catchment.params(),
                                       out / "catchment", r(i.catchments))),
        dict(name="incidence", output=inc, inputs=[fac, r(i.friction)],
             params={**asdict(cfg.incidence), "seed": seeds["incidence"]},
             run=lambda: run_incidence(fac, r(i.friction), cfg.incidence.rho, cfg.incidence.sigma2, inc,
                                       cfg.incidence.search, cfg.incidence.folds, seeds["incidence"])),
        dict(name="features", output=out / "features", inputs=[r(i.surveys), r(i.covariate_dir), inc],
             params={**asdict(cfg.features), "priors": asdict(cfg.priors), "seed": seeds["features"]},
             run=lambda: run_features(r(i.surveys), r(i.covariate_dir), inc, cfg.features, seeds["features"],
                                      feats, cfg.priors)),
        dict(name="prevalence", output=out / "prevalence", inputs=[r(i.surveys), r(i.covariate_dir), inc, feats],
             params={"priors": asdict(cfg.priors), "final_month": cfg.predict.final_month,
                     "seed": seeds["prevalence"]},
             run=lambda: run_prevalence(r(i.surveys), r(i.covariate_dir), inc, feats, cfg.priors,
                                        seeds["prevalence"], model, cfg.predict.final_month)),
        dict(name="predict", output=cubes, inputs=[model, r(i.covariate_dir), inc],
             params={"months": cfg.predict.months, "samples": cfg.predict.samples, "seed": seeds["predict"]},
             run=lambda: run_predict(model, r(i.covariate_dir), inc, cfg.predict.months, cfg.predict.samples,
                                     seeds["predict"], cubes)),
        dict(name="aggregate", output=out / "products",
             inputs=[cubes, *pops.values()] + ([r(i.zones)] if i.zones else []),
             params=asdict(cfg.aggregate),
             run=lambda: run_aggregate(cubes / "cube.bin", pops, cfg.aggregate.products, out / "products",
                                       r(i.zones))),
    ]
    for st in plan:
        st["seed"] = seeds[st["name"]]
    return plan


def _input_digests(paths: Sequence[Path], root: Path | None = None) -> dict[str, str]:
    out = {}
    for p in paths:
        p = Path(p)
        # upstream outputs are keyed relative to the run directory so a moved run still resumes
        key = p.as_posix()
        if root is not None and p.is_relative_to(root):
            key = "$out/" + p.relative_to(root).as_posix()
        if p.is_dir():
            for k, v in _digest_tree(p, p).items():
                out[f"{key}/{k}"] = v
        elif p.is_file():
            out[key] = sha256_file(p)
        else:
            out[key] = "missing"
    return out


def _outputs_intact(out: Path, recorded: dict[str, str]) -> bool:
    if not recorded:
        return False
    for rel, digest in recorded.items():
        p = out / rel
        if not p.is_file() or sha256_file(p) != digest:
            return False
    return True


def run_pipeline(cfg: RunConfig, resume: bool = False, stop_after: str | None = None) -> dict:
    """Run every stage in order and return the manifest written to ``<output_dir>/manifest.json``.

    With ``resume`` a stage is skipped when the previous manifest shows it
    completed with the same parameters and input digests and its outputs are
    unchanged on disk; once one stage re-runs, all later stages re-run too.
    """
    cfg.check_files()
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    mpath = out / MANIFEST
    previous = {}
    if resume and mpath.is_file():
        previous = json.loads(mpath.read_text()).get("stages", {})
    cfg.save(out / "config.resolved.yaml")
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "seed": cfg.seed,
        "config_sha256": sha256_file(out / "config.resolved.yaml"),
        "versions": versions(),
        "stages": {},
        "files": {},
    }
    rerun = not resume
    try:
        for st in _stage_plan(cfg):
            name = st["name"]
            fp = _fingerprint({"params": st["params"], "inputs": _input_digests(st["inputs"], cfg.out)})
            prev = previous.get(name, {})
            if (not rerun and prev.get("status") == "completed" and prev.get("fingerprint") == fp
                    and _outputs_intact(out, prev.get("outputs", {}))):
                manifest["stages"][name] = {**prev, "skipped": True}
                logger.info("stage %s: up to date", name)
            else:
                rerun = True
                if st["output"].exists():
                    shutil.rmtree(st["output"])
                logger.info("stage %s: running", name)
                t0 = time.perf_counter()
                manifest["stages"][name] = {"status": "running", "seed": st["seed"], "fingerprint": fp}
                st["run"]()
                manifest["stages"][name] = {
                    "status": "completed",
                    "seed": st["seed"],
                    "fingerprint": fp,
                    "seconds": round(time.perf_counter() - t0, 3),
                    "skipped": False,
                    "outputs": _digest_tree(out, st["output"]),
                }
            if stop_after == name:
                break
    except PrevmapError as exc:
        for name, rec in manifest["stages"].items():
            if rec.get("status") == "running":
                rec["status"] = "failed"
                rec["error"] = f"{type(exc).__name__}: {exc}"
        _write_manifest(out, manifest)
        raise
    _write_manifest(out, manifest)
    return manifest


def _write_manifest(out: Path, manifest: dict) -> None:
    manifest["files"] = {k: v for k, v in _digest_tree(out, out).items() if k != MANIFEST}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True))


def synthetic_run_config(data_dir, scenario: SyntheticScenario, seed: int = 1, output_dir: str = "run") -> RunConfig:
    """A small, fast configuration for a dataset written by :func:`generate_synthetic`."""
    years = sorted({m.year for m in scenario.months()})
    inputs = InputPaths(
        friction="friction.asc",
        population={yr: f"population_{yr}.asc" for yr in years},
        facilities="facilities.csv",
        surveys="surveys.csv",
        covariate_dir="covariates",
        zones="zones.asc",
    )
    return RunConfig(
        inputs=inputs,
        seed=seed,
        output_dir=output_dir,
        incidence=IncidenceSettings(rho=float(scenario.incidence_rho), sigma=float(np.sqrt(scenario.incidence_sigma2))),
        features=FeatureSettings(bootstrap=50, thresholds=[0.3, 0.6, 0.9], cv_folds=3, cv_samples=50,
                                 max_cond_size=2),
        predict=PredictSettings(samples=100),
        base_dir=str(data_dir),
    )


# --------------------------------------------------------------------------
# command line


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("-v", "--verbose", action="count", default=0, help="more logging (-v info, -vv debug)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="prevmap", description="Facility-incidence-informed prevalence mapping.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("catchment", help="catchment populations from travel time")
    p.add_argument("--friction", required=True)
    p.add_argument("--population", required=True, nargs="+", help="one raster per year; year taken from the name")
    p.add_argument("--facilities", required=True)
    p.add_argument("--alpha", type=float, default=CatchmentSettings.alpha)
    p.add_argument("--sigma", type=float, default=CatchmentSettings.sigma)
    p.add_argument("--beta", type=float, default=CatchmentSettings.beta)
    p.add_argument("--catchments", help="use these catchment populations instead of modelling them")
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("fit-incidence", help="monthly log-incidence surfaces")
    p.add_argument("--facilities", required=True)
    p.add_argument("--grid", required=True, help="template raster (missing cells stay missing)")
    p.add_argument("--rho", type=float, default=IncidenceSettings.rho)
    p.add_argument("--sigma2", type=float, default=IncidenceSettings.sigma**2)
    p.add_argument("--search", help="CSV with columns rho,sigma2 of candidate hyperparameters")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("select-features", help="bootstrap causal feature selection")
    p.add_argument("--surveys", required=True)
    p.add_argument("--covariate-dir", required=True)
    p.add_argument("--incidence-dir", required=True)
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--bootstrap", type=int, default=100)
    p.add_argument("--max-cond-size", type=int, default=3)
    p.add_argument("--thresholds", default=",".join(str(t) for t in DEFAULT_THRESHOLDS))
    p.add_argument("--lags", default="0,1,2")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("fit-prevalence", help="fit the prevalence model")
    p.add_argument("--surveys", required=True)
    p.add_argument("--covariate-dir", required=True)
    p.add_argument("--incidence-dir", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--final-month", choices=("reuse", "drop"), default="reuse")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("predict-prevalence", help="posterior prevalence sample cube")
    p.add_argument("--model", required=True)
    p.add_argument("--covariate-dir", required=True)
    p.add_argument("--incidence-dir", required=True)
    p.add_argument("--months", help="YYYY-MM:YYYY-MM (default: every incidence month)")
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("aggregate", help="maps and series from a sample cube")
    p.add_argument("--cube", required=True, help="cube file or directory containing cube.bin")
    p.add_argument("--population", required=True, nargs="+",
                   help="one raster, or one per year with the year in the file name")
    p.add_argument("--zones")
    p.add_argument("--products", default=AggregateSettings.products)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("run", help="full pipeline from a configuration file")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--output-dir")
    p.add_argument("--resume", action="store_true", help="skip stages whose inputs and outputs are unchanged")
    p.add_argument("--stop-after", choices=STAGES)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a configuration value, e.g. predict.samples=50")

    p = sub.add_parser("synth", help="write a synthetic dataset and a matching configuration")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--scenario", help="YAML mapping of SyntheticScenario fields")

    for p in sub.choices.values():
        _add_common(p)
    return parser


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _dispatch(args) -> None:
    cmd = args.command
    if cmd == "catchment":
        pops = {_year_from_name(p): p for p in args.population}
        run_catchment(args.friction, pops, args.facilities, SeekCurveParams(args.alpha, args.sigma, args.beta),
                      args.out, args.catchments)
    elif cmd == "fit-incidence":
        search = None
        if args.search:
            import csv

            with open(args.search, newline="") as fh:
                search = [[float(r["rho"]), float(r["sigma2"])] for r in csv.DictReader(fh)]
        run_incidence(args.facilities, args.grid, args.rho, args.sigma2, args.out_dir, search, args.folds, args.seed)
    elif cmd == "select-features":
        settings = FeatureSettings(alpha=args.alpha, bootstrap=args.bootstrap, max_cond_size=args.max_cond_size,
                                   thresholds=_floats(args.thresholds), lags=[int(v) for v in _floats(args.lags)],
                                   cv_folds=args.folds)
        run_features(args.surveys, args.covariate_dir, args.incidence_dir, settings, args.seed, args.out)
    elif cmd == "fit-prevalence":
        run_prevalence(args.surveys, args.covariate_dir, args.incidence_dir, args.features, PriorSpec(), args.seed,
                       args.out, args.final_month)
    elif cmd == "predict-prevalence":
        run_predict(args.model, args.covariate_dir, args.incidence_dir, args.months, args.samples, args.seed,
                    args.out_dir)
    elif cmd == "aggregate":
        if len(args.population) == 1:
            pops = args.population[0]
        else:
            pops = {_year_from_name(p): p for p in args.population}
        run_aggregate(args.cube, pops, args.products, args.out_dir, args.zones)
    elif cmd == "run":
        path = Path(args.config)
        try:
            doc = yaml.safe_load(path.read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise ValidationError(f"cannot read configuration {path}: {exc}") from exc
        doc = apply_overrides(doc or {}, args.set)
        if args.seed is not None:
            doc["seed"] = args.seed
        if args.output_dir is not None:
            doc["output_dir"] = str(Path(args.output_dir).resolve())
        cfg = RunConfig.from_dict(doc, path.parent)
        manifest = run_pipeline(cfg, resume=args.resume, stop_after=args.stop_after)
        for name, rec in manifest["stages"].items():
            state = "skipped" if rec.get("skipped") else f"{rec.get('seconds', 0):.1f}s"
            print(f"{name:<11} {rec['status']:<10} {state}")
        print(f"manifest: {cfg.out / MANIFEST}")
    elif cmd == "synth":
        kw = {}
        if args.scenario:
            kw = yaml.safe_load(Path(args.scenario).read_text()) or {}
            for key in ("static_covariates", "dynamic_covariates", "cluster_size"):
                if key in kw:
                    kw[key] = tuple(kw[key])
        kw.setdefault("seed", args.seed)
        try:
            scenario = SyntheticScenario(**kw)
        except TypeError as exc:
            raise ValidationError(f"bad scenario: {exc}") from exc
        out = Path(args.out_dir)
        generate_synthetic(scenario, out)
        synthetic_run_config(out, scenario, seed=scenario.seed).save(out / "config.yaml")
        print(f"wrote synthetic dataset and config.yaml to {out}")


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = (logging.WARNING, logging.INFO, logging.DEBUG)[min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        _dispatch(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
