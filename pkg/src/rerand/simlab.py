"""Simulation harness: data-generating processes, truth, and metric reports.

The built-in families draw three baseline variables (x1 normal with mean 1, a
binary stratum whose rate depends on x1, and an independent standard-normal
x2), then continuous or binary potential outcomes with an arm-by-stratum-by-
x2^2 interaction and a logistic missingness mechanism. ``custom`` exposes the
same term menu with free coefficients, which is enough to build correctly and
incorrectly specified working models on demand.

Replicate r's data depend only on (master_seed, r); workers never share
state, so reports are parallelism-invariant. Wall-clock time is kept out of
the canonical report payload for the same reason.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from . import dml as dml_mod
from . import inference, mestimators
from ._seeds import derive_seed
from .allocation import imbalance_simple, imbalance_stratified, rerandomize
from .data_model import Design, EstimandSpec, TrialFrame
from .errors import DiagnosticWarning, NumericError, RerandError, ValidationError

ESTIMATOR_KINDS = ("unadjusted", "ancova", "glm2", "drwls", "mixed", "dml")


@dataclass(frozen=True)
class CustomDgp:
    """Coefficient records over the shared covariate law.

    Outcome mean: y_intercept + y_arm*a + y_x1*x1 + y_x2*x2 + y_stratum*s
    + y_arm_stratum_x2sq*a*s*x2^2 + y_exp_x1*exp(x1) + y_abs_x2*|x2|;
    continuous outcomes add N(0, y_sd^2) noise, binary outcomes pass the mean
    through expit. Missingness: expit of the analogous r_* linear form with an
    extra r_x2sq*x2^2 term.
    """

    binary: bool = False
    y_intercept: float = 0.0
    y_arm: float = 0.0
    y_x1: float = 0.0
    y_x2: float = 0.0
    y_stratum: float = 0.0
    y_arm_stratum_x2sq: float = 0.0
    y_exp_x1: float = 0.0
    y_abs_x2: float = 0.0
    y_sd: float = 1.0
    r_intercept: float = 0.6
    r_arm: float = 0.6
    r_x1: float = 0.0
    r_x2: float = 1.0
    r_stratum: float = 1.0
    r_x2sq: float = 0.0


_SEC7_CONTINUOUS = CustomDgp(
    binary=False, y_arm_stratum_x2sq=4.0, y_exp_x1=2.0, y_abs_x2=1.0, y_sd=1.0
)
_SEC7_BINARY = CustomDgp(
    binary=True, y_intercept=-4.0, y_arm_stratum_x2sq=4.0, y_exp_x1=1.0, y_abs_x2=-1.0
)


@dataclass(frozen=True)
class DgpSpec:
    family: str
    n: int
    missingness: bool = False
    custom: CustomDgp | None = None

    def __post_init__(self) -> None:
        if self.family not in ("continuous_sec7", "binary_sec7", "custom"):
            raise ValidationError(f"unknown DGP family '{self.family}'")
        if self.family == "custom" and self.custom is None:
            raise ValidationError("custom family requires coefficient records")
        if self.n < 2:
            raise ValidationError("n must be at least 2")

    def coefficients(self) -> CustomDgp:
        if self.family == "continuous_sec7":
            return _SEC7_CONTINUOUS
        if self.family == "binary_sec7":
            return _SEC7_BINARY
        return self.custom


@dataclass(frozen=True)
class CompleteTrial:
    """Complete data with both potential outcomes retained."""

    x1: np.ndarray
    x2: np.ndarray
    s: np.ndarray
    y: tuple[np.ndarray, np.ndarray]  # (y(0), y(1))
    r: tuple[np.ndarray, np.ndarray]  # (r(0), r(1))
    missingness: bool

    def allocation_frame(self) -> TrialFrame:
        return TrialFrame(
            covariates=np.column_stack([self.x1, self.x2]),
            covariate_names=("x1", "x2"),
            stratum=self.s.astype(str),
        )

    def reveal(self, arms: np.ndarray) -> TrialFrame:
        arms = np.asarray(arms)
        y = np.where(arms == 1, self.y[1], self.y[0]).astype(float)
        if self.missingness:
            robs = np.where(arms == 1, self.r[1], self.r[0])
            y = np.where(robs == 1, y, np.nan)
        return TrialFrame(
            covariates=np.column_stack([self.x1, self.x2]),
            covariate_names=("x1", "x2"),
            outcome=y,
            arm=arms,
            stratum=self.s.astype(str),
        )


def _potential_draws(coef: CustomDgp, rng: np.random.Generator, n: int):
    x1 = rng.normal(1.0, 1.0, n)
    s = (rng.random(n) < 0.4 + 0.2 * (x1 < 1.0)).astype(np.int8)
    x2 = rng.normal(0.0, 1.0, n)
    ys = []
    for a in (0, 1):
        mean = (
            coef.y_intercept
            + coef.y_arm * a
            + coef.y_x1 * x1
            + coef.y_x2 * x2
            + coef.y_stratum * s
            + coef.y_arm_stratum_x2sq * a * s * x2**2
            + coef.y_exp_x1 * np.exp(x1)
            + coef.y_abs_x2 * np.abs(x2)
        )
        if coef.binary:
            ys.append((rng.random(n) < expit(mean)).astype(float))
        else:
            ys.append(mean + coef.y_sd * rng.normal(0.0, 1.0, n))
    rs = []
    for a in (0, 1):
        logit = (
            coef.r_intercept
            + coef.r_arm * a
            + coef.r_x1 * x1
            + coef.r_x2 * x2
            + coef.r_stratum * s
            + coef.r_x2sq * x2**2
        )
        rs.append((rng.random(n) < expit(logit)).astype(np.int8))
    return x1, x2, s, ys, rs


def generate_trial(dgp: DgpSpec, seed: int) -> CompleteTrial:
    """Draw one complete-data trial; deterministic given the seed."""
    rng = np.random.default_rng(seed)
    x1, x2, s, ys, rs = _potential_draws(dgp.coefficients(), rng, dgp.n)
    return CompleteTrial(
        x1=x1,
        x2=x2,
        s=s,
        y=(ys[0], ys[1]),
        r=(rs[0], rs[1]),
        missingness=dgp.missingness,
    )


@dataclass(frozen=True)
class TruthEstimate:
    delta_star: float
    mcse: float


def true_delta(
    dgp: DgpSpec, estimand: EstimandSpec, seed: int, draws: int = 10_000_000
) -> TruthEstimate:
    """Monte-Carlo ground truth from complete-data potential outcomes."""
    rng = np.random.default_rng(seed)
    coef = dgp.coefficients()
    sums = np.zeros(5)  # y1, y0, y1^2, y0^2, y1*y0
    remaining = draws
    while remaining > 0:
        batch = min(remaining, 1_000_000)
        _, _, _, ys, _ = _potential_draws(coef, rng, batch)
        y0, y1 = ys
        sums += [y1.sum(), y0.sum(), (y1**2).sum(), (y0**2).sum(), (y1 * y0).sum()]
        remaining -= batch
    mu1, mu0 = sums[0] / draws, sums[1] / draws
    var1 = sums[2] / draws - mu1**2
    var0 = sums[3] / draws - mu0**2
    cov = sums[4] / draws - mu1 * mu0
    delta = estimand.value(mu1, mu0)
    f1, f0 = estimand.gradient(mu1, mu0)
    variance = f1**2 * var1 + f0**2 * var0 + 2 * f1 * f0 * cov
    return TruthEstimate(float(delta), float(math.sqrt(max(variance, 0.0) / draws)))


# ---------------------------------------------------------------------------
# Estimator specs and the replicated runner.


@dataclass(frozen=True)
class SimEstimator:
    """One analysis arm of a simulation: estimator kind plus its options."""

    kind: str
    label: str = ""
    estimand: str = "difference"
    covariates: tuple[str, ...] = ("x1", "x2", "stratum")
    interactions: bool = False
    link: str = "identity"
    missing_covariates: tuple[str, ...] | None = None
    outcome_learner: dml_mod.LearnerSpec | None = None
    missingness_learner: dml_mod.LearnerSpec | None = None
    folds: int = 5
    fold_mode: str = "plain"

    def __post_init__(self) -> None:
        if self.kind not in ESTIMATOR_KINDS:
            raise ValidationError(f"unknown estimator kind '{self.kind}'")
        if not self.label:
            object.__setattr__(self, "label", self.kind)

    def estimand_spec(self) -> EstimandSpec:
        return EstimandSpec(self.estimand)


@dataclass(frozen=True)
class SimConfig:
    dgp: DgpSpec
    design: Design
    estimators: tuple[SimEstimator, ...]
    replicates: int
    master_seed: int
    alpha: float = 0.05
    ci_draws: int = 10_000
    workers: int = 1
    truth: dict | None = None  # contrast -> (delta_star, mcse)
    truth_draws: int = 10_000_000
    keep_replicates: bool = False

    def __post_init__(self) -> None:
        if self.replicates < 1:
            raise ValidationError("replicates must be at least 1")
        if not self.estimators:
            raise ValidationError("at least one estimator is required")


@dataclass(frozen=True)
class EstimatorReport:
    label: str
    bias: float | None
    ese: float | None
    ase_star: float | None
    cp_normal: float | None
    cp_true: float | None
    mean_r2_hat: float | None
    replicates_used: int
    failures: int
    diagnostic_warnings: int


@dataclass(frozen=True)
class SimReport:
    schema: int
    config_hash: str
    master_seed: int
    n: int
    replicates: int
    alpha: float
    truth: dict
    design: dict
    rows: tuple[EstimatorReport, ...]
    elapsed_seconds: float
    per_replicate: dict | None = None

    def to_dict(self) -> dict:
        """Canonical payload: excludes wall-clock time so that reruns with the
        same master seed are byte-identical regardless of worker count."""
        payload = {
            "schema": self.schema,
            "config_hash": self.config_hash,
            "master_seed": self.master_seed,
            "n": self.n,
            "replicates": self.replicates,
            "alpha": self.alpha,
            "truth": self.truth,
            "design": self.design,
            "estimators": [dataclasses.asdict(row) for row in self.rows],
        }
        if self.per_replicate is not None:
            payload["per_replicate"] = self.per_replicate
        return payload

    def to_json(self) -> str:
        return json.dumps(_jsonable(self.to_dict()), sort_keys=True, indent=2) + "\n"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        obj = float(obj)
    if isinstance(obj, float):
        if math.isinf(obj):
            return "inf" if obj > 0 else "-inf"
        if math.isnan(obj):
            return "nan"
    return obj


def config_hash(config: SimConfig) -> str:
    """Hash of the statistical configuration (worker count excluded)."""
    payload = dataclasses.asdict(config)
    payload.pop("workers", None)
    payload.pop("keep_replicates", None)
    text = json.dumps(_jsonable(payload), sort_keys=True)
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def apply_estimator(
    est: SimEstimator, frame: TrialFrame, design: Design, rep_seed: int, index: int
):
    estimand = est.estimand_spec()
    if est.kind == "unadjusted":
        return mestimators.estimate_unadjusted(frame, estimand)
    if est.kind == "ancova":
        return mestimators.estimate_ancova(
            frame, est.covariates, est.interactions, estimand
        )
    if est.kind == "glm2":
        return mestimators.estimate_gcomp_logistic(
            frame, est.covariates, True, estimand
        )
    if est.kind == "drwls":
        return mestimators.estimate_drwls(
            frame,
            est.covariates,
            est.missing_covariates or est.covariates,
            est.link,
            est.interactions,
            estimand,
        )
    if est.kind == "mixed":
        return mestimators.estimate_mixed_ancova(
            frame, est.covariates, est.interactions, estimand
        )
    outcome_learner = est.outcome_learner or dml_mod.LearnerSpec(
        kind="stump_ensemble", trees=200, learning_rate=0.1
    )
    missingness_learner = est.missingness_learner
    if missingness_learner is None and frame.observed.min() == 0:
        missingness_learner = dml_mod.LearnerSpec(kind="glm", link="logit")
    return dml_mod.estimate_dml(
        frame,
        outcome_learner,
        missingness_learner,
        est.folds,
        est.fold_mode,
        estimand,
        derive_seed(rep_seed, "dml", index),
        design.pi,
    )


def _analysis_units(est: SimEstimator, result, frame: TrialFrame, design: Design):
    """Arms, strata, and X^r per analysis unit (clusters for the mixed model)."""
    Xr = frame.covariates[:, list(design.rerand_covariates)]
    if est.kind != "mixed":
        return frame.arm, frame.stratum, Xr
    labels = result.details["cluster_labels"]
    arms = result.details["cluster_arms"]
    rows = [np.flatnonzero(frame.cluster == lab) for lab in labels]
    Xr_c = np.vstack([Xr[idx].mean(axis=0) for idx in rows]) if Xr.shape[1] else Xr[:0]
    strata = None
    if frame.stratum is not None:
        strata = np.array([frame.stratum[idx[0]] for idx in rows], dtype=object)
    return arms, strata, Xr_c


def _replicate(config: SimConfig, truth: dict, r: int) -> dict:
    rep_seed = derive_seed(config.master_seed, "replicate", r)
    trial = generate_trial(config.dgp, derive_seed(rep_seed, "data"))
    alloc = rerandomize(
        trial.allocation_frame(), config.design, derive_seed(rep_seed, "alloc")
    )
    frame = trial.reveal(alloc.arms)
    design = config.design
    out = {}
    for idx, est in enumerate(config.estimators):
        record: dict = {"failed": False}
        try:
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", DiagnosticWarning)
                result = apply_estimator(est, frame, design, rep_seed, idx)
                record.update(
                    _replicate_inference(
                        est, result, frame, design, config, rep_seed, idx, truth
                    )
                )
                record["warnings"] = sum(
                    1 for w in caught if issubclass(w.category, DiagnosticWarning)
                )
        except (RerandError, np.linalg.LinAlgError) as exc:
            record = {"failed": True, "error": f"{type(exc).__name__}: {exc}", "warnings": 0}
        out[est.label] = record
    return out


def scheme_inference(
    est: SimEstimator,
    result,
    frame: TrialFrame,
    design: Design,
    alpha: float,
    ci_draws: int,
    ci_seed: int,
) -> dict:
    """Scheme-appropriate variance, R^2, and both interval types.

    ``v_hat``/``ase`` always use the simple-randomization sandwich formula;
    ``ci_true`` uses the limit law matching the design's scheme (normal for
    non-rerandomized schemes, the truncated mixture otherwise, with the
    stratified variance and R^2 plug-ins under stratified schemes, and the
    projection sampler for the general weight-matrix criterion).
    """
    arms, strata, Xr = _analysis_units(est, result, frame, design)
    ifv = result.if_values
    n_units = len(ifv)
    pi = design.pi
    crossfit = est.kind == "dml"
    fold_ids = result.details["fold_plan"].assignment if crossfit else None

    if crossfit:
        v_simple = inference.variance_crossfit(ifv, fold_ids)
    else:
        v_simple = inference.variance_simple(ifv)

    r2 = None
    limit_spec = None
    if design.rerandomized and design.q >= 1:
        if design.scheme == "rerandomized":
            if crossfit:
                r2 = inference.rsquared_crossfit(ifv, arms, Xr, pi, fold_ids)
            else:
                r2 = inference.rsquared_simple(ifv, arms, Xr, pi)
            v_for_ci = v_simple
            c_hat = inference.if_imbalance_covariance(ifv, arms, Xr, pi)
            _, var_i = imbalance_simple(Xr, arms)
        else:
            if crossfit and est.fold_mode == "stratum_arm":
                v_for_ci = inference.variance_crossfit_stratified(
                    ifv, arms, strata, pi, fold_ids
                )
                r2 = inference.rsquared_crossfit_stratified(
                    ifv, arms, strata, Xr, pi, fold_ids
                )
            else:
                v_for_ci = inference.variance_stratified(ifv, arms, strata, pi)
                r2 = inference.rsquared_stratified(ifv, arms, strata, Xr, pi)
            c_hat = inference.if_imbalance_covariance_stratified(
                ifv, arms, strata, Xr, pi
            )
            _, var_i = imbalance_stratified(Xr, arms, strata)
        projection = None
        if design.distance.kind == "general":
            n_var_i = n_units * var_i
            projection = (c_hat, n_var_i, design.distance.realize(n_var_i))
        limit_spec = inference.LimitSpec(
            V=v_for_ci,
            R2=r2,
            q=design.q,
            t=design.threshold_t,
            distance=design.distance,
            stratified=design.scheme == "stratified_rerandomized",
            projection=projection,
        )
    elif design.scheme == "stratified":
        v_for_ci = inference.variance_stratified(ifv, arms, strata, pi)
        if design.q >= 1:
            r2 = inference.rsquared_stratified(ifv, arms, strata, Xr, pi)
    else:
        v_for_ci = v_simple
        if design.q >= 1:
            r2 = inference.rsquared_simple(ifv, arms, Xr, pi)

    ci_normal = inference.normal_interval(result.delta_hat, v_simple, n_units, alpha)
    if limit_spec is None:
        ci_true = inference.normal_interval(result.delta_hat, v_for_ci, n_units, alpha)
    else:
        ci_true = inference.confidence_interval(
            result.delta_hat, limit_spec, n_units, alpha, ci_draws, ci_seed
        )
    return {
        "v_hat": v_simple,
        "v_scheme": v_for_ci,
        "r2_hat": r2,
        "ase": math.sqrt(v_simple / n_units),
        "ci_normal": ci_normal,
        "ci_true": ci_true,
        "n_units": n_units,
    }


def _replicate_inference(
    est: SimEstimator,
    result,
    frame: TrialFrame,
    design: Design,
    config: SimConfig,
    rep_seed: int,
    index: int,
    truth: dict,
) -> dict:
    info = scheme_inference(
        est,
        result,
        frame,
        design,
        config.alpha,
        config.ci_draws,
        derive_seed(rep_seed, "ci", index),
    )
    delta_star = truth[est.estimand]["delta_star"]
    normal_ci = info["ci_normal"]
    true_ci = info["ci_true"]
    return {
        "delta": result.delta_hat,
        "v_hat": info["v_hat"],
        "r2_hat": info["r2_hat"],
        "ase": info["ase"],
        "cover_normal": normal_ci.lower <= delta_star <= normal_ci.upper,
        "cover_true": true_ci.lower <= delta_star <= true_ci.upper,
    }


def _worker(args) -> tuple[int, dict]:
    config, truth, r = args
    return r, _replicate(config, truth, r)


def run_simulation(config: SimConfig) -> SimReport:
    """Run the replicated experiment and aggregate the metric table.

    Estimator failures inside a replicate are recorded and excluded; more
    than 2% failures for any estimator fails the whole run.
    """
    start = time.monotonic()
    contrasts = {est.estimand for est in config.estimators}
    truth: dict = {}
    for contrast in sorted(contrasts):
        if config.truth and contrast in config.truth:
            entry = config.truth[contrast]
            truth[contrast] = {
                "delta_star": float(entry[0] if not isinstance(entry, dict) else entry["delta_star"]),
                "mcse": float(entry[1] if not isinstance(entry, dict) else entry["mcse"]),
            }
        else:
            est = true_delta(
                config.dgp,
                EstimandSpec(contrast),
                derive_seed(config.master_seed, "truth", contrast),
                config.truth_draws,
            )
            truth[contrast] = {"delta_star": est.delta_star, "mcse": est.mcse}

    tasks = [(config, truth, r) for r in range(config.replicates)]
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            results = dict(pool.map(_worker, tasks, chunksize=8))
    else:
        results = dict(map(_worker, tasks))

    rows = []
    per_replicate: dict = {} if config.keep_replicates else None
    for est in config.estimators:
        records = [results[r][est.label] for r in range(config.replicates)]
        good = [rec for rec in records if not rec["failed"]]
        failures = len(records) - len(good)
        if failures > 0.02 * config.replicates:
            raise NumericError(
                f"estimator '{est.label}' failed in {failures} of "
                f"{config.replicates} replicates (> 2%)"
            )
        deltas = np.array([rec["delta"] for rec in good])
        delta_star = truth[est.estimand]["delta_star"]
        r2s = [rec["r2_hat"] for rec in good if rec["r2_hat"] is not None]
        rows.append(
            EstimatorReport(
                label=est.label,
                bias=float(deltas.mean() - delta_star) if good else None,
                ese=float(deltas.std(ddof=1)) if len(good) >= 2 else None,
                ase_star=float(np.mean([rec["ase"] for rec in good])) if good else None,
                cp_normal=float(np.mean([rec["cover_normal"] for rec in good]))
                if good
                else None,
                cp_true=float(np.mean([rec["cover_true"] for rec in good]))
                if good
                else None,
                mean_r2_hat=float(np.mean(r2s)) if r2s else None,
                replicates_used=len(good),
                failures=failures,
                diagnostic_warnings=int(sum(rec.get("warnings", 0) for rec in records)),
            )
        )
        if per_replicate is not None:
            per_replicate[est.label] = {
                "delta": [rec["delta"] for rec in good],
                "v_hat": [rec["v_hat"] for rec in good],
                "r2_hat": [rec["r2_hat"] for rec in good],
            }

    design_summary = dataclasses.asdict(config.design)
    return SimReport(
        schema=1,
        config_hash=config_hash(config),
        master_seed=config.master_seed,
        n=config.dgp.n,
        replicates=config.replicates,
        alpha=config.alpha,
        truth=truth,
        design=design_summary,
        rows=tuple(rows),
        elapsed_seconds=time.monotonic() - start,
        per_replicate=per_replicate,
    )


def report_csv_lines(report: SimReport) -> list[str]:
    """Plot-ready CSV mirror of the per-estimator metric table."""
    header = (
        "estimator,bias,ese,ase_star,cp_normal,cp_true,mean_r2_hat,"
        "replicates_used,failures"
    )
    lines = [header]
    for row in report.rows:
        cells = [
            row.label,
            *(
                "" if v is None else repr(float(v))
                for v in (
                    row.bias,
                    row.ese,
                    row.ase_star,
                    row.cp_normal,
                    row.cp_true,
                    row.mean_r2_hat,
                )
            ),
            str(row.replicates_used),
            str(row.failures),
        ]
        lines.append(",".join(cells))
    return lines
