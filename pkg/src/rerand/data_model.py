"""Shared data currency: trial datasets, designs, estimands, and result records.

A :class:`TrialFrame` holds one two-arm experiment's per-unit records as dense
column-major arrays. Frames are immutable after construction and safe to share
across workers. CSV ingestion follows the reserved-name schema documented in
:func:`load_csv`.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from .errors import DataError, ParseError, ValidationError

RESERVED_COLUMNS = ("outcome", "observed", "arm", "stratum", "cluster")

SCHEMES = ("simple", "stratified", "rerandomized", "stratified_rerandomized")


@dataclass(frozen=True)
class UnitRecord:
    """One unit's observed data: (R*Y, R, A, X) plus optional stratum/cluster."""

    outcome: float | None
    observed: int
    arm: int | None
    covariates: np.ndarray
    stratum: str | None = None
    cluster: str | None = None


def _readonly(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class TrialFrame:
    """Immutable per-unit trial data.

    Parameters
    ----------
    covariates : (n, p) float array, all entries finite.
    covariate_names : p column labels.
    outcome : optional (n,) float array with NaN for missing outcomes.
    observed : optional (n,) 0/1 array; derived from ``outcome`` when omitted.
    arm : optional (n,) 0/1 array; absent for pre-allocation frames.
    stratum : optional (n,) label array; all units have one or none do.
    cluster : optional (n,) identifier array partitioning units into clusters.
    """

    covariates: np.ndarray
    covariate_names: tuple[str, ...]
    outcome: np.ndarray | None = None
    observed: np.ndarray | None = None
    arm: np.ndarray | None = None
    stratum: np.ndarray | None = None
    cluster: np.ndarray | None = None

    def __post_init__(self) -> None:
        cov = np.asarray(self.covariates, dtype=float)
        if cov.ndim != 2:
            raise ValidationError("covariates must be a 2-d array")
        n, p = cov.shape
        if len(self.covariate_names) != p:
            raise ValidationError(
                f"{len(self.covariate_names)} covariate names for {p} columns"
            )
        if not np.all(np.isfinite(cov)):
            bad = np.argwhere(~np.isfinite(cov))[0]
            raise ValidationError(
                f"non-finite covariate at row {bad[0] + 1}, "
                f"column '{self.covariate_names[bad[1]]}'"
            )
        object.__setattr__(self, "covariates", _readonly(cov))
        object.__setattr__(self, "covariate_names", tuple(self.covariate_names))

        outcome = self.outcome
        observed = self.observed
        if outcome is None:
            if observed is not None:
                raise ValidationError("observed given without outcome column")
        else:
            outcome = np.asarray(outcome, dtype=float)
            if outcome.shape != (n,):
                raise ValidationError("outcome length does not match covariates")
            derived = (~np.isnan(outcome)).astype(np.int8)
            if observed is None:
                observed = derived
            else:
                observed = np.asarray(observed)
                if not np.isin(observed, (0, 1)).all():
                    raise ValidationError("observed indicator must be 0 or 1")
                observed = observed.astype(np.int8)
                if not np.array_equal(observed, derived):
                    row = int(np.nonzero(observed != derived)[0][0]) + 1
                    raise ValidationError(
                        f"observed indicator disagrees with outcome cell at row {row}"
                    )
            if np.any(~np.isfinite(outcome[observed == 1])):
                raise ValidationError("observed outcomes must be finite")
            object.__setattr__(self, "outcome", _readonly(outcome))
            object.__setattr__(self, "observed", _readonly(observed))

        if self.arm is not None:
            arm = np.asarray(self.arm)
            if arm.shape != (n,):
                raise ValidationError("arm length does not match covariates")
            if not np.isin(arm, (0, 1)).all():
                row = int(np.nonzero(~np.isin(arm, (0, 1)))[0][0]) + 1
                raise ValidationError(f"arm value not in {{0,1}} at row {row}")
            object.__setattr__(self, "arm", _readonly(arm.astype(np.int8)))
        for name in ("stratum", "cluster"):
            val = getattr(self, name)
            if val is not None:
                val = np.asarray([str(v) for v in val], dtype=object)
                if val.shape != (n,):
                    raise ValidationError(f"{name} length does not match covariates")
                object.__setattr__(self, name, _readonly(val))

    @property
    def n_units(self) -> int:
        return self.covariates.shape[0]

    @property
    def n_covariates(self) -> int:
        return self.covariates.shape[1]

    def column(self, name: str) -> np.ndarray:
        try:
            j = self.covariate_names.index(name)
        except ValueError:
            raise KeyError(f"no covariate named '{name}'") from None
        return self.covariates[:, j]

    def column_indices(self, names: Sequence[str]) -> tuple[int, ...]:
        return tuple(self.covariate_names.index(str(n)) for n in names)

    def stratum_labels(self) -> tuple[str, ...]:
        if self.stratum is None:
            return ()
        return tuple(sorted(set(self.stratum.tolist())))

    def rows(self) -> Iterator[UnitRecord]:
        for i in range(self.n_units):
            seen = self.observed is not None and self.observed[i] == 1
            yield UnitRecord(
                outcome=float(self.outcome[i]) if seen else None,
                observed=int(seen),
                arm=None if self.arm is None else int(self.arm[i]),
                covariates=self.covariates[i],
                stratum=None if self.stratum is None else self.stratum[i],
                cluster=None if self.cluster is None else self.cluster[i],
            )

    def with_arms(self, arms: np.ndarray) -> "TrialFrame":
        return replace(self, arm=np.asarray(arms))

    def require_arms(self) -> np.ndarray:
        if self.arm is None:
            raise ValidationError("frame has no treatment assignment")
        return self.arm

    def require_outcomes(self) -> np.ndarray:
        if self.outcome is None or not np.any(self.observed == 1):
            raise ValidationError("frame has no observed outcomes")
        return self.outcome


@dataclass(frozen=True)
class DistanceSpec:
    """Balance-distance rule: Mahalanobis, or a general weight-matrix rule.

    ``general`` ships one concrete weight rule: the diagonal matrix collecting
    the componentwise sample variances of the imbalance statistic.
    """

    kind: str = "mahalanobis"
    weight: str = "variance_diagonal"

    def __post_init__(self) -> None:
        if self.kind not in ("mahalanobis", "general"):
            raise ValidationError(f"unknown distance kind '{self.kind}'")
        if self.kind == "general" and self.weight != "variance_diagonal":
            raise ValidationError(f"unknown weight rule '{self.weight}'")

    def realize(self, vhat: np.ndarray) -> np.ndarray:
        """Weight matrix to invert in the balance criterion, given V̂ar(I)."""
        vhat = np.atleast_2d(np.asarray(vhat, dtype=float))
        if self.kind == "mahalanobis":
            return vhat
        return np.diag(np.diag(vhat))


@dataclass(frozen=True)
class Tier:
    """One tier of the tiered balance criterion: indices, rule, threshold."""

    indices: tuple[int, ...]
    threshold: float
    distance: DistanceSpec = DistanceSpec()


@dataclass(frozen=True)
class Design:
    """Randomization scheme specification.

    ``rerand_covariates`` indexes into the frame's covariate columns and
    defines X^r (dimension q). ``block_size`` only matters for stratified
    schemes and must satisfy pi * block_size integral.
    """

    pi: float
    scheme: str
    rerand_covariates: tuple[int, ...] = ()
    threshold_t: float = math.inf
    distance: DistanceSpec = DistanceSpec()
    tiers: tuple[Tier, ...] = ()
    block_size: int = 2
    max_attempts: int = 1_000_000
    stratified_statistic: str = "pooled"

    def __post_init__(self) -> None:
        if not 0.0 < self.pi < 1.0:
            raise ValidationError("pi must lie in (0, 1)")
        if self.scheme not in SCHEMES:
            raise ValidationError(f"unknown scheme '{self.scheme}'")
        if self.threshold_t <= 0:
            raise ValidationError("threshold_t must be positive")
        if self.max_attempts < 1:
            raise ValidationError("max_attempts must be at least 1")
        if self.stratified_statistic not in ("pooled", "stratum_weighted"):
            raise ValidationError(
                f"unknown stratified statistic '{self.stratified_statistic}'"
            )
        object.__setattr__(
            self, "rerand_covariates", tuple(int(j) for j in self.rerand_covariates)
        )
        object.__setattr__(self, "tiers", tuple(self.tiers))

    @property
    def rerandomized(self) -> bool:
        return self.scheme in ("rerandomized", "stratified_rerandomized")

    @property
    def stratified(self) -> bool:
        return self.scheme in ("stratified", "stratified_rerandomized")

    @property
    def q(self) -> int:
        return len(self.rerand_covariates)


def validate_design(design: Design, frame: TrialFrame) -> Design:
    """Check a design against a frame; returns the design unchanged if valid."""
    if design.rerandomized and design.q < 1:
        raise ValidationError("rerandomized scheme requires at least one X^r column")
    for j in design.rerand_covariates:
        if not 0 <= j < frame.n_covariates:
            raise ValidationError(f"rerandomization covariate index {j} out of range")
    if design.stratified:
        if frame.stratum is None:
            raise ValidationError(f"scheme '{design.scheme}' requires strata")
        if design.block_size < 2:
            raise ValidationError("block size must be at least 2")
        pik = design.pi * design.block_size
        if abs(pik - round(pik)) > 1e-9:
            raise ValidationError(
                f"pi*k not integer: pi={design.pi}, k={design.block_size}"
            )
    for tier in design.tiers:
        if not set(tier.indices) <= set(design.rerand_covariates):
            raise ValidationError("tier indices must be a subset of rerand_covariates")
        if tier.threshold <= 0:
            raise ValidationError("tier thresholds must be positive")
    return design


@dataclass(frozen=True)
class EstimandSpec:
    """Scale of the treatment effect: difference or ratio of arm means."""

    contrast: str = "difference"

    def __post_init__(self) -> None:
        if self.contrast not in ("difference", "ratio"):
            raise ValidationError(f"unknown contrast '{self.contrast}'")

    def value(self, mu1: float, mu0: float) -> float:
        if self.contrast == "difference":
            return mu1 - mu0
        if mu0 == 0:
            raise ValidationError("ratio estimand undefined: control mean is 0")
        return mu1 / mu0

    def gradient(self, mu1: float, mu0: float) -> tuple[float, float]:
        """(f1', f0'): partial derivatives at (mu1, mu0)."""
        if self.contrast == "difference":
            return 1.0, -1.0
        if mu0 == 0:
            raise ValidationError("ratio estimand undefined: control mean is 0")
        return 1.0 / mu0, -mu1 / mu0**2


@dataclass(frozen=True)
class SolverDiag:
    iterations: int
    residual_norm: float
    converged: bool


@dataclass(frozen=True)
class EstimateResult:
    """Point estimate with per-unit influence values and solver diagnostics.

    ``if_values`` has one entry per analysis unit (clusters for the
    mixed-model estimator) and averages to zero up to solver tolerance.
    """

    delta_hat: float
    mu_hat: tuple[float, float] | None
    theta_hat: np.ndarray
    if_values: np.ndarray
    solver_diag: SolverDiag
    details: dict = field(default_factory=dict)


def _parse_float(text: str, row: int, col: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise ParseError(
            f"malformed numeric cell '{text}' at row {row}, column '{col}'"
        ) from None
    return value


def load_csv(path, schema: Mapping[str, str] | None = None) -> TrialFrame:
    """Load a trial CSV into a :class:`TrialFrame`.

    The header row is required. Columns named ``outcome``, ``observed``,
    ``arm``, ``stratum``, ``cluster`` (all optional) play their reserved
    roles; every other column is a covariate. ``schema`` may remap reserved
    roles to differently-named columns, e.g. ``{"outcome": "y"}``. Empty
    outcome cells mean missing (observed = 0); when an explicit ``observed``
    column is also present the two encodings must agree.
    """
    schema = dict(schema or {})
    role_of: dict[str, str] = {}
    for role in RESERVED_COLUMNS:
        role_of[schema.get(role, role)] = role

    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        data_rows = list(reader)

    seen: set[str] = set()
    for name in header:
        if name in seen:
            raise DataError(f"duplicate column name '{name}'")
        seen.add(name)
    for role, column in schema.items():
        if column not in header:
            raise DataError(f"schema maps '{role}' to missing column '{column}'")

    roles = [role_of.get(name) for name in header]
    covariate_names = [name for name, role in zip(header, roles) if role is None]
    columns: dict[str, list] = {name: [] for name in header}
    for i, cells in enumerate(data_rows, start=1):
        if len(cells) != len(header):
            raise ParseError(f"row {i} has {len(cells)} cells, expected {len(header)}")
        for name, cell in zip(header, cells):
            columns[name].append(cell)

    n = len(data_rows)

    def reserved(role: str) -> list[str] | None:
        for name, r in zip(header, roles):
            if r == role:
                return columns[name]
        return None

    outcome_cells = reserved("outcome")
    outcome = None
    if outcome_cells is not None:
        outcome = np.array(
            [
                np.nan if cell.strip() == "" else _parse_float(cell, i + 1, "outcome")
                for i, cell in enumerate(outcome_cells)
            ]
        )

    observed_cells = reserved("observed")
    observed = None
    if observed_cells is not None:
        observed = np.empty(n, dtype=np.int8)
        for i, cell in enumerate(observed_cells):
            value = _parse_float(cell, i + 1, "observed")
            if value not in (0.0, 1.0):
                raise ValidationError(
                    f"observed value {cell} not in {{0,1}} at row {i + 1}"
                )
            observed[i] = int(value)

    arm_cells = reserved("arm")
    arm = None
    if arm_cells is not None:
        arm = np.empty(n, dtype=np.int8)
        for i, cell in enumerate(arm_cells):
            value = _parse_float(cell, i + 1, "arm")
            if value not in (0.0, 1.0):
                raise ValidationError(f"arm value {cell} not in {{0,1}} at row {i + 1}")
            arm[i] = int(value)

    def labels(role: str) -> np.ndarray | None:
        cells = reserved(role)
        if cells is None:
            return None
        for i, cell in enumerate(cells):
            if cell.strip() == "":
                raise ValidationError(f"empty {role} label at row {i + 1}")
        return np.array(cells, dtype=object)

    covariates = np.empty((n, len(covariate_names)))
    for j, name in enumerate(covariate_names):
        for i, cell in enumerate(columns[name]):
            covariates[i, j] = _parse_float(cell, i + 1, name)

    return TrialFrame(
        covariates=covariates,
        covariate_names=tuple(covariate_names),
        outcome=outcome,
        observed=observed,
        arm=arm,
        stratum=labels("stratum"),
        cluster=labels("cluster"),
    )


def _format_float(x: float) -> str:
    # repr gives the shortest string that round-trips at full precision
    if x == int(x) and abs(x) < 1e16:
        return str(int(x))
    return repr(float(x))


def write_csv(frame: TrialFrame, path) -> None:
    """Write a frame in the canonical reserved-name CSV layout.

    Numeric fields are written at full round-trip precision, so
    write -> load -> write is byte-stable.
    """
    header: list[str] = []
    getters: list[Callable[[int], str]] = []
    if frame.outcome is not None:
        header += ["outcome", "observed"]
        getters.append(
            lambda i: "" if frame.observed[i] == 0 else _format_float(frame.outcome[i])
        )
        getters.append(lambda i: str(int(frame.observed[i])))
    if frame.arm is not None:
        header.append("arm")
        getters.append(lambda i: str(int(frame.arm[i])))
    if frame.stratum is not None:
        header.append("stratum")
        getters.append(lambda i: str(frame.stratum[i]))
    if frame.cluster is not None:
        header.append("cluster")
        getters.append(lambda i: str(frame.cluster[i]))
    for j, name in enumerate(frame.covariate_names):
        header.append(name)
        getters.append(lambda i, j=j: _format_float(frame.covariates[i, j]))

    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(header)
        for i in range(frame.n_units):
            writer.writerow([get(i) for get in getters])
