"""Treatment allocation engines and covariate-balance machinery.

Implements independent-coin-flip assignment, stratified permuted-block
assignment, the (stratified) imbalance statistics with their variance
estimators, weighted balance distances, and the rejection loop that redraws
assignments until the balance criterion is met.

Everything here is a pure function of (inputs, seed): callers may run many
allocations concurrently with distinct seeds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammainc

from .data_model import Design, TrialFrame, validate_design
from .errors import NonTerminationError, SingularMatrixError, ValidationError


@dataclass(frozen=True)
class Allocation:
    """An accepted treatment assignment with its balance bookkeeping.

    ``accepted_distance`` is present only when a finite-threshold balance
    criterion was actually checked; tiered designs record per-tier distances
    instead. ``imbalance`` and ``imbalance_variance`` refer to the accepted
    draw's statistic (I, or its stratified counterpart).
    """

    arms: np.ndarray
    attempts: int
    accepted_distance: float | None
    imbalance: np.ndarray
    imbalance_variance: np.ndarray
    tier_distances: tuple[float, ...] | None = None


def chi_square_cdf(q: int, t: float) -> float:
    """P(chi^2_q < t) via the regularized lower incomplete gamma function."""
    if int(q) != q or q < 1:
        raise ValidationError("degrees of freedom must be a positive integer")
    if t < 0:
        raise ValidationError("t must be nonnegative")
    if math.isinf(t):
        return 1.0
    return float(gammainc(q / 2.0, t / 2.0))


def simple_assign(n: int, pi: float, seed: int) -> np.ndarray:
    """Assign treatment by n independent Bernoulli(pi) coin flips."""
    if n < 1:
        raise ValidationError("n must be at least 1")
    if not 0.0 <= pi <= 1.0:
        raise ValidationError("pi must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    return _simple_draw(rng, n, pi)


def _simple_draw(rng: np.random.Generator, n: int, pi: float) -> np.ndarray:
    return (rng.random(n) < pi).astype(np.int8)


def permuted_block_assign(
    strata: np.ndarray, pi: float, k: int, seed: int
) -> np.ndarray:
    """Stratified permuted-block assignment.

    Within each stratum, consecutive units are assigned from size-k blocks
    containing exactly pi*k ones in uniformly random order; a fresh block is
    sampled whenever the previous one is exhausted, and the final partial
    block uses only the prefix it needs.
    """
    rng = np.random.default_rng(seed)
    return _permuted_block_draw(rng, np.asarray(strata, dtype=object), pi, k)


def _permuted_block_draw(
    rng: np.random.Generator, strata: np.ndarray, pi: float, k: int
) -> np.ndarray:
    if k < 2:
        raise ValidationError("block size must be at least 2")
    ones = pi * k
    if abs(ones - round(ones)) > 1e-9:
        raise ValidationError(f"pi*k not integer: pi={pi}, k={k}")
    ones = int(round(ones))
    base = np.zeros(k, dtype=np.int8)
    base[:ones] = 1

    n = len(strata)
    arms = np.empty(n, dtype=np.int8)
    for label in sorted(set(strata.tolist())):
        idx = np.flatnonzero(strata == label)
        n_s = idx.size
        blocks = [rng.permutation(base) for _ in range(-(-n_s // k))]
        arms[idx] = np.concatenate(blocks)[:n_s]
    return arms


def imbalance_simple(
    Xr: np.ndarray, arms: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Treated-minus-control mean of X^r and its variance estimator.

    Returns (I, Vhat) with Vhat = (N1*N0)^-1 * sum_i (x_i - xbar)(x_i - xbar)^T.
    """
    Xr = _as_matrix(Xr)
    arms = np.asarray(arms)
    n1 = int(arms.sum())
    n0 = arms.size - n1
    if n1 == 0 or n0 == 0:
        raise ValidationError("both arms must be non-empty")
    centered = Xr - Xr.mean(axis=0)
    vhat = centered.T @ centered / (n1 * n0)
    imb = Xr[arms == 1].mean(axis=0) - Xr[arms == 0].mean(axis=0)
    return imb, vhat


def imbalance_stratified(
    Xr: np.ndarray, arms: np.ndarray, strata: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Overall imbalance statistic and its variance under stratified assignment.

    The variance estimator centers at stratum means:
    Vhat = n/(N1*N0) * [ n^-1 sum_i x_i x_i^T - sum_s phat_s xbar_s xbar_s^T ].
    """
    Xr = _as_matrix(Xr)
    arms = np.asarray(arms)
    strata = np.asarray(strata, dtype=object)
    n = arms.size
    n1 = int(arms.sum())
    n0 = n - n1
    if n1 == 0 or n0 == 0:
        raise ValidationError("both arms must be non-empty")
    imb = Xr[arms == 1].mean(axis=0) - Xr[arms == 0].mean(axis=0)
    vhat = n / (n1 * n0) * _stratum_centered_scatter(Xr, strata)
    return imb, vhat


def _stratum_centered_scatter(Xr: np.ndarray, strata: np.ndarray) -> np.ndarray:
    n = Xr.shape[0]
    second_moment = Xr.T @ Xr / n
    for label in set(strata.tolist()):
        mask = strata == label
        if not mask.any():
            raise ValidationError(f"empty stratum '{label}'")
        p_s = mask.sum() / n
        xbar_s = Xr[mask].mean(axis=0)
        second_moment = second_moment - p_s * np.outer(xbar_s, xbar_s)
    return second_moment


def imbalance_stratified_dagger(
    Xr: np.ndarray, arms: np.ndarray, strata: np.ndarray
) -> np.ndarray:
    """Stratum-weighted imbalance: sum_s phat_s (treated - control mean in s)."""
    Xr = _as_matrix(Xr)
    arms = np.asarray(arms)
    strata = np.asarray(strata, dtype=object)
    n = arms.size
    total = np.zeros(Xr.shape[1])
    for label in set(strata.tolist()):
        mask = strata == label
        treated = mask & (arms == 1)
        control = mask & (arms == 0)
        if not treated.any() or not control.any():
            raise ValidationError(f"stratum '{label}' lacks one arm")
        p_s = mask.sum() / n
        total += p_s * (Xr[treated].mean(axis=0) - Xr[control].mean(axis=0))
    return total


def balance_distance(imbalance: np.ndarray, weight: np.ndarray) -> float:
    """Quadratic form I^T W^-1 I through an SPD factorization.

    Raises :class:`SingularMatrixError` when the reciprocal condition estimate
    of W falls below 1e-12; a pseudo-inverse is deliberately not used, since a
    singular weight matrix signals degenerate rerandomization covariates.
    """
    imbalance = np.atleast_1d(np.asarray(imbalance, dtype=float))
    if imbalance.size == 0:
        return 0.0
    weight = np.atleast_2d(np.asarray(weight, dtype=float))
    if not np.allclose(weight, weight.T, rtol=0, atol=1e-10 * max(1.0, abs(weight).max())):
        raise ValidationError("weight matrix must be symmetric")
    eigvals = np.linalg.eigvalsh(weight)
    top = eigvals[-1]
    if top <= 0 or eigvals[0] / top < 1e-12:
        raise SingularMatrixError(_describe_singular(weight))
    solved = np.linalg.solve(weight, imbalance)
    return float(imbalance @ solved)


def _describe_singular(weight: np.ndarray) -> str:
    diag = np.diag(weight)
    scale = abs(weight).max()
    degenerate = [str(j) for j in np.flatnonzero(diag <= 1e-12 * max(scale, 1e-300))]
    if degenerate:
        return (
            "imbalance variance is numerically singular: covariate block(s) "
            f"{{{', '.join(degenerate)}}} have (near-)zero variance"
        )
    return "imbalance variance is numerically singular: collinear covariate block"


def _as_matrix(Xr: np.ndarray) -> np.ndarray:
    Xr = np.asarray(Xr, dtype=float)
    if Xr.ndim == 1:
        Xr = Xr[:, None]
    return Xr


class _BalanceChecker:
    """Per-proposal imbalance/distance evaluation with arm-free parts cached."""

    def __init__(self, frame: TrialFrame, design: Design):
        self.design = design
        self.Xr = frame.covariates[:, list(design.rerand_covariates)]
        self.n = frame.n_units
        self.strata = frame.stratum
        if design.stratified:
            self.scatter = _stratum_centered_scatter(self.Xr, self.strata)
        else:
            centered = self.Xr - self.Xr.mean(axis=0)
            self.scatter = centered.T @ centered
        # positions of each tier's covariate indices inside the X^r vector
        self.tier_positions = [
            tuple(design.rerand_covariates.index(j) for j in tier.indices)
            for tier in design.tiers
        ]

    def statistic(self, arms: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        n1 = int(arms.sum())
        n0 = self.n - n1
        if n1 == 0 or n0 == 0:
            raise ValidationError("both arms must be non-empty")
        if self.design.stratified:
            vhat = self.n / (n1 * n0) * self.scatter
            if self.design.stratified_statistic == "stratum_weighted":
                imb = imbalance_stratified_dagger(self.Xr, arms, self.strata)
            else:
                imb = self.Xr[arms == 1].mean(axis=0) - self.Xr[arms == 0].mean(axis=0)
        else:
            vhat = self.scatter / (n1 * n0)
            imb = self.Xr[arms == 1].mean(axis=0) - self.Xr[arms == 0].mean(axis=0)
        return imb, vhat

    def distances(
        self, imb: np.ndarray, vhat: np.ndarray
    ) -> tuple[float | None, tuple[float, ...] | None, bool]:
        """Returns (overall distance, tier distances, accepted)."""
        design = self.design
        if design.tiers:
            dists = []
            ok = True
            for tier, positions in zip(design.tiers, self.tier_positions):
                idx = list(positions)
                sub_v = vhat[np.ix_(idx, idx)]
                dist = balance_distance(imb[idx], tier.distance.realize(sub_v))
                dists.append(dist)
                ok = ok and dist < tier.threshold
            return None, tuple(dists), ok
        dist = balance_distance(imb, design.distance.realize(vhat))
        return dist, None, dist < design.threshold_t


def rerandomize(frame: TrialFrame, design: Design, seed: int) -> Allocation:
    """Draw assignments under the design, redrawing until balance is accepted.

    One master seed drives the whole proposal stream, so the realized
    allocation is reproducible from (seed, design, frame). Non-rerandomized
    schemes and an infinite threshold accept the first proposal. Degenerate
    proposals that leave an arm (or a stratum-arm cell, for the
    stratum-weighted statistic) empty are rejected and counted.
    """
    validate_design(design, frame)
    rng = np.random.default_rng(seed)
    n = frame.n_units

    def propose() -> np.ndarray:
        if design.stratified:
            return _permuted_block_draw(rng, frame.stratum, design.pi, design.block_size)
        return _simple_draw(rng, n, design.pi)

    record_balance = design.q >= 1
    checker = _BalanceChecker(frame, design) if record_balance else None
    vacuous = (not design.rerandomized) or (
        math.isinf(design.threshold_t) and not design.tiers
    )

    if vacuous:
        arms = propose()
        imb, vhat = (
            checker.statistic(arms)
            if record_balance
            else (np.zeros(0), np.zeros((0, 0)))
        )
        return Allocation(arms, 1, None, imb, vhat)

    for attempt in range(1, design.max_attempts + 1):
        arms = propose()
        try:
            imb, vhat = checker.statistic(arms)
        except ValidationError:
            continue  # degenerate proposal: count it and redraw
        dist, tier_dists, accepted = checker.distances(imb, vhat)
        if accepted:
            return Allocation(arms, attempt, dist, imb, vhat, tier_dists)
    raise NonTerminationError(
        f"no proposal satisfied the balance criterion within "
        f"{design.max_attempts} attempts; consider a larger threshold t"
    )
