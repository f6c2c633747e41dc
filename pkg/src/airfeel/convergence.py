"""Learning-rate schedules, contraction coefficients and optimality-gap bounds.

Two bound families are implemented: the fixed-rate bound with its error-floor
decomposition, and the per-round (diminishing-rate) bound.  On top of those,
the effective gaps express the power-dependent part of the bound directly in
terms of effective amplitudes h*sqrt(p), which is what the power solvers
minimize.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .dataset import LearningConstants

__all__ = [
    "RateSchedule",
    "BoundCoefficients",
    "GapBound",
    "build_schedule",
    "build_coefficients",
    "fixed_rate_bound",
    "per_round_bound",
    "effective_gap_biased",
    "effective_gap_unbiased",
    "analytic_gap_bound",
    "save_bound_breakdown",
]

CASE_BIASED = "biased"      # no unbiasedness constraint on the aggregation
CASE_UNBIASED = "unbiased"  # per-round unbiased aggregation enforced


@dataclass(frozen=True)
class RateSchedule:
    kind: str          # "fixed" | "diminishing"
    eta: np.ndarray    # per-round learning rates, length N
    params: dict

    @property
    def N(self) -> int:
        return self.eta.size


def build_schedule(kind: str, params: dict, N: int, delta: float, L: float) -> RateSchedule:
    """Validate the hypothesis inequalities and expand per-round rates.

    Rejections name the specific failed inequality.
    """
    if N < 0:
        raise ValueError("N must be >= 0")
    if delta <= 0 or L <= 0:
        raise ValueError("delta and L must be > 0")
    cap = 2.0 / (2.0 + L)
    if kind == "fixed":
        eta = float(params["eta"])
        if not eta > 0:
            raise ValueError("fixed rate requires eta > 0")
        if eta > cap:
            raise ValueError(f"fixed rate requires eta <= 2/(2+L) = {cap:.6g}, got {eta}")
        if cap > 1.0 / delta:
            raise ValueError(f"fixed rate requires 2/(2+L) <= 1/delta; "
                             f"{cap:.6g} > {1.0 / delta:.6g}")
        rates = np.full(N, eta)
    elif kind == "diminishing":
        u, v = float(params["u"]), float(params["v"])
        if v <= 0:
            raise ValueError("diminishing rate requires v > 0")
        if u <= 1.0 / delta:
            raise ValueError(f"diminishing rate requires u > 1/delta = {1.0 / delta:.6g}")
        if N >= 1 and u / (1.0 + v) > cap:
            raise ValueError(f"diminishing rate requires eta(1) <= 2/(2+L) = {cap:.6g}")
        rates = u / (np.arange(1, N + 1) + v)
    else:
        raise ValueError(f"unknown schedule kind {kind!r}")
    C = 1.0 - delta * rates
    if N >= 1 and not (np.all(C > 0) and np.all(C < 1)):
        raise ValueError("contraction factors 1 - delta*eta must lie in (0, 1)")
    return RateSchedule(kind, rates, dict(params))


@dataclass(frozen=True)
class BoundCoefficients:
    """Per-round coefficients of the power-dependent gap bound."""

    case: str
    eta: np.ndarray
    C: np.ndarray
    J: np.ndarray
    A: np.ndarray | None   # None for the unbiased case
    B: np.ndarray
    G: np.ndarray
    Ghat: np.ndarray
    K: int
    m_b: int
    kind: str = "fixed"

    @property
    def N(self) -> int:
        return self.eta.size


def _round_weights(sched: RateSchedule, delta: float) -> tuple[np.ndarray, np.ndarray]:
    C = 1.0 - delta * sched.eta
    if sched.kind == "fixed":
        N = sched.N
        J = C ** (N - np.arange(1, N + 1)) / 2.0
    else:
        # J(n) = prod_{i=n..N} C_i / (2 C_n)
        tail = np.cumprod(C[::-1])[::-1]
        J = tail / (2.0 * C)
    return C, J


def build_coefficients(case: str, sched: RateSchedule, lc: LearningConstants,
                       K: int, m_b: int, *, literal_unbiased_divisor: bool = False,
                       G_override: np.ndarray | float | None = None) -> BoundCoefficients:
    """Assemble A, B, C, J, G, Ghat for one schedule.

    The gradient bound G defaults to the constant 2*W*L.  Both cases divide B
    by K for consistency with the MSE bound; `literal_unbiased_divisor`
    switches the unbiased case to the K**2 divisor as printed.
    """
    if case not in (CASE_BIASED, CASE_UNBIASED):
        raise ValueError(f"unknown case {case!r}")
    if m_b < 1:
        raise ValueError("m_b must be >= 1")
    N = sched.N
    eta = sched.eta
    C, J = _round_weights(sched, lc.delta)
    if G_override is None:
        G = np.full(N, 2.0 * lc.W * lc.L)
    else:
        G = np.broadcast_to(np.asarray(G_override, dtype=float), (N,)).copy()
    sig2 = float(lc.sigma @ lc.sigma)
    Ghat = G ** 2 + sig2 / m_b
    L = lc.L
    if case == CASE_BIASED:
        A = (1.0 + eta ** 2 * L ** 2) * G ** 2 / K ** 2
        B = eta ** 2 * L * Ghat / K
    else:
        A = None
        divisor = K ** 2 if literal_unbiased_divisor else K
        B = eta ** 2 * L * Ghat / divisor
    return BoundCoefficients(case=case, eta=eta, C=C, J=J, A=A, B=B, G=G,
                             Ghat=Ghat, K=K, m_b=m_b, kind=sched.kind)


@dataclass(frozen=True)
class GapBound:
    total: float
    error_floor: float
    gap_to_floor: float
    flags: tuple = ()


def _as_rounds(x, N, name):
    x = np.asarray(x, dtype=float)
    if x.shape != (N,):
        raise ValueError(f"{name} must have one entry per round ({N}), got {x.shape}")
    return x


def fixed_rate_bound(initial_gap: float, biases, mses, sched: RateSchedule,
                     lc: LearningConstants, K: int,
                     m_b: int | None = None) -> GapBound:
    """Fixed-rate optimality-gap bound split into error floor and decaying gap.

    `biases` are per-round norms of the mean aggregation error, `mses` the
    per-round mean squared error norms.
    """
    if sched.kind != "fixed":
        raise ValueError("fixed_rate_bound requires a fixed-rate schedule")
    N = sched.N
    b = _as_rounds(biases, N, "biases")
    m = _as_rounds(mses, N, "mses")
    eta = float(sched.eta[0]) if N else 0.0
    C = 1.0 - lc.delta * eta
    w = C ** (N - np.arange(1, N + 1)) / 2.0
    floor = float(w @ (b ** 2))
    flags = ()
    if m_b is not None and m_b != N:
        flags = (f"mini-batch size {m_b} != N = {N} (fixed-rate hypothesis)",)
    sig2 = float(lc.sigma @ lc.sigma)
    var_term = eta ** 2 * lc.L * sig2 / (2.0 * lc.delta * max(N, 1) * K ** 2)
    per_round = var_term + eta ** 2 * lc.L ** 2 * b ** 2 + eta ** 2 * lc.L * m
    gap = C ** N * float(initial_gap) + float(w @ per_round)
    return GapBound(total=floor + gap, error_floor=floor, gap_to_floor=gap, flags=flags)


def per_round_bound(initial_gap: float, biases, mses, sched: RateSchedule,
                    lc: LearningConstants, K: int, m_b: int) -> float:
    """Gap bound with per-round contraction/weights (diminishing-rate form)."""
    N = sched.N
    b = _as_rounds(biases, N, "biases")
    m = _as_rounds(mses, N, "mses")
    C, J = _round_weights(sched, lc.delta)
    eta = sched.eta
    sig2 = float(lc.sigma @ lc.sigma)
    total = float(np.prod(C)) * float(initial_gap)
    total += float(J @ (eta ** 2 * lc.L * sig2 / (2.0 * m_b * K ** 2)
                        + eta ** 2 * lc.L ** 2 * b ** 2))
    total += float(J @ (b ** 2))
    total += float(J @ (eta ** 2 * lc.L * m))
    return total


def _effective_amplitudes(powers, trace):
    p = np.asarray(getattr(powers, "p", powers), dtype=float)
    h = trace.gains
    if p.shape != h.shape:
        raise ValueError(f"power matrix shape {p.shape} does not match channel {h.shape}")
    if np.any(p < 0):
        raise ValueError("powers must be >= 0")
    return h * np.sqrt(p)


def effective_gap_biased(powers, trace, coeffs: BoundCoefficients) -> float:
    """Power-dependent part of the gap bound without unbiasedness constraints."""
    if coeffs.case != CASE_BIASED or coeffs.A is None:
        raise ValueError("coefficients were not built for the biased case")
    r = _effective_amplitudes(powers, trace)
    K = trace.K
    align = (r.sum(axis=0) - K) ** 2
    mis = ((r - 1.0) ** 2).sum(axis=0)
    return float(coeffs.J @ (coeffs.A * align) + coeffs.J @ (coeffs.B * mis))


def effective_gap_unbiased(powers, trace, coeffs: BoundCoefficients) -> float:
    """Power-dependent part of the gap bound under per-round unbiasedness."""
    r = _effective_amplitudes(powers, trace)
    mis = ((r - 1.0) ** 2).sum(axis=0)
    return float(coeffs.J @ (coeffs.B * mis))


def effective_gap(powers, trace, coeffs: BoundCoefficients) -> float:
    if coeffs.case == CASE_BIASED:
        return effective_gap_biased(powers, trace, coeffs)
    return effective_gap_unbiased(powers, trace, coeffs)


def analytic_gap_bound(powers, trace, coeffs: BoundCoefficients,
                       lc: LearningConstants, initial_gap: float, q: int) -> float:
    """Full analytic gap bound for a given power schedule and channel trace."""
    C, J, eta = coeffs.C, coeffs.J, coeffs.eta
    sig2 = float(lc.sigma @ lc.sigma)
    K = coeffs.K
    total = float(np.prod(C)) * float(initial_gap)
    total += effective_gap(powers, trace, coeffs)
    total += float(J @ (eta ** 2 * lc.L * sig2 / (2.0 * coeffs.m_b * K ** 2)))
    total += float(J @ (eta ** 2 * trace.noise_std ** 2 * lc.L * q / K ** 2))
    return total


def save_bound_breakdown(path, coeffs: BoundCoefficients, biases, mses,
                         lc: LearningConstants) -> None:
    """Per-round CSV of coefficients and floor/gap contributions."""
    N = coeffs.N
    b = _as_rounds(biases, N, "biases")
    m = _as_rounds(mses, N, "mses")
    floor_c = coeffs.J * b ** 2
    gap_c = coeffs.J * (coeffs.eta ** 2 * lc.L ** 2 * b ** 2
                        + coeffs.eta ** 2 * lc.L * m)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["round", "C", "J", "A", "B", "floor_contribution",
                     "gap_contribution"])
        for n in range(N):
            A = coeffs.A[n] if coeffs.A is not None else ""
            wr.writerow([n + 1, repr(float(coeffs.C[n])), repr(float(coeffs.J[n])),
                         repr(float(A)) if A != "" else "",
                         repr(float(coeffs.B[n])), repr(float(floor_c[n])),
                         repr(float(gap_c[n]))])
