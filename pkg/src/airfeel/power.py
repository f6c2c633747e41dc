"""Power-control solvers, benchmark policies and optimality diagnostics.

Both gap-minimizing problems are solved in the amplitude domain q = sqrt(p)
by Lagrangian duality: the inner minimizers are closed-form regularized
channel inversions, and the duals are driven to complementary slackness by a
multiplicative fixed-point update with per-coordinate bisection as a polish
(a plain projected-subgradient engine is provided as well for cross-checks).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .channel import ChannelTrace
from .convergence import (BoundCoefficients, CASE_BIASED, CASE_UNBIASED,
                          effective_gap, effective_gap_biased,
                          effective_gap_unbiased)

__all__ = [
    "PowerProblem",
    "PowerSchedule",
    "SolverOptions",
    "InfeasibleError",
    "solve_power",
    "solve_biased",
    "solve_unbiased",
    "check_feasibility",
    "FeasibilityReport",
    "policy_fixed_power",
    "policy_mse_min",
    "policy_channel_inversion",
    "dual_subgradient",
    "DualResult",
    "oracle_projected_gradient",
    "kkt_residuals",
    "KKTReport",
    "save_schedule",
]


class InfeasibleError(ValueError):
    """Raised when the unbiased problem cannot be supported by the budgets."""

    def __init__(self, l_star: float, K: int):
        self.l_star = l_star
        super().__init__(f"unbiased aggregation infeasible: achievable level "
                         f"{l_star:.6g} < K = {K}")


@dataclass(frozen=True)
class PowerProblem:
    """One power-control instance: channel trace, bound coefficients, budgets."""

    trace: ChannelTrace
    coeffs: BoundCoefficients
    p_max: np.ndarray  # (K,) per-round power caps (gradient-bound units)
    p_ave: np.ndarray  # (K,) average power budgets

    def __post_init__(self):
        K = self.trace.K
        pmax = np.ascontiguousarray(np.broadcast_to(
            np.asarray(self.p_max, dtype=float), (K,)).copy())
        pave = np.ascontiguousarray(np.broadcast_to(
            np.asarray(self.p_ave, dtype=float), (K,)).copy())
        if np.any(pmax <= 0) or np.any(pave <= 0):
            raise ValueError("power budgets must be > 0")
        if self.coeffs.N != self.trace.N:
            raise ValueError("coefficients and channel trace disagree on N")
        if self.coeffs.K != K:
            raise ValueError("coefficients and channel trace disagree on K")
        object.__setattr__(self, "p_max", pmax)
        object.__setattr__(self, "p_ave", pave)

    @property
    def case(self) -> str:
        return self.coeffs.case

    @property
    def K(self) -> int:
        return self.trace.K

    @property
    def N(self) -> int:
        return self.trace.N

    @property
    def amplitude_caps(self) -> np.ndarray:
        """Per-round amplitude caps sqrt(p_max / Ghat), shape (K, N)."""
        return np.sqrt(self.p_max[:, None] / self.coeffs.Ghat[None, :])


@dataclass
class PowerSchedule:
    p: np.ndarray            # (K, N) power scaling factors
    amplitudes: np.ndarray   # (K, N) sqrt(p)
    duals: dict
    objective: float
    mode: str
    converged: bool = True
    diagnostics: dict = field(default_factory=dict)

    def average_usage(self, coeffs: BoundCoefficients) -> np.ndarray:
        return (self.p * coeffs.Ghat[None, :]).mean(axis=1)


@dataclass
class SolverOptions:
    max_outer: int = 80
    dual_tol: float = 1e-9           # relative tolerance on budget violations
    cd_tol: float = 1e-13            # coordinate-descent step tolerance
    max_cd_sweeps: int = 4000
    inner: str = "exact"             # "exact" | "paper"
    method: str = "coordinate"       # "coordinate" | "subgradient"
    subgradient_step: float = 1.0
    max_iters: int = 100_000         # subgradient iteration budget
    dual_iters: int = 4000           # multiplicative dual-ascent budget
    feasibility_iters: int = 6000
    check_feasibility: bool = True


def solve_power(prob: PowerProblem, opts: SolverOptions | None = None) -> PowerSchedule:
    if prob.case == CASE_BIASED:
        return solve_biased(prob, opts)
    return solve_unbiased(prob, opts)


# ---------------------------------------------------------------------------
# Case without unbiasedness constraints
# ---------------------------------------------------------------------------

def _biased_closed_form(prob: PowerProblem, phi: np.ndarray) -> np.ndarray:
    """Regularized channel inversion at duals phi, caps clamped afterwards."""
    h = prob.trace.gains
    J, A, B, Ghat = prob.coeffs.J, prob.coeffs.A, prob.coeffs.B, prob.coeffs.Ghat
    N, K = prob.N, prob.K
    U = prob.amplitude_caps
    ok = h > 0
    M = np.full_like(h, np.inf)
    with np.errstate(divide="ignore"):
        M[ok] = (B[None, :] * h + phi[:, None] * Ghat[None, :] / (N * J[None, :] * np.where(ok, h, 1.0)))[ok]
    T = np.where(ok, h / np.where(ok, M, 1.0), 0.0).sum(axis=0)
    q = np.zeros_like(h)
    denom = M * (1.0 + A[None, :] * T[None, :])
    q[ok] = ((B + A * K)[None, :] / denom)[ok]
    return np.clip(q, 0.0, U)


def _biased_exact(prob: PowerProblem, phi: np.ndarray,
                  q0: np.ndarray | None = None,
                  tol: float = 1e-13, max_sweeps: int = 110) -> np.ndarray:
    """Exact per-round minimizer under caps.

    Each round's KKT system is self-consistent in the single scalar
    t = sum_k h_k q_k - K: every coordinate is a clipped affine function of t
    and the fixed-point map is monotone, so one bisection per round (run
    vectorized across rounds) gives the exact capped minimizer.
    """
    h = prob.trace.gains
    J, A, B, Ghat = prob.coeffs.J, prob.coeffs.A, prob.coeffs.B, prob.coeffs.Ghat
    N, K = prob.N, prob.K
    U = prob.amplitude_caps
    JA, JB = J * A, J * B
    den = JB[None, :] * h ** 2 + phi[:, None] * Ghat[None, :] / N
    live = (h > 0) & (den > 0)
    safe_den = np.where(den > 0, den, 1.0)

    def q_of(t):
        q = np.where(live, h * (JB - JA * t)[None, :] / safe_den, 0.0)
        return np.clip(q, 0.0, U)

    # The fixed-point residual is piecewise linear and strictly decreasing
    # in t, so safeguarded Newton converges once the clip pattern settles.
    lo = np.full(N, -float(K))
    hi = np.maximum((h * U).sum(axis=0) - K, 0.0)
    t = np.zeros(N)
    slope_h2 = h ** 2 * JA[None, :] / safe_den
    q = q_of(t)
    for _ in range(max_sweeps):
        resid = (h * q).sum(axis=0) - K - t
        if float(np.max(np.abs(resid))) < tol * (1.0 + K):
            break
        pos = resid > 0
        lo = np.where(pos, t, lo)
        hi = np.where(pos, hi, t)
        open_ = live & (q > 0) & (q < U)
        slope = -np.where(open_, slope_h2, 0.0).sum(axis=0) - 1.0
        t_new = t - resid / slope
        bad = (t_new <= lo) | (t_new >= hi)
        t = np.where(bad, 0.5 * (lo + hi), t_new)
        q = q_of(t)
    return q


def _usage(q: np.ndarray, Ghat: np.ndarray) -> np.ndarray:
    return (q ** 2 * Ghat[None, :]).mean(axis=1)


def _biased_dual_value(prob: PowerProblem, phi: np.ndarray, q: np.ndarray) -> float:
    obj = effective_gap_biased(q ** 2, prob.trace, prob.coeffs)
    slack = _usage(q, prob.coeffs.Ghat) - prob.p_ave
    return obj + float(phi @ slack)


def _multiplicative_ascent(usage_fn, p_ave: np.ndarray, tol_k: np.ndarray,
                           x0: np.ndarray, *, alpha: float = 1.5,
                           max_iters: int = 4000,
                           patience: int = 60) -> tuple[np.ndarray, bool, int]:
    """Fixed-point dual search x <- x * (usage / budget)**alpha.

    All duals move in one shot per inner evaluation.  Slack coordinates decay
    geometrically toward zero, active ones settle where their budget is tight.
    The exponent is halved (restarting from the best iterate) whenever the
    worst relative violation stops improving, which damps oscillation near
    degenerate constraints.
    """
    x = x0.copy()
    best_x = x.copy()
    best_score = np.inf
    stalled = 0
    converged = False
    iters = 0
    for iters in range(1, max_iters + 1):
        usage = usage_fn(x)
        resid = usage - p_ave
        active = x > 1e-12 * (1.0 + float(np.max(x)))
        viol = np.where(active, np.abs(resid), np.maximum(resid, 0.0))
        score = float(np.max(viol / tol_k))
        if score <= 1.0:
            converged = True
            break
        if score < best_score * (1.0 - 1e-3):
            best_score, best_x, stalled = score, x.copy(), 0
        else:
            stalled += 1
            if stalled >= patience:
                if alpha <= 0.1:
                    break
                alpha *= 0.5
                x = best_x.copy()
                stalled = 0
                continue
        x = x * (usage / p_ave) ** alpha
    if not converged:
        x = best_x
    return x, converged, iters


def solve_biased(prob: PowerProblem, opts: SolverOptions | None = None) -> PowerSchedule:
    """Dual ascent for the gap-minimizing problem without unbiasedness constraints.

    The average-power duals are driven to complementary slackness by a
    multiplicative fixed-point update (one exact inner solve moves all duals
    at once); per-coordinate bisection on the monotone violation maps polishes
    any instance the fast path leaves unconverged.  `opts.inner` selects the
    clamped closed form (`paper`) or the exact capped minimizer (`exact`,
    default) as the inner solution.
    """
    if prob.case != CASE_BIASED:
        raise ValueError("problem is not a biased-case instance")
    opts = opts or SolverOptions()
    if opts.method == "subgradient":
        return _solve_biased_subgradient(prob, opts)
    K = prob.K
    Ghat = prob.coeffs.Ghat

    search_tol = max(opts.cd_tol, 1e-4 * opts.dual_tol)
    exact = opts.inner == "exact"

    def inner(phi_vec, tol=None):
        if exact:
            return _biased_exact(prob, phi_vec, tol=tol or search_tol,
                                 max_sweeps=opts.max_cd_sweeps)
        return _biased_closed_form(prob, phi_vec)

    def usage_of(phi_vec):
        return _usage(inner(phi_vec), Ghat)

    tol_k = opts.dual_tol * np.maximum(1.0, prob.p_ave)
    phi, converged, sweeps = _multiplicative_ascent(
        usage_of, prob.p_ave, tol_k, np.full(K, 1e-6),
        max_iters=opts.dual_iters)
    for _ in range(0 if converged else opts.max_outer):
        sweeps += 1
        phi_prev = phi.copy()
        for k in range(K):
            def viol(x, k=k):
                trial = phi.copy()
                trial[k] = x
                return usage_of(trial)[k] - prob.p_ave[k]

            if phi[k] > 0:
                # keep the dual if its constraint is already near-tight
                cur = viol(phi[k])
                if abs(cur) <= 0.2 * tol_k[k]:
                    continue
                if cur < 0 and viol(0.0) <= tol_k[k]:
                    phi[k] = 0.0
                    continue
            elif viol(0.0) <= tol_k[k]:
                phi[k] = 0.0
                continue
            hi = max(2.0 * phi[k], 1.0)
            for _ in range(200):
                if viol(hi) < 0:
                    break
                hi *= 4.0
            phi[k] = brentq(viol, 0.0, hi, xtol=1e-12 * max(1.0, hi),
                            rtol=1e-10)
        viol_all = usage_of(phi) - prob.p_ave
        converged = bool(np.all(viol_all <= tol_k))
        moved = float(np.max(np.abs(phi - phi_prev)))
        if converged or moved <= 1e-12 * (1.0 + float(np.max(phi))):
            break
    q = inner(phi, tol=opts.cd_tol)
    obj = effective_gap_biased(q ** 2, prob.trace, prob.coeffs)
    dval = _biased_dual_value(prob, phi, q)
    gap = obj - dval
    return PowerSchedule(
        p=q ** 2, amplitudes=q, duals={"avg_power": phi.copy()},
        objective=obj, mode=opts.inner, converged=converged,
        diagnostics={
            "dual_value": dval,
            "primal_dual_gap": gap,
            "max_avg_violation": float(np.max(_usage(q, Ghat) - prob.p_ave)),
            "sweeps": sweeps,
        })


def _repair_budgets(q: np.ndarray, prob: PowerProblem) -> np.ndarray:
    """Scale device rows down minimally so average budgets hold exactly."""
    usage = _usage(q, prob.coeffs.Ghat)
    factor = np.minimum(1.0, np.sqrt(prob.p_ave / np.maximum(usage, 1e-300)))
    return q * factor[:, None]


def _solve_biased_subgradient(prob: PowerProblem, opts: SolverOptions) -> PowerSchedule:
    Ghat = prob.coeffs.Ghat
    exact = opts.inner == "exact"

    def ev(phi):
        phi = np.maximum(phi, 0.0)
        q = (_biased_exact(prob, phi, tol=opts.cd_tol,
                           max_sweeps=opts.max_cd_sweeps)
             if exact else _biased_closed_form(prob, phi))
        g = _usage(q, Ghat) - prob.p_ave
        return _biased_dual_value(prob, phi, q), g

    res = dual_subgradient(ev, np.zeros(prob.K), step=opts.subgradient_step,
                           max_iters=opts.max_iters, tol=opts.dual_tol)
    phi = res.duals
    q = (_biased_exact(prob, phi, tol=opts.cd_tol, max_sweeps=opts.max_cd_sweeps)
         if exact else _biased_closed_form(prob, phi))
    q = _repair_budgets(q, prob)
    obj = effective_gap_biased(q ** 2, prob.trace, prob.coeffs)
    return PowerSchedule(
        p=q ** 2, amplitudes=q, duals={"avg_power": phi}, objective=obj,
        mode=f"{opts.inner}/subgradient", converged=res.converged,
        diagnostics={"dual_value": res.best_value,
                     "primal_dual_gap": obj - res.best_value,
                     "iterations": res.iterations})


# ---------------------------------------------------------------------------
# Case with per-round unbiasedness constraints
# ---------------------------------------------------------------------------

def _unbiased_inner(prob: PowerProblem, lam: np.ndarray,
                    mu: np.ndarray) -> np.ndarray:
    """Exact Lagrangian minimizer: separable regularized channel inversion."""
    h = prob.trace.gains
    J, B, Ghat = prob.coeffs.J, prob.coeffs.B, prob.coeffs.Ghat
    N = prob.N
    U = prob.amplitude_caps
    num = h * (2.0 * J * B - mu)[None, :]
    den = 2.0 * (J * B)[None, :] * h ** 2 + 2.0 * lam[:, None] * Ghat[None, :] / N
    q = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    q[h <= 0] = 0.0
    return np.clip(q, 0.0, U)


def _solve_mu(prob: PowerProblem, lam: np.ndarray, iters: int = 60) -> np.ndarray:
    """Per-round alignment duals solving sum_k h*q == K.

    The alignment is piecewise linear and strictly decreasing in mu, so
    safeguarded Newton (bisection fallback on a maintained bracket)
    converges to machine accuracy in a few steps per round.
    """
    h = prob.trace.gains
    J, B, Ghat = prob.coeffs.J, prob.coeffs.B, prob.coeffs.Ghat
    K, N = prob.K, prob.N
    U = prob.amplitude_caps
    den = 2.0 * (J * B)[None, :] * h ** 2 + 2.0 * lam[:, None] * Ghat[None, :] / N
    live = (h > 0) & (den > 0)
    safe_den = np.where(den > 0, den, 1.0)
    slope_h2 = h ** 2 / safe_den

    def q_of(mu):
        q = np.where(live, h * (2.0 * (J * B) - mu)[None, :] / safe_den, 0.0)
        return np.clip(q, 0.0, U)

    hi = np.full(N, 2.0 * float(np.max(J * B)) + 1.0)
    lo = np.full(N, -1.0)
    q = q_of(lo)
    for _ in range(200):
        short = (h * q).sum(axis=0) < K
        if not np.any(short):
            break
        lo[short] *= 4.0
        q = q_of(lo)
    mu = np.zeros(N)
    q = q_of(mu)
    for _ in range(iters):
        resid = (h * q).sum(axis=0) - K
        if float(np.max(np.abs(resid))) < 1e-12 * K:
            break
        high = resid > 0
        lo = np.where(high, mu, lo)
        hi = np.where(high, hi, mu)
        open_ = live & (q > 0) & (q < U)
        slope = -np.where(open_, slope_h2, 0.0).sum(axis=0)
        slope = np.where(slope < 0, slope, -1.0)
        mu_new = mu - resid / slope
        bad = (mu_new <= lo) | (mu_new >= hi)
        mu = np.where(bad, 0.5 * (lo + hi), mu_new)
        q = q_of(mu)
    return mu


def solve_unbiased(prob: PowerProblem, opts: SolverOptions | None = None) -> PowerSchedule:
    """Dual ascent for the gap-minimizing problem with unbiased aggregation.

    The per-round alignment duals are solved exactly (safeguarded Newton on
    the alignment equality) inside every evaluation; the per-device
    average-power duals follow the multiplicative fixed-point update, with
    per-coordinate bisection as a polish for instances the fast path leaves
    unconverged.
    """
    if prob.case != CASE_UNBIASED:
        raise ValueError("problem is not an unbiased-case instance")
    opts = opts or SolverOptions()
    h = prob.trace.gains
    K = prob.K
    Ghat = prob.coeffs.Ghat
    U = prob.amplitude_caps
    align_max = (h * U).sum(axis=0)
    if np.any(align_max < K * (1.0 - 1e-12)):
        # the caps alone bound the achievable aligned-amplitude level
        raise InfeasibleError(float(np.min(align_max)), K)
    tol_k = opts.dual_tol * np.maximum(1.0, prob.p_ave)

    def usage_with(lam_vec):
        return _usage(_unbiased_inner(prob, lam_vec, _solve_mu(prob, lam_vec)),
                      Ghat)

    lam, converged, _ = _multiplicative_ascent(
        usage_with, prob.p_ave, tol_k, np.full(K, 1e-6),
        max_iters=opts.dual_iters)
    for _ in range(0 if converged else opts.max_outer):
        lam_prev = lam.copy()
        for k in range(K):
            def viol(x, k=k):
                trial = lam.copy()
                trial[k] = x
                return usage_with(trial)[k] - prob.p_ave[k]

            if lam[k] > 0:
                cur = viol(lam[k])
                if abs(cur) <= 0.2 * tol_k[k]:
                    continue
                if cur < 0 and viol(0.0) <= tol_k[k]:
                    lam[k] = 0.0
                    continue
            elif viol(0.0) <= tol_k[k]:
                lam[k] = 0.0
                continue
            hi = max(2.0 * lam[k], 1.0)
            for _ in range(200):
                if viol(hi) < 0:
                    break
                hi *= 4.0
            lam[k] = brentq(viol, 0.0, hi, xtol=1e-13 * max(1.0, hi),
                            rtol=1e-12)
        viol_all = usage_with(lam) - prob.p_ave
        converged = bool(np.all(viol_all <= tol_k))
        moved = float(np.max(np.abs(lam - lam_prev)))
        if converged or moved <= 1e-12 * (1.0 + float(np.max(lam))):
            break
    mu = _solve_mu(prob, lam)
    q = _unbiased_inner(prob, lam, mu)
    if not converged and opts.check_feasibility:
        rep = check_feasibility(prob, opts, stop_at=float(K))
        if not rep.feasible:
            raise InfeasibleError(rep.l_star, K)
    obj = effective_gap_unbiased(q ** 2, prob.trace, prob.coeffs)
    slack = _usage(q, Ghat) - prob.p_ave
    align_err = (h * q).sum(axis=0) - K
    dval = obj + float(lam @ slack) + float(mu @ align_err)
    return PowerSchedule(
        p=q ** 2, amplitudes=q,
        duals={"avg_power": lam.copy(), "alignment": mu.copy()},
        objective=obj, mode="exact", converged=converged,
        diagnostics={
            "dual_value": dval,
            "primal_dual_gap": obj - dval,
            "max_avg_violation": float(np.max(slack)),
            "max_alignment_error": float(np.max(np.abs(align_err))),
        })


# ---------------------------------------------------------------------------
# Feasibility of the unbiased problem
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class FeasibilityReport:
    l_star: float
    feasible: bool
    amplitudes: np.ndarray


def _project_budget(x: np.ndarray, prob: PowerProblem,
                    iters: int = 70) -> np.ndarray:
    """Euclidean projection onto (box) x (per-device average-power ball)."""
    U = prob.amplitude_caps
    Ghat = prob.coeffs.Ghat
    budget = prob.N * prob.p_ave
    q = np.clip(x, 0.0, U)
    used = (Ghat[None, :] * q ** 2).sum(axis=1)
    bad = used > budget * (1.0 + 1e-15)
    if not np.any(bad):
        return q
    lo = np.zeros(prob.K)
    hi = np.ones(prob.K)
    for _ in range(200):
        trial = np.clip(x / (1.0 + hi[:, None] * Ghat[None, :]), 0.0, U)
        over = bad & ((Ghat[None, :] * trial ** 2).sum(axis=1) > budget)
        if not np.any(over):
            break
        hi = np.where(over, hi * 4.0, hi)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        trial = np.clip(x / (1.0 + mid[:, None] * Ghat[None, :]), 0.0, U)
        over = (Ghat[None, :] * trial ** 2).sum(axis=1) > budget
        lo = np.where(over, mid, lo)
        hi = np.where(over, hi, mid)
    nu = 0.5 * (lo + hi)
    proj = np.clip(x / (1.0 + nu[:, None] * Ghat[None, :]), 0.0, U)
    return np.where(bad[:, None], proj, q)


def check_feasibility(prob: PowerProblem, opts: SolverOptions | None = None,
                      stop_at: float | None = None) -> FeasibilityReport:
    """Largest per-round aligned-amplitude level supported by the budgets.

    Projected supergradient ascent on the concave min-over-rounds objective;
    the report is the best level seen, so it is a certified lower bound on
    the true level.  `stop_at` allows an early exit once the level proves
    feasibility (the exact maximum is then not pursued).
    """
    opts = opts or SolverOptions()
    h = prob.trace.gains
    K = prob.K
    U = prob.amplitude_caps
    q = _project_budget(U.copy(), prob)
    scores = (h * q).sum(axis=0)
    best = float(scores.min())
    best_q = q.copy()
    step0 = float(np.mean(U[np.isfinite(U)])) + 1e-12
    for t in range(1, opts.feasibility_iters + 1):
        if stop_at is not None and best >= stop_at:
            break
        n_star = int(np.argmin(scores))
        g = np.zeros_like(q)
        g[:, n_star] = h[:, n_star]
        q = _project_budget(q + step0 / np.sqrt(t) * g, prob)
        scores = (h * q).sum(axis=0)
        level = float(scores.min())
        if level > best:
            best, best_q = level, q.copy()
    return FeasibilityReport(l_star=best, feasible=best >= K * (1.0 - 1e-9),
                             amplitudes=best_q)


# ---------------------------------------------------------------------------
# Benchmark policies
# ---------------------------------------------------------------------------

def _finalize(prob: PowerProblem, q: np.ndarray, mode: str,
              duals: dict | None = None) -> PowerSchedule:
    obj = effective_gap(q ** 2, prob.trace, prob.coeffs)
    usage = _usage(q, prob.coeffs.Ghat)
    cap_viol = float(np.max(q ** 2 * prob.coeffs.Ghat[None, :]
                            - prob.p_max[:, None]))
    diag = {
        "max_avg_violation": float(np.max(usage - prob.p_ave)),
        "max_cap_violation": cap_viol,
    }
    diag["violates_constraints"] = (diag["max_avg_violation"] > 1e-9
                                    or cap_viol > 1e-9)
    return PowerSchedule(p=q ** 2, amplitudes=q, duals=duals or {},
                         objective=obj, mode=mode, diagnostics=diag)


def policy_fixed_power(prob: PowerProblem, mode: str = "literal") -> PowerSchedule:
    """Constant transmit power benchmark.

    `literal` sets p directly to the average budget; `budget-normalized`
    divides by the gradient bound so the average constraint holds with
    equality.
    """
    N = prob.N
    if mode == "literal":
        p = np.repeat(prob.p_ave[:, None], N, axis=1)
    elif mode == "budget-normalized":
        p = prob.p_ave[:, None] / prob.coeffs.Ghat[None, :]
    else:
        raise ValueError(f"unknown fixed-power mode {mode!r}")
    return _finalize(prob, np.sqrt(p), f"fixed-power/{mode}")


def policy_mse_min(prob: PowerProblem) -> PowerSchedule:
    """Per-round MSE minimization: truncated channel inversion.

    The average budget is split equally across rounds and combined with the
    per-round cap, so every round is optimized in isolation.
    """
    h = prob.trace.gains
    cap = np.sqrt(np.minimum(prob.p_max, prob.p_ave)[:, None]
                  / prob.coeffs.Ghat[None, :])
    with np.errstate(divide="ignore"):
        inv = np.where(h > 0, 1.0 / np.where(h > 0, h, 1.0), np.inf)
    return _finalize(prob, np.minimum(inv, cap), "mse-min")


def policy_channel_inversion(prob: PowerProblem, truncate: bool = True) -> PowerSchedule:
    """Plain channel inversion; optionally truncated at the per-round caps."""
    h = prob.trace.gains
    with np.errstate(divide="ignore"):
        inv = np.where(h > 0, 1.0 / np.where(h > 0, h, 1.0), 0.0)
    q = np.minimum(inv, prob.amplitude_caps) if truncate else inv
    return _finalize(prob, q, "channel-inversion")


# ---------------------------------------------------------------------------
# Generic projected dual-subgradient engine
# ---------------------------------------------------------------------------

@dataclass
class DualResult:
    duals: np.ndarray
    best_value: float
    converged: bool
    iterations: int


def dual_subgradient(eval_fn, init, *, step: float = 1.0,
                     max_iters: int = 10_000, tol: float = 1e-8,
                     nonneg: np.ndarray | None = None) -> DualResult:
    """Projected subgradient ascent with diminishing steps step/sqrt(t).

    `eval_fn(duals)` returns (dual_value, subgradient).  Inequality duals are
    projected onto the nonnegative orthant (all coordinates by default;
    pass a boolean mask to leave equality duals free).  The best-value
    iterate is returned.
    """
    x = np.asarray(init, dtype=float).copy()
    mask = np.ones_like(x, dtype=bool) if nonneg is None else np.asarray(nonneg, bool)
    best_x, best_val = x.copy(), -np.inf
    it = 0
    converged = False
    for it in range(1, max_iters + 1):
        val, g = eval_fn(x)
        if val > best_val:
            best_val, best_x = val, x.copy()
        gnorm = float(np.linalg.norm(g))
        if gnorm < tol:
            converged = True
            break
        x = x + step / np.sqrt(it) * np.asarray(g, dtype=float)
        x[mask] = np.maximum(x[mask], 0.0)
    return DualResult(best_x, best_val, converged, it)


# ---------------------------------------------------------------------------
# Independent verification oracle
# ---------------------------------------------------------------------------

def _biased_objective_grad(prob: PowerProblem, q: np.ndarray):
    h = prob.trace.gains
    J, A, B = prob.coeffs.J, prob.coeffs.A, prob.coeffs.B
    K = prob.K
    r = h * q
    S = r.sum(axis=0)
    f = float(J @ (A * (S - K) ** 2) + J @ (B * ((r - 1.0) ** 2).sum(axis=0)))
    g = 2.0 * (J * A)[None, :] * h * (S - K)[None, :] + 2.0 * (J * B)[None, :] * h * (r - 1.0)
    return f, g


def oracle_projected_gradient(prob: PowerProblem, x0: np.ndarray | None = None,
                              tol: float = 1e-9,
                              max_iters: int = 20_000) -> PowerSchedule:
    """Independent solve of either power-control problem.

    The unconstrained-bias case is minimized by projected gradient descent
    with backtracking (the feasible set projects exactly per device); the
    unbiased case, whose per-round alignment equalities have no cheap exact
    projection, is handed to a conic solver via cvxpy.
    """
    if prob.case == CASE_UNBIASED:
        return _oracle_convex(prob)
    U = prob.amplitude_caps
    q = _project_budget(U.copy() if x0 is None else np.asarray(x0, float).copy(), prob)
    # Lipschitz constant of the gradient: per round 2*J*(A*||h||^2 + B*max h^2)
    h = prob.trace.gains
    J, A, B = prob.coeffs.J, prob.coeffs.A, prob.coeffs.B
    lip = float(np.max(2.0 * J * (A * (h ** 2).sum(axis=0)
                                  + B * (h ** 2).max(axis=0))))
    t = 1.0 / max(lip, 1e-12)
    # FISTA with adaptive restart; the feasible set projects exactly.
    y = q.copy()
    f, _ = _biased_objective_grad(prob, q)
    theta = 1.0
    converged = False
    pg_norm = np.inf
    for _ in range(max_iters):
        _, gy = _biased_objective_grad(prob, y)
        q_new = _project_budget(y - t * gy, prob)
        f_new, _ = _biased_objective_grad(prob, q_new)
        if f_new > f:  # restart the momentum on any objective increase
            theta = 1.0
            y = q.copy()
            _, gy = _biased_objective_grad(prob, y)
            q_new = _project_budget(y - t * gy, prob)
            f_new, _ = _biased_objective_grad(prob, q_new)
        theta_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * theta ** 2))
        y = q_new + (theta - 1.0) / theta_new * (q_new - q)
        pg_norm = float(np.linalg.norm(q_new - q)) / t
        q, f, theta = q_new, f_new, theta_new
        if pg_norm < tol * (1.0 + lip):
            converged = True
            break
    f, _ = _biased_objective_grad(prob, q)
    return PowerSchedule(p=q ** 2, amplitudes=q, duals={}, objective=f,
                         mode="oracle-pgd", converged=converged,
                         diagnostics={"projected_gradient_norm": pg_norm})


def _oracle_convex(prob: PowerProblem) -> PowerSchedule:
    import cvxpy as cp

    h = prob.trace.gains
    K, N = prob.K, prob.N
    U = prob.amplitude_caps
    JB = prob.coeffs.J * prob.coeffs.B
    Ghat = prob.coeffs.Ghat
    Q = cp.Variable((K, N), nonneg=True)
    r = cp.multiply(h, Q)
    obj = cp.sum(cp.multiply(JB[None, :], cp.square(r - 1.0)))
    cons = [Q <= U]
    avg_cons = [cp.sum(cp.multiply(Ghat, cp.square(Q[k, :]))) / N <= prob.p_ave[k]
                for k in range(K)]
    align_cons = [h[:, n] @ Q[:, n] == K for n in range(N)]
    problem = cp.Problem(cp.Minimize(obj), cons + avg_cons + align_cons)
    problem.solve(solver=cp.CLARABEL)
    if problem.status not in ("optimal", "optimal_inaccurate"):
        raise InfeasibleError(float("nan"), K)
    q = np.clip(np.asarray(Q.value), 0.0, U)
    duals = {
        "avg_power": np.array([float(c.dual_value) for c in avg_cons]),
        "alignment": np.array([float(c.dual_value) for c in align_cons]),
    }
    return PowerSchedule(p=q ** 2, amplitudes=q, duals=duals,
                         objective=effective_gap_unbiased(q ** 2, prob.trace, prob.coeffs),
                         mode="oracle-convex",
                         converged=problem.status == "optimal",
                         diagnostics={"status": problem.status})


# ---------------------------------------------------------------------------
# KKT diagnostics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KKTReport:
    stationarity: float
    primal_violation: float
    complementary_slackness: float
    details: dict


def kkt_residuals(sched: PowerSchedule, prob: PowerProblem) -> KKTReport:
    """Stationarity, feasibility and complementary-slackness residuals.

    Stationarity is checked over coordinates strictly inside the box; the
    sign conditions at clipped coordinates are reported in `details`.
    """
    q = sched.amplitudes
    h = prob.trace.gains
    U = prob.amplitude_caps
    Ghat = prob.coeffs.Ghat
    N, K = prob.N, prob.K
    if prob.case == CASE_BIASED:
        _, g = _biased_objective_grad(prob, q)
        dual = sched.duals.get("avg_power", np.zeros(K))
        gL = g + 2.0 * dual[:, None] * Ghat[None, :] * q / N
        align_viol = 0.0
    else:
        JB = prob.coeffs.J * prob.coeffs.B
        g = 2.0 * JB[None, :] * h * (h * q - 1.0)
        dual = sched.duals.get("avg_power", np.zeros(K))
        mu = sched.duals.get("alignment", np.zeros(N))
        gL = g + 2.0 * dual[:, None] * Ghat[None, :] * q / N + mu[None, :] * h
        align_viol = float(np.max(np.abs((h * q).sum(axis=0) - K)))
    edge = 1e-7 * (1.0 + U)
    interior = (q > edge) & (q < U - edge) & (h > 0)
    stationarity = float(np.max(np.abs(gL[interior]), initial=0.0))
    at_zero = float(np.max(-gL[(q <= edge) & (h > 0)], initial=0.0))
    at_cap = float(np.max(gL[q >= U - edge], initial=0.0))
    usage = _usage(q, Ghat)
    primal = max(float(np.max(q ** 2 * Ghat[None, :] - prob.p_max[:, None])),
                 float(np.max(usage - prob.p_ave)),
                 float(np.max(-q)), align_viol, 0.0)
    comp = float(np.max(np.abs(dual * (usage - prob.p_ave)), initial=0.0))
    return KKTReport(stationarity=stationarity, primal_violation=primal,
                     complementary_slackness=comp,
                     details={"sign_at_zero": at_zero, "sign_at_cap": at_cap,
                              "alignment_violation": align_viol})


def save_schedule(sched: PowerSchedule, prob: PowerProblem, path) -> None:
    """CSV export: (round, device, gain, amplitude, power, per-round power)."""
    import csv as _csv

    Ghat = prob.coeffs.Ghat
    with open(path, "w", newline="") as fh:
        wr = _csv.writer(fh)
        wr.writerow(["round", "device", "gain", "amplitude", "power",
                     "round_power"])
        for n in range(prob.N):
            for k in range(prob.K):
                wr.writerow([n + 1, k, repr(float(prob.trace.gains[k, n])),
                             repr(float(sched.amplitudes[k, n])),
                             repr(float(sched.p[k, n])),
                             repr(float(sched.p[k, n] * Ghat[n]))])
