"""End-to-end training harness: FedSGD over a noisy fading MAC, Monte-Carlo
replication, paired policy comparison and bound validation.

Policies are computed offline: the whole channel trace is drawn before
training and handed to the power solver, matching the joint-over-rounds
problem formulation (the schedule is non-causal by design).  Within a trial
every policy sees the same dataset, channel trace, batch draws and noise
realizations, because each policy replays an identically seeded stream.
"""

from __future__ import annotations

import ast
import csv
import hashlib
from dataclasses import dataclass, field, fields, replace

import numpy as np

from . import channel as ch
from . import convergence as cv
from . import dataset as dsm
from . import power as pw

__all__ = [
    "ExperimentConfig",
    "TrainingTrace",
    "ComparisonResult",
    "BoundReport",
    "parse_config",
    "config_lines",
    "build_power_schedule",
    "run_training",
    "monte_carlo",
    "compare_policies",
    "crossover_round",
    "validate_bound",
    "export_trace",
    "import_trace",
    "export_comparison",
]

POLICIES = ("gap-min", "gap-min-unbiased", "mse-min", "fixed-power",
            "channel-inversion")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset_seed: int = 7
    channel_seed: int = 11
    noise_seed: int = 13
    batch_seed: int = 17
    K: int = 10
    N: int = 400
    q: int = 10
    D: int = 1000
    m_b: int | None = 10            # None selects min(N, D)
    noise_std: float = 0.1 ** 0.5    # receiver noise std per coordinate
    label_noise_std: float = 0.2
    ridge_weight: float = 5e-5
    rate_kind: str = "fixed"         # "fixed" | "diminishing"
    eta: float = 0.05
    u: float = 2.0
    v: float = 8.0
    p_ave_base: tuple = (5.0, 15.0)  # per-device pattern, cycled over devices
    p_max_multiplier: float = 5.0
    policies: tuple = ("gap-min", "gap-min-unbiased", "mse-min", "fixed-power")
    trials: int = 100
    holdout: int = 2000
    fixed_power_mode: str = "literal"
    inner_mode: str = "exact"
    literal_unbiased_divisor: bool = False
    w_bound_factor: float = 2.0      # W = factor * ||w_star||

    def learning_constants(self, ds: "dsm.Dataset") -> "dsm.LearningConstants":
        W = self.w_bound_factor * float(
            np.linalg.norm(dsm.optimal_model(ds).w_star))
        return dsm.learning_constants(ds, W=W)

    def __post_init__(self):
        if min(self.K, self.N, self.q, self.D, self.trials, self.holdout) < 1:
            raise ValueError("counts must be >= 1")
        if self.m_b is not None and not 1 <= self.m_b <= self.D:
            raise ValueError("m_b must be in [1, D]")
        if min(self.p_ave_base) <= 0 or self.p_max_multiplier <= 0:
            raise ValueError("power budgets must be > 0")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if self.w_bound_factor <= 0:
            raise ValueError("w_bound_factor must be > 0")
        for p in self.policies:
            if p not in POLICIES:
                raise ValueError(f"unknown policy {p!r}")

    @property
    def effective_m_b(self) -> int:
        return self.m_b if self.m_b is not None else min(self.N, self.D)

    @property
    def rate_params(self) -> dict:
        if self.rate_kind == "fixed":
            return {"eta": self.eta}
        return {"u": self.u, "v": self.v}

    def budget_pattern(self) -> np.ndarray:
        base = self.p_ave_base
        return np.array([base[k % len(base)] for k in range(self.K)])

    def solver_budgets(self) -> tuple[np.ndarray, np.ndarray]:
        """Budgets in gradient-power units: the per-symbol budget times q."""
        ave = self.q * self.budget_pattern()
        return ave, self.p_max_multiplier * ave

    def hash(self) -> str:
        blob = ";".join(f"{f.name}={getattr(self, f.name)!r}"
                        for f in fields(self))
        return hashlib.sha1(blob.encode()).hexdigest()[:12]


def _literal(value):
    """repr that numpy scalars survive as parseable Python literals."""
    if isinstance(value, (np.floating, np.integer)):
        value = value.item()
    return repr(value)


def config_lines(cfg: ExperimentConfig) -> list[str]:
    return [f"{f.name} = {_literal(getattr(cfg, f.name))}" for f in fields(cfg)]


def parse_config(path, overrides: dict | None = None) -> ExperimentConfig:
    """Read a flat `key = value` config file (values in Python literal syntax)."""
    known = {f.name for f in fields(ExperimentConfig)}
    kw = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in known:
                raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
            try:
                kw[key] = ast.literal_eval(val)
            except (SyntaxError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: bad value for {key}: {exc}")
    if overrides:
        bad = set(overrides) - known
        if bad:
            raise ValueError(f"unknown config keys {sorted(bad)}")
        kw.update(overrides)
    return ExperimentConfig(**kw)


# ---------------------------------------------------------------------------
# Power schedule construction for named policies
# ---------------------------------------------------------------------------

def build_power_schedule(cfg: ExperimentConfig, policy: str,
                         trace: ch.ChannelTrace, lc: dsm.LearningConstants,
                         opts: pw.SolverOptions | None = None):
    """Solve or construct the transmit-power schedule for one policy."""
    sched = cv.build_schedule(cfg.rate_kind, cfg.rate_params, trace.N,
                              lc.delta, lc.L)
    case = cv.CASE_UNBIASED if policy == "gap-min-unbiased" else cv.CASE_BIASED
    coeffs = cv.build_coefficients(
        case, sched, lc, trace.K, cfg.effective_m_b,
        literal_unbiased_divisor=cfg.literal_unbiased_divisor)
    p_ave, p_max = cfg.solver_budgets()
    prob = pw.PowerProblem(trace=trace, coeffs=coeffs, p_max=p_max, p_ave=p_ave)
    if opts is None:
        # Monte-Carlo runs tolerate slacker duals than the solver default;
        # a budget violation of ~1e-5 power units is invisible to training.
        opts = pw.SolverOptions(inner=cfg.inner_mode, dual_tol=1e-6)
    if policy == "gap-min":
        return pw.solve_biased(prob, opts), prob
    if policy == "gap-min-unbiased":
        return pw.solve_unbiased(prob, opts), prob
    if policy == "mse-min":
        return pw.policy_mse_min(prob), prob
    if policy == "fixed-power":
        return pw.policy_fixed_power(prob, cfg.fixed_power_mode), prob
    if policy == "channel-inversion":
        return pw.policy_channel_inversion(prob), prob
    raise ValueError(f"unknown policy {policy!r}")


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainingTrace:
    policy: str
    losses: np.ndarray       # (R+1,), starts at the all-zero model
    gaps: np.ndarray         # (R+1,)
    pred_errors: np.ndarray  # (R+1,)
    eps_mean: np.ndarray     # (R, q) realized aggregation error per round
    eps_sq: np.ndarray       # (R,) squared aggregation-error norms
    diverged: bool
    config_hash: str
    convention: str

    @property
    def rounds(self) -> int:
        return self.losses.size - 1


DIVERGENCE_FACTOR = 1e6


def _holdout_set(cfg: ExperimentConfig):
    rng = np.random.default_rng(np.random.SeedSequence((cfg.dataset_seed, 7919)))
    X = rng.standard_normal((cfg.holdout, cfg.q))
    tau = sum(c * X[:, i] for i, c in zip(dsm._LABEL_IDX, dsm._LABEL_COEF))
    tau = tau + cfg.label_noise_std * rng.standard_normal(cfg.holdout)
    return X, tau


def _pred_error(w, holdout):
    X, tau = holdout
    r = X @ w - tau
    return float(np.mean(r * r))


def run_training(cfg: ExperimentConfig, ds: dsm.Dataset, trace: ch.ChannelTrace,
                 schedule: pw.PowerSchedule, rng: np.random.Generator, *,
                 lc: dsm.LearningConstants | None = None,
                 holdout=None, policy: str = "") -> TrainingTrace:
    """One FedSGD run with lossy over-the-air aggregation.

    Per round the draw order is fixed (device batches 0..K-1, then receiver
    noise), so two runs with identically seeded generators see the same
    randomness regardless of the power schedule.
    """
    if lc is None:
        lc = cfg.learning_constants(ds)
    if holdout is None:
        holdout = _holdout_set(cfg)
    K, R = trace.K, trace.N
    if ds.n_devices != K:
        raise ValueError("dataset and channel trace disagree on K")
    if schedule.p.shape != (K, R):
        raise ValueError("power schedule shape does not match the trace")
    rates = cv.build_schedule(cfg.rate_kind, cfg.rate_params, R,
                              lc.delta, lc.L).eta
    m_b = min(cfg.effective_m_b, ds.samples_per_device)
    w = np.zeros(ds.q)
    losses = [dsm.global_loss(w, ds)]
    preds = [_pred_error(w, holdout)]
    eps_rows, eps_sq = [], []
    diverged = False
    for n in range(R):
        batches = np.stack([dsm.draw_batch(ds, k, m_b, rng) for k in range(K)])
        grads = dsm.per_sample_gradients(w, ds, batches.reshape(-1))
        grads = grads.reshape(K, m_b, ds.q).mean(axis=1)
        res = ch.aggregate(grads, trace.gains[:, n], schedule.p[:, n],
                           trace.noise_std, rng=rng)
        eps = res.estimate - grads.mean(axis=0)
        eps_rows.append(eps)
        eps_sq.append(float(eps @ eps))
        w = w - rates[n] * res.estimate
        loss = dsm.global_loss(w, ds)
        losses.append(loss)
        preds.append(_pred_error(w, holdout))
        if not np.isfinite(loss) or loss > DIVERGENCE_FACTOR * losses[0]:
            diverged = True
            break
    losses = np.array(losses)
    return TrainingTrace(
        policy=policy, losses=losses, gaps=losses - lc.F_star,
        pred_errors=np.array(preds),
        eps_mean=np.array(eps_rows).reshape(len(eps_rows), ds.q),
        eps_sq=np.array(eps_sq), diverged=diverged,
        config_hash=cfg.hash(), convention=lc.convention)


# ---------------------------------------------------------------------------
# Monte-Carlo engine
# ---------------------------------------------------------------------------

@dataclass
class ComparisonResult:
    policies: tuple
    trials: int
    counted: dict      # policy -> trials included in the means
    diverged: dict
    infeasible: dict
    mean_gap: dict     # policy -> (N+1,)
    se_gap: dict
    mean_pred: dict
    se_pred: dict
    eps_bias: dict     # policy -> (N,) norms of mean aggregation error
    eps_mse: dict      # policy -> (N,) mean squared aggregation-error norms
    config_hash: str

    def summary_table(self) -> list[dict]:
        rows = []
        for p in self.policies:
            n = self.counted[p]
            rows.append({
                "policy": p,
                "trials": n,
                "final_gap": float(self.mean_gap[p][-1]) if n else float("nan"),
                "final_gap_se": float(self.se_gap[p][-1]) if n else float("nan"),
                "final_pred": float(self.mean_pred[p][-1]) if n else float("nan"),
                "diverged": self.diverged[p],
                "infeasible": self.infeasible[p],
            })
        return rows


def _trial_rng(cfg: ExperimentConfig, t: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence((cfg.noise_seed, cfg.batch_seed, t)))


def monte_carlo(cfg: ExperimentConfig, *, fixed_trace: ch.ChannelTrace | None = None,
                solver_opts: pw.SolverOptions | None = None,
                drop_unpaired: bool = False) -> ComparisonResult:
    """Run every configured policy over independently seeded trials.

    Each trial draws one channel trace shared by all policies; each policy
    replays the same batch/noise stream.  Sums are accumulated in fixed trial
    order, so the result does not depend on any execution schedule.  Diverged
    trials are excluded from means and counted; infeasible trials likewise.
    With `drop_unpaired`, a trial that is infeasible for any policy is dropped
    from every policy's means so that all means average the same trials.
    """
    ds = dsm.generate_dataset(cfg.dataset_seed, cfg.K, cfg.D, cfg.q,
                              cfg.label_noise_std, cfg.ridge_weight)
    lc = cfg.learning_constants(ds)
    holdout = _holdout_set(cfg)
    pol = cfg.policies
    R = cfg.N
    acc = {p: {"g": np.zeros(R + 1), "g2": np.zeros(R + 1),
               "e": np.zeros(R + 1), "e2": np.zeros(R + 1),
               "eps": np.zeros((R, cfg.q)), "eps2": np.zeros(R),
               "n": 0, "div": 0, "inf": 0} for p in pol}
    cached = {}
    if fixed_trace is not None:
        for p in pol:
            try:
                cached[p] = build_power_schedule(cfg, p, fixed_trace, lc,
                                                 solver_opts)
            except pw.InfeasibleError:
                cached[p] = None
    for t in range(cfg.trials):
        trace = fixed_trace
        if trace is None:
            trace = ch.draw_channels(
                np.random.SeedSequence((cfg.channel_seed, t)),
                cfg.K, cfg.N, cfg.noise_std)
        scheds = {}
        for p in pol:
            if fixed_trace is not None:
                scheds[p] = cached[p]
            else:
                try:
                    scheds[p] = build_power_schedule(cfg, p, trace, lc,
                                                     solver_opts)
                except pw.InfeasibleError:
                    scheds[p] = None
            if scheds[p] is None:
                acc[p]["inf"] += 1
        if drop_unpaired and any(s is None for s in scheds.values()):
            continue
        for p in pol:
            sched_prob = scheds[p]
            if sched_prob is None:
                continue
            tr = run_training(cfg, ds, trace, sched_prob[0], _trial_rng(cfg, t),
                              lc=lc, holdout=holdout, policy=p)
            if tr.diverged:
                acc[p]["div"] += 1
                continue
            a = acc[p]
            a["g"] += tr.gaps
            a["g2"] += tr.gaps ** 2
            a["e"] += tr.pred_errors
            a["e2"] += tr.pred_errors ** 2
            a["eps"] += tr.eps_mean
            a["eps2"] += tr.eps_sq
            a["n"] += 1

    def mean_se(s, s2, n):
        if n == 0:
            return np.full_like(s, np.nan), np.full_like(s, np.nan)
        mean = s / n
        if n == 1:
            return mean, np.zeros_like(s)
        var = np.maximum(s2 - n * mean ** 2, 0.0) / (n - 1)
        return mean, np.sqrt(var / n)

    mg, sg, mp, sp, eb, em = {}, {}, {}, {}, {}, {}
    counted, div, inf = {}, {}, {}
    for p in pol:
        a = acc[p]
        mg[p], sg[p] = mean_se(a["g"], a["g2"], a["n"])
        mp[p], sp[p] = mean_se(a["e"], a["e2"], a["n"])
        if a["n"]:
            eb[p] = np.linalg.norm(a["eps"] / a["n"], axis=1)
            em[p] = a["eps2"] / a["n"]
        else:
            eb[p] = np.full(R, np.nan)
            em[p] = np.full(R, np.nan)
        counted[p], div[p], inf[p] = a["n"], a["div"], a["inf"]
    return ComparisonResult(policies=pol, trials=cfg.trials, counted=counted,
                            diverged=div, infeasible=inf, mean_gap=mg,
                            se_gap=sg, mean_pred=mp, se_pred=sp, eps_bias=eb,
                            eps_mse=em, config_hash=cfg.hash())


def compare_policies(cfg: ExperimentConfig, **kw) -> ComparisonResult:
    """Paired multi-policy comparison (at least two policies required).

    Trials infeasible for any selected policy are dropped from every policy's
    means, so the reported curves always average identical trial sets.
    """
    if len(cfg.policies) < 2:
        raise ValueError("compare_policies needs at least two policies")
    kw.setdefault("drop_unpaired", True)
    return monte_carlo(cfg, **kw)


def crossover_round(result: ComparisonResult, a: str, b: str) -> int | None:
    """First round after which policy `a`'s mean gap stays below `b`'s."""
    ga, gb = result.mean_gap[a], result.mean_gap[b]
    worse = np.flatnonzero(ga >= gb)
    if worse.size == 0:
        return 0
    n = int(worse[-1]) + 1
    return n if n < ga.size else None


# ---------------------------------------------------------------------------
# Bound validation
# ---------------------------------------------------------------------------

@dataclass
class BoundReport:
    policy: str
    rows: list          # dicts per checkpoint
    hypothesis_flags: tuple
    satisfied: bool


def validate_bound(cfg: ExperimentConfig,
                   checkpoints: tuple = (50, 100, 200, 400),
                   policies: tuple = ("gap-min", "gap-min-unbiased"),
                   solver_opts: pw.SolverOptions | None = None) -> list[BoundReport]:
    """Monte-Carlo check that the gap bounds dominate the empirical mean gap.

    One channel trace is drawn and held fixed across trials (the bounds are
    conditional on the channel realization), the configured schedule is
    solved once, and the empirical mean gap at each checkpoint is compared
    against (a) the bound evaluated with realized per-round error statistics
    and (b) the fully analytic bound using the gradient-norm over-bounds.
    """
    checkpoints = tuple(sorted(checkpoints))
    if checkpoints[-1] > cfg.N:
        raise ValueError("checkpoints exceed the configured horizon")
    ds = dsm.generate_dataset(cfg.dataset_seed, cfg.K, cfg.D, cfg.q,
                              cfg.label_noise_std, cfg.ridge_weight)
    lc = cfg.learning_constants(ds)
    trace = ch.draw_channels(np.random.SeedSequence((cfg.channel_seed, 0)),
                             cfg.K, cfg.N, cfg.noise_std)
    run_cfg = replace(cfg, policies=policies)
    result = monte_carlo(run_cfg, fixed_trace=trace, solver_opts=solver_opts)
    gap0 = float(dsm.global_loss(np.zeros(cfg.q), ds) - lc.F_star)
    m_b = min(cfg.effective_m_b, ds.samples_per_device)
    reports = []
    for p in policies:
        sched_full, _prob = build_power_schedule(cfg, p, trace, lc, solver_opts)
        case = (cv.CASE_UNBIASED if p == "gap-min-unbiased" else cv.CASE_BIASED)
        flags = []
        if cfg.rate_kind == "fixed" and m_b != cfg.N:
            flags.append(f"mini-batch size {m_b} != N = {cfg.N}")
        b_all = result.eps_bias[p]
        mse_all = result.eps_mse[p]
        rows = []
        ok = True
        for Nc in checkpoints:
            sched_c = cv.build_schedule(cfg.rate_kind, cfg.rate_params, Nc,
                                        lc.delta, lc.L)
            coeffs_c = cv.build_coefficients(
                case, sched_c, lc, cfg.K, m_b,
                literal_unbiased_divisor=cfg.literal_unbiased_divisor)
            trace_c = ch.ChannelTrace(trace.gains[:, :Nc], trace.noise_std)
            analytic = cv.analytic_gap_bound(sched_full.p[:, :Nc], trace_c,
                                             coeffs_c, lc, gap0, cfg.q)
            if cfg.rate_kind == "fixed":
                realized = cv.fixed_rate_bound(gap0, b_all[:Nc], mse_all[:Nc],
                                               sched_c, lc, cfg.K, m_b).total
            else:
                realized = cv.per_round_bound(gap0, b_all[:Nc], mse_all[:Nc],
                                              sched_c, lc, cfg.K, m_b)
            emp = float(result.mean_gap[p][Nc])
            se = float(result.se_gap[p][Nc])
            row = {
                "N": Nc,
                "empirical": emp,
                "se": se,
                "realized_bound": realized,
                "analytic_bound": analytic,
                "realized_ok": realized >= emp - 3.0 * se,
                "analytic_ok": analytic >= emp - 3.0 * se,
                "analytic_ge_realized": analytic >= realized * (1.0 - 1e-9),
            }
            ok = ok and row["realized_ok"] and row["analytic_ok"]
            rows.append(row)
        reports.append(BoundReport(policy=p, rows=rows,
                                   hypothesis_flags=tuple(flags),
                                   satisfied=ok))
    return reports


# ---------------------------------------------------------------------------
# Exports
# ---------------------------------------------------------------------------

def _write_csv(path, cfg: ExperimentConfig | None, header: list[str],
               rows) -> None:
    try:
        fh = open(path, "w", newline="")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc}") from exc
    with fh:
        if cfg is not None:
            for line in config_lines(cfg):
                fh.write(f"# {line}\n")
        wr = csv.writer(fh)
        wr.writerow(header)
        wr.writerows(rows)


def export_trace(trace: TrainingTrace, path,
                 cfg: ExperimentConfig | None = None) -> None:
    """Per-round CSV of one training run; round 0 is the initial model."""
    header = (["round", "loss", "gap", "pred_error", "eps_sq"]
              + [f"eps{i+1}" for i in range(trace.eps_mean.shape[1])])
    rows = []
    for n in range(trace.rounds + 1):
        row = [n, repr(float(trace.losses[n])), repr(float(trace.gaps[n])),
               repr(float(trace.pred_errors[n]))]
        if n == 0:
            row += [""] * (1 + trace.eps_mean.shape[1])
        else:
            row += [repr(float(trace.eps_sq[n - 1]))]
            row += [repr(float(v)) for v in trace.eps_mean[n - 1]]
        rows.append(row)
    _write_csv(path, cfg, header, rows)


def import_trace(path) -> TrainingTrace:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rd = csv.reader(lines)
    header = next(rd)
    q = len(header) - 5
    losses, gaps, preds, eps_sq, eps = [], [], [], [], []
    for row in rd:
        losses.append(float(row[1]))
        gaps.append(float(row[2]))
        preds.append(float(row[3]))
        if row[4] != "":
            eps_sq.append(float(row[4]))
            eps.append([float(v) for v in row[5:]])
    return TrainingTrace(policy="", losses=np.array(losses),
                         gaps=np.array(gaps), pred_errors=np.array(preds),
                         eps_mean=np.array(eps).reshape(len(eps), q),
                         eps_sq=np.array(eps_sq), diverged=False,
                         config_hash="", convention="")


def export_comparison(result: ComparisonResult, path,
                      cfg: ExperimentConfig | None = None) -> None:
    """Plot-data CSV: one row per round, one column group per policy."""
    header = ["round"]
    for p in result.policies:
        header += [f"mean_gap_{p}", f"se_gap_{p}", f"mean_pred_{p}",
                   f"se_pred_{p}"]
    R = result.mean_gap[result.policies[0]].size - 1
    rows = []
    for n in range(R + 1):
        row = [n]
        for p in result.policies:
            row += [repr(float(result.mean_gap[p][n])),
                    repr(float(result.se_gap[p][n])),
                    repr(float(result.mean_pred[p][n])),
                    repr(float(result.se_pred[p][n]))]
        rows.append(row)
    _write_csv(path, cfg, header, rows)
