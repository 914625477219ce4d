"""Offline verification of the DMD inequalities along realized trajectories.

The verifier reads the recorded noise and bundle origins, which the learner
never sees.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from .latency import LatencyOracle
from .solver import Trajectory

INEQ_RTOL = 1e-9
MGF_SLACK = 0.05


@dataclass
class RoundCertificate:
    t: int
    lhs: float
    rhs: float
    xi: list[float]
    z_max: float
    passed: bool


def _window_max_norm(traj: Trajectory, t: int) -> float:
    window = traj.calendar.window(t)
    if not window:
        return 0.0
    norms = np.linalg.norm(traj.z[np.asarray(window) - 1], axis=1)
    return float(norms.max())


def _passes(lhs: float, rhs: float) -> bool:
    return lhs <= rhs + INEQ_RTOL * (1 + abs(rhs))


def check_lemma1(traj: Trajectory, mu_star, sigma_psi: float, d: int, bound: float) -> list[RoundCertificate]:
    """Per-round telescoping inequality.

    sum_{tau in D_t} eta (Phi^tau - Phi*) - 2 eta^2 d L^2 / sigma_psi
        + D(mu*, mu^{t+1}) - D(mu*, mu^t)
    <= sum_{tau in D_t} xi_tau + 2 eta^2 d / sigma_psi * |z_m^t|^2,

    with xi_tau = eta <z^tau, mu* - mu^tau> and |z_m^t| the largest noise norm
    delivered in rounds tau_t..t. Rounds with an empty bundle are checked too;
    they hold trivially.
    """
    if traj.z is None or len(traj.z) != traj.horizon:
        raise ValueError("trajectory lacks recorded noise")
    mu_star = np.asarray(mu_star, dtype=float)
    eta = traj.eta
    slack_l = 2 * eta**2 * d * bound**2 / sigma_psi
    z_coef = 2 * eta**2 * d / sigma_psi
    certs = []
    for t in range(1, traj.horizon + 1):
        bundle = np.asarray(traj.calendar.delivered(t), dtype=int)
        xi = [float(eta * traj.z[k - 1] @ (mu_star - traj.mu[k - 1])) for k in bundle]
        zm = _window_max_norm(traj, t)
        lhs = float(eta * traj.gap[bundle - 1].sum()) - slack_l + traj.bregman_to_star[t] - traj.bregman_to_star[t - 1]
        rhs = sum(xi) + z_coef * zm**2
        certs.append(RoundCertificate(t, lhs, rhs, xi, zm, _passes(lhs, rhs)))
    return certs


def check_chainsum(traj: Trajectory, mu_star, sigma_psi: float, d: int, bound: float) -> list[bool]:
    """sum_{tau in D_t} eta |mu* - mu^tau| against its Bregman/noise bound, per round."""
    mu_star = np.asarray(mu_star, dtype=float)
    eta = traj.eta
    coef = 2 * d**2 * eta**2 / sigma_psi
    out = []
    for t in range(1, traj.horizon + 1):
        bundle = np.asarray(traj.calendar.delivered(t), dtype=int)
        lhs = float(eta * np.linalg.norm(mu_star - traj.mu[bundle - 1], axis=1).sum()) if bundle.size else 0.0
        rhs = math.sqrt(coef * max(traj.bregman_to_star[t - 1], 0.0)) + coef * (bound + _window_max_norm(traj, t))
        out.append(_passes(lhs, rhs))
    return out


class WeightConditionError(AssertionError):
    pass


@dataclass
class WeightSequence:
    """w_1..w_{T+1} (``weights[i]`` is w_{i+1}) and the feasibility checks."""

    weights: np.ndarray
    scale_a: float
    recursion_ok: np.ndarray
    step_ok: np.ndarray
    sandwich_ok: np.ndarray
    monotone: bool

    @property
    def ok(self) -> bool:
        return bool(self.recursion_ok.all() and self.step_ok.all() and self.sandwich_ok.all() and self.monotone)

    @property
    def violations(self) -> list[str]:
        out = []
        for name, flags in (("recursion", self.recursion_ok), ("step-size", self.step_ok), ("sandwich", self.sandwich_ok)):
            bad = np.flatnonzero(~flags)
            if bad.size:
                out.append(f"{name} condition fails first at t={bad[0] + 1} ({bad.size} indices)")
        if not self.monotone:
            out.append("weights are not non-increasing")
        return out

    def require(self) -> WeightSequence:
        if not self.ok:
            raise WeightConditionError("; ".join(self.violations))
        return self


def build_weights(T: int, d: int, eta: float, sigma: float, sigma_psi: float, design_eta: float | None = None) -> WeightSequence:
    """Backward weight recursion and its feasibility conditions.

    The sequence is built from ``design_eta`` (default: ``eta``) and checked
    against the operating ``eta``. When both agree the recursion holds with
    equality and the step-size condition holds for every eta, so a mismatch
    between the two is the only way to fail.
    """
    if min(T, d, eta, sigma, sigma_psi) <= 0:
        raise ValueError("weight inputs must be positive")
    design = eta if design_eta is None else design_eta
    coef = 648 * d**3 * sigma**2 / sigma_psi
    a = coef * design**2 * (T + 1)
    w = np.empty(T + 1)
    w[T] = 1.0 / (2 * a)
    for t in range(T - 1, -1, -1):
        w[t] = w[t + 1] + coef * design**2 * w[t + 1] ** 2
    nxt, cur = w[1:], w[:-1]
    recursion_ok = nxt + coef * eta**2 * nxt**2 <= cur * (1 + 1e-12)
    step_ok = nxt * eta**2 * d**2 <= sigma_psi / (432 * d * sigma**2)
    sandwich_ok = (w >= (1 - 1e-12) / (2 * a)) & (w <= (1 + 1e-12) / a)
    return WeightSequence(w, a, recursion_ok, step_ok, sandwich_ok, bool(np.all(np.diff(w) <= 0)))


@dataclass
class GapBound:
    rhs: float
    avg_gap_bound: float
    bregman_bound: float
    rate_bound: float
    scale_a: float
    scale_b: float


def constant_b(d: int, kappa: float) -> float:
    return 2 * d * kappa**2 + 324 * d**3 * (8 + kappa**2)


def rate_constant(kappa: float, delta: float) -> float:
    """Absolute constant K with avg_gap_bound <= K * sqrt(s d^3 (1+ln 1/delta) D1 / T) at the default eta."""
    log_term = math.log(1 / delta)
    return 2 + 2 * (2 * kappa**2 + 324 * (8 + kappa**2)) / (1 + log_term) + 2592 * log_term / (1 + log_term)


def theoretical_gap_bound(d1: float, sigma: float, sigma_psi: float, kappa: float, d: int, T: int, eta: float, delta: float) -> GapBound:
    """Explicit-constant high-probability bound.

    With probability >= 1 - delta,
    eta * sum_t (Phi(mu^t) - Phi*) + D(mu*, mu^{T+1})
        <= 2 D1 + 2 (sigma^2/sigma_psi) B eta^2 T + 2 A ln(1/delta),
    A = 648 d^3 sigma^2 eta^2 (T+1) / sigma_psi, B = 2 d kappa^2 + 324 d^3 (8 + kappa^2).
    ``rate_bound`` is K * d^{3/2} sqrt((sigma^2/sigma_psi) D1 (1 + ln(1/delta)) / T),
    which dominates ``avg_gap_bound`` when eta follows the default rule.
    """
    if min(sigma, sigma_psi, kappa, d, T, eta) <= 0 or d1 < 0:
        raise ValueError("bound inputs must be positive")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    s = sigma**2 / sigma_psi
    a = 648 * d**3 * s * eta**2 * (T + 1)
    b = constant_b(d, kappa)
    log_term = math.log(1 / delta)
    rhs = 2 * d1 + 2 * s * b * eta**2 * T + 2 * a * log_term
    rate = rate_constant(kappa, delta) * math.sqrt(s * d**3 * (1 + log_term) * d1 / T)
    return GapBound(rhs, rhs / (eta * T), rhs, rate, a, b)


@dataclass
class ResilienceEstimate:
    epsilon: float
    delta: float
    trials: int
    successes: int
    probability: float
    interval: tuple[float, float]
    passed: bool
    theoretical_epsilon: float | None = None
    gaps: list[float] = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["interval"] = list(self.interval)
        out["epsilon"] = _json_float(self.epsilon)
        return out


def _json_float(x: float):
    return x if math.isfinite(x) else ("inf" if x > 0 else "-inf")


def clopper_pearson(successes: int, trials: int, level: float = 0.95) -> tuple[float, float]:
    alpha = 1 - level
    lo = 0.0 if successes == 0 else float(stats.beta.ppf(alpha / 2, successes, trials - successes + 1))
    hi = 1.0 if successes == trials else float(stats.beta.ppf(1 - alpha / 2, successes + 1, trials - successes))
    return lo, hi


def wanes_from_gaps(gaps: Sequence[float], epsilon: float, delta: float, theoretical_epsilon: float | None = None) -> ResilienceEstimate:
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    gaps = np.asarray(gaps, dtype=float)
    n = len(gaps)
    k = int(np.sum(gaps < epsilon))
    lo, hi = clopper_pearson(k, n)
    return ResilienceEstimate(epsilon, delta, n, k, k / n, (lo, hi), lo >= 1 - delta, theoretical_epsilon, gaps.tolist())


def estimate_wanes(run_trial: Callable[[int], Trajectory], epsilon: float, delta: float, trials: int, theoretical_epsilon: float | None = None) -> ResilienceEstimate:
    """Monte-Carlo probability that the time-averaged flow lands in the epsilon target set.

    ``run_trial(i)`` must return the trajectory of independent seeded trial i.
    """
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    if trials < 100:
        raise ValueError("estimate_wanes needs at least 100 trials")
    gaps = [mean_flow_gap(run_trial(i)) for i in range(trials)]
    return wanes_from_gaps(gaps, epsilon, delta, theoretical_epsilon)


def mean_flow_gap(traj: Trajectory) -> float:
    """Phi(mu_bar^T) - Phi* for the time-averaged flow."""
    return traj.mean_flow_gap


@dataclass
class RateFit:
    slope: float
    stderr: float
    horizons: list[int]
    medians: list[float]


def fit_loglog(horizons: Sequence[int], values: Sequence[float]) -> RateFit:
    values = np.asarray(values, dtype=float)
    if np.any(values <= 0):
        raise ValueError("degenerate (zero) gaps; add noise or shorten the horizon")
    res = stats.linregress(np.log(np.asarray(horizons, dtype=float)), np.log(values))
    return RateFit(float(res.slope), float(res.stderr), list(map(int, horizons)), values.tolist())


def fit_rate(gap_samples: Callable[[int], Sequence[float]], horizons: Sequence[int]) -> RateFit:
    """Slope of log(median gap) against log T.

    ``gap_samples(T)`` returns the per-seed gaps at horizon T.
    """
    if len(horizons) < 4:
        raise ValueError("grid length >= 4 required")
    if min(horizons) < 128:
        raise ValueError("every horizon must be >= 128")
    medians = [float(np.median(gap_samples(T))) for T in horizons]
    return fit_loglog(horizons, medians)


@dataclass
class MaxMgfReport:
    d: int
    lambdas: list[float]
    estimates: list[float]
    bounds: list[float]
    passed: bool


def admissible_lambda(d: int, sigma: float) -> float:
    return 1.0 / (math.sqrt(108 * d) * sigma)


def check_max_mgf(oracle: LatencyOracle, d: int, lambdas: Sequence[float], trials: int, rng: np.random.Generator) -> MaxMgfReport:
    """E[exp(lambda^2 Z^2)] for Z the max noise norm over 2d i.i.d. draws."""
    if trials < 10_000:
        raise ValueError("check_max_mgf needs at least 1e4 trials")
    sigma = oracle.sigma
    limit = admissible_lambda(d, sigma)
    lambdas = [float(x) for x in lambdas]
    for lam in lambdas:
        if abs(lam) > limit * (1 + 1e-12):
            raise ValueError(f"lambda {lam} outside the admissible range |lambda| <= {limit:.6g}")
    z = oracle.path_noise(rng, trials * 2 * d).reshape(trials, 2 * d, -1)
    zmax_sq = (np.linalg.norm(z, axis=2) ** 2).max(axis=1)
    estimates = [float(np.mean(np.exp(lam**2 * zmax_sq))) for lam in lambdas]
    bounds = [math.exp(216 * d * lam**2 * sigma**2) for lam in lambdas]
    passed = all(e <= b * (1 + MGF_SLACK) for e, b in zip(estimates, bounds))
    return MaxMgfReport(d, lambdas, estimates, bounds, passed)
