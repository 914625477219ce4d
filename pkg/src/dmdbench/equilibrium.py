"""Mean Wardrop equilibria by minimizing the deterministic Beckmann potential."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .latency import LatencyOracle


@dataclass
class EquilibriumSolution:
    flow: np.ndarray
    potential: float
    duality_gap: float
    iterations: int
    converged: bool = True
    method: str = "frank-wolfe"

    def to_dict(self) -> dict:
        return {
            "mu_star": [float(x) for x in self.flow],
            "phi_star": float(self.potential),
            "duality_gap": float(self.duality_gap),
            "iterations": int(self.iterations),
            "converged": bool(self.converged),
            "method": self.method,
        }


def all_or_nothing(oracle: LatencyOracle, latencies: np.ndarray) -> np.ndarray:
    """Linear minimization oracle: each OD's demand on its cheapest path."""
    net = oracle.network
    s = np.zeros(net.n_paths)
    for w, sl in enumerate(net.od_slices):
        s[sl.start + int(np.argmin(latencies[sl]))] = net.demands[w]
    return s


def fw_gap(oracle: LatencyOracle, mu: np.ndarray) -> float:
    grad = oracle.mean(mu)
    return float(grad @ (mu - all_or_nothing(oracle, grad)))


def line_search(oracle: LatencyOracle, mu: np.ndarray, direction: np.ndarray, gamma_max: float = 1.0) -> float:
    """Exact minimizer of Phi(mu + g * direction) over [0, gamma_max].

    Bisection on the directional derivative, which is nondecreasing in g.
    """

    def slope(g):
        return float(oracle.mean(mu + g * direction) @ direction)

    if slope(0.0) >= 0:
        return 0.0
    if slope(gamma_max) <= 0:
        return gamma_max
    lo, hi = 0.0, gamma_max
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if slope(mid) > 0:
            hi = mid
        else:
            lo = mid
        if hi - lo <= 1e-16 * gamma_max:
            break
    return 0.5 * (lo + hi)


def solve_mwe_frank_wolfe(oracle: LatencyOracle, tol: float = 1e-8, max_iters: int = 100_000, variant: str = "pairwise") -> EquilibriumSolution:
    """Frank-Wolfe on the Beckmann potential with exact line search.

    ``variant="pairwise"`` shifts flow inside each OD from the costliest used
    path to the all-or-nothing target, which converges linearly on the
    product of simplices; ``"vanilla"`` is the textbook convex-combination
    step. Both stop once the FW duality gap <grad, mu - s> <= tol.
    """
    if tol <= 0:
        raise ValueError("tol must be positive")
    net = oracle.network
    mu = net.uniform_flow()
    best = (math.inf, mu.copy(), math.inf)
    for it in range(1, max_iters + 1):
        grad = oracle.mean(mu)
        s = all_or_nothing(oracle, grad)
        gap = float(grad @ (mu - s))
        phi = float(oracle.potential(mu))
        if gap < best[2]:
            best = (phi, mu.copy(), gap)
        if gap <= tol:
            return EquilibriumSolution(mu, phi, gap, it - 1, True)
        if variant == "vanilla":
            d = s - mu
            mu = mu + line_search(oracle, mu, d) * d
        else:
            before = mu.copy()
            for sl in net.od_slices:
                g = oracle.mean(mu)[sl]
                used = np.flatnonzero(mu[sl] > 0)
                away = used[np.argmax(g[used])]
                target = int(np.argmin(g))
                if away == target:
                    continue
                d = np.zeros_like(mu)
                d[sl.start + target], d[sl.start + away] = 1.0, -1.0
                cap = mu[sl.start + away]
                step = line_search(oracle, mu, d, cap)
                mu = mu + step * d
                if step == cap:
                    mu[sl.start + away] = 0.0
            mu = np.maximum(mu, 0.0)
            if np.array_equal(before, mu):
                break
    phi, mu, gap = best
    return EquilibriumSolution(mu, phi, gap, it, gap <= tol)


def solve_mwe_grid(oracle: LatencyOracle, resolution: float = 1e-3, max_paths: int = 4, chunk: int = 1_000_000) -> EquilibriumSolution:
    """Brute-force minimizer of Phi over a lattice of the feasible set."""
    net = oracle.network
    if net.n_paths > max_paths:
        raise ValueError(f"grid search supports at most {max_paths} paths, network has {net.n_paths}")
    n = int(round(1.0 / resolution))
    count = math.prod(math.comb(n + len(ps) - 1, len(ps) - 1) for ps in net.paths)
    if count > 50_000_000:
        raise ValueError(f"grid of {count} points is too large; use a coarser resolution")
    per_od = [_compositions(len(ps), n) * (m / n) for ps, m in zip(net.paths, net.demands)]
    sizes = [len(g) for g in per_od]
    total = math.prod(sizes)
    best_phi, best_mu = math.inf, None
    for start in range(0, total, chunk):
        idx = np.unravel_index(np.arange(start, min(total, start + chunk)), sizes)
        mus = np.concatenate([g[i] for g, i in zip(per_od, idx)], axis=1)
        phis = oracle.potential(mus)
        k = int(np.argmin(phis))
        if phis[k] < best_phi:
            best_phi, best_mu = float(phis[k]), mus[k].copy()
    return EquilibriumSolution(best_mu, best_phi, fw_gap(oracle, best_mu), total, True, "grid")


def _compositions(k: int, n: int) -> np.ndarray:
    """All nonnegative integer vectors of length k summing to n."""
    if k == 1:
        return np.array([[n]], dtype=float)
    rows = []
    for first in range(n + 1):
        rest = _compositions(k - 1, n - first)
        rows.append(np.column_stack([np.full(len(rest), first), rest]))
    return np.vstack(rows)


def wardrop_residual(oracle: LatencyOracle, mu, tol: float = 1e-9) -> float:
    """Largest excess latency of a used path over the cheapest path in its OD."""
    mu = np.asarray(mu, dtype=float)
    lat = oracle.mean(mu)
    worst = 0.0
    for w, sl in enumerate(oracle.network.od_slices):
        used = mu[sl] > tol * oracle.network.demands[w]
        if used.any():
            worst = max(worst, float(lat[sl][used].max() - lat[sl].min()))
    return worst
