"""Delayed Mirror Descent over the product of OD simplices."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .attack import DeliveryCalendar
from .latency import LatencyOracle
from .network import Network, renormalize

LOG_FLOOR = 1e-300


class MirrorMap:
    """Strongly convex regularizer on the feasible flow set."""

    name = ""

    def __init__(self, network: Network):
        self.network = network

    @property
    def strong_convexity(self) -> float:
        raise NotImplementedError

    def value(self, mu: np.ndarray) -> float:
        raise NotImplementedError

    def grad(self, mu: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def step(self, mu: np.ndarray, nu: np.ndarray, direction: np.ndarray) -> np.ndarray:
        """Primal point after moving by ``direction`` (= -eta * bundle) from mu."""
        raise NotImplementedError


class EntropicMap(MirrorMap):
    """Psi(mu) = sum_w sum_{p in P_w} mu_p ln(mu_p / m_w)."""

    name = "entropic"

    @property
    def strong_convexity(self) -> float:
        return 1.0 / float(self.network.demands.max())

    def value(self, mu):
        mu = np.asarray(mu, dtype=float)
        m = self.network.path_demand
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(mu > 0, mu * np.log(mu / m), 0.0)
        return float(terms.sum())

    def grad(self, mu):
        return np.log(np.maximum(mu, LOG_FLOOR) / self.network.path_demand) + 1.0

    def step(self, mu, nu, direction):
        # the primal point is the per-OD softmax of the dual point
        out = np.empty_like(nu)
        for w, sl in enumerate(self.network.od_slices):
            out[sl] = self.network.demands[w] * np.exp(nu[sl] - logsumexp(nu[sl]))
        return out


class EuclideanMap(MirrorMap):
    """Psi(mu) = |mu|^2 / 2; the step is a Euclidean projection per OD."""

    name = "euclidean"

    @property
    def strong_convexity(self) -> float:
        return 1.0

    def value(self, mu):
        return 0.5 * float(np.dot(mu, mu))

    def grad(self, mu):
        return np.asarray(mu, dtype=float).copy()

    def step(self, mu, nu, direction):
        y = mu + direction
        out = np.empty_like(y)
        for w, sl in enumerate(self.network.od_slices):
            out[sl] = project_simplex(y[sl], self.network.demands[w])
        return out


MIRROR_MAPS = {"entropic": EntropicMap, "euclidean": EuclideanMap}


def make_mirror_map(name: str, network: Network) -> MirrorMap:
    try:
        return MIRROR_MAPS[name](network)
    except KeyError:
        raise ValueError(f"unknown mirror map {name!r}; choose from {', '.join(MIRROR_MAPS)}") from None


def project_simplex(v: np.ndarray, total: float = 1.0) -> np.ndarray:
    """Euclidean projection onto {x >= 0, sum x = total} by sorting."""
    v = np.asarray(v, dtype=float)
    u = np.sort(v, kind="stable")[::-1]
    css = np.cumsum(u) - total
    ind = np.arange(1, len(v) + 1)
    rho = np.flatnonzero(u - css / ind > 0)[-1]
    theta = css[rho] / (rho + 1)
    return np.maximum(v - theta, 0.0)


def bregman(mirror: MirrorMap, base, point) -> float:
    """Psi(point) - Psi(base) - <grad Psi(base), point - base>.

    With ``base`` the iterate and ``point`` the equilibrium this is the
    divergence to the comparator used throughout the analysis.
    """
    base = np.asarray(base, dtype=float)
    point = np.asarray(point, dtype=float)
    if isinstance(mirror, EntropicMap):
        if np.any((base <= 0) & (point > 0)):
            raise ValueError("entropic Bregman divergence needs a strictly positive base point")
        with np.errstate(divide="ignore", invalid="ignore"):
            kl = np.where(point > 0, point * np.log(point / np.where(base > 0, base, 1.0)), 0.0)
        return float(max(kl.sum() - point.sum() + base.sum(), 0.0))
    diff = point - base
    return 0.5 * float(np.dot(diff, diff))


@dataclass
class MirrorState:
    t: int
    mu: np.ndarray
    nu: np.ndarray
    eta: float


@dataclass
class BundleSum:
    total: np.ndarray
    size: int


def bundle_sum(samples: list[np.ndarray], n_paths: int) -> BundleSum:
    total = np.zeros(n_paths)
    for ell in samples:
        total = total + ell
    return BundleSum(total, len(samples))


def mirror_step(mirror: MirrorMap, state: MirrorState, bundle: BundleSum) -> MirrorState:
    """argmin_mu <mu, eta * bundle> + D(mu, mu^t) over the feasible set."""
    if not np.all(np.isfinite(bundle.total)):
        raise ValueError("non-finite latency bundle")
    if bundle.size == 0 or not np.any(bundle.total):
        return MirrorState(state.t + 1, state.mu.copy(), state.nu.copy(), state.eta)
    direction = -state.eta * bundle.total
    nu = state.nu + direction
    mu = renormalize(mirror.network, mirror.step(state.mu, nu, direction))
    return MirrorState(state.t + 1, mu, nu, state.eta)


def default_learning_rate(d1: float, sigma: float, sigma_psi: float, d: int, T: int, delta: float) -> float:
    """sqrt(D1 / ((sigma^2 / sigma_psi) d^3 (1 + ln(1/delta)) T))."""
    if min(d1, sigma, sigma_psi, d, T) <= 0:
        raise ValueError("learning-rate inputs must be positive")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    return math.sqrt(d1 / ((sigma**2 / sigma_psi) * d**3 * (1 + math.log(1 / delta)) * T))


def max_entropy_radius(network: Network) -> float:
    """sum_w m_w ln|P_w|: the entropic divergence bound from the uniform start."""
    return float(sum(m * math.log(len(ps)) for ps, m in zip(network.paths, network.demands)))


@dataclass
class Trajectory:
    """Per-round record of one DMD run.

    Row i of ``mu``, ``gap`` and ``bregman_to_star`` is round i+1 and has
    T+1 rows; ``ell``, ``z``, ``ell_bar`` and ``bundle_size`` have T rows.
    """

    mu: np.ndarray
    nu: np.ndarray
    ell: np.ndarray
    z: np.ndarray
    ell_bar: np.ndarray
    bundle_size: np.ndarray
    potential: np.ndarray
    gap: np.ndarray
    bregman_to_star: np.ndarray
    mean_flow_gap: float
    eta: float
    calendar: DeliveryCalendar
    mirror: str
    meta: dict = field(default_factory=dict)

    @property
    def horizon(self) -> int:
        return len(self.ell)

    @property
    def mean_flow(self) -> np.ndarray:
        return self.mu[:-1].mean(axis=0)

    @property
    def average_gap(self) -> float:
        return float(self.gap[:-1].mean())

    def write_csv(self, path, path_ids) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(
                ["t"] + [f"mu_{p}" for p in path_ids] + [f"ell_{p}" for p in path_ids] + ["bundle_size", "gap", "bregman_to_star"]
            )
            T = self.horizon
            for i in range(T + 1):
                lat = [_fmt(x) for x in self.ell[i]] if i < T else [""] * len(path_ids)
                size = int(self.bundle_size[i]) if i < T else 0
                writer.writerow([i + 1] + [_fmt(x) for x in self.mu[i]] + lat + [size, _fmt(self.gap[i]), _fmt(self.bregman_to_star[i])])

    def write_samples_csv(self, path, path_ids) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["t", "path_id", "ell", "z"])
            for i in range(self.horizon):
                for k, p in enumerate(path_ids):
                    writer.writerow([i + 1, p, _fmt(self.ell[i, k]), _fmt(self.z[i, k])])


def _fmt(x) -> str:
    return format(float(x), ".17g")


def run_dmd(
    oracle: LatencyOracle,
    calendar: DeliveryCalendar,
    mirror: MirrorMap,
    eta: float,
    rng: np.random.Generator,
    mu_star: np.ndarray,
    phi_star: float,
    mu1: np.ndarray | None = None,
) -> Trajectory:
    """Run Delayed Mirror Descent for the calendar's horizon.

    The learner only ever sees the summed bundle of delivered latencies;
    noise and equilibrium quantities are recorded for the offline verifier.
    """
    return run_dmd_batch(oracle, [calendar], mirror, eta, [rng], mu_star, phi_star, mu1)[0]


def run_dmd_batch(
    oracle: LatencyOracle,
    calendars: list[DeliveryCalendar],
    mirror: MirrorMap,
    eta: float,
    rngs: list[np.random.Generator],
    mu_star: np.ndarray,
    phi_star: float,
    mu1: np.ndarray | None = None,
) -> list[Trajectory]:
    """Independent trials advanced in lockstep, one calendar and rng per trial.

    Noise does not depend on the flow, so each trial draws its whole
    (T, |E|) edge-noise matrix from its own rng up front; a trial's output
    therefore does not depend on which batch it ran in.
    """
    net = oracle.network
    n, P = len(rngs), net.n_paths
    if len(calendars) == 1 and n > 1:
        calendars = calendars * n
    T = calendars[0].horizon
    if any(c.horizon != T for c in calendars) or len(calendars) != n:
        raise ValueError("need one calendar per trial, all with the same horizon")
    entropic = isinstance(mirror, EntropicMap)
    slices = net.od_slices
    demands = net.demands

    start = net.uniform_flow() if mu1 is None else np.asarray(mu1, dtype=float)
    mu = np.tile(start, (n, 1))
    nu = np.tile(mirror.grad(start), (n, 1))
    z = np.stack([oracle.path_noise(r, T) for r in rngs])
    arrival = np.stack([c.schedule.arrival for c in calendars]) - 1
    rows = np.arange(n)

    mus = np.empty((n, T + 1, P))
    nus = np.empty((n, T + 1, P))
    ell = np.empty((n, T, P))
    pending = np.zeros((n, T, P))
    sizes = np.zeros((n, T), dtype=int)
    for t in range(T):
        mus[:, t], nus[:, t] = mu, nu
        ell[:, t] = oracle.mean(mu) + z[:, t]
        pending[rows, arrival[:, t]] += ell[:, t]
        sizes[rows, arrival[:, t]] += 1
        bar = pending[:, t]
        active = sizes[:, t] > 0
        if not active.any():
            continue
        step = -eta * bar[active]
        nu_new = nu[active] + step
        if entropic:
            new = np.empty_like(nu_new)
            for w, sl in enumerate(slices):
                new[:, sl] = demands[w] * np.exp(nu_new[:, sl] - logsumexp(nu_new[:, sl], axis=1, keepdims=True))
        else:
            y = mu[active] + step
            new = np.empty_like(y)
            for w, sl in enumerate(slices):
                new[:, sl] = project_simplex_rows(y[:, sl], demands[w])
        mu[active] = renormalize(net, new)
        nu[active] = nu_new
    mus[:, T], nus[:, T] = mu, nu

    potential = oracle.potential(mus)
    mean_gap = oracle.potential(mus[:, :-1].mean(axis=1)) - phi_star
    out = []
    for i in range(n):
        breg = bregman_rows(mirror, mus[i], mu_star)
        out.append(
            Trajectory(
                mu=mus[i],
                nu=nus[i],
                ell=ell[i],
                z=z[i],
                ell_bar=pending[i],
                bundle_size=sizes[i],
                potential=potential[i],
                gap=potential[i] - phi_star,
                bregman_to_star=breg,
                mean_flow_gap=float(mean_gap[i]),
                eta=eta,
                calendar=calendars[i],
                mirror=mirror.name,
            )
        )
    return out


def project_simplex_rows(v: np.ndarray, total: float = 1.0) -> np.ndarray:
    return np.stack([project_simplex(row, total) for row in v])


def bregman_rows(mirror: MirrorMap, bases: np.ndarray, point) -> np.ndarray:
    """Divergence from each row of ``bases`` to ``point``."""
    point = np.asarray(point, dtype=float)
    if isinstance(mirror, EntropicMap):
        if np.any((bases <= 0) & (point > 0)):
            raise ValueError("entropic Bregman divergence needs a strictly positive base point")
        with np.errstate(divide="ignore", invalid="ignore"):
            kl = np.where(point > 0, point * np.log(point / np.where(bases > 0, bases, 1.0)), 0.0)
        return np.maximum(kl.sum(axis=1) - point.sum() + bases.sum(axis=1), 0.0)
    diff = point - bases
    return 0.5 * np.einsum("ij,ij->i", diff, diff)
