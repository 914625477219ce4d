"""Stochastic latency oracles and the mean Beckmann potential.

Edge latencies are polynomial, ``a + b * q**p``, with additive mean-zero edge
noise lifted to paths through the incidence matrix.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np
from scipy import optimize, special

from .network import Network, build_incidence, edge_flow

NOISE_MODELS = ("bounded-uniform", "truncated-gaussian")
BIAS_RTOL = 1e-6


class NoiseConfigError(ValueError):
    pass


@dataclass(frozen=True)
class EdgeLatencySpec:
    free_flow: np.ndarray
    slope: np.ndarray
    power: np.ndarray

    def __post_init__(self):
        for name in ("free_flow", "slope", "power"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        if not (self.free_flow.shape == self.slope.shape == self.power.shape):
            raise ValueError("latency coefficient arrays must have equal length")
        if np.any(self.free_flow < 0):
            raise ValueError("free-flow times must be >= 0")
        if np.any(self.slope <= 0):
            raise ValueError("slopes must be > 0 (latencies strictly increasing)")
        if np.any(self.power < 1):
            raise ValueError("exponents must be >= 1")

    def edge_latency(self, q: np.ndarray) -> np.ndarray:
        return self.free_flow + self.slope * np.power(q, self.power)

    def edge_integral(self, q: np.ndarray) -> np.ndarray:
        return self.free_flow * q + self.slope * np.power(q, self.power + 1) / (self.power + 1)

    def edge_derivative(self, q: np.ndarray) -> np.ndarray:
        return self.slope * self.power * np.power(q, self.power - 1)


@dataclass(frozen=True)
class NoiseSpec:
    """Additive edge noise.

    ``scale`` is the half-width (bounded-uniform) or standard deviation before
    truncation (truncated-gaussian), per edge. ``sigma`` is the declared
    subgaussian parameter of the path-noise norm and ``bound`` the declared
    bound L on the mean path-latency norm; both are filled in by
    :func:`resolve_noise` when left as None.
    """

    model: str
    scale: np.ndarray
    sigma: float | None = None
    bound: float | None = None

    def __post_init__(self):
        if self.model not in NOISE_MODELS:
            raise NoiseConfigError(f"unknown noise model {self.model!r}")
        object.__setattr__(self, "scale", np.asarray(self.scale, dtype=float))
        if np.any(self.scale < 0) or not np.all(np.isfinite(self.scale)):
            raise NoiseConfigError("noise scales must be finite and >= 0")

    @property
    def kappa(self) -> float:
        return self.bound / self.sigma

    @property
    def silent(self) -> bool:
        return not np.any(self.scale > 0)


@dataclass
class LatencySample:
    ell: np.ndarray
    round: int
    z: np.ndarray


def mean_path_latency(spec: EdgeLatencySpec, lam: np.ndarray, mu) -> np.ndarray:
    """Expected path latencies, which equal the gradient of the Beckmann potential."""
    return spec.edge_latency(edge_flow(lam, mu)) @ lam


def beckmann_potential(spec: EdgeLatencySpec, lam: np.ndarray, mu) -> np.ndarray | float:
    return spec.edge_integral(edge_flow(lam, mu)).sum(axis=-1)


def mean_latency_bound(spec: EdgeLatencySpec, network: Network, lam: np.ndarray | None = None) -> float:
    """Exact max of ||E ell(mu)|| over the feasible set.

    Each path latency is convex and nonnegative in mu, so the norm is convex
    and its maximum sits on an all-or-nothing vertex.
    """
    lam = build_incidence(network) if lam is None else lam
    n_vertices = math.prod(len(ps) for ps in network.paths)
    if n_vertices <= 200_000:
        values = mean_path_latency(spec, lam, network.vertices())
        return float(np.linalg.norm(values, axis=1).max())
    # too many vertices: every edge loaded with all demand that could use it
    usable = np.zeros(network.n_edges)
    for w, sl in enumerate(network.od_slices):
        usable += network.demands[w] * (lam[:, sl].sum(axis=1) > 0)
    return float(np.linalg.norm(spec.edge_latency(usable) @ lam))


def noise_bias(noise: NoiseSpec, spec: EdgeLatencySpec, lam: np.ndarray) -> np.ndarray:
    """Path-level mean shift caused by clipping edge noise at -a_e/2."""
    if noise.model != "bounded-uniform":
        return np.zeros(lam.shape[1])
    c, h = noise.scale, spec.free_flow / 2
    with np.errstate(divide="ignore", invalid="ignore"):
        edge_bias = np.where(c > h, (c - h) ** 2 / (4 * np.where(c > 0, c, 1)), 0.0)
    return edge_bias @ lam


def default_sigma(noise: NoiseSpec, lam: np.ndarray) -> float:
    lifted = noise.scale @ lam
    if noise.model == "bounded-uniform":
        # lam >= 0, so the support radius of ||lam^T eps|| is attained at eps = +scale
        return float(np.linalg.norm(lifted))
    return float(2.0 * lifted.max() * math.sqrt(lam.shape[1]))


def resolve_noise(noise: NoiseSpec, spec: EdgeLatencySpec, network: Network, lam: np.ndarray | None = None) -> NoiseSpec:
    """Validate the noise against the latency spec and fill in sigma and L."""
    lam = build_incidence(network) if lam is None else lam
    if noise.scale.shape != (network.n_edges,):
        raise NoiseConfigError(f"noise scale needs {network.n_edges} entries, got {noise.scale.shape}")
    bound = noise.bound if noise.bound is not None else mean_latency_bound(spec, network, lam)
    if noise.model == "truncated-gaussian":
        bad = np.flatnonzero((noise.scale > 0) & (spec.free_flow <= 0))
        if bad.size:
            raise NoiseConfigError(
                f"edge {network.edges[bad[0]]} has zero free-flow time; its noise cannot be truncated to keep latencies positive"
            )
    bias = np.linalg.norm(noise_bias(noise, spec, lam))
    if bias > BIAS_RTOL * bound:
        raise NoiseConfigError(
            f"noise scale exceeds half the free-flow time; positivity clipping biases the mean by {bias:.3g} > {BIAS_RTOL}*L"
        )
    sigma = noise.sigma
    if sigma is None:
        sigma = bound if noise.silent else default_sigma(noise, lam)
    if not sigma > 0:
        raise NoiseConfigError("sigma must be positive")
    return replace(noise, sigma=float(sigma), bound=float(bound))


def sample_edge_noise(noise: NoiseSpec, spec: EdgeLatencySpec, rng: np.random.Generator, size: int | None = None) -> np.ndarray:
    shape = noise.scale.shape if size is None else (size,) + noise.scale.shape
    half = spec.free_flow / 2
    if noise.model == "bounded-uniform":
        eps = rng.uniform(-1.0, 1.0, size=shape) * noise.scale
        return np.maximum(eps, -half)
    # symmetric truncation at +-a_e/2 keeps the mean exactly zero
    with np.errstate(divide="ignore", invalid="ignore"):
        k = np.where(noise.scale > 0, half / np.where(noise.scale > 0, noise.scale, 1), 0.0)
    lo = special.ndtr(-k)
    u = lo + rng.uniform(0.0, 1.0, size=shape) * (1 - 2 * lo)
    eps = noise.scale * special.ndtri(u)
    return np.clip(np.nan_to_num(eps), -half, half)


def sample_latency(spec: EdgeLatencySpec, noise: NoiseSpec, lam: np.ndarray, mu, rng: np.random.Generator, round: int = 0) -> LatencySample:
    mean = mean_path_latency(spec, lam, mu)
    z = sample_edge_noise(noise, spec, rng) @ lam
    return LatencySample(ell=mean + z, round=round, z=z)


class LatencyOracle:
    """Latency spec, resolved noise and incidence bundled for one network."""

    def __init__(self, network: Network, spec: EdgeLatencySpec, noise: NoiseSpec):
        if spec.free_flow.shape != (network.n_edges,):
            raise ValueError(f"latency spec needs {network.n_edges} edges, got {spec.free_flow.shape[0]}")
        self.network = network
        self.lam = build_incidence(network)
        self.spec = spec
        self.noise = resolve_noise(noise, spec, network, self.lam)

    @property
    def sigma(self) -> float:
        return self.noise.sigma

    @property
    def bound(self) -> float:
        return self.noise.bound

    @property
    def kappa(self) -> float:
        return self.noise.kappa

    def mean(self, mu) -> np.ndarray:
        return mean_path_latency(self.spec, self.lam, mu)

    def potential(self, mu):
        return beckmann_potential(self.spec, self.lam, mu)

    def sample(self, mu, rng: np.random.Generator, round: int = 0) -> LatencySample:
        return sample_latency(self.spec, self.noise, self.lam, mu, rng, round)

    def path_noise(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return sample_edge_noise(self.noise, self.spec, rng, size) @ self.lam


@dataclass
class Assumption2Report:
    sigma_hat: float
    mgf_estimate: float
    bound_hat: float
    sigma: float
    bound: float
    passed: bool

    def to_dict(self) -> dict:
        return {k: (bool(v) if isinstance(v, (bool, np.bool_)) else float(v)) for k, v in self.__dict__.items()}


def empirical_sigma(norms: np.ndarray) -> float:
    """Smallest sigma with mean(exp(norm^2 / sigma^2)) <= e on the sample."""
    sq = np.asarray(norms, dtype=float) ** 2
    top = sq.max(initial=0.0)
    if top == 0:
        return 0.0

    def excess(s):
        return np.log(np.mean(np.exp((sq - top) / s**2))) + top / s**2 - 1.0

    lo, hi = 1e-12 * math.sqrt(top), math.sqrt(top)
    while excess(hi) > 0:
        hi *= 2
    while excess(lo) < 0:
        lo /= 2
    return float(optimize.brentq(excess, lo, hi, xtol=1e-14 * hi))


def check_assumption2(oracle: LatencyOracle, trials: int, rng: np.random.Generator, slack: float = 0.05) -> Assumption2Report:
    """Monte-Carlo check of the subgaussian norm condition and the mean bound."""
    if trials < 10_000:
        raise ValueError("check_assumption2 needs at least 1e4 trials")
    mus = np.stack([oracle.network.random_flow(rng) for _ in range(trials)])
    z = oracle.path_noise(rng, trials)
    norms = np.linalg.norm(z, axis=1)
    mgf = float(np.mean(np.exp(norms**2 / oracle.sigma**2)))
    bound_hat = float(np.linalg.norm(oracle.mean(mus), axis=1).max())
    passed = mgf <= math.e * (1 + slack) and bound_hat <= oracle.bound * (1 + 1e-12)
    return Assumption2Report(empirical_sigma(norms), mgf, bound_hat, oracle.sigma, oracle.bound, bool(passed))
