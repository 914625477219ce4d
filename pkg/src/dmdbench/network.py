"""Congestion-game topology: OD pairs, explicit path sets and the edge-path incidence."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

FEASIBILITY_RTOL = 1e-9

Edge = tuple[str, str]


class NetworkError(ValueError):
    """Raised when a network description is malformed."""


@dataclass(frozen=True)
class Network:
    """Directed graph with explicit per-OD path sets.

    ``paths[w]`` lists the paths of OD pair ``od_pairs[w]``; each path is a
    sequence of edges. Global path order is the concatenation of the per-OD
    lists, which is also the column order of the incidence matrix.
    """

    nodes: tuple[str, ...]
    edges: tuple[Edge, ...]
    od_pairs: tuple[tuple[str, str], ...]
    paths: tuple[tuple[tuple[Edge, ...], ...], ...]
    demands: np.ndarray
    path_ids: tuple[str, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "demands", np.asarray(self.demands, dtype=float))
        if not self.path_ids:
            ids = tuple(f"p{k + 1}" for k in range(sum(len(ps) for ps in self.paths)))
            object.__setattr__(self, "path_ids", ids)
        self._validate()

    @classmethod
    def from_lists(cls, nodes, edges, od_pairs, paths, demands, path_ids=None) -> Network:
        edges = tuple(tuple(e) for e in edges)
        paths = tuple(tuple(tuple(tuple(e) for e in p) for p in ps) for ps in paths)
        return cls(
            nodes=tuple(nodes),
            edges=edges,
            od_pairs=tuple(tuple(w) for w in od_pairs),
            paths=paths,
            demands=np.asarray(demands, dtype=float),
            path_ids=tuple(path_ids) if path_ids else (),
        )

    def _validate(self):
        node_set = set(self.nodes)
        if len(node_set) != len(self.nodes):
            raise NetworkError("duplicate node identifiers")
        if len(set(self.edges)) != len(self.edges):
            raise NetworkError("duplicate edges (parallel edges are not representable)")
        for u, v in self.edges:
            if u == v:
                raise NetworkError(f"self-loop edge ({u}, {v})")
            if u not in node_set or v not in node_set:
                raise NetworkError(f"edge ({u}, {v}) references an unknown node")
        if len(self.paths) != len(self.od_pairs):
            raise NetworkError("need one path list per OD pair")
        if self.demands.shape != (len(self.od_pairs),):
            raise NetworkError("need one demand per OD pair")
        if not np.all(np.isfinite(self.demands)) or np.any(self.demands <= 0):
            raise NetworkError("demands must be strictly positive")
        edge_set = set(self.edges)
        k = 0
        for (origin, dest), ps in zip(self.od_pairs, self.paths):
            if not ps:
                raise NetworkError(f"OD pair ({origin}, {dest}) has no path")
            if len(set(ps)) != len(ps):
                raise NetworkError(f"OD pair ({origin}, {dest}) has duplicate paths")
            for p in ps:
                _check_walk(self.path_ids[k], p, origin, dest, edge_set)
                k += 1
        if len(self.path_ids) != k or len(set(self.path_ids)) != k:
            raise NetworkError("path_ids must be unique, one per path")

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    @property
    def n_paths(self) -> int:
        return len(self.path_ids)

    @property
    def all_paths(self) -> list[tuple[Edge, ...]]:
        return [p for ps in self.paths for p in ps]

    @property
    def od_slices(self) -> list[slice]:
        """Column range of each OD pair in the global path order."""
        out, start = [], 0
        for ps in self.paths:
            out.append(slice(start, start + len(ps)))
            start += len(ps)
        return out

    @property
    def od_index(self) -> np.ndarray:
        """OD index of every path."""
        return np.concatenate([np.full(len(ps), w) for w, ps in enumerate(self.paths)])

    @property
    def path_demand(self) -> np.ndarray:
        """Demand m_w of the OD pair that owns each path."""
        return self.demands[self.od_index]

    def uniform_flow(self) -> np.ndarray:
        return np.concatenate([np.full(len(ps), m / len(ps)) for ps, m in zip(self.paths, self.demands)])

    def random_flow(self, rng: np.random.Generator, alpha: float = 1.0) -> np.ndarray:
        """Feasible flow drawn per OD pair from a scaled Dirichlet."""
        parts = [m * rng.dirichlet(np.full(len(ps), alpha)) for ps, m in zip(self.paths, self.demands)]
        return np.concatenate(parts)

    def vertices(self) -> np.ndarray:
        """All-or-nothing flows, i.e. the vertices of the feasible polytope."""
        sizes = [len(ps) for ps in self.paths]
        grids = np.meshgrid(*[np.arange(s) for s in sizes], indexing="ij")
        picks = np.stack([g.ravel() for g in grids], axis=1)
        out = np.zeros((len(picks), self.n_paths))
        for w, sl in enumerate(self.od_slices):
            out[np.arange(len(picks)), sl.start + picks[:, w]] = self.demands[w]
        return out

    def to_dict(self) -> dict:
        return {
            "nodes": list(self.nodes),
            "edges": [list(e) for e in self.edges],
            "od_pairs": [
                {
                    "origin": o,
                    "destination": d,
                    "demand": float(m),
                    "paths": [[list(e) for e in p] for p in ps],
                }
                for (o, d), ps, m in zip(self.od_pairs, self.paths, self.demands)
            ],
            "path_ids": list(self.path_ids),
        }

    @classmethod
    def from_dict(cls, data: dict) -> Network:
        ods = data["od_pairs"]
        return cls.from_lists(
            nodes=data["nodes"],
            edges=data["edges"],
            od_pairs=[(w["origin"], w["destination"]) for w in ods],
            paths=[w["paths"] for w in ods],
            demands=[w["demand"] for w in ods],
            path_ids=data.get("path_ids"),
        )


def _check_walk(pid: str, path: Sequence[Edge], origin: str, dest: str, edge_set: set) -> None:
    if not path:
        raise NetworkError(f"path {pid} is empty")
    for e in path:
        if e not in edge_set:
            raise NetworkError(f"path {pid} uses unknown edge {e}")
    if path[0][0] != origin or path[-1][1] != dest:
        raise NetworkError(f"path {pid} does not run from {origin} to {dest}")
    for a, b in zip(path, path[1:]):
        if a[1] != b[0]:
            raise NetworkError(f"path {pid} is not a connected walk at {a} -> {b}")


def build_incidence(network: Network) -> np.ndarray:
    """Dense 0/1 matrix with ``lam[e, p] = 1`` iff edge e lies on path p."""
    index = {e: i for i, e in enumerate(network.edges)}
    lam = np.zeros((network.n_edges, network.n_paths))
    for p, path in enumerate(network.all_paths):
        for e in path:
            lam[index[e], p] = 1.0
    return lam


def edge_flow(lam: np.ndarray, mu: np.ndarray) -> np.ndarray:
    mu = np.asarray(mu, dtype=float)
    if lam.shape[1] != mu.shape[-1]:
        raise ValueError(f"dimension mismatch: incidence has {lam.shape[1]} paths, flow has {mu.shape[-1]}")
    return mu @ lam.T


@dataclass
class FlowReport:
    violations: list[str]

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:
        return self.ok


def validate_flow(network: Network, mu, rtol: float = FEASIBILITY_RTOL) -> FlowReport:
    """Check nonnegativity and the per-OD demand constraints."""
    mu = np.asarray(mu, dtype=float)
    if mu.shape != (network.n_paths,):
        return FlowReport([f"shape {mu.shape} != ({network.n_paths},)"])
    problems = []
    for k in np.flatnonzero(~(mu >= 0)):
        problems.append(f"negative flow {mu[k]:.17g} at path {k + 1} ({network.path_ids[k]})")
    for w, sl in enumerate(network.od_slices):
        total, m = mu[sl].sum(), network.demands[w]
        if not abs(total - m) <= rtol * m:
            o, d = network.od_pairs[w]
            problems.append(f"OD ({o}, {d}) sum {total:.17g} != demand {m:.17g} (off by {total - m:.3g})")
    return FlowReport(problems)


def renormalize(network: Network, mu: np.ndarray, rtol: float = FEASIBILITY_RTOL) -> np.ndarray:
    """Rescale OD slices whose sum drifted beyond ``rtol``; clip tiny negatives.

    Works on a single flow or on a stack of flows (one per row).
    """
    mu = np.maximum(mu, 0.0)
    for w, sl in enumerate(network.od_slices):
        m = network.demands[w]
        total = mu[..., sl].sum(axis=-1, keepdims=True)
        drift = np.abs(total - m) > rtol * m
        if np.any(drift):
            mu[..., sl] = np.where(drift, mu[..., sl] * (m / total), mu[..., sl])
    return mu
