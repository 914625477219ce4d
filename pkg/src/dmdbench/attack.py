"""Delay schedules and delivery calendars for the feedback-delay adversary.

Rounds are numbered 1..T throughout this module.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from functools import cached_property
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

STRATEGIES = ("none", "constant", "uniform-random", "burst")


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class DelaySchedule:
    """Raw delays d_t >= 1 for rounds 1..T.

    ``effective[t-1] = min(d_t, T - t + 1)`` so every report lands by round T.
    ``budget`` is the sup-norm of the effective delay vector.
    """

    delays: tuple[int, ...]

    def __post_init__(self):
        d = tuple(int(x) for x in self.delays)
        if not d:
            raise ScheduleError("empty schedule")
        bad = [t + 1 for t, x in enumerate(d) if x <= 0]
        if bad:
            raise ScheduleError(f"delays must be >= 1; round {bad[0]} has {d[bad[0] - 1]}")
        object.__setattr__(self, "delays", d)

    @property
    def horizon(self) -> int:
        return len(self.delays)

    @cached_property
    def effective(self) -> np.ndarray:
        T = self.horizon
        return np.minimum(np.asarray(self.delays), T - np.arange(1, T + 1) + 1)

    @property
    def budget(self) -> int:
        return int(self.effective.max())

    @property
    def total(self) -> int:
        return int(self.effective.sum())

    @property
    def arrival(self) -> np.ndarray:
        """Round at which each round's report is delivered."""
        return np.arange(1, self.horizon + 1) + self.effective - 1

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["t", "d_t", "d_eff", "delivered_at"])
            for t, (raw, eff, arr) in enumerate(zip(self.delays, self.effective, self.arrival), start=1):
                writer.writerow([t, raw, int(eff), int(arr)])


@dataclass(frozen=True)
class DeliveryCalendar:
    schedule: DelaySchedule
    bundles: tuple[tuple[int, ...], ...]

    @property
    def horizon(self) -> int:
        return len(self.bundles)

    @property
    def budget(self) -> int:
        return self.schedule.budget

    def delivered(self, t: int) -> tuple[int, ...]:
        """Origin rounds whose reports arrive at round t (D_t)."""
        return self.bundles[t - 1]

    def first_origin(self, t: int) -> int:
        """tau_t = min D_t, or t itself when nothing arrives."""
        b = self.bundles[t - 1]
        return b[0] if b else t

    def window(self, t: int) -> tuple[int, ...]:
        """Union of D_s for s = tau_t..t, sorted."""
        return tuple(sorted(k for s in range(self.first_origin(t), t + 1) for k in self.bundles[s - 1]))

    def sizes(self) -> np.ndarray:
        return np.array([len(b) for b in self.bundles])


def build_calendar(schedule: DelaySchedule) -> DeliveryCalendar:
    bundles: list[list[int]] = [[] for _ in range(schedule.horizon)]
    for k, arrival in enumerate(schedule.arrival, start=1):
        bundles[arrival - 1].append(k)
    return DeliveryCalendar(schedule, tuple(tuple(b) for b in bundles))


def make_schedule(strategy: str, T: int, *, d: int = 1, start: int = 1, length: int = 0, rng: np.random.Generator | None = None, quiet: bool = False) -> DelaySchedule:
    """Instantiate an attack strategy as a delay schedule.

    ``d`` is the requested per-iterate budget (constant delay, or the
    maximum delay for ``uniform-random`` and ``burst``). ``quiet`` suppresses
    the warning for budgets beyond T^(1/3).
    """
    if T < 1:
        raise ScheduleError("horizon must be >= 1")
    if strategy not in STRATEGIES:
        raise ScheduleError(f"unknown attack strategy {strategy!r}; choose from {', '.join(STRATEGIES)}")
    if strategy == "none":
        return DelaySchedule((1,) * T)
    if not 1 <= d <= T:
        raise ScheduleError(f"delay budget {d} must lie in 1..T={T}")
    if strategy == "constant":
        delays = np.full(T, d)
    elif strategy == "uniform-random":
        if rng is None:
            raise ScheduleError("uniform-random attack needs an rng")
        delays = rng.integers(1, d + 1, size=T)
        # pin one early round to the full budget so the sup-norm is attained
        delays[int(rng.integers(0, T - d + 1))] = d
    else:
        if not 1 <= start <= T or length < 1 or start + length - 1 > T:
            raise ScheduleError(f"burst window start={start}, length={length} must lie within 1..T={T}")
        if start > T - d + 1:
            raise ScheduleError(f"burst starting at {start} cannot realize delay {d} before the horizon")
        delays = np.ones(T, dtype=int)
        delays[start - 1 : start - 1 + length] = d
    schedule = DelaySchedule(tuple(int(x) for x in delays))
    if not quiet and schedule.budget > T ** (1 / 3):
        log.warning("delay budget %d exceeds T^(1/3) = %.2f; the rate bound is no longer sublinear", schedule.budget, T ** (1 / 3))
    return schedule


@dataclass(frozen=True)
class QCounts:
    total: int
    later: int
    earlier: int


def q_tau_counts(calendar: DeliveryCalendar, t: int, tau: int, check: bool = True) -> QCounts:
    """Count the reports other than tau's delivered between tau and t.

    ``later`` counts origins q >= tau, ``earlier`` origins q < tau. With
    ``check`` the pigeonhole bounds later <= d_tau and earlier <= d are
    asserted.
    """
    bundle = calendar.delivered(t)
    if tau not in bundle:
        raise ValueError(f"round {tau} is not delivered at round {t}")
    origins = [r for r in bundle if r < tau]
    for s in range(tau, t):
        origins.extend(calendar.delivered(s))
    later = sum(1 for q in origins if q >= tau)
    counts = QCounts(len(origins), later, len(origins) - later)
    if check:
        d_tau = int(calendar.schedule.effective[tau - 1])
        if counts.later > d_tau:
            raise AssertionError(f"Q_tau1 = {counts.later} > d_tau = {d_tau} at t={t}, tau={tau}")
        if counts.earlier > calendar.budget:
            raise AssertionError(f"Q_tau2 = {counts.earlier} > d = {calendar.budget} at t={t}, tau={tau}")
    return counts


def check_calendar(calendar: DeliveryCalendar) -> list[str]:
    """All combinatorial invariants of a calendar; returns the failures."""
    T, d = calendar.horizon, calendar.budget
    failures = []
    seen = sorted(k for b in calendar.bundles for k in b)
    if seen != list(range(1, T + 1)):
        failures.append("bundles do not partition 1..T")
    for t in range(1, T + 1):
        bundle = calendar.delivered(t)
        if any(k > t for k in bundle):
            failures.append(f"round {t} receives a report from the future")
        if len(bundle) > d:
            failures.append(f"|D_{t}| = {len(bundle)} > d = {d}")
        if len(calendar.window(t)) > 2 * d:
            failures.append(f"window at round {t} holds {len(calendar.window(t))} > 2d = {2 * d}")
        for tau in bundle:
            try:
                q_tau_counts(calendar, t, tau)
            except AssertionError as exc:
                failures.append(str(exc))
    return failures


def identity_calendar(T: int) -> DeliveryCalendar:
    return build_calendar(DelaySchedule((1,) * T))


def schedule_from_delays(delays: Sequence[int]) -> DelaySchedule:
    return DelaySchedule(tuple(delays))
