"""Receptive-field and gridding arithmetic for serial stacks of 1D atrous convolutions.

Two families of functions live side by side. The closed forms
(:func:`rf_stack_paper`, :func:`uncollected_paper`) are evaluated literally;
the coverage simulation (:func:`coverage`, :func:`rf_oracle`,
:func:`uncovered_oracle`) enumerates which input positions actually feed a
single output and is what the ranking uses.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from .errors import ConfigurationError

MAX_ENUMERATION = 10 ** 6
MAX_RENDER_SPAN = 256


@dataclass(frozen=True)
class DilationSchedule:
    """Filter size plus the dilation rate of each stacked layer, input side first."""

    f: int
    rates: Tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "rates", tuple(int(r) for r in self.rates))
        if self.f < 1 or self.f % 2 == 0:
            raise ConfigurationError(f"filter size must be a positive odd integer, got {self.f}")
        if not self.rates:
            raise ConfigurationError("a schedule needs at least one layer")
        if any(r < 1 for r in self.rates):
            raise ConfigurationError(f"dilation rates must be >= 1, got {list(self.rates)}")

    @property
    def n(self) -> int:
        return len(self.rates)

    def is_geometric(self) -> bool:
        """True for ``[1, r, r**2, ...]``."""
        if self.rates[0] != 1:
            return False
        if self.n == 1:
            return True
        r = self.rates[1]
        return all(d == r ** k for k, d in enumerate(self.rates))

    def __str__(self) -> str:
        return "[" + ",".join(map(str, self.rates)) + "]"


def rf_single(f: int, dr: int) -> int:
    """Receptive field of one dilated layer: ``f + (dr - 1)(f - 1)``."""
    return f + (dr - 1) * (f - 1)


def rf_stack_paper(schedule: DilationSchedule) -> int:
    """Closed-form stacked receptive field, with the first rate standing in for ``dr^0``."""
    f, rates = schedule.f, schedule.rates
    return f + (rates[0] - 1) * (f - 1) + sum(rates)


def uncollected_paper(schedule: DilationSchedule) -> int:
    """Closed-form uncollected-node count; negative values mean overlap, not gaps."""
    f, rates = schedule.f, schedule.rates
    return (f - 1) * (rates[0] - schedule.n * sum(rates))


def evaluation_ratio(schedule: DilationSchedule) -> float:
    rf = rf_stack_paper(schedule)
    if rf == 0:
        raise ZeroDivisionError("receptive field of zero")
    return uncollected_paper(schedule) / rf


def coverage(schedule: DilationSchedule) -> List[np.ndarray]:
    """Sets of input offsets feeding the centre output, layer by layer.

    Element ``k`` holds the sorted offsets of feature map ``F^(n-k)`` that
    influence the single output of the last layer, so element 0 is ``[0]``
    and the final element describes the input.
    """
    half = (schedule.f - 1) // 2
    taps = np.arange(-half, half + 1)
    layers = [np.array([0])]
    current = layers[0]
    for dr in reversed(schedule.rates):
        current = np.unique((current[:, None] + dr * taps[None, :]).ravel())
        layers.append(current)
    return layers


def rf_oracle(schedule: DilationSchedule) -> int:
    reach = coverage(schedule)[-1]
    return int(reach[-1] - reach[0] + 1)


def uncovered_oracle(schedule: DilationSchedule) -> int:
    """Input positions inside the receptive field that no path reaches."""
    reach = coverage(schedule)[-1]
    return int(reach[-1] - reach[0] + 1 - reach.size)


@dataclass(frozen=True)
class ScheduleReport:
    schedule: DilationSchedule
    rf_paper: int
    rf_oracle: int
    un_paper: int
    uncovered_oracle: int
    er: float

    @property
    def er_oracle(self) -> float:
        return self.uncovered_oracle / self.rf_oracle

    @property
    def rates(self) -> Tuple[int, ...]:
        return self.schedule.rates

    def sort_key(self):
        return (self.er_oracle, -self.rf_oracle, self.schedule.rates)


def report(schedule: DilationSchedule) -> ScheduleReport:
    return ScheduleReport(
        schedule=schedule,
        rf_paper=rf_stack_paper(schedule),
        rf_oracle=rf_oracle(schedule),
        un_paper=uncollected_paper(schedule),
        uncovered_oracle=uncovered_oracle(schedule),
        er=evaluation_ratio(schedule),
    )


def rank_schedules(f: int, n: int, max_rate: int) -> List[ScheduleReport]:
    """Score every rate list in ``{1..max_rate}^n`` and sort best first.

    Order: coverage-simulated ratio ascending, simulated receptive field
    descending, then the rate list lexicographically.
    """
    if n < 1 or max_rate < 1:
        raise ConfigurationError("layers and max_rate must be >= 1")
    if max_rate ** n > MAX_ENUMERATION:
        raise ConfigurationError(
            f"enumerating {max_rate}^{n} = {max_rate ** n} schedules exceeds the budget of {MAX_ENUMERATION}")
    reports = [report(DilationSchedule(f, rates))
               for rates in itertools.product(range(1, max_rate + 1), repeat=n)]
    reports.sort(key=ScheduleReport.sort_key)
    return reports


def parse_rates(text: str) -> Tuple[int, ...]:
    """Parse ``"1,2,4"`` (brackets optional) into a tuple of ints."""
    body = text.strip().strip("[]")
    try:
        return tuple(int(tok) for tok in body.split(",") if tok.strip())
    except ValueError as exc:
        raise ConfigurationError(f"cannot parse dilation rates from {text!r}") from exc


def coverage_grid(schedule: DilationSchedule) -> np.ndarray:
    """Boolean grid, one row per feature map from output (top) to input (bottom)."""
    layers = coverage(schedule)
    lo, hi = int(layers[-1][0]), int(layers[-1][-1])
    span = hi - lo + 1
    if span > MAX_RENDER_SPAN:
        raise ConfigurationError(f"coverage span {span} exceeds the render limit of {MAX_RENDER_SPAN}")
    grid = np.zeros((len(layers), span), dtype=bool)
    for row, offsets in enumerate(layers):
        grid[row, offsets - lo] = True
    return grid


def render_coverage(schedule: DilationSchedule) -> str:
    """ASCII picture of the coverage grid: ``#`` marks a contributing position."""
    grid = coverage_grid(schedule)
    names = [f"F{schedule.n - k}" for k in range(grid.shape[0])]
    width = max(len(s) for s in names)
    lines = [f"{name:>{width}} |" + "".join("#" if v else "." for v in row) + "|"
             for name, row in zip(names, grid)]
    return "\n".join(lines)


def render_coverage_ppm(schedule: DilationSchedule, cell: int = 8) -> bytes:
    """Same grid as a binary P6 image, ``cell`` pixels per position."""
    grid = coverage_grid(schedule)
    rgb = np.full(grid.shape + (3,), 255, dtype=np.uint8)
    rgb[grid] = (30, 90, 200)
    img = np.repeat(np.repeat(rgb, cell, axis=0), cell, axis=1)
    img[::cell, :, :] = 200
    img[:, ::cell, :] = 200
    h, w = img.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def format_reports(reports: Sequence[ScheduleReport], fmt: str = "table") -> str:
    header = ["rates", "rf_paper", "rf_oracle", "un_paper", "uncovered_oracle", "er", "er_oracle", "geometric"]
    rows = [[str(r.schedule), str(r.rf_paper), str(r.rf_oracle), str(r.un_paper), str(r.uncovered_oracle),
             f"{r.er:.4f}", f"{r.er_oracle:.4f}", "yes" if r.schedule.is_geometric() else "no"]
            for r in reports]
    if fmt == "csv":
        return "\n".join(",".join(f'"{c}"' if "," in c else c for c in row) for row in [header] + rows)
    widths = [max(len(row[i]) for row in [header] + rows) for i in range(len(header))]
    return "\n".join("  ".join(c.rjust(w) for c, w in zip(row, widths)) for row in [header] + rows)
