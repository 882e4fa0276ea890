"""Insulin-on-board features from pump event logs.

Pump events are flattened into micro-doses on the 5-minute grid, weighted by a
three-phase activity curve evaluated 60 minutes before the query time, summed
and mapped onto [-1, 1].
"""

import csv
from dataclasses import dataclass

import numpy as np

SLOT = 5.0
EXCLUSION = 60.0  # min; insulin this recent is not yet systemic
IOB_CAP = 4.53  # U
KINDS = ("basal_rate", "bolus", "extended_bolus")


@dataclass(frozen=True)
class InsulinEvent:
    """A pump record.

    ``amount`` is a rate in U/hr for ``basal_rate`` and a dose in U otherwise;
    ``duration`` (min) only applies to ``extended_bolus``.
    """

    kind: str
    time: float
    amount: float
    duration: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown insulin event kind {self.kind!r}")
        if self.amount < 0:
            raise ValueError("insulin amounts must be non-negative")
        if self.kind == "extended_bolus" and not self.duration > SLOT:
            raise ValueError("extended boluses must last longer than 5 min")


@dataclass(frozen=True)
class MicroDose:
    time: float
    amount: float


def _slot_floor(t):
    return SLOT * np.floor(t / SLOT)


def basal_segments(events, t_end):
    """``(start, stop, rate)`` spans of active basal; a later record overrides
    an earlier one from its own start time."""
    basal = sorted((e for e in events if e.kind == "basal_rate"), key=lambda e: e.time)
    spans = []
    for cur, nxt in zip(basal, basal[1:] + [None]):
        stop = t_end if nxt is None else min(nxt.time, t_end)
        if stop > cur.time:
            spans.append((cur.time, stop, cur.amount))
    return spans


def decompose_events(events, window):
    """Flatten events into micro-doses with delivery time inside ``window``.

    Basal spans are cut into grid slots carrying ``rate / 60`` U per covered
    minute (``rate / 12`` U for a full slot); suspended basal (rate 0) yields
    nothing. An extended bolus of ``d`` U over ``m`` min becomes
    ``floor(m / 5)`` equal doses 5 min apart; a manual bolus stays a single dose.
    """
    t_start, t_end = window
    doses = []
    for start, stop, rate in basal_segments(events, t_end):
        if rate <= 0:
            continue
        lo, hi = max(start, t_start), stop
        slot = _slot_floor(lo)
        while slot < hi:
            covered = min(slot + SLOT, hi) - max(slot, lo)
            if covered > 0:
                doses.append(MicroDose(float(slot), rate * covered / 60.0))
            slot += SLOT
    for e in events:
        if e.kind == "bolus":
            if t_start <= e.time < t_end and e.amount > 0:
                doses.append(MicroDose(float(e.time), float(e.amount)))
        elif e.kind == "extended_bolus":
            n = int(e.duration // SLOT)
            for i in range(n):
                t = e.time + SLOT * i
                if t_start <= t < t_end and e.amount > 0:
                    doses.append(MicroDose(float(t), e.amount / n))
    doses.sort(key=lambda d: d.time)
    return doses


def activity(delta):
    """Fraction of a dose that is metabolically active ``delta`` min after it."""
    d = np.asarray(delta, dtype=float)
    with np.errstate(over="ignore"):
        out = np.where(d <= 30.0, d / 30.0, np.where(d <= 90.0, 1.0, np.exp(-0.012 * (d - 90.0))))
    out = np.where(d > 0, out, 0.0)
    return out if out.ndim else float(out)


def _dose_arrays(doses):
    if isinstance(doses, tuple) and len(doses) == 2 and isinstance(doses[0], np.ndarray):
        return doses
    times = np.array([d.time for d in doses], dtype=float)
    amounts = np.array([d.amount for d in doses], dtype=float)
    return times, amounts


def iob_at(t, doses):
    """Raw insulin on board (U) at time ``t``.

    ``doses`` is a list of :class:`MicroDose` or a ``(times, amounts)`` pair.
    """
    times, amounts = _dose_arrays(doses)
    return float(np.sum(amounts * activity(t - EXCLUSION - times)))


def normalize_iob(iob):
    iob = np.asarray(iob, dtype=float)
    if np.any(iob < 0):
        raise ValueError("insulin on board cannot be negative")
    out = 2.0 * np.minimum(iob, IOB_CAP) / IOB_CAP - 1.0
    return out if out.ndim else float(out)


def known_events(events, decision_time):
    """Events available at ``decision_time``: later records are dropped so the
    last basal rate carries on through the forecast window."""
    return [e for e in events if e.time <= decision_time]


def iob_series(events, grid, decision_time=None, lookback=None):
    """Normalized IOB on a sorted time grid.

    With ``decision_time`` set, only events logged up to it are used and the
    last active basal rate is extended over later grid points. ``lookback``
    (min) limits how far before ``grid[0]`` doses are collected; by default
    every event is used.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        return grid.copy()
    if np.any(np.diff(grid) < 0):
        raise ValueError("grid must be sorted")
    if decision_time is not None:
        events = known_events(events, decision_time)
    first = min([e.time for e in events], default=grid[0])
    t_start = first if lookback is None else max(first, grid[0] - lookback)
    doses = decompose_events(events, (t_start, grid[-1] + SLOT))
    times, amounts = _dose_arrays(doses)
    raw = (amounts[None, :] * activity(grid[:, None] - EXCLUSION - times[None, :])).sum(axis=1) \
        if times.size else np.zeros(grid.size)
    return normalize_iob(raw)


def read_events(path):
    """Read a tab-separated insulin log into ``{patient_id: [InsulinEvent]}``."""
    out = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        for lineno, row in enumerate(reader, start=2):
            try:
                ev = InsulinEvent(row["kind"], float(row["timestamp"]),
                                  float(row["dose_or_rate"]), float(row["duration"] or 0))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
            out.setdefault(row["patient_id"], []).append(ev)
    return out


def write_events(path, events_by_patient):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(["patient_id", "kind", "timestamp", "dose_or_rate", "duration"])
        for pid, events in events_by_patient.items():
            for e in events:
                w.writerow([pid, e.kind, format(e.time, ".17g"), format(e.amount, ".17g"),
                            format(e.duration, ".17g")])
