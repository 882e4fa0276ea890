"""Segment extraction, quality control, patient splits and model tensors.

A segment is a 7-hour window on the 5-minute grid: 36 history steps plus the
decision step (37 values) followed by 48 forecast steps.
"""

import csv
from dataclasses import dataclass, field

import numpy as np

from . import iob as iobmod

SLOT = 5.0
L_HIST = 37
H_FUT = 48
HISTORY_MIN = (L_HIST - 1) * SLOT
HORIZON_MIN = H_FUT * SLOT
CGM_MIN, CGM_MAX = 40.0, 400.0
_LOG_LO, _LOG_HI = np.log(CGM_MIN), np.log(CGM_MAX)

MIN_POINTS = 18
MAX_JUMP = 40.0
MAX_STALE = 5.0
MAX_FILL = 3
IOB_LOOKBACK = 1440.0  # min of insulin history kept per segment

QC_REASONS = {
    1: "min_density",
    2: "rate_of_change",
    3: "stale_alignment",
    4: "residual_gap",
    5: "future_jump",
    6: "matching_failure",
}


@dataclass
class RawPatientRecord:
    patient_id: str
    cgm_times: np.ndarray
    cgm_values: np.ndarray
    insulin_events: list = field(default_factory=list)

    def __post_init__(self):
        self.cgm_times = np.asarray(self.cgm_times, dtype=float)
        self.cgm_values = np.asarray(self.cgm_values, dtype=float)
        if self.cgm_times.shape != self.cgm_values.shape:
            raise ValueError("cgm times and values differ in length")
        if np.any(np.diff(self.cgm_times) <= 0):
            raise ValueError(f"cgm timestamps of {self.patient_id} are not strictly increasing")


@dataclass
class Segment:
    patient_id: str
    decision_time: float
    history_cgm: np.ndarray  # (37,) mg/dL, zeros where padded
    history_mask: np.ndarray  # (37,) True for unpadded rows
    history_observed: np.ndarray  # (37,) True where a reading was resampled
    future_cgm: np.ndarray  # (48,)
    insulin_context: list  # events known at decision time within the lookback
    qc_flags: frozenset = frozenset()
    iob_hist: np.ndarray = None  # (37,) normalized, zeros where padded
    iob_fut: np.ndarray = None  # (48,)

    @property
    def segment_id(self):
        return f"{self.patient_id}:{int(self.decision_time)}"

    @property
    def n_valid(self):
        return int(self.history_mask.sum())

    @property
    def first_valid(self):
        return L_HIST - self.n_valid

    @property
    def history_times(self):
        return self.decision_time - SLOT * np.arange(L_HIST - 1, -1, -1)

    @property
    def future_times(self):
        return self.decision_time + SLOT * np.arange(1, H_FUT + 1)

    @property
    def last_cgm(self):
        return float(self.history_cgm[-1])


class Rejection:
    """QC verdict for a rejected candidate; ``criterion`` is the first failed."""

    def __init__(self, criteria):
        self.criteria = frozenset(criteria)
        self.criterion = min(self.criteria)
        self.reason = QC_REASONS[self.criterion]

    def __repr__(self):
        return f"Rejection({self.reason})"


def resample_to_grid(times, values, t0, t_end):
    """Nearest reading within +/-2.5 min of each slot ``t0, t0 + 5, ..., t_end``.

    Empty slots are NaN. Among equidistant readings the earlier one wins.
    """
    if (t_end - t0) % SLOT:
        raise ValueError("window length must be a multiple of 5 min")
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    grid = np.arange(t0, t_end + SLOT / 2, SLOT)
    out = np.full(grid.size, np.nan)
    if times.size == 0:
        return out
    right = np.clip(np.searchsorted(times, grid, side="left"), 0, times.size - 1)
    left = np.clip(right - 1, 0, times.size - 1)
    d_left = np.abs(times[left] - grid)
    d_right = np.abs(times[right] - grid)
    pick = np.where(d_left <= d_right, left, right)
    dist = np.minimum(d_left, d_right)
    ok = dist <= SLOT / 2
    out[ok] = values[pick[ok]]
    return out


def interpolate_gaps(series, max_gap=MAX_FILL):
    """Linearly fill interior NaN runs of at most ``max_gap`` slots."""
    out = np.array(series, dtype=float)
    isnan = np.isnan(out)
    i, n = 0, out.size
    while i < n:
        if not isnan[i]:
            i += 1
            continue
        j = i
        while j < n and isnan[j]:
            j += 1
        if i > 0 and j < n and j - i <= max_gap:
            a, b = out[i - 1], out[j]
            frac = np.arange(1, j - i + 1) / (j - i + 1)
            out[i:j] = a + (b - a) * frac
        i = j
    return out


def _max_adjacent_jump(series):
    d = np.abs(np.diff(series))
    d = d[np.isfinite(d)]
    return d.max() if d.size else 0.0


def qc_checks(hist_raw, hist_filled, fut_filled, last_reading_age):
    """Set of QC criteria (1-5) violated by a candidate window."""
    failed = set()
    if np.count_nonzero(~np.isnan(hist_raw)) < MIN_POINTS:
        failed.add(1)
    if _max_adjacent_jump(hist_filled) > MAX_JUMP:
        failed.add(2)
    if not last_reading_age <= MAX_STALE:
        failed.add(3)
    valid = np.nonzero(~np.isnan(hist_filled))[0]
    if valid.size == 0 or np.isnan(hist_filled[valid[0]:]).any() or np.isnan(fut_filled).any():
        failed.add(4)
    if _max_adjacent_jump(fut_filled) > MAX_JUMP:
        failed.add(5)
    return failed


def qc_filter(hist_raw, hist_filled, fut_filled, last_reading_age, matching_failed=False):
    """``None`` when the candidate passes, else a :class:`Rejection`."""
    failed = qc_checks(hist_raw, hist_filled, fut_filled, last_reading_age)
    if matching_failed:
        failed.add(6)
    return Rejection(failed) if failed else None


def _grid_origin(record):
    return SLOT * np.floor(record.cgm_times[0] / SLOT + 0.5)


def build_candidate(record, t, gridded=None, origin=None, clamped=None):
    """Assemble a candidate window for decision time ``t``.

    Returns ``(segment, rejection)``; ``rejection`` is None for accepted ones.
    """
    if gridded is None:
        origin = t - HISTORY_MIN
        values = np.clip(record.cgm_values, CGM_MIN, CGM_MAX)
        gridded = resample_to_grid(record.cgm_times, values, origin, t + HORIZON_MIN)
        clamped = resample_to_grid(record.cgm_times, (values != record.cgm_values) * 1.0,
                                   origin, t + HORIZON_MIN)
    k = int(round((t - HISTORY_MIN - origin) / SLOT))
    window = gridded[k:k + L_HIST + H_FUT]
    hist_raw = window[:L_HIST]
    hist = interpolate_gaps(hist_raw)
    fut = interpolate_gaps(window[L_HIST:])

    n_before = np.searchsorted(record.cgm_times, t, side="right")
    age = t - record.cgm_times[n_before - 1] if n_before else np.inf
    rejection = qc_filter(hist_raw, hist, fut, age)

    valid = np.nonzero(~np.isnan(hist))[0]
    first = valid[0] if valid.size else L_HIST
    mask = np.zeros(L_HIST, dtype=bool)
    mask[first:] = True
    history = np.where(mask, np.nan_to_num(hist), 0.0)
    flags = set()
    if clamped is not None and np.nansum(clamped[k:k + L_HIST + H_FUT]) > 0:
        flags.add("clamped")
    context = [e for e in iobmod.known_events(record.insulin_events, t)
               if e.time >= t - HISTORY_MIN - IOB_LOOKBACK or e.kind == "basal_rate"]
    context = _trim_basal(context, t - HISTORY_MIN - IOB_LOOKBACK)
    seg = Segment(
        patient_id=record.patient_id,
        decision_time=float(t),
        history_cgm=history,
        history_mask=mask,
        history_observed=mask & ~np.isnan(hist_raw),
        future_cgm=fut,
        insulin_context=context,
        qc_flags=frozenset(flags),
    )
    return seg, rejection


def _trim_basal(events, t_from):
    # keep only the basal record in force at t_from plus later ones
    basal = [e for e in events if e.kind == "basal_rate"]
    before = [e for e in basal if e.time <= t_from]
    keep = set(map(id, [before[-1]] if before else []))
    return [e for e in events
            if e.kind != "basal_rate" or e.time > t_from or id(e) in keep]


def attach_iob(seg):
    """Fill ``seg.iob_hist`` / ``seg.iob_fut`` from its insulin context."""
    grid = np.concatenate([seg.history_times, seg.future_times])
    series = iobmod.iob_series(seg.insulin_context, grid, seg.decision_time,
                               lookback=IOB_LOOKBACK)
    seg.iob_hist = np.where(seg.history_mask, series[:L_HIST], 0.0)
    seg.iob_fut = series[L_HIST:]
    return seg


def decision_times(record, stride=SLOT):
    origin = _grid_origin(record)
    last = SLOT * np.floor(record.cgm_times[-1] / SLOT + 0.5)
    first_t = origin + HISTORY_MIN
    last_t = last - HORIZON_MIN
    if last_t < first_t:
        return np.array([])
    n = int(np.floor((last_t - first_t) / stride + 1e-9)) + 1
    return first_t + stride * np.arange(n)


def extract_segments(record, stride=SLOT, with_iob=True, return_rejections=False):
    """Slide the decision time over a record and keep QC-accepted windows."""
    if stride <= 0 or stride % SLOT:
        raise ValueError("stride must be a positive multiple of 5 min")
    if record.cgm_times.size == 0:
        return ([], []) if return_rejections else []
    origin = _grid_origin(record)
    last = SLOT * np.floor(record.cgm_times[-1] / SLOT + 0.5)
    values = np.clip(record.cgm_values, CGM_MIN, CGM_MAX)
    gridded = resample_to_grid(record.cgm_times, values, origin, last)
    clamped = resample_to_grid(record.cgm_times, (values != record.cgm_values) * 1.0, origin, last)
    accepted, rejected = [], []
    for t in decision_times(record, stride):
        seg, rej = build_candidate(record, t, gridded, origin, clamped)
        if rej is None:
            accepted.append(attach_iob(seg) if with_iob else seg)
        else:
            rejected.append((seg, rej))
    return (accepted, rejected) if return_rejections else accepted


def split_patients(patient_ids, seed):
    """Deterministic 70/15/15 patient split.

    Train gets ``round(0.7 n)`` patients, validation ``floor(0.15 n)`` and the
    remainder goes to test.
    """
    ids = sorted(set(patient_ids))
    n = len(ids)
    order = np.random.Generator(np.random.PCG64(seed)).permutation(n)
    n_train = (7 * n + 5) // 10
    n_val = (15 * n) // 100
    out = {}
    for rank, i in enumerate(order):
        out[ids[i]] = "train" if rank < n_train else "validation" if rank < n_train + n_val else "test"
    return out


def scale_cgm(g):
    g = np.asarray(g, dtype=float)
    if np.any((g < CGM_MIN) | (g > CGM_MAX)):
        raise ValueError("glucose must lie in [40, 400] mg/dL before scaling")
    out = 2.0 * (np.log(g) - _LOG_LO) / (_LOG_HI - _LOG_LO) - 1.0
    return out if out.ndim else float(out)


def unscale_cgm(s):
    s = np.asarray(s, dtype=float)
    out = np.exp((s + 1.0) / 2.0 * (_LOG_HI - _LOG_LO) + _LOG_LO)
    return out if out.ndim else float(out)


def build_tensors(segment, match_result, iob_hist=None, iob_fut=None):
    """Encoder ``(37, 12)``, decoder ``(48, 11)`` and scaled target ``(48,)``.

    Encoder rows are ``[scaled CGM, scaled IOB, 10 twin states]``; decoder rows
    are ``[scaled IOB, 10 twin states]`` and never carry CGM. Padded history
    rows are all zero.
    """
    iob_hist = segment.iob_hist if iob_hist is None else np.asarray(iob_hist, float)
    iob_fut = segment.iob_fut if iob_fut is None else np.asarray(iob_fut, float)
    mask = segment.history_mask
    enc = np.zeros((L_HIST, 12))
    enc[mask, 0] = scale_cgm(segment.history_cgm[mask])
    enc[mask, 1] = iob_hist[mask]
    enc[:, 2:] = match_result.X_hist
    dec = np.zeros((H_FUT, 11))
    dec[:, 0] = iob_fut
    dec[:, 1:] = match_result.X_fut
    target = scale_cgm(segment.future_cgm)
    return enc, dec, target


def read_cgm(path):
    """Read a tab-separated CGM log into ``{patient_id: (times, values)}``."""
    rows = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh, delimiter="\t")
        for lineno, rec in enumerate(reader, start=2):
            try:
                rows.setdefault(rec["patient_id"], []).append(
                    (float(rec["timestamp_min"]), float(rec["mg_dl"])))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return {pid: (np.array([r[0] for r in v]), np.array([r[1] for r in v]))
            for pid, v in rows.items()}


def write_cgm(path, records):
    with open(path, "w", newline="") as fh:
        fh.write("patient_id\ttimestamp_min\tmg_dl\n")
        for rec in records:
            for t, g in zip(rec.cgm_times, rec.cgm_values):
                if np.isfinite(g):
                    fh.write(f"{rec.patient_id}\t{t:.17g}\t{g:.17g}\n")
