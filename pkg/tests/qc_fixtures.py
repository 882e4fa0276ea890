"""Hand-built CGM records that each violate one quality-control rule.

Every fixture has its decision time at ``T`` and a smooth sinusoidal trace on
the regular 5-minute grid unless the rule calls for something else.
"""

import numpy as np

from glyforge import hovorka as hv
from glyforge.iob import InsulinEvent
from glyforge.population import TwinPopulation
from glyforge.segments import HISTORY_MIN, HORIZON_MIN, RawPatientRecord

T = 1000.0
BASAL = [InsulinEvent("basal_rate", 0.0, 0.8)]


def _grid():
    return np.arange(T - HISTORY_MIN, T + HORIZON_MIN + 1, 5.0)


def _trace(t):
    return 140.0 + 30.0 * np.sin((t - T) / 120.0)


def clean():
    t = _grid()
    return RawPatientRecord("clean", t, _trace(t), BASAL)


def sparse_history():
    # 17 readings every other slot after a short padded lead-in
    t = _grid()
    hist = t[t <= T]
    keep = np.ones(t.size, bool)
    keep[:hist.size] = False
    keep[4:hist.size:2] = True
    return RawPatientRecord("sparse", t[keep], _trace(t[keep]), BASAL)


def history_jump():
    t = _grid()
    g = _trace(t)
    g[(t >= T - 90) & (t <= T)] += 45.0
    return RawPatientRecord("jump", t, g, BASAL)


def stale_decision():
    t = _grid().copy()
    t[t == T - 5] = T - 5.5
    t[t == T] = T + 2.5
    return RawPatientRecord("stale", t, _trace(t), BASAL)


def history_gap():
    t = _grid()
    keep = ~((t > T - 100) & (t < T - 75))  # four empty slots
    return RawPatientRecord("gap", t[keep], _trace(t[keep]), BASAL)


def future_jump():
    t = _grid()
    g = _trace(t)
    g[t >= T + 120] -= 45.0
    return RawPatientRecord("fjump", t, g, BASAL)


def runaway_population():
    """One twin whose liver output overwhelms clearance within the history."""
    p = hv.NOMINAL.replace(EGP_0=hv.NOMINAL.EGP_0 * 40)
    return TwinPopulation((1,), (p,), seed=0)


BY_CRITERION = {1: sparse_history, 2: history_jump, 3: stale_decision, 4: history_gap,
                5: future_jump}
