"""Synthetic type-1 cohort drawn from the twin simulator.

Each patient is one population twin (the hidden ground truth) living through
randomly timed meals, carbohydrate-ratio boluses, a piecewise-constant basal
profile, hypo rescues and correction boluses. Meals and rescue carbohydrate
drive the simulator but are not written to the emitted record, the same
situation a CGM + pump log presents.
"""

import logging
from dataclasses import dataclass

import numpy as np

from . import hovorka as hv
from .iob import InsulinEvent
from .segments import (CGM_MAX, CGM_MIN, HISTORY_MIN, HORIZON_MIN, SLOT,
                       RawPatientRecord, build_candidate)

log = logging.getLogger(__name__)

STEPS_PER_DAY = int(1440 / SLOT)


@dataclass(frozen=True)
class CohortSpec:
    n_patients: int = 20
    days: float = 14.0
    meals_per_day: float = 3.0
    carb_mean: float = 50.0  # g
    carb_sd: float = 20.0
    bolus_probability: float = 0.85
    basal_changes_per_day: float = 2.0
    basal_jump_sd: float = 0.15  # log-scale
    target_range: tuple = (110.0, 150.0)  # mg/dL equilibrium under basal
    cgm_noise_sd: float = 3.0
    dropout_rate: float = 0.02
    gap_mean_len: float = 3.0  # readings
    hypo_threshold: float = 70.0
    rescue_carbs: float = 15.0
    correction_threshold: float = 250.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n_patients", "days", "meals_per_day", "carb_mean", "carb_sd",
                     "basal_changes_per_day", "basal_jump_sd", "cgm_noise_sd", "dropout_rate"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")


@dataclass
class Cohort:
    records: list
    ground_truth: dict  # patient_id -> generating twin id
    meals: dict  # patient_id -> list of (time, grams), hidden from the records
    true_glucose: dict  # patient_id -> (steps,) noiseless CGM


def _simulate_response(params, g_eq, u_eq, carbs, units, steps):
    x = hv.steady_state_init(g_eq, 0.0, u_eq, params)
    u_I = np.full(steps, u_eq)
    u_I[0] += units * 1000.0 / (params.BW * SLOT)
    u_G = np.zeros(steps)
    u_G[0] = carbs / SLOT
    _, cgm = hv.simulate(x, params, u_I, u_G)
    return cgm


def calibrate_ratio(params, g_eq, u_eq, carbs=50.0, horizon=300.0):
    """Carbohydrate ratio (g/U) that brings a meal back to baseline at ``horizon``."""
    steps = int(horizon / SLOT)

    def excess(units):
        return _simulate_response(params, g_eq, u_eq, carbs, units, steps)[-1] - g_eq

    lo, hi = 0.0, 1.0
    while excess(hi) > 0 and hi < 200:
        hi *= 2.0
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if excess(mid) > 0:
            lo = mid
        else:
            hi = mid
    return carbs / max(hi, 1e-6)


def correction_factor(params, g_eq, u_eq, horizon=240.0):
    """Glucose drop (mg/dL) at ``horizon`` caused by 1 U on top of basal."""
    steps = int(horizon / SLOT)
    cgm = _simulate_response(params, g_eq, u_eq, 0.0, 1.0, steps)
    return max(g_eq - cgm.min(), 1.0)


def _markov_gaps(rng, n, rate, mean_len):
    if rate <= 0:
        return np.zeros(n, dtype=bool)
    p_end = 1.0 / mean_len
    p_start = rate * p_end / (1.0 - rate)
    u = rng.random(n)
    missing = np.zeros(n, dtype=bool)
    state = rng.random() < rate
    for i in range(n):
        missing[i] = state
        state = (u[i] >= p_end) if state else (u[i] < p_start)
    return missing


def _patient(spec, population, pid, rng):
    twin_id = int(rng.integers(1, len(population) + 1))
    params = population[twin_id]
    g_eq = rng.uniform(*spec.target_range)
    while True:
        # twins with low endogenous production cannot idle at high glucose
        try:
            u_eq = hv.equilibrium_basal(g_eq, params)
            break
        except ValueError:
            g_eq -= 10.0
            if g_eq < 80.0:
                return None
    basal_uhr = u_eq * 60.0 * params.BW / 1000.0
    icr = calibrate_ratio(params, g_eq, u_eq)
    cf = correction_factor(params, g_eq, u_eq)
    steps = int(round(spec.days * STEPS_PER_DAY))

    # basal profile: piecewise constant with log-normal jumps
    n_changes = rng.poisson(spec.basal_changes_per_day * spec.days)
    change_steps = np.sort(rng.integers(1, steps, size=n_changes))
    rate = np.full(steps, basal_uhr)
    events = [InsulinEvent("basal_rate", 0.0, basal_uhr)]
    for k in change_steps:
        r = basal_uhr * float(np.exp(rng.normal(0.0, spec.basal_jump_sd)))
        rate[k:] = r
        events.append(InsulinEvent("basal_rate", k * SLOT, r))

    # meals: uniform waking-hour times with at least an hour between them
    meals = []
    for day in range(int(np.ceil(spec.days))):
        n = rng.poisson(spec.meals_per_day)
        times = np.sort(rng.uniform(6 * 60, 22 * 60, size=n)) + day * 1440
        last = -np.inf
        for t in times:
            k = int(t // SLOT)
            if k >= steps or t - last < 60:
                continue
            last = t
            sigma2 = np.log(1 + (spec.carb_sd / spec.carb_mean) ** 2)
            grams = float(np.clip(rng.lognormal(np.log(spec.carb_mean) - sigma2 / 2,
                                                np.sqrt(sigma2)), 10, 120))
            meals.append((k, grams))
    carbs = np.zeros(steps)
    boluses = np.zeros(steps)
    for k, grams in meals:
        carbs[k] += grams
        if rng.random() < spec.bolus_probability:
            kb = int(np.clip(k + rng.integers(-2, 3), 0, steps - 1))
            boluses[kb] += round(grams / icr * float(np.exp(rng.normal(0, 0.1))), 2)

    x = hv.steady_state_init(g_eq, 0.0, u_eq, params)
    true = np.empty(steps)
    last_rescue, last_bolus = -np.inf, -np.inf
    for k in range(steps):
        g = float(hv.cgm_output(x, params))
        if not np.isfinite(g) or g > hv.BLOWUP_MGDL:
            return None
        true[k] = g
        if g < spec.hypo_threshold and k - last_rescue >= 6:
            carbs[k] += spec.rescue_carbs
            last_rescue = k
        if boluses[k] > 0:
            last_bolus = k
        elif g > spec.correction_threshold and k - last_bolus >= 36:
            boluses[k] = round((g - 140.0) / cf, 2)
            last_bolus = k
        u_I = rate[k] * 1000.0 / (60.0 * params.BW) + boluses[k] * 1000.0 / (params.BW * SLOT)
        x = hv.step(x, params, hv.ControlInput(u_I, carbs[k] / SLOT))
    events += [InsulinEvent("bolus", k * SLOT, float(b)) for k in np.nonzero(boluses)[0]
               for b in [boluses[k]] if b > 0]
    events.sort(key=lambda e: (e.time, e.kind))

    noisy = true + rng.normal(0.0, spec.cgm_noise_sd, size=steps) if spec.cgm_noise_sd else true
    noisy = np.clip(noisy, CGM_MIN, CGM_MAX)
    keep = ~_markov_gaps(rng, steps, spec.dropout_rate, spec.gap_mean_len)
    times = np.arange(steps) * SLOT
    record = RawPatientRecord(pid, times[keep], noisy[keep], events)
    return record, twin_id, [(k * SLOT, g) for k, g in meals], true


def generate_cohort(spec, population):
    records, truth, meals, true = [], {}, {}, {}
    for i in range(spec.n_patients):
        pid = f"P{i + 1:03d}"
        attempt = 0
        while True:
            rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([spec.seed, i, attempt])))
            out = _patient(spec, population, pid, rng)
            if out is not None:
                break
            log.warning("patient %s blew up on attempt %d, resampling", pid, attempt)
            attempt += 1
        record, twin_id, patient_meals, g = out
        records.append(record)
        truth[pid] = twin_id
        meals[pid] = patient_meals
        true[pid] = g
    return Cohort(records, truth, meals, true)


def twin_history_segment(params, g0, basal_uhr, boluses=(), noise_sd=0.0, rng=None,
                         patient_id="synthetic", slope_iterations=50):
    """A segment whose history is generated by one twin.

    The twin starts from the steady-state initializer with the same slope the
    matcher will estimate from the generated history (found by fixed-point
    iteration), so with ``noise_sd = 0`` the generating twin reproduces the
    history exactly. ``boluses`` is a sequence of ``(step, units)``.
    """
    from .matching import slope

    n_hist = int(HISTORY_MIN / SLOT) + 1
    n_total = n_hist + int(HORIZON_MIN / SLOT)
    u_basal = basal_uhr * 1000.0 / (60.0 * params.BW)
    u_I = np.full(n_total - 1, u_basal)
    for k, units in boluses:
        u_I[k] += units * 1000.0 / (params.BW * SLOT)
    times = np.arange(n_total) * SLOT
    s = 0.0
    for _ in range(slope_iterations):
        x0 = hv.steady_state_init(g0, s, u_basal, params)
        _, cgm = hv.simulate(x0, params, u_I)
        s_new, _ = slope(times[:n_hist], cgm[:n_hist], (0.0, 60.0))
        if abs(s_new - s) < 1e-13:
            s = s_new
            break
        s = s_new
    x0 = hv.steady_state_init(g0, s, u_basal, params)
    _, cgm = hv.simulate(x0, params, u_I)
    if noise_sd:
        rng = np.random.default_rng() if rng is None else rng
        cgm = cgm + rng.normal(0.0, noise_sd, size=cgm.size)
    events = [InsulinEvent("basal_rate", -2000.0, basal_uhr)]
    events += [InsulinEvent("bolus", k * SLOT, float(u)) for k, u in boluses]
    record = RawPatientRecord(patient_id, times, cgm, events)
    seg, _ = build_candidate(record, HISTORY_MIN)
    return seg
