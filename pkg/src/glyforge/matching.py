"""Population search for the best-fitting twin and ODE state extraction.

Three passes per segment:

1. every twin is anchored to the first history reading and its slope,
   driven by the logged insulin with no carbohydrate, and scored by RMSE
   against the observed history;
2. the winner is re-run with its states logged;
3. the winner is re-anchored at the decision time, keeps the subcutaneous
   insulin of pass 2, and is propagated 48 steps under the mean history basal
   rate with no bolus or carbohydrate.
"""

from dataclasses import dataclass

import numpy as np

from . import hovorka as hv
from . import iob as iobmod
from .segments import H_FUT, L_HIST, SLOT


class MatchingFailure(RuntimeError):
    """Every twin in the population blew up on a segment."""


@dataclass(frozen=True)
class MatchingConfig:
    tau_act: float = 240.0  # min; carried as metadata only
    slope_window_head: float = 60.0
    slope_window_tail: float = 60.0
    chunk_rows: int = 2400  # twins x segments simulated together

    def __post_init__(self):
        if self.slope_window_head <= 0 or self.slope_window_tail <= 0:
            raise ValueError("slope windows must be positive")


@dataclass
class MatchResult:
    twin_id: int
    rmse: float
    X_hist: np.ndarray  # (37, 10), zero rows where the history is padded
    X_fut: np.ndarray  # (48, 10)
    u_basal_mean: float  # mU/kg/min
    segment_id: str = ""


def slope(times, values, window):
    """OLS slope (mg/dL/min) of the finite points with time in ``window``.

    Returns ``(slope, ok)``; ``ok`` is False and the slope 0 when fewer than
    two points are available.
    """
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    a, b = window
    sel = (times >= a) & (times <= b) & np.isfinite(values)
    if np.count_nonzero(sel) < 2:
        return 0.0, False
    t, g = times[sel], values[sel]
    tc = t - t.mean()
    denom = np.dot(tc, tc)
    if denom == 0:
        return 0.0, False
    return float(np.dot(tc, g - g.mean()) / denom), True


def _basal_rate_at(events, t):
    rate = 0.0
    for e in sorted((e for e in events if e.kind == "basal_rate"), key=lambda e: e.time):
        if e.time <= t:
            rate = e.amount
        else:
            break
    return rate


def _to_mu_per_kg_min(units_per_hour, bw):
    return units_per_hour * 1000.0 / (60.0 * bw)


@dataclass
class _HistoryInputs:
    times: np.ndarray  # unpadded history grid
    cgm: np.ndarray
    observed: np.ndarray
    slot_units: np.ndarray  # U delivered in each simulated step
    basal_t0: float  # U/hr
    basal_t: float
    basal_mean: float
    slope0: float
    slope_t: float


def history_inputs(segment, config=MatchingConfig()):
    first = segment.first_valid
    times = segment.history_times[first:]
    cgm = segment.history_cgm[first:]
    observed = segment.history_observed[first:]
    t0, t = times[0], times[-1]
    events = segment.insulin_context
    doses = iobmod.decompose_events(events, (t0, t))
    units = np.zeros(max(times.size - 1, 0))
    for d in doses:
        k = int(np.floor((d.time - t0) / SLOT))
        if 0 <= k < units.size:
            units[k] += d.amount
    basal = np.array([_basal_rate_at(events, tk) for tk in times])
    obs_cgm = np.where(observed, cgm, np.nan)
    s0, _ = slope(times, obs_cgm, (t0, t0 + config.slope_window_head))
    st, _ = slope(times, obs_cgm, (t - config.slope_window_tail, t))
    return _HistoryInputs(times, cgm, observed, units, basal[0], basal[-1], basal.mean(), s0, st)


def _pass1_batch(inputs, P, paired=False):
    """Simulated states over the history, shape (S, J, n, 10).

    Every segment is run against every row of ``P``; with ``paired`` segment
    ``s`` is run against row ``s`` only and ``J`` is 1.
    """
    S = len(inputs)
    n = inputs[0].times.size
    if paired:
        J, Pt = 1, np.asarray(P)
        bw = Pt[:, hv._BW][:, None]  # (S, 1)
    else:
        J = P.shape[0]
        Pt = np.tile(P, (S, 1))
        bw = np.broadcast_to(P[:, hv._BW], (S, J))
    g0 = np.repeat([h.cgm[0] for h in inputs], J)
    s0 = np.repeat([h.slope0 for h in inputs], J)
    u0 = _to_mu_per_kg_min(np.array([h.basal_t0 for h in inputs])[:, None], bw).ravel()
    X0, _ = hv.steady_state_batch(g0, s0, u0, Pt)
    units = np.stack([h.slot_units for h in inputs])  # (S, n-1)
    u_I = (units[:, None, :] * 1000.0 / (bw[:, :, None] * SLOT)).reshape(S * J, n - 1)
    if n > 1:
        states = hv.simulate_batch(X0, Pt, u_I, stop_on_blowup=True)
    else:
        states = X0[:, None, :]
    return states.reshape(S, J, n, hv.N_STATES)


def _rmse(sim_cgm, inputs):
    obs = inputs.observed
    err = sim_cgm[..., obs] - inputs.cgm[obs]
    with np.errstate(invalid="ignore"):
        out = np.sqrt(np.mean(err ** 2, axis=-1))
    return np.where(np.isfinite(out), out, np.inf)


def match_twin(segment, population, config=MatchingConfig(), return_all=False):
    """Best twin id and its history RMSE; ties go to the lowest twin id."""
    h = history_inputs(segment, config)
    P = population.as_matrix()
    states = _pass1_batch([h], P)[0]
    eps = _rmse(hv.cgm_output(states, P[:, None, :]), h)
    if not np.isfinite(eps).any():
        raise MatchingFailure(f"all twins blew up on segment {segment.segment_id}")
    j = int(np.argmin(eps))
    out = (population.twin_ids[j], float(eps[j]))
    return out + (eps,) if return_all else out


def extract_history_states(segment, params, config=MatchingConfig(), inputs=None):
    """Pass 2: logged states of one twin over the unpadded history."""
    h = history_inputs(segment, config) if inputs is None else inputs
    P = params.as_array()[None] if isinstance(params, hv.TwinParameters) else np.atleast_2d(params)
    return _pass1_batch([h], P)[0, 0]


def _future_batch(inputs, P, final_states):
    """Pass 3 for paired (segment, parameter row) inputs, shape (S, 48, 10)."""
    P = np.asarray(P)
    bw = P[:, hv._BW]
    g = np.array([h.cgm[-1] for h in inputs])
    s = np.array([h.slope_t for h in inputs])
    u_t = _to_mu_per_kg_min(np.array([h.basal_t for h in inputs]), bw)
    x, _ = hv.steady_state_batch(g, s, u_t, P)
    x[:, hv.S1] = final_states[:, hv.S1]
    x[:, hv.S2] = final_states[:, hv.S2]
    x[:, hv.M1] = 0.0
    x[:, hv.M2] = 0.0
    u_bar = _to_mu_per_kg_min(np.array([h.basal_mean for h in inputs]), bw)
    return hv.simulate_batch(x, P, np.repeat(u_bar[:, None], H_FUT, axis=1))[:, 1:]


def extract_future_states(segment, params, pass2_final_state, config=MatchingConfig(),
                          inputs=None):
    """Pass 3: 48 future states under constant mean basal and no carbohydrate."""
    h = history_inputs(segment, config) if inputs is None else inputs
    P = params.as_array()[None] if isinstance(params, hv.TwinParameters) else np.atleast_2d(params)
    return _future_batch([h], P, np.asarray(pass2_final_state)[None])[0]


def _assemble(segment, twin_id, eps, hist_states, fut_states, params_row, h):
    X_hist = np.zeros((L_HIST, hv.N_STATES))
    X_hist[segment.first_valid:] = hist_states
    return MatchResult(
        twin_id=int(twin_id), rmse=float(eps), X_hist=X_hist, X_fut=fut_states,
        u_basal_mean=float(_to_mu_per_kg_min(h.basal_mean, params_row[hv._BW])),
        segment_id=segment.segment_id,
    )


def match_and_extract(segment, population, config=MatchingConfig()):
    twin_id, eps = match_twin(segment, population, config)
    h = history_inputs(segment, config)
    params_row = population[twin_id].as_array()[None]
    hist_states = extract_history_states(segment, params_row, config, h)
    fut_states = extract_future_states(segment, params_row, hist_states[-1], config, h)
    return _assemble(segment, twin_id, eps, hist_states, fut_states, params_row[0], h)


def match_segments(segments, population, config=MatchingConfig(), progress=None):
    """Match many segments, batching those with equal history length.

    Returns a list aligned with ``segments``; entries are :class:`MatchResult`
    or None where matching failed (QC criterion 6).
    """
    P = population.as_matrix()
    J = P.shape[0]
    per_chunk = max(1, config.chunk_rows // J)
    inputs = [history_inputs(s, config) for s in segments]
    groups = {}
    for i, h in enumerate(inputs):
        groups.setdefault(h.times.size, []).append(i)
    results = [None] * len(segments)
    done = 0
    for idx in groups.values():
        for c in range(0, len(idx), per_chunk):
            chunk = idx[c:c + per_chunk]
            chunk_inputs = [inputs[i] for i in chunk]
            states = _pass1_batch(chunk_inputs, P)
            winners = []
            for row, i in enumerate(chunk):
                eps = _rmse(hv.cgm_output(states[row], P[:, None, :]), inputs[i])
                if np.isfinite(eps).any():
                    j = int(np.argmin(eps))
                    winners.append((i, j, eps[j]))
            if winners:
                # pass 2 re-simulates each winner against its own segment only
                w_inputs = [inputs[i] for i, _, _ in winners]
                w_params = P[[j for _, j, _ in winners]]
                hist = _pass1_batch(w_inputs, w_params, paired=True)[:, 0]
                fut = _future_batch(w_inputs, w_params, hist[:, -1])
                for k, (i, j, e) in enumerate(winners):
                    results[i] = _assemble(segments[i], population.twin_ids[j], e, hist[k],
                                           fut[k], P[j], inputs[i])
            done += len(chunk)
            if progress:
                progress(done, len(segments))
    return results
