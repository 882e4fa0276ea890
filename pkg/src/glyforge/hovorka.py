"""Ten-state glucose-insulin twin with zero-order-hold discretization.

State order is ``Q1, Q2, S1, S2, I, X1, X2, X3, M1, M2``. Glucose masses are in
mmol/kg, subcutaneous insulin in mU/kg, plasma insulin in mU/L, remote insulin
actions in 1/min and the gut compartments hold grams of carbohydrate.

The nonlinear right-hand side is frozen at the current state, linearized
(bilinear glucose terms are split between the system matrix and the constant
vector so the affine model is exact at the freezing point), and advanced one
sampling period with the exponential of the 13x13 augmented matrix
``[[A, B, D, G], [0]]``.
"""

from dataclasses import astuple, dataclass, fields
from typing import NamedTuple

import numpy as np
from scipy.optimize import brentq

from .linalg import matrix_exp

T_S = 5.0
MGDL_PER_MMOLL = 18.0
N_STATES = 10
STATE_NAMES = ("Q1", "Q2", "S1", "S2", "I", "X1", "X2", "X3", "M1", "M2")
Q1, Q2, S1, S2, INS, X1, X2, X3, M1, M2 = range(N_STATES)

# euglycaemic anchor used to linearize non-insulin-dependent clearance
Q1_REF_MGDL = 97.2
RENAL_THRESHOLD = 9.0  # mmol/L
RENAL_RATE = 0.003  # 1/min
BLOWUP_MGDL = 1000.0


@dataclass(frozen=True)
class TwinParameters:
    """Physiological constants of one virtual patient."""

    f_c01: float  # mmol/kg/min
    V_G: float  # L/kg
    k_12: float  # 1/min
    a_G: float
    t_maxG: float  # min
    EGP_0: float  # mmol/kg/min
    t_maxI: float  # min
    k_e: float  # 1/min
    V_I: float  # L/kg
    k_a1: float
    k_a2: float
    k_a3: float
    S_F1: float  # (mU/L)^-1 min^-1
    S_F2: float
    S_F3: float
    BW: float  # kg

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or v <= 0:
                raise ValueError(f"parameter {f.name} must be finite and > 0, got {v}")
        if self.t_maxG < 1 or self.t_maxI < 1:
            raise ValueError("t_maxG and t_maxI must be at least 1 min")
        if not 20 <= self.BW <= 200:
            raise ValueError(f"BW must lie in [20, 200] kg, got {self.BW}")

    def as_array(self):
        return np.array(astuple(self), dtype=float)

    @classmethod
    def from_array(cls, values):
        return cls(*(float(v) for v in values))

    def replace(self, **changes):
        values = {f.name: getattr(self, f.name) for f in fields(self)}
        values.update(changes)
        return type(self)(**values)


PARAM_NAMES = tuple(f.name for f in fields(TwinParameters))
(_FC01, _VG, _K12, _AG, _TMAXG, _EGP0, _TMAXI, _KE, _VI,
 _KA1, _KA2, _KA3, _SF1, _SF2, _SF3, _BW) = range(len(PARAM_NAMES))

# Hovorka et al. (2004) population means
NOMINAL = TwinParameters(
    f_c01=0.0097, V_G=0.16, k_12=0.066, a_G=0.8, t_maxG=40.0, EGP_0=0.0161,
    t_maxI=55.0, k_e=0.138, V_I=0.12, k_a1=0.006, k_a2=0.06, k_a3=0.03,
    S_F1=51.2e-4, S_F2=8.2e-4, S_F3=520e-4, BW=70.0,
)


class ControlInput(NamedTuple):
    u_I: float = 0.0  # mU/kg/min
    u_G: float = 0.0  # g/min


class DerivedRates(NamedTuple):
    k_01: np.ndarray
    k_r: np.ndarray
    K: np.ndarray


class DiscretizedSystem(NamedTuple):
    A_d: np.ndarray
    B_d: np.ndarray
    D_d: np.ndarray
    G_d: np.ndarray
    T_s: float


def _param_matrix(params):
    if isinstance(params, TwinParameters):
        return params.as_array()[None, :]
    P = np.atleast_2d(np.asarray(params, dtype=float))
    if P.shape[-1] != len(PARAM_NAMES):
        raise ValueError(f"parameter arrays need {len(PARAM_NAMES)} columns")
    if not np.all(P > 0):
        raise ValueError("all parameters must be strictly positive")
    return P


def _state_matrix(state):
    X = np.atleast_2d(np.asarray(state, dtype=float))
    if X.shape[-1] != N_STATES:
        raise ValueError(f"state must have {N_STATES} entries, got {X.shape[-1]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("state has non-finite entries")
    return X


def derived_rates(params, state, k01=None):
    """Clearance rates and gut scaling for (batches of) params and states.

    ``k01`` overrides the linearized non-insulin clearance rate.
    """
    P = _param_matrix(params)
    X = _state_matrix(state)
    vg = P[:, _VG]
    if k01 is None:
        k01 = P[:, _FC01] / (Q1_REF_MGDL * vg / MGDL_PER_MMOLL)
    k01 = np.broadcast_to(np.asarray(k01, dtype=float), vg.shape)
    q1 = X[:, Q1]
    excess = q1 / vg - RENAL_THRESHOLD
    active = (excess > 0) & (q1 > 0)
    kr = np.zeros_like(q1)
    kr[active] = RENAL_RATE * excess[active] * vg[active] / q1[active]
    K = P[:, _AG] / (0.18 * P[:, _TMAXG] * P[:, _BW])
    return DerivedRates(k01, kr, K)


def _continuous_batch(P, X, k01=None):
    n = P.shape[0]
    k01, kr, K = derived_rates(P, X, k01)
    q1, q2, x1, x2 = X[:, Q1], X[:, Q2], X[:, X1], X[:, X2]
    tI, tG = P[:, _TMAXI], P[:, _TMAXG]
    egp = P[:, _EGP0]

    A = np.zeros((n, N_STATES, N_STATES))
    A[:, Q1, Q1] = -(x1 + k01 + kr)
    A[:, Q1, Q2] = P[:, _K12]
    A[:, Q1, X1] = -q1
    A[:, Q1, X3] = -egp
    A[:, Q1, M2] = K
    A[:, Q2, Q1] = x1
    A[:, Q2, Q2] = -(P[:, _K12] + x2)
    A[:, Q2, X1] = q1
    A[:, Q2, X2] = -q2
    A[:, S1, S1] = -1.0 / tI
    A[:, S2, S1] = 1.0 / tI
    A[:, S2, S2] = -1.0 / tI
    A[:, INS, S2] = 1.0 / (tI * P[:, _VI])
    A[:, INS, INS] = -P[:, _KE]
    for row, ka, sf in ((X1, _KA1, _SF1), (X2, _KA2, _SF2), (X3, _KA3, _SF3)):
        A[:, row, INS] = P[:, sf] * P[:, ka]
        A[:, row, row] = -P[:, ka]
    A[:, M1, M1] = -1.0 / tG
    A[:, M2, M1] = 1.0 / tG
    A[:, M2, M2] = -1.0 / tG

    B = np.zeros((n, N_STATES))
    B[:, S1] = 1.0
    D = np.zeros((n, N_STATES))
    D[:, Q1] = x1 * q1 + egp
    D[:, Q2] = -x1 * q1 + x2 * q2
    G = np.zeros((n, N_STATES))
    G[:, M1] = 1.0
    return A, B, D, G


def continuous_matrices(params, state, k01=None):
    """Continuous-time ``(A_p, B_p, D_p, G_p)`` frozen at ``state``."""
    A, B, D, G = _continuous_batch(_param_matrix(params), _state_matrix(state), k01)
    return A[0], B[0], D[0], G[0]


def _discretize_batch(A, B, D, G, T_s):
    if not T_s > 0:
        raise ValueError(f"sampling period must be positive, got {T_s}")
    n = A.shape[0]
    M = np.zeros((n, N_STATES + 3, N_STATES + 3))
    M[:, :N_STATES, :N_STATES] = A
    M[:, :N_STATES, N_STATES] = B
    M[:, :N_STATES, N_STATES + 1] = D
    M[:, :N_STATES, N_STATES + 2] = G
    E = matrix_exp(M * T_s)[:, :N_STATES, :]
    return E[:, :, :N_STATES], E[:, :, N_STATES], E[:, :, N_STATES + 1], E[:, :, N_STATES + 2]


def discretize(A_p, B_p, D_p, G_p, T_s=T_S):
    """Zero-order-hold discretization via the augmented matrix exponential."""
    A_d, B_d, D_d, G_d = _discretize_batch(
        np.asarray(A_p, float)[None], np.asarray(B_p, float)[None],
        np.asarray(D_p, float)[None], np.asarray(G_p, float)[None], T_s,
    )
    return DiscretizedSystem(A_d[0], B_d[0], D_d[0], G_d[0], T_s)


def step_batch(X, P, u_I, u_G, T_s=T_S, k01=None):
    """Advance a stack of states one period; rows are independent twins."""
    A, B, D, G = _continuous_batch(P, X, k01)
    A_d, B_d, D_d, G_d = _discretize_batch(A, B, D, G, T_s)
    nxt = (A_d @ X[:, :, None])[:, :, 0] + B_d * u_I[:, None] + D_d + G_d * u_G[:, None]
    nxt[:, [Q1, M1, M2]] = np.maximum(nxt[:, [Q1, M1, M2]], 0.0)
    return nxt


def step(state, params, control=ControlInput(), T_s=T_S, k01=None):
    """One 5-minute transition ``x' = A_d x + B_d u_I + D_d + G_d u_G``."""
    u_I, u_G = control
    if u_I < 0 or u_G < 0:
        raise ValueError("control inputs must be non-negative")
    X = _state_matrix(state)
    P = _param_matrix(params)
    return step_batch(X, P, np.array([float(u_I)]), np.array([float(u_G)]), T_s, k01)[0]


def simulate_batch(X0, P, u_I, u_G=None, T_s=T_S, k01=None, stop_on_blowup=False):
    """Simulate ``N`` twins for ``T`` steps.

    Parameters
    ----------
    X0 : (N, 10) initial states
    P : (N, 16) parameter rows in :data:`PARAM_NAMES` order
    u_I, u_G : (N, T) insulin (mU/kg/min) and carbohydrate (g/min) inputs

    Returns
    -------
    (N, T + 1, 10) state trajectories including the initial state. With
    ``stop_on_blowup`` a twin whose state turns non-finite or whose CGM exceeds
    1000 mg/dL is frozen at NaN from that step on.
    """
    X = _state_matrix(X0).copy()
    P = _param_matrix(P)
    u_I = np.atleast_2d(np.asarray(u_I, dtype=float))
    u_G = np.zeros_like(u_I) if u_G is None else np.atleast_2d(np.asarray(u_G, dtype=float))
    n, T = u_I.shape
    out = np.full((n, T + 1, N_STATES), np.nan)
    out[:, 0] = X
    alive = np.ones(n, dtype=bool)
    for k in range(T):
        if stop_on_blowup:
            idx = np.nonzero(alive)[0]
            if idx.size == 0:
                break
            nxt = step_batch(X[idx], P[idx], u_I[idx, k], u_G[idx, k], T_s, k01)
            ok = np.isfinite(nxt).all(axis=1) & (
                MGDL_PER_MMOLL * nxt[:, Q1] / P[idx, _VG] <= BLOWUP_MGDL)
            X[idx[ok]] = nxt[ok]
            out[idx[ok], k + 1] = nxt[ok]
            alive[idx[~ok]] = False
        else:
            X = step_batch(X, P, u_I[:, k], u_G[:, k], T_s, k01)
            out[:, k + 1] = X
    return out


def simulate(initial, params, u_insulin, u_carbs=None, T_s=T_S, k01=None):
    """Simulate one twin; returns ``(states, cgm)`` of length ``T + 1``."""
    u_I = np.asarray(u_insulin, dtype=float).ravel()
    if u_I.size == 0:
        raise ValueError("need at least one input step")
    u_G = None if u_carbs is None else np.asarray(u_carbs, dtype=float).ravel()[None]
    states = simulate_batch(_state_matrix(initial), _param_matrix(params), u_I[None], u_G,
                            T_s, k01)[0]
    return states, cgm_output(states, params)


def cgm_output(state, params):
    """Sensor glucose in mg/dL, ``18 * Q1 / V_G``."""
    state = np.asarray(state, dtype=float)
    vg = params.V_G if isinstance(params, TwinParameters) else np.asarray(params)[..., _VG]
    if np.any(np.asarray(vg) <= 0):
        raise ValueError("V_G must be positive")
    return MGDL_PER_MMOLL * state[..., Q1] / vg


def rhs(state, params, u_I=0.0, u_G=0.0, k01=None):
    """Nonlinear continuous-time derivative of the state."""
    X = _state_matrix(state)
    P = _param_matrix(params)
    A, B, D, G = _continuous_batch(P, X, k01)
    dx = (A @ X[:, :, None])[:, :, 0] + B * np.asarray(u_I)[..., None] + D \
        + G * np.asarray(u_G)[..., None]
    return dx[0] if np.ndim(state) == 1 else dx


def _q2_for_slope(P, X, dq1, k01):
    # solve the Q1 balance for the Q2 that yields dQ1/dt = dq1 with M2 = 0
    k01v, kr, _ = derived_rates(P, X, k01)
    return (dq1 + (X[:, X1] + k01v + kr) * X[:, Q1] - P[:, _EGP0] * (1.0 - X[:, X3])) / P[:, _K12]


def steady_state_batch(g, g_slope, u_basal, P, k01=None):
    """Vectorized :func:`steady_state_init`; returns ``(states, q2_clamped)``."""
    P = _param_matrix(P)
    g = np.broadcast_to(np.asarray(g, dtype=float), P.shape[:1])
    g_slope = np.broadcast_to(np.asarray(g_slope, dtype=float), P.shape[:1])
    u = np.broadcast_to(np.asarray(u_basal, dtype=float), P.shape[:1])
    if np.any(u < 0):
        raise ValueError("basal rate must be non-negative")
    X = np.zeros((P.shape[0], N_STATES))
    vg = P[:, _VG]
    X[:, Q1] = g * vg / MGDL_PER_MMOLL
    X[:, S1] = u * P[:, _TMAXI]
    X[:, S2] = X[:, S1]
    X[:, INS] = X[:, S2] / (P[:, _TMAXI] * P[:, _VI] * P[:, _KE])
    X[:, X1] = P[:, _SF1] * X[:, INS]
    X[:, X2] = P[:, _SF2] * X[:, INS]
    X[:, X3] = P[:, _SF3] * X[:, INS]
    q2 = _q2_for_slope(P, X, g_slope * vg / MGDL_PER_MMOLL, k01)
    clamped = q2 < 0
    X[:, Q2] = np.where(clamped, 0.0, q2)
    return X, clamped


def steady_state_init(g, g_slope, u_basal, params, k01=None, full_output=False):
    """Closed-form initial state anchored to a CGM value and slope.

    Q1 reproduces ``g`` exactly; the insulin chain and remote actions sit at
    equilibrium under ``u_basal`` (mU/kg/min); gut compartments are empty and
    Q2 is solved so that dQ1/dt equals ``g_slope`` (mg/dL/min). Q2 itself is
    generally not stationary. If the required Q2 is negative it is clamped to 0
    and, with ``full_output``, the returned flag is True.
    """
    if not 40 <= g <= 400:
        raise ValueError(f"anchor glucose must lie in [40, 400] mg/dL, got {g}")
    X, clamped = steady_state_batch(g, g_slope, u_basal, params, k01)
    return (X[0], bool(clamped[0])) if full_output else X[0]


def equilibrium_basal(g, params, k01=None):
    """Basal rate (mU/kg/min) at which glucose ``g`` is a true equilibrium.

    Raises ``ValueError`` when even zero insulin cannot hold glucose that high.
    """
    P = _param_matrix(params)

    def q2_residual(u):
        x, _ = steady_state_batch(g, 0.0, u, P, k01)
        q2 = _q2_for_slope(P, x, 0.0, k01)[0]
        return x[0, X1] * x[0, Q1] - (P[0, _K12] + x[0, X2]) * q2

    if q2_residual(0.0) <= 0:
        raise ValueError(f"no non-negative basal rate holds glucose at {g} mg/dL")
    hi = 0.01
    while q2_residual(hi) > 0:
        hi *= 2.0
        if hi > 100:
            raise ValueError("failed to bracket the equilibrium basal rate")
    return brentq(q2_residual, 0.0, hi, xtol=1e-15, rtol=1e-14)
