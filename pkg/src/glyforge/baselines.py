"""Comparison forecasters behind one contract: 48 mg/dL values per segment.

* :func:`naive_forecast` repeats the last reading;
* :func:`digital_twin_forecast` reads CGM off the matched twin's basal-only
  future states;
* the recursive LSTM predicts one step ahead and is rolled out by appending
  its own predictions to the input window;
* :func:`seq2seq_variant` describes the encoder-decoder feature ablations.
"""

import json
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import hovorka as hv
from . import neural as nn
from .segments import H_FUT, L_HIST, scale_cgm, unscale_cgm

MODEL_NAMES = ("naive", "digital_twin", "recursive_lstm", "seq2seq_minus_ode", "physio_seq2seq")
RECURSIVE_VERSION = "glyforge-recursive/1"


class ForecastFailure(RuntimeError):
    """A forecaster could not produce 48 finite values for a segment."""


def _checked(values, name):
    values = np.asarray(values, dtype=float)
    if values.shape != (H_FUT,) or not np.all(np.isfinite(values)):
        raise ForecastFailure(f"{name} produced an invalid forecast")
    return values


def naive_forecast(segment):
    return np.full(H_FUT, segment.last_cgm)


def digital_twin_forecast(segment, match_result, params):
    """CGM of the matched twin's 48 future states."""
    p = params.as_array() if isinstance(params, hv.TwinParameters) else np.asarray(params)
    return _checked(hv.cgm_output(match_result.X_fut, p), "digital_twin")


# --------------------------------------------------------- seq2seq variants

# column selections into the full (37, 12) encoder and (48, 11) decoder
_VARIANT_COLUMNS = {
    "full": (list(range(12)), list(range(11))),
    "minus_ode": ([0, 1], [0]),
    "minus_iob": ([0] + list(range(2, 12)), list(range(1, 11))),
}


@dataclass(frozen=True)
class VariantSpec:
    feature_mask: str
    model: nn.ModelSpec
    encoder_columns: tuple
    decoder_columns: tuple

    def select(self, enc, dec):
        """Restrict full-width tensors (single or batched) to this variant."""
        enc = np.asarray(enc)
        dec = np.asarray(dec)
        return enc[..., list(self.encoder_columns)], dec[..., list(self.decoder_columns)]


def seq2seq_variant(feature_mask, hidden=64):
    """Encoder-decoder layout for ``full``, ``minus_ode`` or ``minus_iob``."""
    if feature_mask not in _VARIANT_COLUMNS:
        raise ValueError(f"unknown feature mask {feature_mask!r}")
    enc_cols, dec_cols = _VARIANT_COLUMNS[feature_mask]
    spec = nn.ModelSpec(len(enc_cols), len(dec_cols), hidden, feature_mask)
    return VariantSpec(feature_mask, spec, tuple(enc_cols), tuple(dec_cols))


# ----------------------------------------------------------- recursive LSTM

@dataclass(frozen=True)
class RecursiveConfig:
    hidden: int = 300
    max_train_segments: int = 0  # 0 keeps every training segment
    training: nn.TrainingConfig = nn.TrainingConfig(dropout_p=0.0)


@dataclass
class RecursiveModel:
    W: np.ndarray  # (4d, 2 + d)
    b: np.ndarray
    w_out: np.ndarray  # (d,)
    b_out: float
    meta: dict = None

    @property
    def d(self):
        return self.b.size // 4

    @classmethod
    def init(cls, hidden, seed):
        rng = np.random.Generator(np.random.PCG64(seed))
        cell = nn.LstmCellParams.init(2, hidden, rng)
        bound = 1.0 / math.sqrt(hidden)
        return cls(cell.W, cell.b, rng.uniform(-bound, bound, size=hidden),
                   float(rng.uniform(-bound, bound)), {})

    def groups(self):
        return {"W": self.W, "b": self.b, "w_out": self.w_out, "b_out": np.array([self.b_out])}

    @classmethod
    def from_groups(cls, g, meta=None):
        return cls(g["W"], g["b"], g["w_out"], float(g["b_out"][0]), meta or {})


def recursive_sequences(segments):
    """Teacher-forced inputs ``(N, 84, 2)``, targets ``(N, 84)`` and loss mask.

    Input row ``k`` is ``[scaled CGM, IOB]`` at slot ``k`` of the 85-slot
    history + future window; the target is the scaled CGM at slot ``k + 1``.
    """
    n = len(segments)
    T = L_HIST + H_FUT
    g = np.zeros((n, T))
    iob = np.zeros((n, T))
    valid = np.zeros((n, T), dtype=bool)
    for i, s in enumerate(segments):
        m = s.history_mask
        g[i, :L_HIST][m] = scale_cgm(s.history_cgm[m])
        g[i, L_HIST:] = scale_cgm(s.future_cgm)
        iob[i, :L_HIST] = np.where(m, s.iob_hist, 0.0)
        iob[i, L_HIST:] = s.iob_fut
        valid[i, :L_HIST] = m
        valid[i, L_HIST:] = True
    X = np.stack([g[:, :-1], iob[:, :-1]], axis=-1)
    return X, g[:, 1:], valid[:, :-1] & valid[:, 1:]


def _masked_huber(yh, y, mask, delta):
    r = np.where(mask, yh - y, 0.0)
    a = np.abs(r)
    quad = a <= delta
    n = max(int(mask.sum()), 1)
    loss = np.where(quad, 0.5 * r * r, delta * (a - 0.5 * delta)).sum() / n
    grad = np.where(quad, r, delta * np.sign(r)) / n
    return float(loss), grad


def _recursive_loss(groups, X, y, mask, delta, with_grad=True):
    d = groups["b"].size // 4
    z = np.zeros((X.shape[0], d))
    hs, _, _, cache = nn.lstm_forward(groups["W"], groups["b"], X, z, z)
    yh = hs @ groups["w_out"] + groups["b_out"][0]
    loss, g = _masked_huber(yh, y, mask, delta)
    if not with_grad:
        return loss, None
    dW, db, _, _, _ = nn.lstm_backward(groups["W"], cache, g[..., None] * groups["w_out"], z, z)
    grads = {"W": dW, "b": db, "w_out": np.einsum("bt,btd->d", g, hs), "b_out": np.array([g.sum()])}
    return loss, grads


def train_recursive(train_segments, val_segments, config=RecursiveConfig(), progress=None):
    """One-step-ahead LSTM trained with teacher forcing. Returns ``(model, log)``."""
    tc = config.training
    train_segments = list(train_segments)
    if config.max_train_segments and len(train_segments) > config.max_train_segments:
        rng = np.random.Generator(np.random.PCG64(tc.seed))
        keep = np.sort(rng.choice(len(train_segments), config.max_train_segments, replace=False))
        train_segments = [train_segments[i] for i in keep]
    X, y, mask = recursive_sequences(train_segments)
    vX, vy, vmask = recursive_sequences(val_segments)
    model = RecursiveModel.init(config.hidden, tc.seed)
    groups = model.groups()

    def loss_and_grad(idx, rng):
        return _recursive_loss(groups, X[idx], y[idx], mask[idx], tc.huber_delta)

    def eval_loss(batch=256):
        total, count = 0.0, 0
        for i in range(0, len(vy), batch):
            m = vmask[i:i + batch]
            loss, _ = _recursive_loss(groups, vX[i:i + batch], vy[i:i + batch], m,
                                      tc.huber_delta, with_grad=False)
            total += loss * m.sum()
            count += m.sum()
        return total / max(count, 1)

    history = nn.fit_loop(groups, loss_and_grad, eval_loss, len(y), tc, progress)
    meta = {"hidden": config.hidden, "training": asdict(tc), "epochs": len(history),
            "train_segments": len(train_segments)}
    return RecursiveModel.from_groups(groups, meta), history


def predict_recursive_scaled(model, hist_scaled, iob_hist, iob_fut, feedback=None):
    """Roll the one-step model out 48 steps; batched over leading axes.

    Each prediction is appended to the input window with the IOB of its slot
    before the next step. ``feedback(step, values)`` may rewrite the value
    appended after ``step`` (1-based); it exists to probe the feedback path.
    """
    hist_scaled = np.atleast_2d(hist_scaled)
    iob_hist = np.atleast_2d(iob_hist)
    iob_fut = np.atleast_2d(iob_fut)
    B = hist_scaled.shape[0]
    d = model.d
    z = np.zeros((B, d))
    X = np.stack([hist_scaled, iob_hist], axis=-1)
    _, h, c, _ = nn.lstm_forward(model.W, model.b, X, z, z)
    out = np.empty((B, H_FUT))
    for i in range(H_FUT):
        out[:, i] = h @ model.w_out + model.b_out
        if i == H_FUT - 1:
            break
        fed = out[:, i] if feedback is None else np.asarray(feedback(i + 1, out[:, i].copy()))
        x = np.stack([fed, iob_fut[:, i]], axis=-1)
        h, c = nn.lstm_cell(x, h, c, model.W, model.b)
    return out


def recursive_inputs(segments):
    hist = np.zeros((len(segments), L_HIST))
    iob_h = np.zeros((len(segments), L_HIST))
    iob_f = np.zeros((len(segments), H_FUT))
    for i, s in enumerate(segments):
        m = s.history_mask
        hist[i, m] = scale_cgm(s.history_cgm[m])
        iob_h[i] = np.where(m, s.iob_hist, 0.0)
        iob_f[i] = s.iob_fut
    return hist, iob_h, iob_f


def predict_recursive(model, segments, feedback=None):
    """mg/dL forecasts ``(N, 48)`` for a list of segments."""
    return unscale_cgm(predict_recursive_scaled(model, *recursive_inputs(segments), feedback))


def save_recursive(model, path):
    with open(path, "w") as fh:
        fh.write(f"# {RECURSIVE_VERSION}\n")
        fh.write("meta " + json.dumps(model.meta or {}, sort_keys=True) + "\n")
        for name, arr in model.groups().items():
            arr = np.asarray(arr, dtype=float)
            fh.write(f"[{name}] " + " ".join(map(str, arr.shape)) + "\n")
            fh.write("\n".join(format(v, ".17g") for v in arr.ravel()) + "\n")


def load_recursive(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != f"# {RECURSIVE_VERSION}":
        raise ValueError(f"{path}:1: not a {RECURSIVE_VERSION} checkpoint")
    meta = json.loads(lines[1].split(" ", 1)[1])
    groups, i = {}, 2
    while i < len(lines):
        name, _, dims = lines[i][1:].partition("] ")
        shape = tuple(int(s) for s in dims.split())
        n = int(np.prod(shape))
        groups[name] = np.array([float(v) for v in lines[i + 1:i + 1 + n]]).reshape(shape)
        i += 1 + n
    return RecursiveModel.from_groups(groups, meta)
