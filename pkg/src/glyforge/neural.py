"""Numpy LSTM encoder-decoder with exact backpropagation through time.

Gate order in every weight matrix is input, forget, cell, output: rows
``[0:d]``, ``[d:2d]``, ``[2d:3d]``, ``[3d:4d]`` of ``W`` (shape
``4d x (n_in + d)``, acting on ``[x, h]``) and ``b``. The forget-gate bias
starts at 1. All arithmetic is float64.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .segments import unscale_cgm

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = "glyforge-seq2seq/1"
ADAM_EPS = 1e-8
# gradient check denominators are floored here: below it, central-difference
# round-off (about eps * loss / h) dominates the comparison
GRAD_CHECK_FLOOR = 1e-6


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


# --------------------------------------------------------------------- cells

@dataclass
class LstmCellParams:
    W: np.ndarray
    b: np.ndarray

    @property
    def d(self):
        return self.b.size // 4

    @property
    def input_dim(self):
        return self.W.shape[1] - self.d

    @classmethod
    def init(cls, input_dim, d, rng):
        bound = 1.0 / math.sqrt(input_dim + d)
        W = rng.uniform(-bound, bound, size=(4 * d, input_dim + d))
        b = rng.uniform(-bound, bound, size=4 * d)
        b[d:2 * d] = 1.0
        return cls(W, b)


def lstm_cell(x, h, c, W, b):
    """One LSTM step; ``x``, ``h``, ``c`` may carry a leading batch axis."""
    d = h.shape[-1]
    z = np.concatenate([x, h], axis=-1) @ W.T + b
    i = sigmoid(z[..., :d])
    f = sigmoid(z[..., d:2 * d])
    g = np.tanh(z[..., 2 * d:3 * d])
    o = sigmoid(z[..., 3 * d:])
    c_new = f * c + i * g
    return o * np.tanh(c_new), c_new


def lstm_forward(W, b, X, h0, c0):
    """Run a cell over ``X`` of shape (B, T, n). Returns (hidden (B, T, d), h, c, cache)."""
    B, T, _ = X.shape
    d = h0.shape[-1]
    Wx, Wh = W[:, :X.shape[2]], W[:, X.shape[2]:]
    zx = X @ Wx.T + b  # input contributions for all steps at once
    hs = np.empty((B, T, d))
    gates = np.empty((T, B, 4 * d))
    cs = np.empty((T + 1, B, d))
    tcs = np.empty((T, B, d))
    h, c = h0, c0
    cs[0] = c0
    hprev = np.empty((T, B, d))
    for t in range(T):
        hprev[t] = h
        z = zx[:, t] + h @ Wh.T
        a = gates[t]
        a[:, :2 * d] = sigmoid(z[:, :2 * d])
        a[:, 2 * d:3 * d] = np.tanh(z[:, 2 * d:3 * d])
        a[:, 3 * d:] = sigmoid(z[:, 3 * d:])
        c = a[:, d:2 * d] * c + a[:, :d] * a[:, 2 * d:3 * d]
        tc = np.tanh(c)
        h = a[:, 3 * d:] * tc
        cs[t + 1] = c
        tcs[t] = tc
        hs[:, t] = h
    return hs, h, c, (X, hprev, gates, cs, tcs)


def lstm_backward(W, cache, dH, dh_T, dc_T):
    """Gradients of a cell run given upstream ``dH`` (B, T, d) and terminal grads.

    Returns ``(dW, db, dX, dh0, dc0)``; ``dH`` may be None.
    """
    X, hprev, gates, cs, tcs = cache
    T, B, d4 = gates.shape
    d = d4 // 4
    n = X.shape[2]
    Wh = W[:, n:]
    dZ = np.empty((T, B, d4))
    dh, dc = dh_T.copy(), dc_T.copy()
    for t in range(T - 1, -1, -1):
        if dH is not None:
            dh = dh + dH[:, t]
        a = gates[t]
        i, f, g, o = a[:, :d], a[:, d:2 * d], a[:, 2 * d:3 * d], a[:, 3 * d:]
        tc = tcs[t]
        dc = dc + dh * o * (1.0 - tc * tc)
        dz = dZ[t]
        dz[:, :d] = dc * g * i * (1.0 - i)
        dz[:, d:2 * d] = dc * cs[t] * f * (1.0 - f)
        dz[:, 2 * d:3 * d] = dc * i * (1.0 - g * g)
        dz[:, 3 * d:] = dh * tc * o * (1.0 - o)
        dc = dc * f
        dh = dz @ Wh
    dZf = dZ.reshape(T * B, d4)
    Xf = X.transpose(1, 0, 2).reshape(T * B, n)
    dW = np.empty_like(W)
    dW[:, :n] = dZf.T @ Xf
    dW[:, n:] = dZf.T @ hprev.reshape(T * B, d)
    db = dZf.sum(axis=0)
    dX = (dZf @ W[:, :n]).reshape(T, B, n).transpose(1, 0, 2)
    return dW, db, dX, dh, dc


# ------------------------------------------------------------------- seq2seq

@dataclass(frozen=True)
class ModelSpec:
    """Shape of an encoder-decoder; ``name`` labels the feature variant."""

    encoder_dim: int = 12
    decoder_dim: int = 11
    hidden: int = 64
    name: str = "full"


@dataclass
class Seq2SeqParams:
    encoder: LstmCellParams
    decoder: LstmCellParams
    W_out: np.ndarray  # (1, d)
    b_out: float

    GROUPS = ("enc_W", "enc_b", "dec_W", "dec_b", "out_W", "out_b")

    @classmethod
    def init(cls, spec, seed):
        rng = np.random.Generator(np.random.PCG64(seed))
        enc = LstmCellParams.init(spec.encoder_dim, spec.hidden, rng)
        dec = LstmCellParams.init(spec.decoder_dim, spec.hidden, rng)
        bound = 1.0 / math.sqrt(spec.hidden)
        W_out = rng.uniform(-bound, bound, size=(1, spec.hidden))
        b_out = float(rng.uniform(-bound, bound))
        return cls(enc, dec, W_out, b_out)

    def to_dict(self):
        return {"enc_W": self.encoder.W, "enc_b": self.encoder.b,
                "dec_W": self.decoder.W, "dec_b": self.decoder.b,
                "out_W": self.W_out, "out_b": np.array([self.b_out])}

    @classmethod
    def from_dict(cls, g):
        return cls(LstmCellParams(g["enc_W"], g["enc_b"]), LstmCellParams(g["dec_W"], g["dec_b"]),
                   g["out_W"], float(g["out_b"][0]))

    def copy(self):
        return Seq2SeqParams.from_dict({k: np.array(v, copy=True) for k, v in self.to_dict().items()})


def _batched(a):
    a = np.asarray(a, dtype=float)
    return (a[None], True) if a.ndim == 2 else (a, False)


def forward(params, encoder_tensor, decoder_tensor, dropout_rng=None, p=0.2):
    """Scaled predictions for one window (L, n_enc)/(H, n_dec) or a batch.

    The decoder starts from the encoder's terminal (h, c); nothing it emits is
    fed back. Dropout with independent per-timestep masks hits the decoder
    hidden sequence only when ``dropout_rng`` is given.
    """
    enc, single = _batched(encoder_tensor)
    dec, _ = _batched(decoder_tensor)
    B = enc.shape[0]
    d = params.encoder.d
    zeros = np.zeros((B, d))
    _, h, c, enc_cache = lstm_forward(params.encoder.W, params.encoder.b, enc, zeros, zeros)
    O, _, _, dec_cache = lstm_forward(params.decoder.W, params.decoder.b, dec, h, c)
    if dropout_rng is not None and p > 0:
        mask = (dropout_rng.random(O.shape) >= p) / (1.0 - p)
        Od = O * mask
    else:
        mask, Od = None, O
    y = Od @ params.W_out[0] + params.b_out
    cache = {"enc": enc_cache, "dec": dec_cache, "Od": Od, "mask": mask, "single": single}
    return (y[0] if single else y), cache


def backward(params, cache, loss_grad):
    """Exact gradients of a scalar loss given ``dloss / dy`` with the shape of ``y``."""
    dy = np.asarray(loss_grad, dtype=float)
    if cache["single"]:
        dy = dy[None]
    Od = cache["Od"]
    grads = {"out_W": (dy[..., None] * Od).sum(axis=(0, 1))[None, :],
             "out_b": np.array([dy.sum()])}
    dO = dy[..., None] * params.W_out[0]
    if cache["mask"] is not None:
        dO = dO * cache["mask"]
    B, _, d = Od.shape
    z = np.zeros((B, d))
    dW, db, _, dh, dc = lstm_backward(params.decoder.W, cache["dec"], dO, z, z)
    grads["dec_W"], grads["dec_b"] = dW, db
    dW, db, _, _, _ = lstm_backward(params.encoder.W, cache["enc"], None, dh, dc)
    grads["enc_W"], grads["enc_b"] = dW, db
    return grads


def huber_loss(y_hat, y, delta=1.0):
    """Mean Huber loss over every element and its gradient w.r.t. ``y_hat``."""
    r = np.asarray(y_hat, dtype=float) - np.asarray(y, dtype=float)
    a = np.abs(r)
    quad = a <= delta
    loss = np.where(quad, 0.5 * r * r, delta * (a - 0.5 * delta))
    grad = np.where(quad, r, delta * np.sign(r)) / r.size
    return float(loss.mean()), grad


# ---------------------------------------------------------------------- adam

@dataclass
class AdamState:
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def zeros_like(cls, groups):
        return cls({k: np.zeros_like(a) for k, a in groups.items()},
                   {k: np.zeros_like(a) for k, a in groups.items()})


def adam_step(groups, grads, state, lr, beta1=0.9, beta2=0.999):
    """In-place bias-corrected Adam update of the arrays in ``groups``."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for k, p in groups.items():
        g = grads[k]
        m = state.m[k]
        v = state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + ADAM_EPS)
    return groups


# ------------------------------------------------------------------ training

@dataclass(frozen=True)
class TrainingConfig:
    lr0: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    batch: int = 64
    max_epochs: int = 100
    patience: int = 15
    lr_factor: float = 0.5
    lr_patience: int = 5
    lr_min: float = 1e-5
    dropout_p: float = 0.2
    huber_delta: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for k, v in asdict(self).items():
            if k not in ("seed", "dropout_p") and not v > 0:
                raise ValueError(f"{k} must be positive")
        if not 0 <= self.dropout_p < 1:
            raise ValueError("dropout_p must lie in [0, 1)")
        if self.patience < self.lr_patience:
            raise ValueError("patience must be at least lr_patience")


class NonFiniteLoss(ArithmeticError):
    """Training diverged; ``checkpoint`` holds the last finite parameters."""

    def __init__(self, message, checkpoint=None, log=None):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.log = log


@dataclass
class Standardizer:
    """Per-column affine input normalization fitted on training tensors."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X):
        X = np.asarray(X, dtype=float).reshape(-1, X.shape[-1])
        mean = X.mean(axis=0)
        std = X.std(axis=0)
        std = np.where(std > 1e-12, std, 1.0)
        return cls(mean, std)

    @classmethod
    def identity(cls, n):
        return cls(np.zeros(n), np.ones(n))

    def __call__(self, X):
        return (np.asarray(X, dtype=float) - self.mean) / self.std


@dataclass
class Seq2SeqModel:
    spec: ModelSpec
    params: Seq2SeqParams
    enc_norm: Standardizer
    dec_norm: Standardizer
    meta: dict = field(default_factory=dict)

    @classmethod
    def create(cls, spec, seed, enc_norm=None, dec_norm=None):
        return cls(spec, Seq2SeqParams.init(spec, seed),
                   enc_norm or Standardizer.identity(spec.encoder_dim),
                   dec_norm or Standardizer.identity(spec.decoder_dim))

    def predict_scaled(self, encoder_tensor, decoder_tensor):
        y, _ = forward(self.params, self.enc_norm(encoder_tensor), self.dec_norm(decoder_tensor))
        return y

    def predict_mgdl(self, encoder_tensor, decoder_tensor):
        return unscale_cgm(self.predict_scaled(encoder_tensor, decoder_tensor))


def predict_mgdl(model, encoder_tensor, decoder_tensor):
    """Forecast in mg/dL; values are not clamped to the sensor range."""
    return model.predict_mgdl(encoder_tensor, decoder_tensor)


def _batches(n, batch, rng):
    order = rng.permutation(n)
    return [order[i:i + batch] for i in range(0, n, batch)]


def _eval_loss(params, enc, dec, y, delta, batch=512):
    total = 0.0
    for i in range(0, len(y), batch):
        yh, _ = forward(params, enc[i:i + batch], dec[i:i + batch])
        loss, _ = huber_loss(yh, y[i:i + batch], delta)
        total += loss * y[i:i + batch].size
    return total / y.size


def fit_loop(groups, loss_and_grad, eval_loss, n_train, config, progress=None):
    """Generic mini-batch Adam loop with plateau LR and early stopping.

    ``loss_and_grad(idx, rng)`` returns the batch loss and a gradient dict;
    ``eval_loss()`` the validation loss. ``groups`` is updated in place and
    left holding the best-validation parameters. Returns the training log.
    """
    state = AdamState.zeros_like(groups)
    lr = config.lr0
    best = np.inf
    best_epoch = 0
    best_groups = {k: v.copy() for k, v in groups.items()}
    since_best = since_lr = 0
    plateau_best = np.inf
    history = []
    seeds = np.random.SeedSequence(config.seed)
    for epoch in range(1, config.max_epochs + 1):
        rng = np.random.Generator(np.random.PCG64(seeds.spawn(1)[0]))
        total, count = 0.0, 0
        for idx in _batches(n_train, config.batch, rng):
            loss, grads = loss_and_grad(idx, rng)
            if not np.isfinite(loss) or not all(np.isfinite(g).all() for g in grads.values()):
                for k in groups:
                    groups[k][...] = best_groups[k]
                raise NonFiniteLoss(f"non-finite loss in epoch {epoch}", best_groups, history)
            adam_step(groups, grads, state, lr, config.beta1, config.beta2)
            total += loss * len(idx)
            count += len(idx)
        train_loss = total / count
        val_loss = eval_loss()
        if not np.isfinite(val_loss):
            for k in groups:
                groups[k][...] = best_groups[k]
            raise NonFiniteLoss(f"non-finite validation loss in epoch {epoch}", best_groups, history)
        history.append({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss, "lr": lr})
        if progress:
            progress(history[-1])
        if val_loss < best:
            best, best_epoch = val_loss, epoch
            best_groups = {k: v.copy() for k, v in groups.items()}
            since_best = 0
        else:
            since_best += 1
        if val_loss < plateau_best:
            plateau_best, since_lr = val_loss, 0
        else:
            since_lr += 1
            if since_lr >= config.lr_patience:
                lr = max(lr * config.lr_factor, config.lr_min)
                since_lr = 0
        if since_best >= config.patience:
            break
    for k in groups:
        groups[k][...] = best_groups[k]
    log.info("best validation loss %.6g at epoch %d", best, best_epoch)
    return history


def train(spec, train_set, val_set, config=TrainingConfig(), progress=None, standardize=True):
    """Fit a :class:`Seq2SeqModel`.

    ``train_set`` / ``val_set`` are ``(encoder (N, L, n_enc), decoder (N, H, n_dec),
    target (N, H))`` in scaled units. Returns ``(model, log)``.
    """
    enc, dec, y = (np.asarray(a, dtype=float) for a in train_set)
    venc, vdec, vy = (np.asarray(a, dtype=float) for a in val_set)
    if enc.shape[2] != spec.encoder_dim or dec.shape[2] != spec.decoder_dim:
        raise ValueError("tensor widths do not match the model spec")
    if standardize:
        enc_norm, dec_norm = Standardizer.fit(enc), Standardizer.fit(dec)
    else:
        enc_norm, dec_norm = Standardizer.identity(spec.encoder_dim), Standardizer.identity(spec.decoder_dim)
    model = Seq2SeqModel.create(spec, config.seed, enc_norm, dec_norm)
    enc, dec = enc_norm(enc), dec_norm(dec)
    venc, vdec = enc_norm(venc), dec_norm(vdec)
    groups = model.params.to_dict()

    def loss_and_grad(idx, rng):
        params = Seq2SeqParams.from_dict(groups)
        yh, cache = forward(params, enc[idx], dec[idx], rng, config.dropout_p)
        loss, g = huber_loss(yh, y[idx], config.huber_delta)
        return loss, backward(params, cache, g)

    def eval_loss():
        return _eval_loss(Seq2SeqParams.from_dict(groups), venc, vdec, vy, config.huber_delta)

    try:
        history = fit_loop(groups, loss_and_grad, eval_loss, len(y), config, progress)
    finally:
        model.params = Seq2SeqParams.from_dict(groups)
    model.meta = {"config": asdict(config), "epochs": len(history)}
    return model, history


# -------------------------------------------------------------- checkpoints

def save_checkpoint(model, path):
    with open(path, "w") as fh:
        fh.write(f"# {CHECKPOINT_VERSION}\n")
        fh.write("spec " + json.dumps(asdict(model.spec), sort_keys=True) + "\n")
        fh.write("meta " + json.dumps(model.meta, sort_keys=True) + "\n")
        sections = dict(model.params.to_dict())
        sections.update(enc_mean=model.enc_norm.mean, enc_std=model.enc_norm.std,
                        dec_mean=model.dec_norm.mean, dec_std=model.dec_norm.std)
        for name, arr in sections.items():
            arr = np.asarray(arr, dtype=float)
            fh.write(f"[{name}] " + " ".join(map(str, arr.shape)) + "\n")
            fh.write("\n".join(format(v, ".17g") for v in arr.ravel()) + "\n")


def load_checkpoint(path):
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != f"# {CHECKPOINT_VERSION}":
        raise ValueError(f"{path}:1: not a {CHECKPOINT_VERSION} checkpoint")
    spec = ModelSpec(**json.loads(lines[1].split(" ", 1)[1]))
    meta = json.loads(lines[2].split(" ", 1)[1])
    sections = {}
    i = 3
    while i < len(lines):
        head = lines[i]
        if not head.startswith("["):
            raise ValueError(f"{path}:{i + 1}: expected a section header")
        name, _, dims = head[1:].partition("] ")
        shape = tuple(int(s) for s in dims.split())
        n = int(np.prod(shape)) if shape else 1
        sections[name] = np.array([float(v) for v in lines[i + 1:i + 1 + n]]).reshape(shape)
        i += 1 + n
    params = Seq2SeqParams.from_dict(sections)
    return Seq2SeqModel(spec, params, Standardizer(sections["enc_mean"], sections["enc_std"]),
                        Standardizer(sections["dec_mean"], sections["dec_std"]), meta)


def write_training_log(path, history):
    with open(path, "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# ---------------------------------------------------------- gradient check

def gradient_check(params, enc, dec, y, h=1e-5, delta=1.0, dropout_seed=None, p=0.2,
                   floor=GRAD_CHECK_FLOOR):
    """Max relative error between backprop and central differences per group.

    With ``dropout_seed`` a fixed mask is replayed in every evaluation.
    """
    def loss_of(pr):
        rng = None if dropout_seed is None else np.random.default_rng(dropout_seed)
        yh, cache = forward(pr, enc, dec, rng, p)
        return huber_loss(yh, y, delta)[0], cache, yh

    loss, cache, yh = loss_of(params)
    _, g = huber_loss(yh, y, delta)
    analytic = backward(params, cache, g)
    groups = params.to_dict()
    errors = {}
    for name, arr in groups.items():
        num = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            lp = loss_of(Seq2SeqParams.from_dict(groups))[0]
            flat[k] = orig - h
            lm = loss_of(Seq2SeqParams.from_dict(groups))[0]
            flat[k] = orig
            num.reshape(-1)[k] = (lp - lm) / (2 * h)
        a = analytic[name]
        scale = np.maximum(np.abs(a) + np.abs(num), floor)
        errors[name] = float(np.max(np.abs(a - num) / scale))
    return errors

