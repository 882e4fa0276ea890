import numpy as np
import pytest

from glyforge import neural as nn


def small_problem(seed, d=4, L=5, H=6, n_enc=3, n_dec=2, B=3):
    rng = np.random.default_rng(seed)
    spec = nn.ModelSpec(n_enc, n_dec, d, "tiny")
    params = nn.Seq2SeqParams.init(spec, seed)
    return (spec, params, rng.normal(size=(B, L, n_enc)), rng.normal(size=(B, H, n_dec)),
            rng.uniform(-1, 1, size=(B, H)))


def test_sigmoid_extremes():
    z = np.array([-800.0, -30.0, 0.0, 30.0, 800.0])
    with np.errstate(all="raise"):
        s = nn.sigmoid(z)
    assert s[0] == 0.0 and s[2] == 0.5 and s[-1] == 1.0
    assert np.allclose(s[1:4], 1 / (1 + np.exp(-z[1:4])))


def test_cell_gate_order():
    rng = np.random.default_rng(0)
    d, n = 3, 2
    W = rng.normal(size=(4 * d, n + d))
    b = rng.normal(size=4 * d)
    x, h, c = rng.normal(size=n), rng.normal(size=d), rng.normal(size=d)
    z = W @ np.concatenate([x, h]) + b
    sig = lambda v: 1 / (1 + np.exp(-v))  # noqa: E731
    i, f, g, o = sig(z[:d]), sig(z[d:2 * d]), np.tanh(z[2 * d:3 * d]), sig(z[3 * d:])
    c_ref = f * c + i * g
    h_new, c_new = nn.lstm_cell(x, h, c, W, b)
    assert np.allclose(c_new, c_ref) and np.allclose(h_new, o * np.tanh(c_ref))


def test_forget_bias_initialized_to_one():
    p = nn.LstmCellParams.init(5, 8, np.random.default_rng(0))
    assert np.all(p.b[8:16] == 1.0) and p.W.shape == (32, 13)
    assert np.all(np.abs(p.W) <= 1 / np.sqrt(13))


def test_sequence_equals_repeated_cell():
    rng = np.random.default_rng(1)
    p = nn.LstmCellParams.init(3, 5, rng)
    X = rng.normal(size=(2, 7, 3))
    h0, c0 = rng.normal(size=(2, 5)), rng.normal(size=(2, 5))
    hs, h, c, _ = nn.lstm_forward(p.W, p.b, X, h0, c0)
    hh, cc = h0, c0
    for t in range(7):
        hh, cc = nn.lstm_cell(X[:, t], hh, cc, p.W, p.b)
        assert np.allclose(hs[:, t], hh, atol=1e-14)
    assert np.allclose(h, hh) and np.allclose(c, cc)


def test_input_and_state_gradients_by_differences():
    rng = np.random.default_rng(2)
    p = nn.LstmCellParams.init(3, 4, rng)
    X = rng.normal(size=(2, 5, 3))
    h0, c0 = rng.normal(size=(2, 4)), rng.normal(size=(2, 4))
    wH = rng.normal(size=(2, 5, 4))
    wc = rng.normal(size=(2, 4))

    def f(X, h0, c0):
        hs, _, c, _ = nn.lstm_forward(p.W, p.b, X, h0, c0)
        return np.sum(hs * wH) + np.sum(c * wc)

    _, _, _, cache = nn.lstm_forward(p.W, p.b, X, h0, c0)
    _, _, dX, dh0, dc0 = nn.lstm_backward(p.W, cache, wH, np.zeros((2, 4)), wc)
    eps = 1e-6
    for arr, grad in ((X, dX), (h0, dh0), (c0, dc0)):
        num = np.zeros_like(arr)
        for k in np.ndindex(arr.shape):
            old = arr[k]
            arr[k] = old + eps
            up = f(X, h0, c0)
            arr[k] = old - eps
            dn = f(X, h0, c0)
            arr[k] = old
            num[k] = (up - dn) / (2 * eps)
        assert np.allclose(grad, num, atol=1e-8)


def test_huber_branches():
    loss, grad = nn.huber_loss(np.array([0.5]), np.array([0.0]))
    assert loss == 0.125 and grad[0] == 0.5
    loss, grad = nn.huber_loss(np.array([2.0]), np.array([0.0]))
    assert loss == 1.5 and grad[0] == 1.0
    loss, grad = nn.huber_loss(np.array([-2.0, 0.5]), np.zeros(2))
    assert loss == pytest.approx((1.5 + 0.125) / 2) and np.allclose(grad, [-0.5, 0.25])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_gradient_check_without_dropout(seed):
    _, params, enc, dec, y = small_problem(seed)
    errs = nn.gradient_check(params, enc, dec, y)
    assert set(errs) == set(nn.Seq2SeqParams.GROUPS)
    assert max(errs.values()) < 1e-5


def test_gradient_check_with_replayed_dropout():
    _, params, enc, dec, y = small_problem(5)
    errs = nn.gradient_check(params, enc, dec, y, dropout_seed=11, p=0.3)
    assert max(errs.values()) < 1e-5


def test_gradient_check_flags_wrong_gradient(monkeypatch):
    _, params, enc, dec, y = small_problem(3)
    real = nn.backward

    def broken(params, cache, g):
        out = real(params, cache, g)
        out["dec_b"] = out["dec_b"] * 1.01
        return out

    monkeypatch.setattr(nn, "backward", broken)
    errs = nn.gradient_check(params, enc, dec, y)
    assert errs["dec_b"] > 1e-3 and errs["enc_W"] < 1e-5


def test_single_and_batched_forward_agree():
    _, params, enc, dec, _ = small_problem(4)
    yb, _ = nn.forward(params, enc, dec)
    for i in range(enc.shape[0]):
        ys, _ = nn.forward(params, enc[i], dec[i])
        assert np.allclose(ys, yb[i], atol=1e-15)


def test_outputs_do_not_depend_on_later_decoder_rows():
    _, params, enc, dec, _ = small_problem(6, H=8)
    y0, _ = nn.forward(params, enc, dec)
    for j in range(8):
        d2 = dec.copy()
        d2[:, j] += 5.0
        y1, _ = nn.forward(params, enc, d2)
        assert np.array_equal(y0[:, :j], y1[:, :j])
        assert not np.array_equal(y0[:, j], y1[:, j])


def test_dropout_is_inverted_and_training_only():
    _, params, enc, dec, _ = small_problem(7, d=16, B=64)
    y_eval, c_eval = nn.forward(params, enc, dec)
    assert c_eval["mask"] is None
    _, cache = nn.forward(params, enc, dec, np.random.default_rng(0), p=0.25)
    m = cache["mask"]
    assert set(np.unique(m)) <= {0.0, 1 / 0.75}
    assert abs(m.mean() - 1.0) < 0.02


def test_adam_first_step_is_signed_lr():
    groups = {"w": np.array([1.0, -2.0, 3.0])}
    grads = {"w": np.array([0.5, -4.0, 1e-3])}
    state = nn.AdamState.zeros_like(groups)
    nn.adam_step(groups, grads, state, lr=0.1)
    # with bias correction m_hat = g and v_hat = g^2
    expected = np.array([1.0, -2.0, 3.0]) - 0.1 * grads["w"] / (np.abs(grads["w"]) + nn.ADAM_EPS)
    assert np.allclose(groups["w"], expected, rtol=0, atol=1e-15)
    assert state.t == 1


def test_config_validation():
    with pytest.raises(ValueError):
        nn.TrainingConfig(lr0=0)
    with pytest.raises(ValueError):
        nn.TrainingConfig(dropout_p=1.0)
    with pytest.raises(ValueError):
        nn.TrainingConfig(patience=3, lr_patience=5)


class _Scripted:
    """Feeds fit_loop a pre-set validation curve."""

    def __init__(self, curve):
        self.curve = list(curve)
        self.groups = {"w": np.zeros(1)}
        self.epoch = 0

    def loss_and_grad(self, idx, rng):
        return 1.0, {"w": np.ones(1)}

    def eval_loss(self):
        self.epoch += 1
        self.groups["w"][0] = self.epoch  # tag parameters with the epoch
        return self.curve[self.epoch - 1]


def test_plateau_schedule_and_early_stop():
    curve = [1.0, 0.5] + [0.6] * 30
    s = _Scripted(curve)
    cfg = nn.TrainingConfig(batch=4, max_epochs=30, patience=15, lr_patience=5)
    log = nn.fit_loop(s.groups, s.loss_and_grad, s.eval_loss, 4, cfg)
    assert len(log) == 2 + 15
    lrs = [r["lr"] for r in log]
    assert lrs[:7] == [1e-3] * 7 and lrs[7] == 5e-4 and lrs[12] == 2.5e-4
    assert s.groups["w"][0] == 2.0  # restored from the best epoch


def test_lr_floor():
    s = _Scripted(np.linspace(1, 2, 100))
    cfg = nn.TrainingConfig(batch=4, max_epochs=100, patience=100, lr_patience=1, lr_min=1e-4)
    log = nn.fit_loop(s.groups, s.loss_and_grad, s.eval_loss, 4, cfg)
    assert min(r["lr"] for r in log) == 1e-4


def test_nonfinite_loss_restores_best():
    s = _Scripted([1.0, 0.5, np.nan])
    cfg = nn.TrainingConfig(batch=4, max_epochs=10)
    with pytest.raises(nn.NonFiniteLoss) as info:
        nn.fit_loop(s.groups, s.loss_and_grad, s.eval_loss, 4, cfg)
    assert s.groups["w"][0] == 2.0 and len(info.value.log) == 2


def _toy_data(n, seed, L=6, H=4):
    rng = np.random.default_rng(seed)
    enc = rng.normal(size=(n, L, 2))
    dec = rng.normal(size=(n, H, 1))
    y = np.tanh(0.5 * enc[:, -1, :1] + 0.3 * dec[:, :, 0])
    return enc, dec, y


def test_training_fits_and_is_seeded(tmp_path):
    spec = nn.ModelSpec(2, 1, 8, "toy")
    cfg = nn.TrainingConfig(lr0=1e-2, batch=16, max_epochs=40, patience=40, dropout_p=0.0, seed=3)
    tr, va = _toy_data(64, 0), _toy_data(32, 1)
    m1, log1 = nn.train(spec, tr, va, cfg)
    m2, log2 = nn.train(spec, tr, va, cfg)
    assert log1 == log2
    assert log1[-1]["train_loss"] < 0.3 * log1[0]["train_loss"]
    path = tmp_path / "ckpt.txt"
    nn.save_checkpoint(m1, path)
    m3 = nn.load_checkpoint(path)
    assert m3.spec == spec
    assert np.array_equal(m3.predict_scaled(va[0], va[1]), m1.predict_scaled(va[0], va[1]))
    assert np.array_equal(m2.predict_scaled(va[0], va[1]), m1.predict_scaled(va[0], va[1]))


def test_standardizer_uses_training_statistics():
    X = np.random.default_rng(0).normal(3.0, 2.0, size=(50, 7, 3))
    X[..., 2] = 4.0
    s = nn.Standardizer.fit(X)
    Z = s(X)
    assert np.allclose(Z[..., :2].reshape(-1, 2).mean(0), 0, atol=1e-12)
    assert np.allclose(Z[..., :2].reshape(-1, 2).std(0), 1)
    assert np.all(Z[..., 2] == 0)


def test_bad_checkpoint_header(tmp_path):
    path = tmp_path / "x.txt"
    path.write_text("# something-else\n")
    with pytest.raises(ValueError, match=":1:"):
        nn.load_checkpoint(path)
