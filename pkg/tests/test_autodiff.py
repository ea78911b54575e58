import numpy as np
import pytest
from hypothesis import given, strategies as st

from lipsub import jet as jt
from lipsub import tape as T
from lipsub.errors import ConfigError, FormatError, ModeError, NumericError
from lipsub.jet import Jet, Pairs
from lipsub.network import (
    IDENTITY,
    Layer,
    SubspaceModel,
    checkpoint_bytes,
    decode,
    decode_jacobian,
    decode_jet,
    decode_second_directional,
    encode,
    init_model,
    load_checkpoint,
    save_checkpoint,
)

from conftest import central_fd, rel_err


def small_model(seed, r=3, n=12, hidden=(6, 5), supervised=True):
    rng = np.random.default_rng(seed)
    m = init_model(r, n, list(hidden), supervised, seed, rng.standard_normal(n), rng.uniform(0.5, 2.0, n))
    # non-zero biases so every parameter matters
    params = [p + (0.1 * rng.standard_normal(p.shape) if p.ndim == 1 else 0) for p in m.params()]
    return m.bind(params).copy()


# -- tape --------------------------------------------------------------------


def _tape_fd_check(fn, xs, h=1e-6, tol=1e-7):
    tape = T.LossTape(fn, xs)
    grads = tape.gradient()
    for k, x in enumerate(xs):
        def f(v, k=k):
            args = [a.copy() for a in xs]
            args[k] = v.reshape(x.shape)
            return fn(args)
        fd = central_fd(f, x.ravel(), h).reshape(x.shape)
        assert rel_err(grads[k], fd) < tol


def test_tape_elementwise_ops():
    rng = np.random.default_rng(0)
    a, b = rng.uniform(0.5, 2, (3, 4)), rng.uniform(0.5, 2, (4,))

    def fn(p):
        x, y = p
        u = T.exp(x * 0.3) / (y + 1.0) - T.log(x) * T.sqrt(y) + T.tanh(x - y) + T.softplus(x * y) ** 2
        v = T.atan2(x, y) + T.sigmoid(x) * 3.0 - (-x) ** 3
        return T.sum_(u * v)

    _tape_fd_check(fn, [a, b])


def test_tape_structural_ops():
    rng = np.random.default_rng(1)
    a, W, b = rng.standard_normal((2, 5)), rng.standard_normal((3, 5)), rng.standard_normal(3)

    def fn(p):
        x, w, c = p
        y = T.linear(x, w, c)
        z = T.linear(x, w, c, rowwise=True)
        s = T.stack([T.take(y, np.array([0, 2, 2]), axis=1), z[:, :3]], axis=0)
        cat = T.concatenate([T.reshape(s, (12,)), T.sum_(y, axis=0)], axis=0)
        return T.sum_(cat * cat)

    _tape_fd_check(fn, [a, W, b])


def test_rowwise_linear_matches_matmul():
    rng = np.random.default_rng(2)
    x, W, b = rng.standard_normal((7, 4)), rng.standard_normal((6, 4)), rng.standard_normal(6)
    assert np.allclose(T.linear(x, W, b, rowwise=True), x @ W.T + b, rtol=1e-14)


def test_tape_replay_bit_exact():
    rng = np.random.default_rng(3)
    m = small_model(3)
    z = rng.standard_normal((4, m.r))
    tape = T.LossTape(lambda p: T.sum_(decode_generic_sq(m.bind(p), z)), m.params())
    assert tape.replay() == tape.value


def decode_generic_sq(m, z):
    from lipsub.network import decode_generic

    x = decode_generic(m, z)
    return x * x


def test_tape_nonfinite_names_node():
    with np.errstate(invalid="ignore"), pytest.raises(NumericError, match="tape node"):
        T.LossTape(lambda p: T.sum_(T.log(p[0])), [np.array([-1.0, 1.0])])


def test_dead_parameter_gradient_is_zero():
    m = small_model(4)
    z = np.random.default_rng(4).standard_normal((3, m.r))
    # the encoder does not enter a decoder-only loss
    tape = T.LossTape(lambda p: T.sum_(decode_generic_sq(m.bind(p), z)), m.params())
    g = tape.gradient()
    for k in range(m.n_decoder_params(), len(g)):
        assert not np.any(g[k])


def test_linear_decoder_closed_form_gradient():
    rng = np.random.default_rng(5)
    r, n = 3, 5
    W, b = rng.standard_normal((n, r)), rng.standard_normal(n)
    m = SubspaceModel(r, n, [Layer(W, b, IDENTITY)], None, np.zeros(n), np.ones(n))
    z0 = rng.standard_normal(r)
    tape = T.LossTape(lambda p: 0.5 * T.sum_(decode_generic_sq(m.bind(p), z0)), m.params())
    gW, gb = tape.gradient()
    q = W @ z0 + b
    assert np.abs(gW - np.outer(q, z0)).max() < 1e-10
    assert np.abs(gb - q).max() < 1e-10


# -- jets --------------------------------------------------------------------


def test_jet_second_order_vs_fd():
    rng = np.random.default_rng(6)
    x0 = rng.uniform(0.5, 1.5, 3)

    def f(x):
        if isinstance(x, Jet):
            comps = [x[..., i] for i in range(3)]
        else:
            comps = list(x)
        a, b, c = comps
        return jt.exp(a * b) + jt.sqrt(b * c + 1.0) * jt.tanh(c) - jt.log(a) / (b + 2.0) + jt.atan2(a, c)

    j = f(Jet.seed(x0, np.eye(3), Pairs.upper(3)))
    g = central_fd(lambda x: f(x), x0, 1e-6)
    assert rel_err(np.asarray(j.d), g) < 1e-8
    H = central_fd(lambda x: np.asarray(f(Jet.seed(x, np.eye(3))).d), x0, 1e-5)
    assert rel_err(j.hessian(), H) < 1e-6


# -- network -----------------------------------------------------------------


def test_identity_decoder():
    r = 3
    m = SubspaceModel(r, r, [Layer(np.eye(r), np.zeros(r), IDENTITY)], None, np.zeros(r), np.ones(r))
    z = np.array([0.3, -1.0, 2.0])
    assert np.array_equal(decode(m, z), z)


def test_zero_decoder_is_constant():
    m = small_model(7)
    zeroed = m.bind([np.zeros_like(p) for p in m.params()])
    z = np.random.default_rng(0).standard_normal((4, m.r))
    assert np.array_equal(decode(zeroed, z), np.broadcast_to(m.norm_shift, (4, m.n)))
    assert np.array_equal(encode(zeroed, np.ones((2, m.n))), np.zeros((2, m.r)))


def softplus_np(x):
    # shifted so the activation passes through the origin
    return np.logaddexp(0.0, x) - np.log(2.0)


def forward_oracle(layers, x):
    for L in layers:
        x = x @ L.W.T + L.b
        if L.activation != IDENTITY:
            x = softplus_np(x)
    return x


@given(st.integers(0, 2**32 - 1))
def test_forward_matches_independent_oracle(seed):
    m = small_model(seed % 1000)
    rng = np.random.default_rng(seed)
    z = rng.standard_normal((5, m.r))
    ref = forward_oracle(m.decoder, z) * m.norm_scale + m.norm_shift
    assert np.abs(decode(m, z) - ref).max() < 1e-12
    q = rng.standard_normal((5, m.n))
    assert np.abs(encode(m, q) - forward_oracle(m.encoder, (q - m.norm_shift) / m.norm_scale)).max() < 1e-12


def test_missing_encoder_mode_error():
    m = small_model(8, supervised=False)
    with pytest.raises(ModeError):
        encode(m, np.zeros(m.n))


def test_relu_rejected():
    with pytest.raises(ConfigError, match="twice differentiable"):
        init_model(2, 4, [3], activation="relu")


def test_bad_norm_scale_rejected():
    with pytest.raises(ConfigError):
        init_model(2, 4, [3], norm_scale=np.zeros(4))


def test_linear_decoder_jacobian_constant_and_no_curvature():
    rng = np.random.default_rng(9)
    W, b, s = rng.standard_normal((6, 2)), rng.standard_normal(6), rng.uniform(1, 2, 6)
    m = SubspaceModel(2, 6, [Layer(W, b, IDENTITY)], None, np.zeros(6), s)
    for z in rng.standard_normal((3, 2)):
        assert np.allclose(decode_jacobian(m, z), s[:, None] * W, rtol=1e-15)
        assert not np.any(decode_second_directional(m, z, [1.0, 0.0], [0.3, 2.0]))


def test_jacobian_fd_and_row_restriction():
    for seed in range(5):
        m = small_model(seed)
        rng = np.random.default_rng(seed)
        z = rng.standard_normal(m.r)
        J = decode_jacobian(m, z)
        fd = central_fd(lambda x: decode(m, x), z, 1e-5)
        assert rel_err(J, fd) < 1e-6
        rows = np.array([7, 0, 3])
        assert np.array_equal(decode_jacobian(m, z, rows), J[rows])
        assert np.array_equal(decode(m, z, rows), decode(m, z)[rows])


def test_second_directional_symmetry_and_fd():
    for seed in range(5):
        m = small_model(seed)
        rng = np.random.default_rng(100 + seed)
        z, u, v = rng.standard_normal((3, m.r))
        a = decode_second_directional(m, z, u, v)
        assert np.array_equal(a, decode_second_directional(m, z, v, u))
        h = 1e-5
        fd = (decode_jacobian(m, z + h * v) - decode_jacobian(m, z - h * v)) @ u / (2 * h)
        assert rel_err(a, fd) < 1e-5
        rows = np.array([1, 4])
        assert np.array_equal(decode_second_directional(m, z, u, v, rows), a[rows])


def test_decode_jet_hessian_matches_directional():
    m = small_model(11)
    rng = np.random.default_rng(11)
    z = rng.standard_normal(m.r)
    j = decode_jet(m, z, order=2)
    H = j.hessian()  # (n, r, r)
    u, v = rng.standard_normal((2, m.r))
    assert np.allclose(np.einsum("nij,i,j->n", H, u, v), decode_second_directional(m, z, u, v), rtol=1e-10,
                       atol=1e-12)


def test_checkpoint_round_trip(tmp_path):
    m = small_model(12)
    sha = save_checkpoint(m, tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert checkpoint_bytes(back) == checkpoint_bytes(m)
    for a, b in zip(m.params(), back.params()):
        assert np.array_equal(a, b)
    assert np.array_equal(back.norm_shift, m.norm_shift) and np.array_equal(back.norm_scale, m.norm_scale)
    assert len(sha) == 64


def test_checkpoint_corrupt(tmp_path):
    m = small_model(13)
    save_checkpoint(m, tmp_path / "m.ckpt")
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "cut.ckpt").write_bytes(raw[:-16])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "cut.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"not a checkpoint\n")
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "junk.ckpt")
