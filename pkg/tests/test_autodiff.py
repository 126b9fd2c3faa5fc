import numpy as np
import pytest

from splatskin import autodiff as ad
from splatskin import nn


def test_replay_linear_identity():
    tape = ad.Tape()
    x = tape.placeholder("x", ())
    tape.mark_output(x * 2.0)
    (y,), _ = ad.eval_tape(tape, {"x": 3.0})
    assert y == 6.0
    (y,), _ = ad.eval_tape(tape, {"x": -7.5})
    assert y == -15.0


def test_softmax_symmetry():
    tape = ad.Tape()
    x = tape.leaf("x", np.zeros(3))
    y = ad.softmax(x, axis=0).value
    assert np.allclose(y, 1.0 / 3.0, atol=1e-15)
    assert abs(y.sum() - 1.0) < 1e-12
    assert np.all(y > 0)


def test_softmax_sums_to_one_random():
    rng = np.random.default_rng(0)
    for _ in range(20):
        x = rng.standard_normal((4, 7)) * 10
        tape = ad.Tape()
        y = ad.softmax(tape.leaf("x", x), axis=-1).value
        assert np.all(y > 0)
        assert np.allclose(y.sum(axis=-1), 1.0, atol=1e-12)


def _straightline_mlp(x, weights):
    h = x
    for i, (w, b) in enumerate(weights):
        h = h @ w + b
        if i < len(weights) - 1:
            h = np.tanh(h)
    return h


def test_mlp_matches_straightline_reimplementation():
    rng = np.random.default_rng(42)
    params = nn.init_mlp(rng, [5, 16, 16, 3], "f")
    x = rng.standard_normal((10, 5))

    tape = ad.Tape()
    leaves = nn.lift(tape, params)
    out = nn.mlp_apply(leaves, "f", tape.leaf("x", x)).value

    weights = [(params[f"f.w{i}"], params[f"f.b{i}"]) for i in range(3)]
    ref = _straightline_mlp(x, weights)
    assert np.max(np.abs(out - ref)) < 1e-12


def test_reevaluation_bit_identical():
    rng = np.random.default_rng(3)
    params = nn.init_mlp(rng, [4, 8, 2], "g")
    x = rng.standard_normal((6, 4))
    tape = ad.Tape()
    leaves = nn.lift(tape, params)
    tape.mark_output(nn.mlp_apply(leaves, "g", tape.leaf("x", x)))
    (a,), _ = ad.eval_tape(tape)
    (b,), _ = ad.eval_tape(tape)
    assert np.array_equal(a, b)


def test_backward_polynomial():
    tape = ad.Tape()
    x = tape.leaf("x", 3.0)
    y = x * x
    g = ad.backward(tape, y)
    assert abs(g["x"] - 6.0) < 1e-15


def test_backward_constant_graph():
    tape = ad.Tape()
    x = tape.leaf("x", np.ones(4))
    y = tape.constant(np.ones(4)).sum() + 0.0 * x.sum()
    g = ad.backward(tape, y)
    assert np.all(g["x"] == 0.0)


def test_backward_before_forward_raises():
    tape = ad.Tape()
    x = tape.placeholder("x", (3,))
    y = x.sum()
    with pytest.raises(ad.TapeError):
        ad.backward(tape, y)


def test_eval_shape_mismatch_names_node():
    tape = ad.Tape()
    tape.placeholder("x", (3,))
    with pytest.raises(ad.TapeError, match="x"):
        ad.eval_tape(tape, {"x": np.zeros((4,))})


def test_eval_rejects_unknown_inputs():
    tape = ad.Tape()
    x = tape.placeholder("x", (2,))
    tape.mark_output(x * 1.0)
    with pytest.raises(ad.TapeError, match="bogus"):
        ad.eval_tape(tape, {"x": np.zeros(2), "bogus": 1.0})


def test_nonfinite_leaf_rejected():
    tape = ad.Tape()
    with pytest.raises(ad.TapeError):
        tape.leaf("x", np.array([1.0, np.nan]))


def test_grad_check_sum():
    err = ad.grad_check(lambda x: x.sum(), np.array([1.0, -2.0, 0.5]))
    assert err < 1e-10


def test_grad_check_squared_norm():
    tape_grad = None

    def f(x):
        nonlocal tape_grad
        y = (x * x).sum()
        tape_grad = ad.backward(x.tape, y)["x"]
        return y

    err = ad.grad_check(f, np.array([1.0, 2.0]))
    assert np.allclose(tape_grad, [2.0, 4.0], atol=1e-12)
    assert err < 1e-8


def test_grad_check_rejects_nonfinite():
    with np.errstate(invalid="ignore"):
        with pytest.raises(ad.TapeError):
            ad.grad_check(lambda x: ad.log(x).sum(), np.array([-1.0]))


# --- finite-difference sweep over the primitive library ---------------------

def _fd_cases(rng):
    a = rng.standard_normal((3, 4)) * 0.8
    pos = np.abs(rng.standard_normal((3, 4))) + 0.5
    m = rng.standard_normal((4, 5)) * 0.6
    yield "add", lambda x: (x + a).sum(), a.copy()
    yield "mul", lambda x: (x * a * 2.0).sum(), a.copy()
    yield "div", lambda x: (a / (x * x + 1.5)).sum(), a.copy()
    yield "sub_bcast", lambda x: (x - a[0:1]).sum(), a.copy()
    yield "exp", lambda x: ad.exp(x).sum(), a.copy()
    yield "log", lambda x: ad.log(x).sum(), pos.copy()
    yield "sqrt", lambda x: ad.sqrt(x).sum(), pos.copy()
    yield "tanh", lambda x: ad.tanh(x).sum(), a.copy()
    yield "sin", lambda x: ad.sin(x * 1.7).sum(), a.copy()
    yield "cos", lambda x: ad.cos(x).sum(), a.copy()
    yield "sigmoid", lambda x: ad.sigmoid(x * 3.0).sum(), a.copy()
    yield "softplus", lambda x: ad.softplus(x * 2.0).sum(), a.copy()
    yield "pow", lambda x: ad.square(x).sum(), a.copy()
    yield "matmul", lambda x: (x @ x.tape.constant(m)).sum(), a.copy()
    yield "reshape", lambda x: (x.reshape(12) * np.arange(12.0)).sum(), a.copy()
    yield "transpose", lambda x: (x.T * a.T).sum(), a.copy()
    yield "sum_axis", lambda x: ad.square(x.sum(axis=0)).sum(), a.copy()
    yield "mean", lambda x: ad.square(x.mean(axis=1, keepdims=True)).sum(), a.copy()
    yield "l2norm", lambda x: ad.l2norm(x, axis=1).sum(), a + 3.0
    yield "normalize", lambda x: (ad.normalize(x, axis=1) * a).sum(), a + 3.0
    yield "softmax", lambda x: (ad.softmax(x, axis=1) * a).sum(), a.copy()
    yield "concat", lambda x: ad.concat([x, x * 2.0], axis=0).sum(), a.copy()
    yield "getitem", lambda x: ad.square(x[1:, 2]).sum(), a.copy()
    yield "take", lambda x: ad.take(x, [2, 0, 2]).sum(), a.copy()
    yield "clamp", lambda x: ad.clamp(x, -0.5, 0.5).sum(), a + 0.01
    yield ("attention",
           lambda x: ad.attention(x, x * 0.7, x + 0.3).sum(), a.copy())
    patch_w = rng.standard_normal((3, 4))
    yield ("unfold",
           lambda x: (ad.unfold(x.reshape(6, 2, 1), 2, 2, 2) * patch_w).sum(),
           a.copy())


def test_primitive_gradients_match_finite_differences():
    worst = {}
    for seed in range(12):
        rng = np.random.default_rng(1000 + seed)
        for name, fn, point in _fd_cases(rng):
            err = ad.grad_check(fn, point, step=1e-5)
            worst[name] = max(worst.get(name, 0.0), err)
    bad = {k: v for k, v in worst.items() if v > 1e-4}
    assert not bad, f"finite-difference mismatches: {bad}"


def test_composite_gradient_100_seeds():
    # one representative composite per seed keeps the sweep under a second
    for seed in range(100):
        rng = np.random.default_rng(seed)
        w = rng.standard_normal((3, 3)) * 0.5

        def f(x):
            h = ad.tanh(x @ x.tape.constant(w))
            return (ad.softmax(h, axis=1) * ad.exp(x * 0.3)).sum()

        err = ad.grad_check(f, rng.standard_normal((2, 3)),
                            step=1e-5, coords=[0, 3, 5])
        assert err <= 1e-4, f"seed {seed}: rel err {err}"


def test_duplicate_leaf_names_accumulate():
    tape = ad.Tape()
    x1 = tape.leaf("x", 2.0)
    x2 = tape.leaf("x", 2.0)
    g = ad.backward(tape, x1 * x2)
    assert abs(g["x"] - 4.0) < 1e-15  # both occurrences contribute


# --- quaternions -------------------------------------------------------------

def test_quat_identity():
    assert np.allclose(ad.quat_to_rotmat([1, 0, 0, 0]), np.eye(3), atol=1e-15)


def test_quat_z_rotation():
    s = np.sqrt(2) / 2
    R = ad.quat_to_rotmat([s, 0, 0, s])
    assert np.allclose(R, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-12)


def test_quat_orthonormal_random():
    rng = np.random.default_rng(7)
    q = rng.standard_normal((50, 4))
    R = ad.quat_to_rotmat(q)
    eye = np.eye(3)
    for r in R:
        assert np.max(np.abs(r.T @ r - eye)) < 1e-12
        assert abs(np.linalg.det(r) - 1.0) < 1e-12


def test_quat_zero_norm_rejected():
    with pytest.raises(ValueError):
        ad.quat_to_rotmat([0.0, 0.0, 0.0, 0.0])


def test_quat_tape_matches_numpy_and_differentiates():
    rng = np.random.default_rng(11)
    q = rng.standard_normal((6, 4))
    tape = ad.Tape()
    R = ad.quat_to_rotmat_t(tape.leaf("q", q))
    assert np.max(np.abs(R.value - ad.quat_to_rotmat(q))) < 1e-12

    w = rng.standard_normal((6, 3, 3))

    def f(x):
        return (ad.quat_to_rotmat_t(x) * w).sum()

    assert ad.grad_check(f, q, coords=range(8)) < 1e-4


def test_posenc_tape_matches_numpy():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((4, 3))
    tape = ad.Tape()
    enc = nn.posenc_t(tape.leaf("x", x), 6)
    ref = nn.posenc_np(x, 6)
    assert enc.shape == (4, nn.posenc_dim(3, 6))
    assert np.max(np.abs(enc.value - ref)) < 1e-15
