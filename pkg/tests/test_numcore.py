import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from expandpt import numcore as nc
from expandpt.numcore import AdamWState, LrSchedule, Tensor, adamw_step, lr_at_step
from gradcheck import check_op

TOL = 1e-4


def project(out_shape, seed=0):
    """Fixed random weighting so any tensor output reduces to a scalar."""
    w = np.random.default_rng(seed).standard_normal(out_shape)
    return lambda t: nc.tsum(t * Tensor(w))


# -- forward examples ---------------------------------------------------------

def test_matmul_identity_and_dot():
    eye = Tensor([[1.0, 0.0], [0.0, 1.0]])
    np.testing.assert_allclose((eye @ Tensor([[3.0], [4.0]])).data, [[3.0], [4.0]])
    np.testing.assert_allclose((Tensor([[1.0, 2.0]]) @ Tensor([[3.0], [4.0]])).data, [[11.0]])


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(4, 2\)"):
        nc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))


def test_softmax_examples():
    np.testing.assert_allclose(nc.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])
    out = nc.softmax_rows(Tensor([[1000.0, 1000.0]])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [[0.5, 0.5]])


def test_cross_entropy_uniform_two_way():
    loss = nc.cross_entropy_logits(Tensor([[0.0, 0.0]]), [0])
    assert loss.item() == pytest.approx(math.log(2), abs=1e-6)


def test_cross_entropy_all_ignored_is_flagged_zero():
    loss = nc.cross_entropy_logits(Tensor(np.zeros((3, 4))), [-100, -100, -100])
    assert loss.item() == 0.0
    assert loss.empty and loss.n_valid == 0


def test_cross_entropy_rejects_out_of_range_target():
    with pytest.raises(IndexError):
        nc.cross_entropy_logits(Tensor(np.zeros((1, 4))), [4])


def test_cross_entropy_matches_logsumexp_oracle(f64, rng):
    logits = rng.standard_normal((4, 7)) * 3
    targets = rng.integers(0, 7, size=4)
    expected = np.mean([math.log(sum(math.exp(v) for v in row)) - row[t] for row, t in zip(logits, targets)])
    assert nc.cross_entropy_logits(Tensor(logits), targets).item() == pytest.approx(expected, abs=1e-6)


def test_layer_norm_centres_and_gelu_fixed_point():
    out = nc.layer_norm(Tensor([[1.0, 2.0, 3.0]]), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    assert abs(out.data.mean()) < 1e-6
    assert nc.gelu(Tensor([0.0])).data[0] == 0.0


def test_backward_linear_and_quadratic():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    nc.tsum(x).backward()
    np.testing.assert_array_equal(x.grad, [1.0, 1.0, 1.0])
    y = Tensor([1.0, 2.0], requires_grad=True)
    nc.tsum(y * y).backward()
    np.testing.assert_allclose(y.grad, [2.0, 4.0])


def test_backward_requires_scalar():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with pytest.raises(ValueError):
        (x * x).backward()


def test_grads_accumulate_across_backward_calls():
    x = Tensor([1.0, 2.0], requires_grad=True)
    nc.tsum(x).backward()
    nc.tsum(x).backward()
    np.testing.assert_array_equal(x.grad, [2.0, 2.0])


def test_no_grad_records_nothing():
    x = Tensor([1.0], requires_grad=True)
    with nc.no_grad():
        y = x * x
    assert not y.requires_grad and y.is_leaf


def test_embedding_lookup_out_of_range():
    with pytest.raises(IndexError):
        nc.embedding_lookup(Tensor(np.zeros((3, 2))), [3])


# -- finite-difference suite --------------------------------------------------

SEEDS = range(10)

UNARY = {
    "neg": (lambda x: nc.neg(x), False),
    "exp": (lambda x: nc.exp(x), False),
    "log": (lambda x: nc.log(x), True),
    "reciprocal": (lambda x: nc.reciprocal(x), True),
    "tanh": (lambda x: nc.tanh(x), False),
    "gelu": (lambda x: nc.gelu(x), False),
    "softmax_rows": (lambda x: nc.softmax_rows(x), False),
    "log_softmax_rows": (lambda x: nc.log_softmax_rows(x), False),
    "transpose": (lambda x: nc.transpose(x), False),
    "reshape": (lambda x: nc.reshape(x, (5, 2)), False),
    "index_rows": (lambda x: nc.index(x, np.array([0, 1, 0])), False),
    "index_unique": (lambda x: nc.index(x, (np.array([0, 1]), np.array([3, 4])), unique=True), False),
    "slice": (lambda x: x[:, 1:4], False),
}


@pytest.mark.parametrize("name", sorted(UNARY))
@pytest.mark.parametrize("seed", SEEDS)
def test_unary_op_gradients(name, seed):
    fn, positive = UNARY[name]
    rng = np.random.default_rng(seed)
    with nc.precision("float64"):
        shape = fn(Tensor(np.ones((2, 5)))).shape
    proj = project(shape, seed)
    assert check_op(lambda x: proj(fn(x)), [(2, 5)], rng, positive=positive) < TOL


BINARY = {
    "add_broadcast": (lambda a, b: a + b, [(3, 4), (4,)]),
    "sub": (lambda a, b: a - b, [(3, 4), (3, 4)]),
    "mul_broadcast": (lambda a, b: a * b, [(3, 4), (3, 1)]),
    "div": (lambda a, b: a / b, [(3, 4), (3, 4)]),
    "matmul": (lambda a, b: a @ b, [(3, 4), (4, 2)]),
    "matmul_batched": (lambda a, b: a @ b, [(2, 3, 4), (2, 4, 5)]),
    "matmul_shared_weight": (lambda a, b: a @ b, [(2, 3, 4), (4, 5)]),
    "concat": (lambda a, b: nc.concat([a, b], axis=0), [(2, 4), (3, 4)]),
}


@pytest.mark.parametrize("name", sorted(BINARY))
@pytest.mark.parametrize("seed", SEEDS)
def test_binary_op_gradients(name, seed):
    fn, shapes = BINARY[name]
    rng = np.random.default_rng(seed)
    with nc.precision("float64"):
        shape = fn(*[Tensor(np.ones(s)) for s in shapes]).shape
    proj = project(shape, seed)
    positive = name == "div"
    assert check_op(lambda a, b: proj(fn(a, b)), shapes, rng, positive=positive) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_reduction_gradients(seed):
    rng = np.random.default_rng(seed)
    proj = project((3,), seed)
    assert check_op(lambda x: proj(nc.tsum(x, axis=1)), [(3, 4)], rng) < TOL
    assert check_op(lambda x: proj(nc.tmean(x, axis=0)), [(4, 3)], rng) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_layer_norm_gradient(seed):
    rng = np.random.default_rng(seed)
    proj = project((3, 6), seed)
    assert check_op(lambda x, g, b: proj(nc.layer_norm(x, g, b)), [(3, 6), (6,), (6,)], rng) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_linear_and_embedding_gradients(seed):
    rng = np.random.default_rng(seed)
    proj = project((2, 3, 5), seed)
    assert check_op(lambda x, w, b: proj(nc.linear(x, w, b)), [(2, 3, 4), (4, 5), (5,)], rng) < TOL
    ids = np.random.default_rng(seed).integers(0, 6, size=(2, 4))
    proj2 = project((2, 4, 3), seed)
    assert check_op(lambda t: proj2(nc.embedding_lookup(t, ids)), [(6, 3)], rng) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_cross_entropy_gradient(seed):
    rng = np.random.default_rng(seed)
    targets = rng.integers(0, 7, size=5)
    targets[1] = -100
    assert check_op(lambda x: nc.cross_entropy_logits(x, targets), [(5, 7)], rng) < TOL


@pytest.mark.parametrize("seed", SEEDS)
def test_composite_mlp_gradient(seed):
    rng = np.random.default_rng(seed)
    targets = rng.integers(0, 3, size=4)

    def mlp(x, w1, b1, w2):
        h = nc.gelu(nc.linear(x, w1, b1))
        return nc.cross_entropy_logits(nc.tanh(h) @ w2, targets)

    assert check_op(mlp, [(4, 5), (5, 6), (6,), (6, 3)], rng) < TOL


def test_backward_is_bit_deterministic():
    def grads():
        rng = np.random.default_rng(7)
        x = Tensor(rng.standard_normal((4, 5)), requires_grad=True)
        w = Tensor(rng.standard_normal((5, 3)), requires_grad=True)
        nc.cross_entropy_logits(nc.gelu(x @ w), [0, 1, 2, 0]).backward()
        return x.grad.copy(), w.grad.copy()

    a, b = grads(), grads()
    assert all(np.array_equal(u, v) for u, v in zip(a, b))


@settings(max_examples=50, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=2, max_dims=2, max_side=6),
                  elements=st.floats(-50, 50)), st.floats(-100, 100))
def test_softmax_rows_normalised_and_shift_invariant(x, c):
    with nc.precision("float64"):
        p = nc.softmax_rows(Tensor(x)).data
        q = nc.softmax_rows(Tensor(x + c)).data
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)
    np.testing.assert_allclose(p, q, atol=1e-6)


# -- AdamW ----------------------------------------------------------------------

def test_adamw_null_step(f64):
    p = Tensor([1.0, -2.0])
    state = AdamWState.for_params([p], weight_decay=0.0)
    adamw_step([p], [np.array([0.3, 0.4])], state, 0.0)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adamw_first_step_moves_by_lr(f64):
    p = Tensor([1.0])
    adamw_step([p], [np.array([1.0])], AdamWState.for_params([p], weight_decay=0.0), 0.1)
    # bias-corrected m/sqrt(v) is exactly 1, damped only by eps
    assert p.data[0] == pytest.approx(0.9, abs=1e-7)


def test_adamw_pure_decay(f64):
    p = Tensor([2.0])
    adamw_step([p], [np.array([0.0])], AdamWState.for_params([p], weight_decay=0.01), 0.1)
    assert p.data[0] == pytest.approx(2.0 * (1 - 0.001), rel=1e-12)


def test_adamw_rejects_non_finite_without_mutation(f64):
    p = Tensor([1.0, 1.0])
    state = AdamWState.for_params([p])
    with pytest.raises(FloatingPointError):
        adamw_step([p], [np.array([np.nan, 1.0])], state, 0.1)
    np.testing.assert_array_equal(p.data, [1.0, 1.0])
    assert state.step == 0 and not state.m[0].any()


def test_adamw_skips_parameters_without_grad(f64):
    p = Tensor([1.0])
    adamw_step([p], [None], AdamWState.for_params([p], weight_decay=0.5), 0.1)
    assert p.data[0] == 1.0


# -- learning-rate schedules ----------------------------------------------------

def test_warmup_cosine_endpoints():
    s = LrSchedule("warmup-cosine", 3e-4, 100, 0.1)
    assert lr_at_step(s, 0) == 0.0
    assert lr_at_step(s, 10) == pytest.approx(3e-4)
    assert lr_at_step(s, 100) == pytest.approx(0.0, abs=1e-15)


def test_constant_schedule():
    s = LrSchedule("constant", 1e-4, 50)
    assert all(lr_at_step(s, t) == 1e-4 for t in range(51))


def test_schedule_rejects_out_of_range_step():
    with pytest.raises(ValueError):
        lr_at_step(LrSchedule(total_steps=10), 11)


@settings(max_examples=100, deadline=None)
@given(st.integers(10, 5000), st.floats(0.01, 0.5), st.floats(1e-6, 1e-2))
def test_lr_continuous_at_warmup_boundary(total, ratio, peak):
    s = LrSchedule("warmup-cosine", peak, total, ratio)
    w = s.warmup_steps
    warmup_line_at_w = peak * w / w
    assert abs(lr_at_step(s, w) - warmup_line_at_w) < 1e-9
    assert abs(lr_at_step(s, w - 1) - peak * (w - 1) / w) < 1e-12
