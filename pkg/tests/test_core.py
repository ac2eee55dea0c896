import zlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import central_fd, rel_err, scalar_layernorm
from relp.core import (
    Coefficients,
    Gradient,
    NonFiniteError,
    ShapeError,
    Tape,
    TapeError,
    Tensor,
    backward,
    count_passes,
    ops,
    record_forward,
    replay,
    set_debug,
)
from relp.core.ops import PRIMITIVES, evaluate
from relp.rules import RuleConfig


def grad_of(program, arrays, seed=None):
    ins = [Tensor(a) for a in arrays]
    (out,), tape = record_forward(program, ins)
    seed = np.ones_like(out.data) if seed is None else seed
    g = backward(tape, seed, Gradient(), wrt=[t.id for t in ins])
    return out, [g[t.id] for t in ins]


# -- examples -------------------------------------------------------------


def test_matmul_identity_records_one_node():
    (y,), tape = record_forward(lambda a, b: ops.matmul(a, b), [Tensor([[1, 2], [3, 4]]), Tensor(np.eye(2))])
    np.testing.assert_array_equal(y.data, [[1, 2], [3, 4]])
    assert len(tape) == 1


def test_gelu_at_zero():
    assert ops.gelu(Tensor(0.0)).item() == 0.0


def test_layernorm_matches_scalar_reference():
    got = ops.layernorm(Tensor([1.0, 2.0, 3.0]), 1e-5).data
    np.testing.assert_allclose(got, scalar_layernorm([1.0, 2.0, 3.0], 1e-5), rtol=0, atol=1e-12)


def test_scale_gradient():
    _, (g,) = grad_of(lambda x: ops.scale(x, 3.0), [np.array(2.0)])
    assert g == 3.0


def test_softmax_jacobian_example():
    _, (g,) = grad_of(ops.softmax, [np.array([0.0, 0.0])], seed=np.array([1.0, 0.0]))
    np.testing.assert_allclose(g, [0.25, -0.25], atol=1e-15)


# -- finite-difference checks per primitive ---------------------------------

# each entry: (tensor inputs, attrs) sampler; inputs kept away from kinks
def _pos(rng, shape):
    return rng.uniform(0.2, 3.0, shape)


def _away_from_zero(rng, shape):
    x = rng.normal(0, 1.5, shape)
    return np.where(np.abs(x) < 0.05, 0.3, x)


SAMPLERS = {
    "add": lambda r: ([r.normal(size=(3, 4)), r.normal(size=(4,))], {}),
    "sub": lambda r: ([r.normal(size=(2, 3, 4)), r.normal(size=(3, 1))], {}),
    "mul": lambda r: ([r.normal(size=(3, 4)), r.normal(size=(1, 4))], {}),
    "scale": lambda r: ([r.normal(size=(3, 4))], {"factor": float(r.normal())}),
    "log": lambda r: ([_pos(r, (3, 4))], {}),
    "matmul": lambda r: ([r.normal(size=(2, 3, 4)), r.normal(size=(4, 5))], {}),
    "transpose": lambda r: ([r.normal(size=(2, 3, 4))], {"axes": (2, 0, 1)}),
    "reshape": lambda r: ([r.normal(size=(2, 6))], {"shape": (3, 4)}),
    "sum": lambda r: ([r.normal(size=(3, 4))], {"axis": int(r.integers(0, 2)), "keepdims": bool(r.integers(0, 2))}),
    "index": lambda r: ([r.normal(size=(4, 5))], {"key": (slice(1, 3), np.array([0, 2, 2]))}),
    "concat": lambda r: ([r.normal(size=(2, 3)), r.normal(size=(1, 3))], {"axis": 0}),
    "embedding": lambda r: ([r.normal(size=(6, 3))], {"ids": np.array([[0, 5, 5], [2, 0, 1]])}),
    "gelu": lambda r: ([r.normal(0, 2, size=(3, 4))], {}),
    "silu": lambda r: ([r.normal(0, 2, size=(3, 4))], {}),
    "relu": lambda r: ([_away_from_zero(r, (3, 4))], {}),
    "softmax": lambda r: ([r.normal(0, 2, size=(3, 4))], {}),
    "layernorm": lambda r: ([r.normal(0, 2, size=(3, 5))], {"eps": 1e-5}),
    "rmsnorm": lambda r: ([r.normal(0, 2, size=(3, 5))], {"eps": 1e-6}),
}


def test_every_differentiable_primitive_has_a_sampler():
    assert set(PRIMITIVES) - set(SAMPLERS) == {"detach"}


@pytest.mark.parametrize("name", sorted(SAMPLERS))
def test_primitive_gradient_matches_finite_differences(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(100):
        arrays, attrs = SAMPLERS[name](rng)
        out, _ = evaluate(name, arrays, attrs)
        w = rng.normal(size=out.shape)

        def loss(*xs):
            return float(np.sum(evaluate(name, xs, attrs)[0] * w))

        ins = [Tensor(a) for a in arrays]
        (y,), tape = record_forward(lambda *t: ops.apply(name, t, **attrs), ins)
        grads = backward(tape, w, Gradient(), wrt=[t.id for t in ins])
        for k, a in enumerate(arrays):
            fd = central_fd(lambda x: loss(*arrays[:k], x, *arrays[k + 1:]), a)
            worst = max(worst, rel_err(grads[ins[k].id], fd))
    assert worst < 1e-4, worst


def test_detach_blocks_gradient():
    _, (g,) = grad_of(lambda x: ops.mul(ops.detach(x), x), [np.array([2.0, -1.0])])
    np.testing.assert_array_equal(g, [2.0, -1.0])


def _random_program(rng):
    """A random chain of primitives ending in a scalar."""
    d = int(rng.integers(2, 5))
    W1 = Tensor(rng.normal(size=(d, d)))
    W2 = Tensor(rng.normal(size=(d, d)))
    unary = [ops.gelu, ops.silu, ops.softmax, ops.layernorm, ops.rmsnorm, lambda x: ops.scale(x, -0.7)]
    picks = [unary[i] for i in rng.integers(0, len(unary), size=4)]
    readout = Tensor(rng.normal(size=(d,)))

    def program(x):
        h = picks[0](ops.matmul(x, W1))
        h = ops.add(h, picks[1](x))
        h = ops.mul(picks[2](ops.matmul(h, W2)), h)
        h = picks[3](h)
        return ops.sum(ops.matmul(h, readout))

    return program, (3, d)


def test_random_programs_match_finite_differences():
    rng = np.random.default_rng(7)
    for _ in range(10):
        program, shape = _random_program(rng)
        x = rng.normal(size=shape)
        _, (g,) = grad_of(program, [x])

        def f(v):
            with Tape():
                return program(Tensor(v)).item()

        assert rel_err(g, central_fd(f, x)) < 1e-4


# -- backward modes -------------------------------------------------------


def test_default_coefficients_equal_gradient():
    rng = np.random.default_rng(1)
    for _ in range(10):
        program, shape = _random_program(rng)
        x = Tensor(rng.normal(size=shape))
        (y,), tape = record_forward(program, [x])
        a = backward(tape, 1.0, Gradient())
        b = backward(tape, 1.0, Coefficients(RuleConfig.gradient()))
        assert a.keys() == b.keys()
        for k in a:
            np.testing.assert_array_equal(a[k], b[k])


def test_backward_errors():
    (y,), tape = record_forward(lambda x: ops.softmax(x), [Tensor([1.0, 2.0])])
    with pytest.raises(ShapeError):
        backward(tape, np.ones(3))
    with pytest.raises(TapeError):
        backward(tape, np.ones(2), wrt=[10**12])


def test_unrequested_ids_get_zeros():
    a, b = Tensor([1.0]), Tensor([2.0])
    (y,), tape = record_forward(lambda a, b: ops.scale(a, 2.0), [a, b])
    with tape.resume():
        ops.add(b, b)
    g = backward(tape, 1.0, output=y.id, wrt=[b.id])
    np.testing.assert_array_equal(g[b.id], [0.0])


def test_count_passes():
    x = Tensor([1.0, 2.0])
    (y,), tape = record_forward(ops.softmax, [x])
    with count_passes() as n:
        backward(tape, [1.0, 0.0])
        backward(tape, [0.0, 1.0])
    assert n == {"forward": 0, "backward": 2}


# -- tape structure ----------------------------------------------------------


def test_tape_is_topologically_ordered():
    rng = np.random.default_rng(2)
    program, shape = _random_program(rng)
    _, tape = record_forward(program, [Tensor(rng.normal(size=shape))])
    seen = set(tape.leaves)
    for node in tape.nodes:
        assert all(i in seen for i in node.inputs)
        seen.add(node.output)


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_replay_is_bit_identical(dtype):
    rng = np.random.default_rng(3)
    for _ in range(5):
        program, shape = _random_program(rng)
        x = Tensor(rng.normal(size=shape), dtype=dtype)
        (y,), tape = record_forward(program, [x])
        (again,) = replay(tape, [x])
        assert again.dtype == y.dtype
        assert again.tobytes() == y.data.tobytes()


def test_replay_with_new_inputs_matches_eager():
    rng = np.random.default_rng(4)
    program, shape = _random_program(rng)
    _, tape = record_forward(program, [Tensor(rng.normal(size=shape))])
    x2 = rng.normal(size=shape)
    (out,) = replay(tape, [x2])
    with Tape():
        expect = program(Tensor(x2)).data
    assert out.tobytes() == expect.tobytes()


def test_repeated_runs_are_deterministic():
    rng = np.random.default_rng(5)
    program, shape = _random_program(rng)
    x = rng.normal(size=shape)
    runs = [grad_of(program, [x]) for _ in range(3)]
    for out, (g,) in runs[1:]:
        assert out.data.tobytes() == runs[0][0].data.tobytes()
        assert g.tobytes() == runs[0][1][0].tobytes()


# -- shapes, dtypes, debug mode ------------------------------------------------


def test_shape_errors_name_op_and_shapes():
    with pytest.raises(ShapeError) as e:
        ops.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    assert e.value.op == "matmul" and e.value.shapes == ((2, 3), (2, 3))
    with pytest.raises(ShapeError):
        ops.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))
    with pytest.raises(ShapeError):
        ops.reshape(Tensor(np.ones(6)), (4,))
    with pytest.raises(ShapeError):
        ops.concat([Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4)))], axis=0)


@settings(max_examples=100, deadline=None)
@given(
    st.lists(st.integers(1, 3), min_size=0, max_size=3),
    st.lists(st.integers(1, 3), min_size=0, max_size=3),
)
def test_broadcasting_follows_trailing_axis_rule(s1, s2):
    a, b = Tensor(np.ones(s1)), Tensor(np.ones(s2))
    try:
        expect = np.broadcast_shapes(tuple(s1), tuple(s2))
    except ValueError:
        with pytest.raises(ShapeError):
            ops.add(a, b)
    else:
        assert ops.add(a, b).shape == expect


def test_tensor_is_immutable_and_float():
    t = Tensor([1, 2, 3])
    assert t.dtype == np.float64
    with pytest.raises(ValueError):
        t.data[0] = 5.0
    with pytest.raises(TypeError):
        Tensor([1, 2], dtype=np.int32)
    assert Tensor([1.0], dtype=np.float32).dtype == np.float32


def test_float32_stays_float32():
    x = Tensor(np.ones((2, 3)), dtype=np.float32)
    w = Tensor(np.ones((3, 2)), dtype=np.float32)
    y = ops.layernorm(ops.gelu(ops.matmul(x, w)))
    assert y.dtype == np.float32


def test_debug_mode_flags_non_finite():
    set_debug(True)
    try:
        with pytest.raises(NonFiniteError), np.errstate(invalid="ignore"):
            ops.log(Tensor([-1.0]))
    finally:
        set_debug(False)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=8))
def test_finite_inputs_stay_finite(xs):
    x = Tensor(xs)
    for f in (ops.gelu, ops.silu, ops.softmax, ops.layernorm, ops.rmsnorm):
        assert np.all(np.isfinite(f(x).data))
