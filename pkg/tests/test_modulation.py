import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from mpdit import tensor as T
from mpdit.modulation import (
    ModulationFlags,
    ModulationHead,
    ModulationParams,
    apply_gate,
    apply_scale_shift,
    modulate,
    modulation_head_forward,
    rotate_pairs,
)
from mpdit.tensor import ShapeError, Tape, Tensor

angles = hnp.arrays(np.float64, 3, elements=st.floats(-10, 10))
vectors = hnp.arrays(np.float64, 6, elements=st.floats(-100, 100))


@settings(max_examples=100, deadline=None)
@given(vectors, angles)
def test_rotation_preserves_norm(x, theta):
    y = rotate_pairs(x, theta).data
    assert np.linalg.norm(y) == pytest.approx(np.linalg.norm(x), rel=1e-12, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(vectors, angles, angles)
def test_rotations_compose(x, a, b):
    once = rotate_pairs(x, a + b).data
    twice = rotate_pairs(rotate_pairs(x, a), b).data
    np.testing.assert_allclose(once, twice, atol=1e-9)
    back = rotate_pairs(rotate_pairs(x, a), -a).data
    np.testing.assert_allclose(back, x, atol=1e-9)


def test_rotation_by_quarter_turn():
    x = np.array([1.0, 0.0, 0.0, 2.0])
    y = rotate_pairs(x, np.array([np.pi / 2, np.pi / 2])).data
    np.testing.assert_allclose(y, [0.0, 1.0, -2.0, 0.0], atol=1e-15)


def test_rotation_shared_over_tokens(rng):
    x = rng.standard_normal((2, 5, 4))
    theta = rng.standard_normal((2, 1, 2))
    y = rotate_pairs(x, theta).data
    for t in range(5):
        np.testing.assert_allclose(y[:, t], rotate_pairs(x[:, t], theta[:, 0]).data)


def test_rotation_errors():
    with pytest.raises(ShapeError):
        rotate_pairs(np.ones(5), np.ones(2))
    with pytest.raises(ShapeError):
        rotate_pairs(np.ones(6), np.ones(2))
    with pytest.raises(ValueError):
        ModulationHead(4, 5, ModulationFlags(rotate=True))


def test_rotation_gradient(rng):
    x = Tensor(rng.standard_normal((2, 4)), requires_grad=True)
    th = Tensor(rng.standard_normal((2, 2)), requires_grad=True)
    w = rng.standard_normal((2, 4))

    def value():
        return float(np.sum(rotate_pairs(x.data, th.data).data * w))

    with Tape() as tape:
        loss = T.sum(rotate_pairs(x, th) * w)
    tape.backward(loss)
    for t in (x, th):
        for idx in np.ndindex(t.shape):
            assert t.grad[idx] == pytest.approx(T.numerical_gradient(value, t, idx, 1e-6), abs=1e-7)


def test_disabled_params_are_identity(rng):
    x = rng.standard_normal((3, 4))
    p = ModulationParams()
    assert np.array_equal(modulate(x, p).data, x)
    assert np.array_equal(apply_gate(x, p).data, x)
    assert p.enabled == ModulationFlags(False, False, False)


def test_scale_shift_then_rotate(rng):
    x = rng.standard_normal((1, 3, 4))
    s, b, th = rng.standard_normal((1, 1, 4)), rng.standard_normal((1, 1, 4)), rng.standard_normal((1, 1, 2))
    p = ModulationParams(Tensor(s), Tensor(b), None, Tensor(th))
    np.testing.assert_allclose(modulate(x, p).data, rotate_pairs(x * s + b, th).data)
    np.testing.assert_allclose(apply_scale_shift(x, p).data, x * s + b)


FLAGS = [ModulationFlags(*f) for f in [(a, b, c) for a in (0, 1) for b in (0, 1) for c in (0, 1)]]


@pytest.mark.parametrize("flags", FLAGS, ids=str)
@pytest.mark.parametrize("normalize", [False, True])
def test_head_layout_and_zero_init(flags, normalize, rng):
    d = 8
    head = ModulationHead(6, d, flags, branches=2, normalize=normalize, rng=rng)
    per_branch = d * (flags.scale + flags.shift + flags.any) + (d // 2) * flags.rotate
    assert head.branch_dim == per_branch
    assert head.output_dim == 2 * per_branch
    c = rng.standard_normal((3, 6))
    params = modulation_head_forward(c, head)
    assert len(params) == 2
    for p in params:
        assert p.enabled == flags
        if flags.scale:
            assert np.all(p.scale.data == 1.0) and p.scale.shape == (3, 1, d)
        if flags.shift:
            assert np.all(p.shift.data == 0.0)
        if flags.rotate:
            assert np.all(p.angles.data == 0.0) and p.angles.shape == (3, 1, d // 2)
        if flags.any:
            assert np.all(p.gate.data == 0.0)
        else:
            assert p.gate is None


def test_head_without_gate(rng):
    head = ModulationHead(4, 6, ModulationFlags(), branches=1, gated=False, rng=rng)
    (p,) = head(rng.standard_normal((2, 4)))
    assert p.gate is None and head.output_dim == 12


def test_head_parameter_counts_follow_layout():
    d, c = 8, 8
    counts = {}
    for f in FLAGS:
        head = ModulationHead(c, d, f, branches=2, normalize=False)
        counts[(f.scale, f.shift, f.rotate)] = head.num_parameters()
    assert counts[(False, False, False)] == 0
    # plain heads: (c + 1) parameters per output row
    assert counts[(True, False, False)] == 2 * 2 * d * (c + 1)
    assert counts[(False, False, True)] == 2 * (d + d // 2) * (c + 1)
    assert counts[(True, True, False)] - counts[(True, False, False)] == 2 * d * (c + 1)
    assert counts[(True, True, True)] - counts[(True, True, False)] == 2 * (d // 2) * (c + 1)


def test_head_gradients_flow_from_zero_init(rng):
    head = ModulationHead(4, 4, ModulationFlags(True, True, True), branches=1, normalize=True, rng=rng)
    x = rng.standard_normal((2, 3, 4))
    c = rng.standard_normal((2, 4))
    with Tape() as tape:
        (p,) = head(c)
        loss = T.sum(apply_gate(modulate(x, p), p))
    tape.backward(loss)
    assert float(np.abs(head.linear.gain.grad)) > 0
