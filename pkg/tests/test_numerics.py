import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings
from hypothesis import strategies as st

from dar.numerics import (NonFiniteError, ShapeError, backward, conv2d_1x1, conv2d_3x3, finite_diff_check,
                          get_dtype, layer_norm, matmul, precision, resize_to, set_precision, softmax,
                          tensor, upsample2x, zero_grad)

small = st.integers(min_value=1, max_value=5)


# -- softmax ------------------------------------------------------------------

def test_softmax_examples():
    assert softmax(tensor([0.0, 0.0])).tolist() == [0.5, 0.5]
    np.testing.assert_allclose(softmax(tensor([math.log(2), 0.0])).tolist(), [2 / 3, 1 / 3], rtol=1e-15)
    assert softmax(tensor([1000.0, 1000.0])).tolist() == [0.5, 0.5]


def test_softmax_mask_zeroes_disallowed():
    p = softmax(tensor([[1.0, 2.0, 3.0]]), mask=torch.tensor([[True, False, True]]))
    assert p[0, 1] == 0
    np.testing.assert_allclose(p[0, [0, 2]].tolist(), [1 / (1 + math.e ** 2), 1 / (1 + math.e ** -2)])


def test_softmax_rejects_nonfinite():
    with pytest.raises(NonFiniteError):
        softmax(tensor([1.0, float("nan")]))


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=12))
def test_softmax_is_probability_vector(xs):
    p = softmax(tensor(xs))
    assert bool((p >= 0).all())
    assert abs(float(p.sum()) - 1) < 1e-12


# -- layer norm ---------------------------------------------------------------

def test_layer_norm_examples():
    one, zero = tensor([1.0, 1.0]), tensor([0.0, 0.0])
    np.testing.assert_allclose(layer_norm(tensor([1.0, -1.0]), one, zero, eps=1e-12).tolist(), [1, -1], rtol=1e-10)
    assert layer_norm(tensor([5.0, 5.0]), one, zero).tolist() == [0, 0]
    out = layer_norm(tensor([1.0, -1.0]), tensor([2.0, 2.0]), tensor([1.0, 1.0]), eps=1e-12)
    np.testing.assert_allclose(out.tolist(), [3, -1], rtol=1e-10)


def test_layer_norm_matches_torch(gen):
    x = torch.randn(3, 5, 8, generator=gen)
    g, b = torch.randn(8, generator=gen), torch.randn(8, generator=gen)
    torch.testing.assert_close(layer_norm(x, g, b, 1e-5), F.layer_norm(x, (8,), g, b, 1e-5), rtol=1e-12, atol=1e-12)


def test_layer_norm_shape_error():
    with pytest.raises(ShapeError):
        layer_norm(torch.zeros(2, 4), torch.ones(3), torch.zeros(3))


# -- matmul -------------------------------------------------------------------

def test_matmul_examples(gen):
    x = torch.randn(3, 4, generator=gen)
    assert torch.equal(matmul(torch.eye(3), x), x)
    assert matmul(tensor([[1.0, 2.0], [3.0, 4.0]]), tensor([[1.0], [1.0]])).tolist() == [[3], [7]]
    assert torch.equal(matmul(torch.zeros(2, 3), x), torch.zeros(2, 4))


def test_matmul_no_broadcast_beyond_batch():
    with pytest.raises(ShapeError):
        matmul(torch.zeros(2, 3, 4), torch.zeros(3, 4, 5))
    with pytest.raises(ShapeError):
        matmul(torch.zeros(3, 4), torch.zeros(5, 2))


@given(small, small, small, small)
def test_matmul_shape_is_function_of_shapes(b, m, k, n):
    assert matmul(torch.zeros(b, m, k), torch.zeros(k, n)).shape == (b, m, n)
    assert matmul(torch.zeros(b, m, k), torch.zeros(b, k, n)).shape == (b, m, n)


# -- convolutions -------------------------------------------------------------

def test_conv3x3_examples(gen):
    x = torch.randn(1, 2, 5, 6, generator=gen)
    ident = torch.zeros(2, 2, 3, 3)
    ident[0, 0, 1, 1] = ident[1, 1, 1, 1] = 1
    assert torch.equal(conv2d_3x3(x, ident), x)
    ones = conv2d_3x3(torch.ones(1, 1, 5, 5), torch.ones(1, 1, 3, 3))
    assert ones[0, 0, 2, 2] == 9
    assert ones[0, 0, 0, 0] == 4


def test_conv3x3_matches_hand_loop(gen):
    x = torch.randn(1, 2, 4, 5, generator=gen)
    k = torch.randn(3, 2, 3, 3, generator=gen)
    bias = torch.randn(3, generator=gen)
    pad = F.pad(x, (1, 1, 1, 1))
    ref = torch.zeros(1, 3, 4, 5)
    for o in range(3):
        for i in range(4):
            for j in range(5):
                ref[0, o, i, j] = (pad[0, :, i:i + 3, j:j + 3] * k[o]).sum() + bias[o]
    torch.testing.assert_close(conv2d_3x3(x, k, bias), ref, rtol=1e-12, atol=1e-12)


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 2 ** 31))
@settings(max_examples=30)
def test_conv3x3_is_linear(a, b, seed):
    g = torch.Generator().manual_seed(seed)
    x, y = torch.randn(1, 2, 5, 5, generator=g), torch.randn(1, 2, 5, 5, generator=g)
    k = torch.randn(3, 2, 3, 3, generator=g)
    lhs = conv2d_3x3(a * x + b * y, k)
    rhs = a * conv2d_3x3(x, k) + b * conv2d_3x3(y, k)
    assert float((lhs - rhs).abs().max()) < 1e-10


@given(small, small, small, st.integers(1, 9), st.integers(1, 9))
@settings(max_examples=30)
def test_conv_shapes(b, cin, cout, h, w):
    x = torch.zeros(b, cin, h, w)
    assert conv2d_3x3(x, torch.zeros(cout, cin, 3, 3)).shape == (b, cout, h, w)
    assert conv2d_1x1(x, torch.zeros(cout, cin)).shape == (b, cout, h, w)
    assert conv2d_3x3(x, torch.zeros(cout, cin, 3, 3), stride=2).shape == (b, cout, (h + 1) // 2, (w + 1) // 2)


def test_conv_shape_errors():
    with pytest.raises(ShapeError):
        conv2d_3x3(torch.zeros(1, 2, 4, 4), torch.zeros(3, 3, 3, 3))
    with pytest.raises(ShapeError):
        conv2d_3x3(torch.zeros(1, 2, 4, 4), torch.zeros(3, 2, 3, 3), torch.zeros(2))


# -- upsampling ---------------------------------------------------------------

def test_upsample_examples():
    c = torch.full((2, 3, 3), 0.7)
    for mode in ("bilinear", "nearest"):
        assert torch.equal(upsample2x(c, mode), torch.full((2, 6, 6), 0.7))
    ramp = upsample2x(tensor([[0.0, 1.0]]))
    assert ramp.tolist() == [[0, 0.25, 0.75, 1.0]] * 2
    a, b = 3.0, -1.0
    assert upsample2x(tensor([[a, b]]), "nearest").tolist() == [[a, a, b, b]] * 2


def test_bilinear_matches_half_pixel_interpolation(gen):
    x = torch.randn(2, 3, 4, 5, generator=gen)
    ref = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
    torch.testing.assert_close(upsample2x(x), ref, rtol=1e-12, atol=1e-12)


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2 ** 31))
@settings(max_examples=40)
def test_bilinear_preserves_bounds(h, w, seed):
    x = torch.randn(h, w, generator=torch.Generator().manual_seed(seed))
    y = upsample2x(x)
    assert y.shape == (2 * h, 2 * w)
    assert float(y.min()) >= float(x.min()) - 1e-12
    assert float(y.max()) <= float(x.max()) + 1e-12


def test_resize_to():
    x = torch.ones(1, 2, 3)
    assert resize_to(x, (8, 12)).shape == (1, 8, 12)
    with pytest.raises(ShapeError):
        resize_to(x, (6, 9))


# -- gradients ----------------------------------------------------------------

def test_backward_examples(gen):
    x = torch.randn(5, generator=gen, requires_grad=True)
    backward((x ** 2).sum())
    torch.testing.assert_close(x.grad, 2 * x.detach())

    logits = torch.randn(6, generator=gen, requires_grad=True)
    label = 2
    backward(-torch.log(softmax(logits))[label])
    onehot = torch.zeros(6)
    onehot[label] = 1
    torch.testing.assert_close(logits.grad, softmax(logits).detach() - onehot, rtol=1e-12, atol=1e-12)
    report = finite_diff_check(lambda z: -torch.log(softmax(z))[label], logits.detach())
    assert report.passed

    y = torch.randn(3, generator=gen, requires_grad=True)
    const = torch.randn(3, generator=gen)
    backward((y * 2).sum() + (const ** 2).sum())
    assert torch.equal(y.grad, torch.full((3,), 2.0))


def test_backward_requires_scalar():
    with pytest.raises(ShapeError):
        backward(torch.ones(2, requires_grad=True) * 2)


def test_gradients_accumulate_until_zeroed():
    x = tensor([1.0, 2.0], requires_grad=True)
    backward((x * 3).sum())
    backward((x * 3).sum())
    assert x.grad.tolist() == [6, 6]
    zero_grad([x])
    assert x.grad is None or x.grad.abs().sum() == 0


def test_finite_diff_check_examples(gen):
    x = torch.randn(7, generator=gen)
    assert finite_diff_check(lambda z: (z ** 2).sum(), x, tol=1e-6).passed
    bad = finite_diff_check(lambda z: (z ** 2).sum(), x, grad_fn=lambda f, z: 2 * z * 1.01)
    assert not bad.passed


OPS = {
    "softmax": (lambda g: torch.randn(3, 5, generator=g), lambda x, g: (softmax(x) * torch.arange(5.0)).sum()),
    "layer_norm": (lambda g: torch.randn(2, 6, generator=g),
                   lambda x, g: (layer_norm(x, torch.linspace(0.5, 2, 6), torch.linspace(-1, 1, 6)) ** 3).sum()),
    "matmul": (lambda g: torch.randn(2, 3, 4, generator=g),
               lambda x, g: (matmul(x, torch.linspace(-1, 1, 20).reshape(4, 5)) ** 2).sum()),
    "conv2d_3x3": (lambda g: torch.randn(1, 2, 4, 4, generator=g),
                   lambda x, g: (conv2d_3x3(x, torch.linspace(-1, 1, 54).reshape(3, 2, 3, 3)) ** 2).sum()),
    "conv2d_1x1": (lambda g: torch.randn(1, 3, 3, 3, generator=g),
                   lambda x, g: (conv2d_1x1(x, torch.linspace(-1, 1, 6).reshape(2, 3)) ** 2).sum()),
    "upsample2x": (lambda g: torch.randn(1, 3, 3, generator=g),
                   lambda x, g: (upsample2x(x) ** 2 * torch.linspace(0, 1, 36).reshape(1, 6, 6)).sum()),
}


@pytest.mark.parametrize("op", sorted(OPS))
def test_each_op_passes_gradient_check(op):
    make, f = OPS[op]
    for seed in range(10):
        g = torch.Generator().manual_seed(seed)
        report = finite_diff_check(lambda x: f(x, g), make(g), tol=1e-4)
        assert report.passed, f"{op} seed {seed}: {report.max_rel_error}"


# -- precision flag -----------------------------------------------------------

def test_precision_flag():
    assert get_dtype() == torch.float64
    with precision("float32"):
        assert get_dtype() == torch.float32
        assert tensor([1.0]).dtype == torch.float32
    assert get_dtype() == torch.float64
    with pytest.raises(ValueError):
        set_precision("float16")
