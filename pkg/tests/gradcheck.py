"""Randomized finite-difference checks shared by the layer tests and the acceptance run."""

import numpy as np

from cafnet import layers as L
from cafnet.networks import architecture, build_network
from oracles import numeric_gradient, relative_error

H = 1e-5


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def check_layer(layer, x, params=(), mode=L.TRAIN, rng=None):
    """Max relative error over d/dx and d/dparams of sum(forward(x) * r)."""
    rng = rng or np.random.default_rng(0)
    r = rng.standard_normal(layer.forward(x, mode).shape)

    def loss():
        return float(np.sum(layer.forward(x, mode) * r))

    layer.forward(x, mode)
    gx = layer.backward(r)
    analytic = {"x": gx, **{p: layer.grads[p].copy() for p in params}}
    errors = [relative_error(analytic["x"], numeric_gradient(loss, x, H))]
    for p in params:
        errors.append(relative_error(analytic[p], numeric_gradient(loss, layer.params[p], H)))
    return max(errors)


def conv_cases(n_cases, seed=0):
    rng = np.random.default_rng(seed)
    for i in range(n_cases):
        k = int(rng.choice([1, 3, 5]))
        stride = int(rng.choice([1, 2]))
        pad = int(rng.integers(0, k // 2 + 1))
        cin, cout = (1, 1) if i % 5 == 0 else (int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        stride = 1 if i % 5 == 0 else stride
        size = int(rng.integers(k, k + 5))
        size += (size + 2 * pad - k) % stride
        layout = L.CNHW if i % 3 == 1 else L.NCHW
        x = rng.standard_normal((int(rng.integers(1, 4)), cin, size, size))
        if layout == L.CNHW:
            x = np.ascontiguousarray(x.transpose(1, 0, 2, 3))
        yield L.Conv2D(rng.standard_normal((cout, cin, k, k)), stride, pad, layout=layout), x, rng


def bn_cases(n_cases, seed=1):
    rng = np.random.default_rng(seed)
    for i in range(n_cases):
        c = int(rng.integers(1, 4))
        layout = L.CNHW if i % 2 else L.NCHW
        shape = (int(rng.integers(2, 4)), c, int(rng.integers(1, 4)), int(rng.integers(1, 4)))
        if shape[0] * shape[2] * shape[3] < 2:
            shape = (2,) + shape[1:]
        x = rng.standard_normal(shape) * rng.uniform(0.5, 3) + rng.uniform(-2, 2)
        if layout == L.CNHW:
            x = np.ascontiguousarray(x.transpose(1, 0, 2, 3))
        bn = L.BatchNorm2D(c, layout=layout)
        bn.gamma[:] = rng.uniform(0.5, 2, c)
        bn.beta[:] = rng.standard_normal(c)
        mode = L.INFERENCE if i % 4 == 3 else L.TRAIN
        if mode == L.INFERENCE:
            bn.running_mean[:] = rng.standard_normal(c)
            bn.running_var[:] = rng.uniform(0.5, 2, c)
        yield bn, x, mode, rng


def check_all_layers(n_cases=20):
    """``{layer name: (cases, worst relative error)}`` over randomized small shapes."""
    out = {}
    out["Conv2D"] = (n_cases, max(check_layer(layer, x, ("weight",), rng=rng) for layer, x, rng in conv_cases(n_cases)))
    out["BatchNorm2D"] = (n_cases, max(
        check_layer(bn, x, ("gamma", "beta"), mode, rng) for bn, x, mode, rng in bn_cases(n_cases)
    ))
    rng = np.random.default_rng(2)
    errs = [check_layer(L.ReLU(), _away_from_zero(rng, tuple(rng.integers(1, 5, 4))), rng=rng) for _ in range(n_cases)]
    out["ReLU"] = (n_cases, max(errs))
    errs = []
    for _ in range(n_cases):
        k = int(rng.choice([1, 2, 3]))
        shape = (int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(k, 3 * k + 2)), int(rng.integers(k, 3 * k + 2)))
        errs.append(check_layer(L.AvgPool2D(k), rng.standard_normal(shape), rng=rng))
    out["AvgPool2D"] = (n_cases, max(errs))
    errs = []
    for i in range(n_cases):
        layout = L.CNHW if i % 2 else L.NCHW
        errs.append(check_layer(L.GlobalAvgPool(layout), rng.standard_normal(tuple(rng.integers(1, 5, 4))), rng=rng))
    out["GlobalAvgPool"] = (n_cases, max(errs))
    errs = []
    for _ in range(n_cases):
        n_in, n_out = int(rng.integers(1, 10)), int(rng.integers(1, 6))
        dense = L.Dense(rng.standard_normal((n_out, n_in)), rng.standard_normal(n_out))
        errs.append(check_layer(dense, rng.standard_normal((int(rng.integers(1, 5)), n_in)), ("weight", "bias"), rng=rng))
    out["Dense"] = (n_cases, max(errs))
    errs = []
    for _ in range(n_cases):
        n, c = int(rng.integers(1, 6)), int(rng.integers(2, 7))
        logits = rng.standard_normal((n, c)) * 3
        labels = rng.integers(0, c, n)
        _, grad = L.softmax_cross_entropy(logits, labels)
        num = numeric_gradient(lambda: L.softmax_cross_entropy(logits, labels)[0], logits, H)
        errs.append(relative_error(grad, num))
    out["SoftmaxCrossEntropy"] = (n_cases, max(errs))
    return out


def shrunken_network(tag, seed=0, n_classes=3):
    return build_network(architecture(tag, unit_channels=(2, 3), input_size=8), n_classes, seed)


def check_network(tag, seed=0):
    """Worst relative error over every trainable tensor of a two-unit network on an 8x8 input."""
    rng = np.random.default_rng(seed)
    net = shrunken_network(tag, seed)
    x = rng.standard_normal((4, 1, 8, 8))
    y = np.array([0, 1, 2, 1])

    def loss():
        return L.softmax_cross_entropy(net.forward(x, L.TRAIN), y)[0]

    _, g = L.softmax_cross_entropy(net.forward(x, L.TRAIN), y)
    analytic = {k: v.copy() for k, v in net.backward(g).items()}
    params = net.trainable()
    return max(relative_error(analytic[name], numeric_gradient(loss, params[name], H)) for name in params)
