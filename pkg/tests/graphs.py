"""Random differentiable graphs for the finite-difference oracle."""

import numpy as np

from tokenmark import numgrad as ng

N, C, H, W = 2, 2, 4, 4


def _leaf(rng, shape, scale=0.5):
    return ng.Tensor(rng.standard_normal(shape) * scale, requires_grad=True, dtype=np.float64)


def _ops(rng):
    """(name, builder) pairs; a builder returns (new leaves, fn h -> h)."""

    def conv(_):
        w = _leaf(rng, (C, C, 3, 3), 0.3)
        return [w], lambda h: ng.conv2d(h, w, None, stride=1, padding=1)

    def convt(_):
        w = _leaf(rng, (C, C, 3, 3), 0.3)
        b = _leaf(rng, (C,), 0.1)
        return [w, b], lambda h: ng.conv_transpose2d(h, w, b, stride=1, padding=1)

    def gn(_):
        g, b = _leaf(rng, (C,), 0.5), _leaf(rng, (C,), 0.5)
        groups = int(rng.choice([1, C]))
        return [g, b], lambda h: ng.group_norm(h, groups, g + 1.0, b)

    def scale(_):
        s = _leaf(rng, (1, C, 1, 1))
        return [s], lambda h: h * s + s

    def mm(_):
        m = _leaf(rng, (W, W), 0.4)
        return [m], lambda h: ng.matmul(h.reshape(N, C * H, W), m).reshape(N, C, H, W)

    def cat(_):
        return [], lambda h: ng.concat([h[:, :1] * 2.0, h[:, 1:]], axis=1)

    def unary(name):
        fn = {"sigmoid": ng.sigmoid, "silu": ng.silu, "tanh": ng.tanh}[name]
        return lambda _: ([], fn)

    def softmax(_):
        return [], lambda h: ng.softmax(h, -1) * 3.0

    def transpose(_):
        return [], lambda h: h.transpose(0, 1, 3, 2)

    def ln(_):
        g, b = _leaf(rng, (W,), 0.5), _leaf(rng, (W,), 0.5)
        return [g, b], lambda h: ng.layer_norm(h, g + 1.0, b)

    return [
        conv, convt, gn, scale, mm, cat, unary("sigmoid"), unary("silu"), unary("tanh"), softmax, transpose, ln,
    ]  # fmt: skip


def random_graph(seed: int):
    """Returns (f, leaves, depth): f() recomputes a scalar from the leaves."""
    rng = np.random.default_rng(seed)
    x = _leaf(rng, (N, C, H, W), 1.0)
    leaves = [x]
    ops = _ops(rng)
    depth = int(rng.integers(2, 7))
    fns = []
    for _ in range(depth):
        new, fn = ops[rng.integers(len(ops))](None)
        leaves += new
        fns.append(fn)
    r = rng.standard_normal((N, C, H, W))

    def f():
        h = x
        for fn in fns:
            h = fn(h)
        return (h * r).sum() + (h * h).mean()

    return f, leaves, depth


def n_params(leaves) -> int:
    return sum(leaf.size for leaf in leaves)
