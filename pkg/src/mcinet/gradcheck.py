"""Finite-difference gradient checking.

``grad_check`` compares an analytic backward pass against central differences
of the scalar ``L = sum(R * f(inputs))`` for a fixed random projection ``R``.
``layer_suite`` runs it over seeded random instances of every layer type.
"""
from __future__ import annotations

from typing import Callable, Dict

import numpy as np

from . import graph as G
from . import layers as L
from .layers import LayerParams


def relative_error(analytic, numeric) -> float:
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / np.maximum(1e-8, np.abs(a) + np.abs(n))))


def numeric_grad(loss: Callable[[], float], x: np.ndarray, eps: float) -> np.ndarray:
    """Central differences of ``loss()`` with respect to ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = loss()
        flat[i] = old - eps
        down = loss()
        flat[i] = old
        gflat[i] = (up - down) / (2.0 * eps)
    return g


def grad_check(fn, inputs: Dict[str, np.ndarray], eps: float = 1e-5, seed: int = 0) -> float:
    """Max relative error between analytic and numeric gradients.

    ``fn(**inputs)`` must return ``(out, backward)`` where ``backward(d_out)``
    maps each input name to its gradient. Inputs are perturbed in place and
    restored.
    """
    out, backward = fn(**inputs)
    proj = np.random.default_rng(seed).standard_normal(np.shape(out))

    def loss():
        return float(np.sum(proj * fn(**inputs)[0]))

    analytic = backward(proj)
    worst = 0.0
    for name, x in inputs.items():
        num = numeric_grad(loss, x, eps)
        worst = max(worst, relative_error(analytic[name], num))
    return worst


# -- per-layer closures --------------------------------------------------

def _conv_fn(stride, pad):
    def fn(x, w, b):
        y, cache = L.conv2d(x, LayerParams(w, b), stride, pad)

        def back(d):
            g = L.conv2d_backward(cache, d)
            return {"x": g.d_input, "w": g.d_weights, "b": g.d_bias}
        return y, back
    return fn


def _fc_fn(x, w, b):
    y, cache = L.fully_connected(x, LayerParams(w, b))

    def back(d):
        g = L.fully_connected_backward(cache, d)
        return {"x": g.d_input, "w": g.d_weights, "b": g.d_bias}
    return y, back


def _relu_fn(x):
    return L.relu(x), lambda d: {"x": L.relu_backward(x, d)}


def _maxpool_fn(k, s, pad):
    def fn(x):
        y, cache = L.maxpool(x, k, s, pad)
        return y, lambda d: {"x": L.maxpool_backward(cache, d)}
    return fn


def _lrn_fn(x):
    y, cache = L.local_response_norm(x)
    return y, lambda d: {"x": L.local_response_norm_backward(cache, d)}


def _bn_fn(x, gamma, beta):
    c = x.shape[1]
    p = LayerParams(gamma, beta, np.zeros(c), np.ones(c))
    y, cache = L.batch_norm(x, p, train=True, update_stats=False)

    def back(d):
        g = L.batch_norm_backward(cache, d)
        return {"x": g.d_input, "gamma": g.d_weights, "beta": g.d_bias}
    return y, back


def _gap_fn(x):
    y, shape = L.global_avg_pool(x)
    return y, lambda d: {"x": L.global_avg_pool_backward(shape, d)}


def _ce_fn(labels):
    def fn(logits):
        loss, probs = L.softmax_cross_entropy(logits, labels)
        return np.array(loss), lambda d: {
            "logits": float(d) * L.softmax_cross_entropy_backward(probs, labels)}
    return fn


def _concat_fn(a, b):
    y, sizes = L.concat_channels([a, b])

    def back(d):
        da, db = L.concat_channels_backward(sizes, d)
        return {"a": da, "b": db}
    return y, back


def _add_fn(a, b):
    def back(d):
        da, db = L.residual_add_backward(d)
        return {"a": da, "b": db}
    return L.residual_add(a, b), back


def _dropout_fn(seed):
    def fn(x):
        y, mask = L.dropout(x, 0.5, train=True, seed=seed)
        return y, lambda d: {"x": L.dropout_backward(mask, d)}
    return fn


def _away_from_zero(rng, shape, margin=1e-2):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin * 2, x)


def _distinct_values(rng, shape, gap=1e-2):
    # random permutation of well-separated values so every pooling max is unique
    n = int(np.prod(shape))
    vals = (rng.permutation(n) - n / 2) * gap + rng.uniform(0, gap / 10, size=n)
    return vals.reshape(shape)


def _small_shape(rng, min_hw=3):
    return (int(rng.integers(1, 3)), int(rng.integers(1, 5)),
            int(rng.integers(min_hw, 10)), int(rng.integers(min_hw, 10)))


def layer_instances(kind: str, rng: np.random.Generator):
    """One random (closure, inputs) instance of a layer type."""
    if kind == "conv":
        n, c, h, w = _small_shape(rng)
        k = int(rng.integers(1, min(h, w, 4) + 1))
        s, p = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        cout = int(rng.integers(1, 4))
        return _conv_fn(s, p), {"x": rng.standard_normal((n, c, h, w)),
                                "w": rng.standard_normal((cout, c, k, k)),
                                "b": rng.standard_normal(cout)}
    if kind == "fc":
        n, din, dout = (int(v) for v in rng.integers(1, 6, size=3))
        return _fc_fn, {"x": rng.standard_normal((n, din)),
                        "w": rng.standard_normal((dout, din)),
                        "b": rng.standard_normal(dout)}
    if kind == "relu":
        return _relu_fn, {"x": _away_from_zero(rng, _small_shape(rng))}
    if kind == "maxpool":
        shape = _small_shape(rng)
        k = int(rng.integers(2, 4))
        s = int(rng.integers(1, 3))
        p = int(rng.integers(0, 2)) if k >= 3 else 0
        return _maxpool_fn(k, s, p), {"x": _distinct_values(rng, shape)}
    if kind == "lrn":
        n, _, h, w = _small_shape(rng)
        return _lrn_fn, {"x": 3.0 * rng.standard_normal((n, int(rng.integers(1, 8)), h, w))}
    if kind == "batchnorm":
        n, c, h, w = _small_shape(rng)
        n = max(n, 2)
        return _bn_fn, {"x": rng.standard_normal((n, c, h, w)),
                        "gamma": rng.uniform(0.5, 1.5, c),
                        "beta": rng.standard_normal(c)}
    if kind == "gap":
        return _gap_fn, {"x": rng.standard_normal(_small_shape(rng))}
    if kind == "softmax_ce":
        n, k = int(rng.integers(1, 5)), int(rng.integers(2, 6))
        labels = rng.integers(0, k, size=n)
        return _ce_fn(labels), {"logits": rng.standard_normal((n, k))}
    if kind == "concat":
        n, c, h, w = _small_shape(rng)
        return _concat_fn, {"a": rng.standard_normal((n, c, h, w)),
                            "b": rng.standard_normal((n, int(rng.integers(1, 4)), h, w))}
    if kind == "residual_add":
        shape = _small_shape(rng)
        return _add_fn, {"a": rng.standard_normal(shape), "b": rng.standard_normal(shape)}
    if kind == "dropout":
        return _dropout_fn(int(rng.integers(1 << 31))), {"x": rng.standard_normal(_small_shape(rng))}
    raise KeyError(f"unknown layer kind {kind!r}")


LAYER_KINDS = ("conv", "fc", "relu", "maxpool", "lrn", "batchnorm", "gap",
               "softmax_ce", "concat", "residual_add", "dropout")


def layer_suite(instances: int = 20, seed: int = 0, kinds=LAYER_KINDS) -> Dict[str, float]:
    """Worst relative error per layer kind over seeded random instances."""
    results = {}
    for i, kind in enumerate(kinds):
        rng = np.random.default_rng([seed, i])
        worst = 0.0
        for _ in range(instances):
            fn, inputs = layer_instances(kind, rng)
            worst = max(worst, grad_check(fn, inputs, seed=int(rng.integers(1 << 31))))
        results[kind] = worst
    return results


def toy_graph_check(seed: int = 0) -> float:
    """Whole-graph gradient check on conv -> relu -> fc with a cross-entropy loss."""
    rng = np.random.default_rng(seed)
    g = G.ModelGraph((2, 6, 6), 3)
    g.add(G.LayerNode("conv", "conv", [], {"stride": 1, "pad": 1},
                        LayerParams(rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3))))
    g.add(G.LayerNode("relu", "relu", ["conv"]))
    g.add(G.LayerNode("fc", "fc", ["relu"], {},
                        LayerParams(rng.standard_normal((3, 108)) * 0.1, rng.standard_normal(3))))
    x = rng.standard_normal((2, 2, 6, 6))
    labels = np.array([0, 2])

    def fn(x, wc, bc, wf, bf):
        g.nodes["conv"].params = LayerParams(wc, bc)
        g.nodes["fc"].params = LayerParams(wf, bf)
        logits, cache = G.forward(g, x, "train")
        loss, probs = L.softmax_cross_entropy(logits, labels)

        def back(d):
            b = G.backward(g, cache, float(d) * L.softmax_cross_entropy_backward(probs, labels))
            return {"x": b[G.INPUT].d_input, "wc": b["conv"].d_weights, "bc": b["conv"].d_bias,
                    "wf": b["fc"].d_weights, "bf": b["fc"].d_bias}
        return np.array(loss), back

    p = {"x": x, "wc": g.nodes["conv"].params.weights, "bc": g.nodes["conv"].params.bias,
         "wf": g.nodes["fc"].params.weights, "bf": g.nodes["fc"].params.bias}
    return grad_check(fn, {k: v.copy() for k, v in p.items()}, seed=seed)
