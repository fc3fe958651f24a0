"""Independent oracles shared by the test modules."""

import numpy as np

from smmcl.nn_core import Batch, CosineClassifierNet


def central_diff(f, x0, eps=1e-5):
    """Central finite-difference gradient of scalar ``f`` at flat vector ``x0``."""
    x0 = np.array(x0, dtype=np.float64)
    g = np.zeros_like(x0)
    for i in range(x0.size):
        xp = x0.copy()
        xm = x0.copy()
        xp[i] += eps
        xm[i] -= eps
        g[i] = (f(xp) - f(xm)) / (2 * eps)
    return g


def rel_err(a, n, floor=1e-5):
    """Coordinate-wise |a - n| / max(|a|, |n|, floor)."""
    a, n = np.asarray(a), np.asarray(n)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def reference_forward(net: CosineClassifierNet, x):
    """Loop-based forward pass written without the library's vector helpers."""
    h = [float(v) for v in x]
    for i, act in enumerate(net.activations):
        w = net.params.segment(f"layer{i}.weight")
        b = net.params.segment(f"layer{i}.bias")
        out = []
        for r in range(w.shape[0]):
            z = b[r] + sum(w[r, c] * h[c] for c in range(len(h)))
            out.append(max(z, 0.0) if act == "relu" else z)
        h = out
    hn = sum(v * v for v in h) ** 0.5
    logits = []
    for c in net.class_ids:
        row = net.params.segment(f"head.{c}")
        rn = sum(v * v for v in row) ** 0.5
        logits.append(net.scale * sum(a * b for a, b in zip(h, row)) / (hn * rn))
    return np.array(h), np.array(logits)


def small_instance(rng, d_in=None, n_classes=None, batch=None, hidden=None, n_stored=0):
    """Random small network and batch (d <= 8, C <= 4, batch <= 8)."""
    d_in = d_in or int(rng.integers(2, 6))
    hidden = hidden if hidden is not None else tuple(int(v) for v in rng.integers(2, 6, size=int(rng.integers(1, 3))))
    embed = int(rng.integers(2, 7))
    net = CosineClassifierNet.create(d_in, hidden, embed, scale=float(rng.uniform(2, 16)), rng=rng)
    # random biases keep embeddings away from the origin, where normalization is not differentiable
    net = net.with_params(net.params.with_values(net.params.values + 0.1 * rng.normal(size=len(net.params))))
    n_classes = n_classes or int(rng.integers(2, 5))
    net = net.add_classes(list(range(n_classes)), rng.normal(size=(n_classes, embed)))
    b = batch or int(rng.integers(1, 9))
    x = rng.normal(size=(b, d_in))
    y = rng.integers(0, n_classes, size=b)
    stored = stored_y = None
    if n_stored:
        stored = rng.normal(size=(n_stored, embed))
        stored /= np.linalg.norm(stored, axis=1, keepdims=True)
        stored_y = rng.integers(0, n_classes, size=n_stored)
    return net, Batch(x, y, stored, stored_y)


def loss_instance(name: str, rng):
    """Random small network, batch and loss spec exercising loss ``name``."""
    from smmcl.losses import LossSpec, MarginConfig

    n_classes = int(rng.integers(2, 5))
    net, batch = small_instance(rng, n_classes=n_classes, n_stored=int(rng.integers(1, 5)))
    split = int(rng.integers(1, n_classes))
    old, new = frozenset(range(split)), frozenset(range(split, n_classes))
    anchor = net.params.with_values(net.params.values + 0.3 * rng.normal(size=len(net.params)))
    cfg = MarginConfig(margin=float(rng.uniform(0.1, 3.0)), lambda_margin=float(rng.uniform(0.1, 2.0)),
                       lambda_reg=float(rng.uniform(0.01, 1.0)))
    batch = Batch(batch.x, batch.labels, batch.stored_embeddings, batch.stored_labels, new, old)
    spec = LossSpec(name, cfg, anchor if name in ("reg", "total") else None, replay=name in ("ce", "total"))
    return net, batch, spec


def gradient_error(net, batch, spec, frozen=(), eps=1e-5, floor=1e-5):
    """Largest coordinate-wise relative error between analytic and central
    finite-difference gradients of ``backward``."""
    from smmcl.nn_core import backward

    _, g, _ = backward(net, batch, spec, frozen)

    def f(v):
        return backward(net.with_params(net.params.with_values(v)), batch, spec, frozen)[0]

    numeric = central_diff(f, net.params.values, eps)
    if frozen:
        numeric[net.params.mask(frozen)] = 0.0
    return float(np.max(rel_err(g.values, numeric, floor)))
