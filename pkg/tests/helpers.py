"""Finite-difference oracles shared by the gradient tests."""

import numpy as np


def central_diff(f, x, step=1e-6):
    """Gradient of scalar ``f`` w.r.t. array ``x`` (perturbed in place, restored)."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        g[i] = (hi - lo) / (2 * step)
    return grad


def max_rel_err(analytic, numeric):
    """Elementwise ``|a - n| / max(1, |a|)``, maximised."""
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    if analytic.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))


def layer_gradcheck(layer, x, rng, training=True, step=1e-6, seed=123):
    """Compare a layer's analytic input/parameter gradients with central differences.

    The scalar objective is ``sum(out * R)`` for a fixed random ``R``; dropout
    masks are frozen by reseeding the rng on every forward pass.
    """
    out = layer.forward(x, training=training, rng=np.random.default_rng(seed))
    weights = rng.standard_normal(out.shape)

    def objective():
        return float(np.sum(layer.forward(x, training=training, rng=np.random.default_rng(seed)) * weights))

    layer.forward(x, training=training, rng=np.random.default_rng(seed))
    grad_in = layer.backward(weights)
    analytic = {key: g.copy() for key, g in layer.grads.items()}
    errors = {"input": max_rel_err(grad_in, central_diff(objective, x, step))}
    for key, param in layer.params.items():
        errors[key] = max_rel_err(analytic[key], central_diff(objective, param, step))
    return errors


SELU_ALPHA = 1.6732632423543772
SELU_LAMBDA = 1.0507009873554805


def _selu(x):
    return SELU_LAMBDA * np.where(x > 0, x, SELU_ALPHA * (np.exp(np.minimum(x, 0)) - 1))


def _softmax(x):
    e = np.exp(x - x.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def fcn_arrays(net):
    """Dense/BatchNorm arrays of a canonical FCN network, in layer order."""
    out = []
    for layer in net.layers:
        if layer.kind == "Dense":
            out.append(("dense", layer.params["weight"], layer.params["bias"]))
        elif layer.kind == "BatchNorm":
            out.append(("bn", layer.params["gamma"], layer.params["beta"],
                        layer.stats["moving_mean"], layer.stats["moving_var"], layer.eps))
    return out


def oracle_forward(sfe_per_position, psc, patches, training, pooled=True):
    """Straight-line re-implementation of the patch composition (dropout off).

    ``sfe_per_position`` holds one ``fcn_arrays`` list per patch position, so
    positions may carry different (untied) parameters. With ``pooled`` the
    training-mode batch statistics span all positions of the batch.
    """
    n, w = patches.shape[0], patches.shape[1]
    hs = [patches[:, k // w, k % w, :] for k in range(w * w)]
    n_stages = len(sfe_per_position[0])
    dense_seen = 0
    n_dense = sum(1 for a in sfe_per_position[0] if a[0] == "dense")
    for i in range(n_stages):
        kind = sfe_per_position[0][i][0]
        if kind == "dense":
            dense_seen += 1
            hs = [h @ arrs[i][1] + arrs[i][2] for h, arrs in zip(hs, sfe_per_position)]
            continue
        eps = sfe_per_position[0][i][5]
        if training and pooled:
            stacked = np.concatenate(hs, axis=0)
            mean, var = stacked.mean(axis=0), stacked.var(axis=0)
            stats = [(mean, var)] * len(hs)
        elif training:
            stats = [(h.mean(axis=0), h.var(axis=0)) for h in hs]
        else:
            stats = [(arrs[i][3], arrs[i][4]) for arrs in sfe_per_position]
        hs = [(h - m) / np.sqrt(v + eps) * arrs[i][1] + arrs[i][2]
              for h, (m, v), arrs in zip(hs, stats, sfe_per_position)]
        if dense_seen < n_dense:
            hs = [_selu(h) for h in hs]
    feats = np.concatenate([_softmax(h) for h in hs], axis=1)
    (_, v1, c1), (_, v2, c2) = psc
    return _softmax(_selu(feats @ v1 + c1) @ v2 + c2)
