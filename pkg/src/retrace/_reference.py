"""Pure-numpy batch kernels (reference backend).

Two model classes share the interface:

* generalized linear models ("glm"): scalar output o = theta . x, no bias;
* multilayer perceptrons ("mlp"): tanh hidden layers, linear scalar output,
  parameters packed layer by layer as (W row-major, then b).

Both support two heads on the scalar output o:

* head 0, squared error:        l = 0.5 * (o - y)^2
* head 1, binary cross-entropy: l = softplus(o) - y * o   (y in {0, 1})

Each kernel reduces over the whole batch in one call; per-sample wrappers
live in :mod:`retrace.models`. The compiled backend in ``_kernels.pyx``
implements the same signatures.
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "python"

HEAD_SQUARED = 0
HEAD_BINARY_CE = 1


def _sigmoid(o):
    # branch on sign to avoid overflow in exp
    out = np.empty_like(o)
    pos = o >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-o[pos]))
    e = np.exp(o[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _head_value(o, y, head):
    if head == HEAD_SQUARED:
        return 0.5 * (o - y) ** 2
    return np.logaddexp(0.0, o) - y * o


def _head_d1(o, y, head):
    if head == HEAD_SQUARED:
        return o - y
    return _sigmoid(o) - y


def _head_d2(o, y, head):
    if head == HEAD_SQUARED:
        return np.ones_like(o)
    s = _sigmoid(o)
    return s * (1.0 - s)


# ----------------------------------------------------------------------
# generalized linear models
# ----------------------------------------------------------------------

def glm_losses(theta, X, y, head):
    return _head_value(X @ theta, y, head)


def glm_weighted_grad(theta, X, y, w, head):
    return X.T @ (w * _head_d1(X @ theta, y, head))


def glm_grad_dots(theta, X, y, v, head):
    return _head_d1(X @ theta, y, head) * (X @ v)


def glm_hvp_sum(theta, X, y, v, w, head):
    o = X @ theta
    return X.T @ (w * _head_d2(o, y, head) * (X @ v))


# ----------------------------------------------------------------------
# multilayer perceptrons
# ----------------------------------------------------------------------

def mlp_unpack(theta, widths):
    """Split a packed parameter vector into per-layer (W, b) views."""
    layers = []
    off = 0
    for l in range(1, len(widths)):
        n_in, n_out = int(widths[l - 1]), int(widths[l])
        W = theta[off:off + n_out * n_in].reshape(n_out, n_in)
        off += n_out * n_in
        b = theta[off:off + n_out]
        off += n_out
        layers.append((W, b))
    return layers


def mlp_pack(parts, widths):
    """Inverse of :func:`mlp_unpack`."""
    return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in parts])


def _mlp_forward(theta, widths, X):
    """Return (activations, output): activations[0] is X, activations[l] the
    tanh output of layer l for l < L; output is the linear last-layer value."""
    layers = mlp_unpack(theta, widths)
    acts = [X]
    a = X
    for l, (W, b) in enumerate(layers):
        z = a @ W.T + b
        if l < len(layers) - 1:
            a = np.tanh(z)
            acts.append(a)
        else:
            return layers, acts, z[:, 0]
    # zero hidden layers cannot happen: widths has >= 2 entries and the loop
    # returns on the last one
    raise AssertionError("unreachable")


def mlp_losses(theta, widths, head, X, y):
    _, _, o = _mlp_forward(theta, widths, X)
    return _head_value(o, y, head)


def mlp_weighted_grad(theta, widths, head, X, y, w):
    layers, acts, o = _mlp_forward(theta, widths, X)
    L = len(layers)
    delta = (w * _head_d1(o, y, head))[:, None]
    grads_W = [None] * L
    grads_b = [None] * L
    for l in range(L - 1, -1, -1):
        W, _ = layers[l]
        grads_W[l] = delta.T @ acts[l]
        grads_b[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ W) * (1.0 - acts[l] ** 2)
    return mlp_pack(list(zip(grads_W, grads_b)), widths)


def mlp_grad_dots(theta, widths, head, X, y, v):
    layers, acts, o = _mlp_forward(theta, widths, X)
    tangents = mlp_unpack(v, widths)
    L = len(layers)
    ra = np.zeros_like(X)
    rz = None
    for l in range(L):
        W, _ = layers[l]
        V, c = tangents[l]
        rz = ra @ W.T + acts[l] @ V.T + c
        if l < L - 1:
            ra = (1.0 - acts[l + 1] ** 2) * rz
    return _head_d1(o, y, head) * rz[:, 0]


def mlp_hvp_sum(theta, widths, head, X, y, v, w):
    layers, acts, o = _mlp_forward(theta, widths, X)
    tangents = mlp_unpack(v, widths)
    L = len(layers)

    # forward tangent sweep, keeping rz per layer and ra per activation
    ras = [np.zeros_like(X)]
    rzs = []
    for l in range(L):
        W, _ = layers[l]
        V, c = tangents[l]
        rz = ras[l] @ W.T + acts[l] @ V.T + c
        rzs.append(rz)
        if l < L - 1:
            ras.append((1.0 - acts[l + 1] ** 2) * rz)

    d1 = _head_d1(o, y, head)
    d2 = _head_d2(o, y, head)
    delta = (w * d1)[:, None]
    rdelta = (w * d2 * rzs[-1][:, 0])[:, None]

    hw = [None] * L
    hb = [None] * L
    for l in range(L - 1, -1, -1):
        W, _ = layers[l]
        V, _ = tangents[l]
        hw[l] = rdelta.T @ acts[l] + delta.T @ ras[l]
        hb[l] = rdelta.sum(axis=0)
        if l > 0:
            a = acts[l]
            sp = 1.0 - a ** 2
            s = delta @ W
            rs = delta @ V + rdelta @ W
            rdelta = rs * sp + s * (-2.0 * a * sp * rzs[l - 1])
            delta = s * sp
    return mlp_pack(list(zip(hw, hb)), widths)
