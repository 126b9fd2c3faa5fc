"""Small parameter-dict helpers shared by the encoder networks.

Parameters live as plain numpy arrays in flat {name: array} dicts owned by
the model objects; lift() turns them into named tape leaves when a forward
pass is recorded, and the optimizer writes updated arrays back by name.
"""

import numpy as np

from . import autodiff as ad


def init_linear(rng, fan_in, fan_out, scale=None):
    """He-style init; returns (W, b) with W of shape (fan_in, fan_out)."""
    if scale is None:
        scale = np.sqrt(2.0 / fan_in)
    w = rng.standard_normal((fan_in, fan_out)) * scale
    b = np.zeros(fan_out)
    return w, b


def init_mlp(rng, sizes, prefix):
    """Stack of linear layers named {prefix}.w0, {prefix}.b0, ..."""
    params = {}
    for i, (m, n) in enumerate(zip(sizes[:-1], sizes[1:])):
        w, b = init_linear(rng, m, n)
        params[f"{prefix}.w{i}"] = w
        params[f"{prefix}.b{i}"] = b
    return params


def lift(tape, params):
    """Create one named leaf per parameter; returns {name: Tensor}."""
    return {k: tape.leaf(k, v) for k, v in params.items()}


def linear(x, w, b):
    return ad.matmul(x, w) + b.reshape(1, b.shape[0])


def mlp_apply(leaves, prefix, x, hidden_act=ad.tanh, out_act=None):
    """Run the MLP named by `prefix` over x of shape (N, fan_in)."""
    i = 0
    while f"{prefix}.w{i + 1}" in leaves:
        x = hidden_act(linear(x, leaves[f"{prefix}.w{i}"], leaves[f"{prefix}.b{i}"]))
        i += 1
    x = linear(x, leaves[f"{prefix}.w{i}"], leaves[f"{prefix}.b{i}"])
    if out_act is not None:
        x = out_act(x)
    return x


def mlp_width(params, prefix):
    return params[f"{prefix}.w0"].shape[1]


# frequencies are powers of two as in standard coordinate encodings
def posenc_np(x, n_freq):
    """[x, sin(2^k x), cos(2^k x)] along the last axis, k = 0..n_freq-1."""
    parts = [x]
    for k in range(n_freq):
        s = (2.0 ** k) * x
        parts.append(np.sin(s))
        parts.append(np.cos(s))
    return np.concatenate(parts, axis=-1)


def posenc_t(x, n_freq):
    """Tape version of posenc_np; gradients flow back into x."""
    parts = [x]
    for k in range(n_freq):
        s = x * (2.0 ** k)
        parts.append(ad.sin(s))
        parts.append(ad.cos(s))
    return ad.concat(parts, axis=-1)


def posenc_dim(d, n_freq):
    return d * (1 + 2 * n_freq)
