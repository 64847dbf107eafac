"""Dense feed-forward networks with sigmoid hidden layers and a linear output.

All trainers share a single flat parameter vector.  Its layout is fixed:
layer-major, and within each layer the weight matrix (``out x in``, row-major)
precedes the bias vector.  Because the layout never changes, subset indices
are stable across runs and per-layer attribution is an index-range lookup.
"""
import json
from dataclasses import dataclass

import numpy as np

from ._backend import kernels
from .errors import ContractError


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture of an MLP.

    Parameters
    ----------
    layer_widths : tuple of int
        ``(input, hidden..., output)``; at least one hidden layer.
    activation : str
        Hidden-layer activation; only ``"sigmoid"`` is supported.  The output
        layer is always linear.
    """

    layer_widths: tuple
    activation: str = "sigmoid"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 3:
            raise ContractError("layer_widths needs input, >=1 hidden and output entries")
        if any(w <= 0 for w in widths):
            raise ContractError(f"layer widths must be positive, got {widths}")
        if self.activation != "sigmoid":
            raise ContractError(f"unsupported activation {self.activation!r}")

    @property
    def n_in(self):
        return self.layer_widths[0]

    @property
    def n_out(self):
        return self.layer_widths[-1]

    @property
    def n_params(self):
        return param_count(self)

    def layer_ranges(self):
        """``[(start, stop), ...]`` index range of each weight layer (weights and bias)."""
        ranges = []
        off = 0
        for n_in, n_out in zip(self.layer_widths[:-1], self.layer_widths[1:]):
            ranges.append((off, off + (n_in + 1) * n_out))
            off += (n_in + 1) * n_out
        return ranges

    def to_dict(self):
        return {"layer_widths": list(self.layer_widths), "activation": self.activation}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["layer_widths"]), d.get("activation", "sigmoid"))


def param_count(spec):
    """Number of parameters: sum of ``(in + 1) * out`` over consecutive layers."""
    w = spec.layer_widths
    return sum((a + 1) * b for a, b in zip(w[:-1], w[1:]))


def unflatten(spec, params):
    """Split a flat vector into ``[(W, b), ...]`` views, ``W`` shaped ``(out, in)``."""
    params = _check_params(spec, params)
    layers = []
    for (start, _), n_in, n_out in zip(spec.layer_ranges(), spec.layer_widths[:-1],
                                       spec.layer_widths[1:]):
        W = params[start:start + n_in * n_out].reshape(n_out, n_in)
        b = params[start + n_in * n_out:start + (n_in + 1) * n_out]
        layers.append((W, b))
    return layers


def flatten(spec, layers):
    """Inverse of :func:`unflatten`."""
    parts = []
    for (W, b), n_in, n_out in zip(layers, spec.layer_widths[:-1], spec.layer_widths[1:]):
        W = np.asarray(W, dtype=float)
        b = np.asarray(b, dtype=float)
        if W.shape != (n_out, n_in) or b.shape != (n_out,):
            raise ContractError(f"layer shapes {W.shape}, {b.shape} do not match ({n_out}, {n_in})")
        parts.extend([W.ravel(), b])
    if len(parts) != 2 * (len(spec.layer_widths) - 1):
        raise ContractError("wrong number of layers")
    return np.concatenate(parts)


def init_params(spec, seed):
    """Glorot-uniform weights, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    layers = []
    for n_in, n_out in zip(spec.layer_widths[:-1], spec.layer_widths[1:]):
        bound = np.sqrt(6.0 / (n_in + n_out))
        layers.append((rng.uniform(-bound, bound, size=(n_out, n_in)), np.zeros(n_out)))
    return flatten(spec, layers)


def _check_params(spec, params):
    params = np.ascontiguousarray(params, dtype=float)
    if params.ndim != 1 or params.shape[0] != spec.n_params:
        raise ContractError(f"expected {spec.n_params} parameters, got shape {params.shape}")
    return params


def _check_input(spec, x):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    X = np.ascontiguousarray(np.atleast_2d(x))
    if X.ndim != 2 or X.shape[1] != spec.n_in:
        raise ContractError(f"input width {X.shape[-1]} does not match network input {spec.n_in}")
    return X, single


def forward(spec, params, x):
    """Evaluate the network on one input (1-D) or a batch (rows of a 2-D array)."""
    params = _check_params(spec, params)
    X, single = _check_input(spec, x)
    a = X
    layers = unflatten(spec, params)
    for W, b in layers[:-1]:
        a = 0.5 * (1.0 + np.tanh(0.5 * (a @ W.T + b)))
    W, b = layers[-1]
    Y = a @ W.T + b
    return Y[0] if single else Y


def jacobian_params(spec, params, x):
    """Jacobian of the outputs with respect to the flat parameters.

    Returns shape ``(n_out, n_params)`` for a single input or
    ``(N, n_out, n_params)`` for a batch.
    """
    params = _check_params(spec, params)
    X, single = _check_input(spec, x)
    _, Jp, _ = kernels.mlp_eval_jac(spec.layer_widths, params, X, True, False)
    return Jp[0] if single else Jp


def jacobian_input(spec, params, x):
    """Jacobian of the outputs with respect to the inputs, ``(n_out, n_in)`` per row."""
    params = _check_params(spec, params)
    X, single = _check_input(spec, x)
    _, _, Jx = kernels.mlp_eval_jac(spec.layer_widths, params, X, False, True)
    return Jx[0] if single else Jx


def vjp_params(spec, params, X, G):
    """Sum over the batch of ``J_i^T g_i`` (reverse-mode), without forming ``J``.

    Parameters
    ----------
    X : ndarray, shape (N, n_in)
    G : ndarray, shape (N, n_out)
        Output cotangents.

    Returns
    -------
    grad_params : ndarray, shape (n_params,)
    grad_inputs : ndarray, shape (N, n_in)
    """
    params = _check_params(spec, params)
    layers = unflatten(spec, params)
    acts = [X]
    a = X
    for W, b in layers[:-1]:
        a = 0.5 * (1.0 + np.tanh(0.5 * (a @ W.T + b)))
        acts.append(a)
    out = np.empty_like(params)
    delta = G
    for layer in range(len(layers) - 1, -1, -1):
        W, _ = layers[layer]
        start, _ = spec.layer_ranges()[layer]
        n_o, n_i = W.shape
        a_prev = acts[layer]
        out[start:start + n_o * n_i] = (delta.T @ a_prev).ravel()
        out[start + n_o * n_i:start + n_o * n_i + n_o] = delta.sum(axis=0)
        delta = delta @ W
        if layer > 0:
            delta = delta * a_prev * (1.0 - a_prev)
    return out, delta


def params_to_json(spec, params):
    """Serialize spec and parameters; Python float repr round-trips exactly."""
    params = _check_params(spec, params)
    return json.dumps({"spec": spec.to_dict(), "params": [float(v) for v in params]})


def params_from_json(text):
    d = json.loads(text)
    spec = NetworkSpec.from_dict(d["spec"])
    return spec, _check_params(spec, np.array(d["params"], dtype=float))


def save_params(path, spec, params):
    with open(path, "w") as f:
        f.write(params_to_json(spec, params))


def load_params(path):
    with open(path) as f:
        return params_from_json(f.read())
