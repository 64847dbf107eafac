"""Uniform predictor interface over the direct MLP and the neural ODE.

A predictor maps a batch ``(x0, u)`` to trajectories of shape
``(N, horizon, n_y)`` and supplies the parameter Jacobian (rows ordered
sample-major, output-minor) and reverse-mode vector-Jacobian products.
"""
import numpy as np

from .nn_core import NetworkSpec, forward, init_params, jacobian_params, vjp_params
from .node_model import NodeSpec, horizon_vjp, predict_and_jacobian, predict_horizon


class MlpPredictor:
    """Direct multi-step MLP: input ``[x0, u.ravel()]``, output the flattened horizon."""

    kind = "mlp"

    def __init__(self, spec, horizon, n_y=1):
        if spec.n_out != horizon * n_y:
            raise ValueError(f"MLP output width {spec.n_out} != horizon * n_y = {horizon * n_y}")
        self.spec = spec
        self.horizon = horizon
        self.n_y = n_y

    @property
    def n_params(self):
        return self.spec.n_params

    @property
    def net(self):
        return self.spec

    def init(self, seed):
        return init_params(self.spec, seed)

    def _inputs(self, x0, u):
        return np.ascontiguousarray(np.concatenate([x0, u.reshape(u.shape[0], -1)], axis=1))

    def predict(self, params, x0, u):
        Y = forward(self.spec, params, self._inputs(x0, u))
        return Y.reshape(-1, self.horizon, self.n_y)

    def jacobian(self, params, x0, u):
        X = self._inputs(x0, u)
        return self.predict(params, x0, u), jacobian_params(self.spec, params, X)

    def vjp(self, params, x0, u, cotangent):
        X = self._inputs(x0, u)
        pred = self.predict(params, x0, u)
        g, _ = vjp_params(self.spec, params, X, cotangent.reshape(X.shape[0], -1))
        return pred, g

    def to_dict(self):
        return {"kind": self.kind, "spec": self.spec.to_dict(), "horizon": self.horizon,
                "n_y": self.n_y}


class NodePredictor:
    """Neural-ODE roll-out; targets are the full state trajectory."""

    kind = "node"

    def __init__(self, node_spec):
        self.node = node_spec
        self.horizon = node_spec.horizon
        self.n_y = node_spec.n_x

    @property
    def n_params(self):
        return self.node.n_params

    @property
    def net(self):
        return self.node.core

    def init(self, seed):
        return init_params(self.node.core, seed)

    def predict(self, params, x0, u):
        return predict_horizon(self.node, params, x0, u)

    def jacobian(self, params, x0, u):
        return predict_and_jacobian(self.node, params, x0, u)

    def vjp(self, params, x0, u, cotangent):
        return horizon_vjp(self.node, params, x0, u, cotangent)

    def to_dict(self):
        return {"kind": self.kind, "node": self.node.to_dict()}


def predictor_from_dict(d):
    if d["kind"] == "mlp":
        return MlpPredictor(NetworkSpec.from_dict(d["spec"]), d["horizon"], d["n_y"])
    if d["kind"] == "node":
        return NodePredictor(NodeSpec.from_dict(d["node"]))
    raise ValueError(f"unknown predictor kind {d['kind']!r}")
