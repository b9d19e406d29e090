"""Small fully connected models with frozen base weights.

A layer computes ``act(feature(W, h) + b)`` where ``W`` is the effective
weight: the frozen ``w0``, its adapter merge ``R w0 D``, or the additive
baseline ``w0 + U V^T``. Only adapter / baseline parameters are trainable.

Feature rules for the first layer of the angle/magnitude study:

``inner``      ``<w_j, h>``
``cosine``     ``<w_j, h> / (|w_j| |h|)``
``magnitude``  ``|w_j| |h|``

Only ``inner`` is differentiable here; the other two are evaluation-only.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from .. import adapter as adp
from .. import grad as grd
from ..energy import compare_weights
from ..matcore import column_norms

ACTIVATIONS = ("linear", "relu")
FEATURES = ("inner", "cosine", "magnitude")


@dataclass(frozen=True, eq=False)
class LowRankDelta:
    """Additive rank-k update ``U V^T``; a minimal low-rank baseline.

    ``V`` starts at zero so the update begins as an exact no-op.
    """

    u: np.ndarray
    v: np.ndarray

    @classmethod
    def init(cls, d, n, rank, rng, scale=None):
        scale = 1.0 / np.sqrt(d) if scale is None else scale
        return cls(rng.normal(0.0, scale, (d, rank)), np.zeros((n, rank)))

    @property
    def num_params(self):
        return self.u.size + self.v.size

    def params(self):
        return np.concatenate([self.u.ravel(), self.v.ravel()])

    def with_params(self, vec):
        k = self.u.size
        return LowRankDelta(vec[:k].reshape(self.u.shape), vec[k:].reshape(self.v.shape))

    def delta(self):
        return self.u @ self.v.T

    def grad(self, g_w):
        return np.concatenate([(g_w @ self.v).ravel(), (g_w.T @ self.u).ravel()])


def _frozen(a):
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Layer:
    w0: np.ndarray
    bias: np.ndarray = None
    activation: str = "linear"
    adapter: adp.Adapter = None
    delta: LowRankDelta = None
    feature: str = "inner"

    def __post_init__(self):
        object.__setattr__(self, "w0", _frozen(self.w0))
        n = self.w0.shape[1]
        object.__setattr__(self, "bias", _frozen(np.zeros(n) if self.bias is None else self.bias))
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.feature not in FEATURES:
            raise ValueError(f"unknown feature rule {self.feature!r}")
        if self.adapter is not None and self.delta is not None:
            raise ValueError("a layer takes either an adapter or an additive delta, not both")

    @property
    def trainable(self):
        return self.adapter if self.adapter is not None else self.delta

    def weight(self):
        if self.adapter is not None:
            return adp.merge(self.adapter, self.w0)
        if self.delta is not None:
            return self.w0 + self.delta.delta()
        return self.w0

    def preact(self, w, h):
        if self.feature == "inner":
            pre = w.T @ h
        elif self.feature == "cosine":
            pre = (w.T @ h) / np.outer(column_norms(w), column_norms(h))
        else:
            pre = np.outer(column_norms(w), column_norms(h))
        return pre + self.bias[:, None]

    def act(self, pre):
        return np.maximum(pre, 0.0) if self.activation == "relu" else pre


@dataclass(frozen=True, eq=False)
class ToyModel:
    layers: tuple
    seed: int = 0
    task: str = ""
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))

    def forward(self, x):
        h = np.asarray(x, dtype=np.float64)
        for layer in self.layers:
            h = layer.act(layer.preact(layer.weight(), h))
        return h

    def adapted(self):
        """Indices of layers carrying trainable parameters."""
        return [i for i, layer in enumerate(self.layers) if layer.trainable is not None]

    def params(self):
        parts = [self.layers[i].trainable.params() for i in self.adapted()]
        return np.concatenate(parts) if parts else np.zeros(0)

    def with_params(self, vec):
        layers = list(self.layers)
        k = 0
        for i in self.adapted():
            layer = layers[i]
            m = layer.trainable.num_params
            if layer.adapter is not None:
                layers[i] = replace(layer, adapter=layer.adapter.with_params(vec[k:k + m]))
            else:
                layers[i] = replace(layer, delta=layer.delta.with_params(vec[k:k + m]))
            k += m
        return replace(self, layers=tuple(layers))

    def map_adapters(self, fn):
        layers = [replace(l, adapter=fn(l.adapter)) if l.adapter is not None else l for l in self.layers]
        return replace(self, layers=tuple(layers))

    def loss(self, x, y):
        r = self.forward(x) - y
        return 0.5 * float(np.sum(r * r)) / x.shape[1]

    def loss_and_grad(self, x, y, base=False):
        """Mean squared-error loss and its gradient.

        With ``base=True`` the gradient is over every layer's ``(w0, bias)``
        instead of the adapter parameters; used only for pretraining.
        """
        x = np.asarray(x, dtype=np.float64)
        hs, pres, ws = [x], [], []
        for layer in self.layers:
            if layer.feature != "inner":
                raise ValueError("only inner-product layers are differentiable")
            w = layer.weight()
            pre = layer.preact(w, hs[-1])
            ws.append(w)
            pres.append(pre)
            hs.append(layer.act(pre))
        batch = x.shape[1]
        r = hs[-1] - y
        value = 0.5 * float(np.sum(r * r)) / batch
        g_h = r / batch
        grads = {}
        for i in reversed(range(len(self.layers))):
            layer = self.layers[i]
            g_pre = g_h * (pres[i] > 0) if layer.activation == "relu" else g_h
            g_w = hs[i] @ g_pre.T
            if base:
                grads[i] = (g_w, g_pre.sum(axis=1))
            elif layer.adapter is not None:
                grads[i] = grd.merged_grad(layer.adapter, layer.w0, g_w)
            elif layer.delta is not None:
                grads[i] = layer.delta.grad(g_w)
            if i:
                g_h = ws[i] @ g_pre
        if base:
            return value, [grads[i] for i in range(len(self.layers))]
        parts = [grads[i] for i in self.adapted()]
        return value, (np.concatenate(parts) if parts else np.zeros(0))

    def energy_reports(self):
        return [compare_weights(self.layers[i].w0, self.layers[i].weight()) for i in self.adapted()]

    def deviations(self, i):
        """``(q_norm, r_dev)`` for adapted layer ``i``.

        For an additive layer both entries are ``||U V^T||_F``, the size of the
        weight update, since it has no rotation.
        """
        layer = self.layers[i]
        if layer.adapter is not None:
            t = layer.adapter.transform
            return t.q_norm(), float(np.linalg.norm(adp.materialize(t) - np.eye(t.dim)))
        dn = float(np.linalg.norm(layer.delta.delta()))
        return dn, dn
