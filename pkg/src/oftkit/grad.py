"""Gradients of scalar losses with respect to adapter parameters.

Differentiating ``R = (I + Q)(I - Q)^-1`` gives

    dR = 2 (I - Q)^-1 dQ (I - Q)^-1

so a cotangent ``G = dL/dR`` pulls back to ``dL/dQ = 2 (I-Q)^-T G (I-Q)^-T``,
which reuses the LU factorization from the forward Cayley solve. At ``Q = 0``
this reduces to ``dR = 2 dQ``.

Losses are callables ``loss(z) -> (value, dvalue/dz)``; :func:`fd_oracle`
only uses the value.
"""

from dataclasses import asdict, dataclass

import numpy as np

from . import adapter as adp
from .errors import NonFiniteError

DEFAULT_STEP = 1e-6


class SquaredError:
    """``0.5 * ||z - target||^2``."""

    def __init__(self, target):
        self.target = np.asarray(target, dtype=np.float64)

    def __call__(self, z):
        r = z - self.target
        return 0.5 * float(np.sum(r * r)), r


def _value(out):
    return float(out[0] if isinstance(out, tuple) else out)


def cayley_vjp(lu, g):
    """Pull ``dL/dR`` of one block back to ``dL/dQ`` (a full ``b x b`` matrix)."""
    y = adp.matcore.lu_solve(lu, g, trans=1)
    return 2.0 * adp.matcore.lu_solve(lu, y.T).T


def _block_grads(t, g_blocks):
    """Free-parameter gradients given ``dL/dR_k`` for every diagonal block."""
    if t.shared:
        g_blocks = [sum(g_blocks)]
    out = np.empty_like(t.free)
    for row, (free, g) in enumerate(zip(t.free, g_blocks)):
        _, lu = adp.cayley_lu(adp.skew(free, t.block_size))
        out[row] = adp.skew_grad(cayley_vjp(lu, g))
    return out.reshape(-1)


def transform_grad(t, g_r):
    """Gradient over ``t``'s free params given ``dL/dR`` for the dense ``d x d`` R.

    Off-diagonal blocks of ``g_r`` are ignored since R is block-diagonal.
    """
    b = t.block_size
    g_r = np.asarray(g_r, dtype=np.float64)
    return _block_grads(t, [g_r[k * b:(k + 1) * b, k * b:(k + 1) * b] for k in range(t.num_blocks)])


def merged_grad(a, w0, g_w):
    """Gradient over ``a.params()`` given ``dL/dW`` for ``W = merge(a, w0)``."""
    t = a.transform
    b = t.block_size
    g_w = np.asarray(g_w, dtype=np.float64)
    g_rw = g_w * a.scales if a.theta is not None else g_w
    parts = [_block_grads(t, [
        g_rw[k * b:(k + 1) * b] @ w0[k * b:(k + 1) * b].T for k in range(t.num_blocks)
    ])]
    if a.theta is not None:
        rw = adp.block_apply(t, adp.materialize_blocks(t), w0)
        parts.append(a.scales * np.einsum("ij,ij->j", rw, g_w))
    return np.concatenate(parts)


def adapter_grad(a, w0, x, loss):
    """Loss value and its gradient over ``a.params()`` for ``z = forward(a, w0, x)``."""
    w0 = np.asarray(w0, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    z = adp.forward(a, w0, x)
    value, g_z = loss(z)
    if not np.isfinite(value):
        raise NonFiniteError(f"loss is not finite: {value!r}")
    g = merged_grad(a, w0, x @ np.asarray(g_z).T)
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("gradient has non-finite entries")
    return float(value), g


def fd_oracle(a, w0, x, loss, step=DEFAULT_STEP):
    """Central differences over every adapter parameter.

    Each probe rebuilds the adapter, so the Cayley map is recomputed from
    scratch and nothing is shared with :func:`adapter_grad`.
    """
    if not (1e-8 <= step <= 1e-3):
        raise ValueError(f"step must lie in [1e-8, 1e-3], got {step}")
    p = a.params()
    g = np.empty_like(p)
    for i in range(p.size):
        vals = []
        for sign in (1.0, -1.0):
            q = p.copy()
            q[i] += sign * step
            v = _value(loss(adp.forward(a.with_params(q), w0, x)))
            if not np.isfinite(v):
                raise NonFiniteError(f"loss is not finite at probe {i} ({'+' if sign > 0 else '-'})")
            vals.append(v)
        g[i] = (vals[0] - vals[1]) / (2.0 * step)
    return g


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_err: float
    worst_param_index: int
    step: float
    num_params: int

    def to_dict(self):
        return asdict(self)


def compare(g_analytic, g_fd, step):
    g_analytic = np.asarray(g_analytic)
    g_fd = np.asarray(g_fd)
    if g_fd.size == 0:
        return GradCheckReport(0.0, -1, step, 0)
    err = np.abs(g_analytic - g_fd) / np.maximum(np.abs(g_fd), 1e-8)
    k = int(np.argmax(err))
    return GradCheckReport(float(err[k]), k, step, int(g_fd.size))


def grad_check(a, w0, x, loss, step=DEFAULT_STEP):
    _, g = adapter_grad(a, w0, x, loss)
    return compare(g, fd_oracle(a, w0, x, loss, step), step)
