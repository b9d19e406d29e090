"""Orthogonal finetuning adapters.

An adapter left-multiplies a frozen ``d x n`` weight by a block-diagonal
orthogonal matrix ``R``. Each ``b x b`` block is the Cayley image
``(I + Q)(I - Q)^-1`` of a skew-symmetric ``Q``, and only the strictly upper
triangle of each ``Q`` is stored. Three modes are supported:

``oft``
    ``z = (R W0)^T x``
``coft``
    as ``oft``, with ``||Q||_F <= eps_prime`` restored by radial projection
    after every optimizer step. To first order ``R - I ~ 2Q``, so a bound
    ``||R - I||_F <= eps`` corresponds to ``eps_prime ~ eps / 2``.
``rescaled_oft``
    ``z = (R W0 D)^T x`` with ``D = diag(exp(theta))``, one positive scale
    per neuron.

All parameters start at zero, which makes every adapter an exact no-op.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import matcore
from .errors import DimensionError, DivisibilityError, ModeError, NonFiniteError

MODES = ("oft", "coft", "rescaled_oft")


def n_free(b):
    """Number of free parameters in one ``b x b`` skew block."""
    return b * (b - 1) // 2


@dataclass(frozen=True, eq=False)
class SkewParams:
    """Strict upper triangle of one skew-symmetric block, row by row."""

    dim: int
    free: np.ndarray

    def __post_init__(self):
        free = np.array(self.free, dtype=np.float64).reshape(-1)
        if free.size != n_free(self.dim):
            raise DimensionError(
                f"block of size {self.dim} needs {n_free(self.dim)} free params, got {free.size}"
            )
        object.__setattr__(self, "free", free)

    @classmethod
    def zeros(cls, dim):
        return cls(dim, np.zeros(n_free(dim)))

    @classmethod
    def from_matrix(cls, q):
        q = np.asarray(q, dtype=np.float64)
        if q.ndim != 2 or q.shape[0] != q.shape[1]:
            raise DimensionError(f"skew block must be square, got {q.shape}")
        if not np.array_equal(q, -q.T):
            raise ValueError("matrix is not exactly skew-symmetric")
        return cls(q.shape[0], q[np.triu_indices(q.shape[0], 1)])

    def matrix(self):
        return skew(self.free, self.dim)


def skew(free, b):
    """Materialize a skew block from its upper-triangle parameters."""
    q = np.zeros((b, b))
    q[np.triu_indices(b, 1)] = free
    return q - q.T


def skew_grad(g):
    """Pull a gradient w.r.t. a full ``b x b`` matrix back to the free params.

    Each free value appears as ``+q`` at (i, j) and ``-q`` at (j, i).
    """
    iu = np.triu_indices(g.shape[0], 1)
    return g[iu] - g.T[iu]


def cayley_lu(q):
    """Cayley map of a skew matrix; also returns the LU of ``I - Q`` for reuse."""
    q = np.asarray(q, dtype=np.float64)
    if not np.all(np.isfinite(q)):
        raise NonFiniteError("skew block has non-finite entries")
    eye = np.eye(q.shape[0])
    # (I+Q) and (I-Q)^-1 commute, so R = (I-Q)^-1 (I+Q).
    lu = matcore.lu(eye - q)
    return matcore.lu_solve(lu, eye + q), lu


def cayley(q):
    """``R = (I + Q)(I - Q)^-1`` for a :class:`SkewParams` or a skew matrix."""
    if isinstance(q, SkewParams):
        q = q.matrix()
    return cayley_lu(q)[0]


@dataclass(frozen=True, eq=False)
class OrthoTransform:
    """Block-diagonal orthogonal transform ``diag(R_1, ..., R_r)`` of size ``d``.

    ``free`` has one row per parameter block: ``r`` rows, or a single row
    when all blocks are tied (``shared``).
    """

    dim: int
    num_blocks: int
    shared: bool = False
    free: np.ndarray = None

    def __post_init__(self):
        d, r = int(self.dim), int(self.num_blocks)
        if d < 1 or r < 1:
            raise DimensionError(f"dim and num_blocks must be positive, got d={d}, r={r}")
        if d % r:
            raise DivisibilityError(d, r)
        rows = 1 if self.shared else r
        shape = (rows, n_free(d // r))
        if self.free is None:
            free = np.zeros(shape)
        else:
            free = np.array(self.free, dtype=np.float64)
            if free.size != shape[0] * shape[1]:
                raise DimensionError(f"expected {shape[0] * shape[1]} skew params, got {free.size}")
            free = free.reshape(shape)
        if not np.all(np.isfinite(free)):
            raise NonFiniteError("skew parameters contain NaN or Inf")
        free.setflags(write=False)
        object.__setattr__(self, "dim", d)
        object.__setattr__(self, "num_blocks", r)
        object.__setattr__(self, "shared", bool(self.shared))
        object.__setattr__(self, "free", free)

    @property
    def block_size(self):
        return self.dim // self.num_blocks

    @property
    def blocks(self):
        return [SkewParams(self.block_size, row) for row in self.free]

    def block_index(self, k):
        """Row of ``free`` that drives diagonal block ``k``."""
        return 0 if self.shared else k

    def skew_blocks(self):
        """Materialized ``Q`` block for every diagonal position."""
        qs = [skew(row, self.block_size) for row in self.free]
        return [qs[self.block_index(k)] for k in range(self.num_blocks)]

    def q_norm(self):
        """Frobenius norm of the full ``d x d`` block-diagonal ``Q``.

        Every free value appears twice in ``Q``, and a shared block appears
        ``r`` times on the diagonal.
        """
        copies = self.num_blocks if self.shared else 1
        return float(np.sqrt(2.0 * copies) * np.linalg.norm(self.free))

    def with_free(self, free):
        return replace(self, free=free)


def materialize_blocks(t):
    """Cayley image of every parameter block (one per row of ``t.free``)."""
    return [cayley(skew(row, t.block_size)) for row in t.free]


def assemble(t, blocks):
    b = t.block_size
    out = np.zeros((t.dim, t.dim))
    for k in range(t.num_blocks):
        out[k * b:(k + 1) * b, k * b:(k + 1) * b] = blocks[t.block_index(k)]
    return out


def materialize(t):
    """Dense ``d x d`` block-diagonal orthogonal matrix of a transform."""
    return assemble(t, materialize_blocks(t))


def block_apply(t, blocks, w):
    """``diag(blocks) @ w`` without forming the dense matrix."""
    b = t.block_size
    out = np.empty_like(w)
    for k in range(t.num_blocks):
        out[k * b:(k + 1) * b] = blocks[t.block_index(k)] @ w[k * b:(k + 1) * b]
    return out


@dataclass(frozen=True, eq=False)
class Adapter:
    """One layer's orthogonal adapter and its trainable state.

    ``n`` is the neuron (column) count of the weight it adapts. ``theta``
    holds the log-scales of ``rescaled_oft`` and is ``None`` otherwise.
    """

    transform: OrthoTransform
    n: int
    mode: str = "oft"
    eps_prime: float = None
    theta: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ModeError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if int(self.n) < 1:
            raise DimensionError(f"neuron count must be positive, got {self.n}")
        object.__setattr__(self, "n", int(self.n))
        if self.mode == "coft":
            if self.eps_prime is None or not (float(self.eps_prime) > 0 and np.isfinite(self.eps_prime)):
                raise ModeError("coft mode requires a finite eps_prime > 0")
            object.__setattr__(self, "eps_prime", float(self.eps_prime))
        elif self.eps_prime is not None:
            raise ModeError(f"eps_prime is only valid in coft mode, not {self.mode}")
        if self.mode == "rescaled_oft":
            theta = np.zeros(self.n) if self.theta is None else np.array(self.theta, dtype=np.float64)
            if theta.shape != (self.n,):
                raise DimensionError(f"theta must have shape ({self.n},), got {theta.shape}")
            if not np.all(np.isfinite(theta)):
                raise NonFiniteError("theta contains NaN or Inf")
            theta.setflags(write=False)
            object.__setattr__(self, "theta", theta)
        elif self.theta is not None:
            raise ModeError(f"magnitude parameters are only valid in rescaled_oft mode, not {self.mode}")

    @classmethod
    def fresh(cls, d, n, r, mode="oft", shared=False, eps_prime=None):
        """Identity-initialized adapter for a ``d x n`` weight."""
        return cls(OrthoTransform(d, r, shared), n, mode, eps_prime)

    @property
    def d(self):
        return self.transform.dim

    @property
    def scales(self):
        """Per-neuron magnitudes ``s_i = exp(theta_i)`` (ones when not rescaled)."""
        if self.theta is None:
            return np.ones(self.n)
        return np.exp(self.theta)

    @property
    def num_skew(self):
        return self.transform.free.size

    @property
    def num_params(self):
        return self.num_skew + (0 if self.theta is None else self.n)

    def params(self):
        """Flat trainable vector: skew params block by block, then theta."""
        parts = [self.transform.free.reshape(-1)]
        if self.theta is not None:
            parts.append(self.theta)
        return np.concatenate(parts)

    def with_params(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.num_params,):
            raise DimensionError(f"expected {self.num_params} params, got shape {vec.shape}")
        k = self.num_skew
        theta = None if self.theta is None else vec[k:]
        return replace(self, transform=self.transform.with_free(vec[:k]), theta=theta)

    def with_mode(self, mode, eps_prime=None):
        """Same rotation in a different mode; theta is zeroed when added."""
        theta = self.theta if mode == "rescaled_oft" else None
        return replace(self, mode=mode, eps_prime=eps_prime, theta=theta)

    def q_norm(self):
        return self.transform.q_norm()


def _check_weight(a, w0):
    w0 = np.asarray(w0, dtype=np.float64)
    if w0.ndim != 2 or w0.shape != (a.d, a.n):
        raise DimensionError(f"adapter expects a {a.d}x{a.n} weight, got {w0.shape}")
    return w0


def merge(a, w0):
    """Static weight ``R W0`` (times ``D`` when rescaled) equivalent to the adapter."""
    w0 = _check_weight(a, w0)
    if not np.any(a.transform.free):
        # identity rotation; copying keeps signed zeros intact
        w = w0.copy()
    else:
        w = block_apply(a.transform, materialize_blocks(a.transform), w0)
    if a.theta is not None:
        w = w * a.scales
    return w


def forward(a, w0, x):
    """Layer output ``z = (R W0 [D])^T x`` for inputs ``x`` of shape ``d x batch``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    if x.shape[0] != a.d:
        raise DimensionError(f"input has {x.shape[0]} rows, adapter expects {a.d}")
    return matcore.matmul(merge(a, w0).T, x)


def coft_project(a):
    """Radially project the skew params back into ``||Q||_F <= eps_prime``."""
    if a.mode != "coft":
        raise ModeError(f"coft_project requires a coft adapter, got {a.mode}")
    norm = a.q_norm()
    if norm <= a.eps_prime:
        return a
    t = a.transform
    factor = a.eps_prime / norm
    out = replace(a, transform=t.with_free(t.free * factor))
    # rounding can leave the rescaled norm an ulp or two outside the ball
    while out.q_norm() > a.eps_prime:
        factor = np.nextafter(factor, 0.0)
        out = replace(a, transform=t.with_free(t.free * factor))
    return out


def conv_view(kernel_dims):
    """Map a ``(c_out, c_in, k, k)`` kernel to ``(d, n, suggested_r)``.

    With ``r = c_in`` every ``k*k`` block rotates exactly one input channel.
    """
    c_out, c_in, kh, kw = (int(v) for v in kernel_dims)
    if min(c_out, c_in, kh, kw) < 1:
        raise DimensionError(f"kernel dims must all be >= 1, got {kernel_dims}")
    return c_in * kh * kw, c_out, c_in


def flatten_kernel(kernel):
    """``(c_out, c_in, kh, kw)`` kernel -> ``d x n`` weight, one filter per column.

    Rows are ordered channel-major so each input channel owns a contiguous
    run of ``kh*kw`` rows, matching the block layout of :func:`conv_view`.
    """
    kernel = np.asarray(kernel, dtype=np.float64)
    return kernel.reshape(kernel.shape[0], -1).T.copy()


def unflatten_kernel(w, kernel_dims):
    return np.asarray(w).T.reshape(kernel_dims).copy()


def im2col(images, kh, kw):
    """Valid-mode patches of ``(batch, c, H, W)`` images as a ``d x (batch*positions)`` matrix."""
    images = np.asarray(images, dtype=np.float64)
    bsz, c, h, w = images.shape
    win = np.lib.stride_tricks.sliding_window_view(images, (kh, kw), axis=(2, 3))
    # win: (batch, c, H', W', kh, kw) -> rows (c, kh, kw), cols (batch, H', W')
    return win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, -1)


def conv_forward(a, kernel, images):
    """Cross-correlate ``images`` with the adapted kernel; returns ``(batch, c_out, H', W')``."""
    kernel = np.asarray(kernel, dtype=np.float64)
    c_out, c_in, kh, kw = kernel.shape
    bsz, _, h, w = np.shape(images)
    z = forward(a, flatten_kernel(kernel), im2col(images, kh, kw))
    return z.reshape(c_out, bsz, h - kh + 1, w - kw + 1).transpose(1, 0, 2, 3)


def param_count(d, n, r, method="oft"):
    """Trainable parameter count.

    ``method`` is ``"oft"``, ``"oft_shared"`` or ``("lora", rank)``; for LoRA
    the ``r`` argument is ignored and the rank comes from the tuple.
    """
    if isinstance(method, tuple):
        name, rank = method
        if name != "lora":
            raise ValueError(f"unknown method {method!r}")
        return int(rank) * (d + n)
    if method not in ("oft", "oft_shared"):
        raise ValueError(f"unknown method {method!r}")
    if r < 1 or d % r:
        raise DivisibilityError(d, r)
    b = d // r
    return d * (b - 1) // 2 if method == "oft" else n_free(b)
