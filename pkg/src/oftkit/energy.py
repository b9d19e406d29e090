"""Hyperspherical energy of a layer's neurons.

``HE(W) = sum_{i != j} 1 / ||w_i/|w_i| - w_j/|w_j|||`` over ordered pairs of
columns, so each unordered pair is counted twice.
"""

from dataclasses import asdict, dataclass

import numpy as np
from scipy.spatial.distance import pdist

from . import adapter as adp
from .errors import DegeneratePair, DimensionError
from .matcore import normalize_columns

DEGENERATE_DIST = 1e-9
REL_FLOOR = 1e-30


def hyperspherical_energy(w):
    w = np.asarray(w, dtype=np.float64)
    if w.ndim != 2 or w.shape[1] < 2:
        raise DimensionError(f"need at least two neurons (columns), got shape {w.shape}")
    u = normalize_columns(w)
    dist = pdist(u.T)
    k = int(np.argmin(dist))
    if dist[k] < DEGENERATE_DIST:
        i, j = _pair_index(k, w.shape[1])
        raise DegeneratePair(i, j, float(dist[k]))
    return float(2.0 * np.sum(1.0 / dist))


def _pair_index(k, n):
    # inverse of pdist's condensed indexing
    i = 0
    while k >= n - 1 - i:
        k -= n - 1 - i
        i += 1
    return i, i + 1 + k


@dataclass(frozen=True)
class EnergyReport:
    he_before: float
    he_after: float
    abs_diff: float
    rel_diff: float
    num_neurons: int

    @classmethod
    def compare(cls, he_before, he_after, num_neurons):
        abs_diff = abs(he_after - he_before)
        return cls(he_before, he_after, abs_diff, abs_diff / max(he_before, REL_FLOOR), int(num_neurons))

    def to_dict(self):
        return asdict(self)


def compare_weights(w_before, w_after):
    return EnergyReport.compare(
        hyperspherical_energy(w_before), hyperspherical_energy(w_after), np.shape(w_before)[1]
    )


def preservation_report(w0, a):
    """Energy of ``w0`` versus the adapter's merged weight."""
    return compare_weights(w0, adp.merge(a, w0))
