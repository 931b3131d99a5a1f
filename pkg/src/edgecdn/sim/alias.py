"""Walker/Vose alias tables for O(1) sampling of the requested content."""

import numba as nb
import numpy as np


def build_alias_table(weights):
    """Return ``(prob, alias)`` for sampling index ``i`` with probability ``w_i / sum(w)``."""
    w = np.asarray(weights, dtype=np.float64)
    n = w.size
    total = w.sum()
    if n == 0 or total <= 0:
        raise ValueError("weights must contain a positive entry")
    scaled = w * (n / total)
    prob = np.zeros(n)
    alias = np.arange(n, dtype=np.int64)
    small = [i for i in range(n) if scaled[i] < 1.0]
    large = [i for i in range(n) if scaled[i] >= 1.0]
    while small and large:
        s = small.pop()
        l = large.pop()
        prob[s] = scaled[s]
        alias[s] = l
        scaled[l] = (scaled[l] + scaled[s]) - 1.0
        (small if scaled[l] < 1.0 else large).append(l)
    for i in large + small:
        # leftovers are 1 up to rounding
        prob[i] = 1.0 if w[i] > 0 else 0.0
    return prob, alias


@nb.njit(cache=True, _nrt=False)
def alias_draw(prob, alias, u):
    """Map one uniform ``u`` in [0, 1) to an index."""
    x = u * prob.shape[0]
    i = int(x)
    if i >= prob.shape[0]:
        i = prob.shape[0] - 1
    if x - i < prob[i]:
        return i
    return alias[i]
