"""Random bipartite server/content storage graphs with prescribed degrees."""

from dataclasses import dataclass

import numpy as np


class GraphBuildError(RuntimeError):
    pass


@dataclass(frozen=True)
class CacheGraph:
    """Which content sits in which cache slot.

    ``server_content[s, k]`` is the content in slot ``k`` of server ``s``.
    """

    server_content: np.ndarray

    @property
    def m(self):
        return self.server_content.shape[0]

    @property
    def d(self):
        return self.server_content.shape[1]

    def degrees(self, n):
        return np.bincount(self.server_content.ravel(), minlength=n)

    def content_servers(self, n):
        """List of server arrays, one per content."""
        flat = self.server_content.ravel()
        order = np.argsort(flat, kind="stable")
        bounds = np.searchsorted(flat[order], np.arange(n + 1))
        servers = order // self.d
        return [servers[bounds[c]:bounds[c + 1]] for c in range(n)]

    def is_simple(self):
        s = np.sort(self.server_content, axis=1)
        return not np.any(s[:, 1:] == s[:, :-1])


def _duplicate_slots(sc):
    """(server, slot) pairs holding a content already present earlier on that server."""
    out = []
    m, d = sc.shape
    for s in np.flatnonzero(_rows_with_duplicates(sc)):
        seen = set()
        for k in range(d):
            c = sc[s, k]
            if c in seen:
                out.append((s, k))
            else:
                seen.add(c)
    return out


def _rows_with_duplicates(sc):
    s = np.sort(sc, axis=1)
    return np.any(s[:, 1:] == s[:, :-1], axis=1)


def build_cache_graph(replicas, m, d, rng, max_attempts=None):
    """Configuration-model pairing of ``m*d`` slots with content stubs.

    Content stubs (content ``c`` repeated ``replicas[c]`` times) are shuffled
    into the slots; any server that ends up with the same content twice is
    repaired by swapping the offending slot with a slot chosen uniformly among
    those whose swap creates no new duplicate. When no such slot exists the
    content is swapped onto a server lacking it and the repair continues.

    Parameters
    ----------
    replicas : array of int
        Degree sequence on the content side; must sum to ``m * d``.
    m, d : int
        Number of servers and slots per server.
    rng : numpy.random.Generator
    max_attempts : int, optional
        Swaps before giving up; defaults to ``100 * m * d``.
    """
    reps = np.asarray(replicas, dtype=np.int64)
    if reps.sum() != m * d:
        raise GraphBuildError(f"degree sums differ: {reps.sum()} stubs, {m * d} slots")
    if np.any(reps > m):
        raise GraphBuildError("a content has more replicas than there are servers")
    stubs = np.repeat(np.arange(reps.size, dtype=np.int32), reps)
    rng.shuffle(stubs)
    sc = stubs.reshape(m, d)
    if max_attempts is None:
        max_attempts = 100 * m * d

    attempts = 0
    pending = _duplicate_slots(sc)
    while pending:
        s, k = pending.pop()
        c = sc[s, k]
        if np.count_nonzero(sc[s] == c) < 2:
            continue
        if attempts >= max_attempts:
            raise GraphBuildError(
                f"could not remove duplicate edges within {max_attempts} swaps")
        attempts += 1
        lacks_c = ~np.any(sc == c, axis=1)
        valid = lacks_c[:, None] & ~np.isin(sc, sc[s])
        flat = np.flatnonzero(valid)
        if flat.size:
            s2, k2 = divmod(int(flat[rng.integers(flat.size)]), d)
        else:
            # no direct repair: move c anyway and revisit this server, which
            # now holds a duplicate of something else
            flat = np.flatnonzero(np.repeat(lacks_c, d))
            s2, k2 = divmod(int(flat[rng.integers(flat.size)]), d)
            pending.append((s, k))
        sc[s, k], sc[s2, k2] = sc[s2, k2], c
    return CacheGraph(np.ascontiguousarray(sc))
