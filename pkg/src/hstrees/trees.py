"""Ordered-node tree graphs indexing collision histories.

A tree with n root lines and m nodes is the list [j_1..j_m] of
progenitor indices, j_k in {1..n+k-1}: node k stands for a particle
n+k created on line j_k, with nodes ordered in time.  The module
provides exact enumeration, the ell statistic, and the two rewrite
rules (discard the empty extra line, or attach its root as a new node)
used by the marginalization identity.
"""
from dataclasses import dataclass
from itertools import product
from math import prod


class EnumerationTooLarge(Exception):
    """Tree count exceeds the configured cap."""


class NotTrivialLine(ValueError):
    """discard_trivial applied to a tree whose extra line carries nodes."""


class InvalidAttachment(ValueError):
    """attach applied with an out-of-range slot or line index."""


ENUMERATION_CAP = 10 ** 6


@dataclass(frozen=True)
class Tree:
    """n root lines plus nodes js = (j_1..j_m), j_k in {1..n+k-1}."""

    n: int
    js: tuple

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("need n >= 1")
        js = tuple(int(j) for j in self.js)
        object.__setattr__(self, "js", js)
        for k, j in enumerate(js, start=1):
            if not 1 <= j <= self.n + k - 1:
                raise ValueError(
                    "node %d has j=%d outside 1..%d" % (k, j, self.n + k - 1))

    @property
    def m(self):
        return len(self.js)

    def serialize(self):
        return "%d:[%s]" % (self.n, ",".join(str(j) for j in self.js))

    @classmethod
    def parse(cls, text):
        head, _, tail = text.partition(":")
        tail = tail.strip()
        if not (tail.startswith("[") and tail.endswith("]")):
            raise ValueError("expected 'n:[j1,j2,...]', got %r" % text)
        inner = tail[1:-1].strip()
        js = tuple(int(x) for x in inner.split(",")) if inner else ()
        return cls(int(head), js)


def count_trees(n, m):
    """Number of trees with n roots and m nodes: n(n+1)...(n+m-1)."""
    if n < 1 or m < 0:
        raise ValueError("need n >= 1, m >= 0")
    return prod(range(n, n + m))


def enumerate_trees(n, m, cap=ENUMERATION_CAP):
    """All trees with n roots and m nodes in lexicographic js order."""
    total = count_trees(n, m)
    if total > cap:
        raise EnumerationTooLarge("%d trees exceeds cap %d" % (total, cap))
    ranges = [range(1, n + k) for k in range(1, m + 1)]
    return [Tree(n, js) for js in product(*ranges)]


def ell(t):
    """First node on the extra line n+1 of an (n+1)-root tree, else m+1.

    Here t has roots n+1 for ambient root count n = t.n - 1.
    """
    target = t.n
    for k, j in enumerate(t.js, start=1):
        if j == target:
            return k
    return t.m + 1


def discard_trivial(t):
    """Remove the empty extra line of an (n+1)-root tree.

    Valid only when no node sits on line n+1 (ell = m+1); labels above
    n+1 shift down by one.
    """
    n = t.n - 1
    if n < 1:
        raise NotTrivialLine("tree has a single root line")
    if ell(t) != t.m + 1:
        raise NotTrivialLine("line %d carries a node" % t.n)
    js = tuple(j if j <= n else j - 1 for j in t.js)
    return Tree(n, js)


def attach(t, k, i):
    """Turn the extra root line of an (n+1)-root tree into node k on line i.

    The extra line becomes a new node inserted at slot k (so it must
    come before the line's first own node: k <= ell).  Nodes at slots
    >= k shift up by one; label n+1 becomes n+k and labels n+2..n+k
    shift down by one.
    """
    n = t.n - 1
    if n < 1:
        raise InvalidAttachment("tree has a single root line")
    if not 1 <= k <= ell(t):
        raise InvalidAttachment("slot k=%d outside 1..%d" % (k, ell(t)))
    if not 1 <= i <= n + k - 1:
        raise InvalidAttachment("line i=%d outside 1..%d" % (i, n + k - 1))

    def f(j):
        if j <= n or j >= n + k + 1:
            return j
        if j == n + 1:
            return n + k
        return j - 1

    js = ([f(j) for j in t.js[:k - 1]] + [i]
          + [f(j) for j in t.js[k - 1:]])
    return Tree(n, tuple(js))


def produced_copies(target, N):
    """All (source, rule, params) rewrites of (n+1)-root trees that yield
    `target`, with the discard rule weighted N-n-m.

    Returns (count, provenance) where count = discard weight + number of
    attach triples; the marginalization identity predicts count = N - n
    for every target with n + m <= N.
    """
    n = target.n
    m = target.m
    if n + m > N:
        raise ValueError("need n + m <= N")
    provenance = []
    count = 0
    weight = N - n - m
    for src in enumerate_trees(n + 1, m):
        if ell(src) == m + 1 and discard_trivial(src) == target:
            provenance.append(("discard", src, None, None, weight))
            count += weight
    for src in enumerate_trees(n + 1, m - 1) if m >= 1 else []:
        lmax = ell(src)
        for k in range(1, lmax + 1):
            for i in range(1, n + k):
                if attach(src, k, i) == target:
                    provenance.append(("attach", src, k, i, 1))
                    count += 1
    return count, provenance
