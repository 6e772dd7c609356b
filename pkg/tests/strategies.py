"""Hypothesis strategies for small trees, measures and processes."""
from __future__ import annotations

import numpy as np
from hypothesis import strategies as st

from aeprocess.prob_core import MeasureFamily, OutcomeTree, TreeProcess


@st.composite
def children_lists(draw, max_depth=3, max_branch=2, max_roots=1):
    n_roots = draw(st.integers(1, max_roots))
    depth = draw(st.integers(1, max_depth))
    children = [[] for _ in range(n_roots)]
    frontier = list(range(n_roots))
    for _ in range(depth):
        new = []
        for v in frontier:
            for _ in range(draw(st.integers(1, max_branch))):
                children[v].append(len(children))
                children.append([])
                new.append(len(children) - 1)
        frontier = new
    return children


def _normalised(draw, k):
    raw = draw(st.lists(st.integers(1, 20), min_size=k, max_size=k))
    total = sum(raw)
    return [r / total for r in raw]


@st.composite
def trees_with_measure(draw, max_depth=3, max_branch=2, max_roots=1, n_measures=1):
    children = draw(children_lists(max_depth, max_branch, max_roots))
    tree = OutcomeTree(children)
    rows = []
    for _ in range(n_measures):
        probs = np.zeros(tree.n_nodes)
        probs[list(tree.roots)] = _normalised(draw, len(tree.roots))
        for ch in tree.children:
            if ch:
                probs[list(ch)] = _normalised(draw, len(ch))
        rows.append(probs)
    fam = MeasureFamily(tree, rows)
    values = draw(st.lists(st.floats(0.0, 5.0, allow_nan=False), min_size=tree.n_nodes,
                           max_size=tree.n_nodes))
    return children, fam, TreeProcess(tree, values, nonnegative=True)
