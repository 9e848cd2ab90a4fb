"""Bipartite variable/constraint encoding of a MILP instance.

Variable features (columns):
    0 normalized objective  c_j / max(1, max_k |c_k|)
    1 mean coefficient over incident constraints
    2 degree
    3 max coefficient
    4 min coefficient
    5 is_integer (1 for binaries)

Constraint features (columns):
    0 mean row coefficient
    1 degree
    2 normalized rhs  b_i / max(1, max_j |A_ij|)
    3 sense code (0 = LE, 1 = EQ)

Edge feature: the raw coefficient ``A_ij``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .instances import EQ, MilpInstance

VAR_FEATURES = ("obj", "mean_coef", "degree", "max_coef", "min_coef", "is_integer")
CON_FEATURES = ("mean_coef", "degree", "rhs", "sense")


@dataclass(frozen=True)
class BipartiteGraph:
    var_features: np.ndarray   # (n, 6)
    con_features: np.ndarray   # (m, 4)
    edge_con: np.ndarray       # (E,) constraint index per edge
    edge_var: np.ndarray       # (E,) variable index per edge
    edge_features: np.ndarray  # (E, 1)
    n: int
    m: int
    p: int

    @property
    def num_edges(self) -> int:
        return int(self.edge_con.size)

    @property
    def edges(self) -> list[tuple[int, int, float]]:
        return [(int(i), int(j), float(a)) for i, j, a in zip(self.edge_con, self.edge_var, self.edge_features[:, 0])]


def encode(instance: MilpInstance) -> BipartiteGraph:
    n, m, p = instance.n, instance.m, instance.p
    if m:
        edge_con = np.concatenate([np.full(r.indices.size, i, dtype=np.int64) for i, r in enumerate(instance.rows)])
        edge_var = np.concatenate([r.indices for r in instance.rows]).astype(np.int64)
        coef = np.concatenate([r.coefs for r in instance.rows]).astype(np.float64)
    else:
        edge_con = edge_var = np.zeros(0, dtype=np.int64)
        coef = np.zeros(0)

    var = np.zeros((n, 6))
    cmax = np.abs(instance.c).max() if n else 0.0
    var[:, 0] = instance.c / max(1.0, cmax)
    deg = np.bincount(edge_var, minlength=n).astype(np.float64)
    sums = np.bincount(edge_var, weights=coef, minlength=n)
    has = deg > 0
    var[has, 1] = sums[has] / deg[has]
    var[:, 2] = deg
    vmax = np.full(n, -np.inf)
    vmin = np.full(n, np.inf)
    np.maximum.at(vmax, edge_var, coef)
    np.minimum.at(vmin, edge_var, coef)
    var[has, 3] = vmax[has]
    var[has, 4] = vmin[has]
    var[:p, 5] = 1.0

    con = np.zeros((m, 4))
    for i, row in enumerate(instance.rows):
        k = row.indices.size
        if k:
            con[i, 0] = row.coefs.mean()
            con[i, 2] = row.rhs / max(1.0, np.abs(row.coefs).max())
        else:
            con[i, 2] = row.rhs
        con[i, 1] = k
        con[i, 3] = 1.0 if row.sense == EQ else 0.0

    for arr in (var, con):
        arr.setflags(write=False)
    return BipartiteGraph(var, con, edge_con, edge_var, coef.reshape(-1, 1), n, m, p)


def features_csv(graph: BipartiteGraph) -> tuple[str, str]:
    """CSV text for variable and constraint feature tables."""
    vlines = ["index," + ",".join(VAR_FEATURES)]
    vlines += [f"{j}," + ",".join(repr(float(v)) for v in row) for j, row in enumerate(graph.var_features)]
    clines = ["index," + ",".join(CON_FEATURES)]
    clines += [f"{i}," + ",".join(repr(float(v)) for v in row) for i, row in enumerate(graph.con_features)]
    return "\n".join(vlines) + "\n", "\n".join(clines) + "\n"
