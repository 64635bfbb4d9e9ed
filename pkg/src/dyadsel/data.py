"""Dyadic panel containers, CSV/JSON ingestion and time differencing.

A panel stores one row per dyad (ordered for directed graphs, ``i < j`` for
undirected ones) and one column per period.  Node labels from the input file
are remapped to dense integers ``0..n-1``; the original labels are kept in
``DyadicPanel.labels`` for reporting.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence, Union

import numpy as np
import pandas as pd

JSON_SCHEMA_VERSION = 1

PairRule = Union[str, Callable[[np.ndarray, np.ndarray], np.ndarray]]


class PanelError(ValueError):
    """Raised when panel input violates the dyadic data model."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


def dyad_count(n: int, directed: bool) -> int:
    """Number of potential dyads: n(n-1) if directed, n(n-1)/2 otherwise."""
    return n * (n - 1) if directed else n * (n - 1) // 2


@dataclass(frozen=True, eq=False)
class DyadicPanel:
    """Dyad-by-period observables (d, y, w, r).

    Parameters
    ----------
    labels : sequence of str
        Original node labels; position is the dense node id.
    src, dst : (P,) int arrays
        Endpoints of each stored dyad.  Undirected panels require src < dst.
    d : (P, T) array of {0, 1}
        Selection indicators.
    y : (P, T) float array
        Outcomes; NaN exactly where ``d == 0``.
    w, r : (P, T, q_w) and (P, T, q_r) float arrays
        Outcome-equation and selection-equation regressors.
    directed : bool
    """

    labels: tuple
    src: np.ndarray
    dst: np.ndarray
    d: np.ndarray
    y: np.ndarray
    w: np.ndarray
    r: np.ndarray
    directed: bool = False
    w_names: tuple = ()
    r_names: tuple = ()
    periods: tuple = ()

    def __post_init__(self):
        src = np.asarray(self.src, dtype=np.int64)
        dst = np.asarray(self.dst, dtype=np.int64)
        d = np.asarray(self.d).astype(np.int8)
        y = np.asarray(self.y, dtype=np.float64)
        w = np.asarray(self.w, dtype=np.float64)
        r = np.asarray(self.r, dtype=np.float64)
        P = src.shape[0]
        if d.ndim != 2 or d.shape[0] != P:
            raise PanelError("d must have shape (n_dyads, T)")
        T = d.shape[1]
        if T < 2:
            raise PanelError("panel needs at least two periods")
        if y.shape != (P, T) or w.shape[:2] != (P, T) or r.shape[:2] != (P, T):
            raise PanelError("y, w, r must align with d on (dyad, period)")
        if w.ndim != 3 or r.ndim != 3:
            raise PanelError("w and r must be (n_dyads, T, q) arrays")
        n = len(self.labels)
        if P and (src.min() < 0 or dst.min() < 0 or max(src.max(), dst.max()) >= n):
            raise PanelError("node id out of range")
        if np.any(src == dst):
            raise PanelError("self-loops are not allowed")
        if not np.isin(d, (0, 1)).all():
            raise PanelError("d must be binary")
        if np.any(~np.isnan(y) & (d == 0)):
            raise PanelError("outcome present for unselected dyad")
        if np.any(np.isnan(y) & (d == 1)):
            raise PanelError("outcome missing for selected dyad")
        if not self.directed and np.any(src > dst):
            raise PanelError("undirected panels store each dyad once with i < j")
        key = src * max(n, 1) + dst
        if np.unique(key).size != P:
            raise PanelError("duplicate dyad in panel")
        for name, arr in (("src", src), ("dst", dst), ("d", d), ("y", y), ("w", w), ("r", r)):
            object.__setattr__(self, name, _frozen(arr))
        object.__setattr__(self, "labels", tuple(str(x) for x in self.labels))
        if not self.w_names:
            object.__setattr__(self, "w_names", tuple(f"w_{k + 1}" for k in range(w.shape[2])))
        if not self.r_names:
            object.__setattr__(self, "r_names", tuple(f"r_{k + 1}" for k in range(r.shape[2])))
        if not self.periods:
            object.__setattr__(self, "periods", tuple(str(t + 1) for t in range(T)))
        _warn_if_no_exclusion(w, r)

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def T(self) -> int:
        return self.d.shape[1]

    @property
    def q_w(self) -> int:
        return self.w.shape[2]

    @property
    def q_r(self) -> int:
        return self.r.shape[2]

    @property
    def n_dyads(self) -> int:
        """Normaliser N used by the moment averages."""
        return dyad_count(self.n, self.directed)

    def to_directed(self) -> "DyadicPanel":
        """Return the panel with both orientations of every undirected dyad."""
        if self.directed:
            return self
        return DyadicPanel(
            labels=self.labels,
            src=np.concatenate([self.src, self.dst]),
            dst=np.concatenate([self.dst, self.src]),
            d=np.concatenate([self.d, self.d]),
            y=np.concatenate([self.y, self.y]),
            w=np.concatenate([self.w, self.w]),
            r=np.concatenate([self.r, self.r]),
            directed=True,
            w_names=self.w_names,
            r_names=self.r_names,
            periods=self.periods,
        )

    def relabel(self, perm: Sequence[int]) -> "DyadicPanel":
        """Apply a node permutation (new id = perm[old id]); used by invariance checks."""
        perm = np.asarray(perm, dtype=np.int64)
        src, dst = perm[self.src], perm[self.dst]
        if not self.directed:
            src, dst = np.minimum(src, dst), np.maximum(src, dst)
        labels = [None] * self.n
        for old, new in enumerate(perm):
            labels[new] = self.labels[old]
        return DyadicPanel(labels, src, dst, self.d, self.y, self.w, self.r,
                           directed=self.directed, w_names=self.w_names,
                           r_names=self.r_names, periods=self.periods)

    def equals(self, other: "DyadicPanel") -> bool:
        """Bit-exact comparison (NaN == NaN)."""
        if (self.labels, self.directed, self.w_names, self.r_names, self.periods) != (
            other.labels, other.directed, other.w_names, other.r_names, other.periods
        ):
            return False
        return all(
            np.array_equal(getattr(self, a), getattr(other, a), equal_nan=True)
            for a in ("src", "dst", "d", "y", "w", "r")
        )

    # serialisation -----------------------------------------------------
    def to_json_dict(self) -> dict:
        y = [[None if np.isnan(v) else float(v) for v in row] for row in self.y]
        return {
            "schema_version": JSON_SCHEMA_VERSION,
            "kind": "DyadicPanel",
            "directed": self.directed,
            "labels": list(self.labels),
            "periods": list(self.periods),
            "w_names": list(self.w_names),
            "r_names": list(self.r_names),
            "src": self.src.tolist(),
            "dst": self.dst.tolist(),
            "d": self.d.tolist(),
            "y": y,
            "w": self.w.tolist(),
            "r": self.r.tolist(),
        }

    @classmethod
    def from_json_dict(cls, obj: Mapping) -> "DyadicPanel":
        if obj.get("schema_version") != JSON_SCHEMA_VERSION:
            raise PanelError(f"unsupported panel schema version {obj.get('schema_version')!r}")
        P, T = len(obj["src"]), len(obj["periods"])
        y = np.array([[np.nan if v is None else v for v in row] for row in obj["y"]], dtype=float)
        return cls(
            labels=tuple(obj["labels"]),
            src=np.asarray(obj["src"], dtype=np.int64),
            dst=np.asarray(obj["dst"], dtype=np.int64),
            d=np.asarray(obj["d"], dtype=np.int8).reshape(P, T),
            y=y.reshape(P, T),
            w=np.asarray(obj["w"], dtype=float).reshape(P, T, len(obj["w_names"])),
            r=np.asarray(obj["r"], dtype=float).reshape(P, T, len(obj["r_names"])),
            directed=bool(obj["directed"]),
            w_names=tuple(obj["w_names"]),
            r_names=tuple(obj["r_names"]),
            periods=tuple(obj["periods"]),
        )

    def save_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict()), encoding="utf-8")

    @classmethod
    def load_json(cls, path) -> "DyadicPanel":
        return cls.from_json_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _warn_if_no_exclusion(w: np.ndarray, r: np.ndarray) -> None:
    # identification needs a selection regressor excluded from W
    if w.shape[2] != r.shape[2] or w.size == 0:
        return
    wc = {w[:, :, k].tobytes() for k in range(w.shape[2])}
    rc = {r[:, :, k].tobytes() for k in range(r.shape[2])}
    if wc == rc:
        warnings.warn(
            "W and R contain the same columns; no selection regressor is excluded from W",
            stacklevel=3,
        )


@dataclass(frozen=True)
class NodeTable:
    """Node-by-period covariates: x is (n, T, q_x), z is (n, T, q_z)."""

    x: np.ndarray
    z: np.ndarray
    labels: tuple = ()

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        z = np.asarray(self.z, dtype=float)
        if x.ndim == 2:
            x = x[:, :, None]
        if z.ndim == 2:
            z = z[:, :, None]
        if x.shape[:2] != z.shape[:2]:
            raise PanelError("x and z must cover the same nodes and periods")
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "z", _frozen(z))
        if not self.labels:
            object.__setattr__(self, "labels", tuple(str(i) for i in range(x.shape[0])))

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def T(self) -> int:
        return self.x.shape[1]


_BUILTIN_RULES = {
    "sum": (lambda a, b: a + b, True),
    "absdiff": (lambda a, b: np.abs(a - b), True),
    "concat": (lambda a, b: np.concatenate([a, b], axis=-1), False),
}


def dyad_index(n: int, directed: bool) -> tuple[np.ndarray, np.ndarray]:
    """All dyads i != j (directed) or i < j (undirected), row-major order."""
    if directed:
        i, j = np.nonzero(~np.eye(n, dtype=bool))
        return i.astype(np.int64), j.astype(np.int64)
    i, j = np.triu_indices(n, 1)
    return i.astype(np.int64), j.astype(np.int64)


def compose_pair_regressors(
    nodes: NodeTable,
    w_rule: PairRule = "sum",
    r_rule: PairRule = "sum",
    directed: bool = False,
    src: np.ndarray | None = None,
    dst: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Build W_ijt = w(X_it, X_jt) and R_ijt = r(Z_it, Z_jt).

    Returns ``(src, dst, w, r)`` with w of shape (P, T, q_w).  Rules are
    ``"sum"``, ``"absdiff"``, ``"concat"`` (directed only) or a callable
    acting on broadcast arrays of shape (P, T, q).  For undirected panels a
    callable must be symmetric on the supplied data.
    """
    if src is None or dst is None:
        src, dst = dyad_index(nodes.n, directed)
    out = []
    for rule, values in ((w_rule, nodes.x), (r_rule, nodes.z)):
        if isinstance(rule, str):
            if rule not in _BUILTIN_RULES:
                raise ValueError(f"unknown pair rule {rule!r}")
            fn, symmetric = _BUILTIN_RULES[rule]
            if not directed and not symmetric:
                raise PanelError(f"rule {rule!r} is not symmetric; undirected panels need w(x,y)=w(y,x)")
        else:
            fn = rule
        a, b = values[src], values[dst]
        res = np.asarray(fn(a, b), dtype=float)
        if not directed and not isinstance(rule, str):
            if not np.array_equal(res, np.asarray(fn(b, a), dtype=float)):
                raise PanelError("pair rule is not symmetric; undirected panels need w(x,y)=w(y,x)")
        if res.ndim == 2:
            res = res[:, :, None]
        out.append(res)
    return src, dst, out[0], out[1]


# ingestion --------------------------------------------------------------

def _sort_labels(labels) -> list:
    labels = sorted(set(labels))
    try:
        return sorted(labels, key=lambda s: (int(s), s))
    except ValueError:
        return labels


def load_panel(
    path,
    schema: Mapping[str, str] | None = None,
    directed: bool = False,
) -> DyadicPanel:
    """Read a dyadic panel from CSV.

    The header must contain ``i, j, t, d, y`` and regressor columns
    ``w_1..w_qw``, ``r_1..r_qr``.  ``schema`` maps those canonical names to
    the file's column names, e.g. ``{"i": "origin", "w_1": "atr"}``.
    ``y`` is left empty where ``d == 0``.
    """
    schema = dict(schema or {})
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    cols = list(frame.columns)
    rename = {v: k for k, v in schema.items()}
    frame = frame.rename(columns=rename)
    for c in ("i", "j", "t", "d", "y"):
        if c not in frame.columns:
            raise PanelError(f"missing column {schema.get(c, c)!r}")

    def _numbered(prefix):
        names = [c for c in frame.columns if c.startswith(prefix + "_") and c[len(prefix) + 1:].isdigit()]
        names.sort(key=lambda c: int(c[len(prefix) + 1:]))
        for k, c in enumerate(names):
            if c != f"{prefix}_{k + 1}":
                raise PanelError(f"missing column {prefix}_{k + 1!s}")
        return names

    w_cols, r_cols = _numbered("w"), _numbered("r")
    if not r_cols:
        raise PanelError("missing column 'r_1'")
    if not w_cols:
        raise PanelError("missing column 'w_1'")
    inv = {k: v for v, k in rename.items()}
    w_names = tuple(inv.get(c, c) for c in w_cols)
    r_names = tuple(inv.get(c, c) for c in r_cols)
    del cols

    ii = frame["i"].str.strip().to_numpy()
    jj = frame["j"].str.strip().to_numpy()
    tt = frame["t"].str.strip().to_numpy()
    if np.any(ii == jj):
        raise PanelError("self-loop rows (i == j) are not allowed")
    try:
        d = frame["d"].astype(int).to_numpy()
    except ValueError as exc:
        raise PanelError(f"non-integer selection indicator: {exc}") from None
    ystr = frame["y"].str.strip().to_numpy()
    has_y = ystr != ""
    bad = np.nonzero(has_y & (d == 0))[0]
    if bad.size:
        k = bad[0]
        raise PanelError(f"outcome present for unselected dyad ({ii[k]}, {jj[k]}, t={tt[k]})")
    bad = np.nonzero(~has_y & (d == 1))[0]
    if bad.size:
        k = bad[0]
        raise PanelError(f"outcome missing for selected dyad ({ii[k]}, {jj[k]}, t={tt[k]})")
    y = np.full(len(frame), np.nan)
    y[has_y] = ystr[has_y].astype(float)
    w = frame[w_cols].to_numpy(dtype=float).reshape(len(frame), len(w_cols))
    r = frame[r_cols].to_numpy(dtype=float).reshape(len(frame), len(r_cols))

    labels = _sort_labels(np.concatenate([ii, jj]))
    lid = {lab: k for k, lab in enumerate(labels)}
    periods = _sort_labels(tt)
    pid = {p: k for k, p in enumerate(periods)}
    T = len(periods)

    cells: dict = {}
    for row in range(len(frame)):
        a, b, t = lid[ii[row]], lid[jj[row]], pid[tt[row]]
        key = (a, b, t)
        if key in cells:
            raise PanelError(f"duplicate key (i={ii[row]}, j={jj[row]}, t={tt[row]})")
        cells[key] = row

    if not directed:
        canon: dict = {}
        for (a, b, t), row in cells.items():
            lo, hi = min(a, b), max(a, b)
            k2 = (lo, hi, t)
            if k2 in canon:
                other = canon[k2]
                same = (
                    d[row] == d[other]
                    and np.array_equal(y[row], y[other], equal_nan=True)
                    and np.array_equal(w[row], w[other])
                    and np.array_equal(r[row], r[other])
                )
                if not same:
                    raise PanelError(
                        f"asymmetric undirected input for dyad ({labels[lo]}, {labels[hi]}, t={periods[t]})"
                    )
            else:
                canon[k2] = row
        cells = canon

    pairs = sorted({(a, b) for a, b, _ in cells})
    P = len(pairs)
    src = np.array([p[0] for p in pairs], dtype=np.int64)
    dst = np.array([p[1] for p in pairs], dtype=np.int64)
    rows = np.empty((P, T), dtype=np.int64)
    for k, (a, b) in enumerate(pairs):
        for t in range(T):
            row = cells.get((a, b, t))
            if row is None:
                raise PanelError(
                    f"dyad ({labels[a]}, {labels[b]}) has no row for period {periods[t]}"
                )
            rows[k, t] = row
    return DyadicPanel(
        labels=tuple(labels), src=src, dst=dst,
        d=d[rows], y=y[rows], w=w[rows], r=r[rows],
        directed=directed, w_names=w_names, r_names=r_names, periods=tuple(periods),
    )


def save_panel(panel: DyadicPanel, path) -> None:
    """Write a panel CSV readable by :func:`load_panel` (floats written with repr)."""
    header = ["i", "j", "t", "d", "y"] + [f"w_{k + 1}" for k in range(panel.q_w)] + [
        f"r_{k + 1}" for k in range(panel.q_r)
    ]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        out = csv.writer(fh)
        out.writerow(header)
        for k in range(panel.src.shape[0]):
            a, b = panel.labels[panel.src[k]], panel.labels[panel.dst[k]]
            for t in range(panel.T):
                yv = panel.y[k, t]
                out.writerow(
                    [a, b, panel.periods[t], int(panel.d[k, t]), "" if np.isnan(yv) else repr(float(yv))]
                    + [repr(float(v)) for v in panel.w[k, t]]
                    + [repr(float(v)) for v in panel.r[k, t]]
                )


# differencing -----------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DifferencedSample:
    """Doubly-selected (dyad, s<t) rows with earlier-minus-later differences."""

    i: np.ndarray
    j: np.ndarray
    s: np.ndarray
    t: np.ndarray
    dy: np.ndarray
    dw: np.ndarray
    dr: np.ndarray
    n: int
    directed: bool
    n_pairs: int = field(default=0)

    def __post_init__(self):
        for name in ("i", "j", "s", "t", "dy", "dw", "dr"):
            object.__setattr__(self, name, _frozen(np.asarray(getattr(self, name))))
        if not self.n_pairs:
            object.__setattr__(self, "n_pairs", dyad_count(self.n, self.directed))

    def __len__(self) -> int:
        return self.dy.shape[0]

    @property
    def q_w(self) -> int:
        return self.dw.shape[1]

    @property
    def n_undirected(self) -> int:
        """n(n-1)/2, the unordered dyad count that scales the variance formulas."""
        return dyad_count(self.n, False)


def _period_pairs(T: int) -> list[tuple[int, int]]:
    return [(s, t) for s in range(T) for t in range(s + 1, T)]


def difference(panel: DyadicPanel) -> DifferencedSample:
    """Time-difference every doubly-selected dyad over all period pairs s < t."""
    blocks = []
    for s, t in _period_pairs(panel.T):
        keep = np.nonzero((panel.d[:, s] == 1) & (panel.d[:, t] == 1))[0]
        blocks.append((keep, s, t))
    idx = np.concatenate([b[0] for b in blocks]) if blocks else np.zeros(0, np.int64)
    ss = np.concatenate([np.full(b[0].size, b[1]) for b in blocks]).astype(np.int64)
    tt = np.concatenate([np.full(b[0].size, b[2]) for b in blocks]).astype(np.int64)
    return DifferencedSample(
        i=panel.src[idx],
        j=panel.dst[idx],
        s=ss,
        t=tt,
        dy=panel.y[idx, ss] - panel.y[idx, tt],
        dw=(panel.w[idx, ss] - panel.w[idx, tt]).reshape(idx.size, panel.q_w),
        dr=(panel.r[idx, ss] - panel.r[idx, tt]).reshape(idx.size, panel.q_r),
        n=panel.n,
        directed=panel.directed,
    )


def switchers(panel: DyadicPanel) -> tuple[np.ndarray, np.ndarray]:
    """Rows with d_s + d_t = 1: returns (dR, target) where target = d at s."""
    drs, targets = [], []
    for s, t in _period_pairs(panel.T):
        keep = np.nonzero(panel.d[:, s] + panel.d[:, t] == 1)[0]
        drs.append(panel.r[keep, s] - panel.r[keep, t])
        targets.append(panel.d[keep, s].astype(float))
    return np.concatenate(drs).reshape(-1, panel.q_r), np.concatenate(targets)
