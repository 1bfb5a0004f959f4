"""Clustered regression data: construction, reordering, and CSV ingestion.

The estimators in this package operate on a design whose rows are grouped
into contiguous per-cluster blocks.  :func:`build_design` takes data in any
row order and reorders it cluster-major, keeping the original labels.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np

from .errors import DesignWarning, ValidationError


@dataclass(frozen=True)
class ClusteredDesign:
    """Regression data ``(W, Y, X)`` split into contiguous cluster blocks.

    Attributes
    ----------
    n : int
        Total number of rows.
    G : int
        Number of clusters.
    cluster_sizes : ndarray of int
        Rows per cluster, in internal cluster order; sums to ``n``.
    W : ndarray, shape (n, d)
        Regressor matrix, rows grouped cluster-major.
    Y, X : ndarray, shape (n,)
        Outcome vectors aligned with ``W``.
    cluster_labels : list
        Original label of each internal cluster index.
    row_order : ndarray of int
        Original row index of each internal row (``W[i] == W_orig[row_order[i]]``).
    """

    n: int
    G: int
    cluster_sizes: np.ndarray
    W: np.ndarray
    Y: np.ndarray
    X: np.ndarray
    cluster_labels: list
    row_order: np.ndarray
    starts: np.ndarray = field(init=False)

    def __post_init__(self):
        if self.cluster_sizes.sum() != self.n:
            raise ValidationError("cluster sizes must sum to the row count")
        if self.G < 1 or self.d < 1:
            raise ValidationError("need at least one cluster and one regressor")
        starts = np.zeros(self.G + 1, dtype=np.int64)
        np.cumsum(self.cluster_sizes, out=starts[1:])
        object.__setattr__(self, "starts", starts)

    @property
    def d(self) -> int:
        return self.W.shape[1]

    @property
    def label_to_index(self) -> dict:
        return {lab: g for g, lab in enumerate(self.cluster_labels)}

    def rows(self, g: int) -> slice:
        """Row slice of cluster ``g`` (internal index)."""
        return slice(int(self.starts[g]), int(self.starts[g + 1]))

    def block_W(self, g: int) -> np.ndarray:
        return self.W[self.rows(g)]

    def freeze(self) -> None:
        """Make the data arrays read-only (called when a workspace is built)."""
        for arr in (self.W, self.Y, self.X, self.cluster_sizes, self.row_order):
            arr.flags.writeable = False

    def with_outcomes(self, Y=None, X=None) -> "ClusteredDesign":
        """Copy of the design with ``Y`` and/or ``X`` replaced (same order)."""
        newY = self.Y if Y is None else np.ascontiguousarray(Y, dtype=np.float64)
        newX = self.X if X is None else np.ascontiguousarray(X, dtype=np.float64)
        if newY.shape != (self.n,) or newX.shape != (self.n,):
            raise ValidationError("replacement outcomes must have length n")
        return ClusteredDesign(
            n=self.n, G=self.G, cluster_sizes=self.cluster_sizes, W=self.W,
            Y=newY, X=newX, cluster_labels=self.cluster_labels,
            row_order=self.row_order,
        )


def build_design(
    cluster: Sequence[Hashable],
    y: Sequence[float],
    x: Sequence[float],
    W: np.ndarray,
) -> ClusteredDesign:
    """Group rows by cluster label and return a cluster-major design.

    Clusters are ordered by first appearance of their label; within a
    cluster, rows keep their original relative order.

    Parameters
    ----------
    cluster : sequence
        Cluster label per row (any hashable values).
    y, x : sequence of float
        Outcome and treatment/secondary outcome per row.
    W : array_like, shape (n, d)
        Regressors; every row must have the same arity.

    Raises
    ------
    ValidationError
        On empty input or ragged regressor rows.
    """
    labels = list(cluster)
    if len(labels) == 0:
        raise ValidationError("empty input: no rows")
    try:
        W = np.asarray(W, dtype=np.float64)
    except (ValueError, TypeError) as exc:
        raise ValidationError(
            "regressor rows have unequal arity or non-numeric entries"
        ) from exc
    if W.ndim == 1:
        W = W[:, None]
    if W.ndim != 2:
        raise ValidationError("regressors must form a 2-D array (ragged rows?)")
    n, d = W.shape
    y = np.asarray(y, dtype=np.float64).ravel()
    x = np.asarray(x, dtype=np.float64).ravel()
    if len(labels) != n or y.shape != (n,) or x.shape != (n,):
        raise ValidationError("cluster, y, x, and W must have equal row counts")

    seen: dict = {}
    for lab in labels:
        if lab not in seen:
            seen[lab] = len(seen)
    order = np.argsort([seen[lab] for lab in labels], kind="stable")
    cluster_labels = list(seen.keys())
    sizes = np.bincount([seen[lab] for lab in labels], minlength=len(seen))

    Ws = np.ascontiguousarray(W[order])
    if n > 0:
        zero_cols = np.where(~Ws.any(axis=0))[0]
        if zero_cols.size:
            warnings.warn(
                f"design has all-zero regressor column(s): {zero_cols.tolist()}",
                DesignWarning,
                stacklevel=2,
            )
    return ClusteredDesign(
        n=n,
        G=len(seen),
        cluster_sizes=sizes.astype(np.int64),
        W=Ws,
        Y=np.ascontiguousarray(y[order]),
        X=np.ascontiguousarray(x[order]),
        cluster_labels=cluster_labels,
        row_order=order.astype(np.int64),
    )


def read_design_csv(
    path,
    cluster_col: str = "cluster",
    y_col: str = "y",
    x_col: str = "x",
    regressor_cols: Sequence[str] | None = None,
    regressor_prefix: str = "w_",
) -> ClusteredDesign:
    """Load a design from a headered CSV file.

    Required columns: ``cluster``, ``y``, ``x`` (names overridable).
    Regressors are either the explicitly listed ``regressor_cols`` or every
    column starting with ``regressor_prefix``, in file order.
    """
    import pandas as pd

    df = pd.read_csv(path, float_precision="round_trip")
    for col in (cluster_col, y_col, x_col):
        if col not in df.columns:
            raise ValidationError(f"input CSV is missing required column {col!r}")
    if regressor_cols is None:
        regressor_cols = [c for c in df.columns if c.startswith(regressor_prefix)]
    else:
        missing = [c for c in regressor_cols if c not in df.columns]
        if missing:
            raise ValidationError(f"input CSV is missing regressor column(s) {missing}")
    if not regressor_cols:
        raise ValidationError(
            f"no regressor columns found (expected prefix {regressor_prefix!r} "
            "or an explicit list)"
        )
    W = df[list(regressor_cols)].to_numpy(dtype=np.float64)
    return build_design(df[cluster_col].tolist(), df[y_col].to_numpy(),
                        df[x_col].to_numpy(), W)


def write_design_csv(design: ClusteredDesign, path) -> None:
    """Write a design back to CSV in internal (cluster-major) row order."""
    import pandas as pd

    labels = np.repeat(np.arange(design.G), design.cluster_sizes)
    cols = {"cluster": [design.cluster_labels[g] for g in labels],
            "y": design.Y, "x": design.X}
    for j in range(design.d):
        cols[f"w_{j + 1}"] = design.W[:, j]
    pd.DataFrame(cols).to_csv(path, index=False)
