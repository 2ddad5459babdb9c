"""Graph container, normalized Laplacian, homophily / Rayleigh analytics,
dataset I/O, the mixed-population generator and stochastic augmentation."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)


class DatasetFormatError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Graph:
    """Symmetric weighted adjacency in CSR order.

    ``rows``/``cols``/``vals`` list every stored entry (both directions of an
    undirected edge, plus self-loops) sorted by (row, col).
    """

    n: int
    rows: np.ndarray
    cols: np.ndarray
    vals: np.ndarray
    degrees: np.ndarray = field(repr=False)

    @classmethod
    def from_entries(cls, n, rows, cols, vals):
        """Build from a list of directed entries, summing nothing: duplicates
        are collapsed keeping the last weight. The caller is responsible for
        symmetry; ``validate`` checks it."""
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        if rows.size and (rows.min() < 0 or cols.min() < 0 or max(rows.max(), cols.max()) >= n):
            raise ValueError("node id out of range")
        key = rows * n + cols
        # keep last occurrence of each key
        _, last = np.unique(key[::-1], return_index=True)
        keep = np.sort(key.size - 1 - last)
        rows, cols, vals = rows[keep], cols[keep], vals[keep]
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        deg = np.bincount(rows, weights=vals, minlength=n).astype(np.float64)
        for a in (rows, cols, vals, deg):
            a.setflags(write=False)
        return cls(int(n), rows, cols, vals, deg)

    @classmethod
    def from_edges(cls, n, src, dst, weights=None, self_loops=True):
        """Undirected unweighted-by-default graph from an edge list.

        Each pair is symmetrized; explicit self-pairs in the list are dropped
        and replaced by unit self-loops when ``self_loops`` is set.
        """
        src = np.asarray(src, dtype=np.int64).ravel()
        dst = np.asarray(dst, dtype=np.int64).ravel()
        w = np.ones(src.size) if weights is None else np.asarray(weights, dtype=np.float64).ravel()
        if np.any(w < 0):
            raise ValueError("negative edge weight")
        off = src != dst
        src, dst, w = src[off], dst[off], w[off]
        rows = np.concatenate([src, dst])
        cols = np.concatenate([dst, src])
        vals = np.concatenate([w, w])
        if self_loops:
            loop = np.arange(n, dtype=np.int64)
            rows = np.concatenate([rows, loop])
            cols = np.concatenate([cols, loop])
            vals = np.concatenate([vals, np.ones(n)])
        return cls.from_entries(n, rows, cols, vals)

    @property
    def nnz(self):
        return int(self.rows.size)

    def to_scipy(self):
        return sp.csr_matrix((self.vals, (self.rows, self.cols)), shape=(self.n, self.n))

    def dense(self):
        return self.to_scipy().toarray()

    def edge_pairs(self, include_zero=False):
        """Undirected non-self edges as an (E, 2) array with i < j."""
        mask = self.rows < self.cols
        if not include_zero:
            mask &= self.vals > 0
        return np.stack([self.rows[mask], self.cols[mask]], axis=1)

    @property
    def num_edges(self):
        return int(len(self.edge_pairs()))

    def self_loop_weights(self):
        out = np.zeros(self.n)
        m = self.rows == self.cols
        out[self.rows[m]] = self.vals[m]
        return out

    def validate(self):
        if np.any(self.vals < 0):
            raise ValueError("negative weights")
        a = self.to_scipy()
        if a.nnz and abs(a - a.T).max() > 0:
            raise ValueError("adjacency not symmetric")
        key = self.rows * self.n + self.cols
        if np.unique(key).size != key.size:
            raise ValueError("duplicate entries")
        if not np.allclose(self.degrees, np.asarray(a.sum(axis=1)).ravel()):
            raise ValueError("degrees inconsistent with adjacency")


@dataclass(frozen=True, eq=False)
class DatasetBundle:
    graph: Graph
    features: np.ndarray
    labels: np.ndarray
    name: str = "dataset"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.features.ndim != 2:
            raise ValueError("features must be a matrix")
        if not (self.features.shape[0] == self.labels.shape[0] == self.graph.n):
            raise ValueError(
                f"row mismatch: features {self.features.shape[0]}, "
                f"labels {self.labels.shape[0]}, nodes {self.graph.n}"
            )

    @property
    def num_classes(self):
        return int(self.labels.max()) + 1 if self.labels.size else 0


@dataclass(frozen=True)
class SplitSet:
    splits: list
    seed: int

    def __len__(self):
        return len(self.splits)

    def __getitem__(self, i):
        return self.splits[i]


@dataclass(frozen=True)
class SpectralPerturbSpec:
    """Per-eigenmode perturbation energy rho_i = scale * lambda_i ** beta."""

    beta: float = 1.0
    scale: float = 1.0

    def __post_init__(self):
        if self.beta < 0 or self.scale <= 0:
            raise ValueError("need beta >= 0 and scale > 0")

    def rho(self, lams):
        lams = np.clip(np.asarray(lams, dtype=np.float64), 0.0, None)
        return self.scale * np.power(lams, self.beta)


# ---------------------------------------------------------------------------
# dataset I/O


def _read_rows(path):
    with open(path, newline="") as fh:
        return [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]


def load_dataset(directory, name=None):
    """Read ``edges.csv``, ``features.csv`` and ``labels.csv`` from a directory.

    The adjacency is symmetrized, unit weighted and given unit self-loops.
    """
    paths = {k: os.path.join(directory, f"{k}.csv") for k in ("edges", "features", "labels")}
    for k, p in paths.items():
        if not os.path.isfile(p):
            raise FileNotFoundError(f"missing {k}.csv in {directory}")

    feat_rows = _read_rows(paths["features"])
    widths = {len(r) for r in feat_rows}
    if len(widths) > 1:
        raise DatasetFormatError("ragged features")
    try:
        X = np.array([[float(c) for c in r] for r in feat_rows], dtype=np.float64)
    except ValueError as e:
        raise DatasetFormatError(f"non-numeric feature: {e}") from None
    if X.ndim != 2:
        X = X.reshape(len(feat_rows), -1)

    label_rows = _read_rows(paths["labels"])
    try:
        y = np.array([int(r[0]) for r in label_rows], dtype=np.int64)
    except ValueError as e:
        raise DatasetFormatError(f"non-integer label: {e}") from None
    n = y.size
    if n != X.shape[0]:
        raise DatasetFormatError(f"{X.shape[0]} feature rows but {n} labels")
    if n and y.min() < 0:
        raise DatasetFormatError("label out of range")

    edge_rows = _read_rows(paths["edges"])
    try:
        E = np.array([[int(r[0]), int(r[1])] for r in edge_rows], dtype=np.int64).reshape(-1, 2)
    except (ValueError, IndexError) as e:
        raise DatasetFormatError(f"bad edge line: {e}") from None
    if E.size and (E.min() < 0 or E.max() >= n):
        raise DatasetFormatError(f"node id >= N ({n}) in edges.csv")

    g = Graph.from_edges(n, E[:, 0], E[:, 1], self_loops=True)
    return DatasetBundle(g, X, y, name or os.path.basename(os.path.normpath(directory)))


def save_dataset(bundle, directory):
    """Write a bundle in the directory format read by :func:`load_dataset`.

    Only edges with positive weight are written; self-loops are implicit.
    """
    os.makedirs(directory, exist_ok=True)
    pairs = bundle.graph.edge_pairs()
    with open(os.path.join(directory, "edges.csv"), "w") as fh:
        for i, j in pairs:
            fh.write(f"{i},{j}\n")
    write_matrix_csv(os.path.join(directory, "features.csv"), bundle.features)
    with open(os.path.join(directory, "labels.csv"), "w") as fh:
        for c in bundle.labels:
            fh.write(f"{int(c)}\n")


def write_matrix_csv(path, M):
    with open(path, "w") as fh:
        for row in np.atleast_2d(M):
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_matrix_csv(path):
    rows = _read_rows(path)
    if len({len(r) for r in rows}) > 1:
        raise DatasetFormatError("ragged features")
    return np.array([[float(c) for c in r] for r in rows], dtype=np.float64)


# ---------------------------------------------------------------------------
# spectral analytics


def normalized_laplacian(g):
    """L = I - D^{-1/2} A D^{-1/2} as a CSR matrix."""
    if np.any(g.degrees <= 0):
        raise ValueError("zero-degree node; add self-loops")
    dinv = 1.0 / np.sqrt(g.degrees)
    a_hat = sp.csr_matrix((dinv[g.rows] * g.vals * dinv[g.cols], (g.rows, g.cols)), shape=(g.n, g.n))
    return (sp.identity(g.n, format="csr") - a_hat).tocsr()


def rayleigh_quotient(L, Z):
    """Tr(Z^T L Z) / Tr(Z^T Z), summed entry by entry over the nonzeros of L."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim == 1:
        Z = Z[:, None]
    den = float(np.sum(Z * Z))
    if den <= 0:
        raise ValueError("zero embedding matrix")
    L = sp.coo_matrix(L)
    num = float(np.sum(L.data * np.einsum("ij,ij->i", Z[L.row], Z[L.col])))
    return num / den


def local_homophily(g, labels):
    """Fraction of non-self neighbours sharing each node's label (0 if none)."""
    labels = np.asarray(labels)
    m = (g.rows != g.cols) & (g.vals > 0)
    r, c = g.rows[m], g.cols[m]
    total = np.bincount(r, minlength=g.n).astype(np.float64)
    same = np.bincount(r, weights=(labels[r] == labels[c]).astype(np.float64), minlength=g.n)
    out = np.zeros(g.n)
    nz = total > 0
    out[nz] = same[nz] / total[nz]
    return out


def edge_homophily(g, labels):
    """Share of undirected non-self edges joining same-label endpoints."""
    labels = np.asarray(labels)
    pairs = g.edge_pairs()
    if len(pairs) == 0:
        return 0.0
    return float(np.mean(labels[pairs[:, 0]] == labels[pairs[:, 1]]))


# ---------------------------------------------------------------------------
# generators and augmentation


def _sbm_block(rng, labels, p_same, p_diff):
    n = labels.size
    iu, ju = np.triu_indices(n, k=1)
    p = np.where(labels[iu] == labels[ju], p_same, p_diff)
    keep = rng.random(iu.size) < p
    return iu[keep], ju[keep]


def generate_mixed_graph(n_hom, n_het, classes=2, p_in=0.2, p_out=0.02, feat_dim=16,
                         noise=1.0, seed=0, p_cross=0.0):
    """Two-population stochastic block graph.

    Nodes ``[0, n_hom)`` form a homophilic block (same-class edge probability
    ``p_in``, cross-class ``p_out``); the remaining ``n_het`` nodes form a
    heterophilic block with the two probabilities swapped. ``p_cross`` links
    the blocks uniformly. Features are a per-class mean vector plus Gaussian
    noise of scale ``noise``.
    """
    if n_hom < 0 or n_het < 0 or n_hom + n_het == 0:
        raise ValueError("need a positive node count")
    if not (0 < p_in < 1 and 0 < p_out < 1):
        raise ValueError("edge probabilities must lie in (0, 1)")
    if p_in == p_out:
        log.warning("p_in == p_out: blocks carry no label signal")
    rng = np.random.default_rng(seed)
    n = n_hom + n_het
    labels = np.concatenate([np.arange(n_hom) % classes, np.arange(n_het) % classes]).astype(np.int64)
    labels = np.concatenate([rng.permutation(labels[:n_hom]), rng.permutation(labels[n_hom:])])

    src, dst = [], []
    if n_hom:
        i, j = _sbm_block(rng, labels[:n_hom], p_in, p_out)
        src.append(i)
        dst.append(j)
    if n_het:
        i, j = _sbm_block(rng, labels[n_hom:], p_out, p_in)
        src.append(i + n_hom)
        dst.append(j + n_hom)
    if p_cross > 0 and n_hom and n_het:
        keep = rng.random((n_hom, n_het)) < p_cross
        i, j = np.nonzero(keep)
        src.append(i)
        dst.append(j + n_hom)
    src = np.concatenate(src) if src else np.zeros(0, np.int64)
    dst = np.concatenate(dst) if dst else np.zeros(0, np.int64)
    g = Graph.from_edges(n, src, dst, self_loops=True)

    means = rng.normal(size=(classes, feat_dim))
    X = means[labels] + noise * rng.normal(size=(n, feat_dim))
    block = np.concatenate([np.zeros(n_hom, np.int64), np.ones(n_het, np.int64)])
    meta = {"block": block, "r": n_het / n, "p_in": p_in, "p_out": p_out, "seed": seed}
    return DatasetBundle(g, X, labels, name=f"mixed-{n_hom}-{n_het}", meta=meta)


def augment(g, X, edge_drop_rate, feat_mask_rate, seed):
    """Drop undirected non-self edges and zero whole feature columns at random."""
    if not (0 <= edge_drop_rate < 1 and 0 <= feat_mask_rate < 1):
        raise ValueError("rates must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    upper = g.rows < g.cols
    keep_pair = rng.random(int(upper.sum())) >= edge_drop_rate
    # map every directed entry to its undirected pair
    pair_key = np.minimum(g.rows, g.cols) * g.n + np.maximum(g.rows, g.cols)
    upper_keys = pair_key[upper]
    pos = np.searchsorted(upper_keys, pair_key)
    pos = np.clip(pos, 0, max(upper_keys.size - 1, 0))
    loop = g.rows == g.cols
    keep = loop.copy()
    if upper_keys.size:
        keep |= (~loop) & keep_pair[pos]
    g2 = Graph.from_entries(g.n, g.rows[keep], g.cols[keep], g.vals[keep])

    col_keep = rng.random(X.shape[1]) >= feat_mask_rate
    X2 = X * col_keep[None, :]
    return g2, X2


def make_splits(n, n_splits=10, seed=0, train=0.6, val=0.2):
    """Random train/val/test partitions; val and test are floored, train takes the rest."""
    if n < 5:
        raise ValueError("need at least 5 nodes")
    rng = np.random.default_rng(seed)
    n_val = int(np.floor(val * n))
    n_test = int(np.floor((1.0 - train - val) * n + 1e-9))
    out = []
    for _ in range(n_splits):
        perm = rng.permutation(n)
        te = np.sort(perm[:n_test])
        va = np.sort(perm[n_test:n_test + n_val])
        tr = np.sort(perm[n_test + n_val:])
        out.append((tr, va, te))
    return SplitSet(out, seed)
