"""Spectrally targeted PGD attack and the DICE poisoning baseline.

The structural perturbation lives on a candidate set of unordered node pairs
(all clean edges plus sampled non-edges), one weight per pair applied to both
directions. Its Frobenius norm therefore counts each weight twice.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import diffnet as dn
from .cheb import LAMBDA_MAX, LaplacianOperator
from .graphcore import Graph, read_matrix_csv, write_matrix_csv

log = logging.getLogger(__name__)

SQRT2 = np.sqrt(2.0)


@dataclass
class AttackBudget:
    eps_A: float = 0.5
    eps_X: float = 0.5
    eta: float | None = None      # None -> 0.01 * max(eps) / sqrt(T)
    T: int = 5
    lambda_spec: float = 0.5

    def __post_init__(self):
        if min(self.eps_A, self.eps_X, self.lambda_spec) < 0 or (self.eta is not None and self.eta < 0):
            raise ValueError("attack budget entries must be non-negative")
        if self.T < 1:
            raise ValueError("need at least one PGD step")

    @property
    def step_size(self):
        if self.eta is not None:
            return self.eta
        return 0.01 * max(self.eps_A, self.eps_X) / np.sqrt(self.T)


@dataclass
class CandidateEdges:
    pairs: np.ndarray        # (C, 2), i < j, sorted, unique

    def __len__(self):
        return int(self.pairs.shape[0])


@dataclass
class Perturbation:
    candidates: CandidateEdges
    delta_A: np.ndarray      # (C,) one weight per unordered pair
    delta_X: np.ndarray      # (N, F)
    history: list = field(default_factory=list)

    @property
    def norm_A(self):
        return float(SQRT2 * np.linalg.norm(self.delta_A))

    @property
    def norm_X(self):
        return float(np.linalg.norm(self.delta_X))

    @classmethod
    def zeros(cls, candidates, shape):
        return cls(candidates, np.zeros(len(candidates)), np.zeros(shape))


def project_frobenius(v, eps):
    """Project onto the Frobenius ball of radius ``eps``."""
    v = np.asarray(v, dtype=np.float64)
    if eps < 0:
        raise ValueError("eps must be non-negative")
    nrm = np.linalg.norm(v)
    if nrm <= eps:
        return v.copy()
    if eps == 0:
        return np.zeros_like(v)
    return v * (eps / nrm)


def sample_candidates(g, extra_per_node=2, seed=0):
    """Clean non-self edges plus ``extra_per_node`` uniform non-edges per node."""
    if extra_per_node < 0:
        raise ValueError("extra_per_node must be >= 0")
    rng = np.random.default_rng(seed)
    n = g.n
    clean = g.edge_pairs()
    keys = set((clean[:, 0] * n + clean[:, 1]).tolist())
    extra = []
    if extra_per_node and n > 1:
        for v in range(n):
            others = rng.integers(0, n - 1, size=extra_per_node)
            others = others + (others >= v)     # skip v itself
            for u in others:
                i, j = (v, int(u)) if v < u else (int(u), v)
                k = i * n + j
                if k not in keys:
                    keys.add(k)
                    extra.append(k)
    allk = np.array(sorted(keys), dtype=np.int64)
    pairs = np.stack([allk // n, allk % n], axis=1) if allk.size else np.zeros((0, 2), np.int64)
    return CandidateEdges(pairs)


class AttackStructure:
    """Directed entry layout of A + dA: self-loops plus both directions of every candidate."""

    def __init__(self, g, candidates):
        self.g = g
        self.candidates = candidates
        n = g.n
        P = candidates.pairs
        C = len(candidates)
        loop = g.rows == g.cols
        loop_nodes = g.rows[loop]
        self.rows = np.concatenate([loop_nodes, P[:, 0], P[:, 1]]).astype(np.int64)
        self.cols = np.concatenate([loop_nodes, P[:, 1], P[:, 0]]).astype(np.int64)
        clean = g.to_scipy()
        base_pair = np.asarray(clean[P[:, 0], P[:, 1]]).ravel() if C else np.zeros(0)
        self.base = np.concatenate([g.vals[loop], base_pair, base_pair])
        n_loop = loop_nodes.size
        self.pair_index = np.concatenate([np.zeros(n_loop, np.int64), np.arange(C), np.arange(C)])
        self.pair_mask = np.concatenate([np.zeros(n_loop), np.ones(2 * C)])
        self.n = n
        uncovered = g.num_edges - int(np.count_nonzero(base_pair > 0))
        if uncovered:
            raise ValueError(f"{uncovered} clean edges are missing from the candidate set")

    def values(self, delta_A):
        """clamp(A + dA, 0) over the entry layout (differentiable in ``delta_A``)."""
        dA = dn.as_tensor(delta_A)
        if len(self.candidates) == 0:
            return dn.Tensor(self.base.copy())
        spread = dn.mul(dn.gather_rows(dA, self.pair_index), self.pair_mask)
        return dn.clamp_min(dn.add(self.base, spread), 0.0)

    def operator(self, delta_A, lam_max=LAMBDA_MAX, frozen_degrees=False):
        degrees = self.g.degrees if frozen_degrees else None
        return LaplacianOperator(self.rows, self.cols, self.values(delta_A), self.n,
                                 lam_max=lam_max, degrees=degrees)


def rayleigh_tensor(op, Z):
    """Tr(Z^T L Z) / Tr(Z^T Z) with L = I - D^{-1/2} A D^{-1/2} of ``op``.

    Numerator is Tr(Z^T Z) - sum_e a_e <z_r, z_c> over stored entries, so the
    cost is O(nnz * D) and the adjacency path stays differentiable.
    """
    Z = dn.as_tensor(Z)
    zz = dn.sum(dn.mul(Z, Z))
    cross = dn.sum(dn.mul(op.norm_vals,
                          dn.row_dot(dn.gather_rows(Z, op.rows), dn.gather_rows(Z, op.cols))))
    return dn.div(dn.sub(zz, cross), zz)


def _objective(model, struct, dA, dX, X, anchor, m, lambda_spec, tau, frozen_degrees=False,
               max_negatives=None):
    op = struct.operator(dA, frozen_degrees=frozen_degrees)
    Xp = dn.add(X, dX)
    es = model.encode(op, Xp, mode="eval")
    m_col = np.asarray(m, dtype=np.float64).reshape(-1)
    lL = dn.info_nce(es.Z_L, anchor, tau, reduction="none", max_negatives=max_negatives)
    lH = dn.info_nce(es.Z_H, anchor, tau, reduction="none", max_negatives=max_negatives)
    J = dn.add(dn.sum(dn.mul(lL, m_col)), dn.sum(dn.mul(lH, 1.0 - m_col)))
    if lambda_spec:
        gap = dn.sub(rayleigh_tensor(op, es.Z_L), rayleigh_tensor(op, es.Z_H))
        J = dn.add(J, dn.mul(gap, lambda_spec))
    return J, es, op


def clean_reference(model, g, X):
    """Eval-mode anchors and gate on the clean graph: (Z, m) as numpy."""
    es = model.encode(LaplacianOperator.from_graph(g), X, mode="eval")
    return es.Z.data.copy(), es.m.data.reshape(-1).copy()


def adv_objective(model, anchor, m_fixed, g, X, pert, lambda_spec=0.0, tau=0.5,
                  frozen_degrees=False):
    """Value of the attack objective J at a given perturbation (no gradients)."""
    struct = AttackStructure(g, pert.candidates)
    J, _, _ = _objective(model, struct, pert.delta_A, pert.delta_X, X, anchor, m_fixed,
                         lambda_spec, tau, frozen_degrees)
    return J.item()


def objective_and_grads(model, struct, dA, dX, X, anchor, m, lambda_spec, tau,
                        frozen_degrees=False, max_negatives=None):
    dA_t = dn.Tensor(dA, requires_grad=True)
    dX_t = dn.Tensor(dX, requires_grad=True)
    with dn.Tape() as tape:
        J, _, _ = _objective(model, struct, dA_t, dX_t, X, anchor, m, lambda_spec, tau,
                             frozen_degrees, max_negatives)
    tape.backward(J)
    gA = dA_t.grad if dA_t.grad is not None else np.zeros_like(dA)
    gX = dX_t.grad if dX_t.grad is not None else np.zeros_like(dX)
    return J.item(), gA, gX


def rayleigh_gap(model, g, X, pert):
    """R(A', Z'_L) - R(A', Z'_H) for the encoder on the perturbed graph."""
    struct = AttackStructure(g, pert.candidates)
    op = struct.operator(pert.delta_A)
    es = model.encode(op, dn.as_tensor(X + pert.delta_X), mode="eval")
    return rayleigh_tensor(op, es.Z_L).item() - rayleigh_tensor(op, es.Z_H).item()


def pgd_attack(model, g, X, budget, candidates=None, seed=0, tau=0.5, anchor=None, m_fixed=None,
               frozen_degrees=False, extra_per_node=2, max_negatives=None):
    """Projected gradient ascent on J from a zero perturbation.

    Model parameters are only read. ``history`` of the returned perturbation
    holds J before each step and after the last (T + 1 values).
    """
    if candidates is None:
        candidates = sample_candidates(g, extra_per_node, seed)
    if anchor is None or m_fixed is None:
        a, mm = clean_reference(model, g, X)
        anchor = a if anchor is None else anchor
        m_fixed = mm if m_fixed is None else m_fixed
    struct = AttackStructure(g, candidates)
    X = np.asarray(X, dtype=np.float64)
    dA = np.zeros(len(candidates))
    dX = np.zeros_like(X)
    eta = budget.step_size
    rA = budget.eps_A / SQRT2
    hist = []
    for _ in range(budget.T):
        J, gA, gX = objective_and_grads(model, struct, dA, dX, X, anchor, m_fixed,
                                        budget.lambda_spec, tau, frozen_degrees, max_negatives)
        hist.append(J)
        dA = project_frobenius(dA + eta * gA, rA)
        dX = project_frobenius(dX + eta * gX, budget.eps_X)
    J_final, _, _ = _objective(model, struct, dA, dX, X, anchor, m_fixed, budget.lambda_spec, tau,
                               frozen_degrees, max_negatives)
    hist.append(J_final.item())
    steps = np.diff(hist)
    up = float(np.mean(steps >= -1e-12)) if steps.size else 1.0
    log.debug("pgd: J %.6g -> %.6g, non-decreasing in %.0f%% of steps", hist[0], hist[-1], 100 * up)
    if up < 0.8:
        log.warning("pgd: J rose in only %.0f%% of steps; step size may be too large", 100 * up)
    return Perturbation(candidates, dA, dX, hist)


def apply_perturbation(g, X, pert):
    """Materialise (A', X'): A' = max(0, A + dA) on candidates, self-loops untouched."""
    struct = AttackStructure(g, pert.candidates)
    vals = struct.values(pert.delta_A).data
    keep = (struct.rows == struct.cols) | (vals > 0)
    g2 = Graph.from_entries(g.n, struct.rows[keep], struct.cols[keep], vals[keep])
    return g2, np.asarray(X, dtype=np.float64) + pert.delta_X


def dice_attack(g, labels, rate, seed=0, return_stats=False):
    """Delete same-label edges and insert cross-label non-edges, ``rate * |E|`` in total.

    Half the budget (rounded down) goes to insertions, the rest to deletions.
    Shortfalls (too few same-label edges or no cross-label pairs) are logged.
    """
    if not 0 <= rate < 1:
        raise ValueError("rate must lie in [0, 1)")
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    n = g.n
    pairs = g.edge_pairs()
    n_mod = int(round(rate * len(pairs)))
    n_add = n_mod // 2
    n_del = n_mod - n_add

    same = np.flatnonzero(labels[pairs[:, 0]] == labels[pairs[:, 1]])
    if n_del > same.size:
        log.warning("dice: only %d same-label edges, wanted %d deletions", same.size, n_del)
    drop = rng.choice(same, size=min(n_del, same.size), replace=False) if same.size else np.zeros(0, int)
    keep = np.ones(len(pairs), bool)
    keep[drop] = False

    existing = set((pairs[:, 0] * n + pairs[:, 1]).tolist())
    counts = np.bincount(labels, minlength=int(labels.max()) + 1) if labels.size else np.zeros(0)
    cross_total = (n * (n - 1) // 2) - int(np.sum(counts * (counts - 1) // 2))
    cross_existing = len(pairs) - same.size
    available = cross_total - cross_existing
    if n_add > available:
        log.warning("dice: only %d cross-label non-edges available, wanted %d insertions",
                    available, n_add)
    target = min(n_add, available)
    added = []
    seen = set()
    while len(added) < target:
        i, j = rng.integers(0, n, size=2)
        if i == j or labels[i] == labels[j]:
            continue
        i, j = (int(i), int(j)) if i < j else (int(j), int(i))
        k = i * n + j
        if k in existing or k in seen:
            continue
        seen.add(k)
        added.append((i, j))
    added = np.array(added, dtype=np.int64).reshape(-1, 2)
    new_pairs = np.concatenate([pairs[keep], added])
    loop_w = g.self_loop_weights()
    src = np.concatenate([new_pairs[:, 0], new_pairs[:, 1], np.arange(n)])
    dst = np.concatenate([new_pairs[:, 1], new_pairs[:, 0], np.arange(n)])
    vals = np.ones(src.size)
    vals[-n:] = loop_w
    lm = (src != dst) | (vals > 0)
    g2 = Graph.from_entries(n, src[lm], dst[lm], vals[lm])
    stats = {"requested": n_mod, "deleted": int(drop.size), "added": int(len(added)),
             "shortfall": n_mod - int(drop.size) - int(len(added))}
    if stats["shortfall"]:
        log.info("dice: %s", stats)
    return (g2, stats) if return_stats else g2


# ---------------------------------------------------------------------------
# serialization


def save_perturbation(pert, directory):
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, "delta_A.csv"), "w") as fh:
        for (i, j), w in zip(pert.candidates.pairs, pert.delta_A):
            fh.write(f"{int(i)},{int(j)},{float(w)!r}\n")
    write_matrix_csv(os.path.join(directory, "delta_X.csv"), pert.delta_X)


def load_perturbation(directory):
    import csv

    rows = []
    with open(os.path.join(directory, "delta_A.csv"), newline="") as fh:
        for r in csv.reader(fh):
            if r:
                rows.append((int(r[0]), int(r[1]), float(r[2])))
    pairs = np.array([(i, j) for i, j, _ in rows], dtype=np.int64).reshape(-1, 2)
    dA = np.array([w for _, _, w in rows], dtype=np.float64)
    dX = read_matrix_csv(os.path.join(directory, "delta_X.csv"))
    return Perturbation(CandidateEdges(pairs), dA, dX)
