"""Chebyshev filter machinery.

Filter values at the Chebyshev nodes are built from prefix sums of rectified
parameters, which makes the high-pass response non-decreasing and the
low-pass response non-increasing over the node grid. Coefficients are then
recovered by the discrete Chebyshev transform and the filter is applied with
the three-term recurrence on the rescaled Laplacian.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import diffnet as dn
from .graphcore import normalized_laplacian

LAMBDA_MAX = 2.0


@dataclass
class FilterBank:
    K: int
    delta_L: dn.Tensor
    delta_H: dn.Tensor

    def __post_init__(self):
        self.delta_L = dn.as_tensor(self.delta_L)
        self.delta_H = dn.as_tensor(self.delta_H)
        if self.delta_L.shape != (self.K + 1,) or self.delta_H.shape != (self.K + 1,):
            raise ValueError(f"delta vectors must have length K+1 = {self.K + 1}")

    @classmethod
    def init(cls, K, low=1.0, high=None):
        """Linear starting responses: g_L falls from ``low`` to 0, g_H rises to ``high``."""
        high = low if high is None else high
        dL = np.concatenate([[low], np.full(K, low / K)])
        dH = np.concatenate([[0.0], np.full(K, high / K)])
        return cls(K, dn.Tensor(dL, requires_grad=True, name="delta_L"),
                   dn.Tensor(dH, requires_grad=True, name="delta_H"))


@dataclass
class FilterCoeffs:
    gamma_L: np.ndarray
    gamma_H: np.ndarray
    w_L: np.ndarray | None = None
    w_H: np.ndarray | None = None


def cheb_nodes(K):
    """x_j = cos(pi (j + 1/2) / (K + 1)), j = 0..K (strictly decreasing)."""
    if K < 1:
        raise ValueError("K must be >= 1")
    j = np.arange(K + 1)
    return np.cos(np.pi * (j + 0.5) / (K + 1))


def spectral_grid(K):
    """The Chebyshev nodes in ascending order; gamma_j is the response at the j-th one.

    Ascending pairing is what turns a non-decreasing gamma sequence into a
    high-pass response (larger rescaled eigenvalue, larger gain).
    """
    return cheb_nodes(K)[::-1].copy()


def cheb_basis_matrix(x, K):
    """M[k, j] = T_k(x_j) by the recurrence."""
    x = np.asarray(x, dtype=np.float64)
    M = np.empty((K + 1, x.size))
    M[0] = 1.0
    if K >= 1:
        M[1] = x
    for k in range(2, K + 1):
        M[k] = 2.0 * x * M[k - 1] - M[k - 2]
    return M


def recovery_matrix(nodes):
    """C with w = C @ gamma; row 0 carries the extra factor 1/2."""
    K = len(nodes) - 1
    C = (2.0 / (K + 1)) * cheb_basis_matrix(nodes, K)
    C[0] *= 0.5
    return C


def _prefix_matrices(K):
    high = np.tril(np.ones((K + 1, K + 1)))
    low = -np.tril(np.ones((K + 1, K + 1)))
    low[:, 0] = 1.0
    return low, high


def reconstruct_gammas(bank):
    """gamma_H[i] = sum_{j<=i} relu(dH_j); gamma_L[i] = relu(dL_0) - sum_{1<=j<=i} relu(dL_j).

    Works on the bank's tensors, so the result is differentiable when a tape
    is active. Returns ``(gamma_L, gamma_H)`` as (K+1,) tensors.
    """
    low, high = _prefix_matrices(bank.K)
    gL = dn.matmul(dn.Tensor(low), dn.reshape(dn.relu(bank.delta_L), (bank.K + 1, 1)))
    gH = dn.matmul(dn.Tensor(high), dn.reshape(dn.relu(bank.delta_H), (bank.K + 1, 1)))
    return dn.reshape(gL, (bank.K + 1,)), dn.reshape(gH, (bank.K + 1,))


def coeffs_from_gammas(gamma, nodes=None):
    """Chebyshev coefficients interpolating ``gamma`` at ``nodes``.

    Accepts a numpy vector (returns numpy) or a Tensor (returns a Tensor).
    """
    is_t = isinstance(gamma, dn.Tensor)
    n = gamma.shape[0]
    nodes = spectral_grid(n - 1) if nodes is None else np.asarray(nodes, dtype=np.float64)
    if len(nodes) != n:
        raise ValueError("gamma and nodes differ in length")
    C = recovery_matrix(nodes)
    if is_t:
        return dn.reshape(dn.matmul(dn.Tensor(C), dn.reshape(gamma, (n, 1))), (n,))
    return C @ np.asarray(gamma, dtype=np.float64)


def filter_coeffs(bank):
    """Numeric snapshot of gammas and coefficients for both channels."""
    gL, gH = reconstruct_gammas(bank)
    nodes = spectral_grid(bank.K)
    return FilterCoeffs(gL.data.copy(), gH.data.copy(),
                        coeffs_from_gammas(gL.data, nodes), coeffs_from_gammas(gH.data, nodes))


def rescaled_laplacian(g, lam_max=LAMBDA_MAX):
    L = normalized_laplacian(g)
    return (2.0 / lam_max) * L - sp.identity(g.n, format="csr")


class LaplacianOperator:
    """Differentiable Y -> L~ Y for adjacency entries given as (rows, cols, vals).

    L~ = (2 / lam_max) (I - D^{-1/2} A D^{-1/2}) - I with D the row sums of
    ``vals``. ``vals`` may be a Tensor carrying gradient (perturbed
    adjacency); the degree renormalisation is then differentiated too unless
    ``degrees`` pins it to fixed values.
    """

    def __init__(self, rows, cols, vals, n, lam_max=LAMBDA_MAX, degrees=None):
        self.rows = np.asarray(rows, dtype=np.int64)
        self.cols = np.asarray(cols, dtype=np.int64)
        self.n = int(n)
        self.vals = dn.as_tensor(vals)
        self.scale = 2.0 / lam_max
        if degrees is None:
            deg = dn.segment_sum(self.vals, self.rows, self.n)
        else:
            deg = dn.Tensor(degrees)
        if np.any(deg.data <= 0):
            raise ValueError("zero-degree node in propagation operator")
        dinv = dn.power(deg, -0.5)
        self.norm_vals = dn.mul(dn.mul(dn.gather_rows(dinv, self.rows), self.vals),
                                dn.gather_rows(dinv, self.cols))
        self._A = sp.csr_matrix((self.norm_vals.data, (self.rows, self.cols)), shape=(n, n))

    @classmethod
    def from_graph(cls, g, lam_max=LAMBDA_MAX):
        return cls(g.rows, g.cols, g.vals, g.n, lam_max=lam_max)

    def adjacency_matvec(self, Y):
        return dn.spmm(self.rows, self.cols, self.norm_vals, Y, self.n, A=self._A)

    def __call__(self, Y):
        AY = self.adjacency_matvec(Y)
        if self.scale == 1.0:
            return dn.mul(AY, -1.0)
        return dn.sub(dn.mul(Y, self.scale - 1.0), dn.mul(AY, self.scale))

    def matrix(self):
        """Dense L~ (for checks on small graphs)."""
        return (self.scale - 1.0) * np.eye(self.n) - self.scale * self._A.toarray()


def chebyshev_terms(L_tilde, X, K):
    """[T_0(L~)X, ..., T_K(L~)X].

    ``L_tilde`` is a matrix (dense or sparse) or a callable ``Y -> L~ Y``;
    with a callable the recurrence runs on whatever ``X`` is, including
    :class:`~aspect.diffnet.Tensor`.
    """
    mv = L_tilde if callable(L_tilde) else (lambda Y: L_tilde @ Y)
    terms = [X]
    if K >= 1:
        terms.append(mv(X))
    for _ in range(2, K + 1):
        terms.append(2.0 * mv(terms[-1]) - terms[-2])
    return terms


def combine_terms(terms, w):
    if isinstance(w, dn.Tensor) or isinstance(terms[0], dn.Tensor):
        return dn.lincomb(w, terms)
    out = w[0] * terms[0]
    for k in range(1, len(terms)):
        out = out + w[k] * terms[k]
    return out


def apply_filter(L_tilde, w, X):
    """sum_k w_k T_k(L~) X via the three-term recurrence."""
    K = (w.shape[0] if isinstance(w, dn.Tensor) else len(w)) - 1
    return combine_terms(chebyshev_terms(L_tilde, X, K), w)


def filter_response(w, lam, lam_max=LAMBDA_MAX):
    """Spectral response sum_k w_k T_k(2 lam / lam_max - 1) at Laplacian eigenvalue(s) ``lam``."""
    w = np.asarray(getattr(w, "data", w), dtype=np.float64)
    x = 2.0 * np.asarray(lam, dtype=np.float64) / lam_max - 1.0
    return np.polynomial.chebyshev.chebval(x, w)


def dense_filter_oracle(L, w, X, lam_max=LAMBDA_MAX):
    """U p(Lambda~) U^T X from a dense eigendecomposition of the Laplacian."""
    L = L.toarray() if sp.issparse(L) else np.asarray(L)
    lam, U = np.linalg.eigh(L)
    x = 2.0 * lam / lam_max - 1.0
    # T_k(x) = cos(k arccos x) on [-1, 1]
    k = np.arange(len(w))[:, None]
    p = np.asarray(w) @ np.cos(k * np.arccos(np.clip(x, -1.0, 1.0))[None, :])
    return U @ (p[:, None] * (U.T @ X))
