"""Symmetric block-banded matrices, banded Cholesky solves and Takahashi
selected inversion.

A symmetric matrix with K x K blocks of size d x d and block bandwidth w is
stored by its lower block band: ``blocks[k, j] = A[k, k - j]`` for
``j = 0..w``. Entries with ``k - j < 0`` are unused and kept at zero.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .errors import ConditioningError, InvalidArgumentError


@dataclass
class BlockBanded:
    blocks: np.ndarray

    @classmethod
    def zeros(cls, K, d, bandwidth):
        return cls(np.zeros((K, bandwidth + 1, d, d)))

    @classmethod
    def from_dense(cls, A, d, bandwidth):
        A = np.asarray(A, dtype=float)
        K = A.shape[0] // d
        out = cls.zeros(K, d, bandwidth)
        for k in range(K):
            for j in range(min(bandwidth, k) + 1):
                out.blocks[k, j] = A[k * d:(k + 1) * d, (k - j) * d:(k - j + 1) * d]
        return out

    @property
    def num_blocks(self):
        return self.blocks.shape[0]

    @property
    def block_size(self):
        return self.blocks.shape[2]

    @property
    def bandwidth(self):
        return self.blocks.shape[1] - 1

    @property
    def shape(self):
        n = self.num_blocks * self.block_size
        return (n, n)

    def to_dense(self):
        K, d, w = self.num_blocks, self.block_size, self.bandwidth
        A = np.zeros((K * d, K * d))
        for k in range(K):
            for j in range(min(w, k) + 1):
                blk = self.blocks[k, j]
                A[k * d:(k + 1) * d, (k - j) * d:(k - j + 1) * d] = blk
                if j:
                    A[(k - j) * d:(k - j + 1) * d, k * d:(k + 1) * d] = blk.T
        return A

    def diagonal_blocks(self):
        return self.blocks[:, 0]

    def matvec(self, x):
        K, d, w = self.num_blocks, self.block_size, self.bandwidth
        X = np.asarray(x, dtype=float).reshape(K, d)
        Y = np.einsum("kab,kb->ka", self.blocks[:, 0], X)
        for j in range(1, w + 1):
            if j >= K:
                break
            blk = self.blocks[j:, j]
            Y[j:] += np.einsum("kab,kb->ka", blk, X[:-j])
            Y[:-j] += np.einsum("kba,kb->ka", blk, X[j:])
        return Y.reshape(-1)

    def _lapack_index(self):
        K, d, w = self.num_blocks, self.block_size, self.bandwidth
        n = K * d
        p = d * (w + 1) - 1
        r = np.arange(p + 1)[:, None]
        c = np.arange(n)[None, :]
        i = c + r
        kb_i, kb_c = i // d, c // d
        j = kb_i - kb_c
        valid = (i < n) & (j <= w)
        a, b = np.broadcast_arrays(i % d, c % d)
        return valid, np.where(valid, kb_i, 0), np.where(valid, j, 0), a, b, p

    def to_lapack(self):
        """Lower symmetric band storage as used by LAPACK ``?pbtrf``."""
        valid, kb, j, a, b, _ = self._lapack_index()
        vals = self.blocks[kb, j, a, b]
        return np.where(valid, vals, 0.0)

    @classmethod
    def from_lapack_lower(cls, ab, d, bandwidth):
        """Rebuild block storage from a lower band array (e.g. a Cholesky factor)."""
        n = ab.shape[1]
        out = cls.zeros(n // d, d, bandwidth)
        valid, kb, j, a, b, _ = out._lapack_index()
        out.blocks[kb[valid], j[valid], a[valid], b[valid]] = ab[valid]
        return out


@dataclass
class BandedCholesky:
    """Lower Cholesky factor ``A = L L^T`` of a block-banded SPD matrix."""

    lapack: np.ndarray
    block_size: int
    bandwidth: int
    jitter: float = 0.0

    def solve(self, g):
        return scipy.linalg.cho_solve_banded((self.lapack, True), np.asarray(g, dtype=float))

    def blocks(self):
        return BlockBanded.from_lapack_lower(self.lapack, self.block_size, self.bandwidth)

    def logdet(self):
        return 2.0 * float(np.sum(np.log(self.lapack[0])))


def cholesky(A: BlockBanded, allow_jitter=True) -> BandedCholesky:
    """Banded Cholesky; one jitter retry of ``1e-10 * trace / n`` before failing."""
    ab = A.to_lapack()
    try:
        L = scipy.linalg.cholesky_banded(ab, lower=True)
        return BandedCholesky(L, A.block_size, A.bandwidth)
    except np.linalg.LinAlgError:
        if not allow_jitter:
            raise ConditioningError("banded matrix is not positive definite") from None
    n = ab.shape[1]
    jitter = 1e-10 * float(np.sum(ab[0])) / n
    ab = ab.copy()
    ab[0] += jitter
    try:
        L = scipy.linalg.cholesky_banded(ab, lower=True)
    except np.linalg.LinAlgError:
        raise ConditioningError("banded matrix is not positive definite after jitter") from None
    return BandedCholesky(L, A.block_size, A.bandwidth, jitter)


def solve_banded(A: BlockBanded, g):
    """Solve ``A x = g`` for symmetric positive definite block-banded ``A``."""
    g = np.asarray(g, dtype=float)
    if g.shape[0] != A.shape[0]:
        raise InvalidArgumentError("right-hand side does not match matrix size")
    return cholesky(A).solve(g)


def takahashi(factor) -> BlockBanded:
    """In-band blocks of ``A^-1`` from the Cholesky factor of ``A``.

    Runs the backward recursion
    ``Sigma_kj = L_kk^-T (delta_kj L_kk^-1 - sum_m L_mk^T Sigma_mj)``, with m
    over the w block rows below k, keeping a sliding window of the already
    computed ``w x w`` block trailing submatrix of ``Sigma``. Only entries
    within the band are produced.
    """
    if isinstance(factor, BandedCholesky):
        L = factor.blocks()
    else:
        L = factor
    K, d, w = L.num_blocks, L.block_size, L.bandwidth
    out = BlockBanded.zeros(K, d, w)
    Lb = L.blocks
    Linv = np.linalg.inv(Lb[:, 0])
    LinvT = np.swapaxes(Linv, 1, 2)
    base = LinvT @ Linv
    if w == 0:
        out.blocks[:, 0] = base
        return out

    wd = w * d
    # Bt[k] stacks L_{k+m, k}^T for m = 1..w side by side
    Bt = np.zeros((K, d, wd))
    for m in range(1, min(w, K - 1) + 1):
        Bt[:K - m, :, (m - 1) * d:m * d] = np.swapaxes(Lb[m:, m], 1, 2)
    # window holds Sigma over block rows k+1..k+w (zero padded past the end)
    window = np.zeros((wd, wd))
    offs = np.empty((K, d, wd))
    for k in range(K - 1, -1, -1):
        off = -LinvT[k] @ (Bt[k] @ window)  # Sigma_{k, k+1..k+w}
        diag = base[k] - LinvT[k] @ (Bt[k] @ off.T)
        diag = 0.5 * (diag + diag.T)
        out.blocks[k, 0] = diag
        offs[k] = off
        new = np.empty_like(window)
        new[:d, :d] = diag
        new[:d, d:] = off[:, :wd - d]
        new[d:, :d] = off[:, :wd - d].T
        new[d:, d:] = window[:wd - d, :wd - d]
        window = new
    for m in range(1, min(w, K - 1) + 1):
        out.blocks[m:, m] = np.swapaxes(offs[:K - m, :, (m - 1) * d:m * d], 1, 2)
    return out


def marginals(factor):
    """Diagonal blocks of ``A^-1``."""
    return takahashi(factor).diagonal_blocks().copy()
