"""Block-banded inverse covariance noise models and their learners.

The inverse covariance of a stacked error sequence is parameterized as
``R^-1 = S^T W S`` where ``W = diag(W_1..W_K)`` and ``S`` is unit lower
block-triangular with block bandwidth ``b``. Row k of ``S`` whitens the
current error against the previous ones::

    r_k = S_{k,b} e_{k-b} + ... + S_{k,1} e_{k-1} + e_k

and the negative log-likelihood splits into one factor per row,
``0.5 r_k^T W_k r_k - 0.5 ln|W_k|``.

Two learners are provided: a closed-form constant model fitted to
groundtruth residuals, and a feature-conditioned model in which each
training window is weighted by a squared-exponential kernel on features.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .banded import BlockBanded
from .errors import (
    InsufficientDataError,
    InvalidArgumentError,
    LowSupportError,
    ModelInvalidError,
    RankDeficiencyError,
)

log = logging.getLogger(__name__)

FEATURE_DIM = 6
MAX_CONDITION = 1e12


def spd_inverse(A):
    """Invert (a batch of) SPD matrices through Cholesky.

    Retries once with ``1e-10 * trace / M`` added to the diagonal.
    """
    A = np.asarray(A, dtype=float)
    A = 0.5 * (A + np.swapaxes(A, -1, -2))
    eye = np.eye(A.shape[-1])
    try:
        L = np.linalg.cholesky(A)
    except np.linalg.LinAlgError:
        tr = np.trace(A, axis1=-2, axis2=-1)[..., None, None] / A.shape[-1]
        try:
            L = np.linalg.cholesky(A + 1e-10 * tr * eye)
        except np.linalg.LinAlgError:
            raise ModelInvalidError("matrix is not positive definite") from None
    Linv = np.linalg.inv(L)
    return np.swapaxes(Linv, -1, -2) @ Linv


def is_spd(A):
    try:
        np.linalg.cholesky(0.5 * (A + np.swapaxes(A, -1, -2)))
    except np.linalg.LinAlgError:
        return False
    return True


@dataclass
class BandedNoiseModel:
    """Per-timestep blocks of ``R^-1 = S^T W S``.

    ``W[k]`` is the M x M weight of row k and ``S[k, j - 1]`` multiplies
    ``e_{k-j}``. Rows ``k < b`` only use ``j <= k``; the remaining entries are
    zero.
    """

    W: np.ndarray
    S: np.ndarray

    def __post_init__(self):
        self.W = np.asarray(self.W, dtype=float)
        K, M = self.W.shape[0], self.W.shape[1]
        if self.S is None:
            self.S = np.zeros((K, 0, M, M))
        self.S = np.asarray(self.S, dtype=float)
        if self.W.shape != (K, M, M) or self.S.shape[0] != K or self.S.shape[2:] != (M, M):
            raise InvalidArgumentError("inconsistent noise model block shapes")
        for j in range(1, self.bandwidth + 1):
            if np.any(self.S[:j, j - 1] != 0.0):
                raise ModelInvalidError("boundary rows reference errors before the sequence start")

    @property
    def length(self):
        return self.W.shape[0]

    @property
    def block_dim(self):
        return self.W.shape[1]

    @property
    def bandwidth(self):
        return self.S.shape[1]

    def validate(self):
        if not is_spd(self.W):
            raise ModelInvalidError("every W_k must be symmetric positive definite")
        return self

    def row_matrix(self, k):
        """``[S_{k,b'} .. S_{k,1} 1]`` for row k with b' = min(b, k)."""
        bk = min(self.bandwidth, k)
        M = self.block_dim
        out = np.empty((M, (bk + 1) * M))
        for j in range(1, bk + 1):
            out[:, (bk - j) * M:(bk - j + 1) * M] = self.S[k, j - 1]
        out[:, bk * M:] = np.eye(M)
        return out

    def whiten(self, errors):
        """Whitened residuals ``r_k`` for a (K, M) error sequence."""
        errors = np.asarray(errors, dtype=float)
        r = errors.copy()
        for j in range(1, self.bandwidth + 1):
            r[j:] += np.einsum("kab,kb->ka", self.S[j:, j - 1], errors[:-j])
        return r

    def negloglik(self, errors):
        """Sum of all row factors ``0.5 r^T W r - 0.5 ln|W|``."""
        r = self.whiten(errors)
        quad = np.einsum("ka,kab,kb->", r, self.W, r)
        _, logdet = np.linalg.slogdet(self.W)
        return 0.5 * quad - 0.5 * float(np.sum(logdet))

    def to_dict(self):
        blocks = []
        for k in range(self.length):
            entry = {"k": k + 1, "W": self.W[k].ravel().tolist(), "S": []}
            for j in range(1, min(self.bandwidth, k) + 1):
                entry["S"].append({"j": j, "block": self.S[k, j - 1].ravel().tolist()})
            blocks.append(entry)
        return {
            "bandwidth": self.bandwidth,
            "block_dim": self.block_dim,
            "length": self.length,
            "blocks": blocks,
        }

    @classmethod
    def from_dict(cls, data):
        K, M, b = data["length"], data["block_dim"], data["bandwidth"]
        W = np.zeros((K, M, M))
        S = np.zeros((K, b, M, M))
        for entry in data["blocks"]:
            k = entry["k"] - 1
            W[k] = np.reshape(entry["W"], (M, M))
            for s in entry["S"]:
                S[k, s["j"] - 1] = np.reshape(s["block"], (M, M))
        return cls(W, S)

    @classmethod
    def constant(cls, S_star, W_star, boundary, length):
        """Repeat a constant model along a sequence of the given length.

        ``boundary`` lists the lower-bandwidth models used by rows
        ``k < b``, as returned by :func:`learn_boundary`.
        """
        W_star = np.asarray(W_star, dtype=float)
        M = W_star.shape[0]
        b = np.asarray(S_star).shape[1] // M if S_star is not None else 0
        W = np.broadcast_to(W_star, (length, M, M)).copy()
        S = np.zeros((length, b, M, M))
        for j in range(1, b + 1):
            S[:, j - 1] = S_star[:, (b - j) * M:(b - j + 1) * M]
        for k in range(min(b, length)):
            Sk, Wk = boundary[k]
            W[k] = Wk
            S[k] = 0.0
            for j in range(1, k + 1):
                S[k, j - 1] = Sk[:, (k - j) * M:(k - j + 1) * M]
        return cls(W, S)


def assemble_inverse_covariance(model: BandedNoiseModel) -> BlockBanded:
    """Block-banded ``S^T W S`` with the model's bandwidth."""
    model.validate()
    K, M, b = model.length, model.block_dim, model.bandwidth
    out = BlockBanded.zeros(K, M, b)
    # G[k, i] is the coefficient of e_{k-i} in r_k
    G = np.concatenate([np.broadcast_to(np.eye(M), (K, 1, M, M)), model.S], axis=1)
    for i in range(b + 1):
        for j in range(i, b + 1):
            ks = np.arange(j, K)
            if ks.size == 0:
                continue
            contrib = np.einsum("kab,kac,kcd->kbd", G[ks, i], model.W[ks], G[ks, j])
            out.blocks[ks - i, j - i] += contrib
    return out


def factor_negloglik(window_errors, S_blocks, W):
    """One factor ``0.5 e^T [S 1]^T W [S 1] e - 0.5 ln|W|``.

    ``window_errors`` stacks ``e_{k-b}, .., e_k`` and ``S_blocks`` is the
    M x bM matrix ``[S_{k,b} .. S_{k,1}]`` (may have zero columns).
    """
    W = np.asarray(W, dtype=float)
    M = W.shape[0]
    e = np.asarray(window_errors, dtype=float).ravel()
    S_blocks = np.zeros((M, 0)) if S_blocks is None else np.asarray(S_blocks, dtype=float)
    if e.size != S_blocks.shape[1] + M:
        raise InvalidArgumentError("window length does not match the correlation blocks")
    r = S_blocks @ e[:-M] + e[-M:]
    try:
        L = np.linalg.cholesky(W)
    except np.linalg.LinAlgError:
        raise ModelInvalidError("W must be symmetric positive definite") from None
    return 0.5 * float(r @ W @ r) - float(np.sum(np.log(np.diag(L))))


@dataclass
class ErrorDataset:
    """Groundtruth-evaluated residuals with optional per-timestep features.

    ``valid`` marks timesteps that carry a residual; windows touching an
    invalid timestep are skipped by the learners.
    """

    errors: np.ndarray
    features: np.ndarray = None
    valid: np.ndarray = None

    def __post_init__(self):
        self.errors = np.atleast_2d(np.asarray(self.errors, dtype=float))
        N = self.errors.shape[0]
        if self.valid is None:
            self.valid = np.ones(N, dtype=bool)
        self.valid = np.asarray(self.valid, dtype=bool)
        if not np.all(np.isfinite(self.errors[self.valid])):
            raise InvalidArgumentError("residuals must be finite")
        if self.features is not None:
            self.features = np.asarray(self.features, dtype=float)
            if self.features.shape[0] != N:
                raise InvalidArgumentError("features and residuals differ in length")

    def __len__(self):
        return self.errors.shape[0]

    @property
    def block_dim(self):
        return self.errors.shape[1]

    def windows(self, b):
        """Stacked windows ``e_{i-b:i}`` (oldest first) and their end indices."""
        N, M = self.errors.shape
        if N <= b:
            return np.zeros((0, (b + 1) * M)), np.zeros(0, dtype=int)
        ends = np.arange(b, N)
        ok = np.ones(ends.size, dtype=bool)
        for j in range(b + 1):
            ok &= self.valid[ends - j]
        ends = ends[ok]
        Y = np.concatenate([self.errors[ends - b + j] for j in range(b + 1)], axis=1)
        return Y, ends

    def subset(self, start, stop):
        feats = None if self.features is None else self.features[start:stop]
        return ErrorDataset(self.errors[start:stop], feats, self.valid[start:stop])


def _check_identifiable(n_windows, M, b):
    if n_windows < max(b + 2, 10 * M * (b + 1)):
        raise InsufficientDataError(
            f"{n_windows} training windows are too few for bandwidth {b} and block "
            f"dimension {M} (need at least {10 * M * (b + 1)})"
        )


def _solve_from_gram(gram, weight, M, b):
    """Closed-form (S, W) from weighted window Gram matrices (batched).

    ``gram`` has shape (..., (b+1)M, (b+1)M) and holds ``sum h_i y_i y_i^T``.
    Returns S of shape (..., M, bM) and W of shape (..., M, M).
    """
    gram = np.asarray(gram, dtype=float)
    weight = np.asarray(weight, dtype=float)
    bM = b * M
    if b == 0:
        S = np.zeros(gram.shape[:-2] + (M, 0))
        resid = gram
    else:
        G = gram[..., :bM, :bM]
        C = gram[..., bM:, :bM]
        cond = np.linalg.cond(G)
        if np.any(~np.isfinite(cond) | (cond > MAX_CONDITION)):
            raise RankDeficiencyError("window Gram matrix is singular", float(np.max(cond)))
        S = -np.swapaxes(np.linalg.solve(G, np.swapaxes(C, -1, -2)), -1, -2)
        P = np.concatenate([S, np.broadcast_to(np.eye(M), S.shape[:-2] + (M, M))], axis=-1)
        resid = P @ gram @ np.swapaxes(P, -1, -2)
    W = weight[..., None, None] * spd_inverse(resid)
    return S, 0.5 * (W + np.swapaxes(W, -1, -2))


def learn_constant(data: ErrorDataset, b):
    """Closed-form constant model ``(S_*, W_*)`` at bandwidth b.

    ``S_* = -(sum e_i z_i^T)(sum z_i z_i^T)^-1`` with ``z_i = e_{i-b:i-1}``
    and ``W_*`` the inverse of the mean outer product of whitened residuals.
    """
    if b < 0:
        raise InvalidArgumentError("bandwidth must be non-negative")
    M = data.block_dim
    Y, _ = data.windows(b)
    _check_identifiable(Y.shape[0], M, b)
    return _solve_from_gram(Y.T @ Y, float(Y.shape[0]), M, b)


def learn_boundary(data: ErrorDataset, b):
    """Constant models at bandwidths ``0..b-1`` for the first b rows."""
    return [learn_constant(data, bb) for bb in range(b)]


def constant_objective(S_star, W_star, data: ErrorDataset):
    """The training negative log-likelihood summed over full-bandwidth windows."""
    M = data.block_dim
    b = np.asarray(S_star).shape[1] // M
    Y, _ = data.windows(b)
    return weighted_objective(S_star, W_star, Y, np.ones(Y.shape[0]))


def weighted_objective(S_star, W_star, Y, h):
    W_star = np.asarray(W_star, dtype=float)
    M = W_star.shape[0]
    P = np.concatenate([np.asarray(S_star, dtype=float).reshape(M, -1), np.eye(M)], axis=1)
    R = Y @ P.T
    quad = np.einsum("na,ab,nb->n", R, W_star, R)
    sign, logdet = np.linalg.slogdet(W_star)
    if sign <= 0:
        return math.inf
    return 0.5 * float(np.sum(h * (quad - logdet)))


def constant_model(data: ErrorDataset, b, length):
    """Constant banded model of the given length, boundary rows included."""
    S_star, W_star = learn_constant(data, b)
    return BandedNoiseModel.constant(S_star, W_star, learn_boundary(data, b), length)


def _as_weight_matrix(Mmat):
    Mmat = np.asarray(Mmat, dtype=float)
    if Mmat.ndim == 1:
        Mmat = np.diag(Mmat)
    if Mmat.shape[0] != Mmat.shape[1] or not np.allclose(Mmat, Mmat.T):
        raise InvalidArgumentError("kernel weight matrix must be symmetric")
    return Mmat


def _feature_transform(Mmat):
    """Map features so that squared Euclidean distance equals the M-weighted one."""
    Mmat = _as_weight_matrix(Mmat)
    if np.count_nonzero(Mmat - np.diag(np.diag(Mmat))) == 0:
        diag = np.diag(Mmat)
        if np.any(diag < 0):
            raise InvalidArgumentError("kernel weight matrix must be positive semidefinite")
        return np.diag(np.sqrt(diag))
    vals, vecs = np.linalg.eigh(Mmat)
    if vals.min() < -1e-12 * max(1.0, vals.max()):
        raise InvalidArgumentError("kernel weight matrix must be positive semidefinite")
    return vecs * np.sqrt(np.clip(vals, 0.0, None))


def kernel_eval(psi_i, psi_star, Mmat):
    """Squared-exponential kernel ``exp(-0.5 d^T M d)`` with ``d = psi_i - psi_star``."""
    d = np.asarray(psi_i, dtype=float) - np.asarray(psi_star, dtype=float)
    Mmat = _as_weight_matrix(Mmat)
    return float(np.exp(-0.5 * d @ Mmat @ d))


def kernel_matrix(psi_a, psi_b, Mmat):
    T = _feature_transform(Mmat)
    A = np.atleast_2d(psi_a) @ T
    B = np.atleast_2d(psi_b) @ T
    return np.exp(-0.5 * cdist(A, B, "sqeuclidean"))


class VaryingNoiseLearner:
    """Kernel-weighted closed-form learner at a fixed bandwidth.

    Holds the training windows and their outer products so that many target
    features can be predicted with one matrix product per chunk.
    """

    def __init__(self, data: ErrorDataset, b, min_support=None, on_low_support="fallback"):
        if data.features is None:
            raise InvalidArgumentError("the varying learner needs features")
        if on_low_support not in ("fallback", "raise"):
            raise InvalidArgumentError("on_low_support must be 'fallback' or 'raise'")
        self.b = b
        self.M = data.block_dim
        self.Y, self.ends = data.windows(b)
        _check_identifiable(self.Y.shape[0], self.M, b)
        self.features = data.features[self.ends]
        n = self.Y.shape[1]
        self.outer = np.einsum("ia,ib->iab", self.Y, self.Y).reshape(-1, n * n)
        self.min_support = 5 * self.M * (b + 1) if min_support is None else min_support
        self.on_low_support = on_low_support
        self.fallback = _solve_from_gram(self.Y.T @ self.Y, float(self.Y.shape[0]), self.M, b)

    def _solve(self, h, quiet=False):
        n = self.Y.shape[1]
        H = h.sum(axis=1)
        gram = (h @ self.outer).reshape(-1, n, n)
        S = np.empty((h.shape[0], self.M, self.b * self.M))
        W = np.empty((h.shape[0], self.M, self.M))
        low = H < self.min_support
        if np.any(low):
            if self.on_low_support == "raise":
                raise LowSupportError(
                    f"kernel support {H.min():.3g} below threshold {self.min_support}")
            log.log(logging.DEBUG if quiet else logging.WARNING,
                    "%d target(s) below kernel support %s; using the constant model",
                    int(low.sum()), self.min_support)
            S[low], W[low] = self.fallback
        ok = ~low
        if np.any(ok):
            try:
                S[ok], W[ok] = _solve_from_gram(gram[ok], H[ok], self.M, self.b)
            except (RankDeficiencyError, ModelInvalidError):
                if self.on_low_support == "raise":
                    raise
                for idx in np.flatnonzero(ok):
                    try:
                        S[idx], W[idx] = _solve_from_gram(gram[idx], H[idx], self.M, self.b)
                    except (RankDeficiencyError, ModelInvalidError):
                        S[idx], W[idx] = self.fallback
        return S, W

    def predict(self, psi_star, Mmat, chunk=1024):
        """Predicted (S, W) for each row of ``psi_star``."""
        psi_star = np.atleast_2d(np.asarray(psi_star, dtype=float))
        T = _feature_transform(Mmat)
        train = self.features @ T
        S_out, W_out = [], []
        for start in range(0, psi_star.shape[0], chunk):
            target = psi_star[start:start + chunk] @ T
            h = np.exp(-0.5 * cdist(target, train, "sqeuclidean"))
            S, W = self._solve(h)
            S_out.append(S)
            W_out.append(W)
        return np.concatenate(S_out), np.concatenate(W_out)

    def loo_terms(self, Mmat, eval_rows, exclusion_radius=0):
        """Held-out negative log-likelihood of each window in ``eval_rows``.

        Each evaluated window is scored under the model predicted at its own
        feature with every training window whose end lies within
        ``exclusion_radius`` timesteps of it removed.
        """
        T = _feature_transform(Mmat)
        train = self.features @ T
        target = train[eval_rows]
        h = np.exp(-0.5 * cdist(target, train, "sqeuclidean"))
        gap = np.abs(self.ends[eval_rows][:, None] - self.ends[None, :])
        h[gap <= exclusion_radius] = 0.0
        S, W = self._solve(h, quiet=True)
        Y = self.Y[eval_rows]
        r = Y[:, -self.M:] + np.einsum("nab,nb->na", S, Y[:, :-self.M])
        quad = np.einsum("na,nab,nb->n", r, W, r)
        _, logdet = np.linalg.slogdet(W)
        return 0.5 * (quad - logdet)

    def loo_score(self, Mmat, eval_rows, exclusion_radius=0):
        """Sum of :meth:`loo_terms`."""
        return float(np.sum(self.loo_terms(Mmat, eval_rows, exclusion_radius)))


def predict_varying(psi_star, data: ErrorDataset, b, Mmat, **kwargs):
    """Kernel-weighted (S, W) for a single target feature."""
    S, W = VaryingNoiseLearner(data, b, **kwargs).predict(np.atleast_2d(psi_star), Mmat)
    return S[0], W[0]


def varying_model(data: ErrorDataset, b, Mmat, features, **kwargs):
    """Banded model for a test sequence with the given per-timestep features.

    Rows ``k < b`` use the varying learner at bandwidth k.
    """
    features = np.asarray(features, dtype=float)
    K, M = features.shape[0], data.block_dim
    W = np.empty((K, M, M))
    S = np.zeros((K, b, M, M))
    for bb in range(min(b, K - 1) + 1):
        learner = VaryingNoiseLearner(data, bb, **kwargs)
        rows = np.arange(bb, K) if bb == b else np.array([bb])
        Sk, Wk = learner.predict(features[rows], Mmat)
        W[rows] = Wk
        for j in range(1, bb + 1):
            S[rows, j - 1] = Sk[:, :, (bb - j) * M:(bb - j + 1) * M]
    return BandedNoiseModel(W, S)


@dataclass
class KernelSearch:
    """Grid settings for the diagonal kernel weight search.

    Each diagonal entry is ``10**g / var_d`` with g on a log grid, or zero to
    switch the dimension off.
    """

    grid: tuple = tuple(np.linspace(-2.0, 2.0, 7))
    refinement_passes: int = 2
    max_sweeps: int = 3
    max_eval: int = 500
    exclusion_radius: int = 20
    starts: tuple = ("off", "mid")


def train_kernel_weights(data: ErrorDataset, b, search: KernelSearch = None):
    """Diagonal kernel weight matrix maximizing the held-out likelihood.

    Multi-start coordinate descent over a log-spaced grid per feature
    dimension, followed by refinement passes at halved grid spacing.
    """
    search = search or KernelSearch()
    if data.features is None:
        raise InvalidArgumentError("kernel training needs features")
    if len(data) < 200:
        raise InsufficientDataError("kernel training needs at least 200 timesteps")
    learner = VaryingNoiseLearner(data, b)
    L = learner.features.shape[1]
    var = learner.features.var(axis=0)
    scale = np.abs(learner.features).mean(axis=0) ** 2 + 1.0
    active = var > 1e-12 * scale
    if not np.any(active):
        log.warning("features are degenerate in every dimension; kernel disabled")
        return np.zeros((L, L))

    n = learner.Y.shape[0]
    n_eval = min(search.max_eval, n)
    eval_rows = np.unique(np.linspace(0, n - 1, n_eval).round().astype(int))

    def weights(g):
        out = np.zeros(L)
        for d in range(L):
            if active[d] and g[d] is not None:
                out[d] = 10.0 ** g[d] / var[d]
        return out

    cache = {}

    def score(g):
        key = tuple(g)
        if key not in cache:
            cache[key] = learner.loo_score(np.diag(weights(g)), eval_rows, search.exclusion_radius)
        return cache[key]

    mid = float(np.median(search.grid))
    best_g, best = None, math.inf
    for start in search.starts:
        g = [None if start == "off" or not active[d] else mid for d in range(L)]
        current = score(g)
        for _ in range(search.max_sweeps):
            improved = False
            for d in np.flatnonzero(active):
                for cand in (None,) + tuple(search.grid):
                    if cand == g[d]:
                        continue
                    trial = list(g)
                    trial[d] = cand
                    s = score(trial)
                    if s < current - 1e-9 * abs(current):
                        g, current, improved = trial, s, True
            if not improved:
                break
        step = float(np.diff(search.grid).mean()) if len(search.grid) > 1 else 1.0
        for _ in range(search.refinement_passes):
            step /= 2.0
            for d in np.flatnonzero(active):
                if g[d] is None:
                    continue
                for cand in (g[d] - step, g[d] + step):
                    trial = list(g)
                    trial[d] = cand
                    s = score(trial)
                    if s < current - 1e-9 * abs(current):
                        g, current = trial, s
        if current < best:
            best_g, best = g, current
    log.debug("kernel search: %d evaluations, best score %.6g", len(cache), best)
    return np.diag(weights(best_g))
