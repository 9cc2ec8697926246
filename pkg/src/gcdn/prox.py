"""Classical proximal-gradient denoiser with a graph-smoothness regularizer.

Minimizes 1/2 ||y - x||^2 + beta/2 x^T L x by alternating a gradient step on
the data term with the proximal mapping of the smoothness term, which is a
solve against (I + beta L). The solve acts as a graph lowpass filter with
gain 1/(beta*lambda_i + 1) at each Laplacian eigenvalue; L itself is the
matching highpass operator. This is the mathematical skeleton the learned
network unrolls.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from .graphs import build_graph_infer, local_mean_features


class LaplacianOperator:
    """Combinatorial Laplacian L = D - W held as sparse operations."""

    def __init__(self, weights):
        w = sp.csr_matrix(weights)
        if w.shape[0] != w.shape[1]:
            raise ValueError(f"weight matrix must be square, got {w.shape}")
        if (abs(w - w.T) > 0).nnz:
            raise ValueError("weight matrix must be symmetric")
        if w.diagonal().any():
            raise ValueError("weight matrix must have zero diagonal")
        if w.nnz and w.data.min() < 0:
            raise ValueError("edge weights must be nonnegative")
        self.w = w
        self.n = w.shape[0]
        self.degree = np.asarray(w.sum(axis=1)).reshape(-1)

    def matvec(self, x):
        x = np.asarray(x, dtype=np.float64)
        return self.degree * x - self.w @ x

    def quad(self, x):
        """Graph smoothness x^T L x (nonnegative)."""
        x = np.asarray(x, dtype=np.float64)
        if x.shape != (self.n,):
            raise ValueError(f"signal length {x.shape} does not match {self.n} nodes")
        return float(x @ self.matvec(x))

    def dense(self):
        return np.diag(self.degree) - self.w.toarray()

    def solve_shifted(self, beta, b, rtol=1e-10, maxiter=None):
        """Conjugate-gradient solve of (I + beta L) x = b.

        I + beta*L is symmetric positive definite for beta >= 0, so CG
        converges; failure to reach rtol within the cap signals bad
        conditioning and raises.
        """
        b = np.asarray(b, dtype=np.float64)
        if maxiter is None:
            maxiter = max(20 * self.n, 200)
        apply_a = lambda v: v + beta * self.matvec(v)
        x = np.zeros_like(b)
        r = b - apply_a(x)
        bnorm = np.linalg.norm(b)
        if bnorm == 0:
            return x
        p = r.copy()
        rs = r @ r
        for _ in range(maxiter):
            if np.sqrt(rs) <= rtol * bnorm:
                return x
            ap = apply_a(p)
            alpha = rs / (p @ ap)
            x += alpha * p
            r -= alpha * ap
            rs_new = r @ r
            p = r + (rs_new / rs) * p
            rs = rs_new
        if np.sqrt(rs) <= rtol * bnorm:
            return x
        raise RuntimeError(
            f"conjugate gradient failed to reach rtol={rtol} in {maxiter} iterations"
        )


def build_laplacian(weights):
    """Wrap a symmetric nonnegative zero-diagonal weight matrix."""
    return LaplacianOperator(weights)


def graph_smoothness(x, laplacian):
    return laplacian.quad(x)


def denoise_objective(x, y, laplacian, beta):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    return 0.5 * float((y - x) @ (y - x)) + 0.5 * beta * laplacian.quad(x)


def prox_denoise(y, laplacian, beta, alpha, iters, rtol=1e-10, return_trace=False):
    """Run the unrolled update on the noise estimate nu (started at zero):

        nu <- (I + alpha*beta L)^-1 [ (1 - alpha) nu + alpha*beta L y ]

    and return the estimate x = y - nu. The proximal mapping is scaled by the
    gradient step alpha; with a step-independent mapping the objective is
    provably non-monotone for alpha < 1, and at alpha = 1 the two coincide.
    With alpha in (0, 1] the objective 1/2||y-x||^2 + beta/2 x^T L x is
    non-increasing across iterations and the limit satisfies (I+beta L)x = y.
    """
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if beta < 0:
        raise ValueError(f"beta must be nonnegative, got {beta}")
    if not 0 < alpha <= 1:
        raise ValueError(f"alpha must be in (0, 1], got {alpha}")
    if iters < 0:
        raise ValueError(f"iteration count must be >= 0, got {iters}")
    nu = np.zeros_like(y)
    ly = laplacian.matvec(y)
    trace = [denoise_objective(y - nu, y, laplacian, beta)]
    for _ in range(iters):
        rhs = (1.0 - alpha) * nu + alpha * beta * ly
        nu = laplacian.solve_shifted(alpha * beta, rhs, rtol=rtol)
        if return_trace:
            trace.append(denoise_objective(y - nu, y, laplacian, beta))
    x = y - nu
    if return_trace:
        return x, trace
    return x


def spectral_response(laplacian, beta, tol=1e-8):
    """Eigenvalues of L with the lowpass gains 1/(beta*lambda + 1).

    Verification-only: N must stay small enough for a dense eigensolve, and
    the reconstructed inverse is checked against a direct dense solve.
    """
    if laplacian.n > 64:
        raise ValueError(
            f"spectral verification is limited to 64 nodes, got {laplacian.n}"
        )
    ldense = laplacian.dense()
    lam, u = np.linalg.eigh(ldense)
    gains = 1.0 / (beta * lam + 1.0)
    recon = (u * gains) @ u.T
    direct = np.linalg.solve(np.eye(laplacian.n) + beta * ldense, np.eye(laplacian.n))
    err = np.abs(recon - direct).max()
    if err > tol:
        raise RuntimeError(f"spectral reconstruction error {err:.3e} exceeds {tol}")
    return lam, gains


def highpass_apply(laplacian, x):
    """L x: annihilates constants, amplifies signal variation across edges."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (laplacian.n,):
        raise ValueError(f"signal length {x.shape} does not match {laplacian.n} nodes")
    return laplacian.matvec(x)


def knn_denoise_graph(image, k=8, window=15, delta=0.05):
    """Graph for the classical denoiser: KNN over 5x5 local-mean features
    with Gaussian edge weights exp(-dist^2/delta), symmetrized by max."""
    feats = local_mean_features(np.asarray(image, dtype=np.float64))
    g = build_graph_infer(feats, k, window)
    n = g.n_pixels
    dist2 = np.einsum("ef,ef->e", g.labels, g.labels)
    vals = np.exp(-dist2 / delta)
    w = sp.csr_matrix((vals, (g.dst, g.src)), shape=(n, n))
    w = w.maximum(w.T)
    return build_laplacian(w)
