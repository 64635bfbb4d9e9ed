"""Second-step estimators: kernel-weighted differencing, fixed effect and PPML."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, sparse

from .data import DifferencedSample, DyadicPanel, dyad_count
from .kernels import KernelSpec, scaled_kernel
from .ustat import aggregate_by_dyad, dyadic_variance, outer_sum, overlap_fast

COND_LIMIT = 1e12


class SingularMomentsError(np.linalg.LinAlgError):
    """The weighted cross-product of dW is singular at this bandwidth."""


class PPMLError(RuntimeError):
    pass


@dataclass(frozen=True)
class WeightedMoments:
    s_ww: np.ndarray
    s_wy: np.ndarray
    effective_weight_sum: float
    rows_in_support: int


@dataclass(frozen=True)
class BetaFit:
    beta_hat: np.ndarray
    h_used: float | None
    moments: WeightedMoments
    condition_number: float
    weights: np.ndarray = field(repr=False, default=None)


def kernel_weights(sample: DifferencedSample, gamma_hat, kernel: KernelSpec | None, h: float | None):
    """K_h(dR'gamma) per row; ``kernel=None`` gives unit (flat) weights."""
    if kernel is None:
        return np.ones(len(sample))
    index = sample.dr @ np.asarray(gamma_hat, dtype=float)
    return np.asarray(scaled_kernel(kernel, h, index), dtype=float).reshape(-1)


def weighted_moments(sample: DifferencedSample, wts: np.ndarray, in_support: int) -> WeightedMoments:
    N = sample.n_pairs
    s_ww = outer_sum(sample.dw, sample.dw, wts) / N
    s_ww = 0.5 * (s_ww + s_ww.T)
    s_wy = (sample.dw * (wts * sample.dy)[:, None]).sum(axis=0) / N
    return WeightedMoments(s_ww, s_wy, float(wts.sum()), int(in_support))


def solve_moments(m: WeightedMoments) -> tuple[np.ndarray, float]:
    """Solve s_ww b = s_wy by Cholesky with a condition-number guard."""
    if m.rows_in_support == 0:
        raise SingularMomentsError("no differenced rows fall inside the kernel support")
    cond = float(np.linalg.cond(m.s_ww))
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise SingularMomentsError(f"weighted dW cross-product is singular (condition number {cond:.3g})")
    try:
        factor = linalg.cho_factor(m.s_ww)
    except linalg.LinAlgError:
        raise SingularMomentsError("weighted dW cross-product is not positive definite") from None
    return linalg.cho_solve(factor, m.s_wy), cond


def kernel_weighted_beta(
    sample: DifferencedSample,
    gamma_hat,
    kernel: KernelSpec | None,
    h: float | None,
) -> BetaFit:
    """Locally weighted differenced least squares around dR'gamma_hat = 0.

    Rows are weighted by K_h(dR'gamma_hat).  With ``kernel=None`` every row
    gets weight one, which reproduces :func:`fixed_effect_beta` exactly.
    """
    if len(sample) == 0:
        raise SingularMomentsError("differenced sample is empty")
    if kernel is not None and not h > 0:
        raise ValueError(f"bandwidth must be positive, got {h!r}")
    wts = kernel_weights(sample, gamma_hat, kernel, h)
    if kernel is None:
        in_support = len(sample)
    else:
        index = sample.dr @ np.asarray(gamma_hat, dtype=float)
        in_support = int(np.count_nonzero(np.abs(index) <= kernel.support * h))
    m = weighted_moments(sample, wts, in_support)
    beta, cond = solve_moments(m)
    return BetaFit(beta, None if kernel is None else float(h), m, cond, wts)


def fixed_effect_beta(sample: DifferencedSample) -> BetaFit:
    """Unweighted differenced least squares on doubly-selected dyads."""
    return kernel_weighted_beta(sample, None, None, None)


# PPML -------------------------------------------------------------------

@dataclass(frozen=True)
class PpmlFit:
    beta_hat: np.ndarray
    vcov: np.ndarray
    loglik: float
    iterations: int
    converged: bool
    n_obs: int
    dropped_nodes: tuple
    condition_number: float

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.vcov), 0.0, None))


def _fe_design(src, dst, n, directed, literal):
    """Sparse fixed-effect block (intercept first unless literal)."""
    m = src.size
    rows, cols, names = [], [], []
    k = 0
    if literal:
        for side, ids in (("origin", src), ("dest", dst)):
            hit = np.nonzero(ids == 0)[0]
            if hit.size:
                rows.append(hit)
                cols.append(np.full(hit.size, k))
                names.append(f"{side}:0")
                k += 1
    else:
        rows.append(np.arange(m))
        cols.append(np.zeros(m, np.int64))
        names.append("const")
        k = 1
        blocks = [("origin", src), ("dest", dst)] if directed else [("node", None)]
        for side, ids in blocks:
            if ids is None:
                levels = np.unique(np.concatenate([src, dst]))
            else:
                levels = np.unique(ids)
            lut = np.full(n, -1, dtype=np.int64)
            lut[levels[1:]] = k + np.arange(levels.size - 1)
            k += levels.size - 1
            targets = (src, dst) if ids is None else (ids,)
            for arr in targets:
                idx = np.nonzero(lut[arr] >= 0)[0]
                rows.append(idx)
                cols.append(lut[arr[idx]])
            names.extend(f"{side}:{lev}" for lev in levels[1:])
    if not rows:
        return sparse.csr_matrix((m, 0)), names
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    D = sparse.csr_matrix((np.ones(r.size), (r, c)), shape=(m, k))
    return D, names


def ppml_beta(
    panel: DyadicPanel,
    *,
    literal: bool = False,
    max_iter: int = 100,
    tol: float = 1e-10,
) -> PpmlFit:
    """Poisson pseudo-ML on levels exp(y) * d with node fixed effects.

    Directed panels get origin and destination dummies, undirected panels a
    single set of node dummies (A_i + A_j); one reference level is dropped
    per block and an intercept is kept.  ``literal=True`` fits only the
    node-0 dummies, as in the textbook display of the estimator.

    The returned ``vcov`` is the dyadic sandwich: node-overlap plus
    dyad-level terms built from the per-dyad scores of the beta block.
    """
    T = panel.T
    src = np.repeat(panel.src, T)
    dst = np.repeat(panel.dst, T)
    with np.errstate(over="ignore"):
        ytil = np.where(panel.d == 1, np.exp(np.nan_to_num(panel.y, nan=0.0)), 0.0).reshape(-1)
    W = panel.w.reshape(-1, panel.q_w)
    if not np.all(np.isfinite(ytil)):
        raise PPMLError("exp(y) overflows")
    if not np.any(ytil > 0):
        raise PPMLError("all level outcomes are zero; PPML is undefined")

    # Iteratively drop nodes whose outcomes are all zero (their effects diverge).
    keep = np.ones(src.size, dtype=bool)
    dropped: list[int] = []
    if not literal:
        while True:
            tot = np.bincount(src[keep], weights=ytil[keep], minlength=panel.n)
            if panel.directed:
                tot_d = np.bincount(dst[keep], weights=ytil[keep], minlength=panel.n)
                present_o = np.bincount(src[keep], minlength=panel.n) > 0
                present_d = np.bincount(dst[keep], minlength=panel.n) > 0
                bad_o = np.nonzero(present_o & (tot == 0))[0]
                bad_d = np.nonzero(present_d & (tot_d == 0))[0]
                hit = np.isin(src, bad_o) | np.isin(dst, bad_d)
            else:
                tot = tot + np.bincount(dst[keep], weights=ytil[keep], minlength=panel.n)
                present = (np.bincount(src[keep], minlength=panel.n)
                           + np.bincount(dst[keep], minlength=panel.n)) > 0
                bad_o = bad_d = np.nonzero(present & (tot == 0))[0]
                hit = np.isin(src, bad_o) | np.isin(dst, bad_o)
            if not np.any(hit & keep):
                break
            dropped.extend(int(b) for b in np.union1d(bad_o, bad_d))
            keep &= ~hit
        if not keep.any():
            raise PPMLError("no observations left after dropping all-zero nodes")
    src, dst, ytil, W = src[keep], dst[keep], ytil[keep], W[keep]
    scale = 1.0 if literal else float(ytil.mean())
    ytil = ytil / scale

    D, _ = _fe_design(src, dst, panel.n, panel.directed, literal)
    q = W.shape[1]
    k_fe = D.shape[1]
    theta = np.zeros(q + k_fe)

    def _eta(th):
        return W @ th[:q] + (D @ th[q:] if k_fe else 0.0)

    def _loglik(eta):
        return float(np.sum(ytil * eta - np.exp(eta)))

    eta = _eta(theta)
    ll = _loglik(eta)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mu = np.exp(eta)
        resid = ytil - mu
        grad = np.concatenate([W.T @ resid, D.T @ resid]) if k_fe else W.T @ resid
        H = _poisson_hessian(W, D, mu)
        try:
            step = linalg.solve(H, grad, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            raise PPMLError("PPML Hessian is singular (collinear regressors or dummies)") from None
        t = 1.0
        for _ in range(40):
            cand = theta + t * step
            ceta = _eta(cand)
            with np.errstate(over="ignore"):
                cll = _loglik(ceta)
            if np.isfinite(cll) and cll >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
        else:
            raise PPMLError("PPML line search failed")
        done = np.max(np.abs(t * step)) < tol * (1.0 + np.max(np.abs(theta)))
        theta, eta, ll = cand, ceta, cll
        if done:
            converged = True
            break
    if not converged:
        raise PPMLError(f"PPML did not converge in {max_iter} iterations")

    mu = np.exp(eta)
    H = _poisson_hessian(W, D, mu)
    cond = float(np.linalg.cond(H))
    # beta-block score after partialling the fixed effects out of W
    if k_fe:
        Hff = H[q:, q:]
        Hfw = H[q:, :q]
        proj = linalg.solve(Hff, Hfw, assume_a="pos")
        W_tilde = W - D @ proj
    else:
        W_tilde = W
    H_bb = outer_sum(W_tilde, W_tilde, mu)
    score = (ytil - mu)[:, None] * W_tilde
    vcov = dyadic_sandwich(src, dst, score, H_bb, panel.n, panel.directed)
    return PpmlFit(
        beta_hat=theta[:q].copy(),
        vcov=vcov,
        loglik=ll,
        iterations=it,
        converged=converged,
        n_obs=int(ytil.size),
        dropped_nodes=tuple(sorted(set(dropped))),
        condition_number=cond,
    )


def _poisson_hessian(W, D, mu):
    q = W.shape[1]
    k = D.shape[1]
    H = np.empty((q + k, q + k))
    H[:q, :q] = outer_sum(W, W, mu)
    if k:
        Dm = D.multiply(mu[:, None]).tocsr()
        H[q:, :q] = (Dm.T @ W)
        H[:q, q:] = H[q:, :q].T
        H[q:, q:] = (D.T @ Dm).toarray()
    return H


def dyadic_sandwich(i, j, score, bread, n: int, directed: bool) -> np.ndarray:
    """Dyadic-robust covariance of an M-estimator from its summed Hessian and row scores.

    Rows are collapsed onto unordered dyads; the node-overlap and dyad-level
    pieces then enter exactly as in the kernel estimator with unit weights.
    """
    n_u = dyad_count(n, False)
    pi, pj, A = aggregate_by_dyad(i, j, score, n)
    sig1 = overlap_fast(pi, pj, 2.0 * A, n) if n >= 3 else np.zeros_like(bread)
    sig2 = outer_sum(A, A) / n_u
    return dyadic_variance(bread / n_u, sig1, sig2, n, n_u, 1.0)
