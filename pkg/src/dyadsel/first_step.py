"""Conditional logit first step for the selection index.

Only dyads whose selection status switches between two periods carry
information once the node effects are differenced out.  For such a row the
probability that the earlier period was the selected one is
Lambda(dR'g), so gamma is the logistic MLE of 1{d_s = 1} on dR without an
intercept.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import linalg
from scipy.special import expit

from .data import DyadicPanel, switchers


class FirstStepError(ValueError):
    """The selection equation cannot be estimated from this panel."""


class SeparationError(FirstStepError):
    """Switchers are perfectly classified by some index; the MLE does not exist."""


@dataclass(frozen=True)
class FirstStepFit:
    gamma_hat: np.ndarray
    loglik: float
    gradient_norm: float
    iterations: int
    n_switchers: int
    converged: bool

    def to_dict(self) -> dict:
        out = asdict(self)
        out["gamma_hat"] = np.asarray(self.gamma_hat).tolist()
        return out

    @classmethod
    def from_dict(cls, obj) -> "FirstStepFit":
        obj = dict(obj)
        obj["gamma_hat"] = np.asarray(obj["gamma_hat"], dtype=float)
        return cls(**obj)


@dataclass(frozen=True)
class FirstStepOptions:
    tol: float = 1e-8
    max_iter: int = 100
    max_halvings: int = 30
    norm_cap: float = 1e3


def conditional_logit_objective(g, dr: np.ndarray, target: np.ndarray):
    """Log-likelihood, gradient and Hessian at g.

    Each row adds target*log L(x) + (1-target)*log(1-L(x)) with x = dR'g.
    """
    g = np.asarray(g, dtype=float)
    x = dr @ g
    # log L(x) = -log(1+e^-x), log(1-L(x)) = -log(1+e^x)
    value = float(-np.sum(target * np.logaddexp(0.0, -x) + (1.0 - target) * np.logaddexp(0.0, x)))
    p = expit(x)
    grad = dr.T @ (target - p)
    hess = -(dr * (p * (1.0 - p))[:, None]).T @ dr
    return value, grad, hess


def fit_conditional_logit(
    panel: DyadicPanel | None = None,
    opts: FirstStepOptions | None = None,
    *,
    dr: np.ndarray | None = None,
    target: np.ndarray | None = None,
) -> FirstStepFit:
    """Damped Newton ascent from g = 0.

    Pass a panel, or precomputed switcher rows ``dr``/``target``.
    """
    opts = opts or FirstStepOptions()
    if dr is None:
        if panel is None:
            raise TypeError("need a panel or explicit switcher rows")
        dr, target = switchers(panel)
    dr = np.asarray(dr, dtype=float)
    target = np.asarray(target, dtype=float)
    if dr.shape[0] == 0:
        raise FirstStepError("no switching dyads: selection status never changes between periods")
    if np.linalg.matrix_rank(dr) < dr.shape[1]:
        raise FirstStepError("dR has deficient column rank across switchers")

    g = np.zeros(dr.shape[1])
    value, grad, hess = conditional_logit_objective(g, dr, target)
    converged = False
    it = 0
    while True:
        if float(np.linalg.norm(grad)) <= opts.tol:
            converged = True
            break
        if it >= opts.max_iter:
            break
        try:
            step = linalg.solve(-hess, grad, assume_a="pos")
        except (linalg.LinAlgError, ValueError):
            raise SeparationError("conditional logit Hessian is singular (likely separation)") from None
        # gains near the optimum fall below rounding of the summed objective
        slack = 64.0 * np.finfo(float).eps * (1.0 + abs(value))
        t = 1.0
        for _ in range(opts.max_halvings + 1):
            cand = g + t * step
            cv, cg, ch = conditional_logit_objective(cand, dr, target)
            if cv >= value - slack:
                break
            t *= 0.5
        else:
            # no ascent left at machine precision
            break
        g, value, grad, hess = cand, cv, cg, ch
        it += 1
        if np.linalg.norm(g) > opts.norm_cap:
            raise SeparationError(
                f"|gamma| exceeded {opts.norm_cap:g}: the selection outcome is perfectly separated"
            )

    if converged:
        # one more Newton step takes gamma to machine precision, so the
        # fit does not depend on row order or summation rounding
        try:
            cand = g + linalg.solve(-hess, grad, assume_a="pos")
            cv, cg, ch = conditional_logit_objective(cand, dr, target)
            if np.linalg.norm(cg) <= np.linalg.norm(grad):
                g, value, grad, hess = cand, cv, cg, ch
        except (linalg.LinAlgError, ValueError):
            pass

    # Gradients vanish along a separating ray long before the norm cap is hit.
    margin = (2.0 * target - 1.0) * (dr @ g)
    if np.all(margin > 0):
        raise SeparationError("every switcher is classified correctly by dR'gamma: perfect separation")
    return FirstStepFit(g, value, float(np.linalg.norm(grad)), it, int(dr.shape[0]), converged)
