"""Degeneracy-adaptive variance, plug-in bandwidth and bias-corrected intervals.

The variance estimator combines a node-overlap piece (dominant when dyads
sharing a node have correlated scores) and a dyad-level piece (dominant in
the degenerate case), so the same formula is usable at either convergence
rate.  The bias is estimated from a second fit at a slower-shrinking pilot
bandwidth and removed from the confidence interval.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import stats

from .data import DifferencedSample, DyadicPanel, difference
from .estimator import BetaFit, kernel_weighted_beta, kernel_weights
from .first_step import FirstStepFit, FirstStepOptions, fit_conditional_logit
from .kernels import KernelSpec, get_kernel
from .ustat import aggregate_by_dyad, dyadic_variance, outer_sum, overlap_bruteforce, overlap_fast


@dataclass(frozen=True)
class VarianceParts:
    sigma1_hat: np.ndarray
    sigma2_hat: np.ndarray
    sigma_hat: np.ndarray
    degeneracy_stat: np.ndarray

    def to_dict(self) -> dict:
        return {k: np.asarray(v).tolist() for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, obj) -> "VarianceParts":
        return cls(**{k: np.asarray(v, dtype=float) for k, v in obj.items()})


def residuals(sample: DifferencedSample, beta_hat) -> np.ndarray:
    return sample.dy - sample.dw @ np.asarray(beta_hat, dtype=float)


def dyad_scores(sample: DifferencedSample, wts: np.ndarray, resid: np.ndarray):
    """Weighted scores K dW e collapsed onto unordered dyads.

    Directed panels (and panels with T > 2) contribute several rows per
    unordered dyad; these are summed, then rescaled by N / (n(n-1)/2) so
    that the scores average with the same normaliser as the moments.
    """
    contrib = sample.dw * (wts * resid)[:, None]
    pi, pj, A = aggregate_by_dyad(sample.i, sample.j, contrib, sample.n)
    return pi, pj, A * (sample.n_undirected / sample.n_pairs)


def _effective_h(kernel, h):
    return 1.0 if kernel is None else float(h)


def sigma_wnu1(sample, gamma_hat, kernel, h, beta_hat, mode: str = "fast") -> np.ndarray:
    """Node-overlap variance piece from S_ij = 2 K_h dW e_hat.

    ``mode="bruteforce"`` evaluates the triple sum literally in O(n^3).
    """
    if sample.n < 3:
        raise ValueError("node-overlap variance needs n >= 3")
    wts = kernel_weights(sample, gamma_hat, kernel, h)
    pi, pj, A = dyad_scores(sample, wts, residuals(sample, beta_hat))
    if mode == "fast":
        return overlap_fast(pi, pj, 2.0 * A, sample.n)
    if mode == "bruteforce":
        return overlap_bruteforce(pi, pj, 2.0 * A, sample.n)
    raise ValueError(f"unknown mode {mode!r}")


def sigma_wnu2(sample, gamma_hat, kernel, h, beta_hat) -> np.ndarray:
    """Dyad-level variance piece (h/N) sum K_h^2 dW dW' e_hat^2."""
    wts = kernel_weights(sample, gamma_hat, kernel, h)
    _, _, A = dyad_scores(sample, wts, residuals(sample, beta_hat))
    out = _effective_h(kernel, h) / sample.n_undirected * outer_sum(A, A)
    return 0.5 * (out + out.T)


def variance_hat(s_ww, sigma1, sigma2, n: int, n_dyads: int, h: float) -> VarianceParts:
    """Combine both pieces into the variance of beta_hat.

    ``degeneracy_stat`` holds n h c'S^-1 sigma1 S^-1 c for each unit vector c;
    it drifts to zero when the node-overlap piece is degenerate.
    """
    s_ww = np.asarray(s_ww, dtype=float)
    sigma1 = np.asarray(sigma1, dtype=float)
    sigma1 = 0.5 * (sigma1 + sigma1.T)
    sigma2 = np.asarray(sigma2, dtype=float)
    cond = np.linalg.cond(s_ww)
    if not np.isfinite(cond) or cond > 1e12:
        raise np.linalg.LinAlgError("S_WW is singular")
    sigma = dyadic_variance(s_ww, sigma1, sigma2, n, n_dyads, h)
    inv = np.linalg.inv(s_ww)
    degen = n * h * np.diag(inv @ sigma1 @ inv)
    return VarianceParts(sigma1, sigma2, sigma, degen)


def variance_at(sample, gamma_hat, kernel, fit: BetaFit, mode: str = "fast") -> VarianceParts:
    """Variance parts for a fitted beta at the bandwidth it was fitted with."""
    h = _effective_h(kernel, fit.h_used)
    s1 = sigma_wnu1(sample, gamma_hat, kernel, fit.h_used, fit.beta_hat, mode)
    s2 = sigma_wnu2(sample, gamma_hat, kernel, fit.h_used, fit.beta_hat)
    return variance_hat(fit.moments.s_ww, s1, s2, sample.n, sample.n_undirected, h)


def bias_estimate(beta_pilot, beta_main, h_pilot: float, k: int) -> np.ndarray:
    """h_pilot^-(k+1) (beta_pilot - beta_main): estimates the leading bias constant."""
    if not h_pilot > 0:
        raise ValueError("pilot bandwidth must be positive")
    return h_pilot ** (-(k + 1)) * (np.asarray(beta_pilot, float) - np.asarray(beta_main, float))


@dataclass(frozen=True)
class BandwidthChoice:
    h_star: float
    h_n: float
    clamped: bool


def plugin_bandwidth(
    sigma2_quadform: float,
    bias_quadform: float,
    k: int,
    N: int,
    *,
    h_max: float = 10.0,
    floor: float = 1e-12,
) -> BandwidthChoice:
    """MSE-optimal constant h* = (v / (2(k+1) b^2))^(1/(2k+3)) and h_n = h* N^(-1/(2k+3)).

    When b^2 is below ``floor`` the constant is set to ``h_max`` and flagged.
    """
    if not sigma2_quadform > 0:
        raise ValueError(f"variance quadratic form must be positive, got {sigma2_quadform!r}")
    e = 1.0 / (2 * k + 3)
    b2 = float(bias_quadform) ** 2
    if b2 < floor:
        h_star, clamped = float(h_max), True
    else:
        h_star, clamped = (sigma2_quadform / (2 * (k + 1) * b2)) ** e, False
    return BandwidthChoice(h_star, h_star * N ** (-e), clamped)


@dataclass(frozen=True)
class Interval:
    lower: float
    upper: float
    level: float
    degenerate: bool = False


def wald_ci(estimate: float, se: float, alpha: float) -> Interval:
    z = stats.norm.ppf(1.0 - alpha / 2.0)
    return Interval(estimate - z * se, estimate + z * se, 1.0 - alpha, bool(se == 0.0))


def bias_corrected_ci(
    beta_main,
    beta_pilot,
    sigma_hat,
    lambda_n: float,
    c,
    alpha: float = 0.05,
) -> Interval:
    """Interval for c'beta from (c'b_n - lambda c'b_pilot -/+ z se) / (1 - lambda).

    ``lambda_n = (h_n / h_pilot)^(k+1)``; lambda_n = 0 gives the Wald interval.
    """
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    if not lambda_n < 1.0:
        raise ValueError(f"shrink factor must be below one, got {lambda_n!r}")
    c = np.asarray(c, dtype=float)
    var = float(c @ np.asarray(sigma_hat) @ c)
    se = np.sqrt(max(var, 0.0))
    z = stats.norm.ppf(1.0 - alpha / 2.0)
    centre = float(c @ beta_main) - lambda_n * float(c @ beta_pilot)
    scale = 1.0 / (1.0 - lambda_n)
    return Interval(scale * (centre - se * z), scale * (centre + se * z), 1.0 - alpha, bool(se == 0.0))


# end-to-end procedure ---------------------------------------------------

@dataclass(frozen=True)
class InferenceConfig:
    k: int = 2
    delta: float = 0.4
    h_init: float = 3.0
    alpha: float = 0.05
    kernel: str | None = "biweight"
    direction: tuple | None = None
    h_star_max: float = 10.0
    bias_floor: float = 1e-12
    sigma1_mode: str = "fast"
    first_step: FirstStepOptions = field(default_factory=FirstStepOptions)

    def __post_init__(self):
        if self.k < 2:
            raise ValueError("kernel order k must be at least 2")
        upper = (2 * self.k + 3) / (4 * self.k + 4)
        if not 0.0 < self.delta < upper:
            raise ValueError(f"delta must lie in (0, {upper:.4f}) for k={self.k}")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if not self.h_init > 0:
            raise ValueError("h_init must be positive")

    def kernel_spec(self) -> KernelSpec | None:
        if self.kernel is None:
            return None
        spec = get_kernel(self.kernel)
        if spec.order < self.k:
            raise ValueError(f"kernel {spec.name!r} has order {spec.order} < k={self.k}")
        return spec

    def to_dict(self) -> dict:
        out = asdict(self)
        out["direction"] = None if self.direction is None else list(self.direction)
        return out

    @classmethod
    def from_dict(cls, obj) -> "InferenceConfig":
        obj = dict(obj)
        obj["first_step"] = FirstStepOptions(**obj.get("first_step", {}))
        if obj.get("direction") is not None:
            obj["direction"] = tuple(obj["direction"])
        return cls(**obj)


@dataclass(frozen=True)
class InferenceFit:
    beta_hat: np.ndarray
    beta_pilot: np.ndarray
    beta_bc: np.ndarray
    h_n: float
    h_pilot: float
    h_star_hat: float
    bias_hat: np.ndarray
    lambda_n: float
    variance: VarianceParts
    ci: tuple
    ci_conv: tuple
    k: int
    delta: float
    first_step: FirstStepFit
    initial: dict
    n: int
    N: int
    n_rows: int
    rows_in_support: int
    config: InferenceConfig
    w_names: tuple = ()
    warnings: tuple = ()

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.clip(np.diag(self.variance.sigma_hat), 0.0, None))

    def to_dict(self) -> dict:
        return {
            "beta_hat": self.beta_hat.tolist(),
            "beta_pilot": self.beta_pilot.tolist(),
            "beta_bc": self.beta_bc.tolist(),
            "se": self.se.tolist(),
            "h_n": self.h_n,
            "h_pilot": self.h_pilot,
            "h_star_hat": self.h_star_hat,
            "bias_hat": self.bias_hat.tolist(),
            "lambda_n": self.lambda_n,
            "variance": self.variance.to_dict(),
            "ci": [asdict(c) for c in self.ci],
            "ci_conv": [asdict(c) for c in self.ci_conv],
            "k": self.k,
            "delta": self.delta,
            "first_step": self.first_step.to_dict(),
            "initial": _jsonable(self.initial),
            "n": self.n,
            "N": self.N,
            "n_rows": self.n_rows,
            "rows_in_support": self.rows_in_support,
            "config": self.config.to_dict(),
            "w_names": list(self.w_names),
            "warnings": list(self.warnings),
        }

    def to_json(self, **kw) -> str:
        return json.dumps(self.to_dict(), **kw)

    @classmethod
    def from_dict(cls, obj) -> "InferenceFit":
        arr = lambda v: np.asarray(v, dtype=float)  # noqa: E731
        return cls(
            beta_hat=arr(obj["beta_hat"]),
            beta_pilot=arr(obj["beta_pilot"]),
            beta_bc=arr(obj["beta_bc"]),
            h_n=obj["h_n"],
            h_pilot=obj["h_pilot"],
            h_star_hat=obj["h_star_hat"],
            bias_hat=arr(obj["bias_hat"]),
            lambda_n=obj["lambda_n"],
            variance=VarianceParts.from_dict(obj["variance"]),
            ci=tuple(Interval(**c) for c in obj["ci"]),
            ci_conv=tuple(Interval(**c) for c in obj["ci_conv"]),
            k=obj["k"],
            delta=obj["delta"],
            first_step=FirstStepFit.from_dict(obj["first_step"]),
            initial=obj["initial"],
            n=obj["n"],
            N=obj["N"],
            n_rows=obj["n_rows"],
            rows_in_support=obj["rows_in_support"],
            config=InferenceConfig.from_dict(obj["config"]),
            w_names=tuple(obj["w_names"]),
            warnings=tuple(obj["warnings"]),
        )


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.ndarray):
        return x.tolist()
    if isinstance(x, np.generic):
        return x.item()
    return x


def _bandwidth_inputs(fit: BetaFit, parts: VarianceParts, bias: np.ndarray, direction):
    """Variance and bias quadratic forms driving h*; totals over coordinates if no direction."""
    inv = np.linalg.inv(fit.moments.s_ww)
    v2 = inv @ parts.sigma2_hat @ inv
    if direction is None:
        return float(np.trace(v2)), float(np.linalg.norm(bias))
    c = np.asarray(direction, dtype=float)
    return float(c @ v2 @ c), float(c @ bias)


def run_inference_procedure(
    panel: DyadicPanel,
    config: InferenceConfig | None = None,
    *,
    first_step: FirstStepFit | None = None,
    sample: DifferencedSample | None = None,
) -> InferenceFit:
    """First step, initial fits, plug-in bandwidth, refits, bias-corrected intervals.

    With ``config.kernel=None`` every fit uses unit weights: both betas equal
    the fixed-effect estimator, no bandwidth is selected, the shrink factor
    is zero and both intervals reduce to the flat-weight Wald interval.
    """
    cfg = config or InferenceConfig()
    kernel = cfg.kernel_spec()
    notes: list[str] = []

    fs = first_step or fit_conditional_logit(panel, cfg.first_step)
    if not fs.converged:
        notes.append(f"first step did not converge (|grad|={fs.gradient_norm:.3g})")
    gamma = fs.gamma_hat
    sample = sample if sample is not None else difference(panel)
    N = sample.n_pairs
    k = cfg.k
    e = 1.0 / (2 * k + 3)

    h_n0 = cfg.h_init * N ** (-e)
    h_p0 = cfg.h_init * N ** (-cfg.delta * e)
    fit0 = kernel_weighted_beta(sample, gamma, kernel, h_n0)
    pilot0 = kernel_weighted_beta(sample, gamma, kernel, h_p0)
    parts0 = variance_at(sample, gamma, kernel, fit0, cfg.sigma1_mode)

    if kernel is None:
        bias = np.zeros_like(fit0.beta_hat)
        h_star = float("nan")
        fit, pilot, parts = fit0, pilot0, parts0
        h_n = h_p = float("nan")
        lam = 0.0
    else:
        bias = bias_estimate(pilot0.beta_hat, fit0.beta_hat, h_p0, k)
        vq, bq = _bandwidth_inputs(fit0, parts0, bias, cfg.direction)
        if not vq > 0:
            # exact fit: no variance to trade off against the bias
            notes.append(f"variance estimate is zero: plug-in constant clamped to {cfg.h_star_max:g}")
            bw = BandwidthChoice(cfg.h_star_max, cfg.h_star_max * N ** (-e), True)
        else:
            bw = plugin_bandwidth(vq, bq, k, N, h_max=cfg.h_star_max, floor=cfg.bias_floor)
            if bw.clamped:
                notes.append(f"bias estimate ~ 0: plug-in constant clamped to {cfg.h_star_max:g}")
        h_star = bw.h_star
        h_n = h_star * N ** (-e)
        h_p = h_star * N ** (-cfg.delta * e)
        fit = kernel_weighted_beta(sample, gamma, kernel, h_n)
        pilot = kernel_weighted_beta(sample, gamma, kernel, h_p)
        parts = variance_at(sample, gamma, kernel, fit, cfg.sigma1_mode)
        lam = (h_n / h_p) ** (k + 1)

    q = fit.beta_hat.size
    ci, ci_conv = [], []
    for c in np.eye(q):
        ci.append(bias_corrected_ci(fit.beta_hat, pilot.beta_hat, parts.sigma_hat, lam, c, cfg.alpha))
        se = float(np.sqrt(max(c @ parts.sigma_hat @ c, 0.0)))
        ci_conv.append(wald_ci(float(c @ fit.beta_hat), se, cfg.alpha))
    if any(iv.degenerate for iv in ci):
        notes.append("zero standard error: degenerate confidence interval")
    beta_bc = (fit.beta_hat - lam * pilot.beta_hat) / (1.0 - lam)

    initial = {
        "h_n": h_n0,
        "h_pilot": h_p0,
        "beta_hat": fit0.beta_hat,
        "beta_pilot": pilot0.beta_hat,
        "bias_hat": bias,
        "sigma_hat": parts0.sigma_hat,
    }
    return InferenceFit(
        beta_hat=fit.beta_hat,
        beta_pilot=pilot.beta_hat,
        beta_bc=beta_bc,
        h_n=h_n,
        h_pilot=h_p,
        h_star_hat=h_star,
        bias_hat=bias,
        lambda_n=lam,
        variance=parts,
        ci=tuple(ci),
        ci_conv=tuple(ci_conv),
        k=k,
        delta=cfg.delta,
        first_step=fs,
        initial=initial,
        n=sample.n,
        N=N,
        n_rows=len(sample),
        rows_in_support=fit.moments.rows_in_support,
        config=cfg,
        w_names=panel.w_names,
        warnings=tuple(notes),
    )


def flat_variance(sample: DifferencedSample, fit: BetaFit, mode: str = "fast") -> VarianceParts:
    """Variance of the fixed-effect estimator: same pieces with unit weights."""
    return variance_at(sample, None, None, fit, mode)
