"""Compactly supported smoothing kernels of known order."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy import integrate


@dataclass(frozen=True)
class KernelSpec:
    """A kernel K vanishing outside [-support, support] with ``order`` zero moments."""

    name: str
    support: float
    order: int
    func: Callable[[np.ndarray], np.ndarray]

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        out = np.where(np.abs(x) <= self.support, self.func(x), 0.0)
        return out if out.ndim else float(out)


def _biweight(x):
    return 0.9375 * (1.0 - x * x) ** 2


BIWEIGHT = KernelSpec("biweight", 1.0, 2, _biweight)

# Closed form of the integral of K^2 for the biweight.
BIWEIGHT_ROUGHNESS = 5.0 / 7.0


def eval_kernel(spec: KernelSpec, x):
    return spec(x)


def scaled_kernel(spec: KernelSpec, h: float, v):
    """K_h(v) = K(v / h) / h."""
    if not h > 0:
        raise ValueError(f"bandwidth must be positive, got {h!r}")
    return spec(np.asarray(v, dtype=float) / h) / h


@dataclass(frozen=True)
class KernelReport:
    name: str
    order: int
    moments: tuple  # moments 0..order+1
    passed: bool
    tol: float
    vanishing_through_order: bool = False


    @property
    def next_moment(self) -> float:
        """Moment of order k+1; enters the selection-bias constant."""
        return self.moments[-1]


def _moment(spec: KernelSpec, i: int) -> float:
    val, _ = integrate.quad(
        lambda s: s**i * float(spec(s)), -spec.support, spec.support,
        epsabs=1e-14, epsrel=1e-13, limit=200,
    )
    return val


def verify_kernel_order(spec: KernelSpec, tol: float = 1e-8) -> KernelReport:
    """Check the kernel integrates to one and has order ``spec.order``, by adaptive quadrature.

    Order k follows the usual convention: moments 1..k-1 vanish (the k-th is
    the first that may not).  Any nonnegative kernel has a positive second
    moment, so the stricter condition that moments 1..k all vanish is
    reported separately in ``vanishing_through_order``.
    """
    moments = tuple(_moment(spec, i) for i in range(spec.order + 2))
    normalised = abs(moments[0] - 1.0) <= tol
    ok = normalised and all(abs(m) <= tol for m in moments[1 : spec.order])
    strict = normalised and all(abs(m) <= tol for m in moments[1 : spec.order + 1])
    return KernelReport(spec.name, spec.order, moments, bool(ok), tol, bool(strict))


@lru_cache(maxsize=None)
def kernel_roughness(spec: KernelSpec, n_grid: int | None = None) -> float:
    """Integral of K^2; adaptive quadrature, or composite Simpson on ``n_grid`` points."""
    if n_grid is None:
        val, _ = integrate.quad(
            lambda s: float(spec(s)) ** 2, -spec.support, spec.support,
            epsabs=1e-14, epsrel=1e-13, limit=200,
        )
        return val
    grid = np.linspace(-spec.support, spec.support, n_grid)
    return float(integrate.simpson(spec(grid) ** 2, x=grid))


_REGISTRY: dict[str, KernelSpec] = {"biweight": BIWEIGHT}


def register_kernel(spec: KernelSpec, tol: float = 1e-8) -> KernelSpec:
    """Add a user kernel after checking its moment conditions."""
    report = verify_kernel_order(spec, tol)
    if not report.passed:
        raise ValueError(f"kernel {spec.name!r} fails order-{spec.order} moment conditions: {report.moments}")
    _REGISTRY[spec.name] = spec
    return spec


def get_kernel(name: str) -> KernelSpec:
    try:
        return _REGISTRY[name]
    except KeyError:
        raise KeyError(f"unknown kernel {name!r}; registered: {sorted(_REGISTRY)}") from None
