"""Synthetic selection panels and seeded replication studies.

Each replication draws two periods of node covariates, a logistic link
shock per dyad and period, and node-level outcome shocks with scale sigma.
sigma = 0 switches off the node-level outcome noise, which is the
degenerate regime for the variance.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from itertools import product
from pathlib import Path

import numpy as np

from .data import DyadicPanel, difference, dyad_index
from .estimator import PPMLError, SingularMomentsError, fixed_effect_beta, ppml_beta
from .first_step import FirstStepError
from .inference import InferenceConfig, flat_variance, run_inference_procedure, wald_ci

TRUE_BETA = 1.0
TRUE_GAMMA = (1.0, 1.0)
ESTIMATORS = ("beta_n", "beta_bc", "beta_fe", "beta_ppml")
CI_TYPES = ("ci_bc", "ci_conv", "ci_fe", "ci_ppml")


@dataclass(frozen=True)
class DgpConfig:
    n: int = 100
    theta: float = -2.0
    sigma: float = 1.0
    seed: int = 0
    T: int = 2

    def __post_init__(self):
        if self.n < 4:
            raise ValueError("need at least 4 nodes")
        if self.sigma < 0:
            raise ValueError("sigma must be nonnegative")
        if self.T < 2:
            raise ValueError("need at least two periods")


@dataclass(frozen=True)
class Latents:
    """Unobservables kept for debugging; never passed to the estimators."""

    A: np.ndarray
    B: np.ndarray
    U: np.ndarray
    eta: np.ndarray
    eps: np.ndarray


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed) & (2**64 - 1)))


def simulate_panel(cfg: DgpConfig, return_latents: bool = False):
    """Draw one undirected panel.

    d_ijt = 1{W + Z_i + Z_j + theta (B_i + B_j) - eta_ijt >= 0} and, when
    selected, Y_ijt = W_ijt + A_i + A_j + U_it + U_jt + eta_ijt, where
    W_ijt = X_it + X_jt, A and B are time means of X and Z.
    """
    rng = make_rng(cfg.seed)
    n, T = cfg.n, cfg.T
    X = 2.0 + rng.standard_normal((n, T))
    Z = 2.0 + rng.standard_normal((n, T))
    U = cfg.sigma * rng.standard_normal((n, T)) if cfg.sigma > 0 else np.zeros((n, T))
    src, dst = dyad_index(n, False)
    u = rng.random((src.size, T))
    eta = np.log(u) - np.log1p(-u)
    A = X.mean(axis=1)
    B = Z.mean(axis=1)

    w = X[src] + X[dst]
    zr = Z[src] + Z[dst]
    index = w + zr + cfg.theta * (B[src] + B[dst])[:, None] - eta
    d = (index >= 0).astype(np.int8)
    eps = U[src] + U[dst] + eta
    y = np.where(d == 1, w + (A[src] + A[dst])[:, None] + eps, np.nan)
    panel = DyadicPanel(
        labels=tuple(str(k) for k in range(n)),
        src=src,
        dst=dst,
        d=d,
        y=y,
        w=w[:, :, None],
        r=np.stack([w, zr], axis=2),
        directed=False,
        w_names=("W",),
        r_names=("W", "Z"),
    )
    if return_latents:
        return panel, Latents(A, B, U, eta, eps)
    return panel


def zero_fraction(panel: DyadicPanel) -> float:
    """Share of dyads not selected in every period."""
    return float(np.mean(np.prod(panel.d, axis=1) == 0))


def _hit(iv, value=TRUE_BETA) -> bool:
    return bool(iv.lower <= value <= iv.upper)


def run_replication(cfg: DgpConfig, inference: InferenceConfig | None = None, with_ppml: bool = True) -> dict:
    """Simulate once and record every estimator and interval for the first W coordinate."""
    inference = inference or InferenceConfig()
    panel = simulate_panel(cfg)
    rec = {"seed": cfg.seed, "ok": True, "error": None, "zero_fraction": zero_fraction(panel)}
    try:
        sample = difference(panel)
        fit = run_inference_procedure(panel, inference, sample=sample)
        fe = fixed_effect_beta(sample)
        fe_var = flat_variance(sample, fe, inference.sigma1_mode)
    except (FirstStepError, SingularMomentsError, np.linalg.LinAlgError, ValueError) as exc:
        rec.update(ok=False, error=f"{type(exc).__name__}: {exc}")
        return rec
    fe_se = math.sqrt(max(fe_var.sigma_hat[0, 0], 0.0))
    rec.update(
        beta_n=float(fit.beta_hat[0]),
        beta_bc=float(fit.beta_bc[0]),
        beta_fe=float(fe.beta_hat[0]),
        se_n=float(fit.se[0]),
        se_fe=fe_se,
        h_star=float(fit.h_star_hat),
        lambda_n=float(fit.lambda_n),
        degeneracy_stat=float(fit.variance.degeneracy_stat[0]),
        gamma_hat=fit.first_step.gamma_hat.tolist(),
        ci_bc=_hit(fit.ci[0]),
        ci_conv=_hit(fit.ci_conv[0]),
        ci_fe=_hit(wald_ci(float(fe.beta_hat[0]), fe_se, inference.alpha)),
        warnings=list(fit.warnings),
    )
    if with_ppml:
        try:
            pp = ppml_beta(panel)
            rec["beta_ppml"] = float(pp.beta_hat[0])
            rec["ci_ppml"] = _hit(wald_ci(float(pp.beta_hat[0]), float(pp.se[0]), inference.alpha))
        except (PPMLError, np.linalg.LinAlgError) as exc:
            rec["ppml_error"] = f"{type(exc).__name__}: {exc}"
    return rec


@dataclass
class McResult:
    n: int
    theta: float
    sigma: float
    reps: int
    base_seed: int
    failures: int
    estimates: dict          # estimator -> {mean_bias, median_bias, rmse, count}
    coverage: dict           # ci type -> coverage
    zero_fraction: float
    records: list = field(default_factory=list, repr=False)

    @property
    def key(self) -> tuple:
        return (self.theta, self.sigma, self.n)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj) -> "McResult":
        return cls(**obj)


def aggregate(records: list, cfg: DgpConfig, reps: int, base_seed: int) -> McResult:
    ok = [r for r in records if r["ok"]]
    estimates = {}
    for name in ESTIMATORS:
        vals = np.array([r[name] for r in ok if name in r], dtype=float)
        if vals.size == 0:
            continue
        err = vals - TRUE_BETA
        estimates[name] = {
            "mean_bias": float(err.mean()),
            "median_bias": float(np.median(err)),
            "rmse": float(np.sqrt(np.mean(err**2))),
            "count": int(vals.size),
        }
    coverage = {}
    for name in CI_TYPES:
        hits = [r[name] for r in ok if name in r]
        if hits:
            coverage[name] = float(np.mean(hits))
    zf = float(np.mean([r["zero_fraction"] for r in records])) if records else float("nan")
    return McResult(cfg.n, cfg.theta, cfg.sigma, reps, base_seed, len(records) - len(ok),
                    estimates, coverage, zf, records)


def _job(args):
    cfg, inference, with_ppml = args
    return run_replication(cfg, inference, with_ppml)


def run_cell(n, theta, sigma, reps, base_seed=0, parallelism=1, inference=None, with_ppml=True) -> McResult:
    """All replications of one (theta, sigma, n) cell; replication r uses seed base_seed ^ r."""
    if reps < 1:
        raise ValueError("reps must be at least 1")
    cfgs = [DgpConfig(n=n, theta=theta, sigma=sigma, seed=base_seed ^ r) for r in range(reps)]
    jobs = [(c, inference, with_ppml) for c in cfgs]
    if parallelism and parallelism > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            records = list(pool.map(_job, jobs, chunksize=max(1, reps // (4 * parallelism))))
    else:
        records = [_job(j) for j in jobs]
    return aggregate(records, cfgs[0], reps, base_seed)


def run_monte_carlo(grid: dict, reps: int, base_seed: int = 0, parallelism: int = 1,
                    inference=None, with_ppml=True) -> dict:
    """Run every (theta, sigma, n) cell of ``grid`` ({"n": [...], "theta": [...], "sigma": [...]})."""
    out = {}
    for theta, sigma, n in product(grid["theta"], grid["sigma"], grid["n"]):
        res = run_cell(n, theta, sigma, reps, base_seed, parallelism, inference, with_ppml)
        out[res.key] = res
    return out


# tables -------------------------------------------------------------------

_EST_LABELS = {"beta_n": "kernel", "beta_bc": "kernel_bc", "beta_fe": "FE", "beta_ppml": "PPML"}
_CI_LABELS = {"ci_conv": "CI_conv", "ci_bc": "CI_bc", "ci_fe": "CI_FE", "ci_ppml": "CI_PPML"}


def _rows_estimates(cells):
    rows = []
    for res in cells:
        row = {"theta": res.theta, "n": res.n, "sigma": res.sigma, "reps": res.reps, "failures": res.failures}
        for name, lab in _EST_LABELS.items():
            e = res.estimates.get(name)
            if e is not None:
                row[f"{lab}_mean_bias"] = e["mean_bias"]
                row[f"{lab}_median_bias"] = e["median_bias"]
                row[f"{lab}_rmse"] = e["rmse"]
        rows.append(row)
    return rows


def _rows_coverage(cells):
    rows = []
    for res in cells:
        if not res.coverage:
            continue
        row = {"theta": res.theta, "n": res.n, "sigma": res.sigma, "reps": res.reps}
        for name, lab in _CI_LABELS.items():
            if name in res.coverage:
                row[lab] = res.coverage[name]
        rows.append(row)
    return rows


def _to_csv(rows) -> str:
    cols = []
    for r in rows:
        cols.extend(c for c in r if c not in cols)
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=cols, lineterminator="\n")
    writer.writeheader()
    for r in rows:
        writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    return buf.getvalue()


def _to_text(rows, title) -> str:
    if not rows:
        return ""
    cols = []
    for r in rows:
        cols.extend(c for c in r if c not in cols)

    def fmt(v):
        if isinstance(v, float):
            return f"{v:.3f}"
        return "" if v is None else str(v)

    cells = [[fmt(r.get(c)) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[k]) for row in cells)) for k, c in enumerate(cols)]
    lines = [title, "  ".join(c.rjust(w) for c, w in zip(cols, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines.extend("  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells)
    return "\n".join(lines) + "\n"


def summarize(results) -> dict:
    """Render estimate tables (one per sigma, largest first) then coverage tables.

    Returns {"table1": {"csv": ..., "text": ...}, ...}.  Coverage tables are
    omitted when no interval was recorded.
    """
    cells = list(results.values()) if isinstance(results, dict) else list(results)
    if not cells:
        raise ValueError("no results to summarize")
    sigmas = sorted({c.sigma for c in cells}, reverse=True)
    by_sigma = {s: sorted((c for c in cells if c.sigma == s), key=lambda c: (-c.theta, c.n)) for s in sigmas}
    tables = {}
    k = 1
    for s in sigmas:
        rows = _rows_estimates(by_sigma[s])
        tables[f"table{k}"] = {"csv": _to_csv(rows), "text": _to_text(rows, f"Mean bias / RMSE, sigma={s:g}")}
        k += 1
    for s in sigmas:
        rows = _rows_coverage(by_sigma[s])
        if rows:
            tables[f"table{k}"] = {"csv": _to_csv(rows), "text": _to_text(rows, f"95% coverage, sigma={s:g}")}
            k += 1
    return tables


def read_table_csv(text: str) -> list:
    """Parse a rendered table back to dicts of floats (ints where integral columns)."""
    out = []
    for row in csv.DictReader(io.StringIO(text)):
        parsed = {}
        for key, v in row.items():
            if v == "":
                parsed[key] = None
            elif key in ("n", "reps", "failures"):
                parsed[key] = int(v)
            else:
                parsed[key] = float(v)
        out.append(parsed)
    return out


def write_results(results: dict, out_dir) -> list:
    """One JSON per cell, a top-level summary CSV and the table files; returns written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for res in results.values():
        p = out_dir / cell_filename(res.theta, res.sigma, res.n)
        p.write_text(json.dumps(res.to_dict()), encoding="utf-8")
        written.append(p)
    for name, tab in summarize(results).items():
        for ext in ("csv", "text"):
            p = out_dir / f"{name}.{'txt' if ext == 'text' else 'csv'}"
            p.write_text(tab[ext], encoding="utf-8")
            written.append(p)
    rows = _rows_estimates(results.values())
    cov = {(r["theta"], r["sigma"], r["n"]): r for r in _rows_coverage(results.values())}
    for r in rows:
        c = cov.get((r["theta"], r["sigma"], r["n"]), {})
        r.update({k: v for k, v in c.items() if k.startswith("CI_")})
        r["zero_fraction"] = results[(r["theta"], r["sigma"], r["n"])].zero_fraction
    p = out_dir / "summary.csv"
    p.write_text(_to_csv(rows), encoding="utf-8")
    written.append(p)
    return written


def cell_filename(theta, sigma, n) -> str:
    return f"cell_theta{theta:g}_sigma{sigma:g}_n{n}.json"
