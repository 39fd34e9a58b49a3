"""
Wall-time scaling of interventional simulation and vMF stability sweeps.

Simulation cost should grow linearly in the number of Monte Carlo samples
``S`` and in the horizon ``T_sim``; each is checked by the R^2 of a linear
fit of wall time on a grid. Timings run with single-threaded BLAS and take
the minimum over repeats to suppress scheduler noise.
"""

import time
from dataclasses import dataclass, field

import numpy as np
from threadpoolctl import threadpool_limits

from . import scm, vmf
from .data import SyntheticSpec, gen_synthetic

__all__ = [
    "BenchResult",
    "linear_fit",
    "time_intervention",
    "bench_intervention_scaling",
    "product_ratio",
    "bench_vmf_stability",
    "write_results",
    "write_stability",
]

S_GRID = (100, 200, 400, 800, 1600)
T_GRID = (10, 20, 40, 80, 160)


@dataclass
class BenchResult:
    """Timings on one grid and the linear fit ``time = a + slope * x``."""

    setting: str
    grid: list
    times_ms: list
    slope: float
    intercept: float
    r2: float
    labels: list = field(default_factory=list)

    def __post_init__(self):
        if not 0.0 <= self.r2 <= 1.0:
            raise ValueError("R^2 outside [0, 1]")


def linear_fit(x, y):
    """``(slope, intercept, r2)`` of ordinary least squares; R^2 clipped to [0, 1]."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    A = np.column_stack([x, np.ones_like(x)])
    (slope, icpt), *_ = np.linalg.lstsq(A, y, rcond=None)
    ss_res = float(np.sum((y - A @ [slope, icpt]) ** 2))
    ss_tot = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(slope), float(icpt), float(min(max(r2, 0.0), 1.0))


def default_model(seed=0):
    """Ground-truth SCM of a standard synthetic dataset plus a start state."""
    data, truth = gen_synthetic(SyntheticSpec(n_nodes=30, timesteps=50, seed=seed))
    return truth.model, truth.latents[-1]


def time_intervention(model, init, S, T, repeats=3, seed=0):
    """Minimum wall time (ms) of one :func:`scm.intervene` call."""
    spec = scm.InterventionSpec({0: init[0]}, 1, int(T), int(S))
    best = np.inf
    for r in range(repeats):
        t0 = time.perf_counter()
        scm.intervene(model, spec, init, None, rng_seed=seed + r)
        best = min(best, time.perf_counter() - t0)
    return 1e3 * best


def bench_intervention_scaling(model=None, init=None, s_grid=S_GRID, t_grid=T_GRID,
                               t_fixed=20, s_fixed=100, repeats=5, seed=0):
    """Linear fits of wall time against ``S`` (``T`` fixed) and ``T`` (``S`` fixed).

    Returns
    -------
    (BenchResult, BenchResult)
        The ``S`` sweep and the ``T`` sweep.
    """
    if model is None:
        model, init = default_model(seed)
    with threadpool_limits(1):
        # warm-up so the first grid point does not pay import/allocation costs
        time_intervention(model, init, s_grid[0], t_fixed, 1, seed)
        ts = [time_intervention(model, init, S, t_fixed, repeats, seed) for S in s_grid]
        tt = [time_intervention(model, init, s_fixed, T, repeats, seed) for T in t_grid]
    res = []
    for name, grid, times, labels in (
            ("S", s_grid, ts, [f"S={S};T={t_fixed}" for S in s_grid]),
            ("T", t_grid, tt, [f"S={s_fixed};T={T}" for T in t_grid])):
        slope, icpt, r2 = linear_fit(grid, times)
        res.append(BenchResult(name, list(grid), times, slope, icpt, r2, labels))
    return tuple(res)


def product_ratio(model=None, init=None, S=200, T=20, repeats=5, seed=0):
    """Wall-time ratio when both ``S`` and ``T`` double (bilinear cost gives 4)."""
    if model is None:
        model, init = default_model(seed)
    with threadpool_limits(1):
        time_intervention(model, init, S, T, 1, seed)
        a = time_intervention(model, init, S, T, repeats, seed)
        b = time_intervention(model, init, 2 * S, 2 * T, repeats, seed)
    return b / a


def bench_vmf_stability(dims=(2, 3, 8, 128, 512), kappas=None):
    """Entropy sweep over ``kappa`` for each dimension.

    Returns
    -------
    list of dict
        Per dimension: ``finite`` (no NaN/Inf in entropy, normalizer or
        mean resultant), ``monotone`` (strictly decreasing entropy) and the
        entropies at the ends of the grid.
    """
    if kappas is None:
        kappas = np.logspace(-4, 6, 200)
    kappas = np.asarray(kappas, dtype=float)
    rows = []
    for D in dims:
        H = vmf.entropy(D, kappas)
        C = vmf.log_normalizer(D, kappas)
        A = vmf.mean_resultant(D, kappas)
        finite = bool(np.all(np.isfinite(H)) and np.all(np.isfinite(C)) and np.all(np.isfinite(A)))
        rows.append(dict(dim=int(D), finite=finite, monotone=bool(np.all(np.diff(H) < 0)),
                         h_min_kappa=float(H[0]), h_max_kappa=float(H[-1])))
    return rows


def write_results(path, results):
    """``setting,time_ms`` rows for every grid point of every result."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("setting,time_ms\n")
        for r in results:
            for lab, t in zip(r.labels, r.times_ms):
                fh.write(f"{lab},{t:.6f}\n")
            fh.write(f"fit_{r.setting}_slope,{r.slope:.6f}\n")
            fh.write(f"fit_{r.setting}_r2,{r.r2:.6f}\n")


def write_stability(path, rows):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("dim,finite,monotone,h_min_kappa,h_max_kappa\n")
        for r in rows:
            fh.write(f"{r['dim']},{int(r['finite'])},{int(r['monotone'])},"
                     f"{r['h_min_kappa']!r},{r['h_max_kappa']!r}\n")
