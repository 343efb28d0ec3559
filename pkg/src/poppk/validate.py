"""Model validation: nonparametric bootstrap and visual predictive check.

Replicates are independent jobs keyed by (seed, replicate index); worker
results are reassembled in index order so output never depends on the
degree of parallelism.
"""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .dataset import StudyDataset, Subject
from .estimate import FitSettings, ModelSpec, ParameterSet, fit
from .simulate import simulate_replicate

__all__ = [
    "BootstrapSummary",
    "ParamDistribution",
    "VpcSummary",
    "VpcBin",
    "bootstrap",
    "vpc",
    "resample_subjects",
]


# ---------------------------------------------------------------------------
# Bootstrap
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamDistribution:
    median: float
    mean: float
    sd: float
    p2_5: float
    p97_5: float


@dataclass(frozen=True)
class BootstrapSummary:
    params: dict[str, ParamDistribution]     # reported scale, keyed like FitResult
    n_requested: int
    n_converged: int
    replicates: tuple[dict[str, float], ...  ]  # converged replicate estimates
    warning: str = ""

    @property
    def failure_rate(self) -> float:
        return 1.0 - self.n_converged / self.n_requested


def resample_subjects(ds: StudyDataset, rng: np.random.Generator) -> StudyDataset:
    """Subject-level resampling with replacement; duplicates get fresh ids."""
    n = ds.n_subjects
    indices = rng.integers(0, n, size=n)
    subjects = []
    for new_id, idx in enumerate(indices, start=1):
        src = ds.subjects[int(idx)]
        records = tuple(replace(r, subject_id=new_id) for r in src.records)
        subjects.append(Subject(subject_id=new_id, records=records))
    return StudyDataset(subjects=tuple(subjects), lloq=ds.lloq)


def _bootstrap_worker(args):
    ds, ms, init, settings, seed, index = args
    rng = np.random.default_rng([seed, index])
    sample = resample_subjects(ds, rng)
    try:
        result = fit(sample, ms, init, settings)
    except Exception:
        return index, None
    if not result.converged:
        return index, None
    return index, result.estimates


def bootstrap(ds: StudyDataset, ms: ModelSpec, init: ParameterSet, n: int = 1000,
              seed: int = 0, threads: int = 1,
              settings: FitSettings = FitSettings()) -> BootstrapSummary:
    """Nonparametric bootstrap at the subject level.

    Each replicate resamples subjects with replacement to the original
    count and refits from the base-fit estimates; non-converged replicates
    are excluded from the summaries and counted.
    """
    if n <= 0:
        raise ValueError("bootstrap requires n >= 1 replicates")
    base_settings = replace(settings, compute_se=False)
    base = fit(ds, ms, init, base_settings)
    if not base.converged:
        raise ValueError("base fit did not converge; bootstrap aborted")

    jobs = [(ds, ms, base.params, base_settings, seed, r) for r in range(n)]
    results: list[dict[str, float] | None] = [None] * n
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for index, est in pool.map(_bootstrap_worker, jobs, chunksize=1):
                results[index] = est
    else:
        for job in jobs:
            index, est = _bootstrap_worker(job)
            results[index] = est

    converged = [est for est in results if est is not None]
    summary: dict[str, ParamDistribution] = {}
    if converged:
        for key in base.param_names:
            values = np.array([est[key] for est in converged], dtype=float)
            p2_5, med, p97_5 = np.percentile(values, [2.5, 50.0, 97.5])
            summary[key] = ParamDistribution(
                median=float(med),
                mean=float(values.mean()),
                sd=float(values.std(ddof=1)) if values.size > 1 else 0.0,
                p2_5=float(p2_5),
                p97_5=float(p97_5),
            )
    n_converged = len(converged)
    warning = ""
    if n_converged < 0.5 * n:
        warning = (f"only {n_converged}/{n} bootstrap replicates converged; "
                   "summaries are unreliable")
    return BootstrapSummary(params=summary, n_requested=n, n_converged=n_converged,
                            replicates=tuple(converged), warning=warning)


BOOTSTRAP_HEADER = ("PARAM", "MEDIAN", "MEAN", "SD", "P2.5", "P97.5")


def bootstrap_table(summary: BootstrapSummary) -> str:
    out = [",".join(BOOTSTRAP_HEADER)]
    for key, dist in summary.params.items():
        out.append(",".join((key, repr(dist.median), repr(dist.mean), repr(dist.sd),
                             repr(dist.p2_5), repr(dist.p97_5))))
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# Visual predictive check
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VpcBin:
    time: float                      # representative time (nominal time or bin center)
    n_observed: int
    obs: tuple[float, float, float]              # observed p5/p50/p95 (NaN if < 3 obs)
    sim_p5: tuple[float, float]                  # 95% CI of the simulated 5th pct
    sim_p50: tuple[float, float]
    sim_p95: tuple[float, float]


@dataclass(frozen=True)
class VpcSummary:
    bins: tuple[VpcBin, ...]
    n_simulations: int
    bin_definition: str


def _bin_edges_equal_count(times: np.ndarray, n_bins: int) -> np.ndarray:
    qs = np.linspace(0.0, 1.0, n_bins + 1)
    edges = np.quantile(times, qs)
    edges[0] -= 1e-9
    edges[-1] += 1e-9
    return np.unique(edges)

def _assign_bins(times: np.ndarray, centers: np.ndarray | None,
                 edges: np.ndarray | None) -> np.ndarray:
    if centers is not None:
        idx = np.searchsorted(centers, times)
        idx = np.clip(idx, 0, centers.size - 1)
        left_closer = (idx > 0) & (
            np.abs(times - centers[np.maximum(idx - 1, 0)]) <= np.abs(centers[idx] - times)
        )
        return np.where(left_closer, idx - 1, idx)
    return np.clip(np.searchsorted(edges, times, side="right") - 1, 0, edges.size - 2)


def _percentiles(values: np.ndarray) -> tuple[float, float, float]:
    if values.size < 3:
        return (float("nan"),) * 3
    p5, p50, p95 = np.percentile(values, [5.0, 50.0, 95.0])
    return float(p5), float(p50), float(p95)


def _vpc_worker(args):
    ds, ms, params, seed, r, centers, edges, n_bins = args
    sim = simulate_replicate(ds, ms, params, seed, replicate=r)
    times, values = _all_observation_values(sim)
    stats = np.full((n_bins, 3), np.nan)
    idx = _assign_bins(times, centers, edges)
    for b in range(n_bins):
        stats[b] = _percentiles(values[idx == b])
    return r, stats


def _all_observation_values(ds: StudyDataset):
    """Times and dv of every observation row carrying a value (pre-censoring)."""
    times, values = [], []
    for s in ds.subjects:
        for r in s.observations:
            if r.dv is not None:
                times.append(r.time)
                values.append(r.dv)
    return np.array(times, dtype=float), np.array(values, dtype=float)


def _usable_observation_values(ds: StudyDataset):
    times, values = [], []
    for s in ds.subjects:
        for r in s.observations:
            if r.usable:
                times.append(r.time)
                values.append(r.dv)
    return np.array(times, dtype=float), np.array(values, dtype=float)


def vpc(ds: StudyDataset, ms: ModelSpec, params: ParameterSet, n: int = 1000,
        seed: int = 0, bins: int | None = None, threads: int = 1) -> VpcSummary:
    """Visual predictive check against ``n`` design-preserving simulations.

    Observed 5th/50th/95th percentiles per time bin are compared to the
    2.5-97.5 percentile band of the same statistics across simulated
    replicates (uncensored simulated values vs observed mdv=0 values).
    Default binning is by exact nominal times; pass ``bins=k`` for
    equal-count binning of irregular designs.
    """
    if n <= 0:
        raise ValueError("vpc requires n >= 1 simulations")
    all_times, _ = _all_observation_values(ds)
    if all_times.size == 0:
        raise ValueError("dataset has no observation rows")
    if bins is None:
        centers = np.unique(all_times)
        edges = None
        n_bins = centers.size
        bin_definition = "nominal-times"
        rep_times = centers
    else:
        centers = None
        edges = _bin_edges_equal_count(all_times, int(bins))
        n_bins = edges.size - 1
        bin_definition = f"equal-count-{n_bins}"
        rep_times = 0.5 * (edges[:-1] + edges[1:])

    obs_times, obs_values = _usable_observation_values(ds)
    obs_idx = _assign_bins(obs_times, centers, edges)
    obs_stats = []
    obs_counts = []
    for b in range(n_bins):
        sel = obs_values[obs_idx == b]
        obs_counts.append(int(sel.size))
        obs_stats.append(_percentiles(sel))

    jobs = [(ds, ms, params, seed, r, centers, edges, n_bins) for r in range(n)]
    sim_stats = np.full((n, n_bins, 3), np.nan)
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            for r, stats in pool.map(_vpc_worker, jobs, chunksize=max(1, n // (threads * 4))):
                sim_stats[r] = stats
    else:
        for job in jobs:
            r, stats = _vpc_worker(job)
            sim_stats[r] = stats

    out_bins = []
    for b in range(n_bins):
        bands = []
        for stat_idx in range(3):
            column = sim_stats[:, b, stat_idx]
            column = column[np.isfinite(column)]
            if column.size == 0:
                bands.append((float("nan"), float("nan")))
            else:
                lo, hi = np.percentile(column, [2.5, 97.5])
                bands.append((float(lo), float(hi)))
        out_bins.append(VpcBin(
            time=float(rep_times[b]),
            n_observed=obs_counts[b],
            obs=obs_stats[b],
            sim_p5=bands[0],
            sim_p50=bands[1],
            sim_p95=bands[2],
        ))
    return VpcSummary(bins=tuple(out_bins), n_simulations=n, bin_definition=bin_definition)


VPC_HEADER = ("BIN_TIME", "OBS_P5", "OBS_P50", "OBS_P95", "SIM_P5_LO", "SIM_P5_HI",
              "SIM_P50_LO", "SIM_P50_HI", "SIM_P95_LO", "SIM_P95_HI")


def vpc_table(summary: VpcSummary) -> str:
    def cell(x: float) -> str:
        return "" if not np.isfinite(x) else repr(float(x))

    out = [",".join(VPC_HEADER)]
    for b in summary.bins:
        out.append(",".join((
            repr(b.time), cell(b.obs[0]), cell(b.obs[1]), cell(b.obs[2]),
            cell(b.sim_p5[0]), cell(b.sim_p5[1]),
            cell(b.sim_p50[0]), cell(b.sim_p50[1]),
            cell(b.sim_p95[0]), cell(b.sim_p95[1]),
        )))
    return "\n".join(out) + "\n"
