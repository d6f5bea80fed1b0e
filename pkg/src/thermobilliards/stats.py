"""Statistical verification: goodness of fit, TV decay, autocorrelation times.

The equal-temperature chain has the closed-form invariant law with v_perp
density 2 beta v exp(-beta v^2) and position uniform in arc length; the
checks here compare simulated marginals against it (Kolmogorov-Smirnov for
v_perp, chi-square for position) and estimate empirical mixing rates from
total-variation decay between ensembles and from integrated autocorrelation
times.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import special, stats as sps

from .chain import InitialDistribution, RecordingOptions, run_chain, run_ensemble
from .geometry import BoundaryPoint, BoundaryState, ValidatedTable
from .histograms import EdgeMismatch, Histogram1D, log_edges

__all__ = [
    "EdgeMismatch",
    "Histogram1D",
    "EmptySample",
    "UnequalBeta",
    "WindowEmpty",
    "TooShort",
    "default_vperp_edges",
    "equilibrium_cdf",
    "equilibrium_quantile",
    "ks_statistic",
    "ks_two_sample",
    "position_chi_square",
    "check_equilibrium",
    "tv_distance",
    "tv_decay_curve",
    "fit_tv_decay",
    "estimate_mixing_tv",
    "autocorrelation_time",
    "MixingEstimate",
    "EquilibriumVerdict",
]


class EmptySample(Exception):
    pass


class UnequalBeta(Exception):
    pass


class WindowEmpty(Exception):
    """TV curve never entered the fit window; carries the raw curve."""

    def __init__(self, message: str, ns, tvs):
        super().__init__(message)
        self.ns = np.asarray(ns)
        self.tvs = np.asarray(tvs)


class TooShort(Exception):
    pass


def default_vperp_edges() -> np.ndarray:
    """Log-spaced v_perp histogram edges covering both drift tails."""
    return log_edges(1e-4, 1e3, 200)


# --- equilibrium law ---------------------------------------------------------


def equilibrium_cdf(v, beta: float):
    """CDF 1 - exp(-beta v^2) of the equilibrium v_perp marginal."""
    if beta <= 0:
        raise ValueError("beta must be positive")
    v = np.asarray(v, dtype=np.float64)
    out = np.where(v > 0, -np.expm1(-beta * np.square(np.maximum(v, 0.0))), 0.0)
    return float(out) if out.ndim == 0 else out


def equilibrium_quantile(u, beta: float):
    """Inverse of equilibrium_cdf (u in [0, 1))."""
    u = np.asarray(u, dtype=np.float64)
    out = np.sqrt(-np.log1p(-u) / beta)
    return float(out) if out.ndim == 0 else out


# --- goodness of fit ---------------------------------------------------------


@dataclass(frozen=True)
class KSResult:
    d: float
    p_value: float
    n: int

    def critical_value(self, alpha: float = 0.01) -> float:
        return math.sqrt(-0.5 * math.log(alpha / 2.0)) / math.sqrt(self.n)


def ks_statistic(samples, cdf) -> KSResult:
    """One-sample Kolmogorov-Smirnov distance and asymptotic p-value.

    `cdf` maps a sorted sample array to reference CDF values.  The statistic
    is a rank statistic: any strictly monotone reparametrization applied to
    both samples and cdf leaves it unchanged.
    """
    x = np.sort(np.asarray(samples, dtype=np.float64))
    n = x.size
    if n == 0:
        raise EmptySample("ks_statistic needs at least one sample")
    f = np.asarray(cdf(x), dtype=np.float64)
    hi = np.arange(1, n + 1) / n - f
    lo = f - np.arange(0, n) / n
    d = float(max(hi.max(), lo.max()))
    p = float(special.kolmogorov(math.sqrt(n) * d))
    return KSResult(d, p, n)


def ks_two_sample(a, b) -> KSResult:
    """Two-sample KS distance with the asymptotic p-value at effective n."""
    a = np.sort(np.asarray(a, dtype=np.float64))
    b = np.sort(np.asarray(b, dtype=np.float64))
    if a.size == 0 or b.size == 0:
        raise EmptySample("ks_two_sample needs non-empty samples")
    both = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, both, side="right") / a.size
    cdf_b = np.searchsorted(b, both, side="right") / b.size
    d = float(np.abs(cdf_a - cdf_b).max())
    n_eff = a.size * b.size / (a.size + b.size)
    p = float(special.kolmogorov(math.sqrt(n_eff) * d))
    return KSResult(d, p, int(round(n_eff)))


def position_chi_square(
    table: ValidatedTable, disk_ids, thetas, n_bins: int = 50
) -> tuple[float, float, int]:
    """Chi-square of boundary positions against uniform arc length.

    Bins are allocated to disks proportionally to circumference (largest
    remainder), expected counts proportional to bin arc length.  Returns
    (statistic, p_value, dof).
    """
    disk_ids = np.asarray(disk_ids)
    thetas = np.asarray(thetas, dtype=np.float64)
    radii = table.radii
    weights = radii / radii.sum()
    raw = weights * n_bins
    alloc = np.floor(raw).astype(int)
    rem = n_bins - alloc.sum()
    if rem > 0:
        order = np.argsort(-(raw - alloc))
        alloc[order[:rem]] += 1
    alloc = np.maximum(alloc, 1)
    n = thetas.size
    observed = []
    expected = []
    for disk, k in enumerate(alloc):
        mask = disk_ids == disk
        counts, _ = np.histogram(thetas[mask], bins=k, range=(0.0, 2.0 * math.pi))
        observed.append(counts)
        expected.append(np.full(k, n * weights[disk] / k))
    obs = np.concatenate(observed)
    exp = np.concatenate(expected)
    stat = float(np.sum((obs - exp) ** 2 / exp))
    dof = obs.size - 1
    return stat, float(sps.chi2.sf(stat, dof)), dof


@dataclass
class EquilibriumVerdict:
    """Outcome of the headline equilibrium check (equal-beta tables)."""

    passed: bool
    alpha: float
    n_samples: int
    ks: KSResult
    chi2_stat: float
    chi2_p: float
    chi2_dof: int
    mean_v2: float
    mean_v2_se: float
    mean_v2_expected: float
    moment_ok: bool
    tau_int_v2: float


def check_equilibrium(
    table: ValidatedTable,
    n_steps: int,
    burn_in: int = 10_000,
    thin: int = 10,
    seed: int = 0,
    initial: BoundaryState | None = None,
    alpha: float = 0.01,
    n_position_bins: int = 50,
) -> EquilibriumVerdict:
    """Run the chain and test the closed-form invariant law at level alpha.

    PASS requires both the v_perp KS test and the position chi-square test to
    be accepted at `alpha`.  The second-moment check E[v_perp^2] = 1/beta is
    reported alongside, with the standard error inflated by the measured
    integrated autocorrelation time of the thinned series.
    """
    betas = table.betas
    if not np.all(betas == betas[0]):
        raise UnequalBeta(f"check_equilibrium requires equal betas, got {betas}")
    beta = float(betas[0])
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 0], dtype=np.uint64)))
    if initial is None:
        initial = InitialDistribution("equilibrium", beta=beta).draw(table, rng)
    traj = run_chain(
        table, initial, n_steps, rng,
        RecordingOptions(mode="thinned", thin=thin, burn_in=burn_in),
    )
    v = traj.v_perp
    ks = ks_statistic(v, lambda x: equilibrium_cdf(x, beta))
    chi2_stat, chi2_p, dof = position_chi_square(
        table, traj.disk_id, traj.theta, n_position_bins
    )
    v2 = v * v
    mean_v2 = float(v2.mean())
    if v2.size >= 10_000:
        tau_int = autocorrelation_time(v2).tau_int
    else:
        tau_int = 1.0
    se = float(v2.std(ddof=1) / math.sqrt(v2.size) * math.sqrt(max(tau_int, 1.0)))
    moment_ok = abs(mean_v2 - 1.0 / beta) <= 3.0 * se
    return EquilibriumVerdict(
        passed=bool(ks.p_value >= alpha and chi2_p >= alpha),
        alpha=alpha,
        n_samples=v.size,
        ks=ks,
        chi2_stat=chi2_stat,
        chi2_p=chi2_p,
        chi2_dof=dof,
        mean_v2=mean_v2,
        mean_v2_se=se,
        mean_v2_expected=1.0 / beta,
        moment_ok=bool(moment_ok),
        tau_int_v2=float(tau_int),
    )


# --- total variation and mixing ----------------------------------------------


def tv_distance(h1: Histogram1D, h2: Histogram1D) -> float:
    """Total variation between two same-edge histograms (under/overflow included)."""
    if h1.edges.shape != h2.edges.shape or not np.array_equal(h1.edges, h2.edges):
        raise EdgeMismatch("tv_distance requires identical edges")
    return float(0.5 * np.abs(h1.normalized() - h2.normalized()).sum())


def tv_decay_curve(slices_a, slices_b) -> tuple[np.ndarray, np.ndarray]:
    """Per-step TV between two lists of same-edge histograms."""
    if len(slices_a) != len(slices_b):
        raise EdgeMismatch("slice lists must have equal length")
    ns = np.arange(len(slices_a))
    tvs = np.array([tv_distance(a, b) for a, b in zip(slices_a, slices_b)])
    return ns, tvs


@dataclass
class MixingEstimate:
    """An empirical decay rate: alpha_hat with CI, gamma_tilde = exp(-alpha)."""

    method: str
    alpha_hat: float
    ci_lo: float
    ci_hi: float
    window: tuple[float, float]
    ns: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]
    values: np.ndarray = field(default=None, repr=False)  # type: ignore[assignment]
    tau_int: float = float("nan")
    window_size: int = 0

    @property
    def gamma_tilde(self) -> float:
        return math.exp(-self.alpha_hat)

    @property
    def rate_positive(self) -> bool:
        return self.alpha_hat > 0 and self.ci_lo > 0


def fit_tv_decay(
    ns, tvs, window: tuple[float, float] = (0.02, 0.5), min_points: int = 3
) -> MixingEstimate:
    """Least-squares fit of log TV vs n inside the TV window.

    Below the window floor the curve is binomial noise; above the ceiling it
    is transient.  Raises WindowEmpty (with the raw curve attached) when
    fewer than min_points samples fall inside.
    """
    ns = np.asarray(ns, dtype=np.float64)
    tvs = np.asarray(tvs, dtype=np.float64)
    lo, hi = window
    mask = (tvs >= lo) & (tvs <= hi)
    if mask.sum() < min_points:
        raise WindowEmpty(
            f"TV curve has {int(mask.sum())} points in [{lo}, {hi}]; need {min_points}",
            ns, tvs,
        )
    x = ns[mask]
    y = np.log(tvs[mask])
    m = x.size
    xbar = x.mean()
    sxx = float(np.sum((x - xbar) ** 2))
    slope = float(np.sum((x - xbar) * (y - y.mean())) / sxx)
    intercept = float(y.mean() - slope * xbar)
    resid = y - (intercept + slope * x)
    if m > 2:
        se = math.sqrt(float(resid @ resid) / (m - 2) / sxx)
    else:
        se = float("inf")
    alpha_hat = -slope
    return MixingEstimate(
        method="tv-decay",
        alpha_hat=alpha_hat,
        ci_lo=alpha_hat - 1.96 * se,
        ci_hi=alpha_hat + 1.96 * se,
        window=window,
        ns=ns,
        values=tvs,
        window_size=m,
    )


def estimate_mixing_tv(
    table: ValidatedTable,
    initial_a: InitialDistribution,
    initial_b: InitialDistribution,
    n_chains: int,
    n_steps: int,
    master_seed: int,
    *,
    hist_edges: np.ndarray | None = None,
    window: tuple[float, float] = (0.02, 0.5),
    n_workers: int = 1,
) -> MixingEstimate:
    """TV decay rate between two ensembles evolved in parallel.

    Ensemble A uses master_seed, ensemble B master_seed + 1 (decoupled
    streams); the per-step v_perp marginals are compared bin-wise.
    """
    edges = default_vperp_edges() if hist_edges is None else hist_edges
    ens_a = run_ensemble(
        table, initial_a, n_chains, n_steps, master_seed,
        record_slices=True, hist_edges=edges, n_workers=n_workers,
    )
    ens_b = run_ensemble(
        table, initial_b, n_chains, n_steps, master_seed + 1,
        record_slices=True, hist_edges=edges, n_workers=n_workers,
    )
    ns, tvs = tv_decay_curve(ens_a.slices, ens_b.slices)
    return fit_tv_decay(ns, tvs, window=window)


# --- integrated autocorrelation time ------------------------------------------


def _autocovariance(x: np.ndarray) -> np.ndarray:
    n = x.size
    m = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x - x.mean(), n=m)
    acf = np.fft.irfft(f * np.conjugate(f), n=m)[:n].real
    return acf / acf[0]

def observable_series(trajectory, observable: str = "v_perp", params=None, level: float | None = None):
    """Extract a scalar observable series from a trajectory.

    'v_perp' is the normal speed, 'potential' is V(v_perp) (needs params),
    'level_set' the indicator of {V <= level} (needs params and level).
    """
    v = np.asarray(trajectory.v_perp if hasattr(trajectory, "v_perp") else trajectory)
    if observable == "v_perp":
        return v
    from .potential import potential_value

    if params is None:
        raise ValueError(f"observable {observable!r} requires potential params")
    pv = potential_value(v, params)
    if observable == "potential":
        return pv
    if observable == "level_set":
        if level is None:
            raise ValueError("level_set observable requires a level")
        return (pv <= level).astype(np.float64)
    raise ValueError(f"unknown observable {observable!r}")


def autocorrelation_time(series, c: float = 6.0, min_length: int = 10_000) -> MixingEstimate:
    """Integrated autocorrelation time via the standard self-consistent window.

    tau_int = 1 + 2 sum_{t=1..W} rho(t) with the smallest window W satisfying
    W >= c * tau_int(W) (so an iid series gives tau_int = 1 and an AR(1) with
    coefficient rho gives (1+rho)/(1-rho)).  The rate proxy is
    alpha_hat = 1 / tau_int, with a Madras-Sokal error bar
    se(tau) = tau * sqrt(2 (2W + 1) / n).

    `series` is either a raw 1-D array (used when calibrating the pipeline
    with injected iid / AR(1) sequences) or anything with a `v_perp` field.
    """
    x = np.asarray(series.v_perp if hasattr(series, "v_perp") else series, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("autocorrelation_time expects a 1-D series")
    n = x.size
    if n < min_length:
        raise TooShort(f"series length {n} < {min_length}")
    rho = _autocovariance(x)
    cumulative = 1.0 + 2.0 * np.cumsum(rho[1:])
    taus = np.maximum(cumulative, 1e-12)
    windows = np.arange(1, taus.size + 1)
    hits = np.nonzero(windows >= c * taus)[0]
    w = int(hits[0]) + 1 if hits.size else taus.size
    tau = float(taus[w - 1])
    se = tau * math.sqrt(2.0 * (2.0 * w + 1.0) / n)
    tau_lo = max(tau - 1.96 * se, 1e-12)
    tau_hi = tau + 1.96 * se
    alpha_hat = 1.0 / tau
    return MixingEstimate(
        method="autocorrelation",
        alpha_hat=alpha_hat,
        ci_lo=1.0 / tau_hi,
        ci_hi=1.0 / tau_lo,
        window=(1.0, float(w)),
        ns=windows[: min(w * 3, taus.size)],
        values=rho[1 : min(w * 3, taus.size) + 1],
        tau_int=tau,
        window_size=w,
    )
