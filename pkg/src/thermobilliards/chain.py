"""The boundary Markov chain and its suspension-time bookkeeping.

A step leaves the current disk at a random angle phi distributed as

    rho_v(phi) dphi = sqrt(beta/pi) * v / cos^2(phi) * exp(-beta v^2 tan^2 phi)

(with beta the inverse temperature of the disk being left), which is realized
exactly and rejection-free by drawing the tangential velocity
v_t ~ N(0, 1/(2 beta)) and setting phi = atan2(v_t, v).  Physical time
advances by tau * cos(phi) / v_perp per flight.

Reproducibility: chains consume a stream of standard normals from a numpy
Generator; ensembles derive one Philox generator per chain, keyed
(master_seed, chain_id).  The scalar `chain_step` path and the compiled
`run_chain` path consume the identical stream, so they agree bitwise.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .geometry import (
    BoundaryPoint,
    BoundaryState,
    NoIntersection,
    ValidatedTable,
    VPerpUnderflow,
)
from .histograms import Histogram1D

_CHUNK = 1 << 20


class ChainStepError(Exception):
    """A chain step failed; carries the step index and the underlying error."""

    def __init__(self, step: int, cause: Exception):
        self.step = step
        self.cause = cause
        super().__init__(f"chain step {step} failed: {cause}")


@dataclass(frozen=True)
class AngleDensityParams:
    v_perp: float
    beta: float

    def __post_init__(self):
        if not (self.v_perp > 0 and math.isfinite(self.v_perp)):
            raise ValueError(f"v_perp must be positive and finite, got {self.v_perp!r}")
        if not (self.beta > 0 and math.isfinite(self.beta)):
            raise ValueError(f"beta must be positive and finite, got {self.beta!r}")


def angle_density(phi, params: AngleDensityParams):
    """Density rho_{v_perp}(phi; beta) of the outgoing angle."""
    phi = np.asarray(phi, dtype=np.float64)
    v, beta = params.v_perp, params.beta
    c = np.cos(phi)
    t = np.tan(phi)
    return np.sqrt(beta / np.pi) * v / (c * c) * np.exp(-beta * v * v * t * t)


def sample_angle(params: AngleDensityParams, rng: np.random.Generator) -> float:
    """Draw phi ~ rho_{v_perp}; exact via the Gaussian tangential velocity."""
    v_t = rng.standard_normal() / math.sqrt(2.0 * params.beta)
    return math.atan2(v_t, params.v_perp)


@dataclass(frozen=True)
class StepRecord:
    phi: float
    phi_in: float
    tau: float
    dt: float


def chain_step(
    table: ValidatedTable, state: BoundaryState, rng: np.random.Generator
) -> tuple[BoundaryState, StepRecord]:
    """One collision-to-collision step of the chain."""
    z = rng.standard_normal()
    status, disk, theta, vperp, phi, phi_in, tau, _ = _kernels.step_scalar(
        table.arrays, state.point.disk_id, state.point.theta, state.v_perp, z
    )
    if status == _kernels.STATUS_NO_INTERSECTION:
        raise NoIntersection(state.point, phi)
    if status == _kernels.STATUS_UNDERFLOW:
        raise VPerpUnderflow(f"v_perp underflow from state {state}")
    dt = tau * math.cos(phi) / state.v_perp
    new_state = BoundaryState(BoundaryPoint(int(disk), float(theta)), float(vperp))
    return new_state, StepRecord(float(phi), float(phi_in), float(tau), float(dt))


@dataclass(frozen=True)
class RecordingOptions:
    """What run_chain keeps: 'full', 'thinned' (every thin-th step), or 'online'."""

    mode: str = "full"
    thin: int = 1
    burn_in: int = 0

    def __post_init__(self):
        if self.mode not in ("full", "thinned", "online"):
            raise ValueError(f"unknown recording mode {self.mode!r}")
        if self.thin < 1 or self.burn_in < 0:
            raise ValueError("thin must be >= 1 and burn_in >= 0")


@dataclass
class OnlineStats:
    """Streaming moments of v_perp over the post-burn-in steps."""

    count: int = 0
    mean_v: float = float("nan")
    mean_v2: float = float("nan")


@dataclass
class ChainTrajectory:
    """Recorded samples of one chain, plus online stats and seed provenance.

    Arrays hold the state *after* each recorded step; `times` is the cumulative
    suspension clock (strictly increasing).  `angles` columns are (phi, phi_in).
    """

    disk_id: np.ndarray
    theta: np.ndarray
    v_perp: np.ndarray
    phi: np.ndarray
    phi_in: np.ndarray
    tau: np.ndarray
    times: np.ndarray
    n_steps: int
    recording: RecordingOptions
    stats: OnlineStats
    final_state: BoundaryState
    provenance: dict = field(default_factory=dict)

    def __len__(self):
        return self.v_perp.size

    @property
    def states(self):
        return list(zip(self.disk_id.tolist(), self.theta.tolist(), self.v_perp.tolist()))

    @property
    def angles(self):
        return np.column_stack([self.phi, self.phi_in])


def _as_generator(rng) -> tuple[np.random.Generator, dict]:
    if isinstance(rng, np.random.Generator):
        return rng, {"generator": "caller-provided"}
    seed = int(rng)
    gen = np.random.Generator(np.random.Philox(key=np.array([seed, 0], dtype=np.uint64)))
    return gen, {"generator": "philox", "key": [seed, 0]}


def run_chain(
    table: ValidatedTable,
    initial: BoundaryState,
    n_steps: int,
    rng,
    recording: RecordingOptions = RecordingOptions(),
) -> ChainTrajectory:
    """Iterate chain_step n_steps times with the requested recording.

    `rng` is either a numpy Generator or an integer seed (mapped to a Philox
    stream with key (seed, 0)).  Step failures are re-raised as ChainStepError
    with the failing step index attached.
    """
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    gen, provenance = _as_generator(rng)
    record = recording.mode != "online"
    thin = 1 if recording.mode == "full" else recording.thin
    burn_in = recording.burn_in
    n_rec = 0
    if record and n_steps > burn_in:
        n_rec = (n_steps - burn_in + thin - 1) // thin
    rec_disk = np.empty(n_rec, dtype=np.int64)
    rec_theta = np.empty(n_rec)
    rec_vperp = np.empty(n_rec)
    rec_phi = np.empty(n_rec)
    rec_phi_in = np.empty(n_rec)
    rec_tau = np.empty(n_rec)
    rec_time = np.empty(n_rec)

    istate = np.array([initial.point.disk_id], dtype=np.int64)
    fstate = np.zeros(8)
    fstate[0] = initial.point.theta
    fstate[1] = initial.v_perp
    pos = 0
    done = 0
    while done < n_steps:
        z = gen.standard_normal(min(_CHUNK, n_steps - done))
        status, err_step, pos = _kernels.run_chain_chunk(
            table.arrays, istate, fstate, z, done, burn_in, thin, record,
            rec_disk, rec_theta, rec_vperp, rec_phi, rec_phi_in, rec_tau,
            rec_time, pos,
        )
        if status == _kernels.STATUS_NO_INTERSECTION:
            point = BoundaryPoint(int(istate[0]), float(fstate[0]))
            raise ChainStepError(err_step, NoIntersection(point, float("nan")))
        if status == _kernels.STATUS_UNDERFLOW:
            raise ChainStepError(err_step, VPerpUnderflow(f"at step {err_step}"))
        done += z.size

    n_stat = max(n_steps - burn_in, 0)
    stats = OnlineStats(
        count=n_stat,
        mean_v=fstate[4] / n_stat if n_stat else float("nan"),
        mean_v2=fstate[6] / n_stat if n_stat else float("nan"),
    )
    final = BoundaryState(BoundaryPoint(int(istate[0]), float(fstate[0])), float(fstate[1]))
    provenance["n_steps"] = n_steps
    return ChainTrajectory(
        disk_id=rec_disk[:pos],
        theta=rec_theta[:pos],
        v_perp=rec_vperp[:pos],
        phi=rec_phi[:pos],
        phi_in=rec_phi_in[:pos],
        tau=rec_tau[:pos],
        times=rec_time[:pos],
        n_steps=n_steps,
        recording=recording,
        stats=stats,
        final_state=final,
        provenance=provenance,
    )


# --- initial distributions -------------------------------------------------


@dataclass(frozen=True)
class InitialDistribution:
    """Initial-state law for ensembles.

    kind 'point': point mass at `state`.
    kind 'equilibrium': uniform arc-length position, v_perp with density
        2 beta v exp(-beta v^2) (requires `beta`).
    kind 'uniform_box': uniform arc-length position, v_perp uniform on
        [v_lo, v_hi] (the level-set box used for minorization).
    """

    kind: str
    state: BoundaryState | None = None
    beta: float | None = None
    v_lo: float | None = None
    v_hi: float | None = None

    def __post_init__(self):
        if self.kind == "point":
            if self.state is None:
                raise ValueError("point distribution requires a state")
        elif self.kind == "equilibrium":
            if self.beta is None or self.beta <= 0:
                raise ValueError("equilibrium distribution requires beta > 0")
        elif self.kind == "uniform_box":
            if self.v_lo is None or self.v_hi is None or not 0 < self.v_lo < self.v_hi:
                raise ValueError("uniform_box requires 0 < v_lo < v_hi")
        else:
            raise ValueError(f"unknown initial distribution kind {self.kind!r}")

    def draw_batch(
        self, table: ValidatedTable, n: int, rng: np.random.Generator
    ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(disk_ids, thetas, v_perps) for n independent draws."""
        if self.kind == "point":
            s = self.state
            return (
                np.full(n, s.point.disk_id, dtype=np.int64),
                np.full(n, s.point.theta),
                np.full(n, s.v_perp),
            )
        disks, thetas = _uniform_boundary(table, n, rng)
        if self.kind == "equilibrium":
            v = np.sqrt(-np.log1p(-rng.random(n)) / self.beta)
        else:
            v = self.v_lo + (self.v_hi - self.v_lo) * rng.random(n)
        return disks, thetas, v

    def draw(self, table: ValidatedTable, rng: np.random.Generator) -> BoundaryState:
        d, t, v = self.draw_batch(table, 1, rng)
        return BoundaryState(BoundaryPoint(int(d[0]), float(t[0])), float(v[0]))


def _uniform_boundary(table, n, rng):
    """Uniform in arc length over the whole boundary: disk prob ~ radius."""
    radii = table.radii
    probs = radii / radii.sum()
    disks = rng.choice(radii.size, size=n, p=probs).astype(np.int64)
    thetas = rng.random(n) * 2.0 * np.pi
    return disks, thetas


def equilibrium_distribution(table: ValidatedTable) -> InitialDistribution:
    """Equilibrium law for an equal-temperature table."""
    betas = table.betas
    if not np.all(betas == betas[0]):
        raise ValueError("equilibrium distribution requires equal betas")
    return InitialDistribution("equilibrium", beta=float(betas[0]))


# --- ensembles --------------------------------------------------------------


def chain_rng(master_seed: int, chain_id: int) -> np.random.Generator:
    """The documented per-chain stream: Philox keyed (master_seed, chain_id)."""
    key = np.array([master_seed, chain_id], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


@dataclass
class ChainFailure:
    chain_id: int
    seed_key: tuple[int, int]
    step: int
    message: str


@dataclass
class EnsembleSummary:
    """Merged view of n_chains independent chains.

    `merged_hist` accumulates every recorded v_perp; `slices[k]` is the
    v_perp histogram across chains after k steps (k = 0 is the initial draw)
    when slice recording is on.  Failed chains are listed, never dropped
    silently.  Identical for any worker count.
    """

    n_chains: int
    n_steps: int
    master_seed: int
    merged_hist: Histogram1D
    slices: list[Histogram1D] | None
    failures: list[ChainFailure]
    mean_v: float
    mean_v2: float

    @property
    def n_failed(self) -> int:
        return len(self.failures)


def _default_edges() -> np.ndarray:
    from .stats import default_vperp_edges

    return default_vperp_edges()


def run_ensemble(
    table: ValidatedTable,
    initial: InitialDistribution,
    n_chains: int,
    n_steps: int,
    master_seed: int,
    *,
    record_slices: bool = False,
    hist_edges: np.ndarray | None = None,
    n_workers: int = 1,
) -> EnsembleSummary:
    """Evolve n_chains independent chains with per-chain Philox streams.

    Each chain draws its initial state and all its angles from the generator
    keyed (master_seed, chain_id), so the summary is a pure function of
    (table, initial, n_chains, n_steps, master_seed) regardless of n_workers.
    """
    if n_chains < 1:
        raise ValueError("n_chains must be >= 1")
    edges = _default_edges() if hist_edges is None else np.asarray(hist_edges)

    def one_chain(cid: int):
        rng = chain_rng(master_seed, cid)
        state = initial.draw(table, rng)
        try:
            traj = run_chain(table, state, n_steps, rng)
        except ChainStepError as err:
            return cid, state, None, err
        return cid, state, traj, None

    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            results = list(pool.map(one_chain, range(n_chains)))
    else:
        results = [one_chain(cid) for cid in range(n_chains)]

    merged = Histogram1D(edges)
    slices = [Histogram1D(edges) for _ in range(n_steps + 1)] if record_slices else None
    failures: list[ChainFailure] = []
    ok_v0 = []
    ok_paths = []
    sum_v = 0.0
    sum_v2 = 0.0
    count = 0
    for cid, state0, traj, err in results:
        if err is not None:
            failures.append(
                ChainFailure(cid, (master_seed, cid), err.step, str(err.cause))
            )
            continue
        merged.add(traj.v_perp)
        if record_slices:
            ok_v0.append(state0.v_perp)
            ok_paths.append(traj.v_perp)
        sum_v += traj.stats.mean_v * traj.stats.count
        sum_v2 += traj.stats.mean_v2 * traj.stats.count
        count += traj.stats.count
    if slices is not None and ok_paths:
        paths = np.vstack(ok_paths)  # (n_ok, n_steps)
        slices[0].add(np.asarray(ok_v0))
        for k in range(n_steps):
            slices[k + 1].add(paths[:, k])
    return EnsembleSummary(
        n_chains=n_chains,
        n_steps=n_steps,
        master_seed=master_seed,
        merged_hist=merged,
        slices=slices,
        failures=failures,
        mean_v=sum_v / count if count else float("nan"),
        mean_v2=sum_v2 / count if count else float("nan"),
    )


def step_states_batch(
    table: ValidatedTable,
    disks: np.ndarray,
    thetas: np.ndarray,
    v_perps: np.ndarray,
    rng: np.random.Generator,
):
    """One chain step applied to a batch of independent states, in place.

    Returns (phi, phi_in, tau, status) arrays; status != 0 marks failed
    entries (their state is left unchanged).
    """
    n = disks.size
    z = rng.standard_normal(n)
    phi = np.empty(n)
    phi_in = np.empty(n)
    tau = np.empty(n)
    status = np.empty(n, dtype=np.int64)
    _kernels.step_batch(table.arrays, disks, thetas, v_perps, z, phi, phi_in, tau, status)
    return phi, phi_in, tau, status
