"""Configuration, deterministic seeding, commands, and result serialization.

Configs are JSON objects; parsing validates the whole document and reports
every problem at once (unknown keys with a suggestion, missing keys, type
mismatches, domain violations).  Every command writes its result files plus a
RunManifest that inventories them with content hashes; rerunning a command
with the same config byte-reproduces everything except the manifest's
wall-clock field.

CSV floats use 17 significant digits; JSON floats use Python's shortest
round-trip repr.  Both reproduce the exact double on read-back.
"""

from __future__ import annotations

import dataclasses
import difflib
import hashlib
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .chain import InitialDistribution, RecordingOptions, run_chain, run_ensemble
from .geometry import (
    BoundaryPoint,
    BoundaryState,
    DiskSpec,
    HorizonProbe,
    TableConfig,
    enhanced_jacobian,
    enhanced_step,
    flight,
    NearTangency,
    validate_table,
)
from .potential import (
    AsymptoticInput,
    CoeffInput,
    DriftGridSpec,
    PotentialParams,
    asymptotic_drop,
    cos_ratio_coeffs,
    verify_drift,
)
from .stats import WindowEmpty, check_equilibrium, estimate_mixing_tv

FLOAT_FMT = "%.17g"


@dataclass(frozen=True)
class ConfigIssue:
    kind: str  # unknown_key | missing_key | type_mismatch | domain_error
    path: str
    message: str

    def __str__(self):
        return f"{self.kind} at {self.path or '<root>'}: {self.message}"


class ConfigError(Exception):
    def __init__(self, issues: list[ConfigIssue]):
        self.issues = issues
        super().__init__(
            "invalid configuration:\n" + "\n".join(f"  - {i}" for i in issues)
        )


@dataclass(frozen=True)
class RunSettings:
    n_steps: int
    master_seed: int
    n_chains: int = 1
    burn_in: int = 0
    thinning: int = 1
    initial: InitialDistribution | None = None


@dataclass(frozen=True)
class MixingSettings:
    n_chains: int
    n_steps: int
    master_seed: int
    initial_a: InitialDistribution
    initial_b: InitialDistribution
    window_lo: float = 0.02
    window_hi: float = 0.5


@dataclass(frozen=True)
class JacobianSettings:
    n_det: int = 10_000
    n_fd: int = 1_000
    seed: int = 5
    fd_step: float = 1e-7
    det_tol: float = 1e-9
    fd_rel_tol: float = 1e-4


@dataclass(frozen=True)
class CoeffsSettings:
    n_random: int = 1_000
    seed: int = 9
    identity_tol: float = 1e-12
    flight_tol: float = 1e-9
    decay_factor: float = 0.75


@dataclass(frozen=True)
class ExperimentConfig:
    raw: dict
    table: TableConfig | None
    potential: PotentialParams | None
    run: RunSettings | None
    drift: DriftGridSpec | None
    mixing: MixingSettings | None
    jacobian: JacobianSettings
    coeffs: CoeffsSettings
    output_dir: str = "out"

    @property
    def config_hash(self) -> str:
        return hashlib.sha256(canonical_json(self.raw).encode()).hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


# --- schema-checked parsing ---------------------------------------------------


class _Ctx:
    def __init__(self):
        self.issues: list[ConfigIssue] = []

    def issue(self, kind, path, message):
        self.issues.append(ConfigIssue(kind, path, message))


def _check_keys(ctx: _Ctx, obj: dict, path: str, required: dict, optional: dict):
    allowed = set(required) | set(optional)
    for key in obj:
        if key not in allowed:
            hint = difflib.get_close_matches(key, sorted(allowed), n=1)
            extra = f" (did you mean {hint[0]!r}?)" if hint else ""
            ctx.issue("unknown_key", f"{path}.{key}" if path else key,
                      f"unknown key {key!r}{extra}")
    for key in required:
        if key not in obj:
            ctx.issue("missing_key", f"{path}.{key}" if path else key,
                      f"required key {key!r} is missing")


def _get(ctx: _Ctx, obj: dict, path: str, key: str, types, default=None):
    if key not in obj:
        return default
    val = obj[key]
    bad_bool = isinstance(val, bool) and types is not bool
    if types is float and isinstance(val, int) and not isinstance(val, bool):
        val = float(val)
    if bad_bool or not isinstance(val, types):
        ctx.issue("type_mismatch", f"{path}.{key}" if path else key,
                  f"expected {getattr(types, '__name__', types)}, got {type(obj[key]).__name__}")
        return default
    return val


def _parse_initial(ctx: _Ctx, obj, path: str, table: TableConfig | None):
    if obj is None:
        return None
    if not isinstance(obj, dict):
        ctx.issue("type_mismatch", path, "initial distribution must be an object")
        return None
    kind = _get(ctx, obj, path, "kind", str)
    if kind == "point":
        _check_keys(ctx, obj, path, {"kind": 0, "disk_id": 0, "theta": 0, "v_perp": 0}, {})
        disk = _get(ctx, obj, path, "disk_id", int, 0)
        theta = _get(ctx, obj, path, "theta", float, 0.0)
        v = _get(ctx, obj, path, "v_perp", float, 1.0)
        if v is not None and v <= 0:
            ctx.issue("domain_error", f"{path}.v_perp", "v_perp must be positive")
            return None
        if table is not None and disk is not None and not 0 <= disk < len(table.disks):
            ctx.issue("domain_error", f"{path}.disk_id",
                      f"disk_id {disk} out of range for {len(table.disks)} disks")
            return None
        return InitialDistribution(
            "point", state=BoundaryState(BoundaryPoint(disk, theta), v)
        )
    if kind == "equilibrium":
        _check_keys(ctx, obj, path, {"kind": 0}, {"beta": 0})
        beta = _get(ctx, obj, path, "beta", float)
        if beta is None:
            if table is None or not table.disks:
                ctx.issue("missing_key", f"{path}.beta", "beta required without a table")
                return None
            betas = {d.beta for d in table.disks}
            if len(betas) > 1:
                ctx.issue("domain_error", f"{path}.beta",
                          "beta required when table temperatures differ")
                return None
            beta = betas.pop()
        if beta <= 0:
            ctx.issue("domain_error", f"{path}.beta", "beta must be positive")
            return None
        return InitialDistribution("equilibrium", beta=beta)
    if kind == "uniform_box":
        _check_keys(ctx, obj, path, {"kind": 0, "v_lo": 0, "v_hi": 0}, {})
        v_lo = _get(ctx, obj, path, "v_lo", float)
        v_hi = _get(ctx, obj, path, "v_hi", float)
        if v_lo is None or v_hi is None or not 0 < v_lo < v_hi:
            ctx.issue("domain_error", path, "uniform_box requires 0 < v_lo < v_hi")
            return None
        return InitialDistribution("uniform_box", v_lo=v_lo, v_hi=v_hi)
    ctx.issue("domain_error", f"{path}.kind",
              f"unknown initial distribution kind {kind!r}; "
              "expected point | equilibrium | uniform_box")
    return None


def _parse_table(ctx: _Ctx, obj: dict, path: str) -> TableConfig | None:
    _check_keys(ctx, obj, path, {"disks": 0},
                {"period": 0, "image_cutoff": 0, "horizon_probe": 0})
    period = _get(ctx, obj, path, "period", float, 1.0)
    cutoff = _get(ctx, obj, path, "image_cutoff", float, 3.5)
    disks_raw = _get(ctx, obj, path, "disks", list, [])
    disks = []
    for i, d in enumerate(disks_raw or []):
        dpath = f"{path}.disks[{i}]"
        if not isinstance(d, dict):
            ctx.issue("type_mismatch", dpath, "disk must be an object")
            continue
        _check_keys(ctx, d, dpath, {"center": 0, "radius": 0, "beta": 0}, {})
        center = _get(ctx, d, dpath, "center", list)
        radius = _get(ctx, d, dpath, "radius", float)
        beta = _get(ctx, d, dpath, "beta", float)
        if center is not None and (
            len(center) != 2 or not all(isinstance(c, (int, float)) for c in center)
        ):
            ctx.issue("type_mismatch", f"{dpath}.center", "center must be [x, y]")
            center = None
        if None in (center, radius, beta):
            continue
        if radius <= 0:
            ctx.issue("domain_error", f"{dpath}.radius", "radius must be positive")
            continue
        if beta <= 0:
            ctx.issue("domain_error", f"{dpath}.beta", "beta must be positive")
            continue
        disks.append(DiskSpec((float(center[0]), float(center[1])), radius, beta))
    probe_obj = _get(ctx, obj, path, "horizon_probe", dict)
    probe = HorizonProbe()
    if probe_obj is not None:
        ppath = f"{path}.horizon_probe"
        _check_keys(ctx, probe_obj, ppath, {}, {"n_points": 0, "n_angles": 0, "tau_cap": 0})
        probe = HorizonProbe(
            n_points=_get(ctx, probe_obj, ppath, "n_points", int, 48),
            n_angles=_get(ctx, probe_obj, ppath, "n_angles", int, 64),
            tau_cap=_get(ctx, probe_obj, ppath, "tau_cap", float, 2.5),
        )
    if not disks:
        ctx.issue("domain_error", f"{path}.disks", "at least one disk is required")
        return None
    return TableConfig(period=period, disks=tuple(disks),
                       image_cutoff=cutoff, horizon_probe=probe)


def parse_config(text: str) -> ExperimentConfig:
    """Parse and validate a JSON config; raises ConfigError with *all* issues."""
    ctx = _Ctx()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as err:
        raise ConfigError([ConfigIssue("type_mismatch", "", f"not valid JSON: {err}")])
    if not isinstance(raw, dict):
        raise ConfigError([ConfigIssue("type_mismatch", "", "top level must be an object")])

    _check_keys(ctx, raw, "", {}, {
        "table": 0, "potential": 0, "run": 0, "drift": 0, "mixing": 0,
        "jacobian": 0, "coeffs": 0, "output": 0,
    })

    table_cfg = None
    tobj = _get(ctx, raw, "", "table", dict)
    if tobj is not None:
        table_cfg = _parse_table(ctx, tobj, "table")

    potential = None
    pobj = _get(ctx, raw, "", "potential", dict)
    if pobj is not None:
        _check_keys(ctx, pobj, "potential", {"epsilon": 0, "v_perp_max": 0}, {})
        eps = _get(ctx, pobj, "potential", "epsilon", float)
        vmax = _get(ctx, pobj, "potential", "v_perp_max", float)
        if eps is not None and vmax is not None:
            if table_cfg is not None and eps > 0:
                beta_min = min(d.beta for d in table_cfg.disks)
                if eps >= beta_min:
                    ctx.issue(
                        "domain_error", "potential.epsilon",
                        f"epsilon {eps:g} must be < beta_min {beta_min:g} "
                        "(the one-step expectation of V diverges otherwise)",
                    )
            try:
                potential = PotentialParams(epsilon=eps, v_perp_max=vmax)
            except ValueError as err:
                ctx.issue("domain_error", "potential", str(err))

    run = None
    robj = _get(ctx, raw, "", "run", dict)
    if robj is not None:
        _check_keys(ctx, robj, "run", {"n_steps": 0, "master_seed": 0},
                    {"n_chains": 0, "burn_in": 0, "thinning": 0, "initial": 0})
        n_steps = _get(ctx, robj, "run", "n_steps", int)
        seed = _get(ctx, robj, "run", "master_seed", int)
        if seed is not None and not 0 <= seed < 2**64:
            ctx.issue("domain_error", "run.master_seed",
                      "master_seed must be an unsigned 64-bit integer")
            seed = None
        if n_steps is not None and n_steps < 1:
            ctx.issue("domain_error", "run.n_steps", "n_steps must be >= 1")
            n_steps = None
        if n_steps is not None and seed is not None:
            run = RunSettings(
                n_steps=n_steps,
                master_seed=seed,
                n_chains=_get(ctx, robj, "run", "n_chains", int, 1),
                burn_in=_get(ctx, robj, "run", "burn_in", int, 0),
                thinning=_get(ctx, robj, "run", "thinning", int, 1),
                initial=_parse_initial(ctx, robj.get("initial"), "run.initial", table_cfg),
            )

    drift = None
    dobj = _get(ctx, raw, "", "drift", dict)
    if dobj is not None:
        _check_keys(ctx, dobj, "drift", {}, {
            "n_v": 0, "v_lo_factor": 0, "v_hi_factor": 0, "boundary_per_disk": 0,
            "densify_aligned": 0, "gamma_lo": 0, "gamma_hi": 0, "n_gamma": 0,
            "mc_samples": 0, "mc_seed": 0,
        })
        drift = DriftGridSpec(
            n_v=_get(ctx, dobj, "drift", "n_v", int, 40),
            v_lo_factor=_get(ctx, dobj, "drift", "v_lo_factor", float, 0.01),
            v_hi_factor=_get(ctx, dobj, "drift", "v_hi_factor", float, 10.0),
            boundary_per_disk=_get(ctx, dobj, "drift", "boundary_per_disk", int, 32),
            densify_aligned=_get(ctx, dobj, "drift", "densify_aligned", bool, True),
            gamma_lo=_get(ctx, dobj, "drift", "gamma_lo", float, 0.5),
            gamma_hi=_get(ctx, dobj, "drift", "gamma_hi", float, 0.995),
            n_gamma=_get(ctx, dobj, "drift", "n_gamma", int, 50),
            mc_samples=_get(ctx, dobj, "drift", "mc_samples", int, 2000),
            mc_seed=_get(ctx, dobj, "drift", "mc_seed", int, 77),
        )

    mixing = None
    mobj = _get(ctx, raw, "", "mixing", dict)
    if mobj is not None:
        _check_keys(ctx, mobj, "mixing",
                    {"n_chains": 0, "n_steps": 0, "master_seed": 0,
                     "initial_a": 0, "initial_b": 0},
                    {"window_lo": 0, "window_hi": 0})
        n_chains = _get(ctx, mobj, "mixing", "n_chains", int)
        n_steps = _get(ctx, mobj, "mixing", "n_steps", int)
        seed = _get(ctx, mobj, "mixing", "master_seed", int)
        ia = _parse_initial(ctx, mobj.get("initial_a"), "mixing.initial_a", table_cfg)
        ib = _parse_initial(ctx, mobj.get("initial_b"), "mixing.initial_b", table_cfg)
        if None not in (n_chains, n_steps, seed, ia, ib):
            mixing = MixingSettings(
                n_chains=n_chains, n_steps=n_steps, master_seed=seed,
                initial_a=ia, initial_b=ib,
                window_lo=_get(ctx, mobj, "mixing", "window_lo", float, 0.02),
                window_hi=_get(ctx, mobj, "mixing", "window_hi", float, 0.5),
            )

    jobj = _get(ctx, raw, "", "jacobian", dict) or {}
    if jobj:
        _check_keys(ctx, jobj, "jacobian", {}, {
            "n_det": 0, "n_fd": 0, "seed": 0, "fd_step": 0, "det_tol": 0, "fd_rel_tol": 0,
        })
    jacobian = JacobianSettings(
        n_det=_get(ctx, jobj, "jacobian", "n_det", int, 10_000),
        n_fd=_get(ctx, jobj, "jacobian", "n_fd", int, 1_000),
        seed=_get(ctx, jobj, "jacobian", "seed", int, 5),
        fd_step=_get(ctx, jobj, "jacobian", "fd_step", float, 1e-7),
        det_tol=_get(ctx, jobj, "jacobian", "det_tol", float, 1e-9),
        fd_rel_tol=_get(ctx, jobj, "jacobian", "fd_rel_tol", float, 1e-4),
    )

    cobj = _get(ctx, raw, "", "coeffs", dict) or {}
    if cobj:
        _check_keys(ctx, cobj, "coeffs", {}, {
            "n_random": 0, "seed": 0, "identity_tol": 0, "flight_tol": 0,
            "decay_factor": 0,
        })
    coeffs = CoeffsSettings(
        n_random=_get(ctx, cobj, "coeffs", "n_random", int, 1_000),
        seed=_get(ctx, cobj, "coeffs", "seed", int, 9),
        identity_tol=_get(ctx, cobj, "coeffs", "identity_tol", float, 1e-12),
        flight_tol=_get(ctx, cobj, "coeffs", "flight_tol", float, 1e-9),
        decay_factor=_get(ctx, cobj, "coeffs", "decay_factor", float, 0.75),
    )

    out_dir = "out"
    oobj = _get(ctx, raw, "", "output", dict)
    if oobj is not None:
        _check_keys(ctx, oobj, "output", {}, {"dir": 0})
        out_dir = _get(ctx, oobj, "output", "dir", str, "out")

    if ctx.issues:
        raise ConfigError(ctx.issues)
    return ExperimentConfig(
        raw=raw, table=table_cfg, potential=potential, run=run, drift=drift,
        mixing=mixing, jacobian=jacobian, coeffs=coeffs, output_dir=out_dir,
    )


def serialize_config(config: ExperimentConfig) -> str:
    """Round-trip inverse of parse_config (canonical key order)."""
    return json.dumps(config.raw, sort_keys=True, indent=2)


# --- output helpers ------------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, float):
        return FLOAT_FMT % value
    return str(value)


def write_csv(path: Path, header: list[str], rows) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(_fmt(v) for v in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int | None
    summary: dict
    files: dict = field(default_factory=dict)
    wall_clock_seconds: float = 0.0
    artifact_version: str = __version__

    def write(self, out_dir: Path) -> Path:
        path = out_dir / "manifest.json"
        payload = {
            "artifact_version": self.artifact_version,
            "command": self.command,
            "config_hash": self.config_hash,
            "seed": self.seed,
            "summary": self.summary,
            "files": dict(sorted(self.files.items())),
            "wall_clock_seconds": self.wall_clock_seconds,
        }
        path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n",
                        encoding="utf-8")
        return path


class CommandOutput:
    """Collects result files for one invocation and emits the manifest once."""

    def __init__(self, command: str, config: ExperimentConfig, out_dir: str | Path,
                 seed: int | None):
        self.command = command
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.manifest = RunManifest(command, config.config_hash, seed, {})
        self._t0 = time.monotonic()

    def add_file(self, name: str) -> None:
        self.manifest.files[name] = _sha256(self.out_dir / name)

    def write_json(self, name: str, payload: dict) -> None:
        path = self.out_dir / name
        path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n",
                        encoding="utf-8")
        self.add_file(name)

    def write_csv(self, name: str, header: list[str], rows) -> None:
        write_csv(self.out_dir / name, header, rows)
        self.add_file(name)

    def finish(self, summary: dict) -> Path:
        self.manifest.summary = summary
        self.manifest.wall_clock_seconds = time.monotonic() - self._t0
        return self.manifest.write(self.out_dir)


# --- commands -------------------------------------------------------------------

EXIT_PASS = 0
EXIT_FAIL = 1
EXIT_ERROR = 2


def _require(config: ExperimentConfig, *blocks: str):
    missing = [b for b in blocks if getattr(config, b) is None]
    if missing:
        raise ConfigError([
            ConfigIssue("missing_key", b, f"command requires the {b!r} block")
            for b in missing
        ])


def _effective_seed(settings_seed: int, override: int | None) -> int:
    return settings_seed if override is None else override


def _default_initial(config: ExperimentConfig) -> InitialDistribution:
    betas = {d.beta for d in config.table.disks}
    if len(betas) == 1:
        return InitialDistribution("equilibrium", beta=betas.pop())
    return InitialDistribution(
        "point", state=BoundaryState(BoundaryPoint(0, 0.0), 1.0)
    )


def cmd_simulate(config: ExperimentConfig, out_dir, seed_override=None, n_workers=1) -> int:
    """Run one chain (or an ensemble) and dump the trajectory / histogram."""
    _require(config, "table", "run")
    run = config.run
    seed = _effective_seed(run.master_seed, seed_override)
    table = validate_table(config.table)
    initial = run.initial or _default_initial(config)
    out = CommandOutput("simulate", config, out_dir, seed)
    if run.n_chains == 1:
        rng = np.random.Generator(np.random.Philox(key=np.array([seed, 0], dtype=np.uint64)))
        state = initial.draw(table, rng)
        traj = run_chain(
            table, state, run.n_steps, rng,
            RecordingOptions(mode="thinned", thin=run.thinning, burn_in=run.burn_in),
        )
        rows = zip(
            range(len(traj)), traj.disk_id, traj.theta, traj.v_perp,
            traj.phi, traj.phi_in, traj.tau, traj.times,
        )
        out.write_csv(
            "trajectory.csv",
            ["step", "disk_id", "theta", "v_perp", "phi", "phi_in", "tau", "t"],
            ([int(s), int(d), float(th), float(v), float(p), float(q), float(ta), float(t)]
             for s, d, th, v, p, q, ta, t in rows),
        )
        summary = {
            "n_steps": run.n_steps,
            "recorded": len(traj),
            "mean_v_perp": traj.stats.mean_v,
            "mean_v_perp_sq": traj.stats.mean_v2,
            "final_v_perp": traj.final_state.v_perp,
        }
    else:
        ens = run_ensemble(
            table, initial, run.n_chains, run.n_steps, seed, n_workers=n_workers
        )
        h = ens.merged_hist
        out.write_csv(
            "histogram.csv",
            ["edge_lo", "edge_hi", "count"],
            ([float(a), float(b), int(c)]
             for a, b, c in zip(h.edges[:-1], h.edges[1:], h.counts)),
        )
        summary = {
            "n_chains": run.n_chains,
            "n_steps": run.n_steps,
            "failed_chains": ens.n_failed,
            "mean_v_perp": ens.mean_v,
            "mean_v_perp_sq": ens.mean_v2,
            "hist_underflow": h.underflow,
            "hist_overflow": h.overflow,
        }
        if ens.n_failed:
            summary["failures"] = [
                {"chain": f.chain_id, "seed_key": list(f.seed_key),
                 "step": f.step, "message": f.message}
                for f in ens.failures
            ]
    out.finish(summary)
    return EXIT_PASS


def cmd_check_equilibrium(config, out_dir, seed_override=None, n_workers=1) -> int:
    _require(config, "table", "run")
    run = config.run
    seed = _effective_seed(run.master_seed, seed_override)
    table = validate_table(config.table)
    out = CommandOutput("check-equilibrium", config, out_dir, seed)
    verdict = check_equilibrium(
        table, run.n_steps, burn_in=run.burn_in, thin=run.thinning, seed=seed,
        initial=run.initial.state if run.initial and run.initial.kind == "point" else None,
    )
    summary = {
        "passed": verdict.passed,
        "alpha": verdict.alpha,
        "n_samples": verdict.n_samples,
        "ks_d": verdict.ks.d,
        "ks_p": verdict.ks.p_value,
        "ks_critical_1pct": verdict.ks.critical_value(0.01),
        "chi2_stat": verdict.chi2_stat,
        "chi2_p": verdict.chi2_p,
        "chi2_dof": verdict.chi2_dof,
        "mean_v_perp_sq": verdict.mean_v2,
        "mean_v_perp_sq_se": verdict.mean_v2_se,
        "mean_v_perp_sq_expected": verdict.mean_v2_expected,
        "moment_ok": verdict.moment_ok,
        "tau_int_v2": verdict.tau_int_v2,
    }
    out.write_json("equilibrium.json", summary)
    out.finish(summary)
    return EXIT_PASS if verdict.passed and verdict.moment_ok else EXIT_FAIL


def cmd_verify_drift(config, out_dir, seed_override=None, n_workers=1) -> int:
    _require(config, "table", "potential")
    table = validate_table(config.table)
    spec = config.drift or DriftGridSpec()
    if seed_override is not None:
        spec = dataclasses.replace(spec, mc_seed=seed_override)
    if n_workers != spec.n_workers:
        spec = dataclasses.replace(spec, n_workers=n_workers)
    out = CommandOutput("verify-drift", config, out_dir, spec.mc_seed)
    report = verify_drift(table, config.potential, spec)
    out.write_csv(
        "drift_grid.csv",
        ["disk_id", "theta", "v_perp", "V", "PV_quad", "PV_quad_err",
         "PV_mc", "PV_mc_err", "status"],
        ([r.disk_id, r.theta, r.v_perp, r.V, r.pv_quad, r.pv_quad_err,
          r.pv_mc, r.pv_mc_err, r.status] for r in report.rows),
    )
    out.write_csv(
        "feasibility.csv",
        ["gamma", "K", "S"],
        ([float(g), float(k),
          float(2.0 * k / (1.0 - g)) if g < 1 and k > 0 else math.nan]
         for g, k in zip(report.gamma_grid, report.k_curve)),
    )
    summary = {
        "feasible": report.feasible,
        "degenerate_gamma_grid": report.degenerate_gamma_grid,
        "gamma_star": report.gamma_star,
        "K_star": report.k_star,
        "S_star": report.s_star,
        "level_set_v_lo": report.level_set[0] if report.level_set else None,
        "level_set_v_hi": report.level_set[1] if report.level_set else None,
        "n_states": len(report.rows),
        "n_fail": report.n_fail,
        "n_ambiguous": report.n_ambiguous,
        "n_error": report.n_error,
        "ambiguous_frac": report.ambiguous_frac,
    }
    out.write_json("drift.json", summary)
    out.finish(summary)
    return EXIT_PASS if report.feasible else EXIT_FAIL


def cmd_estimate_mixing(config, out_dir, seed_override=None, n_workers=1) -> int:
    _require(config, "table", "mixing")
    mix = config.mixing
    seed = _effective_seed(mix.master_seed, seed_override)
    table = validate_table(config.table)
    out = CommandOutput("estimate-mixing", config, out_dir, seed)
    window = (mix.window_lo, mix.window_hi)
    try:
        est = estimate_mixing_tv(
            table, mix.initial_a, mix.initial_b, mix.n_chains, mix.n_steps,
            seed, window=window, n_workers=n_workers,
        )
    except WindowEmpty as err:
        out.write_csv("tv_curve.csv", ["n", "tv"],
                      ([int(n), float(t)] for n, t in zip(err.ns, err.tvs)))
        summary = {"passed": False, "window_empty": True,
                   "noise_floor": float(np.median(err.tvs[-max(len(err.tvs) // 4, 1):]))}
        out.write_json("fit.json", summary)
        out.finish(summary)
        return EXIT_FAIL
    out.write_csv("tv_curve.csv", ["n", "tv"],
                  ([int(n), float(t)] for n, t in zip(est.ns, est.values)))
    out.write_csv(
        "fit.csv",
        ["alpha_hat", "ci_lo", "ci_hi", "window"],
        [[est.alpha_hat, est.ci_lo, est.ci_hi, f"{window[0]:g}:{window[1]:g}"]],
    )
    summary = {
        "passed": est.rate_positive,
        "alpha_hat": est.alpha_hat,
        "ci_lo": est.ci_lo,
        "ci_hi": est.ci_hi,
        "gamma_tilde": est.gamma_tilde,
        "fit_points": est.window_size,
    }
    out.write_json("fit.json", summary)
    out.finish(summary)
    return EXIT_PASS if est.rate_positive else EXIT_FAIL


def _sample_nontangent_states(table, rng, margin=0.15):
    while True:
        disk = int(rng.integers(0, table.n_disks))
        theta = float(rng.uniform(0.0, 2.0 * math.pi))
        phi = float(rng.uniform(-math.pi / 2 + margin, math.pi / 2 - margin))
        v = float(np.exp(rng.uniform(np.log(0.1), np.log(10.0))))
        yield BoundaryState(BoundaryPoint(disk, theta), v), phi


def fd_jacobian(table, state, phi, h=1e-7):
    """Central finite differences of enhanced_step in (r, phi, v_perp).

    Returns None when any probe changes destination disk or grazes (the map
    is only piecewise smooth).
    """
    r0 = table.radii[state.point.disk_id]

    def f(dth, dph, dv):
        st = BoundaryState(
            BoundaryPoint(state.point.disk_id, state.point.theta + dth),
            state.v_perp + dv,
        )
        new, res = enhanced_step(table, st, phi + dph)
        if res.grazing:
            return None
        rp = table.radii[new.point.disk_id]
        return np.array([rp * new.point.theta, res.phi_in, new.v_perp]), new.point.disk_id, rp

    cols = []
    for dth, dph, dv in ((h / r0, 0.0, 0.0), (0.0, h, 0.0), (0.0, 0.0, h)):
        plus = f(dth, dph, dv)
        minus = f(-dth, -dph, -dv)
        if plus is None or minus is None or plus[1] != minus[1]:
            return None
        diff = plus[0] - minus[0]
        rp = plus[2]
        # unwrap the destination arc-length difference across the 0/2pi seam
        diff[0] = ((diff[0] / rp + math.pi) % (2.0 * math.pi) - math.pi) * rp
        cols.append(diff / (2.0 * h))
    return np.column_stack(cols)


def cmd_jacobian_check(config, out_dir, seed_override=None, n_workers=1) -> int:
    """Determinant and finite-difference validation of the enhanced Jacobian."""
    _require(config, "table")
    js = config.jacobian
    seed = _effective_seed(js.seed, seed_override)
    table = validate_table(config.table)
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 0], dtype=np.uint64)))
    sampler = _sample_nontangent_states(table, rng)
    out = CommandOutput("jacobian-check", config, out_dir, seed)

    max_det_err = 0.0
    n_det = 0
    while n_det < js.n_det:
        state, phi = next(sampler)
        try:
            jac = enhanced_jacobian(table, state, phi)
        except NearTangency:
            continue
        max_det_err = max(max_det_err, abs(jac.det + 1.0))
        n_det += 1

    max_fd_err = 0.0
    n_fd = 0
    while n_fd < js.n_fd:
        state, phi = next(sampler)
        try:
            jac = enhanced_jacobian(table, state, phi)
        except NearTangency:
            continue
        fd = fd_jacobian(table, state, phi, js.fd_step)
        if fd is None:
            continue
        scale = np.maximum(np.abs(jac.matrix), 1e-9)
        max_fd_err = max(max_fd_err, float(np.max(np.abs(fd - jac.matrix) / scale)))
        n_fd += 1

    passed = max_det_err <= js.det_tol and max_fd_err <= js.fd_rel_tol
    summary = {
        "passed": bool(passed),
        "n_det_states": n_det,
        "max_abs_det_plus_1": max_det_err,
        "det_tol": js.det_tol,
        "n_fd_states": n_fd,
        "max_fd_rel_err": max_fd_err,
        "fd_rel_tol": js.fd_rel_tol,
    }
    out.write_json("jacobian.json", summary)
    out.finish(summary)
    return EXIT_PASS if passed else EXIT_FAIL


def _aligned_pair_table(r_src: float, r_dst: float, gap: float):
    """Two disks aligned along +x on a torus large enough to isolate them.

    An isolated pair has an unbounded horizon by construction, so the table
    skips the probe certificate; flights used by the oracles stay between the
    two disks well inside the image cutoff.
    """
    from .geometry import ValidatedTable, _build_arrays

    period = 8.0 * (r_src + r_dst + gap)
    cfg = TableConfig(
        period=period,
        disks=(
            DiskSpec((0.0, 0.0), r_src, 1.0),
            DiskSpec((r_src + gap + r_dst, 0.0), r_dst, 1.0),
        ),
        image_cutoff=0.45 * period,
        horizon_probe=HorizonProbe(n_points=4, n_angles=4, tau_cap=0.4 * period),
    )
    return ValidatedTable(cfg, _build_arrays(cfg), gap, 0.4 * period)


def cmd_coeffs_check(config, out_dir, seed_override=None, n_workers=1) -> int:
    """Closed-form oracle suites: cos^2-ratio quadratic and asymptotic drop."""
    cs = config.coeffs
    seed = _effective_seed(cs.seed, seed_override)
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 0], dtype=np.uint64)))
    out = CommandOutput("coeffs-check", config, out_dir, seed)

    max_identity_err = 0.0
    for _ in range(cs.n_random):
        inp = CoeffInput(
            tau0=float(np.exp(rng.uniform(np.log(0.05), np.log(20.0)))),
            R=float(np.exp(rng.uniform(np.log(0.05), np.log(5.0)))),
            w0=float(rng.uniform(-10.0, 10.0)),
        )
        a, b, c = cos_ratio_coeffs(inp)
        max_identity_err = max(
            max_identity_err, abs(math.sqrt(b * b - a * c) - inp.tau0 / inp.R)
        )

    # quadratic vs direct two-disk flight
    table = _aligned_pair_table(0.5, 0.8, 1.3)
    src = BoundaryPoint(0, 0.3)
    max_flight_err = _quadratic_vs_flight(table, src, samples=60)

    # asymptotic drop decay on the aligned pair
    decay_ok, ratios = _drop_decay(table, y=0.7, v_t=0.4, factor=cs.decay_factor)

    passed = (
        max_identity_err <= cs.identity_tol
        and max_flight_err <= cs.flight_tol
        and decay_ok
    )
    summary = {
        "passed": bool(passed),
        "n_random": cs.n_random,
        "max_identity_err": max_identity_err,
        "identity_tol": cs.identity_tol,
        "max_flight_err": max_flight_err,
        "flight_tol": cs.flight_tol,
        "drop_error_ratios": ratios,
        "decay_factor": cs.decay_factor,
    }
    out.write_json("coeffs.json", summary)
    out.finish(summary)
    return EXIT_PASS if passed else EXIT_FAIL


def _quadratic_vs_flight(table, src: BoundaryPoint, samples: int) -> float:
    """Max |a w^2 - 2 b w + c  -  cos^2(phi')/cos^2(phi)| over the hit interval."""
    cfg = table.config
    r_src = cfg.disks[src.disk_id].radius
    cx, cy = cfg.disks[src.disk_id].center
    x0 = cx + r_src * math.cos(src.theta)
    y0 = cy + r_src * math.sin(src.theta)
    tx, ty = cfg.disks[1].center
    r_t = cfg.disks[1].radius
    dist = math.hypot(tx - x0, ty - y0)
    alpha = math.atan2(ty - y0, tx - x0)
    sigma = math.asin(r_t / dist)
    tau0 = math.sqrt(dist * dist - r_t * r_t)
    phi_lo = alpha - sigma - src.theta
    phi_hi = alpha + sigma - src.theta
    a, b, c = cos_ratio_coeffs(CoeffInput(tau0=tau0, R=r_t, w0=math.tan(phi_lo)))
    worst = 0.0
    for frac in np.linspace(0.02, 0.98, samples):
        phi = phi_lo + frac * (phi_hi - phi_lo)
        res = flight(table, src, phi)
        if res.dest.disk_id != 1:
            continue
        w = math.tan(phi)
        qval = a * w * w - 2.0 * b * w + c
        direct = math.cos(res.phi_in) ** 2 / math.cos(phi) ** 2
        worst = max(worst, abs(qval - direct))
    return worst


def _drop_decay(table, y: float, v_t: float, factor: float,
                v_list=(10.0, 20.0, 40.0, 80.0)):
    """Errors |((v')^2 - v^2) - Q| along doubling v_perp, and their ratios."""
    cfg = table.config
    r_k = cfg.disks[0].radius
    r_kp = cfg.disks[1].radius
    gap = (
        math.hypot(
            cfg.disks[1].center[0] - cfg.disks[0].center[0],
            cfg.disks[1].center[1] - cfg.disks[0].center[1],
        )
        - r_k - r_kp
    )
    limit = asymptotic_drop(AsymptoticInput(y=y, v_t=v_t, R_k=r_k, R_k_prime=r_kp, d=gap))
    errs = []
    for v in v_list:
        theta = y / v  # r = y * R_k / v, theta = r / R_k
        phi = math.atan2(v_t, v)
        state = BoundaryState(BoundaryPoint(0, theta), v)
        new, _ = enhanced_step(table, state, phi)
        errs.append(abs((new.v_perp**2 - v * v) - limit))
    ratios = [errs[i + 1] / errs[i] if errs[i] > 0 else 0.0 for i in range(len(errs) - 1)]
    ok = all(r <= factor for r in ratios[-2:])
    return ok, ratios


COMMANDS = {
    "simulate": cmd_simulate,
    "check-equilibrium": cmd_check_equilibrium,
    "verify-drift": cmd_verify_drift,
    "estimate-mixing": cmd_estimate_mixing,
    "jacobian-check": cmd_jacobian_check,
    "coeffs-check": cmd_coeffs_check,
}
