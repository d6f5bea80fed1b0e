"""Billiard geometry on the flat torus with periodic disk obstacles.

The table is the torus [0, period)^2 minus a finite set of disjoint open
disks.  Particles fly in straight lines between collisions; flights are
resolved exactly on the lifted plane against a precomputed, immutable list of
periodic disk images.

Angle conventions (fixed once, used everywhere):

* ``theta`` is the standard polar angle of a boundary point on its disk,
  canonicalized to [0, 2*pi); the arc-length coordinate is ``r = R * theta``
  and increases counterclockwise.
* ``phi`` (outgoing) and ``phi_in`` (incidence) are both measured from the
  outward normal at their respective points, counterclockwise positive.  At
  the destination the *reversed* incoming direction is used, so that
  ``theta' + phi_in = theta + phi + pi (mod 2*pi)``.

With these conventions the derivative of the enhanced map
``(r, phi, v_perp) -> (r', phi_in, v_perp')`` has determinant exactly -1, and
re-flying from the destination with angle ``+phi_in`` retraces the flight.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from ._kernels import STATUS_NO_INTERSECTION, STATUS_UNDERFLOW, VPERP_FLOOR, TableArrays

TWO_PI = 2.0 * math.pi

#: |phi| or |phi_in| closer than this to pi/2 makes the Jacobian entries blow up.
NEAR_TANGENT_TOL = 1e-6


class GeometryError(Exception):
    """Base class for geometry failures."""


class DegenerateRadius(GeometryError):
    pass


class OverlappingDisks(GeometryError):
    def __init__(self, i: int, j: int, distance: float, min_distance: float):
        self.pair = (i, j)
        self.distance = distance
        self.min_distance = min_distance
        super().__init__(
            f"disks {i} and {j} overlap across periodic images: toroidal center "
            f"distance {distance:.6g} <= {min_distance:.6g}"
        )


class HorizonUnbounded(GeometryError):
    def __init__(self, witness: "BoundaryRay", tau: float, tau_cap: float):
        self.witness = witness
        self.tau = tau
        self.tau_cap = tau_cap
        if tau < 0:
            detail = "left the image cutoff without a hit"
        else:
            detail = f"flew {tau:.6g} > tau_cap {tau_cap:.6g}"
        super().__init__(f"horizon probe failed: ray {witness} {detail}")


class NoIntersection(GeometryError):
    def __init__(self, point: "BoundaryPoint", phi: float):
        self.point = point
        self.phi = phi
        super().__init__(
            f"flight from {point} at phi={phi:.6g} left the image cutoff; "
            "the table horizon is not bounded"
        )


class NearTangency(GeometryError):
    pass


class VPerpUnderflow(GeometryError):
    pass


@dataclass(frozen=True)
class DiskSpec:
    """A circular thermostat: center in [0, period)^2, radius, inverse temperature."""

    center: tuple[float, float]
    radius: float
    beta: float


@dataclass(frozen=True)
class HorizonProbe:
    """Probe-grid resolution for the bounded-horizon certificate."""

    n_points: int = 48
    n_angles: int = 64
    tau_cap: float = 2.5


@dataclass(frozen=True)
class TableConfig:
    period: float = 1.0
    disks: tuple[DiskSpec, ...] = ()
    image_cutoff: float = 3.5
    horizon_probe: HorizonProbe = field(default_factory=HorizonProbe)


@dataclass(frozen=True)
class BoundaryPoint:
    """A point of the boundary: disk index plus angular position."""

    disk_id: int
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "theta", float(self.theta) % TWO_PI)

    def arc_length(self, table: "ValidatedTable") -> float:
        return table.config.disks[self.disk_id].radius * self.theta


@dataclass(frozen=True)
class BoundaryState:
    """A point of the chain's phase space: boundary point plus normal speed."""

    point: BoundaryPoint
    v_perp: float

    def __post_init__(self):
        v = self.v_perp
        if not (v > 0.0 and math.isfinite(v)):
            raise ValueError(f"v_perp must be positive and finite, got {v!r}")


@dataclass(frozen=True)
class BoundaryRay:
    disk_id: int
    theta: float
    phi: float

    def __str__(self):
        return f"(disk {self.disk_id}, theta={self.theta:.6g}, phi={self.phi:.6g})"


@dataclass(frozen=True)
class FlightResult:
    """Destination of a free flight: boundary point, incidence angle, length."""

    dest: BoundaryPoint
    phi_in: float
    tau: float
    grazing: bool = False


@dataclass(frozen=True)
class JacobianMatrix:
    """3x3 derivative of the enhanced map, rows (r', phi', v_perp')."""

    matrix: np.ndarray
    kappa: float
    kappa_prime: float

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.matrix))


class ValidatedTable:
    """An immutable table with verified disjointness and a horizon certificate.

    Construction happens in :func:`validate_table`; instances are safe to share
    across threads (all arrays are read-only).
    """

    def __init__(self, config: TableConfig, arrays: TableArrays, tau_min: float, tau_max: float):
        self.config = config
        self.arrays = arrays
        self.tau_min = tau_min
        self.tau_max = tau_max

    @property
    def n_disks(self) -> int:
        return len(self.config.disks)

    @property
    def radii(self) -> np.ndarray:
        return self.arrays.dr

    @property
    def betas(self) -> np.ndarray:
        return self.arrays.dbeta

    @property
    def boundary_length(self) -> float:
        return float(TWO_PI * self.arrays.dr.sum())

    def beta_of(self, disk_id: int) -> float:
        return float(self.arrays.dbeta[disk_id])

    def __repr__(self):
        return (
            f"ValidatedTable(p={self.n_disks}, period={self.config.period}, "
            f"tau=[{self.tau_min:.4g}, {self.tau_max:.4g}])"
        )


def _toroidal_center_distance(a, b, period: float) -> float:
    dx = abs(a[0] - b[0]) % period
    dy = abs(a[1] - b[1]) % period
    dx = min(dx, period - dx)
    dy = min(dy, period - dy)
    return math.hypot(dx, dy)


def _build_arrays(config: TableConfig) -> TableArrays:
    period = config.period
    disks = config.disks
    r_max = max(d.radius for d in disks)
    reach = config.image_cutoff + r_max
    m = int(math.ceil(reach / period)) + 1
    cx = np.array([d.center[0] % period for d in disks])
    cy = np.array([d.center[1] % period for d in disks])
    offs = np.arange(-m, m + 1) * period
    ox, oy = np.meshgrid(offs, offs, indexing="ij")
    icx = (cx[:, None] + ox.ravel()[None, :]).ravel()
    icy = (cy[:, None] + oy.ravel()[None, :]).ravel()
    n_img = offs.size * offs.size
    ir = np.repeat([d.radius for d in disks], n_img).astype(np.float64)
    idid = np.repeat(np.arange(len(disks), dtype=np.int64), n_img)
    # Keep only images reachable from some source point in the fundamental cell.
    half = 0.5 * period
    keep = np.hypot(icx - half, icy - half) <= reach + half * math.sqrt(2.0) + 1e-9
    arrays = TableArrays(
        icx=np.ascontiguousarray(icx[keep]),
        icy=np.ascontiguousarray(icy[keep]),
        ir=np.ascontiguousarray(ir[keep]),
        idid=np.ascontiguousarray(idid[keep]),
        dcx=cx,
        dcy=cy,
        dr=np.array([d.radius for d in disks]),
        dbeta=np.array([d.beta for d in disks]),
        period=period,
        tmin=1e-12 * period,
        cutoff=config.image_cutoff,
        graze_tol=1e-14,
    )
    for a in arrays[:8]:
        a.setflags(write=False)
    return arrays


def validate_table(config: TableConfig) -> ValidatedTable:
    """Check disjointness and run the probabilistic bounded-horizon probe.

    The probe is a certificate, not a proof: n_points boundary points times
    n_angles outgoing directions per disk must all resolve within tau_cap.
    Empirical tau_min / tau_max estimates from the probe are recorded on the
    returned table.
    """
    disks = config.disks
    if len(disks) < 1:
        raise ValueError("at least one disk is required")
    if not (config.period > 0 and math.isfinite(config.period)):
        raise ValueError(f"period must be positive, got {config.period!r}")
    for i, d in enumerate(disks):
        if not (d.radius > 0 and math.isfinite(d.radius)):
            raise DegenerateRadius(f"disk {i}: radius {d.radius!r} must be positive")
        if 2.0 * d.radius >= config.period:
            raise DegenerateRadius(
                f"disk {i}: diameter {2 * d.radius:.6g} must be < period {config.period:.6g}"
            )
        if not (d.beta > 0 and math.isfinite(d.beta)):
            raise ValueError(f"disk {i}: beta {d.beta!r} must be positive")
    probe = config.horizon_probe
    r_max = max(d.radius for d in disks)
    if config.image_cutoff < probe.tau_cap + 2.0 * r_max:
        raise ValueError(
            f"image_cutoff {config.image_cutoff:.6g} must be >= tau_cap + 2*max_radius "
            f"= {probe.tau_cap + 2 * r_max:.6g}"
        )

    for i in range(len(disks)):
        for j in range(i + 1, len(disks)):
            dist = _toroidal_center_distance(disks[i].center, disks[j].center, config.period)
            min_dist = disks[i].radius + disks[j].radius
            if dist <= min_dist:
                raise OverlappingDisks(i, j, dist, min_dist)

    arrays = _build_arrays(config)
    ok, tau_min, tau_max, w_disk, w_theta, w_phi, w_tau = _kernels.probe_horizon(
        arrays, probe.n_points, probe.n_angles, probe.tau_cap
    )
    if not ok:
        raise HorizonUnbounded(BoundaryRay(int(w_disk), float(w_theta), float(w_phi)),
                               float(w_tau), probe.tau_cap)
    return ValidatedTable(config, arrays, float(tau_min), float(tau_max))


def flight(table: ValidatedTable, point: BoundaryPoint, phi_out: float) -> FlightResult:
    """Resolve the free flight leaving `point` at angle `phi_out`."""
    if not abs(phi_out) < math.pi / 2:
        raise ValueError(f"|phi_out| must be < pi/2, got {phi_out!r}")
    j, theta_d, phi_in, tau, graze = _kernels.flight_scalar(
        table.arrays, point.disk_id, point.theta, phi_out
    )
    if j < 0:
        raise NoIntersection(point, phi_out)
    dest = BoundaryPoint(int(table.arrays.idid[j]), float(theta_d))
    return FlightResult(dest, float(phi_in), float(tau), bool(graze))


def enhanced_step(
    table: ValidatedTable, state: BoundaryState, phi_out: float
) -> tuple[BoundaryState, FlightResult]:
    """Flight plus the normal-velocity update v' = cos(phi') / cos(phi) * v."""
    result = flight(table, state.point, phi_out)
    v_new = math.cos(result.phi_in) / math.cos(phi_out) * state.v_perp
    if v_new < VPERP_FLOOR:
        raise VPerpUnderflow(
            f"new v_perp {v_new!r} underflowed (from v_perp={state.v_perp!r}, "
            f"phi={phi_out!r}, phi_in={result.phi_in!r})"
        )
    return BoundaryState(result.dest, v_new), result


def enhanced_jacobian(
    table: ValidatedTable, state: BoundaryState, phi_out: float
) -> JacobianMatrix:
    """Derivative of the enhanced map at (state, phi_out).

    Rows are (dr', dphi', dv_perp') by columns (dr, dphi, dv_perp), with r the
    arc-length coordinate at the source and r' at the destination:

        [ -(tau*k + c) / c'                   -tau / c'              0        ]
        [ (tau*k*k' + k*c' + k'*c) / c'       (tau*k' + c') / c'     0        ]
        [ -s' * J21 * v / c                   (-s'*J22*c + c'*s)*v/c^2  c'/c  ]

    where c = cos(phi), c' = cos(phi_in), k = 1/R, k' = 1/R'.  The determinant
    is exactly -1 (the cos(phi)/cos(phi') billiard factor cancels against the
    velocity update).  Refuses near-tangent flights, where entries blow up.
    """
    result = flight(table, state.point, phi_out)
    half_pi = math.pi / 2
    if (
        result.grazing
        or half_pi - abs(result.phi_in) < NEAR_TANGENT_TOL
        or half_pi - abs(phi_out) < NEAR_TANGENT_TOL
    ):
        raise NearTangency(
            f"phi={phi_out:.9g}, phi_in={result.phi_in:.9g} too close to +-pi/2"
        )
    kappa = 1.0 / table.arrays.dr[state.point.disk_id]
    kappa_p = 1.0 / table.arrays.dr[result.dest.disk_id]
    tau = result.tau
    c, s = math.cos(phi_out), math.sin(phi_out)
    cp, sp = math.cos(result.phi_in), math.sin(result.phi_in)
    j11 = -(tau * kappa + c) / cp
    j12 = -tau / cp
    j21 = (tau * kappa * kappa_p + kappa * cp + kappa_p * c) / cp
    j22 = (tau * kappa_p + cp) / cp
    v = state.v_perp
    j31 = -sp * j21 * v / c
    j32 = (-sp * j22 * c + cp * s) * v / (c * c)
    j33 = cp / c
    m = np.array([[j11, j12, 0.0], [j21, j22, 0.0], [j31, j32, j33]])
    return JacobianMatrix(m, float(kappa), float(kappa_p))


def two_step_jacobian(
    table: ValidatedTable,
    point: BoundaryPoint,
    phi1: float,
    phi2: float,
    v_perp: float,
) -> float:
    """The scale-free two-rebound determinant J(r, phi1, phi2).

    J = det [[dr''/dphi1, dr''/dphi2], [dv''/dphi1, dv''/dphi2]] / v_perp via
    the chain rule on two enhanced Jacobians (phi2 is drawn fresh at the
    intermediate collision, so only the r' and v' sensitivities propagate).
    Independent of v_perp; zero exactly on retrace paths.
    """
    state = BoundaryState(point, v_perp)
    m1 = enhanced_jacobian(table, state, phi1).matrix
    mid, _ = enhanced_step(table, state, phi1)
    m2 = enhanced_jacobian(table, mid, phi2).matrix
    dr2_dp1 = m2[0, 0] * m1[0, 1]
    dv2_dp1 = m2[2, 0] * m1[0, 1] + m2[2, 2] * m1[2, 1]
    dr2_dp2 = m2[0, 1]
    dv2_dp2 = m2[2, 1]
    return float((dr2_dp1 * dv2_dp2 - dr2_dp2 * dv2_dp1) / v_perp)


def aligned_boundary_angles(table: ValidatedTable, disk_id: int) -> np.ndarray:
    """Boundary angles on disk_id whose outward normal flies straight into
    another disk's normal (phi = 0 gives phi_in ~ 0).

    These are the troublesome locations for the large-velocity drift: a
    normal shot there keeps v_perp unchanged.  Found by shooting the normal
    ray toward every visible image center and keeping the unobstructed ones.
    """
    arr = table.arrays
    cx = arr.dcx[disk_id]
    cy = arr.dcy[disk_id]
    angles = []
    for j in range(arr.icx.shape[0]):
        dx = arr.icx[j] - cx
        dy = arr.icy[j] - cy
        dist = math.hypot(dx, dy)
        if dist < arr.tmin or dist > arr.cutoff:
            continue
        theta = math.atan2(dy, dx) % TWO_PI
        fr = flight(table, BoundaryPoint(disk_id, theta), 0.0)
        if abs(fr.phi_in) < 1e-9:
            angles.append(theta)
    return np.unique(np.round(np.asarray(sorted(angles)), 12))
