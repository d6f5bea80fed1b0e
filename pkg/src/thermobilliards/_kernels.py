"""Numba kernels for the hot paths: ray-disk first hits and chain stepping.

Everything here works on the flat image arrays carried by a validated table
(see :mod:`thermobilliards.geometry`).  The kernels are deliberately scalar
and loop-based; numba compiles them to ~1 us per collision, which is what
makes 1e7-step runs practical.

Status codes shared by the stepping kernels:

* 0 -- ok
* 1 -- no intersection within the image cutoff (horizon violation)
* 2 -- v_perp underflow (below the smallest positive normal double)
"""

from __future__ import annotations

from collections import namedtuple

import numpy as np
from numba import njit

# Smallest positive normal double; new normal velocities below this are an error.
VPERP_FLOOR = np.finfo(np.float64).tiny

TWO_PI = 2.0 * np.pi

# Flat, immutable description of a validated table, shared by all kernels.
#   icx, icy, ir : image centers and radii (one entry per periodic disk image)
#   idid         : disk id of each image
#   dcx, dcy, dr, dbeta : per-disk center, radius, inverse temperature
#   tmin         : self-intersection exclusion (1e-12 * period)
#   cutoff       : image cutoff radius; flights beyond it are an error
#   graze_tol    : discriminant threshold factor for tangent grazing
TableArrays = namedtuple(
    "TableArrays",
    "icx icy ir idid dcx dcy dr dbeta period tmin cutoff graze_tol",
)

STATUS_OK = 0
STATUS_NO_INTERSECTION = 1
STATUS_UNDERFLOW = 2


@njit(cache=True, nogil=True)
def flight_scalar(tab, disk, theta, phi):
    """First hit of the ray leaving (disk, theta) at angle phi from the normal.

    Returns (image_index, theta_dest, phi_in, tau, graze); image_index is -1
    when no image is hit within the cutoff.  phi_in follows the convention
    theta' + phi_in = theta + phi + pi (both angles ccw from the outward
    normal, the reversed incoming ray at the destination).
    """
    r0 = tab.dr[disk]
    x0 = tab.dcx[disk] + r0 * np.cos(theta)
    y0 = tab.dcy[disk] + r0 * np.sin(theta)
    psi = theta + phi
    dx = np.cos(psi)
    dy = np.sin(psi)

    best_t = np.inf
    best_j = -1
    best_disc = 0.0
    best_rr = 0.0
    for j in range(tab.icx.shape[0]):
        mx = tab.icx[j] - x0
        my = tab.icy[j] - y0
        b = dx * mx + dy * my
        if b <= tab.tmin:
            # Image center behind the ray: no forward entry hit is possible
            # because the source lies outside every other disk.
            continue
        rr = tab.ir[j]
        disc = b * b - (mx * mx + my * my - rr * rr)
        if disc < 0.0:
            continue
        t = b - np.sqrt(disc)
        if t <= tab.tmin or t >= best_t:
            continue
        best_t = t
        best_j = j
        best_disc = disc
        best_rr = rr

    if best_j < 0 or best_t > tab.cutoff:
        return -1, 0.0, 0.0, 0.0, False

    hx = x0 + best_t * dx - tab.icx[best_j]
    hy = y0 + best_t * dy - tab.icy[best_j]
    theta_d = np.arctan2(hy, hx)
    if theta_d < 0.0:
        theta_d += TWO_PI
    phi_in = (psi + np.pi - theta_d + np.pi) % TWO_PI - np.pi
    graze = best_disc < tab.graze_tol * best_rr * best_rr
    return best_j, theta_d, phi_in, best_t, graze


@njit(cache=True, nogil=True)
def step_scalar(tab, disk, theta, vperp, z):
    """One collision: angle from the standard normal draw z, then a flight.

    v_t = z / sqrt(2 beta_disk), phi = atan2(v_t, vperp), and the new normal
    velocity is cos(phi') / cos(phi) * vperp.
    """
    beta = tab.dbeta[disk]
    vt = z / np.sqrt(2.0 * beta)
    phi = np.arctan2(vt, vperp)
    j, theta_d, phi_in, tau, graze = flight_scalar(tab, disk, theta, phi)
    if j < 0:
        return STATUS_NO_INTERSECTION, disk, theta, vperp, phi, 0.0, 0.0, False
    vnew = np.cos(phi_in) / np.cos(phi) * vperp
    if vnew < VPERP_FLOOR:
        return STATUS_UNDERFLOW, disk, theta, vperp, phi, phi_in, tau, graze
    return STATUS_OK, tab.idid[j], theta_d, vnew, phi, phi_in, tau, graze


@njit(cache=True, nogil=True)
def run_chain_chunk(
    tab,
    istate,
    fstate,
    z,
    step0,
    burn_in,
    thin,
    record,
    rec_disk,
    rec_theta,
    rec_vperp,
    rec_phi,
    rec_phi_in,
    rec_tau,
    rec_time,
    rec_pos,
):
    """Advance the chain by len(z) steps, recording and accumulating online stats.

    istate = [disk]; fstate = [theta, vperp, time, time_c, sum_v, sum_v_c,
    sum_v2, sum_v2_c] with Kahan compensation slots.  Global step index of
    z[0] is step0; steps with index >= burn_in feed the online sums, and every
    thin-th of those is written to the record arrays when record is True.
    Returns (status, failing_step, new_rec_pos).
    """
    disk = istate[0]
    theta = fstate[0]
    vperp = fstate[1]
    pos = rec_pos
    for n in range(z.shape[0]):
        v_pre = vperp
        status, disk, theta, vperp, phi, phi_in, tau, graze = step_scalar(
            tab, disk, theta, vperp, z[n]
        )
        if status != STATUS_OK:
            istate[0] = disk
            fstate[0] = theta
            fstate[1] = vperp
            return status, step0 + n, pos
        # flight duration: tau over the speed v_pre / cos(phi)
        dt = tau * np.cos(phi) / v_pre
        s = step0 + n
        y = dt - fstate[3]
        t = fstate[2] + y
        fstate[3] = (t - fstate[2]) - y
        fstate[2] = t
        if s >= burn_in:
            y = vperp - fstate[5]
            t = fstate[4] + y
            fstate[5] = (t - fstate[4]) - y
            fstate[4] = t
            y = vperp * vperp - fstate[7]
            t = fstate[6] + y
            fstate[7] = (t - fstate[6]) - y
            fstate[6] = t
            if record and (s - burn_in) % thin == 0:
                rec_disk[pos] = disk
                rec_theta[pos] = theta
                rec_vperp[pos] = vperp
                rec_phi[pos] = phi
                rec_phi_in[pos] = phi_in
                rec_tau[pos] = tau
                rec_time[pos] = fstate[2]
                pos += 1
    istate[0] = disk
    fstate[0] = theta
    fstate[1] = vperp
    return STATUS_OK, -1, pos


@njit(cache=True, nogil=True)
def step_batch(tab, disks, thetas, vperps, z, out_phi, out_phi_in, out_tau, out_status):
    """One chain step for each of n independent states, in place."""
    for i in range(disks.shape[0]):
        status, disk, theta, vperp, phi, phi_in, tau, graze = step_scalar(
            tab, disks[i], thetas[i], vperps[i], z[i]
        )
        out_status[i] = status
        out_phi[i] = phi
        out_phi_in[i] = phi_in
        out_tau[i] = tau
        if status == STATUS_OK:
            disks[i] = disk
            thetas[i] = theta
            vperps[i] = vperp


@njit(cache=True, nogil=True)
def scan_destinations(tab, disk, theta, vperp, vts, out_img, out_vp, out_graze):
    """Destination image and new v_perp for a sweep of tangential velocities.

    Used by the quadrature breakpoint scan: out_img[i] identifies the branch
    (periodic image, not just disk id) hit at v_t = vts[i]; -1 marks a miss.
    """
    for i in range(vts.shape[0]):
        phi = np.arctan2(vts[i], vperp)
        j, theta_d, phi_in, tau, graze = flight_scalar(tab, disk, theta, phi)
        out_img[i] = j
        out_graze[i] = graze
        if j >= 0:
            out_vp[i] = np.cos(phi_in) / np.cos(phi) * vperp
        else:
            out_vp[i] = np.nan


@njit(cache=True, nogil=True)
def refine_breakpoints(tab, disk, theta, vperp, lo, hi, img_lo, tol):
    """Bisect each (lo[i], hi[i]) destination-change bracket to width <= tol.

    img_lo[i] is the destination image on the low side; the refined change
    point is written back into lo/hi (midpoint returned via their average).
    """
    for i in range(lo.shape[0]):
        a = lo[i]
        b = hi[i]
        target = img_lo[i]
        for _ in range(200):
            if b - a <= tol:
                break
            mid = 0.5 * (a + b)
            phi = np.arctan2(mid, vperp)
            j, theta_d, phi_in, tau, graze = flight_scalar(tab, disk, theta, phi)
            if j == target:
                a = mid
            else:
                b = mid
        lo[i] = a
        hi[i] = b


@njit(cache=True, nogil=True)
def pv_integrand_batch(tab, disk, theta, vperp, beta, vts, out):
    """Gaussian-weighted V-free part: out[i] = (v', weight) packed as v' and
    the Gaussian factor multiplied later in Python.  Here out holds v' only;
    misses are marked NaN."""
    for i in range(vts.shape[0]):
        phi = np.arctan2(vts[i], vperp)
        j, theta_d, phi_in, tau, graze = flight_scalar(tab, disk, theta, phi)
        if j < 0:
            out[i] = np.nan
        else:
            out[i] = np.cos(phi_in) / np.cos(phi) * vperp


@njit(cache=True, nogil=True)
def probe_horizon(tab, n_points, n_angles, tau_cap):
    """Probe grid flight-length certificate.

    Shoots n_points boundary points x n_angles directions per disk and checks
    every flight resolves within tau_cap.  Returns (ok, tau_min, tau_max,
    witness_disk, witness_theta, witness_phi, witness_tau); witness_tau < 0
    encodes a flight that left the image cutoff entirely.
    """
    tau_min = np.inf
    tau_max = 0.0
    for disk in range(tab.dr.shape[0]):
        for ip in range(n_points):
            theta = TWO_PI * ip / n_points
            for ia in range(n_angles):
                phi = -0.5 * np.pi + np.pi * (ia + 0.5) / n_angles
                j, theta_d, phi_in, tau, graze = flight_scalar(tab, disk, theta, phi)
                if j < 0:
                    return False, tau_min, tau_max, disk, theta, phi, -1.0
                if tau > tau_cap:
                    return False, tau_min, tau_max, disk, theta, phi, tau
                if tau < tau_min:
                    tau_min = tau
                if tau > tau_max:
                    tau_max = tau
    return True, tau_min, tau_max, -1, 0.0, 0.0, 0.0
