"""Random-walk diffusion engine with permeable membranes.

Walkers take fixed-length steps delta_s = sqrt(6 D dt) in uniformly random
directions, with D switching between the intra- and extracellular values as
they cross membranes. A membrane hit transmits with probability
min(1, 2*kappa*delta_s_src / D_src) and otherwise reflects specularly; on
transmission the remaining path length is rescaled by sqrt(D_dst / D_src).
The voxel is periodic; phases and displacements use unwrapped coordinates.

Every walker owns a counter-based RNG stream, so results are bit-identical
regardless of thread count or scheduling.
"""

import math
import time
import warnings
from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from . import crng
from .errors import ProtocolGridMismatch
from .signal import PhaseLedger
from .substrate import EXTRA, SpatialIndex, locate

_NUDGE = 1e-9  # um, offset from a surface after an event
_MAX_MEMBRANE_EVENTS = 100  # per step; beyond this the walker stops there
_MAX_SUBEVENTS = 400  # total per step, face wraps included
_GRID_REL_TOL = 1e-9


def step_length(d, dt):
    """Fixed step length sqrt(6 D dt) in um (D in um^2/ms, dt in ms)."""
    if d < 0 or dt <= 0:
        raise ValueError("need D >= 0 and dt > 0")
    return math.sqrt(6.0 * d * dt)


def transit_probability(kappa, step_len_src, d_src):
    """Membrane transmission probability min(1, 2 kappa delta_s / D).

    kappa in um/s, step length in um, d_src in um^2/s.
    """
    if kappa < 0 or step_len_src < 0 or d_src <= 0:
        raise ValueError("need kappa, step length >= 0 and D > 0")
    return min(1.0, 2.0 * kappa * step_len_src / d_src)


@dataclass
class SimParams:
    """Engine configuration. dt is in microseconds (time-grid unit); walker
    count comes from n_walkers if set, else particle_density * L^3."""

    dt: float = 5.0  # us
    n_walkers: int = 0
    particle_density: float = 0.0  # per um^3
    seed: int = 0
    n_steps: int = 0  # optional floor; extended to cover protocol/checkpoints
    record_trajectory_stride: int = 0

    @property
    def dt_ms(self):
        return self.dt * 1e-3

    def resolve_n_walkers(self, voxel_side):
        if self.n_walkers > 0:
            return int(self.n_walkers)
        if self.particle_density > 0:
            return max(1, int(round(self.particle_density * voxel_side**3)))
        raise ValueError("set n_walkers or particle_density")


@dataclass
class DisplacementRecord:
    """Per-checkpoint displacement vectors with initial-compartment tags."""

    times_ms: np.ndarray  # (C,)
    displacements: np.ndarray  # (C, N, 3) um, unwrapped
    initial_compartment: np.ndarray  # (N,) sphere id or EXTRA
    in_intra: np.ndarray  # (C, N) uint8, occupancy at each checkpoint

    def compartment_mask(self, compartment):
        """Walker mask for 'all' | 'intra' | 'extra' initial tags."""
        if compartment == "all":
            return np.ones(self.initial_compartment.shape, dtype=bool)
        if compartment == "intra":
            return self.initial_compartment >= 0
        if compartment == "extra":
            return self.initial_compartment == EXTRA
        raise ValueError(f"unknown compartment {compartment!r}")

    def occupancy(self):
        """Intracellular walker fraction at each checkpoint."""
        return self.in_intra.mean(axis=1)


@dataclass
class SimulationResult:
    record: DisplacementRecord
    ledger: PhaseLedger
    final_positions: np.ndarray  # (N, 3) wrapped
    final_compartment: np.ndarray  # (N,)
    exhausted_steps: int
    total_steps: int
    wall_seconds: float
    trajectory: np.ndarray | None = None  # (T, N, 3) displacements if recorded

    @property
    def exhaustion_rate(self):
        return self.exhausted_steps / max(1, self.total_steps)


def _steps_on_grid(value_ms, dt_ms, label):
    k = value_ms / dt_ms
    ki = round(k)
    if abs(k - ki) > _GRID_REL_TOL * max(1.0, abs(k)):
        raise ProtocolGridMismatch(
            f"{label} = {value_ms} ms is not a multiple of dt = {dt_ms} ms"
        )
    return int(ki)


def _profiles_for(protocol, dt_ms):
    """Lobe windows (start/end step indices) per distinct (delta, Delta)."""
    if protocol is None or not len(protocol.measurements):
        return [], np.zeros((0, 4), dtype=np.int64), np.zeros(0, dtype=np.int64)
    timings = protocol.timings()
    rows = []
    for ds, db in timings:
        l1 = _steps_on_grid(ds, dt_ms, "delta")
        s2 = _steps_on_grid(db, dt_ms, "Delta")
        rows.append((0, l1, s2, s2 + l1))
    prof = np.array(rows, dtype=np.int64).reshape(len(rows), 4)
    index = {t: i for i, t in enumerate(timings)}
    meas_profile = np.array(
        [index[(m.delta_small, m.delta_big)] for m in protocol.measurements],
        dtype=np.int64,
    )
    return timings, prof, meas_profile


@njit(cache=True, inline="always")
def _cell_index(x, y, z, inv_cell, nc):
    ix = int(x * inv_cell)
    iy = int(y * inv_cell)
    iz = int(z * inv_cell)
    if ix < 0:
        ix = 0
    elif ix >= nc:
        ix = nc - 1
    if iy < 0:
        iy = 0
    elif iy >= nc:
        iy = nc - 1
    if iz < 0:
        iz = 0
    elif iz >= nc:
        iz = nc - 1
    return (ix * nc + iy) * nc + iz


@njit(cache=True, inline="always")
def _locate_point(x, y, z, centers, radii, cell_start, cell_items, inv_cell, nc):
    c = _cell_index(x, y, z, inv_cell, nc)
    for p in range(cell_start[c], cell_start[c + 1]):
        i = cell_items[p]
        dx = x - centers[i, 0]
        dy = y - centers[i, 1]
        dz = z - centers[i, 2]
        rr = radii[i] + 1e-12
        if dx * dx + dy * dy + dz * dz < rr * rr:
            return i
    return -1


@njit(cache=True)
def _walk_one_step(
    key,
    k,
    px,
    py,
    pz,
    wx,
    wy,
    wz,
    comp,
    L,
    centers,
    radii,
    step_in,
    step_ex,
    p_exit,
    p_enter,
    ratio_ie,
    ratio_ei,
    cell_start,
    cell_items,
    inv_cell,
    nc,
):
    """One full step of one walker; returns the updated state and an
    exhaustion flag. Sub-events (membrane hits, face wraps) are resolved
    nearest-first until the step length is consumed."""
    base = crng.step_counter(k, 0)
    u1 = crng.uniform(key, base)
    u2 = crng.uniform(key, base + crng.U64(1))
    draw = 2
    cz = 2.0 * u1 - 1.0
    sz = math.sqrt(max(0.0, 1.0 - cz * cz))
    th = 6.283185307179586 * u2
    dx = sz * math.cos(th)
    dy = sz * math.sin(th)
    dz = cz

    remaining = step_in if comp >= 0 else step_ex
    membrane_events = 0
    guard = 0
    exhausted = 0
    while remaining > 1e-14 and guard < _MAX_SUBEVENTS:
        guard += 1
        # nearest voxel face along the direction
        t_face = 1e300
        face_axis = -1
        face_pos = False
        if dx > 1e-300:
            t = (L - px) / dx
            if t < t_face:
                t_face = t
                face_axis = 0
                face_pos = True
        elif dx < -1e-300:
            t = -px / dx
            if t < t_face:
                t_face = t
                face_axis = 0
                face_pos = False
        if dy > 1e-300:
            t = (L - py) / dy
            if t < t_face:
                t_face = t
                face_axis = 1
                face_pos = True
        elif dy < -1e-300:
            t = -py / dy
            if t < t_face:
                t_face = t
                face_axis = 1
                face_pos = False
        if dz > 1e-300:
            t = (L - pz) / dz
            if t < t_face:
                t_face = t
                face_axis = 2
                face_pos = True
        elif dz < -1e-300:
            t = -pz / dz
            if t < t_face:
                t_face = t
                face_axis = 2
                face_pos = False
        if t_face < 0.0:
            t_face = 0.0

        # nearest membrane along the direction
        t_s = 1e300
        sid = -1
        if comp >= 0:
            ox = px - centers[comp, 0]
            oy = py - centers[comp, 1]
            oz = pz - centers[comp, 2]
            bq = ox * dx + oy * dy + oz * dz
            cq = ox * ox + oy * oy + oz * oz - radii[comp] * radii[comp]
            disc = bq * bq - cq
            if disc > 0.0:
                t = -bq + math.sqrt(disc)
                if t > 0.0:
                    t_s = t
                    sid = comp
        else:
            cell = _cell_index(px, py, pz, inv_cell, nc)
            for q in range(cell_start[cell], cell_start[cell + 1]):
                i = cell_items[q]
                ox = px - centers[i, 0]
                oy = py - centers[i, 1]
                oz = pz - centers[i, 2]
                bq = ox * dx + oy * dy + oz * dz
                if bq >= 0.0:
                    continue  # moving away from this sphere
                cq = ox * ox + oy * oy + oz * oz - radii[i] * radii[i]
                disc = bq * bq - cq
                if disc <= 0.0:
                    continue
                t = -bq - math.sqrt(disc)
                if 0.0 < t < t_s:
                    t_s = t
                    sid = i

        if t_s <= t_face and t_s <= remaining:
            # membrane event
            px += t_s * dx
            py += t_s * dy
            pz += t_s * dz
            remaining -= t_s
            membrane_events += 1
            nx = px - centers[sid, 0]
            ny = py - centers[sid, 1]
            nz = pz - centers[sid, 2]
            nn = math.sqrt(nx * nx + ny * ny + nz * nz)
            nx /= nn
            ny /= nn
            nz /= nn
            if membrane_events > _MAX_MEMBRANE_EVENTS:
                exhausted = 1
                # stop at the membrane, nudged back to the source side
                if comp >= 0:
                    px -= _NUDGE * nx
                    py -= _NUDGE * ny
                    pz -= _NUDGE * nz
                else:
                    px += _NUDGE * nx
                    py += _NUDGE * ny
                    pz += _NUDGE * nz
                remaining = 0.0
                break
            p_t = p_exit if comp >= 0 else p_enter
            ut = crng.uniform(key, base + crng.U64(draw))
            draw += 1
            if ut < p_t:
                # transmit; rescale the remaining path for the new medium
                if comp >= 0:
                    remaining *= ratio_ie
                    comp = -1
                    px += _NUDGE * nx
                    py += _NUDGE * ny
                    pz += _NUDGE * nz
                else:
                    remaining *= ratio_ei
                    comp = sid
                    px -= _NUDGE * nx
                    py -= _NUDGE * ny
                    pz -= _NUDGE * nz
            else:
                # specular reflection
                dot = dx * nx + dy * ny + dz * nz
                dx -= 2.0 * dot * nx
                dy -= 2.0 * dot * ny
                dz -= 2.0 * dot * nz
                norm = math.sqrt(dx * dx + dy * dy + dz * dz)
                dx /= norm
                dy /= norm
                dz /= norm
                if comp >= 0:
                    px -= _NUDGE * nx
                    py -= _NUDGE * ny
                    pz -= _NUDGE * nz
                else:
                    px += _NUDGE * nx
                    py += _NUDGE * ny
                    pz += _NUDGE * nz
        elif t_face <= remaining:
            # periodic wrap
            px += t_face * dx
            py += t_face * dy
            pz += t_face * dz
            remaining -= t_face
            if face_axis == 0:
                if face_pos:
                    px = 0.0
                    wx += 1.0
                else:
                    px = L
                    wx -= 1.0
            elif face_axis == 1:
                if face_pos:
                    py = 0.0
                    wy += 1.0
                else:
                    py = L
                    wy -= 1.0
            else:
                if face_pos:
                    pz = 0.0
                    wz += 1.0
                else:
                    pz = L
                    wz -= 1.0
        else:
            px += remaining * dx
            py += remaining * dy
            pz += remaining * dz
            remaining = 0.0
    if guard >= _MAX_SUBEVENTS:
        exhausted = 1
    return px, py, pz, wx, wy, wz, comp, exhausted


@njit(cache=True, parallel=True)
def _simulate_kernel(
    seed,
    n_walkers,
    n_steps,
    dt_ms,
    L,
    centers,
    radii,
    d_intra,
    d_extra,
    kappa,
    cell_start,
    cell_items,
    inv_cell,
    nc,
    prof,
    cp_steps,
    traj_stride,
    lobe_sums,
    disp,
    in_intra,
    init_pos,
    init_comp,
    final_pos,
    final_comp,
    exhausted,
    traj,
):
    n_prof = prof.shape[0]
    n_cp = cp_steps.shape[0]
    step_in = math.sqrt(6.0 * d_intra * dt_ms)
    step_ex = math.sqrt(6.0 * d_extra * dt_ms)
    # transit probabilities are fixed per crossing direction (kappa in um/s,
    # diffusivities stored in um^2/ms = 1e3 um^2/s)
    p_exit = min(1.0, 2.0 * kappa * step_in / (1000.0 * d_intra))
    p_enter = min(1.0, 2.0 * kappa * step_ex / (1000.0 * d_extra))
    ratio_ie = math.sqrt(d_extra / d_intra)
    ratio_ei = math.sqrt(d_intra / d_extra)

    for w in prange(n_walkers):
        key = crng.stream_key(seed, w)
        px = L * crng.uniform(key, crng.step_counter(-1, 0))
        py = L * crng.uniform(key, crng.step_counter(-1, 1))
        pz = L * crng.uniform(key, crng.step_counter(-1, 2))
        wx = 0.0
        wy = 0.0
        wz = 0.0
        comp = _locate_point(
            px, py, pz, centers, radii, cell_start, cell_items, inv_cell, nc
        )
        init_pos[w, 0] = px
        init_pos[w, 1] = py
        init_pos[w, 2] = pz
        init_comp[w] = comp
        x0 = px
        y0 = py
        z0 = pz
        ic = 0
        while ic < n_cp and cp_steps[ic] == 0:
            in_intra[ic, w] = 1 if comp >= 0 else 0
            ic += 1

        for k in range(n_steps):
            ux = px + L * wx
            uy = py + L * wy
            uz = pz + L * wz
            for p in range(n_prof):
                if k < prof[p, 1]:
                    if k >= prof[p, 0]:
                        lobe_sums[p, w, 0] += ux
                        lobe_sums[p, w, 1] += uy
                        lobe_sums[p, w, 2] += uz
                elif prof[p, 2] <= k < prof[p, 3]:
                    lobe_sums[p, w, 0] -= ux
                    lobe_sums[p, w, 1] -= uy
                    lobe_sums[p, w, 2] -= uz

            px, py, pz, wx, wy, wz, comp, ex = _walk_one_step(
                key,
                k,
                px,
                py,
                pz,
                wx,
                wy,
                wz,
                comp,
                L,
                centers,
                radii,
                step_in,
                step_ex,
                p_exit,
                p_enter,
                ratio_ie,
                ratio_ei,
                cell_start,
                cell_items,
                inv_cell,
                nc,
            )
            exhausted[w] += ex

            if traj_stride > 0 and (k + 1) % traj_stride == 0:
                t_idx = (k + 1) // traj_stride - 1
                traj[t_idx, w, 0] = px + L * wx - x0
                traj[t_idx, w, 1] = py + L * wy - y0
                traj[t_idx, w, 2] = pz + L * wz - z0
            if ic < n_cp and k + 1 == cp_steps[ic]:
                disp[ic, w, 0] = px + L * wx - x0
                disp[ic, w, 1] = py + L * wy - y0
                disp[ic, w, 2] = pz + L * wz - z0
                in_intra[ic, w] = 1 if comp >= 0 else 0
                ic += 1

        final_pos[w, 0] = px
        final_pos[w, 1] = py
        final_pos[w, 2] = pz
        final_comp[w] = comp


def run_simulation(substrate, params, protocol=None, checkpoints=()):
    """Simulate walkers in the substrate; returns displacement records and a
    phase ledger covering every protocol measurement.

    Checkpoints are times in ms and must sit on the dt grid, as must every
    protocol delta and Delta. Walkers seed uniformly at random in the voxel.
    Deterministic for fixed (substrate, params, protocol, checkpoints).
    """
    t0 = time.time()
    dt_ms = params.dt_ms
    if dt_ms <= 0:
        raise ValueError("dt must be > 0")
    n_walkers = params.resolve_n_walkers(substrate.voxel_side)
    cp_ms = np.asarray(sorted(checkpoints), dtype=np.float64)
    cp_steps = np.array(
        [_steps_on_grid(t, dt_ms, "checkpoint") for t in cp_ms], dtype=np.int64
    )
    timings, prof, meas_profile = _profiles_for(protocol, dt_ms)
    n_steps = int(params.n_steps)
    if len(prof):
        n_steps = max(n_steps, int(prof[:, 3].max()))
    if len(cp_steps):
        n_steps = max(n_steps, int(cp_steps.max()))

    margin = step_length(max(substrate.d_intra, substrate.d_extra), dt_ms)
    index = SpatialIndex(substrate, margin=margin)
    inv_cell = 1.0 / index.cell_size
    centers = np.ascontiguousarray(substrate.centers, dtype=np.float64)
    radii = np.ascontiguousarray(substrate.radii, dtype=np.float64)

    n_prof = len(prof)
    n_cp = len(cp_steps)
    lobe_sums = np.zeros((n_prof, n_walkers, 3))
    disp = np.zeros((n_cp, n_walkers, 3))
    in_intra = np.zeros((n_cp, n_walkers), dtype=np.uint8)
    init_pos = np.zeros((n_walkers, 3))
    init_comp = np.zeros(n_walkers, dtype=np.int64)
    final_pos = np.zeros((n_walkers, 3))
    final_comp = np.zeros(n_walkers, dtype=np.int64)
    exhausted = np.zeros(n_walkers, dtype=np.int64)
    stride = int(params.record_trajectory_stride)
    n_traj = n_steps // stride if stride > 0 else 0
    traj = np.zeros((n_traj, n_walkers, 3)) if stride > 0 else np.zeros((0, 1, 3))

    _simulate_kernel(
        np.uint64(params.seed),
        n_walkers,
        n_steps,
        dt_ms,
        float(substrate.voxel_side),
        centers,
        radii,
        float(substrate.d_intra),
        float(substrate.d_extra),
        float(substrate.kappa),
        index.cell_start,
        index.cell_items,
        inv_cell,
        index.n_cells,
        prof,
        cp_steps,
        stride,
        lobe_sums,
        disp,
        in_intra,
        init_pos,
        init_comp,
        final_pos,
        final_comp,
        exhausted,
        traj,
    )

    record = DisplacementRecord(cp_ms, disp, init_comp.copy(), in_intra)
    ledger = PhaseLedger(
        protocol=protocol,
        timings=timings,
        measurement_profile=meas_profile,
        lobe_sums=lobe_sums,
        dt_ms=dt_ms,
        initial_compartment=init_comp.copy(),
        seed=params.seed,
    )
    total_steps = n_walkers * max(n_steps, 1)
    n_exhausted = int(exhausted.sum())
    if n_exhausted > 1e-6 * total_steps:
        warnings.warn(
            f"membrane sub-event budget exhausted on {n_exhausted} of "
            f"{total_steps} steps; geometry results may be degraded",
            stacklevel=2,
        )
    return SimulationResult(
        record=record,
        ledger=ledger,
        final_positions=final_pos,
        final_compartment=final_comp,
        exhausted_steps=n_exhausted,
        total_steps=total_steps,
        wall_seconds=time.time() - t0,
        trajectory=traj if stride > 0 else None,
    )


@dataclass
class Walker:
    """Single-walker state for step-level tests; the batch engine keeps the
    same state in flat arrays instead."""

    position: np.ndarray  # wrapped, um
    wraps: np.ndarray  # wrap counts per axis
    compartment: int
    initial_position: np.ndarray
    initial_compartment: int
    seed: int
    walker_id: int
    step_index: int = 0

    def unwrapped(self, voxel_side):
        return self.position + self.wraps * voxel_side


def make_walker(substrate, index, position, seed=0, walker_id=0):
    position = np.asarray(position, dtype=np.float64)
    comp = locate(substrate, index, position)
    return Walker(
        position=position.copy(),
        wraps=np.zeros(3),
        compartment=comp,
        initial_position=position.copy(),
        initial_compartment=comp,
        seed=seed,
        walker_id=walker_id,
    )


def advance_walker(walker, substrate, index, dt_ms):
    """Advance one walker by a single step; returns a new Walker.

    Thin wrapper over the batch kernel's step function so step-level tests
    exercise exactly the production geometry code. The walker's stream and
    step counter determine the randomness.
    """
    margin = step_length(max(substrate.d_intra, substrate.d_extra), dt_ms)
    if index.margin < margin:
        index = SpatialIndex(substrate, margin=margin)
    step_in = step_length(substrate.d_intra, dt_ms)
    step_ex = step_length(substrate.d_extra, dt_ms)
    p_exit = transit_probability(substrate.kappa, step_in, substrate.d_intra * 1e3)
    p_enter = transit_probability(substrate.kappa, step_ex, substrate.d_extra * 1e3)
    key = crng.stream_key(np.uint64(walker.seed), np.uint64(walker.walker_id))
    px, py, pz, wx, wy, wz, comp, _ = _walk_one_step(
        key,
        walker.step_index,
        float(walker.position[0]),
        float(walker.position[1]),
        float(walker.position[2]),
        float(walker.wraps[0]),
        float(walker.wraps[1]),
        float(walker.wraps[2]),
        int(walker.compartment),
        float(substrate.voxel_side),
        np.ascontiguousarray(substrate.centers, dtype=np.float64),
        np.ascontiguousarray(substrate.radii, dtype=np.float64),
        step_in,
        step_ex,
        p_exit,
        p_enter,
        math.sqrt(substrate.d_extra / substrate.d_intra),
        math.sqrt(substrate.d_intra / substrate.d_extra),
        index.cell_start,
        index.cell_items,
        1.0 / index.cell_size,
        index.n_cells,
    )
    return Walker(
        position=np.array([px, py, pz]),
        wraps=np.array([wx, wy, wz]),
        compartment=int(comp),
        initial_position=walker.initial_position,
        initial_compartment=walker.initial_compartment,
        seed=walker.seed,
        walker_id=walker.walker_id,
        step_index=walker.step_index + 1,
    )
