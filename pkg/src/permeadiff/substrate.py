"""Packed-sphere numerical substrates: generation, validation, persistence, queries.

Geometry conventions: lengths in um, diffusivities in um^2/ms, membrane
permeability in um/s. Spheres lie fully inside the voxel [0, L]^3 and never
overlap (pair gap >= 1e-9 um). Walker-side periodic wrapping is the engine's
business, not the substrate's.
"""

import io
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyInput, FormatError, InfeasibleSpec, PackingFailed

EXTRA = -1  # compartment code; intracellular compartments are sphere indices >= 0

_OVERLAP_TOL = 1e-9  # um, minimum accepted pair gap
_SURFACE_TOL = 1e-12  # um, locate() resolves surface points to intra


@dataclass(frozen=True)
class SphereSpec:
    """One sphere population: radii ~ Normal(mean_radius, radius_std),
    truncated below at 0.2 * mean_radius."""

    mean_radius: float  # um
    radius_std: float = 0.0  # um
    volume_fraction_share: float = 1.0  # share of total ICVF

    def __post_init__(self):
        if self.mean_radius <= 0:
            raise InfeasibleSpec("mean_radius must be > 0")
        if self.radius_std < 0:
            raise InfeasibleSpec("radius_std must be >= 0")
        if not 0 < self.volume_fraction_share <= 1:
            raise InfeasibleSpec("volume_fraction_share must be in (0, 1]")


@dataclass
class Substrate:
    voxel_side: float  # um
    centers: np.ndarray  # (n, 3) um
    radii: np.ndarray  # (n,) um
    icvf_target: float
    kappa: float = 0.0  # um/s
    d_intra: float = 2.0  # um^2/ms
    d_extra: float = 2.0  # um^2/ms

    def __post_init__(self):
        self.centers = np.atleast_2d(np.asarray(self.centers, dtype=np.float64))
        if self.centers.size == 0:
            self.centers = np.zeros((0, 3))
        self.radii = np.asarray(self.radii, dtype=np.float64).ravel()
        if self.voxel_side <= 0:
            raise ValueError("voxel_side must be > 0")
        if self.kappa < 0:
            raise ValueError("kappa must be >= 0")
        if self.d_intra <= 0 or self.d_extra <= 0:
            raise ValueError("diffusivities must be > 0")
        if len(self.centers) != len(self.radii):
            raise ValueError("centers and radii length mismatch")

    @property
    def n_spheres(self):
        return len(self.radii)

    def summary(self):
        """Structural summary, reporting both mean-radius definitions."""
        return {
            "voxel_side_um": self.voxel_side,
            "n_spheres": self.n_spheres,
            "icvf": compute_icvf(self),
            "icvf_target": self.icvf_target,
            "volume_weighted_radius_um": (
                volume_weighted_radius(self.radii) if self.n_spheres else 0.0
            ),
            "volume_average_radius_um": (
                volume_average_radius(self.radii) if self.n_spheres else 0.0
            ),
            "kappa_um_per_s": self.kappa,
            "d_intra_um2_per_ms": self.d_intra,
            "d_extra_um2_per_ms": self.d_extra,
        }


def volume_weighted_radius(radii):
    """Cube root of the mean cubed radius, cbrt(sum(R_i^3) / N)."""
    r = np.asarray(radii, dtype=np.float64).ravel()
    if r.size == 0:
        raise EmptyInput("no radii")
    if np.any(r <= 0):
        raise ValueError("radii must be > 0")
    return float(np.cbrt(np.mean(r**3)))


def volume_average_radius(radii):
    """Volume-weighted average radius, sum(R_i^4) / sum(R_i^3).

    Alternative summary that weights each sphere's radius by its volume;
    reported alongside volume_weighted_radius because the two differ for
    polydisperse substrates.
    """
    r = np.asarray(radii, dtype=np.float64).ravel()
    if r.size == 0:
        raise EmptyInput("no radii")
    if np.any(r <= 0):
        raise ValueError("radii must be > 0")
    return float(np.sum(r**4) / np.sum(r**3))


def compute_icvf(substrate):
    """Intracellular volume fraction: total sphere volume over voxel volume."""
    if substrate.n_spheres == 0:
        return 0.0
    return float(
        (4.0 / 3.0) * np.pi * np.sum(substrate.radii**3) / substrate.voxel_side**3
    )


class SpatialIndex:
    """Uniform grid over the voxel mapping cells to candidate sphere ids.

    A sphere is registered in every cell its bounding box, inflated by
    `margin`, touches. With margin >= the longest possible walker step, any
    sphere reachable within one step from a point is registered in that
    point's cell.
    """

    def __init__(self, substrate, margin=0.0):
        self.voxel_side = substrate.voxel_side
        self.margin = float(margin)
        n = substrate.n_spheres
        L = substrate.voxel_side
        if n == 0:
            self.n_cells = 1
            self.cell_size = L
        else:
            r_max = float(substrate.radii.max())
            target = max(r_max, L / 48.0)
            self.n_cells = int(np.clip(np.floor(L / target), 1, 48))
            self.cell_size = L / self.n_cells
        nc = self.n_cells
        buckets = [[] for _ in range(nc**3)]
        for i in range(n):
            c = substrate.centers[i]
            reach = substrate.radii[i] + self.margin
            lo = np.clip(((c - reach) / self.cell_size).astype(int), 0, nc - 1)
            hi = np.clip(((c + reach) / self.cell_size).astype(int), 0, nc - 1)
            for ix in range(lo[0], hi[0] + 1):
                for iy in range(lo[1], hi[1] + 1):
                    for iz in range(lo[2], hi[2] + 1):
                        buckets[(ix * nc + iy) * nc + iz].append(i)
        counts = np.array([len(b) for b in buckets], dtype=np.int64)
        self.cell_start = np.zeros(nc**3 + 1, dtype=np.int64)
        np.cumsum(counts, out=self.cell_start[1:])
        self.cell_items = np.array(
            [i for b in buckets for i in b], dtype=np.int64
        ) if n else np.zeros(0, dtype=np.int64)

    def cell_of(self, point):
        nc = self.n_cells
        ijk = np.clip((np.asarray(point) / self.cell_size).astype(int), 0, nc - 1)
        return (ijk[0] * nc + ijk[1]) * nc + ijk[2]

    def candidates(self, point):
        c = self.cell_of(point)
        return self.cell_items[self.cell_start[c] : self.cell_start[c + 1]]


def locate(substrate, index, point):
    """Compartment of a point: sphere id if inside (or on) a sphere, EXTRA else.

    Surface points within 1e-12 um resolve to the sphere. The point must be
    inside the voxel (wrap first if needed).
    """
    p = np.asarray(point, dtype=np.float64)
    for i in index.candidates(p):
        d = np.linalg.norm(p - substrate.centers[i])
        if d < substrate.radii[i] + _SURFACE_TOL:
            return int(i)
    return EXTRA


def validate(substrate, icvf_tol=0.01):
    """Raise if any Substrate invariant is violated."""
    n = substrate.n_spheres
    L = substrate.voxel_side
    if n == 0:
        return
    c, r = substrate.centers, substrate.radii
    if np.any(r <= 0):
        raise ValueError("non-positive radius")
    if np.any(c - r[:, None] < -_OVERLAP_TOL) or np.any(
        c + r[:, None] > L + _OVERLAP_TOL
    ):
        raise ValueError("sphere extends outside the voxel")
    tree = cKDTree(c)
    pairs = tree.query_pairs(2.0 * float(r.max()), output_type="ndarray")
    if len(pairs):
        d = np.linalg.norm(c[pairs[:, 0]] - c[pairs[:, 1]], axis=1)
        gap = d - (r[pairs[:, 0]] + r[pairs[:, 1]])
        if np.any(gap < -_OVERLAP_TOL):
            worst = float(gap.min())
            raise ValueError(f"overlapping spheres (worst gap {worst:.3e} um)")
    achieved = compute_icvf(substrate)
    if abs(achieved - substrate.icvf_target) > icvf_tol:
        raise ValueError(
            f"achieved ICVF {achieved:.4f} misses target {substrate.icvf_target:.4f}"
        )


def _draw_radii(populations, icvf_target, voxel_side, rng):
    """Radii for every population, sized so total volume hits the target.

    Draws truncated normals per population until the population's volume share
    is met, then rescales all radii by a single global factor (at most a few
    percent) so the achieved ICVF equals the target up to float precision.
    """
    target_total = icvf_target * voxel_side**3
    radii = []
    for pop in populations:
        target = pop.volume_fraction_share * target_total
        vol = 0.0
        rows = []
        while True:
            r = rng.normal(pop.mean_radius, pop.radius_std) if pop.radius_std else pop.mean_radius
            if r < 0.2 * pop.mean_radius:
                continue
            v = (4.0 / 3.0) * np.pi * r**3
            if vol + v - target > target - vol and rows:
                break
            rows.append(r)
            vol += v
            if vol >= target:
                break
        radii.extend(rows)
    radii = np.array(radii, dtype=np.float64)
    total = (4.0 / 3.0) * np.pi * np.sum(radii**3)
    scale = np.cbrt(target_total / total)
    if not 0.95 <= scale <= 1.05:
        raise InfeasibleSpec(
            f"population mix cannot hit the volume target (rescale {scale:.3f})"
        )
    return radii * scale


def _resolve_overlaps(centers, radii, L, rng, scale, max_rounds, push=1.1):
    """Push overlapping spheres apart at radius scale `scale`.

    Mass-weighted pair separation with over-relaxation; stalled configurations
    get a small random jolt. Centers stay clamped to the full-radius interior.
    Returns the worst remaining overlap.
    """
    n = len(radii)
    r_eff = radii * scale
    reach = 2.0 * float(r_eff.max()) if n else 0.0
    w_small = radii**3
    last = np.inf
    for it in range(max_rounds):
        tree = cKDTree(centers)
        pairs = tree.query_pairs(reach, output_type="ndarray")
        if len(pairs) == 0:
            return 0.0
        i, j = pairs[:, 0], pairs[:, 1]
        dvec = centers[i] - centers[j]
        dist = np.linalg.norm(dvec, axis=1)
        overlap = r_eff[i] + r_eff[j] - dist
        hit = overlap > 0
        if not np.any(hit):
            return 0.0
        i, j, dvec, dist, overlap = i[hit], j[hit], dvec[hit], dist[hit], overlap[hit]
        worst = float(overlap.max())
        degenerate = dist < 1e-12
        if np.any(degenerate):
            dvec[degenerate] = rng.standard_normal((int(degenerate.sum()), 3))
            dist[degenerate] = np.linalg.norm(dvec[degenerate], axis=1)
        nvec = dvec / dist[:, None]
        # lighter (smaller) sphere yields more
        wi = w_small[j] / (w_small[i] + w_small[j])
        step = push * overlap
        disp = np.zeros_like(centers)
        np.add.at(disp, i, nvec * (step * wi)[:, None])
        np.add.at(disp, j, -nvec * (step * (1.0 - wi))[:, None])
        if worst > 0.995 * last and it % 7 == 6:
            jolt = 0.25 * worst
            disp += rng.standard_normal(centers.shape) * jolt
        last = worst
        centers += disp
        np.clip(centers, radii[:, None], L - radii[:, None], out=centers)
    return last


def pack_spheres(voxel_side, populations, icvf_target, seed, max_rounds=20000):
    """Build a packed-sphere substrate at the requested volume fraction.

    Two stages: random sequential placement largest-to-smallest, then
    collective rearrangement (overlap-resolution pushes at a growing radius
    scale, with random jolts when jammed) until all spheres fit at full size.
    Deterministic for a given seed.
    """
    populations = list(populations)
    if not populations:
        return Substrate(voxel_side, np.zeros((0, 3)), np.zeros(0), 0.0)
    share = sum(p.volume_fraction_share for p in populations)
    if abs(share - 1.0) > 1e-9:
        raise InfeasibleSpec(f"volume shares sum to {share}, expected 1")
    if not 0 < icvf_target <= 0.70:
        raise InfeasibleSpec("icvf_target must be in (0, 0.70]")
    rng = np.random.default_rng(seed)
    radii = _draw_radii(populations, icvf_target, voxel_side, rng)
    if np.any(2 * radii > voxel_side):
        raise InfeasibleSpec("a sphere is larger than the voxel")
    order = np.argsort(-radii)
    radii = radii[order]
    n = len(radii)
    L = voxel_side

    # stage 1: sequential random placement, largest first
    centers = np.zeros((n, 3))
    placed = 0
    tree = None
    for i in range(n):
        r = radii[i]
        ok = False
        for _ in range(80):
            p = rng.uniform(r, L - r, size=3)
            if placed == 0:
                ok = True
                break
            d, k = tree.query(p, k=min(placed, 8))
            d = np.atleast_1d(d)
            k = np.atleast_1d(k)
            if np.all(d - radii[np.asarray(k)] >= r):
                ok = True
                break
        centers[i] = p if ok else rng.uniform(r, L - r, size=3)
        placed += 1
        if placed % 16 == 0 or placed == n:
            tree = cKDTree(centers[:placed])
        elif tree is None:
            tree = cKDTree(centers[:placed])

    # stage 2: grow to full size, resolving overlaps at each scale
    budget = max_rounds
    for scale in np.concatenate([np.linspace(0.6, 1.0, 33)]):
        rounds = min(600 if scale < 1.0 else 6000, budget)
        worst = _resolve_overlaps(centers, radii, L, rng, scale, rounds)
        budget -= rounds
        if budget <= 0 and worst > 1e-7:
            raise PackingFailed(
                f"overlaps of {worst:.2e} um remain after the iteration budget"
            )
    if worst > 1e-7:
        worst = _resolve_overlaps(centers, radii, L, rng, 1.0, budget)
        if worst > 1e-7:
            raise PackingFailed(
                f"overlaps of {worst:.2e} um remain after the iteration budget"
            )
    # final polish: shave radii by the residual overlap so all gaps clear 1e-9
    if worst > 0:
        radii = radii - (worst / 2 + 1e-9)
    sub = Substrate(voxel_side, centers, radii, icvf_target)
    validate(sub)
    return sub


def save_substrate(substrate, path):
    """Versioned text format; floats carry full precision for exact round-trips."""
    buf = io.StringIO()
    buf.write("# permeadiff substrate v1\n")
    buf.write(f"voxel_side_um {substrate.voxel_side:.17g}\n")
    buf.write(f"icvf_target {substrate.icvf_target:.17g}\n")
    buf.write(f"kappa_um_per_s {substrate.kappa:.17g}\n")
    buf.write(f"d_intra_um2_per_ms {substrate.d_intra:.17g}\n")
    buf.write(f"d_extra_um2_per_ms {substrate.d_extra:.17g}\n")
    buf.write(f"n_spheres {substrate.n_spheres}\n")
    for c, r in zip(substrate.centers, substrate.radii):
        buf.write(f"{c[0]:.17g} {c[1]:.17g} {c[2]:.17g} {r:.17g}\n")
    with open(path, "w") as fh:
        fh.write(buf.getvalue())


def load_substrate(path):
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines or not lines[0].startswith("# permeadiff substrate v1"):
        raise FormatError("not a substrate file (bad header)")
    header = {}
    idx = 1
    try:
        while idx < len(lines) and not lines[idx].startswith("#"):
            key, val = lines[idx].split()
            header[key] = float(val)
            idx += 1
            if key == "n_spheres":
                break
        n = int(header["n_spheres"])
        rows = lines[idx : idx + n]
        if len(rows) != n:
            raise FormatError(f"expected {n} sphere rows, found {len(rows)}")
        data = np.array([[float(x) for x in row.split()] for row in rows])
        data = data.reshape(n, 4) if n else np.zeros((0, 4))
    except FormatError:
        raise
    except (KeyError, ValueError) as e:
        raise FormatError(f"corrupt substrate file: {e}") from None
    return Substrate(
        voxel_side=header["voxel_side_um"],
        centers=data[:, :3],
        radii=data[:, 3],
        icvf_target=header["icvf_target"],
        kappa=header["kappa_um_per_s"],
        d_intra=header["d_intra_um2_per_ms"],
        d_extra=header["d_extra_um2_per_ms"],
    )
