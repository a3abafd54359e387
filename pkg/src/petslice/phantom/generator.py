"""Synthetic two-center PET/CT cohorts with planted tumors.

Each patient gets a parametric anatomy (body outline varying along z,
lungs, liver, heart, kidneys, bladder, brain, spine and a few tubular
physiological hotspots) that is unique to the patient and consistent across
its slices. Tumors are voxel-centered ellipsoids, so a slice carries tumor
mask exactly when its offset from the tumor center is within the mask's
z semi-axis. That makes the cohort positive-slice fraction a closed-form
function of the tumor z-extents, which is what the generator calibrates.
"""

import logging
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .volume import SHOULDER_K, PatientVolume, TumorSpec, plant_tumor_inplace, tmtv

log = logging.getLogger(__name__)

# (center, half-width) of lymph-node stations as a fraction of the z extent (0 = pelvis end)
STATIONS = ((0.20, 0.08), (0.42, 0.10), (0.66, 0.08), (0.78, 0.03))
STATION_WEIGHTS = (1.0, 1.3, 1.1, 0.4)
MAX_TUMOR_ML = 250.0
# largest tumor in-plane semi-axis as a fraction of the local body semi-axis
IN_PLANE_CAP = 0.7


@dataclass
class CenterProfile:
    name: str
    n_patients: int
    target_positive_fraction: float
    tumor_count_dist: tuple = (3.0, 82)             # (mean, max) tumors per patient
    tmtv_target_ml: tuple = (119.25, (0.26, 1416.26))  # (mean, (min, max))
    tmtv_log_sigma: float = 1.0                     # per-patient TMTV spread (lognormal)
    suvmax_dist: tuple = (1.9, 0.55)                # lognormal (mu, sigma) of tumor SUVmax
    suvmax_range: tuple = (2.0, 48.0)
    anatomy_seed: int = 0
    dims: tuple = (64, 64, 96)                      # (nx, ny, nz)
    spacing_mm: tuple = (4.0, 4.0, 4.0)
    ct_spacing_mm: tuple = (2.0, 2.0, 4.0)
    pet_fwhm_mm: float = 7.0
    pet_noise: float = 0.15
    uptake_scale: float = 1.0
    body_scale: float = 1.0
    hotspot_suv: tuple = (1.8, 4.0)
    n_hotspots: tuple = (3, 6)
    tumor_falloff_mm: float = 2.0
    ct_outlier_fraction: float = 5e-4

    def __post_init__(self):
        self.tumor_count_dist = (float(self.tumor_count_dist[0]), int(self.tumor_count_dist[1]))
        mean, rng = self.tmtv_target_ml
        self.tmtv_target_ml = (float(mean), (float(rng[0]), float(rng[1])))
        for name in ("suvmax_dist", "suvmax_range", "dims", "spacing_mm", "ct_spacing_mm",
                     "hotspot_suv", "n_hotspots"):
            setattr(self, name, tuple(getattr(self, name)))
        self.dims = tuple(int(v) for v in self.dims)
        self.validate()

    def validate(self):
        if not 0.0 < self.target_positive_fraction < 1.0:
            raise ValueError(f"target_positive_fraction must lie in (0, 1), got {self.target_positive_fraction}")
        if self.n_patients < 1:
            raise ValueError("n_patients must be >= 1")
        mean_n, max_n = self.tumor_count_dist
        if mean_n < 1 or max_n < 1:
            raise ValueError(
                f"every patient needs at least one tumor; tumor_count_dist={self.tumor_count_dist}"
            )
        if max_n < mean_n:
            raise ValueError(f"tumor count max {max_n} below mean {mean_n}")
        mean_v, (lo, hi) = self.tmtv_target_ml
        if not (0 < lo < hi) or not (lo <= mean_v <= hi):
            raise ValueError(f"invalid TMTV target {self.tmtv_target_ml}")
        nx, ny, nz = self.dims
        sx, sy, sz = self.spacing_mm
        body_ml = np.pi * (0.40 * nx * sx) * (0.30 * ny * sy) * (nz * sz) / 1000.0
        if mean_v > 0.25 * body_ml:
            raise ValueError(
                f"mean TMTV {mean_v:.1f} ml infeasible for a ~{body_ml:.0f} ml body on a "
                f"{nx}x{ny}x{nz} grid at {self.spacing_mm} mm"
            )
        for n_ct, n_pet, s_ct, s_pet in zip(self.ct_dims, self.dims, self.ct_spacing_mm, self.spacing_mm):
            if abs(n_ct * s_ct - n_pet * s_pet) > 1e-6:
                raise ValueError("CT spacing must tile the PET field of view exactly")

    @property
    def ct_dims(self):
        return tuple(int(round(n * s / c)) for n, s, c in zip(self.dims, self.spacing_mm, self.ct_spacing_mm))

    def to_dict(self):
        return asdict(self)


def bccv_like(n_patients=30, **overrides):
    """Internal-center profile: 8% positive slices, ~3 tumors, mean TMTV 119.25 ml."""
    kw = dict(name="BCCV", n_patients=n_patients, target_positive_fraction=0.08,
              tumor_count_dist=(3.0, 82), tmtv_target_ml=(119.25, (0.26, 1416.26)),
              suvmax_dist=(1.85, 0.55), anatomy_seed=11)
    kw.update(overrides)
    return CenterProfile(**kw)


def smhs_like(n_patients=30, **overrides):
    """External-center profile: 21% positive slices, ~11 tumors, mean TMTV 488.43 ml,
    plus a different scanner/uptake signature."""
    kw = dict(name="SMHS", n_patients=n_patients, target_positive_fraction=0.21,
              tumor_count_dist=(11.0, 128), tmtv_target_ml=(488.43, (1.09, 5919.45)),
              suvmax_dist=(2.0, 0.55), anatomy_seed=23, pet_fwhm_mm=9.5, pet_noise=0.25,
              uptake_scale=1.35, body_scale=1.0, tmtv_log_sigma=0.6, hotspot_suv=(2.5, 6.5), n_hotspots=(4, 8))
    kw.update(overrides)
    return CenterProfile(**kw)


# ---------------------------------------------------------------------------
# Grid helpers
# ---------------------------------------------------------------------------

@dataclass
class Grid:
    shape: tuple     # (nz, ny, nx)
    spacing: tuple   # (sx, sy, sz)

    @property
    def fov(self):
        nz, ny, nx = self.shape
        sx, sy, sz = self.spacing
        return nx * sx, ny * sy, nz * sz

    def axes(self):
        """Voxel-center coordinates in mm: x, y centered on the FOV, z from the pelvis end."""
        nz, ny, nx = self.shape
        sx, sy, sz = self.spacing
        fx, fy, _ = self.fov
        x = (np.arange(nx) + 0.5) * sx - fx / 2
        y = (np.arange(ny) + 0.5) * sy - fy / 2
        z = (np.arange(nz) + 0.5) * sz
        return x, y, z

    def index_of(self, x, y, z):
        sx, sy, sz = self.spacing
        fx, fy, _ = self.fov
        return (int(round((x + fx / 2) / sx - 0.5)), int(round((y + fy / 2) / sy - 0.5)),
                int(round(z / sz - 0.5)))


def _ellipsoid_box(grid, center, radii):
    x, y, z = grid.axes()
    sl, coords = [], []
    for ax, c, r in ((z, center[2], radii[2]), (y, center[1], radii[1]), (x, center[0], radii[0])):
        idx = np.nonzero(np.abs(ax - c) <= r)[0]
        if idx.size == 0:
            return None, None
        sl.append(slice(idx[0], idx[-1] + 1))
        coords.append((ax[idx[0] : idx[-1] + 1] - c) / r)
    dz, dy, dx = coords
    inside = dz[:, None, None] ** 2 + dy[None, :, None] ** 2 + dx[None, None, :] ** 2 <= 1.0
    return tuple(sl), inside


def _paint(arr, grid, center, radii, value):
    box, inside = _ellipsoid_box(grid, center, radii)
    if box is not None:
        arr[box][inside] = value


# ---------------------------------------------------------------------------
# Anatomy
# ---------------------------------------------------------------------------

class Anatomy:
    """Patient-specific body layout; every draw comes from one seeded RNG."""

    def __init__(self, profile, rng):
        p = profile
        fx = p.dims[0] * p.spacing_mm[0]
        fy = p.dims[1] * p.spacing_mm[1]
        self.length = p.dims[2] * p.spacing_mm[2]
        self.cx = rng.uniform(-6, 6)
        self.cy = rng.uniform(-6, 6)
        self.bx = min(0.47 * fx, 0.44 * fx * p.body_scale * rng.uniform(0.9, 1.05))
        self.by = min(0.45 * fy, self.bx * 0.8 * rng.uniform(0.9, 1.1))
        self.waves = [(rng.uniform(0, 0.06), rng.uniform(0.5, 2.5), rng.uniform(0, 2 * np.pi))
                      for _ in range(3)]
        self.t_neck = 0.80 + rng.uniform(-0.02, 0.02)
        self.t_head = self.t_neck + rng.uniform(0.035, 0.05)
        self.head_ax = (70 * rng.uniform(0.9, 1.1), 85 * rng.uniform(0.9, 1.1))
        s = p.uptake_scale
        self.soft_suv = rng.uniform(0.7, 1.1) * s
        L = self.length

        def jit(v, d):
            return v + rng.uniform(-d, d)

        self.liver = dict(c=(jit(-0.35 * self.bx, 8), jit(0.05 * self.by, 6), jit(0.52 * L, 10)),
                          r=(0.45 * self.bx * rng.uniform(0.85, 1.1), 0.6 * self.by * rng.uniform(0.85, 1.1),
                             rng.uniform(45, 65)),
                          suv=rng.uniform(1.8, 2.8) * s)
        self.spleen = dict(c=(jit(0.45 * self.bx, 6), jit(-0.2 * self.by, 6), jit(0.53 * L, 10)),
                           r=(rng.uniform(18, 28), rng.uniform(25, 40), rng.uniform(30, 45)),
                           suv=self.liver["suv"] * rng.uniform(0.8, 1.0))
        kz = jit(0.43 * L, 10)
        self.kidneys = [dict(c=(side * 0.5 * self.bx + rng.uniform(-5, 5), -0.35 * self.by, kz + rng.uniform(-8, 8)),
                             r=(rng.uniform(18, 25), rng.uniform(22, 30), rng.uniform(40, 55)),
                             suv=rng.uniform(2.5, 5.5) * s) for side in (-1, 1)]
        self.heart = dict(c=(jit(0.12 * self.bx, 6), jit(0.2 * self.by, 6), jit(0.64 * L, 8)),
                          r=(rng.uniform(38, 50), rng.uniform(32, 42), rng.uniform(35, 45)),
                          suv=rng.uniform(1.5, 10.0) * s)
        lz = jit(0.69 * L, 8)
        self.lungs = [dict(c=(side * 0.45 * self.bx, jit(0.0, 5), lz),
                           r=(0.38 * self.bx * rng.uniform(0.85, 1.05), 0.62 * self.by * rng.uniform(0.85, 1.05),
                              rng.uniform(0.12, 0.16) * L)) for side in (-1, 1)]
        self.bladder = dict(c=(jit(0.0, 8), jit(0.3 * self.by, 6), jit(0.07 * L, 6)),
                            r=(rng.uniform(25, 40), rng.uniform(20, 32), rng.uniform(18, 28)),
                            suv=rng.uniform(8.0, 60.0))
        self.brain_suv = rng.uniform(6.0, 12.0) * s
        self.spine_r = rng.uniform(12, 16)
        n_hot = rng.integers(p.n_hotspots[0], p.n_hotspots[1] + 1)
        self.tubes = []
        for _ in range(n_hot):
            z0 = rng.uniform(0.12, 0.5) * L
            pt = np.array([rng.uniform(-0.5, 0.5) * self.bx, rng.uniform(-0.4, 0.4) * self.by, z0])
            pts = [pt.copy()]
            direction = rng.normal(size=3)
            for _ in range(rng.integers(6, 12)):
                direction = 0.6 * direction + 0.4 * rng.normal(size=3)
                step = 10.0 * direction / (np.linalg.norm(direction) + 1e-9)
                pt = pt + step
                pt[0] = np.clip(pt[0], -0.6 * self.bx, 0.6 * self.bx)
                pt[1] = np.clip(pt[1], -0.5 * self.by, 0.5 * self.by)
                pt[2] = np.clip(pt[2], 0.1 * L, 0.55 * L)
                pts.append(pt.copy())
            self.tubes.append(dict(points=pts, radius=rng.uniform(4.0, 6.5),
                                   suv=rng.uniform(*p.hotspot_suv)))

    def body_axes(self, z):
        """Body ellipse semi-axes (bx, by) at heights ``z`` (mm)."""
        z = np.asarray(z, dtype=np.float64)
        t = z / self.length
        mod = 1.0 + sum(a * np.sin(2 * np.pi * f * t + ph) for a, f, ph in self.waves)
        bx = self.bx * mod
        by = self.by * mod
        neck = (t >= self.t_neck) & (t < self.t_head)
        bx = np.where(neck, 0.42 * self.bx, bx)
        by = np.where(neck, 0.55 * self.by, by)
        head = t >= self.t_head
        th = (t - self.t_head) / max(1.0 - self.t_head, 1e-6)
        taper = np.sqrt(np.clip(1.0 - (th - 0.45) ** 2 / 0.55 ** 2, 0.15, 1.0))
        bx = np.where(head, self.head_ax[0] * taper, bx)
        by = np.where(head, self.head_ax[1] * taper, by)
        return bx, by

    def body_mask(self, grid):
        x, y, z = grid.axes()
        bx, by = self.body_axes(z)
        return (((x[None, None, :] - self.cx) / bx[:, None, None]) ** 2
                + ((y[None, :, None] - self.cy) / by[:, None, None]) ** 2) <= 1.0

    def _organ_center(self, c):
        return (c[0] + self.cx, c[1] + self.cy, c[2])

    def _head_region(self, grid):
        _, _, z = grid.axes()
        return z / self.length >= self.t_head

    def pet(self, grid):
        body = self.body_mask(grid)
        pet = np.where(body, self.soft_suv, 0.0)
        x, y, z = grid.axes()
        # spine marrow
        spine = ((x[None, None, :] - self.cx) ** 2
                 + (y[None, :, None] - (self.cy - 0.72 * self.by)) ** 2 <= self.spine_r ** 2)
        spine = spine & (z[:, None, None] / self.length < self.t_head) & body
        pet[spine] = 1.4 * self.soft_suv
        for lung in self.lungs:
            _paint(pet, grid, self._organ_center(lung["c"]), lung["r"], 0.35 * self.soft_suv)
        for organ in (self.liver, self.spleen, *self.kidneys, self.heart, self.bladder):
            _paint(pet, grid, self._organ_center(organ["c"]), organ["r"], organ["suv"])
        for tube in self.tubes:
            for pt in tube["points"]:
                r = tube["radius"]
                _paint(pet, grid, self._organ_center(pt), (r, r, r), tube["suv"])
        head = self._head_region(grid)[:, None, None] & body
        bx, by = self.body_axes(z)
        inner = (((x[None, None, :] - self.cx) / (0.85 * bx[:, None, None])) ** 2
                 + ((y[None, :, None] - self.cy) / (0.85 * by[:, None, None])) ** 2) <= 1.0
        pet[head & inner] = self.brain_suv
        pet[~body] = 0.0
        return pet

    def ct(self, grid):
        body = self.body_mask(grid)
        x, y, z = grid.axes()
        bx, by = self.body_axes(z)
        ct = np.full(grid.shape, -1000.0)
        ct[body] = -90.0  # subcutaneous fat
        inner = (((x[None, None, :] - self.cx) / (bx[:, None, None] - 12)) ** 2
                 + ((y[None, :, None] - self.cy) / (by[:, None, None] - 12)) ** 2) <= 1.0
        ct[inner & body] = 40.0
        for lung in self.lungs:
            _paint(ct, grid, self._organ_center(lung["c"]), lung["r"], -820.0)
        for organ, hu in ((self.liver, 60.0), (self.spleen, 50.0), (self.kidneys[0], 35.0),
                          (self.kidneys[1], 35.0), (self.heart, 45.0), (self.bladder, 5.0)):
            _paint(ct, grid, self._organ_center(organ["c"]), organ["r"], hu)
        head = self._head_region(grid)[:, None, None] & body
        skull_in = (((x[None, None, :] - self.cx) / (0.85 * bx[:, None, None])) ** 2
                    + ((y[None, :, None] - self.cy) / (0.85 * by[:, None, None])) ** 2) <= 1.0
        ct[head & ~skull_in] = 900.0
        ct[head & skull_in] = 35.0
        spine = ((x[None, None, :] - self.cx) ** 2
                 + (y[None, :, None] - (self.cy - 0.72 * self.by)) ** 2 <= self.spine_r ** 2)
        ct[spine & (z[:, None, None] / self.length < self.t_head) & body] = 650.0
        return ct


# ---------------------------------------------------------------------------
# Tumor planning
# ---------------------------------------------------------------------------

@dataclass
class TumorPlan:
    volume_ml: float
    station: int
    z_offset: float      # in [-1, 1] station half-widths
    xy_aspect: float
    z_aspect: float
    suv_max: float
    placement_u: tuple = field(default_factory=tuple)


@dataclass
class PatientPlan:
    index: int
    patient_id: str
    tmtv_ml: float
    tumors: list


def _seed_seq(seed, profile, *keys):
    code = zlib.crc32(profile.name.encode("utf-8"))
    return np.random.SeedSequence(entropy=int(seed), spawn_key=(code, int(profile.anatomy_seed), *keys))


def _rng(seed, profile, *keys):
    return np.random.default_rng(_seed_seq(seed, profile, *keys))


def _sample_tmtv(profile, rng, n):
    mean, (lo, hi) = profile.tmtv_target_ml
    sigma = profile.tmtv_log_sigma
    raw = rng.lognormal(np.log(mean) - sigma ** 2 / 2, sigma, size=n)
    vals = raw.copy()
    for _ in range(20):
        vals = np.clip(vals, lo, hi)
        vals *= mean / vals.mean()
    return np.clip(vals, lo, hi)


def plan_cohort(profile, seed):
    """Draws tumor counts, volumes, stations and SUVmax for every patient."""
    n = profile.n_patients
    rng = _rng(seed, profile, 0)
    tmtvs = _sample_tmtv(profile, rng, n)
    mean_n, max_n = profile.tumor_count_dist
    plans = []
    for i in range(n):
        prng = _rng(seed, profile, 1, i)
        r = 0.8
        mu = mean_n - 1.0
        extra = prng.negative_binomial(r, r / (r + mu)) if mu > 0 else 0
        count = int(min(1 + extra, max_n))
        shares = prng.dirichlet(np.full(count, 1.0))
        vols = list(np.maximum(shares * tmtvs[i], 0.05))
        while max(vols) > MAX_TUMOR_ML:
            j = int(np.argmax(vols))
            v = vols.pop(j)
            vols += [v / 2, v / 2]
        k_st = min(len(STATIONS), len(vols), 1 + prng.binomial(3, min(0.9, 0.08 * len(vols))))
        w = np.asarray(STATION_WEIGHTS) / sum(STATION_WEIGHTS)
        stations = prng.choice(len(STATIONS), size=k_st, replace=False, p=w)
        # nodes at one station cluster around a patient-specific height
        station_offset = prng.uniform(-1, 1, size=len(STATIONS))
        mu_s, sd_s = profile.suvmax_dist
        lo_s, hi_s = profile.suvmax_range
        tumors = []
        for v in vols:
            station = int(stations[prng.integers(k_st)])
            if station == len(STATIONS) - 1 and v > 20.0:
                station = len(STATIONS) - 2  # bulky disease sits below the neck
            tumors.append(TumorPlan(
                volume_ml=float(v),
                station=station,
                z_offset=float(np.clip(station_offset[station] + prng.uniform(-0.25, 0.25), -1, 1)),
                xy_aspect=float(prng.uniform(0.7, 1.4)),
                z_aspect=float(prng.uniform(0.7, 1.4)),
                suv_max=float(np.clip(prng.lognormal(mu_s, sd_s), lo_s, hi_s)),
                placement_u=tuple(float(u) for u in prng.uniform(size=64)),
            ))
        plans.append(PatientPlan(i, f"{profile.name}-{i:03d}", float(tmtvs[i]), tumors))
    return plans


def _station_slice(profile, t):
    zc, hw = STATIONS[t.station]
    return (zc + t.z_offset * hw) * profile.dims[2] - 0.5


def _tumor_geometry(profile, t, squash, inplane, anatomy):
    """Mask semi-axes (A, B, C) in mm and center slice k for one tumor.

    ``squash`` trades z-extent for in-plane extent at fixed volume and
    ``inplane`` scales the in-plane extent. In-plane axes are capped at a fixed
    fraction of the local body width; whatever volume that removes is put back along z.
    """
    nz = profile.dims[2]
    sz = profile.spacing_mm[2]
    delta = SHOULDER_K * profile.tumor_falloff_mm
    c_min, c_max = delta + 0.5, 0.25 * nz * sz
    r0 = (3.0 * t.volume_ml * 1000.0 / (4.0 * np.pi)) ** (1.0 / 3.0)
    vol = r0 ** 3 * inplane ** 2
    c = float(np.clip((squash * t.z_aspect) ** (2.0 / 3.0) * r0, c_min, c_max))
    k0 = _station_slice(profile, t)
    ab = vol / c
    a, b = np.sqrt(ab * t.xy_aspect), np.sqrt(ab / t.xy_aspect)
    half = max(c, 12.0)
    zs = np.linspace(max((k0 + 0.5) * sz - half, 0.0), min((k0 + 0.5) * sz + half, nz * sz), 5)
    bxs, bys = anatomy.body_axes(zs)
    fit = max(a / (IN_PLANE_CAP * bxs.min()), b / (IN_PLANE_CAP * bys.min()), 1.0)
    if fit > 1.0:
        a, b = a / fit, b / fit
        c = float(np.clip(vol / (a * b), c_min, c_max))
    a, b = max(a, delta + 0.5), max(b, delta + 0.5)
    margin = int(np.floor(c / sz)) + 1
    k = int(np.clip(int(round(k0)), margin, nz - 1 - margin))
    return float(a), float(b), c, k


def _covered_slices(profile, plan, anatomy, squash, inplane):
    nz = profile.dims[2]
    sz = profile.spacing_mm[2]
    covered = np.zeros(nz, dtype=bool)
    for t in plan.tumors:
        _, _, c, k = _tumor_geometry(profile, t, squash, inplane, anatomy)
        reach = int(np.floor(c / sz + 1e-9))
        covered[max(k - reach, 0) : k + reach + 1] = True
    return covered


def predicted_positive_fraction(profile, plans, anatomies, squash, inplane=1.0):
    total = sum(_covered_slices(profile, p, a, squash, inplane).sum() for p, a in zip(plans, anatomies))
    return total / (len(plans) * profile.dims[2])


def calibrate_squash(profile, plans, anatomies, inplane=1.0, lo=0.02, hi=30.0, iters=60):
    """Bisects the tumor z-aspect factor so the predicted positive fraction hits the target."""
    target = profile.target_positive_fraction

    def frac(sq):
        return predicted_positive_fraction(profile, plans, anatomies, sq, inplane)

    f_lo, f_hi = frac(lo), frac(hi)
    if not f_lo <= target <= f_hi:
        raise ValueError(
            f"{profile.name}: target positive fraction {target:.3f} outside achievable "
            f"range [{f_lo:.3f}, {f_hi:.3f}] for this profile"
        )
    for _ in range(iters):
        mid = np.sqrt(lo * hi)
        if frac(mid) < target:
            lo = mid
        else:
            hi = mid
    return lo if abs(frac(lo) - target) < abs(frac(hi) - target) else hi


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

def _place_tumors(profile, plan, anatomy, grid, body, squash, inplane):
    """Turns a patient's tumor plans into TumorSpecs that fit inside the body.

    Only in-plane size and position are adjusted; the z-extent (and hence
    slice coverage) is exactly what calibration assumed.
    """
    sx, sy, sz = profile.spacing_mm
    delta = SHOULDER_K * profile.tumor_falloff_mm
    x_ax, y_ax, z_ax = grid.axes()
    specs, boxes = [], []
    for t in plan.tumors:
        a, b, c, k = _tumor_geometry(profile, t, squash, inplane, anatomy)
        reach = int(np.floor(c / sz + 1e-9))
        bxs, bys = anatomy.body_axes(z_ax[max(k - reach, 0) : k + reach + 1])
        bx, by = float(bxs.min()) - 1.5 * sx, float(bys.min()) - 1.5 * sy
        fit = np.hypot(a / bx, b / by)
        if fit > 0.95:
            a, b = a * 0.95 / fit, b * 0.95 / fit
        u = t.placement_u
        best, best_overlap = None, None
        for trial in range(len(u) // 2):
            ux, uy = 2 * u[2 * trial] - 1, 2 * u[2 * trial + 1] - 1
            # farthest bounding-box corner must stay inside the body ellipse
            x_room = bx - a
            y_room = by - b
            x0, y0 = ux * x_room, uy * y_room
            if ((abs(x0) + a) / bx) ** 2 + ((abs(y0) + b) / by) ** 2 > 1.0:
                continue
            overlap = sum(
                max(0.0, min(k + reach, k2 + r2) - max(k - reach, k2 - r2) + 1)
                * max(0.0, a + a2 - abs(x0 - x2)) * max(0.0, b + b2 - abs(y0 - y2))
                for (x2, y2, k2, r2, a2, b2) in boxes
            )
            if best is None or overlap < best_overlap:
                best, best_overlap = (x0, y0), overlap
            if overlap == 0:
                break
        if best is None:
            best = (0.0, 0.0)
            fit = np.hypot(a / bx, b / by)
            if fit > 0.95:
                a, b = a * 0.95 / fit, b * 0.95 / fit
        x0, y0 = best
        i, j, _ = grid.index_of(x0 + anatomy.cx, y0 + anatomy.cy, z_ax[k])
        boxes.append((x0, y0, k, reach, a, b))
        specs.append(TumorSpec((i, j, k), (max(a - delta, 0.5), max(b - delta, 0.5), max(c - delta, 0.5)),
                               t.suv_max, profile.tumor_falloff_mm))
    return specs


def _render_mask(profile, grid, body, specs):
    vol = PatientVolume("tmp", profile.name, np.zeros(grid.shape, np.float32),
                        np.zeros((1, 1, 1), np.float32), profile.spacing_mm,
                        np.zeros(grid.shape, np.uint8), body_mask=body)
    for spec in specs:
        _plant_with_shrink(vol, spec)
    return vol.tumor_mask


def _plant_with_shrink(vol, spec):
    """Plants ``spec``; if its mask pokes out of the body, shrinks it in-plane and retries.

    A tumor sitting on a hot organ (or an earlier tumor) is lifted to 1 SUV
    above the local background so it still stands out.
    """
    i, j, k = spec.center_voxel
    bg = float(vol.pet[k, j, i])
    if spec.suv_max <= bg + 1.0:
        spec = TumorSpec(spec.center_voxel, spec.radii_mm, bg + 1.0, spec.falloff_mm)
    for _ in range(12):
        try:
            return plant_tumor_inplace(vol, spec)
        except ValueError as exc:
            if "outside the body" not in str(exc):
                raise
            a, b, c = spec.radii_mm
            spec = TumorSpec(spec.center_voxel, (max(a * 0.8, 0.5), max(b * 0.8, 0.5), c),
                             spec.suv_max, spec.falloff_mm)
    raise ValueError(f"could not fit tumor at {spec.center_voxel} inside the body")


def calibrate_inplane(profile, plans, anatomies, grid, bodies, squash, scale=1.0, iters=4):
    """Scales tumor in-plane extent so the realized mean TMTV matches the target."""
    target = profile.tmtv_target_ml[0]
    for _ in range(iters):
        vols = []
        for plan, anat, body in zip(plans, anatomies, bodies):
            specs = _place_tumors(profile, plan, anat, grid, body, squash, scale)
            vols.append(tmtv(_render_mask(profile, grid, body, specs), profile.spacing_mm))
        realized = float(np.mean(vols))
        if realized <= 0:
            break
        ratio = target / realized
        if abs(ratio - 1.0) < 0.01:
            break
        scale *= np.sqrt(ratio)
    return scale


def render_patient(profile, plan, anatomy, seed, squash, inplane):
    pet_grid = Grid((profile.dims[2], profile.dims[1], profile.dims[0]), profile.spacing_mm)
    cdims = profile.ct_dims
    ct_grid = Grid((cdims[2], cdims[1], cdims[0]), profile.ct_spacing_mm)
    body = anatomy.body_mask(pet_grid)

    pet = anatomy.pet(pet_grid)
    sigma = [profile.pet_fwhm_mm / 2.3548 / s for s in (profile.spacing_mm[2], profile.spacing_mm[1],
                                                        profile.spacing_mm[0])]
    pet = ndimage.gaussian_filter(pet, sigma, mode="constant")
    ct = anatomy.ct(ct_grid)

    vol = PatientVolume(plan.patient_id, profile.name, pet.astype(np.float32), ct,
                        profile.spacing_mm, np.zeros(pet.shape, np.uint8),
                        ct_spacing_mm=profile.ct_spacing_mm, body_mask=body)
    for spec in _place_tumors(profile, plan, anatomy, pet_grid, body, squash, inplane):
        _plant_with_shrink(vol, spec)

    nrng = _rng(seed, profile, 3, plan.index)
    noise = ndimage.gaussian_filter(nrng.standard_normal(pet.shape), 0.6)
    noise /= noise.std() + 1e-12
    pet = vol.pet.astype(np.float64)
    pet = pet + profile.pet_noise * np.sqrt(np.maximum(pet, 0.0)) * noise
    pet[~body] = 0.0
    vol.pet = np.maximum(pet, 0.0).astype(np.float32)

    ct = ct + 15.0 * nrng.standard_normal(ct.shape)
    n_out = int(profile.ct_outlier_fraction * ct.size)
    if n_out:
        flat = nrng.choice(ct.size, size=n_out, replace=False)
        ct.reshape(-1)[flat] = nrng.uniform(2000.0, 3000.0, size=n_out)
    vol.ct = ct.astype(np.float32)
    return vol


def generate_cohort(profile, seed):
    """Deterministic synthetic cohort for one center.

    The cohort positive-slice fraction is calibrated to
    ``profile.target_positive_fraction`` and the mean TMTV to
    ``profile.tmtv_target_ml[0]``.
    """
    profile.validate()
    plans = plan_cohort(profile, seed)
    pet_grid = Grid((profile.dims[2], profile.dims[1], profile.dims[0]), profile.spacing_mm)
    anatomies = [Anatomy(profile, _rng(seed, profile, 2, p.index)) for p in plans]
    bodies = [a.body_mask(pet_grid) for a in anatomies]
    # coverage depends on in-plane scale only through the body-width cap, so alternate
    inplane = 1.0
    for _ in range(3):
        squash = calibrate_squash(profile, plans, anatomies, inplane)
        inplane = calibrate_inplane(profile, plans, anatomies, pet_grid, bodies, squash, inplane)
    squash = calibrate_squash(profile, plans, anatomies, inplane)
    log.info("%s: squash %.3f, in-plane scale %.3f", profile.name, squash, inplane)
    return [render_patient(profile, plan, anat, seed, squash, inplane)
            for plan, anat in zip(plans, anatomies)]


def cohort_stats(volumes):
    """Positive-slice fraction, mean TMTV (ml) and mean tumor count of a cohort."""
    pos = sum(int(np.any(v.tumor_mask, axis=(1, 2)).sum()) for v in volumes)
    total = sum(v.pet.shape[0] for v in volumes)
    return {
        "positive_fraction": pos / total,
        "mean_tmtv_ml": float(np.mean([tmtv(v.tumor_mask, v.spacing_mm) for v in volumes])),
        "mean_tumor_count": float(np.mean([len(v.tumors) for v in volumes])),
        "n_slices": total,
        "n_positive_slices": pos,
    }
