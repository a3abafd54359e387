"""Volume containers, tumor planting and per-slice ground truth."""

from dataclasses import dataclass, field, replace

import numpy as np

# mask = voxels where the tumor's intensity profile is >= 41% of its peak
MASK_THRESHOLD = 0.41
# distance (in falloff widths) outside the core where the Gaussian shoulder drops to MASK_THRESHOLD
SHOULDER_K = float(np.sqrt(2.0 * np.log(1.0 / MASK_THRESHOLD)))


@dataclass
class TumorSpec:
    center_voxel: tuple      # (i, j, k) = (x, y, z) voxel indices
    radii_mm: tuple          # core semi-axes (a, b, c) along x, y, z
    suv_max: float
    falloff_mm: float = 2.0  # Gaussian shoulder width outside the core

    def __post_init__(self):
        self.center_voxel = tuple(int(v) for v in self.center_voxel)
        self.radii_mm = tuple(float(v) for v in self.radii_mm)
        if any(r <= 0 for r in self.radii_mm):
            raise ValueError(f"tumor radii must be positive, got {self.radii_mm}")
        if self.falloff_mm < 0:
            raise ValueError(f"falloff must be >= 0, got {self.falloff_mm}")

    @property
    def mask_radii_mm(self):
        """Semi-axes of the thresholded mask along the principal axes."""
        d = SHOULDER_K * self.falloff_mm
        return tuple(r + d for r in self.radii_mm)


@dataclass
class PatientVolume:
    """One synthetic patient.

    Arrays are indexed (z, y, x): ``pet[k]`` is axial slice k. ``ct`` lives
    on its own grid (``ct_spacing_mm``) covering the same physical box as
    the PET grid until it is resampled.
    """

    patient_id: str
    center_id: str
    pet: np.ndarray
    ct: np.ndarray
    spacing_mm: tuple
    tumor_mask: np.ndarray
    ct_spacing_mm: tuple = None
    body_mask: np.ndarray = None
    tumors: list = field(default_factory=list)

    def __post_init__(self):
        self.spacing_mm = tuple(float(v) for v in self.spacing_mm)
        self.ct_spacing_mm = tuple(float(v) for v in (self.ct_spacing_mm or self.spacing_mm))
        if self.tumor_mask.shape != self.pet.shape:
            raise ValueError(f"mask shape {self.tumor_mask.shape} != PET shape {self.pet.shape}")

    @property
    def dims(self):
        """(nx, ny, nz) of the PET grid."""
        nz, ny, nx = self.pet.shape
        return nx, ny, nz

    @property
    def voxel_volume_mm3(self):
        sx, sy, sz = self.spacing_mm
        return sx * sy * sz


def tmtv(mask, spacing_mm):
    """Total metabolic tumor volume in ml."""
    sx, sy, sz = spacing_mm
    return float(np.count_nonzero(mask)) * sx * sy * sz / 1000.0


def tumor_profile(shape, spacing_mm, spec):
    """Evaluates the tumor's normalized intensity profile in its bounding box.

    Returns ``(slices, f)`` where ``f`` in [0, 1] is 1 on the core ellipsoid
    and decays as a Gaussian of the (radial) distance outside it.
    """
    sx, sy, sz = spacing_mm
    ci, cj, ck = spec.center_voxel
    a, b, c = spec.radii_mm
    w = spec.falloff_mm
    reach = 3.0 * w + 1e-9
    nz, ny, nx = shape
    lo_hi = []
    for center, radius, step, n in ((ck, c, sz, nz), (cj, b, sy, ny), (ci, a, sx, nx)):
        half = int(np.ceil((radius + reach) / step))
        lo_hi.append((max(center - half, 0), min(center + half + 1, n)))
    (z0, z1), (y0, y1), (x0, x1) = lo_hi
    dz = ((np.arange(z0, z1) - ck) * sz)[:, None, None]
    dy = ((np.arange(y0, y1) - cj) * sy)[None, :, None]
    dx = ((np.arange(x0, x1) - ci) * sx)[None, None, :]
    rho = np.sqrt((dx / a) ** 2 + (dy / b) ** 2 + (dz / c) ** 2)
    r = np.sqrt(dx * dx + dy * dy + dz * dz)
    with np.errstate(divide="ignore", invalid="ignore"):
        dist = np.where(rho > 1.0, r * (1.0 - 1.0 / rho), 0.0)
    if w > 0:
        f = np.exp(-(dist * dist) / (2.0 * w * w))
    else:
        f = (rho <= 1.0).astype(np.float64)
    return (slice(z0, z1), slice(y0, y1), slice(x0, x1)), f


def plant_tumor_inplace(volume, spec):
    """Blends a tumor into ``volume.pet`` and ``volume.tumor_mask`` in place."""
    nz, ny, nx = volume.pet.shape
    ci, cj, ck = spec.center_voxel
    if not (0 <= ci < nx and 0 <= cj < ny and 0 <= ck < nz):
        raise ValueError(f"tumor center {spec.center_voxel} outside grid {volume.dims}")
    bg = float(volume.pet[ck, cj, ci])
    if not spec.suv_max > bg:
        raise ValueError(f"tumor suv_max {spec.suv_max:.3f} not above background {bg:.3f} at its center")
    box, f = tumor_profile(volume.pet.shape, volume.spacing_mm, spec)
    inside = f >= MASK_THRESHOLD
    if volume.body_mask is not None and np.any(inside & ~volume.body_mask[box]):
        raise ValueError(f"tumor at {spec.center_voxel} with radii {spec.radii_mm} extends outside the body")
    region = volume.pet[box]
    region += ((spec.suv_max - region) * f).astype(region.dtype)
    volume.tumor_mask[box] |= inside.astype(volume.tumor_mask.dtype)
    volume.tumors.append(spec)
    return volume


def plant_tumor(volume, spec):
    """Returns a copy of ``volume`` with the tumor planted.

    Inside the core the PET value is raised to ``suv_max``; outside it the
    blend weight falls off as a Gaussian shoulder. The mask marks voxels
    whose weight is at least 41% of the peak.
    """
    out = replace(
        volume,
        pet=volume.pet.copy(),
        tumor_mask=volume.tumor_mask.copy(),
        tumors=list(volume.tumors),
    )
    return plant_tumor_inplace(out, spec)


def slice_ground_truth(volume):
    """Per axial slice: ``(label, tumor_suvmax)``; suvmax is None on negative slices."""
    out = []
    mask = volume.tumor_mask.astype(bool)
    for k in range(mask.shape[0]):
        m = mask[k]
        if m.any():
            out.append((1, float(volume.pet[k][m].max())))
        else:
            out.append((0, None))
    return out
