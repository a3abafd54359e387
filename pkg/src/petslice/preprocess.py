"""Volume-to-slice preprocessing.

Order of operations per patient: resample CT onto the PET grid, median
filter the CT, clip and normalize each axial slice, resize it, then stack
the channels.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .phantom.volio import read_manifest, read_volume

PET_CLIP = 50.0
CT_CLIP = (-1024.0, 1024.0)
MODES = ("PPP", "PPC")


@dataclass
class SliceSample:
    patient_id: str
    center_id: str
    slice_index: int
    input: np.ndarray   # (3, H, W) float32 in [0, 1]
    label: int
    tumor_suvmax: float = None
    input_mode: str = "PPP"

    @property
    def sample_id(self):
        return f"{self.patient_id}:{self.slice_index}"


def _axis_weights(n_out, s_out, o_out, n_src, s_src, o_src):
    """Linear-interpolation indices and weights along one axis (edge clamped)."""
    centers = o_out + (np.arange(n_out) + 0.5) * s_out
    u = (centers - o_src) / s_src - 0.5
    i0 = np.floor(u).astype(np.int64)
    t = u - i0
    lo = np.clip(i0, 0, n_src - 1)
    hi = np.clip(i0 + 1, 0, n_src - 1)
    return lo, hi, t


def resample_ct_to_pet(ct, ct_spacing_mm, pet_dims, pet_spacing_mm, ct_origin_mm=(0, 0, 0),
                       pet_origin_mm=(0, 0, 0)):
    """Trilinear resampling of a (z, y, x) CT grid onto the PET grid.

    ``pet_dims`` is (nx, ny, nz). Voxel k of an axis with spacing s and
    origin o has its center at o + (k + 0.5) * s. Samples past the CT edge
    take the nearest edge value.
    """
    ct = np.asarray(ct, dtype=np.float64)
    nz, ny, nx = ct.shape
    src_n = (nx, ny, nz)
    for a in range(3):
        s_lo, s_hi = ct_origin_mm[a], ct_origin_mm[a] + src_n[a] * ct_spacing_mm[a]
        d_lo, d_hi = pet_origin_mm[a], pet_origin_mm[a] + pet_dims[a] * pet_spacing_mm[a]
        if d_hi <= s_lo or s_hi <= d_lo:
            raise ValueError(
                f"CT and PET extents do not overlap along axis {'xyz'[a]}: "
                f"CT [{s_lo}, {s_hi}] mm vs PET [{d_lo}, {d_hi}] mm"
            )
    out = ct
    # (array axis, geometry axis) pairs: z is axis 0 of the array, x axis 2
    for arr_axis, geo in ((0, 2), (1, 1), (2, 0)):
        lo, hi, t = _axis_weights(pet_dims[geo], pet_spacing_mm[geo], pet_origin_mm[geo],
                                  src_n[geo], ct_spacing_mm[geo], ct_origin_mm[geo])
        shape = [1, 1, 1]
        shape[arr_axis] = -1
        t = t.reshape(shape)
        out = np.take(out, lo, axis=arr_axis) * (1.0 - t) + np.take(out, hi, axis=arr_axis) * t
    return out


def median_filter_3d(volume, window=5):
    """Median over a window^3 neighborhood with edge-replicating padding."""
    if window < 1 or window % 2 == 0:
        raise ValueError(f"median window must be a positive odd integer, got {window}")
    return ndimage.median_filter(np.asarray(volume), size=window, mode="nearest")


def normalize_pet_slice(pet_slice):
    """SUV clipped to [0, 50] and divided by 50."""
    x = np.asarray(pet_slice, dtype=np.float64)
    if np.any(x < 0):
        raise ValueError(f"PET values must be >= 0; found minimum {x.min():.4g}")
    return np.minimum(x, PET_CLIP) / PET_CLIP


def normalize_ct_slice(ct_slice):
    """HU clipped to [-1024, 1024] and mapped linearly onto [0, 1]."""
    lo, hi = CT_CLIP
    x = np.clip(np.asarray(ct_slice, dtype=np.float64), lo, hi)
    return (x - lo) / (hi - lo)


def resize_slice(image, target):
    """Bilinear resize with corner-aligned sampling (corner pixels map onto corner pixels)."""
    H, W = target
    if H < 2 or W < 2:
        raise ValueError(f"target size must be at least 2x2, got {target}")
    img = np.asarray(image, dtype=np.float64)
    h, w = img.shape
    if (h, w) == (H, W):
        return img.copy()

    def coords(n_in, n_out):
        u = np.arange(n_out) * ((n_in - 1) / (n_out - 1)) if n_in > 1 else np.zeros(n_out)
        i0 = np.minimum(np.floor(u).astype(np.int64), n_in - 1)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, u - i0

    r0, r1, tr = coords(h, H)
    c0, c1, tc = coords(w, W)
    rows = img[r0] * (1.0 - tr)[:, None] + img[r1] * tr[:, None]
    return rows[:, c0] * (1.0 - tc)[None, :] + rows[:, c1] * tc[None, :]


def assemble_input(pet_slice, ct_slice, mode):
    """Three-channel network input: PPP = [PET, PET, PET], PPC = [PET, PET, CT]."""
    if mode not in MODES:
        raise ValueError(f"input mode must be one of {MODES}, got {mode!r}")
    pet_slice = np.asarray(pet_slice)
    if mode == "PPP":
        third = pet_slice
    else:
        if ct_slice is None or np.shape(ct_slice) != pet_slice.shape:
            raise ValueError(f"PET slice {pet_slice.shape} and CT slice {np.shape(ct_slice)} differ in shape")
        third = np.asarray(ct_slice)
    return np.stack([pet_slice, pet_slice, third]).astype(np.float32)


def preprocess_volume(pet, ct, ct_spacing_mm, pet_spacing_mm, mode="PPP", size=(64, 64), median_window=5):
    """All axial slices of one patient as a (nz, 3, H, W) float32 array."""
    nz, ny, nx = pet.shape
    ct_norm = None
    if mode == "PPC":
        ct_on_pet = resample_ct_to_pet(ct, ct_spacing_mm, (nx, ny, nz), pet_spacing_mm)
        ct_on_pet = median_filter_3d(ct_on_pet, median_window)
    out = np.empty((nz, 3, size[0], size[1]), dtype=np.float32)
    for k in range(nz):
        p = resize_slice(normalize_pet_slice(pet[k]), size)
        if mode == "PPC":
            ct_norm = resize_slice(normalize_ct_slice(ct_on_pet[k]), size)
        out[k] = assemble_input(p, ct_norm, mode)
    return out


# ---------------------------------------------------------------------------
# Packed sample files
# ---------------------------------------------------------------------------

def write_packed(path, array):
    """One JSON header line ``{"dtype": "f32le", "shape": [...]}`` then the raw payload."""
    header = (json.dumps({"dtype": "f32le", "shape": list(array.shape)}, sort_keys=True) + "\n").encode()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(array, dtype="<f4").tobytes())
    return len(header)


def read_packed(path):
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        data = np.frombuffer(fh.read(), dtype="<f4")
    return data.reshape(header["shape"]).astype(np.float32)


def build_slice_dataset(cohort_paths, out_dir, mode="PPP", size=(64, 64), median_window=5, config_hash=None):
    """Preprocesses every patient of one or more cohorts into packed sample files.

    ``cohort_paths`` are ``cohort.json`` manifests. Writes ``dataset.json``
    into ``out_dir`` and returns the manifest dict.
    """
    if mode not in MODES:
        raise ValueError(f"input mode must be one of {MODES}, got {mode!r}")
    if isinstance(cohort_paths, (str, Path)):
        cohort_paths = [cohort_paths]
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for cp in cohort_paths:
        root = Path(cp).parent
        records += [(root, r) for r in read_manifest(cp)]
    records.sort(key=lambda rr: rr[1]["patient_id"])

    samples, patients = [], []
    sample_bytes = 3 * size[0] * size[1] * 4
    for root, rec in records:
        for key in ("PET", "CT"):
            path = root / rec["paths"][key]
            if not path.exists():
                raise FileNotFoundError(f"missing {key} volume for {rec['patient_id']}: {path}")
        pet, _ = read_volume(root / rec["paths"]["PET"])
        ct, _ = read_volume(root / rec["paths"]["CT"])
        arr = preprocess_volume(pet, ct, rec["ct_spacing_mm"], rec["spacing_mm"], mode, size, median_window)
        fname = f"{rec['patient_id']}.f32"
        head = write_packed(out_dir / fname, arr)
        patients.append({"patient_id": rec["patient_id"], "center_id": rec["center_id"], "file": fname,
                         "first_sample": len(samples), "n_slices": int(arr.shape[0])})
        for s in rec["slices"]:
            k = s["slice_index"]
            samples.append({
                "patient_id": rec["patient_id"], "center_id": rec["center_id"], "slice_index": k,
                "label": int(s["label"]), "tumor_suvmax": s["tumor_suvmax"], "file": fname,
                "offset": head + k * sample_bytes,
            })
    manifest = {
        "config_hash": config_hash,
        "input_mode": mode,
        "input_size": list(size),
        "median_window": median_window,
        "patients": patients,
        "samples": samples,
        "summary": dataset_summary(samples),
    }
    (out_dir / "dataset.json").write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n")
    return manifest


def dataset_summary(samples):
    """Per-center slice bookkeeping: totals, positives, negatives, patient counts."""
    out = {}
    for s in samples:
        c = out.setdefault(s["center_id"], {"n_slices": 0, "n_positive": 0, "patients": set()})
        c["n_slices"] += 1
        c["n_positive"] += s["label"]
        c["patients"].add(s["patient_id"])
    for c in out.values():
        c["n_negative"] = c["n_slices"] - c["n_positive"]
        c["n_patients"] = len(c.pop("patients"))
        c["positive_fraction"] = c["n_positive"] / c["n_slices"]
    return {k: out[k] for k in sorted(out)}


def format_summary(summary):
    lines = [f"{'center':<8} {'patients':>8} {'slices':>8} {'positive':>9} {'negative':>9} {'pos%':>6}"]
    for name, c in summary.items():
        lines.append(f"{name:<8} {c['n_patients']:>8} {c['n_slices']:>8} {c['n_positive']:>9} "
                     f"{c['n_negative']:>9} {100 * c['positive_fraction']:>6.2f}")
    return "\n".join(lines)


def load_dataset(dataset_dir):
    """Returns ``(inputs (N, 3, H, W) float32, sample records)`` in manifest order."""
    dataset_dir = Path(dataset_dir)
    manifest = json.loads((dataset_dir / "dataset.json").read_text())
    arrays = [read_packed(dataset_dir / p["file"]) for p in manifest["patients"]]
    inputs = np.concatenate(arrays) if arrays else np.zeros((0, 3, *manifest["input_size"]), np.float32)
    return inputs, manifest["samples"], manifest
