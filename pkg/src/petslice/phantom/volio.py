"""On-disk volumes and cohort manifests.

A volume is a JSON header ``<stem>.vol.json`` plus a raw little-endian
payload ``<stem>.vol.raw`` in row-major order with x varying fastest,
i.e. a C-order dump of the (z, y, x) array.
"""

import json
from pathlib import Path

import numpy as np

from .volume import PatientVolume, slice_ground_truth, tmtv

DTYPES = {"f32le": "<f4", "u8": "u1"}
MODALITY_DTYPE = {"PET": "f32le", "CT": "f32le", "MASK": "u8"}


def write_volume(directory, stem, array, spacing_mm, modality, config_hash=None):
    """Writes one volume; returns the header path."""
    if modality not in MODALITY_DTYPE:
        raise ValueError(f"unknown modality {modality!r}")
    dtype = MODALITY_DTYPE[modality]
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    nz, ny, nx = array.shape
    header = {
        "dims": [nx, ny, nz],
        "spacing_mm": [float(s) for s in spacing_mm],
        "modality": modality,
        "dtype": dtype,
    }
    if config_hash is not None:
        header["config_hash"] = config_hash
    head_path = directory / f"{stem}.vol.json"
    raw_path = directory / f"{stem}.vol.raw"
    raw_path.write_bytes(np.ascontiguousarray(array, dtype=DTYPES[dtype]).tobytes())
    head_path.write_text(json.dumps(header, sort_keys=True, indent=1) + "\n")
    return head_path


def read_volume(head_path):
    """Returns ``(array indexed (z, y, x), header)``."""
    head_path = Path(head_path)
    if not head_path.exists():
        raise FileNotFoundError(f"volume header not found: {head_path}")
    header = json.loads(head_path.read_text())
    raw_path = head_path.with_name(head_path.name[: -len(".json")] + ".raw")
    if not raw_path.exists():
        raise FileNotFoundError(f"volume payload not found: {raw_path}")
    nx, ny, nz = header["dims"]
    data = np.frombuffer(raw_path.read_bytes(), dtype=DTYPES[header["dtype"]])
    if data.size != nx * ny * nz:
        raise ValueError(f"{raw_path}: {data.size} values, header expects {nx * ny * nz}")
    return data.reshape(nz, ny, nx).copy(), header


def patient_record(volume, paths):
    """Manifest entry for one patient; ``paths`` maps modality to header path."""
    truth = slice_ground_truth(volume)
    return {
        "patient_id": volume.patient_id,
        "center_id": volume.center_id,
        "paths": {k: str(v) for k, v in paths.items()},
        "spacing_mm": list(volume.spacing_mm),
        "ct_spacing_mm": list(volume.ct_spacing_mm),
        "n_slices": len(truth),
        "tmtv_ml": tmtv(volume.tumor_mask, volume.spacing_mm),
        "tumors": [
            {"center_voxel": list(t.center_voxel), "radii_mm": list(t.radii_mm),
             "suv_max": t.suv_max, "falloff_mm": t.falloff_mm}
            for t in volume.tumors
        ],
        "slices": [{"slice_index": k, "label": lab, "tumor_suvmax": s} for k, (lab, s) in enumerate(truth)],
    }


def write_cohort(directory, volumes, config_hash=None):
    """Writes every volume plus ``cohort.json``; returns the manifest records."""
    directory = Path(directory)
    records = []
    for vol in volumes:
        paths = {
            "PET": write_volume(directory, f"{vol.patient_id}_pet", vol.pet, vol.spacing_mm, "PET", config_hash),
            "CT": write_volume(directory, f"{vol.patient_id}_ct", vol.ct, vol.ct_spacing_mm, "CT", config_hash),
            "MASK": write_volume(directory, f"{vol.patient_id}_mask", vol.tumor_mask, vol.spacing_mm, "MASK",
                                 config_hash),
        }
        rel = {k: str(Path(v).relative_to(directory)) for k, v in paths.items()}
        records.append(patient_record(vol, rel))
    write_manifest(directory / "cohort.json", records)
    return records


def write_manifest(path, records):
    Path(path).write_text(json.dumps(records, sort_keys=True, indent=1) + "\n")


def read_manifest(path):
    return json.loads(Path(path).read_text())


def load_patient(record, root):
    """Rebuilds a PatientVolume from a manifest record (tumor list not restored)."""
    root = Path(root)
    pet, _ = read_volume(root / record["paths"]["PET"])
    ct, _ = read_volume(root / record["paths"]["CT"])
    mask, _ = read_volume(root / record["paths"]["MASK"])
    return PatientVolume(record["patient_id"], record["center_id"], pet, ct, record["spacing_mm"], mask,
                         ct_spacing_mm=record["ct_spacing_mm"])
