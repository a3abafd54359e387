import sys

import numpy as np
import pytest

from petslice.phantom import PatientVolume, TumorSpec, plant_tumor_inplace


def simple_volume(pid="T-000", center="T", shape=(96, 8, 8), spacing=(8.0, 8.0, 4.0), tumors=(), seed=0):
    """Uniform-background patient with a coarser CT grid (2x in-plane) and optional tumors."""
    rng = np.random.default_rng(seed)
    nz, ny, nx = shape
    pet = (1.0 + 0.1 * rng.random(shape)).astype(np.float32)
    ct = rng.normal(0.0, 30.0, size=(nz, ny // 2, nx // 2)).astype(np.float32)
    vol = PatientVolume(pid, center, pet, ct, spacing, np.zeros(shape, dtype=np.uint8),
                        ct_spacing_mm=(2 * spacing[0], 2 * spacing[1], spacing[2]))
    for t in tumors:
        plant_tumor_inplace(vol, t)
    return vol


@pytest.fixture
def small_cohort():
    vols = []
    for i in range(5):
        center = "A" if i < 3 else "B"
        spec = TumorSpec((4, 4, 20 + 10 * i), (6.0, 6.0, 8.0 + 4 * i), suv_max=5.0 + i)
        vols.append(simple_volume(f"{center}-{i:03d}", center, tumors=[spec], seed=i))
    return vols


def pytest_terminal_summary(terminalreporter):
    results = getattr(sys.modules.get("test_acceptance"), "RESULTS", None)
    if not results:
        return
    terminalreporter.write_sep("=", "acceptance criteria")
    for key in sorted(results, key=lambda k: (int(str(k).rstrip("abcdefghijklmnopqrstuvwxyz")), str(k))):
        terminalreporter.write_line(results[key])
