"""Shared fixtures: small hand-built fingerprint databases."""

import numpy as np
import pytest

from src.csi_image import CsiImage, FingerprintDatabase, FingerprintRecord

SMALL_DIMS = (4, 5, 2)


def make_database(rps=6, per_rp=4, dims=SMALL_DIMS, seed=0, test_points=3, spacing=1.0):
    """RPs on a row at ``spacing`` metres, ``per_rp`` snapshots each, plus off-grid test records."""
    rng = np.random.default_rng(seed)
    records = []
    for rp in range(rps):
        base = rng.uniform(0.5, 2.0, size=dims)
        for k in range(per_rp):
            amps = base * rng.uniform(0.8, 1.2, size=dims)
            image = CsiImage(amps, ((rp + 0.5) * spacing, 0.5), snapshot_time=100.0 * k + rp)
            records.append(FingerprintRecord(image, rp, k))
    for j in range(test_points):
        image = CsiImage(rng.uniform(0.5, 2.0, size=dims), (j + 0.9, 0.7), snapshot_time=1e5 + j)
        records.append(FingerprintRecord(image, -1, 0))
    return FingerprintDatabase(dims, records, "fixture")


@pytest.fixture
def small_database():
    return make_database()
