"""CSI image records and the fingerprint database container."""

from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import ConfigurationError, CorruptFileError, RejectedInputError

Profile = Tuple[int, int, int]

PROFILES: Dict[str, Profile] = {
    "nic": (30, 30, 3),
    "phone": (10, 47, 1),
}


def profile_dims(name: str) -> Profile:
    try:
        return PROFILES[name]
    except KeyError:
        raise ConfigurationError(f"Unknown device profile '{name}' (expected one of {sorted(PROFILES)})")


@dataclass(frozen=True)
class CsiImage:
    """H scans x W subcarriers x C antennae of linear amplitudes at one location."""
    amplitudes: np.ndarray
    location: Tuple[float, float]
    snapshot_time: float = 0.0

    def __post_init__(self) -> None:
        amps = np.asarray(self.amplitudes, dtype=np.float64)
        if amps.ndim == 2:
            amps = amps[:, :, None]
        if amps.ndim != 3 or min(amps.shape) < 1:
            raise RejectedInputError(f"CSI image must be H x W x C, got {amps.shape}")
        if not np.all(np.isfinite(amps)) or np.any(amps < 0):
            raise RejectedInputError("CSI amplitudes must be finite and non-negative")
        object.__setattr__(self, "amplitudes", amps)
        object.__setattr__(self, "location", (float(self.location[0]), float(self.location[1])))

    @property
    def dims(self) -> Profile:
        h, w, c = self.amplitudes.shape
        return int(h), int(w), int(c)

    def with_amplitudes(self, amplitudes: np.ndarray) -> "CsiImage":
        return replace(self, amplitudes=amplitudes)


@dataclass(frozen=True)
class FingerprintRecord:
    """One database entry; ``rp_index`` is -1 for test points."""
    image: CsiImage
    rp_index: int = -1
    snapshot_index: int = 0

    @property
    def is_test(self) -> bool:
        return self.rp_index < 0


@dataclass(frozen=True)
class NormalizationContext:
    """Per-RP average amplitudes and their maximum, frozen after training."""
    per_rp_average: Dict[int, float]
    a_max: float
    source: str = ""

    def __post_init__(self) -> None:
        if not self.per_rp_average:
            raise RejectedInputError("Normalization context needs at least one RP")
        expected = max(self.per_rp_average.values())
        if self.a_max <= 0:
            raise CorruptFileError(self.source or "<context>", "a_max", f"non-positive value {self.a_max}")
        if not np.isclose(self.a_max, expected, rtol=0.0, atol=1e-12):
            raise RejectedInputError(f"a_max {self.a_max} differs from the largest RP average {expected}")

    def rp_average(self, rp_index: int) -> float:
        try:
            return self.per_rp_average[rp_index]
        except KeyError:
            raise RejectedInputError(f"RP {rp_index} is not in the normalization context ({self.source})")


@dataclass(frozen=True)
class SnapshotPlan:
    """W1 training images per RP and W2 images per test point."""
    train_images_per_rp: int = 120
    test_images_per_point: int = 1

    def __post_init__(self) -> None:
        if not self.train_images_per_rp >= self.test_images_per_point >= 1:
            raise ConfigurationError(
                f"Snapshot plan needs W1 >= W2 >= 1, got W1={self.train_images_per_rp} "
                f"W2={self.test_images_per_point}"
            )


@dataclass
class FingerprintDatabase:
    """Ordered records sharing one (H, W, C) profile."""
    dims: Profile
    records: List[FingerprintRecord] = field(default_factory=list)
    source: str = ""

    def __post_init__(self) -> None:
        self.dims = tuple(int(d) for d in self.dims)
        for record in self.records:
            self._check(record)

    def _check(self, record: FingerprintRecord) -> None:
        if record.image.dims != self.dims:
            raise RejectedInputError(
                f"Record at {record.image.location} has profile {record.image.dims}, database is {self.dims}"
            )

    def __len__(self) -> int:
        return len(self.records)

    def add(self, record: FingerprintRecord) -> None:
        self._check(record)
        self.records.append(record)

    def training_records(self) -> List[FingerprintRecord]:
        return [r for r in self.records if not r.is_test]

    def test_records(self) -> List[FingerprintRecord]:
        return [r for r in self.records if r.is_test]

    def by_rp(self) -> "OrderedDict[int, List[FingerprintRecord]]":
        """Training records grouped by RP index, RPs ascending, snapshots in time order."""
        groups: Dict[int, List[FingerprintRecord]] = {}
        for record in self.training_records():
            groups.setdefault(record.rp_index, []).append(record)
        ordered = OrderedDict()
        for rp in sorted(groups):
            ordered[rp] = sorted(groups[rp], key=lambda r: (r.image.snapshot_time, r.snapshot_index))
        return ordered

    def rp_locations(self) -> Dict[int, Tuple[float, float]]:
        return {rp: records[0].image.location for rp, records in self.by_rp().items()}

    def test_points(self, group_size: Optional[int] = None) -> List[List[FingerprintRecord]]:
        """Consecutive test records sharing one location (and at most ``group_size`` of them)."""
        points: List[List[FingerprintRecord]] = []
        for record in self.test_records():
            current = points[-1] if points else None
            if (
                current is not None
                and current[-1].image.location == record.image.location
                and (group_size is None or len(current) < group_size)
            ):
                current.append(record)
            else:
                points.append([record])
        return points

    def stack(self, records: Optional[List[FingerprintRecord]] = None) -> np.ndarray:
        """N x H x W x C amplitudes of ``records`` (default: all)."""
        records = self.records if records is None else records
        if not records:
            return np.zeros((0,) + self.dims)
        return np.stack([r.image.amplitudes for r in records])

    def locations(self, records: Optional[List[FingerprintRecord]] = None) -> np.ndarray:
        records = self.records if records is None else records
        return np.array([r.image.location for r in records], dtype=np.float64).reshape(-1, 2)
