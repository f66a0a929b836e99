"""File storage for databases, normalization contexts, feature banks and trajectory caches."""

import logging
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np
import yaml

from .csi_image import CsiImage, FingerprintDatabase, FingerprintRecord, NormalizationContext
from .errors import CorruptFileError, RejectedInputError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

CSID_MAGIC = b"CSID"
CSID_VERSION = 1
TRAJ_MAGIC = b"TRAJ"
TRAJ_VERSION = 1


def _record_dtype(dims: Tuple[int, int, int]) -> np.dtype:
    return np.dtype([
        ("x", "<f8"), ("y", "<f8"), ("t", "<f8"), ("rp", "<i4"), ("amp", "<f4", dims),
    ])


def _require(path: Path) -> bytes:
    if not path.exists():
        raise FileNotFoundError(f"File not found: {path}")
    return path.read_bytes()


def _check_magic(blob: bytes, path: Path, magic: bytes, version: int, header_size: int) -> None:
    if len(blob) < 4 or blob[:4] != magic:
        raise CorruptFileError(str(path), "magic", f"expected {magic.decode()}")
    if len(blob) < header_size:
        raise CorruptFileError(str(path), "header", "truncated")
    (found,) = struct.unpack_from("<H", blob, 4)
    if found != version:
        raise CorruptFileError(str(path), "version", f"got {found}, expected {version}")


# ---- CSID databases --------------------------------------------------------

def encode_database(database: FingerprintDatabase) -> bytes:
    h, w, c = database.dims
    table = np.zeros(len(database.records), dtype=_record_dtype(database.dims))
    if len(table):
        locations = database.locations()
        table["x"] = locations[:, 0]
        table["y"] = locations[:, 1]
        table["t"] = [r.image.snapshot_time for r in database.records]
        table["rp"] = [r.rp_index for r in database.records]
        table["amp"] = database.stack()
    header = CSID_MAGIC + struct.pack("<HHHHI", CSID_VERSION, h, w, c, len(table))
    return header + table.tobytes()


def decode_database(blob: bytes, source: str = "<memory>") -> FingerprintDatabase:
    path = Path(source)
    _check_magic(blob, path, CSID_MAGIC, CSID_VERSION, 16)
    _, h, w, c, count = struct.unpack_from("<HHHHI", blob, 4)
    dims = (h, w, c)
    dtype = _record_dtype(dims)
    expected = 16 + count * dtype.itemsize
    if len(blob) != expected:
        raise CorruptFileError(source, "record count", f"{count} records need {expected} bytes, file has {len(blob)}")
    table = np.frombuffer(blob, dtype=dtype, count=count, offset=16)

    counters: Dict[object, int] = {}
    records = []
    for row in table:
        rp = int(row["rp"])
        location = (float(row["x"]), float(row["y"]))
        key = rp if rp >= 0 else location
        snapshot = counters.get(key, 0)
        counters[key] = snapshot + 1
        image = CsiImage(row["amp"].astype(np.float64), location, float(row["t"]))
        records.append(FingerprintRecord(image, rp, snapshot))
    return FingerprintDatabase(dims, records, source)


def save_database(path: PathLike, database: FingerprintDatabase) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_database(database))
    logger.info(f"✅ Wrote {len(database)} records {database.dims} to {path}")
    return path


def load_database(path: PathLike) -> FingerprintDatabase:
    path = Path(path)
    database = decode_database(_require(path), str(path))
    logger.info(f"Loaded {len(database)} records {database.dims} from {path}")
    return database


# ---- normalization context ----------------------------------------------------

def save_context(path: PathLike, context: NormalizationContext) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = {
        "source": context.source,
        "a_max": float(context.a_max),
        "per_rp_average": {int(k): float(v) for k, v in context.per_rp_average.items()},
    }
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(data, f, default_flow_style=False, sort_keys=False)
    return path


def load_context(path: PathLike) -> NormalizationContext:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Normalization context not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f)
    if not isinstance(data, dict):
        raise CorruptFileError(str(path), "context", "expected a key-value mapping")
    try:
        per_rp = {int(k): float(v) for k, v in (data["per_rp_average"] or {}).items()}
        a_max = float(data["a_max"])
    except (KeyError, TypeError, ValueError) as e:
        raise CorruptFileError(str(path), "context", str(e))
    try:
        return NormalizationContext(per_rp, a_max, str(data.get("source", "")))
    except CorruptFileError as e:
        raise CorruptFileError(str(path), e.field, str(e))
    except RejectedInputError as e:
        raise CorruptFileError(str(path), "a_max", str(e))


# ---- feature bank -----------------------------------------------------------

@dataclass
class FeatureBank:
    """CNN features for every record of a database, row-aligned with its records."""
    features: np.ndarray
    rp_index: np.ndarray
    locations: np.ndarray
    snapshot_times: np.ndarray

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        self.rp_index = np.asarray(self.rp_index, dtype=np.int64)
        self.locations = np.asarray(self.locations, dtype=np.float64).reshape(-1, 2)
        self.snapshot_times = np.asarray(self.snapshot_times, dtype=np.float64)
        n = self.features.shape[0]
        if self.features.ndim != 2 or not (len(self.rp_index) == len(self.locations) == len(self.snapshot_times) == n):
            raise RejectedInputError("Feature bank columns must all have one row per record")

    @property
    def feature_dim(self) -> int:
        return int(self.features.shape[1])

    def rows_by_rp(self) -> Dict[int, np.ndarray]:
        """Row indices of each RP's training features, in time order."""
        groups: Dict[int, np.ndarray] = {}
        train = np.flatnonzero(self.rp_index >= 0)
        for rp in np.unique(self.rp_index[train]):
            rows = train[self.rp_index[train] == rp]
            groups[int(rp)] = rows[np.argsort(self.snapshot_times[rows], kind="stable")]
        return groups


def save_feature_bank(path: PathLike, bank: FeatureBank) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        np.savez(f, features=bank.features, rp_index=bank.rp_index,
                 locations=bank.locations, snapshot_times=bank.snapshot_times)
    logger.info(f"✅ Wrote {bank.features.shape[0]} x {bank.feature_dim} features to {path}")
    return path


def load_feature_bank(path: PathLike) -> FeatureBank:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Feature bank not found: {path}")
    try:
        with np.load(path, allow_pickle=False) as data:
            return FeatureBank(data["features"], data["rp_index"], data["locations"], data["snapshot_times"])
    except (KeyError, ValueError, OSError) as e:
        raise CorruptFileError(str(path), "feature bank", str(e))


# ---- TRAJ trajectory cache -----------------------------------------------------

_STEP_DTYPE = np.dtype([("rp", "<u4"), ("row", "<u4")])


def encode_trajectories(rp_indices: np.ndarray, feature_rows: np.ndarray) -> bytes:
    """Encode count x T arrays of RP indices and feature-bank rows."""
    rp_indices = np.asarray(rp_indices)
    feature_rows = np.asarray(feature_rows)
    if rp_indices.ndim != 2 or rp_indices.shape != feature_rows.shape or rp_indices.shape[1] < 1:
        raise RejectedInputError(f"Trajectory arrays must be count x T, got {rp_indices.shape} / {feature_rows.shape}")
    count, steps = rp_indices.shape
    table = np.empty((count, steps), dtype=_STEP_DTYPE)
    table["rp"] = rp_indices
    table["row"] = feature_rows
    return TRAJ_MAGIC + struct.pack("<HHI", TRAJ_VERSION, steps, count) + table.tobytes()


def decode_trajectories(blob: bytes, source: str = "<memory>") -> Tuple[np.ndarray, np.ndarray]:
    _check_magic(blob, Path(source), TRAJ_MAGIC, TRAJ_VERSION, 12)
    _, steps, count = struct.unpack_from("<HHI", blob, 4)
    expected = 12 + count * steps * _STEP_DTYPE.itemsize
    if steps < 1 or len(blob) != expected:
        raise CorruptFileError(source, "trajectory count", f"T={steps}, count={count}, {len(blob)} bytes")
    table = np.frombuffer(blob, dtype=_STEP_DTYPE, count=count * steps, offset=12).reshape(count, steps)
    return table["rp"].astype(np.int64), table["row"].astype(np.int64)


def save_trajectories(path: PathLike, rp_indices: np.ndarray, feature_rows: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_trajectories(rp_indices, feature_rows))
    logger.info(f"✅ Wrote {len(rp_indices)} trajectories to {path}")
    return path


def load_trajectories(path: PathLike) -> Tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    return decode_trajectories(_require(path), str(path))
