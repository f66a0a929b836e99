"""Localization-error statistics, Pearson correlation analyses and ambiguity counting."""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .errors import ConfigurationError, RejectedInputError
from .storage import FeatureBank

logger = logging.getLogger(__name__)


# ---- Pearson correlation -----------------------------------------------------

def pearson(u, v) -> float:
    """Sample Pearson correlation of two flattened arrays; 0 if either is constant."""
    u = np.asarray(u, dtype=np.float64).ravel()
    v = np.asarray(v, dtype=np.float64).ravel()
    if u.shape != v.shape:
        raise RejectedInputError(f"Pearson needs equal lengths, got {u.size} and {v.size}")
    if u.size < 2:
        raise RejectedInputError("Pearson needs at least two values")
    du = u - u.mean()
    dv = v - v.mean()
    denom = math.sqrt(float(du @ du) * float(dv @ dv))
    if denom == 0.0:
        return 0.0
    return float(np.clip((du @ dv) / denom, -1.0, 1.0))


def standardize_rows(vectors: np.ndarray) -> np.ndarray:
    """Centre each row and scale it to unit norm, so row dot products are Pearson coefficients."""
    rows = np.asarray(vectors, dtype=np.float64)
    rows = rows.reshape(rows.shape[0], -1)
    centred = rows - rows.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(centred, axis=1, keepdims=True)
    return np.where(norms > 0, centred / np.where(norms > 0, norms, 1.0), 0.0)


def correlation_matrix(vectors: np.ndarray) -> np.ndarray:
    z = standardize_rows(vectors)
    return np.clip(z @ z.T, -1.0, 1.0)


def standardize_columns(features: np.ndarray) -> np.ndarray:
    """Z-score every feature unit over the rows; constant units become 0."""
    features = np.asarray(features, dtype=np.float64)
    std = features.std(axis=0)
    centred = features - features.mean(axis=0)
    return np.where(std > 0, centred / np.where(std > 0, std, 1.0), 0.0)


def average_self_correlation(images) -> float:
    """Sum of all N x N pairwise correlations (diagonal included) over N^2."""
    images = np.asarray(images, dtype=np.float64)
    if images.shape[0] < 2:
        raise RejectedInputError(f"Average self-correlation needs N >= 2 images, got {images.shape[0]}")
    n = images.shape[0]
    return float(correlation_matrix(images).sum() / (n * n))


def cross_time_correlation(images) -> np.ndarray:
    """Correlation of every snapshot against the first one."""
    images = np.asarray(images, dtype=np.float64)
    return np.array([pearson(images[0], img) for img in images])


# ---- ambiguity ---------------------------------------------------------------------

@dataclass
class AmbiguityConfig:
    grid_size: float = 0.5
    correlation_threshold: Optional[float] = 0.8
    images_per_rp: Optional[int] = None
    sample_size: Optional[int] = None
    normalize: bool = True
    seed: int = 0

    def __post_init__(self) -> None:
        if self.grid_size <= 0:
            raise ConfigurationError(f"Grid size must be positive, got {self.grid_size}")
        if self.correlation_threshold is not None and not 0.0 < self.correlation_threshold < 1.0:
            raise ConfigurationError(f"Correlation threshold must be in (0, 1), got {self.correlation_threshold}")
        if self.images_per_rp is not None and self.images_per_rp < 1:
            raise ConfigurationError("images_per_rp must be >= 1")
        if self.sample_size is not None and self.sample_size < 1:
            raise ConfigurationError("sample_size must be >= 1")


def _prepare(fingerprints: Mapping[int, np.ndarray], locations: Mapping[int, Sequence[float]],
             config: AmbiguityConfig) -> Tuple[List[int], np.ndarray, np.ndarray]:
    rps = sorted(fingerprints)
    missing = [rp for rp in rps if rp not in locations]
    if missing:
        raise RejectedInputError(f"No location for RPs {missing[:5]}")
    if config.sample_size is not None and config.sample_size < len(rps):
        rng = np.random.default_rng(config.seed)
        rps = sorted(int(rp) for rp in rng.choice(rps, size=config.sample_size, replace=False))
    means = []
    for rp in rps:
        block = np.asarray(fingerprints[rp], dtype=np.float64)
        block = block.reshape(block.shape[0], -1)
        if config.images_per_rp is not None:
            block = block[:config.images_per_rp]
        # Mean of standardized rows: its dot products are block-mean cross-correlations.
        means.append(standardize_rows(block).mean(axis=0))
    means = np.array(means)
    if config.normalize:
        # Pearson between the RPs' mean fingerprints, free of each RP's own temporal spread.
        means = standardize_rows(means)
    coords = np.array([locations[rp] for rp in rps], dtype=np.float64).reshape(-1, 2)
    return rps, means, coords


def mean_cross_correlation(fingerprints: Mapping[int, np.ndarray], locations: Mapping[int, Sequence[float]],
                           config: AmbiguityConfig) -> Tuple[List[int], np.ndarray, np.ndarray]:
    """(RPs, M x M block-mean correlations, M x M distances)."""
    rps, means, coords = _prepare(fingerprints, locations, config)
    corr = means @ means.T
    dist = np.linalg.norm(coords[:, None, :] - coords[None, :, :], axis=-1)
    return rps, corr, dist


def neighbor_correlation_threshold(fingerprints: Mapping[int, np.ndarray], locations: Mapping[int, Sequence[float]],
                                   grid_size: float = 0.5, normalize: bool = True) -> float:
    """Mean correlation between each RP and its physical neighbours (within one grid step)."""
    config = AmbiguityConfig(grid_size=grid_size, correlation_threshold=None, normalize=normalize)
    _, corr, dist = mean_cross_correlation(fingerprints, locations, config)
    neighbours = (dist <= grid_size + 1e-9) & ~np.eye(len(dist), dtype=bool)
    if not neighbours.any():
        raise ConfigurationError(f"No RP has a neighbour within {grid_size} m to derive a threshold from")
    return float(np.clip(corr[neighbours].mean(), 1e-6, 1.0 - 1e-6))


def count_ambiguous(fingerprints: Mapping[int, np.ndarray], locations: Mapping[int, Sequence[float]],
                    config: AmbiguityConfig) -> Dict[int, int]:
    """Per RP, how many RPs farther than one grid step correlate above the threshold."""
    rps, corr, dist = mean_cross_correlation(fingerprints, locations, config)
    threshold = config.correlation_threshold
    if threshold is None:
        threshold = neighbor_correlation_threshold(fingerprints, locations, config.grid_size, config.normalize)
        logger.info(f"Derived correlation threshold {threshold:.3f} from neighbouring RPs")
    far = dist > config.grid_size + 1e-9
    counts = ((corr > threshold) & far).sum(axis=1)
    return {rp: int(c) for rp, c in zip(rps, counts)}


def ambiguity_histogram(counts: Mapping[int, int]) -> pd.DataFrame:
    values = pd.Series(list(counts.values()), dtype="int64")
    hist = values.value_counts().sort_index()
    return pd.DataFrame({"ambiguous_points": hist.index.astype(int), "rps": hist.values.astype(int)})


def ambiguity_summary(counts: Mapping[int, int]) -> Dict[str, float]:
    values = np.array(list(counts.values()), dtype=np.int64)
    return {
        "rps": int(values.size),
        "zero_fraction": float(np.mean(values == 0)) if values.size else float("nan"),
        "max_count": int(values.max()) if values.size else 0,
        "mean_count": float(values.mean()) if values.size else float("nan"),
    }


def self_trajectory_fingerprints(bank: FeatureBank, memory_length: int, per_rp: int,
                                 seed: int = 0) -> Dict[int, np.ndarray]:
    """Per RP, ``per_rp`` concatenations of T features drawn from that RP's own snapshots."""
    out: Dict[int, np.ndarray] = {}
    for rp, rows in bank.rows_by_rp().items():
        rng = np.random.default_rng([seed, rp])
        picks = rows[rng.integers(len(rows), size=(per_rp, memory_length))]
        out[rp] = bank.features[picks].reshape(per_rp, -1)
    return out


# ---- spatial / temporal correlation analyses -------------------------------------

def spatial_correlation_decay(images: Mapping[int, np.ndarray], locations: Mapping[int, Sequence[float]],
                              bin_width: float = 0.5, max_distance: float = 5.0) -> pd.DataFrame:
    """Mean correlation of one image per RP against every other RP, by distance bin."""
    rps = sorted(images)
    vectors = np.stack([np.asarray(images[rp], dtype=np.float64).ravel() for rp in rps])
    coords = np.array([locations[rp] for rp in rps], dtype=np.float64).reshape(-1, 2)
    corr = correlation_matrix(vectors)
    dist = np.linalg.norm(coords[:, None, :] - coords[None, :, :], axis=-1)
    upper = np.triu_indices(len(rps), k=1)
    d, c = dist[upper], corr[upper]
    edges = np.arange(0.0, max_distance + bin_width / 2, bin_width)
    rows = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        mask = (d > lo) & (d <= hi)
        rows.append({
            "bin_start_m": lo, "bin_end_m": hi, "pairs": int(mask.sum()),
            "mean_correlation": float(c[mask].mean()) if mask.any() else float("nan"),
        })
    return pd.DataFrame(rows)


def feature_correlation_gain(raw: Mapping[int, np.ndarray], features: Mapping[int, np.ndarray]) -> pd.DataFrame:
    """Per-RP average self-correlation of raw images and of their CNN features."""
    rows = []
    for rp in sorted(set(raw) & set(features)):
        if len(raw[rp]) < 2 or len(features[rp]) < 2:
            continue
        rows.append({
            "rp": rp,
            "raw_rho": average_self_correlation(raw[rp]),
            "feature_rho": average_self_correlation(features[rp]),
        })
    table = pd.DataFrame(rows, columns=["rp", "raw_rho", "feature_rho"])
    table["gain"] = table["feature_rho"] - table["raw_rho"]
    return table


# ---- localization errors --------------------------------------------------------------

@dataclass
class ErrorReport:
    """Per-point Euclidean errors of one run, with summary statistics."""
    per_point_errors: np.ndarray
    label: str = ""
    metadata: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.per_point_errors = np.asarray(self.per_point_errors, dtype=np.float64).ravel()
        if self.per_point_errors.size == 0:
            raise RejectedInputError("An error report needs at least one point")

    @property
    def count(self) -> int:
        return int(self.per_point_errors.size)

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_point_errors))

    @property
    def std(self) -> float:
        return float(np.std(self.per_point_errors))

    @property
    def max(self) -> float:
        return float(np.max(self.per_point_errors))

    @property
    def cdf(self) -> List[Tuple[float, float]]:
        """Sorted (error, fraction of errors <= error) pairs ending at 1.0."""
        errors = np.sort(self.per_point_errors)
        fractions = np.arange(1, errors.size + 1) / errors.size
        return list(zip(errors.tolist(), fractions.tolist()))

    def percentile(self, p: float) -> float:
        """Smallest error e with fraction(errors <= e) >= p."""
        if not 0.0 < p <= 1.0:
            raise RejectedInputError(f"Percentile must be in (0, 1], got {p}")
        errors = np.sort(self.per_point_errors)
        k = max(1, int(math.ceil(p * errors.size - 1e-12)))
        return float(errors[k - 1])

    @property
    def p80(self) -> float:
        return self.percentile(0.8)

    @property
    def p80_mean_ratio(self) -> float:
        return self.p80 / self.mean if self.mean > 0 else float("nan")

    def cdf_samples(self, resolution: float = 0.05) -> pd.DataFrame:
        """Fraction of errors <= e on a regular grid of e up to the maximum error."""
        steps = int(math.ceil(self.max / resolution)) + 1
        grid = np.round(np.arange(steps + 1) * resolution, 10)
        errors = np.sort(self.per_point_errors)
        fractions = np.searchsorted(errors, grid, side="right") / errors.size
        return pd.DataFrame({"error_m": grid, "fraction": fractions})

    def errors_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"point": np.arange(self.count), "error_m": self.per_point_errors})

    def summary(self) -> Dict[str, object]:
        return {
            "label": self.label, "points": self.count, "mean_m": self.mean, "std_m": self.std,
            "p80_m": self.p80, "max_m": self.max, "p80_mean_ratio": self.p80_mean_ratio,
            "average": f"{self.mean:.2f} ± {self.std:.2f}",
        }


def error_report(predictions, ground_truth, label: str = "", **metadata: str) -> ErrorReport:
    predictions = np.asarray(predictions, dtype=np.float64).reshape(-1, 2)
    ground_truth = np.asarray(ground_truth, dtype=np.float64).reshape(-1, 2)
    if predictions.shape != ground_truth.shape:
        raise RejectedInputError(f"{len(predictions)} predictions for {len(ground_truth)} ground-truth points")
    errors = np.linalg.norm(predictions - ground_truth, axis=1)
    return ErrorReport(errors, label, dict(metadata))


def compare_reports(reports: Sequence[ErrorReport]) -> pd.DataFrame:
    """One row per run plus an 'Average' row pooled over all points."""
    if not reports:
        raise RejectedInputError("No reports to compare")
    rows = [r.summary() for r in reports]
    pooled = ErrorReport(np.concatenate([r.per_point_errors for r in reports]), "Average")
    rows.append(pooled.summary())
    return pd.DataFrame(rows, columns=list(rows[0].keys()))


def write_report(directory: Union[str, Path], report: ErrorReport, resolution: float = 0.05) -> Dict[str, Path]:
    """Per-point errors, CDF samples and the one-line summary as CSV files."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = report.label or "run"
    paths = {
        "errors": directory / f"{stem}_errors.csv",
        "cdf": directory / f"{stem}_cdf.csv",
        "summary": directory / f"{stem}_summary.csv",
    }
    report.errors_frame().to_csv(paths["errors"], index=False)
    report.cdf_samples(resolution).to_csv(paths["cdf"], index=False)
    pd.DataFrame([report.summary()]).to_csv(paths["summary"], index=False)
    return paths
