"""Filter-and-normalization of CSI images.

Order is fixed: median filter along the scan axis, per-row min-max over the
subcarriers, then rescaling by the location's average amplitude relative to the
strongest RP of the training database.
"""

import logging
from typing import Dict, Iterable, List, Optional

import numpy as np
from scipy.ndimage import median_filter

from .csi_image import CsiImage, FingerprintDatabase, FingerprintRecord, NormalizationContext
from .errors import ConfigurationError

logger = logging.getLogger(__name__)


def _check_window(window: int, scans: int) -> None:
    if window < 1 or window % 2 == 0:
        raise ConfigurationError(f"Median filter window must be odd and >= 1, got {window}")
    if window > scans:
        raise ConfigurationError(f"Median filter window {window} exceeds the {scans} scans of an image")


def filter_stack(amplitudes: np.ndarray, window: int) -> np.ndarray:
    """Median filter an (..., H, W, C) array along H with edge replication."""
    _check_window(window, amplitudes.shape[-3])
    if window == 1:
        return np.array(amplitudes, dtype=np.float64, copy=True)
    size = (1,) * (amplitudes.ndim - 3) + (window, 1, 1)
    return median_filter(amplitudes, size=size, mode="nearest")


def normalize_stack(amplitudes: np.ndarray) -> np.ndarray:
    """Min-max each (row, antenna) slice over the W axis; constant slices become 0.5."""
    low = amplitudes.min(axis=-2, keepdims=True)
    high = amplitudes.max(axis=-2, keepdims=True)
    span = high - low
    flat = span <= 0.0
    scaled = (amplitudes - low) / np.where(flat, 1.0, span)
    return np.where(flat, 0.5, scaled)


def median_filter_columns(image: CsiImage, window: int = 3) -> CsiImage:
    return image.with_amplitudes(filter_stack(image.amplitudes, window))


def average_amplitude(image: CsiImage) -> float:
    """Mean over all H*W*C amplitudes."""
    return float(np.mean(image.amplitudes))


def minmax_normalize_rows(image: CsiImage) -> CsiImage:
    return image.with_amplitudes(normalize_stack(image.amplitudes))


def rescale_ratio(rp_average: float, context: NormalizationContext) -> float:
    # Capped at 1 so test images stronger than every RP stay in [0, 1].
    return min(1.0, max(0.0, rp_average / context.a_max))


def power_rescale(image: CsiImage, rp_average: float, context: NormalizationContext) -> CsiImage:
    return image.with_amplitudes(image.amplitudes * rescale_ratio(rp_average, context))


def preprocess(image: CsiImage, context: NormalizationContext, window: int = 3,
               rp_average: Optional[float] = None) -> CsiImage:
    """Filter, normalize and rescale one image.

    ``rp_average`` is the RP's stored average for training images; when omitted
    (test images) the filtered image's own average is used.
    """
    filtered = median_filter_columns(image, window)
    if rp_average is None:
        rp_average = average_amplitude(filtered)
    return power_rescale(minmax_normalize_rows(filtered), rp_average, context)


def build_normalization_context(records: Iterable[FingerprintRecord], window: int = 3,
                                source: str = "") -> NormalizationContext:
    """Average the filtered per-image means over each RP's training images."""
    sums: Dict[int, float] = {}
    counts: Dict[int, int] = {}
    for record in records:
        if record.is_test:
            continue
        value = float(np.mean(filter_stack(record.image.amplitudes, window)))
        sums[record.rp_index] = sums.get(record.rp_index, 0.0) + value
        counts[record.rp_index] = counts.get(record.rp_index, 0) + 1
    per_rp = {rp: sums[rp] / counts[rp] for rp in sorted(sums)}
    if not per_rp:
        raise ConfigurationError(f"No training records to build a normalization context from {source}")
    context = NormalizationContext(per_rp, max(per_rp.values()), source)
    logger.info(f"✅ Normalization context over {len(per_rp)} RPs, a_max={context.a_max:.4f}")
    return context


def preprocess_database(database: FingerprintDatabase, context: NormalizationContext,
                        window: int = 3) -> FingerprintDatabase:
    """Preprocess every record; training records use their RP's average, test records their own."""
    if not database.records:
        return FingerprintDatabase(database.dims, [], database.source)
    filtered = filter_stack(database.stack(), window)
    normalized = normalize_stack(filtered)
    records: List[FingerprintRecord] = []
    for k, record in enumerate(database.records):
        if record.is_test:
            average = float(np.mean(filtered[k]))
        else:
            average = context.rp_average(record.rp_index)
        image = record.image.with_amplitudes(normalized[k] * rescale_ratio(average, context))
        records.append(FingerprintRecord(image, record.rp_index, record.snapshot_index))
    logger.info(f"✅ Preprocessed {len(records)} records with window {window}")
    return FingerprintDatabase(database.dims, records, database.source)
