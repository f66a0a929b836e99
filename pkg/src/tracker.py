"""Phase-2 sequence model over CNN features.

Training trajectories walk the RP grid with a bounded step, draw one stored
feature per visited RP and train an LSTM that emits a location at every one of
the T steps. Online, a tracker keeps the last T features of one device and
reports the location of the newest step.
"""

import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Deque, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import yaml

from .checkpoint import load_checkpoint, save_checkpoint
from .csi_image import CsiImage
from .errors import ConfigurationError, CorruptFileError, NumericError, RejectedInputError
from .layers import LSTM, Dropout, FullyConnected, Layer, collect_parameters
from .losses import mse_loss_sequence, mse_loss_sequence_grad
from .optim import Adam
from .ports import FeatureExtractor
from .quantifier import Bounds, clamp_to_bounds
from .storage import FeatureBank

logger = logging.getLogger(__name__)

WARMUP_POLICIES = ("repeat_oldest", "cnn_only")


@dataclass(frozen=True)
class TrajectoryConfig:
    memory_length: int = 5
    sigma: float = 2.0
    delta_t: float = 1.0
    train_count: int = 30000
    validation_count: int = 15000

    def __post_init__(self) -> None:
        if self.memory_length < 1:
            raise ConfigurationError(f"Memory length T must be >= 1, got {self.memory_length}")
        if self.sigma <= 0 or self.delta_t <= 0:
            raise ConfigurationError("Step bound sigma and interval delta_t must be positive")
        if self.train_count < 1 or self.validation_count < 0:
            raise ConfigurationError("Need at least one training trajectory")


@dataclass(frozen=True)
class Trajectory:
    """T steps of (feature, ground-truth location, RP index)."""
    features: np.ndarray
    locations: np.ndarray
    rp_indices: np.ndarray


@dataclass
class TrajectorySet:
    """count x T RP indices and the feature-bank rows drawn for them."""
    rp_indices: np.ndarray
    feature_rows: np.ndarray

    def __post_init__(self) -> None:
        self.rp_indices = np.asarray(self.rp_indices, dtype=np.int64)
        self.feature_rows = np.asarray(self.feature_rows, dtype=np.int64)
        if self.rp_indices.ndim != 2 or self.rp_indices.shape != self.feature_rows.shape:
            raise RejectedInputError(
                f"Trajectory arrays must be count x T, got {self.rp_indices.shape} / {self.feature_rows.shape}"
            )

    def __len__(self) -> int:
        return int(self.rp_indices.shape[0])

    @property
    def memory_length(self) -> int:
        return int(self.rp_indices.shape[1])

    def features(self, bank: FeatureBank, idx: Optional[np.ndarray] = None) -> np.ndarray:
        rows = self.feature_rows if idx is None else self.feature_rows[idx]
        return bank.features[rows]

    def locations(self, bank: FeatureBank, idx: Optional[np.ndarray] = None) -> np.ndarray:
        rows = self.feature_rows if idx is None else self.feature_rows[idx]
        return bank.locations[rows]

    def trajectory(self, k: int, bank: FeatureBank) -> Trajectory:
        rows = self.feature_rows[k]
        return Trajectory(bank.features[rows], bank.locations[rows], self.rp_indices[k].copy())

    def step_lengths(self, bank: FeatureBank) -> np.ndarray:
        locs = self.locations(bank)
        return np.linalg.norm(np.diff(locs, axis=1), axis=-1)


def neighbor_lists(locations: np.ndarray, sigma: float) -> List[np.ndarray]:
    """For each RP, the positions (into ``locations``) of RPs within ``sigma``, itself included."""
    diff = locations[:, None, :] - locations[None, :, :]
    within = np.linalg.norm(diff, axis=-1) <= sigma + 1e-9
    return [np.flatnonzero(row) for row in within]


def generate_trajectories(bank: FeatureBank, config: TrajectoryConfig, count: int, seed: int,
                          offset: int = 0) -> TrajectorySet:
    """Uniform start RP, uniform next RP within sigma, uniform stored snapshot per step.

    Trajectory k draws from its own stream (seed, offset + k), so a set is
    reproducible independent of how it is split or generated.
    """
    groups = bank.rows_by_rp()
    if not groups:
        raise RejectedInputError("Feature bank holds no training features to build trajectories from")
    rp_ids = np.array(sorted(groups), dtype=np.int64)
    first_rows = np.array([groups[rp][0] for rp in rp_ids])
    neighbors = neighbor_lists(bank.locations[first_rows], config.sigma)

    steps = config.memory_length
    rp_out = np.empty((count, steps), dtype=np.int64)
    row_out = np.empty((count, steps), dtype=np.int64)
    for k in range(count):
        rng = np.random.default_rng([seed, offset + k])
        pos = int(rng.integers(len(rp_ids)))
        for t in range(steps):
            if t > 0:
                pos = int(rng.choice(neighbors[pos]))
            rows = groups[int(rp_ids[pos])]
            rp_out[k, t] = rp_ids[pos]
            row_out[k, t] = rows[int(rng.integers(len(rows)))]
    logger.info(f"✅ Generated {count} trajectories, T={steps}, sigma={config.sigma} m")
    return TrajectorySet(rp_out, row_out)


@dataclass
class LstmConfig:
    hidden_size: int = 900
    dropout: float = 0.2
    learning_rate: float = 0.001
    epochs: int = 100
    batch_size: int = 32
    reduced_scale: bool = False

    def __post_init__(self) -> None:
        if self.hidden_size < 1:
            raise ConfigurationError("LSTM hidden size must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"Dropout rate must be in [0, 1), got {self.dropout}")
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigurationError("Epochs and batch size must be >= 1 and the learning rate positive")


class LstmModel:
    """LSTM over N x T x F features, dropout, and a per-step linear x/y head."""

    def __init__(self, feature_dim: int, config: LstmConfig, rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        if config.hidden_size != feature_dim and not config.reduced_scale:
            raise ConfigurationError(
                f"LSTM hidden size {config.hidden_size} must equal the feature dim {feature_dim}; "
                f"set reduced_scale to run a narrower tracker"
            )
        self.feature_dim = feature_dim
        self.config = config
        self.lstm = LSTM(feature_dim, config.hidden_size, rng)
        self.dropout = Dropout(config.dropout, rng)
        self.head = FullyConnected(config.hidden_size, 2, rng)
        self._shape: Optional[Tuple[int, int]] = None

    @property
    def layers(self) -> List[Layer]:
        return [self.lstm, self.dropout, self.head]

    def parameters(self):
        return collect_parameters(self.layers)

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[2] != self.feature_dim:
            raise RejectedInputError(f"Expected N x T x {self.feature_dim} features, got {x.shape}")
        n, steps, _ = x.shape
        hidden = self.dropout.forward(self.lstm.forward(x, training), training)
        self._shape = (n, steps)
        out = self.head.forward(hidden.reshape(n * steps, -1), training)
        return out.reshape(n, steps, 2)

    def backward(self, dout: np.ndarray) -> None:
        n, steps = self._shape
        dhidden = self.head.backward(dout.reshape(n * steps, 2)).reshape(n, steps, -1)
        self.lstm.backward(self.dropout.backward(dhidden))


@dataclass
class TrainedTracker:
    model: LstmModel
    config: LstmConfig
    memory_length: int
    bounds: Bounds
    curve: Optional[pd.DataFrame] = field(default=None, repr=False)

    def predict_windows(self, windows: np.ndarray) -> np.ndarray:
        """Clamped per-step locations for N x T x F windows."""
        return clamp_to_bounds(self.model.forward(windows), self.bounds)


def _sequence_error(tracker: TrainedTracker, trajectories: TrajectorySet, bank: FeatureBank,
                    chunk: int = 256) -> float:
    total = 0.0
    for start in range(0, len(trajectories), chunk):
        idx = np.arange(start, min(start + chunk, len(trajectories)))
        pred = tracker.predict_windows(trajectories.features(bank, idx))
        total += mse_loss_sequence(pred, trajectories.locations(bank, idx)) * len(idx)
    return total / max(1, len(trajectories))


def _snapshot(model: LstmModel) -> List[np.ndarray]:
    return [p.data.copy() for p in model.parameters()]


def train_lstm(train: TrajectorySet, validation: Optional[TrajectorySet], bank: FeatureBank,
               config: LstmConfig, bounds: Bounds, seed: int = 0) -> TrainedTracker:
    """Adam on the T-step mean location error; keeps the best-validation epoch."""
    if len(train) == 0:
        raise RejectedInputError("Cannot train the tracker on zero trajectories")
    if validation is not None and len(validation) and validation.memory_length != train.memory_length:
        raise RejectedInputError(
            f"Validation trajectories have T={validation.memory_length}, training T={train.memory_length}"
        )
    held_out = validation if validation is not None and len(validation) else train

    rng = np.random.default_rng(seed)
    model = LstmModel(bank.feature_dim, config, rng)
    optimizer = Adam(model.parameters(), config.learning_rate)
    tracker = TrainedTracker(model, config, train.memory_length, bounds)

    best_error = math.inf
    best = _snapshot(model)
    rows = []
    logger.info(f"🔄 Training LSTM on {len(train)} trajectories (T={train.memory_length}) for {config.epochs} epochs")
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            targets = train.locations(bank, idx)
            optimizer.zero_grad()
            pred = model.forward(train.features(bank, idx), training=True)
            loss = mse_loss_sequence(pred, targets)
            if not math.isfinite(loss):
                raise NumericError("LSTM training loss", optimizer.state.step)
            model.backward(mse_loss_sequence_grad(pred, targets))
            optimizer.step()
            total += loss * len(idx)
        train_loss = total / len(order)
        val_error = _sequence_error(tracker, held_out, bank)
        rows.append({"epoch": epoch, "train_loss_m": train_loss, "val_error_m": val_error})
        logger.info(f"Epoch {epoch}/{config.epochs}: train {train_loss:.4f} m, validation {val_error:.4f} m")
        if val_error < best_error:
            best_error = val_error
            best = _snapshot(model)

    for p, a in zip(model.parameters(), best):
        p.data[...] = a
    tracker.curve = pd.DataFrame(rows, columns=["epoch", "train_loss_m", "val_error_m"])
    logger.info(f"✅ LSTM trained, best validation error {best_error:.4f} m")
    return tracker


class Tracker:
    """Sliding window of the last T features for one device."""

    def __init__(self, quantifier: FeatureExtractor, tracker: TrainedTracker, warmup: str = "repeat_oldest"):
        if warmup not in WARMUP_POLICIES:
            raise ConfigurationError(f"Warm-up policy must be one of {WARMUP_POLICIES}, got '{warmup}'")
        self.quantifier = quantifier
        self.tracker = tracker
        self.warmup = warmup
        self.window: Deque[np.ndarray] = deque(maxlen=tracker.memory_length)

    def reset(self) -> None:
        self.window.clear()

    def push_feature(self, feature: np.ndarray, cnn_prediction: Optional[np.ndarray] = None) -> np.ndarray:
        """Add one feature vector and return the current location estimate."""
        feature = np.asarray(feature, dtype=np.float64)
        if feature.shape != (self.tracker.model.feature_dim,):
            raise RejectedInputError(f"Feature has shape {feature.shape}, tracker expects ({self.tracker.model.feature_dim},)")
        self.window.append(feature)
        steps = self.tracker.memory_length
        if len(self.window) < steps:
            if self.warmup == "cnn_only" and cnn_prediction is not None:
                return np.asarray(cnn_prediction, dtype=np.float64)
            padded = [self.window[0]] * (steps - len(self.window)) + list(self.window)
        else:
            padded = list(self.window)
        return self.tracker.predict_windows(np.stack(padded)[None])[0, -1]

    def push(self, images: Sequence[CsiImage]) -> np.ndarray:
        """Feed one interval's images (W2 >= 1 at one location); their features are averaged."""
        if len(images) == 0:
            raise RejectedInputError("An update interval needs at least one image")
        feature = self.quantifier.extract_batch(list(images)).mean(axis=0)
        cnn = None
        if self.warmup == "cnn_only" and len(self.window) + 1 < self.tracker.memory_length:
            cnn = self.quantifier.predict_batch(list(images)).mean(axis=0)
        return self.push_feature(feature, cnn)


def track(points: Sequence[Sequence[CsiImage]], quantifier: FeatureExtractor, tracker: TrainedTracker,
          warmup: str = "repeat_oldest") -> np.ndarray:
    """Time-ordered test points (each a list of images) -> one (x, y) per point."""
    if len(points) == 0:
        raise RejectedInputError("Cannot track an empty sequence")
    online = Tracker(quantifier, tracker, warmup)
    return np.array([online.push(images) for images in points]).reshape(-1, 2)


def predict_points_cnn_only(points: Sequence[Sequence[CsiImage]], quantifier: FeatureExtractor) -> np.ndarray:
    """CNN-only baseline: mean of each point's per-image predictions."""
    return np.array([quantifier.predict_batch(list(images)).mean(axis=0) for images in points]).reshape(-1, 2)


def save_tracker(path: Union[str, Path], tracker: TrainedTracker) -> Path:
    path = Path(path)
    save_checkpoint(path, tracker.model.layers)
    meta = {
        "config": asdict(tracker.config),
        "feature_dim": tracker.model.feature_dim,
        "memory_length": tracker.memory_length,
        "bounds": list(tracker.bounds),
    }
    with open(path.with_suffix(".yaml"), "w", encoding="utf-8") as f:
        yaml.safe_dump(meta, f, default_flow_style=False, sort_keys=False)
    return path


def load_tracker(path: Union[str, Path]) -> TrainedTracker:
    path = Path(path)
    meta_path = path.with_suffix(".yaml")
    if not meta_path.exists():
        raise FileNotFoundError(f"Tracker sidecar not found: {meta_path}")
    with open(meta_path, "r", encoding="utf-8") as f:
        meta = yaml.safe_load(f)
    try:
        config = LstmConfig(**meta["config"])
        feature_dim = int(meta["feature_dim"])
        memory_length = int(meta["memory_length"])
        bounds = tuple(float(b) for b in meta["bounds"])
    except (KeyError, TypeError) as e:
        raise CorruptFileError(str(meta_path), "sidecar", str(e))
    model = LstmModel(feature_dim, config)
    load_checkpoint(path, model.layers)
    return TrainedTracker(model, config, memory_length, bounds)
