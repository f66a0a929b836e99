"""Phase-1 CNN location regressor and spatial feature extractor."""

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import yaml

from .checkpoint import load_checkpoint, save_checkpoint
from .csi_image import CsiImage, FingerprintDatabase, FingerprintRecord, NormalizationContext
from .errors import ConfigurationError, CorruptFileError, NumericError, RejectedInputError
from .layers import Conv2D, Flatten, FullyConnected, Layer, ReLU, collect_parameters
from .losses import mse_loss, mse_loss_grad
from .optim import Adam

logger = logging.getLogger(__name__)

Bounds = Tuple[float, float, float, float]


@dataclass
class CnnConfig:
    """Conv stack, FC sizes and training hyperparameters."""
    input_dims: Tuple[int, int, int] = (30, 30, 3)
    kernel: Tuple[int, int] = (5, 5)
    filters: int = 10
    conv_layers: int = 3
    fc1: Optional[int] = None
    fc2: Optional[int] = None
    epochs: int = 100
    batch_size: int = 32
    learning_rate: float = 0.001
    validation_fraction: float = 0.2
    reduced_scale: bool = False

    def __post_init__(self) -> None:
        self.input_dims = tuple(int(d) for d in self.input_dims)
        self.kernel = tuple(int(k) for k in self.kernel)
        if len(self.input_dims) != 3 or min(self.input_dims) < 1:
            raise ConfigurationError(f"CNN input dims must be three positive counts, got {self.input_dims}")
        if any(k < 1 or k % 2 == 0 for k in self.kernel):
            raise ConfigurationError(f"Conv kernel dims must be odd and >= 1, got {self.kernel}")
        if self.filters < 1 or self.conv_layers < 1:
            raise ConfigurationError("CNN needs at least one conv layer with at least one filter")
        if self.fc1 is None:
            self.fc1 = self.flat_size
        if self.fc2 is None:
            self.fc2 = max(1, self.fc1 // 10)
        if self.fc1 < 1 or self.fc2 < 1:
            raise ConfigurationError("FC sizes must be >= 1")
        if self.fc1 != self.flat_size:
            if not self.reduced_scale:
                raise ConfigurationError(
                    f"FC1 width {self.fc1} must equal the flattened conv output {self.flat_size}; "
                    f"set reduced_scale to run a narrower network"
                )
            logger.info(f"Reduced-scale CNN: FC1 width {self.fc1}, flattened conv output {self.flat_size}")
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigurationError("Epochs and batch size must be >= 1 and the learning rate positive")
        if not 0.0 <= self.validation_fraction < 1.0:
            raise ConfigurationError(f"Validation fraction must be in [0, 1), got {self.validation_fraction}")

    @property
    def flat_size(self) -> int:
        h, w, _ = self.input_dims
        return h * w * self.filters

    @property
    def feature_dim(self) -> int:
        return int(self.fc2)

    def layer_shapes(self) -> List[Tuple[str, Tuple[int, ...]]]:
        """Per-example output shape of every layer, in order."""
        h, w, c = self.input_dims
        shapes: List[Tuple[str, Tuple[int, ...]]] = [("input", (h, w, c))]
        for k in range(self.conv_layers):
            shapes.append((f"conv{k + 1}", (h, w, self.filters)))
        shapes += [
            ("flatten", (self.flat_size,)),
            ("fc1", (self.fc1,)),
            ("fc2", (self.fc2,)),
            ("output", (2,)),
        ]
        return shapes

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["input_dims"] = list(self.input_dims)
        data["kernel"] = list(self.kernel)
        return data


class CnnModel:
    """Conv+ReLU blocks, FC1+ReLU, FC2+ReLU (the features) and a linear x/y head."""

    def __init__(self, config: CnnConfig, rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        _, _, channels = config.input_dims
        body: List[Layer] = []
        for k in range(config.conv_layers):
            body.append(Conv2D(channels if k == 0 else config.filters, config.filters, config.kernel, rng))
            body.append(ReLU())
        body += [
            Flatten(),
            FullyConnected(config.flat_size, config.fc1, rng), ReLU(),
            FullyConnected(config.fc1, config.fc2, rng), ReLU(),
        ]
        self.body = body
        self.head = FullyConnected(config.fc2, 2, rng)

    @property
    def layers(self) -> List[Layer]:
        return self.body + [self.head]

    def parameters(self):
        return collect_parameters(self.layers)

    def _check(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or tuple(x.shape[1:]) != self.config.input_dims:
            raise RejectedInputError(f"Expected N x {self.config.input_dims} images, got {x.shape}")
        return x

    def features(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        out = self._check(x)
        for layer in self.body:
            out = layer.forward(out, training)
        return out

    def forward(self, x: np.ndarray, training: bool = False) -> np.ndarray:
        return self.head.forward(self.features(x, training), training)

    def backward(self, dpred: np.ndarray) -> None:
        grad = self.head.backward(dpred)
        for layer in reversed(self.body):
            grad = layer.backward(grad)

    def layer_shapes(self) -> List[Tuple[str, Tuple[int, ...]]]:
        return self.config.layer_shapes()


def clamp_to_bounds(points: np.ndarray, bounds: Bounds) -> np.ndarray:
    x0, y0, x1, y1 = bounds
    return np.stack([np.clip(points[..., 0], x0, x1), np.clip(points[..., 1], y0, y1)], axis=-1)


@dataclass
class TrainedQuantifier:
    """A trained CNN with the normalization context and site bounds it was trained under."""
    model: CnnModel
    config: CnnConfig
    norm_context: NormalizationContext
    bounds: Bounds
    window: int = 3
    curve: Optional[pd.DataFrame] = field(default=None, repr=False)

    @property
    def feature_dim(self) -> int:
        return self.config.feature_dim

    def _images(self, images: Union[np.ndarray, Sequence[CsiImage]]) -> np.ndarray:
        if isinstance(images, np.ndarray):
            batch = images
        else:
            batch = np.stack([img.amplitudes for img in images]) if len(images) else np.zeros((0,) + self.config.input_dims)
        if batch.ndim == 3:
            batch = batch[None]
        if tuple(batch.shape[1:]) != self.config.input_dims:
            raise RejectedInputError(f"Image profile {tuple(batch.shape[1:])} does not match model {self.config.input_dims}")
        return batch

    def extract_batch(self, images, chunk: int = 256) -> np.ndarray:
        batch = self._images(images)
        if len(batch) == 0:
            return np.zeros((0, self.feature_dim))
        return np.concatenate([self.model.features(batch[i:i + chunk]) for i in range(0, len(batch), chunk)])

    def predict_batch(self, images, chunk: int = 256) -> np.ndarray:
        batch = self._images(images)
        if len(batch) == 0:
            return np.zeros((0, 2))
        raw = np.concatenate([self.model.forward(batch[i:i + chunk]) for i in range(0, len(batch), chunk)])
        return clamp_to_bounds(raw, self.bounds)


def extract_features(model: TrainedQuantifier, image: CsiImage) -> np.ndarray:
    """FC2 activations of one preprocessed image."""
    return model.extract_batch([image])[0]


def predict_cnn_only(model: TrainedQuantifier, image: CsiImage) -> Tuple[float, float]:
    x, y = model.predict_batch([image])[0]
    return float(x), float(y)


def split_by_time(database: FingerprintDatabase, fraction: float) -> Tuple[List[FingerprintRecord], List[FingerprintRecord]]:
    """Latest ``fraction`` of each RP's snapshots go to validation (at least one stays in training)."""
    train: List[FingerprintRecord] = []
    validation: List[FingerprintRecord] = []
    for records in database.by_rp().values():
        held = min(len(records) - 1, int(math.ceil(fraction * len(records)))) if fraction > 0 else 0
        cut = len(records) - held
        train.extend(records[:cut])
        validation.extend(records[cut:])
    return train, validation


def _snapshot(model: CnnModel) -> List[np.ndarray]:
    return [p.data.copy() for p in model.parameters()]


def _restore(model: CnnModel, arrays: List[np.ndarray]) -> None:
    for p, a in zip(model.parameters(), arrays):
        p.data[...] = a


def mean_error(predictions: np.ndarray, targets: np.ndarray) -> float:
    if len(targets) == 0:
        return float("nan")
    return float(np.mean(np.linalg.norm(predictions - targets, axis=1)))


def train_cnn(database: FingerprintDatabase, config: CnnConfig, context: NormalizationContext,
              bounds: Bounds, seed: int = 0, window: int = 3) -> TrainedQuantifier:
    """Adam on the mean Euclidean location error; keeps the best-validation epoch."""
    if not database.training_records():
        raise RejectedInputError("Cannot train on an empty database")
    if database.dims != config.input_dims:
        raise RejectedInputError(f"Database profile {database.dims} does not match CNN input {config.input_dims}")

    train_records, val_records = split_by_time(database, config.validation_fraction)
    x_train = database.stack(train_records)
    y_train = database.locations(train_records)
    x_val = database.stack(val_records) if val_records else x_train
    y_val = database.locations(val_records) if val_records else y_train

    rng = np.random.default_rng(seed)
    model = CnnModel(config, rng)
    optimizer = Adam(model.parameters(), config.learning_rate)
    quantifier = TrainedQuantifier(model, config, context, bounds, window)

    best_error = math.inf
    best = _snapshot(model)
    rows = []
    logger.info(f"🔄 Training CNN on {len(x_train)} images ({len(val_records)} held out) for {config.epochs} epochs")
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(x_train))
        total = 0.0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            optimizer.zero_grad()
            pred = model.forward(x_train[idx], training=True)
            loss = mse_loss(pred, y_train[idx])
            if not math.isfinite(loss):
                raise NumericError("CNN training loss", optimizer.state.step)
            model.backward(mse_loss_grad(pred, y_train[idx]))
            optimizer.step()
            total += loss * len(idx)
            logger.debug(f"epoch {epoch} batch {start // config.batch_size}: loss {loss:.4f} m")
        train_loss = total / len(order)
        val_error = mean_error(quantifier.predict_batch(x_val), y_val)
        rows.append({"epoch": epoch, "train_loss_m": train_loss, "val_error_m": val_error})
        logger.info(f"Epoch {epoch}/{config.epochs}: train {train_loss:.4f} m, validation {val_error:.4f} m")
        if val_error < best_error:
            best_error = val_error
            best = _snapshot(model)

    _restore(model, best)
    quantifier.curve = pd.DataFrame(rows, columns=["epoch", "train_loss_m", "val_error_m"])
    logger.info(f"✅ CNN trained, best validation error {best_error:.4f} m")
    return quantifier


def sidecar_path(path: Union[str, Path]) -> Path:
    return Path(path).with_suffix(".yaml")


def save_quantifier(path: Union[str, Path], quantifier: TrainedQuantifier) -> Path:
    """NNCK parameters at ``path`` plus a YAML sidecar with config, context and bounds."""
    path = Path(path)
    save_checkpoint(path, quantifier.model.layers)
    sidecar = {
        "config": quantifier.config.to_dict(),
        "bounds": list(quantifier.bounds),
        "window": quantifier.window,
        "context": {
            "source": quantifier.norm_context.source,
            "a_max": float(quantifier.norm_context.a_max),
            "per_rp_average": {int(k): float(v) for k, v in quantifier.norm_context.per_rp_average.items()},
        },
    }
    with open(sidecar_path(path), "w", encoding="utf-8") as f:
        yaml.safe_dump(sidecar, f, default_flow_style=False, sort_keys=False)
    return path


def load_quantifier(path: Union[str, Path]) -> TrainedQuantifier:
    path = Path(path)
    meta_path = sidecar_path(path)
    if not meta_path.exists():
        raise FileNotFoundError(f"Quantifier sidecar not found: {meta_path}")
    with open(meta_path, "r", encoding="utf-8") as f:
        meta = yaml.safe_load(f)
    try:
        config = CnnConfig(**meta["config"])
        ctx = meta["context"]
        context = NormalizationContext(
            {int(k): float(v) for k, v in ctx["per_rp_average"].items()}, float(ctx["a_max"]), ctx.get("source", "")
        )
        bounds = tuple(float(b) for b in meta["bounds"])
        window = int(meta.get("window", 3))
    except (KeyError, TypeError) as e:
        raise CorruptFileError(str(meta_path), "sidecar", str(e))
    model = CnnModel(config)
    load_checkpoint(path, model.layers)
    return TrainedQuantifier(model, config, context, bounds, window)
