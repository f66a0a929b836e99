"""Port interfaces between the trained models and their consumers."""

from typing import Protocol, Sequence, Union

import numpy as np

from .csi_image import CsiImage

Images = Union[np.ndarray, Sequence[CsiImage]]


class FeatureExtractor(Protocol):
    """Port for a frozen phase-1 model: spatial features and direct location estimates."""

    @property
    def feature_dim(self) -> int:
        """Length of one feature vector."""
        ...

    def extract_batch(self, images: Images) -> np.ndarray:
        """N preprocessed images -> N x feature_dim features."""
        ...

    def predict_batch(self, images: Images) -> np.ndarray:
        """N preprocessed images -> N x 2 clamped locations."""
        ...
