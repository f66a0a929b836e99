"""Tests for tracker.py."""

import numpy as np
import pandas as pd
import pytest

from src.csi_image import CsiImage
from src.errors import ConfigurationError, RejectedInputError
from src.storage import FeatureBank
from src.tracker import (
    LstmConfig,
    LstmModel,
    Tracker,
    TrajectoryConfig,
    TrajectorySet,
    generate_trajectories,
    load_tracker,
    neighbor_lists,
    predict_points_cnn_only,
    save_tracker,
    track,
    train_lstm,
)

FEATURES = 4
BOUNDS = (0.0, 0.0, 4.0, 3.0)


def grid_bank(columns=4, rows=3, per_rp=3, spacing=1.0, seed=0):
    """RPs on a ``columns`` x ``rows`` grid with ``per_rp`` random feature vectors each."""
    rng = np.random.default_rng(seed)
    features, rp_index, locations, times = [], [], [], []
    rp = 0
    for j in range(rows):
        for i in range(columns):
            for k in range(per_rp):
                features.append(rng.uniform(0.0, 1.0, FEATURES))
                rp_index.append(rp)
                locations.append(((i + 0.5) * spacing, (j + 0.5) * spacing))
                times.append(100.0 * k)
            rp += 1
    return FeatureBank(np.array(features), np.array(rp_index), np.array(locations), np.array(times))


class VectorQuantifier:
    """Feature extractor over 1 x F x 1 images: the feature is the image row, the prediction its location."""

    feature_dim = FEATURES

    def extract_batch(self, images):
        return np.stack([image.amplitudes.reshape(-1) for image in images])

    def predict_batch(self, images):
        return np.array([image.location for image in images], dtype=np.float64)


def vector_image(values, location=(1.0, 1.0)):
    return CsiImage(np.asarray(values, dtype=np.float64).reshape(1, FEATURES, 1), location)


def tiny_lstm(**overrides):
    values = dict(hidden_size=6, dropout=0.2, learning_rate=0.01, epochs=3, batch_size=8, reduced_scale=True)
    values.update(overrides)
    return LstmConfig(**values)


@pytest.fixture
def bank():
    return grid_bank()


@pytest.fixture
def trained(bank):
    config = TrajectoryConfig(memory_length=3, sigma=1.5, train_count=24, validation_count=8)
    train = generate_trajectories(bank, config, 24, seed=1)
    validation = generate_trajectories(bank, config, 8, seed=1, offset=24)
    return train_lstm(train, validation, bank, tiny_lstm(), BOUNDS, seed=2)


class TestTrajectoryGeneration:
    """Test bounded-step trajectory generation."""

    def test_neighbor_lists(self):
        """Test that neighbourhoods hold every RP within sigma, self included."""
        locations = np.array([[0.0, 0.0], [1.0, 0.0], [3.0, 0.0]])
        lists = neighbor_lists(locations, 1.0)
        assert [row.tolist() for row in lists] == [[0, 1], [0, 1], [2]]

    def test_steps_bounded_by_sigma(self, bank):
        """Test that every consecutive step is at most sigma apart."""
        config = TrajectoryConfig(memory_length=5, sigma=1.5)
        trajectories = generate_trajectories(bank, config, 200, seed=3)
        assert len(trajectories) == 200
        assert trajectories.memory_length == 5
        assert trajectories.step_lengths(bank).max() <= 1.5 + 1e-9

    def test_small_sigma_repeats_one_rp(self, bank):
        """Test that sigma below the grid spacing gives T repeats of one RP."""
        config = TrajectoryConfig(memory_length=4, sigma=0.5)
        trajectories = generate_trajectories(bank, config, 30, seed=3)
        assert np.all(trajectories.rp_indices == trajectories.rp_indices[:, :1])

    def test_rows_belong_to_their_rp(self, bank):
        """Test that each step's feature row is a snapshot of that step's RP."""
        trajectories = generate_trajectories(bank, TrajectoryConfig(memory_length=5), 50, seed=4)
        np.testing.assert_array_equal(bank.rp_index[trajectories.feature_rows], trajectories.rp_indices)
        trajectory = trajectories.trajectory(0, bank)
        assert trajectory.features.shape == (5, FEATURES)
        assert trajectory.locations.shape == (5, 2)

    def test_deterministic(self, bank):
        """Test that one seed gives identical sets."""
        config = TrajectoryConfig(memory_length=5)
        a = generate_trajectories(bank, config, 20, seed=9)
        b = generate_trajectories(bank, config, 20, seed=9)
        np.testing.assert_array_equal(a.feature_rows, b.feature_rows)

    def test_offset_continues_stream(self, bank):
        """Test that trajectory k depends only on seed and offset + k."""
        config = TrajectoryConfig(memory_length=5)
        whole = generate_trajectories(bank, config, 10, seed=9)
        tail = generate_trajectories(bank, config, 5, seed=9, offset=5)
        np.testing.assert_array_equal(whole.feature_rows[5:], tail.feature_rows)

    def test_test_rows_never_drawn(self):
        """Test that a bank holding only test rows cannot seed trajectories."""
        only_test = FeatureBank(np.zeros((2, FEATURES)), np.array([-1, -1]), np.zeros((2, 2)), np.zeros(2))
        with pytest.raises(RejectedInputError, match="no training features"):
            generate_trajectories(only_test, TrajectoryConfig(), 3, seed=0)

    def test_invalid_config(self):
        """Test that T below 1 and non-positive sigma are rejected."""
        with pytest.raises(ConfigurationError, match="Memory length"):
            TrajectoryConfig(memory_length=0)
        with pytest.raises(ConfigurationError, match="sigma"):
            TrajectoryConfig(sigma=0.0)

    def test_set_shapes_must_match(self):
        """Test that RP and row arrays must share one count x T shape."""
        with pytest.raises(RejectedInputError):
            TrajectorySet(np.zeros((2, 3)), np.zeros((2, 2)))


class TestLstmTraining:
    """Test the sequence model and its training."""

    def test_one_output_per_step(self):
        """Test that N x T x F windows give N x T x 2 locations."""
        model = LstmModel(FEATURES, tiny_lstm())
        out = model.forward(np.random.default_rng(0).random((7, 5, FEATURES)))
        assert out.shape == (7, 5, 2)

    def test_hidden_width_must_match_features(self):
        """Test that a hidden size other than the feature width needs reduced_scale."""
        with pytest.raises(ConfigurationError, match="reduced_scale"):
            LstmModel(FEATURES, tiny_lstm(reduced_scale=False))
        assert LstmModel(FEATURES, tiny_lstm(hidden_size=FEATURES, reduced_scale=False)).feature_dim == FEATURES

    def test_feature_dim_checked(self):
        """Test that windows with the wrong feature width are rejected."""
        model = LstmModel(FEATURES, tiny_lstm())
        with pytest.raises(RejectedInputError, match="features"):
            model.forward(np.zeros((2, 3, FEATURES + 1)))

    def test_curve(self, trained):
        """Test that the learning curve has one finite row per epoch."""
        assert trained.curve["epoch"].tolist() == [1, 2, 3]
        assert np.isfinite(trained.curve[["train_loss_m", "val_error_m"]].to_numpy()).all()
        assert trained.memory_length == 3

    def test_same_seed_same_curve(self, bank, trained):
        """Test that retraining with one seed reproduces the curve."""
        config = TrajectoryConfig(memory_length=3, sigma=1.5)
        train = generate_trajectories(bank, config, 24, seed=1)
        validation = generate_trajectories(bank, config, 8, seed=1, offset=24)
        again = train_lstm(train, validation, bank, tiny_lstm(), BOUNDS, seed=2)
        pd.testing.assert_frame_equal(trained.curve, again.curve)

    def test_memorizes_single_rp(self):
        """Test that trajectories repeating one RP drive the validation error toward zero."""
        bank = grid_bank(columns=1, rows=1, per_rp=4)
        config = TrajectoryConfig(memory_length=3, sigma=1.0)
        train = generate_trajectories(bank, config, 16, seed=0)
        tracker = train_lstm(train, None, bank, tiny_lstm(epochs=300, batch_size=16, dropout=0.0),
                             BOUNDS, seed=0)
        assert tracker.curve["val_error_m"].min() < 0.1

    @pytest.mark.slow
    def test_history_resolves_aliased_rps(self):
        """Test that a T=3 window beats a single feature when two far RPs share one fingerprint."""
        rng = np.random.default_rng(11)
        codes = np.eye(6)
        codes[5] = codes[0]
        features, rp_index, locations = [], [], []
        for rp in range(6):
            for _ in range(3):
                features.append(codes[rp] + rng.normal(0.0, 0.02, 6))
                rp_index.append(rp)
                locations.append((rp + 0.5, 0.5))
        line = FeatureBank(np.array(features), np.array(rp_index), np.array(locations), np.zeros(18))
        bounds = (0.0, 0.0, 6.0, 1.0)
        config = tiny_lstm(epochs=300, batch_size=32, dropout=0.0, reduced_scale=False)

        def last_step_error(memory_length):
            trajectories = TrajectoryConfig(memory_length=memory_length, sigma=1.0)
            train = generate_trajectories(line, trajectories, 240, seed=3)
            validation = generate_trajectories(line, trajectories, 120, seed=3, offset=240)
            tracker = train_lstm(train, validation, line, config, bounds, seed=4)
            pred = tracker.predict_windows(validation.features(line))[:, -1]
            truth = validation.locations(line)[:, -1]
            return float(np.linalg.norm(pred - truth, axis=-1).mean())

        assert last_step_error(3) < last_step_error(1)

    def test_mismatched_memory_length(self, bank):
        """Test that validation trajectories of another T are rejected."""
        train = generate_trajectories(bank, TrajectoryConfig(memory_length=3), 4, seed=0)
        validation = generate_trajectories(bank, TrajectoryConfig(memory_length=4), 4, seed=0)
        with pytest.raises(RejectedInputError, match="T=4"):
            train_lstm(train, validation, bank, tiny_lstm(), BOUNDS)

    def test_no_trajectories(self, bank):
        """Test that an empty training set is rejected."""
        empty = TrajectorySet(np.zeros((0, 3)), np.zeros((0, 3)))
        with pytest.raises(RejectedInputError, match="zero trajectories"):
            train_lstm(empty, None, bank, tiny_lstm(), BOUNDS)

    def test_invalid_dropout(self):
        """Test that a dropout rate of 1 is rejected."""
        with pytest.raises(ConfigurationError, match="Dropout"):
            LstmConfig(dropout=1.0)


class TestOnlineTracker:
    """Test the sliding-window tracker."""

    def test_unknown_warmup(self, trained):
        """Test that an unknown warm-up policy is rejected."""
        with pytest.raises(ConfigurationError, match="Warm-up"):
            Tracker(VectorQuantifier(), trained, "guess")

    def test_repeat_oldest_padding(self, trained):
        """Test that the first estimate uses a window of the first feature repeated T times."""
        feature = np.array([0.1, 0.2, 0.3, 0.4])
        online = Tracker(VectorQuantifier(), trained)
        first = online.push_feature(feature)
        expected = trained.predict_windows(np.tile(feature, (3, 1))[None])[0, -1]
        np.testing.assert_array_equal(first, expected)

    def test_constant_input_constant_output(self, trained):
        """Test that a stationary input gives a stationary output."""
        online = Tracker(VectorQuantifier(), trained)
        outputs = [online.push_feature(np.full(FEATURES, 0.5)) for _ in range(6)]
        for out in outputs[1:]:
            np.testing.assert_allclose(out, outputs[0], atol=1e-12)

    def test_order_matters(self, trained):
        """Test that reversing a window of distinct features changes the estimate."""
        features = np.random.default_rng(5).random((3, FEATURES))
        forward = Tracker(VectorQuantifier(), trained)
        backward = Tracker(VectorQuantifier(), trained)
        a = [forward.push_feature(f) for f in features][-1]
        b = [backward.push_feature(f) for f in features[::-1]][-1]
        assert not np.allclose(a, b)

    def test_cnn_only_warmup(self, trained):
        """Test that the cnn_only policy reports CNN estimates until the window fills."""
        points = [[vector_image(np.full(FEATURES, 0.1 * k), (float(k), 1.0))] for k in range(4)]
        outputs = track(points, VectorQuantifier(), trained, warmup="cnn_only")
        np.testing.assert_array_equal(outputs[0], [0.0, 1.0])
        np.testing.assert_array_equal(outputs[1], [1.0, 1.0])
        assert outputs.shape == (4, 2)

    def test_images_in_one_interval_are_averaged(self, trained):
        """Test that W2 images at one point act as their mean feature."""
        images = [vector_image([0.0, 0.2, 0.4, 0.6]), vector_image([0.2, 0.4, 0.6, 0.8])]
        averaged = Tracker(VectorQuantifier(), trained).push(images)
        single = Tracker(VectorQuantifier(), trained).push_feature(np.array([0.1, 0.3, 0.5, 0.7]))
        np.testing.assert_allclose(averaged, single, atol=1e-12)

    def test_reset(self, trained):
        """Test that reset empties the window."""
        online = Tracker(VectorQuantifier(), trained)
        online.push_feature(np.ones(FEATURES))
        online.reset()
        assert len(online.window) == 0

    def test_rejected_inputs(self, trained):
        """Test that empty intervals, empty sequences and wrong feature widths are rejected."""
        online = Tracker(VectorQuantifier(), trained)
        with pytest.raises(RejectedInputError, match="at least one image"):
            online.push([])
        with pytest.raises(RejectedInputError, match="empty"):
            track([], VectorQuantifier(), trained)
        with pytest.raises(RejectedInputError, match="tracker expects"):
            online.push_feature(np.ones(FEATURES + 2))

    def test_outputs_inside_bounds(self, trained):
        """Test that tracked locations are clamped to the site bounds."""
        rng = np.random.default_rng(6)
        points = [[vector_image(rng.random(FEATURES) * 50.0)] for _ in range(8)]
        outputs = track(points, VectorQuantifier(), trained)
        assert np.all((outputs[:, 0] >= 0.0) & (outputs[:, 0] <= 4.0))
        assert np.all((outputs[:, 1] >= 0.0) & (outputs[:, 1] <= 3.0))

    def test_cnn_only_baseline_averages(self):
        """Test that the CNN-only baseline averages each point's predictions."""
        points = [[vector_image(np.zeros(FEATURES), (1.0, 1.0)), vector_image(np.zeros(FEATURES), (2.0, 3.0))]]
        np.testing.assert_array_equal(predict_points_cnn_only(points, VectorQuantifier()), [[1.5, 2.0]])


class TestPersistence:
    """Test tracker checkpoint round trips."""

    def test_roundtrip(self, tmp_path, trained):
        """Test that a loaded tracker reproduces window predictions exactly."""
        path = save_tracker(tmp_path / "lstm.nnck", trained)
        loaded = load_tracker(path)
        windows = np.random.default_rng(7).random((5, 3, FEATURES))
        np.testing.assert_array_equal(loaded.predict_windows(windows), trained.predict_windows(windows))
        assert loaded.memory_length == 3
        assert loaded.bounds == BOUNDS

    def test_missing_sidecar(self, tmp_path, trained):
        """Test that a checkpoint without its sidecar cannot be loaded."""
        path = save_tracker(tmp_path / "lstm.nnck", trained)
        path.with_suffix(".yaml").unlink()
        with pytest.raises(FileNotFoundError):
            load_tracker(path)
