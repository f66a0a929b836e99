"""Builds the domain objects each stage needs from one RunConfig."""

from dataclasses import dataclass
from typing import List

from .channel_sim import FluctuationMode, SamplingPlan, SiteModel, parse_schedule
from .config import RunConfig, thread_count
from .csi_image import SnapshotPlan
from .evaluation import AmbiguityConfig
from .quantifier import CnnConfig
from .tracker import LstmConfig, TrajectoryConfig


@dataclass
class SimulationServices:
    """Everything the synth stage needs."""
    site: SiteModel
    sampling: SamplingPlan
    snapshot: SnapshotPlan
    schedule: List[FluctuationMode]
    workers: int


def create_site(config: RunConfig) -> SiteModel:
    return SiteModel.build(
        width=config.area_w,
        depth=config.area_h,
        ap_position=(config.ap_x, config.ap_y),
        profile=config.profile,
        seed=config.seed,
        scatterer_count=config.scatterers,
    )


def create_simulation(config: RunConfig) -> SimulationServices:
    """Create the site, sampling plans and day schedule with the configured worker count."""
    sampling = SamplingPlan(
        rp_grid_spacing=config.grid,
        test_point_count=config.test_points,
        speed_range=(config.speed_min, config.speed_max),
        update_interval=config.update_interval,
        snapshot_interval=config.snapshot_interval,
    )
    snapshot = SnapshotPlan(train_images_per_rp=config.w1, test_images_per_point=config.w2)
    return SimulationServices(
        site=create_site(config),
        sampling=sampling,
        snapshot=snapshot,
        schedule=parse_schedule(config.mode),
        workers=thread_count(),
    )


def create_cnn_config(config: RunConfig) -> CnnConfig:
    return CnnConfig(
        input_dims=config.dims,
        kernel=(config.cnn_kernel, config.cnn_kernel),
        filters=config.cnn_filters,
        conv_layers=config.cnn_conv_layers,
        fc1=config.fc1,
        fc2=config.fc2,
        epochs=config.cnn_epochs,
        batch_size=config.batch_size,
        learning_rate=config.learning_rate,
        validation_fraction=config.validation_fraction,
        reduced_scale=config.reduced_scale,
    )


def create_trajectory_config(config: RunConfig) -> TrajectoryConfig:
    return TrajectoryConfig(
        memory_length=config.memory_length,
        sigma=config.sigma,
        delta_t=config.delta_t,
        train_count=config.train_trajectories,
        validation_count=config.validation_trajectories,
    )


def create_lstm_config(config: RunConfig) -> LstmConfig:
    return LstmConfig(
        hidden_size=config.hidden_size,
        dropout=config.dropout,
        learning_rate=config.lstm_learning_rate,
        epochs=config.lstm_epochs,
        batch_size=config.batch_size,
        reduced_scale=config.reduced_scale,
    )


def create_ambiguity_config(config: RunConfig) -> AmbiguityConfig:
    return AmbiguityConfig(
        grid_size=config.grid_size,
        correlation_threshold=config.correlation_threshold,
        sample_size=config.ambiguity_sample,
        normalize=config.ambiguity_normalize,
        seed=config.seed,
    )
