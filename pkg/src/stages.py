"""Pipeline stages: each reads its predecessors' files and writes its own artifact."""

import json
import logging
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np
import pandas as pd
import yaml

from .channel_sim import SiteModel, build_database, route_label
from .config import RunConfig
from .csi_image import FingerprintDatabase
from .errors import CorruptFileError, OutputExistsError, RejectedInputError
from .evaluation import (
    ErrorReport,
    ambiguity_histogram,
    ambiguity_summary,
    average_self_correlation,
    compare_reports,
    count_ambiguous,
    cross_time_correlation,
    error_report,
    feature_correlation_gain,
    self_trajectory_fingerprints,
    spatial_correlation_decay,
    standardize_columns,
    write_report,
)
from .preprocessing import build_normalization_context, preprocess_database
from .quantifier import load_quantifier, save_quantifier, train_cnn
from .service_factory import (
    create_ambiguity_config,
    create_cnn_config,
    create_lstm_config,
    create_simulation,
    create_trajectory_config,
)
from .storage import (
    FeatureBank,
    load_context,
    load_database,
    load_feature_bank,
    load_trajectories,
    save_context,
    save_database,
    save_feature_bank,
    save_trajectories,
)
from .tracker import (
    TrajectorySet,
    generate_trajectories,
    load_tracker,
    predict_points_cnn_only,
    save_tracker,
    track,
    train_lstm,
)

METHODS = ("cnn_only", "cnn_lstm")


@dataclass(frozen=True)
class RunPaths:
    """File layout of one run directory."""
    root: Path

    @property
    def site(self) -> Path:
        return self.root / "site.yaml"

    @property
    def train(self) -> Path:
        return self.root / "train.csid"

    def route(self, label: str) -> Path:
        return self.root / "routes" / f"{label}.csid"

    @property
    def context(self) -> Path:
        return self.root / "context.yaml"

    @property
    def train_pre(self) -> Path:
        return self.root / "train_pre.csid"

    def route_pre(self, label: str) -> Path:
        return self.root / "routes_pre" / f"{label}.csid"

    @property
    def cnn(self) -> Path:
        return self.root / "cnn.nnck"

    @property
    def cnn_curve(self) -> Path:
        return self.root / "cnn_curve.csv"

    @property
    def features(self) -> Path:
        return self.root / "features.npz"

    @property
    def traj_train(self) -> Path:
        return self.root / "traj_train.traj"

    @property
    def traj_val(self) -> Path:
        return self.root / "traj_val.traj"

    @property
    def lstm(self) -> Path:
        return self.root / "lstm.nnck"

    @property
    def lstm_curve(self) -> Path:
        return self.root / "lstm_curve.csv"

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    def errors(self, label: str, method: str) -> Path:
        return self.reports / f"{label}_{method}_errors.csv"

    @property
    def manifest(self) -> Path:
        return self.root / "manifest.jsonl"


def save_site(path: Path, site: SiteModel, routes: Sequence[str]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump({"site": site.to_dict(), "routes": list(routes)}, f, default_flow_style=False, sort_keys=False)
    return path


def load_site(path: Path) -> Tuple[SiteModel, List[str]]:
    if not path.exists():
        raise FileNotFoundError(f"Site description not found: {path} (run synth first)")
    with open(path, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f)
    try:
        return SiteModel.from_dict(data["site"]), [str(label) for label in data["routes"]]
    except (KeyError, TypeError) as e:
        raise CorruptFileError(str(path), "site", str(e))


def check_outputs(paths: Sequence[Path], force: bool) -> None:
    """Raise OutputExistsError for the first non-empty existing output unless forced."""
    if force:
        return
    for path in paths:
        if path.is_file() and path.stat().st_size > 0:
            raise OutputExistsError(str(path))
        if path.is_dir() and any(path.iterdir()):
            raise OutputExistsError(str(path))


class PipelineOrchestrator:
    """Runs named stages against one run directory and records each in the manifest."""

    def __init__(self, config: RunConfig):
        self.config = config
        self.paths = RunPaths(Path(config.workdir))
        self.logger = logging.getLogger(__name__)
        self._stages: Dict[str, Callable[[], List[Path]]] = {
            "synth": self.synth,
            "preprocess": self.preprocess,
            "train-cnn": self.train_cnn,
            "extract-features": self.extract_features,
            "gen-traj": self.gen_traj,
            "train-lstm": self.train_lstm,
            "evaluate": self.evaluate,
            "ambiguity": self.ambiguity,
            "report": self.report,
            "correlation": self.correlation,
        }

    @property
    def stage_names(self) -> List[str]:
        return list(self._stages)

    def run(self, stage: str) -> List[Path]:
        """Run one stage, append its manifest line and return the files it wrote."""
        if stage not in self._stages:
            raise KeyError(f"Unknown stage '{stage}'")
        self.logger.info(f"🔄 [{stage}] starting in {self.paths.root}")
        started = time.perf_counter()
        outputs = self._stages[stage]()
        elapsed = time.perf_counter() - started
        self._record(stage, outputs, elapsed)
        self.logger.info(f"✅ [{stage}] finished in {elapsed:.1f} s, {len(outputs)} outputs")
        return outputs

    def _record(self, stage: str, outputs: Sequence[Path], elapsed: float) -> None:
        entry = {
            "command": stage,
            "config_hash": self.config.config_hash(),
            "seed": self.config.seed,
            "wall_time_s": round(elapsed, 3),
            "outputs": [str(p) for p in outputs],
            "finished_at": datetime.now(timezone.utc).isoformat(),
        }
        self.paths.root.mkdir(parents=True, exist_ok=True)
        with open(self.paths.manifest, "a", encoding="utf-8") as f:
            f.write(json.dumps(entry) + "\n")

    def _guard(self, paths: Sequence[Path]) -> None:
        check_outputs(paths, self.config.force)

    def _load_db(self, path: Path) -> FingerprintDatabase:
        database = load_database(path)
        if database.dims != self.config.dims:
            raise RejectedInputError(
                f"{path}: profile {database.dims} does not match configured '{self.config.profile}' {self.config.dims}"
            )
        return database

    # ---- stages ------------------------------------------------------------------

    def synth(self) -> List[Path]:
        services = create_simulation(self.config)
        labels = [route_label(day, mode) for day, mode in enumerate(services.schedule)]
        outputs = [self.paths.site, self.paths.train] + [self.paths.route(label) for label in labels]
        self._guard(outputs)

        dataset = build_database(
            services.site, services.sampling, services.snapshot, services.schedule,
            self.config.seed, services.workers,
        )
        save_site(self.paths.site, dataset.site, list(dataset.routes))
        save_database(self.paths.train, dataset.train)
        for label, route in dataset.routes.items():
            save_database(self.paths.route(label), route)
        return outputs

    def preprocess(self) -> List[Path]:
        _, labels = load_site(self.paths.site)
        train = self._load_db(self.paths.train)
        outputs = [self.paths.context, self.paths.train_pre] + [self.paths.route_pre(label) for label in labels]
        self._guard(outputs)

        context = build_normalization_context(train.training_records(), self.config.window, str(self.paths.train))
        save_context(self.paths.context, context)
        save_database(self.paths.train_pre, preprocess_database(train, context, self.config.window))
        for label in labels:
            route = self._load_db(self.paths.route(label))
            save_database(self.paths.route_pre(label), preprocess_database(route, context, self.config.window))
        return outputs

    def train_cnn(self) -> List[Path]:
        site, _ = load_site(self.paths.site)
        database = self._load_db(self.paths.train_pre)
        context = load_context(self.paths.context)
        outputs = [self.paths.cnn, self.paths.cnn_curve]
        self._guard(outputs)

        quantifier = train_cnn(
            database, create_cnn_config(self.config), context, site.bounds(),
            seed=self.config.seed, window=self.config.window,
        )
        save_quantifier(self.paths.cnn, quantifier)
        quantifier.curve.to_csv(self.paths.cnn_curve, index=False)
        return outputs

    def extract_features(self) -> List[Path]:
        quantifier = load_quantifier(self.paths.cnn)
        database = self._load_db(self.paths.train_pre)
        self._guard([self.paths.features])

        bank = FeatureBank(
            features=quantifier.extract_batch(database.stack()),
            rp_index=np.array([r.rp_index for r in database.records], dtype=np.int64),
            locations=database.locations(),
            snapshot_times=np.array([r.image.snapshot_time for r in database.records], dtype=np.float64),
        )
        save_feature_bank(self.paths.features, bank)
        return [self.paths.features]

    def gen_traj(self) -> List[Path]:
        bank = load_feature_bank(self.paths.features)
        plan = create_trajectory_config(self.config)
        outputs = [self.paths.traj_train]
        if plan.validation_count:
            outputs.append(self.paths.traj_val)
        self._guard(outputs)

        train = generate_trajectories(bank, plan, plan.train_count, self.config.seed)
        save_trajectories(self.paths.traj_train, train.rp_indices, train.feature_rows)
        if plan.validation_count:
            validation = generate_trajectories(bank, plan, plan.validation_count, self.config.seed,
                                               offset=plan.train_count)
            save_trajectories(self.paths.traj_val, validation.rp_indices, validation.feature_rows)
        return outputs

    def train_lstm(self) -> List[Path]:
        site, _ = load_site(self.paths.site)
        bank = load_feature_bank(self.paths.features)
        train = TrajectorySet(*load_trajectories(self.paths.traj_train))
        validation = TrajectorySet(*load_trajectories(self.paths.traj_val)) if self.paths.traj_val.exists() else None
        if train.memory_length != self.config.memory_length:
            raise RejectedInputError(
                f"{self.paths.traj_train}: trajectories have T={train.memory_length}, "
                f"configured memory_length is {self.config.memory_length}"
            )
        if train.feature_rows.size and int(train.feature_rows.max()) >= len(bank.features):
            raise RejectedInputError(f"{self.paths.traj_train}: feature rows exceed the bank in {self.paths.features}")
        outputs = [self.paths.lstm, self.paths.lstm_curve]
        self._guard(outputs)

        tracker = train_lstm(train, validation, bank, create_lstm_config(self.config), site.bounds(),
                             seed=self.config.seed)
        save_tracker(self.paths.lstm, tracker)
        tracker.curve.to_csv(self.paths.lstm_curve, index=False)
        return outputs

    def evaluate(self) -> List[Path]:
        """Stream every test route through the tracker and the CNN-only baseline."""
        _, labels = load_site(self.paths.site)
        quantifier = load_quantifier(self.paths.cnn)
        tracker = load_tracker(self.paths.lstm)
        self._guard([self.paths.errors(label, method) for label in labels for method in METHODS])

        outputs: List[Path] = []
        for label in labels:
            route = self._load_db(self.paths.route_pre(label))
            points = route.test_points(self.config.w2)
            if not points:
                raise RejectedInputError(f"{self.paths.route_pre(label)}: route holds no test points")
            images = [[r.image for r in point] for point in points]
            truth = np.array([point[0].image.location for point in points], dtype=np.float64)
            predictions = {
                "cnn_only": predict_points_cnn_only(images, quantifier),
                "cnn_lstm": track(images, quantifier, tracker, self.config.warmup),
            }
            for method in METHODS:
                report = error_report(predictions[method], truth, label=f"{label}_{method}", route=label, method=method)
                outputs.extend(write_report(self.paths.reports, report).values())
                self.logger.info(
                    f"{label} {method}: mean {report.mean:.2f} m, std {report.std:.2f} m, P80 {report.p80:.2f} m"
                )
        return outputs

    def report(self) -> List[Path]:
        """Per-route comparison of both methods plus a pooled average row."""
        _, labels = load_site(self.paths.site)
        reports: Dict[str, List[ErrorReport]] = {method: [] for method in METHODS}
        for label in labels:
            for method in METHODS:
                path = self.paths.errors(label, method)
                if not path.exists():
                    raise FileNotFoundError(f"Error file not found: {path} (run evaluate first)")
                frame = pd.read_csv(path)
                if "error_m" not in frame.columns:
                    raise CorruptFileError(str(path), "error_m", "column missing")
                reports[method].append(ErrorReport(frame["error_m"].to_numpy(), label))
        table_path = self.paths.reports / "comparison.csv"
        self._guard([table_path])

        tables = {method: compare_reports(reports[method]).set_index("label") for method in METHODS}
        table = pd.DataFrame({
            "test": tables["cnn_lstm"].index,
            "points": tables["cnn_lstm"]["points"].to_numpy(),
            "cnn_only_average": tables["cnn_only"]["average"].to_numpy(),
            "cnn_lstm_average": tables["cnn_lstm"]["average"].to_numpy(),
            "cnn_only_p80_m": tables["cnn_only"]["p80_m"].to_numpy(),
            "cnn_lstm_p80_m": tables["cnn_lstm"]["p80_m"].to_numpy(),
            "cnn_lstm_p80_mean_ratio": tables["cnn_lstm"]["p80_mean_ratio"].to_numpy(),
        })
        self.paths.reports.mkdir(parents=True, exist_ok=True)
        table.to_csv(table_path, index=False)
        self.logger.info(f"\n{table.to_string(index=False)}")
        return [table_path]

    def ambiguity(self) -> List[Path]:
        """Ambiguous-point counts for raw images, single CNN features and T-step feature sequences."""
        database = self._load_db(self.paths.train_pre)
        bank = load_feature_bank(self.paths.features)
        per_rp = self.config.self_trajectories
        outputs = [self.paths.reports / f"ambiguity_{name}.csv" for name in ("raw", "cnn", "cnn_lstm", "summary")]
        self._guard(outputs)

        locations = database.rp_locations()
        raw = {rp: database.stack(records[:per_rp]) for rp, records in database.by_rp().items()}
        # Unit scales are arbitrary; compare features in per-unit z-scores.
        standardized = FeatureBank(
            standardize_columns(bank.features), bank.rp_index, bank.locations, bank.snapshot_times
        )
        cnn = {rp: standardized.features[rows[:per_rp]] for rp, rows in standardized.rows_by_rp().items()}
        sequences = self_trajectory_fingerprints(standardized, self.config.memory_length, per_rp, self.config.seed)
        settings = create_ambiguity_config(self.config)

        self.paths.reports.mkdir(parents=True, exist_ok=True)
        rows = []
        for name, fingerprints, path in zip(("raw", "cnn", "cnn_lstm"), (raw, cnn, sequences), outputs):
            counts = count_ambiguous(fingerprints, locations, settings)
            ambiguity_histogram(counts).to_csv(path, index=False)
            summary = ambiguity_summary(counts)
            rows.append({"representation": name, **summary})
            self.logger.info(
                f"Ambiguity {name}: {summary['zero_fraction']:.1%} RPs unambiguous, max {summary['max_count']}"
            )
        pd.DataFrame(rows).to_csv(outputs[-1], index=False)
        return outputs

    def correlation(self) -> List[Path]:
        """Temporal and spatial correlation of the raw database, and the CNN feature gain if features exist."""
        _, labels = load_site(self.paths.site)
        database = self._load_db(self.paths.train)
        names = ["correlation_time", "correlation_modes", "correlation_spatial"]
        if self.paths.features.exists():
            names.append("correlation_gain")
        outputs = [self.paths.reports / f"{name}.csv" for name in names]
        self._guard(outputs)
        self.paths.reports.mkdir(parents=True, exist_ok=True)

        groups = database.by_rp()
        rps = sorted(groups)
        if self.config.ambiguity_sample is not None and self.config.ambiguity_sample < len(rps):
            rng = np.random.default_rng(self.config.seed)
            rps = sorted(int(rp) for rp in rng.choice(rps, size=self.config.ambiguity_sample, replace=False))

        curves = np.array([cross_time_correlation(database.stack(groups[rp])) for rp in rps])
        pd.DataFrame({
            "snapshot": np.arange(curves.shape[1]),
            "mean_correlation": curves.mean(axis=0),
        }).to_csv(outputs[0], index=False)

        # Snapshot k was taken on day k mod (number of scheduled days).
        days = len(labels)
        mode_rows = []
        for day, label in enumerate(labels):
            values = []
            for rp in rps:
                same_day = [r for r in groups[rp] if r.snapshot_index % days == day]
                if len(same_day) >= 2:
                    values.append(average_self_correlation(database.stack(same_day)))
            mode_rows.append({
                "route": label,
                "mean_self_correlation": float(np.mean(values)) if values else float("nan"),
                "rps": len(values),
            })
        pd.DataFrame(mode_rows).to_csv(outputs[1], index=False)

        first = {rp: groups[rp][0].image.amplitudes for rp in groups}
        spatial_correlation_decay(first, database.rp_locations()).to_csv(outputs[2], index=False)

        if self.paths.features.exists():
            bank = load_feature_bank(self.paths.features)
            pre = self._load_db(self.paths.train_pre)
            pre_groups = pre.by_rp()
            bank_rows = bank.rows_by_rp()
            raw = {rp: pre.stack(pre_groups[rp]) for rp in rps if rp in pre_groups}
            features = {rp: bank.features[bank_rows[rp]] for rp in rps if rp in bank_rows}
            gain = feature_correlation_gain(raw, features)
            gain.to_csv(outputs[3], index=False)
            self.logger.info(
                f"Feature correlation {gain['feature_rho'].mean():.3f} vs raw {gain['raw_rho'].mean():.3f}"
            )
        for row in mode_rows:
            self.logger.info(f"{row['route']}: same-location self-correlation {row['mean_self_correlation']:.3f}")
        return outputs
