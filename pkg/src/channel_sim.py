"""Synthetic multipath CSI generator.

A site is a rectangular floor with one AP, straight walls and a few static
scatterers. The multipath channel at a location is the frequency response, at
carrier plus subcarrier offset, of the line-of-sight path, first-order wall
reflections (image method) and the scatterer paths. The static fingerprint of
a location shapes that response with the receiver's gain profile and a
spatially correlated log-normal shadowing field. Each snapshot mixes the
fingerprint with a pattern caused by people moving through the site, weighted
so two snapshots of one location correlate at the mode's target level, then
adds scan noise, block fades and outlier rows.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .csi_image import CsiImage, FingerprintDatabase, FingerprintRecord, SnapshotPlan, profile_dims
from .errors import ConfigurationError, RejectedInputError

logger = logging.getLogger(__name__)

SPEED_OF_LIGHT = 299_792_458.0
DAY_SECONDS = 86_400.0

# Office core of the default 21 x 16 m floor, as fractions of the area.
_CORE_FRACTIONS = (6.5 / 21.0, 5.5 / 16.0, 14.5 / 21.0, 10.5 / 16.0)


@dataclass(frozen=True)
class FluctuationMode:
    """Temporal behaviour of the channel during one kind of day."""
    mode: str
    target_self_correlation: float
    outlier_row_probability: float
    fade_block_probability: float
    scan_noise: float = 0.03
    people: int = 3

    def __post_init__(self) -> None:
        if not 0.0 < self.target_self_correlation <= 1.0:
            raise ConfigurationError(
                f"Mode '{self.mode}' target correlation must be in (0, 1], got {self.target_self_correlation}"
            )
        for name in ("outlier_row_probability", "fade_block_probability"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ConfigurationError(f"Mode '{self.mode}' {name} must be in [0, 1], got {value}")
        if self.scan_noise < 0:
            raise ConfigurationError(f"Mode '{self.mode}' scan noise must be >= 0")
        if self.people < 2:
            raise ConfigurationError(f"Mode '{self.mode}' needs at least 2 people to move the channel")


MODES: Dict[str, FluctuationMode] = {
    "quiet": FluctuationMode("quiet", 0.8, 0.005, 0.02, 0.03, 2),
    "steady": FluctuationMode("steady", 0.6, 0.015, 0.05, 0.04, 5),
    "busy": FluctuationMode("busy", 0.4, 0.03, 0.10, 0.05, 10),
}


def mode_preset(name: str) -> FluctuationMode:
    try:
        return MODES[name.strip().lower()]
    except KeyError:
        raise ConfigurationError(f"Unknown fluctuation mode '{name}' (expected one of {list(MODES)})")


def parse_schedule(schedule: str) -> List[FluctuationMode]:
    """'quiet,steady,busy' -> one mode per simulated day."""
    modes = [mode_preset(part) for part in schedule.split(",") if part.strip()]
    if not modes:
        raise ConfigurationError("Mode schedule must name at least one mode")
    return modes


@dataclass
class SiteModel:
    """Floor plan, AP and radio parameters of the simulated site."""
    width: float = 21.0
    depth: float = 16.0
    ap_position: Tuple[float, float] = (10.5, 13.0)
    profile: str = "nic"
    carrier_hz: float = 5.18e9
    bandwidth_hz: float = 20e6
    blocked_regions: List[Tuple[float, float, float, float]] = field(default_factory=list)
    scatterers: List[Tuple[float, float]] = field(default_factory=list)
    reflection_coefficient: float = 0.5
    wall_transmission: float = 0.5
    scatter_strength: float = 2.0
    min_distance: float = 0.5
    device_share: float = 0.65
    shadowing_share: float = 0.3
    shadowing_distance: float = 3.0
    fingerprint_spread: float = 0.3
    seed: int = 0

    def __post_init__(self) -> None:
        if self.width <= 0 or self.depth <= 0:
            raise ConfigurationError(f"Site area must be positive, got {self.width} x {self.depth}")
        if self.device_share < 0 or self.shadowing_share < 0 or self.device_share + self.shadowing_share > 1:
            raise ConfigurationError(
                f"Device and shadowing shares must be >= 0 with sum <= 1, "
                f"got {self.device_share} + {self.shadowing_share}"
            )
        if self.shadowing_distance <= 0 or self.fingerprint_spread <= 0:
            raise ConfigurationError("Shadowing distance and fingerprint spread must be positive")
        self.ap_position = (float(self.ap_position[0]), float(self.ap_position[1]))
        self.blocked_regions = [tuple(float(v) for v in r) for r in self.blocked_regions]
        self.scatterers = [(float(x), float(y)) for x, y in self.scatterers]
        profile_dims(self.profile)
        if not self.inside_area(self.ap_position) or self.is_blocked(self.ap_position):
            raise ConfigurationError(f"AP position {self.ap_position} must lie in the covered area")

    @classmethod
    def build(cls, width: float = 21.0, depth: float = 16.0, ap_position: Tuple[float, float] = (10.5, 13.0),
              profile: str = "nic", seed: int = 0, scatterer_count: int = 12) -> "SiteModel":
        """Site with the default office core blocked and seeded static scatterers."""
        fx0, fy0, fx1, fy1 = _CORE_FRACTIONS
        core = (fx0 * width, fy0 * depth, fx1 * width, fy1 * depth)
        rng = np.random.default_rng([seed, 0x517E])
        scatterers = []
        while len(scatterers) < scatterer_count:
            x, y = rng.uniform(0, width), rng.uniform(0, depth)
            if not (core[0] < x < core[2] and core[1] < y < core[3]):
                scatterers.append((float(x), float(y)))
        return cls(width=width, depth=depth, ap_position=ap_position, profile=profile,
                   blocked_regions=[core], scatterers=scatterers, seed=seed)

    @property
    def dims(self) -> Tuple[int, int, int]:
        return profile_dims(self.profile)

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_hz

    def subcarrier_offsets(self) -> np.ndarray:
        """Baseband offsets of the W subcarriers, evenly spaced over the bandwidth."""
        w = self.dims[1]
        return (np.arange(w) - (w - 1) / 2.0) * self.bandwidth_hz / w

    def subcarrier_frequencies(self) -> np.ndarray:
        return self.carrier_hz + self.subcarrier_offsets()

    def outer_walls(self) -> np.ndarray:
        w, d = self.width, self.depth
        return np.array([[0, 0, w, 0], [w, 0, w, d], [w, d, 0, d], [0, d, 0, 0]], dtype=np.float64)

    def inner_walls(self) -> np.ndarray:
        walls = []
        for x0, y0, x1, y1 in self.blocked_regions:
            walls += [[x0, y0, x1, y0], [x1, y0, x1, y1], [x1, y1, x0, y1], [x0, y1, x0, y0]]
        return np.array(walls, dtype=np.float64).reshape(-1, 4)

    def walls(self) -> np.ndarray:
        return np.vstack([self.outer_walls(), self.inner_walls()])

    def inside_area(self, location: Sequence[float]) -> bool:
        x, y = location
        return 0.0 <= x <= self.width and 0.0 <= y <= self.depth

    def is_blocked(self, location: Sequence[float]) -> bool:
        x, y = location
        return any(x0 < x < x1 and y0 < y < y1 for x0, y0, x1, y1 in self.blocked_regions)

    def covers(self, location: Sequence[float], margin: float = 0.0) -> bool:
        x, y = location
        if not (margin <= x <= self.width - margin and margin <= y <= self.depth - margin):
            return False
        return not any(
            x0 - margin < x < x1 + margin and y0 - margin < y < y1 + margin
            for x0, y0, x1, y1 in self.blocked_regions
        )

    def bounds(self) -> Tuple[float, float, float, float]:
        return 0.0, 0.0, self.width, self.depth

    def to_dict(self) -> Dict[str, Any]:
        return {
            "width": self.width, "depth": self.depth, "ap_position": list(self.ap_position),
            "profile": self.profile, "carrier_hz": self.carrier_hz, "bandwidth_hz": self.bandwidth_hz,
            "blocked_regions": [list(r) for r in self.blocked_regions],
            "scatterers": [list(s) for s in self.scatterers],
            "reflection_coefficient": self.reflection_coefficient,
            "wall_transmission": self.wall_transmission, "scatter_strength": self.scatter_strength,
            "min_distance": self.min_distance, "device_share": self.device_share,
            "shadowing_share": self.shadowing_share, "shadowing_distance": self.shadowing_distance,
            "fingerprint_spread": self.fingerprint_spread, "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SiteModel":
        data = dict(data)
        data["ap_position"] = tuple(data["ap_position"])
        data["blocked_regions"] = [tuple(r) for r in data.get("blocked_regions", [])]
        data["scatterers"] = [tuple(s) for s in data.get("scatterers", [])]
        return cls(**data)


@dataclass(frozen=True)
class SamplingPlan:
    """RP grid and test-route sampling."""
    rp_grid_spacing: float = 0.5
    test_point_count: int = 195
    speed_range: Tuple[float, float] = (0.6, 4.0)
    update_interval: float = 1.0
    snapshot_interval: float = 1800.0

    def __post_init__(self) -> None:
        if self.rp_grid_spacing <= 0:
            raise ConfigurationError(f"Grid spacing must be positive, got {self.rp_grid_spacing}")
        low, high = self.speed_range
        if not 0 < low <= high:
            raise ConfigurationError(f"Speed range must satisfy 0 < min <= max, got {self.speed_range}")
        if self.update_interval <= 0 or self.snapshot_interval <= 0:
            raise ConfigurationError("Update and snapshot intervals must be positive")
        if self.test_point_count < 0:
            raise ConfigurationError("Test point count must be >= 0")


# ---- propagation ---------------------------------------------------------------

def frequency_response(frequencies: np.ndarray, delays: np.ndarray, gains: np.ndarray) -> np.ndarray:
    """H(f) = sum_p g_p exp(-j 2 pi f tau_p) at each frequency."""
    phase = np.exp(-2j * np.pi * np.outer(frequencies, delays))
    return phase @ np.asarray(gains, dtype=np.complex128)


def _crossings(p: np.ndarray, q: np.ndarray, walls: np.ndarray) -> np.ndarray:
    """Which walls the segment p-q properly crosses."""
    if len(walls) == 0:
        return np.zeros(0, dtype=bool)
    a, b = walls[:, :2], walls[:, 2:]

    def orient(u, v, w):
        return (v[..., 0] - u[..., 0]) * (w[..., 1] - u[..., 1]) - (v[..., 1] - u[..., 1]) * (w[..., 0] - u[..., 0])

    d1 = orient(a, b, p[None, :])
    d2 = orient(a, b, q[None, :])
    d3 = orient(p[None, :], q[None, :], a)
    d4 = orient(p[None, :], q[None, :], b)
    return (d1 * d2 < 0) & (d3 * d4 < 0)


def _reflections(tx: np.ndarray, rx: np.ndarray, walls: np.ndarray):
    """First-order image-method reflections: yields (wall index, bounce point, path length)."""
    for index, (x1, y1, x2, y2) in enumerate(walls):
        p1 = np.array([x1, y1])
        direction = np.array([x2 - x1, y2 - y1])
        length = float(np.hypot(*direction))
        if length == 0:
            continue
        direction = direction / length
        normal = np.array([-direction[1], direction[0]])
        side_tx = float((tx - p1) @ normal)
        side_rx = float((rx - p1) @ normal)
        if side_tx * side_rx <= 0:
            continue
        image = tx - 2.0 * side_tx * normal
        denom = float((rx - image) @ normal)
        if denom == 0:
            continue
        t = float((p1 - image) @ normal) / denom
        if not 0.0 < t < 1.0:
            continue
        bounce = image + t * (rx - image)
        along = float((bounce - p1) @ direction)
        if 0.0 <= along <= length:
            yield index, bounce, float(np.linalg.norm(rx - image))


def _transmission(site: SiteModel, p: np.ndarray, q: np.ndarray, skip: int = -1) -> float:
    """Attenuation of the p-q leg from crossing inner walls; ``skip`` is an index into ``site.walls()``."""
    crossed = _crossings(p, q, site.inner_walls())
    inner_index = skip - len(site.outer_walls())
    if 0 <= inner_index < len(crossed):
        crossed[inner_index] = False
    return site.wall_transmission ** int(crossed.sum())


def scatter_paths(site: SiteModel, rx: Sequence[float],
                  points: Sequence[Tuple[float, float]]) -> Tuple[np.ndarray, np.ndarray]:
    """(gains, delays) of single-bounce paths AP -> point -> rx."""
    tx = np.asarray(site.ap_position, dtype=np.float64)
    rx = np.asarray(rx, dtype=np.float64)
    gains, delays = [], []
    for point in points:
        s = np.asarray(point, dtype=np.float64)
        d1 = float(np.linalg.norm(s - tx))
        d2 = float(np.linalg.norm(rx - s))
        loss = _transmission(site, tx, s) * _transmission(site, s, rx)
        gains.append(site.scatter_strength * loss / (max(d1, site.min_distance) * max(d2, site.min_distance)))
        delays.append((d1 + d2) / SPEED_OF_LIGHT)
    return np.array(gains, dtype=np.float64), np.array(delays, dtype=np.float64)


def propagation_paths(site: SiteModel, rx: Sequence[float],
                      extra_scatterers: Sequence[Tuple[float, float]] = ()) -> Tuple[np.ndarray, np.ndarray]:
    """(gains, delays) of LOS, wall reflections and scatterer paths from the AP to ``rx``."""
    tx = np.asarray(site.ap_position, dtype=np.float64)
    rx = np.asarray(rx, dtype=np.float64)
    distance = float(np.linalg.norm(rx - tx))
    gains = [_transmission(site, tx, rx) / max(distance, site.min_distance)]
    delays = [distance / SPEED_OF_LIGHT]

    for index, bounce, length in _reflections(tx, rx, site.walls()):
        loss = _transmission(site, tx, bounce, index) * _transmission(site, bounce, rx, index)
        gains.append(site.reflection_coefficient * loss / max(length, site.min_distance))
        delays.append(length / SPEED_OF_LIGHT)

    s_gains, s_delays = scatter_paths(site, rx, list(site.scatterers) + list(extra_scatterers))
    return np.concatenate([gains, s_gains]), np.concatenate([delays, s_delays])


def antenna_positions(site: SiteModel, location: Sequence[float]) -> np.ndarray:
    """C receive antennae spaced half a wavelength apart along x, centred on ``location``."""
    channels = site.dims[2]
    offsets = (np.arange(channels) - (channels - 1) / 2.0) * site.wavelength / 2.0
    return np.stack([location[0] + offsets, np.full(channels, location[1])], axis=1)


def complex_response(site: SiteModel, location: Sequence[float],
                     extra_scatterers: Sequence[Tuple[float, float]] = (),
                     static: bool = True) -> np.ndarray:
    """W x C complex response; ``static=False`` keeps only the ``extra_scatterers`` paths."""
    frequencies = site.subcarrier_frequencies()
    columns = []
    for antenna in antenna_positions(site, location):
        if static:
            gains, delays = propagation_paths(site, antenna, extra_scatterers)
        else:
            gains, delays = scatter_paths(site, antenna, extra_scatterers)
        columns.append(frequency_response(frequencies, delays, gains))
    return np.stack(columns, axis=1)


def channel_response(site: SiteModel, location: Sequence[float]) -> np.ndarray:
    """W x C static amplitude response at ``location``."""
    if not site.inside_area(location):
        raise RejectedInputError(f"Location {tuple(location)} is outside the {site.width} x {site.depth} m area")
    return np.abs(complex_response(site, location))


# ---- static fingerprint -----------------------------------------------------------

SHADOWING_COMPONENTS = 256


def device_response(site: SiteModel) -> np.ndarray:
    """W x C receiver gain in dB: band-edge roll-off, a smooth ripple and a gain offset per antenna."""
    w, c = site.dims[1:]
    rng = np.random.default_rng([site.seed, 0xDE71])
    edge = 2.0 * site.subcarrier_offsets() / site.bandwidth_hz
    gain = np.empty((w, c))
    for antenna in range(c):
        ripple = sum(
            rng.uniform(0.5, 1.5) * np.cos(np.pi * order * edge + rng.uniform(0, 2 * np.pi))
            for order in (1, 2, 3)
        )
        gain[:, antenna] = -3.0 * edge ** 2 + ripple + rng.normal(0.0, 1.0)
    return gain


@dataclass(frozen=True)
class ShadowingField:
    """Unit-variance Gaussian field per (subcarrier, antenna) with correlation exp(-d / distance).

    Each element is a sum of random cosines whose wave vectors follow a bivariate
    Cauchy law, the spectral density of the exponential correlation function.
    """
    wave_vectors: np.ndarray
    phases: np.ndarray

    @classmethod
    def for_site(cls, site: SiteModel, components: int = SHADOWING_COMPONENTS) -> "ShadowingField":
        w, c = site.dims[1:]
        rng = np.random.default_rng([site.seed, 0x5AD0])
        normal = rng.standard_normal((w * c, components, 2))
        chi = rng.chisquare(1.0, size=(w * c, components, 1))
        wave_vectors = normal / (site.shadowing_distance * np.sqrt(chi))
        phases = rng.uniform(0.0, 2 * np.pi, size=(w * c, components))
        return cls(wave_vectors, phases)

    def __call__(self, location: Sequence[float]) -> np.ndarray:
        argument = self.wave_vectors @ np.asarray(location, dtype=np.float64) + self.phases
        return math.sqrt(2.0 / self.phases.shape[1]) * np.cos(argument).sum(axis=1)


def static_fingerprint(site: SiteModel, location: Sequence[float],
                       shadowing: Optional[ShadowingField] = None) -> np.ndarray:
    """W x C mean amplitude at ``location``.

    The receiver gain, the log-normal shadowing and the multipath response enter as
    z-scores weighted by the square roots of device_share, shadowing_share and
    the remainder. Once the multipath part has decorrelated, two locations d
    apart correlate near device_share + shadowing_share * exp(-d / shadowing_distance).
    The level is the mean multipath amplitude, so path loss survives.
    """
    multipath = channel_response(site, location)
    shadowing = shadowing if shadowing is not None else ShadowingField.for_site(site)
    shadow = shadowing(location).reshape(multipath.shape)
    multipath_share = max(0.0, 1.0 - site.device_share - site.shadowing_share)
    shape = (math.sqrt(site.device_share) * _zscore(device_response(site))
             + math.sqrt(site.shadowing_share) * _zscore(shadow)
             + math.sqrt(multipath_share) * _zscore(multipath))
    level = float(multipath.mean())
    return np.maximum(level * (1.0 + site.fingerprint_spread * shape), 0.05 * level)


# ---- snapshots -------------------------------------------------------------------

def _zscore(pattern: np.ndarray) -> np.ndarray:
    std = float(pattern.std())
    if std == 0.0:
        return np.zeros_like(pattern)
    return (pattern - pattern.mean()) / std


def _people(site: SiteModel, count: int, rng: np.random.Generator) -> List[Tuple[float, float]]:
    people = []
    while len(people) < count:
        point = (float(rng.uniform(0, site.width)), float(rng.uniform(0, site.depth)))
        if not site.is_blocked(point):
            people.append(point)
    return people


OUTLIER_GAIN = (1.5, 2.5)
FADE_GAIN = (0.3, 0.6)


def _fade_width_range(w: int) -> Tuple[int, int]:
    return max(1, w // 8), max(2, w // 4)


def impairment_spread(mode: FluctuationMode, w: int) -> float:
    """Relative variance E[m^2] / E[m]^2 - 1 of the per-element multiplicative impairment."""
    noise_m1 = math.exp(mode.scan_noise ** 2 / 2.0)
    noise_m2 = math.exp(2.0 * mode.scan_noise ** 2)

    low, high = OUTLIER_GAIN
    p = mode.outlier_row_probability
    outlier_m1 = 1.0 - p + p * (low + high) / 2.0
    outlier_m2 = 1.0 - p + p * (low * low + low * high + high * high) / 3.0

    low, high = FADE_GAIN
    narrow, wide = _fade_width_range(w)
    q = mode.fade_block_probability * (narrow + wide) / 2.0 / w
    fade_m1 = 1.0 - q + q * (low + high) / 2.0
    fade_m2 = 1.0 - q + q * (low * low + low * high + high * high) / 3.0

    m1 = noise_m1 * outlier_m1 * fade_m1
    m2 = noise_m2 * outlier_m2 * fade_m2
    return m2 / (m1 * m1) - 1.0


def pattern_target(mode: FluctuationMode, static: np.ndarray) -> float:
    """Pattern-level correlation that leaves impaired images at the mode's target, capped at 1."""
    variance = float(static.var())
    if variance == 0.0:
        return mode.target_self_correlation
    power = float(static.mean()) ** 2 + variance
    spread = impairment_spread(mode, static.shape[0])
    return min(1.0, mode.target_self_correlation * (variance + power * spread) / variance)


def mix_patterns(static: np.ndarray, moving: np.ndarray, target: float) -> np.ndarray:
    """Blend two W x C patterns so independent draws of ``moving`` correlate at ``target``."""
    mean, std = float(static.mean()), float(static.std())
    base = _zscore(static)
    motion = _zscore(moving)
    if base.any():
        # Keep only the part of the motion pattern uncorrelated with the static one.
        motion = _zscore(motion - (motion * base).mean() * base)
    blended = math.sqrt(target) * base + math.sqrt(1.0 - target) * motion
    return np.maximum(mean + std * blended, 0.05 * mean)


def emit_snapshot(site: SiteModel, location: Sequence[float], mode: FluctuationMode, time: float,
                  rng: np.random.Generator, static: Optional[np.ndarray] = None) -> CsiImage:
    """One H x W x C CSI image at ``location``; ``static`` may carry a precomputed static_fingerprint."""
    h, w, c = site.dims
    if static is None:
        static = static_fingerprint(site, location)
    people = _people(site, mode.people, rng)
    moving = np.abs(complex_response(site, location, people, static=False))
    pattern = mix_patterns(static, moving, pattern_target(mode, static))

    scans = np.repeat(pattern[None, :, :], h, axis=0)
    if mode.scan_noise > 0:
        scans = scans * rng.lognormal(0.0, mode.scan_noise, size=scans.shape)
    if rng.random() < mode.fade_block_probability:
        narrow, wide = _fade_width_range(w)
        width = int(rng.integers(narrow, wide + 1))
        start = int(rng.integers(0, w - width + 1))
        scans[:, start:start + width, :] *= rng.uniform(*FADE_GAIN)
    outliers = rng.random(h) < mode.outlier_row_probability
    if outliers.any():
        scans[outliers] *= rng.uniform(*OUTLIER_GAIN, size=(int(outliers.sum()), 1, 1))
    return CsiImage(scans, (float(location[0]), float(location[1])), float(time))


# ---- database construction -----------------------------------------------------------

def grid_points(site: SiteModel, spacing: float) -> np.ndarray:
    """RP centres at (i + 0.5) * spacing inside the area and outside blocked regions."""
    xs = (np.arange(int(math.floor(site.width / spacing + 1e-9))) + 0.5) * spacing
    ys = (np.arange(int(math.floor(site.depth / spacing + 1e-9))) + 0.5) * spacing
    points = [(float(x), float(y)) for y in ys for x in xs if not site.is_blocked((x, y))]
    return np.array(points, dtype=np.float64).reshape(-1, 2)


def sample_route(site: SiteModel, plan: SamplingPlan, rps: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random-speed walk of ``plan.test_point_count`` off-grid points inside the covered area."""
    count = plan.test_point_count
    if count == 0:
        return np.zeros((0, 2))
    margin = min(0.25, plan.rp_grid_spacing / 2.0)

    def acceptable(point: np.ndarray) -> bool:
        if not site.covers(point, margin):
            return False
        return len(rps) == 0 or float(np.min(np.linalg.norm(rps - point, axis=1))) > 1e-6

    point = None
    for _ in range(10_000):
        candidate = np.array([rng.uniform(0, site.width), rng.uniform(0, site.depth)])
        if acceptable(candidate):
            point = candidate
            break
    if point is None:
        raise ConfigurationError("Could not place a test route inside the covered area")

    route = [point]
    heading = rng.uniform(0, 2 * np.pi)
    low, high = plan.speed_range
    while len(route) < count:
        step = rng.uniform(low, high) * plan.update_interval
        for attempt in range(64):
            turn = rng.normal(0.0, 0.5) if attempt < 32 else rng.uniform(0, 2 * np.pi)
            trial = heading + turn
            candidate = route[-1] + step * np.array([np.cos(trial), np.sin(trial)])
            if acceptable(candidate):
                heading = trial
                route.append(candidate)
                break
        else:
            # Cornered: short hops in any direction.
            step = low * plan.update_interval
            for _ in range(256):
                trial = rng.uniform(0, 2 * np.pi)
                candidate = route[-1] + step * rng.uniform(0.1, 1.0) * np.array([np.cos(trial), np.sin(trial)])
                if acceptable(candidate):
                    heading = trial
                    route.append(candidate)
                    break
            else:
                raise ConfigurationError("Test route got stuck; widen the covered area or lower the speed")
    return np.array(route)


@dataclass
class SyntheticDataset:
    """Training database plus one labelled test route per simulated day."""
    site: SiteModel
    train: FingerprintDatabase
    routes: Dict[str, FingerprintDatabase]


def _simulate_rp(site: SiteModel, rp: int, location: np.ndarray, schedule: Sequence[FluctuationMode],
                 snapshot: SnapshotPlan, sampling: SamplingPlan, seed: int,
                 shadowing: ShadowingField) -> List[FingerprintRecord]:
    rng = np.random.default_rng([seed, rp])
    static = static_fingerprint(site, location, shadowing)
    records = []
    for k in range(snapshot.train_images_per_rp):
        day = k % len(schedule)
        time = day * DAY_SECONDS + 8 * 3600.0 + (k // len(schedule)) * sampling.snapshot_interval
        image = emit_snapshot(site, location, schedule[day], time, rng, static)
        records.append(FingerprintRecord(image, rp, k))
    return records


def route_label(day: int, mode: FluctuationMode) -> str:
    return f"day{day + 1}-{mode.mode}"


def build_database(site: SiteModel, sampling: SamplingPlan, snapshot: SnapshotPlan,
                   schedule: Sequence[FluctuationMode], seed: int, workers: int = 1) -> SyntheticDataset:
    """Simulate every RP and one test route per scheduled day; a pure function of its arguments."""
    rps = grid_points(site, sampling.rp_grid_spacing)
    if len(rps) == 0:
        raise ConfigurationError(f"Grid spacing {sampling.rp_grid_spacing} m yields no RPs in the covered area")
    if not schedule:
        raise ConfigurationError("Mode schedule must name at least one mode")
    shadowing = ShadowingField.for_site(site)
    logger.info(f"🔄 Simulating {len(rps)} RPs x {snapshot.train_images_per_rp} snapshots with {workers} workers")

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        per_rp = list(pool.map(
            lambda item: _simulate_rp(site, item[0], item[1], schedule, snapshot, sampling, seed, shadowing),
            enumerate(rps),
        ))
    train = FingerprintDatabase(site.dims, [r for records in per_rp for r in records], "synthetic")

    routes: Dict[str, FingerprintDatabase] = {}
    for day, mode in enumerate(schedule):
        rng = np.random.default_rng([seed, 10**6 + day])
        path = sample_route(site, sampling, rps, rng)
        records = []
        for i, point in enumerate(path):
            static = static_fingerprint(site, point, shadowing)
            for j in range(snapshot.test_images_per_point):
                time = (day * DAY_SECONDS + 14 * 3600.0 + i * sampling.update_interval
                        + j * sampling.update_interval / snapshot.test_images_per_point)
                records.append(FingerprintRecord(emit_snapshot(site, point, mode, time, rng, static), -1, j))
        label = route_label(day, mode)
        routes[label] = FingerprintDatabase(site.dims, records, label)
        logger.info(f"✅ Route {label}: {len(path)} test points")
    logger.info(f"✅ Simulated {len(train)} training images")
    return SyntheticDataset(site, train, routes)
