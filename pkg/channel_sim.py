"""
Indoor multipath channel simulator.

Builds a per-location multipath profile from a 2-D room scene (line of
sight, first-order wall reflections, one scatter path off the person),
then synthesizes labeled frequency-domain packets

    y[k, n] = exp(-j phi_n) * h_k * x[k, n] + w[k, n]

with a per-symbol common phase (carrier frequency offset) and AWGN.
Label 0 is the empty room, labels 1..25 are the spots in row-major order.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from multiprocessing import Pool
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.constants import c as SPEED_OF_LIGHT

from errors import RejectedInputError
from ofdm_core import FrameLayout, Packet, PacketMeta, SubcarrierGrid, random_df_payload
from utils import SeedLike, make_rng

logger = logging.getLogger(__name__)

Point = Tuple[float, float]

MAX_PATHS = 6
MIN_RESPONSE_RATIO = 1e-6
PERTURB_STEP_M = 0.01
MAX_PERTURB_ATTEMPTS = 20

SPLIT_CODES = {'train': 0, 'test': 1}


@dataclass(frozen=True)
class WallReflector:
    """Mirror line segment with an amplitude reflection loss in (0, 1]."""
    start: Point
    end: Point
    loss: float = 0.5

    def to_dict(self) -> Dict[str, Any]:
        return {'start': list(self.start), 'end': list(self.end), 'loss': self.loss}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'WallReflector':
        return cls(start=tuple(data['start']), end=tuple(data['end']), loss=float(data.get('loss', 0.5)))


def _room_walls(width: float, depth: float, loss: float) -> Tuple[WallReflector, ...]:
    corners = [(0.0, 0.0), (width, 0.0), (width, depth), (0.0, depth)]
    return tuple(WallReflector(corners[i], corners[(i + 1) % 4], loss) for i in range(4))


@dataclass(frozen=True)
class Scene:
    """Room geometry, radio positions and the 5 x 5 spot grid.

    Attributes:
        room_width_m, room_depth_m: Room extent, origin at a corner
        tx_pos, rx_pos: Radio positions (m)
        spot_origin: First spot (m); spots advance along +x then +y
        spot_spacing_m: Spot pitch
        wall_reflectors: Mirror segments; defaults to the four room walls
        person_scatter_loss: Amplitude factor of the tx -> person -> rx path
        blocking_extra_loss_db: Attenuation of any path passing near the person
        blocking_radius_m: Distance below which a path counts as blocked
    """
    room_width_m: float = 6.0
    room_depth_m: float = 5.0
    tx_pos: Point = (0.6, 0.9)
    rx_pos: Point = (5.3, 4.1)
    spot_origin: Point = (1.5, 1.0)
    spot_spacing_m: float = 0.75
    spot_rows: int = 5
    spot_cols: int = 5
    wall_reflection_loss: float = 0.5
    wall_reflectors: Optional[Tuple[WallReflector, ...]] = None
    person_scatter_loss: float = 0.3
    blocking_extra_loss_db: float = 6.0
    blocking_radius_m: float = 0.3

    def __post_init__(self):
        if self.wall_reflectors is None:
            walls = _room_walls(self.room_width_m, self.room_depth_m, self.wall_reflection_loss)
            object.__setattr__(self, 'wall_reflectors', walls)
        else:
            object.__setattr__(self, 'wall_reflectors', tuple(self.wall_reflectors))
        object.__setattr__(self, 'tx_pos', tuple(float(v) for v in self.tx_pos))
        object.__setattr__(self, 'rx_pos', tuple(float(v) for v in self.rx_pos))
        object.__setattr__(self, 'spot_origin', tuple(float(v) for v in self.spot_origin))
        if self.spot_rows * self.spot_cols != 25:
            raise RejectedInputError(f"spot grid must hold 25 spots, got {self.spot_rows} x {self.spot_cols}")
        for name, point in [('tx_pos', self.tx_pos), ('rx_pos', self.rx_pos)] + \
                [(f"spot {i + 1}", p) for i, p in enumerate(self.spots())]:
            if not self.inside(point):
                raise RejectedInputError(f"{name} {point} lies outside the {self.room_width_m} x {self.room_depth_m} m room")
        if len(self.wall_reflectors) + 2 > MAX_PATHS:
            raise RejectedInputError(f"at most {MAX_PATHS - 2} wall reflectors are supported")

    def inside(self, point: Point) -> bool:
        x, y = point
        return 0.0 <= x <= self.room_width_m and 0.0 <= y <= self.room_depth_m

    def spots(self) -> List[Point]:
        """Spot coordinates in label order (label = index + 1)."""
        x0, y0 = self.spot_origin
        return [(x0 + col * self.spot_spacing_m, y0 + row * self.spot_spacing_m)
                for row in range(self.spot_rows) for col in range(self.spot_cols)]

    @property
    def n_labels(self) -> int:
        return self.spot_rows * self.spot_cols + 1

    def person_position(self, location: int) -> Optional[Point]:
        if not 0 <= location < self.n_labels:
            raise RejectedInputError(f"location {location} outside [0, {self.n_labels - 1}]")
        if location == 0:
            return None
        return self.spots()[location - 1]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'room_width_m': self.room_width_m,
            'room_depth_m': self.room_depth_m,
            'tx_pos': list(self.tx_pos),
            'rx_pos': list(self.rx_pos),
            'spot_origin': list(self.spot_origin),
            'spot_spacing_m': self.spot_spacing_m,
            'spot_rows': self.spot_rows,
            'spot_cols': self.spot_cols,
            'wall_reflection_loss': self.wall_reflection_loss,
            'wall_reflectors': [w.to_dict() for w in self.wall_reflectors],
            'person_scatter_loss': self.person_scatter_loss,
            'blocking_extra_loss_db': self.blocking_extra_loss_db,
            'blocking_radius_m': self.blocking_radius_m,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'Scene':
        known = {f for f in cls.__dataclass_fields__}
        unknown = sorted(set(data) - known)
        if unknown:
            raise RejectedInputError(f"unknown scene keys: {unknown}")
        kwargs = dict(data)
        if kwargs.get('wall_reflectors') is not None:
            kwargs['wall_reflectors'] = tuple(WallReflector.from_dict(w) for w in kwargs['wall_reflectors'])
        return cls(**kwargs)


@dataclass(frozen=True)
class PathComponent:
    """One propagation path: total length d_m and frequency-flat complex gain alpha_m."""
    length_m: float
    gain: complex
    kind: str = 'los'


@dataclass(frozen=True)
class MultipathProfile:
    paths: Tuple[PathComponent, ...]
    location: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'paths', tuple(self.paths))
        if not 1 <= len(self.paths) <= MAX_PATHS:
            raise RejectedInputError(f"profile needs 1..{MAX_PATHS} paths, got {len(self.paths)}")
        if any(p.length_m <= 0 for p in self.paths):
            raise RejectedInputError("path lengths must be positive")

    @property
    def M(self) -> int:
        return len(self.paths)

    def frequency_response(self, grid: SubcarrierGrid) -> np.ndarray:
        """h_k = sum_m alpha_m exp(-j 2 pi d_m / lambda_k) over the occupied subcarriers."""
        wavelengths = SPEED_OF_LIGHT / grid.frequencies_hz()
        lengths = np.array([p.length_m for p in self.paths])
        gains = np.array([p.gain for p in self.paths], dtype=complex)
        return np.exp(-2j * np.pi * lengths[None, :] / wavelengths[:, None]) @ gains


def _distance(a: Point, b: Point) -> float:
    return math.hypot(b[0] - a[0], b[1] - a[1])


def _point_segment_distance(p: Point, a: Point, b: Point) -> float:
    ax, ay = a
    dx, dy = b[0] - ax, b[1] - ay
    seg2 = dx * dx + dy * dy
    if seg2 == 0.0:
        return _distance(p, a)
    t = min(1.0, max(0.0, ((p[0] - ax) * dx + (p[1] - ay) * dy) / seg2))
    return _distance(p, (ax + t * dx, ay + t * dy))


def _cross(u: Point, v: Point) -> float:
    return u[0] * v[1] - u[1] * v[0]


def _mirror(p: Point, wall: WallReflector) -> Point:
    (ax, ay), (bx, by) = wall.start, wall.end
    ux, uy = bx - ax, by - ay
    norm2 = ux * ux + uy * uy
    vx, vy = p[0] - ax, p[1] - ay
    s = (vx * ux + vy * uy) / norm2
    return (ax + 2 * s * ux - vx, ay + 2 * s * uy - vy)


def _reflection_point(tx: Point, rx: Point, wall: WallReflector) -> Optional[Point]:
    """Specular point on ``wall`` for tx -> wall -> rx, or None if it misses the segment."""
    image = _mirror(tx, wall)
    r = (rx[0] - image[0], rx[1] - image[1])
    s = (wall.end[0] - wall.start[0], wall.end[1] - wall.start[1])
    denom = _cross(r, s)
    if abs(denom) < 1e-12:
        return None
    q = (wall.start[0] - image[0], wall.start[1] - image[1])
    t = _cross(q, s) / denom
    w = _cross(q, r) / denom
    if not (0.0 < t < 1.0 and 0.0 <= w <= 1.0):
        return None
    return (image[0] + t * r[0], image[1] + t * r[1])


def _blocked(polyline: Sequence[Point], person: Optional[Point], radius: float) -> bool:
    if person is None:
        return False
    return any(_point_segment_distance(person, a, b) < radius for a, b in zip(polyline, polyline[1:]))


def _trace_paths(scene: Scene, person: Optional[Point]) -> List[PathComponent]:
    block_factor = 10 ** (-scene.blocking_extra_loss_db / 20)
    paths = []

    def add(polyline: List[Point], loss: float, kind: str, check_blocking: bool = True):
        length = sum(_distance(a, b) for a, b in zip(polyline, polyline[1:]))
        if check_blocking and _blocked(polyline, person, scene.blocking_radius_m):
            loss *= block_factor
        paths.append(PathComponent(length_m=length, gain=complex(loss / length), kind=kind))

    add([scene.tx_pos, scene.rx_pos], 1.0, 'los')
    for i, wall in enumerate(scene.wall_reflectors):
        point = _reflection_point(scene.tx_pos, scene.rx_pos, wall)
        if point is not None:
            add([scene.tx_pos, point, scene.rx_pos], wall.loss, f"wall-{i}")
    if person is not None:
        add([scene.tx_pos, person, scene.rx_pos], scene.person_scatter_loss, 'scatter', check_blocking=False)
    return paths


def build_profile(scene: Scene, location: int, grid: Optional[SubcarrierGrid] = None) -> MultipathProfile:
    """Deterministic multipath profile for one class.

    Paths are the line of sight, one first-order reflection per wall and,
    when a person is present, the tx -> person -> rx scatter path. Any
    other path passing within ``blocking_radius_m`` of the person loses
    ``blocking_extra_loss_db``. Gains follow free-space amplitude decay,
    alpha_m = (loss product) / d_m.

    If the resulting response nearly cancels on some subcarrier the
    person (or, for the empty room, the walls) is moved by 1 cm and the
    profile is rebuilt.

    Args:
        scene: Room scene
        location: Class id, 0 = empty room
        grid: Subcarrier grid used for the cancellation check

    Returns:
        MultipathProfile
    """
    grid = grid or SubcarrierGrid()
    person = scene.person_position(location)
    current = scene
    for attempt in range(MAX_PERTURB_ATTEMPTS + 1):
        profile = MultipathProfile(paths=tuple(_trace_paths(current, person)), location=location)
        magnitude = np.abs(profile.frequency_response(grid))
        if magnitude.min() >= MIN_RESPONSE_RATIO * magnitude.max():
            return profile
        logger.warning("Location %d: response nearly cancels (min/max = %.2e), perturbing geometry by 1 cm",
                       location, magnitude.min() / magnitude.max())
        if person is not None:
            person = (person[0] + PERTURB_STEP_M, person[1])
        else:
            walls = tuple(WallReflector((w.start[0] - PERTURB_STEP_M, w.start[1] - PERTURB_STEP_M),
                                        (w.end[0] - PERTURB_STEP_M, w.end[1] - PERTURB_STEP_M), w.loss)
                          for w in current.wall_reflectors)
            current = replace(current, wall_reflectors=walls)
    raise RejectedInputError(f"could not build a non-degenerate profile for location {location}")


@dataclass(frozen=True)
class RfoModel:
    """Common per-symbol phase phi_n = phi_0 + 2 pi cfo T_sym n.

    With ``hold_ltf_phase`` the LTF symbols all sit at phi_0 and the DF
    symbols continue the ramp from slot N_L on.
    """
    cfo_hz: float = 0.0
    symbol_duration_s: float = 4e-6
    initial_phase: float = 0.0
    hold_ltf_phase: bool = True

    def trajectory(self, n_ltf: int, n_df: int) -> np.ndarray:
        """Phases of all N_L + N_D symbols of one frame."""
        slots = np.arange(n_ltf + n_df, dtype=float)
        if self.hold_ltf_phase:
            slots[:n_ltf] = 0.0
        return self.initial_phase + 2 * np.pi * self.cfo_hz * self.symbol_duration_s * slots


@dataclass(frozen=True)
class RfoConfig:
    """Per-packet RFO distribution: phi_0 ~ U[0, 2 pi), CFO ~ N(cfo_hz, cfo_std_hz^2)."""
    cfo_hz: float = 0.0
    cfo_std_hz: float = 0.0
    symbol_duration_s: float = 4e-6
    hold_ltf_phase: bool = True

    def draw(self, rng: np.random.Generator) -> RfoModel:
        phi0 = rng.uniform(0.0, 2 * np.pi)
        cfo = self.cfo_hz + self.cfo_std_hz * rng.standard_normal()
        return RfoModel(cfo_hz=cfo, symbol_duration_s=self.symbol_duration_s,
                        initial_phase=phi0, hold_ltf_phase=self.hold_ltf_phase)

    def to_dict(self) -> Dict[str, Any]:
        return {'cfo_hz': self.cfo_hz, 'cfo_std_hz': self.cfo_std_hz,
                'symbol_duration_s': self.symbol_duration_s, 'hold_ltf_phase': self.hold_ltf_phase}


@dataclass(frozen=True)
class TxFrame:
    """Transmitted frame: the layout's LTF plus a K x N_D DF payload."""
    grid: SubcarrierGrid
    layout: FrameLayout
    df: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.df.shape != (self.grid.K, self.layout.n_df):
            raise RejectedInputError(f"tx DF has shape {self.df.shape}, expected {(self.grid.K, self.layout.n_df)}")

    @property
    def ltf(self) -> np.ndarray:
        return self.layout.ltf_matrix()


def make_tx_frame(grid: SubcarrierGrid, layout: FrameLayout, order: int, rng_seed: SeedLike) -> TxFrame:
    return TxFrame(grid=grid, layout=layout, df=random_df_payload(layout, grid, order, rng_seed))


def apply_channel(profile: Union[MultipathProfile, np.ndarray], rfo: RfoModel, tx_frame: TxFrame,
                  snr_db: float, rng_seed: SeedLike, label: int = 0) -> Packet:
    """Pass a transmit frame through channel, RFO and AWGN.

    Args:
        profile: Multipath profile, or an explicit length-K frequency response
        rfo: Per-symbol phase model
        tx_frame: Transmitted LTF + DF
        snr_db: Mean signal power over noise power; math.inf disables noise
        rng_seed: Seed, seed key sequence or Generator for the noise
        label: Class id stored in the packet metadata

    Returns:
        Packet with ground-truth metadata
    """
    grid, layout = tx_frame.grid, tx_frame.layout
    if isinstance(profile, MultipathProfile):
        h = profile.frequency_response(grid)
    else:
        h = np.asarray(profile, dtype=complex)
    if h.shape != (grid.K,):
        raise RejectedInputError(f"channel response has shape {h.shape}, expected {(grid.K,)}")
    if math.isnan(snr_db) or snr_db == -math.inf:
        raise RejectedInputError(f"invalid SNR {snr_db}")

    phases = rfo.trajectory(layout.n_ltf, layout.n_df)
    x = np.concatenate([tx_frame.ltf, tx_frame.df], axis=1)
    faded = h[:, None] * x
    y = faded * np.exp(-1j * phases)[None, :]
    if not math.isinf(snr_db):
        rng = make_rng(rng_seed)
        noise_var = np.mean(np.abs(faded) ** 2) / 10 ** (snr_db / 10)
        y = y + np.sqrt(noise_var / 2) * (rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape))

    meta = PacketMeta(label=label, true_csi=h, rfo_trajectory=phases, snr_db=float(snr_db), tx_df=tx_frame.df)
    return Packet(grid=grid, layout=layout, ltf_rx=y[:, :layout.n_ltf], df_rx=y[:, layout.n_ltf:], meta=meta)


def _simulate_label(task: Tuple) -> List[Packet]:
    """Worker: all packets of one label in one split."""
    profile, label, split_code, count, grid, layout, rfo_config, snr_db, order, seed = task
    packets = []
    for index in range(count):
        rng = np.random.default_rng([seed, split_code, label, index])
        rfo = rfo_config.draw(rng)
        frame = make_tx_frame(grid, layout, order, rng)
        packets.append(apply_channel(profile, rfo, frame, snr_db, rng, label=label))
    return packets


def generate_packets(scene: Scene, rfo_config: RfoConfig, count_per_label: int, snr_db: float, order: int,
                     seed: int, split: str = 'train', grid: Optional[SubcarrierGrid] = None,
                     layout: Optional[FrameLayout] = None, workers: int = 1,
                     profiles: Optional[Sequence[MultipathProfile]] = None) -> Iterator[Packet]:
    """Yield packets label by label (label-major order).

    Every packet's random stream is keyed by (seed, split, label, index), so
    any worker count yields the same packets.
    """
    grid = grid or SubcarrierGrid()
    layout = layout or FrameLayout()
    if count_per_label < 1:
        raise RejectedInputError(f"packet count per label must be >= 1, got {count_per_label}")
    if split not in SPLIT_CODES:
        raise RejectedInputError(f"unknown split {split!r}")
    if profiles is None:
        profiles = [build_profile(scene, label, grid) for label in range(scene.n_labels)]
    tasks = [(profile, label, SPLIT_CODES[split], count_per_label, grid, layout, rfo_config, snr_db, order, seed)
             for label, profile in enumerate(profiles)]
    if workers > 1:
        with Pool(processes=workers) as pool:
            for packets in pool.imap(_simulate_label, tasks):
                yield from packets
    else:
        for task in tasks:
            yield from _simulate_label(task)


def generate_dataset(scene: Scene, rfo_config: RfoConfig, train_per_label: int, test_per_label: int,
                     snr_db: float, order: int, seed: int, out_dir: Union[str, Path],
                     grid: Optional[SubcarrierGrid] = None, layout: Optional[FrameLayout] = None,
                     precision: str = 'single', workers: int = 1) -> Dict[str, Path]:
    """Write train and test captures plus a JSON manifest into ``out_dir``.

    Args:
        scene: Room scene
        rfo_config: Per-packet RFO distribution
        train_per_label: Training packets per label
        test_per_label: Test packets per label
        snr_db: Channel SNR
        order: Data modulation order
        seed: Root seed
        out_dir: Output directory
        grid, layout: Frame geometry (defaults: 802.11a-style 52 subcarriers, 2 LTF, 50 DF)
        precision: 'single' (32-bit floats) or 'double'
        workers: Process count for packet synthesis

    Returns:
        Mapping {'train': path, 'test': path, 'manifest': path}
    """
    from data_processing import write_capture, write_manifest

    grid = grid or SubcarrierGrid()
    layout = layout or FrameLayout()
    layout.check_grid(grid)
    if train_per_label < 1 or test_per_label < 1:
        raise RejectedInputError("train and test counts per label must be >= 1")
    out = Path(out_dir)
    profiles = [build_profile(scene, label, grid) for label in range(scene.n_labels)]

    paths = {}
    for split, count in (('train', train_per_label), ('test', test_per_label)):
        packets = generate_packets(scene, rfo_config, count, snr_db, order, seed, split=split,
                                   grid=grid, layout=layout, workers=workers, profiles=profiles)
        paths[split] = write_capture(out / f"{split}.evsc", packets, count * scene.n_labels, grid, layout,
                                     include_meta=True, precision=precision)
        logger.info("Wrote %d %s packets to %s", count * scene.n_labels, split, paths[split])

    manifest = {
        'grid': grid.to_dict(),
        'layout': layout.to_dict(),
        'scene': scene.to_dict(),
        'rfo': rfo_config.to_dict(),
        'snr_db': snr_db if math.isfinite(snr_db) else 'inf',
        'order': order,
        'seed': seed,
        'train_per_label': train_per_label,
        'test_per_label': test_per_label,
        'n_labels': scene.n_labels,
        'precision': precision,
    }
    paths['manifest'] = write_manifest(out / 'manifest.json', manifest)
    return paths
