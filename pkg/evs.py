"""
Error vector spectrum.

Turns equalized data symbols into the per-subcarrier error vector
spectrum (EVS): modulation classification by k-means, hard decisions,
raw error matrix, symbol average and the streaming calibration that
blends the current vector with its recent per-label history. Also builds
the four feature families fed to the classifier.
"""

import logging
import warnings
from collections import Counter, deque
from dataclasses import dataclass, field
from enum import Enum
from typing import Deque, Dict, Iterable, List, Optional, Sequence, Union

import numpy as np
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning
from tqdm import tqdm

from baseband import CsiVector, EqualizedSymbols, equalize, estimate_csi, estimate_rfo
from errors import InsufficientDataError, RejectedInputError
from ofdm_core import MODULATION_ORDERS, FrameLayout, Packet, SubcarrierGrid, constellation
from utils import angle

logger = logging.getLogger(__name__)

MIN_CLUSTER_SYMBOLS = 64
KMEANS_MAX_ITER = 50
KMEANS_TOL = 1e-6
NUMERICAL_ZERO = 1e-12
DEFAULT_WINDOW = 50


class FeatureKind(str, Enum):
    CSI_AMP = 'csi-amp'
    CSI_PHASE = 'csi-phase'
    EVS_AMP = 'evs-amp'
    EVS_PHASE = 'evs-phase'

    @property
    def uses_evs(self) -> bool:
        return self in (FeatureKind.EVS_AMP, FeatureKind.EVS_PHASE)

    @classmethod
    def parse(cls, value: Union[str, 'FeatureKind']) -> 'FeatureKind':
        try:
            return cls(value)
        except ValueError:
            raise RejectedInputError(
                f"unknown feature kind {value!r}; expected one of {[k.value for k in cls]}") from None


ALL_KINDS = tuple(FeatureKind)


@dataclass(frozen=True)
class RawEvsMatrix:
    e_r: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class RawEvsVector:
    eps_bar: np.ndarray = field(repr=False)


def _phase_view(values: np.ndarray) -> np.ndarray:
    """Phase in (-pi, pi], 0 where the magnitude is a numerical zero."""
    return np.where(np.abs(values) <= NUMERICAL_ZERO, 0.0, angle(values))


@dataclass(frozen=True)
class EvsVector:
    eps: np.ndarray = field(repr=False)

    @property
    def amplitude(self) -> np.ndarray:
        return np.abs(self.eps)

    @property
    def phase(self) -> np.ndarray:
        return _phase_view(self.eps)


@dataclass(frozen=True)
class FeatureVector:
    kind: FeatureKind
    values: np.ndarray
    label: int


@dataclass
class FeatureSet:
    """N feature vectors of one kind, stacked row-wise."""
    kind: FeatureKind
    labels: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.kind = FeatureKind.parse(self.kind)
        self.labels = np.asarray(self.labels, dtype=int)
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim != 2 or self.values.shape[0] != self.labels.shape[0]:
            raise RejectedInputError(
                f"feature matrix {self.values.shape} does not match {self.labels.shape[0]} labels")

    def __len__(self) -> int:
        return self.labels.shape[0]

    @property
    def K(self) -> int:
        return self.values.shape[1]

    def subset(self, indices: Sequence[int]) -> 'FeatureSet':
        idx = np.asarray(indices, dtype=int)
        return FeatureSet(kind=self.kind, labels=self.labels[idx], values=self.values[idx])

    @classmethod
    def from_vectors(cls, vectors: Sequence[FeatureVector]) -> 'FeatureSet':
        if not vectors:
            raise InsufficientDataError("no feature vectors")
        kinds = {v.kind for v in vectors}
        if len(kinds) != 1:
            raise RejectedInputError(f"mixed feature kinds {sorted(k.value for k in kinds)}")
        return cls(kind=vectors[0].kind, labels=np.array([v.label for v in vectors]),
                   values=np.vstack([v.values for v in vectors]))


def _symbols(x_bar: Union[EqualizedSymbols, np.ndarray]) -> np.ndarray:
    return x_bar.x_bar if isinstance(x_bar, EqualizedSymbols) else np.asarray(x_bar, dtype=complex)


def classify_modulation(x_bar: Union[EqualizedSymbols, np.ndarray], grid: SubcarrierGrid,
                        orders: Sequence[int] = MODULATION_ORDERS) -> int:
    """Identify the data modulation order by k-means against each candidate constellation.

    For every order m, k-means with k = m starts at the canonical points;
    the score is the mean squared distance from each centroid to its
    nearest canonical point plus the mean within-cluster distortion.
    Pilot rows are excluded.

    Args:
        x_bar: Equalized K x N_D symbols
        grid: Subcarrier grid (selects data rows)
        orders: Candidate orders, ascending

    Returns:
        Order with the lowest score (ties toward the smaller order)
    """
    symbols = _symbols(x_bar)[grid.data_rows, :].ravel()
    if symbols.size < MIN_CLUSTER_SYMBOLS:
        raise InsufficientDataError(
            f"modulation classification needs >= {MIN_CLUSTER_SYMBOLS} data symbols, got {symbols.size}")
    samples = np.column_stack([symbols.real, symbols.imag])

    best_order, best_score = None, np.inf
    for order in sorted(orders):
        points = constellation(order).points
        canonical = np.column_stack([points.real, points.imag])
        kmeans = KMeans(n_clusters=order, init=canonical, n_init=1, max_iter=KMEANS_MAX_ITER,
                        tol=KMEANS_TOL, algorithm='lloyd')
        with warnings.catch_warnings():
            warnings.simplefilter('ignore', ConvergenceWarning)
            kmeans.fit(samples)
        offsets = ((kmeans.cluster_centers_[:, None, :] - canonical[None, :, :]) ** 2).sum(axis=2)
        score = offsets.min(axis=1).mean() + kmeans.inertia_ / len(samples)
        logger.debug("Modulation order %d scored %.6g", order, score)
        if score < best_score:
            best_order, best_score = order, score
    return best_order


def hard_decide(x_bar: Union[EqualizedSymbols, np.ndarray], order: int, grid: SubcarrierGrid,
                layout: FrameLayout) -> np.ndarray:
    """Map data cells to the nearest constellation point and pilot cells to the pilot reference."""
    symbols = _symbols(x_bar)
    points = constellation(order).points
    distance = np.abs(symbols[..., None] - points) ** 2
    decided = points[np.argmin(distance, axis=-1)]
    decided[grid.pilot_rows, :] = np.asarray(layout.pilot_ref, dtype=float)[:, None]
    return decided


def raw_evs(x_bar: Union[EqualizedSymbols, np.ndarray], x_hat: np.ndarray) -> RawEvsMatrix:
    """Raw error matrix x_bar - x_hat.

    Equalization already applied exp(-j phi_hat_n), so with correct
    decisions the error is exp(-j phi_hat_n) * w / h_hat.
    """
    symbols = _symbols(x_bar)
    x_hat = np.asarray(x_hat, dtype=complex)
    if symbols.shape != x_hat.shape:
        raise RejectedInputError(f"equalized shape {symbols.shape} differs from decision shape {x_hat.shape}")
    return RawEvsMatrix(e_r=symbols - x_hat)


def average_evs(e_r: Union[RawEvsMatrix, np.ndarray]) -> RawEvsVector:
    matrix = e_r.e_r if isinstance(e_r, RawEvsMatrix) else np.asarray(e_r, dtype=complex)
    if matrix.ndim != 2 or matrix.shape[1] < 1:
        raise RejectedInputError(f"raw EVS matrix needs at least one DF symbol, got shape {matrix.shape}")
    return RawEvsVector(eps_bar=matrix.mean(axis=1))


def _check_gamma(gamma: int) -> int:
    if isinstance(gamma, bool) or int(gamma) != gamma or gamma < 0:
        raise RejectedInputError(f"gamma must be an integer >= 0, got {gamma}")
    return int(gamma)


def calibrate(current: Union[RawEvsVector, np.ndarray],
              history: Sequence[Union[RawEvsVector, np.ndarray]], gamma: int) -> EvsVector:
    """Blend the current raw EVS with the mean of its history.

    eps = eps_bar / 2**gamma + (2**gamma - 1) / 2**gamma * mean(history)

    ``history`` holds the last T raw vectors with ``current`` as its newest
    element. gamma = 0 returns the current vector unchanged.
    """
    gamma = _check_gamma(gamma)
    if len(history) == 0:
        raise RejectedInputError("calibration history is empty")
    cur = current.eps_bar if isinstance(current, RawEvsVector) else np.asarray(current, dtype=complex)
    stacked = np.vstack([h.eps_bar if isinstance(h, RawEvsVector) else np.asarray(h, dtype=complex)
                         for h in history])
    scale = float(2 ** gamma)
    return EvsVector(eps=cur / scale + (scale - 1.0) / scale * stacked.mean(axis=0))


class CalibrationWindow:
    """Sliding window of the last T raw EVS vectors of one label stream."""

    def __init__(self, size: int = DEFAULT_WINDOW):
        if size < 1:
            raise RejectedInputError(f"calibration window must be >= 1, got {size}")
        self.size = size
        self._history: Deque[RawEvsVector] = deque(maxlen=size)

    def __len__(self) -> int:
        return len(self._history)

    def push(self, raw: RawEvsVector, gamma: int) -> EvsVector:
        self._history.append(raw)
        return calibrate(raw, list(self._history), gamma)


@dataclass(frozen=True)
class PipelineConfig:
    """Feature extraction settings.

    Attributes:
        kind: Feature family
        gamma: Calibration exponent
        window: Calibration window T (packets per label)
        order_hint: Skip classification and use this modulation order
        literal_rfo: Use the literal pilot product for RFO tracking
        fill_degenerate: Reuse the previous phase for zero pilot accumulators
        session_vote: Classify only the first N packets, then use their majority order (0 = per packet)
    """
    kind: FeatureKind = FeatureKind.EVS_PHASE
    gamma: int = 0
    window: int = DEFAULT_WINDOW
    order_hint: Optional[int] = None
    literal_rfo: bool = False
    fill_degenerate: bool = False
    session_vote: int = 0

    def __post_init__(self):
        object.__setattr__(self, 'kind', FeatureKind.parse(self.kind))
        _check_gamma(self.gamma)
        if self.window < 1:
            raise RejectedInputError(f"calibration window must be >= 1, got {self.window}")
        if self.order_hint is not None and self.order_hint not in MODULATION_ORDERS:
            raise RejectedInputError(f"unsupported modulation order hint {self.order_hint}")
        if self.session_vote < 0:
            raise RejectedInputError("session_vote must be >= 0")


@dataclass(frozen=True)
class RawComponents:
    """Gamma-independent part of the chain for one packet."""
    label: int
    csi: CsiVector
    raw: Optional[RawEvsVector] = None
    order: Optional[int] = None


def raw_components(packet: Packet, config: PipelineConfig, order: Optional[int] = None) -> RawComponents:
    """Run the chain up to the symbol-averaged raw EVS (CSI only for CSI kinds).

    Args:
        packet: Received packet
        config: Pipeline settings
        order: Modulation order to use; classified per packet when None and no hint is set

    Returns:
        RawComponents
    """
    grid, layout = packet.grid, packet.layout
    label = -1 if packet.label is None else int(packet.label)
    csi = estimate_csi(packet.ltf_rx, layout.ltf_matrix())
    if not config.kind.uses_evs:
        return RawComponents(label=label, csi=csi)
    rfo = estimate_rfo(packet.df_rx, csi, grid, layout.pilot_ref,
                       literal=config.literal_rfo, fill_degenerate=config.fill_degenerate)
    x_bar = equalize(packet.df_rx, csi, rfo)
    if order is None:
        order = config.order_hint or classify_modulation(x_bar, grid)
    x_hat = hard_decide(x_bar, order, grid, layout)
    raw = average_evs(raw_evs(x_bar, x_hat))
    return RawComponents(label=label, csi=csi, raw=raw, order=order)


def _feature_values(kind: FeatureKind, csi: CsiVector, evs: Optional[EvsVector]) -> np.ndarray:
    if kind is FeatureKind.CSI_AMP:
        return csi.amplitude
    if kind is FeatureKind.CSI_PHASE:
        return csi.phase
    if kind is FeatureKind.EVS_AMP:
        return evs.amplitude
    return evs.phase


def extract_features(packet: Packet, config: PipelineConfig,
                     window: Optional[CalibrationWindow] = None) -> FeatureVector:
    """Feature vector of one packet.

    Without a window the calibration history is the current packet alone,
    so the EVS is the raw symbol average for any gamma.
    """
    comps = raw_components(packet, config)
    evs = None
    if config.kind.uses_evs:
        window = window if window is not None else CalibrationWindow(config.window)
        evs = window.push(comps.raw, config.gamma)
    return FeatureVector(kind=config.kind, values=_feature_values(config.kind, comps.csi, evs), label=comps.label)


class FeatureExtractor:
    """Stateful extractor over a packet stream.

    Keeps one calibration window per label and, with ``session_vote``, the
    modulation orders seen so far.
    """

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.windows: Dict[int, CalibrationWindow] = {}
        self._votes: Counter = Counter()
        self._session_order: Optional[int] = None

    @property
    def session_order(self) -> Optional[int]:
        """Majority order once ``session_vote`` packets were classified."""
        return self._session_order

    def _order(self) -> Optional[int]:
        if self.config.order_hint is not None:
            return self.config.order_hint
        return self._session_order

    def _record_vote(self, order: int) -> None:
        if not self.config.session_vote or self._session_order is not None:
            return
        self._votes[order] += 1
        if sum(self._votes.values()) >= self.config.session_vote:
            top = max(self._votes.values())
            self._session_order = min(o for o, n in self._votes.items() if n == top)
            logger.info("Session modulation order fixed to %d after %d packets", self._session_order,
                        self.config.session_vote)

    def components(self, packet: Packet) -> RawComponents:
        comps = raw_components(packet, self.config, order=self._order())
        if comps.order is not None:
            self._record_vote(comps.order)
        return comps

    def extract(self, packet: Packet) -> FeatureVector:
        comps = self.components(packet)
        evs = None
        if self.config.kind.uses_evs:
            window = self.windows.setdefault(comps.label, CalibrationWindow(self.config.window))
            evs = window.push(comps.raw, self.config.gamma)
        return FeatureVector(kind=self.config.kind, values=_feature_values(self.config.kind, comps.csi, evs),
                             label=comps.label)

    def extract_all(self, packets: Iterable[Packet], total: Optional[int] = None,
                    progress: bool = False) -> FeatureSet:
        """Extract every packet in stream order.

        Errors are re-raised with a ``packet_index`` attribute naming the failing packet.
        """
        vectors: List[FeatureVector] = []
        for index, packet in enumerate(tqdm(packets, total=total, desc='extract', disable=not progress)):
            try:
                vectors.append(self.extract(packet))
            except Exception as e:
                e.packet_index = index
                raise
        return FeatureSet.from_vectors(vectors)


def calibrate_stream(raws: Sequence[RawComponents], gamma: int, window: int = DEFAULT_WINDOW) -> List[EvsVector]:
    """Calibrate precomputed raw vectors in stream order with per-label windows."""
    windows: Dict[int, CalibrationWindow] = {}
    out = []
    for comps in raws:
        if comps.raw is None:
            raise RejectedInputError("raw EVS missing; components were computed for a CSI kind")
        out.append(windows.setdefault(comps.label, CalibrationWindow(window)).push(comps.raw, gamma))
    return out


def features_from_components(raws: Sequence[RawComponents], kind: Union[str, FeatureKind], gamma: int = 0,
                             window: int = DEFAULT_WINDOW) -> FeatureSet:
    """Feature set of any kind from precomputed components (used by sweeps)."""
    kind = FeatureKind.parse(kind)
    if not raws:
        raise InsufficientDataError("no packets")
    labels = np.array([c.label for c in raws], dtype=int)
    if kind.uses_evs:
        evs = calibrate_stream(raws, gamma, window)
        values = np.vstack([_feature_values(kind, c.csi, e) for c, e in zip(raws, evs)])
    else:
        values = np.vstack([_feature_values(kind, c.csi, None) for c in raws])
    return FeatureSet(kind=kind, labels=labels, values=values)
