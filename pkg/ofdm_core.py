"""
OFDM core definitions.

Subcarrier grid, constellations, frame layout and the frequency-domain
packet representation shared by the simulator, the receiver chain and the
file formats. Everything here lives after the FFT: nulls and DC are never
materialized, so row k of every K x N matrix is the k-th occupied subcarrier.
"""

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any, Dict, Optional, Tuple

import numpy as np

from errors import RejectedInputError
from utils import SeedLike, make_rng


MODULATION_ORDERS = (2, 4, 16, 64)
MODULATION_NAMES = {2: 'BPSK', 4: 'QPSK', 16: '16-QAM', 64: '64-QAM'}

DEFAULT_OCCUPIED = tuple(range(-26, 0)) + tuple(range(1, 27))
DEFAULT_PILOTS = (-21, -7, 7, 21)
# Constant per-symbol pilot polarity over the pilot set.
DEFAULT_PILOT_POLARITY = (1, 1, 1, -1)

# IEEE 802.11a long training sequence over subcarriers -26..-1, +1..+26.
FREQUENCY_DOMAIN_LTF = (
    1, 1, -1, -1, 1, 1, -1, 1, -1, 1, 1, 1, 1, 1, 1, -1, -1, 1, 1, -1, 1, -1, 1, 1, 1, 1,
    1, -1, -1, 1, 1, -1, 1, -1, 1, -1, -1, -1, -1, -1, 1, 1, -1, -1, 1, -1, 1, -1, 1, 1, 1, 1,
)


@dataclass(frozen=True)
class SubcarrierGrid:
    """Occupied subcarriers of one 20 MHz channel.

    Attributes:
        total_bins: FFT size
        occupied: Logical indices of the K used subcarriers, strictly increasing, no DC
        pilot_set: Pilot indices (subset of occupied)
        center_freq_hz: Carrier frequency
        subcarrier_spacing_hz: Subcarrier spacing
    """
    total_bins: int = 64
    occupied: Tuple[int, ...] = DEFAULT_OCCUPIED
    pilot_set: Tuple[int, ...] = DEFAULT_PILOTS
    center_freq_hz: float = 5.22e9
    subcarrier_spacing_hz: float = 312_500.0

    def __post_init__(self):
        object.__setattr__(self, 'occupied', tuple(int(i) for i in self.occupied))
        object.__setattr__(self, 'pilot_set', tuple(int(i) for i in self.pilot_set))
        occ = self.occupied
        if not occ:
            raise RejectedInputError("grid needs at least one occupied subcarrier")
        if any(b <= a for a, b in zip(occ, occ[1:])):
            raise RejectedInputError("occupied indices must be strictly increasing")
        if 0 in occ:
            raise RejectedInputError("occupied indices must not contain DC (0)")
        if any(not -(self.total_bins // 2) <= i < self.total_bins // 2 for i in occ):
            raise RejectedInputError(f"occupied index outside a {self.total_bins}-bin FFT")
        missing = [p for p in self.pilot_set if p not in occ]
        if missing:
            raise RejectedInputError(f"pilot indices {missing} are not occupied subcarriers")
        if self.subcarrier_spacing_hz <= 0 or self.center_freq_hz <= 0:
            raise RejectedInputError("carrier frequency and subcarrier spacing must be positive")

    @property
    def K(self) -> int:
        return len(self.occupied)

    @property
    def data_set(self) -> Tuple[int, ...]:
        pilots = set(self.pilot_set)
        return tuple(i for i in self.occupied if i not in pilots)

    @property
    def pilot_rows(self) -> np.ndarray:
        """Row positions of the pilots inside a K x N matrix."""
        return np.array([self.occupied.index(p) for p in self.pilot_set], dtype=int)

    @property
    def data_rows(self) -> np.ndarray:
        """Row positions of the data subcarriers inside a K x N matrix."""
        pilots = set(self.pilot_set)
        return np.array([row for row, i in enumerate(self.occupied) if i not in pilots], dtype=int)

    def frequencies_hz(self) -> np.ndarray:
        """Absolute frequency f_k of every occupied subcarrier."""
        return self.center_freq_hz + np.asarray(self.occupied, dtype=float) * self.subcarrier_spacing_hz

    def to_dict(self) -> Dict[str, Any]:
        return {
            'total_bins': self.total_bins,
            'occupied': list(self.occupied),
            'pilot_set': list(self.pilot_set),
            'center_freq_hz': self.center_freq_hz,
            'subcarrier_spacing_hz': self.subcarrier_spacing_hz,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'SubcarrierGrid':
        return cls(
            total_bins=int(data.get('total_bins', 64)),
            occupied=tuple(data.get('occupied', DEFAULT_OCCUPIED)),
            pilot_set=tuple(data.get('pilot_set', DEFAULT_PILOTS)),
            center_freq_hz=float(data.get('center_freq_hz', 5.22e9)),
            subcarrier_spacing_hz=float(data.get('subcarrier_spacing_hz', 312_500.0)),
        )


@dataclass(frozen=True)
class FrameLayout:
    """Training/data symbol counts and the known reference values.

    STF and SF are not carried: the receiver chain only consumes LTF and DF.
    """
    n_ltf: int = 2
    n_df: int = 50
    ltf_ref: Tuple[int, ...] = FREQUENCY_DOMAIN_LTF
    pilot_ref: Tuple[int, ...] = DEFAULT_PILOT_POLARITY

    def __post_init__(self):
        object.__setattr__(self, 'ltf_ref', tuple(int(v) for v in self.ltf_ref))
        object.__setattr__(self, 'pilot_ref', tuple(int(v) for v in self.pilot_ref))
        if self.n_ltf < 1 or self.n_df < 1:
            raise RejectedInputError(f"need n_ltf >= 1 and n_df >= 1, got {self.n_ltf}, {self.n_df}")
        if any(v not in (-1, 1) for v in self.ltf_ref):
            raise RejectedInputError("ltf_ref entries must be -1 or +1")
        if any(v not in (-1, 1) for v in self.pilot_ref):
            raise RejectedInputError("pilot_ref entries must be -1 or +1")

    def check_grid(self, grid: SubcarrierGrid) -> None:
        """Raise if the reference sequences do not fit ``grid``."""
        if len(self.ltf_ref) != grid.K:
            raise RejectedInputError(f"ltf_ref has {len(self.ltf_ref)} entries, grid has K = {grid.K}")
        if len(self.pilot_ref) != len(grid.pilot_set):
            raise RejectedInputError(
                f"pilot_ref has {len(self.pilot_ref)} entries, grid has {len(grid.pilot_set)} pilots")

    def ltf_matrix(self) -> np.ndarray:
        """Transmitted LTF x_L as a K x N_L real matrix (the same symbol repeated)."""
        ref = np.asarray(self.ltf_ref, dtype=float)
        return np.repeat(ref[:, None], self.n_ltf, axis=1)

    def pilot_matrix(self) -> np.ndarray:
        """Known pilot values p_{psi,n} as a |Psi| x N_D matrix."""
        ref = np.asarray(self.pilot_ref, dtype=float)
        return np.repeat(ref[:, None], self.n_df, axis=1)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'n_ltf': self.n_ltf,
            'n_df': self.n_df,
            'ltf_ref': list(self.ltf_ref),
            'pilot_ref': list(self.pilot_ref),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'FrameLayout':
        return cls(
            n_ltf=int(data.get('n_ltf', 2)),
            n_df=int(data.get('n_df', 50)),
            ltf_ref=tuple(data.get('ltf_ref', FREQUENCY_DOMAIN_LTF)),
            pilot_ref=tuple(data.get('pilot_ref', DEFAULT_PILOT_POLARITY)),
        )


@dataclass(frozen=True)
class Constellation:
    order: int
    points: np.ndarray

    @property
    def name(self) -> str:
        return MODULATION_NAMES[self.order]


def _gray_to_binary(g: int) -> int:
    b = 0
    while g:
        b ^= g
        g >>= 1
    return b


def _pam_levels(bits: int) -> np.ndarray:
    """Gray-mapped PAM amplitude for every bit pattern of ``bits`` bits."""
    n_levels = 1 << bits
    return np.array([2 * _gray_to_binary(g) - (n_levels - 1) for g in range(n_levels)], dtype=float)


@lru_cache(maxsize=None)
def constellation(order: int) -> Constellation:
    """Canonical unit-energy Gray-mapped constellation of a modulation order.

    BPSK is real {-1, +1}; square QAM splits each index into I bits (high)
    and Q bits (low), each Gray-mapped onto odd PAM levels.

    Args:
        order: Modulation order, one of 2, 4, 16, 64

    Returns:
        Constellation whose points have mean energy 1
    """
    if order not in MODULATION_ORDERS:
        raise RejectedInputError(f"unsupported modulation order {order}; expected one of {MODULATION_ORDERS}")
    if order == 2:
        points = np.array([-1.0 + 0j, 1.0 + 0j])
    else:
        half = int(np.log2(order)) // 2
        levels = _pam_levels(half)
        i_idx, q_idx = np.divmod(np.arange(order), 1 << half)
        points = levels[i_idx] + 1j * levels[q_idx]
        points = points / np.sqrt(np.mean(np.abs(points) ** 2))
    points.setflags(write=False)
    return Constellation(order=order, points=points)


@dataclass(frozen=True)
class PacketMeta:
    """Ground truth attached by the simulator (absent for real captures)."""
    label: int
    true_csi: np.ndarray
    rfo_trajectory: np.ndarray
    snr_db: float
    tx_df: Optional[np.ndarray] = None


@dataclass(frozen=True)
class Packet:
    """One received frame: LTF (K x N_L) and DF (K x N_D) in the frequency domain."""
    grid: SubcarrierGrid
    layout: FrameLayout
    ltf_rx: np.ndarray
    df_rx: np.ndarray
    meta: Optional[PacketMeta] = None
    label: Optional[int] = field(default=None)

    def __post_init__(self):
        K = self.grid.K
        if self.ltf_rx.shape != (K, self.layout.n_ltf):
            raise RejectedInputError(f"ltf_rx has shape {self.ltf_rx.shape}, expected {(K, self.layout.n_ltf)}")
        if self.df_rx.shape != (K, self.layout.n_df):
            raise RejectedInputError(f"df_rx has shape {self.df_rx.shape}, expected {(K, self.layout.n_df)}")
        if self.label is None and self.meta is not None:
            object.__setattr__(self, 'label', self.meta.label)


def random_df_payload(layout: FrameLayout, grid: SubcarrierGrid, order: int, rng_seed: SeedLike) -> np.ndarray:
    """Draw a K x N_D transmit DF matrix.

    Data cells are uniform over the constellation, pilot rows carry the
    layout's pilot reference.

    Args:
        layout: Frame layout (N_D, pilot_ref)
        grid: Subcarrier grid
        order: Modulation order of the data subcarriers
        rng_seed: Seed, seed key sequence or Generator

    Returns:
        Complex K x N_D matrix
    """
    layout.check_grid(grid)
    points = constellation(order).points
    rng = make_rng(rng_seed)
    data_rows = grid.data_rows
    frame = np.empty((grid.K, layout.n_df), dtype=complex)
    frame[data_rows, :] = points[rng.integers(0, order, size=(len(data_rows), layout.n_df))]
    frame[grid.pilot_rows, :] = layout.pilot_matrix()
    return frame
