"""
Receiver-side estimation chain.

CSI from the long training field, residual phase (RFO) from the pilot
subcarriers of every data symbol, and zero-forcing equalization of the
data field.
"""

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from errors import DegenerateEstimateError, RejectedInputError, SingularEqualizerError
from ofdm_core import SubcarrierGrid
from utils import angle

logger = logging.getLogger(__name__)

SINGULAR_THRESHOLD = 1e-12


@dataclass(frozen=True)
class CsiVector:
    h_hat: np.ndarray = field(repr=False)

    @property
    def amplitude(self) -> np.ndarray:
        return np.abs(self.h_hat)

    @property
    def phase(self) -> np.ndarray:
        return angle(self.h_hat)


@dataclass(frozen=True)
class RfoEstimate:
    phi_hat: np.ndarray
    degenerate_symbols: tuple = ()


@dataclass(frozen=True)
class EqualizedSymbols:
    x_bar: np.ndarray = field(repr=False)


def _check_finite(name: str, values: np.ndarray) -> None:
    if not np.all(np.isfinite(values)):
        raise RejectedInputError(f"{name} contains non-finite values")


def estimate_csi(ltf_rx: np.ndarray, ltf_ref: np.ndarray) -> CsiVector:
    """Sample-average channel estimate h_hat_k = mean_n y_L[k, n] * x_L[k, n].

    The reference is +-1, so multiplying by it is the same as dividing.
    No smoothing across subcarriers.

    Args:
        ltf_rx: K x N_L received LTF
        ltf_ref: K x N_L known LTF values (+-1)

    Returns:
        CsiVector of length K
    """
    ltf_rx = np.asarray(ltf_rx, dtype=complex)
    ltf_ref = np.asarray(ltf_ref, dtype=float)
    if ltf_rx.shape != ltf_ref.shape or ltf_rx.ndim != 2:
        raise RejectedInputError(f"LTF shape {ltf_rx.shape} does not match reference shape {ltf_ref.shape}")
    if not np.all(np.isin(ltf_ref, (-1.0, 1.0))):
        raise RejectedInputError("LTF reference entries must be -1 or +1")
    _check_finite('ltf_rx', ltf_rx)
    return CsiVector(h_hat=np.mean(ltf_rx * ltf_ref, axis=1))


def estimate_rfo(df_rx: np.ndarray, csi: CsiVector, grid: SubcarrierGrid, pilot_ref: Sequence[float],
                 literal: bool = False, fill_degenerate: bool = False) -> RfoEstimate:
    """Per-symbol common phase from the pilots.

    phi_hat_n = angle(sum_psi y_D[psi, n] * conj(h_hat_psi) * p_psi), so that
    exp(-j phi_hat_n) undoes the phase the data field gained since the LTF.

    Args:
        df_rx: K x N_D received data field
        csi: Channel estimate
        grid: Subcarrier grid (pilot positions)
        pilot_ref: Pilot values, one per pilot (constant over symbols) or |Psi| x N_D
        literal: Use angle(sum y * h_hat) without conjugate and polarity. Kept for
            comparison only; it does not cancel the channel phase.
        fill_degenerate: Substitute phi_hat_{n-1} (0 for n = 0) when the pilot
            accumulator is exactly zero instead of raising

    Returns:
        RfoEstimate with N_D phases in (-pi, pi]
    """
    df_rx = np.asarray(df_rx, dtype=complex)
    if df_rx.ndim != 2 or df_rx.shape[0] != grid.K:
        raise RejectedInputError(f"DF shape {df_rx.shape} does not have K = {grid.K} rows")
    if not grid.pilot_set:
        raise RejectedInputError("RFO tracking needs at least one pilot subcarrier")
    _check_finite('df_rx', df_rx)
    n_df = df_rx.shape[1]
    rows = grid.pilot_rows
    pilots = np.asarray(pilot_ref, dtype=float)
    if pilots.ndim == 1:
        pilots = np.repeat(pilots[:, None], n_df, axis=1)
    if pilots.shape != (len(rows), n_df):
        raise RejectedInputError(f"pilot reference shape {pilots.shape}, expected {(len(rows), n_df)}")

    h_pilot = csi.h_hat[rows]
    if np.any(h_pilot == 0):
        raise RejectedInputError("channel estimate is zero at a pilot subcarrier")
    if literal:
        acc = np.sum(df_rx[rows, :] * h_pilot[:, None], axis=0)
    else:
        acc = np.sum(df_rx[rows, :] * np.conj(h_pilot)[:, None] * pilots, axis=0)

    phi_hat = angle(acc)
    degenerate = np.flatnonzero(acc == 0)
    if degenerate.size:
        if not fill_degenerate:
            raise DegenerateEstimateError(int(degenerate[0]))
        for n in degenerate:
            phi_hat[n] = phi_hat[n - 1] if n > 0 else 0.0
        logger.debug("Filled %d degenerate RFO symbols from their predecessors", degenerate.size)
    return RfoEstimate(phi_hat=phi_hat, degenerate_symbols=tuple(int(n) for n in degenerate))


def equalize(df_rx: np.ndarray, csi: CsiVector, rfo: Optional[RfoEstimate] = None) -> EqualizedSymbols:
    """Zero-forcing equalization x_bar[k, n] = exp(-j phi_hat_n) * y_D[k, n] / h_hat_k."""
    df_rx = np.asarray(df_rx, dtype=complex)
    h_hat = csi.h_hat
    if df_rx.ndim != 2 or df_rx.shape[0] != h_hat.shape[0]:
        raise RejectedInputError(f"DF shape {df_rx.shape} does not match CSI length {h_hat.shape[0]}")
    magnitude = np.abs(h_hat)
    weak = np.flatnonzero(magnitude < SINGULAR_THRESHOLD)
    if weak.size:
        raise SingularEqualizerError(int(weak[0]), float(magnitude[weak[0]]))
    q = 1.0 / h_hat
    x_bar = df_rx * q[:, None]
    if rfo is not None:
        if rfo.phi_hat.shape != (df_rx.shape[1],):
            raise RejectedInputError(f"RFO estimate has {rfo.phi_hat.shape[0]} symbols, DF has {df_rx.shape[1]}")
        x_bar = x_bar * np.exp(-1j * rfo.phi_hat)[None, :]
    return EqualizedSymbols(x_bar=x_bar)
