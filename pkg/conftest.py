"""Shared fixtures for the EVS localization tests."""

import math

import numpy as np
import pytest

from channel_sim import RfoModel, Scene, apply_channel, make_tx_frame
from ofdm_core import FrameLayout, SubcarrierGrid


@pytest.fixture(scope="session")
def grid():
    return SubcarrierGrid()


@pytest.fixture(scope="session")
def layout():
    return FrameLayout()


@pytest.fixture(scope="session")
def scene():
    return Scene()


@pytest.fixture
def simulate_packet(grid, layout):
    """Factory for single packets through an explicit channel response.

    Defaults: identity channel, QPSK, no RFO, no noise.
    """

    def _make(response=None, *, order=4, cfo_hz=0.0, phi0=0.0, snr_db=math.inf, seed=0, label=0,
              hold_ltf_phase=True, frame_layout=None):
        frame_layout = frame_layout or layout
        if response is None:
            response = np.ones(grid.K, dtype=complex)
        frame = make_tx_frame(grid, frame_layout, order, [seed, 7])
        rfo = RfoModel(cfo_hz=cfo_hz, initial_phase=phi0, hold_ltf_phase=hold_ltf_phase)
        return apply_channel(response, rfo, frame, snr_db, [seed, 8], label=label)

    return _make
