"""
Data processing module for EVS localization.

Owns the on-disk formats: the binary packet capture, the CSV feature
file, the results tables and the dataset manifest. Every writer goes
through a temporary file and an atomic rename.

Capture layout (all little-endian):

    header  magic "EVSC" | version u16 | K u16 | N_L u16 | N_D u16 | count u32 | flags u16
    packet  label u16
            [metadata: true CSI K complex | RFO trajectory N_L+N_D reals | SNR real]
            LTF K x N_L complex
            DF  K x N_D complex

Complex values are (re, im) pairs of 32-bit floats, or 64-bit floats
when flags bit 1 is set. Flags bit 0 marks the metadata block.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional, Union

import numpy as np
import pandas as pd

from errors import CaptureFormatError, FeatureFormatError, RejectedInputError
from evs import FeatureKind, FeatureSet
from ofdm_core import FrameLayout, Packet, PacketMeta, SubcarrierGrid
from utils import atomic_write

logger = logging.getLogger(__name__)

CAPTURE_MAGIC = b'EVSC'
CAPTURE_VERSION = 1
FLAG_METADATA = 0x1
FLAG_DOUBLE = 0x2
KNOWN_FLAGS = FLAG_METADATA | FLAG_DOUBLE

HEADER_DTYPE = np.dtype([
    ('magic', 'S4'),
    ('version', '<u2'),
    ('K', '<u2'),
    ('n_ltf', '<u2'),
    ('n_df', '<u2'),
    ('count', '<u4'),
    ('flags', '<u2'),
])
HEADER_OFFSETS = {name: HEADER_DTYPE.fields[name][1] for name in HEADER_DTYPE.names}

RESULT_COLUMNS = ['experiment', 'kind', 'gamma', 'seed', 'accuracy', 'std']
RUN_COLUMNS = ['experiment', 'kind', 'gamma', 'seed', 'run', 'accuracy']


@dataclass(frozen=True)
class CaptureHeader:
    version: int
    K: int
    n_ltf: int
    n_df: int
    count: int
    flags: int

    @property
    def has_meta(self) -> bool:
        return bool(self.flags & FLAG_METADATA)

    @property
    def precision(self) -> str:
        return 'double' if self.flags & FLAG_DOUBLE else 'single'

    @property
    def record_dtype(self) -> np.dtype:
        return packet_dtype(self.K, self.n_ltf, self.n_df, self.has_meta, self.precision)


def packet_dtype(K: int, n_ltf: int, n_df: int, include_meta: bool, precision: str = 'single') -> np.dtype:
    """Structured dtype of one packet record."""
    if precision not in ('single', 'double'):
        raise RejectedInputError(f"precision must be 'single' or 'double', got {precision!r}")
    real = '<f8' if precision == 'double' else '<f4'
    fields = [('label', '<u2')]
    if include_meta:
        fields += [('true_csi', real, (K, 2)), ('rfo', real, (n_ltf + n_df,)), ('snr_db', real)]
    fields += [('ltf', real, (K, n_ltf, 2)), ('df', real, (K, n_df, 2))]
    return np.dtype(fields)


def _pairs(values: np.ndarray) -> np.ndarray:
    return np.stack([values.real, values.imag], axis=-1)


def _complex(pairs: np.ndarray) -> np.ndarray:
    pairs = pairs.astype(float)
    return pairs[..., 0] + 1j * pairs[..., 1]


def write_capture(path: Union[str, Path], packets: Iterable[Packet], count: int, grid: SubcarrierGrid,
                  layout: FrameLayout, include_meta: bool = True, precision: str = 'single') -> Path:
    """Stream ``count`` packets into a capture file.

    Args:
        path: Output file
        packets: Packets in file order
        count: Number of packets the iterable yields
        grid, layout: Frame geometry written to the header
        include_meta: Store the ground-truth metadata block
        precision: 'single' or 'double' sample precision

    Returns:
        Path of the written file
    """
    if not 0 <= count <= 0xFFFFFFFF:
        raise RejectedInputError(f"packet count {count} does not fit the header")
    record = packet_dtype(grid.K, layout.n_ltf, layout.n_df, include_meta, precision)
    flags = (FLAG_METADATA if include_meta else 0) | (FLAG_DOUBLE if precision == 'double' else 0)
    header = np.array([(CAPTURE_MAGIC, CAPTURE_VERSION, grid.K, layout.n_ltf, layout.n_df, count, flags)],
                      dtype=HEADER_DTYPE)

    written = 0
    with atomic_write(path, 'wb') as handle:
        handle.write(header.tobytes())
        for packet in packets:
            if written >= count:
                raise RejectedInputError(f"more packets than the declared count {count}")
            if packet.label is None or not 0 <= packet.label <= 0xFFFF:
                raise RejectedInputError(f"packet {written} has no storable label ({packet.label})")
            rec = np.zeros(1, dtype=record)
            rec['label'] = packet.label
            if include_meta:
                if packet.meta is None:
                    raise RejectedInputError(f"packet {written} has no metadata")
                rec['true_csi'] = _pairs(packet.meta.true_csi)
                rec['rfo'] = packet.meta.rfo_trajectory
                rec['snr_db'] = packet.meta.snr_db
            rec['ltf'] = _pairs(packet.ltf_rx)
            rec['df'] = _pairs(packet.df_rx)
            handle.write(rec.tobytes())
            written += 1
        if written != count:
            raise RejectedInputError(f"declared {count} packets but received {written}")
    logger.debug("Wrote %d packets (%s precision) to %s", count, precision, path)
    return Path(path)


def _parse_header(data: bytes) -> CaptureHeader:
    if len(data) < HEADER_DTYPE.itemsize:
        raise CaptureFormatError(f"truncated header: {len(data)} of {HEADER_DTYPE.itemsize} bytes", len(data))
    raw = np.frombuffer(data, dtype=HEADER_DTYPE, count=1)[0]
    if bytes(raw['magic']) != CAPTURE_MAGIC:
        raise CaptureFormatError(f"bad magic {bytes(raw['magic'])!r}, expected {CAPTURE_MAGIC!r}", 0)
    if int(raw['version']) != CAPTURE_VERSION:
        raise CaptureFormatError(f"unsupported capture version {raw['version']}", HEADER_OFFSETS['version'])
    for name in ('K', 'n_ltf', 'n_df'):
        if int(raw[name]) == 0:
            raise CaptureFormatError(f"header field {name} is zero", HEADER_OFFSETS[name])
    if int(raw['flags']) & ~KNOWN_FLAGS:
        raise CaptureFormatError(f"unknown flag bits 0x{int(raw['flags']):04x}", HEADER_OFFSETS['flags'])
    return CaptureHeader(version=int(raw['version']), K=int(raw['K']), n_ltf=int(raw['n_ltf']),
                         n_df=int(raw['n_df']), count=int(raw['count']), flags=int(raw['flags']))


def _read_records(data: bytes, header: CaptureHeader) -> np.ndarray:
    record = header.record_dtype
    expected = HEADER_DTYPE.itemsize + header.count * record.itemsize
    if len(data) < expected:
        complete = (len(data) - HEADER_DTYPE.itemsize) // record.itemsize
        offset = HEADER_DTYPE.itemsize + complete * record.itemsize
        raise CaptureFormatError(f"truncated payload: packet {complete} of {header.count} is incomplete", offset)
    if len(data) > expected:
        raise CaptureFormatError(f"{len(data) - expected} trailing bytes after {header.count} packets", expected)
    return np.frombuffer(data, dtype=record, count=header.count, offset=HEADER_DTYPE.itemsize)


def capture_header(path: Union[str, Path]) -> CaptureHeader:
    with open(path, 'rb') as handle:
        return _parse_header(handle.read(HEADER_DTYPE.itemsize))


@dataclass
class Capture:
    """A loaded capture: header, geometry and the raw packet records."""
    header: CaptureHeader
    grid: SubcarrierGrid
    layout: FrameLayout
    records: np.ndarray

    def __len__(self) -> int:
        return self.header.count

    @property
    def labels(self) -> np.ndarray:
        return self.records['label'].astype(int)

    def label_counts(self) -> pd.Series:
        return pd.Series(self.labels).value_counts().sort_index()

    def packet(self, index: int) -> Packet:
        rec = self.records[index]
        label = int(rec['label'])
        meta = None
        if self.header.has_meta:
            meta = PacketMeta(label=label, true_csi=_complex(rec['true_csi']),
                              rfo_trajectory=rec['rfo'].astype(float), snr_db=float(rec['snr_db']))
        return Packet(grid=self.grid, layout=self.layout, ltf_rx=_complex(rec['ltf']),
                      df_rx=_complex(rec['df']), meta=meta, label=label)

    def packets(self) -> Iterator[Packet]:
        for index in range(len(self)):
            yield self.packet(index)


def read_capture(path: Union[str, Path], grid: Optional[SubcarrierGrid] = None,
                 layout: Optional[FrameLayout] = None) -> Capture:
    """Load and validate a capture file.

    Without an explicit geometry the default 52-subcarrier grid and
    default reference sequences are assumed.
    """
    data = Path(path).read_bytes()
    header = _parse_header(data)
    grid = grid or SubcarrierGrid()
    if grid.K != header.K:
        raise CaptureFormatError(f"capture has K = {header.K}, grid has K = {grid.K}", HEADER_OFFSETS['K'])
    if layout is None:
        layout = FrameLayout(n_ltf=header.n_ltf, n_df=header.n_df)
    if (layout.n_ltf, layout.n_df) != (header.n_ltf, header.n_df):
        raise CaptureFormatError(
            f"capture has N_L = {header.n_ltf}, N_D = {header.n_df}; layout expects {layout.n_ltf}, {layout.n_df}",
            HEADER_OFFSETS['n_ltf'])
    layout.check_grid(grid)
    records = _read_records(data, header)
    logger.debug("Read %d packets from %s", header.count, path)
    return Capture(header=header, grid=grid, layout=layout, records=records)


def write_features(path: Union[str, Path], features: FeatureSet) -> Path:
    """CSV with header label,kind,f1..fK and 17 significant digits per value."""
    df = pd.DataFrame(features.values, columns=[f"f{i + 1}" for i in range(features.K)])
    df.insert(0, 'kind', features.kind.value)
    df.insert(0, 'label', features.labels)
    with atomic_write(path, 'w') as handle:
        df.to_csv(handle, index=False, float_format='%.17g')
    return Path(path)


def read_features(path: Union[str, Path]) -> FeatureSet:
    try:
        df = pd.read_csv(path, float_precision='round_trip')
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise FeatureFormatError(f"{path}: {e}") from e
    columns = list(df.columns)
    K = len(columns) - 2
    if K < 1 or columns[:2] != ['label', 'kind'] or columns[2:] != [f"f{i + 1}" for i in range(K)]:
        raise FeatureFormatError(f"{path}: header must be label,kind,f1..fK, got {','.join(columns)}")
    if df.empty:
        raise FeatureFormatError(f"{path}: no feature rows")
    kinds = df['kind'].unique()
    if len(kinds) != 1:
        raise FeatureFormatError(f"{path}: mixed feature kinds {sorted(map(str, kinds))}")
    try:
        kind = FeatureKind.parse(kinds[0])
    except RejectedInputError as e:
        raise FeatureFormatError(f"{path}: {e}") from e
    values = df[columns[2:]].apply(pd.to_numeric, errors='coerce').to_numpy(dtype=float)
    labels = pd.to_numeric(df['label'], errors='coerce')
    bad = np.flatnonzero(~np.isfinite(values).all(axis=1) | labels.isna().to_numpy())
    if bad.size:
        raise FeatureFormatError(f"{path}: row {int(bad[0]) + 2} has a missing or non-numeric value")
    return FeatureSet(kind=kind, labels=labels.to_numpy(dtype=int), values=values)


def append_table(path: Union[str, Path], rows: pd.DataFrame, columns: List[str]) -> Path:
    """Append rows to a CSV table, creating it with a header on first use."""
    rows = rows[columns]
    target = Path(path)
    if target.exists():
        try:
            existing = pd.read_csv(target, float_precision='round_trip')
        except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
            raise FeatureFormatError(f"{path}: {e}") from e
        if list(existing.columns) != columns:
            raise FeatureFormatError(f"{path}: expected columns {columns}, found {list(existing.columns)}")
        rows = pd.concat([existing, rows], ignore_index=True)
    with atomic_write(target, 'w') as handle:
        rows.to_csv(handle, index=False, float_format='%.10g')
    return target


def append_results(path: Union[str, Path], rows: pd.DataFrame) -> Path:
    return append_table(path, rows, RESULT_COLUMNS)


def runs_path(results_path: Union[str, Path]) -> Path:
    """Per-run companion file of a results table."""
    results_path = Path(results_path)
    return results_path.with_name(results_path.stem + '.runs.csv')


def append_runs(results_path: Union[str, Path], rows: pd.DataFrame) -> Path:
    return append_table(runs_path(results_path), rows, RUN_COLUMNS)


def write_manifest(path: Union[str, Path], manifest: Dict[str, Any]) -> Path:
    with atomic_write(path, 'w') as handle:
        json.dump(manifest, handle, indent=2, sort_keys=True)
        handle.write('\n')
    return Path(path)
