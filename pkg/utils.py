"""
Utility functions for the EVS localization tools.

Contains helpers for batching, number formatting, atomic file output,
phase wrapping and reproducible random streams.
"""

import os
import tempfile
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Iterator, Sequence, Union

import numpy as np


SeedLike = Union[int, Sequence[int], np.random.Generator]


def chunks(lst: Sequence[Any], n: int) -> Iterator[Sequence[Any]]:
    """Split a sequence into chunks of size n.

    Args:
        lst: Sequence to split
        n: Size of each chunk

    Returns:
        Iterator over chunks (the last one may be shorter)
    """
    for i in range(0, len(lst), n):
        yield lst[i:i + n]


def format_large_number(num: float) -> str:
    """Format large numbers with appropriate suffixes (K, M, B).

    Args:
        num: Number to format

    Returns:
        Formatted string
    """
    if num >= 1_000_000_000:
        return f"{num/1_000_000_000:.1f}B"
    elif num >= 1_000_000:
        return f"{num/1_000_000:.1f}M"
    elif num >= 1_000:
        return f"{num/1_000:.1f}K"
    else:
        return f"{num:,.0f}"


def angle(values: Any) -> np.ndarray:
    """np.angle with the result folded into (-pi, pi]."""
    phase = np.angle(values)
    return np.where(phase <= -np.pi, phase + 2 * np.pi, phase)


def make_rng(seed: SeedLike) -> np.random.Generator:
    """Return a Generator for an int seed, a seed key sequence or an existing Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, (int, np.integer)):
        return np.random.default_rng(int(seed))
    return np.random.default_rng([int(s) for s in seed])


@contextmanager
def atomic_write(path: Union[str, Path], mode: str = 'wb'):
    """Open a temporary file next to ``path`` and rename it into place on success."""
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{target.name}.", dir=target.parent)
    try:
        encoding = None if 'b' in mode else 'utf-8'
        newline = None if 'b' in mode else ''
        with os.fdopen(fd, mode, encoding=encoding, newline=newline) as handle:
            yield handle
        os.replace(tmp_name, target)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise

