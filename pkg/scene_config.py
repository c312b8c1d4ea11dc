"""
Scene and dataset configuration module.

Handles loading of room scenes and dataset manifests from JSON files.
"""

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

from channel_sim import RfoConfig, Scene
from errors import RejectedInputError
from ofdm_core import FrameLayout, SubcarrierGrid

logger = logging.getLogger(__name__)

MANIFEST_NAME = 'manifest.json'


def load_local_json(path: Union[str, Path]) -> Dict[str, Any]:
    """Load and parse a local JSON file.

    Args:
        path: Path to the JSON file

    Returns:
        Parsed JSON data as dictionary
    """
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except (FileNotFoundError, json.JSONDecodeError) as e:
        raise RejectedInputError(f"Error loading {path}: {e}") from e
    if not isinstance(data, dict):
        raise RejectedInputError(f"Error loading {path}: top level must be an object")
    return data


def load_scene(path: Optional[Union[str, Path]] = None) -> Scene:
    """Scene from a JSON file whose keys mirror the Scene fields; the built-in room when no path is given."""
    if path is None:
        logger.info("No scene file given, using the built-in conference room")
        return Scene()
    try:
        return Scene.from_dict(load_local_json(path))
    except TypeError as e:
        raise RejectedInputError(f"Error loading {path}: {e}") from e


@dataclass(frozen=True)
class DatasetManifest:
    grid: SubcarrierGrid
    layout: FrameLayout
    scene: Scene
    rfo: RfoConfig
    snr_db: float
    order: int
    seed: int
    train_per_label: int
    test_per_label: int
    precision: str = 'single'

    @property
    def n_labels(self) -> int:
        return self.scene.n_labels


def load_manifest(path: Union[str, Path]) -> DatasetManifest:
    """Read ``manifest.json`` (or the manifest inside a dataset directory)."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    data = load_local_json(path)
    try:
        snr = data['snr_db']
        return DatasetManifest(
            grid=SubcarrierGrid.from_dict(data['grid']),
            layout=FrameLayout.from_dict(data['layout']),
            scene=Scene.from_dict(data['scene']),
            rfo=RfoConfig(**data.get('rfo', {})),
            snr_db=math.inf if snr == 'inf' else float(snr),
            order=int(data['order']),
            seed=int(data['seed']),
            train_per_label=int(data['train_per_label']),
            test_per_label=int(data['test_per_label']),
            precision=data.get('precision', 'single'),
        )
    except (KeyError, TypeError) as e:
        raise RejectedInputError(f"Error loading {path}: missing or invalid field {e}") from e


def geometry_for(capture_path: Union[str, Path]) -> Tuple[Optional[SubcarrierGrid], Optional[FrameLayout]]:
    """Grid and layout from the manifest next to a capture, (None, None) if there is none."""
    manifest_path = Path(capture_path).parent / MANIFEST_NAME
    if not manifest_path.exists():
        return None, None
    manifest = load_manifest(manifest_path)
    return manifest.grid, manifest.layout
