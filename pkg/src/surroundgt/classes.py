"""The 25 semantic classes, their display colours and the instance-bearing subset."""

from __future__ import annotations

import json
from importlib import resources

import numpy as np

_DOC = json.loads(resources.files("surroundgt").joinpath("data/palette_v1.json").read_text())

PALETTE_VERSION: int = _DOC["version"]
CLASS_NAMES: tuple[str, ...] = tuple(c["name"] for c in _DOC["classes"])
CLASS_IDS: dict[str, int] = {c["name"]: c["id"] for c in _DOC["classes"]}
PALETTE = np.array([c["color"] for c in _DOC["classes"]], dtype=np.uint8)
NUM_CLASSES = len(CLASS_NAMES)

UNLABELED = CLASS_IDS["unlabeled"]
PEDESTRIAN = CLASS_IDS["pedestrian"]
ROAD_LINE = CLASS_IDS["road line"]
ROAD = CLASS_IDS["road"]
SIDEWALK = CLASS_IDS["sidewalk"]
FOUR_WHEELER = CLASS_IDS["four-wheeler vehicle"]
SKY = CLASS_IDS["sky"]
TWO_WHEELER = CLASS_IDS["two-wheeler vehicle"]
EGO_VEHICLE = CLASS_IDS["ego vehicle"]

INSTANCE_CLASSES: frozenset[int] = frozenset(CLASS_IDS[n] for n in _DOC["instance_classes"])

# Out-of-coverage marker in 8-bit label rasters; not a class.
INVALID_LABEL = 255

WEATHER_PRESETS = (
    "ClearNoon",
    "ClearSunset",
    "CloudyNoon",
    "CloudySunset",
    "Default",
    "WetCloudyNoon",
    "WetCloudySunset",
    "WetNoon",
    "WetSunset",
)


def colorize_labels(labels: np.ndarray) -> np.ndarray:
    """RGB rendering of a label raster; unknown ids and the sentinel are black."""
    lab = np.asarray(labels)
    out = np.zeros(lab.shape + (3,), dtype=np.uint8)
    known = lab < NUM_CLASSES
    out[known] = PALETTE[lab[known]]
    return out
