"""Two-stage grounded text-to-image pipeline on a synthetic shapes world."""

__version__ = "0.1.0"

from .world import SceneSpec, ObjectSpec, sample_scene, render  # noqa: F401
from .captions import (  # noqa: F401
    HierarchicalCaption,
    ground_truth_caption,
    serialize_caption,
    parse_caption,
)
from .vocab import get_vocab  # noqa: F401
