"""Memory-centric embodied question answering in a deterministic gridworld.

An agent explores a simulated indoor scene to answer a natural-language
question, keeping a hierarchical multi-modal memory (global map annotations
plus per-step local entries) that feeds the planner, the stop criterion and
the answering module.
"""

from .config import HyperParams
from .geometry import CameraModel, Detection, Pose
from .memory import (GlobalMemoryEntry, LocalMemoryEntry, MemoryStore,
                     SceneCaption, VectorRecord, build_local_entry)
from .questions import EntitySpec, Question, load_questions
from .simulator import (Observation, Scene, load_bundled_scene, load_scene,
                        parse_scene, save_scene)

__version__ = "0.1.0"

__all__ = [
    "CameraModel", "Detection", "EntitySpec", "GlobalMemoryEntry",
    "HyperParams", "LocalMemoryEntry", "MemoryStore", "Observation", "Pose",
    "Question", "Scene", "SceneCaption", "VectorRecord", "build_local_entry",
    "load_bundled_scene", "load_questions", "load_scene", "parse_scene",
    "save_scene",
]
