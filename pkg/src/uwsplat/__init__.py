"""Underwater 3D Gaussian splatting with a learned per-Gaussian medium."""
from .config import TrainConfig, load_config
from .scene_io import Checkpoint, SceneBundle, load_checkpoint, load_colmap, save_checkpoint
from .train import Trainer, evaluate, render_view, train

__all__ = ["TrainConfig", "load_config", "Checkpoint", "SceneBundle", "load_checkpoint",
           "load_colmap", "save_checkpoint", "Trainer", "evaluate", "render_view", "train"]
__version__ = "0.1.0"
