"""Knowledge distillation through the intra- and inter-stage embedding of a teacher's feature maps."""

from .config import ConfigError, TrainConfig, load_config
from .harness import build_data, evaluate, load_frame, train_mpnn, train_student, train_teacher

__all__ = ["ConfigError", "TrainConfig", "build_data", "evaluate", "load_config", "load_frame",
           "train_mpnn", "train_student", "train_teacher"]
__version__ = "0.1.0"
