"""Lightweight speech emotion recognition student trained by distilling
speech and facial-expression teachers."""

__version__ = "0.1.0"

from .model import forward, init_student, param_count  # noqa: E402
from .train import TrainConfig, evaluate, run_protocol, train  # noqa: E402

__all__ = ["TrainConfig", "evaluate", "forward", "init_student", "param_count", "run_protocol",
           "train", "__version__"]
