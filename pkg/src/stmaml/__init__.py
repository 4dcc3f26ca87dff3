"""Meta-learning with task-tailored initializations on a small numpy autodiff core."""

from .engine import TrainingConfig, init_maml, init_stmaml, maml_train_step, meta_train_step
from .estimator import MAMLRegressor, STMAMLRegressor
from .tasks import EpisodeConfig, Task

__all__ = [
    "EpisodeConfig",
    "MAMLRegressor",
    "STMAMLRegressor",
    "Task",
    "TrainingConfig",
    "init_maml",
    "init_stmaml",
    "maml_train_step",
    "meta_train_step",
]
__version__ = "0.1.0"
