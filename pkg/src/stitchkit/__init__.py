"""Cross-domain offline RL: two-level fragment filtering, weighted fusion, and an
advantage-conditioned decision transformer."""

from .config import ConfigError, FusionConfig
from .datamodel import Dataset, Fragment, Trajectory, Transition, load_dataset, save_dataset

__all__ = ["ConfigError", "FusionConfig", "Dataset", "Fragment", "Trajectory", "Transition",
           "load_dataset", "save_dataset"]
__version__ = "0.1.0"
