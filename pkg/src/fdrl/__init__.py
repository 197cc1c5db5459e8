"""Feature-disentangled multimodal emotion recognition on a small numpy autodiff core."""

from .config import ABLATIONS, TrainConfig, quickstart_config
from .datasets import FeatureDataset, SynthSpec, generate_synthetic, load_features, write_features
from .errors import (ConfigError, DimensionError, FDRLError, HeaderError, LabelRangeError,
                     NumericalError, ValidationError)
from .model import FDRLModel, load_model, save_checkpoint
from .trainer import evaluate, probe_disentanglement, train

__version__ = "0.1.0"
