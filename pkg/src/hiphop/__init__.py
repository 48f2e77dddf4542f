"""Session-based recommendation with intra-session GNNs, intent-guided
inter-session similarity learning, contrastive training, and a pluggable
item-semantic embedding module."""

__version__ = "0.1.0"

from .data import DatasetStats, ItemCatalog, Session  # noqa: F401
from .model import HipHop, ModelConfig  # noqa: F401
from .training import TrainConfig  # noqa: F401
from .evaluation import Metrics  # noqa: F401
