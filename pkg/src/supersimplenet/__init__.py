"""Surface anomaly detection with a frozen backbone, latent-space synthetic anomalies
and separate segmentation and classification heads."""
from .config import RunConfig, load_config
from .engine import evaluate, load_checkpoint, train
from .network import SuperSimpleNet

__all__ = ["RunConfig", "SuperSimpleNet", "evaluate", "load_checkpoint", "load_config", "train"]
__version__ = "0.1.0"
