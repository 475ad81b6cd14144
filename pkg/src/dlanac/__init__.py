"""Frame-prediction video anomaly detector with adaptive prototype clustering.

Modules, from the bottom up:

- ``diffcore``: array ops with hand-written backward passes
- ``autoencoder``: U-Net style next-frame predictor
- ``ac``: self-organizing map that estimates the cluster count and centers
- ``dlan``: learnable local aggregation producing normal-data prototypes
- ``losses``, ``model``: training objective and one forward/backward step
- ``scoring``: PSNR, anomaly scores, frame-level AUC
- ``data``: synthetic videos, PGM frames, manifests, sliding windows
- ``training``, ``checkpoint``, ``optim``, ``cli``: the two-stage pipeline
"""
from .diffcore import ConfigError, DimensionError, EvaluationError

__version__ = "0.1.0"

__all__ = ["ConfigError", "DimensionError", "EvaluationError", "__version__"]
