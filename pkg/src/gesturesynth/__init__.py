"""Desk-scale co-speech gesture synthesis.

Quantized latent spaces for gesture and audio windows, a hybrid
recurrent/attention sequence model, an autoregressive temporal aligner,
adversarial training with a divergence penalty, and the evaluation
metrics to score the result — all on a float64 autodiff substrate small
enough to verify against finite differences.
"""

from .autodiff import Tensor, grad_check, gradients, huber  # noqa: F401
from .config import RunConfig, config_from_dict, load_run_config  # noqa: F401

__version__ = "0.1.0"
