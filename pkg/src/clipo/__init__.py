"""Contrastive reward shaping for group-based RLVR on a tiny autoregressive policy.

Submodules:
    autograd     dense tensors, reverse-mode differentiation, AdamW
    tasks        synthetic modular-arithmetic tasks and the answer verifier
    policy       causal transformer policy, group sampling, checkpoints
    contrastive  pooling, head, InfoNCE / SupCon / SoftNN, shaped rewards
    objectives   group advantages, GRPO / GSPO / DAPO / GMPO surrogates, KL
    trainer      the training loop, evaluation and run checkpoints
    config       TOML experiment configuration
    selfcheck    release-gate checks
    experiments  acceptance experiments and the cached end-to-end comparison
"""

from .config import TrainConfig
from .contrastive import ContrastiveConfig, ContrastiveHead
from .errors import ClipoError
from .objectives import SurrogateConfig
from .policy import PolicyDims, SamplingConfig

__all__ = [
    "ClipoError",
    "ContrastiveConfig",
    "ContrastiveHead",
    "PolicyDims",
    "SamplingConfig",
    "SurrogateConfig",
    "TrainConfig",
]
__version__ = "0.1.0"
