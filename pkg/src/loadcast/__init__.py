"""Global-to-local probabilistic load forecasting.

One backbone is pre-trained on all customer groups pooled together; each
group then gets a compact low-rank output-head adapter fine-tuned with the
backbone frozen, and inference routes every request through its group's
adapter.
"""

__version__ = "0.1.0"

from .forecaster import DistributionalForecast, Forecaster, ModelConfig, elbo_loss, forecast
from .lora import LoraAdapter, init_adapter, merge
from .numerics import GradientOptimizer, Tensor, no_grad
from .pipeline import ForecasterFamily, TrainConfig, finetune_group, pretrain

__all__ = [
    "DistributionalForecast",
    "Forecaster",
    "ForecasterFamily",
    "GradientOptimizer",
    "LoraAdapter",
    "ModelConfig",
    "Tensor",
    "TrainConfig",
    "elbo_loss",
    "finetune_group",
    "forecast",
    "init_adapter",
    "merge",
    "no_grad",
    "pretrain",
]
