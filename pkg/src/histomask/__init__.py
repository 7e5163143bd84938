"""histomask: masked pretraining and fine-tuning of transformers over
whole-slide patch-feature grids, with survival and classification heads,
MIL baselines, and attention-rollout interpretability.
"""

__version__ = "0.1.0"
