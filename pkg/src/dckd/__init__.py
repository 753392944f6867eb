"""Dynamic contrastive knowledge distillation for toy image restoration."""

__version__ = "0.1.0"
