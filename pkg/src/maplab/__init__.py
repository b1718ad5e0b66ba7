"""Sample-to-target mapping strategies, decoupled distillation losses and study drivers."""
__version__ = "0.1.0"
