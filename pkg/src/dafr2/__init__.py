"""Domain adaptation via BN-statistics alignment, feature distillation and
hypothesis transfer, plus the analysis battery used to study it."""

__version__ = "0.1.0"
