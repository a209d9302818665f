# distill-lab package
"""Progressive knowledge distillation (Pro-KD) and its baselines on dense MLPs."""

__version__ = "0.1.0"
