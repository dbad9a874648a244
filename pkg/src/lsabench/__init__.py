"""lsa-bench: spectrum access allocation, repair, reward and GRPO toolkit."""

__all__ = ["__version__"]
__version__ = "0.1.0"
