"""One-shot federated learning by progressive block-wise fusion, with baselines."""
__version__ = "0.1.0"
