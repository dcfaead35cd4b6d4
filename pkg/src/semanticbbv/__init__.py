"""Semantic basic-block vectors: block embeddings, set-invariant interval signatures and
cross-program CPI estimation against a deterministic cost-model oracle."""

__version__ = "0.1.0"
