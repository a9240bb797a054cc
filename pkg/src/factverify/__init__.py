"""Claim verification engine: BM25 evidence retrieval, incremental evidence
injection, reward-guided reflection decoding and the evaluation metric suite."""

__version__ = "0.1.0"

LABELS = ("SUP", "REF", "NEI")
