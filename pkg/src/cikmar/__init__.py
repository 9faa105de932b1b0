"""CIKMar: prompt-ensemble teacher-response generation with dual-encoder
reranking and evaluation metrics for educational dialogue."""

__version__ = "0.1.0"
