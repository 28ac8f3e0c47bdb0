"""ecg: unified embed-compress-generate model for budget-constrained RAG."""

__version__ = "0.1.0"
