"""Hybrid intent detection: fast embedding head, uncertainty-routed LLM
fallback, and representation-based out-of-scope screening."""

__version__ = "0.1.0"
