"""Self-verifying LLM extraction pipeline with an offline evaluation harness."""

from __future__ import annotations

__version__ = "0.1.0"
