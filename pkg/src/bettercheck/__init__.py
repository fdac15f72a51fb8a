"""Guardrail pipeline and evaluation harness for VLM captions of driving imagery."""

__version__ = "0.1.0"
