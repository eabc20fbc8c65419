"""Desk-scale unified video stylization: condition injection, token-specific
LoRA, flow-matching training, synthetic paired data and a metric harness."""

__version__ = "0.1.0"
