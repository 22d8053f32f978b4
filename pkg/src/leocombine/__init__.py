"""Blind coherent combining of repeated LoRa broadcasts from a LEO pass."""

from __future__ import annotations

from .errors import (AlignmentError, DomainError, InsufficientEvidenceError, LeoCombineError,
                     NoPacketError, PipelineError, TruncationError)
from .phy import IqSignal, LoraConfig, demodulate, make_chirp, modulate_packet, symbol_error_rate

__all__ = [
    "AlignmentError", "DomainError", "InsufficientEvidenceError", "IqSignal", "LeoCombineError",
    "LoraConfig", "NoPacketError", "PipelineError", "TruncationError", "demodulate", "make_chirp",
    "modulate_packet", "symbol_error_rate",
]
