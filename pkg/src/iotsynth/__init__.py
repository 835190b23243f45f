"""Synthetic IoT traffic metadata: mining, modelling, capture synthesis and adversarial evaluation."""

from .errors import (CaptureParseError, ConfigError, DataError, EmptyCaptureError, InvalidTokenError, IotSynthError,
                     LengthMismatchError, ModeCollapseError, StageError, VocabMismatchError)
from .ingest import Direction, PacketRecord, TrafficWindow, ingest_capture, make_windows, parse_capture

__version__ = "0.1.0"

__all__ = [
    "CaptureParseError", "ConfigError", "DataError", "Direction", "EmptyCaptureError", "InvalidTokenError",
    "IotSynthError", "LengthMismatchError", "ModeCollapseError", "PacketRecord", "StageError", "TrafficWindow",
    "VocabMismatchError", "ingest_capture", "make_windows", "parse_capture",
]
