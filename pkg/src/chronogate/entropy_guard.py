"""
Byte-level Shannon entropy and high-entropy write flagging.

Encrypted output sits close to 8 bits per byte, but so does compressed
data: a flag here is a prompt to look, not proof of ransomware.
"""

from __future__ import annotations

import io
from dataclasses import asdict, dataclass
from typing import BinaryIO, Iterator, Union

import numpy as np

DEFAULT_THRESHOLD = 7.0
DEFAULT_WINDOW = 4096
MIN_WINDOW = 256


@dataclass(frozen=True)
class EntropyReport:
    offset: int
    length: int
    bits_per_byte: float
    threshold: float
    flagged: bool

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class StreamReport:
    windows: list[EntropyReport]
    overall: EntropyReport

    @property
    def flagged_windows(self) -> int:
        return sum(w.flagged for w in self.windows)


def entropy_from_counts(counts: np.ndarray) -> float:
    total = counts.sum()
    if total == 0:
        return 0.0
    p = counts[counts > 0] / total
    h = float(-(p * np.log2(p)).sum())
    return min(8.0, max(0.0, h))


def byte_histogram(data: bytes) -> np.ndarray:
    return np.bincount(np.frombuffer(data, dtype=np.uint8), minlength=256)


def shannon_entropy(data: bytes) -> float:
    """Bits per byte over the byte-value histogram; 0.0 for empty input."""
    return entropy_from_counts(byte_histogram(bytes(data)))


def _chunks(source: Union[bytes, BinaryIO], size: int) -> Iterator[bytes]:
    stream = io.BytesIO(source) if isinstance(source, (bytes, bytearray, memoryview)) else source
    while True:
        chunk = stream.read(size)
        if not chunk:
            return
        # File objects may return short reads before EOF.
        while len(chunk) < size:
            more = stream.read(size - len(chunk))
            if not more:
                break
            chunk += more
        yield chunk


def classify_stream(
    source: Union[bytes, BinaryIO],
    threshold: float = DEFAULT_THRESHOLD,
    window: int = DEFAULT_WINDOW,
) -> StreamReport:
    """Entropy per tumbling window plus an overall report.

    A window (or the whole stream) is flagged when its entropy reaches
    ``threshold`` and it holds at least ``window // 2`` bytes, so a short
    trailing window cannot trip the flag on its own.
    """
    if window < MIN_WINDOW:
        raise ValueError(f"window must be at least {MIN_WINDOW} bytes")
    min_length = window // 2
    total = np.zeros(256, dtype=np.int64)
    windows = []
    offset = 0
    for chunk in _chunks(source, window):
        counts = byte_histogram(chunk)
        total += counts
        h = entropy_from_counts(counts)
        windows.append(EntropyReport(offset, len(chunk), h, threshold, h >= threshold and len(chunk) >= min_length))
        offset += len(chunk)
    h = entropy_from_counts(total)
    overall = EntropyReport(0, offset, h, threshold, h >= threshold and offset >= min_length)
    return StreamReport(windows, overall)
