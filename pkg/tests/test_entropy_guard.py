import io
import math
import random
import zlib
from collections import Counter
from importlib import resources

import pytest

from chronogate.entropy_guard import classify_stream, shannon_entropy


def english(size=65536):
    text = resources.files("chronogate").joinpath("data/english_sample.txt").read_bytes()
    return (text * (size // len(text) + 1))[:size]


def naive_entropy(data):
    """Independent oracle: Counter plus math.log2."""
    n = len(data)
    return -sum(c / n * math.log2(c / n) for c in Counter(data).values()) if n else 0.0


def test_uniform_bytes_eight_bits():
    assert shannon_entropy(bytes(range(256)) * 16) == 8.0


def test_constant_zero():
    assert shannon_entropy(b"\x00" * 1000) == 0.0


def test_two_symbols_one_bit():
    assert shannon_entropy(b"abababab") == 1.0


def test_empty():
    assert shannon_entropy(b"") == 0.0
    report = classify_stream(b"")
    assert report.windows == [] and report.overall.bits_per_byte == 0.0 and not report.overall.flagged


def test_random_stream_flags_every_window():
    data = random.Random(2017).randbytes(65536)
    report = classify_stream(data)
    assert len(report.windows) == 16
    assert all(w.flagged for w in report.windows)
    assert report.overall.bits_per_byte >= 7.9
    assert report.overall.bits_per_byte == pytest.approx(7.9975, abs=1e-3)


def test_english_text_flags_nothing():
    report = classify_stream(english())
    assert report.flagged_windows == 0
    assert report.overall.bits_per_byte <= 5.5
    assert report.overall.bits_per_byte == pytest.approx(4.2838, abs=1e-3)


def test_compressed_text_is_a_false_positive():
    rng = random.Random(7)
    words = english(730).decode().split()
    blob = zlib.compress(" ".join(rng.choice(words) for _ in range(60000)).encode(), 9)
    report = classify_stream(blob)
    assert report.overall.flagged
    assert report.flagged_windows == len(report.windows) - (report.windows[-1].length < 2048)


def test_agrees_with_naive_oracle():
    rng = random.Random(1)
    for _ in range(50):
        n = rng.randint(1, 3000)
        alphabet = rng.randint(1, 256)
        data = bytes(rng.randrange(alphabet) for _ in range(n))
        assert abs(shannon_entropy(data) - naive_entropy(data)) < 1e-12


def test_permutation_invariant():
    data = bytearray(random.Random(4).randbytes(5000)[:2500] + b"a" * 2500)
    before = shannon_entropy(bytes(data))
    random.Random(9).shuffle(data)
    assert shannon_entropy(bytes(data)) == pytest.approx(before, abs=1e-12)


def test_short_tail_never_flags():
    data = random.Random(3).randbytes(4096 + 100)
    report = classify_stream(data)
    assert [w.length for w in report.windows] == [4096, 100]
    assert report.windows[0].flagged and not report.windows[1].flagged


def test_window_offsets_and_file_input():
    data = english(10000)
    report = classify_stream(io.BytesIO(data), window=1024)
    assert [w.offset for w in report.windows] == list(range(0, 10000, 1024))
    assert sum(w.length for w in report.windows) == report.overall.length == 10000
    assert report.overall.bits_per_byte == pytest.approx(naive_entropy(data), abs=1e-12)


def test_threshold_is_inclusive():
    data = bytes(range(256)) * 16
    assert classify_stream(data, threshold=8.0).overall.flagged


def test_window_too_small():
    with pytest.raises(ValueError):
        classify_stream(b"x", window=255)
