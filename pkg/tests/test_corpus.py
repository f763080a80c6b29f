import math

import numpy as np
import pytest

from ssmsens import metrics as M
from ssmsens.corpus import TokenStream, iter_chunks, load_text, synth_stream


def test_load_text_bytes(tmp_path):
    p = tmp_path / "ab.txt"
    p.write_bytes(b"ab")
    s = load_text(p)
    assert s.tokens.tolist() == [97, 98] and s.vocab_size == 256
    assert load_text(p).source_digest == s.source_digest


def test_load_text_empty(tmp_path):
    p = tmp_path / "empty.txt"
    p.write_bytes(b"")
    with pytest.raises(ValueError):
        load_text(p)


def test_synth_stream_deterministic():
    a, b = synth_stream(3, 500, 40), synth_stream(3, 500, 40)
    assert np.array_equal(a.tokens, b.tokens) and a.source_digest == b.source_digest
    assert not np.array_equal(a.tokens, synth_stream(4, 500, 40).tokens)


def test_synth_stream_range_and_histogram():
    n, v = 100_000, 256
    s = synth_stream(0, n, v)
    assert s.tokens.max() < v and s.tokens.min() >= 0
    counts = np.bincount(s.tokens, minlength=v)
    mean = n / v
    sigma = math.sqrt(n * (1 / v) * (1 - 1 / v))
    assert np.all(np.abs(counts - mean) <= 5 * sigma)


def test_stream_validation():
    with pytest.raises(ValueError):
        TokenStream(np.array([1]), 4, "x")
    with pytest.raises(ValueError):
        TokenStream(np.array([1, 4]), 4, "x")


@pytest.mark.parametrize("length,chunk", [(2, 128), (10, 3), (129, 128), (300, 128), (17, 1)])
def test_chunks_cover_stream(length, chunk):
    s = synth_stream(1, length, 16)
    chunks = list(iter_chunks(s, chunk))
    assert np.array_equal(np.concatenate([c.inputs for c in chunks]), s.tokens[:-1])
    assert np.array_equal(np.concatenate([c.targets for c in chunks]), s.tokens[1:])
    assert all(1 <= len(c.inputs) <= chunk and len(c.inputs) == len(c.targets) for c in chunks)


def test_chunked_ce_equals_whole_ce(rng):
    s = synth_stream(2, 301, 16)
    logits = rng.standard_normal((300, 16))
    whole = M.cross_entropy(logits, s.tokens[1:])
    total, off = 0.0, 0
    for c in iter_chunks(s, 64):
        n = len(c.targets)
        total += M.cross_entropy(logits[off:off + n], c.targets) * n
        off += n
    assert abs(total / off - whole) <= 1e-12
