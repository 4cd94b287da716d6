"""Feature-hashing text encoder."""
import hashlib

import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from streamrisk.text import HashingTextEncoder, hash_bucket, tokenize


def test_deterministic():
    enc = HashingTextEncoder(32)
    text = "limited slots hurry contact assistant"
    assert np.array_equal(enc(text), enc(text))


def test_empty_string_is_zero_vector():
    enc = HashingTextEncoder(32)
    assert not enc("").any()


def test_unit_norm_unless_zero():
    enc = HashingTextEncoder(32)
    assert abs(np.linalg.norm(enc("hello world")) - 1.0) < 1e-6


def test_disjoint_tokens_orthogonal_without_collisions():
    d = 512
    enc = HashingTextEncoder(d)
    a, b = "alpha beta", "gamma delta"
    buckets_a = {hash_bucket(t, d) for t in tokenize(a)}
    buckets_b = {hash_bucket(t, d) for t in tokenize(b)}
    assert not buckets_a & buckets_b, "fixture collided; pick other tokens"
    assert float(enc(a) @ enc(b)) == 0.0


def test_buckets_match_independent_hash_oracle():
    d = 64
    enc = HashingTextEncoder(d)
    text = "hurry hurry limited offer today"
    vec = enc(text)

    counts = np.zeros(d)
    for token in text.lower().split():
        digest = hashlib.blake2b(token.encode(), digest_size=8).digest()
        counts[int.from_bytes(digest, "little") % d] += 1
    counts /= np.linalg.norm(counts)
    np.testing.assert_allclose(vec, counts, atol=1e-7)


@given(st.text(max_size=80))
def test_never_produces_non_finite(text):
    enc = HashingTextEncoder(16)
    vec = enc(text)
    assert np.all(np.isfinite(vec))
    norm = np.linalg.norm(vec)
    assert norm == 0.0 or abs(norm - 1.0) < 1e-5
