import random

import pytest
from hypothesis import given, strategies as st

from aft.core import (
    CommitRecord,
    InvalidKey,
    KeyVersion,
    TransactionId,
    compare_tids,
    decode_commit_key,
    decode_data_key,
    decode_storage_key,
    encode_commit_key,
    encode_data_key,
    is_provisional,
)

A = "ab" * 16


def tid(ts, uuid=A):
    return TransactionId(ts, uuid)


def test_compare_uuid_tiebreak():
    assert compare_tids(tid(5, "aa" + "0" * 30), tid(5, "ab" + "0" * 30)) == -1


def test_compare_timestamp_dominates():
    assert compare_tids(tid(3, "f" * 32), tid(5, "0" * 32)) == -1


def test_compare_equal():
    assert compare_tids(tid(7, "c" * 32), tid(7, "c" * 32)) == 0


def test_encode_data_key_rendering():
    assert encode_data_key("k", tid(12)) == "data/k/00000000000000000012-" + A


def test_data_keys_sort_by_timestamp():
    assert encode_data_key("k", tid(9)) < encode_data_key("k", tid(10))


def test_reserved_delimiter_rejected():
    with pytest.raises(InvalidKey):
        encode_data_key("a/b", tid(1))
    with pytest.raises(ValueError):
        encode_data_key("", tid(1))


def test_encode_commit_key_rendering():
    assert encode_commit_key(tid(12)).startswith("commit/00000000000000000012-")


def test_commit_keys_sort_chronologically():
    keys = sorted(encode_commit_key(tid(t)) for t in (5, 30, 7))
    assert [decode_commit_key(k).timestamp for k in keys] == [5, 7, 30]


def test_commit_key_round_trip_fuzz():
    rng = random.Random(7)
    for _ in range(1000):
        t = tid(rng.randrange(10**15), f"{rng.getrandbits(128):032x}")
        assert decode_commit_key(encode_commit_key(t)) == t


def test_bad_uuid_rejected():
    with pytest.raises(ValueError):
        TransactionId(1, "XYZ")
    with pytest.raises(ValueError):
        TransactionId(-1, A)


def test_tid_json_and_render_round_trip():
    t = tid(42)
    assert TransactionId.from_json(t.to_json()) == t
    assert TransactionId.parse(t.render()) == t


def test_key_version_requires_key_in_cowritten():
    KeyVersion("k", tid(1), frozenset({"k", "l"}), b"v")
    with pytest.raises(ValueError):
        KeyVersion("k", tid(1), frozenset({"l"}), b"v")


def test_commit_record_nonempty_and_round_trip():
    with pytest.raises(ValueError):
        CommitRecord(tid(1), frozenset())
    rec = CommitRecord(tid(3), frozenset({"a", "b"}))
    assert CommitRecord.decode(rec.encode()) == rec


def test_provisional_keys_recognised():
    sk = encode_data_key("k", TransactionId(0, A))
    key, t = decode_data_key(sk)
    assert key == "k" and is_provisional(t)
    assert not is_provisional(tid(1))


def test_injectivity_over_many_pairs():
    rng = random.Random(11)
    seen = {}
    for _ in range(100_000):
        key = f"k{rng.randrange(50)}"
        t = tid(rng.randrange(1000), f"{rng.getrandbits(16):032x}")
        sk = encode_data_key(key, t)
        assert seen.setdefault(sk, (key, t)) == (key, t)


def test_decode_storage_key_dispatch():
    assert decode_storage_key(encode_commit_key(tid(4))) == (None, tid(4))
    assert decode_storage_key(encode_data_key("x", tid(4))) == ("x", tid(4))
    with pytest.raises(ValueError):
        decode_storage_key("other/thing")
