import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metastyle.errors import BankFormatError, DataError, DimensionError
from metastyle.style_bank import (
    StyleBank,
    StyleMiss,
    deserialize,
    load_style_bank,
    read_bank,
    save_style_bank,
    serialize,
    write_bank,
)
from metastyle.style_stats import StyleStats


def test_first_insert_and_roundtrip():
    s = StyleStats([1.0, 2.0], [0.5, 0.25], 4)
    bank = save_style_bank(StyleBank(), 0, s)
    assert load_style_bank(bank, 0) == s


def test_identical_saves_double_count():
    s = StyleStats([1.0, 2.0], [0.5, 0.25], 4)
    bank = save_style_bank(save_style_bank(StyleBank(), 3, s), 3, s)
    got = load_style_bank(bank, 3)
    np.testing.assert_array_equal(got.mean, s.mean)
    np.testing.assert_array_equal(got.std, s.std)
    assert got.count == 8


def test_weighted_average_merge():
    bank = save_style_bank(StyleBank(), 1, StyleStats([2.0], [1.0], 1))
    bank = save_style_bank(bank, 1, StyleStats([4.0], [3.0], 1))
    got = load_style_bank(bank, 1)
    assert got.mean.tolist() == [3.0] and got.std.tolist() == [2.0] and got.count == 2
    # unequal counts: (3*1 + 1*5) / 4
    bank = save_style_bank(save_style_bank(StyleBank(), 0, StyleStats([1.0], [1.0], 3)), 0, StyleStats([5.0], [1.0], 1))
    assert load_style_bank(bank, 0).mean.tolist() == [2.0]


def test_miss_is_explicit():
    with pytest.raises(StyleMiss):
        load_style_bank(StyleBank(), 7)
    assert 7 not in StyleBank()


def test_channel_mismatch_rejected():
    bank = save_style_bank(StyleBank(), 0, StyleStats([1.0], [1.0], 1))
    with pytest.raises(DimensionError):
        save_style_bank(bank, 1, StyleStats([1.0, 2.0], [1.0, 1.0], 1))


def test_non_finite_never_stored():
    with pytest.raises(DataError):
        StyleStats([float("nan")], [1.0], 1)
    with pytest.raises(DataError):
        StyleStats([0.0], [float("inf")], 1)


def test_save_does_not_mutate_input():
    bank = StyleBank()
    save_style_bank(bank, 0, StyleStats([1.0], [1.0], 1))
    assert len(bank) == 0


def test_order_insensitive_accumulation(rng):
    items = [StyleStats(rng.normal(size=3), rng.uniform(0, 2, size=3), int(rng.integers(1, 9))) for _ in range(1000)]
    fwd, rev = StyleBank(), StyleBank()
    for s in items:
        fwd = save_style_bank(fwd, 0, s)
    for s in reversed(items):
        rev = save_style_bank(rev, 0, s)
    a, b = load_style_bank(fwd, 0), load_style_bank(rev, 0)
    assert a.count == b.count
    np.testing.assert_allclose(a.mean, b.mean, rtol=0, atol=1e-10)
    np.testing.assert_allclose(a.std, b.std, rtol=0, atol=1e-10)


def test_empty_bank_roundtrip():
    assert deserialize(serialize(StyleBank())) == StyleBank()


def test_three_domain_roundtrip_bitwise(rng):
    bank = StyleBank()
    for d in (0, 5, 2):
        bank = save_style_bank(bank, d, StyleStats(rng.normal(size=4), rng.uniform(0, 1, size=4), d + 1))
    back = deserialize(serialize(bank))
    assert back == bank
    for d in bank.entries:
        assert back.entries[d].mean.tobytes() == bank.entries[d].mean.tobytes()


def test_header_layout():
    blob = serialize(save_style_bank(StyleBank(), 9, StyleStats([1.5], [0.5], 2)))
    assert blob[:4] == b"MSBK"
    assert struct.unpack_from("<III", blob, 4) == (1, 1, 9)
    assert struct.unpack_from("<IQ", blob, 16) == (1, 2)
    assert struct.unpack_from("<dd", blob, 28) == (1.5, 0.5)
    assert len(blob) == 44


@pytest.mark.parametrize(
    "mutate",
    [
        lambda b: b"XXXX" + b[4:],
        lambda b: b[:4] + struct.pack("<I", 99) + b[8:],
        lambda b: b[:10],
        lambda b: b[:-3],
        lambda b: b + b"\x00",
        lambda b: b[:28] + struct.pack("<d", float("nan")) + b[36:],
    ],
    ids=["magic", "version", "truncated-header", "truncated-body", "trailing", "nan"],
)
def test_corrupt_streams(mutate):
    blob = serialize(save_style_bank(StyleBank(), 0, StyleStats([1.0], [1.0], 1)))
    with pytest.raises(BankFormatError):
        deserialize(mutate(blob))


banks = st.integers(1, 5).flatmap(
    lambda c: st.dictionaries(
        st.integers(0, 2**32 - 1),
        st.tuples(
            st.lists(st.floats(allow_nan=False, allow_infinity=False), min_size=c, max_size=c),
            st.lists(st.floats(0, 1e300), min_size=c, max_size=c),
            st.integers(1, 2**63),
        ),
        max_size=6,
    )
)


@settings(max_examples=60)
@given(banks)
def test_roundtrip_property(entries):
    bank = StyleBank({k: StyleStats(m, s, n) for k, (m, s, n) in entries.items()})
    assert deserialize(serialize(bank)) == bank


def test_file_write_is_atomic_and_readable(tmp_path, rng):
    bank = save_style_bank(StyleBank(), 0, StyleStats(rng.normal(size=2), [1.0, 2.0], 3))
    path = tmp_path / "run" / "bank.msbk"
    write_bank(bank, path)
    assert read_bank(path) == bank
    assert [p.name for p in path.parent.iterdir()] == ["bank.msbk"]
