"""
Unit tests for rail_codec.py

Tag packing into the two 12-bit vlan ids, the 802.1Q header stack and
XOR parity recovery (checked against a plain byte-wise XOR fold).
"""

from functools import reduce

import numpy as np
import pytest

from rail_codec import (
    FRAME_OVERHEAD,
    NothingToRecoverError,
    ParityGroup,
    RailCodecError,
    RailMode,
    RailTag,
    TagPair,
    UnknownModeError,
    UnrecoverableGroupError,
    build_parity_group,
    decode_tag,
    decode_tag_array,
    encode_tag,
    encode_tag_array,
    make_parity,
    pack_tag_headers,
    recover_missing,
    tag_word,
    unpack_tag_headers,
)


# --- Fixtures ---

def xor_fold(payloads: list[bytes]) -> bytes:
    """Byte-wise XOR with zero padding, written out by hand."""
    width = max(len(p) for p in payloads)
    padded = [p + bytes(width - len(p)) for p in payloads]
    return bytes(reduce(lambda acc, b: acc ^ b, column, 0) for column in zip(*padded))


@pytest.fixture
def payloads() -> list[bytes]:
    return [b"alpha", b"bravo-charlie", b"\x00\xff\x10", b"delta"]


# --- Tests for encode_tag / decode_tag ---

def test_encode_tag_bit_layout():
    # Act
    pair = encode_tag(RailTag(mode=1, packet_id=0x1234, path_index=5))

    # Assert
    assert tag_word(RailTag(1, 0x1234, 5)) == 0x112345
    assert pair == TagPair(outer_vlan_id=0x112, inner_vlan_id=0x345)


def test_encode_tag_extremes():
    assert encode_tag(RailTag(5, 0xFFFF, 15)) == TagPair(0x5FF, 0xFFF)
    assert encode_tag(RailTag(0, 0, 0)) == TagPair(0, 0)


@pytest.mark.parametrize("mode", [0, 1, 4, 5])
def test_decode_inverts_encode(mode: int):
    tag = RailTag(mode, 40000, 9)

    assert decode_tag(encode_tag(tag)) == tag


def test_decode_rejects_unknown_mode():
    with pytest.raises(UnknownModeError) as excinfo:
        decode_tag(TagPair(0x300, 0x000))

    assert excinfo.value.raw_value == 3


def test_encode_rejects_out_of_range_fields():
    with pytest.raises(RailCodecError, match="16 bits"):
        encode_tag(RailTag(0, 0x10000, 0))
    with pytest.raises(RailCodecError, match="path index"):
        encode_tag(RailTag(0, 1, 16))
    with pytest.raises(UnknownModeError):
        encode_tag(RailTag(2, 1, 0))


def test_decode_rejects_wide_vlan_ids():
    with pytest.raises(RailCodecError, match="12 bits"):
        decode_tag(TagPair(0x1000, 0))


def test_tag_arrays_agree_with_scalar_codec():
    # Arrange
    rng = np.random.default_rng(11)
    modes = rng.choice([0, 1, 4, 5], size=200)
    ids = rng.integers(0, 0x10000, size=200)
    paths = rng.integers(0, 16, size=200)

    # Act
    outer, inner = encode_tag_array(modes, ids, paths)
    back_modes, back_ids, back_paths = decode_tag_array(outer, inner)

    # Assert
    for i in range(200):
        pair = encode_tag(RailTag(int(modes[i]), int(ids[i]), int(paths[i])))
        assert (int(outer[i]), int(inner[i])) == tuple(pair)
    assert np.array_equal(back_modes, modes)
    assert np.array_equal(back_ids, ids)
    assert np.array_equal(back_paths, paths)


def test_every_valid_tag_survives_the_codec():
    # Arrange: all 4 modes x 65,536 ids x 16 paths
    modes, ids, paths = (
        a.ravel() for a in np.meshgrid([0, 1, 4, 5], np.arange(0x10000), np.arange(16), indexing="ij")
    )

    # Act
    outer, inner = encode_tag_array(modes, ids, paths)
    back_modes, back_ids, back_paths = decode_tag_array(outer, inner)

    # Assert
    assert modes.size == 4_194_304
    assert np.array_equal(back_modes, modes)
    assert np.array_equal(back_ids, ids)
    assert np.array_equal(back_paths, paths)
    words = (outer.astype(np.uint32) << 12) | inner
    assert np.unique(words).size == modes.size


def test_tag_array_rejects_unknown_mode():
    with pytest.raises(UnknownModeError):
        encode_tag_array(np.array([0, 7]), np.array([1, 2]), np.array([0, 0]))


# --- Tests for the 802.1Q stack ---

def test_pack_tag_headers_layout():
    headers = pack_tag_headers(TagPair(0x112, 0x345), pcp=3)

    assert headers == bytes([0x81, 0x00, 0x61, 0x12, 0x81, 0x00, 0x63, 0x45])
    assert unpack_tag_headers(headers) == TagPair(0x112, 0x345)


def test_unpack_tag_headers_rejects_foreign_tpid():
    with pytest.raises(RailCodecError, match="TPID"):
        unpack_tag_headers(bytes([0x88, 0xA8, 0, 1, 0x81, 0x00, 0, 2]))


def test_unpack_tag_headers_needs_eight_bytes():
    with pytest.raises(RailCodecError, match="8 bytes"):
        unpack_tag_headers(b"\x81\x00")


def test_frame_overhead_includes_vlan_stack():
    assert FRAME_OVERHEAD == 26


def test_mode_parity_flag():
    assert [m.uses_parity for m in RailMode] == [False, False, True, True]


# --- Tests for make_parity / recover_missing ---

def test_make_parity_matches_xor_fold(payloads: list[bytes]):
    assert make_parity(payloads) == xor_fold(payloads)
    assert len(make_parity(payloads)) == 13


def test_make_parity_of_single_payload_is_itself():
    assert make_parity([b"solo"]) == b"solo"


def test_make_parity_rejects_empty_input():
    with pytest.raises(RailCodecError):
        make_parity([])


@pytest.mark.parametrize("missing", [0, 1, 2, 3])
def test_recover_each_missing_position(payloads: list[bytes], missing: int):
    # Arrange
    group = build_parity_group(5, payloads)
    received = [(i, p) for i, p in enumerate(payloads) if i != missing]

    # Act
    position, recovered = recover_missing(group, received)

    # Assert
    assert position == missing
    assert recovered == payloads[missing]


def test_recover_without_lengths_returns_padded_payload(payloads: list[bytes]):
    group = ParityGroup(group_size=5, data_payloads=tuple(payloads), parity_payload=make_parity(payloads))

    _, recovered = recover_missing(group, [(i, p) for i, p in enumerate(payloads) if i != 0])

    assert recovered == b"alpha" + bytes(8)


def test_recover_two_missing_is_unrecoverable(payloads: list[bytes]):
    group = build_parity_group(5, payloads)

    with pytest.raises(UnrecoverableGroupError, match="2 data payloads missing"):
        recover_missing(group, [(0, payloads[0]), (1, payloads[1])])


def test_recover_with_nothing_missing(payloads: list[bytes]):
    group = build_parity_group(5, payloads)

    with pytest.raises(NothingToRecoverError):
        recover_missing(group, list(enumerate(payloads)))


def test_parity_group_size_checks():
    with pytest.raises(RailCodecError, match=">= 2"):
        ParityGroup(group_size=1, data_payloads=(), parity_payload=b"")
    with pytest.raises(RailCodecError, match="exceed group size"):
        build_parity_group(2, [b"a", b"b"])
