"""
Wire codec for rail sessions.

Session state travels in the vlan_id fields of two stacked 802.1Q headers
as one 24-bit word:

    bits 23..20  mode        (0 stripe, 1 mirror, 4 dedicated parity, 5 rotating parity)
    bits 19..4   packet id
    bits  3..0   path index

The outer vlan_id carries bits 23..12 and the inner vlan_id bits 11..0.
Parity payloads are the byte-wise XOR of the X-1 data payloads of a group,
each zero-padded to the longest one.
"""

import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import NamedTuple

import numpy as np

VID_BITS = 12
VID_MASK = (1 << VID_BITS) - 1
MAX_PACKET_ID = 0xFFFF
MAX_PATHS = 16

TPID_8021Q = 0x8100
VLAN_HEADER = struct.Struct("!HH")
VLAN_STACK_BYTES = 2 * VLAN_HEADER.size

# Ethernet header + FCS around the encapsulated payload
ETHERNET_BYTES = 18
FRAME_OVERHEAD = ETHERNET_BYTES + VLAN_STACK_BYTES


class RailMode(IntEnum):
    STRIPE = 0
    MIRROR = 1
    PARITY = 4
    ROTATING_PARITY = 5

    @property
    def uses_parity(self) -> bool:
        return self in (RailMode.PARITY, RailMode.ROTATING_PARITY)


MODE_VALUES = frozenset(int(m) for m in RailMode)


class RailCodecError(ValueError):
    """Tag or parity input outside the codec's contract."""


class UnknownModeError(RailCodecError):
    def __init__(self, raw_value: int):
        self.raw_value = raw_value
        super().__init__(f"unknown rail mode {raw_value}")


class UnrecoverableGroupError(RailCodecError):
    pass


class NothingToRecoverError(RailCodecError):
    pass


class RailTag(NamedTuple):
    mode: int
    packet_id: int
    path_index: int


class TagPair(NamedTuple):
    outer_vlan_id: int
    inner_vlan_id: int


@dataclass(frozen=True)
class ParityGroup:
    group_size: int
    data_payloads: tuple[bytes, ...]
    parity_payload: bytes
    data_lengths: tuple[int, ...] = ()

    def __post_init__(self):
        if self.group_size < 2:
            raise RailCodecError(f"group size must be >= 2, got {self.group_size}")
        if len(self.data_payloads) > self.group_size - 1:
            raise RailCodecError(
                f"{len(self.data_payloads)} data payloads exceed group size {self.group_size}"
            )

    @property
    def data_count(self) -> int:
        """Number of data positions (X-1 unless the group was cut short)."""
        return len(self.data_lengths) if self.data_lengths else self.group_size - 1


def build_parity_group(group_size: int, payloads: list[bytes]) -> ParityGroup:
    """Assemble a group from its data payloads, recording their lengths."""
    return ParityGroup(
        group_size=group_size,
        data_payloads=tuple(payloads),
        parity_payload=make_parity(payloads),
        data_lengths=tuple(len(p) for p in payloads),
    )


# --- Tags ---

def _check_tag(mode: int, packet_id: int, path_index: int) -> None:
    if mode not in MODE_VALUES:
        raise UnknownModeError(mode)
    if not 0 <= packet_id <= MAX_PACKET_ID:
        raise RailCodecError(f"packet id {packet_id} outside 16 bits")
    if not 0 <= path_index < MAX_PATHS:
        raise RailCodecError(f"path index {path_index} outside [0, {MAX_PATHS})")


def tag_word(tag: RailTag) -> int:
    _check_tag(*tag)
    return (tag.mode << 20) | (tag.packet_id << 4) | tag.path_index


def encode_tag(tag: RailTag) -> TagPair:
    w = tag_word(tag)
    return TagPair(outer_vlan_id=w >> VID_BITS, inner_vlan_id=w & VID_MASK)


def decode_tag(pair: TagPair) -> RailTag:
    outer, inner = pair
    if not (0 <= outer <= VID_MASK and 0 <= inner <= VID_MASK):
        raise RailCodecError(f"vlan ids {outer:#x}/{inner:#x} exceed 12 bits")
    w = (outer << VID_BITS) | inner
    mode = w >> 20
    if mode not in MODE_VALUES:
        raise UnknownModeError(mode)
    return RailTag(mode=mode, packet_id=(w >> 4) & MAX_PACKET_ID, path_index=w & 0xF)


def encode_tag_array(
    modes: np.ndarray, packet_ids: np.ndarray, path_indices: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized encode_tag over equal-length arrays."""
    modes = np.asarray(modes, dtype=np.uint32)
    packet_ids = np.asarray(packet_ids, dtype=np.uint32)
    path_indices = np.asarray(path_indices, dtype=np.uint32)
    bad = ~np.isin(modes, list(MODE_VALUES))
    if bad.any():
        raise UnknownModeError(int(modes[bad][0]))
    if (packet_ids > MAX_PACKET_ID).any() or (path_indices >= MAX_PATHS).any():
        raise RailCodecError("packet id or path index out of range")
    w = (modes << 20) | (packet_ids << 4) | path_indices
    return (w >> VID_BITS).astype(np.uint16), (w & VID_MASK).astype(np.uint16)


def decode_tag_array(
    outer: np.ndarray, inner: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized decode_tag; returns (modes, packet_ids, path_indices)."""
    outer = np.asarray(outer, dtype=np.uint32)
    inner = np.asarray(inner, dtype=np.uint32)
    if (outer > VID_MASK).any() or (inner > VID_MASK).any():
        raise RailCodecError("vlan id exceeds 12 bits")
    w = (outer << VID_BITS) | inner
    modes = w >> 20
    bad = ~np.isin(modes, list(MODE_VALUES))
    if bad.any():
        raise UnknownModeError(int(modes[bad][0]))
    return modes, (w >> 4) & MAX_PACKET_ID, w & 0xF


def pack_tag_headers(pair: TagPair, pcp: int = 0) -> bytes:
    """Serialize the two 802.1Q headers (TPID + TCI each), outer first."""
    if not 0 <= pcp < 8:
        raise RailCodecError(f"priority {pcp} outside 3 bits")
    return b"".join(
        VLAN_HEADER.pack(TPID_8021Q, (pcp << 13) | (vid & VID_MASK))
        for vid in (pair.outer_vlan_id, pair.inner_vlan_id)
    )


def unpack_tag_headers(buf: bytes) -> TagPair:
    if len(buf) < VLAN_STACK_BYTES:
        raise RailCodecError(f"need {VLAN_STACK_BYTES} bytes for a VLAN stack, got {len(buf)}")
    vids = []
    for offset in (0, VLAN_HEADER.size):
        tpid, tci = VLAN_HEADER.unpack_from(buf, offset)
        if tpid != TPID_8021Q:
            raise RailCodecError(f"unexpected TPID {tpid:#06x} at offset {offset}")
        vids.append(tci & VID_MASK)
    return TagPair(*vids)


# --- Parity ---

def _stack(payloads: list[bytes]) -> np.ndarray:
    width = max(len(p) for p in payloads)
    rows = np.zeros((len(payloads), width), dtype=np.uint8)
    for i, p in enumerate(payloads):
        rows[i, : len(p)] = np.frombuffer(p, dtype=np.uint8)
    return rows


def make_parity(data: list[bytes]) -> bytes:
    """XOR of all payloads, each right-padded with zeros to the longest."""
    if not data:
        raise RailCodecError("parity needs at least one payload")
    return np.bitwise_xor.reduce(_stack(list(data)), axis=0).tobytes()


def recover_missing(group: ParityGroup, received: list[tuple[int, bytes]]) -> tuple[int, bytes]:
    """Rebuild the single missing data payload of a group from its parity."""
    positions = {pos for pos, _ in received}
    missing = sorted(set(range(group.data_count)) - positions)
    if not missing:
        raise NothingToRecoverError(f"all {group.data_count} data payloads present")
    if len(missing) > 1:
        raise UnrecoverableGroupError(
            f"{len(missing)} data payloads missing (positions {missing}); single parity recovers one"
        )
    position = missing[0]
    payload = make_parity([group.parity_payload, *(p for _, p in received)])
    if group.data_lengths:
        payload = payload[: group.data_lengths[position]]
    return position, payload
