"""Watermark keys, basis-selection masks, and per-frame message schedules.

A watermark key is an ordered string of M bits.  Two derived objects drive
the rest of the pipeline:

* a selection mask, the L x P one-hot-per-row binary matrix that picks one
  basis shift per generator layer (the key is read as L chunks of log2(P)
  bits, MSB first, and chunk value i selects column i + 1 in 1-based terms);
* a frame-message schedule, the deterministic sequence of per-frame M-bit
  messages derived from a base secret and the key via HMAC-SHA256.

Everything here is pure and deterministic, so concurrent use needs no
coordination.
"""

import hashlib
import hmac
from dataclasses import dataclass
from typing import Sequence

import numpy as np

__all__ = [
    "KeyConfig",
    "WatermarkKey",
    "FrameMessage",
    "SelectionMask",
    "BaseSecret",
    "key_to_mask",
    "mask_to_key",
    "derive_frame_messages",
    "hamming",
    "random_key",
    "pack_bits",
    "unpack_bits",
    "bits_to_hex",
    "hex_to_bits",
    "schedule_document",
    "parse_schedule_document",
]

MIN_SECRET_BYTES = 16

# Separator between the packed key and the frame index in the HMAC input.
_HASH_SEPARATOR = b"\x7c"
_FRAME_INDEX_BYTES = 8


@dataclass(frozen=True)
class KeyConfig:
    """Shape of the keyspace: L layers, P bases per layer, M message bits."""

    num_layers: int
    bases_per_layer: int
    message_bits: int

    def __post_init__(self) -> None:
        if self.num_layers < 1:
            raise ValueError("num_layers must be >= 1")
        p = self.bases_per_layer
        if p < 2 or p & (p - 1) != 0:
            raise ValueError("bases_per_layer must be a power of two >= 2")
        if self.message_bits != self.num_layers * self.bits_per_layer:
            raise ValueError(
                "message_bits must equal num_layers * log2(bases_per_layer); "
                f"got {self.message_bits} for L={self.num_layers}, "
                f"P={self.bases_per_layer}"
            )

    @property
    def bits_per_layer(self) -> int:
        return self.bases_per_layer.bit_length() - 1

    @classmethod
    def from_layout(cls, num_layers: int, bases_per_layer: int) -> "KeyConfig":
        if bases_per_layer < 2 or bases_per_layer & (bases_per_layer - 1) != 0:
            raise ValueError("bases_per_layer must be a power of two >= 2")
        bits = bases_per_layer.bit_length() - 1
        return cls(num_layers, bases_per_layer, num_layers * bits)


def _validate_bits(bits: Sequence[int], what: str) -> tuple[int, ...]:
    out = tuple(int(b) for b in bits)
    if any(b not in (0, 1) for b in out):
        raise ValueError(f"{what} must contain only 0/1 values")
    return out


@dataclass(frozen=True)
class WatermarkKey:
    """An M-bit watermark key."""

    bits: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "bits", _validate_bits(self.bits, "key bits"))
        if not self.bits:
            raise ValueError("key must contain at least one bit")


@dataclass(frozen=True)
class FrameMessage:
    """The M-bit message assigned to one frame; frame indices are 1-based."""

    frame_index: int
    bits: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.frame_index < 1:
            raise ValueError("frame_index is 1-based and must be >= 1")
        object.__setattr__(self, "bits", _validate_bits(self.bits, "message bits"))
        if not self.bits:
            raise ValueError("message must contain at least one bit")


@dataclass(frozen=True, eq=False)
class SelectionMask:
    """L x P binary matrix with exactly one selected basis per row."""

    mask: np.ndarray

    def __post_init__(self) -> None:
        arr = np.ascontiguousarray(self.mask, dtype=np.uint8)
        if arr.ndim != 2:
            raise ValueError("mask must be a 2-D matrix")
        if not np.isin(arr, (0, 1)).all():
            raise ValueError("mask entries must be 0 or 1")
        if not (arr.sum(axis=1) == 1).all():
            raise ValueError("every mask row must select exactly one basis")
        arr.setflags(write=False)
        object.__setattr__(self, "mask", arr)

    @property
    def num_layers(self) -> int:
        return self.mask.shape[0]

    @property
    def bases_per_layer(self) -> int:
        return self.mask.shape[1]

    def selected_columns(self) -> tuple[int, ...]:
        """0-based selected column per layer."""
        return tuple(int(c) for c in self.mask.argmax(axis=1))


@dataclass(frozen=True)
class BaseSecret:
    """Opaque secret for the frame-message schedule; at least 16 bytes."""

    key_bytes: bytes

    def __post_init__(self) -> None:
        if len(self.key_bytes) < MIN_SECRET_BYTES:
            raise ValueError(f"secret must be at least {MIN_SECRET_BYTES} bytes")


def key_to_mask(key: WatermarkKey, cfg: KeyConfig) -> SelectionMask:
    """Map a key to its per-layer basis selection.

    Chunk ell (1-based) is bits [(ell-1)*log2P, ell*log2P), read MSB first;
    its value i selects column i + 1 of row ell in 1-based terms.
    """
    if len(key.bits) != cfg.message_bits:
        raise ValueError(
            f"key has {len(key.bits)} bits, config expects {cfg.message_bits}"
        )
    width = cfg.bits_per_layer
    mask = np.zeros((cfg.num_layers, cfg.bases_per_layer), dtype=np.uint8)
    for layer in range(cfg.num_layers):
        chunk = key.bits[layer * width : (layer + 1) * width]
        index = 0
        for bit in chunk:
            index = (index << 1) | bit
        mask[layer, index] = 1
    return SelectionMask(mask)


def mask_to_key(mask: SelectionMask, cfg: KeyConfig) -> WatermarkKey:
    """Invert key_to_mask; rejects rows without exactly one selection."""
    if mask.num_layers != cfg.num_layers or mask.bases_per_layer != cfg.bases_per_layer:
        raise ValueError("mask dimensions do not match config")
    width = cfg.bits_per_layer
    bits: list[int] = []
    for layer in range(cfg.num_layers):
        row = np.flatnonzero(mask.mask[layer])
        if row.size != 1:
            raise ValueError(f"mask row {layer + 1} does not select exactly one basis")
        index = int(row[0])
        bits.extend((index >> (width - 1 - k)) & 1 for k in range(width))
    return WatermarkKey(tuple(bits))


def pack_bits(bits: Sequence[int]) -> bytes:
    """Pack bits MSB-first into bytes, zero-padding the low bits of the last."""
    data = bytearray((len(bits) + 7) // 8)
    for i, bit in enumerate(bits):
        if bit:
            data[i >> 3] |= 0x80 >> (i & 7)
    return bytes(data)


def unpack_bits(data: bytes, num_bits: int) -> tuple[int, ...]:
    """Read num_bits MSB-first from a byte string."""
    if num_bits > 8 * len(data):
        raise ValueError("not enough bytes for the requested bit count")
    return tuple((data[i >> 3] >> (7 - (i & 7))) & 1 for i in range(num_bits))


def bits_to_hex(bits: Sequence[int]) -> str:
    return pack_bits(tuple(int(b) for b in bits)).hex()


def hex_to_bits(text: str, num_bits: int) -> tuple[int, ...]:
    return unpack_bits(bytes.fromhex(text), num_bits)


def derive_frame_messages(
    secret: BaseSecret, key: WatermarkKey, num_frames: int
) -> list[FrameMessage]:
    """Derive the deterministic per-frame message schedule.

    Message t is the first M bits of HMAC-SHA256(secret, msg_t) with
    msg_t = pack(key) || 0x7C || t as an 8-byte big-endian unsigned integer,
    for t = 1..num_frames.
    """
    if num_frames < 1:
        raise ValueError("num_frames must be >= 1")
    m = len(key.bits)
    prefix = pack_bits(key.bits) + _HASH_SEPARATOR
    schedule = []
    for t in range(1, num_frames + 1):
        digest = hmac.new(
            secret.key_bytes,
            prefix + t.to_bytes(_FRAME_INDEX_BYTES, "big"),
            hashlib.sha256,
        ).digest()
        schedule.append(FrameMessage(t, unpack_bits(digest, m)))
    return schedule


def hamming(a: Sequence[int], b: Sequence[int]) -> int:
    """Number of differing positions between two equal-length bit sequences."""
    if len(a) != len(b):
        raise ValueError("bit sequences must have equal length")
    return sum(1 for x, y in zip(a, b) if int(x) != int(y))


def random_key(cfg: KeyConfig, seed: int) -> WatermarkKey:
    """Draw a uniform key, deterministic under the seed."""
    rng = np.random.default_rng(seed)
    return WatermarkKey(tuple(int(b) for b in rng.integers(0, 2, cfg.message_bits)))


def schedule_document(
    cfg: KeyConfig, key: WatermarkKey, frames: Sequence[FrameMessage]
) -> dict:
    """JSON-ready schedule document; bit fields are hex in packed form."""
    return {
        "config": {
            "L": cfg.num_layers,
            "P": cfg.bases_per_layer,
            "M": cfg.message_bits,
        },
        "key_hex": bits_to_hex(key.bits),
        "frames": [
            {"t": msg.frame_index, "bits_hex": bits_to_hex(msg.bits)}
            for msg in frames
        ],
    }


def parse_schedule_document(
    doc: dict,
) -> tuple[KeyConfig, WatermarkKey, list[FrameMessage]]:
    cfg = KeyConfig(
        num_layers=int(doc["config"]["L"]),
        bases_per_layer=int(doc["config"]["P"]),
        message_bits=int(doc["config"]["M"]),
    )
    key = WatermarkKey(hex_to_bits(doc["key_hex"], cfg.message_bits))
    frames = [
        FrameMessage(int(entry["t"]), hex_to_bits(entry["bits_hex"], cfg.message_bits))
        for entry in doc["frames"]
    ]
    return cfg, key, frames
