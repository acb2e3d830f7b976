"""Telemetry link emulator: 8-bit truncation, packetization, loss, reassembly.

Samples are truncated from 16 to 8 bits (keep the high byte) before
transmission; two channels at 50 kHz then fit an 800 kbps radio
budget.  Packets carry a 32-bit sequence number and a CRC-16/CCITT, so
the receiver detects both missing and corrupted packets, zero-fills the
gaps, and reports them in a per-sample mask.

Wire format (bit-exact, little-endian):
    magic 0xEC 0x57 | u32 seq | u16 payload length | payload | u16 crc
with the CRC computed over the 4 seq bytes followed by the payload.

Sender and receiver are independent; each side is single-threaded per
stream and multiple streams are isolated.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass
from typing import Iterable, Iterator

import numpy as np

_MAGIC = b"\xec\x57"
_SEQ_MOD = 1 << 32


class LinkError(ValueError):
    pass


@dataclass(frozen=True)
class LinkConfig:
    bits_per_sample: int = 8
    channels: int = 2
    sample_rate_hz: int = 50_000
    payload_samples_per_packet: int = 120
    loss_probability: float = 0.0
    seed: int = 0
    companding: str = "shift8"  # or "mulaw"

    def __post_init__(self):
        if self.bits_per_sample != 8:
            raise LinkError("only 8-bit transport is supported")
        if self.channels < 1 or self.sample_rate_hz <= 0:
            raise LinkError("channels and sample_rate_hz must be positive")
        if self.payload_samples_per_packet < 1:
            raise LinkError("payload_samples_per_packet must be >= 1")
        if not 0.0 <= self.loss_probability <= 1.0:
            raise LinkError("loss_probability must be in [0, 1]")
        if self.companding not in ("shift8", "mulaw"):
            raise LinkError(f"unknown companding {self.companding!r}")

    @property
    def bitrate_bps(self) -> int:
        return self.channels * self.sample_rate_hz * self.bits_per_sample

    @property
    def payload_bytes(self) -> int:
        return self.payload_samples_per_packet * self.channels


def crc16_ccitt(data: bytes, init: int = 0xFFFF) -> int:
    """CRC-16/CCITT (poly 0x1021, MSB first, init 0xFFFF, no final xor)."""
    crc = init
    for byte in data:
        crc ^= byte << 8
        for _ in range(8):
            crc = ((crc << 1) ^ 0x1021 if crc & 0x8000 else crc << 1) & 0xFFFF
    return crc


@dataclass(frozen=True)
class LinkPacket:
    seq: int
    payload: bytes
    crc: int

    @classmethod
    def build(cls, seq: int, payload: bytes) -> "LinkPacket":
        seq %= _SEQ_MOD
        return cls(seq=seq, payload=payload, crc=crc16_ccitt(struct.pack("<I", seq) + payload))

    @property
    def crc_ok(self) -> bool:
        return self.crc == crc16_ccitt(struct.pack("<I", self.seq) + self.payload)


def encode_packet(p: LinkPacket) -> bytes:
    return _MAGIC + struct.pack("<IH", p.seq, len(p.payload)) + p.payload + struct.pack("<H", p.crc)


def decode_packet(buf: bytes, offset: int = 0) -> tuple[LinkPacket, int]:
    """Decode one packet at ``offset``; returns (packet, next offset)."""
    if buf[offset : offset + 2] != _MAGIC:
        raise LinkError(f"bad packet magic at offset {offset}")
    seq, length = struct.unpack_from("<IH", buf, offset + 2)
    start = offset + 8
    payload = buf[start : start + length]
    if len(payload) != length:
        raise LinkError("truncated packet payload")
    (crc,) = struct.unpack_from("<H", buf, start + length)
    return LinkPacket(seq=seq, payload=payload, crc=crc), start + length + 2


def truncate8(samples: np.ndarray) -> np.ndarray:
    """Keep the high byte of each 16-bit sample (arithmetic shift right 8)."""
    return (np.asarray(samples, dtype=np.int16) >> 8).astype(np.int8)


def expand8(samples: np.ndarray) -> np.ndarray:
    """Inverse expansion: shift the 8-bit sample back into the high byte."""
    return (np.asarray(samples, dtype=np.int8).astype(np.int16) << 8).astype(np.int16)


def mulaw_encode(samples: np.ndarray, mu: float = 255.0) -> np.ndarray:
    """Alternative companding policy: mu-law to 8 bits."""
    x = np.asarray(samples, dtype=np.int16).astype(np.float64) / 32768.0
    y = np.sign(x) * np.log1p(mu * np.abs(x)) / np.log1p(mu)
    return np.round(y * 127.0).astype(np.int8)


def mulaw_decode(samples: np.ndarray, mu: float = 255.0) -> np.ndarray:
    y = np.asarray(samples, dtype=np.int8).astype(np.float64) / 127.0
    x = np.sign(y) * ((1.0 + mu) ** np.abs(y) - 1.0) / mu
    return np.round(x * 32768.0).clip(-32768, 32767).astype(np.int16)


def _compand(audio: np.ndarray, cfg: LinkConfig) -> np.ndarray:
    return mulaw_encode(audio) if cfg.companding == "mulaw" else truncate8(audio)


def _expand(data: np.ndarray, cfg: LinkConfig) -> np.ndarray:
    return mulaw_decode(data) if cfg.companding == "mulaw" else expand8(data)


def packetize(
    audio: np.ndarray, cfg: LinkConfig, *, pace: bool = False, start_seq: int = 0
) -> Iterator[LinkPacket]:
    """Truncate, interleave, and frame audio into sequence-numbered packets.

    ``audio`` is int16 (n_samples, channels) or float in [-1, 1].  The
    final partial packet, if any, is zero-padded.  With ``pace=True``
    packets are released on the wall clock at the configured bit rate
    (replay mode emits them as fast as they are consumed).
    """
    a = np.asarray(audio)
    if a.dtype != np.int16:
        from .audio_io import float_to_int16

        a = float_to_int16(a)
    if a.ndim == 1:
        a = a[:, None]
    if a.shape[1] != cfg.channels:
        raise LinkError(f"audio has {a.shape[1]} channels, config says {cfg.channels}")
    small = _compand(a, cfg).reshape(-1)  # sample-major interleave
    pad = (-small.size) % cfg.payload_bytes
    if pad:
        small = np.concatenate([small, np.zeros(pad, dtype=np.int8)])
    n_packets = small.size // cfg.payload_bytes
    period = cfg.payload_samples_per_packet / cfg.sample_rate_hz
    t0 = time.monotonic()
    for k in range(n_packets):
        if pace:
            delay = t0 + k * period - time.monotonic()
            if delay > 0:
                time.sleep(delay)
        payload = small[k * cfg.payload_bytes : (k + 1) * cfg.payload_bytes].tobytes()
        yield LinkPacket.build(start_seq + k, payload)


def channel(packets: Iterable[LinkPacket], cfg: LinkConfig) -> Iterator[LinkPacket]:
    """Drop each packet independently with ``loss_probability`` (seeded)."""
    rng = np.random.default_rng(cfg.seed)
    for p in packets:
        if cfg.loss_probability == 0.0 or rng.random() >= cfg.loss_probability:
            yield p


def gilbert_elliott_channel(
    packets: Iterable[LinkPacket],
    cfg: LinkConfig,
    *,
    p_enter_burst: float = 0.01,
    p_exit_burst: float = 0.3,
    loss_in_burst: float = 0.9,
) -> Iterator[LinkPacket]:
    """Bursty alternative to the independent-loss channel.

    Two-state Gilbert-Elliott model: in the good state packets drop
    with ``cfg.loss_probability``, in the burst state with
    ``loss_in_burst``; state transitions are per packet.
    """
    rng = np.random.default_rng(cfg.seed)
    burst = False
    for p in packets:
        burst = (rng.random() < p_enter_burst) if not burst else (rng.random() >= p_exit_burst)
        drop_p = loss_in_burst if burst else cfg.loss_probability
        if rng.random() >= drop_p:
            yield p


def receive(
    packets: Iterable[LinkPacket], cfg: LinkConfig, *, start_seq: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Reassemble a lossy stream into 16-bit audio plus a gap mask.

    Sequence discontinuities and CRC failures both become zero-filled,
    masked gaps; nothing raises.  Loss after the final received packet
    is unknowable and therefore not represented.  Returns
    (int16 audio (n_samples, channels), bool mask (n_samples,)) where
    True marks samples inside a lost period.
    """
    chunks: list[np.ndarray] = []
    masks: list[bool] = []
    expected = start_seq % _SEQ_MOD
    zero = np.zeros(cfg.payload_bytes, dtype=np.int8)
    for p in packets:
        gap = (p.seq - expected) % _SEQ_MOD
        for _ in range(gap):
            chunks.append(zero)
            masks.append(True)
        if p.crc_ok and len(p.payload) == cfg.payload_bytes:
            chunks.append(np.frombuffer(p.payload, dtype=np.int8))
            masks.append(False)
        else:
            chunks.append(zero)
            masks.append(True)
        expected = (p.seq + 1) % _SEQ_MOD
    if not chunks:
        return (
            np.zeros((0, cfg.channels), dtype=np.int16),
            np.zeros(0, dtype=bool),
        )
    small = np.concatenate(chunks)
    audio = _expand(small, cfg).reshape(-1, cfg.channels)
    mask = np.repeat(np.asarray(masks), cfg.payload_samples_per_packet)
    return audio, mask


def write_packet_stream(path, packets: Iterable[LinkPacket]) -> int:
    """Serialize packets back to back for file replay; returns the count."""
    from .audio_io import atomic_write_bytes

    blob = bytearray()
    n = 0
    for p in packets:
        blob += encode_packet(p)
        n += 1
    atomic_write_bytes(path, bytes(blob))
    return n


def read_packet_stream(path) -> Iterator[LinkPacket]:
    buf = open(path, "rb").read()
    offset = 0
    while offset < len(buf):
        packet, offset = decode_packet(buf, offset)
        yield packet
