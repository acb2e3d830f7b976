"""Audio file I/O: raw PCM with a JSON sidecar header, plus RIFF/WAVE.

Raw PCM files hold interleaved signed 16-bit little-endian samples; the
sidecar ``<name>.json`` declares ``{"rate_hz": ..., "channels": ...,
"bits": 16}``.  Float arrays use the convention full scale 1.0 ->
32767.
"""

from __future__ import annotations

import json
import os
import wave
from pathlib import Path

import numpy as np

FULL_SCALE = 32767.0


class AudioIOError(IOError):
    pass


def float_to_int16(x: np.ndarray) -> np.ndarray:
    x = np.clip(np.asarray(x, dtype=np.float64), -1.0, 1.0)
    return np.round(x * FULL_SCALE).astype(np.int16)


def int16_to_float(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) / FULL_SCALE


def _as_2d_int16(audio: np.ndarray) -> np.ndarray:
    a = np.asarray(audio)
    if a.dtype != np.int16:
        a = float_to_int16(a)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise AudioIOError(f"expected 1-D or 2-D audio, got shape {a.shape}")
    return a


def sidecar_path(pcm_path) -> Path:
    p = Path(pcm_path)
    return p.with_suffix(p.suffix + ".json")


def write_pcm(path, audio: np.ndarray, rate_hz: int) -> None:
    """Write interleaved int16 LE PCM plus its JSON sidecar header."""
    a = _as_2d_int16(audio)
    data = a.astype("<i2").tobytes()
    header = {"rate_hz": int(rate_hz), "channels": int(a.shape[1]), "bits": 16}
    atomic_write_bytes(path, data)
    atomic_write_bytes(sidecar_path(path), (json.dumps(header) + "\n").encode())


def read_pcm(path) -> tuple[np.ndarray, int]:
    """Read PCM + sidecar, returning (int16 array (n, channels), rate_hz)."""
    side = sidecar_path(path)
    try:
        header = json.loads(Path(side).read_text())
    except FileNotFoundError:
        raise AudioIOError(f"missing sidecar header {side}") from None
    if header.get("bits") != 16:
        raise AudioIOError(f"unsupported bit depth {header.get('bits')} in {side}")
    channels = int(header["channels"])
    raw = np.frombuffer(Path(path).read_bytes(), dtype="<i2")
    if channels < 1 or raw.size % channels:
        raise AudioIOError(f"PCM length {raw.size} not divisible by {channels} channels")
    return raw.reshape(-1, channels).astype(np.int16), int(header["rate_hz"])


def write_wav(path, audio: np.ndarray, rate_hz: int) -> None:
    a = _as_2d_int16(audio)
    with wave.open(str(path), "wb") as w:
        w.setnchannels(a.shape[1])
        w.setsampwidth(2)
        w.setframerate(int(rate_hz))
        w.writeframes(a.astype("<i2").tobytes())


def read_wav(path) -> tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as w:
        if w.getsampwidth() != 2:
            raise AudioIOError(f"only 16-bit PCM WAVE supported, got {8 * w.getsampwidth()} bits")
        channels = w.getnchannels()
        rate = w.getframerate()
        raw = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
    return raw.reshape(-1, channels).astype(np.int16), rate


def read_audio(path) -> tuple[np.ndarray, int]:
    """Dispatch on extension: .wav -> WAVE, anything else -> PCM + sidecar."""
    if str(path).lower().endswith(".wav"):
        return read_wav(path)
    return read_pcm(path)


def write_audio(path, audio: np.ndarray, rate_hz: int) -> None:
    if str(path).lower().endswith(".wav"):
        write_wav(path, audio, rate_hz)
    else:
        write_pcm(path, audio, rate_hz)


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temp file and rename, so partial outputs never survive."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    tmp = p.with_name(p.name + ".tmp")
    try:
        tmp.write_bytes(data)
        os.replace(tmp, p)
    finally:
        if tmp.exists():
            tmp.unlink()
