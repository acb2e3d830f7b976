"""Echo profiles: per-sweep cross-correlation stacked over time.

An echo frame is the cross-correlation of one received sweep against
the transmitted reference; lag p ("range pixel" p) collects energy from
paths with round-trip delay p samples, i.e. round-trip distance
p * c / (2 * fs).  Stacking frames over time gives the echo profile;
frame-to-frame differences suppress static reflections.

Correlation lags are computed linearly (not circularly): each frame may
read into the following frame's samples as look-ahead, and missing
look-ahead at the end of a stream is treated as zeros.  Profiles store
signed correlation values; no envelope is taken.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np
from scipy import signal as sps

from .fmcw import SPEED_OF_SOUND_M_S, BandpassSpec, FmcwConfig, bandpass, gen_chirp

KIND_ORIGINAL = "original"
KIND_DIFFERENTIAL = "differential"
KIND_STACKED = "stacked"
_KIND_CODES = {KIND_ORIGINAL: 0, KIND_DIFFERENTIAL: 1, KIND_STACKED: 2}
_KIND_NAMES = {v: k for k, v in _KIND_CODES.items()}


class LengthMismatchError(ValueError):
    pass


class FrameAlignmentError(ValueError):
    pass


class CropRangeError(ValueError):
    pass


class ProfileKindError(ValueError):
    pass


class ShapeMismatchError(ValueError):
    pass


def pixel_distance_m(sample_rate_hz: int, c: float = SPEED_OF_SOUND_M_S) -> float:
    """Round-trip distance spanned by one correlation lag: c / (2 fs)."""
    return c / (2.0 * sample_rate_hz)


@dataclass(frozen=True)
class CropSpec:
    """Range-pixel window of interest, starting at the zero-lag pixel by default."""

    start_pixel: int = 0
    n_pixels: int = 72

    def __post_init__(self):
        if self.start_pixel < 0 or self.n_pixels < 1:
            raise CropRangeError(f"invalid crop ({self.start_pixel}, {self.n_pixels})")


@dataclass(frozen=True)
class EchoProfile:
    """Immutable stack of echo frames: data[frame, pixel, channel]."""

    data: np.ndarray
    pixel_distance_m: float
    kind: str = KIND_ORIGINAL
    start_pixel: int = 0

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeMismatchError(f"profile data must be 3-D, got shape {self.data.shape}")
        if self.kind not in _KIND_CODES:
            raise ProfileKindError(f"unknown profile kind {self.kind!r}")
        if self.pixel_distance_m <= 0:
            raise ShapeMismatchError("pixel_distance_m must be positive")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def n_pixels(self) -> int:
        return self.data.shape[1]

    @property
    def n_channels(self) -> int:
        return self.data.shape[2]


def echo_frame(rx_frame: np.ndarray, tx_ref: np.ndarray) -> np.ndarray:
    """Correlate one received frame against the reference at lags 0..N-1.

    Element p is sum_n tx[n] * rx[n + p]; samples past the end of
    ``rx_frame`` are taken as zero (no look-ahead is available for a
    lone frame).  Lag 0 is the direct, zero-delay path.
    """
    rx = np.asarray(rx_frame, dtype=np.float64)
    tx = np.asarray(tx_ref, dtype=np.float64)
    if rx.shape != tx.shape or rx.ndim != 1:
        raise LengthMismatchError(f"frame shapes differ: rx {rx.shape} vs tx {tx.shape}")
    n = rx.size
    rx_padded = np.concatenate([rx, np.zeros(n - 1)])
    return sps.correlate(rx_padded, tx, mode="valid", method="fft")


def echo_profile(
    rx: np.ndarray,
    cfg: FmcwConfig,
    crop: CropSpec,
    *,
    n_frames: int | None = None,
    tx_start_offset: int = 0,
    apply_bandpass: bool = False,
    bandpass_spec: BandpassSpec | None = None,
    tx_ref: np.ndarray | None = None,
) -> EchoProfile:
    """Build the original echo profile from received audio.

    ``rx`` is (n_samples,) or (n_samples, n_channels).  Each frame
    correlates with look-ahead into the following samples, so lags up
    to the frame length are free of edge truncation.

    With ``n_frames=None`` the samples after ``tx_start_offset`` (the
    declared sample at which frame 0 of the transmission begins) must
    divide into whole frames, and the final frame's missing look-ahead
    is zero.  Passing ``n_frames`` instead frames only that many sweeps
    and keeps any trailing samples purely as look-ahead, which is how a
    chopped continuous stream behaves.
    """
    x = np.asarray(rx, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2:
        raise ShapeMismatchError(f"rx must be 1-D or 2-D, got shape {x.shape}")
    if tx_start_offset < 0 or tx_start_offset > x.shape[0]:
        raise FrameAlignmentError(f"tx_start_offset {tx_start_offset} outside signal")
    n = cfg.frame_len_samples
    usable = x[tx_start_offset:]
    if n_frames is None:
        if usable.shape[0] == 0 or usable.shape[0] % n:
            raise FrameAlignmentError(
                f"{usable.shape[0]} samples after offset do not divide into {n}-sample frames"
            )
        n_frames = usable.shape[0] // n
    elif n_frames < 1 or n_frames * n > usable.shape[0]:
        raise FrameAlignmentError(
            f"{n_frames} frames of {n} samples exceed the {usable.shape[0]} available"
        )
    if crop.start_pixel + crop.n_pixels > n:
        raise CropRangeError(
            f"crop ({crop.start_pixel}, {crop.n_pixels}) exceeds frame length {n}"
        )
    if apply_bandpass:
        spec = bandpass_spec or BandpassSpec(cfg.sweep_start_hz, cfg.sweep_end_hz)
        usable = bandpass(usable, spec, cfg.sample_rate_hz)
    tx = gen_chirp(cfg) if tx_ref is None else np.asarray(tx_ref, dtype=np.float64)
    if tx.size != n:
        raise LengthMismatchError(f"tx reference length {tx.size} != frame length {n}")

    out = np.empty((n_frames, crop.n_pixels, usable.shape[1]))
    for ch in range(usable.shape[1]):
        padded = np.concatenate([usable[:, ch], np.zeros(n)])
        # One long correlation covers every frame at every lag, with the
        # next frame's samples naturally serving as look-ahead.
        corr = sps.correlate(padded, tx, mode="valid", method="fft")
        idx = np.arange(n_frames)[:, None] * n + crop.start_pixel + np.arange(crop.n_pixels)
        out[:, :, ch] = corr[idx]
    return EchoProfile(
        data=out,
        pixel_distance_m=pixel_distance_m(cfg.sample_rate_hz),
        kind=KIND_ORIGINAL,
        start_pixel=crop.start_pixel,
    )


def range_envelope(profile: EchoProfile) -> np.ndarray:
    """Magnitude envelope of each frame row along the pixel axis.

    Correlation rows of a real passband sweep oscillate at the carrier
    underneath their range envelope, so the signed argmax can sit a
    couple of lags off a fractional delay.  The analytic-signal
    magnitude removes the carrier.  Near the crop boundaries the
    envelope of an already-cropped profile is approximate (the lobe
    tails outside the crop are gone); :func:`measure_range_pixels`
    computes the exact envelope from audio.
    """
    return np.abs(sps.hilbert(profile.data, axis=1))


def measure_range_pixels(
    rx: np.ndarray,
    cfg: FmcwConfig,
    crop: CropSpec,
    *,
    n_frames: int | None = None,
    channel: int = 0,
) -> np.ndarray:
    """Matched-filter range estimate per frame: argmax envelope pixel.

    Correlates against the analytic (complex) sweep so the carrier
    drops out exactly, takes the magnitude over all lags, and only then
    crops; this is the standard matched-filter range readout and stays
    within one pixel of round(2 d fs / c) for any fractional delay.
    """
    x = np.asarray(rx, dtype=np.float64)
    if x.ndim == 2:
        x = x[:, channel]
    n = cfg.frame_len_samples
    if n_frames is None:
        if x.size == 0 or x.size % n:
            raise FrameAlignmentError(f"{x.size} samples do not divide into {n}-sample frames")
        n_frames = x.size // n
    elif n_frames < 1 or n_frames * n > x.size:
        raise FrameAlignmentError(f"{n_frames} frames exceed the {x.size} samples available")
    if crop.start_pixel + crop.n_pixels > n:
        raise CropRangeError(f"crop ({crop.start_pixel}, {crop.n_pixels}) exceeds frame length {n}")
    t = np.arange(n) / cfg.sample_rate_hz
    duration = n / cfg.sample_rate_hz
    rate = (cfg.sweep_end_hz - cfg.sweep_start_hz) / duration
    phase = 2.0 * np.pi * (cfg.sweep_start_hz * t + 0.5 * rate * t * t)
    analytic_tx = cfg.amplitude * np.exp(1j * phase)
    padded = np.concatenate([x, np.zeros(n)])
    env = np.abs(sps.correlate(padded, analytic_tx, mode="valid", method="fft"))
    idx = np.arange(n_frames)[:, None] * n + crop.start_pixel + np.arange(crop.n_pixels)
    return np.argmax(env[idx], axis=1)


def differential(profile: EchoProfile) -> EchoProfile:
    """Frame-to-frame difference; frame 0 is zeros so the count is preserved."""
    if profile.kind != KIND_ORIGINAL:
        raise ProfileKindError(f"differential of a {profile.kind!r} profile")
    if profile.n_frames < 2:
        raise ProfileKindError("differential needs at least 2 frames")
    out = np.zeros_like(profile.data)
    out[1:] = profile.data[1:] - profile.data[:-1]
    return replace(profile, data=out, kind=KIND_DIFFERENTIAL)


def crop(profile: EchoProfile, spec: CropSpec) -> EchoProfile:
    """Restrict a profile to a pixel window (relative to its current pixels)."""
    if spec.start_pixel + spec.n_pixels > profile.n_pixels:
        raise CropRangeError(
            f"crop ({spec.start_pixel}, {spec.n_pixels}) exceeds {profile.n_pixels} pixels"
        )
    return replace(
        profile,
        data=profile.data[:, spec.start_pixel : spec.start_pixel + spec.n_pixels],
        start_pixel=profile.start_pixel + spec.start_pixel,
    )


def stack_channels(orig: EchoProfile, diff: EchoProfile) -> np.ndarray:
    """Stack original and differential profiles along channels.

    Channel order is [orig ch0..chK, diff ch0..chK]; two microphones
    give a frames x pixels x 4 tensor.
    """
    if orig.kind != KIND_ORIGINAL or diff.kind != KIND_DIFFERENTIAL:
        raise ProfileKindError(f"expected (original, differential), got ({orig.kind}, {diff.kind})")
    if orig.data.shape != diff.data.shape:
        raise ShapeMismatchError(f"profile shapes differ: {orig.data.shape} vs {diff.data.shape}")
    return np.concatenate([orig.data, diff.data], axis=2)


class EchoStream:
    """Frame-at-a-time echo processing with explicit previous-frame state.

    Single writer per stream; create one instance per audio stream.  The
    batch and streaming paths produce identical rows.
    """

    def __init__(self, cfg: FmcwConfig, crop: CropSpec, tx_ref: np.ndarray | None = None):
        if crop.start_pixel + crop.n_pixels > cfg.frame_len_samples:
            raise CropRangeError("crop exceeds frame length")
        self._crop = crop
        self._tx = gen_chirp(cfg) if tx_ref is None else np.asarray(tx_ref, dtype=np.float64)
        self._n = cfg.frame_len_samples
        self._prev: np.ndarray | None = None

    def push(self, frame: np.ndarray, lookahead: np.ndarray | None = None):
        """Process one frame; returns (original_row, differential_row).

        ``lookahead`` is the next frame's samples when available.  The
        first differential row is zeros, matching the batch convention.
        """
        frame = np.asarray(frame, dtype=np.float64)
        if frame.shape != (self._n,):
            raise LengthMismatchError(f"expected frame of {self._n} samples, got {frame.shape}")
        la = np.zeros(self._n) if lookahead is None else np.asarray(lookahead, dtype=np.float64)
        row = sps.correlate(np.concatenate([frame, la]), self._tx, mode="valid", method="fft")
        row = row[self._crop.start_pixel : self._crop.start_pixel + self._crop.n_pixels]
        diff = np.zeros_like(row) if self._prev is None else row - self._prev
        self._prev = row
        return row, diff


_ECHP_MAGIC = b"ECHP"
_ECHP_VERSION = 1
_ECHP_HEADER = struct.Struct("<4sHIIIBd")


def write_echp(path, profile: EchoProfile) -> None:
    """Dump a profile: little-endian header followed by row-major float32."""
    header = _ECHP_HEADER.pack(
        _ECHP_MAGIC,
        _ECHP_VERSION,
        profile.n_frames,
        profile.n_pixels,
        profile.n_channels,
        _KIND_CODES[profile.kind],
        profile.pixel_distance_m,
    )
    from .audio_io import atomic_write_bytes

    atomic_write_bytes(path, header + np.ascontiguousarray(profile.data, dtype="<f4").tobytes())


def read_echp(path) -> EchoProfile:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < _ECHP_HEADER.size:
        raise IOError(f"{path}: truncated ECHP header")
    magic, version, frames, pixels, channels, kind, pxd = _ECHP_HEADER.unpack_from(raw)
    if magic != _ECHP_MAGIC:
        raise IOError(f"{path}: bad magic {magic!r}")
    if version != _ECHP_VERSION:
        raise IOError(f"{path}: unsupported ECHP version {version}")
    expect = frames * pixels * channels
    data = np.frombuffer(raw, dtype="<f4", offset=_ECHP_HEADER.size)
    if data.size != expect:
        raise IOError(f"{path}: expected {expect} samples, found {data.size}")
    return EchoProfile(
        data=data.reshape(frames, pixels, channels).astype(np.float64),
        pixel_distance_m=pxd,
        kind=_KIND_NAMES.get(kind, KIND_ORIGINAL),
    )


def write_profile_csv(path, profile: EchoProfile, channel: int = 0) -> None:
    """ASCII grid (frames as rows, pixels as columns) for quick inspection."""
    rows = "\n".join(
        ",".join(f"{v:.6g}" for v in frame) for frame in profile.data[:, :, channel]
    )
    from .audio_io import atomic_write_bytes

    atomic_write_bytes(path, (rows + "\n").encode())
