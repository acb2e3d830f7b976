"""Synthetic multipath scenes: the independent oracle for the pipeline.

Received audio is rendered as the sum of the direct path and first-order
point reflections,

    rx(t) = g_direct * tx(t) + sum_r g_r * tx(t - 2 d_r(t) / c) + noise,

with fractional delays realized by windowed-sinc interpolation.  The
transmission is treated as if it had been running continuously before
t = 0 (the sweep train is periodic and trajectories are edge-held), so
echo frames are steady from frame 0 and a static scene differentiates
to zero everywhere.

Scenes are immutable and rendering is deterministic per seed, so two
renders of the same scene are bit-identical.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .audio_io import atomic_write_bytes
from .fmcw import SPEED_OF_SOUND_M_S, FmcwConfig, gen_chirp
from .pose import FINGER_CHAINS, HandPose, joint_angles


class InvalidSceneError(ValueError):
    pass


class InvalidPoseError(ValueError):
    pass


@dataclass(frozen=True)
class Reflector:
    """A point reflector on a piecewise-linear distance trajectory.

    ``trajectory`` is a sequence of (time_s, distance_m) waypoints;
    distances are linearly interpolated and edge-held outside the
    waypoint range.  ``channel_offsets_m`` adds per-microphone extra
    path length (default none, i.e. all microphones coincide).
    """

    trajectory: tuple[tuple[float, float], ...]
    gain: float = 1.0
    channel_offsets_m: tuple[float, ...] = ()

    def __post_init__(self):
        if len(self.trajectory) < 1:
            raise InvalidSceneError("trajectory needs at least one waypoint")
        times = [t for t, _ in self.trajectory]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise InvalidSceneError("trajectory times must be strictly increasing")
        if any(d < 0 for _, d in self.trajectory):
            raise InvalidSceneError("reflector distances must be >= 0")
        if self.gain < 0:
            raise InvalidSceneError(f"gain must be >= 0, got {self.gain}")

    @classmethod
    def static(cls, distance_m: float, gain: float = 1.0) -> "Reflector":
        return cls(trajectory=((0.0, float(distance_m)),), gain=gain)

    def distance_at(self, t: np.ndarray) -> np.ndarray:
        times = np.array([p[0] for p in self.trajectory])
        dists = np.array([p[1] for p in self.trajectory])
        return np.interp(t, times, dists)


@dataclass(frozen=True)
class ReflectorScene:
    reflectors: tuple[Reflector, ...] = ()
    direct_path_gain: float = 0.0
    noise_rms: float = 0.0
    seed: int = 0
    n_channels: int = 2

    def __post_init__(self):
        if self.direct_path_gain < 0:
            raise InvalidSceneError("direct_path_gain must be >= 0")
        if self.noise_rms < 0:
            raise InvalidSceneError("noise_rms must be >= 0")
        if self.n_channels < 1:
            raise InvalidSceneError("n_channels must be >= 1")


@functools.lru_cache(maxsize=8)
def _sinc_table(half: int, phases: int, beta: float = 8.0) -> np.ndarray:
    """Polyphase Kaiser-windowed sinc kernels.

    Row q holds the 2*half taps that interpolate a fractional position
    q/phases between samples; tap j corresponds to offset j - half + 1.
    """
    frac = np.arange(phases + 1)[:, None] / phases
    offs = np.arange(-half + 1, half + 1)[None, :]
    u = offs - frac
    win = np.i0(beta * np.sqrt(np.maximum(0.0, 1.0 - (u / half) ** 2))) / np.i0(beta)
    return np.sinc(u) * win


def _delayed(tx: np.ndarray, delay_samples: np.ndarray, half: int, phases: int) -> np.ndarray:
    """Evaluate tx at positions n - delay[n] via windowed-sinc interpolation."""
    n = tx.size
    table = _sinc_table(half, phases)
    pad_left = half + int(np.ceil(delay_samples.max())) + 1
    padded = np.concatenate([np.zeros(pad_left), tx, np.zeros(half + 1)])
    out = np.empty(n)
    chunk = 1 << 18
    offs = np.arange(-half + 1, half + 1)
    for s in range(0, n, chunk):
        e = min(s + chunk, n)
        pos = np.arange(s, e) - delay_samples[s:e]
        base = np.floor(pos)
        fracq = np.rint((pos - base) * phases).astype(np.intp)
        idx = base.astype(np.intp) + pad_left
        out[s:e] = np.einsum("ij,ij->i", padded[idx[:, None] + offs], table[fracq])
    return out


def render(
    scene: ReflectorScene,
    cfg: FmcwConfig,
    n_frames: int,
    *,
    c: float = SPEED_OF_SOUND_M_S,
    sinc_half_taps: int = 8,
    sinc_phases: int = 1024,
) -> np.ndarray:
    """Render received audio for a scene; returns (n_samples, n_channels).

    One warm-up frame is rendered internally and discarded so the
    returned stream starts in steady state.
    """
    if n_frames < 1:
        raise InvalidSceneError(f"n_frames must be >= 1, got {n_frames}")
    n = cfg.frame_len_samples
    warm = n  # one frame of warm-up; echoes never lag more than a frame
    total = n_frames * n + warm
    chirp = gen_chirp(cfg)
    tx = np.tile(chirp, n_frames + 1)
    t = (np.arange(total) - warm) / cfg.sample_rate_hz
    fs = cfg.sample_rate_hz

    out = np.zeros((n_frames * n, scene.n_channels))
    if scene.direct_path_gain > 0.0:
        out += scene.direct_path_gain * tx[warm:, None]
    for r in scene.reflectors:
        if r.gain == 0.0:
            continue
        d = r.distance_at(t)
        for ch in range(scene.n_channels):
            off = r.channel_offsets_m[ch] if ch < len(r.channel_offsets_m) else 0.0
            delay = (2.0 * d + off) / c * fs
            if delay.min() < 0:
                raise InvalidSceneError("negative path delay")
            out[:, ch] += r.gain * _delayed(tx, delay, sinc_half_taps, sinc_phases)[warm:]
    if scene.noise_rms > 0.0:
        rng = np.random.default_rng(scene.seed)
        out += scene.noise_rms * rng.standard_normal(out.shape)
    return out


# -- synthetic hand stand-in -------------------------------------------------

_DEFAULT_BASES = (0.050, 0.070, 0.165, 0.185, 0.280)
_DEFAULT_SPAN = 0.050
# Two-sided microphone placement: each finger's echo reaches one
# microphone directly while the extra path length on the other side
# pushes it past the range window, so each channel sees a disjoint,
# well-separated subset of fingers (0/2/4 on mic 0, 1/3 on mic 1).
_FAR_OFFSET = 0.90
_DEFAULT_CHANNEL_OFFSETS = (
    (0.0, _FAR_OFFSET),
    (_FAR_OFFSET, 0.0),
    (0.0, _FAR_OFFSET),
    (_FAR_OFFSET, 0.0),
    (0.0, _FAR_OFFSET),
)
_CURL_AMPLITUDES_DEG = (75.0, 60.0, 45.0)  # per interior joint, at full flexion
_FINGER_FAN_DEG = (-40.0, -15.0, 0.0, 15.0, 32.0)  # splay within the palm plane
_BONE_LENGTHS_M = (
    (0.045, 0.035, 0.030, 0.025),  # thumb
    (0.090, 0.040, 0.025, 0.022),  # index
    (0.095, 0.045, 0.028, 0.024),  # middle
    (0.090, 0.042, 0.026, 0.023),  # ring
    (0.080, 0.033, 0.021, 0.020),  # pinky
)


def _diag_map(n: int, span: float) -> tuple[tuple[float, ...], ...]:
    return tuple(tuple(span if i == j else 0.0 for j in range(n)) for i in range(n))


@dataclass(frozen=True)
class HandSceneModel:
    """Maps per-finger flexion parameters to reflector distances and joints.

    Each flexion parameter in [0, 1] moves one reflector affinely
    (``distances = base + map @ theta``) and curls one toy finger chain,
    so every parameter vector has both a distinct echo signature and a
    well-defined 21-joint pose.  The default diagonal map is injective.
    """

    base_distances_m: tuple[float, ...] = _DEFAULT_BASES
    param_map: tuple[tuple[float, ...], ...] = field(
        default_factory=lambda: _diag_map(5, _DEFAULT_SPAN)
    )
    gains: tuple[float, ...] = (1.0, 0.9, 0.85, 0.9, 1.0)
    channel_offsets_m: tuple[tuple[float, ...], ...] = _DEFAULT_CHANNEL_OFFSETS
    direct_path_gain: float = 0.25
    n_channels: int = 2

    def __post_init__(self):
        m = np.asarray(self.param_map, dtype=np.float64)
        if m.ndim != 2 or m.shape[0] != len(self.base_distances_m):
            raise InvalidSceneError("param_map rows must match base_distances_m")
        if len(self.gains) != len(self.base_distances_m):
            raise InvalidSceneError("gains must match base_distances_m")
        if len(self.channel_offsets_m) != len(self.base_distances_m):
            raise InvalidSceneError("channel_offsets_m must match base_distances_m")
        if np.linalg.matrix_rank(m) < m.shape[1]:
            raise InvalidSceneError("param_map must have full column rank (injective mapping)")

    @property
    def n_params(self) -> int:
        return len(self.param_map[0])

    def distances(self, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)
        return np.asarray(self.base_distances_m) + np.asarray(self.param_map) @ theta

    def jittered(self, rng: np.random.Generator, gain_scale: float = 0.2,
                 offset_m: float = 0.005) -> "HandSceneModel":
        """Perturbed copy emulating a different wearer / mounting."""
        gains = tuple(g * rng.uniform(1.0 - gain_scale, 1.0 + gain_scale) for g in self.gains)
        bases = tuple(b + rng.uniform(-offset_m, offset_m) for b in self.base_distances_m)
        return replace(self, gains=gains, base_distances_m=bases)

    def pose_from_params(self, theta: np.ndarray) -> HandPose:
        """Forward kinematics of the toy hand (wrist at the origin).

        Finger f splays in the x-y palm plane and curls toward -z; the
        three interior joint angles are theta_f times the fixed curl
        amplitudes, which :meth:`params_from_pose` inverts.
        """
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (5,) or theta.min() < 0 or theta.max() > 1:
            raise InvalidPoseError(f"need 5 flexion parameters in [0, 1], got {theta}")
        joints = np.zeros((21, 3))
        for f, (chain, fan, lengths) in enumerate(
            zip(FINGER_CHAINS, _FINGER_FAN_DEG, _BONE_LENGTHS_M)
        ):
            ang = math.radians(fan)
            in_plane = np.array([math.sin(ang), math.cos(ang), 0.0])
            pos = np.zeros(3)
            direction = in_plane
            curl = 0.0
            for k, (jid, bone) in enumerate(zip(chain, lengths)):
                if k > 0:
                    curl += theta[f] * math.radians(_CURL_AMPLITUDES_DEG[k - 1])
                    direction = math.cos(curl) * in_plane + math.sin(curl) * np.array([0, 0, -1.0])
                pos = pos + bone * direction
                joints[jid] = pos
        return HandPose(joints=joints)

    def params_from_pose(self, pose: HandPose) -> np.ndarray:
        """Recover flexion parameters from interior joint angles."""
        angles = joint_angles(pose)
        amps = np.asarray(_CURL_AMPLITUDES_DEG)
        return np.clip((angles / amps).mean(axis=1), 0.0, 1.0)

    def scene_for_trajectory(
        self, times_s: np.ndarray, thetas: np.ndarray, *, noise_rms: float = 0.0, seed: int = 0
    ) -> ReflectorScene:
        dists = np.asarray(self.base_distances_m)[None, :] + thetas @ np.asarray(self.param_map).T
        reflectors = tuple(
            Reflector(
                trajectory=tuple((float(t), float(d)) for t, d in zip(times_s, dists[:, r])),
                gain=self.gains[r],
                channel_offsets_m=self.channel_offsets_m[r],
            )
            for r in range(len(self.base_distances_m))
        )
        return ReflectorScene(
            reflectors=reflectors,
            direct_path_gain=self.direct_path_gain,
            noise_rms=noise_rms,
            seed=seed,
            n_channels=self.n_channels,
        )


def render_pose_sequence(
    model: HandSceneModel,
    poses: np.ndarray,
    cfg: FmcwConfig,
    frames_per_pose: int = 1,
    *,
    noise_rms: float = 0.0,
    seed: int = 0,
) -> tuple[np.ndarray, np.ndarray]:
    """Render audio for a sequence of parameter vectors.

    Each pose is held for ``frames_per_pose`` frames with reflector
    distances interpolated linearly between pose waypoints.  Returns
    (audio (n_samples, n_channels), labels (n_frames, n_params)) with
    one parameter vector per frame.
    """
    thetas = np.asarray(poses, dtype=np.float64)
    if thetas.ndim != 2 or thetas.shape[1] != model.n_params:
        raise InvalidPoseError(f"poses must be (k, {model.n_params}), got {thetas.shape}")
    if thetas.min() < 0 or thetas.max() > 1:
        raise InvalidPoseError("pose parameters must lie in [0, 1]")
    if frames_per_pose < 1:
        raise InvalidPoseError("frames_per_pose must be >= 1")
    times = np.arange(thetas.shape[0]) * frames_per_pose * cfg.frame_duration_s
    scene = model.scene_for_trajectory(times, thetas, noise_rms=noise_rms, seed=seed)
    n_frames = thetas.shape[0] * frames_per_pose
    audio = render(scene, cfg, n_frames)
    labels = np.repeat(thetas, frames_per_pose, axis=0)
    return audio, labels


# -- scene files -------------------------------------------------------------

_SCENE_KEYS = {"reflectors", "direct_path_gain", "noise_rms", "seed", "n_channels"}
_REFLECTOR_KEYS = {"gain", "trajectory", "channel_offsets_m"}


def scene_from_dict(doc: dict) -> ReflectorScene:
    unknown = set(doc) - _SCENE_KEYS
    if unknown:
        raise InvalidSceneError(f"unknown scene keys: {sorted(unknown)}")
    reflectors = []
    for r in doc.get("reflectors", []):
        bad = set(r) - _REFLECTOR_KEYS
        if bad:
            raise InvalidSceneError(f"unknown reflector keys: {sorted(bad)}")
        reflectors.append(
            Reflector(
                trajectory=tuple((float(t), float(d)) for t, d in r["trajectory"]),
                gain=float(r.get("gain", 1.0)),
                channel_offsets_m=tuple(float(v) for v in r.get("channel_offsets_m", ())),
            )
        )
    return ReflectorScene(
        reflectors=tuple(reflectors),
        direct_path_gain=float(doc.get("direct_path_gain", 0.0)),
        noise_rms=float(doc.get("noise_rms", 0.0)),
        seed=int(doc.get("seed", 0)),
        n_channels=int(doc.get("n_channels", 2)),
    )


def scene_to_dict(scene: ReflectorScene) -> dict:
    return {
        "reflectors": [
            {
                "gain": r.gain,
                "trajectory": [[t, d] for t, d in r.trajectory],
                "channel_offsets_m": list(r.channel_offsets_m),
            }
            for r in scene.reflectors
        ],
        "direct_path_gain": scene.direct_path_gain,
        "noise_rms": scene.noise_rms,
        "seed": scene.seed,
        "n_channels": scene.n_channels,
    }


def load_scene(path) -> ReflectorScene:
    with open(path) as f:
        return scene_from_dict(json.load(f))


def save_scene(path, scene: ReflectorScene) -> None:
    atomic_write_bytes(path, (json.dumps(scene_to_dict(scene), indent=2) + "\n").encode())
