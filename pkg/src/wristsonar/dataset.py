"""Dataset construction: sync, windowing, augmentation, noise, splits.

Sessions pair received audio with a time-aligned label stream; windows
slice stacked echo-profile tensors into learner inputs.  Window
production is a pull-based stream (generators), so large sessions never
materialize every window tensor at once.  Augmentation draws from an
explicitly seeded generator, keeping results deterministic under
parallel session processing.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np
from scipy import signal as sps

from . import link as link_mod
from .audio_io import atomic_write_bytes
from .echo import EchoProfile, KIND_STACKED, pixel_distance_m, read_echp, write_echp
from .pose import HandPose, ReferencePose, normalize, v9_of

TASK_POSE = "pose"
TASK_WRIST = "wrist"
TASK_INTERACTION = "interaction"
TASKS = (TASK_POSE, TASK_WRIST, TASK_INTERACTION)

LABEL_DIMS = {TASK_POSE: 60, TASK_WRIST: 3}
N_INTERACTION_CLASSES = 12
DEFAULT_WINDOW = {TASK_POSE: 72, TASK_WRIST: 72, TASK_INTERACTION: 1050}

# Tags from the recorded noise scenarios, as relative dB(A) metadata.
NOISE_SCENARIO_DB_A = {
    "cafe": 61.8,
    "curbside": 71.5,
    "background_music": 70.4,
}


class NoImpulseError(ValueError):
    pass


class LabelGapError(ValueError):
    pass


class InvalidLevelError(ValueError):
    pass


class UnknownParticipantError(KeyError):
    pass


@dataclass
class Session:
    """One recording session of one participant.

    ``audio`` and ``labels`` may be file paths (manifest-driven runs)
    or in-memory arrays (synthetic runs).  ``sync_offset_s`` is the
    audio time at which the label clock reads zero.
    """

    session_id: str
    participant_id: str
    audio: object = None
    labels: object = None
    sync_offset_s: float = 0.0
    gap_mask: np.ndarray | None = None

    def __post_init__(self):
        if self.gap_mask is not None:
            self.gap_mask = np.asarray(self.gap_mask, dtype=bool)


@dataclass(frozen=True)
class Trial:
    """One labeled interaction trial, in frame indices."""

    start_frame: int
    end_frame: int
    class_id: int

    def __post_init__(self):
        if not 0 <= self.class_id < N_INTERACTION_CLASSES:
            raise ValueError(f"class_id must be in 0..{N_INTERACTION_CLASSES - 1}")
        if self.end_frame <= self.start_frame:
            raise ValueError("trial must span at least one frame")


@dataclass(frozen=True)
class WindowSample:
    """One learner input: tensor [W x P x C] plus its label and provenance."""

    tensor: np.ndarray
    label: object
    source: tuple[str, int]  # (session_id, start frame index)


@dataclass(frozen=True)
class AugmentSpec:
    shift_pixels: int = 11
    gain_low: float = 0.95
    gain_high: float = 1.05
    gain_prob: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.shift_pixels < 0:
            raise ValueError("shift_pixels must be >= 0")
        if not self.gain_low <= self.gain_high:
            raise ValueError("need gain_low <= gain_high")
        if not 0.0 <= self.gain_prob <= 1.0:
            raise ValueError("gain_prob must be in [0, 1]")


def detect_sync(audio: np.ndarray, rate_hz: int, *, low_hz: float = 15000.0,
                win_s: float = 0.002, ratio: float = 8.0) -> float:
    """Timestamp of the first broadband impulse (e.g. a finger snap).

    The sweep band is removed with a lowpass first, so a continuous
    sweep train alone never triggers; the detector then looks for the
    first short-time-energy burst above an adaptive (median-based)
    floor.  Raises :class:`NoImpulseError` when nothing qualifies.
    """
    x = np.asarray(audio, dtype=np.float64)
    if x.ndim == 2:
        x = x.mean(axis=1)
    if x.size == 0:
        raise NoImpulseError("empty audio")
    if rate_hz <= 2 * low_hz:
        raise InvalidLevelError(f"rate {rate_hz} too low for {low_hz} Hz sync band")
    taps = sps.firwin(201, low_hz, fs=rate_hz)
    low = sps.fftconvolve(x, taps, mode="same")
    win = max(8, int(round(win_s * rate_hz)))
    hop = max(1, win // 2)
    n_win = 1 + max(0, (low.size - win)) // hop
    if n_win < 4:
        raise NoImpulseError("audio too short for sync detection")
    idx = np.arange(n_win)[:, None] * hop + np.arange(win)
    energy = np.sum(low[idx] ** 2, axis=1)
    floor = float(np.median(energy))
    thresh = max(ratio * floor, 1e-9 * float(energy.max(initial=0.0)))
    hits = np.nonzero(energy > thresh)[0]
    if hits.size == 0:
        raise NoImpulseError("no impulse found above the adaptive threshold")
    return float(hits[0] * hop) / rate_hz


def align_pose_labels(
    poses: list[HandPose],
    n_frames: int,
    frame_duration_s: float,
    *,
    task: str,
    sync_offset_s: float = 0.0,
    ref: ReferencePose | None = None,
    measured_v17_m: float | None = None,
    max_gap_s: float | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Resample a pose record stream onto echo frames.

    Each frame takes the pose record nearest to its end time (the
    moment the window predicts).  Pose-task labels are the 60 flattened
    non-wrist coordinates of the normalized pose; wrist-task labels are
    the raw wrist-to-palm vector (normalization is deliberately not
    applied so rotations stay faithful).  Returns (labels, valid_mask);
    frames with no record within ``max_gap_s`` are marked invalid.
    """
    if task not in (TASK_POSE, TASK_WRIST):
        raise ValueError(f"task must be pose or wrist, got {task!r}")
    if not poses:
        raise LabelGapError("no pose records")
    if task == TASK_POSE and (ref is None or measured_v17_m is None):
        raise ValueError("pose task needs a reference pose and measured_v17_m")
    if max_gap_s is None:
        max_gap_s = 2.0 * frame_duration_s
    times = np.array([p.timestamp for p in poses])
    order = np.argsort(times, kind="stable")
    times = times[order]
    frame_ends = (np.arange(n_frames) + 1) * frame_duration_s - sync_offset_s
    if len(times) == 1:
        pick = np.zeros(n_frames, dtype=int)
    else:
        pick = np.clip(np.searchsorted(times, frame_ends), 1, len(times) - 1)
        pick = np.where(
            np.abs(times[pick] - frame_ends) <= np.abs(times[pick - 1] - frame_ends),
            pick,
            pick - 1,
        )
    valid = np.abs(times[pick] - frame_ends) <= max_gap_s

    dim = LABEL_DIMS[task]
    labels = np.zeros((n_frames, dim))
    cache: dict[int, np.ndarray] = {}
    for f in range(n_frames):
        if not valid[f]:
            continue
        k = int(pick[f])
        if k not in cache:
            p = poses[order[k]]
            if task == TASK_POSE:
                cache[k] = normalize(p, ref, measured_v17_m).joints[1:].ravel()
            else:
                cache[k] = v9_of(p)
        labels[f] = cache[k]
    return labels, valid


def make_windows(
    tensor: np.ndarray,
    labels,
    task: str,
    *,
    window_len: int | None = None,
    stride: int = 1,
    frame_mask: np.ndarray | None = None,
    session_id: str = "",
    standardize: bool = False,
) -> Iterator[WindowSample]:
    """Slice a stacked profile tensor [frames x pixels x channels] into windows.

    Pose/wrist windows are labeled by the last frame's label and walk
    the stream with ``stride``; interaction windows take one window per
    trial, centered on it and zero-padded to the window length.
    Windows touching masked (data-loss or label-gap) frames are
    dropped.  ``standardize`` optionally zero-means/unit-scales each
    window tensor.
    """
    t = np.asarray(tensor)
    if t.ndim != 3:
        raise ValueError(f"tensor must be 3-D, got shape {t.shape}")
    n_frames = t.shape[0]
    w = DEFAULT_WINDOW[task] if window_len is None else int(window_len)
    if w < 1 or stride < 1:
        raise ValueError("window_len and stride must be >= 1")
    masked = np.zeros(n_frames, dtype=bool) if frame_mask is None else np.asarray(frame_mask, dtype=bool)
    if masked.shape != (n_frames,):
        raise ValueError(f"frame_mask shape {masked.shape} != ({n_frames},)")
    bad_cum = np.concatenate([[0], np.cumsum(masked)])

    def finish(win: np.ndarray) -> np.ndarray:
        if standardize:
            mu = win.mean()
            sd = win.std()
            win = (win - mu) / (sd if sd > 0 else 1.0)
        return win

    if task in (TASK_POSE, TASK_WRIST):
        lab = np.asarray(labels)
        if lab.ndim != 2 or lab.shape[0] != n_frames:
            raise LabelGapError(
                f"labels shape {lab.shape} does not cover {n_frames} frames"
            )
        if lab.shape[1] != LABEL_DIMS[task]:
            raise LabelGapError(
                f"{task} labels must have dimension {LABEL_DIMS[task]}, got {lab.shape[1]}"
            )
        for end in range(w - 1, n_frames, stride):
            start = end - w + 1
            if bad_cum[end + 1] - bad_cum[start]:
                continue
            yield WindowSample(finish(t[start : end + 1]), lab[end].copy(), (session_id, start))
    elif task == TASK_INTERACTION:
        for trial in labels:
            center = (trial.start_frame + trial.end_frame) // 2
            start = center - w // 2
            lo = max(0, start)
            hi = min(n_frames, start + w)
            if hi <= lo:
                continue
            if bad_cum[hi] - bad_cum[lo]:
                continue
            win = np.zeros((w,) + t.shape[1:], dtype=t.dtype)
            win[lo - start : hi - start] = t[lo:hi]
            yield WindowSample(finish(win), int(trial.class_id), (session_id, start))
    else:
        raise ValueError(f"unknown task {task!r}")


def augment(w: WindowSample, spec: AugmentSpec, rng: np.random.Generator | None = None) -> WindowSample:
    """Shift the pixel axis with zero fill and apply per-element gain jitter.

    The shift is drawn uniformly from {-shift_pixels .. +shift_pixels};
    a physical band shift cannot wrap distances, so vacated pixels are
    zero-filled rather than wrapped.  With probability ``gain_prob``
    every element is scaled by an independent uniform factor.  The
    label is untouched.  Without an explicit generator a fresh one is
    seeded from the spec, so repeated calls are identical.
    """
    if rng is None:
        rng = np.random.default_rng(spec.seed)
    x = np.array(w.tensor, copy=True)
    shift = int(rng.integers(-spec.shift_pixels, spec.shift_pixels + 1)) if spec.shift_pixels else 0
    if shift:
        out = np.zeros_like(x)
        if shift > 0:
            out[:, shift:] = x[:, :-shift]
        else:
            out[:, :shift] = x[:, -shift:]
        x = out
    if spec.gain_prob > 0 and rng.random() < spec.gain_prob:
        x *= rng.uniform(spec.gain_low, spec.gain_high, size=x.shape)
    return replace(w, tensor=x)


def inject_noise(
    test_audio: np.ndarray,
    noise_audio: np.ndarray,
    level_db_a: float,
    *,
    calibration_db_a: float = 94.0,
    loop: bool = False,
) -> np.ndarray:
    """Add recorded noise to test audio at a tagged level.

    Absolute acoustic calibration is impossible at desk scale, so the
    level is relative: at ``level_db_a == calibration_db_a`` the noise
    is scaled to the RMS of the test audio, and every 20 dB(A) below
    that divides the noise RMS by 10.  Training data is never touched
    by this function; injection happens at test time only.
    """
    if not (math.isfinite(level_db_a) and math.isfinite(calibration_db_a)):
        raise InvalidLevelError(f"non-finite noise level {level_db_a}")
    x = np.asarray(test_audio, dtype=np.float64)
    noise = np.asarray(noise_audio, dtype=np.float64)
    if noise.ndim == 1 and x.ndim == 2:
        noise = noise[:, None] * np.ones((1, x.shape[1]))
    if noise.shape[0] < x.shape[0]:
        if not loop:
            raise InvalidLevelError(
                f"noise ({noise.shape[0]} samples) shorter than test audio "
                f"({x.shape[0]}); pass loop=True to tile it"
            )
        reps = -(-x.shape[0] // noise.shape[0])
        noise = np.concatenate([noise] * reps, axis=0)
    noise = noise[: x.shape[0]]
    noise_rms = float(np.sqrt(np.mean(noise**2)))
    if noise_rms == 0.0:
        return x.copy()
    target_rms = float(np.sqrt(np.mean(x**2))) * 10.0 ** ((level_db_a - calibration_db_a) / 20.0)
    return x + noise * (target_rms / noise_rms)


def split_lopo(sessions: Iterable[Session], held_out_participant: str) -> tuple[list[Session], list[Session]]:
    """Leave-one-participant-out split.

    Returns (train sessions from every other participant, the held-out
    participant's sessions ordered by session id) — the latter are the
    fine-tune candidates, from which the caller carves test sessions.
    """
    sessions = list(sessions)
    participants = {s.participant_id for s in sessions}
    if held_out_participant not in participants:
        raise UnknownParticipantError(held_out_participant)
    train = [s for s in sessions if s.participant_id != held_out_participant]
    held = sorted(
        (s for s in sessions if s.participant_id == held_out_participant),
        key=lambda s: s.session_id,
    )
    return train, held


def take_budget(candidates: list[Session], budget_sessions: float) -> list[tuple[Session, float]]:
    """Select fine-tune data: (session, fraction of its frames to use).

    Fractional budgets take the leading fraction of the next session by
    frame count, so smaller budgets are strict prefixes of larger ones.
    """
    if budget_sessions < 0 or budget_sessions > len(candidates):
        raise ValueError(
            f"budget {budget_sessions} outside 0..{len(candidates)} sessions"
        )
    out: list[tuple[Session, float]] = []
    remaining = float(budget_sessions)
    for s in candidates:
        if remaining <= 0:
            break
        frac = min(1.0, remaining)
        out.append((s, frac))
        remaining -= frac
    return out


def zero_fill_gaps(packets, cfg) -> tuple[np.ndarray, np.ndarray]:
    """Reassemble a packet stream into audio plus a per-sample gap mask.

    Thin wrapper over the link receiver so windowing can drop windows
    that overlap lost periods.
    """
    return link_mod.receive(packets, cfg)


def sample_mask_to_frame_mask(mask: np.ndarray, frame_len: int, n_frames: int) -> np.ndarray:
    """A frame is masked when any of its samples is masked."""
    m = np.asarray(mask, dtype=bool)[: n_frames * frame_len]
    m = np.concatenate([m, np.zeros(n_frames * frame_len - m.size, dtype=bool)])
    return m.reshape(n_frames, frame_len).any(axis=1)


# -- manifest + window export ------------------------------------------------

_SESSION_KEYS = {"id", "audio", "joints", "class_labels", "sync_offset_s"}


def load_manifest(path) -> list[Session]:
    """Read a dataset manifest into Session records (paths unresolved)."""
    doc = json.loads(Path(path).read_text())
    unknown = set(doc) - {"participants"}
    if unknown:
        raise ValueError(f"unknown manifest keys: {sorted(unknown)}")
    base = Path(path).parent
    sessions = []
    for part in doc.get("participants", []):
        bad = set(part) - {"id", "sessions"}
        if bad:
            raise ValueError(f"unknown participant keys: {sorted(bad)}")
        for sess in part.get("sessions", []):
            bad = set(sess) - _SESSION_KEYS
            if bad:
                raise ValueError(f"unknown session keys: {sorted(bad)}")
            labels = sess.get("joints", sess.get("class_labels"))
            sessions.append(
                Session(
                    session_id=str(sess["id"]),
                    participant_id=str(part["id"]),
                    audio=str(base / sess["audio"]) if "audio" in sess else None,
                    labels=str(base / labels) if isinstance(labels, str) else labels,
                    sync_offset_s=float(sess.get("sync_offset_s", 0.0)),
                )
            )
    return sessions


def save_manifest(path, sessions: Iterable[Session], label_key: str = "joints") -> None:
    by_part: dict[str, list[Session]] = {}
    for s in sessions:
        by_part.setdefault(s.participant_id, []).append(s)
    doc = {
        "participants": [
            {
                "id": pid,
                "sessions": [
                    {
                        "id": s.session_id,
                        "audio": str(s.audio),
                        label_key: str(s.labels),
                        "sync_offset_s": s.sync_offset_s,
                    }
                    for s in sess
                ],
            }
            for pid, sess in by_part.items()
        ]
    }
    atomic_write_bytes(path, (json.dumps(doc, indent=2) + "\n").encode())


def export_windows(out_dir, windows: Iterable[WindowSample], rate_hz: int = 50_000) -> int:
    """Write window tensors (one ECHP file each) plus a JSONL sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    records = []
    count = 0
    for i, w in enumerate(windows):
        name = f"window_{i:06d}.echp"
        prof = EchoProfile(
            data=np.asarray(w.tensor, dtype=np.float64),
            pixel_distance_m=pixel_distance_m(rate_hz),
            kind=KIND_STACKED,
        )
        write_echp(out / name, prof)
        label = w.label.tolist() if isinstance(w.label, np.ndarray) else w.label
        records.append(json.dumps(
            {"file": name, "label": label, "session": w.source[0], "start_frame": w.source[1]}
        ))
        count += 1
    atomic_write_bytes(out / "windows.jsonl", ("\n".join(records) + "\n").encode())
    return count


def import_windows(in_dir) -> list[WindowSample]:
    src = Path(in_dir)
    out = []
    with open(src / "windows.jsonl") as f:
        for line in f:
            rec = json.loads(line)
            prof = read_echp(src / rec["file"])
            label = rec["label"]
            if isinstance(label, list):
                label = np.asarray(label, dtype=np.float64)
            out.append(WindowSample(prof.data, label, (rec["session"], rec["start_frame"])))
    return out
