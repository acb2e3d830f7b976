"""End-to-end wiring: audio -> profiles -> windows -> learner.

Shared by the CLI commands and the synthetic desk-scale experiments.
The synthetic experiment closes the full learning loop: a population of
jittered hand stand-ins generates multi-session audio, the pipeline
builds pose-labeled windows, and the leave-one-participant-out
pretrain/fine-tune protocol runs against increasing fine-tune budgets.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import signal as sps

from .dataset import (
    Session,
    TASK_POSE,
    WindowSample,
    make_windows,
    sample_mask_to_frame_mask,
)
from .echo import CropSpec, differential, echo_profile, stack_channels
from .fmcw import BandpassSpec, FmcwConfig, default_bandpass_spec
from .model import (
    BaselineModel,
    TaskHead,
    TrainSpec,
    HEAD_POSE,
    evaluate,
    finetune,
    fit,
    predict,
)
from .simulate import HandSceneModel, render_pose_sequence


def stacked_profile(
    audio: np.ndarray,
    cfg: FmcwConfig,
    crop: CropSpec,
    *,
    n_frames: int | None = None,
    bandpass_spec: BandpassSpec | None = None,
    tx_start_offset: int = 0,
    sample_mask: np.ndarray | None = None,
    shaped_reference: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Original + differential profiles stacked along channels, as float32.

    Returns (tensor [frames x pixels x 2*n_ch], frame_mask).  A frame is
    masked when its samples or its look-ahead reach overlap a masked
    sample, so windowing can drop every window a loss gap could touch.
    ``shaped_reference`` correlates against the range-sidelobe-suppressed
    reference instead of the raw sweep.
    """
    from .fmcw import shaped_correlation_reference

    prof = echo_profile(
        audio,
        cfg,
        crop,
        n_frames=n_frames,
        tx_start_offset=tx_start_offset,
        apply_bandpass=bandpass_spec is not None,
        bandpass_spec=bandpass_spec,
        tx_ref=shaped_correlation_reference(cfg) if shaped_reference else None,
    )
    stacked = stack_channels(prof, differential(prof)).astype(np.float32)
    f = prof.n_frames
    if sample_mask is None:
        mask = np.zeros(f, dtype=bool)
    else:
        m = np.asarray(sample_mask, dtype=bool)[tx_start_offset:]
        n = cfg.frame_len_samples
        reach = crop.start_pixel + crop.n_pixels
        mask = sample_mask_to_frame_mask(m, n, f)
        for k in range(f):  # look-ahead reach into the following samples
            lo = (k + 1) * n
            hi = min(lo + reach, m.size)
            if hi > lo and m[lo:hi].any():
                mask[k] = True
    return stacked, mask


def lowpass_noise(n_samples: int, rate_hz: int, high_hz: float,
                  rng: np.random.Generator, channels: int = 1) -> np.ndarray:
    """Band-limited noise confined below ``high_hz`` (unit RMS per channel)."""
    taps = sps.firwin(401, high_hz - 500.0, fs=rate_hz)
    x = rng.standard_normal((n_samples, channels))
    y = sps.fftconvolve(x, taps[:, None], mode="same", axes=0)
    return y / np.sqrt(np.mean(y**2, axis=0, keepdims=True))


# -- synthetic multi-user experiment ------------------------------------------


def synthetic_motion(
    n_frames: int,
    n_params: int,
    frame_duration_s: float,
    rng: np.random.Generator,
    *,
    hold_s: tuple[float, float] = (1.2, 2.0),
    ramp_s: float = 0.5,
) -> np.ndarray:
    """Move-and-hold flexion trajectories in [0, 1] per parameter.

    Random targets are held for a second or two and connected by
    raised-cosine ramps, the way prompted gestures are performed.
    Unhurried ramps keep the range-Doppler coupling of a moving
    reflector small compared to its position swing.
    """
    theta = np.empty((n_frames, n_params))
    for f in range(n_params):
        pos = 0
        cur = rng.uniform(0.0, 1.0)
        while pos < n_frames:
            hold = max(1, int(rng.uniform(*hold_s) / frame_duration_s))
            theta[pos : pos + hold, f] = cur
            pos += hold
            if pos >= n_frames:
                break
            nxt = rng.uniform(0.0, 1.0)
            ramp = max(1, int(ramp_s / frame_duration_s))
            k = np.arange(min(ramp, n_frames - pos))
            theta[pos : pos + k.size, f] = cur + (nxt - cur) * 0.5 * (
                1.0 - np.cos(np.pi * (k + 1) / ramp)
            )
            pos += k.size
            cur = nxt
    return theta


def synthetic_session(
    hand: HandSceneModel,
    cfg: FmcwConfig,
    n_frames: int,
    *,
    session_id: str,
    participant_id: str,
    seed: int,
    noise_rms: float = 0.02,
) -> Session:
    """Render one session; audio carries one extra frame of look-ahead."""
    rng = np.random.default_rng(seed)
    theta = synthetic_motion(n_frames + 1, hand.n_params, cfg.frame_duration_s, rng)
    audio, labels = render_pose_sequence(
        hand, theta, cfg, frames_per_pose=1, noise_rms=noise_rms, seed=seed
    )
    return Session(
        session_id=session_id,
        participant_id=participant_id,
        audio=audio,
        labels=labels[:n_frames],
    )


def synthetic_users(
    n_users: int,
    sessions_per_user: int,
    frames_per_session: int,
    cfg: FmcwConfig,
    *,
    seed: int = 0,
    base: HandSceneModel | None = None,
    noise_rms: float = 0.02,
) -> tuple[dict[str, HandSceneModel], list[Session]]:
    """A population of jittered hand stand-ins with rendered sessions.

    User-level jitter emulates different wearers; a smaller session
    jitter emulates remounting between sessions.
    """
    base = base or HandSceneModel()
    rng = np.random.default_rng(seed)
    hands: dict[str, HandSceneModel] = {}
    sessions: list[Session] = []
    for u in range(n_users):
        pid = f"p{u + 1:02d}"
        hand = base.jittered(rng, gain_scale=0.25, offset_m=0.006)
        hands[pid] = hand
        for s in range(sessions_per_user):
            mounted = hand.jittered(rng, gain_scale=0.05, offset_m=0.001)
            sessions.append(
                synthetic_session(
                    mounted,
                    cfg,
                    frames_per_session,
                    session_id=f"{pid}_s{s + 1:02d}",
                    participant_id=pid,
                    seed=int(rng.integers(0, 2**31)),
                    noise_rms=noise_rms,
                )
            )
    return hands, sessions


def pose_labels_from_params(hand: HandSceneModel, thetas: np.ndarray) -> np.ndarray:
    """Flatten the toy-hand joints (minus the wrist) into 60-dim labels."""
    out = np.empty((thetas.shape[0], 60))
    for i, theta in enumerate(thetas):
        out[i] = hand.pose_from_params(theta).joints[1:].ravel()
    return out


def session_pose_windows(
    session: Session,
    hand: HandSceneModel,
    cfg: FmcwConfig,
    crop: CropSpec,
    *,
    window_len: int = 72,
    stride: int = 2,
    bandpass_spec: BandpassSpec | None = None,
    max_fraction: float = 1.0,
    audio_override: np.ndarray | None = None,
    shaped_reference: bool = True,
) -> list[WindowSample]:
    """Windows of one synthetic session, optionally only a leading fraction."""
    theta = np.asarray(session.labels)
    n_frames = theta.shape[0]
    audio = session.audio if audio_override is None else audio_override
    tensor, frame_mask = stacked_profile(
        audio, cfg, crop, n_frames=n_frames, bandpass_spec=bandpass_spec,
        sample_mask=session.gap_mask, shaped_reference=shaped_reference,
    )
    labels = pose_labels_from_params(hand, theta)
    windows = list(
        make_windows(
            tensor, labels, TASK_POSE,
            window_len=window_len, stride=stride,
            frame_mask=frame_mask, session_id=session.session_id,
        )
    )
    if max_fraction < 1.0:
        cutoff = int(max_fraction * n_frames)
        windows = [w for w in windows if w.source[1] + window_len <= cutoff]
    return windows


def r2_per_parameter(hand: HandSceneModel, model: BaselineModel,
                     windows: list[WindowSample]) -> np.ndarray:
    """Coefficient of determination per flexion parameter on held-out windows.

    True parameters come from inverting the label kinematics; predicted
    parameters from inverting the predicted pose the same way.
    """
    from .model import _pose_from_output  # shared pose reconstruction

    truth, pred = [], []
    for w in windows:
        truth.append(hand.params_from_pose(_pose_from_output(w.label)))
        pred.append(hand.params_from_pose(_pose_from_output(predict(model, w.tensor).ravel())))
    t = np.asarray(truth)
    p = np.asarray(pred)
    ss_res = np.sum((t - p) ** 2, axis=0)
    ss_tot = np.sum((t - t.mean(axis=0)) ** 2, axis=0)
    return 1.0 - ss_res / ss_tot


@dataclass
class LopoBudgetResult:
    held_out: str
    budgets: tuple[float, ...]
    mjede_by_budget: dict[float, float]
    r2_by_budget: dict[float, np.ndarray]
    pretrained: BaselineModel
    finetuned: dict[float, BaselineModel]
    test_windows: list[WindowSample] = field(repr=False, default_factory=list)
    test_sessions: list[Session] = field(repr=False, default_factory=list)
    hand: HandSceneModel | None = None


def run_lopo_budget_sweep(
    n_users: int = 12,
    sessions_per_user: int = 6,
    frames_per_session: int = 168,
    budgets: tuple[float, ...] = (0.0, 0.5, 1.0, 2.0, 4.0),
    *,
    seed: int = 0,
    cfg: FmcwConfig | None = None,
    crop: CropSpec | None = None,
    window_len: int = 72,
    stride: int = 2,
    test_sessions: int = 2,
    spec: TrainSpec | None = None,
    use_bandpass: bool = True,
    held_out: str | None = None,
) -> LopoBudgetResult:
    """Pretrain on all users but one, fine-tune on the held-out user's
    budget, test on that user's last sessions.

    Mirrors the two-step protocol: the user-independent model never sees
    the held-out participant; fine-tune budgets are nested prefixes of
    their earlier sessions; the final sessions are test-only.
    """
    from .dataset import split_lopo, take_budget

    cfg = cfg or FmcwConfig()
    crop = crop or CropSpec(0, 110)
    spec = spec or TrainSpec(seed=seed)
    bp = default_bandpass_spec(cfg) if use_bandpass else None
    hands, sessions = synthetic_users(
        n_users, sessions_per_user, frames_per_session, cfg, seed=seed
    )
    held_out = held_out or sorted(hands)[-1]
    train_sessions, candidates = split_lopo(sessions, held_out)
    ft_candidates = candidates[:-test_sessions]
    test_set = candidates[-test_sessions:]

    def windows_of(sess: Session, fraction: float = 1.0) -> list[WindowSample]:
        return session_pose_windows(
            sess, hands[sess.participant_id], cfg, crop,
            window_len=window_len, stride=stride, bandpass_spec=bp,
            max_fraction=fraction,
        )

    train_windows: list[WindowSample] = []
    for s in train_sessions:
        train_windows.extend(windows_of(s))
    head = TaskHead(HEAD_POSE)
    pretrained = fit(BaselineModel(head=head), train_windows, head, spec)

    test_windows: list[WindowSample] = []
    for s in test_set:
        test_windows.extend(windows_of(s))

    hand = hands[held_out]
    mjede_by_budget: dict[float, float] = {}
    r2_by_budget: dict[float, np.ndarray] = {}
    finetuned: dict[float, BaselineModel] = {}
    for budget in budgets:
        ft_windows: list[WindowSample] = []
        for sess, fraction in take_budget(ft_candidates, budget):
            ft_windows.extend(windows_of(sess, fraction))
        tuned = finetune(pretrained, ft_windows, spec)
        finetuned[budget] = tuned
        report = evaluate(tuned, test_windows, head)
        mjede_by_budget[budget] = report.metrics["mjede_m"]
        r2_by_budget[budget] = r2_per_parameter(hand, tuned, test_windows)
    return LopoBudgetResult(
        held_out=held_out,
        budgets=tuple(budgets),
        mjede_by_budget=mjede_by_budget,
        r2_by_budget=r2_by_budget,
        pretrained=pretrained,
        finetuned=finetuned,
        test_windows=test_windows,
        test_sessions=test_set,
        hand=hand,
    )
