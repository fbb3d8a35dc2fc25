"""Diarization post-processing, scoring and separation metrics.

Activity probabilities are smoothed per source with a sliding median,
thresholded to binary decisions, and scored frame by frame: diarization
error is (missed + false-alarm + confused) frames over reference speech
frames with no collar, and source counting compares per-clip active
speaker counts.  SI-SDR scores separated waveforms against references
with least-squares scale matching.  Frame-level activities can be
exchanged as CSV or RTTM segment files.
"""

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import median_filter

from .core import ActivityMask, SepdiarError

SI_SDR_CAP = 300.0
MIN_ACTIVE_FRAMES = 10


class EvenWidth(SepdiarError):
    pass


class EmptyReference(SepdiarError):
    pass


class ZeroReference(SepdiarError):
    pass


@dataclass(frozen=True)
class DiarizationResult:
    activity: np.ndarray  # (N, T) binary
    frame_rate: float     # frames per second
    clip_length: float    # seconds


def _as_matrix(activity):
    if isinstance(activity, ActivityMask):
        return activity.matrix.astype(np.float64)
    if isinstance(activity, DiarizationResult):
        return activity.activity.astype(np.float64)
    arr = np.asarray(activity, dtype=np.float64)
    return arr[None, :] if arr.ndim == 1 else arr


def median_smooth(eta, width):
    """Per-source sliding median with edge replication; width 1 is the
    identity."""
    if width % 2 == 0 or width < 1:
        raise EvenWidth(f"median width must be odd and >= 1, got {width}")
    eta_NT = _as_matrix(eta)
    if width == 1:
        return eta_NT.copy()
    return median_filter(eta_NT, size=(1, width), mode="nearest")


def threshold(eta, theta=0.5):
    """Binary decisions; ties at the threshold count as active."""
    if not 0.0 < theta < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {theta}")
    return (_as_matrix(eta) >= theta).astype(np.uint8)


def der(est, ref):
    """Frame-level diarization error rate, no collar.

    Rows must already be aligned (see objectives.pit_align).  Per frame
    the error is max(ref_count, est_count) - correct_count; the total is
    normalized by the number of reference speech frames.
    """
    est_NT = _as_matrix(est)
    ref_NT = _as_matrix(ref)
    if est_NT.shape != ref_NT.shape:
        raise ValueError(f"shape mismatch {est_NT.shape} vs {ref_NT.shape}")
    ref_T = ref_NT.sum(axis=0)
    est_T = est_NT.sum(axis=0)
    correct_T = (est_NT * ref_NT).sum(axis=0)
    total_ref = ref_T.sum()
    if total_ref == 0:
        raise EmptyReference("reference contains no speech frames")
    error_T = np.maximum(ref_T, est_T) - correct_T
    return float(error_T.sum() / total_ref)


def count_speakers(activity, min_active=MIN_ACTIVE_FRAMES):
    """Number of sources with at least min_active active frames."""
    act_NT = _as_matrix(activity)
    return int(np.sum(act_NT.sum(axis=1) >= min_active))


def sca(est, ref, clip_frames, min_active=MIN_ACTIVE_FRAMES):
    """Source counting accuracy over consecutive clips.

    Both hypothesis and reference counts use the same rule: a speaker is
    counted in a clip when active for at least min_active frames there.
    """
    if clip_frames < 1:
        raise ValueError("clip_frames must be >= 1")
    est_NT = _as_matrix(est)
    ref_NT = _as_matrix(ref)
    if est_NT.shape[1] != ref_NT.shape[1]:
        raise ValueError("hypothesis and reference frame counts differ")
    T = est_NT.shape[1]
    hits, clips = 0, 0
    for start in range(0, T, clip_frames):
        stop = min(start + clip_frames, T)
        n_est = count_speakers(est_NT[:, start:stop], min_active)
        n_ref = count_speakers(ref_NT[:, start:stop], min_active)
        hits += int(n_est == n_ref)
        clips += 1
    return hits / clips


def si_sdr(estimate, reference):
    """Scale-invariant signal-to-distortion ratio in dB, capped at
    300 dB for exact matches."""
    est_S = np.asarray(estimate, dtype=np.float64).ravel()
    ref_S = np.asarray(reference, dtype=np.float64).ravel()
    if est_S.shape != ref_S.shape:
        raise ValueError("estimate and reference lengths differ")
    ref_energy = float(ref_S @ ref_S)
    if ref_energy == 0.0:
        raise ZeroReference("reference signal is all zero")
    alpha = float(est_S @ ref_S) / ref_energy
    target_S = alpha * ref_S
    noise_S = est_S - target_S
    target_energy = float(target_S @ target_S)
    noise_energy = float(noise_S @ noise_S)
    if target_energy == 0.0:
        return -SI_SDR_CAP
    if noise_energy == 0.0:
        return SI_SDR_CAP
    return float(min(10.0 * np.log10(target_energy / noise_energy),
                     SI_SDR_CAP))


def write_activity_csv(path, activity):
    """Rows are sources, columns are frames; full-precision decimals."""
    act_NT = _as_matrix(activity)
    lines = [",".join(repr(float(v)) for v in row) for row in act_NT]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_activity_csv(path):
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append([float(v) for v in line.split(",")])
    return np.array(rows, dtype=np.float64)


def write_rttm(path, activity, frame_rate, file_id="clip",
               speaker_names=None):
    """Segment export: each run of active frames becomes one SPEAKER
    line; frame t is stamped at its center time t / frame_rate."""
    act_NT = _as_matrix(activity) > 0.5
    N, T = act_NT.shape
    if speaker_names is None:
        speaker_names = [f"spk{n}" for n in range(N)]
    lines = []
    for n in range(N):
        padded = np.concatenate([[0], act_NT[n].astype(int), [0]])
        edges = np.diff(padded)
        starts = np.where(edges == 1)[0]
        stops = np.where(edges == -1)[0]
        for t0, t1 in zip(starts, stops):
            onset = t0 / frame_rate
            duration = (t1 - t0) / frame_rate
            lines.append(
                f"SPEAKER {file_id} 1 {onset:.3f} {duration:.3f} "
                f"<NA> <NA> {speaker_names[n]} <NA> <NA>")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def read_rttm(path, num_frames, frame_rate):
    """Segments are snapped to the frame grid: a segment covers the
    half-open frame range round(onset * frame_rate) to
    round((onset + duration) * frame_rate), so boundaries that sit on
    a frame center are immune to float rounding.  Speakers are ordered
    by first appearance."""
    segments = []
    order = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            parts = line.split()
            if len(parts) < 8 or parts[0] != "SPEAKER":
                continue
            onset, duration, name = float(parts[3]), float(parts[4]), parts[7]
            if name not in order:
                order.append(name)
            segments.append((name, onset, duration))
    act_NT = np.zeros((len(order), num_frames), dtype=np.uint8)
    for name, onset, duration in segments:
        n = order.index(name)
        start = int(round(onset * frame_rate))
        stop = int(round((onset + duration) * frame_rate))
        start = min(max(start, 0), num_frames)
        stop = min(max(stop, 0), num_frames)
        act_NT[n, start:stop] = 1
    return ActivityMask.from_array(act_NT), order
