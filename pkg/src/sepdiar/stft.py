"""Forward and inverse short-time Fourier transform plus WAV helpers.

Analysis uses a periodic taper with reflect padding of half a window at
both signal ends, so frame t is centered at sample t * hop and the frame
count is len(signal) // hop + 1.  Synthesis is weighted overlap-add with
the same taper and pointwise division by the accumulated squared-window
envelope, which reconstructs interior samples exactly for any
nonzero-overlap-add window/hop pair.
"""

from dataclasses import dataclass

import numpy as np
from scipy.io import wavfile

from .core import DimensionMismatch, SepdiarError, Spectrogram


class SignalTooShort(SepdiarError):
    pass


class InvalidWindow(SepdiarError):
    pass


class UnsupportedRate(SepdiarError):
    pass


def make_window(name, size):
    if name == "hann":
        n = np.arange(size)
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / size)
    if name == "rect":
        return np.ones(size)
    raise InvalidWindow(f"unknown window taper {name!r}")


def _check_nola(window, hop):
    """Every sample of the overlapped squared-window envelope must stay
    positive, otherwise overlap-add synthesis cannot invert the analysis."""
    size = len(window)
    reps = size // hop + 3
    env = np.zeros(size + (reps - 1) * hop)
    for k in range(reps):
        env[k * hop:k * hop + size] += window ** 2
    interior = env[size:len(env) - size] if len(env) > 2 * size else env
    if interior.size == 0 or interior.min() <= 1e-10:
        raise InvalidWindow(
            f"window/hop pair ({size}, {hop}) leaves overlap-add gaps")


@dataclass(frozen=True)
class StftConfig:
    window_size: int = 512
    hop: int = 160
    window: str = "hann"
    sample_rate: float = 16000.0

    def __post_init__(self):
        if self.window_size <= 0 or self.window_size % 2 != 0:
            raise InvalidWindow(f"window_size must be even and positive, "
                                f"got {self.window_size}")
        if not 0 < self.hop <= self.window_size:
            raise InvalidWindow(f"hop must satisfy 0 < hop <= window_size, "
                                f"got {self.hop}")
        _check_nola(make_window(self.window, self.window_size), self.hop)

    @property
    def num_freqs(self):
        return self.window_size // 2 + 1


def frame_count(num_samples, cfg):
    return num_samples // cfg.hop + 1


def stft(signal, cfg=None):
    """Multichannel analysis transform.

    signal: (num_samples,) or (num_samples, M) real array.
    Returns a Spectrogram with data laid out (F, T, M).
    """
    if cfg is None:
        cfg = StftConfig()
    x_SM = np.asarray(signal, dtype=np.float64)
    if x_SM.ndim == 1:
        x_SM = x_SM[:, None]
    if x_SM.ndim != 2:
        raise DimensionMismatch(f"expected 1-D or 2-D signal, "
                                f"got ndim={x_SM.ndim}")
    num_samples, M = x_SM.shape
    W, hop = cfg.window_size, cfg.hop
    if num_samples < W:
        raise SignalTooShort(
            f"signal has {num_samples} samples, needs at least {W}")

    window = make_window(cfg.window, W)
    pad = W // 2
    x_pad = np.pad(x_SM, ((pad, pad), (0, 0)), mode="reflect")
    T = frame_count(num_samples, cfg)
    starts = np.arange(T) * hop
    frames_TWM = x_pad[starts[:, None] + np.arange(W)[None, :], :]
    spec_TFM = np.fft.rfft(frames_TWM * window[None, :, None], axis=1)
    X_FTM = np.ascontiguousarray(spec_TFM.transpose(1, 0, 2))
    return Spectrogram.from_array(X_FTM, sample_rate=cfg.sample_rate,
                                  hop=hop)


def istft(spec, cfg=None, length=None):
    """Weighted overlap-add synthesis; inverse of stft on interior samples.

    length: output sample count; defaults to (T - 1) * hop, the largest
    length guaranteed covered by the frame grid.
    """
    if cfg is None:
        cfg = StftConfig()
    if spec.num_freqs != cfg.num_freqs:
        raise DimensionMismatch(
            f"spectrogram has {spec.num_freqs} bins, config implies "
            f"{cfg.num_freqs}")
    W, hop = cfg.window_size, cfg.hop
    X_FTM = spec.tensor
    F, T, M = X_FTM.shape
    if length is None:
        length = (T - 1) * hop

    window = make_window(cfg.window, W)
    frames_TWM = np.fft.irfft(X_FTM.transpose(1, 0, 2), n=W, axis=1)
    frames_TWM *= window[None, :, None]

    total = (T - 1) * hop + W
    buf_SM = np.zeros((total, M))
    env_S = np.zeros(total)
    wsq = window ** 2
    for t in range(T):
        buf_SM[t * hop:t * hop + W] += frames_TWM[t]
        env_S[t * hop:t * hop + W] += wsq
    env_S[env_S < 1e-12] = 1.0
    buf_SM /= env_S[:, None]

    pad = W // 2
    out_SM = np.zeros((length, M))
    avail = min(length, total - pad)
    out_SM[:avail] = buf_SM[pad:pad + avail]
    return out_SM


def read_wav(path, expected_rate=None):
    """Returns (signal as float64 (num_samples, M), sample_rate)."""
    rate, data = wavfile.read(path)
    if expected_rate is not None and rate != expected_rate:
        raise UnsupportedRate(
            f"{path}: sample rate {rate}, expected {expected_rate}")
    if data.ndim == 1:
        data = data[:, None]
    if data.dtype == np.int16:
        signal = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        signal = data.astype(np.float64) / 2147483648.0
    else:
        signal = data.astype(np.float64)
    return signal, float(rate)


def write_wav(path, signal, rate=16000):
    """Writes IEEE float32 WAV; values are stored verbatim."""
    sig = np.asarray(signal)
    if sig.ndim == 1:
        sig = sig[:, None]
    wavfile.write(path, int(rate), sig.astype(np.float32))
