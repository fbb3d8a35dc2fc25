"""Multichannel linear-prediction dereverberation on spectrograms.

Classic iterative weighted prediction error: per frequency bin, a
delayed multichannel linear predictor is re-estimated against per-frame
variances taken from the current estimate, and the predicted (late
reverberant) part is subtracted.  Frequencies are fully independent.
"""

from dataclasses import dataclass

import numpy as np

from .core import SepdiarError, Spectrogram


class TooFewFrames(SepdiarError):
    pass


class SingularCorrelation(SepdiarError):
    pass


@dataclass(frozen=True)
class WpeConfig:
    taps: int = 10
    delay: int = 3
    iterations: int = 3
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.taps < 1 or self.delay < 1 or self.iterations < 1:
            raise ValueError("taps, delay and iterations must be >= 1")
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")


def _stack_taps(X_TM, taps, delay):
    """Delayed tap matrix: column t holds frames t-delay .. t-delay-taps+1
    of all channels, zero-padded before the signal start."""
    T, M = X_TM.shape
    bar_KT = np.zeros((taps * M, T), dtype=np.complex128)
    for tau in range(taps):
        shift = delay + tau
        bar_KT[tau * M:(tau + 1) * M, shift:] = X_TM[:T - shift].T
    return bar_KT


def dereverberate(spec, cfg=None):
    if cfg is None:
        cfg = WpeConfig()
    X_FTM = spec.tensor
    F, T, M = X_FTM.shape
    if T <= cfg.taps + cfg.delay:
        raise TooFewFrames(
            f"{T} frames, need more than taps + delay = "
            f"{cfg.taps + cfg.delay}")

    K = cfg.taps * M
    out_FTM = np.empty_like(X_FTM)
    eye_KK = np.eye(K)
    for f in range(F):
        X_TM = X_FTM[f]
        bar_KT = _stack_taps(X_TM, cfg.taps, cfg.delay)
        est_TM = X_TM.copy()
        for _ in range(cfg.iterations):
            d_T = np.maximum(
                np.mean(np.abs(est_TM) ** 2, axis=1), cfg.epsilon)
            weighted_KT = bar_KT / d_T[None, :]
            R_KK = weighted_KT @ bar_KT.conj().T
            trace = R_KK.trace().real
            if trace <= 0.0:
                break
            R_KK += (cfg.epsilon * trace / K) * eye_KK
            P_KM = weighted_KT @ X_TM.conj()
            try:
                G_KM = np.linalg.solve(R_KK, P_KM)
            except np.linalg.LinAlgError as exc:
                raise SingularCorrelation(
                    f"bin {f}: correlation matrix not solvable") from exc
            est_TM = X_TM - bar_KT.T @ G_KM.conj()
        out_FTM[f] = est_TM
    return Spectrogram.from_array(out_FTM, sample_rate=spec.sample_rate,
                                  hop=spec.hop)
