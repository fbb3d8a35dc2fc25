"""Complex angular central Gaussian mixtures over per-bin directions.

Each time-frequency observation is normalized to the unit sphere,
z_ft = x_ft / ||x_ft||, and modeled per frequency as a mixture of N
angular components with Hermitian shape matrices B_nf:

    p(z) = sum_n w_nf * c_M * |B_nf|^{-1} * (z^H B_nf^{-1} z)^{-M},
    c_M = (M-1)! / (2 pi^M).

Blind mode learns time-invariant per-frequency weights; guided mode
gates components by a binary activity mask (responsibilities forced to
zero at inactive frames, weights held uniform) which keeps EM monotone
and matches how diarization output steers separation.  Zero-norm bins
carry no directional information: they are excluded from updates and
from the likelihood and get uniform responsibilities.
"""

from dataclasses import dataclass
from math import lgamma

import numpy as np
from scipy.special import logsumexp

from .core import (ActivityMask, DimensionMismatch, SepdiarError,
                   Spectrogram, make_rng)

EIG_FLOOR = 1e-6


class DegenerateBin(SepdiarError):
    pass


class AllSourcesMaskedAtFrame(SepdiarError):
    pass


class NumericalUnderflow(SepdiarError):
    pass


@dataclass
class CacgmmParams:
    B_NFMM: np.ndarray      # shape matrices, Hermitian, trace M
    weight_NF: np.ndarray   # mixture weights, sum to 1 over n
    resp_NFT: np.ndarray    # responsibilities, sum to 1 over n per bin

    @property
    def num_sources(self):
        return self.B_NFMM.shape[0]


def _log_norm_constant(M):
    return lgamma(M) - np.log(2.0) - M * np.log(np.pi)


def normalized_directions(spec):
    """Unit-norm bins z_ftm plus a validity map (False for zero bins)."""
    X_FTM = spec.tensor
    norm_FT = np.linalg.norm(X_FTM, axis=2)
    valid_FT = norm_FT > 0.0
    safe_FT = np.where(valid_FT, norm_FT, 1.0)
    return X_FTM / safe_FT[:, :, None], valid_FT


def _quad_forms(z_FTM, B_NFMM):
    """q_nft = z^H B_nf^{-1} z, floored to keep logs finite."""
    Binv_NFMM = np.linalg.inv(B_NFMM)
    q_NFT = np.einsum("ftm,nfmj,ftj->nft", z_FTM.conj(), Binv_NFMM,
                      z_FTM).real
    return np.maximum(q_NFT, 1e-12)


def _log_density(z_FTM, B_NFMM, valid_FT):
    N, F, M, _ = B_NFMM.shape
    sign_NF, logdet_NF = np.linalg.slogdet(B_NFMM)
    q_NFT = _quad_forms(z_FTM, B_NFMM)
    logp_NFT = (_log_norm_constant(M) - logdet_NF[:, :, None]
                - M * np.log(q_NFT))
    logp_NFT = np.where(valid_FT[None, :, :], logp_NFT, 0.0)
    return logp_NFT, q_NFT


def _log_weights(params, guide, T):
    """Per-(n, f, t) log mixture weights; guide gating renormalizes the
    active components at every frame."""
    N, F = params.weight_NF.shape
    logw_NF = np.log(np.maximum(params.weight_NF, 1e-300))
    if guide is None:
        return np.broadcast_to(logw_NF[:, :, None], (N, F, T))
    m_NT = guide.matrix.astype(np.float64)
    count_T = m_NT.sum(axis=0)
    if np.any(count_T == 0):
        t_bad = int(np.argmax(count_T == 0))
        raise AllSourcesMaskedAtFrame(
            f"guide disables every source at frame {t_bad}")
    with np.errstate(divide="ignore"):
        gate_NT = np.log(m_NT) - np.log(count_T)[None, :]
    return logw_NF[:, :, None] + gate_NT[:, None, :]


def cacgmm_log_likelihood(spec, params, guide=None):
    """Total log-likelihood over all non-degenerate bins."""
    F, T, M = spec.shape
    if M < 2:
        raise DimensionMismatch(
            "angular model needs at least 2 channels")
    z_FTM, valid_FT = normalized_directions(spec)
    logp_NFT, _ = _log_density(z_FTM, params.B_NFMM, valid_FT)
    logw_NFT = _log_weights(params, guide, T)
    log_mix_FT = logsumexp(logp_NFT + logw_NFT, axis=0)
    total = float(log_mix_FT[valid_FT].sum())
    if not np.isfinite(total):
        raise NumericalUnderflow("log-likelihood is not finite")
    return total


def _e_step(logp_NFT, logw_NFT, valid_FT, guide=None):
    log_post_NFT = logp_NFT + logw_NFT
    log_mix_FT = logsumexp(log_post_NFT, axis=0)
    resp_NFT = np.exp(log_post_NFT - log_mix_FT[None, :, :])
    N = resp_NFT.shape[0]
    if guide is None:
        fallback_NT = np.full((N, logp_NFT.shape[2]), 1.0 / N)
    else:
        m_NT = guide.matrix.astype(np.float64)
        fallback_NT = m_NT / m_NT.sum(axis=0)[None, :]
    resp_NFT = np.where(valid_FT[None, :, :], resp_NFT,
                        fallback_NT[:, None, :])
    ll = float(log_mix_FT[valid_FT].sum())
    return resp_NFT, ll


def _m_step_shape(z_FTM, resp_NFT, q_NFT, valid_FT, B_NFMM):
    """Weighted fixed-point update; hermitized, eigenvalue-floored and
    trace-normalized (scale leaves the density unchanged)."""
    N, F, M, _ = B_NFMM.shape
    r_NFT = resp_NFT * valid_FT[None, :, :]
    coef_NFT = r_NFT / q_NFT
    num_NFMM = np.einsum("nft,ftm,ftj->nfmj", coef_NFT, z_FTM,
                         z_FTM.conj())
    den_NF = np.maximum(r_NFT.sum(axis=2), 1e-300)
    B_new = M * num_NFMM / den_NF[:, :, None, None]
    B_new = 0.5 * (B_new + np.conj(np.swapaxes(B_new, 2, 3)))

    vals_NFM, vecs_NFMM = np.linalg.eigh(B_new)
    vals_NFM = np.maximum(vals_NFM, EIG_FLOOR)
    B_new = np.einsum("nfmk,nfk,nfjk->nfmj", vecs_NFMM, vals_NFM,
                      np.conj(vecs_NFMM))
    trace_NF = np.trace(B_new, axis1=2, axis2=3).real
    B_new *= (M / trace_NF)[:, :, None, None]
    return B_new


def fit_cacgmm(spec, num_sources, guide=None, iterations=20, seed=0,
               initial_responsibilities=None, ll_trace=None):
    """EM fit; returns mixture parameters with final responsibilities.

    guide: optional ActivityMask with num_sources rows; inactive frames
    get exactly zero responsibility and weights stay frozen uniform.
    Pass a list as ll_trace to capture the log-likelihood after every
    update pass.
    """
    F, T, M = spec.shape
    if M < 2:
        raise DimensionMismatch(
            "angular model needs at least 2 channels")
    if num_sources < 1:
        raise ValueError("need at least one source")
    if guide is not None:
        if guide.num_sources != num_sources:
            raise DimensionMismatch(
                f"guide carries {guide.num_sources} rows, expected "
                f"{num_sources}")
        if guide.num_frames != T:
            raise DimensionMismatch(
                f"guide carries {guide.num_frames} frames, spectrogram "
                f"has {T}")

    rng = make_rng(seed)
    N = num_sources
    z_FTM, valid_FT = normalized_directions(spec)

    if initial_responsibilities is not None:
        resp_NFT = np.asarray(initial_responsibilities, dtype=np.float64)
    elif guide is not None:
        m_NT = guide.matrix.astype(np.float64)
        count_T = m_NT.sum(axis=0)
        if np.any(count_T == 0):
            t_bad = int(np.argmax(count_T == 0))
            raise AllSourcesMaskedAtFrame(
                f"guide disables every source at frame {t_bad}")
        resp_NFT = np.broadcast_to(
            (m_NT / count_T[None, :])[:, None, :], (N, F, T)).copy()
    else:
        draw_NFT = rng.exponential(1.0, (N, F, T))
        resp_NFT = draw_NFT / draw_NFT.sum(axis=0, keepdims=True)

    B_NFMM = np.tile(np.eye(M, dtype=np.complex128), (N, F, 1, 1))
    weight_NF = np.full((N, F), 1.0 / N)
    params = CacgmmParams(B_NFMM=B_NFMM, weight_NF=weight_NF,
                          resp_NFT=resp_NFT)

    q_NFT = _quad_forms(z_FTM, params.B_NFMM)
    for _ in range(iterations):
        params.B_NFMM = _m_step_shape(z_FTM, params.resp_NFT, q_NFT,
                                      valid_FT, params.B_NFMM)
        if guide is None:
            r_NFT = params.resp_NFT * valid_FT[None, :, :]
            wsum_NF = r_NFT.sum(axis=2)
            total_F = np.maximum(wsum_NF.sum(axis=0), 1e-300)
            params.weight_NF = wsum_NF / total_F[None, :]

        logp_NFT, q_NFT = _log_density(z_FTM, params.B_NFMM, valid_FT)
        logw_NFT = _log_weights(params, guide, T)
        params.resp_NFT, ll = _e_step(logp_NFT, logw_NFT, valid_FT, guide)
        if ll_trace is not None:
            ll_trace.append(ll)
    return params
