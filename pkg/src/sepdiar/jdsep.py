"""Jointly diagonalized spatial covariance separation with activity masks.

Every source n gets a spatial covariance Q_f^{-1} diag(g_nf) Q_f^{-H}
sharing one diagonalizer Q_f per frequency, a per-bin power lam_nft, and
a binary frame activity m_nt.  In the diagonalized coordinates
qx_ft = Q_f x_ft the channels decouple, with per-channel mixture power

    y_ftm = sum_n m_nt * lam_nft * g_nfm,

so the exact negative log-likelihood is

    sum_{f,t,m} [log y_ftm + |qx_ftm|^2 / y_ftm]
        - T * sum_f log|Q_f Q_f^H| + M*T*F*log(pi).

Estimation alternates rank-1 steering updates of Q (each an exact
coordinate minimizer, hence monotone), multiplicative updates of lam and
g, and a likelihood-invariant rescaling.  fit_masked_fca estimates
lam freely under given masks; fit_fastmnmf2 factorizes lam = W @ H with
all sources always active.  Source images come out of a multichannel
Wiener filter that sums to the input by construction.
"""

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _accel
from .core import (ActivityMask, DimensionMismatch, SepdiarError,
                   make_rng)
from .core import Spectrogram

PSD_FLOOR = 1e-10


class NonInvertibleDiagonalizer(SepdiarError):
    pass


@dataclass
class NmfPsd:
    W_NFK: np.ndarray
    H_NKT: np.ndarray

    @property
    def num_basis(self):
        return self.W_NFK.shape[2]

    def psd(self):
        return np.einsum("nfk,nkt->nft", self.W_NFK, self.H_NKT)


@dataclass
class JdParams:
    Q_FMM: np.ndarray
    g_NFM: np.ndarray
    lam_NFT: np.ndarray
    masks: ActivityMask
    psd_floor: float = PSD_FLOOR
    nmf: Optional[NmfPsd] = None

    @property
    def num_sources(self):
        return self.g_NFM.shape[0]

    def copy(self):
        nmf = None
        if self.nmf is not None:
            nmf = NmfPsd(self.nmf.W_NFK.copy(), self.nmf.H_NKT.copy())
        return JdParams(self.Q_FMM.copy(), self.g_NFM.copy(),
                        self.lam_NFT.copy(), self.masks, self.psd_floor,
                        nmf)


def add_noise_source(masks):
    """Appends an always-active row: the designated noise source."""
    mask_NT = masks.matrix
    row = np.ones((1, mask_NT.shape[1]), dtype=np.uint8)
    return ActivityMask.from_array(np.concatenate([mask_NT, row]))


def _mask_float(params):
    return params.masks.matrix.astype(np.float64)


def _check_shapes(spec, params):
    F, T, M = spec.shape
    N = params.num_sources
    if params.Q_FMM.shape != (F, M, M):
        raise DimensionMismatch(
            f"Q shape {params.Q_FMM.shape}, expected {(F, M, M)}")
    if params.g_NFM.shape != (N, F, M):
        raise DimensionMismatch(
            f"g shape {params.g_NFM.shape}, expected {(N, F, M)}")
    if params.lam_NFT.shape != (N, F, T):
        raise DimensionMismatch(
            f"lam shape {params.lam_NFT.shape}, expected {(N, F, T)}")
    if params.masks.num_sources != N or params.masks.num_frames != T:
        raise DimensionMismatch(
            f"mask shape {(params.masks.num_sources, params.masks.num_frames)},"
            f" expected {(N, T)}")


def diag_observations(spec, Q_FMM):
    """qx_ft = Q_f x_ft for every frame."""
    return np.einsum("fmj,ftj->ftm", Q_FMM, spec.tensor)


def effective_power(params):
    """Per-channel diagonal-space mixture power y_ftm, floored."""
    return _accel.diag_power(params.lam_NFT, params.g_NFM,
                             _mask_float(params), params.psd_floor)


def count_floored_bins(params):
    Y_FTM = effective_power(params)
    return int(np.sum(Y_FTM <= params.psd_floor))


def log_det_gram(Q_FMM):
    """log|Q_f Q_f^H| per frequency."""
    sign_F, logdet_F = np.linalg.slogdet(Q_FMM)
    if not np.all(np.isfinite(logdet_F)) or np.any(sign_F == 0):
        raise NonInvertibleDiagonalizer("diagonalizer is singular")
    return 2.0 * logdet_F


def neg_log_likelihood(spec, params):
    """Exact -log p(x) under the model, additive constant included."""
    _check_shapes(spec, params)
    F, T, M = spec.shape
    qx_FTM = diag_observations(spec, params.Q_FMM)
    power_FTM = np.ascontiguousarray(
        qx_FTM.real ** 2 + qx_FTM.imag ** 2)
    Y_FTM = effective_power(params)
    quad = _accel.nll_quad_sum(power_FTM, Y_FTM)
    return (quad - T * log_det_gram(params.Q_FMM).sum()
            + M * T * F * np.log(np.pi))


def _nll_from_state(qx_FTM, Q_FMM, Y_FTM):
    power_FTM = np.ascontiguousarray(
        qx_FTM.real ** 2 + qx_FTM.imag ** 2)
    T = qx_FTM.shape[1]
    M = qx_FTM.shape[2]
    F = qx_FTM.shape[0]
    quad = _accel.nll_quad_sum(power_FTM, Y_FTM)
    return (quad - T * log_det_gram(Q_FMM).sum()
            + M * T * F * np.log(np.pi))


def iss_update(spec, params, row):
    """Rank-1 steering update of diagonalizer row `row` at every
    frequency; exact minimizer of the likelihood in that row direction,
    so the likelihood never degrades.  Degenerate frequencies (where the
    update would zero the row) keep their previous value."""
    _check_shapes(spec, params)
    out = params.copy()
    qx_FTM = np.ascontiguousarray(diag_observations(spec, params.Q_FMM))
    Y_FTM = effective_power(params)
    _accel.iss_step(qx_FTM, out.Q_FMM, Y_FTM, row)
    return out


def _apply_psd_update(lam_NFT, num_NFT, den_NFT, maskf_NT):
    with np.errstate(divide="ignore", invalid="ignore"):
        factor_NFT = np.sqrt(num_NFT / den_NFT)
    factor_NFT[~np.isfinite(factor_NFT)] = 1.0
    active_NFT = np.broadcast_to(maskf_NT[:, None, :] > 0, lam_NFT.shape)
    return np.where(active_NFT, lam_NFT * factor_NFT, lam_NFT)


def update_psd(spec, params):
    """Multiplicative update of the per-bin powers (or of the W and H
    factors when the powers are factorized); majorization step, monotone
    in the likelihood."""
    _check_shapes(spec, params)
    out = params.copy()
    qx_FTM = diag_observations(spec, params.Q_FMM)
    power_FTM = np.ascontiguousarray(
        qx_FTM.real ** 2 + qx_FTM.imag ** 2)
    maskf_NT = _mask_float(params)
    if out.nmf is None:
        Y_FTM = effective_power(out)
        num_NFT, den_NFT = _accel.mu_psd_stats(out.g_NFM, power_FTM, Y_FTM)
        out.lam_NFT = _apply_psd_update(out.lam_NFT, num_NFT, den_NFT,
                                        maskf_NT)
    else:
        _update_nmf_factor(out, power_FTM, maskf_NT, which="W")
        _update_nmf_factor(out, power_FTM, maskf_NT, which="H")
    return out


def _update_nmf_factor(params, power_FTM, maskf_NT, which):
    Y_FTM = effective_power(params)
    num_NFT, den_NFT = _accel.mu_psd_stats(params.g_NFM, power_FTM, Y_FTM)
    num_NFT = num_NFT * maskf_NT[:, None, :]
    den_NFT = den_NFT * maskf_NT[:, None, :]
    W_NFK, H_NKT = params.nmf.W_NFK, params.nmf.H_NKT
    with np.errstate(divide="ignore", invalid="ignore"):
        if which == "W":
            top = np.einsum("nft,nkt->nfk", num_NFT, H_NKT)
            bot = np.einsum("nft,nkt->nfk", den_NFT, H_NKT)
            factor = np.sqrt(top / bot)
            factor[~np.isfinite(factor)] = 1.0
            params.nmf.W_NFK = W_NFK * factor
        else:
            top = np.einsum("nft,nfk->nkt", num_NFT, W_NFK)
            bot = np.einsum("nft,nfk->nkt", den_NFT, W_NFK)
            factor = np.sqrt(top / bot)
            factor[~np.isfinite(factor)] = 1.0
            params.nmf.H_NKT = H_NKT * factor
    params.lam_NFT = params.nmf.psd()


def update_gain(spec, params):
    """Multiplicative update of the per-channel diagonal gains."""
    _check_shapes(spec, params)
    out = params.copy()
    qx_FTM = diag_observations(spec, params.Q_FMM)
    power_FTM = np.ascontiguousarray(
        qx_FTM.real ** 2 + qx_FTM.imag ** 2)
    Y_FTM = effective_power(out)
    num_NFM, den_NFM = _accel.mu_gain_stats(
        out.lam_NFT, _mask_float(out), power_FTM, Y_FTM)
    with np.errstate(divide="ignore", invalid="ignore"):
        factor_NFM = np.sqrt(num_NFM / den_NFM)
    factor_NFM[~np.isfinite(factor_NFM)] = 1.0
    out.g_NFM = out.g_NFM * factor_NFM
    return out


def normalize(params):
    """Likelihood-invariant rescaling: diagonalizer rows to unit norm,
    then per (n, f) gains to sum M, absorbing scales into lam (or W)."""
    out = params.copy()
    _normalize_inplace(out)
    return out


def _normalize_inplace(params, qx_FTM=None):
    M = params.Q_FMM.shape[1]
    rownorm_FM = np.sqrt(
        np.sum(np.abs(params.Q_FMM) ** 2, axis=2))
    rownorm_FM[rownorm_FM == 0.0] = 1.0
    params.Q_FMM /= rownorm_FM[:, :, None]
    params.g_NFM /= (rownorm_FM ** 2)[None, :, :]
    if qx_FTM is not None:
        qx_FTM /= rownorm_FM[:, None, :]

    gsum_NF = params.g_NFM.sum(axis=2)
    scale_NF = np.where(gsum_NF > 0.0, M / np.where(gsum_NF > 0.0,
                                                    gsum_NF, 1.0), 1.0)
    params.g_NFM *= scale_NF[:, :, None]
    if params.nmf is None:
        params.lam_NFT /= scale_NF[:, :, None]
    else:
        params.nmf.W_NFK /= scale_NF[:, :, None]
        params.lam_NFT = params.nmf.psd()


def _init_lam(qx_FTM, maskf_NT, rng):
    N, T = maskf_NT.shape
    F = qx_FTM.shape[0]
    p_FT = np.mean(qx_FTM.real ** 2 + qx_FTM.imag ** 2, axis=2)
    lam_NFT = np.empty((N, F, T))
    for n in range(N):
        active = maskf_NT[n] > 0
        base_F = (p_FT[:, active].mean(axis=1) if active.any()
                  else p_FT.mean(axis=1))
        base_F = np.maximum(base_F, 1e-10)
        lam_NFT[n] = base_F[:, None] * rng.uniform(0.9, 1.1, (F, T))
    return lam_NFT


def _whitening_init(X_FTM):
    F, T, M = X_FTM.shape
    cov_FMM = np.einsum("ftm,ftj->fmj", X_FTM, X_FTM.conj()) / T
    vals_FM, vecs_FMM = np.linalg.eigh(cov_FMM)
    vals_FM = np.maximum(vals_FM, 1e-12)
    return (vecs_FMM * (vals_FM[:, None, :] ** -0.5)).conj().transpose(
        0, 2, 1)


def _fit_loop(spec, params, iterations, nll_trace):
    X_FTM = spec.tensor
    maskf_NT = _mask_float(params)
    qx_FTM = np.ascontiguousarray(
        np.einsum("fmj,ftj->ftm", params.Q_FMM, X_FTM))
    M = X_FTM.shape[2]

    if nll_trace is not None:
        Y_FTM = effective_power(params)
        nll_trace.append(_nll_from_state(qx_FTM, params.Q_FMM, Y_FTM))

    power_FTM = np.empty(qx_FTM.shape, dtype=np.float64)
    for _ in range(iterations):
        Y_FTM = effective_power(params)
        for row in range(M):
            _accel.iss_step(qx_FTM, params.Q_FMM, Y_FTM, row)
        np.multiply(qx_FTM.real, qx_FTM.real, out=power_FTM)
        power_FTM += qx_FTM.imag ** 2

        if params.nmf is None:
            Y_FTM = effective_power(params)
            num_NFT, den_NFT = _accel.mu_psd_stats(
                params.g_NFM, power_FTM, Y_FTM)
            params.lam_NFT = _apply_psd_update(
                params.lam_NFT, num_NFT, den_NFT, maskf_NT)
        else:
            _update_nmf_factor(params, power_FTM, maskf_NT, which="W")
            _update_nmf_factor(params, power_FTM, maskf_NT, which="H")

        Y_FTM = effective_power(params)
        num_NFM, den_NFM = _accel.mu_gain_stats(
            params.lam_NFT, maskf_NT, power_FTM, Y_FTM)
        with np.errstate(divide="ignore", invalid="ignore"):
            factor_NFM = np.sqrt(num_NFM / den_NFM)
        factor_NFM[~np.isfinite(factor_NFM)] = 1.0
        params.g_NFM *= factor_NFM

        _normalize_inplace(params, qx_FTM)
        np.multiply(qx_FTM.real, qx_FTM.real, out=power_FTM)
        power_FTM += qx_FTM.imag ** 2

        if nll_trace is not None:
            Y_FTM = effective_power(params)
            nll_trace.append(
                _nll_from_state(qx_FTM, params.Q_FMM, Y_FTM))
    return params


def fit_masked_fca(spec, masks, num_sources, iterations=30, seed=0,
                   psd_floor=PSD_FLOOR, q_init="identity",
                   nll_trace=None):
    """Maximum-likelihood fit with fixed activity masks.

    masks must carry num_sources rows; by convention the last row is the
    noise source and should be all ones.  Pass a list as nll_trace to
    capture the likelihood trajectory (initial value plus one entry per
    iteration).
    """
    F, T, M = spec.shape
    if masks.num_sources != num_sources:
        raise DimensionMismatch(
            f"masks carry {masks.num_sources} rows, expected {num_sources}")
    if masks.num_frames != T:
        raise DimensionMismatch(
            f"masks carry {masks.num_frames} frames, spectrogram has {T}")
    rng = make_rng(seed)
    X_FTM = spec.tensor
    if q_init == "whiten":
        Q_FMM = _whitening_init(X_FTM)
    else:
        Q_FMM = np.tile(np.eye(M, dtype=np.complex128), (F, 1, 1))
    qx_FTM = np.einsum("fmj,ftj->ftm", Q_FMM, X_FTM)
    maskf_NT = masks.matrix.astype(np.float64)
    params = JdParams(
        Q_FMM=np.ascontiguousarray(Q_FMM),
        g_NFM=np.ones((num_sources, F, M)),
        lam_NFT=_init_lam(qx_FTM, maskf_NT, rng),
        masks=masks,
        psd_floor=psd_floor,
    )
    return _fit_loop(spec, params, iterations, nll_trace)


def fit_fastmnmf2(spec, num_sources, num_basis=8, iterations=30, seed=0,
                  psd_floor=PSD_FLOOR, q_init="identity", nll_trace=None):
    """Blind fit with NMF-factorized powers and all sources active."""
    F, T, M = spec.shape
    rng = make_rng(seed)
    X_FTM = spec.tensor
    if q_init == "whiten":
        Q_FMM = _whitening_init(X_FTM)
    else:
        Q_FMM = np.tile(np.eye(M, dtype=np.complex128), (F, 1, 1))
    qx_FTM = np.einsum("fmj,ftj->ftm", Q_FMM, X_FTM)
    p_F = np.maximum(
        np.mean(qx_FTM.real ** 2 + qx_FTM.imag ** 2, axis=(1, 2)), 1e-10)
    W_NFK = (p_F[None, :, None] / num_basis
             * rng.uniform(0.5, 1.5, (num_sources, F, num_basis)))
    H_NKT = rng.uniform(0.5, 1.5, (num_sources, num_basis, T))
    nmf = NmfPsd(W_NFK=W_NFK, H_NKT=H_NKT)
    masks = ActivityMask.from_array(
        np.ones((num_sources, T), dtype=np.uint8))
    params = JdParams(
        Q_FMM=np.ascontiguousarray(Q_FMM),
        g_NFM=np.ones((num_sources, F, M)),
        lam_NFT=nmf.psd(),
        masks=masks,
        psd_floor=psd_floor,
        nmf=nmf,
    )
    return _fit_loop(spec, params, iterations, nll_trace)


def wiener_separate(spec, params):
    """Per-source image extraction; outputs sum to the input exactly.

    In diagonal coordinates each source takes the fraction of qx given by
    its share of the modeled power; bins where the model is all zero are
    split uniformly among the sources active at that frame.  Inactive
    sources get exactly zero at their masked frames.
    """
    _check_shapes(spec, params)
    F, T, M = spec.shape
    N = params.num_sources
    maskf_NT = _mask_float(params)
    qx_FTM = diag_observations(spec, params.Q_FMM)
    w_NFTM = (params.lam_NFT[:, :, :, None] * params.g_NFM[:, :, None, :]
              * maskf_NT[:, None, :, None])
    total_FTM = w_NFTM.sum(axis=0)

    zero_FTM = total_FTM == 0.0
    if zero_FTM.any():
        active_NT = maskf_NT > 0
        count_T = active_NT.sum(axis=0)
        share_NT = np.where(count_T[None, :] > 0,
                            active_NT / np.maximum(count_T[None, :], 1),
                            0.0)
        w_NFTM = np.where(zero_FTM[None], share_NT[:, None, :, None],
                          w_NFTM)
        total_FTM = np.where(zero_FTM, w_NFTM.sum(axis=0), total_FTM)
        total_FTM[total_FTM == 0.0] = 1.0

    try:
        Qinv_FMM = np.linalg.inv(params.Q_FMM)
    except np.linalg.LinAlgError as exc:
        raise NonInvertibleDiagonalizer("diagonalizer is singular") from exc

    images = []
    for n in range(N):
        sep_FTM = (w_NFTM[n] / total_FTM) * qx_FTM
        img_FTM = np.einsum("fmj,ftj->ftm", Qinv_FMM, sep_FTM)
        images.append(Spectrogram.from_array(
            img_FTM, sample_rate=spec.sample_rate, hop=spec.hop))
    return images
