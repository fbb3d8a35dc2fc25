"""Pure-numpy implementations of the per-iteration hot kernels.

Same signatures and semantics as the compiled module; selected as the
fallback when the extension is unavailable (or SEPDIAR_NO_ACCEL is set).
All reductions run in a fixed order so results do not depend on thread
count.
"""

import numpy as np

BACKEND = "numpy"


def diag_power(psd_NFT, gain_NFM, mask_NT, floor):
    """Diagonal-space mixture power Y_ftm = sum_n m_nt psd_nft g_nfm.

    Entries below floor are clamped to floor.
    """
    masked_NFT = psd_NFT * mask_NT[:, None, :]
    Y_FTM = np.einsum("nft,nfm->ftm", masked_NFT, gain_NFM)
    np.maximum(Y_FTM, floor, out=Y_FTM)
    return Y_FTM


def nll_quad_sum(power_FTM, Y_FTM):
    """sum over (f, t, m) of log Y + power / Y."""
    return float(np.sum(np.log(Y_FTM)) + np.sum(power_FTM / Y_FTM))


def iss_step(qx_FTM, Q_FMM, Y_FTM, row):
    """One rank-1 source-steering update of the diagonalizer row, in place.

    Minimizes the weighted quadratic-plus-logdet objective exactly in the
    update coefficients, with per-channel weights 1 / Y_ftm.  Frequencies
    whose diagonal weight is degenerate (would zero the row) are left
    untouched; returns how many were skipped.
    """
    F, T, M = qx_FTM.shape
    qxk_FT = qx_FTM[:, :, row].copy()
    inv_Y = 1.0 / Y_FTM
    power_FT = qxk_FT.real ** 2 + qxk_FT.imag ** 2
    denom_FM = np.einsum("ft,ftm->fm", power_FT, inv_Y) / T
    cross_FM = np.einsum("ftm,ft->fm", qx_FTM * inv_Y, qxk_FT.conj()) / T

    with np.errstate(divide="ignore", invalid="ignore"):
        v_FM = cross_FM / denom_FM
        v_FM[:, row] = 1.0 - 1.0 / np.sqrt(denom_FM[:, row])
    bad_F = ~np.isfinite(v_FM).all(axis=1)
    skipped = int(bad_F.sum())
    if skipped:
        v_FM[bad_F] = 0.0

    qx_FTM -= v_FM[:, None, :] * qxk_FT[:, :, None]
    qk_FM = Q_FMM[:, row, :].copy()
    Q_FMM -= v_FM[:, :, None] * qk_FM[:, None, :]
    return skipped


def mu_psd_stats(gain_NFM, power_FTM, Y_FTM):
    """Numerator/denominator sums over channels for the psd update."""
    inv_Y = 1.0 / Y_FTM
    ratio2_FTM = power_FTM * inv_Y * inv_Y
    num_NFT = np.einsum("nfm,ftm->nft", gain_NFM, ratio2_FTM)
    den_NFT = np.einsum("nfm,ftm->nft", gain_NFM, inv_Y)
    return num_NFT, den_NFT


def mu_gain_stats(psd_NFT, mask_NT, power_FTM, Y_FTM):
    """Numerator/denominator sums over frames for the gain update."""
    inv_Y = 1.0 / Y_FTM
    ratio2_FTM = power_FTM * inv_Y * inv_Y
    masked_NFT = psd_NFT * mask_NT[:, None, :]
    num_NFM = np.einsum("nft,ftm->nfm", masked_NFT, ratio2_FTM)
    den_NFM = np.einsum("nft,ftm->nfm", masked_NFT, inv_Y)
    return num_NFM, den_NFM
