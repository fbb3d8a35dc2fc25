"""Shared builders and independent oracles for the test suite.

The oracles here deliberately avoid the library's own computation
paths: the dense Gaussian density is evaluated from explicitly
assembled covariance matrices, and random parameters are constructed
directly from numpy draws.
"""
import numpy as np
import pytest

from sepdiar.core import ActivityMask, Spectrogram, make_rng
from sepdiar.jdsep import JdParams


def random_spectrogram(rng, F, T, M, scale=1.0):
    X_FTM = scale * (rng.standard_normal((F, T, M))
                     + 1j * rng.standard_normal((F, T, M))) / np.sqrt(2.0)
    return Spectrogram.from_array(X_FTM)


def random_jd_params(rng, M, N, F, T, binary_masks=True):
    """A valid random parameter set with a well-conditioned Q."""
    Q_FMM = (rng.standard_normal((F, M, M))
             + 1j * rng.standard_normal((F, M, M)))
    Q_FMM += 2.0 * np.eye(M)[None, :, :]
    g_NFM = rng.uniform(0.2, 2.0, size=(N, F, M))
    lam_NFT = rng.uniform(0.1, 3.0, size=(N, F, T))
    if binary_masks:
        mask_NT = (rng.uniform(size=(N, T)) < 0.8).astype(np.float64)
        mask_NT[:, 0] = 1.0          # keep every source alive somewhere
    else:
        mask_NT = np.ones((N, T))
    return JdParams(Q_FMM, g_NFM, lam_NFT, ActivityMask.from_array(mask_NT))


def dense_gaussian_nll(X_FTM, params):
    """Per-bin zero-mean complex Gaussian density with the covariance
    assembled densely from the same diagonalizers, gains, psd and
    masks.  Used as the independent likelihood oracle."""
    F, T, M = X_FTM.shape
    N = params.num_sources
    mask_NT = params.masks.matrix
    total = 0.0
    for f in range(F):
        Qinv = np.linalg.inv(params.Q_FMM[f])
        for t in range(T):
            diag_M = np.zeros(M)
            for n in range(N):
                diag_M += (mask_NT[n, t] * params.lam_NFT[n, f, t]
                           * params.g_NFM[n, f])
            diag_M = np.maximum(diag_M, params.psd_floor)
            cov_MM = Qinv @ np.diag(diag_M) @ Qinv.conj().T
            x_M = X_FTM[f, t]
            sign, logdet = np.linalg.slogdet(cov_MM)
            quad = float(np.real(x_M.conj() @ np.linalg.solve(cov_MM, x_M)))
            total += M * np.log(np.pi) + logdet + quad
    return total


@pytest.fixture
def rng():
    return make_rng(0)
