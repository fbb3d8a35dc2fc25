"""Multitask objective pieces evaluated on explicit posterior tensors.

Covers the closed-form KL of factorized Gaussian posteriors against the
standard normal prior, a single-sample reparameterized expectation of
the separation log-likelihood (the model's PSD is produced from the
latent sample by an injected callable, so no network is involved),
binary cross-entropy over activity probabilities, permutation alignment
of estimated sources to references, and the normalized weighted sum of
the two task terms.
"""

from dataclasses import dataclass
from itertools import permutations
from typing import Optional

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import jdsep
from .core import ActivityMask, SepdiarError, make_rng

ETA_CLAMP = 1e-7


class NonPositiveVariance(SepdiarError):
    pass


@dataclass
class PosteriorParams:
    """Per-source Gaussian posteriors plus activity probabilities.

    mean and var are lists with one (T, D_n) array per source; latent
    width may differ between sources.  eta_NT holds activity
    probabilities in [0, 1].
    """
    mean: list
    var: list
    eta_NT: np.ndarray

    def __post_init__(self):
        for n, v_TD in enumerate(self.var):
            if np.any(np.asarray(v_TD) <= 0):
                raise NonPositiveVariance(
                    f"source {n} has a non-positive variance entry")
        eta = np.asarray(self.eta_NT)
        if np.any(eta < 0) or np.any(eta > 1):
            raise ValueError("activity probabilities must lie in [0, 1]")

    @property
    def num_sources(self):
        return len(self.mean)


@dataclass
class ObjectiveReport:
    l_sep: float
    l_diar: float
    l_total: float
    gamma: float
    permutation: Optional[list] = None


def kl_to_standard_normal(post):
    """Sum over sources, frames and latent dims of the Gaussian KL
    against N(0, I): 0.5 * (mu^2 + var - log var - 1)."""
    total = 0.0
    for mu_TD, var_TD in zip(post.mean, post.var):
        mu_TD = np.asarray(mu_TD, dtype=np.float64)
        var_TD = np.asarray(var_TD, dtype=np.float64)
        if np.any(var_TD <= 0):
            raise NonPositiveVariance("variance must be positive")
        total += 0.5 * float(
            np.sum(mu_TD ** 2 + var_TD - np.log(var_TD) - 1.0))
    return total


def bce_diarization(mask, eta_NT, clamp=ETA_CLAMP):
    """Total binary cross-entropy of activity probabilities against the
    binary reference; probabilities are clamped away from {0, 1}."""
    m_NT = mask.matrix.astype(np.float64) if isinstance(
        mask, ActivityMask) else np.asarray(mask, dtype=np.float64)
    eta = np.clip(np.asarray(eta_NT, dtype=np.float64), clamp, 1.0 - clamp)
    if m_NT.shape != eta.shape:
        raise ValueError(f"mask shape {m_NT.shape} does not match "
                         f"activity shape {eta.shape}")
    return float(-np.sum(m_NT * np.log(eta)
                         + (1.0 - m_NT) * np.log(1.0 - eta)))


def _pair_costs(ref_NT, eta_ET):
    R, E = len(ref_NT), len(eta_ET)
    cost_RE = np.empty((R, E))
    eta = np.clip(np.asarray(eta_ET, dtype=np.float64), ETA_CLAMP,
                  1.0 - ETA_CLAMP)
    log_eta = np.log(eta)
    log_neg = np.log(1.0 - eta)
    for i in range(R):
        m_T = ref_NT[i]
        cost_RE[i] = -(m_T[None, :] * log_eta
                       + (1.0 - m_T)[None, :] * log_neg).sum(axis=1)
    return cost_RE


def pit_align(mask, eta_ET, cost=None, method="assignment"):
    """Matches estimated activity rows to reference rows by minimum
    total binary cross-entropy.

    Returns (perm, total_cost) where perm[i] is the estimate assigned to
    reference i.  Estimates may outnumber references; the surplus stays
    unassigned.  method="brute" enumerates all injections (reference
    count at most 10) and agrees exactly with the assignment solver.
    """
    ref_NT = mask.matrix.astype(np.float64) if isinstance(
        mask, ActivityMask) else np.asarray(mask, dtype=np.float64)
    if cost is None:
        cost = _pair_costs(ref_NT, eta_ET)
    cost = np.asarray(cost, dtype=np.float64)
    R, E = cost.shape
    if E < R:
        raise ValueError(f"{E} estimates cannot cover {R} references")
    if method == "brute":
        if R > 10:
            raise ValueError("brute-force alignment limited to 10 sources")
        best, best_perm = np.inf, None
        for cand in permutations(range(E), R):
            c = float(sum(cost[i, cand[i]] for i in range(R)))
            if c < best:
                best, best_perm = c, cand
        return list(best_perm), best
    rows, cols = linear_sum_assignment(cost)
    perm = [0] * R
    for i, j in zip(rows, cols):
        perm[i] = int(j)
    return perm, float(cost[rows, cols].sum())


def expected_log_likelihood(spec, jd_params, post, psd_of_z, seed=0,
                            num_samples=1):
    """Reparameterized estimate of the separation term.

    Draws z_nt = mu + sigma * eps per source, maps the samples to
    per-source powers via psd_of_z(list of (T, D_n)) -> (N, F, T), and
    evaluates T * sum_f log|Q_f Q_f^H| - sum_{f,t,m} [log y + |qx|^2/y]
    under the given diagonalizers, gains and masks (the likelihood term
    of the variational objective, additive constant omitted).  Averages
    over num_samples draws.
    """
    rng = make_rng(seed)
    F, T, M = spec.shape
    qx_FTM = jdsep.diag_observations(spec, jd_params.Q_FMM)
    power_FTM = np.ascontiguousarray(
        qx_FTM.real ** 2 + qx_FTM.imag ** 2)
    logdet = float(jdsep.log_det_gram(jd_params.Q_FMM).sum())

    values = []
    for _ in range(num_samples):
        z_list = []
        for mu_TD, var_TD in zip(post.mean, post.var):
            mu_TD = np.asarray(mu_TD, dtype=np.float64)
            var_TD = np.asarray(var_TD, dtype=np.float64)
            if np.any(var_TD <= 0):
                raise NonPositiveVariance("variance must be positive")
            eps_TD = rng.standard_normal(mu_TD.shape)
            z_list.append(mu_TD + np.sqrt(var_TD) * eps_TD)
        lam_NFT = np.asarray(psd_of_z(z_list), dtype=np.float64)
        sampled = jdsep.JdParams(
            Q_FMM=jd_params.Q_FMM, g_NFM=jd_params.g_NFM,
            lam_NFT=lam_NFT, masks=jd_params.masks,
            psd_floor=jd_params.psd_floor)
        Y_FTM = jdsep.effective_power(sampled)
        quad = float(np.sum(np.log(Y_FTM)) + np.sum(power_FTM / Y_FTM))
        values.append(T * logdet - quad)
    return float(np.mean(values))


def separation_term(spec, jd_params):
    """Likelihood part of the separation objective at the stored powers:
    T * sum_f log|Q_f Q_f^H| - sum_{f,t,m} [log y + |qx|^2 / y]."""
    F, T, M = spec.shape
    qx_FTM = jdsep.diag_observations(spec, jd_params.Q_FMM)
    power_FTM = qx_FTM.real ** 2 + qx_FTM.imag ** 2
    Y_FTM = jdsep.effective_power(jd_params)
    quad = float(np.sum(np.log(Y_FTM)) + np.sum(power_FTM / Y_FTM))
    return T * float(jdsep.log_det_gram(jd_params.Q_FMM).sum()) - quad


def combined_objective(l_sep, l_diar, num_frames, num_freqs, num_sources,
                       gamma=1.0, permutation=None):
    """Weighted per-bin combination of the two task terms."""
    if min(num_frames, num_freqs, num_sources) < 1:
        raise ValueError("dimensions must be at least 1")
    l_total = (l_sep / (num_frames * num_freqs)
               + gamma * l_diar / (num_frames * num_sources))
    return ObjectiveReport(l_sep=float(l_sep), l_diar=float(l_diar),
                           l_total=float(l_total), gamma=float(gamma),
                           permutation=permutation)
