# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled inner loops for the covariance-model EM updates.

Mirrors the numpy fallback exactly; every reduction runs in the same
index order so the two backends agree to rounding.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport log, sqrt

cnp.import_array()

BACKEND = "compiled"


def diag_power(cnp.ndarray[cnp.float64_t, ndim=3] psd_NFT,
               cnp.ndarray[cnp.float64_t, ndim=3] gain_NFM,
               cnp.ndarray[cnp.float64_t, ndim=2] mask_NT,
               double floor):
    cdef Py_ssize_t N = psd_NFT.shape[0]
    cdef Py_ssize_t F = psd_NFT.shape[1]
    cdef Py_ssize_t T = psd_NFT.shape[2]
    cdef Py_ssize_t M = gain_NFM.shape[2]
    cdef cnp.ndarray[cnp.float64_t, ndim=3] Y_FTM = np.full(
        (F, T, M), floor, dtype=np.float64)
    cdef double[:, :, ::1] psd = psd_NFT
    cdef double[:, :, ::1] gain = gain_NFM
    cdef double[:, ::1] mask = mask_NT
    cdef double[:, :, ::1] Y = Y_FTM
    cdef Py_ssize_t n, f, t, m
    cdef double acc

    for f in range(F):
        for t in range(T):
            for m in range(M):
                acc = 0.0
                for n in range(N):
                    acc += mask[n, t] * psd[n, f, t] * gain[n, f, m]
                if acc > floor:
                    Y[f, t, m] = acc
    return Y_FTM


def nll_quad_sum(cnp.ndarray[cnp.float64_t, ndim=3] power_FTM,
                 cnp.ndarray[cnp.float64_t, ndim=3] Y_FTM):
    cdef double[:, :, ::1] p = power_FTM
    cdef double[:, :, ::1] Y = Y_FTM
    cdef Py_ssize_t F = p.shape[0], T = p.shape[1], M = p.shape[2]
    cdef Py_ssize_t f, t, m
    cdef double log_acc = 0.0, quad_acc = 0.0

    for f in range(F):
        for t in range(T):
            for m in range(M):
                log_acc += log(Y[f, t, m])
                quad_acc += p[f, t, m] / Y[f, t, m]
    return log_acc + quad_acc


def iss_step(cnp.ndarray[cnp.complex128_t, ndim=3] qx_FTM,
             cnp.ndarray[cnp.complex128_t, ndim=3] Q_FMM,
             cnp.ndarray[cnp.float64_t, ndim=3] Y_FTM,
             Py_ssize_t row):
    cdef double complex[:, :, ::1] qx = qx_FTM
    cdef double complex[:, :, ::1] Q = Q_FMM
    cdef double[:, :, ::1] Y = Y_FTM
    cdef Py_ssize_t F = qx.shape[0], T = qx.shape[1], M = qx.shape[2]
    cdef Py_ssize_t f, t, m
    cdef int skipped = 0
    cdef double complex[::1] cross = np.empty(M, dtype=np.complex128)
    cdef double complex[::1] v = np.empty(M, dtype=np.complex128)
    cdef double complex[::1] qk_row = np.empty(M, dtype=np.complex128)
    cdef double[::1] denom = np.empty(M, dtype=np.float64)
    cdef double complex zk, conj_zk, vk
    cdef double w, pk

    for f in range(F):
        for m in range(M):
            cross[m] = 0.0
            denom[m] = 0.0
        for t in range(T):
            zk = qx[f, t, row]
            conj_zk = zk.conjugate()
            pk = zk.real * zk.real + zk.imag * zk.imag
            for m in range(M):
                w = 1.0 / Y[f, t, m]
                denom[m] += pk * w
                cross[m] += qx[f, t, m] * conj_zk * w
        if not denom[row] > 0.0:
            skipped += 1
            continue
        for m in range(M):
            v[m] = cross[m] / denom[m]
        v[row] = 1.0 - sqrt(<double> T) / sqrt(denom[row])
        for t in range(T):
            zk = qx[f, t, row]
            for m in range(M):
                qx[f, t, m] = qx[f, t, m] - v[m] * zk
        for m in range(M):
            qk_row[m] = Q[f, row, m]
        for m in range(M):
            vk = v[m]
            for t in range(M):
                Q[f, m, t] = Q[f, m, t] - vk * qk_row[t]
    return skipped


def mu_psd_stats(cnp.ndarray[cnp.float64_t, ndim=3] gain_NFM,
                 cnp.ndarray[cnp.float64_t, ndim=3] power_FTM,
                 cnp.ndarray[cnp.float64_t, ndim=3] Y_FTM):
    cdef double[:, :, ::1] gain = gain_NFM
    cdef double[:, :, ::1] p = power_FTM
    cdef double[:, :, ::1] Y = Y_FTM
    cdef Py_ssize_t N = gain.shape[0], F = gain.shape[1], M = gain.shape[2]
    cdef Py_ssize_t T = p.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=3] num_NFT = np.zeros(
        (N, F, T), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=3] den_NFT = np.zeros(
        (N, F, T), dtype=np.float64)
    cdef double[:, :, ::1] num = num_NFT
    cdef double[:, :, ::1] den = den_NFT
    cdef Py_ssize_t n, f, t, m
    cdef double w, num_acc, den_acc

    for n in range(N):
        for f in range(F):
            for t in range(T):
                num_acc = 0.0
                den_acc = 0.0
                for m in range(M):
                    w = 1.0 / Y[f, t, m]
                    num_acc += gain[n, f, m] * p[f, t, m] * w * w
                    den_acc += gain[n, f, m] * w
                num[n, f, t] = num_acc
                den[n, f, t] = den_acc
    return num_NFT, den_NFT


def mu_gain_stats(cnp.ndarray[cnp.float64_t, ndim=3] psd_NFT,
                  cnp.ndarray[cnp.float64_t, ndim=2] mask_NT,
                  cnp.ndarray[cnp.float64_t, ndim=3] power_FTM,
                  cnp.ndarray[cnp.float64_t, ndim=3] Y_FTM):
    cdef double[:, :, ::1] psd = psd_NFT
    cdef double[:, ::1] mask = mask_NT
    cdef double[:, :, ::1] p = power_FTM
    cdef double[:, :, ::1] Y = Y_FTM
    cdef Py_ssize_t N = psd.shape[0], F = psd.shape[1], T = psd.shape[2]
    cdef Py_ssize_t M = p.shape[2]
    cdef cnp.ndarray[cnp.float64_t, ndim=3] num_NFM = np.zeros(
        (N, F, M), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=3] den_NFM = np.zeros(
        (N, F, M), dtype=np.float64)
    cdef double[:, :, ::1] num = num_NFM
    cdef double[:, :, ::1] den = den_NFM
    cdef Py_ssize_t n, f, t, m
    cdef double w, lam

    for n in range(N):
        for f in range(F):
            for t in range(T):
                lam = mask[n, t] * psd[n, f, t]
                if lam == 0.0:
                    continue
                for m in range(M):
                    w = 1.0 / Y[f, t, m]
                    num[n, f, m] += lam * p[f, t, m] * w * w
                    den[n, f, m] += lam * w
    return num_NFM, den_NFM
