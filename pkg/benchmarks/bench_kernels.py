"""Benchmark the compiled inner-loop kernels against the numpy fallback.

Times each hot kernel on identical inputs from both implementations and
reports the best wall time plus the speedup.  With --end-to-end it also
times a full masked-covariance fit in two subprocesses, one per backend
(the backend is chosen at import time, so a fresh process is needed).

Usage:
    python benchmarks/bench_kernels.py
    python benchmarks/bench_kernels.py --frames 2000 --repeats 7
    python benchmarks/bench_kernels.py --end-to-end
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from sepdiar._accel import _kernels_py

try:
    from sepdiar._accel import _kernels as _compiled
except ImportError:
    _compiled = None


def make_inputs(N, F, T, M, seed=0):
    rng = np.random.default_rng(seed)
    psd_NFT = rng.uniform(0.1, 3.0, size=(N, F, T))
    gain_NFM = rng.uniform(0.2, 2.0, size=(N, F, M))
    mask_NT = (rng.uniform(size=(N, T)) < 0.8).astype(np.float64)
    mask_NT[:, 0] = 1.0
    Y_FTM = np.einsum("nft,nfm->ftm", psd_NFT * mask_NT[:, None, :],
                      gain_NFM)
    np.maximum(Y_FTM, 1e-10, out=Y_FTM)
    power_FTM = rng.uniform(0.05, 4.0, size=(F, T, M))
    qx_FTM = (rng.standard_normal((F, T, M))
              + 1j * rng.standard_normal((F, T, M)))
    Q_FMM = (rng.standard_normal((F, M, M))
             + 1j * rng.standard_normal((F, M, M)))
    Q_FMM += 2.0 * np.eye(M)
    return {
        "psd_NFT": psd_NFT, "gain_NFM": gain_NFM, "mask_NT": mask_NT,
        "Y_FTM": Y_FTM, "power_FTM": power_FTM,
        "qx_FTM": qx_FTM, "Q_FMM": Q_FMM,
    }


def timed(fn, repeats):
    best = float("inf")
    result = None
    for _ in range(repeats):
        start = time.perf_counter()
        result = fn()
        best = min(best, time.perf_counter() - start)
    return best, result


def flatten(result):
    if isinstance(result, tuple):
        return np.concatenate([np.asarray(r).ravel() for r in result])
    return np.asarray(result).ravel()


def bench_kernels(inp, repeats):
    data = dict(inp)

    def run_diag_power(mod):
        return lambda: mod.diag_power(data["psd_NFT"], data["gain_NFM"],
                                      data["mask_NT"], 1e-10)

    def run_nll(mod):
        return lambda: mod.nll_quad_sum(data["power_FTM"], data["Y_FTM"])

    def run_iss(mod):
        def call():
            qx = data["qx_FTM"].copy()
            Q = data["Q_FMM"].copy()
            mod.iss_step(qx, Q, data["Y_FTM"], 0)
            return qx, Q
        return call

    def run_mu_psd(mod):
        return lambda: mod.mu_psd_stats(data["gain_NFM"],
                                        data["power_FTM"], data["Y_FTM"])

    def run_mu_gain(mod):
        return lambda: mod.mu_gain_stats(data["psd_NFT"], data["mask_NT"],
                                         data["power_FTM"], data["Y_FTM"])

    table = []
    for name, factory in (("diag_power", run_diag_power),
                          ("nll_quad_sum", run_nll),
                          ("iss_step", run_iss),
                          ("mu_psd_stats", run_mu_psd),
                          ("mu_gain_stats", run_mu_gain)):
        t_py, res_py = timed(factory(_kernels_py), repeats)
        if _compiled is None:
            table.append((name, t_py, None, None))
            continue
        t_cy, res_cy = timed(factory(_compiled), repeats)
        diff = float(np.max(np.abs(flatten(res_py) - flatten(res_cy))))
        table.append((name, t_py, t_cy, diff))
    return table


def print_table(table):
    print(f"{'kernel':<15}{'numpy [ms]':>12}{'compiled [ms]':>15}"
          f"{'speedup':>9}{'max |diff|':>12}")
    for name, t_py, t_cy, diff in table:
        if t_cy is None:
            print(f"{name:<15}{1e3 * t_py:>12.2f}"
                  f"{'n/a':>15}{'n/a':>9}{'n/a':>12}")
        else:
            print(f"{name:<15}{1e3 * t_py:>12.2f}{1e3 * t_cy:>15.2f}"
                  f"{t_py / t_cy:>8.1f}x{diff:>12.2e}")


FIT_PROBE = """
import time
import sepdiar._accel as accel
from sepdiar import jdsep
from sepdiar.simulate import circular_array, synth_scene
from sepdiar.jdsep import add_noise_source

scene = synth_scene(circular_array(4, 0.05), num_speakers=2,
                    duration_s=4.0, snr_db=20.0, seed=0)
guide = add_noise_source(scene.masks)
start = time.perf_counter()
jdsep.fit_masked_fca(scene.mixture, guide, 3, iterations=30, seed=0)
print(f"{accel.BACKEND} {time.perf_counter() - start:.3f}")
"""


def bench_end_to_end():
    print("\nfull masked-covariance fit (4 s scene, M=4, N=3, 30 iters):")
    for forced in ("", "1"):
        env = dict(os.environ)
        if forced:
            env["SEPDIAR_NO_ACCEL"] = forced
        else:
            env.pop("SEPDIAR_NO_ACCEL", None)
        out = subprocess.run([sys.executable, "-c", FIT_PROBE], env=env,
                             capture_output=True, text=True, check=True)
        backend, seconds = out.stdout.split()
        print(f"  {backend:<10}{float(seconds):>8.2f} s")


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--sources", type=int, default=6)
    parser.add_argument("--freqs", type=int, default=257)
    parser.add_argument("--frames", type=int, default=1001)
    parser.add_argument("--mics", type=int, default=8)
    parser.add_argument("--repeats", type=int, default=5)
    parser.add_argument("--end-to-end", action="store_true")
    args = parser.parse_args()

    if _compiled is None:
        print("compiled extension not available; timing numpy only\n")
    shape = (args.sources, args.freqs, args.frames, args.mics)
    print(f"N={shape[0]} F={shape[1]} T={shape[2]} M={shape[3]}, "
          f"best of {args.repeats}\n")
    inp = make_inputs(*shape)
    print_table(bench_kernels(inp, args.repeats))
    if args.end_to_end:
        bench_end_to_end()


if __name__ == "__main__":
    main()
