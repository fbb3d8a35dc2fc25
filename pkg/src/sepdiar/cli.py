"""Batch command-line pipelines.

Subcommands: simulate | separate | evaluate | objective | plotdata.
Every command is deterministic given --seed: reruns produce
byte-identical artifacts.  Exit codes: 0 success, 2 invalid flags or
flag combinations, 1 runtime failure.

An optional JSON config file (--config) may carry any long flag name
with dashes replaced by underscores; explicit flags override the file,
the file overrides built-in defaults.
"""

import argparse
import json
import os
import sys
from glob import glob

import numpy as np

from . import cacgmm, diarize, jdsep, objectives, simulate, wpe
from .core import (ActivityMask, SepdiarError, Spectrogram, load_arrays,
                   save_arrays)
from .jdsep import JdParams, add_noise_source
from .objectives import PosteriorParams
from .stft import StftConfig, istft, read_wav, stft, write_wav


class UsageError(SepdiarError):
    pass


class MissingMasks(UsageError):
    pass


class LengthMismatch(SepdiarError):
    pass


DEFAULTS = {
    "seed": 0,
    "out": ".",
    "stft_window": 512,
    "stft_hop": 160,
    "sources": 6,
    "nmf_basis": 8,
    "iters": 30,
    "gamma": 1.0,
    "threshold": 0.5,
    "median_width": 11,
    "method": "fca-mask",
    "masks": None,
    "no_wpe": False,
    "wpe_taps": 10,
    "wpe_delay": 3,
    "wpe_iters": 3,
    "speakers": 2,
    "duration": 10.0,
    "pattern": "partial-overlap",
    "snr": 20.0,
    "clip_seconds": 10.0,
    "eps": 1e-12,
    "rate": 16000,
}


def _resolve(args):
    """Merge flags over config-file values over defaults."""
    cfg = dict(DEFAULTS)
    config_path = getattr(args, "config", None)
    if config_path:
        try:
            with open(config_path, "r", encoding="utf-8") as fh:
                file_cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {config_path}: {exc}")
        for key, value in file_cfg.items():
            if key not in cfg:
                raise UsageError(f"unknown config key {key!r}")
            cfg[key] = value
    for key, value in vars(args).items():
        if key in cfg and value is not None:
            cfg[key] = value
    return cfg


def _stft_config(cfg):
    return StftConfig(window_size=int(cfg["stft_window"]),
                      hop=int(cfg["stft_hop"]),
                      sample_rate=float(cfg["rate"]))


def _write_json(path, payload):
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _write_trace(path, values):
    with open(path, "w", encoding="utf-8") as fh:
        for v in values:
            fh.write(repr(float(v)) + "\n")


def _load_masks_file(path, num_frames, frame_rate):
    if path is None:
        raise MissingMasks("this method requires --masks")
    if not os.path.exists(path):
        raise UsageError(f"masks file not found: {path}")
    if path.endswith(".rttm"):
        masks, _ = diarize.read_rttm(path, num_frames, frame_rate)
        return masks
    raw_NT = diarize.read_activity_csv(path)
    if raw_NT.shape[1] != num_frames:
        raise LengthMismatch(
            f"masks cover {raw_NT.shape[1]} frames, expected {num_frames}")
    return ActivityMask.from_array((raw_NT >= 0.5).astype(np.uint8))


def cmd_simulate(args):
    cfg = _resolve(args)
    stft_cfg = _stft_config(cfg)
    try:
        scene = simulate.synth_scene(
            num_speakers=int(cfg["speakers"]),
            duration_s=float(cfg["duration"]),
            pattern=cfg["pattern"],
            snr_db=float(cfg["snr"]),
            seed=int(cfg["seed"]),
            stft_config=stft_cfg)
    except (simulate.TooManySpeakers, simulate.InvalidSnr,
            ValueError) as exc:
        raise UsageError(str(exc))

    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    samples = int(float(cfg["duration"]) * stft_cfg.sample_rate)
    write_wav(os.path.join(out, "mixture.wav"),
              istft(scene.mixture, stft_cfg, samples), stft_cfg.sample_rate)
    for n, image in enumerate(scene.source_images):
        write_wav(os.path.join(out, f"src{n}.wav"),
                  istft(image, stft_cfg, samples), stft_cfg.sample_rate)
    diarize.write_activity_csv(os.path.join(out, "masks.csv"),
                               scene.masks)
    frame_rate = stft_cfg.sample_rate / stft_cfg.hop
    diarize.write_rttm(os.path.join(out, "masks.rttm"), scene.masks,
                       frame_rate)
    F, T, M = scene.mixture.shape
    save_arrays(os.path.join(out, "arrays"),
                {"steering": scene.steering_NFM,
                 "psd": scene.psd_NFT,
                 "masks": scene.masks.matrix},
                metadata={"F": F, "T": T, "M": M,
                          "N": int(cfg["speakers"]),
                          "sample_rate": stft_cfg.sample_rate,
                          "hop": stft_cfg.hop,
                          "seed": int(cfg["seed"]),
                          "snr_db": float(cfg["snr"])})
    return 0


def cmd_separate(args):
    cfg = _resolve(args)
    stft_cfg = _stft_config(cfg)
    signal_SM, _ = read_wav(args.input, expected_rate=int(cfg["rate"]))
    spec = stft(signal_SM, stft_cfg)
    if not cfg["no_wpe"]:
        wpe_cfg = wpe.WpeConfig(taps=int(cfg["wpe_taps"]),
                                delay=int(cfg["wpe_delay"]),
                                iterations=int(cfg["wpe_iters"]))
        spec = wpe.dereverberate(spec, wpe_cfg)
    F, T, M = spec.shape
    frame_rate = stft_cfg.sample_rate / stft_cfg.hop
    method = cfg["method"]
    seed = int(cfg["seed"])
    iters = int(cfg["iters"])
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)

    trace = []
    if method in ("fca-mask", "gss"):
        speaker_masks = _load_masks_file(cfg["masks"], T, frame_rate)
        guide = add_noise_source(speaker_masks)
        N = guide.num_sources
        if method == "fca-mask":
            params = jdsep.fit_masked_fca(spec, guide, N, iters, seed,
                                          nll_trace=trace)
            images = jdsep.wiener_separate(spec, params)
            activity_NT = simulate.activity_from_energy(images)
            _save_jd_params(os.path.join(out, "params"), params, seed,
                            iters)
        else:
            ll_trace = []
            params = cacgmm.fit_cacgmm(spec, N, guide=guide,
                                       iterations=iters, seed=seed,
                                       ll_trace=ll_trace)
            trace = [-v for v in ll_trace]
            images = _mask_images(spec, params)
            activity_NT = params.resp_NFT.mean(axis=1)
            _save_cacgmm_params(os.path.join(out, "params"), params, seed,
                                iters)
    elif method == "cacgmm":
        N = int(cfg["sources"])
        ll_trace = []
        params = cacgmm.fit_cacgmm(spec, N, iterations=iters, seed=seed,
                                   ll_trace=ll_trace)
        trace = [-v for v in ll_trace]
        images = _mask_images(spec, params)
        activity_NT = params.resp_NFT.mean(axis=1)
        _save_cacgmm_params(os.path.join(out, "params"), params, seed,
                            iters)
    elif method == "fastmnmf2":
        N = int(cfg["sources"])
        params = jdsep.fit_fastmnmf2(spec, N, int(cfg["nmf_basis"]),
                                     iters, seed, nll_trace=trace)
        images = jdsep.wiener_separate(spec, params)
        activity_NT = simulate.activity_from_energy(images)
        _save_jd_params(os.path.join(out, "params"), params, seed, iters)
    else:
        raise UsageError(f"unknown method {method!r}")

    samples = len(signal_SM)
    for n, image in enumerate(images):
        write_wav(os.path.join(out, f"src{n}.wav"),
                  istft(image, stft_cfg, samples), stft_cfg.sample_rate)
    diarize.write_activity_csv(os.path.join(out, "activity.csv"),
                               activity_NT)
    _write_trace(os.path.join(out, "nll_trace.txt"), trace)
    save_arrays(os.path.join(out, "spec"),
                {"spectrogram": spec.tensor},
                metadata={"F": F, "T": T, "M": M,
                          "sample_rate": stft_cfg.sample_rate,
                          "hop": stft_cfg.hop})
    return 0


def _mask_images(spec, params):
    X_FTM = spec.tensor
    return [Spectrogram.from_array(
        params.resp_NFT[n][:, :, None] * X_FTM,
        sample_rate=spec.sample_rate, hop=spec.hop)
        for n in range(params.num_sources)]


def _save_jd_params(out_dir, params, seed, iterations):
    arrays = {"Q": params.Q_FMM, "g": params.g_NFM,
              "lam": params.lam_NFT, "mask": params.masks.matrix}
    if params.nmf is not None:
        arrays["W"] = params.nmf.W_NFK
        arrays["H"] = params.nmf.H_NKT
    save_arrays(out_dir, arrays,
                metadata={"model": "jd", "N": params.num_sources,
                          "psd_floor": params.psd_floor, "seed": seed,
                          "iterations": iterations})


def _save_cacgmm_params(out_dir, params, seed, iterations):
    save_arrays(out_dir,
                {"B": params.B_NFMM, "weight": params.weight_NF,
                 "resp": params.resp_NFT},
                metadata={"model": "cacgmm", "N": params.num_sources,
                          "seed": seed, "iterations": iterations})


def _read_sources(directory):
    paths = sorted(glob(os.path.join(directory, "src*.wav")))
    if not paths:
        raise UsageError(f"no src*.wav files in {directory}")
    signals = []
    for p in paths:
        sig_SM, _ = read_wav(p)
        signals.append(sig_SM)
    return paths, signals


def cmd_evaluate(args):
    cfg = _resolve(args)
    est_paths, est_signals = _read_sources(args.est)
    ref_paths, ref_signals = _read_sources(args.ref)
    eta_path = os.path.join(args.est, "activity.csv")
    mask_path = os.path.join(args.ref, "masks.csv")
    if not os.path.exists(eta_path):
        raise UsageError(f"missing {eta_path}")
    if not os.path.exists(mask_path):
        raise UsageError(f"missing {mask_path}")
    eta_ET = diarize.read_activity_csv(eta_path)
    ref_NT = diarize.read_activity_csv(mask_path)
    if len(est_signals) < len(ref_signals):
        raise UsageError("fewer estimates than references")
    for est in est_signals:
        if len(est) != len(ref_signals[0]):
            raise LengthMismatch("estimate and reference lengths differ")

    perm, _ = objectives.pit_align(ref_NT, eta_ET)
    scores = []
    for i in range(len(ref_signals)):
        scores.append(diarize.si_sdr(est_signals[perm[i]][:, 0],
                                     ref_signals[i][:, 0]))
    smoothed_ET = diarize.median_smooth(eta_ET,
                                        int(cfg["median_width"]))
    est_NT = diarize.threshold(smoothed_ET, float(cfg["threshold"]))
    der = diarize.der(est_NT[perm], ref_NT)

    speaker_rows = np.arange(len(eta_ET))
    if len(eta_ET) == len(ref_NT) + 1:
        speaker_rows = speaker_rows[:-1]
    frame_rate = float(cfg["rate"]) / float(cfg["stft_hop"])
    clip_frames = max(1, int(float(cfg["clip_seconds"]) * frame_rate))
    sca = diarize.sca(est_NT[speaker_rows], ref_NT, clip_frames)

    _write_json(getattr(args, "out", None), {
        "si_sdr": [float(s) for s in scores],
        "si_sdr_mean": float(np.mean(scores)),
        "der": float(der),
        "sca": float(sca),
        "permutation": [int(p) for p in perm],
    })
    return 0


def cmd_objective(args):
    cfg = _resolve(args)
    spec_arrays, spec_meta = load_arrays(args.spec)
    spec = Spectrogram.from_array(
        spec_arrays["spectrogram"],
        sample_rate=spec_meta.get("sample_rate", 16000.0),
        hop=spec_meta.get("hop", 160))
    params_arrays, params_meta = load_arrays(args.params)
    if params_meta.get("model") != "jd":
        raise UsageError("objective needs a jd params manifest")
    jd = JdParams(
        Q_FMM=params_arrays["Q"], g_NFM=params_arrays["g"],
        lam_NFT=params_arrays["lam"],
        masks=ActivityMask.from_array(params_arrays["mask"]),
        psd_floor=float(params_meta.get("psd_floor", jdsep.PSD_FLOOR)))
    post_arrays, post_meta = load_arrays(args.posterior)
    n_post = int(post_meta["num_sources"])
    post = PosteriorParams(
        mean=[post_arrays[f"mean{n}"] for n in range(n_post)],
        var=[post_arrays[f"var{n}"] for n in range(n_post)],
        eta_NT=post_arrays["eta"])

    F, T, M = spec.shape
    frame_rate = float(cfg["rate"]) / float(cfg["stft_hop"])
    ref = _load_masks_file(args.masks, T, frame_rate)
    ref_NT = ref.matrix.astype(np.float64)
    eta_NT = post.eta_NT
    rows = np.arange(len(eta_NT))
    if len(eta_NT) == len(ref_NT) + 1:
        rows = rows[:-1]
    perm, _ = objectives.pit_align(ref_NT, eta_NT[rows])
    l_diar = -objectives.bce_diarization(ref_NT, eta_NT[rows][perm])
    l_sep = (objectives.separation_term(spec, jd)
             - objectives.kl_to_standard_normal(post))
    report = objectives.combined_objective(
        l_sep, l_diar, T, F, len(ref_NT), gamma=float(cfg["gamma"]),
        permutation=[int(p) for p in perm])
    _write_json(getattr(args, "out", None), {
        "l_sep": report.l_sep, "l_diar": report.l_diar,
        "l_total": report.l_total, "gamma": report.gamma,
        "permutation": report.permutation,
    })
    return 0


def cmd_plotdata(args):
    cfg = _resolve(args)
    stft_cfg = _stft_config(cfg)
    eps = float(cfg["eps"])
    out = cfg["out"]
    os.makedirs(out, exist_ok=True)
    wavs = sorted(glob(os.path.join(args.input, "*.wav")))
    if not wavs and not os.path.exists(
            os.path.join(args.input, "masks.csv")):
        raise UsageError(f"nothing to plot in {args.input}")
    for path in wavs:
        stem = os.path.splitext(os.path.basename(path))[0]
        sig_SM, _ = read_wav(path)
        spec = stft(sig_SM, stft_cfg)
        mag_FT = 20.0 * np.log10(np.abs(spec.tensor[:, :, 0]) + eps)
        lines = [",".join(repr(float(v)) for v in row) for row in mag_FT]
        with open(os.path.join(out, f"spec_{stem}.csv"), "w",
                  encoding="utf-8") as fh:
            fh.write("\n".join(lines) + "\n")
    mask_path = os.path.join(args.input, "masks.csv")
    if os.path.exists(mask_path):
        ribbon_NT = diarize.read_activity_csv(mask_path)
        diarize.write_activity_csv(os.path.join(out, "ribbon.csv"),
                                   ribbon_NT)
    return 0


def _add_common(sub):
    sub.add_argument("--seed", type=int)
    sub.add_argument("--config")
    sub.add_argument("--out")
    sub.add_argument("--stft-window", type=int, dest="stft_window")
    sub.add_argument("--stft-hop", type=int, dest="stft_hop")
    sub.add_argument("--rate", type=int)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="sepdiar",
        description="multichannel separation and diarization scoring")
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("simulate", help="generate a synthetic scene")
    _add_common(p)
    p.add_argument("--speakers", type=int)
    p.add_argument("--duration", type=float)
    p.add_argument("--pattern",
                   choices=["full-overlap", "sequential",
                            "partial-overlap"])
    p.add_argument("--snr", type=float)
    p.set_defaults(func=cmd_simulate)

    p = subs.add_parser("separate", help="separate a mixture recording")
    _add_common(p)
    p.add_argument("input", help="multichannel mixture WAV")
    p.add_argument("--method",
                   choices=["fca-mask", "gss", "cacgmm", "fastmnmf2"])
    p.add_argument("--masks", help="speaker activity CSV or RTTM")
    p.add_argument("--sources", type=int)
    p.add_argument("--nmf-basis", type=int, dest="nmf_basis")
    p.add_argument("--iters", type=int)
    p.add_argument("--no-wpe", action="store_const", const=True,
                   dest="no_wpe")
    p.add_argument("--wpe-taps", type=int, dest="wpe_taps")
    p.add_argument("--wpe-delay", type=int, dest="wpe_delay")
    p.add_argument("--wpe-iters", type=int, dest="wpe_iters")
    p.set_defaults(func=cmd_separate)

    p = subs.add_parser("evaluate", help="score estimates against truth")
    _add_common(p)
    p.add_argument("--est", required=True, help="directory of estimates")
    p.add_argument("--ref", required=True, help="directory of references")
    p.add_argument("--threshold", type=float)
    p.add_argument("--median-width", type=int, dest="median_width")
    p.add_argument("--clip-seconds", type=float, dest="clip_seconds")
    p.set_defaults(func=cmd_evaluate)

    p = subs.add_parser("objective", help="evaluate the multitask loss")
    _add_common(p)
    p.add_argument("--spec", required=True,
                   help="spectrogram manifest directory")
    p.add_argument("--params", required=True,
                   help="model params manifest directory")
    p.add_argument("--posterior", required=True,
                   help="posterior manifest directory")
    p.add_argument("--masks", required=True,
                   help="reference activity CSV or RTTM")
    p.add_argument("--gamma", type=float)
    p.set_defaults(func=cmd_objective)

    p = subs.add_parser("plotdata", help="emit CSV matrices for figures")
    _add_common(p)
    p.add_argument("input", help="directory with WAVs and masks")
    p.add_argument("--eps", type=float)
    p.set_defaults(func=cmd_plotdata)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SepdiarError, OSError, np.linalg.LinAlgError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
