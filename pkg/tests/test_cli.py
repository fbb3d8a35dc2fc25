"""End-to-end tests for the batch command line.

Every test drives `sepdiar.cli.main` in process with a small scene
(1.5 s at 16 kHz) so the whole module stays fast.  Determinism tests
compare artifact directories byte for byte.
"""

import hashlib
import json
import os
import shutil

import numpy as np
import pytest

from conftest import random_jd_params, random_spectrogram
from sepdiar import diarize, objectives
from sepdiar.cli import main
from sepdiar.core import ActivityMask, Spectrogram, load_arrays, save_arrays
from sepdiar.jdsep import JdParams
from sepdiar.objectives import PosteriorParams
from sepdiar.stft import StftConfig, read_wav, stft, write_wav

RATE = 16000
DURATION = 1.5
SAMPLES = int(DURATION * RATE)


def run_cli(*argv):
    return main([str(a) for a in argv])


def dir_digest(root):
    """Maps each relative file path under root to its content hash."""
    digest = {}
    for base, _, names in os.walk(root):
        for name in names:
            path = os.path.join(base, name)
            rel = os.path.relpath(path, root)
            with open(path, "rb") as fh:
                digest[rel] = hashlib.sha256(fh.read()).hexdigest()
    return digest


def read_trace(path):
    with open(path, "r", encoding="utf-8") as fh:
        return [float(line) for line in fh if line.strip()]


def assert_non_increasing(values, slack=1e-6):
    arr = np.asarray(values)
    assert len(arr) >= 2
    assert np.all(np.diff(arr) <= slack * np.abs(arr[:-1]))


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("scene")
    rc = run_cli("simulate", "--out", out, "--duration", DURATION,
                 "--seed", 3)
    assert rc == 0
    return out


@pytest.fixture(scope="module")
def fca_dir(tmp_path_factory, scene_dir):
    out = tmp_path_factory.mktemp("fca")
    rc = run_cli("separate", scene_dir / "mixture.wav",
                 "--masks", scene_dir / "masks.csv",
                 "--no-wpe", "--iters", 6, "--seed", 0, "--out", out)
    assert rc == 0
    return out


def test_simulate_writes_expected_artifacts(scene_dir):
    for name in ("mixture.wav", "src0.wav", "src1.wav",
                 "masks.csv", "masks.rttm"):
        assert (scene_dir / name).exists()
    mixture_SM, rate = read_wav(scene_dir / "mixture.wav")
    assert rate == RATE
    assert mixture_SM.shape == (SAMPLES, 8)

    arrays, meta = load_arrays(scene_dir / "arrays")
    assert set(arrays) == {"steering", "psd", "masks"}
    assert meta["N"] == 2
    assert arrays["masks"].shape == (2, meta["T"])
    masks_NT = diarize.read_activity_csv(scene_dir / "masks.csv")
    assert masks_NT.shape == (2, meta["T"])
    np.testing.assert_array_equal(masks_NT, arrays["masks"])


def test_simulate_rejects_speaker_limit(tmp_path, capsys):
    rc = run_cli("simulate", "--speakers", 9, "--out", tmp_path)
    assert rc == 2
    assert "limit is 5" in capsys.readouterr().err


def test_simulate_rejects_short_duration(tmp_path, capsys):
    rc = run_cli("simulate", "--duration", 0.25, "--out", tmp_path)
    assert rc == 2
    assert "duration" in capsys.readouterr().err


def test_simulate_rejects_unknown_config_key(tmp_path, capsys):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"bogus": 1}))
    rc = run_cli("simulate", "--config", cfg_path, "--out", tmp_path)
    assert rc == 2
    assert "unknown config key" in capsys.readouterr().err


def test_config_file_and_flag_precedence(tmp_path):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({"duration": 1.25}))

    from_config = tmp_path / "a"
    rc = run_cli("simulate", "--config", cfg_path, "--out", from_config)
    assert rc == 0
    sig_SM, _ = read_wav(from_config / "mixture.wav")
    assert len(sig_SM) == int(1.25 * RATE)

    from_flag = tmp_path / "b"
    rc = run_cli("simulate", "--config", cfg_path, "--out", from_flag,
                 "--duration", 1.5)
    assert rc == 0
    sig_SM, _ = read_wav(from_flag / "mixture.wav")
    assert len(sig_SM) == SAMPLES


def test_simulate_deterministic(tmp_path):
    for sub in ("one", "two"):
        rc = run_cli("simulate", "--out", tmp_path / sub,
                     "--duration", DURATION, "--seed", 7)
        assert rc == 0
    assert dir_digest(tmp_path / "one") == dir_digest(tmp_path / "two")


def test_separate_fca_mask_artifacts(fca_dir):
    for name in ("src0.wav", "src1.wav", "src2.wav",
                 "activity.csv", "nll_trace.txt"):
        assert (fca_dir / name).exists()
    assert not (fca_dir / "src3.wav").exists()

    activity_NT = diarize.read_activity_csv(fca_dir / "activity.csv")
    assert len(activity_NT) == 3
    assert np.all(activity_NT >= 0.0) and np.all(activity_NT <= 1.0)

    arrays, meta = load_arrays(fca_dir / "params")
    assert meta["model"] == "jd"
    assert set(arrays) == {"Q", "g", "lam", "mask"}

    spec_arrays, spec_meta = load_arrays(fca_dir / "spec")
    F, T, M = (spec_meta["F"], spec_meta["T"], spec_meta["M"])
    assert spec_arrays["spectrogram"].shape == (F, T, M)
    assert (F, M) == (257, 8)


def test_separate_fca_mask_trace_monotone(fca_dir):
    trace = read_trace(fca_dir / "nll_trace.txt")
    assert len(trace) == 7
    assert_non_increasing(trace)


def test_separate_outputs_sum_to_mixture(scene_dir, fca_dir):
    """Masked Wiener extraction is consistent: channel sums rebuild
    the input signal up to STFT round-trip error."""
    mixture_SM, _ = read_wav(scene_dir / "mixture.wav")
    total = np.zeros_like(mixture_SM)
    for n in range(3):
        sig_SM, _ = read_wav(fca_dir / f"src{n}.wav")
        total += sig_SM
    scale = np.max(np.abs(mixture_SM))
    assert np.max(np.abs(total - mixture_SM)) <= 1e-4 * scale


def test_separate_requires_masks(tmp_path, scene_dir, capsys):
    rc = run_cli("separate", scene_dir / "mixture.wav",
                 "--no-wpe", "--out", tmp_path)
    assert rc == 2
    assert "requires --masks" in capsys.readouterr().err


def test_separate_masks_frame_mismatch(tmp_path, scene_dir, capsys):
    bad = tmp_path / "short.csv"
    diarize.write_activity_csv(bad, np.ones((2, 10)))
    rc = run_cli("separate", scene_dir / "mixture.wav",
                 "--masks", bad, "--no-wpe", "--out", tmp_path)
    assert rc == 1
    assert "masks cover" in capsys.readouterr().err


def test_separate_rejects_wrong_rate(tmp_path, capsys):
    slow = tmp_path / "slow.wav"
    write_wav(slow, np.zeros((4000, 2)), rate=8000)
    rc = run_cli("separate", slow, "--no-wpe", "--out", tmp_path,
                 "--masks", "unused.csv")
    assert rc == 1
    assert "sample rate" in capsys.readouterr().err


def test_separate_missing_input(tmp_path, capsys):
    rc = run_cli("separate", tmp_path / "nope.wav", "--no-wpe",
                 "--out", tmp_path)
    assert rc == 1
    assert capsys.readouterr().err.startswith("error:")


def test_separate_rttm_masks_match_csv(tmp_path, scene_dir):
    """RTTM and CSV encodings of the same activity give identical runs."""
    for sub, masks in (("csv", "masks.csv"), ("rttm", "masks.rttm")):
        rc = run_cli("separate", scene_dir / "mixture.wav",
                     "--masks", scene_dir / masks,
                     "--no-wpe", "--iters", 2, "--out", tmp_path / sub)
        assert rc == 0
    assert dir_digest(tmp_path / "csv") == dir_digest(tmp_path / "rttm")


def test_separate_gss_guided(tmp_path, scene_dir):
    out = tmp_path / "gss"
    rc = run_cli("separate", scene_dir / "mixture.wav",
                 "--method", "gss", "--masks", scene_dir / "masks.csv",
                 "--no-wpe", "--iters", 4, "--out", out)
    assert rc == 0
    _, meta = load_arrays(out / "params")
    assert meta["model"] == "cacgmm"
    activity_NT = diarize.read_activity_csv(out / "activity.csv")
    assert len(activity_NT) == 3
    assert_non_increasing(read_trace(out / "nll_trace.txt"))


def test_separate_cacgmm_blind(tmp_path, scene_dir):
    out = tmp_path / "cacgmm"
    rc = run_cli("separate", scene_dir / "mixture.wav",
                 "--method", "cacgmm", "--sources", 3,
                 "--no-wpe", "--iters", 4, "--out", out)
    assert rc == 0
    activity_NT = diarize.read_activity_csv(out / "activity.csv")
    assert len(activity_NT) == 3
    assert_non_increasing(read_trace(out / "nll_trace.txt"))


def test_separate_fastmnmf2_zero_iters_identity(tmp_path, scene_dir):
    """With zero updates the Wiener masks still partition the mixture,
    so the outputs must sum back to the input."""
    out = tmp_path / "mnmf"
    rc = run_cli("separate", scene_dir / "mixture.wav",
                 "--method", "fastmnmf2", "--sources", 2,
                 "--iters", 0, "--no-wpe", "--out", out)
    assert rc == 0
    arrays, _ = load_arrays(out / "params")
    assert {"W", "H"} <= set(arrays)

    mixture_SM, _ = read_wav(scene_dir / "mixture.wav")
    total = np.zeros_like(mixture_SM)
    for n in range(2):
        sig_SM, _ = read_wav(out / f"src{n}.wav")
        total += sig_SM
    scale = np.max(np.abs(mixture_SM))
    assert np.max(np.abs(total - mixture_SM)) <= 1e-4 * scale


def test_separate_with_wpe_runs(tmp_path, scene_dir):
    out = tmp_path / "wpe"
    rc = run_cli("separate", scene_dir / "mixture.wav",
                 "--masks", scene_dir / "masks.csv",
                 "--wpe-taps", 3, "--wpe-delay", 1, "--wpe-iters", 1,
                 "--iters", 2, "--out", out)
    assert rc == 0
    assert (out / "src0.wav").exists()
    assert all(np.isfinite(v) for v in read_trace(out / "nll_trace.txt"))


def _oracle_estimate_dir(path, scene_dir, order=(0, 1)):
    os.makedirs(path, exist_ok=True)
    for slot, src in enumerate(order):
        shutil.copyfile(scene_dir / f"src{src}.wav",
                        path / f"src{slot}.wav")
    masks_NT = diarize.read_activity_csv(scene_dir / "masks.csv")
    diarize.write_activity_csv(path / "activity.csv",
                               masks_NT[list(order)])
    return path


def test_evaluate_oracle_estimates(tmp_path, scene_dir):
    est = _oracle_estimate_dir(tmp_path / "est", scene_dir)
    report = tmp_path / "metrics.json"
    rc = run_cli("evaluate", "--est", est, "--ref", scene_dir,
                 "--median-width", 1, "--out", report)
    assert rc == 0
    got = json.loads(report.read_text())
    assert got["der"] == 0.0
    assert got["sca"] == 1.0
    assert got["permutation"] == [0, 1]
    assert got["si_sdr"] == [300.0, 300.0]
    assert got["si_sdr_mean"] == 300.0


def test_evaluate_recovers_shuffled_order(tmp_path, scene_dir):
    est = _oracle_estimate_dir(tmp_path / "est", scene_dir, order=(1, 0))
    report = tmp_path / "metrics.json"
    rc = run_cli("evaluate", "--est", est, "--ref", scene_dir,
                 "--median-width", 1, "--out", report)
    assert rc == 0
    got = json.loads(report.read_text())
    assert got["permutation"] == [1, 0]
    assert got["der"] == 0.0
    assert got["sca"] == 1.0
    assert got["si_sdr"] == [300.0, 300.0]


def test_evaluate_separation_output(tmp_path, scene_dir, fca_dir):
    report = tmp_path / "metrics.json"
    rc = run_cli("evaluate", "--est", fca_dir, "--ref", scene_dir,
                 "--out", report)
    assert rc == 0
    got = json.loads(report.read_text())
    assert set(got) == {"si_sdr", "si_sdr_mean", "der", "sca",
                        "permutation"}
    assert len(got["si_sdr"]) == 2
    assert len(got["permutation"]) == 2
    assert got["si_sdr_mean"] > 0.0
    assert 0.0 <= got["der"] <= 1.0


def test_evaluate_missing_activity(tmp_path, scene_dir, capsys):
    est = tmp_path / "est"
    os.makedirs(est)
    shutil.copyfile(scene_dir / "src0.wav", est / "src0.wav")
    shutil.copyfile(scene_dir / "src1.wav", est / "src1.wav")
    rc = run_cli("evaluate", "--est", est, "--ref", scene_dir)
    assert rc == 2
    assert "activity.csv" in capsys.readouterr().err


def test_evaluate_fewer_estimates(tmp_path, scene_dir, capsys):
    est = tmp_path / "est"
    os.makedirs(est)
    shutil.copyfile(scene_dir / "src0.wav", est / "src0.wav")
    masks_NT = diarize.read_activity_csv(scene_dir / "masks.csv")
    diarize.write_activity_csv(est / "activity.csv", masks_NT)
    rc = run_cli("evaluate", "--est", est, "--ref", scene_dir)
    assert rc == 2
    assert "fewer estimates" in capsys.readouterr().err


def test_evaluate_length_mismatch(tmp_path, scene_dir, capsys):
    est = _oracle_estimate_dir(tmp_path / "est", scene_dir)
    sig_SM, rate = read_wav(est / "src0.wav")
    write_wav(est / "src0.wav", sig_SM[:-100], rate)
    rc = run_cli("evaluate", "--est", est, "--ref", scene_dir)
    assert rc == 1
    assert "lengths differ" in capsys.readouterr().err


def _objective_inputs(root, eta_rows="oracle"):
    """Builds spec/params/posterior manifests plus a masks CSV."""
    rng = np.random.default_rng(11)
    F, T, M, N = 5, 12, 3, 2
    spec = random_spectrogram(rng, F=F, T=T, M=M)
    jd = random_jd_params(rng, M=M, N=N, F=F, T=T)
    ref_NT = jd.masks.matrix.astype(np.float64)

    save_arrays(root / "spec", {"spectrogram": spec.tensor},
                metadata={"sample_rate": 16000.0, "hop": 160})
    save_arrays(root / "params",
                {"Q": jd.Q_FMM, "g": jd.g_NFM, "lam": jd.lam_NFT,
                 "mask": jd.masks.matrix},
                metadata={"model": "jd", "psd_floor": jd.psd_floor})

    if eta_rows == "oracle":
        eta_NT = ref_NT.copy()
    else:
        extra = np.full((1, T), 0.5)
        eta_NT = np.vstack([ref_NT[::-1], extra])
    post = {"eta": eta_NT}
    for n in range(N):
        post[f"mean{n}"] = rng.normal(size=4)
        post[f"var{n}"] = rng.uniform(0.5, 2.0, size=4)
    save_arrays(root / "posterior", post, metadata={"num_sources": N})
    diarize.write_activity_csv(root / "masks.csv", ref_NT)

    posterior = PosteriorParams(
        mean=[post[f"mean{n}"] for n in range(N)],
        var=[post[f"var{n}"] for n in range(N)],
        eta_NT=eta_NT)
    return spec, jd, posterior, (F, T, N)


def test_objective_reports_loss_identity(tmp_path):
    spec, jd, posterior, (F, T, N) = _objective_inputs(tmp_path)
    report = tmp_path / "objective.json"
    rc = run_cli("objective", "--spec", tmp_path / "spec",
                 "--params", tmp_path / "params",
                 "--posterior", tmp_path / "posterior",
                 "--masks", tmp_path / "masks.csv", "--out", report)
    assert rc == 0
    got = json.loads(report.read_text())

    assert got["gamma"] == 1.0
    assert got["permutation"] == [0, 1]
    assert abs(got["l_diar"]) <= 1e-4
    want_sep = (objectives.separation_term(spec, jd)
                - objectives.kl_to_standard_normal(posterior))
    assert got["l_sep"] == pytest.approx(want_sep, rel=1e-10)
    want_total = got["l_sep"] / (T * F) + got["l_diar"] / (T * N)
    assert got["l_total"] == pytest.approx(want_total, rel=1e-12)


def test_objective_gamma_and_extra_row(tmp_path):
    _objective_inputs(tmp_path, eta_rows="shuffled+noise")
    report = tmp_path / "objective.json"
    rc = run_cli("objective", "--spec", tmp_path / "spec",
                 "--params", tmp_path / "params",
                 "--posterior", tmp_path / "posterior",
                 "--masks", tmp_path / "masks.csv",
                 "--gamma", 0.25, "--out", report)
    assert rc == 0
    got = json.loads(report.read_text())
    assert got["gamma"] == 0.25
    assert got["permutation"] == [1, 0]
    assert abs(got["l_diar"]) <= 1e-4
    _, T, N = 5, 12, 2
    want_total = got["l_sep"] / (T * 5) + 0.25 * got["l_diar"] / (T * N)
    assert got["l_total"] == pytest.approx(want_total, rel=1e-12)


def test_objective_rejects_non_jd_params(tmp_path, capsys):
    _objective_inputs(tmp_path)
    save_arrays(tmp_path / "params2", {"B": np.ones((1, 1, 2, 2))},
                metadata={"model": "cacgmm"})
    rc = run_cli("objective", "--spec", tmp_path / "spec",
                 "--params", tmp_path / "params2",
                 "--posterior", tmp_path / "posterior",
                 "--masks", tmp_path / "masks.csv")
    assert rc == 2
    assert "jd params" in capsys.readouterr().err


def test_plotdata_scene(tmp_path, scene_dir):
    out = tmp_path / "plot"
    rc = run_cli("plotdata", scene_dir, "--out", out)
    assert rc == 0
    for name in ("spec_mixture.csv", "spec_src0.csv", "spec_src1.csv",
                 "ribbon.csv"):
        assert (out / name).exists()

    ribbon_NT = diarize.read_activity_csv(out / "ribbon.csv")
    masks_NT = diarize.read_activity_csv(scene_dir / "masks.csv")
    np.testing.assert_array_equal(ribbon_NT, masks_NT)

    sig_SM, _ = read_wav(scene_dir / "mixture.wav")
    spec = stft(sig_SM, StftConfig())
    want_FT = 20.0 * np.log10(np.abs(spec.tensor[:, :, 0]) + 1e-12)
    lines = (out / "spec_mixture.csv").read_text().strip().split("\n")
    got_FT = np.array([[float(v) for v in line.split(",")]
                       for line in lines])
    np.testing.assert_array_equal(got_FT, want_FT)


def test_plotdata_silence_hits_floor(tmp_path):
    src = tmp_path / "in"
    os.makedirs(src)
    write_wav(src / "silence.wav", np.zeros((4000, 2)), RATE)
    out = tmp_path / "plot"
    rc = run_cli("plotdata", src, "--out", out)
    assert rc == 0
    lines = (out / "spec_silence.csv").read_text().strip().split("\n")
    values = {float(v) for line in lines for v in line.split(",")}
    assert values == {20.0 * np.log10(1e-12)}


def test_plotdata_empty_dir(tmp_path, capsys):
    src = tmp_path / "empty"
    os.makedirs(src)
    rc = run_cli("plotdata", src, "--out", tmp_path / "plot")
    assert rc == 2
    assert "nothing to plot" in capsys.readouterr().err


def test_pipeline_determinism(tmp_path, scene_dir):
    """separate, evaluate, objective, and plotdata all rerun to
    byte-identical artifacts (simulate is covered above)."""
    digests = []
    for sub in ("one", "two"):
        base = tmp_path / sub
        sep = base / "sep"
        rc = run_cli("separate", scene_dir / "mixture.wav",
                     "--masks", scene_dir / "masks.csv",
                     "--no-wpe", "--iters", 3, "--out", sep)
        assert rc == 0
        rc = run_cli("evaluate", "--est", sep, "--ref", scene_dir,
                     "--out", base / "metrics.json")
        assert rc == 0
        _objective_inputs(base)
        rc = run_cli("objective", "--spec", base / "spec",
                     "--params", base / "params",
                     "--posterior", base / "posterior",
                     "--masks", base / "masks.csv",
                     "--out", base / "objective.json")
        assert rc == 0
        rc = run_cli("plotdata", sep, "--out", base / "plot")
        assert rc == 0
        digests.append(dir_digest(base))
    assert digests[0] == digests[1]


def test_argparse_rejects_bad_usage():
    for argv in (["frobnicate"],
                 ["separate", "x.wav", "--method", "magic"],
                 ["evaluate", "--est", "a"],
                 []):
        with pytest.raises(SystemExit) as err:
            main(argv)
        assert err.value.code == 2
