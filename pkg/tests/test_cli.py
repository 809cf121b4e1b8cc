import csv
import json
import logging

import numpy as np
import pytest

from conftest import HARMONIC_FRAME
from diffrestore import operators as ops
from diffrestore import signal as sig
from diffrestore.cli import main

GMM8 = """
[data]
weights = [0.5, 0.5]
means = [[0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2], [-0.2, -0.2, -0.2, -0.2, -0.2, -0.2, -0.2, -0.2]]
variances = [[0.01, 0.01, 0.01, 0.01, 0.01, 0.01, 0.01, 0.01], [0.01, 0.01, 0.01, 0.01, 0.01, 0.01, 0.01, 0.01]]
"""


def run(tmp_path, command, config_text, *extra, name=None):
    cfg = tmp_path / f"{name or command}.toml"
    cfg.write_text(config_text)
    out = tmp_path / (name or command)
    code = main([command, *map(str, extra), "--config", str(cfg), "--out", str(out)])
    return code, out


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.reader(fh))


@pytest.fixture
def wav_input(tmp_path):
    rng = np.random.default_rng(0)
    x = 0.3 * np.tanh(rng.standard_normal(1000))
    path = tmp_path / "in.wav"
    sig.wav_write(path, sig.Waveform(x, 16000))
    return path


def test_train_writes_checkpoint_and_loss_rows(tmp_path):
    text = GMM8 + "[train]\nsteps = 1000\nhidden = [16, 16]\nbatch_size = 32\n"
    code, out = run(tmp_path, "train", text, name="a")
    assert code == 0
    assert (out / "model.bin").exists()
    rows = read_rows(out / "loss.csv")
    assert len(rows) == 1 + 1000
    code, out_b = run(tmp_path, "train", text, name="b")
    assert (out / "model.bin").read_bytes() == (out_b / "model.bin").read_bytes()


def test_missing_dataset_path_names_the_key(tmp_path, caplog):
    with caplog.at_level(logging.ERROR):
        code, _ = run(tmp_path, "train", '[data]\nsource = "wav_dir"\npath = "/nonexistent/corpus"\n')
    assert code == 2
    assert "data.path" in caplog.text


@pytest.mark.parametrize("text", ['[bogus]\nx = 1\n', '[sampler]\nnot_a_key = 3\n', '[process]\nkind = "cosine"\n',
                                  "[sampler\nbroken"])
def test_bad_configs_exit_2(tmp_path, text):
    assert run(tmp_path, "generate", text)[0] == 2


def test_flags_override_config(tmp_path):
    code, out = run(tmp_path, "generate", GMM8 + "[sampler]\nsamples = 3\n", "--steps", "7", "--solver", "heun",
                    "--seed", "5", "--process", "vp")
    assert code == 0
    resolved = json.loads((out / "resolved_config.json").read_text())
    assert resolved["sampler"]["steps"] == 7 and resolved["sampler"]["solver"] == "heun"
    assert resolved["process"]["kind"] == "vp" and resolved["run"]["seed"] == 5
    assert len(read_rows(out / "samples.csv")) == 1 + 3
    assert len(read_rows(out / "trajectory.csv")) == 1 + 7


def test_identity_projection_restore_returns_input(tmp_path, wav_input):
    code, out = run(tmp_path, "restore", GMM8 + '[likelihood]\nmode = "projection"\n', wav_input)
    assert code == 0
    x_in, x_out = sig.wav_read(wav_input).samples, sig.wav_read(out / "output.wav").samples
    assert np.linalg.norm(x_out - x_in) / np.linalg.norm(x_in) < 1e-5
    for name in ("report.csv", "input_spectrogram.pgm", "output_spectrogram.pgm", "output_spectrogram.csv"):
        assert (out / name).exists()


def test_mask_restore_keeps_length(tmp_path, wav_input):
    text = GMM8 + '[operator]\nkind = "mask"\ngap_fraction = 0.2\n[likelihood]\nsigma_y = 0.05\n[sampler]\nsteps = 20\n'
    code, out = run(tmp_path, "restore", text, wav_input)
    assert code == 0
    assert len(sig.wav_read(out / "output.wav").samples) == len(sig.wav_read(wav_input).samples)


def test_restore_with_unprojectable_operator_fails_cleanly(tmp_path, wav_input):
    text = GMM8 + '[operator]\nkind = "fir_lowpass"\nnumtaps = 5\n[likelihood]\nmode = "projection"\n'
    assert run(tmp_path, "restore", text, wav_input)[0] == 2


def test_blind_recovers_cutoff(tmp_path, harmonic_model):
    _, checkpoint, _ = harmonic_model
    x = sig.harmonic_signal(HARMONIC_FRAME * 16, 220.0, rng=np.random.default_rng(5))
    y = ops.apply(ops.parametric_lowpass(2000.0, 36.0), x)
    path = tmp_path / "lp.wav"
    sig.wav_write(path, sig.Waveform(y, 16000))
    text = (f'[model]\nkind = "checkpoint"\ncheckpoint = "{checkpoint}"\n'
            '[sampler]\nsteps = 200\nsolver = "ode"\n[likelihood]\nsigma_y = 0.01\n')
    code, out = run(tmp_path, "blind", text, path)
    assert code == 0
    rows = read_rows(out / "phi.csv")
    assert len(rows) == 1 + 200
    assert abs(float(rows[-1][rows[0].index("cutoff_hz")]) - 2000.0) / 2000.0 <= 0.10


def test_blind_rejects_out_of_bounds_phi_init(tmp_path, wav_input):
    text = GMM8 + "[blind]\nphi_init = [9000.0, 24.0]\n"
    assert run(tmp_path, "blind", text, wav_input)[0] == 2


def test_storm_runs(tmp_path, wav_input):
    code, out = run(tmp_path, "storm", GMM8 + '[process]\nkind = "ouve"\n[sampler]\nsteps = 10\n', wav_input)
    assert code == 0
    assert len(sig.wav_read(out / "output.wav").samples) == 1000


def test_diagnose_defaults_pass_and_report_every_pair(tmp_path):
    code, out = run(tmp_path, "diagnose", "")
    assert code == 0
    rows = read_rows(out / "kernel_check.csv")
    pairs = {(r[1], r[2]) for r in rows[1:]}
    assert len(rows) - 1 == 20 and len(pairs) == 20
    assert (out / "solver_convergence.csv").exists()


def test_diagnose_catches_corrupted_sigma(tmp_path):
    assert run(tmp_path, "diagnose", "[diagnose]\nsigma_corruption = 0.05\n")[0] == 5


def test_missing_input_file_exits_2(tmp_path):
    assert run(tmp_path, "restore", GMM8, tmp_path / "absent.wav")[0] == 2
