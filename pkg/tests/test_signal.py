import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffrestore import signal as sig

PAIRS = [(256, 64), (512, 64), (512, 128), (128, 32), (64, 16)]


@pytest.mark.parametrize("win,hop", PAIRS)
def test_stft_round_trip(win, hop):
    x = np.random.default_rng(win + hop).standard_normal(16000)
    back = sig.istft(sig.stft(sig.Waveform(x), win, hop)).samples
    assert np.linalg.norm(back - x) / np.linalg.norm(x) < 1e-6


@settings(max_examples=30, deadline=None)
@given(length=st.integers(1, 3000), seed=st.integers(0, 1000))
def test_round_trip_any_length(length, seed):
    x = np.random.default_rng(seed).standard_normal(length)
    np.testing.assert_allclose(sig.istft(sig.stft(x)).samples, x, atol=1e-10)


def test_tone_peaks_at_expected_bin():
    t = np.arange(16000) / 16000
    tile = sig.stft(sig.Waveform(np.sin(2 * np.pi * 1000 * t)), 256, 64)
    assert int(np.argmax(tile.magnitude.mean(axis=0))) == 16


@pytest.mark.parametrize("win,hop", PAIRS)
def test_parseval(win, hop):
    x = np.random.default_rng(1).standard_normal(8000)
    assert sig.spectral_energy(sig.stft(x, win, hop)) / np.sum(x**2) == pytest.approx(1.0, abs=1e-3)


def test_unsupported_window_hop_pair_rejected():
    with pytest.raises(ValueError):
        sig.stft(np.zeros(100), 256, 100)
    with pytest.raises(ValueError):
        sig.stft(np.zeros(100), 256, 128)


@pytest.mark.parametrize("win,hop", PAIRS[:3])
def test_stft_adjoint_dot_test(win, hop):
    rng = np.random.default_rng(2)
    u = rng.standard_normal(1500)
    Z = sig.stft_frames(u, win, hop)
    G = rng.standard_normal(Z.shape) + 1j * rng.standard_normal(Z.shape)
    lhs = np.sum(np.real(np.conj(G) * Z))
    rhs = np.dot(u, sig.stft_adjoint(G, 1500, win, hop))
    assert abs(lhs - rhs) / abs(lhs) < 1e-10


def test_compression_examples():
    tile = sig.StftTile(np.array([[4.0, 9.0]]), np.array([[0.3, -2.0]]))
    c = sig.compress(tile, 0.5)
    np.testing.assert_array_equal(c.magnitude, [[2.0, 3.0]])
    np.testing.assert_array_equal(c.phase, tile.phase)
    with pytest.raises(ValueError):
        sig.compress(tile, 1.5)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), exponent=st.floats(0.1, 1.0))
def test_compression_inverts(seed, exponent):
    tile = sig.stft(np.random.default_rng(seed).standard_normal(700))
    back = sig.decompress(sig.compress(tile, exponent), exponent)
    np.testing.assert_array_equal(back.phase, tile.phase)
    np.testing.assert_allclose(back.magnitude, tile.magnitude, rtol=1e-12, atol=1e-300)


def test_compress_complex_vjp_matches_finite_differences():
    from diffrestore.verify import finite_diff_grad

    rng = np.random.default_rng(3)
    Z = rng.standard_normal((3, 4)) + 1j * rng.standard_normal((3, 4))
    G = rng.standard_normal((3, 4)) + 1j * rng.standard_normal((3, 4))

    def f(v):
        return float(np.sum(np.real(np.conj(G) * sig.compress_complex(sig.vector_to_tile(v, Z.shape), 0.5))))

    fd = finite_diff_grad(f, sig.tile_to_vector(Z), eps=1e-7)
    np.testing.assert_allclose(sig.tile_to_vector(sig.compress_complex_vjp(Z, G, 0.5)), fd, rtol=1e-5, atol=1e-8)


def test_wav_round_trip(tmp_path):
    x = np.random.default_rng(4).uniform(-0.99, 0.99, 5000)
    sig.wav_write(tmp_path / "x.wav", sig.Waveform(x, 16000))
    back = sig.wav_read(tmp_path / "x.wav")
    assert back.sample_rate == 16000
    assert np.max(np.abs(back.samples - x)) <= 2.0**-15
    sig.wav_write(tmp_path / "z.wav", sig.Waveform(np.zeros(300), 16000))
    np.testing.assert_array_equal(sig.wav_read(tmp_path / "z.wav").samples, 0.0)


def test_wav_clipping_is_counted_and_bad_files_rejected(tmp_path):
    assert sig.wav_write(tmp_path / "c.wav", sig.Waveform(np.array([0.0, 1.5, -2.0, 0.1]), 8000)) == 2
    (tmp_path / "junk.wav").write_bytes(b"not a wav file")
    with pytest.raises(ValueError):
        sig.wav_read(tmp_path / "junk.wav")


def test_spectrogram_export(tmp_path):
    zeros = sig.StftTile(np.zeros((5, 9)), np.zeros((5, 9)), win=16, hop=4)
    sig.export_spectrogram(zeros, tmp_path / "z.pgm")
    np.testing.assert_array_equal(sig.read_pgm(tmp_path / "z.pgm"), 0)

    mag = np.zeros((5, 9))
    mag[2, 6] = 1.0
    sig.export_spectrogram(sig.StftTile(mag, np.zeros((5, 9)), win=16, hop=4), tmp_path / "h.pgm")
    img = sig.read_pgm(tmp_path / "h.pgm")
    assert img.shape == (9, 5)
    rows, cols = np.nonzero(img)
    assert list(zip(rows, cols)) == [(9 - 1 - 6, 2)]
    assert img[9 - 1 - 6, 2] == 255
    meta = (tmp_path / "h.csv").read_text().splitlines()
    assert meta[0] == "axis,index,value"
    assert len(meta) == 1 + 5 + 9 + 2


def test_harmonic_signal_is_band_limited():
    x = sig.harmonic_signal(4096, 250.0, rng=np.random.default_rng(0), max_freq=2000.0)
    assert np.sqrt(np.mean(x**2)) == pytest.approx(0.2, rel=0.05)
    power = np.abs(np.fft.rfft(x)) ** 2
    freqs = np.fft.rfftfreq(4096, 1 / 16000)
    assert power[freqs > 2100].sum() < 1e-3 * power.sum()
