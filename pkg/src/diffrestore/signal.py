"""Audio plumbing: PCM16 WAV I/O, a Parseval-normalized STFT, magnitude
compression and spectrogram export."""

from __future__ import annotations

import csv
import logging
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import get_window

log = logging.getLogger(__name__)

DEFAULT_WIN = 256
DEFAULT_HOP = 64
DB_FLOOR = -80.0


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.sample_rate <= 0:
            raise ValueError("sample rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("non-finite samples")


@dataclass
class StftTile:
    """STFT in polar form; rows are frames, columns are ``win // 2 + 1`` bins.

    Coefficients are scaled so that :func:`spectral_energy` equals the
    time-domain energy of the analysed signal.
    """

    magnitude: np.ndarray
    phase: np.ndarray
    win: int = DEFAULT_WIN
    hop: int = DEFAULT_HOP
    window: str = "hann"
    length: int = 0
    sample_rate: int = 16000
    meta: dict = field(default_factory=dict)

    @property
    def data(self) -> np.ndarray:
        return self.magnitude * np.exp(1j * self.phase)

    @classmethod
    def from_complex(cls, Z, **kw):
        return cls(np.abs(Z), np.angle(Z), **kw)


def _window(win: int, hop: int, kind: str):
    w = get_window(kind, win)
    overlap = np.zeros(hop)
    for start in range(0, win, hop):
        seg = w[start:start + hop] ** 2
        overlap[: len(seg)] += seg
    if hop > win or np.ptp(overlap) > 1e-10 * overlap.max():
        raise ValueError(f"{kind} window {win} with hop {hop} does not overlap-add to a constant")
    return w, float(overlap.mean())


def _layout(length: int, win: int, hop: int):
    pad = win - hop
    frames = max(1, -(-(length + pad) // hop))
    return pad, frames


def stft_frames(x, win=DEFAULT_WIN, hop=DEFAULT_HOP, window="hann"):
    """Complex STFT coefficients of a real signal (last axis)."""
    x = np.asarray(x, dtype=float)
    w, w2 = _window(win, hop, window)
    L = x.shape[-1]
    pad, F = _layout(L, win, hop)
    total = (F - 1) * hop + win
    padded = np.zeros(x.shape[:-1] + (total,))
    padded[..., pad:pad + L] = x
    idx = np.arange(F)[:, None] * hop + np.arange(win)
    frames = padded[..., idx] * w
    return np.fft.rfft(frames, axis=-1) / np.sqrt(win * w2)


def stft_adjoint(G, length, win=DEFAULT_WIN, hop=DEFAULT_HOP, window="hann"):
    """Adjoint of :func:`stft_frames` for the real inner product ``Re sum conj(G) Z``."""
    w, w2 = _window(win, hop, window)
    G = np.asarray(G, dtype=complex)
    half = G.copy()
    half[..., 1:(win + 1) // 2] *= 0.5
    frames = win * np.fft.irfft(half, n=win, axis=-1) * w / np.sqrt(win * w2)
    return _overlap_add(frames, length, win, hop)


def _overlap_add(frames, length, win, hop):
    pad, F = _layout(length, win, hop)
    total = (F - 1) * hop + win
    out = np.zeros(frames.shape[:-2] + (total,))
    for t in range(F):
        out[..., t * hop:t * hop + win] += frames[..., t, :]
    return out[..., pad:pad + length]


def istft_frames(Z, length, win=DEFAULT_WIN, hop=DEFAULT_HOP, window="hann"):
    w, w2 = _window(win, hop, window)
    frames = np.fft.irfft(np.asarray(Z) * np.sqrt(win * w2), n=win, axis=-1) * w / w2
    return _overlap_add(frames, length, win, hop)


def bin_weights(win: int) -> np.ndarray:
    """Multiplicity of each one-sided bin in the full spectrum."""
    c = np.full(win // 2 + 1, 2.0)
    c[0] = 1.0
    if win % 2 == 0:
        c[-1] = 1.0
    return c


def stft(x, win=DEFAULT_WIN, hop=DEFAULT_HOP, window="hann") -> StftTile:
    if isinstance(x, Waveform):
        samples, sr = x.samples, x.sample_rate
    else:
        samples, sr = np.asarray(x, dtype=float), 16000
    Z = stft_frames(samples, win, hop, window)
    return StftTile.from_complex(Z, win=win, hop=hop, window=window, length=samples.shape[-1], sample_rate=sr)


def istft(tile: StftTile) -> Waveform:
    x = istft_frames(tile.data, tile.length, tile.win, tile.hop, tile.window)
    return Waveform(x, tile.sample_rate)


def spectral_energy(tile: StftTile) -> float:
    return float(np.sum(bin_weights(tile.win) * tile.magnitude**2))


def compress(tile: StftTile, exponent: float = 0.5) -> StftTile:
    """Raise magnitudes to ``exponent``; the phase array is passed through."""
    if not 0 < exponent <= 1:
        raise ValueError("exponent must lie in (0, 1]")
    return StftTile(tile.magnitude**exponent, tile.phase.copy(), tile.win, tile.hop, tile.window,
                    tile.length, tile.sample_rate, {**tile.meta, "compression": exponent})


def decompress(tile: StftTile, exponent: float = 0.5) -> StftTile:
    if not 0 < exponent <= 1:
        raise ValueError("exponent must lie in (0, 1]")
    meta = {k: v for k, v in tile.meta.items() if k != "compression"}
    return StftTile(tile.magnitude ** (1.0 / exponent), tile.phase.copy(), tile.win, tile.hop, tile.window,
                    tile.length, tile.sample_rate, meta)


def compress_complex(Z, exponent: float, eps: float = 1e-12):
    """``Z |Z|^(p-1)`` with a smoothed modulus so the map stays differentiable at 0."""
    r = np.sqrt(np.abs(Z) ** 2 + eps * eps)
    return Z * r ** (exponent - 1.0)


def compress_complex_vjp(Z, G, exponent: float, eps: float = 1e-12):
    """Pull a real-pair gradient ``G`` on the compressed value back to ``Z``."""
    r2 = np.abs(Z) ** 2 + eps * eps
    r = np.sqrt(r2)
    scale = r ** (exponent - 1.0)
    # d/dZ of Z * r^(p-1): scale * I + (p-1) r^(p-3) Z Z^T, as a real 2x2 map
    proj = np.real(np.conj(Z) * G)
    return scale * G + (exponent - 1.0) * r ** (exponent - 3.0) * proj * Z


# -- WAV -------------------------------------------------------------------


def wav_read(path) -> Waveform:
    try:
        with wave.open(str(path), "rb") as fh:
            if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
                raise ValueError(f"{path}: need mono 16-bit PCM, got {fh.getnchannels()} ch / "
                                 f"{8 * fh.getsampwidth()} bit")
            raw = fh.readframes(fh.getnframes())
            sr = fh.getframerate()
    except wave.Error as exc:
        raise ValueError(f"{path}: unsupported encoding ({exc})") from exc
    pcm = np.frombuffer(raw, dtype="<i2").astype(float)
    return Waveform(pcm / 32768.0, sr)


def wav_write(path, wav: Waveform) -> int:
    """Write mono PCM16; returns the number of hard-clipped samples."""
    scaled = np.round(np.asarray(wav.samples, dtype=float) * 32768.0)
    clipped = int(np.sum((scaled > 32767) | (scaled < -32768)))
    if clipped:
        log.warning("%s: hard-clipped %d samples", path, clipped)
    pcm = np.clip(scaled, -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(int(wav.sample_rate))
        fh.writeframes(pcm.tobytes())
    return clipped


# -- spectrogram export ----------------------------------------------------


def spectrogram_pixels(tile: StftTile) -> np.ndarray:
    """8-bit image; row 0 is the highest bin, column ``t`` is frame ``t``."""
    with np.errstate(divide="ignore"):
        db = 20.0 * np.log10(tile.magnitude)
    db = np.clip(db, DB_FLOOR, 0.0)
    pix = np.round((db - DB_FLOOR) / -DB_FLOOR * 255.0).astype(np.uint8)
    return pix.T[::-1]


def export_spectrogram(tile: StftTile, path) -> Path:
    """Write a binary PGM and a ``.csv`` sidecar describing both axes."""
    path = Path(path)
    pix = spectrogram_pixels(tile)
    h, w = pix.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pix.tobytes())
    meta = path.with_suffix(".csv")
    with open(meta, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["axis", "index", "value"])
        for t in range(w):
            out.writerow(["frame_start_s", t, repr((t * tile.hop - (tile.win - tile.hop)) / tile.sample_rate)])
        for row in range(h):
            b = h - 1 - row
            out.writerow(["row_bin_hz", row, repr(b * tile.sample_rate / tile.win)])
        out.writerow(["db_range", 0, repr(DB_FLOOR)])
        out.writerow(["db_range", 1, "0.0"])
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(b"\n", 3)
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


def tile_to_vector(Z) -> np.ndarray:
    """Stack real and imaginary parts into one real vector."""
    Z = np.asarray(Z)
    return np.concatenate([Z.real.ravel(), Z.imag.ravel()])


def vector_to_tile(v, shape) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    n = int(np.prod(shape))
    return (v[:n] + 1j * v[n:]).reshape(shape)


# -- synthetic material ----------------------------------------------------


def harmonic_signal(length: int, f0: float, sample_rate: int = 16000, rng=None, amplitude: float = 0.2,
                    max_freq=None) -> np.ndarray:
    """Sum of equal-amplitude harmonics of ``f0`` up to ``max_freq`` (default Nyquist).

    Phases are random; ``amplitude`` is the RMS of the result.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    top = sample_rate / 2 if max_freq is None else max_freq
    k = np.arange(1, int(np.floor(top / f0)) + 1)
    k = k[k * f0 < sample_rate / 2]
    t = np.arange(length) / sample_rate
    phases = rng.uniform(0, 2 * np.pi, size=k.size)
    x = np.cos(2 * np.pi * f0 * np.outer(k, t) + phases[:, None]).sum(axis=0)
    return amplitude * np.sqrt(2.0 / k.size) * x


def harmonic_frames(n: int, length: int, sample_rate: int = 16000, rng=None, f0_range=(150.0, 450.0),
                    gain_range=(0.7, 1.4), amplitude: float = 0.2) -> np.ndarray:
    """Training frames of band-rich harmonic tones with random pitch, phase and gain."""
    rng = np.random.default_rng(0) if rng is None else rng
    f0 = rng.uniform(*f0_range, size=n)
    gain = np.exp(rng.uniform(np.log(gain_range[0]), np.log(gain_range[1]), size=n))
    return np.stack([harmonic_signal(length, f, sample_rate, rng, amplitude * g) for f, g in zip(f0, gain)])
