"""Constant-Q log-magnitude front end, frame fixing, WAV and feature file IO.

Bin ``k`` is centred at ``f_min * 2**(k / bins_per_octave)`` and analysed with
a Hann window of ``N_k = ceil(Q * sr / f_k)`` samples, ``Q = 1 / (2**(1/b) - 1)``,
so every bin has the same quality factor.  Frame ``t`` is centred on sample
``t * hop``; the signal is zero outside its support.

The coefficients are computed exactly through the FFT: the signal spectrum
is multiplied by each (sparsified) kernel spectrum and, because only every
``hop``-th lag is needed, the product is folded modulo ``M / hop`` before a
short inverse FFT.  Folding is an exact identity for the decimated inverse
transform; the only approximation is dropping kernel spectrum coefficients
below ``sparsity`` times the kernel's peak.
"""

from __future__ import annotations

import math
import struct
import wave
from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np


class ConfigError(ValueError):
    """Raised for CQT settings that cannot be realised."""


class FeatureFileError(ValueError):
    """Raised for malformed feature files."""


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("waveform must be mono (1-D)")
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class CqtConfig:
    hop: float = 0.016
    octaves: int = 9
    bins_per_octave: int = 48
    f_min: float = 15.0
    target_frames: int = 400
    log_floor: float = 1e-10
    sparsity: float = 1e-5

    @property
    def n_bins(self) -> int:
        return self.octaves * self.bins_per_octave

    @property
    def q(self) -> float:
        return 1.0 / (2.0 ** (1.0 / self.bins_per_octave) - 1.0)

    def frequencies(self) -> np.ndarray:
        return self.f_min * 2.0 ** (np.arange(self.n_bins) / self.bins_per_octave)

    def hop_samples(self, sample_rate: int) -> int:
        h = self.hop * sample_rate
        hop = int(round(h))
        if hop < 1 or abs(h - hop) > 1e-9 * max(1.0, h):
            raise ConfigError(f"hop {self.hop}s is not a whole number of samples at {sample_rate} Hz")
        return hop

    def window_lengths(self, sample_rate: int) -> np.ndarray:
        return np.ceil(self.q * sample_rate / self.frequencies() - 1e-9).astype(np.int64)

    def validate(self, sample_rate: int) -> None:
        if self.octaves < 1 or self.bins_per_octave < 1:
            raise ConfigError("octaves and bins_per_octave must be positive")
        if self.f_min <= 0:
            raise ConfigError("f_min must be positive")
        if self.f_min * 2.0**self.octaves > sample_rate / 2:
            raise ConfigError(
                f"f_min {self.f_min} Hz over {self.octaves} octaves exceeds the Nyquist rate {sample_rate / 2} Hz"
            )
        if self.log_floor <= 0:
            raise ConfigError("log_floor must be positive")
        if self.target_frames < 1:
            raise ConfigError("target_frames must be positive")
        self.hop_samples(sample_rate)


@dataclass
class Spectrogram:
    values: np.ndarray  # (bins, frames) natural-log magnitude
    frequencies: np.ndarray = field(default=None)

    @property
    def shape(self):
        return self.values.shape

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


def _hann(n: int) -> np.ndarray:
    return np.hanning(n) if n > 1 else np.ones(1)


@lru_cache(maxsize=8)
def _kernel_bank(cfg: CqtConfig, sample_rate: int, m: int, hop: int):
    """Sparse conjugate kernel spectra folded to length ``m // hop``.

    Returns flat (row index, folded column, spectrum index, complex weight)
    arrays, ordered by bin and frequency so accumulation order is fixed.
    """
    k_len = m // hop
    rows, cols, idx, vals = [], [], [], []
    freqs = cfg.frequencies()
    lengths = cfg.window_lengths(sample_rate)
    for k, (f, n) in enumerate(zip(freqs, lengths)):
        j = np.arange(n) - n // 2
        kernel = _hann(n) * np.exp(2j * np.pi * f * j / sample_rate) / n
        buf = np.zeros(m, dtype=np.complex128)
        buf[j % m] = kernel
        spec = np.conj(np.fft.fft(buf))
        mag = np.abs(spec)
        keep = np.flatnonzero(mag >= cfg.sparsity * mag.max())
        rows.append(np.full(keep.size, k, dtype=np.int64))
        cols.append(keep % k_len)
        idx.append(keep)
        vals.append(spec[keep])
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    flat = rows * k_len + cols
    return flat, np.concatenate(idx), np.concatenate(vals), k_len


def _fft_length(n_samples: int, max_window: int, hop: int) -> int:
    need = n_samples + max_window // 2 + 1
    return hop * int(math.ceil(need / hop))


def cqt_complex(w: Waveform, cfg: CqtConfig = CqtConfig()) -> np.ndarray:
    """Complex CQT coefficients, shape (bins, 1 + len // hop)."""
    cfg.validate(w.sample_rate)
    if w.samples.size == 0:
        raise ValueError("waveform is empty")
    hop = cfg.hop_samples(w.sample_rate)
    n_frames = 1 + w.samples.size // hop
    m = _fft_length(w.samples.size, int(cfg.window_lengths(w.sample_rate).max()), hop)
    flat, idx, vals, k_len = _kernel_bank(cfg, w.sample_rate, m, hop)
    spectrum = np.fft.fft(w.samples, n=m)
    prod = spectrum[idx] * vals
    size = cfg.n_bins * k_len
    folded = np.bincount(flat, weights=prod.real, minlength=size) + 1j * np.bincount(
        flat, weights=prod.imag, minlength=size
    )
    coeffs = np.fft.ifft(folded.reshape(cfg.n_bins, k_len), axis=1) / hop
    return coeffs[:, :n_frames]


def cqt(w: Waveform, cfg: CqtConfig = CqtConfig()) -> Spectrogram:
    """Natural-log CQT magnitude ``log(|X| + log_floor)``, frame ``t`` centred at ``t * hop``."""
    mag = np.abs(cqt_complex(w, cfg))
    return Spectrogram(np.log(mag + cfg.log_floor), cfg.frequencies())


def fix_frames(spec: Spectrogram, target: int = 400) -> Spectrogram:
    """Keep the first ``target`` frames, tiling shorter inputs end to end first."""
    n = spec.n_frames
    if n == 0:
        raise ValueError("spectrogram has no frames")
    if n >= target:
        values = spec.values[:, :target]
    else:
        reps = -(-target // n)
        values = np.tile(spec.values, (1, reps))[:, :target]
    return replace(spec, values=np.ascontiguousarray(values))


def extract_features(w: Waveform, cfg: CqtConfig = CqtConfig(), dtype=np.float32) -> np.ndarray:
    """CQT followed by frame fixing, as a (bins, target_frames) array."""
    return fix_frames(cqt(w, cfg), cfg.target_frames).values.astype(dtype)


# --- WAV -------------------------------------------------------------------


def read_wav(path) -> Waveform:
    """Read 16-bit PCM mono WAV into floats in [-1, 1)."""
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1 or f.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit mono PCM")
        rate = f.getframerate()
        raw = f.readframes(f.getnframes())
    data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(data, rate)


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(int(w.sample_rate))
        f.writeframes(pcm.tobytes())


# --- feature files ---------------------------------------------------------
#
# magic "GRFEAT01" | u8 dtype code | u8 ndim | ndim x u32 dims | raw little-endian data

_FEAT_MAGIC = b"GRFEAT01"
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
_CODES = {v: k for k, v in _DTYPES.items()}


def save_features(path, array: np.ndarray) -> None:
    array = np.asarray(array)
    dt = array.dtype.newbyteorder("<")
    if dt not in _CODES:
        raise FeatureFileError(f"unsupported dtype {array.dtype}")
    header = _FEAT_MAGIC + struct.pack("<BB", _CODES[dt], array.ndim) + struct.pack(f"<{array.ndim}I", *array.shape)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(array, dtype=dt).tobytes())


def load_features(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[: len(_FEAT_MAGIC)] != _FEAT_MAGIC:
        raise FeatureFileError(f"{path}: not a feature file")
    pos = len(_FEAT_MAGIC)
    try:
        code, ndim = struct.unpack_from("<BB", blob, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
    except struct.error as e:
        raise FeatureFileError(f"{path}: truncated header") from e
    pos += 4 * ndim
    if code not in _DTYPES:
        raise FeatureFileError(f"{path}: unknown dtype code {code}")
    dt = _DTYPES[code]
    count = int(np.prod(shape, dtype=np.int64))
    if len(blob) - pos != count * dt.itemsize:
        raise FeatureFileError(f"{path}: payload size does not match shape {shape}")
    return np.frombuffer(blob, dtype=dt, count=count, offset=pos).reshape(shape).copy()
