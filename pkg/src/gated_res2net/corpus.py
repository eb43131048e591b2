"""Protocol files, a synthetic bonafide/spoof corpus and model checkpoints.

Protocol lines follow the countermeasure convention::

    SPEAKER TRIAL - ATTACK KEY        e.g. "SYN_0003 SYN_T_00017 - A02 spoof"

with ``ATTACK == "-"`` exactly for bonafide trials.

Synthetic corpus
----------------
Bonafide utterances are harmonic stacks (band-limited to ``harmonic_ceiling``)
with vibrato, slow pitch drift, a syllabic amplitude envelope and pink noise.
Spoofed utterances use the same generator and add:

* phase discontinuities: every ``click_interval`` seconds all harmonic phases
  jump by a random amount, leaving broadband transients at a fixed period;
* a notch comb ``x[n] - depth * x[n - D]`` with notch spacing ``sr / D``;
* optionally a pitch track quantised to semitones (no smooth vibrato).

Each attack id owns one artifact setting.  Train and dev share attacks drawn
from ``seen`` ranges; eval uses attacks drawn from disjoint ``unseen`` ranges.
"""

from __future__ import annotations

import json
import os
import struct
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .features import Waveform, write_wav


class ProtocolError(ValueError):
    pass


class CheckpointError(ValueError):
    """Corrupt, truncated or incompatible checkpoint file."""


@dataclass(frozen=True)
class Trial:
    trial_id: str
    speaker_id: str
    attack_id: str
    label: str
    path: str | None = None

    def __post_init__(self):
        if self.label not in ("bonafide", "spoof"):
            raise ProtocolError(f"{self.trial_id}: unknown label {self.label!r}")
        if (self.attack_id == "-") != (self.label == "bonafide"):
            raise ProtocolError(f"{self.trial_id}: attack {self.attack_id!r} inconsistent with label {self.label}")


def parse_protocol(path, audio_dir=None, ext: str = ".wav") -> list:
    """Read a protocol file; ``audio_dir`` fills ``Trial.path`` as ``audio_dir/TRIAL.ext``."""
    trials = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 5:
                raise ProtocolError(f"{path}:{lineno}: expected 5 fields, got {len(parts)}")
            speaker, trial, dash, attack, key = parts
            if dash != "-":
                raise ProtocolError(f"{path}:{lineno}: third field must be '-'")
            audio = os.path.join(str(audio_dir), trial + ext) if audio_dir is not None else None
            try:
                trials.append(Trial(trial, speaker, attack, key, audio))
            except ProtocolError as e:
                raise ProtocolError(f"{path}:{lineno}: {e}") from e
    return trials


def write_protocol(path, trials) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for t in trials:
            f.write(f"{t.speaker_id} {t.trial_id} - {t.attack_id} {t.label}\n")


# --- synthetic corpus ------------------------------------------------------


@dataclass(frozen=True)
class AttackSpec:
    attack_id: str
    click_interval: float  # seconds
    notch_spacing: float  # Hz
    notch_depth: float
    quantize_f0: bool


SEEN_CLICK_RANGE = (0.040, 0.090)
SEEN_NOTCH_RANGE = (300.0, 500.0)
UNSEEN_CLICK_RANGE = (0.025, 0.036)
UNSEEN_NOTCH_RANGE = (550.0, 800.0)


def _default_attacks(first: int, count: int, click_range, notch_range) -> tuple:
    out = []
    for i in range(count):
        frac = i / max(1, count - 1)
        out.append(
            AttackSpec(
                attack_id=f"A{first + i:02d}",
                click_interval=round(click_range[0] + frac * (click_range[1] - click_range[0]), 4),
                notch_spacing=round(notch_range[1] - frac * (notch_range[1] - notch_range[0]), 1),
                notch_depth=0.6 + 0.3 * (i % 2),
                quantize_f0=bool(i % 3 == 2),
            )
        )
    return tuple(out)


def _seen_attacks():
    return _default_attacks(1, 6, SEEN_CLICK_RANGE, SEEN_NOTCH_RANGE)


def _unseen_attacks():
    return _default_attacks(7, 6, UNSEEN_CLICK_RANGE, UNSEEN_NOTCH_RANGE)


@dataclass(frozen=True)
class SynthConfig:
    """Counts are (bonafide, spoof) per split."""

    train: tuple = (200, 200)
    dev: tuple = (50, 50)
    eval: tuple = (50, 50)
    sample_rate: int = 16000
    duration: tuple = (1.0, 1.0)
    seed: int = 0
    speakers: int = 20
    f0_range: tuple = (90.0, 260.0)
    harmonic_ceiling: float = 5500.0
    noise_db: float = -30.0  # pink noise level relative to the harmonic RMS
    seen_attacks: tuple = field(default_factory=_seen_attacks)
    unseen_attacks: tuple = field(default_factory=_unseen_attacks)
    workers: int = 1

    def __post_init__(self):
        for name in ("train", "dev", "eval", "duration", "f0_range"):
            object.__setattr__(self, name, tuple(getattr(self, name)))
        for name in ("seen_attacks", "unseen_attacks"):
            specs = tuple(a if isinstance(a, AttackSpec) else AttackSpec(**a) for a in getattr(self, name))
            object.__setattr__(self, name, specs)

    def validate(self) -> None:
        for split in ("train", "dev", "eval"):
            counts = getattr(self, split)
            if len(counts) != 2 or min(counts) < 0:
                raise ValueError(f"{split} counts must be two non-negative integers")
        if self.sample_rate <= 0 or not 0 < self.duration[0] <= self.duration[1]:
            raise ValueError("invalid sample rate or duration range")
        if not self.seen_attacks or not self.unseen_attacks:
            raise ValueError("need at least one seen and one unseen attack")
        for a in self.seen_attacks + self.unseen_attacks:
            if a.click_interval <= 0 or a.notch_spacing <= 0 or not 0 <= a.notch_depth < 1:
                raise ValueError(f"invalid attack {a}")
            if a.notch_spacing >= self.sample_rate / 2:
                raise ValueError(f"{a.attack_id}: notch spacing above Nyquist")

    def to_dict(self) -> dict:
        return asdict(self)


def _pink_noise(rng, n):
    white = rng.standard_normal(n)
    spec = np.fft.rfft(white)
    f = np.arange(spec.size)
    spec[1:] /= np.sqrt(f[1:])
    spec[0] = 0
    out = np.fft.irfft(spec, n)
    return out / (np.std(out) + 1e-12)


def _pitch_track(rng, cfg: SynthConfig, t, quantize: bool):
    base = rng.uniform(*cfg.f0_range)
    drift = np.exp(rng.uniform(-0.15, 0.15) * t / max(t[-1], 1e-9))
    rate = rng.uniform(4.0, 7.0)
    depth = rng.uniform(0.01, 0.03)
    f0 = base * drift * (1 + depth * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)))
    if quantize:
        semis = np.round(12 * np.log2(f0 / 55.0))
        f0 = 55.0 * 2 ** (semis / 12)
    return f0


def synth_utterance(rng: np.random.Generator, cfg: SynthConfig, attack: AttackSpec | None) -> np.ndarray:
    """One utterance; ``attack`` None gives bonafide audio."""
    sr = cfg.sample_rate
    n = int(round(rng.uniform(*cfg.duration) * sr))
    t = np.arange(n) / sr
    f0 = _pitch_track(rng, cfg, t, attack is not None and attack.quantize_f0)
    phase0 = np.cumsum(2 * np.pi * f0 / sr)
    n_harm = int(cfg.harmonic_ceiling // cfg.f0_range[0])
    tilt = rng.uniform(0.8, 1.4)
    jumps = None
    if attack is not None:
        step = max(1, int(round(attack.click_interval * sr)))
        starts = np.arange(rng.integers(0, step), n, step)
        marks = np.zeros(n, dtype=np.int64)
        marks[starts] = 1
        segment = np.cumsum(marks)  # index of the current phase segment
        jumps = (segment, rng.uniform(0.5 * np.pi, 1.5 * np.pi, size=(n_harm, starts.size + 1)))
    x = np.zeros(n)
    for h in range(1, n_harm + 1):
        inst = h * f0
        amp = np.where(inst < cfg.harmonic_ceiling, h**-tilt, 0.0)
        # fade harmonics smoothly near the ceiling to avoid gating artifacts
        amp = amp * np.clip((cfg.harmonic_ceiling - inst) / 300.0, 0, 1)
        ph = h * phase0 + rng.uniform(0, 2 * np.pi)
        if jumps is not None:
            seg, offsets = jumps
            ph = ph + np.cumsum(offsets[h - 1])[seg] - offsets[h - 1][0]
        x += amp * np.sin(ph)
    syl = rng.uniform(2.5, 5.0)
    env = 0.6 + 0.4 * np.sin(2 * np.pi * syl * t + rng.uniform(0, 2 * np.pi)) ** 2
    x *= env
    x /= np.sqrt(np.mean(x**2)) + 1e-12
    if attack is not None:
        d = max(1, int(round(sr / attack.notch_spacing)))
        comb = x.copy()
        comb[d:] -= attack.notch_depth * x[:-d]
        x = comb / (np.sqrt(np.mean(comb**2)) + 1e-12)
    x = x + 10 ** (cfg.noise_db / 20) * _pink_noise(rng, n)
    peak = np.max(np.abs(x)) + 1e-12
    return 0.5 * x / peak


def _split_plan(cfg: SynthConfig):
    plan = []
    for split_index, (split, prefix) in enumerate((("train", "T"), ("dev", "D"), ("eval", "E"))):
        n_bona, n_spoof = getattr(cfg, split)
        attacks = cfg.unseen_attacks if split == "eval" else cfg.seen_attacks
        for i in range(n_bona + n_spoof):
            spoof = i >= n_bona
            attack = attacks[(i - n_bona) % len(attacks)] if spoof else None
            trial = f"SYN_{prefix}_{i:05d}"
            speaker = f"SYN_{i % cfg.speakers:04d}"
            plan.append((split, split_index, i, trial, speaker, attack))
    return plan


def _render(args):
    cfg, split_index, i, attack, path = args
    # per-file seed: independent of worker count and generation order
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, split_index, i]))
    x = synth_utterance(rng, cfg, attack)
    write_wav(path, Waveform(x, cfg.sample_rate))
    return path


def _worker_count(requested: int) -> int:
    cap = os.environ.get("GATED_RES2NET_THREADS")
    n = max(1, int(requested))
    if cap:
        n = min(n, max(1, int(cap)))
    return n


def synth_corpus(cfg: SynthConfig, out_dir) -> dict:
    """Write ``wav/*.wav``, ``protocols/{train,dev,eval}.txt`` and ``wav_list.txt``.

    Returns ``{split: [Trial, ...]}``.
    """
    cfg.validate()
    out = Path(out_dir)
    wav_dir = out / "wav"
    proto_dir = out / "protocols"
    wav_dir.mkdir(parents=True, exist_ok=True)
    proto_dir.mkdir(parents=True, exist_ok=True)
    splits: dict = {"train": [], "dev": [], "eval": []}
    jobs = []
    for split, split_index, i, trial, speaker, attack in _split_plan(cfg):
        path = str(wav_dir / f"{trial}.wav")
        aid = attack.attack_id if attack else "-"
        splits[split].append(Trial(trial, speaker, aid, "spoof" if attack else "bonafide", path))
        jobs.append((cfg, split_index, i, attack, path))
    workers = _worker_count(cfg.workers)
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            list(pool.map(_render, jobs, chunksize=8))
    else:
        for job in jobs:
            _render(job)
    for split, trials in splits.items():
        write_protocol(proto_dir / f"{split}.txt", trials)
    with open(out / "wav_list.txt", "w", encoding="utf-8", newline="\n") as f:
        for split in ("train", "dev", "eval"):
            for t in splits[split]:
                f.write(os.path.relpath(t.path, out) + "\n")
    return splits


def click_periodicity(x: np.ndarray, sample_rate: int, band=(6200.0, 8000.0), lags=(0.02, 0.2)) -> float:
    """Peak normalised autocorrelation of the high-band energy envelope.

    The band sits above the harmonic content, so only noise and transients
    reach it; a periodic train of transients produces a strong peak at its
    interval, while stationary noise does not.
    """
    n = x.size
    spec = np.fft.rfft(x)
    f = np.fft.rfftfreq(n, 1 / sample_rate)
    spec[(f < band[0]) | (f > band[1])] = 0
    hp = np.fft.irfft(spec, n)
    hop = max(1, sample_rate // 1000)  # 1 ms envelope
    frames = hp[: (n // hop) * hop].reshape(-1, hop)
    env = np.sqrt(np.mean(frames**2, axis=1))
    env = env - env.mean()
    denom = np.dot(env, env)
    if denom <= 0:
        return 0.0
    lo, hi = int(lags[0] * 1000), min(int(lags[1] * 1000), env.size - 1)
    best = 0.0
    for lag in range(lo, hi + 1):
        r = np.dot(env[:-lag], env[lag:]) / denom * env.size / (env.size - lag)
        best = max(best, r)
    return float(best)


def detect_artifacts(x: np.ndarray, sample_rate: int, threshold: float = 0.3) -> bool:
    """Closed-form spoof detector: True when periodic transients are present."""
    return click_periodicity(x, sample_rate) > threshold


# --- checkpoints -----------------------------------------------------------
#
# magic "GRCKPT\0\0" | u32 version | u32 header length | header (canonical JSON)
# | u32 array count | per array: u16 name length, name (UTF-8), u8 dtype code,
# u8 ndim, ndim x u32 dims, raw little-endian data | u32 CRC32 of all prior bytes

_CK_MAGIC = b"GRCKPT\0\0"
CHECKPOINT_VERSION = 1
_CK_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_CK_CODES = {v: k for k, v in _CK_DTYPES.items()}


def canonical_json(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=True).encode("ascii")


def write_checkpoint_file(path, header: dict, arrays: dict) -> None:
    parts = [_CK_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    head = canonical_json(header)
    parts += [struct.pack("<I", len(head)), head, struct.pack("<I", len(arrays))]
    for name in sorted(arrays):
        a = np.asarray(arrays[name])
        dt = a.dtype.newbyteorder("<")
        if dt not in _CK_CODES:
            raise CheckpointError(f"{name}: unsupported dtype {a.dtype}")
        raw_name = name.encode("utf-8")
        parts.append(struct.pack("<H", len(raw_name)) + raw_name)
        parts.append(struct.pack("<BB", _CK_CODES[dt], a.ndim) + struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(np.ascontiguousarray(a, dtype=dt).tobytes())
    body = b"".join(parts)
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as f:
        f.write(body + struct.pack("<I", zlib.crc32(body)))
    os.replace(tmp, path)


def read_checkpoint_file(path) -> tuple:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < len(_CK_MAGIC) + 8 or blob[: len(_CK_MAGIC)] != _CK_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    body, (crc,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) != crc:
        raise CheckpointError(f"{path}: integrity check failed (truncated or corrupt)")
    pos = len(_CK_MAGIC)
    (version,) = struct.unpack_from("<I", body, pos)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos += 4
    (hlen,) = struct.unpack_from("<I", body, pos)
    pos += 4
    header = json.loads(body[pos : pos + hlen].decode("ascii"))
    pos += hlen
    (count,) = struct.unpack_from("<I", body, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, pos)
        pos += 2
        name = body[pos : pos + nlen].decode("utf-8")
        pos += nlen
        code, ndim = struct.unpack_from("<BB", body, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", body, pos)
        pos += 4 * ndim
        dt = _CK_DTYPES[code]
        size = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(body, dtype=dt, count=size, offset=pos).reshape(shape).copy()
        pos += size * dt.itemsize
    if pos != len(body):
        raise CheckpointError(f"{path}: trailing bytes after arrays")
    return header, arrays


def save_checkpoint(model, path, optimizer=None, metadata: dict | None = None) -> None:
    """Store config, parameters, buffers, optional Adam state and metadata."""
    header = {
        "format": "gated-res2net-checkpoint",
        "config": model.cfg.to_dict(),
        "dtype": str(model.dtype),
        "metadata": metadata or {},
    }
    arrays = {f"model.{k}": v for k, v in model.state_dict().items()}
    if optimizer is not None:
        state = optimizer.state_dict()
        header["optimizer"] = state["config"]
        header["optimizer_step"] = state["step"]
        arrays.update({f"opt.m.{k}": v for k, v in state["m"].items()})
        arrays.update({f"opt.v.{k}": v for k, v in state["v"].items()})
    write_checkpoint_file(path, header, arrays)


def load_checkpoint(path, cfg=None):
    """Rebuild the model stored in ``path``.

    With ``cfg`` the stored arrays are loaded into a model built from that
    config instead, raising ``DimensionError`` on any layout mismatch.
    Returns ``(model, info)`` where ``info`` holds metadata and optimizer state.
    """
    from .blocks import Backbone, BackboneConfig

    header, arrays = read_checkpoint_file(path)
    stored_cfg = BackboneConfig.from_dict(header["config"])
    model = Backbone(cfg if cfg is not None else stored_cfg, dtype=np.dtype(header["dtype"]))
    state = {k[len("model."):]: v for k, v in arrays.items() if k.startswith("model.")}
    model.load_state_dict(state, strict=True)
    info = {"metadata": header.get("metadata", {}), "config": stored_cfg}
    if "optimizer" in header:
        info["optimizer"] = {
            "config": header["optimizer"],
            "step": header["optimizer_step"],
            "m": {k[len("opt.m."):]: v for k, v in arrays.items() if k.startswith("opt.m.")},
            "v": {k[len("opt.v."):]: v for k, v in arrays.items() if k.startswith("opt.v.")},
        }
    return model, info
