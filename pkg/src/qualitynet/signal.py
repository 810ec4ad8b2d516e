"""Audio I/O, synthetic corpus generation and the intrusive proxy label.

Everything here runs at 16 kHz mono. Waveforms are float64 arrays with a
nominal range of [-1, 1]. Synthesis is deterministic in the seed it is given.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import wave
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.signal

from qualitynet._io import atomic_open, atomic_write_bytes

log = logging.getLogger(__name__)

SAMPLE_RATE = 16000
CONDITIONS = ("clean", "noisy", "enhanced")
NOISE_KINDS = ("white", "pink", "engine", "babble")
SNR_CAP_DB = 60.0
Q_MIN, Q_MAX = 1.0, 4.5
MANIFEST_HEADER = ("utterance_id", "condition", "audio_path", "noise_kind", "snr_db", "label_q")


class WavFormatError(ValueError):
    """Raised for WAV files this package cannot read."""


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.samples.size < 1:
            raise ValueError("audio clip must hold at least one sample")
        if int(self.sample_rate_hz) <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("audio clip contains non-finite samples")
        self.sample_rate_hz = int(self.sample_rate_hz)

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate_hz


def _require_16k(*clips: AudioClip) -> None:
    for clip in clips:
        if clip.sample_rate_hz != SAMPLE_RATE:
            raise ValueError(f"expected {SAMPLE_RATE} Hz audio, got {clip.sample_rate_hz} Hz")


# ---------------------------------------------------------------------------
# WAV I/O
# ---------------------------------------------------------------------------


def read_wav(path) -> AudioClip:
    """Read a PCM16 mono WAV file, scaling samples by 1/32768."""
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: malformed header (not a RIFF/WAVE file)")
    try:
        with wave.open(io.BytesIO(data), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            frames = wf.readframes(wf.getnframes())
    except wave.Error as exc:
        msg = str(exc)
        if "unknown format" in msg:
            raise WavFormatError(f"{path}: unsupported encoding ({msg})") from exc
        raise WavFormatError(f"{path}: malformed header ({msg})") from exc
    except EOFError as exc:
        raise WavFormatError(f"{path}: malformed header (truncated)") from exc
    if channels != 1:
        raise WavFormatError(f"{path}: unsupported channel count {channels}")
    if width != 2:
        raise WavFormatError(f"{path}: unsupported bit depth {8 * width}")
    pcm = np.frombuffer(frames, dtype="<i2")
    if pcm.size == 0:
        raise WavFormatError(f"{path}: malformed header (no sample data)")
    return AudioClip(pcm.astype(np.float64) / 32768.0, rate)


def write_wav(clip: AudioClip, path) -> int:
    """Write ``clip`` as PCM16 mono. Returns the number of clamped samples."""
    scaled = np.round(clip.samples * 32768.0)
    clamped = int(np.count_nonzero((scaled > 32767) | (scaled < -32768)))
    if clamped:
        log.warning("%s: clamped %d out-of-range samples", path, clamped)
    pcm = np.clip(scaled, -32768, 32767).astype("<i2")
    buf = io.BytesIO()
    with wave.open(buf, "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(clip.sample_rate_hz)
        wf.writeframes(pcm.tobytes())
    atomic_write_bytes(path, buf.getvalue())
    return clamped


# ---------------------------------------------------------------------------
# Synthesis
# ---------------------------------------------------------------------------


def _resonator_gain(freq, center, bandwidth, sr=SAMPLE_RATE):
    # Two-pole resonator magnitude response, normalized to unit gain at DC.
    r = np.exp(-np.pi * bandwidth / sr)
    theta = 2 * np.pi * center / sr
    omega = 2 * np.pi * freq / sr
    rr = 1.0 + r * r
    denom = (rr - 2 * r * np.cos(theta - omega)) * (rr - 2 * r * np.cos(theta + omega))
    dc = rr - 2 * r * np.cos(theta)
    return dc / np.sqrt(denom)


def _ramp(n: int, sr=SAMPLE_RATE, ramp_s=0.015) -> np.ndarray:
    env = np.ones(n)
    k = min(int(ramp_s * sr), n // 2)
    if k > 0:
        up = 0.5 - 0.5 * np.cos(np.pi * np.arange(k) / k)
        env[:k] = up
        env[n - k:] = up[::-1]
    return env


def _voiced(rng: np.random.Generator, n: int, sr=SAMPLE_RATE) -> np.ndarray:
    t = np.arange(n) / sr
    f0_start, f0_end = rng.uniform(100.0, 220.0, size=2)
    vib_rate, vib_depth = rng.uniform(3.0, 6.0), rng.uniform(0.0, 6.0)
    f0 = np.linspace(f0_start, f0_end, n) + vib_depth * np.sin(2 * np.pi * vib_rate * t)
    f0 = np.clip(f0, 100.0, 220.0)
    phase = 2 * np.pi * np.cumsum(f0) / sr

    n_formants = int(rng.integers(2, 4))
    ranges = [(300.0, 800.0), (900.0, 2200.0), (2300.0, 3000.0)][:n_formants]
    harmonics = np.arange(1, int(4000.0 // 220.0) + 1)[:, None]
    # Harmonic amplitudes vary slowly: evaluate them on a 2 ms grid and interpolate.
    ctrl = np.unique(np.append(np.arange(0, n, 32), n - 1))
    amp_ctrl = 1.0 / harmonics * np.ones((1, ctrl.size))
    for lo, hi in ranges:
        start, end = rng.uniform(lo, hi, size=2)
        centre = start + (end - start) * ctrl / max(n - 1, 1)
        bw = rng.uniform(60.0, 150.0)
        amp_ctrl = amp_ctrl * _resonator_gain(harmonics * f0[ctrl], centre, bw, sr)
    grid = np.arange(n)
    amp = np.stack([np.interp(grid, ctrl, row) for row in amp_ctrl])
    sig = np.sum(amp * np.sin(harmonics * phase + rng.uniform(0, 2 * np.pi, (harmonics.size, 1))), axis=0)
    sig /= np.max(np.abs(sig)) + 1e-12
    return sig * rng.uniform(0.5, 1.0) * _ramp(n, sr)


_FRICATIVE_SOS = scipy.signal.butter(2, [2000.0, 6000.0], btype="bandpass", fs=SAMPLE_RATE, output="sos")


def _unvoiced(rng: np.random.Generator, n: int, sr=SAMPLE_RATE) -> np.ndarray:
    sig = scipy.signal.sosfilt(_FRICATIVE_SOS, rng.standard_normal(n))
    sig /= np.sqrt(np.mean(sig**2)) + 1e-12
    return 0.08 * rng.uniform(0.5, 1.0) * sig * _ramp(n, sr)


def _speechlike(rng: np.random.Generator, n: int, sr=SAMPLE_RATE) -> np.ndarray:
    out = np.zeros(n)
    pos = int(rng.uniform(0.15, 0.3) * sr)  # leading silence
    voiced_turn = True
    while pos < n:
        if voiced_turn:
            seg = int(rng.uniform(0.12, 0.35) * sr)
            piece = _voiced(rng, min(seg, n - pos), sr)
        elif rng.random() < 0.5:
            seg = int(rng.uniform(0.04, 0.12) * sr)
            piece = _unvoiced(rng, min(seg, n - pos), sr)
        else:
            seg = int(rng.uniform(0.05, 0.2) * sr)
            piece = np.zeros(min(seg, n - pos))
        out[pos:pos + piece.size] = piece
        pos += piece.size
        voiced_turn = not voiced_turn
    return out


def synth_speechlike(seed, duration_s: float) -> AudioClip:
    """Synthesize a speech-like utterance with a 0.5 peak amplitude.

    Voiced segments are harmonic series with f0 drifting in 100-220 Hz,
    shaped by 2-3 time-varying resonators; they alternate with fricative
    noise bursts or pauses.
    """
    if not 1.0 <= duration_s <= 5.0:
        raise ValueError(f"duration_s must be in [1, 5], got {duration_s}")
    rng = np.random.default_rng(seed)
    sig = _speechlike(rng, int(round(duration_s * SAMPLE_RATE)))
    peak = np.max(np.abs(sig))
    return AudioClip(0.5 * sig / peak, SAMPLE_RATE)


def _pink(rng: np.random.Generator, n: int) -> np.ndarray:
    spec = rng.standard_normal(n // 2 + 1) + 1j * rng.standard_normal(n // 2 + 1)
    freqs = np.fft.rfftfreq(n, 1.0 / SAMPLE_RATE)
    scale = np.zeros_like(freqs)
    scale[1:] = 1.0 / np.sqrt(freqs[1:])
    return np.fft.irfft(spec * scale, n)


_ENGINE_SOS = scipy.signal.butter(4, 300.0, btype="lowpass", fs=SAMPLE_RATE, output="sos")


def _engine(rng: np.random.Generator, n: int) -> np.ndarray:
    t = np.arange(n) / SAMPLE_RATE
    base = rng.uniform(25.0, 45.0)
    sig = np.zeros(n)
    for k in range(1, int(300.0 // base) + 1):
        sig += np.sin(2 * np.pi * k * base * t + rng.uniform(0, 2 * np.pi)) / k
    mod = 1.0 + 0.3 * np.sin(2 * np.pi * rng.uniform(2.0, 6.0) * t + rng.uniform(0, 2 * np.pi))
    rumble = scipy.signal.sosfilt(_ENGINE_SOS, rng.standard_normal(n))
    rumble *= np.sqrt(np.mean(sig**2) / (np.mean(rumble**2) + 1e-12))
    return sig * mod + 0.3 * rumble


def _babble(rng: np.random.Generator, n: int) -> np.ndarray:
    sig = np.zeros(n)
    for child in rng.spawn(6):
        voice = _speechlike(child, n)
        sig += np.roll(voice, int(child.integers(0, n)))
    return sig


_NOISE_MAKERS = {
    "white": lambda rng, n: rng.standard_normal(n),
    "pink": _pink,
    "engine": _engine,
    "babble": _babble,
}


def synth_noise(kind: str, seed, duration_s: float) -> AudioClip:
    """Synthesize one of the stand-in noise types with RMS 0.1."""
    if kind not in _NOISE_MAKERS:
        raise ValueError(f"unknown noise kind {kind!r}; expected one of {NOISE_KINDS}")
    n = int(round(duration_s * SAMPLE_RATE))
    if n < 1:
        raise ValueError("noise duration too short")
    sig = _NOISE_MAKERS[kind](np.random.default_rng(seed), n)
    return AudioClip(0.1 * sig / np.sqrt(np.mean(sig**2)), SAMPLE_RATE)


# ---------------------------------------------------------------------------
# Mixing, enhancement, labels
# ---------------------------------------------------------------------------


def _power(x: np.ndarray) -> float:
    return float(np.mean(x * x))


def mix_at_snr(clean: AudioClip, noise: AudioClip, snr_db: float, offset: int = 0) -> AudioClip:
    """Add ``noise`` to ``clean`` scaled to a global SNR of ``snr_db``.

    The noise is read from ``offset`` and wrapped around when it is shorter
    than the clean signal.
    """
    _require_16k(clean, noise)
    n = len(clean)
    idx = (offset + np.arange(n)) % len(noise)
    segment = noise.samples[idx]
    p_clean, p_noise = _power(clean.samples), _power(segment)
    if p_clean <= 0:
        raise ValueError("clean signal has zero power")
    if p_noise <= 0:
        raise ValueError("noise segment has zero power")
    gain = math.sqrt(p_clean / (p_noise * 10.0 ** (snr_db / 10.0)))
    return AudioClip(clean.samples + gain * segment, clean.sample_rate_hz)


def global_snr_db(reference: AudioClip, degraded: AudioClip) -> float:
    """Utterance-level SNR of ``degraded`` against ``reference``, capped at 60 dB."""
    ref = reference.samples
    if len(ref) != len(degraded):
        raise ValueError(f"length mismatch: {len(ref)} vs {len(degraded)}")
    p_ref = float(np.sum(ref * ref))
    if p_ref <= 0:
        raise ValueError("reference has zero power")
    resid = degraded.samples - ref
    p_res = float(np.sum(resid * resid))
    if p_res <= 1e-6 * p_ref:
        return SNR_CAP_DB
    return 10.0 * math.log10(p_ref / p_res)


def snr_to_quality(snr_db: float) -> float:
    return min(max(Q_MIN + 3.5 * (snr_db + 5.0) / 30.0, Q_MIN), Q_MAX)


def proxy_quality(reference: AudioClip, degraded: AudioClip) -> float:
    """Map the global SNR onto [1.0, 4.5]; -5 dB and below is 1.0, 25 dB and above is 4.5."""
    return snr_to_quality(global_snr_db(reference, degraded))


def spectral_subtract(noisy: AudioClip, stft_cfg=None) -> AudioClip:
    """Magnitude spectral subtraction with a noise estimate from the first 10 frames."""
    from qualitynet.features import StftConfig, frame_count

    cfg = stft_cfg or StftConfig()
    x = noisy.samples
    if len(x) < cfg.frame_len or frame_count(len(x), cfg) < 10:
        raise ValueError("input too short: spectral subtraction needs at least 10 frames")
    kw = dict(fs=noisy.sample_rate_hz, window="hann", nperseg=cfg.frame_len,
              noverlap=cfg.frame_len - cfg.hop, nfft=cfg.fft_size)
    _, _, spec = scipy.signal.stft(x, **kw)
    mag = np.abs(spec)
    noise_est = mag[:, :10].mean(axis=1, keepdims=True)
    cleaned = np.maximum(mag - noise_est, 0.002 * mag)
    _, out = scipy.signal.istft(cleaned * np.exp(1j * np.angle(spec)), **kw)
    out = out[: len(x)]
    if out.size < len(x):
        out = np.pad(out, (0, len(x) - out.size))
    return AudioClip(out, noisy.sample_rate_hz)


# ---------------------------------------------------------------------------
# Corpus
# ---------------------------------------------------------------------------


@dataclass
class ManifestEntry:
    utterance_id: str
    condition: str
    audio_path: str
    noise_kind: str
    snr_db: float | None
    label_q: float


@dataclass
class CorpusManifest:
    entries: list[ManifestEntry]
    split: str = "train"
    root: Path | None = None  # directory that relative audio paths resolve against

    def __post_init__(self):
        ids = [e.utterance_id for e in self.entries]
        if len(set(ids)) != len(ids):
            raise ValueError("utterance ids must be unique")
        for e in self.entries:
            if e.condition not in CONDITIONS:
                raise ValueError(f"{e.utterance_id}: unknown condition {e.condition!r}")
            if e.label_q is None or not math.isfinite(e.label_q):
                raise ValueError(f"{e.utterance_id}: missing label")

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.audio_path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def subset(self, entries: Sequence[ManifestEntry]) -> "CorpusManifest":
        return CorpusManifest(list(entries), self.split, self.root)


def write_manifest(manifest: CorpusManifest, path) -> None:
    with atomic_open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for e in sorted(manifest.entries, key=lambda e: e.utterance_id):
            snr = "" if e.snr_db is None else f"{e.snr_db:g}"
            writer.writerow([e.utterance_id, e.condition, e.audio_path, e.noise_kind, snr, f"{e.label_q:.4f}"])


def read_manifest(path, split: str | None = None) -> CorpusManifest:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_HEADER) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: manifest lacks columns {sorted(missing)}")
        entries = [
            ManifestEntry(
                utterance_id=row["utterance_id"],
                condition=row["condition"],
                audio_path=row["audio_path"],
                noise_kind=row["noise_kind"],
                snr_db=float(row["snr_db"]) if row["snr_db"] else None,
                label_q=float(row["label_q"]),
            )
            for row in reader
        ]
    return CorpusManifest(entries, split or path.stem, path.parent)


@dataclass
class SynthConfig:
    n_train: int = 500
    n_val: int = 100
    n_test: int = 100
    snr_levels_db: tuple = (-10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0, 25.0)
    noise_kinds: tuple = NOISE_KINDS
    duration_s: tuple = (1.5, 3.0)
    master_seed: int = 0
    clean_fraction: float = 0.05

    def __post_init__(self):
        for name in ("n_train", "n_val", "n_test"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not all(math.isfinite(s) for s in self.snr_levels_db):
            raise ValueError("SNR levels must be finite")
        unknown = set(self.noise_kinds) - set(NOISE_KINDS)
        if unknown:
            raise ValueError(f"unknown noise kinds {sorted(unknown)}")
        lo, hi = self.duration_s
        if not 1.0 <= lo <= hi <= 5.0:
            raise ValueError("duration_s range must lie within [1, 5]")

    def counts(self) -> dict[str, int]:
        return {"train": self.n_train, "val": self.n_val, "test": self.n_test}


def _split_conditions(n: int, clean_fraction: float, rng: np.random.Generator) -> list[str]:
    n_clean = max(1, int(round(clean_fraction * n))) if n >= 3 else 0
    n_noisy = (n - n_clean + 1) // 2
    conds = ["clean"] * n_clean + ["noisy"] * n_noisy + ["enhanced"] * (n - n_clean - n_noisy)
    rng.shuffle(conds)
    return conds


def _make_entry(cfg: SynthConfig, split_index: int, index: int, condition: str):
    rng = np.random.default_rng([cfg.master_seed, split_index, index])
    duration = float(rng.uniform(*cfg.duration_s))
    clean = synth_speechlike(rng.integers(2**63), duration)
    if condition == "clean":
        return clean, "", None, proxy_quality(clean, clean)
    kind = str(cfg.noise_kinds[rng.integers(len(cfg.noise_kinds))])
    snr = float(cfg.snr_levels_db[rng.integers(len(cfg.snr_levels_db))])
    noise = synth_noise(kind, rng.integers(2**63), min(duration, 5.0))
    degraded = mix_at_snr(clean, noise, snr, offset=int(rng.integers(len(noise))))
    if condition == "enhanced":
        degraded = spectral_subtract(degraded)
    peak = np.max(np.abs(degraded.samples))
    if peak > 0.999:  # keep the stored PCM unclipped
        degraded = AudioClip(degraded.samples * (0.999 / peak))
        clean = AudioClip(clean.samples * (0.999 / peak))
    return degraded, kind, snr, proxy_quality(clean, degraded)


def build_corpus(config: SynthConfig, out_dir, workers: int = 1) -> dict[str, CorpusManifest]:
    """Synthesize clean/noisy/enhanced utterances and write one manifest CSV per split.

    Audio lands in ``out_dir/audio``; manifests are ``out_dir/{train,val,test}.csv``
    with audio paths relative to ``out_dir``.
    """
    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    manifests = {}
    for split_index, (split, n) in enumerate(config.counts().items()):
        conds = _split_conditions(n, config.clean_fraction,
                                  np.random.default_rng([config.master_seed, split_index]))

        def job(i, split=split, split_index=split_index, conds=conds):
            uid = f"{split}_{i:05d}"
            clip, kind, snr, label = _make_entry(config, split_index, i, conds[i])
            rel = f"audio/{uid}.wav"
            write_wav(clip, out_dir / rel)
            return ManifestEntry(uid, conds[i], rel, kind, snr, round(label, 4))

        if workers > 1:
            with ThreadPoolExecutor(workers) as pool:
                entries = list(pool.map(job, range(n)))
        else:
            entries = [job(i) for i in range(n)]
        manifest = CorpusManifest(entries, split, out_dir)
        write_manifest(manifest, out_dir / f"{split}.csv")
        manifests[split] = manifest
    return manifests
