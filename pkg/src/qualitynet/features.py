"""Magnitude spectrogram features and the on-disk feature cache."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from qualitynet._io import atomic_write_bytes
from qualitynet.signal import AudioClip, CorpusManifest, read_wav

CACHE_MAGIC = b"QNFT"
CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True)
class StftConfig:
    frame_len: int = 512
    hop: int = 256
    log1p: bool = False

    def __post_init__(self):
        if self.frame_len <= 0 or self.frame_len & (self.frame_len - 1):
            raise ValueError(f"frame_len must be a power of two, got {self.frame_len}")
        if not 0 < self.hop <= self.frame_len:
            raise ValueError(f"hop must be in (0, frame_len], got {self.hop}")

    @property
    def fft_size(self) -> int:
        return self.frame_len

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1


@dataclass
class Spectrogram:
    frames: np.ndarray  # (T, F) magnitudes
    config: StftConfig = StftConfig()

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def periodic_hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(n) / n)


def frame_count(signal_len: int, cfg: StftConfig = StftConfig()) -> int:
    if signal_len < cfg.frame_len:
        raise ValueError(f"signal of {signal_len} samples is shorter than one frame ({cfg.frame_len})")
    return 1 + (signal_len - cfg.frame_len) // cfg.hop


def magnitude_spectrogram(clip: AudioClip, cfg: StftConfig = StftConfig()) -> Spectrogram:
    """Framewise |rfft| of the Hann-windowed signal; trailing partial frames are dropped."""
    x = clip.samples if isinstance(clip, AudioClip) else np.asarray(clip, dtype=np.float64)
    n_frames = frame_count(x.size, cfg)
    windows = np.lib.stride_tricks.sliding_window_view(x, cfg.frame_len)[:: cfg.hop][:n_frames]
    mag = np.abs(np.fft.rfft(windows * periodic_hann(cfg.frame_len), n=cfg.fft_size, axis=1))
    if cfg.log1p:
        mag = np.log1p(mag)
    return Spectrogram(mag, cfg)


def write_feature_cache(spec: Spectrogram, path) -> None:
    frames = np.ascontiguousarray(spec.frames, dtype="<f4")
    t, f = frames.shape
    atomic_write_bytes(path, _CACHE_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, t, f) + frames.tobytes())


def read_feature_cache(path, cfg: StftConfig = StftConfig()) -> Spectrogram:
    data = Path(path).read_bytes()
    if len(data) < _CACHE_HEADER.size:
        raise ValueError(f"{path}: truncated feature cache")
    magic, version, t, f = _CACHE_HEADER.unpack_from(data)
    if magic != CACHE_MAGIC or version != CACHE_VERSION:
        raise ValueError(f"{path}: not a feature cache (magic={magic!r}, version={version})")
    body = data[_CACHE_HEADER.size:]
    if len(body) != 4 * t * f:
        raise ValueError(f"{path}: truncated feature cache")
    frames = np.frombuffer(body, dtype="<f4").reshape(t, f).astype(np.float64)
    return Spectrogram(frames, cfg)


def load_features(manifest: CorpusManifest, cfg: StftConfig = StftConfig(), cache_dir=None) -> list[Spectrogram]:
    """Spectrograms for every manifest entry, in manifest order.

    With ``cache_dir`` set, features are read from / written to QNFT blobs
    named after the utterance id. Cached magnitudes are 32-bit; a cache miss
    returns the same rounded values a later hit would, so results never depend
    on whether the cache was warm. Cached and uncached runs differ at float32
    rounding.
    """
    out = []
    for entry in manifest:
        cached = Path(cache_dir) / f"{entry.utterance_id}.qnft" if cache_dir else None
        if cached is not None and cached.is_file():
            out.append(read_feature_cache(cached, cfg))
            continue
        spec = magnitude_spectrogram(read_wav(manifest.resolve(entry)), cfg)
        if cached is not None:
            write_feature_cache(spec, cached)
            spec = Spectrogram(spec.frames.astype(np.float32).astype(np.float64), spec.config)
        out.append(spec)
    return out
