"""Frame-localization and constraint-ablation experiments built on trained models."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from qualitynet import net
from qualitynet.features import StftConfig, magnitude_spectrogram
from qualitynet.signal import NOISE_KINDS, AudioClip, synth_noise, synth_speechlike

# 1-based, inclusive: the corrupted span used for the localization experiment
NOISY_FRAMES = (40, 100)
PARTIAL_DURATION_S = 2.3  # 142 frames at 512/256


def frame_sample_span(first: int, last: int, cfg: StftConfig = StftConfig()) -> tuple[int, int]:
    """Sample range [start, stop) covered by 1-based frames ``first..last``."""
    return (first - 1) * cfg.hop, (last - 1) * cfg.hop + cfg.frame_len


def region_masks(n_frames: int, first: int = NOISY_FRAMES[0], last: int = NOISY_FRAMES[1],
                 cfg: StftConfig = StftConfig()):
    """Boolean masks (noisy, clean) over frames.

    Clean frames are those whose window shares no sample with the corrupted
    span, so the single straddling frame on each side belongs to neither.
    """
    start, stop = frame_sample_span(first, last, cfg)
    begins = np.arange(n_frames) * cfg.hop
    ends = begins + cfg.frame_len
    noisy = np.zeros(n_frames, bool)
    noisy[first - 1:last] = True
    clean = (ends <= start) | (begins >= stop)
    return noisy, clean


def partial_noise(clean: AudioClip, noise: AudioClip, snr_db: float = 0.0,
                  first: int = NOISY_FRAMES[0], last: int = NOISY_FRAMES[1],
                  cfg: StftConfig = StftConfig()) -> AudioClip:
    """Add noise only inside frames ``first..last`` at a local SNR of ``snr_db``."""
    start, stop = frame_sample_span(first, last, cfg)
    if stop > len(clean):
        raise ValueError(f"clip of {len(clean)} samples is too short for frames {first}-{last}")
    seg = clean.samples[start:stop]
    nseg = noise.samples[np.arange(stop - start) % len(noise)]
    gain = math.sqrt(np.mean(seg**2) / (np.mean(nseg**2) * 10.0 ** (snr_db / 10.0)))
    out = clean.samples.copy()
    out[start:stop] += gain * nseg
    return AudioClip(out, clean.sample_rate_hz)


@dataclass
class PartialNoiseCase:
    clean: AudioClip
    noisy: AudioClip
    noise_kind: str


def partial_noise_cases(n: int = 50, seed: int = 10_000, snr_db: float = 0.0) -> list[PartialNoiseCase]:
    cases = []
    for k in range(n):
        rng = np.random.default_rng([seed, k])
        clean = synth_speechlike(rng.integers(2**63), PARTIAL_DURATION_S)
        kind = NOISE_KINDS[k % len(NOISE_KINDS)]
        noise = synth_noise(kind, rng.integers(2**63), PARTIAL_DURATION_S)
        cases.append(PartialNoiseCase(clean, partial_noise(clean, noise, snr_db), kind))
    return cases


@dataclass
class LocalizationStats:
    noisy_mean: np.ndarray       # per utterance, mean q over the corrupted span
    clean_mean: np.ndarray       # per utterance, mean q over the untouched frames
    baseline_mean: np.ndarray    # same frames, scored on the uncorrupted clip

    @property
    def localized_fraction(self) -> float:
        return float(np.mean(self.noisy_mean < self.clean_mean))

    @property
    def context_depression(self) -> float:
        """Average drop of clean-region scores caused by noise elsewhere in the utterance."""
        return float(np.mean(self.baseline_mean - self.clean_mean))


def localization(params: net.ModelParams, cases, cfg: StftConfig = StftConfig()) -> LocalizationStats:
    noisy_m, clean_m, base_m = [], [], []
    for case in cases:
        q_noisy = net.predict(magnitude_spectrogram(case.noisy, cfg), params).q
        q_clean = net.predict(magnitude_spectrogram(case.clean, cfg), params).q
        noisy, clean = region_masks(q_noisy.size, cfg=cfg)
        noisy_m.append(q_noisy[noisy].mean())
        clean_m.append(q_noisy[clean].mean())
        base_m.append(q_clean[clean].mean())
    return LocalizationStats(np.array(noisy_m), np.array(clean_m), np.array(base_m))
