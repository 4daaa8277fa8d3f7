"""Speech-weighted noise: long-term average spectrum estimation, noise
synthesis by FIR shaping, and mixing speech with noise at an exact SNR.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal

from .audio import AudioClip, PIPELINE_RATE, require_pipeline_rate
from .errors import DataError

NYQUIST = PIPELINE_RATE / 2.0
SHAPING_FIR_TAPS = 513  # order-512 linear-phase shaper
POWER_FLOOR_DB = -100.0


@dataclass(frozen=True)
class SnrLadder:
    """Presentation SNR grid used by the adaptive procedure, in dB."""

    levels_db: tuple = (-22.0, -18.0, -12.0, -6.0, 0.0, 6.0, 12.0, 18.0, 22.0)

    def __post_init__(self):
        levels = tuple(float(v) for v in self.levels_db)
        if len(levels) < 2 or any(b <= a for a, b in zip(levels, levels[1:])):
            raise DataError("ladder levels must be strictly increasing")
        object.__setattr__(self, "levels_db", levels)

    def __len__(self) -> int:
        return len(self.levels_db)

    def __getitem__(self, i: int) -> float:
        return self.levels_db[i]


DEFAULT_SNR_LADDER = SnrLadder()


@dataclass(frozen=True)
class LtassProfile:
    """One-sided long-term average speech spectrum on a uniform 0..8 kHz grid.

    power_db is normalized to a 0 dB peak and floored so every bin is finite.
    """

    freqs: np.ndarray
    power_db: np.ndarray
    source_corpus_hash: str = ""

    def __post_init__(self):
        freqs = np.asarray(self.freqs, dtype=np.float64)
        power = np.asarray(self.power_db, dtype=np.float64)
        if freqs.ndim != 1 or freqs.shape != power.shape or freqs.size < 2:
            raise DataError("profile freqs/power_db must be matching 1-D arrays")
        df = np.diff(freqs)
        if np.any(df <= 0) or not np.allclose(df, df[0], rtol=1e-6, atol=1e-6):
            raise DataError("profile grid must be strictly increasing and uniform")
        if abs(freqs[0]) > 1e-6 or abs(freqs[-1] - NYQUIST) > 1e-6:
            raise DataError(f"profile grid must span 0..{NYQUIST:.0f} Hz")
        if not np.all(np.isfinite(power)):
            raise DataError("profile power_db must be finite everywhere")
        object.__setattr__(self, "freqs", freqs)
        object.__setattr__(self, "power_db", power)

    def to_json(self) -> str:
        return json.dumps(
            {
                "freqs_hz": self.freqs.tolist(),
                "power_db": self.power_db.tolist(),
                "source_corpus_hash": self.source_corpus_hash,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "LtassProfile":
        obj = json.loads(text)
        return cls(
            freqs=np.asarray(obj["freqs_hz"], dtype=np.float64),
            power_db=np.asarray(obj["power_db"], dtype=np.float64),
            source_corpus_hash=obj.get("source_corpus_hash", ""),
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "LtassProfile":
        return cls.from_json(Path(path).read_text())


def corpus_fingerprint(clips) -> str:
    """Stable hash of clip ids and sample data, for profile provenance."""
    h = hashlib.sha256()
    for clip in clips:
        h.update(clip.id.encode())
        h.update(np.int64(len(clip.samples)).tobytes())
        h.update(clip.samples.tobytes())
    return h.hexdigest()[:16]


def estimate_ltass(clips, fft_bins: int = 512) -> LtassProfile:
    """Welch-averaged power spectrum of a corpus, normalized to 0 dB peak.

    Hann windows with 50% overlap; per-clip averages are pooled weighted by
    each clip's segment count. The returned grid has fft_bins points spanning
    0..8 kHz.
    """
    clips = list(clips)
    if not clips:
        raise DataError("estimate_ltass: empty corpus")
    if fft_bins < 8:
        raise DataError("estimate_ltass: fft_bins too small")
    for clip in clips:
        require_pipeline_rate(clip)

    nperseg = 2 * (fft_bins - 1)
    acc = np.zeros(fft_bins)
    total_segments = 0
    for clip in clips:
        nseg_len = min(nperseg, len(clip.samples))
        hop = max(1, nseg_len // 2)
        n_segments = 1 + max(0, (len(clip.samples) - nseg_len)) // hop
        freqs, pxx = signal.welch(
            clip.samples,
            fs=PIPELINE_RATE,
            window="hann",
            nperseg=nseg_len,
            noverlap=nseg_len - hop,
            nfft=nperseg,
            detrend=False,
            scaling="density",
        )
        acc += pxx * n_segments
        total_segments += n_segments
    pxx_mean = acc / total_segments

    peak = float(np.max(pxx_mean))
    if peak <= 0.0:
        raise DataError("estimate_ltass: corpus has no power")
    with np.errstate(divide="ignore"):
        power_db = 10.0 * np.log10(pxx_mean / peak)
    power_db = np.maximum(power_db, POWER_FLOOR_DB)
    grid = np.linspace(0.0, NYQUIST, fft_bins)
    return LtassProfile(freqs=grid, power_db=power_db,
                        source_corpus_hash=corpus_fingerprint(clips))


def shaping_filter(profile: LtassProfile, numtaps: int = SHAPING_FIR_TAPS) -> np.ndarray:
    """Linear-phase FIR whose magnitude follows sqrt of the profile power,
    designed by frequency sampling on the profile grid."""
    gains = np.power(10.0, profile.power_db / 20.0)
    freq_norm = profile.freqs / NYQUIST
    freq_norm[0], freq_norm[-1] = 0.0, 1.0
    return signal.firwin2(numtaps, freq_norm, gains)


def synth_noise(profile: LtassProfile, duration_s: float, seed: int) -> AudioClip:
    """Gaussian noise spectrally shaped to the profile; deterministic per seed.

    Output RMS is normalized to 0.1; only the spectral shape is contractual.
    """
    if duration_s <= 0:
        raise DataError("synth_noise: duration must be positive")
    n = int(round(duration_s * PIPELINE_RATE))
    taps = shaping_filter(profile)
    rng = np.random.default_rng(seed)
    white = rng.standard_normal(n + len(taps) - 1)
    shaped = signal.fftconvolve(white, taps, mode="full")[len(taps) - 1:len(taps) - 1 + n]
    level = float(np.sqrt(np.mean(np.square(shaped))))
    if level <= 0.0:
        raise DataError("synth_noise: degenerate profile produced silence")
    return AudioClip(samples=shaped * (0.1 / level), sample_rate=PIPELINE_RATE,
                     id=f"swn_seed{seed}")


def mix_at_snr(speech: AudioClip, noise: AudioClip, snr_db: float,
               measure_interval: tuple[float, float] | None = None) -> AudioClip:
    """Add noise to speech with gain set for an exact SNR over the power window.

    The window defaults to the speech clip's annotated CV interval when
    present, else the full token. The leading noise segment is used, so the
    result is a pure function of its inputs.
    """
    if noise.sample_rate != speech.sample_rate:
        raise DataError("mix_at_snr: sample rate mismatch")
    if len(noise.samples) < len(speech.samples):
        raise DataError("mix_at_snr: noise shorter than speech")
    if measure_interval is None and speech.annotation is not None:
        ann = speech.annotation
        measure_interval = (ann.consonant_start, ann.vowel_onset_end)

    noise_seg = noise.samples[:len(speech.samples)]
    if measure_interval is None:
        s_pow = float(np.mean(np.square(speech.samples)))
        n_pow = float(np.mean(np.square(noise_seg)))
    else:
        t0, t1 = measure_interval
        i0, i1 = speech.sample_index(t0), speech.sample_index(t1)
        if not (0 <= i0 < i1 <= len(speech.samples)):
            raise DataError(f"mix_at_snr: window [{t0}, {t1}] outside clip")
        s_pow = float(np.mean(np.square(speech.samples[i0:i1])))
        n_pow = float(np.mean(np.square(noise_seg[i0:i1])))
    if s_pow <= 0.0 or n_pow <= 0.0:
        raise DataError("mix_at_snr: zero-power signal in measurement window")

    gain = np.sqrt(s_pow / (n_pow * 10.0 ** (snr_db / 10.0)))
    return speech.with_samples(speech.samples + gain * noise_seg)


def measure_snr(mixture: AudioClip, clean: AudioClip,
                measure_interval: tuple[float, float] | None = None) -> float:
    """Recover the SNR of a mixture given the clean speech it was built from."""
    if len(mixture.samples) != len(clean.samples):
        raise DataError("measure_snr: length mismatch")
    if measure_interval is None and clean.annotation is not None:
        ann = clean.annotation
        measure_interval = (ann.consonant_start, ann.vowel_onset_end)
    residual = mixture.samples - clean.samples
    if measure_interval is None:
        i0, i1 = 0, len(clean.samples)
    else:
        i0 = clean.sample_index(measure_interval[0])
        i1 = clean.sample_index(measure_interval[1])
    s_pow = float(np.mean(np.square(clean.samples[i0:i1])))
    n_pow = float(np.mean(np.square(residual[i0:i1])))
    if s_pow <= 0.0 or n_pow <= 0.0:
        raise DataError("measure_snr: zero-power signal in measurement window")
    return 10.0 * np.log10(s_pow / n_pow)


def third_octave_centers(f_lo: float = 100.0, f_hi: float = 7000.0) -> np.ndarray:
    """Base-2 third-octave band centers whose bands intersect [f_lo, f_hi]."""
    centers = []
    k = 0
    while True:
        c = 100.0 * 2.0 ** (k / 3.0)
        if c > f_hi:
            break
        if c >= f_lo:
            centers.append(c)
        k += 1
    return np.asarray(centers)


def third_octave_deviation(profile: LtassProfile, clip: AudioClip,
                           f_lo: float = 100.0, f_hi: float = 7000.0):
    """Per-band dB deviation between a clip's spectrum and a target profile.

    The profile is peak-normalized and the clip level is arbitrary, so the
    comparison removes the mean dB offset across bands before reporting.
    Returns (max_abs_deviation_db, centers, deviations).
    """
    require_pipeline_rate(clip)
    nperseg = min(4096, len(clip.samples))
    freqs, pxx = signal.welch(clip.samples, fs=PIPELINE_RATE, window="hann",
                              nperseg=nperseg, noverlap=nperseg // 2,
                              detrend=False, scaling="density")
    # integrate both spectra on the clip's (finer) grid so narrow low bands
    # hold enough points; interpolate the profile in dB
    prof_lin = np.power(10.0, np.interp(freqs, profile.freqs,
                                        profile.power_db) / 10.0)

    centers = third_octave_centers(f_lo, f_hi)
    dev = np.empty(len(centers))
    for i, c in enumerate(centers):
        lo = max(c / 2.0 ** (1.0 / 6.0), f_lo)
        hi = min(c * 2.0 ** (1.0 / 6.0), f_hi)
        sel = (freqs >= lo) & (freqs <= hi)
        if np.count_nonzero(sel) < 2:
            raise DataError(f"third_octave_deviation: band at {c:.0f} Hz has "
                            f"too few spectrum points")
        band_clip = np.trapezoid(pxx[sel], freqs[sel])
        band_prof = np.trapezoid(prof_lin[sel], freqs[sel])
        if band_clip <= 0 or band_prof <= 0:
            raise DataError(f"third_octave_deviation: empty band at {c:.0f} Hz")
        dev[i] = 10.0 * np.log10(band_clip / band_prof)
    dev -= np.mean(dev)
    return float(np.max(np.abs(dev))), centers, dev
