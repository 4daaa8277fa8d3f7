"""Distortion continua from labeled seed tokens: consonant time-scaling
(WSOLA), whole-token pitch shifting, and shelving FIR coloration, with
SNR90 labels propagated by linear interpolation and a 6 dB validity gate.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy import signal

from .audio import AudioClip, SegmentAnnotation, TokenLabel, PIPELINE_RATE, \
    require_pipeline_rate, save_annotations, write_wav
from .errors import AnnotationError, DataError, GridError, NoF0Error

FAMILIES = ("extend", "compress", "pitch_up", "pitch_down", "lowpass", "highpass")

# --- WSOLA time-scale modification (25 ms frames, 6.25 ms hop, +-5 ms search)
WSOLA_FRAME = 400
WSOLA_HOP = 100
WSOLA_SEARCH = 80

# --- distortion grids
EXTEND_STEP = 0.003
EXTEND_MAX = 3.0
COMPRESS_STEP = 0.01
COMPRESS_MIN = 0.5
PITCH_MIN_HZ = 20
PITCH_MAX_HZ = 600
N_CUTOFFS = 20
N_ATTENUATIONS = 20
ATTENUATION_MIN_DB = 0.6
ATTENUATION_MAX_DB = 12.0
HIGHPASS_CUTOFFS_HZ = (200.0, 3000.0)
LOWPASS_CUTOFFS_HZ = (1000.0, 8000.0)
GATE_LIMIT_DB = 6.0

FIR_TAPS = 201  # order-200 linear-phase shelving filter
_F0_FRAME = 800  # 50 ms
_F0_LAG_MIN = PIPELINE_RATE // 500
_F0_LAG_MAX = PIPELINE_RATE // 40


def _periodic_hann(n: int) -> np.ndarray:
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def timescale(x: np.ndarray, ratio: float) -> np.ndarray:
    """Waveform-similarity overlap-add time-scaling; output length is exactly
    round(ratio * len(x)), pitch preserved.

    Frames are placed on a fixed synthesis grid; each is fetched near the
    nominal source position, nudged within the search radius to best continue
    the previous frame (plain cross-correlation against its natural
    continuation), and Hann-overlap-added with weight renormalization.
    """
    if ratio == 1.0:
        return x.copy()
    n_in = len(x)
    n_out = int(round(ratio * n_in))
    if n_in <= WSOLA_FRAME or n_out <= WSOLA_FRAME:
        raise DataError(f"timescale: segment too short ({n_in} -> {n_out} samples)")

    win = _periodic_hann(WSOLA_FRAME)
    num = np.zeros(n_out + WSOLA_FRAME)
    den = np.zeros(n_out + WSOLA_FRAME)
    src_max = n_in - WSOLA_FRAME
    prev_src = 0
    for out in range(0, n_out, WSOLA_HOP):
        if out == 0:
            src = 0
        else:
            target = int(round(out / ratio))
            lo = min(max(target - WSOLA_SEARCH, 0), src_max)
            hi = min(max(target + WSOLA_SEARCH, 0), src_max)
            nat = prev_src + WSOLA_HOP
            if 0 <= nat <= src_max and hi > lo:
                ref = x[nat:nat + WSOLA_FRAME]
                corr = np.correlate(x[lo:hi + WSOLA_FRAME], ref, mode="valid")
                src = lo + int(np.argmax(corr))
            else:
                src = min(max(target, 0), src_max)
        num[out:out + WSOLA_FRAME] += win * x[src:src + WSOLA_FRAME]
        den[out:out + WSOLA_FRAME] += win
        prev_src = src

    covered = den > 1e-12
    y = np.where(covered, num / np.where(covered, den, 1.0), 0.0)[:n_out]
    if not covered[0]:  # periodic Hann zeros the very first sample's weight
        y[0] = x[0]
    return y


def stretch_consonant(clip: AudioClip,
                      annotation: SegmentAnnotation | None = None,
                      ratio: float = 1.0) -> AudioClip:
    """Time-scale only the annotated consonant interval by `ratio`; the rest
    of the token is spliced back unchanged. The output annotation covers the
    rescaled interval."""
    require_pipeline_rate(clip)
    if annotation is None:
        annotation = clip.annotation
    if annotation is None:
        raise AnnotationError(f"clip {clip.id!r}: no annotation to stretch")
    if not COMPRESS_MIN <= ratio <= EXTEND_MAX:
        raise DataError(f"stretch ratio {ratio} outside [{COMPRESS_MIN}, {EXTEND_MAX}]")

    i0 = clip.sample_index(annotation.consonant_start)
    i1 = clip.sample_index(annotation.vowel_onset_end)
    if ratio == 1.0:
        return clip.with_annotation(annotation)
    scaled = timescale(clip.samples[i0:i1], ratio)
    samples = np.concatenate([clip.samples[:i0], scaled, clip.samples[i1:]])
    new_ann = SegmentAnnotation(
        consonant_start=annotation.consonant_start,
        vowel_onset_end=annotation.consonant_start + len(scaled) / clip.sample_rate,
        token_id=annotation.token_id)
    return AudioClip(samples=samples, sample_rate=clip.sample_rate,
                     id=clip.id, annotation=new_ann)


def estimate_f0(clip: AudioClip) -> float:
    """Median F0 over voiced 50 ms frames, by autocorrelation peak picking in
    the 40-500 Hz band with octave-error suppression and parabolic refinement."""
    require_pipeline_rate(clip)
    x = clip.samples
    f0s = []
    for start in range(0, len(x) - _F0_FRAME + 1, _F0_FRAME // 2):
        frame = x[start:start + _F0_FRAME]
        frame = frame - np.mean(frame)
        r = np.correlate(frame, frame, mode="full")[_F0_FRAME - 1:]
        if r[0] <= 0.0:
            continue
        r = r / r[0]
        band = r[_F0_LAG_MIN:_F0_LAG_MAX + 1]
        peaks = np.flatnonzero((band[1:-1] >= band[:-2]) & (band[1:-1] > band[2:])) + 1
        if peaks.size == 0 or np.max(band[peaks]) < 0.5:
            continue  # unvoiced frame
        # octave-error suppression: shortest lag whose peak is near the max
        best = np.max(band[peaks])
        lag = _F0_LAG_MIN + int(peaks[band[peaks] >= 0.85 * best][0])
        # parabolic refinement around the integer-lag peak
        if 1 <= lag < len(r) - 1:
            a, b, c = r[lag - 1], r[lag], r[lag + 1]
            denom = a - 2.0 * b + c
            if denom < 0.0:
                lag = lag + 0.5 * (a - c) / denom
        f0s.append(PIPELINE_RATE / lag)
    if not f0s:
        raise NoF0Error(f"clip {clip.id!r}: no F0 (no voiced frames detected)")
    return float(np.median(f0s))


def pitch_shift(clip: AudioClip, target_f0_hz: float) -> AudioClip:
    """Shift the whole token's median F0 to the target without changing its
    duration: rational resampling (shifts pitch, shrinks/stretches time)
    followed by WSOLA back to the original length."""
    require_pipeline_rate(clip)
    if not PITCH_MIN_HZ <= target_f0_hz <= PITCH_MAX_HZ:
        raise DataError(f"target F0 {target_f0_hz} Hz outside "
                        f"[{PITCH_MIN_HZ}, {PITCH_MAX_HZ}]")
    f0 = estimate_f0(clip)
    beta = target_f0_hz / f0
    frac = Fraction(1.0 / beta).limit_denominator(1000)
    if frac == 1:
        return clip
    resampled = signal.resample_poly(clip.samples, frac.numerator, frac.denominator)
    restored = timescale(resampled, len(clip.samples) / len(resampled))
    return clip.with_samples(restored)


def apply_fir(clip: AudioClip, kind: str, cutoff_hz: float,
              attenuation_db: float) -> AudioClip:
    """Shelving coloration: unity passband, a flat shelf attenuation_db down
    beyond the cutoff, realized as an order-200 linear-phase FIR designed by
    frequency sampling with a doubled point at the cutoff. The filter's group
    delay is compensated, so a 0 dB shelf returns the input unchanged."""
    require_pipeline_rate(clip)
    nyq = clip.sample_rate / 2.0
    if kind == "lowpass":
        lo_hz, hi_hz = LOWPASS_CUTOFFS_HZ
    elif kind == "highpass":
        lo_hz, hi_hz = HIGHPASS_CUTOFFS_HZ
    else:
        raise DataError(f"apply_fir: unknown kind {kind!r}")
    if not lo_hz <= cutoff_hz <= hi_hz:
        raise DataError(f"{kind} cutoff {cutoff_hz} Hz outside [{lo_hz}, {hi_hz}]")
    if not 0.0 <= attenuation_db <= ATTENUATION_MAX_DB:
        raise DataError(f"attenuation {attenuation_db} dB outside "
                        f"[0, {ATTENUATION_MAX_DB}]")

    g = 10.0 ** (-attenuation_db / 20.0)
    c = cutoff_hz / nyq
    if c >= 1.0:  # shelf entirely above Nyquist: nothing to attenuate
        freqs, gains = [0.0, 1.0], [1.0, 1.0]
    elif kind == "lowpass":
        freqs, gains = [0.0, c, c, 1.0], [1.0, 1.0, g, g]
    else:
        freqs, gains = [0.0, c, c, 1.0], [g, g, 1.0, 1.0]
    taps = signal.firwin2(FIR_TAPS, freqs, gains)
    delay = (FIR_TAPS - 1) // 2
    filtered = signal.fftconvolve(clip.samples, taps, mode="full")
    return clip.with_samples(filtered[delay:delay + len(clip.samples)])


# --- grids (Table-like parameter lattices) -------------------------------

def duration_grid(family: str) -> np.ndarray:
    """Ratio lattice including the identity at step 0."""
    if family == "extend":
        n = int(np.floor((EXTEND_MAX - 1.0) / EXTEND_STEP)) + 1
        return np.round(1.0 + EXTEND_STEP * np.arange(n), 9)
    if family == "compress":
        n = int(np.floor((1.0 - COMPRESS_MIN) / COMPRESS_STEP + 1e-9)) + 1
        return np.round(1.0 - COMPRESS_STEP * np.arange(n), 9)
    raise GridError(f"no duration grid for family {family!r}")


def pitch_grid(family: str, base_f0_hz: float) -> np.ndarray:
    """Integer-Hz targets in 1 Hz steps away from the token's own F0,
    excluding the identity target."""
    base = int(round(base_f0_hz))
    if not PITCH_MIN_HZ < base < PITCH_MAX_HZ:
        raise GridError(f"base F0 {base_f0_hz:.1f} Hz leaves no room on the "
                        f"[{PITCH_MIN_HZ}, {PITCH_MAX_HZ}] Hz grid")
    if family == "pitch_up":
        return np.arange(base + 1, PITCH_MAX_HZ + 1, dtype=np.float64)
    if family == "pitch_down":
        return np.arange(base - 1, PITCH_MIN_HZ - 1, -1, dtype=np.float64)
    raise GridError(f"no pitch grid for family {family!r}")


def _cutoff_severity(family: str, cutoff_hz: float) -> float:
    """How much of the band the shelf reaches, 0 = touches nothing, 1 = the
    family's harshest cutoff. Log-scaled to match the log-spaced grid."""
    if family == "lowpass":
        lo, hi = LOWPASS_CUTOFFS_HZ
        return float(np.log(hi / cutoff_hz) / np.log(hi / lo))
    return cutoff_hz / HIGHPASS_CUTOFFS_HZ[1]


def filter_grid(family: str) -> list:
    """(cutoff_hz, attenuation_db, severity) lattice: cutoffs from mildest to
    most intrusive, each with attenuations 0.6..12 dB. A lowpass cutoff at
    Nyquist colors nothing and is omitted."""
    if family == "lowpass":
        cutoffs = np.geomspace(LOWPASS_CUTOFFS_HZ[0], LOWPASS_CUTOFFS_HZ[1],
                               N_CUTOFFS)[::-1]  # 8 kHz mildest -> 1 kHz harshest
    elif family == "highpass":
        cutoffs = np.geomspace(HIGHPASS_CUTOFFS_HZ[0], HIGHPASS_CUTOFFS_HZ[1],
                               N_CUTOFFS)  # 200 Hz mildest -> 3 kHz harshest
    else:
        raise GridError(f"no filter grid for family {family!r}")
    attens = np.linspace(ATTENUATION_MIN_DB, ATTENUATION_MAX_DB, N_ATTENUATIONS)
    grid = []
    for c in cutoffs:
        if family == "lowpass" and c >= PIPELINE_RATE / 2.0:
            continue
        for a in attens:
            severity = _cutoff_severity(family, c) * (a / ATTENUATION_MAX_DB)
            grid.append((float(c), float(a), severity))
    return grid


@dataclass(frozen=True)
class DistortionSpec:
    """One point on a distortion family's parameter lattice."""

    family: str
    param: float | tuple
    step_index: int

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise GridError(f"unknown distortion family {self.family!r}")
        if self.step_index < 0:
            raise GridError("step_index must be non-negative")
        p = self.param
        if self.family == "extend" and not 1.0 <= p <= EXTEND_MAX:
            raise GridError(f"extend ratio {p} off grid")
        if self.family == "compress" and not COMPRESS_MIN <= p <= 1.0:
            raise GridError(f"compress ratio {p} off grid")
        if self.family in ("pitch_up", "pitch_down"):
            if not (PITCH_MIN_HZ <= p <= PITCH_MAX_HZ and float(p).is_integer()):
                raise GridError(f"pitch target {p} off grid")
        if self.family in ("lowpass", "highpass"):
            cutoff, atten = p
            lo, hi = (LOWPASS_CUTOFFS_HZ if self.family == "lowpass"
                      else HIGHPASS_CUTOFFS_HZ)
            if not lo <= cutoff <= hi:
                raise GridError(f"{self.family} cutoff {cutoff} off grid")
            if not ATTENUATION_MIN_DB <= atten <= ATTENUATION_MAX_DB:
                raise GridError(f"attenuation {atten} off grid")


@dataclass(frozen=True)
class ContinuumEntry:
    clip: AudioClip
    spec: DistortionSpec
    label_snr90: float
    position: float

    def __post_init__(self):
        if not 0.0 <= self.position <= 1.0 + 1e-12:
            raise DataError(f"continuum position {self.position} outside [0, 1]")


@dataclass(frozen=True)
class ContinuumGate:
    """Validity of one (token, family) continuum, from the measured threshold
    of its most distorted member."""

    most_distorted_snr90: float
    valid: bool = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "valid",
                           self.most_distorted_snr90 <= GATE_LIMIT_DB)


def _interp_label(seed_snr90: float, most_distorted_snr90: float,
                  position: float) -> float:
    return (1.0 - position) * seed_snr90 + position * most_distorted_snr90


def build_continuum(clip: AudioClip, label: TokenLabel, family: str,
                    most_distorted_snr90: float) -> list | None:
    """All grid steps of one distortion family applied to a seed token, with
    interpolated labels; None when the 6 dB gate excludes the continuum."""
    if not ContinuumGate(most_distorted_snr90).valid:
        return None

    entries = []

    def emit(out_clip, spec, position):
        entries.append(ContinuumEntry(
            clip=out_clip, spec=spec, position=float(position),
            label_snr90=_interp_label(label.snr90, most_distorted_snr90,
                                      position)))

    if family in ("extend", "compress"):
        ratios = duration_grid(family)
        span = abs(ratios[-1] - 1.0)
        for k, ratio in enumerate(ratios):
            out = stretch_consonant(clip, ratio=float(ratio))
            emit(out, DistortionSpec(family, float(ratio), k),
                 abs(ratio - 1.0) / span)
    elif family in ("pitch_up", "pitch_down"):
        base = int(round(estimate_f0(clip)))
        targets = pitch_grid(family, base)
        span = abs(targets[-1] - base)
        for k, t in enumerate(targets):
            out = pitch_shift(clip, float(t))
            emit(out, DistortionSpec(family, float(t), k),
                 abs(t - base) / span)
    elif family in ("lowpass", "highpass"):
        for k, (cutoff, atten, severity) in enumerate(filter_grid(family)):
            out = apply_fir(clip, family, cutoff, atten)
            emit(out, DistortionSpec(family, (cutoff, atten), k), severity)
    else:
        raise GridError(f"unknown distortion family {family!r}")
    return entries


def save_gates(gates: dict, path) -> None:
    """Gate file: JSON array of {token_id, family, most_distorted_snr90_db}."""
    rows = [{"token_id": tid, "family": fam, "most_distorted_snr90_db": v}
            for (tid, fam), v in sorted(gates.items())]
    Path(path).write_text(json.dumps(rows, indent=2) + "\n")


def load_gates(path) -> dict:
    rows = json.loads(Path(path).read_text())
    gates = {}
    for row in rows:
        gates[(row["token_id"], row["family"])] = float(
            row["most_distorted_snr90_db"])
    return gates


def augment_corpus(seeds, gates: dict, out_dir,
                   families=FAMILIES) -> list[dict]:
    """Expand labeled seed tokens into every valid continuum, write the clips,
    and return manifest rows with provenance.

    seeds: iterable of (AudioClip, TokenLabel). gates: mapping from
    (token_id, family) to the measured most-distorted SNR90; missing gates
    exclude that continuum. Identity grid steps (position 0) are dropped as
    duplicates of the seed row.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = []
    annotations = []

    def write_row(out_clip, token_id, family, step_index, position, snr90,
                  label):
        stem = f"{token_id}__{family}__{step_index:04d}"
        write_wav(out_clip, out_dir / f"{stem}.wav")
        if out_clip.annotation is not None:
            annotations.append(replace(out_clip.annotation, token_id=stem))
        manifest.append({
            "path": f"{stem}.wav", "seed_token_id": token_id, "family": family,
            "step_index": step_index, "position": round(position, 9),
            "label_snr90_db": snr90, "talker": label.talker,
            "consonant": label.consonant,
        })

    for clip, label in seeds:
        token_id = clip.annotation.token_id if clip.annotation else clip.id
        write_row(clip, token_id, "seed", 0, 0.0, label.snr90, label)
        for family in families:
            if (token_id, family) not in gates:
                continue
            entries = build_continuum(clip, label, family,
                                      gates[(token_id, family)])
            if entries is None:
                continue
            for entry in entries:
                if entry.position == 0.0:
                    continue  # identity step duplicates the seed row
                write_row(entry.clip, token_id, family, entry.spec.step_index,
                          entry.position, entry.label_snr90, label)

    save_annotations(annotations, out_dir / "annotations.json")
    return manifest
