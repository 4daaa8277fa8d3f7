"""Log-magnitude STFT features over the annotated CV interval.

One frame per 400-sample Hamming window (25 ms at 16 kHz) with a 100-sample
hop (75% overlap), zero-padded to a 640-point transform, keeping the 320
one-sided bins below Nyquist. Entries are natural logs of magnitude with a
1e-10 floor, and no normalization of any kind.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .audio import AudioClip, PIPELINE_RATE, SegmentAnnotation, require_pipeline_rate
from .errors import AnnotationError, DataError

WINDOW_SAMPLES = 400
HOP_SAMPLES = 100
FFT_SIZE = 640
N_BINS = 320
LOG_FLOOR = 1e-10
FRAME_HOP_S = HOP_SAMPLES / PIPELINE_RATE


@dataclass(frozen=True)
class FeatureMatrix:
    """frames: T x 320 log magnitudes; one row per analysis window."""

    frames: np.ndarray
    token_id: str = ""
    frame_hop_s: float = FRAME_HOP_S

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        if frames.ndim != 2 or frames.shape[0] < 1 or frames.shape[1] != N_BINS:
            raise DataError(f"feature matrix must be T x {N_BINS}, got {frames.shape}")
        if not np.all(np.isfinite(frames)):
            raise DataError("feature matrix entries must be finite")
        object.__setattr__(self, "frames", frames)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def frame_count(interval_samples: int) -> int:
    return 1 + (interval_samples - WINDOW_SAMPLES) // HOP_SAMPLES


def extract_features(clip: AudioClip,
                     annotation: SegmentAnnotation | None = None) -> FeatureMatrix:
    """STFT features over the clip's annotated consonant-to-vowel interval."""
    require_pipeline_rate(clip)
    if annotation is None:
        annotation = clip.annotation
    if annotation is None:
        raise AnnotationError(f"clip {clip.id!r}: no annotation for feature interval")
    i0 = clip.sample_index(annotation.consonant_start)
    i1 = clip.sample_index(annotation.vowel_onset_end)
    segment = clip.samples[i0:i1]
    if len(segment) < WINDOW_SAMPLES:
        raise DataError(
            f"clip {clip.id!r}: interval {len(segment)} samples is shorter "
            f"than one {WINDOW_SAMPLES}-sample analysis window")

    n_frames = frame_count(len(segment))
    starts = np.arange(n_frames) * HOP_SAMPLES
    windows = segment[starts[:, None] + np.arange(WINDOW_SAMPLES)] * np.hamming(WINDOW_SAMPLES)
    spectra = np.fft.rfft(windows, n=FFT_SIZE, axis=1)
    magnitude = np.abs(spectra[:, :N_BINS])
    return FeatureMatrix(frames=np.log(np.maximum(magnitude, LOG_FLOOR)),
                         token_id=clip.id)


def save_features(fm: FeatureMatrix, path) -> None:
    """Cache format: one JSON header line, then row-major float32 payload."""
    header = json.dumps({"token_id": fm.token_id, "n_frames": fm.n_frames,
                         "n_bins": N_BINS, "frame_hop_s": fm.frame_hop_s})
    with open(path, "wb") as fh:
        fh.write(header.encode() + b"\n")
        fh.write(fm.frames.astype(np.float32).tobytes())


def load_features(path) -> FeatureMatrix:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        payload = np.frombuffer(fh.read(), dtype=np.float32)
    shape = (header["n_frames"], header["n_bins"])
    if payload.size != shape[0] * shape[1]:
        raise DataError(f"{path}: payload size {payload.size} does not match header {shape}")
    return FeatureMatrix(frames=payload.reshape(shape).astype(np.float64),
                         token_id=header["token_id"],
                         frame_hop_s=header["frame_hop_s"])
