"""Audio containers, WAV I/O, segment annotations and level utilities.

Canonical interchange format is mono 16 kHz PCM16; IEEE float32 is accepted
on read. Clips are treated as immutable after construction and are safe to
share across threads.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from .errors import AnnotationError, AudioFormatError, DataError

log = logging.getLogger(__name__)

PIPELINE_RATE = 16000
PCM16_FULL_SCALE = 32768.0

STOP_CONSONANTS = ("p", "t", "k", "b", "d", "g")


@dataclass(frozen=True)
class SegmentAnnotation:
    """Manually segmented CV interval: consonant start to end of vowel onset."""

    consonant_start: float
    vowel_onset_end: float
    token_id: str = ""

    def __post_init__(self):
        if not 0.0 <= self.consonant_start < self.vowel_onset_end:
            raise AnnotationError(
                f"bad segment [{self.consonant_start}, {self.vowel_onset_end}] "
                f"for token {self.token_id!r}"
            )

    @property
    def duration(self) -> float:
        return self.vowel_onset_end - self.consonant_start


@dataclass(frozen=True)
class AudioClip:
    """Mono PCM samples in nominal [-1, 1] plus sample rate and token id."""

    samples: np.ndarray
    sample_rate: int
    id: str = ""
    annotation: SegmentAnnotation | None = None

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise DataError(f"clip {self.id!r}: samples must be non-empty 1-D")
        if self.sample_rate <= 0:
            raise DataError(f"clip {self.id!r}: sample_rate must be positive")
        object.__setattr__(self, "samples", samples)
        if self.annotation is not None and self.annotation.vowel_onset_end > self.duration + 1e-9:
            raise AnnotationError(
                f"clip {self.id!r}: annotation extends past clip end "
                f"({self.annotation.vowel_onset_end:.4f}s > {self.duration:.4f}s)"
            )

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def sample_index(self, t: float) -> int:
        return int(round(t * self.sample_rate))

    def with_samples(self, samples, id: str | None = None,
                     annotation: SegmentAnnotation | None = None) -> "AudioClip":
        return AudioClip(
            samples=np.asarray(samples, dtype=np.float64),
            sample_rate=self.sample_rate,
            id=self.id if id is None else id,
            annotation=self.annotation if annotation is None else annotation,
        )

    def with_annotation(self, annotation: SegmentAnnotation | None) -> "AudioClip":
        return replace(self, annotation=annotation)


@dataclass(frozen=True)
class TokenLabel:
    """Identity and measured threshold of one CV token."""

    talker: str
    consonant: str
    snr90: float
    vowel: str = "aa"

    def __post_init__(self):
        if self.consonant not in STOP_CONSONANTS:
            raise DataError(f"consonant must be one of {STOP_CONSONANTS}, got {self.consonant!r}")


def require_pipeline_rate(clip: AudioClip) -> None:
    """Pipeline stages only accept 16 kHz material."""
    if clip.sample_rate != PIPELINE_RATE:
        raise DataError(
            f"clip {clip.id!r}: sample rate {clip.sample_rate} Hz unsupported, "
            f"pipeline requires {PIPELINE_RATE} Hz"
        )


def read_wav(path) -> AudioClip:
    """Read a mono PCM16 or IEEE float32 WAV into a normalized AudioClip.

    PCM16 samples are scaled by 1/32768 so full scale maps just inside [-1, 1).
    """
    path = Path(path)
    try:
        rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise AudioFormatError(f"{path}: malformed or unsupported WAV ({exc})") from exc
    if data.ndim != 1:
        raise AudioFormatError(f"{path}: unsupported channel count ({data.shape[1]})")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / PCM16_FULL_SCALE
    elif data.dtype == np.float32 or data.dtype == np.float64:
        samples = data.astype(np.float64)
    else:
        raise AudioFormatError(f"{path}: unsupported sample encoding {data.dtype}")
    return AudioClip(samples=samples, sample_rate=int(rate), id=path.stem)


def write_wav(clip: AudioClip, path) -> None:
    """Write a clip as mono PCM16. Values outside [-1, 1] are clamped with a warning."""
    path = Path(path)
    x = clip.samples
    peak = float(np.max(np.abs(x))) if x.size else 0.0
    if peak > 1.0:
        log.warning("clip %r: peak %.3f exceeds full scale, clamping on write", clip.id, peak)
    q = np.clip(np.round(x * PCM16_FULL_SCALE), -32768, 32767).astype(np.int16)
    wavfile.write(path, clip.sample_rate, q)


def rms(clip: AudioClip, interval: tuple[float, float] | None = None) -> float:
    """Root-mean-square amplitude over the whole clip or a [t0, t1] interval in seconds."""
    if interval is None:
        seg = clip.samples
    else:
        t0, t1 = interval
        if not (0.0 <= t0 < t1 <= clip.duration + 1e-9):
            raise DataError(f"clip {clip.id!r}: interval [{t0}, {t1}] outside clip")
        seg = clip.samples[clip.sample_index(t0):clip.sample_index(t1)]
        if seg.size == 0:
            raise DataError(f"clip {clip.id!r}: empty interval [{t0}, {t1}]")
    return float(np.sqrt(np.mean(np.square(seg))))


# ---------------------------------------------------------------------------
# Sidecar annotation files and corpus manifests

def save_annotations(annotations, path) -> None:
    """Write annotations as a JSON array of {token_id, consonant_start_s, vowel_onset_end_s}."""
    rows = [
        {
            "token_id": a.token_id,
            "consonant_start_s": a.consonant_start,
            "vowel_onset_end_s": a.vowel_onset_end,
        }
        for a in annotations
    ]
    Path(path).write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")


def load_annotations(path) -> dict[str, SegmentAnnotation]:
    """Load a sidecar annotation file, keyed by token_id."""
    try:
        rows = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise AnnotationError(f"{path}: not valid JSON ({exc})") from exc
    out: dict[str, SegmentAnnotation] = {}
    for row in rows:
        ann = SegmentAnnotation(
            consonant_start=float(row["consonant_start_s"]),
            vowel_onset_end=float(row["vowel_onset_end_s"]),
            token_id=str(row["token_id"]),
        )
        out[ann.token_id] = ann
    return out


def save_jsonl(rows, path) -> None:
    """Write dict rows as JSON lines (one object per line, keys sorted)."""
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def load_jsonl(path) -> list[dict]:
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: not valid JSON ({exc})") from exc
    return rows


def load_corpus_manifest(path) -> list[dict]:
    """Load a corpus manifest (JSON lines of {path, talker, consonant, snr90_db})."""
    rows = load_jsonl(path)
    for row in rows:
        missing = {"path", "talker", "consonant", "snr90_db"} - row.keys()
        if missing:
            raise DataError(f"{path}: manifest row missing fields {sorted(missing)}: {row}")
    return rows
