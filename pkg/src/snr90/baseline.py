"""ASR-defined SNR90 baseline: mix a token at each ladder SNR, ask a
speech-to-text backend for a transcript, and take the lowest SNR whose
transcript contains a word with the target consonant followed by a non-high
vowel. Includes bias/variance against human thresholds and a deterministic
mock backend for tests.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import AudioClip, save_jsonl, load_jsonl
from .errors import DataError
from .noise import DEFAULT_SNR_LADDER, SnrLadder, measure_snr, mix_at_snr
from .seeding import rng_for

log = logging.getLogger(__name__)

ARPABET_VOWELS = frozenset(
    "AA AE AH AO AW AY EH ER EY IH IY OW OY UH UW".split())
HIGH_VOWELS = frozenset("IY IH UW UH".split())
CONSONANT_PHONE = {"p": "P", "t": "T", "k": "K", "b": "B", "d": "D", "g": "G"}

# Small built-in pronunciation table (word -> ARPAbet phones) big enough to
# exercise the matcher; real runs load a full lexicon file.
DEFAULT_LEXICON = {
    "pot": ("P", "AA1", "T"), "pop": ("P", "AA1", "P"),
    "pea": ("P", "IY1",), "top": ("T", "AA1", "P"),
    "tot": ("T", "AA1", "T"), "tea": ("T", "IY1"),
    "cot": ("K", "AA1", "T"), "car": ("K", "AA1", "R"),
    "key": ("K", "IY1"), "coo": ("K", "UW1"),
    "bot": ("B", "AA1", "T"), "bar": ("B", "AA1", "R"),
    "bee": ("B", "IY1"), "dot": ("D", "AA1", "T"),
    "dock": ("D", "AA1", "K"), "dew": ("D", "UW1"),
    "got": ("G", "AA1", "T"), "god": ("G", "AA1", "D"),
    "goo": ("G", "UW1"),
}


def load_lexicon(path) -> dict:
    """Plain-text lexicon: one `word PH1 PH2 ...` entry per line; blank lines
    and `#` comments ignored."""
    lexicon = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) < 2:
            raise DataError(f"{path}:{lineno}: lexicon line needs a word and "
                            f"at least one phone: {line!r}")
        lexicon[parts[0].lower()] = tuple(parts[1:])
    return lexicon


def save_lexicon(lexicon: dict, path) -> None:
    with open(path, "w") as fh:
        for word in sorted(lexicon):
            fh.write(f"{word} {' '.join(lexicon[word])}\n")


def _strip_stress(phone: str) -> str:
    return phone.rstrip("0123456789")


def transcript_matches(transcript: str, consonant: str, lexicon: dict) -> bool:
    """True iff some transcript word's pronunciation has the target consonant
    immediately followed by a non-high vowel. Empty transcripts and
    out-of-lexicon words count as failures."""
    target = CONSONANT_PHONE[consonant]
    for word in transcript.lower().split():
        phones = lexicon.get(word)
        if phones is None:
            log.warning("word %r not in lexicon; counted as non-match", word)
            continue
        bare = [_strip_stress(p) for p in phones]
        for a, b in zip(bare, bare[1:]):
            if a == target and b in ARPABET_VOWELS and b not in HIGH_VOWELS:
                return True
    return False


def asr_snr90(clip: AudioClip, consonant: str, noise: AudioClip, backend,
              lexicon: dict | None = None,
              ladder: SnrLadder = DEFAULT_SNR_LADDER) -> float | None:
    """Lowest ladder SNR at which the backend's transcript contains the
    target CV; None when no ladder level is recognized."""
    if lexicon is None:
        lexicon = DEFAULT_LEXICON
    for snr in ladder.levels_db:
        mixture = mix_at_snr(clip, noise, snr)
        if transcript_matches(backend.transcribe(mixture), consonant, lexicon):
            return snr
    return None


@dataclass(frozen=True)
class BaselineResult:
    token_id: str
    asr_snr90: float | None
    human_snr90: float
    consonant: str


def bias_variance(results, consonant: str) -> dict:
    """Mean and population variance of (ASR - human) threshold differences
    for one consonant; not-reached entries are excluded with a warning."""
    diffs = []
    for r in results:
        if r.consonant != consonant:
            continue
        if r.asr_snr90 is None:
            log.warning("token %r: ASR never recognized the CV; excluded "
                        "from bias/variance", r.token_id)
            continue
        diffs.append(r.asr_snr90 - r.human_snr90)
    if len(diffs) < 2:
        raise DataError(f"bias_variance: need >=2 usable results for "
                        f"consonant {consonant!r}, got {len(diffs)}")
    diffs = np.asarray(diffs)
    return {"bias": float(np.mean(diffs)),
            "variance": float(np.var(diffs)),
            "n": len(diffs)}


def save_results(results, path) -> None:
    save_jsonl(({"token_id": r.token_id, "asr_snr90_db": r.asr_snr90,
                 "human_snr90_db": r.human_snr90, "consonant": r.consonant}
                for r in results), path)


def load_results(path) -> list:
    return [BaselineResult(token_id=o["token_id"],
                           asr_snr90=o["asr_snr90_db"],
                           human_snr90=float(o["human_snr90_db"]),
                           consonant=o["consonant"])
            for o in load_jsonl(path)]


@dataclass(frozen=True)
class MockAsrBackend:
    """Offline stand-in for a cloud recognizer, for tests and dry runs.

    Holds the clean reference clip, recovers the mixture's actual SNR, and
    succeeds per a step (slope=inf) or logistic success model. Success emits
    `success_word`; failure emits an empty transcript. Deterministic: the
    logistic coin is seeded from (seed, audio bytes).
    """

    clean: AudioClip
    threshold_db: float
    success_word: str = "pot"
    slope: float = math.inf
    seed: int = 0

    def transcribe(self, clip: AudioClip) -> str:
        snr = measure_snr(clip, self.clean)
        if math.isinf(self.slope):
            success = snr >= self.threshold_db
        else:
            p = 1.0 / (1.0 + math.exp(-self.slope * (snr - self.threshold_db)))
            digest = hashlib.sha256(clip.samples.tobytes()).hexdigest()
            success = rng_for(self.seed, digest).random() < p
        return self.success_word if success else ""


SUCCESS_WORDS = {"p": "pot", "t": "top", "k": "cot",
                 "b": "bot", "d": "dot", "g": "got"}
