"""Adaptive two-down-one-up listening sessions against simulated listeners,
response aggregation, and SNR90 extraction from average response curves.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

from .errors import DataError, NoThresholdError
from .noise import DEFAULT_SNR_LADDER, SnrLadder
from .seeding import rng_for

CHANCE_14AFC = 1.0 / 14.0  # forced choice among 14 response alternatives
TARGET_P = 0.90
MAX_TRIALS = 200
REQUIRED_ALTERNATIONS = 3


@dataclass(frozen=True)
class SimulatedListener:
    """Listener with a logistic psychometric function from chance to 1-lapse.

    slope may be math.inf for a deterministic step listener.
    """

    threshold_db: float
    slope: float
    lapse_rate: float = 0.02
    chance_level: float = CHANCE_14AFC
    seed: int = 0

    def __post_init__(self):
        if not self.slope > 0:
            raise DataError("listener slope must be positive")
        if not 0.0 <= self.lapse_rate <= 0.1:
            raise DataError("listener lapse_rate must be in [0, 0.1]")
        if not 0.0 <= self.chance_level < 1.0:
            raise DataError("listener chance_level must be in [0, 1)")

    def p_correct(self, snr_db: float) -> float:
        top = 1.0 - self.lapse_rate
        if math.isinf(self.slope):
            return top if snr_db >= self.threshold_db else self.chance_level
        sig = 1.0 / (1.0 + math.exp(-self.slope * (snr_db - self.threshold_db)))
        return self.chance_level + (top - self.chance_level) * sig

    @classmethod
    def step(cls, threshold_db: float, seed: int = 0) -> "SimulatedListener":
        """Deterministic listener: always correct at/above threshold, never below."""
        return cls(threshold_db=threshold_db, slope=math.inf,
                   lapse_rate=0.0, chance_level=0.0, seed=seed)


def percent_point(listener: SimulatedListener, p: float = TARGET_P) -> float:
    """SNR where the listener's psychometric function crosses p, analytically."""
    top = 1.0 - listener.lapse_rate
    q = (p - listener.chance_level) / (top - listener.chance_level)
    if not 0.0 < q < 1.0:
        raise NoThresholdError(f"psychometric function never reaches {p}")
    if math.isinf(listener.slope):
        return listener.threshold_db
    return listener.threshold_db + math.log(q / (1.0 - q)) / listener.slope


@dataclass(frozen=True)
class TrialRecord:
    subject_id: str
    token_id: str
    snr_db: float
    correct: bool
    presentation_index: int


@dataclass(frozen=True)
class ResponseCurve:
    """Average over subjects of per-subject accuracy, one point per visited SNR.

    n_subjects counts the subjects contributing at each SNR (subjects with no
    trials at an SNR are excluded from that point's mean).
    """

    snr_db: tuple
    p_correct: tuple
    n_subjects: tuple

    def __post_init__(self):
        if not (len(self.snr_db) == len(self.p_correct) == len(self.n_subjects)):
            raise DataError("response curve fields must have equal length")
        if any(b <= a for a, b in zip(self.snr_db, self.snr_db[1:])):
            raise DataError("response curve SNRs must be strictly increasing")
        if any(not 0.0 <= p <= 1.0 for p in self.p_correct):
            raise DataError("response curve probabilities must lie in [0, 1]")

    def to_json(self) -> str:
        return json.dumps({"snr_db": list(self.snr_db),
                           "p_correct": list(self.p_correct),
                           "n_subjects": list(self.n_subjects)})

    @classmethod
    def from_json(cls, text: str) -> "ResponseCurve":
        obj = json.loads(text)
        return cls(snr_db=tuple(obj["snr_db"]),
                   p_correct=tuple(obj["p_correct"]),
                   n_subjects=tuple(obj["n_subjects"]))


@dataclass(frozen=True)
class Snr90Estimate:
    snr90_db: float
    floored: bool = False


def _has_alternation_loop(indices: list, n_levels: int,
                          required: int = REQUIRED_ALTERNATIONS) -> bool:
    """True when the presentation history ends in >= `required` full A-B-A
    cycles between two adjacent ladder indices (other levels interleaved by
    the step rule are ignored; a repeat of A or B breaks the run)."""
    need = 2 * required + 1
    last = indices[-1]
    for a in (last - 1, last):
        b = a + 1
        if a < 0 or b >= n_levels:
            continue
        filtered = [i for i in indices if i == a or i == b]
        run = 1
        for k in range(len(filtered) - 1, 0, -1):
            if filtered[k] == filtered[k - 1]:
                break
            run += 1
        if run >= need:
            return True
    return False


def staircase_session(listener: SimulatedListener,
                      ladder: SnrLadder = DEFAULT_SNR_LADDER,
                      start_level: int | None = None,
                      *,
                      subject_id: str = "s0",
                      token_id: str = "tok",
                      max_trials: int = MAX_TRIALS) -> list:
    """One adaptive session: drop two ladder indices after a correct response,
    rise one after an error, clamped at the ladder ends.

    Stops once presentations have looped between two adjacent levels at least
    three full times, or at the hard trial cap. Deterministic given the
    listener seed, subject_id and token_id.
    """
    if start_level is None:
        start_level = len(ladder) - 1
    if not 0 <= start_level < len(ladder):
        raise DataError(f"start_level {start_level} outside ladder")
    rng = rng_for(listener.seed, subject_id, token_id)

    trials = []
    visited = []
    index = start_level
    for t in range(max_trials):
        snr = ladder[index]
        correct = bool(rng.random() < listener.p_correct(snr))
        trials.append(TrialRecord(subject_id=subject_id, token_id=token_id,
                                  snr_db=snr, correct=correct,
                                  presentation_index=t))
        visited.append(index)
        if _has_alternation_loop(visited, len(ladder)):
            break
        index = max(0, index - 2) if correct else min(len(ladder) - 1, index + 1)
    return trials


def subject_accuracy(trials, subject_id: str, snr_db: float) -> float | None:
    """Fraction correct for one subject at one SNR; None when untested there."""
    hits = total = 0
    for tr in trials:
        if tr.subject_id == subject_id and tr.snr_db == snr_db:
            total += 1
            hits += tr.correct
    if total == 0:
        return None
    return hits / total


def average_curve(trials) -> ResponseCurve:
    """Unweighted mean over subjects of per-subject accuracy at each SNR."""
    trials = list(trials)
    if not trials:
        raise DataError("average_curve: no trials")
    subjects = sorted({tr.subject_id for tr in trials})
    snrs = sorted({tr.snr_db for tr in trials})

    points, means, counts = [], [], []
    for snr in snrs:
        accs = [a for s in subjects
                if (a := subject_accuracy(trials, s, snr)) is not None]
        if accs:
            points.append(snr)
            means.append(sum(accs) / len(accs))
            counts.append(len(accs))
    return ResponseCurve(snr_db=tuple(points), p_correct=tuple(means),
                         n_subjects=tuple(counts))


def snr90_from_curve(curve: ResponseCurve, target: float = TARGET_P) -> Snr90Estimate:
    """SNR where the line from the lowest above-target point to the next lower
    curve point crosses the target probability."""
    snr = curve.snr_db
    p = curve.p_correct
    for i in range(len(snr)):
        if p[i] >= target:
            if i == 0:
                return Snr90Estimate(snr90_db=snr[0], floored=True)
            if p[i] == target:  # crossing sits on a grid point
                return Snr90Estimate(snr90_db=float(snr[i]))
            x = snr[i - 1] + (target - p[i - 1]) * (snr[i] - snr[i - 1]) / (p[i] - p[i - 1])
            return Snr90Estimate(snr90_db=float(x))
    raise NoThresholdError("no threshold: curve never reaches target")


def measure_snr90(token_id: str, listeners,
                  ladder: SnrLadder = DEFAULT_SNR_LADDER):
    """Full simulated experiment on one token: one staircase per listener,
    subject-averaged pooling, interpolated threshold.

    Returns (Snr90Estimate, ResponseCurve, trials).
    """
    listeners = list(listeners)
    if not listeners:
        raise DataError("measure_snr90: no listeners")
    trials = []
    for k, listener in enumerate(listeners):
        trials.extend(staircase_session(listener, ladder,
                                        subject_id=f"s{k:03d}",
                                        token_id=token_id))
    curve = average_curve(trials)
    return snr90_from_curve(curve), curve, trials


def save_trials(trials, path) -> None:
    from .audio import save_jsonl
    save_jsonl(({"subject_id": t.subject_id, "token_id": t.token_id,
                 "snr_db": t.snr_db, "correct": t.correct,
                 "presentation_index": t.presentation_index} for t in trials),
               path)


def load_trials(path) -> list:
    from .audio import load_jsonl
    return [TrialRecord(subject_id=o["subject_id"], token_id=o["token_id"],
                        snr_db=float(o["snr_db"]), correct=bool(o["correct"]),
                        presentation_index=int(o["presentation_index"]))
            for o in load_jsonl(path)]
