"""Release gate: ten end-to-end checks, one per core guarantee of the toolkit.

Each test is self-contained and prints one pass/fail line under pytest -v.
The synthetic-corpus learnability check (02) trains six regressors from
scratch and dominates the suite's runtime; everything else finishes in
seconds.  Tolerances are stated inline next to each assertion.
"""

from __future__ import annotations

import json
import time

import numpy as np
import pytest

import _synthetic
from test_cnn import (TINY, _tiny_batch, finite_difference_check, kink_margin,
                      nudge_off_kinks)

from snr90 import audio, augment, baseline, cli, cnn, noise
from snr90 import psychometrics as psy


RATE = audio.PIPELINE_RATE


def _speech_like(seed=0, dur=0.6):
    """Noise burst then a breathy harmonic stack, annotated like a CV token."""
    rng = np.random.default_rng(seed)
    n_c = int(0.15 * RATE)
    n_v = int((dur - 0.15) * RATE)
    t = np.arange(n_v) / RATE
    f0 = 110.0 + 35.0 * seed
    vowel = sum(np.sin(2 * np.pi * f0 * k * t) / k for k in range(1, 8))
    vowel = 0.2 * vowel / np.max(np.abs(vowel)) + 0.02 * rng.standard_normal(n_v)
    x = np.concatenate([0.05 * rng.standard_normal(n_c), vowel])
    return audio.AudioClip(
        samples=x, sample_rate=RATE, id=f"cv{seed}",
        annotation=audio.SegmentAnnotation(0.0, 0.4, f"cv{seed}"))


def _speech_shaped_profile():
    freqs = np.linspace(0.0, RATE / 2, 513)
    power = np.zeros(513)
    above = freqs > 500.0
    power[above] = -9.0 * np.log2(freqs[above] / 500.0)
    return noise.LtassProfile(freqs=freqs, power_db=power)


def _harmonic_clip(f0=200.0, dur=0.5, ann_end=0.15, id="tok", n_harm=7):
    t = np.arange(int(dur * RATE)) / RATE
    x = sum(np.sin(2 * np.pi * f0 * k * t + 0.3 * k) / k
            for k in range(1, n_harm + 1))
    x = 0.3 * x / np.max(np.abs(x))
    return audio.AudioClip(samples=x, sample_rate=RATE, id=id,
                           annotation=audio.SegmentAnnotation(0.0, ann_end, id))


def _mid_rms(x):
    n = len(x)
    return float(np.sqrt(np.mean(np.square(x[n // 4: 3 * n // 4]))))


def test_01_analytic_gradients_match_finite_differences():
    # every parameter of the small reference network, central differences,
    # relative error < 1e-3, under a minute
    t0 = time.perf_counter()
    model = cnn.init_model(TINY, seed=1)
    feats, labels = _tiny_batch()
    masks = cnn._draw_dropout_masks(TINY, len(feats), 0.5,
                                    np.random.default_rng(5))
    nudge_off_kinks(model, feats)
    assert kink_margin(model, feats) >= 0.1
    worst, n_checked = finite_difference_check(model, feats, labels, masks,
                                               stride=1)
    n_params = sum(v.size for v in model.weights.values())
    assert n_checked == n_params
    assert worst < 1e-3
    assert time.perf_counter() - t0 < 60.0


def test_02_regressor_learns_synthetic_band_energy_corpus():
    # 2000 tokens per consonant whose label is affine in one band-energy cue
    # (label noise <= 0.5 dB); talker-disjoint split, shipped hyperparameters;
    # test MSE < 2 dB^2 and < 30 min wall time per consonant
    outcomes = {}
    for consonant in "ptkbdg":
        t0 = time.perf_counter()
        corpus = _synthetic.make_corpus(consonant, 2000)
        split = cnn.split_by_talker(corpus, seed=0)
        config = cnn.tuned_config(consonant,
                                  max_epochs=_synthetic.MAX_EPOCHS[consonant],
                                  seed=0)
        model, _ = cnn.train(split, cnn.tuned_architecture(consonant), config,
                             consonant=consonant)
        mse = cnn.evaluate(model, split.test)["mse"]
        outcomes[consonant] = (mse, time.perf_counter() - t0)
    lines = [f"/{c}/ test MSE {m:.3f} dB^2 in {s:.0f} s"
             for c, (m, s) in outcomes.items()]
    assert all(m < 2.0 for m, _ in outcomes.values()), "; ".join(lines)
    assert all(s < 1800.0 for _, s in outcomes.values()), "; ".join(lines)


def test_03_threshold_interpolation_between_curve_points():
    curve = psy.ResponseCurve(snr_db=(-12.0, -6.0), p_correct=(0.50, 0.95),
                              n_subjects=(30, 30))
    est = psy.snr90_from_curve(curve)
    assert est.snr90_db == pytest.approx(-6.667, abs=1e-3)
    assert not est.floored
    on_grid = psy.ResponseCurve(snr_db=(-12.0, -6.0), p_correct=(0.50, 0.90),
                                n_subjects=(30, 30))
    assert psy.snr90_from_curve(on_grid).snr90_db == -6.0  # exact, no interp


def test_04_staircase_estimator_monte_carlo():
    # 100 cohorts of 30 logistic listeners (threshold -10 dB, slope 1 /dB,
    # lapse 0.02): mean absolute error of the pooled estimate < 3 dB, every
    # level trace follows the two-down-one-up index walk, every session ends
    analytic = psy.percent_point(
        psy.SimulatedListener(threshold_db=-10.0, slope=1.0, lapse_rate=0.02))
    ladder = noise.DEFAULT_SNR_LADDER
    n_levels = len(ladder)
    errors = []
    for cohort in range(100):
        listeners = [psy.SimulatedListener(threshold_db=-10.0, slope=1.0,
                                           lapse_rate=0.02,
                                           seed=1000 * cohort + k)
                     for k in range(30)]
        est, _, trials = psy.measure_snr90(f"c{cohort:03d}", listeners)
        errors.append(abs(est.snr90_db - analytic))
        by_subject = {}
        for tr in trials:
            by_subject.setdefault(tr.subject_id, []).append(tr)
        for session in by_subject.values():
            session.sort(key=lambda tr: tr.presentation_index)
            idx = [ladder.levels_db.index(tr.snr_db) for tr in session]
            assert idx[0] == n_levels - 1
            for k, tr in enumerate(session[:-1]):
                want = max(0, idx[k] - 2) if tr.correct else min(n_levels - 1,
                                                                 idx[k] + 1)
                assert idx[k + 1] == want
            assert len(session) <= psy.MAX_TRIALS
            if len(session) < psy.MAX_TRIALS:
                assert psy._has_alternation_loop(idx, n_levels)
    assert float(np.mean(errors)) < 3.0, f"mean |error| {np.mean(errors):.2f} dB"


def test_05_mixer_reproduces_every_ladder_snr():
    speech = _speech_like(0)
    swn = noise.synth_noise(_speech_shaped_profile(), duration_s=2.0, seed=1)
    for snr in noise.DEFAULT_SNR_LADDER.levels_db:
        mix = noise.mix_at_snr(speech, swn, snr)
        assert noise.measure_snr(mix, speech) == pytest.approx(snr, abs=0.1)


def test_06_synthesized_noise_tracks_profile_within_3db():
    prof = _speech_shaped_profile()
    swn = noise.synth_noise(prof, duration_s=30.0, seed=0)
    max_dev, centers, _ = noise.third_octave_deviation(prof, swn)
    assert centers[0] == pytest.approx(100.0)
    assert centers[-1] > 6000.0
    assert max_dev < 3.0, f"worst third-octave deviation {max_dev:.2f} dB"


def test_07_distortion_operators_hit_their_targets():
    # duration within one 6.25 ms synthesis hop; pitch within 2 % on pulse
    # trains; shelf attenuation within 0.5 dB at probe tones; identity
    # settings return the input to within 1e-6
    hop = int(0.00625 * RATE)
    x = np.random.default_rng(1).standard_normal(4800)
    for ratio in (0.5, 0.7, 1.003, 1.5, 2.0):
        assert abs(len(augment.timescale(x, ratio)) - ratio * len(x)) <= hop
    assert np.max(np.abs(augment.timescale(x, 1.0) - x)) <= 1e-6

    period = RATE // 125  # 125 Hz pulse train
    pulses = np.zeros(RATE // 2)
    pulses[::period] = 1.0
    clip = audio.AudioClip(samples=pulses, sample_rate=RATE, id="pulses")
    for target in (100.0, 160.0, 220.0):
        shifted = augment.pitch_shift(clip, target)
        got = augment.estimate_f0(shifted)
        assert abs(got - target) / target < 0.02

    tone = audio.AudioClip(samples=0.3 * np.sin(2 * np.pi * 200.0
                                                * np.arange(RATE // 2) / RATE),
                           sample_rate=RATE, id="tone200")
    same = augment.pitch_shift(tone, augment.estimate_f0(tone))
    assert np.max(np.abs(same.samples - tone.samples)) <= 1e-6

    def tone_clip(freq):
        t = np.arange(RATE // 2) / RATE
        return audio.AudioClip(samples=0.3 * np.sin(2 * np.pi * freq * t),
                               sample_rate=RATE, id=f"t{freq:.0f}")

    for kind, cutoff, atten, probes in (
            ("lowpass", 2000.0, 12.0, ((1000.0, 0.0), (4000.0, -12.0))),
            ("highpass", 1000.0, 6.0, ((250.0, -6.0), (3000.0, 0.0)))):
        for freq, want_db in probes:
            before = tone_clip(freq)
            after = augment.apply_fir(before, kind, cutoff, atten)
            got_db = 20.0 * np.log10(_mid_rms(after.samples)
                                     / _mid_rms(before.samples))
            assert got_db == pytest.approx(want_db, abs=0.5), (kind, freq)
        flat = augment.apply_fir(tone_clip(1000.0), kind, cutoff, 0.0)
        assert np.max(np.abs(flat.samples - tone_clip(1000.0).samples)) <= 1e-6


def test_08_continuum_labels_interpolate_and_gate(tmp_path):
    clip = _harmonic_clip(f0=150.0, dur=0.3, ann_end=0.2)
    label = audio.TokenLabel(talker="T0", consonant="t", snr90=-8.0)
    for family in augment.FAMILIES:
        entries = augment.build_continuum(clip, label, family, -2.0)
        assert entries is not None, family
        positions = np.array([e.position for e in entries])
        labels = np.array([e.label_snr90 for e in entries])
        assert positions.max() == 1.0
        # endpoint exactness: identity steps carry the seed label untouched,
        # the fully distorted step carries the gate measurement untouched
        assert all(labels[positions == 0.0] == -8.0)
        assert all(labels[positions == 1.0] == -2.0)
        expected = (1.0 - positions) * -8.0 + positions * -2.0
        assert np.array_equal(labels, expected), family
        order = np.argsort(positions)
        # non-decreasing along the continuum; the filter lattice scalarizes
        # (cutoff, attenuation) pairs to near-tied positions, so allow one
        # ulp of rounding in the affine label evaluation at those ties
        assert np.all(np.diff(labels[order]) >= -1e-9), family

    # the gate keeps continua at exactly +6 dB and drops anything above
    assert augment.build_continuum(clip, label, "compress", 6.0) is not None
    for family in augment.FAMILIES:
        too_high = float(np.nextafter(augment.GATE_LIMIT_DB, 7.0))
        assert augment.build_continuum(clip, label, family, too_high) is None

    gates = {("tok", "compress"): 6.0, ("tok", "extend"): 6.2}
    augment.save_gates(gates, tmp_path / "gates.json")
    manifest = augment.augment_corpus(
        [(clip, label)], augment.load_gates(tmp_path / "gates.json"),
        tmp_path / "out", families=("compress", "extend"))
    assert {row["family"] for row in manifest} == {"seed", "compress"}


def test_09_mock_asr_threshold_snaps_to_ladder():
    clip = _speech_like(0)
    swn = noise.synth_noise(_speech_shaped_profile(), duration_s=2.0, seed=1)
    ladder = noise.DEFAULT_SNR_LADDER
    rng = np.random.default_rng(7)
    for threshold in rng.uniform(-26.0, 26.0, size=50):
        backend = baseline.MockAsrBackend(
            clean=clip, threshold_db=float(threshold), slope=float("inf"),
            seed=0, success_word=baseline.SUCCESS_WORDS["t"])
        got = baseline.asr_snr90(clip, "t", swn, backend,
                                 baseline.DEFAULT_LEXICON, ladder)
        reachable = [l for l in ladder.levels_db if l >= threshold]
        assert got == (min(reachable) if reachable else None), threshold

    diffs = [2.0, -1.0, 2.5, 0.0]
    results = [baseline.BaselineResult(token_id=f"k{i}", asr_snr90=-6.0 + d,
                                       human_snr90=-6.0, consonant="k")
               for i, d in enumerate(diffs)]
    stats = baseline.bias_variance(results, "k")
    mean = sum(diffs) / len(diffs)
    var = sum((d - mean) ** 2 for d in diffs) / len(diffs)
    assert stats["n"] == len(diffs)
    assert stats["bias"] == pytest.approx(mean, abs=1e-12)
    assert stats["variance"] == pytest.approx(var, abs=1e-12)


def _run_pipeline(base, seed_clips, profile_path, gates_path, master_seed):
    """synthnoise -> augment -> featurize -> train -> eval, one output tree."""
    base.mkdir()
    corpus_rows = []
    for k, clip in enumerate(seed_clips):
        audio.write_wav(clip, base / f"{clip.id}.wav")
        corpus_rows.append({"path": f"{clip.id}.wav", "talker": f"T{k}",
                            "consonant": "t", "snr90_db": -8.5 + 0.5 * k})
    audio.save_jsonl(corpus_rows, base / "corpus.jsonl")
    audio.save_annotations([c.annotation for c in seed_clips],
                           base / "ann.json")

    assert cli.main(["synthnoise", "--profile", str(profile_path),
                     "--duration", "1.0", "--seed", str(master_seed),
                     "--out", str(base / "masker.wav")]) == cli.EXIT_OK
    assert cli.main(["augment", "--manifest", str(base / "corpus.jsonl"),
                     "--root", str(base), "--annotations", str(base / "ann.json"),
                     "--gates", str(gates_path), "--families", "compress",
                     "--out-dir", str(base / "augmented")]) == cli.EXIT_OK
    assert cli.main(["featurize",
                     "--manifest", str(base / "augmented/manifest.jsonl"),
                     "--out-dir", str(base / "feats")]) == cli.EXIT_OK
    assert cli.main(["train", "--features", str(base / "feats/features.jsonl"),
                     "--consonant", "t", "--n-conv", "3", "--max-epochs", "2",
                     "--learning-rate", "1e-6", "--seed", str(master_seed),
                     "--out-dir", str(base / "model")]) == cli.EXIT_OK
    assert cli.main(["eval", "--model", str(base / "model/model.npz"),
                     "--features", str(base / "feats/features.jsonl"),
                     "--consonant", "t",
                     "--out", str(base / "eval.json")]) == cli.EXIT_OK

    train_report = json.loads((base / "model/report.json").read_text())
    eval_report = json.loads((base / "eval.json").read_text())
    # the config digests hash resolved paths, which differ per tree by design
    train_report.pop("config_sha256")
    eval_report.pop("config_sha256")
    return train_report, eval_report


def test_10_pipeline_is_deterministic_under_one_seed(tmp_path):
    seeds = [_harmonic_clip(f0=140.0 + 15.0 * k, dur=0.3, ann_end=0.2,
                            id=f"tok{k}") for k in range(4)]
    profile_path = tmp_path / "profile.json"
    _speech_shaped_profile().save(profile_path)
    gates_path = tmp_path / "gates.json"
    augment.save_gates({(f"tok{k}", "compress"): -2.0 for k in range(4)},
                       gates_path)

    reports_a = _run_pipeline(tmp_path / "a", seeds, profile_path, gates_path,
                              master_seed=3)
    reports_b = _run_pipeline(tmp_path / "b", seeds, profile_path, gates_path,
                              master_seed=3)
    assert reports_a == reports_b

    masker_a = audio.read_wav(tmp_path / "a/masker.wav")
    masker_b = audio.read_wav(tmp_path / "b/masker.wav")
    assert np.array_equal(masker_a.samples, masker_b.samples)
    log_a = (tmp_path / "a/model/training_log.csv").read_text()
    assert log_a == (tmp_path / "b/model/training_log.csv").read_text()
    model_a = cnn.load_model(tmp_path / "a/model/model.npz")
    model_b = cnn.load_model(tmp_path / "b/model/model.npz")
    for name in model_a.weights:
        assert np.array_equal(model_a.weights[name], model_b.weights[name])
