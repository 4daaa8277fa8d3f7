"""From-scratch convolutional regressor: forward, gradients, training loop."""
from __future__ import annotations

import numpy as np
import pytest

from snr90 import cnn
from snr90.errors import DataError

# Small architecture used everywhere a real one would be too slow.
TINY = cnn.CnnArchitecture(n_conv=3, kernel_widths=(3, 3, 3),
                           conv_channels=(4, 4, 4), fc_hidden=8)


def _tiny_batch(n_items=3, n_frames=12, seed=2):
    rng = np.random.default_rng(seed)
    feats = [rng.standard_normal((n_frames, 320)) for _ in range(n_items)]
    labels = rng.normal(-8.0, 3.0, size=n_items)
    return feats, labels


def _conv_pre(weights, i, act, width):
    windows = np.lib.stride_tricks.sliding_window_view(act, width, axis=1)
    return (np.tensordot(windows, weights[f"conv{i}_w"], axes=[(3, 2), (0, 1)])
            + weights[f"conv{i}_b"])


def nudge_off_kinks(model, feats, delta=0.1):
    """Shift conv/FC biases so every ReLU pre-activation clears the kink.

    A finite-difference probe is only trustworthy while the loss stays on
    one linear piece of every ReLU; a pre-activation within h of zero can
    cross the kink under the probe and make the numeric slope disagree
    with the (correct) subgradient. Nudging each channel's bias by the
    smallest multiple of delta that leaves all its pre-activations at
    least delta in magnitude removes those crossings without touching
    the quantities under test.
    """
    arch = model.architecture
    shifts = [0.0]
    for k in range(1, 40):
        shifts += [k * delta, -k * delta]
    act = np.stack(feats)
    for i, width in enumerate(arch.layer_widths):
        pre = _conv_pre(model.weights, i, act, width)
        for c in range(pre.shape[-1]):
            for s in shifts:
                if np.min(np.abs(pre[..., c] + s)) >= delta:
                    model.weights[f"conv{i}_b"][c] += s
                    pre[..., c] += s
                    break
            else:
                raise AssertionError(f"conv{i} channel {c}: no kink-free bias")
        act = np.maximum(pre, 0.0)
    pooled = act.mean(axis=1)
    pre = pooled @ model.weights["fc_w"] + model.weights["fc_b"]
    for c in range(pre.shape[-1]):
        for s in shifts:
            if np.min(np.abs(pre[:, c] + s)) >= delta:
                model.weights["fc_b"][c] += s
                pre[:, c] += s
                break
        else:
            raise AssertionError(f"fc channel {c}: no kink-free bias")


def kink_margin(model, feats):
    """Smallest |pre-activation| across all ReLU layers for this batch."""
    arch = model.architecture
    act = np.stack(feats)
    margin = np.inf
    for i, width in enumerate(arch.layer_widths):
        pre = _conv_pre(model.weights, i, act, width)
        margin = min(margin, float(np.min(np.abs(pre))))
        act = np.maximum(pre, 0.0)
    pre = act.mean(axis=1) @ model.weights["fc_w"] + model.weights["fc_b"]
    return min(margin, float(np.min(np.abs(pre))))


def finite_difference_check(model, feats, labels, masks, h=1e-3, stride=1):
    """Max relative error between analytic and central-difference gradients."""
    loss0, grads, _ = cnn.loss_and_grads(model, feats, labels,
                                         dropout_masks=masks)
    assert np.isfinite(loss0)
    worst = 0.0
    n_checked = 0
    for name, w in model.weights.items():
        flat = w.reshape(-1)
        ana = grads[name].reshape(-1)
        for j in range(0, flat.size, stride):
            keep = flat[j]
            flat[j] = keep + h
            lp = cnn.mse_loss(cnn.batch_forward(model, feats, masks), labels)
            flat[j] = keep - h
            lm = cnn.mse_loss(cnn.batch_forward(model, feats, masks), labels)
            flat[j] = keep
            num = (lp - lm) / (2.0 * h)
            rel = abs(num - ana[j]) / max(1e-8, abs(num) + abs(ana[j]))
            worst = max(worst, rel)
            n_checked += 1
    return worst, n_checked


def test_architecture_properties():
    assert TINY.layer_widths == (3, 3, 3)
    assert TINY.layer_channels == ((320, 4), (4, 4), (4, 4))
    assert TINY.receptive_field == 7
    deep = cnn.tuned_architecture("t")
    assert deep.n_conv == 7
    assert deep.layer_widths == (7, 3, 3, 3, 3, 3, 3)
    assert deep.receptive_field == 1 + 6 + 6 * 2


def test_architecture_validation():
    with pytest.raises(DataError):
        cnn.CnnArchitecture(n_conv=2, kernel_widths=(3, 3, 3))
    with pytest.raises(DataError):
        cnn.CnnArchitecture(n_conv=3, kernel_widths=(3, 4, 3))  # even width


def test_architecture_json_round_trip():
    back = cnn.CnnArchitecture.from_json(TINY.to_json())
    assert back == TINY


def test_tuned_tables_complete():
    for consonant in "ptkbdg":
        arch = cnn.tuned_architecture(consonant)
        cfg = cnn.tuned_config(consonant)
        assert arch.n_conv == len(arch.layer_widths)
        assert cfg.batch_size in (4, 8, 16)
    assert cnn.tuned_config("p").learning_rate == 1e-4
    assert cnn.tuned_config("p").dropout_p == 0.50
    assert cnn.tuned_architecture("p").kernel_widths == (5, 7, 7)
    assert cnn.tuned_config("d").learning_rate == 1e-6


def test_init_model_deterministic():
    a = cnn.init_model(TINY, seed=1)
    b = cnn.init_model(TINY, seed=1)
    c = cnn.init_model(TINY, seed=2)
    for name in a.weights:
        assert np.array_equal(a.weights[name], b.weights[name])
    assert any(not np.array_equal(a.weights[n], c.weights[n])
               for n in a.weights)
    limit = np.sqrt(6.0 / (3 * 320))
    assert np.max(np.abs(a.weights["conv0_w"])) <= limit
    assert np.all(a.weights["conv0_b"] == 0.0)


def test_zero_weights_predict_bias():
    model = cnn.init_model(TINY, seed=0)
    for name in model.weights:
        model.weights[name][:] = 0.0
    model.weights["out_b"][0] = -7.5
    feats, _ = _tiny_batch()
    preds = cnn.batch_forward(model, feats)
    assert np.allclose(preds, -7.5)


def test_forward_rejects_short_input():
    model = cnn.init_model(TINY, seed=0)
    short = np.zeros((TINY.receptive_field - 1, 320))
    with pytest.raises(DataError):
        cnn.forward(model, short)


def test_forward_modes():
    model = cnn.init_model(TINY, seed=0)
    model.training_meta["dropout_p"] = 0.5
    feats, _ = _tiny_batch(n_items=1)
    with pytest.raises(DataError):
        cnn.forward(model, feats[0], mode="train")  # dropout needs an rng
    with pytest.raises(DataError):
        cnn.forward(model, feats[0], mode="predict")
    p_eval = cnn.forward(model, feats[0])
    rng = np.random.default_rng(0)
    p_train = cnn.forward(model, feats[0], mode="train", rng=rng)
    assert np.isfinite(p_eval) and np.isfinite(p_train)


def test_batch_forward_groups_by_length():
    model = cnn.init_model(TINY, seed=3)
    rng = np.random.default_rng(4)
    feats = [rng.standard_normal((t, 320)) for t in (10, 14, 10, 21, 14)]
    batched = cnn.batch_forward(model, feats)
    single = np.array([cnn.batch_forward(model, [f])[0] for f in feats])
    assert np.allclose(batched, single, atol=1e-12)


def test_dropout_mask_scale():
    rng = np.random.default_rng(5)
    assert cnn._draw_dropout_masks(TINY, 4, 0.0, rng) is None
    masks = cnn._draw_dropout_masks(TINY, 400, 0.5, rng)
    assert set(np.unique(masks)) == {0.0, 2.0}
    assert abs(np.mean(masks > 0) - 0.5) < 0.05


def test_gradcheck_all_params_on_kink_free_batch():
    model = cnn.init_model(TINY, seed=1)
    feats, labels = _tiny_batch()
    masks = cnn._draw_dropout_masks(TINY, len(feats), 0.5,
                                    np.random.default_rng(5))
    nudge_off_kinks(model, feats)
    assert kink_margin(model, feats) >= 0.1
    # stride 7 keeps this quick; the acceptance suite sweeps every parameter
    worst, n_checked = finite_difference_check(model, feats, labels, masks,
                                               stride=7)
    assert n_checked > 500
    assert worst < 1e-3


def test_gradcheck_catches_broken_gradient():
    # sanity-check the checker itself: corrupt one analytic gradient entry
    model = cnn.init_model(TINY, seed=1)
    feats, labels = _tiny_batch()
    nudge_off_kinks(model, feats)
    loss0, grads, _ = cnn.loss_and_grads(model, feats, labels)
    w = model.weights["out_w"].reshape(-1)
    ana = grads["out_w"].reshape(-1)[0] + 0.5  # wrong on purpose
    h = 1e-3
    keep = w[0]
    w[0] = keep + h
    lp = cnn.mse_loss(cnn.batch_forward(model, feats), labels)
    w[0] = keep - h
    lm = cnn.mse_loss(cnn.batch_forward(model, feats), labels)
    w[0] = keep
    num = (lp - lm) / (2 * h)
    rel = abs(num - ana) / max(1e-8, abs(num) + abs(ana))
    assert rel > 1e-3


def test_grads_scale_with_batch_duplication():
    model = cnn.init_model(TINY, seed=6)
    feats, labels = _tiny_batch(n_items=2, seed=7)
    _, g1, _ = cnn.loss_and_grads(model, feats, labels)
    _, g2, _ = cnn.loss_and_grads(model, feats * 2, np.tile(labels, 2))
    for name in g1:
        assert np.allclose(g1[name], g2[name], atol=1e-12)


def test_token_example_and_split():
    rng = np.random.default_rng(8)
    examples = [
        cnn.TokenExample(frames=rng.standard_normal((10, 320)),
                         label_snr90=float(rng.normal(-8, 2)),
                         talker=f"T{k % 5:02d}", token_id=f"tok{k}")
        for k in range(50)
    ]
    split = cnn.split_by_talker(examples, seed=0)
    groups = [ {e.talker for e in part}
               for part in (split.train, split.dev, split.test) ]
    assert groups[0] | groups[1] | groups[2] == {f"T{k:02d}" for k in range(5)}
    assert not (groups[0] & groups[1] or groups[0] & groups[2]
                or groups[1] & groups[2])
    again = cnn.split_by_talker(examples, seed=0)
    assert [e.token_id for e in again.train] == [e.token_id for e in split.train]
    assert len(split.train) > len(split.dev)


def test_split_needs_three_talkers():
    rng = np.random.default_rng(9)
    examples = [cnn.TokenExample(frames=rng.standard_normal((10, 320)),
                                 label_snr90=-8.0, talker="T00")
                for _ in range(10)]
    with pytest.raises(DataError):
        cnn.split_by_talker(examples)


def test_data_split_rejects_talker_leakage():
    rng = np.random.default_rng(10)

    def ex(talker):
        return cnn.TokenExample(frames=rng.standard_normal((10, 320)),
                                label_snr90=-8.0, talker=talker)

    with pytest.raises(DataError):
        cnn.DataSplit(train=[ex("T00")], dev=[ex("T00")], test=[ex("T01")])


def _linear_task(n=60, seed=11):
    """Labels proportional to the mean level of the middle feature band."""
    rng = np.random.default_rng(seed)
    examples = []
    for k in range(n):
        level = rng.uniform(-2.0, 2.0)
        frames = rng.standard_normal((12, 320)) * 0.1
        frames[:, 100:140] += level
        examples.append(cnn.TokenExample(
            frames=frames, label_snr90=-8.0 + 2.0 * level,
            talker=f"T{k % 6:02d}", token_id=f"tok{k}"))
    return cnn.split_by_talker(examples, seed=0)


def test_train_warm_starts_output_bias():
    split = _linear_task()
    cfg = cnn.TrainConfig(batch_size=8, learning_rate=1e-4, dropout_p=0.0,
                          max_epochs=0, seed=0, patience=5)
    model, log = cnn.train(split, TINY, cfg)
    assert log == []
    want = np.mean([e.label_snr90 for e in split.train])
    assert model.weights["out_b"][0] == pytest.approx(want)


def test_train_learns_linear_task():
    split = _linear_task()
    cfg = cnn.TrainConfig(batch_size=8, learning_rate=3e-3, dropout_p=0.0,
                          max_epochs=60, seed=0, patience=60)
    model, log = cnn.train(split, TINY, cfg)
    assert log[0]["epoch"] == 0
    assert {"epoch", "train_mse", "dev_mse"} <= set(log[0])
    base = cnn.mse_loss(np.full(len(split.dev),
                                np.mean([e.label_snr90 for e in split.train])),
                        [e.label_snr90 for e in split.dev])
    best = min(r["dev_mse"] for r in log)
    assert best < 0.5 * base  # beats predicting the mean
    ev = cnn.evaluate(model, split.test)
    assert ev["mse"] < base
    assert len(ev["residuals"]) == len(split.test)
    tok, resid = ev["residuals"][0]
    assert isinstance(tok, str) and np.isfinite(resid)


def test_train_early_stops_on_plateau():
    rng = np.random.default_rng(12)
    examples = [cnn.TokenExample(frames=rng.standard_normal((10, 320)),
                                 label_snr90=float(rng.normal(-8, 3)),
                                 talker=f"T{k % 5:02d}", token_id=f"t{k}")
                for k in range(40)]
    split = cnn.split_by_talker(examples, seed=1)
    cfg = cnn.TrainConfig(batch_size=8, learning_rate=1e-3, dropout_p=0.0,
                          max_epochs=300, seed=0, patience=4)
    model, log = cnn.train(split, TINY, cfg)
    assert len(log) < 300
    # final weights are the best-dev checkpoint, not the last epoch's
    dev = [e.label_snr90 for e in split.dev]
    got = cnn.mse_loss(cnn.batch_forward(model, [e.frames for e in split.dev]), dev)
    assert got == pytest.approx(min(r["dev_mse"] for r in log), abs=1e-9)


def test_training_is_seed_reproducible():
    split = _linear_task()
    cfg = cnn.TrainConfig(batch_size=8, learning_rate=1e-3, dropout_p=0.2,
                          max_epochs=3, seed=42, patience=10)
    _, log_a = cnn.train(split, TINY, cfg)
    _, log_b = cnn.train(split, TINY, cfg)
    assert log_a == log_b


def test_checkpoint_round_trip(tmp_path):
    model = cnn.init_model(TINY, seed=13)
    model.training_meta = {"consonant": "p", "epochs": 3}
    path = tmp_path / "model.npz"
    cnn.save_model(model, path)
    back = cnn.load_model(path)
    assert back.architecture == TINY
    assert back.training_meta["consonant"] == "p"
    feats, _ = _tiny_batch()
    a = cnn.batch_forward(back, feats)
    # weights were quantized to float32 once; a second round trip is lossless
    cnn.save_model(back, path)
    again = cnn.load_model(path)
    for name in back.weights:
        assert np.array_equal(back.weights[name], again.weights[name])
    assert np.array_equal(a, cnn.batch_forward(again, feats))


def test_checkpoint_rejects_foreign_files(tmp_path):
    path = tmp_path / "weights.npz"
    np.savez(path, junk=np.zeros(3))
    with pytest.raises(DataError):
        cnn.load_model(path)


def test_training_log_csv(tmp_path):
    log = [{"epoch": 0, "train_mse": 3.0, "dev_mse": 4.0},
           {"epoch": 1, "train_mse": 2.0, "dev_mse": 3.5}]
    path = tmp_path / "log.csv"
    cnn.save_training_log(log, path)
    lines = path.read_text().strip().splitlines()
    assert lines[0].split(",") == ["epoch", "train_mse", "dev_mse"]
    assert len(lines) == 3
