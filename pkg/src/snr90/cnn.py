"""From-scratch 1-D convolutional regression network in numpy: forward,
backprop, plain SGD with inverted dropout, talker-disjoint splits, training
with early stopping, and float32 checkpointing.

Convolutions act along time over 320-bin log-spectrum frames (valid, stride
1), followed by global average pooling, one hidden FC layer and a linear
output node predicting SNR90 in dB.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError, TrainingDivergedError
from .features import FeatureMatrix, N_BINS
from .seeding import rng_for

FC_HIDDEN = 1024
CONV_CHANNELS = (128, 256, 512)

# width/depth/batch/learning-rate/dropout settings tuned per consonant
TUNED_HYPERPARAMS = {
    "p": {"n_conv": 3, "kernel_widths": (5, 7, 7), "batch_size": 8,
          "learning_rate": 1e-4, "dropout_p": 0.50},
    "t": {"n_conv": 7, "kernel_widths": (7, 3, 3), "batch_size": 4,
          "learning_rate": 1e-4, "dropout_p": 0.17},
    "k": {"n_conv": 3, "kernel_widths": (7, 5, 7), "batch_size": 4,
          "learning_rate": 1e-5, "dropout_p": 0.38},
    "b": {"n_conv": 3, "kernel_widths": (3, 3, 3), "batch_size": 16,
          "learning_rate": 1e-4, "dropout_p": 0.10},
    "d": {"n_conv": 7, "kernel_widths": (5, 5, 3), "batch_size": 8,
          "learning_rate": 1e-6, "dropout_p": 0.33},
    "g": {"n_conv": 3, "kernel_widths": (5, 3, 7), "batch_size": 4,
          "learning_rate": 1e-6, "dropout_p": 0.08},
}


@dataclass(frozen=True)
class CnnArchitecture:
    """Network shape. Production models use the fixed 320-128-256-512 channel
    plan; n_inputs/conv_channels/fc_hidden are overridable only so tests can
    run scaled-down reference instances."""

    n_conv: int = 3
    kernel_widths: tuple = (5, 7, 7)
    conv_channels: tuple = CONV_CHANNELS
    fc_hidden: int = FC_HIDDEN
    n_inputs: int = N_BINS

    def __post_init__(self):
        if not 3 <= self.n_conv <= 7:
            raise DataError(f"n_conv must be in 3..7, got {self.n_conv}")
        if (len(self.kernel_widths) != 3
                or any(w not in (3, 5, 7) for w in self.kernel_widths)):
            raise DataError("kernel_widths must be three odd widths from 3/5/7")
        if len(self.conv_channels) != 3:
            raise DataError("conv_channels must list three layer widths")
        object.__setattr__(self, "kernel_widths",
                           tuple(int(w) for w in self.kernel_widths))
        object.__setattr__(self, "conv_channels",
                           tuple(int(c) for c in self.conv_channels))

    @property
    def layer_widths(self) -> tuple:
        """Kernel width per conv layer; layers beyond 3 reuse the third."""
        w = self.kernel_widths
        return w + (w[2],) * (self.n_conv - 3)

    @property
    def layer_channels(self) -> tuple:
        """(in, out) channels per conv layer; layers beyond 3 stay at the
        third width."""
        c = (self.n_inputs,) + self.conv_channels
        full = c + (c[-1],) * (self.n_conv - 3)
        return tuple(zip(full[:-1], full[1:]))

    @property
    def receptive_field(self) -> int:
        return 1 + sum(w - 1 for w in self.layer_widths)

    def to_json(self) -> str:
        return json.dumps({"n_conv": self.n_conv,
                           "kernel_widths": list(self.kernel_widths),
                           "conv_channels": list(self.conv_channels),
                           "fc_hidden": self.fc_hidden,
                           "n_inputs": self.n_inputs})

    @classmethod
    def from_json(cls, text: str) -> "CnnArchitecture":
        obj = json.loads(text)
        return cls(n_conv=obj["n_conv"],
                   kernel_widths=tuple(obj["kernel_widths"]),
                   conv_channels=tuple(obj["conv_channels"]),
                   fc_hidden=obj["fc_hidden"],
                   n_inputs=obj["n_inputs"])


def tuned_architecture(consonant: str) -> CnnArchitecture:
    hp = TUNED_HYPERPARAMS[consonant]
    return CnnArchitecture(n_conv=hp["n_conv"],
                           kernel_widths=hp["kernel_widths"])


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 8
    learning_rate: float = 1e-4
    dropout_p: float = 0.5
    max_epochs: int = 200
    seed: int = 0
    patience: int = 10

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise DataError("learning_rate must be positive")
        if self.batch_size < 1:
            raise DataError("batch_size must be at least 1")
        if not 0.0 <= self.dropout_p < 1.0:
            raise DataError("dropout_p must be in [0, 1)")


def tuned_config(consonant: str, *, max_epochs: int = 200, seed: int = 0,
                 patience: int = 10) -> TrainConfig:
    hp = TUNED_HYPERPARAMS[consonant]
    return TrainConfig(batch_size=hp["batch_size"],
                       learning_rate=hp["learning_rate"],
                       dropout_p=hp["dropout_p"],
                       max_epochs=max_epochs, seed=seed, patience=patience)


@dataclass
class CnnModel:
    architecture: CnnArchitecture
    weights: dict
    training_meta: dict = field(default_factory=dict)


def init_model(arch: CnnArchitecture, seed: int = 0) -> CnnModel:
    """He-style fan-in-scaled uniform weights, zero biases."""
    weights = {}
    for i, ((cin, cout), w) in enumerate(zip(arch.layer_channels,
                                             arch.layer_widths)):
        rng = rng_for(seed, "init", "conv", i)
        limit = np.sqrt(6.0 / (w * cin))
        weights[f"conv{i}_w"] = rng.uniform(-limit, limit, size=(w, cin, cout))
        weights[f"conv{i}_b"] = np.zeros(cout)
    c_last = arch.layer_channels[-1][1]
    rng = rng_for(seed, "init", "fc")
    limit = np.sqrt(6.0 / c_last)
    weights["fc_w"] = rng.uniform(-limit, limit, size=(c_last, arch.fc_hidden))
    weights["fc_b"] = np.zeros(arch.fc_hidden)
    rng = rng_for(seed, "init", "out")
    limit = np.sqrt(6.0 / arch.fc_hidden)
    weights["out_w"] = rng.uniform(-limit, limit, size=(arch.fc_hidden, 1))
    weights["out_b"] = np.zeros(1)
    return CnnModel(architecture=arch, weights=weights)


def _as_frames(features) -> np.ndarray:
    frames = features.frames if isinstance(features, FeatureMatrix) else features
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2:
        raise DataError("features must be a T x n_inputs matrix")
    return frames


def _require_length(arch: CnnArchitecture, n_frames: int) -> None:
    if n_frames < arch.receptive_field:
        raise DataError(
            f"input of {n_frames} frames is shorter than the network's "
            f"receptive field ({arch.receptive_field})")


def _forward_group(weights: dict, arch: CnnArchitecture, x: np.ndarray,
                   dropout_masks: np.ndarray | None):
    """Forward a (B, T, n_inputs) stack of equal-length items.

    dropout_masks: pre-scaled (B, fc_hidden) masks, or None for eval.
    Returns (predictions (B,), cache for backward).
    """
    cache = {"conv": []}
    act = x
    for i in range(arch.n_conv):
        w = weights[f"conv{i}_w"]
        # (B, T_out, Cin, width) windows; contract window and channel axes
        windows = sliding_window_view(act, w.shape[0], axis=1)
        pre = np.tensordot(windows, w, axes=[(3, 2), (0, 1)]) + weights[f"conv{i}_b"]
        act = np.maximum(pre, 0.0)
        cache["conv"].append({"windows": windows, "relu_mask": pre > 0.0})
    cache["pool_frames"] = act.shape[1]
    pooled = act.mean(axis=1)
    cache["pooled"] = pooled

    pre_fc = pooled @ weights["fc_w"] + weights["fc_b"]
    hidden = np.maximum(pre_fc, 0.0)
    cache["fc_relu_mask"] = pre_fc > 0.0
    if dropout_masks is not None:
        hidden = hidden * dropout_masks
    cache["dropout_masks"] = dropout_masks
    cache["fc_out"] = hidden
    preds = (hidden @ weights["out_w"] + weights["out_b"])[:, 0]
    return preds, cache


def _backward_group(weights: dict, arch: CnnArchitecture, cache: dict,
                    dpred: np.ndarray, grads: dict) -> None:
    """Accumulate parameter gradients for one equal-length group given
    d(loss)/d(pred) per item."""
    dout = dpred[:, None]
    grads["out_w"] += cache["fc_out"].T @ dout
    grads["out_b"] += dout.sum(axis=0)
    dhidden = dout @ weights["out_w"].T
    if cache["dropout_masks"] is not None:
        dhidden = dhidden * cache["dropout_masks"]
    dpre_fc = dhidden * cache["fc_relu_mask"]
    grads["fc_w"] += cache["pooled"].T @ dpre_fc
    grads["fc_b"] += dpre_fc.sum(axis=0)
    dpooled = dpre_fc @ weights["fc_w"].T

    n_frames = cache["pool_frames"]
    dact = np.repeat(dpooled[:, None, :] / n_frames, n_frames, axis=1)
    for i in reversed(range(arch.n_conv)):
        layer = cache["conv"][i]
        w = weights[f"conv{i}_w"]
        dpre = dact * layer["relu_mask"]
        # windows: (B, T_out, Cin, width); dpre: (B, T_out, Cout)
        # contracting B and T_out leaves (Cin, width, Cout)
        grads[f"conv{i}_w"] += np.tensordot(
            layer["windows"], dpre, axes=[(0, 1), (0, 1)]).transpose(1, 0, 2)
        grads[f"conv{i}_b"] += dpre.sum(axis=(0, 1))
        if i > 0:
            width, t_out = w.shape[0], dpre.shape[1]
            dprev = np.zeros((dpre.shape[0], t_out + width - 1, w.shape[1]))
            for dt in range(width):
                dprev[:, dt:dt + t_out, :] += dpre @ w[dt].T
            dact = dprev


def _zero_grads(weights: dict) -> dict:
    return {k: np.zeros_like(v) for k, v in weights.items()}


def _draw_dropout_masks(arch: CnnArchitecture, n_items: int, p: float,
                        rng: np.random.Generator) -> np.ndarray | None:
    """Inverted dropout: keep with probability 1-p, scale kept units so the
    expected activation matches eval mode."""
    if p == 0.0:
        return None
    keep = rng.random((n_items, arch.fc_hidden)) >= p
    return keep / (1.0 - p)


def batch_forward(model: CnnModel, features_list, dropout_masks=None):
    """Predictions (N,) for a list of (possibly different-length) feature
    matrices."""
    preds, _ = _batch_forward_cached(model, features_list, dropout_masks)
    return preds


def _batch_forward_cached(model: CnnModel, features_list, dropout_masks=None):
    """Predictions plus backprop caches.

    Items are grouped by frame count and each group is processed as one
    array, which is mathematically identical to per-item processing.
    Returns (preds (N,), caches: list of (group indices, cache)).
    """
    frames = [_as_frames(f) for f in features_list]
    for fr in frames:
        _require_length(model.architecture, fr.shape[0])
    groups = {}
    for idx, fr in enumerate(frames):
        groups.setdefault(fr.shape[0], []).append(idx)

    preds = np.empty(len(frames))
    caches = []
    for t in sorted(groups):
        idxs = groups[t]
        x = np.stack([frames[i] for i in idxs])
        masks = dropout_masks[idxs] if dropout_masks is not None else None
        group_preds, cache = _forward_group(model.weights, model.architecture,
                                            x, masks)
        preds[idxs] = group_preds
        caches.append((idxs, cache))
    return preds, caches


def forward(model: CnnModel, features, mode: str = "eval",
            rng: np.random.Generator | None = None) -> float:
    """Predicted SNR90 for one token. Train mode applies dropout (rng
    required when the model's configured rate is nonzero)."""
    if mode not in ("train", "eval"):
        raise DataError(f"forward mode must be train or eval, got {mode!r}")
    masks = None
    if mode == "train":
        p = float(model.training_meta.get("dropout_p", 0.0))
        if p > 0.0:
            if rng is None:
                raise DataError("train-mode forward with dropout needs an rng")
            masks = _draw_dropout_masks(model.architecture, 1, p, rng)
    preds = batch_forward(model, [features], masks)
    return float(preds[0])


def mse_loss(preds, labels) -> float:
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    return float(np.mean(np.square(preds - labels)))


def loss_and_grads(model: CnnModel, features_list, labels,
                   dropout_masks=None):
    """MSE loss and gradients for every parameter over one batch.

    dropout_masks: (N, fc_hidden) pre-scaled masks or None; passing the same
    masks to repeated calls makes the loss a deterministic function of the
    weights (used by finite-difference checks).
    """
    labels = np.asarray(labels, dtype=np.float64)
    preds, caches = _batch_forward_cached(model, features_list, dropout_masks)
    loss = mse_loss(preds, labels)
    dpred_all = 2.0 * (preds - labels) / len(labels)
    grads = _zero_grads(model.weights)
    for idxs, cache in caches:
        _backward_group(model.weights, model.architecture, cache,
                        dpred_all[idxs], grads)
    return loss, grads, preds


def backward(model: CnnModel, features_list, labels, dropout_masks=None):
    """Gradients for a batch (forward included); see loss_and_grads."""
    _, grads, _ = loss_and_grads(model, features_list, labels, dropout_masks)
    return grads


@dataclass(frozen=True)
class TokenExample:
    """One training item: feature frames, its label, and provenance."""

    frames: np.ndarray
    label_snr90: float
    talker: str
    token_id: str = ""

    def __post_init__(self):
        object.__setattr__(self, "frames", _as_frames(self.frames))


@dataclass(frozen=True)
class DataSplit:
    train: tuple
    dev: tuple
    test: tuple

    def __post_init__(self):
        parts = {"train": self.train, "dev": self.dev, "test": self.test}
        for name, part in parts.items():
            if len(part) == 0:
                raise DataError(f"{name} partition is empty")
        talkers = {name: {ex.talker for ex in part}
                   for name, part in parts.items()}
        for a in talkers:
            for b in talkers:
                if a < b and talkers[a] & talkers[b]:
                    raise DataError(
                        f"talkers {sorted(talkers[a] & talkers[b])} appear in "
                        f"both {a} and {b}: split must be talker-disjoint")


def split_by_talker(examples, seed: int = 0,
                    fractions=(0.6, 0.2, 0.2)) -> DataSplit:
    """Deterministic talker-disjoint partition, filling train/dev/test toward
    the requested token-count fractions."""
    examples = list(examples)
    by_talker = {}
    for ex in examples:
        by_talker.setdefault(ex.talker, []).append(ex)
    if len(by_talker) < 3:
        raise DataError("need at least 3 talkers for a talker-disjoint split")
    order = sorted(by_talker)
    rng = rng_for(seed, "talker-split")
    order = [order[i] for i in rng.permutation(len(order))]

    total = len(examples)
    targets = [f * total for f in fractions]
    filled = [0, 0, 0]
    parts = ([], [], [])
    for talker in order:
        deficit = [t - f for t, f in zip(targets, filled)]
        k = int(np.argmax(deficit))
        parts[k].extend(by_talker[talker])
        filled[k] += len(by_talker[talker])
    return DataSplit(train=tuple(parts[0]), dev=tuple(parts[1]),
                     test=tuple(parts[2]))


def evaluate(model: CnnModel, examples) -> dict:
    """Eval-mode MSE and per-token residuals (pred - label)."""
    examples = list(examples)
    if not examples:
        raise DataError("evaluate: empty partition")
    preds = batch_forward(model, [ex.frames for ex in examples])
    labels = np.asarray([ex.label_snr90 for ex in examples])
    residuals = [(ex.token_id, float(p - ex.label_snr90))
                 for ex, p in zip(examples, preds)]
    return {"mse": mse_loss(preds, labels), "residuals": residuals}


def train(split: DataSplit, arch: CnnArchitecture, config: TrainConfig,
          consonant: str = ""):
    """SGD over the train partition with per-epoch dev early stopping.

    Returns (model restored to its best-dev weights, log rows of
    {epoch, train_mse, dev_mse}). Raises TrainingDivergedError on NaN loss.
    """
    model = init_model(arch, seed=config.seed)
    # start the output bias at the train-label mean: removes the large
    # constant error component so small tuned learning rates make progress
    train_labels = np.asarray([ex.label_snr90 for ex in split.train])
    model.weights["out_b"][0] = float(np.mean(train_labels))
    model.training_meta = {"consonant": consonant, "dropout_p": config.dropout_p,
                           "config": {
                               "batch_size": config.batch_size,
                               "learning_rate": config.learning_rate,
                               "dropout_p": config.dropout_p,
                               "max_epochs": config.max_epochs,
                               "seed": config.seed,
                               "patience": config.patience,
                           }}

    n = len(split.train)
    log = []
    best_dev = np.inf
    best_weights = None
    best_epoch = -1
    since_improved = 0
    for epoch in range(config.max_epochs):
        rng = rng_for(config.seed, "epoch", epoch)
        order = rng.permutation(n)
        sq_err_sum = 0.0
        for start in range(0, n, config.batch_size):
            batch = [split.train[i] for i in order[start:start + config.batch_size]]
            feats = [ex.frames for ex in batch]
            labels = [ex.label_snr90 for ex in batch]
            masks = _draw_dropout_masks(arch, len(batch), config.dropout_p, rng)
            loss, grads, _ = loss_and_grads(model, feats, labels, masks)
            if not np.isfinite(loss):
                raise TrainingDivergedError(
                    f"loss became non-finite at epoch {epoch} "
                    f"(lr={config.learning_rate}, batch_size={config.batch_size})")
            sq_err_sum += loss * len(batch)
            for key, grad in grads.items():
                model.weights[key] -= config.learning_rate * grad

        dev_mse = evaluate(model, split.dev)["mse"]
        log.append({"epoch": epoch, "train_mse": sq_err_sum / n,
                    "dev_mse": dev_mse})
        if dev_mse < best_dev:
            best_dev = dev_mse
            best_weights = {k: v.copy() for k, v in model.weights.items()}
            best_epoch = epoch
            since_improved = 0
        else:
            since_improved += 1
            if since_improved >= config.patience:
                break

    if best_weights is not None:
        model.weights = best_weights
    model.training_meta.update({"epoch": best_epoch, "dev_mse": best_dev})
    return model, log


def save_training_log(log, path) -> None:
    import csv
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=["epoch", "train_mse", "dev_mse"])
        writer.writeheader()
        writer.writerows(log)


CHECKPOINT_VERSION = 1


def save_model(model: CnnModel, path) -> None:
    """Versioned npz container: architecture JSON, training meta JSON, and
    float32 weight tensors."""
    tensors = {k: v.astype(np.float32) for k, v in model.weights.items()}
    with open(path, "wb") as fh:  # a file handle keeps the exact path
        np.savez(fh,
                 format_version=np.int64(CHECKPOINT_VERSION),
                 architecture=model.architecture.to_json(),
                 training_meta=json.dumps(model.training_meta),
                 **tensors)


def load_model(path) -> CnnModel:
    with np.load(path, allow_pickle=False) as npz:
        try:
            version = int(npz["format_version"])
            if version != CHECKPOINT_VERSION:
                raise DataError(f"unsupported checkpoint version {version}")
            arch = CnnArchitecture.from_json(str(npz["architecture"][()]))
            meta = json.loads(str(npz["training_meta"][()]))
        except KeyError as exc:
            raise DataError(f"{path}: not a model checkpoint "
                            f"(missing {exc.args[0]!r})") from exc
        skip = {"format_version", "architecture", "training_meta"}
        weights = {k: npz[k].astype(np.float64) for k in npz.files
                   if k not in skip}
    model = CnnModel(architecture=arch, weights=weights, training_meta=meta)
    expected = set(init_model(arch, seed=0).weights)
    if set(weights) != expected:
        raise DataError(f"checkpoint weights {sorted(weights)} do not match "
                        f"architecture (expected {sorted(expected)})")
    return model
