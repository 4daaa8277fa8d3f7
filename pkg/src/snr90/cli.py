"""Command-line pipeline: estimate spectra, synthesize noise, mix, run
simulated listening experiments, augment corpora, extract features, train
and evaluate threshold regressors, and score the mock ASR baseline.

Every subcommand resolves its options from flags over an optional TOML/JSON
config file, writes a resolved-config snapshot next to its outputs, and is
deterministic given that snapshot.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from pathlib import Path

from . import audio, augment, baseline, cnn, features, noise, psychometrics
from .errors import DataError

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_INTERNAL = 3


class _Parser(argparse.ArgumentParser):
    """argparse that exits with the documented usage code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _load_config(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise DataError(f"config file not found: {path}")
    if path.suffix == ".json":
        return json.loads(path.read_text())
    try:
        import tomllib
    except ModuleNotFoundError:  # Python 3.10
        import tomli as tomllib
    with open(path, "rb") as fh:
        return tomllib.load(fh)


class _Options:
    """Flag value if given, else config [command] section, else config top
    level, else the coded default."""

    def __init__(self, args: argparse.Namespace):
        self.args = args
        self.command = args.command
        self.config = _load_config(args.config) if args.config else {}
        self.resolved = {"command": self.command}

    def get(self, name: str, default=None, required: bool = False):
        value = getattr(self.args, name, None)
        if value is None:
            value = self.config.get(self.command, {}).get(name)
        if value is None:
            value = self.config.get(name)
        if value is None:
            value = default
        if value is None and required:
            raise DataError(f"{self.command}: missing required option --{name.replace('_', '-')}")
        self.resolved[name] = str(value) if isinstance(value, Path) else value
        return value

    def hash(self) -> str:
        blob = json.dumps(self.resolved, sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def snapshot(self, target: Path) -> str:
        """Write the resolved options next to the output; returns the hash."""
        digest = self.hash()
        payload = dict(self.resolved, config_sha256=digest)
        target = Path(target)
        out = (target / "run_config.json" if target.is_dir()
               else target.with_name(target.name + ".config.json"))
        out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        return digest


def _require_file(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise DataError(f"{what} not found: {path}")
    return path


def _ladder(opts: _Options) -> noise.SnrLadder:
    spec = opts.get("ladder")
    if spec is None:
        return noise.DEFAULT_SNR_LADDER
    if isinstance(spec, str):
        spec = [float(v) for v in spec.split(",")]
    return noise.SnrLadder(levels_db=tuple(spec))


def _read_clip(path, annotations: dict | None):
    clip = audio.read_wav(_require_file(path, "wav file"))
    if annotations and clip.id in annotations:
        clip = clip.with_annotation(annotations[clip.id])
    return clip


def _load_annotation_file(opts: _Options, default_path=None) -> dict:
    path = opts.get("annotations", default=default_path)
    if path is None:
        return {}
    return audio.load_annotations(_require_file(path, "annotation file"))


# --- subcommands ----------------------------------------------------------

def cmd_ltass(opts: _Options) -> None:
    out = Path(opts.get("out", required=True))
    fft_bins = int(opts.get("fft_bins", default=512))
    wavs = opts.get("wavs") or []
    manifest = opts.get("manifest")
    paths = [Path(w) for w in wavs]
    if manifest:
        manifest = _require_file(manifest, "corpus manifest")
        root = Path(opts.get("root", default=manifest.parent))
        paths += [root / row["path"] for row in audio.load_corpus_manifest(manifest)]
    if not paths:
        raise DataError("ltass: no input wavs (pass files or --manifest)")
    clips = [audio.read_wav(_require_file(p, "wav file")) for p in paths]
    profile = noise.estimate_ltass(clips, fft_bins=fft_bins)
    profile.save(out)
    opts.snapshot(out)
    print(f"ltass: {len(clips)} clips -> {out}")


def cmd_synthnoise(opts: _Options) -> None:
    profile = noise.LtassProfile.load(
        _require_file(opts.get("profile", required=True), "spectrum profile"))
    duration = float(opts.get("duration", default=30.0))
    seed = int(opts.get("seed", default=0))
    out = Path(opts.get("out", required=True))
    clip = noise.synth_noise(profile, duration, seed)
    audio.write_wav(clip, out)
    opts.snapshot(out)
    print(f"synthnoise: {duration:.1f} s, seed {seed} -> {out}")


def cmd_mix(opts: _Options) -> None:
    annotations = _load_annotation_file(opts)
    speech = _read_clip(opts.get("speech", required=True), annotations)
    noise_clip = audio.read_wav(
        _require_file(opts.get("noise", required=True), "noise wav"))
    snr = float(opts.get("snr", required=True))
    out = Path(opts.get("out", required=True))
    audio.write_wav(noise.mix_at_snr(speech, noise_clip, snr), out)
    opts.snapshot(out)
    print(f"mix: {speech.id} at {snr:+.1f} dB -> {out}")


def cmd_staircase(opts: _Options) -> None:
    listener_file = _require_file(opts.get("listeners", required=True),
                                  "listener spec file")
    token_id = opts.get("token_id", default="tok")
    out_dir = Path(opts.get("out_dir", required=True))
    out_dir.mkdir(parents=True, exist_ok=True)
    ladder = _ladder(opts)

    rows = json.loads(listener_file.read_text())
    if not rows:
        raise DataError(f"{listener_file}: no listeners defined")
    listeners = [psychometrics.SimulatedListener(
        threshold_db=float(r["threshold_db"]),
        slope=float(r.get("slope", "inf")),
        lapse_rate=float(r.get("lapse_rate", 0.02)),
        chance_level=float(r.get("chance_level", psychometrics.CHANCE_14AFC)),
        seed=int(r.get("seed", i))) for i, r in enumerate(rows)]

    estimate, curve, trials = psychometrics.measure_snr90(token_id, listeners,
                                                          ladder)
    psychometrics.save_trials(trials, out_dir / "trials.jsonl")
    digest = opts.snapshot(out_dir)
    report = {"token_id": token_id, "snr90_db": estimate.snr90_db,
              "floored": estimate.floored, "n_subjects": len(listeners),
              "n_trials": len(trials),
              "curve": json.loads(curve.to_json()),
              "config_sha256": digest}
    (out_dir / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    print(f"staircase: {token_id} SNR90 = {estimate.snr90_db:+.2f} dB "
          f"({len(trials)} trials) -> {out_dir}")


def _load_seeds(opts: _Options):
    manifest = _require_file(opts.get("manifest", required=True),
                             "corpus manifest")
    root = Path(opts.get("root", default=manifest.parent))
    annotations = _load_annotation_file(opts)
    seeds = []
    for row in audio.load_corpus_manifest(manifest):
        clip = _read_clip(root / row["path"], annotations)
        label = audio.TokenLabel(talker=row["talker"],
                                 consonant=row["consonant"],
                                 snr90=float(row["snr90_db"]))
        seeds.append((clip, label))
    return seeds


def cmd_augment(opts: _Options) -> None:
    seeds = _load_seeds(opts)
    gates = augment.load_gates(
        _require_file(opts.get("gates", required=True), "gate file"))
    out_dir = Path(opts.get("out_dir", required=True))
    families = opts.get("families", default=",".join(augment.FAMILIES))
    if isinstance(families, str):
        families = tuple(f for f in families.split(",") if f)
    manifest = augment.augment_corpus(seeds, gates, out_dir, families=families)
    audio.save_jsonl(manifest, Path(out_dir) / "manifest.jsonl")
    opts.snapshot(Path(out_dir))
    print(f"augment: {len(seeds)} seeds -> {len(manifest)} tokens in {out_dir}")


def cmd_featurize(opts: _Options) -> None:
    manifest = _require_file(opts.get("manifest", required=True),
                             "augmented manifest")
    root = Path(opts.get("root", default=manifest.parent))
    out_dir = Path(opts.get("out_dir", required=True))
    out_dir.mkdir(parents=True, exist_ok=True)
    default_ann = root / "annotations.json"
    annotations = _load_annotation_file(
        opts, default_path=default_ann if default_ann.exists() else None)

    rows_out = []
    for row in audio.load_jsonl(manifest):
        clip = _read_clip(root / row["path"], annotations)
        fm = features.extract_features(clip)
        feat_name = Path(row["path"]).stem + ".feat"
        features.save_features(fm, out_dir / feat_name)
        rows_out.append(dict(row, feature_path=feat_name))
    audio.save_jsonl(rows_out, out_dir / "features.jsonl")
    opts.snapshot(out_dir)
    print(f"featurize: {len(rows_out)} tokens -> {out_dir}")


def _examples_from_feature_rows(rows, root: Path):
    examples = []
    for row in rows:
        fm = features.load_features(root / row["feature_path"])
        examples.append(cnn.TokenExample(frames=fm.frames,
                                         label_snr90=float(row["label_snr90_db"]),
                                         talker=row["talker"],
                                         token_id=Path(row["path"]).stem))
    return examples


def cmd_train(opts: _Options) -> None:
    manifest = _require_file(opts.get("features", required=True),
                             "feature manifest")
    root = Path(opts.get("root", default=manifest.parent))
    consonant = opts.get("consonant", required=True)
    out_dir = Path(opts.get("out_dir", required=True))
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = int(opts.get("seed", default=0))

    hp = cnn.TUNED_HYPERPARAMS[consonant]
    arch = cnn.CnnArchitecture(
        n_conv=int(opts.get("n_conv", default=hp["n_conv"])),
        kernel_widths=tuple(hp["kernel_widths"]))
    config = cnn.TrainConfig(
        batch_size=int(opts.get("batch_size", default=hp["batch_size"])),
        learning_rate=float(opts.get("learning_rate",
                                     default=hp["learning_rate"])),
        dropout_p=float(opts.get("dropout", default=hp["dropout_p"])),
        max_epochs=int(opts.get("max_epochs", default=200)),
        seed=seed,
        patience=int(opts.get("patience", default=10)))

    rows = [r for r in audio.load_jsonl(manifest) if r["consonant"] == consonant]
    if not rows:
        raise DataError(f"train: no tokens for consonant {consonant!r} in {manifest}")
    examples = _examples_from_feature_rows(rows, root)
    split = cnn.split_by_talker(examples, seed=seed)
    row_by_id = {Path(r["path"]).stem: r for r in rows}
    for name, part in (("train", split.train), ("dev", split.dev),
                       ("test", split.test)):
        audio.save_jsonl((row_by_id[ex.token_id] for ex in part),
                         out_dir / f"split_{name}.jsonl")

    model, train_log = cnn.train(split, arch, config, consonant=consonant)
    cnn.save_model(model, out_dir / "model.npz")
    cnn.save_training_log(train_log, out_dir / "training_log.csv")
    test_metrics = cnn.evaluate(model, split.test)
    digest = opts.snapshot(out_dir)
    report = {"consonant": consonant, "best_epoch": model.training_meta["epoch"],
              "dev_mse_db2": model.training_meta["dev_mse"],
              "test_mse_db2": test_metrics["mse"],
              "n_train": len(split.train), "n_dev": len(split.dev),
              "n_test": len(split.test), "epochs_run": len(train_log),
              "config_sha256": digest}
    (out_dir / "report.json").write_text(json.dumps(report, indent=2) + "\n")
    print(f"train: /{consonant}/ best dev MSE "
          f"{model.training_meta['dev_mse']:.3f} dB^2, "
          f"test MSE {test_metrics['mse']:.3f} dB^2 -> {out_dir}")


def cmd_eval(opts: _Options) -> None:
    model = cnn.load_model(
        _require_file(opts.get("model", required=True), "model checkpoint"))
    manifest = _require_file(opts.get("features", required=True),
                             "feature manifest")
    root = Path(opts.get("root", default=manifest.parent))
    out = Path(opts.get("out", required=True))
    consonant = opts.get("consonant",
                         default=model.training_meta.get("consonant"))

    rows = audio.load_jsonl(manifest)
    if consonant:
        rows = [r for r in rows if r["consonant"] == consonant]
    if not rows:
        raise DataError(f"eval: no tokens to evaluate in {manifest}")
    metrics = cnn.evaluate(model, _examples_from_feature_rows(rows, root))
    digest = opts.snapshot(out) if out.parent.exists() else opts.hash()
    report = {"consonant": consonant, "n_tokens": len(rows),
              "mse_db2": metrics["mse"],
              "residuals_db": [{"token_id": tid, "residual_db": r}
                               for tid, r in metrics["residuals"]],
              "config_sha256": digest}
    out.write_text(json.dumps(report, indent=2) + "\n")
    print(f"eval: {len(rows)} tokens, MSE {metrics['mse']:.3f} dB^2 -> {out}")


def cmd_baseline(opts: _Options) -> None:
    seeds = _load_seeds(opts)
    noise_clip = audio.read_wav(
        _require_file(opts.get("noise", required=True), "noise wav"))
    out = Path(opts.get("out", required=True))
    ladder = _ladder(opts)
    threshold = float(opts.get("mock_threshold", required=True))
    slope = float(opts.get("mock_slope", default="inf"))
    seed = int(opts.get("seed", default=0))
    lexicon_path = opts.get("lexicon")
    lexicon = (baseline.load_lexicon(_require_file(lexicon_path, "lexicon"))
               if lexicon_path else baseline.DEFAULT_LEXICON)

    results = []
    for clip, label in seeds:
        backend = baseline.MockAsrBackend(
            clean=clip, threshold_db=threshold, slope=slope, seed=seed,
            success_word=baseline.SUCCESS_WORDS[label.consonant])
        level = baseline.asr_snr90(clip, label.consonant, noise_clip, backend,
                                   lexicon, ladder)
        results.append(baseline.BaselineResult(
            token_id=clip.id, asr_snr90=level,
            human_snr90=label.snr90, consonant=label.consonant))
    baseline.save_results(results, out.with_name(out.stem + "_results.jsonl"))

    by_consonant = {}
    for consonant in sorted({r.consonant for r in results}):
        try:
            by_consonant[consonant] = baseline.bias_variance(results, consonant)
        except DataError as exc:
            by_consonant[consonant] = {"error": str(exc)}
    digest = opts.snapshot(out) if out.parent.exists() else opts.hash()
    report = {"mock_threshold_db": threshold, "n_tokens": len(results),
              "by_consonant": by_consonant, "config_sha256": digest}
    out.write_text(json.dumps(report, indent=2) + "\n")
    print(f"baseline: {len(results)} tokens -> {out}")


# --- parser ---------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="snr90",
                     description="Per-token speech intelligibility threshold "
                                 "(SNR90) toolkit")
    parser.add_argument("--config", help="TOML or JSON config file with "
                                         "defaults for any option")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log at DEBUG level")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("ltass", help="estimate an average speech spectrum")
    p.add_argument("wavs", nargs="*", help="input wav files")
    p.add_argument("--manifest", help="corpus manifest (JSON lines)")
    p.add_argument("--root", help="root directory for manifest paths")
    p.add_argument("--fft-bins", type=int, dest="fft_bins")
    p.add_argument("--out", help="output profile JSON")

    p = sub.add_parser("synthnoise", help="synthesize speech-weighted noise")
    p.add_argument("--profile", help="spectrum profile JSON")
    p.add_argument("--duration", type=float, help="seconds")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output wav")

    p = sub.add_parser("mix", help="mix speech with noise at an exact SNR")
    p.add_argument("--speech")
    p.add_argument("--noise")
    p.add_argument("--snr", type=float, help="target SNR in dB")
    p.add_argument("--annotations", help="sidecar annotations JSON")
    p.add_argument("--out", help="output wav")

    p = sub.add_parser("staircase", help="run a simulated adaptive experiment")
    p.add_argument("--listeners", help="JSON array of listener parameters")
    p.add_argument("--token-id", dest="token_id")
    p.add_argument("--ladder", help="comma-separated SNR levels in dB")
    p.add_argument("--out-dir", dest="out_dir")

    p = sub.add_parser("augment", help="expand seeds into distortion continua")
    p.add_argument("--manifest", help="seed corpus manifest")
    p.add_argument("--root")
    p.add_argument("--annotations")
    p.add_argument("--gates", help="gate file JSON")
    p.add_argument("--families", help="comma-separated distortion families")
    p.add_argument("--out-dir", dest="out_dir")

    p = sub.add_parser("featurize", help="extract log-spectrum features")
    p.add_argument("--manifest", help="augmented manifest")
    p.add_argument("--root")
    p.add_argument("--annotations")
    p.add_argument("--out-dir", dest="out_dir")

    p = sub.add_parser("train", help="train a per-consonant threshold regressor")
    p.add_argument("--features", help="feature manifest from featurize")
    p.add_argument("--root")
    p.add_argument("--consonant", choices=sorted(cnn.TUNED_HYPERPARAMS))
    p.add_argument("--seed", type=int)
    p.add_argument("--n-conv", type=int, dest="n_conv")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--learning-rate", type=float, dest="learning_rate")
    p.add_argument("--dropout", type=float)
    p.add_argument("--max-epochs", type=int, dest="max_epochs")
    p.add_argument("--patience", type=int)
    p.add_argument("--out-dir", dest="out_dir")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a manifest")
    p.add_argument("--model", help="model checkpoint (npz)")
    p.add_argument("--features", help="feature manifest")
    p.add_argument("--root")
    p.add_argument("--consonant")
    p.add_argument("--out", help="metrics report JSON")

    p = sub.add_parser("baseline", help="mock ASR-defined thresholds and "
                                        "bias/variance vs human labels")
    p.add_argument("--manifest", help="labeled corpus manifest")
    p.add_argument("--root")
    p.add_argument("--annotations")
    p.add_argument("--noise", help="masker wav")
    p.add_argument("--ladder")
    p.add_argument("--lexicon", help="pronunciation lexicon file")
    p.add_argument("--mock-threshold", type=float, dest="mock_threshold")
    p.add_argument("--mock-slope", type=float, dest="mock_slope")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="report JSON")
    return parser


_COMMANDS = {
    "ltass": cmd_ltass,
    "synthnoise": cmd_synthnoise,
    "mix": cmd_mix,
    "staircase": cmd_staircase,
    "augment": cmd_augment,
    "featurize": cmd_featurize,
    "train": cmd_train,
    "eval": cmd_eval,
    "baseline": cmd_baseline,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        opts = _Options(args)
        _COMMANDS[args.command](opts)
    except SystemExit:
        raise
    except FileNotFoundError as exc:
        print(f"snr90 {args.command}: file not found: {exc.filename or exc}",
              file=sys.stderr)
        return EXIT_DATA
    except DataError as exc:
        print(f"snr90 {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # pragma: no cover - defensive
        print(f"snr90 {args.command}: internal error: {exc!r}", file=sys.stderr)
        return EXIT_INTERNAL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
