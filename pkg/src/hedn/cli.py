"""Command-line interface: synthetic data, DBSCAN tuning, training,
evaluation, leave-one-subject-out runs and embedding export.

Every command accepts ``--config FILE`` with flat ``key = value`` lines
(``#`` starts a comment). Flags override file values. Outputs other than
``timing.csv`` are byte-identical across reruns with the same inputs.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .clustering import tune_dbscan
from .data import (
    DataError,
    SubjectDataset,
    SynthConfig,
    cross_dataset_folds,
    load_subject,
    loso_folds,
    merge_labels_4to3,
    synth_generate,
    write_subject,
    zscore_per_domain,
)
from .engine import ConfigError, NumericError, TrainConfig, train, write_logs
from .nets import EMBED_DIM, embed, predict_logits
from .prototypes import load_checkpoint, match_batch, predict_embeddings, save_checkpoint

log = logging.getLogger("hedn")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

PROTOCOLS = ("loso", "cross-dataset", "single-fold")
MERGE_CHOICES = ("none", "sources", "targets", "all")


# --------------------------------------------------------------------------
# Configuration: one flat key space shared by the file and the flags
# --------------------------------------------------------------------------


def _parse_bool(text: str) -> bool:
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_noise(text: str) -> tuple[tuple[int, float], ...]:
    """``"1:0.4,3:0.2"`` -> ((1, 0.4), (3, 0.2))."""
    out = []
    for item in filter(None, (p.strip() for p in text.split(","))):
        subject, frac = item.split(":")
        out.append((int(subject), float(frac)))
    return tuple(out)


def _choice(options):
    def parse(text: str) -> str:
        v = text.strip()
        if v not in options:
            raise ValueError(f"expected one of {', '.join(options)}, got {v!r}")
        return v
    return parse


def _registry() -> dict:
    keys = {}
    for f in dataclasses.fields(TrainConfig):
        default = f.default
        keys[f.name] = _parse_bool if isinstance(default, bool) else type(default)
    for f in dataclasses.fields(SynthConfig):
        if f.name == "label_noise":
            keys[f.name] = _parse_noise
        elif f.name != "seed":
            keys[f.name] = type(f.default)
    keys.update(protocol=_choice(PROTOCOLS), merge_4to3=_choice(MERGE_CHOICES),
                zscore=_parse_bool, n_classes=int)
    return keys


KEYS = _registry()
RUN_DEFAULTS = dict(protocol="loso", merge_4to3="none", zscore=False, n_classes="from labels")
TRAIN_DEFAULTS = {f.name: f.default for f in dataclasses.fields(TrainConfig)} | RUN_DEFAULTS
SYNTH_DEFAULTS = {f.name: f.default for f in dataclasses.fields(SynthConfig)} | {"label_noise": "none"}


def read_config(path) -> dict:
    """Parse a ``key = value`` file; unknown keys and bad values raise
    ConfigError with the line number."""
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        try:
            values[key] = KEYS[key](value)
        except ValueError as exc:
            raise ConfigError(f"{path}:{lineno}: {key}: {exc}") from None
    return values


def merged_settings(args) -> dict:
    settings = read_config(args.config) if args.config else {}
    for key in KEYS:
        v = getattr(args, key, None)
        if v is not None:
            settings[key] = v
    return settings


def train_config(settings: dict) -> TrainConfig:
    names = {f.name for f in dataclasses.fields(TrainConfig)}
    return TrainConfig(**{k: v for k, v in settings.items() if k in names}).validate()


def synth_config(settings: dict) -> SynthConfig:
    names = {f.name for f in dataclasses.fields(SynthConfig)}
    try:
        return SynthConfig(**{k: v for k, v in settings.items() if k in names})
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _type_for_flag(parse):
    def wrapped(text):
        try:
            return parse(text)
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None
    return wrapped


def add_setting_flags(parser: argparse.ArgumentParser, names, defaults) -> None:
    group = parser.add_argument_group("settings (override --config)")
    for name in names:
        group.add_argument("--" + name.replace("_", "-"), dest=name, default=None,
                           type=_type_for_flag(KEYS[name]), metavar="V",
                           help=f"default: {defaults[name]}")


TRAIN_FLAGS = [f.name for f in dataclasses.fields(TrainConfig)] + ["zscore", "n_classes"]
SYNTH_FLAGS = [f.name for f in dataclasses.fields(SynthConfig) if f.name != "seed"] + ["seed"]


# --------------------------------------------------------------------------
# Helpers
# --------------------------------------------------------------------------


def _float(v: float) -> str:
    return repr(float(v))


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def load_domains(paths, first_id: int, settings: dict, merge: bool) -> list[SubjectDataset]:
    out = []
    for i, p in enumerate(paths):
        ds = load_subject(p, domain_id=first_id + i)
        if merge:
            ds = merge_labels_4to3(ds)
        if settings.get("zscore"):
            ds = zscore_per_domain(ds)
        out.append(ds)
    if len({d.n_features for d in out}) > 1:
        raise DataError("subject files disagree on the feature dimension")
    return out


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true), np.asarray(y_pred)), 1)
    return cm


@dataclasses.dataclass
class EvalReport:
    accuracy: float
    confusion: np.ndarray
    n_samples: int
    adaptation_seconds: float = 0.0
    inference_ms_per_sample: float = 0.0


def evaluate(model, banks, target: SubjectDataset, adaptation_seconds: float = 0.0) -> tuple[EvalReport, np.ndarray]:
    if target.n_features != model.d_in:
        raise DataError(f"target has {target.n_features} features, checkpoint expects {model.d_in}")
    t0 = time.perf_counter()
    if banks is None:
        pred = np.argmax(predict_logits(model, target.features), axis=1)
    else:
        pred = predict_embeddings(banks, embed(model, target.features))
    latency = (time.perf_counter() - t0) * 1000.0 / max(len(target), 1)
    if not target.labeled:
        return EvalReport(float("nan"), np.zeros((model.n_classes,) * 2, np.int64), len(target),
                          adaptation_seconds, latency), pred
    target.check_labels(model.n_classes)
    cm = confusion_matrix(target.labels, pred, model.n_classes)
    acc = float(np.trace(cm) / cm.sum())
    return EvalReport(acc, cm, len(target), adaptation_seconds, latency), pred


def write_confusion(path, cm: np.ndarray) -> None:
    n = cm.shape[0]
    _write_csv(path, ["true_label"] + [f"pred_{j}" for j in range(n)],
               [[i] + cm[i].tolist() for i in range(n)])


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_synth(args) -> int:
    settings = merged_settings(args)
    cfg = synth_config(settings)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for ds in synth_generate(cfg):
        write_subject(out / f"subject_{ds.domain_id:02d}.csv", ds)
    log.info("wrote %d subjects to %s", cfg.n_subjects, out)
    return EXIT_OK


def cmd_tune_dbscan(args) -> int:
    settings = merged_settings(args)
    (target,) = load_domains([args.target], 0, settings, False)
    trials = target.trial_ids if settings.get("tune_with_trials", True) else None
    res = tune_dbscan(target.features, trial_ids=trials,
                      class_labels=target.labels if target.labeled else None)
    rows = [[_float(c.eps), c.min_samples, c.n_clusters, _float(c.noise_fraction), _float(c.score)]
            for c in res.grid]
    _write_csv(args.out, ["eps", "min_samples", "n_clusters", "noise_fraction", "score"], rows)
    chosen = "fallback" if res.params is None else f"eps={res.params.eps} min_samples={res.params.min_samples}"
    print(f"selected {chosen} score={res.score:.6f} clusters={res.assignment.n_clusters}")
    return EXIT_OK


def _run_fold(sources, target, cfg, n_classes):
    res = train(sources, target, cfg, n_classes=n_classes)
    report, pred = evaluate(res.model, res.banks, target, res.adaptation_time)
    return res, report, pred


def cmd_train(args) -> int:
    settings = merged_settings(args)
    cfg = train_config(settings)
    merge = settings.get("merge_4to3", "none")
    sources = load_domains(args.sources, 0, settings, merge in ("sources", "all"))
    (target,) = load_domains([args.target], len(sources), settings, merge in ("targets", "all"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    res, report, pred = _run_fold(sources, target, cfg, settings.get("n_classes"))
    save_checkpoint(out / "model.ckpt", res.model, res.banks)
    write_logs(out / "log.csv", res.logs)
    _write_csv(out / "predictions.csv", ["index", "prediction"], enumerate(pred.tolist()))
    _write_csv(out / "summary.csv", ["n_samples", "accuracy", "eps", "min_samples"],
               [[report.n_samples, _float(report.accuracy),
                 "" if res.dbscan_params is None else _float(res.dbscan_params.eps),
                 "" if res.dbscan_params is None else res.dbscan_params.min_samples]])
    write_confusion(out / "confusion.csv", report.confusion)
    _write_csv(out / "timing.csv", ["adaptation_seconds", "inference_ms_per_sample"],
               [[_float(report.adaptation_seconds), _float(report.inference_ms_per_sample)]])
    print(f"accuracy={report.accuracy:.4f} adaptation={report.adaptation_seconds:.2f}s")
    return EXIT_OK


def cmd_eval(args) -> int:
    settings = merged_settings(args)
    try:
        model, banks = load_checkpoint(args.checkpoint)
    except (OSError, ValueError) as exc:
        raise DataError(f"{args.checkpoint}: {exc}") from exc
    merge = settings.get("merge_4to3", "none") in ("targets", "all")
    (target,) = load_domains([args.target], 0, settings, merge)
    report, pred = evaluate(model, banks, target)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_csv(out / "predictions.csv", ["index", "prediction"], enumerate(pred.tolist()))
    _write_csv(out / "report.csv", ["n_samples", "accuracy"],
               [[report.n_samples, _float(report.accuracy)]])
    write_confusion(out / "confusion.csv", report.confusion)
    _write_csv(out / "timing.csv", ["inference_ms_per_sample"],
               [[_float(report.inference_ms_per_sample)]])
    print(f"accuracy={report.accuracy:.4f}")
    return EXIT_OK


def cmd_loso(args) -> int:
    settings = merged_settings(args)
    cfg = train_config(settings)
    protocol = settings.get("protocol", "loso")
    merge = settings.get("merge_4to3", "none")
    subjects = load_domains(args.subjects, 0, settings, merge in ("sources", "all"))
    if protocol == "loso":
        folds = loso_folds(subjects)
    elif protocol == "cross-dataset":
        if not args.targets:
            raise ConfigError("cross-dataset protocol needs --targets")
        targets = load_domains(args.targets, 0, settings, merge in ("targets", "all"))
        folds = cross_dataset_folds(subjects, targets)
    else:
        if len(subjects) < 3:
            raise ConfigError("single-fold protocol needs at least 2 sources and 1 target")
        folds = loso_folds(subjects)[-1:]
    n_classes = settings.get("n_classes") or max(
        int(s.labels.max()) + 1 for f in folds for s in f.sources)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, timing, accs = [], [], []
    total_cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    worst = EXIT_OK
    for i, fold in enumerate(folds):
        try:
            _, report, _ = _run_fold(fold.sources, fold.target, cfg, n_classes)
        except (NumericError, ConfigError, DataError) as exc:
            code = _exit_code(exc)
            worst = max(worst, code)
            log.error("fold %d (target %d) failed: %s", i, fold.target.domain_id, exc)
            rows.append([i, fold.target.domain_id, len(fold.target), "", "", f"error: {exc}"])
            continue
        rows.append([i, fold.target.domain_id, report.n_samples, _float(report.accuracy), "", "ok"])
        timing.append([i, _float(report.adaptation_seconds), _float(report.inference_ms_per_sample)])
        if not np.isnan(report.accuracy):
            accs.append(report.accuracy)
            total_cm += report.confusion
        log.info("fold %d target %d accuracy %.4f", i, fold.target.domain_id, report.accuracy)
    mean = float(np.mean(accs)) if accs else float("nan")
    std = float(np.std(accs)) if accs else float("nan")
    rows.append(["mean", "", sum(r[2] for r in rows), _float(mean), _float(std), f"{len(accs)} folds"])
    _write_csv(out / "report.csv", ["fold", "target", "n_samples", "accuracy", "std", "status"], rows)
    write_confusion(out / "confusion.csv", total_cm)
    _write_csv(out / "timing.csv", ["fold", "adaptation_seconds", "inference_ms_per_sample"], timing)
    print(f"mean accuracy={mean:.4f} std={std:.4f} over {len(accs)} folds")
    return worst


def cmd_export_embeddings(args) -> int:
    settings = merged_settings(args)
    try:
        model, banks = load_checkpoint(args.checkpoint)
    except (OSError, ValueError) as exc:
        raise DataError(f"{args.checkpoint}: {exc}") from exc
    (ds,) = load_domains([args.input], args.domain_id, settings, False)
    if ds.n_features != model.d_in:
        raise DataError(f"input has {ds.n_features} features, checkpoint expects {model.d_in}")
    z = embed(model, ds.features)
    # cluster id: nearest target prototype, as used for prediction
    clusters = match_batch(z, banks.target_bank) if banks is not None else np.full(len(ds), -1)
    header = ["domain_id", "cluster_id", "label"] + [f"z{i}" for i in range(EMBED_DIM)]
    rows = ([ds.domain_id, int(c), int(y)] + [_float(v) for v in row]
            for c, y, row in zip(clusters, ds.labels, z))
    _write_csv(args.out, header, rows)
    return EXIT_OK


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hedn", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_text, flags):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key = value settings file")
        p.set_defaults(func=func)
        add_setting_flags(p, flags, SYNTH_DEFAULTS if func is cmd_synth else TRAIN_DEFAULTS)
        return p

    p = command("synth", cmd_synth, "write synthetic subject CSVs", SYNTH_FLAGS)
    p.add_argument("--out", required=True, help="output directory")

    p = command("tune-dbscan", cmd_tune_dbscan, "grid-search DBSCAN on a target file",
                ["tune_with_trials", "zscore"])
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True, help="grid CSV path")

    p = command("train", cmd_train, "train on sources, adapt to a target", TRAIN_FLAGS + ["merge_4to3"])
    p.add_argument("--sources", nargs="+", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True, help="output directory")

    p = command("eval", cmd_eval, "evaluate a checkpoint on a target file", ["zscore", "merge_4to3"])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--out", required=True, help="output directory")

    p = command("loso", cmd_loso, "run every fold of a protocol",
                TRAIN_FLAGS + ["protocol", "merge_4to3"])
    p.add_argument("--subjects", nargs="+", required=True, help="subject files (sources for cross-dataset)")
    p.add_argument("--targets", nargs="*", default=[], help="target files for cross-dataset")
    p.add_argument("--out", required=True, help="output directory")

    p = command("export-embeddings", cmd_export_embeddings, "write g(f(x)) embeddings", ["zscore"])
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--domain-id", type=int, default=0)
    p.add_argument("--out", required=True, help="CSV path")
    return parser


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, NumericError):
        return EXIT_NUMERIC
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    return EXIT_DATA


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, NumericError, DataError) as exc:
        print(f"hedn {args.command}: {exc}", file=sys.stderr)
        return _exit_code(exc)
    except OSError as exc:
        print(f"hedn {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
