"""Command-line entry point: ``caad synth | train | eval | score | compare``.

Every flag can also come from an environment variable named ``CAAD_`` plus
the flag name in upper case (``--tconf`` -> ``CAAD_TCONF``); an explicit flag
wins over the environment, which wins over the config file.
"""

from __future__ import annotations

import argparse
import datetime as _dt
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import write_checkpoint
from .config import RunConfig, dump_config, load_config, to_dict
from .confidence import DecisionThresholds
from .data import Dataset, file_sha256, load_manifest, save_manifest, synth_images, synth_tabular
from .estimator import CAADetector
from .evaluation import (
    ExperimentConfig,
    REPORT_COLUMNS,
    columns_text,
    confusion_metrics,
    format_table,
    imbalance_experiment,
    known_split,
    novel_split,
    roc_auc,
    roc_curve_points,
    shift_experiment,
    sweep_from_scores,
    to_jsonl,
)
from .exceptions import CheckpointError, ConfigError, DataError, DivergenceError

log = logging.getLogger("caad")

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE, EXIT_CHECKPOINT = 0, 1, 2, 3, 4, 5
ENV_PREFIX = "CAAD_"


def _env(name, default=None):
    return os.environ.get(ENV_PREFIX + name.upper(), default)


def _now():
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _float_list(text):
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def _int_list(text):
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.seed = int(args.seed)
    if getattr(args, "stages", None):
        cfg.model.stages = str(args.stages)
    if getattr(args, "fractions", None):
        cfg.experiment.fractions = _float_list(args.fractions)
    if getattr(args, "seeds", None):
        cfg.experiment.seeds = _int_list(args.seeds)
    if getattr(args, "tano", None) is not None:
        cfg.model.t_ano = float(args.tano)
    if getattr(args, "tconf", None) is not None:
        cfg.model.t_conf = float(args.tconf)
    return cfg.resolved()


def write_run_manifest(out: Path, command, cfg, inputs=(), checkpoint=None, outputs=(), started=None,
                       finished=None):
    record = {
        "command": command,
        "argv": sys.argv[1:],
        "version": __version__,
        "config": to_dict(cfg) if cfg is not None else None,
        "seed": cfg.seed if cfg is not None else None,
        "inputs": {str(p): file_sha256(p) for p in inputs},
        "checkpoint": None if checkpoint is None else str(checkpoint),
        "outputs": [str(p) for p in outputs],
        "started": started or _now(),
        "finished": finished,
    }
    (out / "run_manifest.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return record


def _data_file(path, default_name):
    path = Path(path)
    return path / default_name if path.is_dir() else path


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args):
    cfg = resolve_config(args)
    out = Path(args.out)
    parent = out.parent if out.parent != Path("") else Path(".")
    if not parent.exists():
        raise DataError(f"parent directory {parent} does not exist")
    try:
        staging = Path(tempfile.mkdtemp(prefix=".caad-synth-", dir=parent))
    except OSError as exc:
        raise DataError(f"cannot write to {parent}: {exc}") from exc
    try:
        if cfg.data_kind == "image":
            train, test = synth_images(cfg.images)
        else:
            train, test = synth_tabular(cfg.synth)
        save_manifest(train, staging / "train.manifest")
        save_manifest(test, staging / "test.manifest")
        (staging / "config.txt").write_text(dump_config(cfg))
        meta = {"train": train.metadata, "test": test.metadata}
        (staging / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
        outputs = sorted(p.name for p in staging.iterdir())
        write_run_manifest(staging, "synth", cfg, outputs=outputs, finished=_now())
        out.mkdir(parents=True, exist_ok=True)
        for item in staging.iterdir():
            dest = out / item.name
            if dest.is_dir():
                shutil.rmtree(dest)
            os.replace(item, dest)
    except OSError as exc:
        raise DataError(f"cannot write dataset to {out}: {exc}") from exc
    finally:
        shutil.rmtree(staging, ignore_errors=True)
    print(f"wrote {len(train)} training and {len(test)} test examples to {out}")
    return EXIT_OK


def _load_detector(path) -> CAADetector:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return CAADetector.from_bytes(blob)


def _check_compatible(model: CAADetector, data: Dataset):
    if tuple(model.input_shape_) != data.input_shape:
        raise DataError(f"checkpoint expects inputs of shape {tuple(model.input_shape_)} "
                        f"but the data has shape {data.input_shape}")


def cmd_train(args):
    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train_path = _data_file(args.data, "train.manifest")
    data = load_manifest(train_path)
    if data.kind == "image" and cfg.model.extractor == "identity":
        cfg.model.extractor = "tiny_cnn"
    if args.checkpoint:
        model = _load_detector(args.checkpoint)
        _check_compatible(model, data)
        model.set_params(warm_start=True, stages=cfg.model.stages)
    else:
        model = CAADetector(**cfg.detector_params())
    started = _now()
    final = out / "model.ckpt"
    write_run_manifest(out, "train", cfg, inputs=[train_path], checkpoint=final, started=started)
    metrics_path = out / "metrics.jsonl"
    outputs = [metrics_path]
    prior = list(getattr(model, "history_", []))
    with open(metrics_path, "w") as fh:

        def log_epoch(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()
            log.info("stage %s epoch %s %s", rec["stage"], rec["epoch"],
                     {k: round(v, 6) for k, v in rec.items() if isinstance(v, float)})

        def stage_done(stage, network, history):
            # snapshot after each stage so any prefix of the run can be resumed
            model.network_ = network
            model.input_shape_ = data.input_shape
            model.stages_trained_ = tuple(sorted(set(getattr(model, "stages_trained_", ())) | {stage}))
            model.history_ = prior + history
            path = out / f"stage{stage}.ckpt"
            write_checkpoint(path, model.to_bytes({"stage": stage}))
            outputs.append(path)

        model.fit(data.X, data.y, log=log_epoch, on_stage_end=stage_done)
    write_checkpoint(final, model.to_bytes({"stage": max(model.stages_trained_)}))
    outputs.append(final)
    write_run_manifest(out, "train", cfg, inputs=[train_path], checkpoint=final, outputs=outputs,
                       started=started, finished=_now())
    print(f"trained stages {''.join(map(str, model.stages_trained_))}; checkpoint {final}")
    return EXIT_OK


def _thresholds(args, model: CAADetector) -> DecisionThresholds:
    th = model.thresholds_
    t_ano = th.t_ano if args.tano is None else float(args.tano)
    t_conf = th.t_conf if args.tconf is None else float(args.tconf)
    return DecisionThresholds(t_ano, t_conf)


def evaluate_dataset(model: CAADetector, data: Dataset, th: DecisionThresholds, grid):
    """Metric reports per split plus a confidence sweep over ``grid`` on the full set."""
    reports, sweeps, curves = [], {}, {}
    splits = {"all": data}
    if "novel" in set(data.subclass.astype(str)):
        splits["known"] = known_split(data)
        splits["novel"] = novel_split(data)
    for name, split in splits.items():
        if len(np.unique(split.y)) < 2:
            continue
        nu, iota = model.score_and_confidence(split.X)
        auc = roc_auc(nu, split.y)
        reports.append(confusion_metrics(model.predict(split.X, th), split.y, thresholds=th, auc=auc,
                                         label=name))
        sweeps[name] = sweep_from_scores(nu, iota, split.y, th.t_ano, grid)
        curves[name] = roc_curve_points(nu, split.y)
    return reports, sweeps, curves


def cmd_eval(args):
    model = _load_detector(args.checkpoint)
    data_path = _data_file(args.data, "test.manifest")
    data = load_manifest(data_path)
    _check_compatible(model, data)
    th = _thresholds(args, model)
    grid = _float_list(args.grid) if args.grid else (0.5, 0.6, 0.7, 0.8, 0.9, 0.95)
    reports, sweeps, curves = evaluate_dataset(model, data, th, grid)
    print(format_table(reports, REPORT_COLUMNS))
    for name, rows in sweeps.items():
        print(f"\nconfidence sweep ({name})")
        print(format_table(rows, REPORT_COLUMNS))
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.jsonl").write_text(to_jsonl(reports))
        (out / "metrics.txt").write_text(format_table(reports, REPORT_COLUMNS) + "\n")
        for name, rows in sweeps.items():
            (out / f"sweep_{name}.jsonl").write_text(to_jsonl(rows))
            (out / f"sweep_{name}.txt").write_text(format_table(rows, REPORT_COLUMNS) + "\n")
        for name, (fpr, tpr) in curves.items():
            (out / f"roc_{name}.tsv").write_text(columns_text(("fpr", "tpr"), fpr, tpr))
    return EXIT_OK


def score_records(model: CAADetector, data: Dataset, th: DecisionThresholds, batch_size=512):
    records = []
    for start in range(0, len(data), batch_size):
        chunk = data.X[start:start + batch_size]
        for i, d in enumerate(model.diagnose(chunk, th)):
            records.append({"id": str(data.ids[start + i]), "nu": d.score, "iota": d.confidence,
                            "diagnosis": d.decision.value, "reason": d.reason})
    return records


def cmd_score(args):
    model = _load_detector(args.checkpoint)
    data = load_manifest(_data_file(args.data, "test.manifest"))
    _check_compatible(model, data)
    th = _thresholds(args, model)
    text = to_jsonl(score_records(model, data, th, int(args.batch_size)))
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_compare(args):
    cfg = resolve_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    write_run_manifest(out, "compare", cfg, started=started)
    det = cfg.detector_params()
    det.pop("random_state")
    exp = ExperimentConfig(synth=cfg.synth, seeds=tuple(cfg.experiment.seeds),
                           fractions=tuple(cfg.experiment.fractions), detector=det,
                           n_jobs=cfg.experiment.n_jobs)
    imb = imbalance_experiment(exp)
    shift = shift_experiment(exp)
    cols = ("model", "fraction", "seed", "n_train_pos", "auc_known", "auc_novel", "separation",
            "novel_sensitivity", "novel_specificity")
    (out / "imbalance.jsonl").write_text(to_jsonl(imb["rows"]))
    (out / "imbalance.txt").write_text(format_table(imb["rows"], cols) + "\n")
    (out / "shift.jsonl").write_text(to_jsonl(shift["rows"] + shift.get("rows_novel_in_training", [])))
    fr = sorted(imb["fractions"], reverse=True)
    med = imb["median_auc_novel"]
    curve = columns_text(("fraction", "caad_auc", "binary_auc"), fr,
                         [med.get(("caad", f), np.nan) for f in fr],
                         [med.get(("binary", f), np.nan) for f in fr])
    (out / "auc_vs_fraction.tsv").write_text(curve)
    summary = {
        "imbalance": {"median_auc_novel": {f"{m}@{f}": v for (m, f), v in med.items()},
                      "median_auc_known": {f"{m}@{f}": v for (m, f), v in imb["median_auc_known"].items()},
                      "median_drop": imb["median_drop"]},
        "shift": {k: {str(m[0]): v for m, v in shift[k].items()}
                  for k in ("median_auc_novel", "median_auc_known", "median_auc_novel_in_training") if k in shift},
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    print(format_table(imb["rows"], cols))
    print(json.dumps(summary, indent=2, sort_keys=True))
    outputs = [out / n for n in ("imbalance.jsonl", "imbalance.txt", "shift.jsonl", "auc_vs_fraction.tsv",
                                 "summary.json")]
    write_run_manifest(out, "compare", cfg, outputs=outputs, started=started, finished=_now())
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="caad", description="Confidence-aware anomaly detection toolkit")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, *names):
        if "config" in names:
            sp.add_argument("--config", default=_env("config"), help="key = value config file")
        if "seed" in names:
            sp.add_argument("--seed", type=int, default=_env("seed"), help="root random seed")
        if "out" in names:
            sp.add_argument("--out", default=_env("out"), required=_env("out") is None and "out!" in names)
        if "data" in names:
            sp.add_argument("--data", default=_env("data"), required=_env("data") is None,
                            help="dataset directory or manifest file")
        if "checkpoint" in names:
            sp.add_argument("--checkpoint", default=_env("checkpoint"))
        if "thresholds" in names:
            sp.add_argument("--tano", type=float, default=_env("tano"))
            sp.add_argument("--tconf", type=float, default=_env("tconf"))

    sp = sub.add_parser("synth", help="generate a synthetic dataset")
    common(sp, "config", "seed", "out", "out!")
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("train", help="run the training stages")
    common(sp, "config", "seed", "out", "out!", "data", "checkpoint")
    sp.add_argument("--stages", default=_env("stages"), help="stages to run, e.g. 1, 12 or 123")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="metrics and confidence sweep for a checkpoint")
    common(sp, "out", "data", "checkpoint", "thresholds")
    sp.add_argument("--grid", default=_env("grid"), help="comma-separated confidence thresholds")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("score", help="per-example scores, confidences and diagnoses")
    common(sp, "out", "data", "checkpoint", "thresholds")
    sp.add_argument("--batch-size", default=_env("batch_size", 512), type=int)
    sp.set_defaults(func=cmd_score)

    sp = sub.add_parser("compare", help="imbalance and dataset-shift comparison against a binary baseline")
    common(sp, "config", "seed", "out", "out!")
    sp.add_argument("--fractions", default=_env("fractions"))
    sp.add_argument("--seeds", default=_env("seeds"))
    sp.set_defaults(func=cmd_compare)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    for attr in ("checkpoint",):
        if hasattr(args, attr) and args.func in (cmd_eval, cmd_score) and not getattr(args, attr):
            parser.error(f"--{attr} is required")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"caad: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"caad: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"caad: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except CheckpointError as exc:
        print(f"caad: checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (OSError, ValueError) as exc:
        print(f"caad: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
