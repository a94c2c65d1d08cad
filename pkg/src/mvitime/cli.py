"""Command-line entry point: ``mvitime <command> [options]``.

Typical flow::

    mvitime ingest --data-dir sleep-cassette --subset EDF-20
    mvitime pretrain --epochs runs/run-<digest>/epochs.npz
    mvitime finetune --epochs ... --checkpoint runs/run-<digest>/pretrain-self.ckpt
    mvitime evaluate --epochs ... --checkpoint runs/run-<digest>/finetune.ckpt

Every command reads the same config file (``--config``); ``--set
section.key=value`` and the dedicated flags override it. Exit status is 0
on success and a per-family code otherwise (see :mod:`mvitime.errors`).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import pipeline
from .config import RunConfig, load_config, read_values
from .errors import ConfigError, MViTimeError
from .eval import ConfusionMatrix, evaluate, format_table, metrics, plot_confusion, write_outputs
from .ingest import STAGE_NAMES, EpochDataset, build_manifest, load_directory, reference_count_diff
from .model import Checkpoint, build_model, load_checkpoint, save_checkpoint
from .seeding import subseed
from .synthetic import make_dataset
from .train import combine_backbones, finetune, pretrain_cross_subject, pretrain_self, write_report

log = logging.getLogger("mvitime")


# ---- config plumbing ---------------------------------------------------------------------

def _overrides(args) -> list[str]:
    out = list(args.set or [])
    for flag, key in (("seed", "run.seed"), ("data_dir", "run.data_dir"), ("out_dir", "run.out_dir"),
                      ("subset", "run.subset"), ("channel", "run.channel"), ("trim_min", "run.trim_min"),
                      ("alpha", "combine.alpha"), ("mode", "combine.mode"), ("held_out", "eval.held_out"),
                      ("folds", "eval.folds")):
        value = getattr(args, flag, None)
        if value is not None:
            out.append(f"{key}={value}")
    if getattr(args, "deterministic", None) is not None:
        out.append(f"run.deterministic={args.deterministic}")
    return out


def _config(args, data: EpochDataset | None = None) -> RunConfig:
    overrides = _overrides(args)
    if data is not None and "model.input_length" not in read_values(args.config, overrides):
        # The epoch length comes from the data unless pinned explicitly.
        overrides.append(f"model.input_length={data.epoch_length}")
    cfg = load_config(args.config, overrides)
    if cfg.deterministic:
        torch.use_deterministic_algorithms(True)
        torch.set_num_threads(1)
    torch.manual_seed(cfg.seed)
    return cfg


def _stamp(cfg: RunConfig, **extra) -> dict:
    return {"config_digest": cfg.digest(), "seed": cfg.seed, **extra}


def _load_epochs(args) -> EpochDataset:
    path = Path(args.epochs)
    if not path.is_file():
        raise ConfigError(f"epoch file {path} does not exist")
    data = EpochDataset.load(path)
    if getattr(args, "subjects", None):
        data = data.only_subjects([s.strip() for s in args.subjects.split(",") if s.strip()])
    return data


def _out(args, cfg: RunConfig, name: str) -> Path:
    path = Path(args.out) if getattr(args, "out", None) else cfg.run_dir() / name
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _save_model(path: Path, model, cfg: RunConfig, reports=()) -> None:
    meta = _stamp(cfg, reports=[r.to_dict() for r in reports])
    save_checkpoint(path, Checkpoint.from_model(model, meta))
    for r in reports:
        write_report(r, path.parent, path.stem if path.stem == r.phase else f"{path.stem}-{r.phase}")
    print(f"wrote {path}")


# ---- commands ------------------------------------------------------------------------------

def cmd_ingest(args) -> int:
    cfg = _config(args)
    cfg.validate_paths()
    data, summaries = load_directory(cfg.data_dir, cfg.channel, cfg.trim_min, cfg.subset)
    manifest = {**build_manifest(data, summaries, cfg.subset, cfg.channel, cfg.trim_min), **_stamp(cfg)}
    out = _out(args, cfg, "manifest.json")
    data.save(out.with_suffix(".npz") if args.out else out.parent / "epochs.npz", _stamp(cfg))
    pipeline.write_json(out, manifest)
    diff = reference_count_diff(data, cfg.subset)
    if diff:
        print(f"{'':<10}" + "".join(f"{n:>9}" for n in diff["stages"]) + f"{'total':>9}")
        for key in ("reference", "observed", "difference"):
            total = sum(diff[key])
            print(f"{key:<10}" + "".join(f"{v:>9}" for v in diff[key]) + f"{total:>9}")
    print(f"wrote {out}")
    return 0


def cmd_synth(args) -> int:
    cfg = _config(args)
    data = make_dataset(args.n_subjects, args.epochs_per_stage, args.length, seed=cfg.seed)
    out = _out(args, cfg, "synthetic.npz")
    data.save(out, _stamp(cfg, source="synthetic"))
    print(f"wrote {out} ({len(data)} epochs, {len(data.subject_ids())} subjects)")
    return 0


def cmd_pretrain(args) -> int:
    data = _load_epochs(args)
    cfg = _config(args, data)
    out = _out(args, cfg, "pretrain-self.ckpt")
    model, report = pretrain_self(data, cfg.model, cfg.pretrain, cfg.augment,
                                  checkpoint_dir=args.checkpoint_dir, resume=args.resume)
    _save_model(out, model, cfg, [report])
    return 0


def cmd_pretrain_isc(args) -> int:
    data = _load_epochs(args)
    cfg = _config(args, data)
    out = _out(args, cfg, "pretrain-isc.ckpt")
    model, report = pretrain_cross_subject(data, cfg.model, cfg.pretrain, cfg.augment, cfg.pca_components,
                                           checkpoint_dir=args.checkpoint_dir, resume=args.resume)
    _save_model(out, model, cfg, [report])
    return 0


def cmd_finetune(args) -> int:
    data = _load_epochs(args)
    cfg = _config(args, data)
    if args.checkpoint:
        start = load_checkpoint(args.checkpoint)
    else:
        start = build_model(cfg.model, subseed(cfg.seed, "init"))
    out = _out(args, cfg, "finetune.ckpt")
    model, report = finetune(start, data, cfg.finetune, checkpoint_dir=args.checkpoint_dir, resume=args.resume)
    _save_model(out, model, cfg, [report])
    return 0


def cmd_combine(args) -> int:
    cfg = _config(args)
    model = combine_backbones(load_checkpoint(args.self_ckpt), load_checkpoint(args.cross_ckpt),
                              cfg.combine_alpha, cfg.combine_mode)
    _save_model(_out(args, cfg, f"combined-{cfg.combine_mode}.ckpt"), model, cfg)
    return 0


def cmd_evaluate(args) -> int:
    data = _load_epochs(args)
    cfg = _config(args, data)
    model = load_checkpoint(args.checkpoint).build()
    cm, report = evaluate(model, data)
    directory = Path(args.out) if args.out else cfg.run_dir()
    write_outputs(directory, args.stem, cm, report,
                  _stamp(cfg, checkpoint=str(args.checkpoint), subjects=data.subject_ids()), args.heatmap)
    print(format_table({args.stem: report}))
    return 0


def cmd_loso(args) -> int:
    data = _load_epochs(args)
    cfg = _config(args, data)
    report = pipeline.run_loso_cross_subject(cfg, data)
    directory = Path(args.out) if args.out else cfg.run_dir()
    pipeline.write_study(directory, "loso", report, cfg)
    print(report.table())
    return 0


def cmd_ablation(args) -> int:
    data = _load_epochs(args)
    cfg = _config(args, data)
    report = pipeline.run_ablation(cfg, data)
    directory = Path(args.out) if args.out else cfg.run_dir()
    pipeline.write_study(directory, "ablation", report, cfg)
    print(report.table())
    return 0


def render_report(payload: dict) -> str:
    """Text table for any JSON report written by evaluate, loso or ablation."""
    if "grid" in payload:
        lines = []
        for subject, methods in payload["grid"].items():
            rows = {f"{subject} {m}": _row(methods[m]) for m in pipeline.LOSO_METHODS}
            lines.append(format_table(rows))
        return "\n\n".join(lines)
    if "rows" in payload:
        return format_table({name: _row(r) for name, r in payload["rows"].items()})
    if "confusion_matrix" in payload:
        return format_table({"model": metrics(ConfusionMatrix(payload["confusion_matrix"]))})
    raise ConfigError("unrecognised report layout")


def _row(d: dict) -> list[float]:
    return [100 * d["accuracy"], 100 * d["macro_f1"], *(100 * d["per_class"][n]["f1"] for n in STAGE_NAMES)]


def cmd_report(args) -> int:
    for path in args.inputs:
        payload = json.loads(Path(path).read_text())
        print(f"# {path}  (config {payload.get('config_digest', '?')}, seed {payload.get('seed', '?')})")
        print(render_report(payload))
        if args.heatmap and "confusion_matrix" in payload:
            cm = ConfusionMatrix(payload["confusion_matrix"])
            target = Path(path).with_suffix(".png")
            plot_confusion(cm, metrics(cm), target)
            print(f"wrote {target}")
    return 0


# ---- parser ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="sectioned key=value config file")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override one config value")
    common.add_argument("--seed", type=int)
    common.add_argument("--deterministic", dest="deterministic", action="store_true", default=None)
    common.add_argument("--no-deterministic", dest="deterministic", action="store_false")
    common.add_argument("--out-dir", help="root of run directories (env MVITIME_OUT_DIR)")
    common.add_argument("-v", "--verbose", action="store_true")

    data_opts = argparse.ArgumentParser(add_help=False)
    data_opts.add_argument("--epochs", required=True, help="epoch .npz written by ingest or synth")
    data_opts.add_argument("--subjects", help="comma-separated subject ids to keep")
    data_opts.add_argument("--out", help="output path (default: inside the run directory)")

    train_opts = argparse.ArgumentParser(add_help=False)
    train_opts.add_argument("--checkpoint-dir", help="write intermediate training state here")
    train_opts.add_argument("--resume", help="resume from a saved state (path without suffix)")

    parser = argparse.ArgumentParser(prog="mvitime", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common], help="Sleep-EDF directory -> epochs + manifest")
    p.add_argument("--data-dir", help="directory of *-PSG.edf / *-Hypnogram.edf (env MVITIME_DATA_DIR)")
    p.add_argument("--channel")
    p.add_argument("--trim-min", type=int)
    p.add_argument("--subset", help="EDF-20, EDF-78 or a comma-separated subject list")
    p.add_argument("--out", help="manifest path; the epochs go next to it as .npz")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic epoch file")
    p.add_argument("--n-subjects", type=int, default=3)
    p.add_argument("--epochs-per-stage", type=int, default=8)
    p.add_argument("--length", type=int, default=256)
    p.add_argument("--out")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("pretrain", parents=[common, data_opts, train_opts], help="self-contrast pre-training")
    p.set_defaults(func=cmd_pretrain)
    p = sub.add_parser("pretrain-isc", parents=[common, data_opts, train_opts],
                       help="inter-subject contrast pre-training")
    p.set_defaults(func=cmd_pretrain_isc)

    p = sub.add_parser("finetune", parents=[common, data_opts, train_opts], help="supervised fine-tuning")
    p.add_argument("--checkpoint", help="pre-trained checkpoint (omit to train from scratch)")
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("combine", parents=[common], help="weighted combination of two backbones")
    p.add_argument("--self", dest="self_ckpt", required=True)
    p.add_argument("--cross", dest="cross_ckpt", required=True)
    p.add_argument("--alpha", type=float)
    p.add_argument("--mode", choices=("features", "full"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_combine)

    p = sub.add_parser("evaluate", parents=[common, data_opts], help="confusion matrix and metrics")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--stem", default="evaluation")
    p.add_argument("--heatmap", action="store_true")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("loso", parents=[common, data_opts], help="cross-subject study of the three variants")
    p.add_argument("--held-out", help="comma-separated subjects (default: every subject)")
    p.set_defaults(func=cmd_loso)

    p = sub.add_parser("ablation", parents=[common, data_opts], help="pre-training ablation")
    p.add_argument("--folds", type=int)
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("report", help="render saved JSON reports as tables")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--heatmap", action="store_true")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MViTimeError as exc:
        print(f"error ({type(exc).__name__}): {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
