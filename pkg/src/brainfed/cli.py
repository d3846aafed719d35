"""Command-line experiment runner.

Subcommands: ``generate``, ``train``, ``eval``, ``ablate``, ``audit``.

Training settings come from three layers, later ones winning:
built-in reference defaults, then a flat ``key=value`` config file
(``--config``), then explicit command-line flags. The seed falls back to the
``BRAINFED_SEED`` environment variable when neither the file nor a flag sets it.

Exit codes: 0 success, 2 invalid input (bad flags, config, dataset or
checkpoint), 3 privacy audit failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from brainfed import codec
from brainfed.audit import audit_log, corpus_canaries
from brainfed.codec import FormatError, MessageLog
from brainfed.evaluation import alignment_score, predict, retrieval_accuracy
from brainfed.losses import LossConfig
from brainfed.network import ParamSet
from brainfed.protocol import (
    MODALITIES,
    SYNC_MODES,
    TrainConfig,
    compose_global,
    reference_config,
    run_training,
    standardize,
)
from brainfed.synthdata import DatasetFormatError, SpecError, SyntheticSpec, generate, read_dataset, reference_spec, write_dataset

log = logging.getLogger("brainfed")

EXIT_OK, EXIT_INVALID, EXIT_AUDIT = 0, 2, 3
SEED_ENV = "BRAINFED_SEED"


class ConfigError(ValueError):
    pass


class _Invalid(Exception):
    """Raised inside a command to exit with the validation status."""


# ---- configuration ---------------------------------------------------------

_LOSS_KEYS = {"temperature": float, "batch_mean_softclip": bool, "bidirectional": bool}
_TRAIN_KEYS = {
    "epochs": int,
    "batch_size": int,
    "learning_rate": float,
    "momentum": float,
    "ema_alpha": float,
    "ema_per_epoch": bool,
    "dfl_steps": "optional_int",
    "dfl_eta": float,
    "hidden_dim": int,
    "num_residual_blocks": int,
    "advanced_layers": int,
    "token_dim": int,
    "sync": str,
    "seed": int,
    "workers": int,
    "eval_every": int,
    "standardize_inputs": bool,
}
CONFIG_KEYS = {**_TRAIN_KEYS, **_LOSS_KEYS}


def _coerce(key: str, text: str):
    kind = CONFIG_KEYS[key]
    text = text.strip()
    if kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if kind == "optional_int":
        return None if text.lower() in ("", "none") else int(text)
    return kind(text)


def parse_config(text: str, source: str = "<config>") -> dict:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in CONFIG_KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            out[key] = _coerce(key, value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    return out


def read_config(path: str | Path) -> dict:
    return parse_config(Path(path).read_text(), str(path))


def build_config(file_values: dict, flag_values: dict, env=None) -> TrainConfig:
    env = os.environ if env is None else env
    merged = {**file_values, **{k: v for k, v in flag_values.items() if v is not None}}
    if "seed" not in merged and env.get(SEED_ENV):
        try:
            merged["seed"] = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
    loss_kw = {k: merged.pop(k) for k in list(merged) if k in _LOSS_KEYS}
    if loss_kw:
        merged["loss"] = LossConfig(**loss_kw)
    return reference_config(**merged)


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for key in _TRAIN_KEYS:
        lines.append(f"{key} = {getattr(cfg, key)}")
    for key in _LOSS_KEYS:
        lines.append(f"{key} = {getattr(cfg.loss, key)}")
    return "\n".join(lines) + "\n"


def _env_seed(default: int) -> int:
    value = os.environ.get(SEED_ENV)
    if not value:
        return default
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {value!r}") from None


# ---- argument parsing ------------------------------------------------------

_REF = reference_config()
_SPEC = reference_spec()

_TRAIN_FLAGS = [
    ("--epochs", int, "epochs"),
    ("--batch-size", int, "batch_size"),
    ("--lr", float, "learning_rate"),
    ("--momentum", float, "momentum"),
    ("--ema-alpha", float, "ema_alpha"),
    ("--dfl-steps", int, "dfl_steps"),
    ("--dfl-eta", float, "dfl_eta"),
    ("--hidden-dim", int, "hidden_dim"),
    ("--residual-blocks", int, "num_residual_blocks"),
    ("--advanced-layers", int, "advanced_layers"),
    ("--eval-every", int, "eval_every"),
    ("--seed", int, "seed"),
    ("--workers", int, "workers"),
]


def _add_train_flags(p: argparse.ArgumentParser, sync: bool = True) -> None:
    p.add_argument("--config", type=Path, help="flat key=value file of training settings (default: none)")
    for flag, kind, field in _TRAIN_FLAGS:
        default = getattr(_REF, field)
        extra = f"; falls back to ${SEED_ENV}" if field == "seed" else ""
        p.add_argument(flag, type=kind, dest=field, default=None, help=f"{field} (default: {default}{extra})")
    if sync:
        p.add_argument("--sync", choices=SYNC_MODES, default=None, help=f"synchronization mode (default: {_REF.sync})")
    p.add_argument(
        "--ema-per-epoch", action="store_true", default=None, dest="ema_per_epoch",
        help="update the EMA shadow once per epoch instead of per batch (default: per batch)",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="brainfed", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr (default: off)")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic multi-subject dataset")
    g.add_argument("--out", type=Path, required=True, help="output .bgds path")
    g.add_argument("--subjects", type=int, default=_SPEC.num_subjects, help=f"number of subjects (default: {_SPEC.num_subjects})")
    g.add_argument(
        "--voxels", type=str, default=None,
        help="comma-separated voxel counts (default: first N of 48,56,64,72, extended by 8)",
    )
    g.add_argument("--train", type=int, default=_SPEC.train_per_subject, help=f"training samples per subject (default: {_SPEC.train_per_subject})")
    g.add_argument("--test", type=int, default=_SPEC.shared_test_count, help=f"shared test stimuli (default: {_SPEC.shared_test_count})")
    g.add_argument("--noise", type=float, default=_SPEC.noise_sigma, help=f"observation noise sigma (default: {_SPEC.noise_sigma})")
    g.add_argument("--signal-scale", type=float, default=_SPEC.signal_scale, help=f"mixing matrix scale (default: {_SPEC.signal_scale})")
    g.add_argument("--canaries", type=int, default=_SPEC.canaries, help=f"canary values planted in inputs (default: {_SPEC.canaries})")
    g.add_argument("--seed", type=int, default=None, help=f"data seed (default: ${SEED_ENV} or {_SPEC.data_seed})")

    t = sub.add_parser("train", help="run collaborative training and persist checkpoints")
    t.add_argument("--data", type=Path, required=True, help="dataset .bgds path")
    t.add_argument("--out", type=Path, required=True, help="output directory")
    t.add_argument("--checkpoint-every", type=int, default=0, help="also checkpoint every N epochs (default: 0, final only)")
    _add_train_flags(t)

    e = sub.add_parser("eval", help="evaluate checkpoints of a finished run")
    e.add_argument("--data", type=Path, required=True, help="dataset .bgds path")
    e.add_argument("--run", type=Path, required=True, help="directory written by train")
    e.add_argument("--epoch", type=int, default=None, help="checkpoint epoch (default: latest)")

    a = sub.add_parser("ablate", help="run an ablation matrix and write a CSV table")
    a.add_argument("--data", type=Path, required=True, help="dataset .bgds path")
    a.add_argument("--mode", choices=("sync_tiers", "subjects", "m_layers"), required=True, help="which sweep to run")
    a.add_argument("--seeds", type=str, default="1,2,3,4,5", help="comma-separated seed list (default: 1,2,3,4,5)")
    a.add_argument("--out", type=Path, default=None, help="CSV path (default: stdout)")
    _add_train_flags(a, sync=False)

    u = sub.add_parser("audit", help="search a message log for dataset canaries")
    u.add_argument("--log", type=Path, required=True, help="audit.bin written by train")
    u.add_argument("--data", type=Path, required=True, help="dataset .bgds path holding the canaries")
    return parser


# ---- commands --------------------------------------------------------------


def _voxels(arg: str | None, n: int) -> tuple[int, ...]:
    if arg:
        dims = tuple(int(v) for v in arg.split(","))
    else:
        base = [48, 56, 64, 72]
        dims = tuple(base[i] if i < len(base) else 72 + 8 * (i - 3) for i in range(n))
    return dims


def cmd_generate(args) -> int:
    spec = dataclasses.replace(
        _SPEC,
        num_subjects=args.subjects,
        voxel_dims=_voxels(args.voxels, args.subjects),
        train_per_subject=args.train,
        shared_test_count=args.test,
        noise_sigma=args.noise,
        signal_scale=args.signal_scale,
        canaries=args.canaries,
        data_seed=args.seed if args.seed is not None else _env_seed(_SPEC.data_seed),
    )
    corpus = generate(spec)
    args.out.parent.mkdir(parents=True, exist_ok=True)
    write_dataset(args.out, corpus)
    print(f"wrote {args.out}: {len(corpus.subjects)} subjects, {args.out.stat().st_size} bytes")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    file_values = read_config(args.config) if args.config else {}
    flags = {field: getattr(args, field) for _, _, field in _TRAIN_FLAGS}
    flags["ema_per_epoch"] = args.ema_per_epoch
    if hasattr(args, "sync"):
        flags["sync"] = args.sync
    return build_config(file_values, flags)


def save_run(out: Path, report, epoch: int) -> None:
    glob = report.global_state
    (out / f"global_ep{epoch}.bgck").write_bytes(codec.pack_modalities(glob.shared))
    for c in report.clients:
        (out / f"client{c.subject_id}_ep{epoch}.bgck").write_bytes(
            codec.pack_modalities({m: c.models[m].params for m in MODALITIES})
        )
        (out / f"fusion{c.subject_id}_ep{epoch}.bgck").write_bytes(
            codec.pack_modalities({m: c.models[m].fusion.as_paramset() for m in MODALITIES})
        )


def cmd_train(args) -> int:
    cfg = _train_config(args)
    corpus = read_dataset(args.data)
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(format_config(cfg))
    message_log = MessageLog(out / "audit.bin", keep=False)
    metrics_file = (out / "metrics.jsonl").open("w")

    def on_epoch(em, records):
        for r in records:
            metrics_file.write(json.dumps(r, sort_keys=True) + "\n")
        log.info("epoch %d done", em.epoch)

    try:
        report = run_training(corpus, cfg, message_log, on_epoch=on_epoch, on_state=_periodic(args, out))
    finally:
        metrics_file.close()
        message_log.close()
    save_run(out, report, cfg.epochs)
    print(f"trained {cfg.epochs} epochs on {len(corpus.subjects)} subjects; outputs in {out}")
    return EXIT_OK


def _periodic(args, out: Path):
    every = args.checkpoint_every
    if every <= 0:
        return None

    def hook(report_like, epoch):
        if epoch % every == 0:
            save_run(out, report_like, epoch)

    return hook


def _latest_epoch(run: Path) -> int:
    epochs = [int(p.stem.split("_ep")[1]) for p in run.glob("global_ep*.bgck")]
    if not epochs:
        raise _Invalid(f"no global_ep*.bgck checkpoints in {run}")
    return max(epochs)


def evaluate_run(corpus, run: Path, epoch: int | None = None) -> list[dict]:
    """Per-subject retrieval of saved individual and composed global models."""
    cfg_values = read_config(run / "config.txt") if (run / "config.txt").exists() else {}
    std = cfg_values.get("standardize_inputs", True)
    epoch = _latest_epoch(run) if epoch is None else epoch
    shared = codec.unpack_modalities((run / f"global_ep{epoch}.bgck").read_bytes())
    rows, preds = [], []
    for data in sorted(corpus.subjects, key=lambda s: s.subject_id):
        path = run / f"client{data.subject_id}_ep{epoch}.bgck"
        if not path.exists():
            raise _Invalid(f"missing checkpoint {path}")
        own = codec.unpack_modalities(path.read_bytes())
        d = standardize(data) if std else data
        row = {"epoch": epoch, "subject": data.subject_id, "split": "test"}
        for m in MODALITIES:
            targets = corpus.test_image if m == "image" else corpus.test_text
            params = ParamSet(own[m].layers, d.input_dim)
            n_found = len(params) - len(shared[m])
            composed = compose_global(params.layers[:n_found], shared[m])
            p = predict(params, d.test_inputs)
            suffix = "" if m == "image" else "_text"
            row[f"top1{suffix}"] = retrieval_accuracy(p, targets, 1)
            row[f"top5{suffix}"] = retrieval_accuracy(p, targets, 5)
            row[f"global_top1{suffix}"] = retrieval_accuracy(predict(composed, d.test_inputs), targets, 1)
            if m == "image":
                preds.append(p)
        rows.append(row)
    align = alignment_score(preds) if len(preds) > 1 else None
    for row in rows:
        row["alignment"] = align
    return rows


def cmd_eval(args) -> int:
    corpus = read_dataset(args.data)
    for row in evaluate_run(corpus, args.run, args.epoch):
        print(json.dumps(row, sort_keys=True))
    return EXIT_OK


def summarize(report) -> dict:
    last = max(r["epoch"] for r in report.metrics)
    recs = [r for r in report.metrics if r["epoch"] == last]
    return {
        "top1": float(np.mean([r["top1"] for r in recs])),
        "top5": float(np.mean([r["top5"] for r in recs])),
        "global_top1": float(np.mean([r["global_top1"] for r in recs])),
        "alignment": recs[0]["alignment"],
        "first_subject_top1": min(recs, key=lambda r: r["subject"])["top1"],
    }


def ablation_matrix(mode: str, corpus, cfg: TrainConfig) -> list[tuple[dict, TrainConfig, object]]:
    """(row labels, config, corpus) for every configuration of the sweep."""
    if mode == "sync_tiers":
        return [({"config": s}, dataclasses.replace(cfg, sync=s), corpus) for s in SYNC_MODES]
    if mode == "subjects":
        ids = sorted(s.subject_id for s in corpus.subjects)
        return [({"subjects": n}, cfg, corpus.subset(ids[:n])) for n in range(1, len(ids) + 1)]
    if mode == "m_layers":
        r = cfg.num_residual_blocks
        return [({"m": m}, dataclasses.replace(cfg, advanced_layers=m), corpus) for m in range(1, r + 3)]
    raise ValueError(f"unknown ablation mode {mode!r}")


def run_ablation(mode: str, corpus, cfg: TrainConfig, seeds: list[int]) -> list[dict]:
    rows = []
    for labels, row_cfg, row_corpus in ablation_matrix(mode, corpus, cfg):
        runs = []
        for seed in seeds:
            report = run_training(row_corpus, dataclasses.replace(row_cfg, seed=seed, eval_every=row_cfg.epochs))
            runs.append(summarize(report))
        row = dict(labels)
        for k in ("top1", "top5", "global_top1", "first_subject_top1"):
            row[f"median_{k}"] = float(np.median([r[k] for r in runs]))
        aligned = [r["alignment"] for r in runs if r["alignment"] is not None]
        row["median_alignment"] = float(np.median(aligned)) if len(aligned) == len(runs) else None
        row["seeds"] = len(seeds)
        rows.append(row)
        log.info("ablation row %s done", labels)
    # alignment needs two subjects; keep the column only when every row has it
    if any(r["median_alignment"] is None for r in rows):
        for r in rows:
            del r["median_alignment"]
    return rows


def write_csv(rows: list[dict], stream) -> None:
    fields = []
    for r in rows:
        fields += [k for k in r if k not in fields]
    writer = csv.DictWriter(stream, fieldnames=fields, lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)


def cmd_ablate(args) -> int:
    cfg = _train_config(args)
    try:
        seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    except ValueError:
        raise _Invalid(f"--seeds must be comma-separated integers, got {args.seeds!r}") from None
    if not seeds:
        raise _Invalid("--seeds is empty")
    corpus = read_dataset(args.data)
    rows = run_ablation(args.mode, corpus, cfg, seeds)
    if args.out:
        args.out.parent.mkdir(parents=True, exist_ok=True)
        with args.out.open("w", newline="") as f:
            write_csv(rows, f)
    else:
        write_csv(rows, sys.stdout)
    return EXIT_OK


def cmd_audit(args) -> int:
    corpus = read_dataset(args.data)
    values = corpus_canaries(corpus)
    if not values:
        raise _Invalid(f"dataset {args.data} holds no canaries; nothing to audit against")
    report = audit_log(args.log.read_bytes(), values)
    print("\n".join(report.lines()))
    return EXIT_OK if report.passed else EXIT_AUDIT


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "audit": cmd_audit}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (_Invalid, ConfigError, SpecError, DatasetFormatError, FormatError, ValueError) as exc:
        print(f"brainfed {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"brainfed {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
