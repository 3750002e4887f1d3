"""Command-line driver: ``gen``, ``convert``, ``split``, ``train``, ``eval``, ``report``.

Every command that writes files also writes a JSON manifest next to them
recording the tool version, seed, config snapshot, and the SHA-256 of every
input and output. Paths in manifests are relative to the manifest's folder,
so two runs in different directories produce identical manifests.

Exit codes: 0 ok, 2 usage, 3 data, 4 config, 5 numeric. Errors are written
to stderr as ``error[<kind>]: <message>``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import dataio
from .checkpoint import CheckpointDigestError, CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, TrainConfig
from .evaluation import (DegenerateScoresError, anomaly_scores, evaluate, format_reports,
                         parse_kv, report_from_kv, report_to_kv, threshold_search)
from .training import NumericError, prepare_training_data, train, write_run_log
from .wafer import Label, encode_batch, generate_dataset, label_counts, split_dataset

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3, 4, 5

GEN_PATTERNS = (("none", Label.NONE), ("center", Label.CENTER), ("edge-ring", Label.EDGE_RING),
                ("scratch", Label.SCRATCH), ("donut", Label.DONUT), ("random", Label.RANDOM))


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# manifests


def _rel(path, base: Path) -> str:
    return os.path.relpath(Path(path).resolve(), base.resolve())


def write_manifest(path, command: str, *, inputs=(), outputs=(), seed=None, config=None,
                   extra=None) -> dict:
    """JSON manifest with digests of ``inputs`` and ``outputs`` (no timestamps)."""
    path = Path(path)
    base = path.parent
    data = {
        "tool": "waferocc",
        "version": __version__,
        "command": command,
        "seed": seed,
        "config": config.to_text().splitlines() if config is not None else None,
        "inputs": {_rel(p, base): dataio.file_digest(p) for p in inputs},
        "outputs": {_rel(p, base): dataio.file_digest(p) for p in outputs},
    }
    if extra:
        data.update(extra)
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return data


def _load_maps(path):
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such dataset file: {path}")
    return dataio.load_dataset(path)


# ---------------------------------------------------------------------------
# commands


def _parse_sizes(text: str) -> list[tuple[int, int]]:
    sizes = []
    for part in text.split(","):
        try:
            h, w = (int(v) for v in part.lower().split("x"))
        except ValueError:
            raise UsageError(f"bad size {part!r}; expected HxW like 32x32") from None
        if not (0 < h < 65536 and 0 < w < 65536):
            raise UsageError(f"size {part!r} out of range")
        sizes.append((h, w))
    return sizes


def cmd_gen(args) -> int:
    counts = {label: getattr(args, flag.replace("-", "_")) for flag, label in GEN_PATTERNS}
    counts = {k: v for k, v in counts.items() if v}
    if not counts:
        raise UsageError("gen: request at least one map (e.g. --none 200)")
    maps = generate_dataset(counts, sizes=_parse_sizes(args.sizes), seed=args.seed)
    out = Path(args.output)
    dataio.save_dataset(maps, out)
    write_manifest(out.with_name(out.name + ".manifest.json"), "gen", outputs=[out], seed=args.seed,
                   extra={"counts": {Label(k).pretty: v for k, v in counts.items()},
                          "sizes": args.sizes})
    return EXIT_OK


def cmd_convert(args) -> int:
    src = Path(args.manifest)
    if not src.is_file():
        raise DataError(f"no such manifest: {src}")
    maps = dataio.convert_manifest(src)
    out = Path(args.output)
    dataio.save_dataset(maps, out)
    write_manifest(out.with_name(out.name + ".manifest.json"), "convert", inputs=[src],
                   outputs=[out], extra={"count": len(maps)})
    return EXIT_OK


def cmd_split(args) -> int:
    src = Path(args.dataset)
    sp = split_dataset(_load_maps(src), seed=args.seed)
    folder = Path(args.output)
    folder.mkdir(parents=True, exist_ok=True)
    paths = []
    summary = {}
    for name in ("train", "valid", "test"):
        maps = getattr(sp, name)
        p = folder / f"{name}.wmd"
        dataio.save_dataset(maps, p)
        paths.append(p)
        summary[name] = {Label(k).pretty: v for k, v in sorted(label_counts(maps).items())}
    write_manifest(folder / "manifest.json", "split", inputs=[src], outputs=paths, seed=args.seed,
                   extra={"counts": summary})
    return EXIT_OK


def _resolve(value: str, base: Path) -> Path | None:
    if not value:
        return None
    p = Path(value)
    return p if p.is_absolute() else base / p


def cmd_train(args) -> int:
    cfg_path = Path(args.config)
    if not cfg_path.is_file():
        raise ConfigError(f"no such config file: {cfg_path}")
    cfg = TrainConfig.load(cfg_path)
    changes = {}
    if args.model:
        changes["model_kind"] = args.model
    if args.epochs is not None:
        changes["epochs"] = args.epochs
    if changes:
        try:
            cfg = cfg.replace(**changes)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    base = cfg_path.parent
    train_path = Path(args.train) if args.train else _resolve(cfg.train_path, base)
    if train_path is None:
        raise ConfigError("no training data: set train_path in the config or pass --train")
    ckpt = Path(args.output) if args.output else _resolve(cfg.checkpoint_path, base)
    log_path = Path(args.log) if args.log else (_resolve(cfg.log_path, base)
                                               or ckpt.with_name(ckpt.name + ".log"))
    bundle = None
    if args.resume:
        bundle = load_checkpoint(ckpt, expected_config=cfg)
    X = prepare_training_data(_load_maps(train_path), cfg.image_size)
    if bundle is None and log_path.exists():
        log_path.unlink()
    bundle = train(cfg, X=X, bundle=bundle)
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(bundle, ckpt)
    write_run_log(bundle, log_path)
    write_manifest(ckpt.with_name(ckpt.name + ".manifest.json"), "train", inputs=[train_path],
                   outputs=[ckpt], seed=cfg.seed, config=cfg,
                   extra={"run_log": _rel(log_path, ckpt.parent), "epochs_done": bundle.epochs_done})
    return EXIT_OK


def model_label(cfg: TrainConfig) -> str:
    if cfg.model_kind == "aae_dsvdd":
        return f"aae_dsvdd/nu={cfg.nu_prior:g}"
    return cfg.model_kind


def _write_scores(path: Path, maps, scores, preds) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["index", "label", "truth", "score", "predicted"])
        for i, (m, s, p) in enumerate(zip(maps, scores, preds)):
            w.writerow([i, m.label.pretty, int(m.is_defect), repr(float(s)), int(p)])


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise DataError(f"no such checkpoint: {ckpt}")
    bundle = load_checkpoint(ckpt)
    cfg = bundle.config
    size = cfg.image_size
    sets = {}
    for name in ("train", "valid", "test"):
        path = Path(getattr(args, name))
        maps = _load_maps(path)
        sets[name] = (path, maps, anomaly_scores(bundle, encode_batch(maps, size)))
    v_path, v_maps, v_scores = sets["valid"]
    v_truth = np.array([m.is_defect for m in v_maps], dtype=np.int8)
    mode = args.threshold
    if mode == "auto":
        mode = "zero" if cfg.model_kind == "dsvdd" else "search"
    if mode == "zero":
        threshold = 0.0
    else:
        threshold, _ = threshold_search(sets["train"][2], v_scores, v_truth)
    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    label = model_label(cfg)
    reports = {}
    written = []
    for name in ("valid", "test"):
        path, maps, scores = sets[name]
        truth = np.array([m.is_defect for m in maps], dtype=np.int8)
        rep = evaluate(scores, truth, threshold)  # the same frozen threshold for both splits
        reports[name] = rep
        csv_path = out / f"scores_{name}.csv"
        _write_scores(csv_path, maps, scores, scores > threshold)
        written.append(csv_path)
    table = out / "report.txt"
    table.write_text(format_reports([(label, n, r) for n, r in reports.items()]))
    kv = out / "report.kv"
    lines = [f"model = {label}", f"model_kind = {cfg.model_kind}",
             f"threshold_mode = {mode}", f"threshold_source = valid",
             f"dataset.valid = {dataio.file_digest(v_path)}",
             f"dataset.test = {dataio.file_digest(sets['test'][0])}"]
    for name, rep in reports.items():
        lines += report_to_kv(name, rep)
    kv.write_text("\n".join(lines) + "\n")
    write_manifest(out / "manifest.json", "eval",
                   inputs=[ckpt] + [sets[n][0] for n in ("train", "valid", "test")],
                   outputs=[table, kv, *written], seed=cfg.seed, config=cfg,
                   extra={"threshold": threshold, "threshold_mode": mode,
                          "threshold_source": _rel(v_path, out),
                          "applied_to": [_rel(sets[n][0], out) for n in ("valid", "test")]})
    sys.stdout.write(table.read_text())
    return EXIT_OK


def cmd_report(args) -> int:
    rows = []
    digests = set()
    inputs = []
    for name in args.reports:
        p = Path(name)
        if p.is_dir():
            p = p / "report.kv"
        if not p.is_file():
            raise DataError(f"no such report: {p}")
        kv = parse_kv(p.read_text())
        try:
            digests.add((kv["dataset.valid"], kv["dataset.test"]))
            rows += [(kv["model"], split, report_from_kv(kv, split)) for split in ("valid", "test")]
        except (KeyError, ValueError) as exc:
            raise DataError(f"{p}: malformed report ({exc})") from None
        inputs.append(p)
    if len(digests) > 1 and not args.force:
        raise DataError("reports were computed on different datasets; pass --force to combine")
    text = format_reports(rows)
    if args.output:
        out = Path(args.output)
        out.write_text(text)
        write_manifest(out.with_name(out.name + ".manifest.json"), "report", inputs=inputs,
                       outputs=[out], extra={"forced": bool(args.force and len(digests) > 1)})
    else:
        sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="waferocc", description="One-class wafer-map defect detection.")
    p.add_argument("--version", action="version", version=f"waferocc {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic WMD1 dataset")
    for flag, label in GEN_PATTERNS:
        g.add_argument(f"--{flag}", type=int, default=0, metavar="N", help=f"{label.pretty} maps")
    g.add_argument("--sizes", default="32x32", help="comma-separated HxW grid sizes")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("-o", "--output", required=True)
    g.set_defaults(func=cmd_gen)

    c = sub.add_parser("convert", help="CSV manifest of text grids -> WMD1")
    c.add_argument("manifest")
    c.add_argument("-o", "--output", required=True)
    c.set_defaults(func=cmd_convert)

    s = sub.add_parser("split", help="split a WMD1 file into train/valid/test")
    s.add_argument("dataset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("-o", "--output", required=True, help="output folder")
    s.set_defaults(func=cmd_split)

    t = sub.add_parser("train", help="train a model from a config file")
    t.add_argument("-c", "--config", required=True)
    t.add_argument("--model", choices=("dsvdd", "aae", "aae_dsvdd"))
    t.add_argument("--train", help="training WMD1 file (overrides train_path)")
    t.add_argument("--epochs", type=int)
    t.add_argument("-o", "--output", help="checkpoint path (overrides checkpoint_path)")
    t.add_argument("--log", help="run log path")
    t.add_argument("--resume", action="store_true", help="continue from the existing checkpoint")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="choose a threshold on valid and apply it to test")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--train", required=True, help="training split (score statistics)")
    e.add_argument("--valid", required=True)
    e.add_argument("--test", required=True)
    e.add_argument("--threshold", choices=("auto", "search", "zero"), default="auto",
                   help="auto: 0 for dsvdd, lattice search otherwise")
    e.add_argument("-o", "--output", required=True, help="output folder")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="combine eval reports into one table")
    r.add_argument("reports", nargs="+", help="report.kv files or eval folders")
    r.add_argument("--force", action="store_true", help="allow differing dataset digests")
    r.add_argument("-o", "--output")
    r.set_defaults(func=cmd_report)
    return p


def _fail(kind: str, message: str, code: int) -> int:
    sys.stderr.write(f"error[{kind}]: {message}\n")
    return code


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("waferocc: missing command (gen, convert, split, train, eval, report)")
        if args.verbose:
            logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
        return args.func(args)
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except UsageError as exc:
        return _fail("usage", str(exc), EXIT_USAGE)
    except (ConfigError, CheckpointDigestError) as exc:
        return _fail("config", str(exc), EXIT_CONFIG)
    except (NumericError, DegenerateScoresError) as exc:
        return _fail("numeric", str(exc), EXIT_NUMERIC)
    except (DataError, CheckpointError, dataio.DatasetFormatError, ValueError, OSError) as exc:
        return _fail("data", str(exc), EXIT_DATA)


def main() -> None:
    sys.exit(run_command())
