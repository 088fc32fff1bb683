"""``fragmix`` command line: synth, binarize, split, train, extract, evaluate.

Exit codes: 0 success, 1 runtime or data failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from ._accel import backend, set_num_threads
from .config import RunConfig, parse_overrides
from .data import (
    FragmentRecord,
    PAPYROW_FOLDS,
    generate_synthetic_corpus,
    label_indices,
    load_images,
    load_manifest,
    make_identification_split,
    make_kfold_splits,
    write_corpus,
    write_manifest,
)
from .errors import ConfigError, DataError, FragmixError
from .model import Model
from .preprocessing import read_image, sauvola_binarize, write_image
from .retrieval import (
    evaluate_descriptors,
    extract_descriptors,
    file_sha256,
    format_report_kv,
    format_table,
    load_descriptors,
    save_descriptors,
)
from .training import load_training_state, train

log = logging.getLogger("fragmix")

IMAGE_SUFFIXES = (".png", ".pgm", ".ppm", ".pnm")
RUN_CONFIG_NAME = "run_config.txt"


class UsageError(Exception):
    """Bad invocation detected after argument parsing (exit code 2)."""


# -- helpers -----------------------------------------------------------------------


def _out_dir(args) -> Path:
    out = Path(args.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _run_config(args) -> RunConfig:
    return RunConfig.build(args.config, parse_overrides(args.set), args.seed, args.out_dir)


def _relocate(records: list[FragmentRecord], src_root: Path, dst_root: Path) -> list[FragmentRecord]:
    """Rewrite relative image paths so they resolve from ``dst_root``."""
    out = []
    for r in records:
        path = r.image_path
        if path is not None and not Path(path).is_absolute():
            path = os.path.relpath(src_root / path, dst_root)
        out.append(FragmentRecord(r.fragment_id, r.writer_id, r.page_id, path))
    return out


def _binarizer(data_opts: dict):
    return sauvola_binarize if data_opts["binarize"] == "sauvola" else None


def _load_split_images(manifest, cfg_model, data_opts, strict=False):
    manifest = Path(manifest)
    records = load_manifest(manifest, strict=strict)
    if not records:
        raise DataError(f"{manifest}: no usable fragments")
    images = load_images(
        records,
        cfg_model.input_height,
        cfg_model.input_width,
        root=manifest.parent,
        binarize=_binarizer(data_opts),
        pad_value=data_opts["pad_value"],
        mean=data_opts["mean"],
        std=data_opts["std"],
        dtype=np.dtype(cfg_model.dtype),
    )
    return records, images


# -- subcommands -------------------------------------------------------------------


def cmd_synth(args) -> int:
    out = _out_dir(args)
    size = tuple(int(v) for v in args.size.lower().split("x"))
    if len(size) != 2:
        raise UsageError(f"--size must look like HxW, got {args.size!r}")
    seed = 0 if args.seed is None else args.seed
    records = generate_synthetic_corpus(args.writers, args.pages, args.fragments, seed, size)
    manifest = write_corpus(records, out, fmt=args.format)
    print(f"wrote {len(records)} fragments to {manifest}")
    return 0


def _binarize_inputs(src: Path) -> tuple[list[tuple[str, Path]], list[FragmentRecord] | None, Path]:
    if src.is_dir():
        files = sorted(p for p in src.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
        return [(p.stem, p) for p in files], None, src
    if src.is_file():
        records = load_manifest(src)
        return [(r.fragment_id, src.parent / r.image_path) for r in records], records, src.parent
    raise FileNotFoundError(f"input not found: {src}")


def cmd_binarize(args) -> int:
    if args.method == "unet":
        raise UsageError(
            "method 'unet' is not available: learned binarisation networks are outside this "
            "package's scope; use --method sauvola"
        )
    items, records, _ = _binarize_inputs(Path(args.input))
    out = _out_dir(args)
    if not items:
        log.warning("no input images found in %s; nothing to do", args.input)
        return 0
    suffix = "." + args.format
    written = {}
    for name, path in items:
        img = sauvola_binarize(read_image(path), window=args.window, k=args.k, r=args.R)
        write_image(out / (name + suffix), img)
        written[name] = name + suffix
    if records is not None:
        write_manifest(
            out / "manifest.tsv",
            [FragmentRecord(r.fragment_id, r.writer_id, r.page_id, written[r.fragment_id]) for r in records],
        )
    print(f"binarised {len(items)} images into {out}")
    return 0


def _read_folds(path) -> list[list[str]]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"folds file not found: {path}")
    folds = []
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            folds.append([w.strip() for w in line.replace("\t", ",").split(",") if w.strip()])
    if not folds:
        raise ConfigError(f"{path}: no folds defined")
    return folds


def cmd_split(args) -> int:
    manifest = Path(args.manifest)
    records = load_manifest(manifest, check_images=False)
    out = _out_dir(args)
    records = _relocate(records, manifest.parent, out)
    written = []
    if args.kind == "kfold":
        folds = _read_folds(args.folds) if args.folds else PAPYROW_FOLDS
        for i, spec in enumerate(make_kfold_splits(records, folds)):
            for part in ("train", "test"):
                path = out / f"fold{i}_{part}.tsv"
                write_manifest(path, spec.records(records, part))
                written.append(path)
    else:
        fractions = tuple(float(x) for x in args.fractions.split(","))
        if len(fractions) != 3:
            raise UsageError(f"--fractions needs three comma-separated values, got {args.fractions!r}")
        seed = 0 if args.seed is None else args.seed
        spec = make_identification_split(records, fractions, seed)
        for part in ("train", "val", "test"):
            path = out / f"{part}.tsv"
            write_manifest(path, spec.records(records, part))
            written.append(path)
    for p in written:
        print(p)
    return 0


def cmd_train(args) -> int:
    out = _out_dir(args)
    run = _run_config(args)
    data_opts = run.data_options()
    tcfg = run.train_config()
    manifest = Path(args.manifest)
    records = load_manifest(manifest, strict=args.strict)
    if not records:
        raise DataError(f"{manifest}: no usable fragments")
    labels, class_names = label_indices([r.writer_id for r in records])

    resume = None
    if args.resume:
        model, resume = load_training_state(args.resume)
        saved = resume["meta"].get("class_names")
        if saved is not None and saved != class_names:
            raise DataError(f"{args.resume}: checkpoint was trained on different writers")
        if resume["train_config"]:
            merged = dict(resume["train_config"])
            merged.update({k[len("train."):]: v for k, v in run.values.items() if k.startswith("train.")})
            tcfg = type(tcfg)(**merged)
        mcfg = model.cfg
    else:
        extra = {}
        if tcfg.loss_kind == "cross_entropy":
            extra["num_classes"] = len(class_names)
        mcfg = run.model_config(**extra)
        model = Model(mcfg, seed=run.seed)

    run.write(out / RUN_CONFIG_NAME, model_cfg=mcfg, train_cfg=tcfg)
    log.info("config written to %s (backend %s)", out / RUN_CONFIG_NAME, backend())

    images = load_images(
        records, mcfg.input_height, mcfg.input_width, root=manifest.parent,
        binarize=_binarizer(data_opts), pad_value=data_opts["pad_value"],
        mean=data_opts["mean"], std=data_opts["std"], dtype=np.dtype(mcfg.dtype),
    )
    val_images = val_labels = None
    if args.val_manifest:
        val_records, val_images = _load_split_images(args.val_manifest, mcfg, data_opts, args.strict)
        lookup = {n: i for i, n in enumerate(class_names)}
        unknown = sorted({r.writer_id for r in val_records} - set(lookup))
        if unknown and tcfg.loss_kind == "cross_entropy":
            raise DataError(f"validation writers not seen in training: {unknown}")
        val_labels = np.array([lookup.get(r.writer_id, -1) for r in val_records], dtype=np.int64)
        if tcfg.loss_kind == "triplet":
            val_labels, _ = label_indices([r.writer_id for r in val_records])

    ckpt = out / "model.ckpt"
    result = train(
        model, images, labels, tcfg, val_images, val_labels,
        log_path=out / "train_log.jsonl", checkpoint_path=ckpt, resume=resume,
        meta={"class_names": class_names},
    )
    last = result.history[-1] if result.history else {}
    print(f"trained to step {result.global_step}; last loss {last.get('loss', float('nan')):.6f}; checkpoint {ckpt}")
    return 0


def cmd_extract(args) -> int:
    out = _out_dir(args)
    run = _run_config(args)
    data_opts = run.data_options()
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    model, _, _ = Model.load(ckpt)
    for key in ("input_height", "input_width"):
        want = run.values.get(f"model.{key}")
        if want is not None and want != getattr(model.cfg, key):
            raise ConfigError(
                f"resolution mismatch: checkpoint was built for "
                f"{model.cfg.input_height}x{model.cfg.input_width}, config asks for model.{key}={want}"
            )
    run.write(out / RUN_CONFIG_NAME, model_cfg=model.cfg)
    records, images = _load_split_images(args.manifest, model.cfg, data_opts, args.strict)
    meta = {"checkpoint_hash": file_sha256(ckpt), "binarize": data_opts["binarize"]}
    ds = extract_descriptors(model, images, records, batch_size=args.batch_size, meta=meta)
    path = Path(args.output) if args.output else out / "descriptors.bin"
    save_descriptors(path, ds)
    print(f"wrote {len(ds)} descriptors of dim {ds.dim} to {path}")
    return 0


def cmd_evaluate(args) -> int:
    out = _out_dir(args)
    run = _run_config(args)
    opts = run.eval_options()
    if args.no_whiten:
        opts["whiten"] = False
    if args.whiten_dim is not None:
        opts["whiten_dim"] = args.whiten_dim
    if args.labels:
        opts["labels"] = [s.strip() for s in args.labels.split(",") if s.strip()]
    for kind in opts["labels"]:
        if kind not in ("writer", "page"):
            raise UsageError(f"unknown label kind {kind!r}; use writer and/or page")

    if args.descriptors:
        if args.checkpoint or args.manifest:
            raise UsageError("give either --descriptors or --checkpoint with --manifest, not both")
        path = Path(args.descriptors)
        if not path.is_file():
            raise FileNotFoundError(f"descriptor file not found: {path}")
        ds = load_descriptors(path)
    elif args.checkpoint and args.manifest:
        model, _, _ = Model.load(args.checkpoint)
        records, images = _load_split_images(args.manifest, model.cfg, run.data_options(), args.strict)
        ds = extract_descriptors(model, images, records, meta={"checkpoint_hash": file_sha256(args.checkpoint)})
    else:
        raise UsageError("evaluate needs --descriptors FILE or --checkpoint CKPT --manifest TSV")

    reports = evaluate_descriptors(ds, opts["labels"], whiten=opts["whiten"], whiten_dim=opts["whiten_dim"])
    for kind, rep in reports.items():
        (out / f"report_{kind}.txt").write_text(format_report_kv(rep), encoding="utf-8")
        print(f"{kind}: mAP={rep.mAP:.4f} top1={rep.top1:.4f} ({rep.valid_queries}/{rep.query_count} queries)")
    (out / "report_table.txt").write_text(format_table(reports), encoding="utf-8")
    return 0


# -- parser ------------------------------------------------------------------------


def _threads_default():
    env = os.environ.get("FRAGMIX_THREADS")
    if env is None or env.strip() == "":
        return None
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"FRAGMIX_THREADS must be an integer, got {env!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value config file with dotted keys")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, help="random seed (default: train.seed or 0)")
    common.add_argument("--out-dir", help="output directory (default: current directory)")
    common.add_argument("--threads", type=int, help="worker threads (default: $FRAGMIX_THREADS)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="fragmix", description="Writer and page retrieval for document fragments.")
    parser.add_argument("--version", action="version", version=f"fragmix {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write a synthetic fragment corpus")
    p.add_argument("--writers", type=int, default=8)
    p.add_argument("--pages", type=int, default=3)
    p.add_argument("--fragments", type=int, default=4)
    p.add_argument("--size", default="64x64", help="fragment size HxW")
    p.add_argument("--format", choices=["ppm", "png"], default="ppm")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("binarize", parents=[common], help="binarise an image directory or manifest")
    p.add_argument("input", help="directory of images or a manifest file")
    p.add_argument("--method", choices=["sauvola", "unet"], default="sauvola")
    p.add_argument("--window", type=int, default=31)
    p.add_argument("--k", type=float, default=0.2)
    p.add_argument("--R", type=float, default=128.0)
    p.add_argument("--format", choices=["pgm", "png"], default="pgm")
    p.set_defaults(func=cmd_binarize)

    p = sub.add_parser("split", parents=[common], help="write writer-disjoint or page-disjoint splits")
    p.add_argument("manifest")
    p.add_argument("--kind", choices=["kfold", "identification"], required=True)
    p.add_argument("--folds", help="one fold per line, comma-separated writers (default: PapyRow folds)")
    p.add_argument("--fractions", default="0.3,0.2,0.5", help="train,val,test page fractions")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", parents=[common], help="train a model")
    p.add_argument("manifest")
    p.add_argument("--val-manifest")
    p.add_argument("--resume", help="training checkpoint to continue from")
    p.add_argument("--strict", action="store_true", help="fail on missing images instead of skipping")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", parents=[common], help="compute descriptors for a manifest")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--output", help="descriptor file (default: OUT_DIR/descriptors.bin)")
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--strict", action="store_true")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("evaluate", parents=[common], help="leave-one-out writer and page retrieval")
    p.add_argument("--descriptors")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--labels", help="comma-separated label kinds (default: writer,page)")
    p.add_argument("--no-whiten", action="store_true", help="skip PCA whitening")
    p.add_argument("--whiten-dim", type=int)
    p.add_argument("--strict", action="store_true")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        threads = args.threads if args.threads is not None else _threads_default()
        if threads is not None:
            if threads < 1:
                raise UsageError(f"--threads must be >= 1, got {threads}")
            set_num_threads(threads)
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"fragmix {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, DataError, FragmixError, OSError, ValueError, FloatingPointError) as exc:
        print(f"fragmix {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
