"""
Command-line front end. Every stage reads the previous stage's files and
writes its own into ``--out-dir`` together with ``<stage>_config.json``.

    uedanomaly synth --normal 60 --anomalous 40 --seed 7 --out-dir data
    uedanomaly run-all --data data --out-dir run

Exit codes: 0 success, 2 contract or data error, 3 I/O error, 64 usage error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__, cae, evaluation, imagio, ricemix, scoring, synthgen, tiling
from .errors import AnomalyError, ContractViolation, DataError, FormatError, IoError

log = logging.getLogger("uedanomaly")

EXIT_OK, EXIT_DATA, EXIT_IO, EXIT_USAGE = 0, 2, 3, 64

MANIFEST = "manifest.txt"
TILES, TILE_INDEX, IMAGE_INDEX = "tiles.npy", "tiles.csv", "images.csv"
MODEL, LOSS = "model.cae1", "train_loss.csv"
SCORES, HISTOGRAM, SKIPPED = "scores.csv", "histogram.csv", "skipped.csv"
FIT, ROC, CLASSIFIED, REPORT = "fit.json", "roc.csv", "classified.csv", "report.md"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------- helpers

def _require(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise IoError(f"missing prerequisite: {path}")
    return path


def _out(args) -> Path:
    return imagio.ensure_dir(args.out_dir)


def _write_config(args, stage: str):
    """Persist the resolved flags of a stage next to its artifacts."""
    skip = {"func"}
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())
           if k not in skip}
    cfg["stage"] = stage
    cfg["version"] = __version__
    path = Path(args.out_dir) / f"{stage}_config.json"
    path.write_text(json.dumps(cfg, indent=2) + "\n", encoding="utf-8")


def _manifest_path(data) -> Path:
    data = Path(data)
    return _require(data / MANIFEST if data.is_dir() else data)


def parse_mix(text: str):
    """``"blur:3,streak:30:24:0.25"`` -> anomaly tuple."""
    makers = {"shift": synthgen.shift, "blur": synthgen.blur,
              "streak": synthgen.streak, "dropout": synthgen.dropout}
    mix = []
    for item in filter(None, (s.strip() for s in text.split(","))):
        kind, *values = item.split(":")
        if kind not in makers:
            raise ContractViolation(f"unknown anomaly kind {kind!r} in --mix")
        try:
            mix.append(makers[kind](*(float(v) for v in values)))
        except (TypeError, ValueError) as exc:
            raise ContractViolation(f"bad parameters for {kind!r} in --mix: {exc}") from exc
    return tuple(mix)


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _read_csv(path):
    with open(_require(path), newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def load_tiles(directory):
    """Rebuild per-image tile batches written by the preprocess stage.

    Returns a dict mapping manifest paths to :class:`tiling.TileBatch`.
    """
    directory = Path(directory)
    stack = np.load(_require(directory / TILES))
    index = _read_csv(directory / TILE_INDEX)
    images = _read_csv(directory / IMAGE_INDEX)
    if len(index) != len(stack):
        raise FormatError(f"{directory / TILE_INDEX} lists {len(index)} tiles, {TILES} holds {len(stack)}")
    by_id = {}
    for rec, pixels in zip(index, stack):
        tile = tiling.Tile(pixels=pixels, origin=(int(rec["row"]), int(rec["col"])),
                           sipr=float(rec["sipr"]), image_id=rec["image_id"])
        by_id.setdefault(rec["image_id"], []).append(tile)
    return {rec["path"]: tiling.TileBatch(image_id=rec["image_id"], tiles=by_id.get(rec["image_id"], []),
                                          n_generated=int(rec["n_generated"]))
            for rec in images}


def _load_table(path) -> scoring.ScoreTable:
    return scoring.table_from_records(imagio.read_scores(_require(path)))


def _load_fit(path):
    return ricemix.load_params(_require(path))


# ---------------------------------------------------------------- stages

def cmd_synth(args):
    out = _out(args)
    base = synthgen.SynthConfig(image_size=args.image_size, seed=args.seed)
    corpus = synthgen.generate_corpus(args.normal, args.anomalous, out, mix=parse_mix(args.mix),
                                      seed=args.seed, base=base)
    _write_csv(out / "anomalies.csv", ("path", "anomaly"),
               [(p, str(a)) for (p, _), a in zip(corpus.manifest.entries, corpus.anomalies)])
    _write_config(args, "synth")
    log.info("wrote %d images and %s to %s", len(corpus.paths), MANIFEST, out)


def cmd_preprocess(args):
    manifest = imagio.load_manifest(_manifest_path(args.data), seed=args.seed)
    out = _out(args)
    pixels, tile_rows, image_rows, skipped = [], [], [], []
    for path, _ in manifest.entries:
        try:
            batch = scoring.load_batch(manifest.resolve(path), tile=args.tile, stride=args.stride,
                                       relative_threshold=args.relative_threshold)
        except (AnomalyError, OSError) as exc:
            skipped.append((path, str(exc)))
            continue
        image_rows.append((path, batch.image_id, batch.n_generated, batch.n_retained))
        for t in batch.tiles:
            pixels.append(t.pixels.astype(np.float32))
            tile_rows.append((batch.image_id, t.origin[0], t.origin[1], repr(t.sipr)))
    stack = np.stack(pixels) if pixels else np.zeros((0, args.tile, args.tile), np.float32)
    np.save(out / TILES, stack)
    _write_csv(out / TILE_INDEX, ("image_id", "row", "col", "sipr"), tile_rows)
    _write_csv(out / IMAGE_INDEX, ("path", "image_id", "n_generated", "n_retained"), image_rows)
    _write_csv(out / SKIPPED, ("path", "reason"), skipped)
    _write_config(args, "preprocess")
    log.info("%d images -> %d retained tiles (%d skipped)", len(image_rows), len(stack), len(skipped))


def cmd_train(args):
    out = _out(args)
    stack = np.load(_require(Path(args.tiles) / TILES if Path(args.tiles).is_dir() else args.tiles))
    cfg = cae.TrainConfig(learning_rate=args.lr, batch_size=args.batch_size, epochs=args.epochs, seed=args.seed)
    model = cae.build(args.seed)
    if cfg.epochs == 0:
        warnings.warn("--epochs 0: writing an untrained model", RuntimeWarning)
    model, trace = cae.train(model, stack[:, None], cfg)
    cae.save(model, out / MODEL)
    _write_csv(out / LOSS, ("epoch", "mean_loss"), [(i + 1, repr(v)) for i, v in enumerate(trace)])
    _write_config(args, "train")


def cmd_score(args):
    out = _out(args)
    model = cae.load(_require(args.model))
    manifest = imagio.load_manifest(_manifest_path(args.data), seed=args.seed)
    batches = load_tiles(args.tiles) if args.tiles else None
    table = scoring.score_dataset(model, manifest, batches=batches)
    imagio.save_scores(table, out / SCORES)
    _write_csv(out / SKIPPED, ("path", "reason"), table.side_report)
    if table.rows:
        scoring.save_histogram(table.scores(), out / HISTOGRAM)
    _write_config(args, "score")
    log.info("scored %d images (%d skipped)", len(table.rows), len(table.side_report))


def cmd_fit(args):
    out = _out(args)
    table = _load_table(args.scores)
    params = ricemix.fit(table.scores(), n_restarts=args.restarts, n_keep=args.keep, seed=args.seed,
                         family=args.family, workers=args.threads)
    ricemix.save_params(params, out / FIT)
    _write_config(args, "fit")
    log.info("fit NLL %.6g, converged %s, %d local fits", params.nll, params.converged,
             params.n_restarts_used)


def cmd_threshold(args):
    out = _out(args)
    params, _ = _load_fit(args.fit)
    table = _load_table(args.scores)
    params.e_range = (float(table.scores().min()), float(table.scores().max()))
    e_t = ricemix.solve_threshold(params, target=args.target)
    # the fit document carries the threshold from here on
    ricemix.save_params(params, out / FIT, e_t=e_t)
    _write_config(args, "threshold")
    print(f"e_t = {e_t!r}")


def cmd_roc(args):
    out = _out(args)
    table = _load_table(args.scores)
    curve = evaluation.roc(table)
    evaluation.save_roc(curve, out / ROC)
    _write_config(args, "roc")
    print(f"AUC = {curve.auc!r}")
    if args.fit:
        _, e_t = _load_fit(args.fit)
        if e_t is not None:
            tpr, fpr = evaluation.operating_point(curve, e_t)
            print(f"at e_t = {e_t!r}: TPR = {tpr!r}, FPR = {fpr!r}")


def cmd_report(args):
    out = _out(args)
    table = _load_table(args.scores)
    params, e_t = _load_fit(args.fit)
    if e_t is None:
        raise DataError(f"{args.fit} has no threshold; run the threshold stage first")
    params.e_range = (float(table.scores().min()), float(table.scores().max()))
    curve = evaluation.roc(table) if table.has_labels else None
    result = evaluation.classify(table, e_t, params, margin=args.margin)
    imagio.save_scores(result.table, out / CLASSIFIED)
    text = evaluation.report(table, params, e_t, curve, result)
    (out / REPORT).write_text(text, encoding="utf-8")
    _write_config(args, "report")


def cmd_run_all(args):
    """synth-free pipeline: preprocess, train, score, fit, threshold, roc, report."""
    out = Path(args.out_dir)
    stages = [
        (cmd_preprocess, {}),
        (cmd_train, {"tiles": out}),
        (cmd_score, {"model": out / MODEL, "tiles": out}),
        (cmd_fit, {"scores": out / SCORES}),
        (cmd_threshold, {"fit": out / FIT, "scores": out / SCORES}),
    ]
    for func, extra in stages:
        log.info("== %s", func.__name__[4:])
        func(argparse.Namespace(**{**vars(args), **extra}))
    table = _load_table(out / SCORES)
    if table.has_labels:
        cmd_roc(argparse.Namespace(**{**vars(args), "scores": out / SCORES, "fit": out / FIT}))
    cmd_report(argparse.Namespace(**{**vars(args), "scores": out / SCORES, "fit": out / FIT}))
    _write_config(args, "run-all")
    print(f"report: {out / REPORT}")


# ---------------------------------------------------------------- parser

def _add_preprocess_flags(p):
    p.add_argument("--tile", type=int, default=tiling.TILE)
    p.add_argument("--stride", type=int, default=tiling.STRIDE)
    p.add_argument("--relative-threshold", type=float, default=tiling.RELATIVE_THRESHOLD,
                   help="keep tiles with sIPR above this multiple of 1/N")


def _add_train_flags(p):
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--batch-size", type=int, default=32)


def _add_fit_flags(p):
    p.add_argument("--restarts", type=int, default=100)
    p.add_argument("--keep", type=int, default=10)
    p.add_argument("--family", choices=(ricemix.RICE, ricemix.GAMMA), default=ricemix.RICE)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                        help="worker processes for the mixture fit; results are byte-identical only at 1")
    common.add_argument("--out-dir", type=Path, default=Path("."))
    common.add_argument("-q", "--quiet", action="store_true")

    parser = _Parser(prog="uedanomaly", description=__doc__.split("\n\n")[0].strip(),
                     formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="write a labelled synthetic corpus")
    p.add_argument("--normal", type=int, default=60)
    p.add_argument("--anomalous", type=int, default=40)
    p.add_argument("--image-size", type=int, default=512)
    p.add_argument("--mix", default="blur:3,streak:30:24:0.25,dropout:0.8",
                   help="comma list of kind:param:... anomalies, cycled in order")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", parents=[common], help="tile images and drop background tiles")
    p.add_argument("--data", type=Path, required=True, help="manifest file or directory holding manifest.txt")
    _add_preprocess_flags(p)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", parents=[common], help="train the autoencoder on preprocessed tiles")
    p.add_argument("--tiles", type=Path, required=True, help="preprocess output directory or tiles.npy")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", parents=[common], help="per-image log reconstruction error")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--tiles", type=Path, help="reuse a preprocess output directory")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("fit", parents=[common], help="fit the two-component mixture to scores")
    p.add_argument("--scores", type=Path, required=True)
    _add_fit_flags(p)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("threshold", parents=[common], help="solve for the detection threshold")
    p.add_argument("--fit", type=Path, required=True)
    p.add_argument("--scores", type=Path, required=True)
    p.add_argument("--target", type=float, default=0.5)
    p.set_defaults(func=cmd_threshold)

    p = sub.add_parser("roc", parents=[common], help="ROC curve of labelled scores")
    p.add_argument("--scores", type=Path, required=True)
    p.add_argument("--fit", type=Path, help="fit document with e_t, for the operating point")
    p.set_defaults(func=cmd_roc)

    p = sub.add_parser("report", parents=[common], help="markdown run report")
    p.add_argument("--scores", type=Path, required=True)
    p.add_argument("--fit", type=Path, required=True)
    p.add_argument("--margin", type=float, default=evaluation.REVIEW_MARGIN)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("run-all", parents=[common], help="every stage after synth, in order")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--target", type=float, default=0.5)
    p.add_argument("--margin", type=float, default=evaluation.REVIEW_MARGIN)
    _add_preprocess_flags(p)
    _add_train_flags(p)
    _add_fit_flags(p)
    p.set_defaults(func=cmd_run_all)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr, force=True)
    if args.threads < 1:
        parser.error("--threads must be >= 1")
    try:
        args.func(args)
    except (IoError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except AnomalyError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
