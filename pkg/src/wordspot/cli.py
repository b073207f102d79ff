"""Command-line entry point.

Exit status: 0 on success, 1 for invalid input or configuration, 2 for
failures while running.  Outputs are written to a temporary sibling and
moved into place only when the command succeeds.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from .config import Config, ConfigError, config_from_dict, desk_config, load_config
from .dataset import DatasetError, Page, load_dataset, make_folds, save_dataset
from .imaging import BBox, InvalidInput
from .net.gradcheck import check_setup, grad_check
from .net.layers import InvalidRoi, InvalidShape
from .net.model import RegionPhocNet
from .net.train import TrainingDiverged
from .phoc import PhocError, describe, encode_string
from .proposals import DegenerateTraining, LinearFilter, read_candidates_jsonl, write_candidates_jsonl
from . import pipeline as P
from .retrieval import (
    EmbeddingStore,
    IncompatibleEncoding,
    UndefinedDistance,
    bench_shared_vs_percandidate,
    embed_pages,
    query_by_example,
    query_by_string,
)
from .synth import render_synthetic

log = logging.getLogger("wordspot")

VALIDATION_ERRORS = (ConfigError, DatasetError, InvalidInput, PhocError, InvalidRoi, InvalidShape,
                     DegenerateTraining, IncompatibleEncoding, UndefinedDistance)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


@contextlib.contextmanager
def staged_output(path):
    """Yield a temporary path next to ``path``; move it into place only on success."""
    if path is None:
        yield None
        return
    final = Path(path)
    final.parent.mkdir(parents=True, exist_ok=True)
    tmp = final.with_name(f".{final.name}.partial")
    _remove(tmp)
    try:
        yield tmp
    except BaseException:
        _remove(tmp)
        raise
    if tmp.exists():
        if final.is_dir():
            shutil.rmtree(final)
        os.replace(tmp, final)


def _remove(p: Path):
    if p.is_dir():
        shutil.rmtree(p)
    elif p.exists():
        p.unlink()


def _write_json(obj, path):
    text = json.dumps(obj, indent=1, sort_keys=True) + "\n"
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


# -- config and data ------------------------------------------------------


def _config(args) -> Config:
    base = desk_config() if args.preset == "desk" else Config()
    cfg = load_config(args.config, base)
    if args.seed is not None:
        cfg = config_from_dict(
            {"train": {"seed": args.seed}, "synth": {"seed": args.seed}, "folds": {"seed": args.seed}},
            cfg,
        )
    return cfg


def _pages(args, cfg: Config) -> dict[str, Page]:
    if getattr(args, "data", None):
        return load_dataset(args.data, cfg.phoc)
    log.info("no --data given; rendering the synthetic corpus from the [synth] settings")
    return render_synthetic(cfg.synth, cfg.phoc)


def _fold(args, cfg: Config, pages):
    folds = make_folds(list(pages), cfg.folds.seed, cfg.folds.bins)
    if not 0 <= args.fold < len(folds):
        raise ConfigError(f"--fold must lie in 0..{len(folds) - 1}")
    return folds[args.fold]


def _select(pages, ids):
    missing = [p for p in ids if p not in pages]
    if missing:
        raise DatasetError(f"unknown page ids: {', '.join(missing)}")
    return ids


def _candidate_boxes(path) -> dict[str, list[BBox]]:
    return {pid: [b for b, _ in recs] for pid, recs in read_candidates_jsonl(path).items()}


# -- subcommands ------------------------------------------------------------


def cmd_render_synth(args, cfg):
    if args.pages is not None:
        cfg = config_from_dict({"synth": {"pages": args.pages}}, cfg)
    pages = render_synthetic(cfg.synth, cfg.phoc)
    with staged_output(args.out) as tmp:
        save_dataset(pages, tmp, args.format)
    print(f"wrote {len(pages)} pages to {args.out}")


def cmd_propose(args, cfg):
    pages = _pages(args, cfg)
    ids = _select(pages, args.pages or sorted(pages))
    props = {pid: P.propose_page(pages[pid], cfg) for pid in ids}
    filt = LinearFilter.load(args.filter) if args.filter else None
    cands = P.apply_filter(props, filt, cfg)
    with staged_output(args.out) as tmp:
        write_candidates_jsonl(tmp, ((pid, c, c.score) for pid in ids for c in cands[pid]))
    total = sum(len(c) for c in cands.values())
    print(f"{total} candidates on {len(ids)} pages -> {args.out}")


def cmd_train_filter(args, cfg):
    pages = _pages(args, cfg)
    ids = _select(pages, args.pages) if args.pages else _fold(args, cfg, pages).train
    props = {pid: P.propose_page(pages[pid], cfg) for pid in ids}
    filt = P.fit_filter(pages, props, cfg)
    with staged_output(args.out) as tmp:
        filt.save(tmp)
    print(f"filter trained on {len(ids)} pages -> {args.out}")


def cmd_train(args, cfg):
    overrides = {
        "iterations": args.iters, "lr0": args.lr, "lr_step": args.lr_step, "lr_gamma": args.lr_gamma,
        "batch_rois": args.batch, "positive_fraction": args.pos_frac,
    }
    overrides = {k: v for k, v in overrides.items() if v is not None}
    sections = {"train": overrides}
    if args.arch:
        from .config import read_config_file

        arch = read_config_file(args.arch)
        sections["arch"] = arch.get("arch", arch)
    cfg = config_from_dict(sections, cfg)
    pages = _pages(args, cfg)
    ids = _select(pages, args.pages) if args.pages else _fold(args, cfg, pages).train
    cands = _candidate_boxes(args.candidates)
    init = RegionPhocNet.load(args.resume) if args.resume else None

    def progress(it, loss, lr):
        if it % args.log_every == 0 or it == cfg.train.iterations - 1:
            log.info("iter %d loss %.5f lr %.3g", it, loss, lr)

    result = P.train_network(pages, cands, ids, cfg, init=init, progress=progress)
    with staged_output(args.out) as tmp:
        result.model.save(tmp)
    if args.loss_csv:
        with staged_output(args.loss_csv) as tmp, open(tmp, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "loss"])
            w.writerows((i, f"{v:.8g}") for i, v in enumerate(result.losses))
    if result.losses:
        print(f"trained {len(result.losses)} iterations, final loss {result.losses[-1]:.5f} -> {args.out}")


def cmd_embed(args, cfg):
    pages = _pages(args, cfg)
    model = RegionPhocNet.load(args.model)
    cands = _candidate_boxes(args.candidates)
    ids = _select(pages, args.pages) if args.pages else sorted(set(cands) & set(pages))
    store = embed_pages(model, pages, {pid: cands.get(pid, []) for pid in ids}, cfg.inference, cfg.phoc)
    with staged_output(args.out) as tmp:
        store.save(tmp)
    print(f"embedded {len(store)} regions ({store.dropped} dropped) -> {args.out}")


def cmd_query(args, cfg):
    store = EmbeddingStore.load(args.store)
    if args.qbe:
        try:
            page, coords = args.qbe.rsplit(":", 1)
            args.page, args.bbox = page, [int(v) for v in coords.split(",")]
        except ValueError:
            raise UsageError("--qbe expects page:x,y,w,h") from None
        if len(args.bbox) != 4:
            raise UsageError("--qbe expects page:x,y,w,h")
    if args.word is not None:
        ranked = query_by_string(args.word, store, cfg.phoc, cfg.retrieval.metric)
    else:
        if not (args.model and args.page and args.bbox):
            raise UsageError("query needs --word, or --model with --page and --bbox")
        pages = _pages(args, cfg)
        _select(pages, [args.page])
        model = RegionPhocNet.load(args.model)
        ranked = query_by_example(pages[args.page].image, BBox(*args.bbox), model, store,
                                  cfg.inference, cfg.retrieval.metric)
    with staged_output(args.out) as tmp:
        _write_json({"results": ranked.to_records(store, args.top)}, tmp)


def cmd_evaluate(args, cfg):
    pages = _pages(args, cfg)
    fold = _fold(args, cfg, pages)
    if args.model or args.store:
        if not (args.model and args.store):
            raise UsageError("--model and --store go together")
        model = RegionPhocNet.load(args.model)
        store = EmbeddingStore.load(args.store)
        reports = P.evaluate(model, pages, store, cfg, fold.test)
        out = {"fold": fold.index}
    else:
        run = P.run_fold(pages, fold, cfg, progress=_train_logger(cfg))
        reports = run.reports
        out = {"fold": fold.index, "candidate_recall": run.recall,
               "final_loss": run.losses[-1] if run.losses else None}
    for mode, rep in reports.items():
        d = rep.to_dict()
        if not args.per_query:
            d.pop("queries")
        out[mode] = d
    out["mAP"] = {mode: rep.map for mode, rep in reports.items()}
    with staged_output(args.out) as tmp:
        _write_json(out, tmp)


def _train_logger(cfg):
    every = max(1, cfg.train.iterations // 20)

    def progress(it, loss, lr):
        if it % every == 0:
            log.info("iter %d loss %.5f lr %.3g", it, loss, lr)

    return progress


def cmd_bench(args, cfg):
    pages = _pages(args, cfg)
    _select(pages, [args.page])
    cands = _candidate_boxes(args.candidates).get(args.page, [])
    if not cands:
        raise InvalidInput(f"no candidates for page {args.page} in {args.candidates}")
    if args.model:
        model = RegionPhocNet.load(args.model)
    else:
        arch = dict(cfg.arch, out_dim=cfg.phoc.dimension, phoc_hash=cfg.phoc.hash)
        model = RegionPhocNet.initialize(arch, seed=cfg.train.seed, dtype=np.float32, zero_last=False)
    image = pages[args.page].image
    runs = []
    for n in sorted(set(args.counts)):
        if n > len(cands):
            log.warning("only %d candidates available; skipping count %d", len(cands), n)
            continue
        runs.append(bench_shared_vs_percandidate(model, image, cands[:n], cfg.inference, args.repeats).to_dict())
    full = bench_shared_vs_percandidate(model, image, cands, cfg.inference, args.repeats).to_dict()
    out = dict(full, page=args.page, by_count=runs)
    with staged_output(args.out) as tmp:
        _write_json(out, tmp)


def cmd_grad_check(args, cfg):
    arch = dict(cfg.arch, out_dim=cfg.phoc.dimension)
    model, x, rois, targets = check_setup(arch, seed=cfg.train.seed if args.seed is None else args.seed)
    rep = grad_check(model, x, rois, targets, per_param=args.per_param, seed=cfg.train.seed,
                     fault=args.fault)
    out = rep.to_dict()
    out["tolerance"] = args.tol
    out["passed"] = rep.max_rel_error < args.tol
    with staged_output(args.out) as tmp:
        _write_json(out, tmp)


def cmd_phoc_encode(args, cfg):
    vec = encode_string(args.word, cfg.phoc)
    bits = "".join("1" if v else "0" for v in vec)
    on = describe(vec, cfg.phoc)
    text = f"{bits}\n{len(vec)} dims, {len(on)} set: {' '.join(on)}\n"
    with staged_output(args.out) as tmp:
        if tmp is None:
            sys.stdout.write(text)
        else:
            Path(tmp).write_text(text)


# -- parser -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="TOML or JSON config file")
    common.add_argument("--preset", choices=("default", "desk"), default="default",
                        help="base settings the config file is layered on")
    common.add_argument("--seed", type=int, help="seed for every random choice")
    common.add_argument("--out", help="output path")
    common.add_argument("-v", "--verbose", action="store_true")

    data = _Parser(add_help=False)
    data.add_argument("--data", help="dataset directory (default: render the synthetic corpus)")

    fold = _Parser(add_help=False)
    fold.add_argument("--fold", type=int, default=0)
    fold.add_argument("--pages", nargs="+", help="explicit page ids instead of a fold")

    p = _Parser(prog="wordspot", description="Segmentation-free word spotting with region PHOC embeddings.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("render-synth", parents=[common], help="write a synthetic corpus")
    s.add_argument("--pages", type=int)
    s.add_argument("--format", choices=("pgm", "png"), default="pgm")
    s.set_defaults(func=cmd_render_synth, needs_out=True)

    s = sub.add_parser("propose", parents=[common, data], help="candidate regions as JSONL")
    s.add_argument("--pages", nargs="+")
    s.add_argument("--filter", help="trained filter (JSON); without it every candidate is kept")
    s.set_defaults(func=cmd_propose, needs_out=True)

    s = sub.add_parser("train-filter", parents=[common, data, fold], help="fit the word/non-word filter")
    s.set_defaults(func=cmd_train_filter, needs_out=True)

    s = sub.add_parser("train", parents=[common, data, fold], help="train the region PHOC network")
    s.add_argument("--candidates", required=True)
    s.add_argument("--iters", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--lr-step", type=int)
    s.add_argument("--lr-gamma", type=float)
    s.add_argument("--batch", type=int)
    s.add_argument("--pos-frac", type=float)
    s.add_argument("--arch", help="TOML/JSON file with an [arch] table")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--loss-csv", help="write the per-iteration loss trace here")
    s.add_argument("--log-every", type=int, default=100)
    s.set_defaults(func=cmd_train, needs_out=True)

    s = sub.add_parser("embed", parents=[common, data], help="embed candidates into a store")
    s.add_argument("--model", required=True)
    s.add_argument("--candidates", required=True)
    s.add_argument("--pages", nargs="+")
    s.set_defaults(func=cmd_embed, needs_out=True)

    s = sub.add_parser("query", parents=[common, data], help="rank stored regions for one query")
    s.add_argument("--store", required=True)
    s.add_argument("--word", "--qbs", dest="word", help="query by string")
    s.add_argument("--qbe", metavar="PAGE:X,Y,W,H", help="query by example (needs --model)")
    s.add_argument("--model")
    s.add_argument("--page")
    s.add_argument("--bbox", type=int, nargs=4, metavar=("X", "Y", "W", "H"))
    s.add_argument("--top", type=int, default=20)
    s.set_defaults(func=cmd_query, needs_out=False)

    s = sub.add_parser("evaluate", parents=[common, data], help="QBE/QBS mAP on one fold")
    s.add_argument("--fold", type=int, default=0)
    s.add_argument("--model")
    s.add_argument("--store")
    s.add_argument("--per-query", action="store_true", help="include per-query AP values")
    s.set_defaults(func=cmd_evaluate, needs_out=False)

    s = sub.add_parser("bench", parents=[common, data], help="shared trunk pass vs one pass per candidate")
    s.add_argument("--page", required=True)
    s.add_argument("--candidates", required=True)
    s.add_argument("--model")
    s.add_argument("--counts", type=int, nargs="+", default=[10, 50, 100])
    s.add_argument("--repeats", type=int, default=1)
    s.set_defaults(func=cmd_bench, needs_out=False)

    s = sub.add_parser("grad-check", parents=[common], help="finite-difference gradient check")
    s.add_argument("--per-param", type=int, default=200)
    s.add_argument("--tol", type=float, default=1e-4)
    s.add_argument("--fault", choices=("conv_sign",), help="inject a known backward bug")
    s.set_defaults(func=cmd_grad_check, needs_out=False)

    s = sub.add_parser("phoc-encode", parents=[common], help="print the PHOC of a word")
    s.add_argument("--word", required=True)
    s.set_defaults(func=cmd_phoc_encode, needs_out=False)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.needs_out and not args.out:
            raise UsageError(f"{args.command} needs --out")
        cfg = _config(args)
        args.func(args, cfg)
    except (UsageError, *VALIDATION_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (TrainingDiverged, OSError, RuntimeError, ValueError, KeyError) as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
