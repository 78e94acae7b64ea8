"""Command-line driver: ``macvae <command> [options]``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical
failure. Every command that writes an output directory holds a lock file
there for its duration and records the resolved configuration in it.
"""
from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path

import filelock
import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .config import DESK, CouplingConfig, coupling_from_pairs, format_pairs, load_config, parse_pairs
from .corpus import Dataset, prepare_dataset
from .coupling import ModelBundle, build_models, pretrain, train
from .errors import ConfigError, DataError, MacvaeError, UnknownIdError
from .ranking import evaluate, format_reports, predict_existing, rank_tags, score_cold, write_reports_csv
from .synth import SynthConfig, write_raw

log = logging.getLogger("macvae")

CONFIG_FILE = "config.txt"
LOCK_FILE = ".macvae.lock"


# -- helpers -------------------------------------------------------------------------

@contextlib.contextmanager
def locked(directory: Path):
    directory.mkdir(parents=True, exist_ok=True)
    lock = filelock.FileLock(str(directory / LOCK_FILE))
    try:
        lock.acquire(timeout=0)
    except filelock.Timeout:
        raise ConfigError(f"{directory} is in use by another macvae process") from None
    try:
        yield directory
    finally:
        lock.release()


def resolve_config(args) -> CouplingConfig:
    """Defaults, then the optional preset, then ``--config``, then ``--set`` pairs."""
    values: dict = dict(DESK) if getattr(args, "preset", None) == "desk" else {}
    if getattr(args, "config", None):
        values.update(load_config(args.config))
    values.update(parse_pairs(getattr(args, "set", None) or [], "--set"))
    return coupling_from_pairs(values)


def write_config(directory: Path, cfg: CouplingConfig):
    (directory / CONFIG_FILE).write_text(format_pairs(cfg.to_dict()), encoding="utf-8")


def load_dataset(path) -> Dataset:
    if not Path(path).is_dir():
        raise DataError(f"prepared dataset directory {path} does not exist")
    return Dataset.load(path)


def load_bundle(path) -> ModelBundle:
    if not Path(path).is_file():
        raise DataError(f"checkpoint {path} does not exist")
    return ModelBundle.load(path)


def item_index(data: Dataset, name: str) -> int:
    ids = data.interactions.item_ids or []
    if name in ids:
        return ids.index(name)
    raise UnknownIdError(f"unknown item id {name!r}")


def write_csv(path: Path, text: str):
    path.write_text(text, encoding="utf-8")


# -- commands -------------------------------------------------------------------------

def cmd_synth(args) -> int:
    pairs = parse_pairs(args.set or [], "--set")
    try:
        cfg = SynthConfig(**{"seed": args.seed, **{k: type(getattr(SynthConfig, k))(v) for k, v in pairs.items()}})
    except (AttributeError, TypeError, ValueError) as err:
        raise ConfigError(f"bad synthetic option: {err}") from None
    out = Path(args.out)
    with locked(out):
        write_raw(out, cfg)
    print(f"wrote synthetic corpus ({cfg.n_items} items, {cfg.n_tags} tags) to {out}")
    return 0


def cmd_prepare(args) -> int:
    out = Path(args.out)
    if Path(args.raw).resolve() == out.resolve():
        raise ConfigError("--out must differ from --raw; inputs are never modified")
    data, stats = prepare_dataset(args.raw, min_tag_count=args.min_tag_count, vocab_size=args.vocab_size,
                                  co_threshold=args.co_threshold, n_cold=args.n_cold, seed=args.seed)
    with locked(out):
        data.save(out)
        settings = {"raw": str(args.raw), "min_tag_count": args.min_tag_count, "vocab_size": args.vocab_size,
                    "co_threshold": args.co_threshold, "n_cold": args.n_cold, "seed": args.seed}
        (out / "prepare.txt").write_text(format_pairs(settings), encoding="utf-8")
        (out / "stats.txt").write_text(format_pairs(stats), encoding="utf-8")
    print(format_pairs(stats), end="")
    return 0


def _losses_csv(rows) -> str:
    blocks = ("item", "content", "social")
    lines = ["epoch," + ",".join(f"{b}_loss" for b in blocks)]
    for r in rows:
        lines.append(f"{r['epoch']}," + ",".join(repr(float(r['losses'].get(b, float('nan')))) for b in blocks))
    return "\n".join(lines) + "\n"


def cmd_pretrain(args) -> int:
    cfg = resolve_config(args)
    data = load_dataset(args.data)
    out = Path(args.out)
    with locked(out):
        write_config(out, cfg)
        bundle = build_models(cfg, data.n_tags, data.content.width)
        rows = []
        pretrain(bundle, data, hook=lambda event, info: rows.append(info))
        write_csv(out / "pretrain_loss.csv", _losses_csv(rows))
        bundle.save(out / "pretrained.ckpt")
    print(f"pretrained {cfg.pretrain_epochs} epochs -> {out / 'pretrained.ckpt'}")
    return 0


def cmd_train(args) -> int:
    cfg = resolve_config(args)
    data = load_dataset(args.data)
    out = Path(args.out)
    with locked(out):
        write_config(out, cfg)
        if args.init:
            bundle = load_bundle(args.init)
            if bundle.config.variant != cfg.variant:
                raise ConfigError(f"--init holds a {bundle.config.variant!r} bundle, config asks for {cfg.variant!r}")
            bundle.config = cfg
        else:
            bundle = build_models(cfg, data.n_tags, data.content.width)
            rows = []
            pretrain(bundle, data, hook=lambda event, info: rows.append(info))
            write_csv(out / "pretrain_loss.csv", _losses_csv(rows))
        state = train(bundle, data)
        write_csv(out / "loss.csv", state.csv())
        bundle.save(out / "last.ckpt", {"epoch": state.epoch})
        state.best.save(out / "best.ckpt", {"epoch": state.best_epoch + 1})
        summary = {"epochs_run": state.epoch, "best_epoch": state.best_epoch,
                   f"best_val_recall@{cfg.val_at}": state.best_recall, "stopped_early": state.stopped_early}
        (out / "summary.txt").write_text(format_pairs(summary), encoding="utf-8")
    print(f"trained {state.epoch} epochs; best epoch {state.best_epoch} "
          f"(validation Recall@{cfg.val_at} {state.best_recall:.4f}) -> {out}")
    return 0


def cmd_evaluate(args) -> int:
    data = load_dataset(args.data)
    bundle = load_bundle(args.checkpoint)
    segments = ["existing"] + ([] if bundle.config.variant == "collab" else ["cold"])
    reports = [evaluate(data.split, bundle, data, n, seg, args.truth, args.ndcg_standard)
               for seg in segments for n in args.at]
    table = format_reports(reports)
    if args.out:
        out = Path(args.out)
        with locked(out):
            write_config(out, bundle.config)
            write_reports_csv(out / "report.csv", reports)
            (out / "report.txt").write_text(table + "\n", encoding="utf-8")
    print(table)
    return 0


def cmd_recommend(args) -> int:
    data = load_dataset(args.data)
    bundle = load_bundle(args.checkpoint)
    item = item_index(data, args.item)
    cold = item in set(int(i) for i in data.split.cold)
    if cold:
        scores, exclude = score_cold([item], bundle, data)[0], ()
    else:
        scores, exclude = predict_existing(item, bundle, data), data.split.train[item]
    ranked = rank_tags(scores, args.top, exclude, item)
    tag_ids = data.interactions.tag_ids or [str(t) for t in range(data.n_tags)]
    print(f"item {args.item} ({'cold' if cold else 'existing'})")
    for rank, (t, s) in enumerate(zip(ranked.tags, ranked.scores), 1):
        print(f"{rank:>3}  {tag_ids[t]:<20} {s:.6f}")
    if args.explain:
        terms, weights = data.content.rows[item]
        order = np.lexsort((terms, -weights))[:args.explain_terms]
        print("top content terms: " + ", ".join(f"{data.content.vocab[terms[k]]} ({weights[k]:.3f})" for k in order))
        graph = data.inference_graph() if cold else data.training_graph()
        nbrs = graph.neighbors(item)
        rng = np.random.default_rng([bundle.config.seed, item])
        shown = np.sort(rng.choice(nbrs, size=min(len(nbrs), args.explain_neighbors), replace=False)) \
            if len(nbrs) else nbrs
        names = data.interactions.item_ids or [str(i) for i in range(data.n_items)]
        print(f"sampled neighbours ({len(shown)} of {len(nbrs)}): " + ", ".join(names[v] for v in shown))
    return 0


# -- argument parsing -----------------------------------------------------------------

def _add_config_args(p):
    p.add_argument("--config", help="flat key=value file of training settings")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting (repeatable)")
    p.add_argument("--preset", choices=["default", "desk"], default="default",
                   help="starting values: published defaults or the small single-core setup")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="macvae", description="Hybrid tag recommendation with three coupled VAEs.")
    parser.add_argument("--version", action="version", version=f"macvae {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a seeded synthetic raw corpus")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a generator setting")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("prepare", help="build matrices, features, graph and split from a raw corpus")
    p.add_argument("--raw", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--min-tag-count", type=int, default=3)
    p.add_argument("--vocab-size", type=int, default=8000)
    p.add_argument("--co-threshold", type=int, default=4)
    p.add_argument("--n-cold", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("pretrain", help="warm up each model on its own objective")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _add_config_args(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="coupled training (pretrains first unless --init is given)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--init", help="start from a pretrained checkpoint")
    _add_config_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="Recall/NDCG/MRR reports for existing and cold items")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")
    p.add_argument("--at", type=int, nargs="+", default=[20])
    p.add_argument("--truth", choices=["test", "valid"], default="test")
    p.add_argument("--ndcg-standard", action="store_true", help="normalise NDCG by the ideal DCG")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("recommend", help="ranked tags for one item")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--item", required=True, help="item id as it appears in the raw corpus")
    p.add_argument("--top", type=int, default=10)
    p.add_argument("--explain", action="store_true", help="also show top content terms and sampled neighbours")
    p.add_argument("--explain-terms", type=int, default=8)
    p.add_argument("--explain-neighbors", type=int, default=5)
    p.set_defaults(func=cmd_recommend)
    return parser


def _thread_cap():
    raw = os.environ.get("MAVAE_THREADS")
    if not raw:
        return None
    try:
        value = int(raw)
    except ValueError:
        raise ConfigError(f"MAVAE_THREADS must be a positive integer, got {raw!r}") from None
    if value <= 0:
        raise ConfigError(f"MAVAE_THREADS must be a positive integer, got {raw!r}")
    return value


def run_command(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code == 0 else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with threadpool_limits(limits=_thread_cap()):
            return args.func(args)
    except MacvaeError as err:
        kind = {1: "configuration error", 2: "data error", 3: "numerical failure"}[err.exit_code]
        print(f"macvae {args.command}: {kind}: {err}", file=sys.stderr)
        return err.exit_code


def main():
    sys.exit(run_command())


if __name__ == "__main__":
    main()
