"""Command-line entry point: ``cafe-micro <subcommand> ...``.

Exit codes: 0 success, 2 config/argument error, 3 data error, 4 checkpoint
error, 5 divergence or numeric failure.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import PAIRS_FILE, SPLIT_FILE, generate_pairs, load_split, split_ids, write_dataset, write_split
from .errors import ArgumentError, CafeError, CheckpointError, ConfigError, DataError
from .evaluation import (
    emit_reports,
    evaluate_embeddings,
    evaluate_model,
    embed_pairs,
    write_report_json,
)
from .model import load_checkpoint, read_container, write_container
from .trainer import TrainConfig, train

THREADS_ENV = "CAFE_MICRO_THREADS"
EMBEDDING_KIND = "embeddings"
GAP_FILES = ("gap.json", "gap.svg", "gap_coords.csv")


# -- config ------------------------------------------------------------------
def _coerce(name: str, raw: str):
    field = {f.name: f for f in dataclasses.fields(TrainConfig)}[name]
    kind = field.type if isinstance(field.type, str) else getattr(field.type, "__name__", "")
    raw = raw.strip()
    if "None" in kind and raw.lower() in ("none", ""):
        return None
    try:
        if kind.startswith("bool"):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind.startswith("int"):
            return int(raw)
        if kind.startswith("float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind.split()[0]}") from None
    return raw


def parse_config_text(text: str, source: str = "<config>") -> dict:
    """Parse flat ``key = value`` lines with ``#`` comments into TrainConfig overrides."""
    parser = configparser.ConfigParser(comment_prefixes=("#",), inline_comment_prefixes=("#",),
                                       delimiters=("=",), interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string("[run]\n" + text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {' '.join(str(exc).split())}") from None
    known = set(TrainConfig.field_names())
    out = {}
    for key, value in parser["run"].items():
        key = key.strip().replace("-", "_")
        if key not in known:
            raise ConfigError(f"{source}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def load_config(path: str | Path) -> dict:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    cfg = parse_config_text(text, str(path))
    # relative dataset/output paths resolve against the config file
    for key in ("data", "out"):
        if cfg.get(key) and not Path(cfg[key]).is_absolute():
            cfg[key] = str(path.parent / cfg[key])
    return cfg


def resolve_threads(flag: int | None) -> int:
    if flag is None:
        raw = os.environ.get(THREADS_ENV, "1")
        try:
            flag = int(raw)
        except ValueError:
            raise ArgumentError(f"{THREADS_ENV} must be an integer, got {raw!r}") from None
    if flag < 1:
        raise ArgumentError("threads must be >= 1")
    return flag


# -- embedding files ---------------------------------------------------------
def write_embeddings(path: str | Path, ids: Sequence[int], emb: np.ndarray, modality: str) -> None:
    meta = {"kind": EMBEDDING_KIND, "modality": modality, "n": len(ids), "dim": int(emb.shape[1])}
    write_container(path, meta, {"ids": np.asarray(ids, dtype=np.float64), "embeddings": emb})


def read_embeddings(path: str | Path) -> tuple[dict, np.ndarray, np.ndarray]:
    meta, tensors = read_container(path)
    if meta.get("kind") != EMBEDDING_KIND or set(tensors) != {"ids", "embeddings"}:
        raise CheckpointError(f"{path} is not an embedding file")
    return meta, tensors["ids"].astype(np.int64), tensors["embeddings"]


# -- subcommands -------------------------------------------------------------
def cmd_gen_data(args) -> None:
    if args.n < 1:
        raise ArgumentError("--n must be positive")
    heldout = args.n // 9 if args.heldout is None else args.heldout
    if not 0 <= heldout <= args.n:
        raise ArgumentError("--heldout must lie in [0, n]")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pairs = generate_pairs(args.n, args.seed)
    write_dataset(pairs, out / PAIRS_FILE)
    write_split(split_ids(pairs, heldout, args.seed), out / SPLIT_FILE)
    print(f"wrote {args.n} pairs ({heldout} heldout) to {out}")


def cmd_train(args) -> None:
    values = load_config(args.config) if args.config else {}
    for name in TrainConfig.field_names():
        flag = getattr(args, f"cfg_{name}", None)
        if flag is not None:
            values[name] = _coerce(name, flag)
    if args.out is not None:
        values["out"] = args.out
    if args.data is not None:
        values["data"] = args.data
    if not values.get("out"):
        raise ConfigError("no output directory (--out or out = ...)")
    cfg = TrainConfig(**values)
    every = max(1, args.log_every)

    def log(m):
        if m.step % every == 0 or m.step == cfg.steps:
            print(f"step {m.step} loss {m.loss_total:.4f} lm {m.loss_lm:.4f} con {m.loss_con:.4f}", flush=True)

    train(cfg, log=None if args.quiet else log)
    print(f"checkpoint and metrics written to {cfg.out}")


def cmd_embed(args) -> None:
    m = load_checkpoint(args.ckpt)
    pairs = load_split(args.data, args.split)
    emb = embed_pairs(m, pairs, args.modality, resolve_threads(args.threads))
    write_embeddings(args.out, [p.id for p in pairs], emb, args.modality)
    print(f"wrote {len(pairs)} {args.modality} embeddings to {args.out}")


def _load_pair_embeddings(image_path, text_path) -> tuple[np.ndarray, np.ndarray]:
    mi, ids_i, hv = read_embeddings(image_path)
    mt, ids_t, ht = read_embeddings(text_path)
    if mi.get("modality") != "image" or mt.get("modality") != "text":
        raise DataError("expected an image embedding file and a text embedding file")
    if not np.array_equal(ids_i, ids_t):
        raise DataError("image and text embedding files cover different pair ids")
    return hv, ht


def cmd_eval_retrieval(args) -> None:
    if args.image_emb or args.text_emb:
        if not (args.image_emb and args.text_emb) or args.ckpt:
            raise ArgumentError("give either --ckpt/--data or both --image-emb and --text-emb")
        hv, ht = _load_pair_embeddings(args.image_emb, args.text_emb)
        report, gap = evaluate_embeddings(hv, ht)
    else:
        if not (args.ckpt and args.data):
            raise ArgumentError("--ckpt and --data are required")
        m = load_checkpoint(args.ckpt)
        report, gap, _, _ = evaluate_model(m, load_split(args.data, args.split), resolve_threads(args.threads))
    write_report_json(report, gap, args.out)
    print(f"i2t R@1 {report.i2t.r1:.4f} R@5 {report.i2t.r5:.4f} | t2i R@1 {report.t2i.r1:.4f} "
          f"R@5 {report.t2i.r5:.4f} (n={report.n})")


def cmd_gap(args) -> None:
    m = load_checkpoint(args.ckpt)
    pairs = load_split(args.data, args.split)
    if args.limit is not None:
        pairs = pairs[: args.limit]
    report, gap, hv, ht = evaluate_model(m, pairs, resolve_threads(args.threads))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    emit_reports(report, gap, hv, ht, *(out / f for f in GAP_FILES), title=f"PCA of {len(pairs)} pairs")
    print(f"centroid gap {gap.centroid_gap:.4f} matched {gap.matched_cos:.4f} "
          f"mismatched {gap.mismatched_cos:.4f}")


def cmd_gradcheck(args) -> int:
    from .gradcheck import DIMS, TOLERANCE, gradcheck_suite

    if args.dims not in DIMS:
        raise ArgumentError(f"--dims must be one of {sorted(DIMS)}")
    results = gradcheck_suite(args.dims, args.seed)
    for name, err in results.items():
        print(f"{name:32s} {err:.3e} {'ok' if err < TOLERANCE else 'FAIL'}")
    worst = max(results.values())
    print(f"max relative error {worst:.3e}")
    if not worst < TOLERANCE:
        print(f"gradcheck failed: max relative error {worst:.3e} >= {TOLERANCE:g}", file=sys.stderr)
        return 5
    return 0


# -- parser ------------------------------------------------------------------
class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ArgumentError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="cafe-micro", description="Toy joint contrastive + captioning multimodal embedder.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset and split manifest")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--heldout", type=int, default=None, help="heldout pairs (default n // 9)")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train from a config file; flags override its values")
    t.add_argument("--config")
    t.add_argument("--out")
    t.add_argument("--data")
    t.add_argument("--log-every", type=int, default=100)
    t.add_argument("--quiet", action="store_true")
    skip = {"out", "data"}
    for name in TrainConfig.field_names():
        if name not in skip:
            t.add_argument(f"--{name.replace('_', '-')}", dest=f"cfg_{name}", metavar="VALUE")
    t.set_defaults(func=cmd_train)

    def add_eval_common(sp, need_ckpt=True):
        sp.add_argument("--ckpt", required=need_ckpt)
        sp.add_argument("--data", required=need_ckpt)
        sp.add_argument("--split", default="heldout", choices=("train", "heldout", "all"))
        sp.add_argument("--threads", type=int, default=None)
        sp.add_argument("--out", required=True)

    e = sub.add_parser("embed", help="export embeddings of one modality")
    add_eval_common(e)
    e.add_argument("--modality", required=True, choices=("image", "text", "both"))
    e.set_defaults(func=cmd_embed)

    r = sub.add_parser("eval-retrieval", help="retrieval report JSON")
    add_eval_common(r, need_ckpt=False)
    r.add_argument("--image-emb")
    r.add_argument("--text-emb")
    r.set_defaults(func=cmd_eval_retrieval)

    gp = sub.add_parser("gap", help="modality-gap report, PCA scatter SVG and coordinate CSV")
    add_eval_common(gp)
    gp.add_argument("--limit", type=int, default=None, help="use only the first LIMIT pairs")
    gp.set_defaults(func=cmd_gap)

    gc = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    gc.add_argument("--dims", default="tiny")
    gc.add_argument("--seed", type=int, default=0)
    gc.set_defaults(func=cmd_gradcheck)
    return p


def run(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        code = args.func(args)
        return 0 if code is None else code
    except CafeError as exc:
        print(f"cafe-micro: {' '.join(str(exc).split())}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"cafe-micro: {exc}", file=sys.stderr)
        return 3


def main() -> None:
    sys.exit(run())
