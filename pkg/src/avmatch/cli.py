"""Operator command line: one subcommand per pipeline stage.

Stages chain through files (stores, pair lists, split maps,
checkpoints), so any step can be rerun in isolation. Exit codes:
0 success, 1 runtime failure with a diagnostic on stderr, 2 usage
error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import sys
from typing import Sequence

import numpy as np

from .curation import (
    GLOBAL_GREEDY,
    SEQUENTIAL_GREEDY,
    PairingConfig,
    PromptSpec,
    SplitAssignment,
    TextBackend,
    build_prompt,
    generate_sentence,
    make_splits,
    pair,
    pair_within_splits,
    parse_limit,
    read_pairs,
    template_sentence,
    write_pairs,
    write_split_pairs,
)
from .errors import AvmatchError, BadConfig
from .index import top_k
from .metrics import evaluate, render_table
from .store import (
    EmbeddingStore,
    load_store,
    save_store,
    synth_store,
)
from .store import _meta_from_json  # shared sidecar schema
from .study import StudyStore
from .train import (
    TrainConfig,
    fit,
    load_checkpoint,
    project_all,
    save_checkpoint,
)

DEFAULT_EXEMPLARS = (
    (("dog", "bark", "park"), "a dog barking in a park"),
    (("rain", "window", "storm"), "rain hitting a window during a storm"),
)


def _split_tags(text: str) -> tuple[str, ...]:
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _parse_hidden(text: str) -> tuple[int, ...]:
    t = text.strip().lower()
    if t in ("", "none"):
        return ()
    try:
        return tuple(int(x) for x in t.split(",") if x.strip())
    except ValueError:
        raise BadConfig(f"bad hidden layer list {text!r}") from None


def _out_stream(path: str | None):
    if path is None or path == "-":
        return sys.stdout, False
    return open(path, "w", encoding="utf-8"), True


def _load_exemplars(path: str | None):
    if path is None:
        return DEFAULT_EXEMPLARS
    exemplars = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            exemplars.append((tuple(rec["tags"]), rec["sentence"]))
    if not exemplars:
        raise BadConfig(f"no exemplars in {path}")
    return tuple(exemplars)


# --- subcommand handlers -------------------------------------------------

def cmd_ingest(args) -> int:
    entries = []
    dim = args.dim
    with open(args.input, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if "vector" not in rec:
                raise BadConfig(f"record {rec.get('id')!r} has no vector")
            vec = np.asarray(rec["vector"], dtype=np.float32)
            if dim is None:
                dim = int(vec.shape[0])
            item_id, meta = _meta_from_json(rec)
            entries.append((item_id, vec, meta))
    if dim is None:
        raise BadConfig(f"{args.input}: no records to ingest")
    store = EmbeddingStore.build(dim, entries, normalize=True)
    save_store(store, args.out)
    print(f"ingested {len(store)} items (dim {store.dim}) -> {args.out}")
    return 0


def cmd_synth(args) -> int:
    store = synth_store(
        seed=args.seed, n_items=args.n, dim=args.dim,
        n_categories=args.categories, cluster_spread=args.spread,
        kind=args.kind, id_prefix=args.prefix, center_seed=args.center_seed,
        frames_per_video=args.frames_per_video)
    save_store(store, args.out)
    print(f"synthesized {len(store)} {args.kind} items (dim {store.dim}, "
          f"{args.categories} categories) -> {args.out}")
    return 0


def cmd_prompt(args) -> int:
    spec = PromptSpec(exemplars=_load_exemplars(args.exemplars),
                      query_tags=_split_tags(args.tags),
                      **({"instruction": args.instruction}
                         if args.instruction else {}))
    print(build_prompt(spec))
    return 0


def cmd_sentence(args) -> int:
    tags = _split_tags(args.tags)
    if args.backend_url:
        spec = PromptSpec(exemplars=_load_exemplars(args.exemplars),
                          query_tags=tags)
        backend = TextBackend(args.backend_url, timeout_s=args.timeout)
        sentence = generate_sentence(spec, backend,
                                     fallback=not args.no_fallback)
    else:
        sentence = template_sentence(tags)
    print(sentence)
    return 0


def cmd_match(args) -> int:
    text = load_store(args.text_store)
    frames = load_store(args.frame_store)
    out, close = _out_stream(args.out)
    try:
        for audio_id in sorted(text.ids):
            ranked = top_k(frames, text.vector(audio_id), args.k,
                           workers=args.threads)
            for rank, (frame_id, score) in enumerate(ranked.entries, 1):
                out.write(json.dumps({"audio_id": audio_id,
                                      "frame_id": frame_id,
                                      "score": score, "rank": rank}) + "\n")
    finally:
        if close:
            out.close()
    if close:
        print(f"matched {len(text)} audio items against {len(frames)} "
              f"frames -> {args.out}")
    return 0


def cmd_pair(args) -> int:
    text = load_store(args.text_store)
    frames = load_store(args.frame_store)
    cfg = PairingConfig(limit_per_frame=parse_limit(args.n),
                        frames_per_audio=args.k, mode=args.mode)
    if args.splits:
        by_split = pair_within_splits(text, frames,
                                      SplitAssignment.load(args.splits), cfg)
        if not args.out:
            raise BadConfig("pair --splits requires --out")
        write_split_pairs(args.out, by_split)
        sizes = {s: len(by_split.get(s, [])) for s in ("train", "val",
                                                       "test")}
        print(f"paired per split: train {sizes['train']} / "
              f"val {sizes['val']} / test {sizes['test']} -> {args.out}")
        return 0
    pairs = pair(text, frames, cfg)
    if args.out:
        write_pairs(args.out, pairs)
        distinct = len({p.frame_id for p in pairs})
        print(f"paired {len(text)} audio -> {len(pairs)} pairs "
              f"({distinct} distinct frames) -> {args.out}")
    else:
        for p in pairs:
            print(json.dumps({"audio_id": p.audio_id, "frame_id": p.frame_id,
                              "score": p.score,
                              "rank_within_audio": p.rank_within_audio}))
    return 0


def cmd_split(args) -> int:
    audio = load_store(args.audio_store).audio_items()
    frames = load_store(args.frame_store).frame_items()
    assign = make_splits(audio, frames, args.val, args.test, args.seed)
    assign.save(args.out)
    sizes = {s: len(assign.audio_ids(s)) for s in ("train", "val", "test")}
    print(f"split {len(audio)} audio items "
          f"(train {sizes['train']} / val {sizes['val']} / "
          f"test {sizes['test']}) -> {args.out}")
    return 0


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        batch_size=args.batch_size, learning_rate=args.lr,
        max_epochs=args.epochs, temperature=args.temperature,
        seed=args.seed, symmetric_loss=not args.one_sided_loss,
        optimizer=args.optimizer, hidden_dims=_parse_hidden(args.hidden),
        activation=args.activation, eval_k=args.eval_k)


def cmd_train(args) -> int:
    audio = load_store(args.audio_store)
    frames = load_store(args.frame_store)
    train_pairs = read_pairs(args.pairs, split="train")
    val_pairs = read_pairs(args.pairs, split="val")
    ckpt = fit(train_pairs, audio, frames, _train_config(args), val_pairs,
               log_path=args.log)
    save_checkpoint(ckpt, args.out)
    print(f"trained {args.epochs} epochs on {len(train_pairs)} pairs; "
          f"best epoch {ckpt.epoch} "
          f"(val category P@{args.eval_k} {ckpt.val_category_p10:.4f}) "
          f"-> {args.out}")
    return 0


def cmd_project(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    audio = load_store(args.audio_store)
    projected = project_all(ckpt.projector, audio)
    save_store(projected, args.out)
    print(f"projected {len(projected)} audio items into dim "
          f"{projected.dim} -> {args.out}")
    return 0


def _categories_of(store: EmbeddingStore) -> dict[str, str]:
    return {item_id: store.meta[item_id].category for item_id in store.ids}


def cmd_eval(args) -> int:
    if args.projected:
        projected = load_store(args.projected)
    elif args.checkpoint and args.audio_store:
        ckpt = load_checkpoint(args.checkpoint)
        projected = project_all(ckpt.projector, load_store(args.audio_store))
    else:
        raise BadConfig("eval needs --projected or --checkpoint with "
                        "--audio-store")
    frames = load_store(args.frame_store)
    pairs = read_pairs(args.pairs, split=args.split)
    report = evaluate(projected, pairs, frames, _categories_of(projected),
                      k=args.k, dataset_name=args.name)
    print(render_table([report]))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(report.to_json() + "\n")
    return 0


def cmd_sweep(args) -> int:
    text = load_store(args.text_store)
    frames = load_store(args.frame_store)
    audio = load_store(args.audio_store)
    assign = make_splits(audio.audio_items(), frames.frame_items(),
                         args.val, args.test, args.seed)
    limits = [parse_limit(t) for t in args.limits.split(",") if t.strip()]
    if not limits:
        raise BadConfig("sweep needs at least one limit")

    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["limit", "n_pairs", "exact_mr", f"exact_r_at_{args.k}",
                     f"category_r_at_{args.k}", f"category_p_at_{args.k}"])
    for limit in limits:
        cfg = PairingConfig(limit_per_frame=limit,
                            frames_per_audio=args.k_per_audio)
        by_split = pair_within_splits(text, frames, assign, cfg)
        n_pairs = sum(len(v) for v in by_split.values())
        ckpt = fit(by_split["train"], audio, frames, _train_config(args),
                   by_split["val"])
        projected = project_all(ckpt.projector, audio)
        report = evaluate(projected, by_split["test"], frames,
                          _categories_of(projected), k=args.k,
                          dataset_name=f"limit={args_limit_label(limit)}")
        writer.writerow([args_limit_label(limit), n_pairs,
                         report.exact_mr, report.exact_r_at_k,
                         report.category_r_at_k, report.category_p_at_k])

    out, close = _out_stream(args.out)
    try:
        out.write(buf.getvalue())
    finally:
        if close:
            out.close()
    if close:
        print(f"sweep over {len(limits)} limits -> {args.out}")
    return 0


def args_limit_label(limit: float) -> str:
    return "inf" if math.isinf(limit) else str(int(limit))


def cmd_serve(args) -> int:
    from .service import load_service_config, run_service

    run_service(load_service_config(args.service_config))
    return 0


def cmd_study_report(args) -> int:
    store = StudyStore(args.votes, args.sessions)
    result = store.result()
    if args.format == "json":
        print(result.to_json())
    else:
        print(f"{'Dataset':<10}{'Votes':>8}{'System 1':>10}"
              f"{'Share':>10}{'P-value':>14}")
        for d in result.datasets:
            share = f"{d.proportion:.4f}" if d.proportion is not None else "-"
            p = f"{d.p_value:.3e}" if d.p_value is not None else "-"
            print(f"{d.dataset:<10}{d.n:>8}{d.k_system_1:>10}"
                  f"{share:>10}{p:>14}")
        print(f"total votes: {result.n_total}")
    return 0


# --- parser --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of default option values")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--log-level", default="warning")

    train_common = argparse.ArgumentParser(add_help=False)
    train_common.add_argument("--batch-size", type=int, default=64)
    train_common.add_argument("--lr", type=float, default=1e-5)
    train_common.add_argument("--epochs", type=int, default=150)
    train_common.add_argument("--temperature", type=float, default=0.07)
    train_common.add_argument("--hidden", default="512",
                              help="comma-separated hidden layer sizes")
    train_common.add_argument("--activation", default="relu",
                              choices=["relu", "gelu"])
    train_common.add_argument("--optimizer", default="adam",
                              choices=["adam", "sgd"])
    train_common.add_argument("--one-sided-loss", action="store_true",
                              help="disable the symmetric loss term")
    train_common.add_argument("--eval-k", type=int, default=10)

    parser = argparse.ArgumentParser(
        prog="avmatch",
        description="Desk-scale audio-visual SFX retrieval pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("ingest", parents=[common],
                       help="build a store file from a JSONL of vectors")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--dim", type=int)
    p.set_defaults(handler=cmd_ingest)

    p = sub.add_parser("synth", parents=[common],
                       help="generate a synthetic clustered store")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--dim", type=int, required=True)
    p.add_argument("--categories", type=int, required=True)
    p.add_argument("--spread", type=float, default=0.1)
    p.add_argument("--kind", default="audio",
                   choices=["audio", "frame", "text"])
    p.add_argument("--prefix")
    p.add_argument("--center-seed", type=int)
    p.add_argument("--frames-per-video", type=int, default=10)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("prompt", parents=[common],
                       help="print the few-shot tag-to-sentence prompt")
    p.add_argument("--tags", required=True)
    p.add_argument("--exemplars", help="JSONL of {tags, sentence} records")
    p.add_argument("--instruction")
    p.set_defaults(handler=cmd_prompt)

    p = sub.add_parser("sentence", parents=[common],
                       help="turn tags into a descriptive sentence")
    p.add_argument("--tags", required=True)
    p.add_argument("--exemplars")
    p.add_argument("--backend-url",
                   help="text backend; omitted = offline template")
    p.add_argument("--timeout", type=float, default=10.0)
    p.add_argument("--no-fallback", action="store_true")
    p.set_defaults(handler=cmd_sentence)

    p = sub.add_parser("match", parents=[common],
                       help="rank frames for every audio sentence embedding")
    p.add_argument("--text-store", required=True)
    p.add_argument("--frame-store", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--out")
    p.set_defaults(handler=cmd_match)

    p = sub.add_parser("pair", parents=[common],
                       help="capacity-constrained audio-frame pairing")
    p.add_argument("--text-store", required=True)
    p.add_argument("--frame-store", required=True)
    p.add_argument("--n", default="inf",
                   help="per-frame capacity (integer or inf)")
    p.add_argument("--k", type=int, default=1,
                   help="frames kept per audio")
    p.add_argument("--mode", default=SEQUENTIAL_GREEDY,
                   choices=[SEQUENTIAL_GREEDY, GLOBAL_GREEDY])
    p.add_argument("--splits",
                   help="split assignment JSON; pairs within each split")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_pair)

    p = sub.add_parser("split", parents=[common],
                       help="disjoint train/val/test assignment")
    p.add_argument("--audio-store", required=True)
    p.add_argument("--frame-store", required=True)
    p.add_argument("--val", type=int, required=True)
    p.add_argument("--test", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_split)

    p = sub.add_parser("train", parents=[common, train_common],
                       help="fit the contrastive projection")
    p.add_argument("--pairs", required=True,
                   help="JSONL with train and val splits")
    p.add_argument("--audio-store", required=True)
    p.add_argument("--frame-store", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", help="per-epoch JSONL training log")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("project", parents=[common],
                       help="project audio features through a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--audio-store", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_project)

    p = sub.add_parser("eval", parents=[common],
                       help="retrieval metrics over test pairs")
    p.add_argument("--projected")
    p.add_argument("--checkpoint")
    p.add_argument("--audio-store")
    p.add_argument("--pairs", required=True)
    p.add_argument("--frame-store", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--name", default="test")
    p.add_argument("--out")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("sweep", parents=[common, train_common],
                       help="pairing-limit ablation grid, one CSV row each")
    p.add_argument("--limits", required=True,
                   help="comma-separated per-frame capacities, e.g. "
                        "1,2,5,10,100,inf")
    p.add_argument("--text-store", required=True)
    p.add_argument("--frame-store", required=True)
    p.add_argument("--audio-store", required=True)
    p.add_argument("--val", type=int, required=True)
    p.add_argument("--test", type=int, required=True)
    p.add_argument("--k", type=int, default=10, help="metrics cutoff")
    p.add_argument("--k-per-audio", type=int, default=1)
    p.add_argument("--out")
    p.set_defaults(handler=cmd_sweep)

    p = sub.add_parser("serve", parents=[common],
                       help="run the HTTP service")
    p.add_argument("service_config", help="service config JSON path")
    p.set_defaults(handler=cmd_serve)

    p = sub.add_parser("study-report", parents=[common],
                       help="aggregate the study vote log")
    p.add_argument("--votes", required=True)
    p.add_argument("--sessions")
    p.add_argument("--format", default="json", choices=["json", "table"])
    p.set_defaults(handler=cmd_study_report)

    return parser


def _config_values(path: str, command: str) -> dict:
    """Option values from the config file: a JSON object with an
    optional "defaults" section plus one section per subcommand;
    section values override defaults."""
    with open(path, "r", encoding="utf-8") as f:
        values = json.load(f)
    if not isinstance(values, dict):
        raise BadConfig(f"{path}: config must be a JSON object")
    merged = dict(values.get("defaults", {}))
    merged.update(values.get(command, {}))
    return {key.replace("-", "_"): value for key, value in merged.items()}


def _apply_config_defaults(parser: argparse.ArgumentParser, command: str,
                           values: dict) -> None:
    """Install config values as the chosen subcommand's defaults, so a
    re-parse makes argparse defaults lose to the config while explicit
    flags still win over both."""
    for action in parser._actions:
        choices = getattr(action, "choices", None)
        if isinstance(choices, dict) and command in choices:
            choices[command].set_defaults(**values)
            return
    raise BadConfig(f"no subcommand {command!r} for config sections")


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "config", None):
            values = _config_values(args.config, args.command)
            if values:
                _apply_config_defaults(parser, args.command, values)
                args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code if exc.code is not None else 0
        return int(code)
    except (AvmatchError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(
        level=getattr(logging, str(args.log_level).upper(), logging.WARNING))
    try:
        return args.handler(args)
    except AvmatchError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyError as exc:
        print(f"error: unknown id {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
