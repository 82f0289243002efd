"""Command-line entry point.

Exit codes: 0 success, 2 usage/config error, 3 data or format error,
4 check failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import audit, cammf
from .config import RunConfig, apply_overrides, load_config
from .descriptor import Descriptor, StoredDescriptor, load_store, save_store
from .encoder import load_manifest, load_record_tokens
from .errors import (ConfigError, ContractError, DataError, DimensionError, EvaluationError, FormatError,
                     MMVPRError, ValidationError)
from .model import FusionModel, init_params
from .retrieval import PlaceRecord, RecallReport, recall_at_n
from .scenarios import write_scenario
from .trainer import TokenPool, file_sha256, load_weights, save_weights, train_toy, write_trace

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CHECK = 0, 2, 3, 4


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig.toy()
    overrides = {}
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        overrides[key] = _parse_value(value)
    if args.seed is not None:
        overrides["seed"] = args.seed
    return apply_overrides(cfg, overrides).validate()


def _run_record(cfg: RunConfig, **extra) -> dict:
    return {"config": cfg.to_json(), "seed": cfg.seed, **extra}


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n")


def _model(cfg: RunConfig, weights: str | None) -> FusionModel:
    store = init_params(cfg)
    if weights:
        load_weights(weights, into=store)
    return FusionModel(cfg, store)


def _manifest_tokens(records, cfg: RunConfig):
    X, Y = [], []
    for r in records:
        image, text = load_record_tokens(r)
        X.append(image.tokens)
        Y.append(text.tokens if text is not None else np.zeros((cfg.N, cfg.D)))
    return np.stack(X), np.stack(Y)


def _select(records, split: str):
    if split == "all":
        return list(records)
    chosen = [r for r in records if r.split == split]
    if not chosen:
        raise DataError(f"manifest has no records with split {split!r}")
    return chosen


# ------------------------------------------------------------- commands

def cmd_synth(args, cfg: RunConfig) -> int:
    cfg = apply_overrides(cfg, {"scenario.name": args.scenario}).validate()
    records = write_scenario(cfg, args.out_manifest)
    print(json.dumps(_run_record(cfg, records=len(records), manifest=str(args.out_manifest)), sort_keys=True))
    return EXIT_OK


def cmd_train_toy(args, cfg: RunConfig) -> int:
    pool = None
    if args.manifest:
        records = load_manifest(args.manifest)
        train = [r for r in records if r.split == "train"] or [r for r in records if r.split == "database"]
        X, Y = _manifest_tokens(train, cfg)
        pool = TokenPool(train, X, Y)
    result = train_toy(cfg, pool)
    save_weights(args.out_weights, result.store)
    write_trace(args.trace, result.trace)
    losses = [loss for _, loss, _ in result.trace]
    print(json.dumps(_run_record(cfg, weights_sha256=file_sha256(args.out_weights), steps=len(losses),
                                 initial_loss=losses[0] if losses else None,
                                 final_loss=losses[-1] if losses else None), sort_keys=True))
    return EXIT_OK


def cmd_build_descriptors(args, cfg: RunConfig) -> int:
    records = _select(load_manifest(args.manifest), args.split)
    model = _model(cfg, args.weights)
    X, Y = _manifest_tokens(records, cfg)
    values, _ = model.forward(X, Y, image_only=args.image_only)
    save_store(args.out, [StoredDescriptor(r.id, r.lat, r.lon, r.heading, values[i]) for i, r in enumerate(records)])
    print(json.dumps(_run_record(cfg, records=len(records), dim=int(values.shape[-1]), out=str(args.out),
                                 weights_sha256=file_sha256(args.weights) if args.weights else None),
                     sort_keys=True))
    return EXIT_OK


def _place_records(path, cfg: RunConfig) -> list[PlaceRecord]:
    dim, stored = load_store(path)
    if stored and dim != cfg.descriptor_dim:
        raise ContractError(f"{path}: descriptor dim {dim} does not match variant {cfg.variant} "
                            f"with D={cfg.D} ({cfg.descriptor_dim})")
    return [PlaceRecord(s.id, s.lat, s.lon, Descriptor(s.values, cfg.descriptor_variant, cfg.normalize), s.heading)
            for s in stored]


def cmd_evaluate(args, cfg: RunConfig) -> int:
    queries = _place_records(args.queries, cfg)
    db = _place_records(args.database, cfg)
    report = recall_at_n(queries, db, cfg.rule, cfg.Ns)
    report.meta = _run_record(cfg, queries_sha256=file_sha256(args.queries),
                              database_sha256=file_sha256(args.database),
                              weights_sha256=file_sha256(args.weights) if args.weights else None)
    _write_json(args.out_report, report.to_json())
    Path(args.out_report).with_suffix(".tsv").write_text(report.to_tsv())
    sys.stdout.write(report.to_tsv())
    return EXIT_OK


def cmd_dump_attention(args, cfg: RunConfig) -> int:
    records = _select(load_manifest(args.manifest), args.split)
    if args.limit is not None:
        records = records[:args.limit]
    model = _model(cfg, args.weights)
    X, Y = _manifest_tokens(records, cfg)
    fusion, cache = model.encode(X, Y)
    atrec_dump = []
    if cache.recal is not None:
        atrec_dump = [{"id": r.id, "S": cache.recal.S[i].tolist()} for i, r in enumerate(records)]
    attention = []
    for i, r in enumerate(records):
        for b in cammf.BRANCHES:
            labels = cammf.key_labels(b, cfg.grid_h, cfg.grid_w, cfg.N)
            for layer, p in enumerate(fusion.attn[b], start=1):
                for h in range(cfg.heads):
                    attention.append({"id": r.id, "branch": b, "layer": layer, "head": h,
                                      "weights": p[i, h].tolist(), "key_labels": labels})
    _write_json(args.out, {"run": _run_record(cfg, weights_sha256=file_sha256(args.weights) if args.weights else None),
                           "atrec": atrec_dump, "attention": attention})
    return EXIT_OK


def cmd_gradcheck(args, cfg: RunConfig) -> int:
    reports = audit.run_all(cfg, seed=cfg.seed, tol=args.tol, eps=args.eps)
    ok = True
    out = {}
    for name, rep in reports.items():
        ok &= rep.passed
        print(f"{'PASS' if rep.passed else 'FAIL'} {name:12s} max_rel_err={rep.max_error:.3e} (tol {args.tol:g})")
        out[name] = {"passed": rep.passed, "max_error": rep.max_error, "errors": rep.errors}
    if args.out:
        _write_json(args.out, {"run": _run_record(cfg), "eps": args.eps, "tol": args.tol, "checks": out})
    return EXIT_OK if ok else EXIT_CHECK


# --------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mmvpr", description="Multi-modal place recognition toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="RunConfig JSON (default: toy preset)")
        p.add_argument("--seed", type=int)
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field, e.g. train.steps=50")
        p.set_defaults(func=fn)
        return p

    p = add("synth", cmd_synth, "write a synthetic token dataset and manifest")
    p.add_argument("--scenario", choices=["aliasing", "clusters"], required=True)
    p.add_argument("--out-manifest", required=True)

    p = add("train-toy", cmd_train_toy, "train AT-REC and fusion weights with MS loss")
    p.add_argument("--out-weights", required=True)
    p.add_argument("--trace", required=True)
    p.add_argument("--manifest", help="train on manifest records instead of the configured synthetic scenario")

    p = add("build-descriptors", cmd_build_descriptors, "compute descriptors for manifest records")
    p.add_argument("--manifest", required=True)
    p.add_argument("--weights", help="weights file (default: seeded initialisation)")
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="all", choices=["all", "query", "database", "train"])
    p.add_argument("--image-only", action="store_true", help="blank the text tokens")

    p = add("evaluate", cmd_evaluate, "Recall@N of query descriptors against a database")
    p.add_argument("--queries", required=True)
    p.add_argument("--database", required=True)
    p.add_argument("--out-report", required=True)
    p.add_argument("--weights", help="weights file to fingerprint in the report")

    p = add("dump-attention", cmd_dump_attention, "export AT-REC weights and cross-attention maps")
    p.add_argument("--manifest", required=True)
    p.add_argument("--weights")
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="all", choices=["all", "query", "database", "train"])
    p.add_argument("--limit", type=int)

    p = add("gradcheck", cmd_gradcheck, "finite-difference audit of every backward pass")
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--out")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args)
        return args.func(args, cfg)
    except (ConfigError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FormatError, DimensionError, ContractError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (EvaluationError, MMVPRError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK


if __name__ == "__main__":
    sys.exit(main())
