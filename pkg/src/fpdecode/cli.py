"""Batch command line: tokenize, bucket-stats, corrupt, train, decode, rerank, evaluate.

Every command reads JSONL (one record per line), writes JSONL or JSON whose
first line/key is a ``_meta`` header (tool version, config digest, seed), and
is deterministic for fixed inputs, config and seed regardless of ``--workers``.

Exit codes: 0 success, 1 usage error, 2 data error.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import jsonschema
import numpy as np

from . import __version__
from .corruption import (
    DEFAULT_BOUNDARIES,
    CorruptionConfig,
    bit_frequencies,
    build_buckets,
    corrupt_detailed,
    derive_weights,
    estimate_bucket_stats,
    load_stats,
    packaged_stats_path,
    record_rng,
)
from .decoding import beam_search, binarize, candidate_from_json
from .metrics import EvalReport, evaluate_record, rerank
from .model import FactorEmbeddingModel, TrainConfig, train_reference_model
from .molgraph import FP_BITS, Fingerprint, Formula, MolecularGraph, ProbFingerprint, canonical_hash, formula_of
from .selfies import Vocabulary, corpus_counts, decode, encode, split_tokens
from .structure_loss import LossWeights

log = logging.getLogger("fpdecode")

ENV_CONFIG = "FPDECODE_CONFIG"
EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

DEFAULT_CONFIG: dict = {
    "vocab": None,
    "seed": 0,
    "nbits": FP_BITS,
    "boundaries": [list(b) for b in DEFAULT_BOUNDARIES],
    "corruption": {"p_corr": 0.5, "k_min": 1, "k_max": 8, "lam": None, "eps": 0.05, "alpha": 1.0},
    "decoding": {"width": 100, "n_candidates": 100, "threshold": 0.2, "max_len": 64, "masks_on": True, "cap_counts": True},
    "loss": {"lambda_sent": 0.1, "w_elem": 1.0, "w_bond": 1.0, "w_ring": 1.0, "w_branch": 1.0},
    "train": {
        "lr": 5e-3,
        "epochs": 300,
        "hidden": 64,
        "tau": 100,
        "batch_size": 32,
        "max_len": 64,
        "warmup_steps": 150,
        "corrupt": False,
    },
    "evaluate": {"ks": [1, 10], "mces_penalty": 0, "mces_node_budget": 200000},
}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# -- schemas

_BITS = {"type": "array", "items": {"type": "integer", "minimum": 0}}
_PROBS = {"type": "array", "items": {"type": "number", "minimum": 0, "maximum": 1}}
_ID = {"type": ["string", "integer"]}
_GRAPH = {
    "atoms": {
        "type": "array",
        "items": {
            "type": "object",
            "required": ["el"],
            "properties": {"el": {"type": "string"}, "h": {"type": "integer", "minimum": 0}, "q": {"type": "integer"}},
        },
    },
    "bonds": {"type": "array", "items": {"type": "array", "items": {"type": "integer"}, "minItems": 3, "maxItems": 3}},
}

SCHEMAS = {
    "molecule": {
        "type": "object",
        "required": ["id"],
        "properties": {"id": _ID, **_GRAPH, "tokens": {"type": "string"}},
        "anyOf": [{"required": ["atoms", "bonds"]}, {"required": ["tokens"]}],
    },
    "pair": {
        "type": "object",
        "required": ["id", "true"],
        "properties": {"id": _ID, "true": _BITS, "pred": _BITS, "pred_prob": _PROBS},
        "oneOf": [{"required": ["pred"]}, {"required": ["pred_prob"]}],
    },
    "fingerprint": {
        "type": "object",
        "required": ["id"],
        "properties": {"id": _ID, "fp_bits": _BITS, "fp_true": _BITS},
        "oneOf": [{"required": ["fp_bits"]}, {"required": ["fp_true"]}],
    },
    "training": {
        "type": "object",
        "required": ["id", "tokens"],
        "properties": {"id": _ID, "fp_bits": _BITS, "fp_prob": _PROBS, "tokens": {"type": "string"}},
        "oneOf": [{"required": ["fp_bits"]}, {"required": ["fp_prob"]}],
    },
    "condition": {
        "type": "object",
        "required": ["id", "formula"],
        "properties": {"id": _ID, "fp_bits": _BITS, "fp_prob": _PROBS, "formula": {"type": "string"}},
        "oneOf": [{"required": ["fp_bits"]}, {"required": ["fp_prob"]}],
    },
    "candidates": {
        "type": "object",
        "required": ["id", "formula", "candidates"],
        "properties": {
            "id": _ID,
            "formula": {"type": "string"},
            "candidates": {
                "type": "array",
                "items": {
                    "type": "object",
                    "required": ["tokens", "log_prob", "formula"],
                    "properties": {
                        "tokens": {"type": "string"},
                        "log_prob": {"type": "number", "maximum": 0},
                        "formula": {"type": "string"},
                        "formula_distance": {"type": "integer", "minimum": 0},
                    },
                },
            },
        },
    },
}
_VALIDATORS = {k: jsonschema.Draft202012Validator(v) for k, v in SCHEMAS.items()}


# -- config


def _merge(base: dict, override: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key == "_meta":
            continue
        if key not in base:
            raise UsageError(f"unknown config key {path + key!r}")
        if isinstance(base[key], dict) and isinstance(value, dict):
            out[key] = _merge(base[key], value, f"{path}{key}.")
        else:
            out[key] = value
    return out


def load_config(args: argparse.Namespace) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    path = args.config or os.environ.get(ENV_CONFIG)
    if path:
        try:
            cfg = _merge(cfg, json.loads(Path(path).read_text()))
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
    overrides = {
        ("seed",): args.seed,
        ("vocab",): getattr(args, "vocab", None),
        ("decoding", "width"): getattr(args, "beam_width", None),
        ("decoding", "threshold"): getattr(args, "threshold", None),
        ("decoding", "max_len"): getattr(args, "max_len", None),
        ("decoding", "n_candidates"): getattr(args, "n_candidates", None),
        ("corruption", "k_max"): getattr(args, "k_max", None),
        ("corruption", "p_corr"): getattr(args, "p_corr", None),
        ("train", "epochs"): getattr(args, "epochs", None),
        ("train", "corrupt"): getattr(args, "corrupt", None),
    }
    masks = getattr(args, "masks", None)
    if masks is not None:
        overrides[("decoding", "masks_on")] = masks == "on"
    for keys, value in overrides.items():
        if value is None:
            continue
        node = cfg
        for k in keys[:-1]:
            node = node[k]
        node[keys[-1]] = value
    # a wider result list than the beam is impossible; follow the beam width
    dec = cfg["decoding"]
    if getattr(args, "beam_width", None) is not None and getattr(args, "n_candidates", None) is None:
        dec["n_candidates"] = min(dec["n_candidates"], dec["width"])
    return cfg


def config_digest(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True).encode()).hexdigest()[:16]


def meta(command: str, cfg: dict) -> dict:
    return {"tool": "fpdecode", "version": __version__, "command": command, "config_digest": config_digest(cfg), "seed": cfg["seed"]}


# -- io


def read_jsonl(path: str, kind: str) -> list[dict]:
    if path == "-":
        lines = sys.stdin.read().splitlines()
    else:
        try:
            lines = Path(path).read_text().splitlines()
        except FileNotFoundError:
            raise UsageError(f"input file not found: {path}") from None
    records = []
    for lineno, line in enumerate(lines, 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
        if isinstance(obj, dict) and "_meta" in obj:
            continue
        errors = sorted(_VALIDATORS[kind].iter_errors(obj), key=lambda e: list(e.path))
        if errors:
            rid = obj.get("id", f"line {lineno}") if isinstance(obj, dict) else f"line {lineno}"
            raise DataError(f"record {rid}: {errors[0].message}")
        records.append(obj)
    return records


def _dump(obj) -> str:
    return json.dumps(obj, separators=(",", ":"))


def write_jsonl(path: str | None, header: dict, rows: Iterable[dict]) -> None:
    lines = [_dump({"_meta": header})] + [_dump(r) for r in rows]
    text = "\n".join(lines) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def write_json(path: str | None, header: dict, obj: dict) -> None:
    text = json.dumps({"_meta": header, **obj}, indent=1) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def load_vocab(cfg: dict) -> Vocabulary:
    if not cfg["vocab"]:
        return Vocabulary.default()
    try:
        return Vocabulary.loads(Path(cfg["vocab"]).read_text())
    except FileNotFoundError:
        raise UsageError(f"vocabulary file not found: {cfg['vocab']}") from None
    except ValueError as exc:
        raise DataError(f"vocabulary file {cfg['vocab']}: {exc}") from None


def _fingerprint(rec: dict, nbits: int, threshold: float) -> Fingerprint:
    try:
        if "fp_bits" in rec:
            return Fingerprint.from_indices(rec["fp_bits"], nbits)
        if len(rec["fp_prob"]) != nbits:
            raise ValueError(f"fp_prob has {len(rec['fp_prob'])} entries, expected {nbits}")
        return binarize(ProbFingerprint(rec["fp_prob"]), threshold)
    except ValueError as exc:
        raise DataError(f"record {rec['id']}: {exc}") from None


def _graph(rec: dict) -> MolecularGraph:
    try:
        if "atoms" in rec:
            return MolecularGraph.from_json(rec)
        return decode(split_tokens(rec["tokens"]))
    except (ValueError, KeyError) as exc:
        raise DataError(f"record {rec['id']}: {exc}") from None


def _formula(rec: dict, key: str = "formula") -> Formula:
    try:
        return Formula.parse(rec[key])
    except ValueError as exc:
        raise DataError(f"record {rec['id']}: {exc}") from None


# -- ordered parallel map; worker state lives in a module global

_WORKER: dict = {}


def _pmap(fn: Callable, items: Sequence, workers: int, init: Callable | None = None, initargs: tuple = ()) -> list:
    if workers <= 1 or len(items) <= 1:
        if init is not None:
            init(*initargs)
        return [fn(x) for x in items]
    chunk = max(1, len(items) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers, initializer=init, initargs=initargs) as pool:
        return list(pool.map(fn, items, chunksize=chunk))


# -- commands


def cmd_tokenize(args, cfg) -> int:
    vocab = load_vocab(cfg) if cfg["vocab"] else None
    rows, failures = [], []
    for rec in read_jsonl(args.input, "molecule"):
        g = _graph(rec)
        try:
            tokens = encode(g, vocab)
        except (KeyError, ValueError) as exc:
            raise DataError(f"record {rec['id']}: {exc}") from None
        if canonical_hash(decode(tokens)) != canonical_hash(g):
            failures.append(rec["id"])
        rows.append({"id": rec["id"], "tokens": "".join(tokens), "formula": formula_of(g).to_hill()})
    write_jsonl(args.output, meta("tokenize", cfg), rows)
    if failures:
        print(f"round-trip failures for records: {', '.join(map(str, failures))}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def cmd_bucket_stats(args, cfg) -> int:
    nbits = cfg["nbits"]
    threshold = cfg["decoding"]["threshold"]
    pairs = []
    for rec in read_jsonl(args.input, "pair"):
        true = _fingerprint({"id": rec["id"], "fp_bits": rec["true"]}, nbits, threshold)
        key = "fp_bits" if "pred" in rec else "fp_prob"
        pred = _fingerprint({"id": rec["id"], key: rec.get("pred", rec.get("pred_prob"))}, nbits, threshold)
        pairs.append((pred, true))
    boundaries = cfg["boundaries"]
    try:
        freq = bit_frequencies((t for _, t in pairs), nbits) if pairs else np.zeros(nbits)
        stats = estimate_bucket_stats(pairs, build_buckets(freq, boundaries), boundaries)
        stats = derive_weights(stats, cfg["corruption"]["eps"], cfg["corruption"]["alpha"])
    except ValueError as exc:
        raise DataError(str(exc)) from None
    write_json(args.output, meta("bucket-stats", cfg), stats.to_json())
    return EXIT_OK


def _load_bucket_stats(path: str | None, fingerprints: Sequence[Fingerprint], cfg: dict):
    path = path or packaged_stats_path()
    freq = bit_frequencies(fingerprints, cfg["nbits"]) if fingerprints else np.zeros(cfg["nbits"])
    try:
        stats = load_stats(path, freq)
    except FileNotFoundError:
        raise UsageError(f"stats file not found: {path}") from None
    except (ValueError, KeyError) as exc:
        raise DataError(f"stats file {path}: {exc}") from None
    if stats.nbits != cfg["nbits"]:
        raise DataError(f"stats cover {stats.nbits} bits, fingerprints have {cfg['nbits']}")
    if stats.w_minus is None or stats.w_plus is None:
        stats = derive_weights(stats, cfg["corruption"]["eps"], cfg["corruption"]["alpha"])
    return stats


def _corruption_config(cfg: dict) -> CorruptionConfig:
    c = cfg["corruption"]
    try:
        return CorruptionConfig(c["p_corr"], c["k_min"], c["k_max"], c["lam"], c["eps"], c["alpha"], cfg["seed"])
    except ValueError as exc:
        raise UsageError(f"corruption config: {exc}") from None


def cmd_corrupt(args, cfg) -> int:
    records = read_jsonl(args.input, "fingerprint")
    fps = [_fingerprint({"id": r["id"], "fp_bits": r.get("fp_bits", r.get("fp_true"))}, cfg["nbits"], 0.0) for r in records]
    stats = _load_bucket_stats(args.stats, fps, cfg)
    ccfg = _corruption_config(cfg)
    rows = []
    fired = swapped = 0
    for i, (rec, fp) in enumerate(zip(records, fps)):
        out = corrupt_detailed(fp, stats, ccfg, record_rng(cfg["seed"], i))
        fired += out.gate
        swapped += out.k_eff
        extra = {k: v for k, v in rec.items() if k not in ("id", "fp_bits", "fp_true")}
        rows.append(
            {
                "id": rec["id"],
                "fp_true": fp.indices().tolist(),
                "fp_corrupt": out.fingerprint.indices().tolist(),
                "k_eff": out.k_eff,
                "gate": bool(out.gate),
                **extra,
            }
        )
    write_jsonl(args.output, meta("corrupt", cfg), rows)
    log.info("corrupted %d of %d records, %d bits swapped", fired, len(records), swapped)
    return EXIT_OK


def cmd_train(args, cfg) -> int:
    records = read_jsonl(args.input, "training")
    if not records:
        raise DataError("training corpus is empty")
    vocab = load_vocab(cfg)
    threshold = cfg["decoding"]["threshold"]
    corpus = []
    for rec in records:
        try:
            ids = vocab.tokenize(rec["tokens"])
        except (KeyError, ValueError) as exc:
            raise DataError(f"record {rec['id']}: {exc}") from None
        corpus.append((_fingerprint(rec, cfg["nbits"], threshold), ids))
    vocab = corpus_counts([rec["tokens"] for rec in records], vocab)
    t = cfg["train"]
    stats = _load_bucket_stats(args.stats, [f for f, _ in corpus], cfg) if t["corrupt"] else None
    try:
        tcfg = TrainConfig(
            lr=t["lr"],
            epochs=t["epochs"],
            hidden=t["hidden"],
            tau=t["tau"],
            batch_size=t["batch_size"],
            max_len=t["max_len"],
            seed=cfg["seed"],
            weights=LossWeights(**cfg["loss"]),
            corruption=_corruption_config(cfg) if t["corrupt"] else None,
            warmup_steps=t["warmup_steps"],
        )
    except (ValueError, TypeError) as exc:
        raise UsageError(f"training config: {exc}") from None

    steps: list[dict] = []

    def on_step(step, loss):
        steps.append({"step": step, **loss.as_dict()})

    try:
        result = train_reference_model(corpus, vocab, tcfg, stats, on_step=on_step)
    except FloatingPointError as exc:
        raise DataError(str(exc)) from None
    except ValueError as exc:
        raise DataError(str(exc)) from None
    header = meta("train", cfg)
    write_json(args.output, header, result.model.to_json())
    if args.metrics:
        write_jsonl(args.metrics, header, steps)
    final = result.history[-1].ce if result.history else float("nan")
    log.info("trained %d parameters; final epoch CE %.4f", result.model.n_params, final)
    return EXIT_OK


def _load_model(path: str, vocab_path: str | None) -> FactorEmbeddingModel:
    try:
        obj = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"checkpoint {path} is not valid JSON: {exc}") from None
    vocab = load_vocab({"vocab": vocab_path}) if vocab_path else None
    try:
        return FactorEmbeddingModel.from_json(obj, vocab)
    except (ValueError, KeyError) as exc:
        raise DataError(f"checkpoint {path}: {exc}") from None


def _decode_init(checkpoint: str, vocab_path: str | None, cfg: dict) -> None:
    _WORKER["model"] = _load_model(checkpoint, vocab_path)
    _WORKER["cfg"] = cfg


def _decode_one(rec: dict) -> dict:
    model = _WORKER["model"]
    cfg = _WORKER["cfg"]
    d = cfg["decoding"]
    cond = _fingerprint(rec, model.nbits, d["threshold"])
    formula = _formula(rec)
    cands = beam_search(
        model,
        cond,
        formula,
        width=d["width"],
        max_len=min(d["max_len"], model.max_len),
        n_candidates=min(d["n_candidates"], d["width"]),
        masks_on=d["masks_on"],
        cap_counts=d["cap_counts"],
    )
    return {"id": rec["id"], "formula": rec["formula"], "candidates": [c.to_json() for c in cands]}


def cmd_decode(args, cfg) -> int:
    d = cfg["decoding"]
    if d["width"] < 1 or d["n_candidates"] < 1 or not 0 <= d["threshold"] <= 1 or d["max_len"] < 1:
        raise UsageError("decoding needs width >= 1, n_candidates >= 1, max_len >= 1 and threshold in [0, 1]")
    records = read_jsonl(args.input, "condition")
    # load once up front so checkpoint and vocabulary errors surface before forking
    model = _load_model(args.checkpoint, cfg["vocab"])
    for rec in records:
        _formula(rec)
        _fingerprint(rec, model.nbits, d["threshold"])
    rows = _pmap(_decode_one, records, args.workers, _decode_init, (args.checkpoint, cfg["vocab"], cfg))
    write_jsonl(args.output, meta("decode", cfg), rows)
    return EXIT_OK


def _candidates(rec: dict) -> list:
    try:
        return [candidate_from_json(c) for c in rec["candidates"]]
    except (ValueError, KeyError) as exc:
        raise DataError(f"record {rec['id']}: {exc}") from None


def cmd_rerank(args, cfg) -> int:
    rows = []
    for rec in read_jsonl(args.input, "candidates"):
        ranked = rerank(_candidates(rec), _formula(rec))
        rows.append({**rec, "candidates": [c.to_json() for c in ranked]})
    write_jsonl(args.output, meta("rerank", cfg), rows)
    return EXIT_OK


def _evaluate_one(item) -> dict:
    rec, target = item
    e = _WORKER["cfg"]["evaluate"]
    res = evaluate_record(
        MolecularGraph.from_json(target),
        _candidates(rec),
        e["ks"],
        rec["id"],
        e["mces_penalty"],
        time_budget=None,
        node_budget=e["mces_node_budget"],
    )
    return res.to_json()


def _evaluate_init(cfg: dict) -> None:
    _WORKER["cfg"] = cfg


def cmd_evaluate(args, cfg) -> int:
    from .metrics import RecordResult

    records = read_jsonl(args.input, "candidates")
    targets = {}
    for rec in read_jsonl(args.targets, "molecule"):
        targets[rec["id"]] = _graph(rec).to_json()
    items = []
    for rec in records:
        if rec["id"] not in targets:
            raise DataError(f"record {rec['id']}: no target molecule with this id")
        _candidates(rec)
        items.append((rec, targets[rec["id"]]))
    rows = _pmap(_evaluate_one, items, args.workers, _evaluate_init, (cfg,))
    ks = tuple(cfg["evaluate"]["ks"])
    results = [
        RecordResult(
            r["id"],
            r["rank"],
            {int(k): v for k, v in r["tanimoto"].items()},
            {int(k): v for k, v in r["mces"].items()},
            r["mces_exact"],
            r["n_candidates"],
        )
        for r in rows
    ]
    report = EvalReport.aggregate(results, ks)
    write_json(args.output, meta("evaluate", cfg), report.to_json())
    if args.output not in (None, "-"):
        print(report.table())
    return EXIT_OK


# -- argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help=f"JSON config file (default: ${ENV_CONFIG})")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int, default=1, help="worker processes; output order is unaffected")
    common.add_argument("-o", "--output", help="output path (default: stdout)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="fpdecode", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("tokenize", parents=[common], help="molecule graphs to token strings")
    p.add_argument("input")
    p.add_argument("--vocab")
    p.set_defaults(func=cmd_tokenize)

    p = sub.add_parser("bucket-stats", parents=[common], help="per-bucket precision/recall from (pred, true) pairs")
    p.add_argument("input")
    p.add_argument("--threshold", type=float)
    p.set_defaults(func=cmd_bucket_stats)

    p = sub.add_parser("corrupt", parents=[common], help="sparsity-preserving bucket-weighted bit swaps")
    p.add_argument("input")
    p.add_argument("--stats", help="bucket statistics (default: bundled published precisions)")
    p.add_argument("--k-max", type=int)
    p.add_argument("--p-corr", type=float)
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("train", parents=[common], help="fit the reference decoder")
    p.add_argument("input")
    p.add_argument("--vocab")
    p.add_argument("--stats", help="bucket statistics for online corruption")
    p.add_argument("--corrupt", action="store_true", default=None, help="re-corrupt conditions every epoch")
    p.add_argument("--epochs", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--k-max", type=int)
    p.add_argument("--p-corr", type=float)
    p.add_argument("--metrics", help="per-step loss breakdown JSONL")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("decode", parents=[common], help="constrained beam search per condition")
    p.add_argument("input")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--vocab")
    p.add_argument("--beam-width", type=int)
    p.add_argument("--n-candidates", type=int)
    p.add_argument("--threshold", type=float)
    p.add_argument("--max-len", type=int)
    p.add_argument("--masks", choices=("on", "off"))
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("rerank", parents=[common], help="order candidates by formula distance")
    p.add_argument("input")
    p.set_defaults(func=cmd_rerank)

    p = sub.add_parser("evaluate", parents=[common], help="Top-k exact match, Tanimoto and MCES")
    p.add_argument("input")
    p.add_argument("--targets", required=True, help="target molecules JSONL keyed by id")
    p.set_defaults(func=cmd_evaluate)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.workers < 1:
            raise UsageError("--workers must be at least 1")
        cfg = load_config(args)
        return args.func(args, cfg)
    except UsageError as exc:
        print(f"fpdecode {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"fpdecode {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
