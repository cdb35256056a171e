"""Command-line entry point: ``selfalign <subcommand> [flags]``.

Every run prints its fully resolved configuration as one JSON line before
doing any work, then a JSON report. Settings come from built-in defaults,
then ``--config FILE`` (JSON), then explicit flags; flags win.
Exit codes: 0 success, 1 usage, 2 data, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict, fields, replace
from pathlib import Path

from . import container
from .container import SAFError
from .encoder import HyperParams, ModelParams, load_checkpoint
from .features import SyntheticConfig, export_alignment_csv, generate_synthetic, read_dataset, write_dataset
from .numeric import ConfigError
from .trainer import VARIANTS, AblationConfig, NumericFailure, ablation, train

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

DATA_KEYS = {f.name for f in fields(SyntheticConfig)}
HP_KEYS = {f.name for f in fields(HyperParams)} - {"seed"}
ABL_KEYS = {f.name for f in fields(AblationConfig)}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_fields(p: argparse.ArgumentParser, cls, skip=()) -> None:
    """One flag per dataclass field; defaults are None so unset flags don't override."""
    for f in fields(cls):
        if f.name in skip:
            continue
        if f.type in ("bool", bool):
            p.add_argument(_flag(f.name), dest=f.name, default=None,
                           action=argparse.BooleanOptionalAction)
        else:
            kind = {"int": int, "float": float, "str": str}.get(str(f.type), str)
            p.add_argument(_flag(f.name), dest=f.name, type=kind, default=None)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file of settings; flags override it")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None,
                   help="worker cap (falls back to SELFALIGN_THREADS, then 1)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="selfalign", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    parser.subcommands = sub.choices

    p = sub.add_parser("gen-data", help="generate a synthetic paired-feature dataset")
    _common(p)
    p.add_argument("--out", type=Path, required=True)
    _add_fields(p, SyntheticConfig)

    p = sub.add_parser("train", help="train a model on a dataset")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--ablation", choices=sorted(VARIANTS), default=None)
    p.add_argument("--desk", action="store_true", default=None,
                   help="small-scale preset (32 prototypes, 32 negatives)")
    p.add_argument("--verbose", action="store_true", default=None, help="log validation progress to stderr")
    _add_fields(p, HyperParams, skip={"seed"})
    _add_fields(p, AblationConfig)

    p = sub.add_parser("eval", help="recall@K and correspondence accuracy of a checkpoint")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--split", choices=("train", "val"), default=None)
    p.add_argument("--ablation", choices=sorted(VARIANTS), default=None)

    p = sub.add_parser("index", help="precompute a retrieval index over one modality of a split")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--split", choices=("train", "val"), default=None)
    p.add_argument("--modality", choices=("image", "text"), default=None)
    p.add_argument("--ablation", choices=sorted(VARIANTS), default=None)

    p = sub.add_parser("query", help="rank an index against one sample of the opposite modality")
    _common(p)
    p.add_argument("--index", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--split", choices=("train", "val"), default=None)
    p.add_argument("--item", type=int, default=None, help="position of the query within the split")
    p.add_argument("--top-k", dest="top_k", type=int, default=None)

    p = sub.add_parser("bench", help="per-query encoding and scoring latency across index sizes")
    _common(p)
    p.add_argument("--model", type=Path, default=None, help="checkpoint; a fresh model if omitted")
    p.add_argument("--sizes", type=str, default=None, help="comma-separated index sizes")
    p.add_argument("--queries", type=int, default=None)
    p.add_argument("--repetitions", type=int, default=None)
    p.add_argument("--hidden", type=int, default=None)
    p.add_argument("--out", type=Path, default=None, help="CSV destination")

    p = sub.add_parser("export-alignment", help="word-to-region cosine map of one pair as CSV")
    _common(p)
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--pair", type=int, default=None)
    p.add_argument("--out", type=Path, default=None)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss component")
    _common(p)
    p.add_argument("--seeds", type=int, default=None, help="number of consecutive seeds from --seed")
    p.add_argument("--max-entries", dest="max_entries", type=int, default=None,
                   help="entries sampled per parameter array (0 = all)")
    p.add_argument("--epsilon", type=float, default=None)
    p.add_argument("--tol", type=float, default=None)
    return parser


DEFAULTS = {
    "gen-data": {"seed": 0},
    "train": {"seed": 0, "ablation": "full", "desk": False},
    "eval": {"split": "val", "ablation": None},
    "index": {"split": "val", "modality": "image", "ablation": None},
    "query": {"split": "val", "item": 0, "top_k": 10},
    "bench": {"seed": 0, "sizes": "1000,10000", "queries": 20, "repetitions": 5, "hidden": 16},
    "export-alignment": {"pair": 0},
    "gradcheck": {"seed": 0, "seeds": 5, "max_entries": 8, "epsilon": 1e-3, "tol": 1e-3},
}


def resolve(args: argparse.Namespace, allowed=None) -> dict:
    """Defaults < config file < explicit flags."""
    cfg = dict(DEFAULTS[args.command])
    if args.config is not None:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {args.config}") from None
        except json.JSONDecodeError as e:
            raise UsageError(f"config file is not valid JSON: {e}") from None
        if not isinstance(loaded, dict):
            raise UsageError("config file must hold a JSON object")
        unknown = sorted(set(loaded) - set(allowed)) if allowed is not None else []
        if unknown:
            raise UsageError(f"unknown config keys for {args.command}: {unknown}")
        cfg.update(loaded)
    for k, v in vars(args).items():
        if k in ("command", "config") or v is None:
            continue
        cfg[k] = str(v) if isinstance(v, Path) else v
    env = os.environ.get("SELFALIGN_THREADS")
    if cfg.get("threads") is None:
        try:
            cfg["threads"] = int(env) if env else 1
        except ValueError:
            raise UsageError(f"SELFALIGN_THREADS must be an integer, got {env!r}") from None
    if cfg["threads"] < 1:
        raise UsageError("--threads must be >= 1")
    return cfg


def _pick(cfg: dict, keys) -> dict:
    return {k: v for k, v in cfg.items() if k in keys}


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True), flush=True)


def _ablation_for(cfg: dict, meta: dict) -> AblationConfig:
    if cfg.get("ablation"):
        return ablation(cfg["ablation"])
    stored = meta.get("ablation")
    return AblationConfig(**stored) if stored else AblationConfig()


def _split(ds, name: str):
    return ds.train if name == "train" else ds.val


# -- subcommands ----------------------------------------------------------


def cmd_gen_data(cfg: dict) -> dict:
    data_cfg = SyntheticConfig(**_pick(cfg, DATA_KEYS))
    ds = generate_synthetic(data_cfg, seed=cfg["seed"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_dataset(out, ds)
    return {"pairs": len(ds), "train": len(ds.train_idx), "val": len(ds.val_idx),
            "flags": ds.flags, "out": str(out)}


def cmd_train(cfg: dict) -> dict:
    ds = read_dataset(cfg["data"])
    base = HyperParams.desk() if cfg.get("desk") else HyperParams()
    hp = replace(base, **_pick(cfg, HP_KEYS), seed=cfg["seed"])
    abl = replace(ablation(cfg["ablation"]), **_pick(cfg, ABL_KEYS))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    log = (lambda m: print(m, file=sys.stderr)) if cfg.get("verbose") else None
    params, report = train(ds, hp, abl, checkpoint_dir=out, log=log)
    last = report.epochs[-1] if report.epochs else {}
    return {"epochs": len(report.epochs), "final_loss": last,
            "validation": report.validation[-1] if report.validation else None,
            "bn_snapshot_id": params.bn_snapshot_id(), "wall_time": report.wall_time, "out": str(out)}


def cmd_eval(cfg: dict) -> dict:
    from .lca import correspondence_accuracy
    from .retrieval import evaluate_pairs

    ds = read_dataset(cfg["data"])
    params, _, meta = load_checkpoint(cfg["model"])
    abl = _ablation_for(cfg, meta)
    pairs = _split(ds, cfg["split"])
    rec = evaluate_pairs(pairs, params, abl, threads=cfg["threads"])
    out = {"split": cfg["split"], **rec.to_dict()}
    if all(p.truth is not None for p in pairs):
        out["correspondence_accuracy"] = correspondence_accuracy(pairs, params)
    return out


def cmd_index(cfg: dict) -> dict:
    from .retrieval import ScoreConfig, build_index, write_index

    ds = read_dataset(cfg["data"])
    params, _, meta = load_checkpoint(cfg["model"])
    score = ScoreConfig.from_ablation(_ablation_for(cfg, meta))
    idx = ds.train_idx if cfg["split"] == "train" else ds.val_idx
    pairs = ds.subset(idx)
    items = [p.image if cfg["modality"] == "image" else p.text for p in pairs]
    index = build_index(items, params, cfg["modality"], ids=[str(int(i)) for i in idx],
                        score=score, threads=cfg["threads"])
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    write_index(out, index)
    return {"count": len(index), "modality": index.modality, "floats_per_candidate": index.floats_per_candidate,
            "bn_snapshot_id": index.bn_snapshot_id, "out": str(out)}


def cmd_query(cfg: dict) -> dict:
    from .retrieval import IMAGE, TEXT, embed, rank_candidates, read_index

    index = read_index(cfg["index"])
    params, _, _ = load_checkpoint(cfg["model"])
    if params.bn_snapshot_id() != index.bn_snapshot_id:
        raise ConfigError("index was built with different batch-norm statistics than this model")
    ds = read_dataset(cfg["data"])
    pairs = _split(ds, cfg["split"])
    if not 0 <= cfg["item"] < len(pairs):
        raise UsageError(f"--item must be in [0, {len(pairs)})")
    params.eval()
    modality = TEXT if index.modality == IMAGE else IMAGE
    pair = pairs[cfg["item"]]
    q = embed(pair.text if modality == TEXT else pair.image, params, modality, index.score)
    order = rank_candidates(q, index)[: cfg["top_k"]]
    scores = index.scores(q)
    return {"query_modality": modality,
            "results": [{"rank": r + 1, "id": index.ids[c], "score": float(scores[c])}
                        for r, c in enumerate(order)]}


def cmd_bench(cfg: dict) -> dict:
    from .retrieval import bench_csv, bench_latency, complexity_report, linear_fit_r2

    if cfg.get("model"):
        params, _, _ = load_checkpoint(cfg["model"])
    else:
        params = ModelParams.init(32, 24, cfg["hidden"], 32, seed=cfg["seed"])
    try:
        sizes = [int(s) for s in str(cfg["sizes"]).split(",") if s]
    except ValueError:
        raise UsageError("--sizes must be comma-separated integers") from None
    rows = bench_latency(params, sizes, cfg["queries"], cfg["repetitions"], seed=cfg["seed"],
                         threads=cfg["threads"])
    csv_text = bench_csv(rows)
    if cfg.get("out"):
        container.atomic_write(cfg["out"], csv_text)
    out = {"rows": [asdict(r) for r in rows],
           "complexity": [c.to_dict() for c in complexity_report(params.hidden)]}
    if len(rows) >= 2:
        out["encode_ratio_max_min"] = max(r.encode_ms for r in rows) / min(r.encode_ms for r in rows)
    if len(rows) >= 3:
        out["score_linear_r2"] = linear_fit_r2([r.n_candidates for r in rows], [r.score_ms for r in rows])[2]
    return out


def cmd_export_alignment(cfg: dict) -> dict:
    ds = read_dataset(cfg["data"])
    params, _, _ = load_checkpoint(cfg["model"])
    if not 0 <= cfg["pair"] < len(ds):
        raise UsageError(f"--pair must be in [0, {len(ds)})")
    params.eval()
    text = export_alignment_csv(ds.pairs[cfg["pair"]], params, cfg.get("out"))
    if not cfg.get("out"):
        sys.stdout.write(text)
    return {"pair": cfg["pair"], "rows": text.count("\n") - 1, "out": cfg.get("out")}


def cmd_gradcheck(cfg: dict) -> dict:
    from .gradcheck import run_gradcheck

    seeds = range(cfg["seed"], cfg["seed"] + cfg["seeds"])
    summary = run_gradcheck(seeds, epsilon=cfg["epsilon"], tol=cfg["tol"],
                            max_entries=cfg["max_entries"] or None)
    for r in summary.results:
        print(f"{r.component:>7} seed {r.seed}: {r.report.summary()}", file=sys.stderr)
    out = summary.to_dict()
    if not summary.passed:
        raise NumericFailure(json.dumps(out, sort_keys=True))
    return out


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "index": cmd_index,
    "query": cmd_query,
    "bench": cmd_bench,
    "export-alignment": cmd_export_alignment,
    "gradcheck": cmd_gradcheck,
}


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    allowed = {a.dest for a in parser.subcommands[args.command]._actions} - {"help", "config"}
    try:
        cfg = resolve(args, allowed)
        _emit({"command": args.command, "config": cfg})
        report = COMMANDS[args.command](cfg)
    except (UsageError, ConfigError) as e:
        print(f"selfalign: usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (SAFError, FileNotFoundError, NotADirectoryError, KeyError, json.JSONDecodeError) as e:
        print(f"selfalign: data error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_DATA
    except (NumericFailure, FloatingPointError) as e:
        print(f"selfalign: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    # export-alignment without --out has already written its CSV to stdout
    if args.command != "export-alignment" or cfg.get("out"):
        _emit(report)
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
