"""Command-line entry point.

Subcommands cover the full workflow: synthetic corpus generation, corpus
ingestion, OOV reporting, model training, database construction, matching,
evaluation, hyperparameter sweeps, the ablation study, network
reconstruction, and an end-to-end pipeline.  All reports are JSON with a
version field; runs are reproducible from a seed (single-worker mode).

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from types import SimpleNamespace

from kernid import asm_lang, corpus_io, embed_struct, embed_text, match_db, reconstruct
from kernid.errors import ConfigError, DataError, KernidError, NumericError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

SUBCOMMANDS = [
    "gen-synth",
    "ingest",
    "oov",
    "train-text",
    "train-struct",
    "build-db",
    "match",
    "eval",
    "sweep",
    "ablate",
    "reconstruct",
    "pipeline",
]

_COMMON_DEFAULTS = {
    "seed": 1,
    "train_fraction": 0.8,
    "min_count": 1,
    "dim": 100,
    "context": 5,
    "epochs": 10,
    "struct_epochs": 40,
    "wl_iterations": 2,
    "negatives": 5,
    "lr_start": 0.025,
    "lr_end": 0.0001,
    "infer_epochs": 40,
    "mode": "fused",
    "closed_world": False,
}

_COMMAND_DEFAULTS = {
    "gen-synth": {"classes": 5, "per_class": 40, "noise": 0.0, "platforms": "x86"},
    "sweep": {"dims": "100,200,300", "contexts": "3,5,7"},
}


def _write_json(path: str, obj: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _print_json(obj: dict) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _load_config_file(path: str) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot open config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed config JSON: {exc}") from exc
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return obj


def _merge_options(args: argparse.Namespace) -> SimpleNamespace:
    """Resolve precedence: CLI flag > config file entry > built-in default."""
    ns = vars(args).copy()
    config = _load_config_file(ns["config"]) if ns.get("config") else {}
    for key in config:
        if key not in ns:
            raise ConfigError(f"config key {key!r} is not an option of this subcommand")
    defaults = dict(_COMMON_DEFAULTS)
    defaults.update(_COMMAND_DEFAULTS.get(ns["command"], {}))
    merged = {}
    for key, value in ns.items():
        if value is not None:
            merged[key] = value
        elif key in config:
            merged[key] = config[key]
        else:
            merged[key] = defaults.get(key)
    return SimpleNamespace(**merged)


def _require(opts: SimpleNamespace, *names: str) -> None:
    for name in names:
        if getattr(opts, name, None) is None:
            raise ConfigError(f"missing required option --{name.replace('_', '-')}")


def _int_list(text: str, flag: str) -> list[int]:
    try:
        values = [int(v) for v in str(text).split(",") if str(v).strip()]
    except ValueError as exc:
        raise ConfigError(f"--{flag} expects a comma-separated integer list") from exc
    if not values:
        raise ConfigError(f"--{flag} must not be empty")
    return values


def _load_split(opts: SimpleNamespace) -> tuple[corpus_io.Corpus, corpus_io.Corpus, corpus_io.Corpus]:
    """Returns (full, train, test); closed-world evaluates on the train side."""
    corpus = corpus_io.load_corpus(opts.corpus)
    corpus.split_seed = int(opts.seed)
    corpus.train_fraction = float(opts.train_fraction)
    if opts.closed_world:
        return corpus, corpus, corpus
    train, test = corpus_io.split_corpus(corpus)
    return corpus, train, test


def _text_config(opts: SimpleNamespace, dim: int | None = None, context: int | None = None) -> embed_text.TextModelConfig:
    return embed_text.TextModelConfig(
        dim=int(dim if dim is not None else opts.dim),
        context=int(context if context is not None else opts.context),
        epochs=int(opts.epochs),
        lr_start=float(opts.lr_start),
        lr_end=float(opts.lr_end),
        negatives=int(opts.negatives),
        seed=int(opts.seed),
        infer_epochs=int(opts.infer_epochs),
    )


def _struct_config(opts: SimpleNamespace, dim: int | None = None) -> embed_struct.WlConfig:
    return embed_struct.WlConfig(
        iterations=int(opts.wl_iterations),
        dim=int(dim if dim is not None else opts.dim),
        epochs=int(opts.struct_epochs),
        lr_start=float(opts.lr_start),
        lr_end=float(opts.lr_end),
        negatives=int(opts.negatives),
        seed=int(opts.seed),
        infer_epochs=int(opts.infer_epochs),
    )


def _train_pair(train: corpus_io.Corpus, opts: SimpleNamespace, dim: int | None = None,
                context: int | None = None):
    vocab = asm_lang.build_vocab(train, min_count=int(opts.min_count))
    tm = embed_text.train_text(train, vocab, _text_config(opts, dim=dim, context=context))
    sm = embed_struct.train_struct(train, _struct_config(opts, dim=dim))
    return tm, sm


def _evaluate(train, test, tm, sm, mode: match_db.DbMode) -> match_db.EvalReport:
    db = match_db.build_db(train, tm, sm, mode)
    report = match_db.evaluate(db, test, tm, sm, mode)
    report.split_checksum = corpus_io.split_checksum(train, test)
    return report


def cmd_gen_synth(opts: SimpleNamespace) -> int:
    _require(opts, "out")
    spec = corpus_io.SynthSpec(
        classes=int(opts.classes),
        per_class=int(opts.per_class),
        platforms=[p for p in str(opts.platforms).split(",") if p],
        noise_rate=float(opts.noise),
        seed=int(opts.seed),
    )
    corpus = corpus_io.gen_synthetic_corpus(spec)
    corpus_io.save_corpus(corpus, opts.out)
    _print_json(
        {
            "version": 1,
            "functions": len(corpus),
            "kernel_types": corpus.kernel_types,
            "out": opts.out,
        }
    )
    return EXIT_OK


def cmd_ingest(opts: SimpleNamespace) -> int:
    _require(opts, "corpus")
    corpus = corpus_io.load_corpus(opts.corpus)
    label_counts: dict[str, int] = {}
    instructions = 0
    for fn in corpus.functions:
        if fn.label is not None:
            label_counts[fn.label] = label_counts.get(fn.label, 0) + 1
        instructions += len(fn.instruction_lines())
    _print_json(
        {
            "version": 1,
            "functions": len(corpus),
            "labeled": sum(label_counts.values()),
            "instructions": instructions,
            "kernel_types": corpus.kernel_types,
            "label_counts": dict(sorted(label_counts.items())),
        }
    )
    return EXIT_OK


def cmd_oov(opts: SimpleNamespace) -> int:
    _require(opts, "corpus")
    _, train, test = _load_split(opts)
    vocab = asm_lang.build_vocab(train, min_count=int(opts.min_count))
    report = asm_lang.oov_report(vocab, train, test)
    payload = report.to_json()
    if opts.out:
        _write_json(opts.out, payload)
    _print_json(payload)
    return EXIT_OK


def cmd_train_text(opts: SimpleNamespace) -> int:
    _require(opts, "corpus", "out")
    _, train, _ = _load_split(opts)
    vocab = asm_lang.build_vocab(train, min_count=int(opts.min_count))
    model = embed_text.train_text(train, vocab, _text_config(opts))
    embed_text.save_text_model(model, opts.out)
    _print_json(
        {
            "version": 1,
            "trained_functions": len(model.doc_vectors),
            "vocab_size": len(vocab),
            "epoch_losses": model.loss_history,
            "out": opts.out,
        }
    )
    return EXIT_OK


def cmd_train_struct(opts: SimpleNamespace) -> int:
    _require(opts, "corpus", "out")
    _, train, _ = _load_split(opts)
    model = embed_struct.train_struct(train, _struct_config(opts))
    embed_struct.save_struct_model(model, opts.out)
    _print_json(
        {
            "version": 1,
            "trained_functions": len(model.graph_vectors),
            "wl_vocab_size": len(model.wl_vocab),
            "epoch_losses": model.loss_history,
            "out": opts.out,
        }
    )
    return EXIT_OK


def _load_models(opts: SimpleNamespace, mode: match_db.DbMode):
    tm = sm = None
    if mode in (match_db.DbMode.FUSED, match_db.DbMode.TEXT_ONLY):
        _require(opts, "text_model")
        tm = embed_text.load_text_model(opts.text_model)
    if mode in (match_db.DbMode.FUSED, match_db.DbMode.STRUCT_ONLY):
        _require(opts, "struct_model")
        sm = embed_struct.load_struct_model(opts.struct_model)
    return tm, sm


def cmd_build_db(opts: SimpleNamespace) -> int:
    _require(opts, "corpus", "out")
    mode = match_db.DbMode(opts.mode)
    _, train, _ = _load_split(opts)
    tm, sm = _load_models(opts, mode)
    db = match_db.build_db(train, tm, sm, mode)
    match_db.save_db(db, opts.out)
    _print_json({"version": 1, "entries": len(db), "mode": mode.value, "out": opts.out})
    return EXIT_OK


def cmd_match(opts: SimpleNamespace) -> int:
    _require(opts, "db", "function")
    db = match_db.load_db(opts.db)
    tm, sm = _load_models(opts, db.mode)
    try:
        with open(opts.function, "r", encoding="utf-8") as fh:
            lines = [line for line in fh if line.strip()]
    except OSError as exc:
        raise DataError(f"cannot open function file {opts.function}: {exc}") from exc
    if not lines:
        raise DataError(f"{opts.function}: no function line found")
    # A corpus header line may precede the function line; skip it.
    body = lines[1] if len(lines) > 1 and "kernel_types" in lines[0] else lines[0]
    fn = corpus_io.parse_function_line(body, where=opts.function)
    query = match_db.function_vector(fn, tm, sm, db.mode)
    result = match_db.match(db, query)
    _print_json(result.to_json())
    return EXIT_OK


def cmd_eval(opts: SimpleNamespace) -> int:
    _require(opts, "corpus", "db")
    db = match_db.load_db(opts.db)
    tm, sm = _load_models(opts, db.mode)
    _, train, test = _load_split(opts)
    report = match_db.evaluate(db, test, tm, sm, db.mode)
    report.split_checksum = corpus_io.split_checksum(train, test)
    payload = report.to_json()
    if opts.out:
        _write_json(opts.out, payload)
    _print_json(payload)
    return EXIT_OK


def cmd_sweep(opts: SimpleNamespace) -> int:
    _require(opts, "corpus")
    dims = _int_list(opts.dims, "dims")
    contexts = _int_list(opts.contexts, "contexts")
    _, train, test = _load_split(opts)
    cells = []
    for dim in dims:
        for context in contexts:
            cell: dict = {"dim": dim, "context": context}
            try:
                tm, sm = _train_pair(train, opts, dim=dim, context=context)
                report = _evaluate(train, test, tm, sm, match_db.DbMode.FUSED)
                cell["status"] = "ok"
                cell["weighted_f1"] = report.weighted_f1
                cell["report"] = report.to_json()
            except KernidError as exc:
                cell["status"] = "failed"
                cell["error"] = str(exc)
            cells.append(cell)
    payload = {"version": 1, "dims": dims, "contexts": contexts, "cells": cells}
    if opts.out:
        _write_json(opts.out, payload)
    sys.stdout.write(_render_sweep_table(payload))
    _print_json(payload)
    return EXIT_OK


def _render_sweep_table(payload: dict) -> str:
    """Plain-text F1 matrix rendered from the sweep JSON."""
    dims = payload["dims"]
    contexts = payload["contexts"]
    by_key = {(c["dim"], c["context"]): c for c in payload["cells"]}
    lines = ["weighted F1 by dimension x context"]
    header = "dim\\ctx" + "".join(f"{c:>10}" for c in contexts)
    lines.append(header)
    for dim in dims:
        row = [f"{dim:<7}"]
        for context in contexts:
            cell = by_key[(dim, context)]
            row.append(
                f"{cell['weighted_f1']:>10.4f}" if cell["status"] == "ok" else f"{'fail':>10}"
            )
        lines.append("".join(row))
    return "\n".join(lines) + "\n"


def cmd_ablate(opts: SimpleNamespace) -> int:
    _require(opts, "corpus")
    _, train, test = _load_split(opts)
    tm, sm = _train_pair(train, opts)
    modes = [match_db.DbMode.FUSED, match_db.DbMode.TEXT_ONLY, match_db.DbMode.STRUCT_ONLY]
    entries = []
    for mode in modes:
        report = _evaluate(train, test, tm, sm, mode)
        entries.append(
            {
                "mode": mode.value,
                "split_checksum": report.split_checksum,
                "weighted_f1": report.weighted_f1,
                "report": report.to_json(),
            }
        )
    payload = {"version": 1, "modes": entries}
    if opts.out:
        _write_json(opts.out, payload)
    _print_json(payload)
    return EXIT_OK


def _labels_for_graph(opts: SimpleNamespace, graph: reconstruct.GraphDescriptor) -> dict[str, str]:
    if opts.labels:
        try:
            with open(opts.labels, "r", encoding="utf-8") as fh:
                labels = json.load(fh)
        except OSError as exc:
            raise DataError(f"cannot open labels {opts.labels}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise DataError(f"{opts.labels}: malformed labels JSON: {exc}") from exc
        if not isinstance(labels, dict):
            raise DataError(f"{opts.labels}: labels file must map symbol -> kernel type")
        return {str(k): str(v) for k, v in labels.items()}
    if not opts.db:
        raise ConfigError("reconstruct needs either --labels or --db with --functions")
    _require(opts, "functions")
    db = match_db.load_db(opts.db)
    tm, sm = _load_models(opts, db.mode)
    functions = corpus_io.load_corpus(opts.functions)
    needed = {n.symbol for n in graph.kernel_nodes()}
    labels = {}
    for fn in functions.functions:
        if fn.symbol in needed:
            query = match_db.function_vector(fn, tm, sm, db.mode)
            labels[fn.symbol] = match_db.match(db, query).kernel_type
    return labels


def cmd_reconstruct(opts: SimpleNamespace) -> int:
    _require(opts, "graph", "params", "input")
    graph = reconstruct.parse_graph(opts.graph)
    params = reconstruct.load_params(opts.params)
    input_tensor = reconstruct.load_tensor(opts.input)
    labels = _labels_for_graph(opts, graph)
    output, summary = reconstruct.reconstruct_run(graph, params, labels, input_tensor)
    if opts.out:
        reconstruct.save_tensor(output, opts.out)
    payload = summary.to_json()
    payload["output_shape"] = list(output.shape)
    if opts.summary_out:
        _write_json(opts.summary_out, payload)
    _print_json(payload)
    return EXIT_OK


def cmd_pipeline(opts: SimpleNamespace) -> int:
    _require(opts, "corpus", "out_dir")
    os.makedirs(opts.out_dir, exist_ok=True)
    mode = match_db.DbMode(opts.mode)

    def artifact(name: str) -> str:
        return os.path.join(opts.out_dir, name)

    state: dict = {}

    def stage_ingest() -> None:
        state["corpus"], state["train"], state["test"] = _load_split(opts)

    def stage_vocab() -> None:
        state["vocab"] = asm_lang.build_vocab(state["train"], min_count=int(opts.min_count))

    def stage_train_text() -> None:
        path = artifact("text_model.bin")
        model = embed_text.train_text(state["train"], state["vocab"], _text_config(opts))
        embed_text.save_text_model(model, path + ".partial")
        os.replace(path + ".partial", path)
        state["tm"] = model

    def stage_train_struct() -> None:
        path = artifact("struct_model.bin")
        model = embed_struct.train_struct(state["train"], _struct_config(opts))
        embed_struct.save_struct_model(model, path + ".partial")
        os.replace(path + ".partial", path)
        state["sm"] = model

    def stage_build_db() -> None:
        path = artifact("db.bin")
        db = match_db.build_db(state["train"], state.get("tm"), state.get("sm"), mode)
        match_db.save_db(db, path + ".partial")
        os.replace(path + ".partial", path)
        state["db"] = db

    def stage_eval() -> None:
        path = artifact("eval.json")
        report = match_db.evaluate(state["db"], state["test"], state.get("tm"), state.get("sm"), mode)
        report.split_checksum = corpus_io.split_checksum(state["train"], state["test"])
        state["report"] = report.to_json()
        _write_json(path + ".partial", state["report"])
        os.replace(path + ".partial", path)

    stages = [
        ("ingest", stage_ingest),
        ("vocab", stage_vocab),
        ("train-text", stage_train_text),
        ("train-struct", stage_train_struct),
        ("build-db", stage_build_db),
        ("eval", stage_eval),
    ]
    for name, run in stages:
        try:
            run()
        except KernidError as exc:
            raise type(exc)(f"pipeline stage {name!r} failed: {exc}") from exc
    _print_json(state["report"])
    return EXIT_OK


_HANDLERS = {
    "gen-synth": cmd_gen_synth,
    "ingest": cmd_ingest,
    "oov": cmd_oov,
    "train-text": cmd_train_text,
    "train-struct": cmd_train_struct,
    "build-db": cmd_build_db,
    "match": cmd_match,
    "eval": cmd_eval,
    "sweep": cmd_sweep,
    "ablate": cmd_ablate,
    "reconstruct": cmd_reconstruct,
    "pipeline": cmd_pipeline,
}


def _add_common(parser: argparse.ArgumentParser, *groups: str) -> None:
    parser.add_argument("--config", help="JSON config file; flags override its entries")
    parser.add_argument("--seed", type=int, help="seed for every stochastic component")
    if "split" in groups:
        parser.add_argument("--train-fraction", type=float, dest="train_fraction")
        parser.add_argument(
            "--closed-world",
            dest="closed_world",
            action="store_const",
            const=True,
            help="train and evaluate on the full corpus (test == train)",
        )
    if "train" in groups:
        parser.add_argument("--min-count", type=int, dest="min_count")
        parser.add_argument("--dim", type=int)
        parser.add_argument("--context", type=int)
        parser.add_argument("--epochs", type=int, help="text model training epochs")
        parser.add_argument("--struct-epochs", type=int, dest="struct_epochs")
        parser.add_argument("--wl-iterations", type=int, dest="wl_iterations")
        parser.add_argument("--negatives", type=int)
        parser.add_argument("--lr-start", type=float, dest="lr_start")
        parser.add_argument("--lr-end", type=float, dest="lr_end")
        parser.add_argument("--infer-epochs", type=int, dest="infer_epochs")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="kernid",
        description="Kernel-operator identification and network reconstruction "
        "from disassembled binary functions.",
    )
    sub = parser.add_subparsers(dest="command", metavar="subcommand")

    p = sub.add_parser("gen-synth", help="generate a synthetic labeled corpus")
    p.add_argument("--out", required=True, help="corpus JSONL output path")
    p.add_argument("--classes", type=int)
    p.add_argument("--per-class", type=int, dest="per_class")
    p.add_argument("--noise", type=float, help="fraction of instructions to mutate")
    p.add_argument("--platforms", help="comma-separated platform tags")
    _add_common(p)

    p = sub.add_parser("ingest", help="validate a corpus and print statistics")
    p.add_argument("--corpus", required=True)
    _add_common(p)

    p = sub.add_parser("oov", help="out-of-vocabulary report over the train/test split")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", help="also write the report JSON here")
    p.add_argument("--min-count", type=int, dest="min_count")
    _add_common(p, "split")

    p = sub.add_parser("train-text", help="train the text embedding model")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="model output path")
    _add_common(p, "split", "train")

    p = sub.add_parser("train-struct", help="train the structure embedding model")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="model output path")
    _add_common(p, "split", "train")

    p = sub.add_parser("build-db", help="build the labeled embedding database")
    p.add_argument("--corpus", required=True)
    p.add_argument("--text-model", dest="text_model")
    p.add_argument("--struct-model", dest="struct_model")
    p.add_argument("--mode", choices=[m.value for m in match_db.DbMode])
    p.add_argument("--out", required=True)
    _add_common(p, "split")

    p = sub.add_parser("match", help="classify one function against a database")
    p.add_argument("--db", required=True)
    p.add_argument("--function", required=True, help="file with one function JSON line")
    p.add_argument("--text-model", dest="text_model")
    p.add_argument("--struct-model", dest="struct_model")
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate database matching on the test split")
    p.add_argument("--corpus", required=True)
    p.add_argument("--db", required=True)
    p.add_argument("--text-model", dest="text_model")
    p.add_argument("--struct-model", dest="struct_model")
    p.add_argument("--out", help="also write the report JSON here")
    _add_common(p, "split")

    p = sub.add_parser("sweep", help="dimension x context sensitivity sweep")
    p.add_argument("--corpus", required=True)
    p.add_argument("--dims", help="comma-separated embedding dimensions")
    p.add_argument("--contexts", help="comma-separated context sizes")
    p.add_argument("--out", help="also write the sweep JSON here")
    _add_common(p, "split", "train")

    p = sub.add_parser("ablate", help="compare fused vs text-only vs structure-only")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", help="also write the ablation JSON here")
    _add_common(p, "split", "train")

    p = sub.add_parser("reconstruct", help="rebuild and execute a network")
    p.add_argument("--graph", required=True, help="graph descriptor JSON")
    p.add_argument("--params", required=True, help="parameter store file")
    p.add_argument("--input", required=True, help="input tensor file")
    p.add_argument("--labels", help="JSON map symbol -> kernel type")
    p.add_argument("--db", help="classify symbols live against this database")
    p.add_argument("--text-model", dest="text_model")
    p.add_argument("--struct-model", dest="struct_model")
    p.add_argument("--functions", help="corpus with the binary functions to classify")
    p.add_argument("--out", help="write the output tensor here")
    p.add_argument("--summary-out", dest="summary_out", help="write the architecture summary here")
    _add_common(p)

    p = sub.add_parser("pipeline", help="ingest, train, build database, evaluate")
    p.add_argument("--corpus", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--mode", choices=[m.value for m in match_db.DbMode])
    _add_common(p, "split", "train")

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help()
        return EXIT_CONFIG
    try:
        opts = _merge_options(args)
        return _HANDLERS[args.command](opts)
    except ConfigError as exc:
        print(f"kernid: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"kernid: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DataError as exc:
        print(f"kernid: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
