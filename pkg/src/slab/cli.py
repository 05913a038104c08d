"""Command-line surface: one subcommand per pipeline stage.

Every command resolves its settings as defaults < config file < flags,
echoes the effective configuration plus input fingerprints into the output
directory, and renders a matplotlib figure next to each delimited report.
Exit codes: 0 success, 2 validation failure, 1 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import figures
from .bench import BenchWorkload, bench, rows_to_csv, standard_presets
from .bpe import load_vocab, save_vocab, train_vocab
from .checkpoint import CheckpointError, load_checkpoint
from .corpus import CorpusManifest, DocumentStore, IngestError, ingest
from .encoder import preset_config
from .finetune import (EncoderFineTuneTask, TaskData, evaluate, load_task_model,
                       save_task_model)
from .perplexity import pseudo_perplexity
from .pretraining import (PretrainDivergedError, PretrainPlan, default_emission_schedule,
                          pretrain)
from .runconfig import (ConfigError, Opt, flag_name, float_list, int_list, parse_bool,
                        resolve, str_list, write_resolved)
from .synth import SynthSpec, gen_synth, load_records
from .tune import (DEFAULT_SPACE, EXPANDED_SPACE, GridPoint, GridSpace, grid_search,
                   run_trial)

EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION = 0, 1, 2


class CLIValidationError(ValueError):
    pass


def _require_file(path, what: str, hint: str = "") -> Path:
    p = Path(path)
    if not p.is_file():
        raise CLIValidationError(f"missing artifact: {what} at '{path}'"
                                 + (f" ({hint})" if hint else ""))
    return p


def _write_csv(path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# option tables (shared between flags and config files)
# ---------------------------------------------------------------------------

def _common_opts() -> list[Opt]:
    return [Opt("out", str, required=True, help="output directory for this run")]


OPTS = {
    "train-vocab": [
        Opt("corpus", str_list, is_input=True, help="text file(s), one document per line"),
        Opt("store", str, is_input=True, help="document store (jsonl) to train from"),
        Opt("target_size", int, required=True, help="exact vocabulary size"),
        Opt("seed", int, 0),
    ],
    "ingest": [
        Opt("manifest", str, required=True, is_input=True, help="corpus manifest (jsonl)"),
    ],
    "pretrain": [
        Opt("strategy", str, required=True, help="sc (from scratch) or fp (further pre-train)"),
        Opt("store", str, required=True, is_input=True, help="document store (jsonl)"),
        Opt("vocab", str, required=True, is_input=True, help="trained vocabulary file"),
        Opt("parent", str, is_input=True, help="parent checkpoint (fp only)"),
        Opt("resume_from", str, is_input=True, help="checkpoint emitted by an identical plan"),
        Opt("steps", int, required=True),
        Opt("batch_size", int, 256),
        Opt("seq_len", int, 512),
        Opt("learning_rate", float, 1e-4),
        Opt("seed", int, 0),
        Opt("nsp", parse_bool, True, help="train the next-segment objective"),
        Opt("emit_steps", int_list, help="checkpoint emission steps (default: strategy schedule)"),
        Opt("warmup", parse_bool, True, help="linear warmup over the first 1% then decay"),
        Opt("log_interval", int, 10),
        Opt("preset", str, "tiny", help="encoder preset for sc runs (tiny|small|base)"),
        Opt("max_positions", int, help="override the preset's position-table size"),
        Opt("dropout", float, 0.1),
        Opt("save_optimizer", parse_bool, True),
    ],
    "finetune": [
        Opt("task_type", str, required=True,
            help="multilabel | hierarchical-binary | hierarchical-multilabel | ner"),
        Opt("train", str, required=True, is_input=True),
        Opt("dev", str, required=True, is_input=True),
        Opt("checkpoint", str, required=True, is_input=True),
        Opt("vocab", str, required=True, is_input=True),
        Opt("learning_rate", float, 2e-5),
        Opt("batch_size", int, 16),
        Opt("dropout", float, 0.1),
        Opt("epochs", int, help="fixed epoch count (omit with early-stopping=true)"),
        Opt("early_stopping", parse_bool, False),
        Opt("patience", int, 3),
        Opt("max_epochs", int, 20),
        Opt("seed", int, 0),
        Opt("max_len", int, 48),
        Opt("max_facts", int, 8),
        Opt("freeze_encoder", parse_bool, False),
    ],
    "grid-search": [
        Opt("task_type", str, required=True),
        Opt("train", str, required=True, is_input=True),
        Opt("dev", str, required=True, is_input=True),
        Opt("checkpoint", str, required=True, is_input=True),
        Opt("vocab", str, required=True, is_input=True),
        Opt("space", str, "default", help="default | expanded | custom"),
        Opt("learning_rates", float_list, help="custom space learning rates"),
        Opt("batch_sizes", int_list, help="custom space batch sizes"),
        Opt("dropouts", float_list, help="custom space dropout rates"),
        Opt("epochs", str, help="custom space: comma ints for fixed epochs, or 'early'"),
        Opt("seeds", int_list, [0]),
        Opt("patience", int, 3),
        Opt("max_epochs", int, 20),
        Opt("max_len", int, 48),
        Opt("max_facts", int, 8),
        Opt("freeze_encoder", parse_bool, False),
    ],
    "eval": [
        Opt("model_dir", str, required=True, help="directory written by `slab finetune`"),
        Opt("data", str, required=True, is_input=True),
        Opt("vocab", str, required=True, is_input=True),
        Opt("batch_size", int, 16),
    ],
    "perplexity": [
        Opt("checkpoints", str_list, required=True, help="one or more checkpoint files"),
        Opt("vocab", str, required=True, is_input=True),
        Opt("texts", str, required=True, is_input=True, help="text file, one text per line"),
        Opt("rounds", int, 5),
        Opt("seed", int, 0),
    ],
    "bench": [
        Opt("presets", str_list,
            ["bench-base", "bench-small", "bench-distil", "bench-albert", "bench-albert-large"]),
        Opt("reference", str, "bench-base"),
        Opt("budget_mb", float, 2048.0),
        Opt("seq_len", int, 64),
        Opt("steps", int, 2),
        Opt("reps", int, 3),
        Opt("vocab_size", int, 30000),
        Opt("max_positions", int, 512),
        Opt("seed", int, 0),
    ],
    "gen-synth": [
        Opt("task_type", str, "multilabel"),
        Opt("domains", int, 2),
        Opt("overlap", float, 0.0),
        Opt("words_per_domain", int, 120),
        Opt("docs_per_domain", int, 200),
        Opt("task_examples", int, 300),
        Opt("num_labels", int, 4),
        Opt("entity_types", int, 3),
        Opt("seed", int, 0),
    ],
}
for key in OPTS:
    OPTS[key] = OPTS[key] + _common_opts()


# ---------------------------------------------------------------------------
# handlers
# ---------------------------------------------------------------------------

def _load_task_data(task_type, train_path, dev_path) -> TaskData:
    if task_type not in ("multilabel", "hierarchical-binary", "hierarchical-multilabel", "ner"):
        raise CLIValidationError(f"unknown task type '{task_type}'")
    train = load_records(_require_file(train_path, "training data"))
    dev = load_records(_require_file(dev_path, "development data"))
    return TaskData(task_type=task_type, train=train, dev=dev)


def cmd_train_vocab(cfg, out_dir: Path) -> int:
    docs: list[str] = []
    if cfg["corpus"]:
        for path in cfg["corpus"]:
            text = _require_file(path, "corpus file").read_text(encoding="utf-8")
            docs.extend(line for line in text.splitlines() if line.strip())
    elif cfg["store"]:
        store = DocumentStore.load(_require_file(cfg["store"], "document store"))
        docs.extend(d.text for d in store)
    else:
        raise CLIValidationError("train-vocab needs --corpus or --store")
    vocab = train_vocab(docs, cfg["target_size"], cfg["seed"])
    out = out_dir / "vocab.txt"
    save_vocab(vocab, out)
    print(f"trained vocabulary: size={vocab.size} fingerprint={vocab.fingerprint} -> {out}")
    return EXIT_OK


def cmd_ingest(cfg, out_dir: Path) -> int:
    manifest = CorpusManifest.load(_require_file(cfg["manifest"], "corpus manifest"))
    store_path = out_dir / "store.jsonl"
    store, report = ingest(manifest, store_path)
    csv_path = out_dir / "ingest_report.csv"
    _write_csv(csv_path, ["domain", "documents", "bytes", "byte_share_pct"],
               [[r["domain"], r["documents"], r["bytes"], r["byte_share_pct"]] for r in report])
    figures.bars_figure([(r["domain"], r["byte_share_pct"]) for r in report],
                        "byte share (%)", out_dir / "ingest_report.png")
    for r in report:
        print(f"{r['domain']}: {r['documents']} documents, {r['bytes']} bytes "
              f"({r['byte_share_pct']}%)")
    print(f"store: {len(store)} documents -> {store_path}")
    return EXIT_OK


def cmd_pretrain(cfg, out_dir: Path) -> int:
    strategy = cfg["strategy"].upper()
    if strategy not in ("SC", "FP"):
        raise CLIValidationError("strategy must be 'sc' or 'fp'")
    vocab = load_vocab(_require_file(cfg["vocab"], "trained vocabulary",
                                     "run `slab train-vocab` first"))
    store = DocumentStore.load(_require_file(cfg["store"], "document store",
                                             "run `slab ingest` first"))
    encoder_config = None
    parent = cfg["parent"]
    if strategy == "FP":
        if not parent:
            raise CLIValidationError("fp pre-training requires --parent <checkpoint>")
        _require_file(parent, "parent checkpoint")
    else:
        max_pos = cfg["max_positions"] or max(cfg["seq_len"], 64)
        encoder_config = preset_config(cfg["preset"], vocab_size=vocab.size,
                                       max_positions=max(max_pos, cfg["seq_len"]),
                                       dropout=cfg["dropout"])
    emit = cfg["emit_steps"]
    if emit is None:
        emit = default_emission_schedule(strategy, cfg["steps"])
    plan = PretrainPlan(strategy=strategy, steps=cfg["steps"], batch_size=cfg["batch_size"],
                        seq_len=cfg["seq_len"], learning_rate=cfg["learning_rate"],
                        seed=cfg["seed"], nsp_enabled=cfg["nsp"], emit_steps=emit,
                        warmup=cfg["warmup"], log_interval=cfg["log_interval"],
                        config=encoder_config, parent_path=parent,
                        resume_from=cfg["resume_from"], save_optimizer=cfg["save_optimizer"])
    result = pretrain(plan, store, vocab, out_dir)
    figures.loss_curve(result.log_path, out_dir / "loss.png")
    for step, path in sorted(result.checkpoint_paths.items()):
        print(f"checkpoint step {step}: {path}")
    print(f"loss log: {result.log_path}")
    return EXIT_OK


def cmd_finetune(cfg, out_dir: Path) -> int:
    data = _load_task_data(cfg["task_type"], cfg["train"], cfg["dev"])
    vocab = load_vocab(_require_file(cfg["vocab"], "trained vocabulary"))
    task = EncoderFineTuneTask(task_id=cfg["task_type"], data=data,
                               checkpoint_path=str(_require_file(cfg["checkpoint"], "checkpoint")),
                               vocab=vocab, max_len=cfg["max_len"], max_facts=cfg["max_facts"],
                               freeze_encoder=cfg["freeze_encoder"])
    epochs = None if cfg["early_stopping"] else (cfg["epochs"] or 3)
    point = GridPoint(learning_rate=cfg["learning_rate"], batch_size=cfg["batch_size"],
                      dropout=cfg["dropout"], epochs=epochs)
    result = run_trial(task, point, cfg["seed"], patience=cfg["patience"],
                       max_epochs=cfg["max_epochs"], keep_model=True)
    _write_csv(out_dir / "trial.csv",
               ["lr", "batch", "dropout", "stop_epoch", "best_dev_loss", "dev_metric", "status"],
               [[repr(point.learning_rate), point.batch_size, repr(point.dropout),
                 result.stop_epoch,
                 repr(result.best_val_loss) if result.status == "ok" else "",
                 repr(result.best_metric), result.status]])
    if result.status != "ok":
        print(f"trial failed (non-finite loss at epoch {result.stop_epoch})", file=sys.stderr)
        return EXIT_RUNTIME
    model_dir = out_dir / "model"
    save_task_model(result.model, model_dir)
    print(f"dev metric {result.best_metric:.4f} at epoch {result.best_epoch} "
          f"(stopped after {result.stop_epoch}); model -> {model_dir}")
    return EXIT_OK


def cmd_grid_search(cfg, out_dir: Path) -> int:
    data = _load_task_data(cfg["task_type"], cfg["train"], cfg["dev"])
    vocab = load_vocab(_require_file(cfg["vocab"], "trained vocabulary"))
    task = EncoderFineTuneTask(task_id=cfg["task_type"], data=data,
                               checkpoint_path=str(_require_file(cfg["checkpoint"], "checkpoint")),
                               vocab=vocab, max_len=cfg["max_len"], max_facts=cfg["max_facts"],
                               freeze_encoder=cfg["freeze_encoder"])
    name = cfg["space"]
    if name == "default":
        space = DEFAULT_SPACE
    elif name == "expanded":
        space = EXPANDED_SPACE
    elif name == "custom":
        if not (cfg["learning_rates"] and cfg["batch_sizes"] and cfg["dropouts"]):
            raise CLIValidationError("custom space needs --learning-rates, --batch-sizes "
                                     "and --dropouts")
        epochs_raw = cfg["epochs"]
        epochs = None if epochs_raw in (None, "early") else tuple(int_list(epochs_raw))
        space = GridSpace(learning_rates=tuple(cfg["learning_rates"]),
                          batch_sizes=tuple(cfg["batch_sizes"]),
                          dropouts=tuple(cfg["dropouts"]), epochs=epochs)
    else:
        raise CLIValidationError("space must be default, expanded, or custom")
    report = grid_search(task, space, cfg["seeds"], patience=cfg["patience"],
                         max_epochs=cfg["max_epochs"])
    (out_dir / "report.csv").write_text(report.to_csv(), encoding="utf-8")
    (out_dir / "best.txt").write_text(report.best_summary(), encoding="utf-8")
    figures.grid_report_figure(out_dir / "report.csv", out_dir / "report.png")
    if report.all_failed:
        print("all trials failed; see report.csv", file=sys.stderr)
        return EXIT_RUNTIME
    p = report.best_point
    print(f"best: lr={p.learning_rate} batch={p.batch_size} dropout={p.dropout} "
          f"epochs={'early' if p.epochs is None else p.epochs} "
          f"mean dev metric {report.best_mean_metric:.4f}")
    return EXIT_OK


def cmd_eval(cfg, out_dir: Path) -> int:
    vocab = load_vocab(_require_file(cfg["vocab"], "trained vocabulary"))
    records = load_records(_require_file(cfg["data"], "evaluation data"))
    model = load_task_model(Path(cfg["model_dir"]), records, vocab,
                            batch_size=cfg["batch_size"])
    rep = evaluate(model, records)
    _write_csv(out_dir / "metrics.csv", ["task_id", "metric", "value", "tp", "fp", "fn"],
               [[rep.task_id, rep.metric_name, repr(rep.value), rep.tp, rep.fp, rep.fn]])
    figures.bars_figure([(rep.metric_name, rep.value)], rep.metric_name,
                        out_dir / "metrics.png")
    print(f"{rep.metric_name}: {rep.value:.4f} (tp={rep.tp} fp={rep.fp} fn={rep.fn})")
    return EXIT_OK


def cmd_perplexity(cfg, out_dir: Path) -> int:
    vocab = load_vocab(_require_file(cfg["vocab"], "trained vocabulary"))
    texts = [l for l in _require_file(cfg["texts"], "text file")
             .read_text(encoding="utf-8").splitlines() if l.strip()]
    if not texts:
        raise CLIValidationError("text file contains no texts")
    rows = []
    for ck_path in cfg["checkpoints"]:
        ckpt = load_checkpoint(_require_file(ck_path, "checkpoint"))
        ppl = pseudo_perplexity(ckpt, texts, vocab, rounds=cfg["rounds"], seed=cfg["seed"])
        rows.append([ck_path, repr(ppl)])
        print(f"{ck_path}: pseudo-perplexity {ppl:.3f}")
    _write_csv(out_dir / "perplexity.csv", ["checkpoint", "pseudo_perplexity"], rows)
    figures.bars_figure([(Path(r[0]).name, float(r[1])) for r in rows],
                        "pseudo-perplexity", out_dir / "perplexity.png")
    return EXIT_OK


def cmd_bench(cfg, out_dir: Path) -> int:
    catalog = standard_presets(vocab_size=cfg["vocab_size"], max_positions=cfg["max_positions"])
    unknown = [p for p in cfg["presets"] if p not in catalog]
    if unknown:
        raise CLIValidationError(f"unknown bench presets {unknown} "
                                 f"(available: {sorted(catalog)})")
    presets = [catalog[p] for p in cfg["presets"]]
    workload = BenchWorkload(seq_len=cfg["seq_len"], steps=cfg["steps"], reps=cfg["reps"],
                             seed=cfg["seed"])
    rows = bench(presets, int(cfg["budget_mb"] * 1024 * 1024), workload, cfg["reference"])
    (out_dir / "bench.csv").write_text(rows_to_csv(rows), encoding="utf-8")
    figures.bench_figure(out_dir / "bench.csv", out_dir / "bench.png")
    for r in rows:
        flag = " [noisy]" if r.noisy else ("" if r.feasible else " [infeasible]")
        print(f"{r.preset}: params={r.params} max_bs={r.max_bs} "
              f"train@1={r.train_speed_bs1:.2f}x train@max={r.train_speed_max:.2f}x "
              f"infer@1={r.infer_speed_bs1:.2f}x{flag}")
    return EXIT_OK


def cmd_gen_synth(cfg, out_dir: Path) -> int:
    spec = SynthSpec(task=cfg["task_type"], domains=cfg["domains"], overlap=cfg["overlap"],
                     words_per_domain=cfg["words_per_domain"],
                     docs_per_domain=cfg["docs_per_domain"],
                     task_examples=cfg["task_examples"], num_labels=cfg["num_labels"],
                     entity_types=cfg["entity_types"], seed=cfg["seed"])
    out = gen_synth(spec, out_dir)
    for name, docs in out.corpora.items():
        print(f"domain {name}: {len(docs)} documents -> corpus-{name}.txt")
    for split, recs in out.task_splits.items():
        print(f"task {spec.task} {split}: {len(recs)} records -> task.{split}")
    return EXIT_OK


HANDLERS = {
    "train-vocab": cmd_train_vocab,
    "ingest": cmd_ingest,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "grid-search": cmd_grid_search,
    "eval": cmd_eval,
    "perplexity": cmd_perplexity,
    "bench": cmd_bench,
    "gen-synth": cmd_gen_synth,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slab",
        description="Desk-scale workbench for adapting MLM encoders to specialised domains")
    sub = parser.add_subparsers(dest="command", required=True)
    for command, opts in OPTS.items():
        p = sub.add_parser(command)
        p.add_argument("--config", default=None, help="key=value config file")
        for o in opts:
            p.add_argument(flag_name(o.key), dest=o.key, default=None, help=o.help)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    opts = OPTS[args.command]
    try:
        flag_values = {o.key: getattr(args, o.key) for o in opts}
        cfg = resolve(opts, args.config, flag_values)
        out_dir = Path(cfg["out"])
        out_dir.mkdir(parents=True, exist_ok=True)
        code = HANDLERS[args.command](cfg, out_dir)
        write_resolved(cfg, opts, out_dir)
        return code
    except (CLIValidationError, ConfigError) as exc:
        print(f"slab {args.command}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (IngestError, CheckpointError, ValueError) as exc:
        print(f"slab {args.command}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except PretrainDivergedError as exc:
        print(f"slab {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"slab {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
