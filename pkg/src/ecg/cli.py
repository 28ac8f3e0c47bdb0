"""Command-line entry point wiring corpus prep, training, indexing,
retrieval, and evaluation into reproducible runs.

Every subcommand writes its artifacts plus a ``manifest.json`` (effective
settings, seed, config hash, version) under the output directory, and a
fixed seed with ``--threads 1`` reproduces every output file byte for
byte. Model runs are self-contained directories holding ``model.ckpt``,
``model.cfg``, and ``vocab.txt``.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import subprocess
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor as T
from .checkpoint import load_params, save_params
from .data import (
    all_world_texts,
    load_corpus,
    load_examples,
    load_queries,
    chunk_text,
    save_corpus,
    save_examples,
    save_queries,
    synth_corpus,
)
from .evaluation import (
    eval_fixed_budget,
    fixed_performance_search,
    write_records_jsonl,
    write_report_csv,
)
from .gradsuite import format_suite_results, run_suite
from .model import EcgModel, LmConfig, PROMPT_TEXTS
from .retrieval import EmbeddingStore, search_topk, store_read, store_write
from .training import (
    TrainConfig,
    history_to_csv,
    train_rag,
    train_reader,
    train_ssl,
)
from .vocab import Vocabulary

DEFAULTS: dict[str, str] = {
    # world
    "n_facts": "32",
    "n_distractors": "96",
    "negatives_per_example": "6",
    "chunk_words": "20",
    # model
    "layers": "2",
    "heads": "4",
    "hidden_size": "64",
    "max_len": "160",
    "t": "8",
    # training (exact TrainConfig field names apply to every stage)
    "batch_size": "8",
    "learning_rate": "3e-3",
    "weight_decay": "0.01",
    "epochs": "1",
    "steps": "none",
    "n_min": "2",
    "n_max": "8",
    "negative_temperature": "0.15",
    "warmup_ratio": "0.05",
    "contrastive_pretrain": "true",
    "distillation": "true",
    "loss_scaling": "true",
    "weighted_negatives": "true",
    # per-stage overrides
    "ssl_steps": "800",
    "ssl_learning_rate": "5e-3",
    "rag_steps": "1200",
    "rag_batch_size": "8",
    "rag_learning_rate": "1e-3",
    "teacher_steps": "400",
    "teacher_learning_rate": "5e-3",
    # held-out fraction for reader/parametric checkpoint selection (0 = off)
    "val_fraction": "0",
    # ablation-harness scale
    "ablate_ssl_steps": "80",
    "ablate_rag_steps": "60",
    "ablate_teacher_steps": "80",
    # evaluation
    "budget": "16",
    "k": "1",
    "max_new": "12",
    "grid_start": "32",
    "grid_stop": "256",
    "grid_step": "32",
}


class CliError(RuntimeError):
    pass


def parse_config_file(path: str | Path) -> dict[str, str]:
    settings: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise CliError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        settings[key.strip()] = value.strip()
    return settings


def effective_settings(args) -> dict[str, str]:
    settings = dict(DEFAULTS)
    if args.config:
        file_settings = parse_config_file(args.config)
        unknown = set(file_settings) - set(DEFAULTS)
        if unknown:
            raise CliError(f"unknown config keys: {sorted(unknown)}")
        settings.update(file_settings)
    for item in args.set or []:
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        if key not in DEFAULTS:
            raise CliError(f"unknown config key {key!r}")
        settings[key] = value
    return settings


def config_hash(settings: dict[str, str]) -> str:
    canon = "\n".join(f"{k}={settings[k]}" for k in sorted(settings))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


def version_string() -> str:
    try:
        described = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            cwd=Path(__file__).parent,
            capture_output=True,
            text=True,
            timeout=10,
        )
        if described.returncode == 0 and described.stdout.strip():
            return f"ecg-{__version__}+g{described.stdout.strip()}"
    except (OSError, subprocess.TimeoutExpired):
        pass
    return f"ecg-{__version__}"


def write_manifest(out: Path, command: str, args_record: dict, settings: dict[str, str], seed: int) -> None:
    manifest = {
        "command": command,
        "args": args_record,
        "config_hash": config_hash(settings),
        "seed": seed,
        "settings": settings,
        "version": version_string(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, sort_keys=True, indent=2) + "\n")


def stage_config(settings: dict[str, str], stage: str) -> TrainConfig:
    mapping = dict(settings)
    for f in TrainConfig.field_names():
        key = f"{stage}_{f}"
        if key in settings:
            mapping[f] = settings[key]
    return TrainConfig.from_mapping(mapping)


def model_config(settings: dict[str, str], vocab_size: int) -> LmConfig:
    return LmConfig(
        vocab_size=vocab_size,
        layers=int(settings["layers"]),
        heads=int(settings["heads"]),
        d=int(settings["hidden_size"]),
        max_len=int(settings["max_len"]),
        t=int(settings["t"]),
    )


def save_model_dir(model: EcgModel, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    save_params(model.params, out / "model.ckpt")
    model.cfg.save(out / "model.cfg")
    model.vocab.save(out / "vocab.txt")


def load_model_dir(path: str | Path) -> EcgModel:
    path = Path(path)
    for name in ("model.ckpt", "model.cfg", "vocab.txt"):
        if not (path / name).exists():
            raise CliError(f"model directory {path} is missing {name}")
    cfg = LmConfig.load(path / "model.cfg")
    vocab = Vocabulary.load(path / "vocab.txt")
    params = load_params(path / "model.ckpt")
    return EcgModel(cfg, vocab, params)


def build_vocab(corpus_texts: list[str]) -> Vocabulary:
    from .data import QUESTION_TEMPLATE

    scaffold = [QUESTION_TEMPLATE.replace("{relation}", "").replace("{entity}", "")]
    return Vocabulary.build(corpus_texts + PROMPT_TEXTS + scaffold)


def index_corpus(model: EcgModel, passages, threads: int = 1) -> EmbeddingStore:
    store = EmbeddingStore(model.cfg.d)
    with T.no_grad():
        for p in passages:
            vectors = model.embed_text(p.text).data.astype(np.float32)
            store.add(p.id, vectors)
    return store


# ---------------------------------------------------------------- commands


def cmd_synth(args, settings, out: Path) -> int:
    world = synth_corpus(
        args.seed,
        int(settings["n_facts"]),
        int(settings["n_distractors"]),
        int(settings["negatives_per_example"]),
    )
    save_corpus(world.passages, out / "corpus.jsonl")
    save_examples(world.examples, out / "train.jsonl")
    save_queries(world.queries, out / "queries.jsonl")
    print(f"wrote {len(world.passages)} passages, {len(world.examples)} examples -> {out}")
    return 0


def cmd_chunk(args, settings, out: Path) -> int:
    document = Path(args.input).read_text(encoding="utf-8")
    passages = chunk_text(document, int(settings["chunk_words"]))
    save_corpus(passages, out / "passages.jsonl")
    print(f"wrote {len(passages)} passages -> {out / 'passages.jsonl'}")
    return 0


def cmd_train_ssl(args, settings, out: Path) -> int:
    passages = load_corpus(args.corpus)
    vocab = build_vocab([p.text for p in passages])
    cfg = model_config(settings, len(vocab))
    model = EcgModel.new(cfg, vocab, seed=args.seed)
    train_cfg = stage_config(settings, "ssl")
    history = train_ssl(model, passages, train_cfg, seed=args.seed)
    save_model_dir(model, out)
    history_to_csv(history, out / "losses.csv")
    print(f"ssl: {len(history)} steps, final l_lm={history[-1].l_lm:.4f} -> {out}")
    return 0


def cmd_train_teacher(args, settings, out: Path) -> int:
    examples = load_examples(args.train)
    if args.vocab:
        vocab = Vocabulary.load(args.vocab)
    else:
        texts = [ex.positive.text for ex in examples]
        texts += [n.passage.text for ex in examples for n in ex.negatives]
        texts += [ex.question for ex in examples] + [a for ex in examples for a in ex.answers]
        vocab = build_vocab(texts)
    cfg = model_config(settings, len(vocab))
    model = EcgModel.new(cfg, vocab, seed=args.seed)
    train_cfg = stage_config(settings, "teacher")
    val_fraction = float(settings["val_fraction"])
    val_examples = None
    if val_fraction > 0:
        order = np.random.default_rng(args.seed).permutation(len(examples))
        n_val = max(1, round(val_fraction * len(examples)))
        val_examples = [examples[i] for i in order[:n_val]]
        examples = [examples[i] for i in order[n_val:]]
    history = train_reader(
        model, examples, train_cfg, seed=args.seed, parametric=args.parametric, val_examples=val_examples
    )
    save_model_dir(model, out)
    history_to_csv(history, out / "losses.csv")
    kind = "parametric" if args.parametric else "reader"
    print(f"{kind}: {len(history)} steps, final loss={history[-1].loss:.4f} -> {out}")
    return 0


def cmd_train_rag(args, settings, out: Path) -> int:
    examples = load_examples(args.train)
    model = load_model_dir(args.init)
    teacher = load_model_dir(args.teacher)
    train_cfg = stage_config(settings, "rag")
    history = train_rag(model, teacher, examples, train_cfg, seed=args.seed)
    save_model_dir(model, out)
    history_to_csv(history, out / "losses.csv")
    print(f"rag: {len(history)} steps, final total={history[-1].total:.4f} -> {out}")
    return 0


def cmd_index(args, settings, out: Path) -> int:
    passages = load_corpus(args.corpus)
    model = load_model_dir(args.model)
    store = index_corpus(model, passages, threads=args.threads)
    store_write(store, out / "index.ecgs")
    from .retrieval import disk_usage

    print(f"indexed {len(store)} passages ({disk_usage(store)} bytes) -> {out / 'index.ecgs'}")
    return 0


def cmd_search(args, settings, out: Path) -> int:
    model = load_model_dir(args.model)
    store = store_read(args.index)
    with T.no_grad():
        query = model.embed_text(args.query).data
    results = search_topk(query, store, int(settings["k"]), threads=args.threads)
    with open(out / "results.jsonl", "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps({"rank": r.rank, "id": r.passage_id, "score": r.score}, sort_keys=True) + "\n")
    for r in results:
        print(f"{r.rank}\t{r.passage_id}\t{r.score:.6f}")
    return 0


def _eval_kwargs(args, settings):
    kwargs = {
        "budget": int(settings["budget"]),
        "k": int(settings["k"]),
        "threads": args.threads,
        "max_new": int(settings["max_new"]),
    }
    if args.model:
        model = load_model_dir(args.model)
        kwargs["ecg_model"] = model
        kwargs["reader_model"] = model
        kwargs["parametric_model"] = model
        kwargs["compression_model"] = model
    if args.index:
        kwargs["store"] = store_read(args.index)
    if args.corpus:
        kwargs["corpus"] = load_corpus(args.corpus)
    return kwargs


def cmd_eval(args, settings, out: Path) -> int:
    from . import plots

    queries = load_queries(args.queries)
    kwargs = _eval_kwargs(args, settings)
    method = args.method

    if args.fixed_performance is not None:
        budgets = tuple(
            range(int(settings["grid_start"]), int(settings["grid_stop"]) + 1, int(settings["grid_step"]))
        )
        reports = {}

        def eval_at(budget: int) -> float:
            report = eval_fixed_budget(method, queries, **{**kwargs, "budget": budget})
            reports[budget] = report
            return report.em

        outcome = fixed_performance_search(eval_at, args.fixed_performance, budgets)
        ordered = [reports[b] for b in sorted(reports)]
        write_report_csv(ordered, out / "eval.csv")
        (out / "fixed_performance.json").write_text(
            json.dumps(
                {"budget": outcome.budget, "em": outcome.em, "reached": outcome.reached},
                sort_keys=True,
            )
            + "\n"
        )
        plots.em_by_budget(ordered, out / "eval.png")
        status = "reached" if outcome.reached else "best"
        print(f"fixed-performance: {status} budget={outcome.budget} em={outcome.em:.4f}")
        return 0

    if args.sweep_k:
        lo, _, hi = args.sweep_k.partition(":")
        ks = list(range(int(lo), int(hi) + 1))
        reports = [
            eval_fixed_budget(method, queries, **{**kwargs, "k": k}) for k in ks
        ]
        write_report_csv(reports, out / "eval.csv")
        plots.em_by_k(reports, out / "eval.png")
        for r in reports:
            print(f"{r.method} k={r.k} budget={r.budget} em={r.em:.4f}")
        return 0

    report = eval_fixed_budget(method, queries, **kwargs)
    write_report_csv([report], out / "eval.csv")
    write_records_jsonl(report, out / "records.jsonl")
    plots.em_by_budget([report], out / "eval.png")
    print(f"{report.method} budget={report.budget} k={report.k} em={report.em:.4f}")
    return 0


def cmd_ablate(args, settings, out: Path) -> int:
    from . import plots

    passages = load_corpus(args.corpus)
    examples = load_examples(args.train)
    queries = load_queries(args.queries)

    vocab = build_vocab([p.text for p in passages])
    cfg = model_config(settings, len(vocab))
    flags = ("contrastive_pretrain", "distillation", "loss_scaling", "weighted_negatives")

    teacher = EcgModel.new(cfg, vocab, seed=args.seed + 1)
    teacher_cfg = TrainConfig.from_mapping(
        {**settings, "steps": settings["ablate_teacher_steps"]}
    )
    train_reader(teacher, examples, teacher_cfg, seed=args.seed)

    # The contrastive flag changes the pretraining stage; train one
    # checkpoint per setting and reuse it across the matching half of the
    # matrix.
    ssl_models: dict[bool, dict] = {}
    for contrastive in (True, False):
        model = EcgModel.new(cfg, vocab, seed=args.seed)
        ssl_cfg = TrainConfig.from_mapping(
            {
                **settings,
                "steps": settings["ablate_ssl_steps"],
                "contrastive_pretrain": str(contrastive),
            }
        )
        train_ssl(model, passages, ssl_cfg, seed=args.seed)
        ssl_models[contrastive] = {k: v.data.copy() for k, v in model.params.items()}

    rows = []
    for combo in range(16):
        values = {flag: bool((combo >> i) & 1) for i, flag in enumerate(flags)}
        model = EcgModel.new(cfg, vocab, seed=args.seed)
        for name, data in ssl_models[values["contrastive_pretrain"]].items():
            model.params[name].data[:] = data
        rag_cfg = TrainConfig.from_mapping(
            {
                **settings,
                "steps": settings["ablate_rag_steps"],
                "batch_size": settings.get("rag_batch_size", settings["batch_size"]),
                **{flag: str(values[flag]) for flag in flags},
            }
        )
        history = train_rag(model, teacher, examples, rag_cfg, seed=args.seed)
        locked = all(r.tau == 1.0 and r.alpha == 1.0 for r in history)

        store = index_corpus(model, passages)
        rank1 = 0
        with T.no_grad():
            for q in queries:
                ranked = search_topk(model.embed_text(q.question).data, store, 1)
                rank1 += ranked[0].passage_id == q.gold_id
        report = eval_fixed_budget(
            "ecg",
            queries,
            budget=max(int(settings["budget"]), cfg.t),
            k=1,
            ecg_model=model,
            store=store,
            max_new=int(settings["max_new"]),
        )
        row = {
            **{flag: values[flag] for flag in flags},
            "l_gen": history[-1].l_gen,
            "l_contrastive": history[-1].l_contrastive,
            "l_margin": history[-1].l_margin,
            "tau": history[-1].tau,
            "alpha": history[-1].alpha,
            "tau_alpha_locked": locked,
            "rank1_rate": rank1 / len(queries),
            "em": report.em,
        }
        rows.append(row)
        print(
            " ".join(f"{flag}={int(values[flag])}" for flag in flags)
            + f" em={report.em:.3f} rank1={row['rank1_rate']:.3f} tau={row['tau']:.4f} alpha={row['alpha']:.4f}"
        )

    header = list(rows[0])
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c]) for c in header))
    (out / "ablate.csv").write_text("\n".join(lines) + "\n")
    plots.ablation_bars(rows, out / "ablate.png")
    return 0


def cmd_gradcheck(args, settings, out: Path) -> int:
    results = run_suite()
    lines = format_suite_results(results)
    (out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    for line in lines:
        print(line)
    return 0 if all(report.passed for _, report in results) else 1


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ecg", description=__doc__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value settings file ('#' comments)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out", required=True, help="output directory for artifacts")
    common.add_argument("--threads", type=int, default=1)
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one setting")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="generate the synthetic corpus and training data")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("chunk", parents=[common], help="split a document into fixed-size passages")
    p.add_argument("--input", required=True)
    p.set_defaults(fn=cmd_chunk)

    p = sub.add_parser("train-ssl", parents=[common], help="self-supervised pretraining stage")
    p.add_argument("--corpus", required=True)
    p.set_defaults(fn=cmd_train_ssl)

    p = sub.add_parser("train-teacher", parents=[common], help="train the reader (or no-context) baseline")
    p.add_argument("--train", required=True)
    p.add_argument("--vocab", help="share a vocabulary file with other runs")
    p.add_argument("--parametric", action="store_true", help="question-only variant")
    p.set_defaults(fn=cmd_train_teacher)

    p = sub.add_parser("train-rag", parents=[common], help="retrieval-augmented fine-tuning stage")
    p.add_argument("--train", required=True)
    p.add_argument("--init", required=True, help="model dir from train-ssl")
    p.add_argument("--teacher", required=True, help="model dir from train-teacher")
    p.set_defaults(fn=cmd_train_rag)

    p = sub.add_parser("index", parents=[common], help="encode a corpus into the embedding store")
    p.add_argument("--corpus", required=True)
    p.add_argument("--model", required=True)
    p.set_defaults(fn=cmd_index)

    p = sub.add_parser("search", parents=[common], help="query the embedding store")
    p.add_argument("--index", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--query", required=True)
    p.set_defaults(fn=cmd_search)

    p = sub.add_parser("eval", parents=[common], help="budgeted end-to-end evaluation")
    p.add_argument("--queries", required=True)
    p.add_argument("--method", default="ecg", choices=("parametric", "rag_reader", "compression_reader", "ecg"))
    p.add_argument("--model", help="model dir for the chosen method")
    p.add_argument("--index", help="embedding store for vector methods")
    p.add_argument("--corpus", help="corpus for lexical retrieval and raw texts")
    p.add_argument("--budget", type=int, help="override the budget setting")
    p.add_argument("--k", type=int, help="override the k setting")
    p.add_argument("--sweep-k", metavar="LO:HI", help="evaluate a range of k values")
    p.add_argument("--fixed-performance", type=float, metavar="TARGET_EM",
                   help="grid-search the smallest budget reaching TARGET_EM")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", parents=[common], help="run the 2^4 training-flag matrix")
    p.add_argument("--train", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--queries", required=True)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        settings = effective_settings(args)
        if getattr(args, "budget", None) is not None:
            settings["budget"] = str(args.budget)
        if getattr(args, "k", None) is not None:
            settings["k"] = str(args.k)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        args_record = {
            key: value
            for key, value in sorted(vars(args).items())
            if key not in ("fn", "out", "threads") and value is not None and not callable(value)
        }
        code = args.fn(args, settings, out)
        write_manifest(out, args.command, args_record, settings, args.seed)
        return code
    except (CliError, FileNotFoundError, ValueError, RuntimeError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(run())
