"""Command-line entry point: ``genemamba <subcommand> ...``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from genemamba import checkpoint as ckpt_io
from genemamba import corpus, synthetic
from genemamba.embeddings import EmbeddingTable, embed_cells, embed_genes
from genemamba.errors import ConfigError, DataError, GeneMambaError
from genemamba.evalsuite import plots
from genemamba.evalsuite.reconstruct import reconstruct_batch
from genemamba.evalsuite.report import write_table
from genemamba.evalsuite.suites import evaluate_integration, evaluate_pairs, evaluate_reconstruction
from genemamba.objectives import PathwaySet
from genemamba.tdigest import DEFAULT_COMPRESSION
from genemamba.trainer import FinetuneConfig, TrainConfig, Trainer, finetune_classifier, load_classifier

logger = logging.getLogger("genemamba")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    """argparse with usage errors raised instead of exiting with status 2."""

    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


# -- helpers -------------------------------------------------------------------


def _vocab_path(args) -> Path:
    return Path(args.vocab) if args.vocab else Path(str(args.data) + ".vocab.tsv")


def _load_vocab(args, required=True):
    path = _vocab_path(args)
    if not path.exists():
        if required:
            raise DataError(f"vocabulary file {path} not found (pass --vocab)")
        return None
    return corpus.Vocabulary.load(path)


def _write_tables(prefix, tables, render: bool) -> list[Path]:
    written = []
    for name, table in tables.items():
        path = Path(f"{prefix}.{name}.tsv")
        write_table(path, *table)
        written.append(path)
        if render and name in plots.RENDERERS and table[1]:
            written.append(plots.RENDERERS[name](Path(f"{prefix}.{name}.png"), table))
    return written


def _emit_report(report, prefix) -> None:
    text = report.to_lines()
    Path(f"{prefix}.report.txt").write_text(text, encoding="utf-8")
    Path(f"{prefix}.report.json").write_text(report.to_json(), encoding="utf-8")
    sys.stdout.write(text)


# -- subcommands ---------------------------------------------------------------


def cmd_tokenize(args) -> int:
    m = corpus.load_matrix(args.matrix, args.labels)
    vocab = corpus.Vocabulary.load(args.vocab) if args.vocab else None
    factors = corpus.NormalizationFactors.load(args.factors) if args.factors else None
    res = corpus.preprocess(
        m,
        min_genes=args.min_genes,
        target_depth=args.target_depth,
        max_len=args.max_len,
        compression=args.compression,
        vocab=vocab,
        factors=factors,
        workers=args.threads,
    )
    res.dataset.save(args.out)
    res.vocab.save(str(args.out) + ".vocab.tsv")
    res.factors.save(str(args.out) + ".factors.tsv")
    lengths = [len(s) for s in res.dataset.sequences]
    print(f"cells_kept={len(res.dataset)} cells_input={res.n_input_cells}")
    print(f"vocab_size={len(res.vocab)}")
    print(f"median_seq_len={float(np.median(lengths))!r}")
    return EXIT_OK


TRAIN_KEYS = (
    "lr", "batch_size", "epochs", "max_steps", "gamma", "tau", "clip_norm",
    "checkpoint_interval", "d_model", "n_layers", "d_state", "expand", "d_conv",
)


def cmd_train(args) -> int:
    dataset = corpus.TokenizedDataset.load(args.data)
    vocab = _load_vocab(args)
    pathways = PathwaySet.load(args.pathways, vocab) if args.pathways else None
    cfg = TrainConfig(seed=args.seed, **{k: getattr(args, k) for k in TRAIN_KEYS})
    if args.resume:
        trainer = Trainer.resume(args.resume, dataset, pathways, cfg)
    else:
        if args.log and Path(args.log).exists():
            Path(args.log).unlink()
        trainer = Trainer(cfg, dataset, len(vocab), pathways)
    records = trainer.run(log_path=args.log, checkpoint_path=args.checkpoint)
    if records:
        last = records[-1]
        print(f"steps={trainer.step} final_total={last.total!r} final_l_lang={last.l_lang!r}")
    else:
        print(f"steps={trainer.step} (nothing to do)")
    return EXIT_OK


def cmd_finetune(args) -> int:
    dataset = corpus.TokenizedDataset.load(args.data)
    model = ckpt_io.load_model(args.checkpoint)
    cfg = FinetuneConfig(
        label_column=args.label_column,
        partition_column=args.partition_column,
        hidden=args.hidden,
        epochs=args.epochs,
        lr=args.lr,
        batch_size=args.batch_size,
        seed=args.seed,
        test_fraction=args.test_fraction,
    )
    result = finetune_classifier(model, dataset, cfg)
    result.save(args.out)
    for k, v in result.report.items():
        print(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}")
    return EXIT_OK


def cmd_embed(args) -> int:
    dataset = corpus.TokenizedDataset.load(args.data)
    model = ckpt_io.load_model(args.checkpoint)
    if args.level == "cell":
        table = EmbeddingTable(list(dataset.cell_ids), embed_cells(model, dataset, args.mode, args.batch_size))
    else:
        vocab = _load_vocab(args, required=False)
        genes, values = embed_genes(model, dataset, args.batch_size)
        ids = [vocab.token_name(int(t)) if vocab else str(int(t)) for t in genes]
        table = EmbeddingTable(ids, values)
    table.save(args.out)
    print(f"rows={table.values.shape[0]} dim={table.values.shape[1]}")
    return EXIT_OK


def cmd_reconstruct(args) -> int:
    dataset = corpus.TokenizedDataset.load(args.data)
    model = ckpt_io.load_model(args.checkpoint)
    vocab = _load_vocab(args, required=False)
    outputs = reconstruct_batch(model, dataset.sequences, args.batch_size)

    def names(seq):
        return " ".join(vocab.token_name(int(t)) if vocab else str(int(t)) for t in seq)

    rows = [[cid, names(s), names(o)] for cid, s, o in zip(dataset.cell_ids, dataset.sequences, outputs)]
    write_table(args.out, ["cell_id", "input", "output"], rows)
    print(f"cells={len(rows)}")
    return EXIT_OK


def _need(args, *names):
    missing = [n for n in names if getattr(args, n) is None]
    if missing:
        flags = ", ".join("--" + n.replace("_", "-") for n in missing)
        raise UsageError(f"eval --suite {args.suite} requires {flags}")


def cmd_eval(args) -> int:
    if args.suite is None or args.out is None:
        raise UsageError("eval requires --suite and --out")
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    if args.suite == "integration":
        _need(args, "data", "embeddings")
        dataset = corpus.TokenizedDataset.load(args.data)
        table = EmbeddingTable.load(args.embeddings)
        if args.label_column not in dataset.labels:
            raise DataError(f"dataset has no {args.label_column!r} label column")
        if table.ids != list(dataset.cell_ids):
            raise DataError("embedding ids do not match the dataset cell ids")
        predicted = None
        if args.classifier:
            from genemamba.trainer import _classify

            model, head, classes = load_classifier(args.classifier)
            logits = _classify(model, head, dataset.sequences, 64)
            predicted = [classes[i] for i in logits.argmax(-1).tolist()]
        result = evaluate_integration(
            table.values.astype(np.float64),
            dataset.labels[args.label_column],
            dataset.labels.get(args.batch_column),
            predicted,
            k=args.k,
            seed=args.seed,
        )
        result.report.dataset_id = str(args.data)
        result.report.model_id = str(args.embeddings)
    elif args.suite == "reconstruct":
        _need(args, "data", "checkpoint")
        dataset = corpus.TokenizedDataset.load(args.data)
        model = ckpt_io.load_model(args.checkpoint)
        result = evaluate_reconstruction(model, dataset)
        result.report.dataset_id = str(args.data)
        result.report.model_id = str(args.checkpoint)
    else:
        _need(args, "embeddings", "pairs")
        table = EmbeddingTable.load(args.embeddings)
        result = evaluate_pairs(table.as_dict(), load_pairs(args.pairs), bins=args.bins)
        result.report.dataset_id = str(args.pairs)
        result.report.model_id = str(args.embeddings)
    _emit_report(result.report, args.out)
    _write_tables(args.out, result.tables, args.plots)
    return EXIT_OK


def load_pairs(path) -> list[tuple[str, str, int]]:
    """``gene_a<TAB>gene_b<TAB>label`` lines with label 0 or 1."""
    out = []
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataError(f"cannot read pairs {path}: {exc}") from None
    for lineno, line in enumerate(lines, start=1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3 or parts[2] not in ("0", "1"):
            raise DataError(f"{path}:{lineno}: expected 'gene_a<TAB>gene_b<TAB>0|1'")
        out.append((parts[0], parts[1], int(parts[2])))
    return out


def cmd_simulate(args) -> int:
    try:
        return _simulate(args)
    except ValueError as exc:
        # sizes that cannot be satisfied, e.g. more distinct genes than the vocabulary holds
        raise ConfigError(f"simulate {args.kind}: {exc}") from None


def _simulate(args) -> int:
    out = str(args.out)
    if args.kind == "matrix":
        m = synthetic.expression_matrix(
            n_cells=args.n_cells, n_genes=args.n_genes, n_types=args.n_types, seed=args.seed
        )
        corpus.save_matrix(m, out)
        corpus.save_labels(m.cell_meta, out + ".labels.tsv")
        print(f"cells={m.n_cells} genes={m.n_genes}")
        return EXIT_OK
    vocab = corpus.build_vocab([f"G{j:04d}" for j in range(args.vocab_size - corpus.N_SPECIAL)])
    if args.kind == "tokens":
        ds = synthetic.random_token_corpus(args.n_cells, len(vocab), args.seq_len, args.seed)
    elif args.kind == "classes":
        per = max(1, args.n_cells // args.n_types)
        ds = synthetic.class_signature_corpus(per, args.n_types, len(vocab), args.seq_len, seed=args.seed)
    else:
        pw = synthetic.planted_pathways(len(vocab), seed=args.seed)
        ds = synthetic.pathway_corpus(args.n_cells, len(vocab), args.seq_len, pw, args.seed)
        pw.save(out + ".pathways.tsv", vocab)
        genes = sorted(pw.membership)
        rows = []
        for i, a in enumerate(genes):
            for b in genes[i + 1 :]:
                rows.append((vocab.token_name(a), vocab.token_name(b), int(pw.positive(a, b))))
        Path(out + ".pairs.tsv").write_text("".join(f"{a}\t{b}\t{y}\n" for a, b, y in rows), encoding="utf-8")
    ds.vocab_hash = vocab.digest()
    ds.save(out)
    vocab.save(out + ".vocab.tsv")
    print(f"cells={len(ds)} vocab_size={len(vocab)}")
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def _common(p):
    g = p.add_argument_group("common options")
    g.add_argument("--seed", type=int, default=0, help="seed for every random choice (default 0)")
    g.add_argument("--threads", type=int, default=os.cpu_count() or 1,
                   help="worker threads; results do not depend on it (default: all cores)")
    g.add_argument("--config", metavar="PATH",
                   help="key = value file supplying defaults for this subcommand's flags")
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def build_parser() -> Parser:
    parser = Parser(prog="genemamba", description="Bidirectional Mamba models over rank-tokenized cells.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("tokenize", help="expression matrix -> tokenized dataset")
    p.add_argument("matrix", help="matrix text file (cells/genes header, gene ids, triplets)")
    p.add_argument("out", help="output dataset; OUT.vocab.tsv and OUT.factors.tsv are written too")
    p.add_argument("--labels", help="TSV label table whose first column is 'cell'")
    p.add_argument("--min-genes", type=int, default=corpus.DEFAULT_MIN_GENES, help="minimum expressed genes per cell")
    p.add_argument("--target-depth", type=float, default=corpus.DEFAULT_TARGET_DEPTH, help="per-cell depth target")
    p.add_argument("--max-len", type=int, default=corpus.DEFAULT_MAX_LEN, help="truncate sequences to this length")
    p.add_argument("--compression", type=float, default=DEFAULT_COMPRESSION, help="t-digest compression")
    p.add_argument("--vocab", help="reuse an existing vocabulary file")
    p.add_argument("--factors", help="reuse existing per-gene normalization factors")
    _common(p)
    p.set_defaults(func=cmd_tokenize)

    d = TrainConfig()
    p = sub.add_parser("train", help="pretrain a model on a tokenized dataset")
    p.add_argument("data", help="tokenized dataset")
    p.add_argument("checkpoint", help="checkpoint written at intervals and at the end")
    p.add_argument("--vocab", help="vocabulary file (default DATA.vocab.tsv)")
    p.add_argument("--pathways", help="'gene<TAB>pathway' annotation file")
    p.add_argument("--log", help="append one line per step to this file")
    p.add_argument("--resume", metavar="CKPT", help="continue from a training checkpoint")
    p.add_argument("--lr", type=float, default=d.lr, help="Adam learning rate")
    p.add_argument("--batch-size", type=int, default=d.batch_size, help="cells per step")
    p.add_argument("--epochs", type=int, default=d.epochs, help="passes over the data")
    p.add_argument("--max-steps", type=int, default=d.max_steps, help="stop after this many steps (0: use epochs)")
    p.add_argument("--gamma", type=float, default=d.gamma, help="pathway loss weight")
    p.add_argument("--tau", type=float, default=d.tau, help="contrastive temperature")
    p.add_argument("--clip-norm", type=float, default=d.clip_norm, help="gradient norm clip (0 disables)")
    p.add_argument("--checkpoint-interval", type=int, default=d.checkpoint_interval, help="save every N steps")
    p.add_argument("--d-model", type=int, default=d.d_model, help="hidden width")
    p.add_argument("--n-layers", type=int, default=d.n_layers, help="Bi-Mamba blocks")
    p.add_argument("--d-state", type=int, default=d.d_state, help="SSM state size")
    p.add_argument("--expand", type=int, default=d.expand, help="mixer expansion factor")
    p.add_argument("--d-conv", type=int, default=d.d_conv, help="causal conv width")
    _common(p)
    p.set_defaults(func=cmd_train)

    f = FinetuneConfig()
    p = sub.add_parser("finetune", help="train a cell-type classifier head")
    p.add_argument("data", help="tokenized dataset with labels")
    p.add_argument("checkpoint", help="pretrained model checkpoint")
    p.add_argument("out", help="classifier checkpoint")
    p.add_argument("--label-column", default=f.label_column, help="label column to predict")
    p.add_argument("--partition-column", default=f.partition_column,
                   help="column with train/test values; stratified split when absent")
    p.add_argument("--hidden", type=int, default=f.hidden, help="classifier hidden width")
    p.add_argument("--epochs", type=int, default=f.epochs, help="fine-tuning epochs")
    p.add_argument("--lr", type=float, default=f.lr, help="learning rate")
    p.add_argument("--batch-size", type=int, default=f.batch_size, help="cells per step")
    p.add_argument("--test-fraction", type=float, default=f.test_fraction, help="held-out share per class")
    _common(p)
    p.set_defaults(func=cmd_finetune)

    p = sub.add_parser("embed", help="write cell or gene embeddings")
    p.add_argument("data", help="tokenized dataset")
    p.add_argument("checkpoint", help="model checkpoint")
    p.add_argument("out", help="embedding file")
    p.add_argument("--level", choices=("cell", "gene"), default="cell", help="embed cells or genes")
    p.add_argument("--mode", choices=("cls", "mean"), default="cls", help="cell pooling")
    p.add_argument("--vocab", help="vocabulary for gene ids (default DATA.vocab.tsv if present)")
    p.add_argument("--batch-size", type=int, default=32, help="cells per forward pass")
    _common(p)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("reconstruct", help="decode gene rankings for every cell")
    p.add_argument("data", help="tokenized dataset")
    p.add_argument("checkpoint", help="model checkpoint")
    p.add_argument("out", help="TSV of input and output rankings")
    p.add_argument("--vocab", help="vocabulary for gene names (default DATA.vocab.tsv if present)")
    p.add_argument("--batch-size", type=int, default=32, help="cells per forward pass")
    _common(p)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("eval", help="run an evaluation suite and write a report")
    p.add_argument("--suite", choices=("integration", "reconstruct", "pairs"), help="metric group (required)")
    p.add_argument("--out", help="prefix for report and table files (required)")
    p.add_argument("--data", help="tokenized dataset (integration, reconstruct)")
    p.add_argument("--checkpoint", help="model checkpoint (reconstruct)")
    p.add_argument("--embeddings", help="embedding file (integration: cells, pairs: genes)")
    p.add_argument("--classifier", help="classifier checkpoint supplying predicted labels (integration)")
    p.add_argument("--pairs", help="'gene_a<TAB>gene_b<TAB>0|1' file (pairs)")
    p.add_argument("--label-column", default="celltype", help="cell-type column (integration)")
    p.add_argument("--batch-column", default="batch", help="batch column (integration)")
    p.add_argument("--k", type=int, default=15, help="kNN neighbours (integration)")
    p.add_argument("--bins", type=int, default=50, help="histogram bins on [-1, 1] (pairs)")
    p.add_argument("--plots", action="store_true", help="also render PNG figures next to the tables")
    _common(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("simulate", help="write a synthetic corpus")
    p.add_argument("kind", choices=("matrix", "tokens", "classes", "pathways"), help="corpus type")
    p.add_argument("out", help="output path (matrix file or tokenized dataset)")
    p.add_argument("--n-cells", type=int, default=64, help="cells")
    p.add_argument("--n-genes", type=int, default=120, help="genes (matrix)")
    p.add_argument("--n-types", type=int, default=3, help="cell types or classes")
    p.add_argument("--vocab-size", type=int, default=200, help="vocabulary size including special tokens")
    p.add_argument("--seq-len", type=int, default=32, help="tokens per cell")
    _common(p)
    p.set_defaults(func=cmd_simulate)
    return parser


def _apply_config(parser: Parser, argv) -> argparse.Namespace:
    """Parse once, then again with config-file values as defaults."""
    args = parser.parse_args(argv)
    if not args.config:
        return args
    sub = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in sub._actions if a.option_strings}
    text = Path(args.config).read_text(encoding="utf-8")
    defaults = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{args.config}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in actions or key in ("config", "help"):
            raise ConfigError(f"{args.config}:{lineno}: unknown key {key!r} for {args.command}")
        act = actions[key]
        if isinstance(act, argparse._StoreTrueAction):
            if value.lower() not in ("true", "false", "1", "0"):
                raise ConfigError(f"{args.config}:{lineno}: {key} takes true or false")
            defaults[key] = value.lower() in ("true", "1")
        elif act.choices is not None and value not in act.choices:
            raise ConfigError(f"{args.config}:{lineno}: {key} must be one of {sorted(act.choices)}")
        else:
            try:
                defaults[key] = act.type(value) if act.type else value
            except ValueError:
                raise ConfigError(f"{args.config}:{lineno}: bad value for {key}") from None
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except GeneMambaError as exc:
        print(f"genemamba: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"genemamba: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("genemamba: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except GeneMambaError as exc:
        print(f"genemamba: {type(exc).__name__}: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"genemamba: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
