"""Command-line pipeline: stats, train, eval, predict, rerun.

JSON goes to stdout, logs to stderr.  Exit codes are a stable contract:
0 success, 1 runtime failure, 2 usage or configuration error.  Every
artifact-producing command writes a run manifest capturing all resolved
values that affect results; ``slcnn rerun manifest.json`` replays it.

numpy (and its BLAS) is imported only after the ``--threads`` flag is
applied to the thread-count environment variables, because the default of
one BLAS thread is part of the determinism contract.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__

log = logging.getLogger("slcnn")

MANIFEST_SCHEMA_VERSION = 1
DATA_DIR_ENV = "SLCNN_DATA_DIR"


def _apply_thread_flag(argv: list[str]) -> None:
    threads = "1"
    for i, arg in enumerate(argv):
        if arg == "--threads" and i + 1 < len(argv):
            threads = argv[i + 1]
        elif arg.startswith("--threads="):
            threads = arg.split("=", 1)[1]
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, threads)


def _resolve_input(path_str: str) -> Path:
    """Resolve a dataset/embedding path, falling back to $SLCNN_DATA_DIR."""
    path = Path(path_str)
    if path.is_file():
        return path
    data_dir = os.environ.get(DATA_DIR_ENV)
    if data_dir and not path.is_absolute():
        candidate = Path(data_dir) / path
        if candidate.is_file():
            return candidate
    raise FileNotFoundError(f"input file not found: {path_str}")


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as handle:
        for chunk in iter(lambda: handle.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _emit(payload: dict, pretty: bool, out: str | None) -> None:
    text = json.dumps(payload, indent=2 if pretty else None, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    print(text)


def _write_manifest(command: str, args: argparse.Namespace, digests: dict[str, str],
                    outputs: list[str], path: Path) -> None:
    resolved = {k: v for k, v in vars(args).items() if k not in ("handler", "from_rerun")}
    manifest = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "tool": "slcnn",
        "tool_version": __version__,
        "command": command,
        "created_utc": datetime.now(timezone.utc).isoformat(),
        "args": resolved,
        "input_digests": digests,
        "outputs": outputs,
    }
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _parse_schema(value: str | None) -> list[str] | None:
    if not value:
        return None
    return [part.strip() for part in value.split(",") if part.strip()]


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------

def cmd_stats(args: argparse.Namespace) -> int:
    from . import corpus

    path = _resolve_input(args.input)
    stream = corpus.load_dataset(path, _parse_schema(args.schema), strict=args.strict)
    stats = corpus.corpus_stats(stream, args.ts)
    payload = {"schema_version": 1, **stats.__dict__}
    _emit(payload, args.pretty, args.out)
    if args.out:
        _write_manifest("stats", args, {str(path): _sha256(path)}, [args.out],
                        Path(args.out).with_suffix(".manifest.json"))
    return 0


def _load_docs(args, path: Path):
    from . import corpus

    docs = list(corpus.load_dataset(path, _parse_schema(args.schema), strict=args.strict))
    if not docs:
        raise corpus.DatasetFormatError(f"no usable documents in {path}")
    return docs


def _limit_docs(docs, limit: int | None, seed: int):
    import numpy as np
    from .model import STREAM_LIMIT

    if limit is None or limit >= len(docs):
        return docs
    order = np.random.default_rng([seed, STREAM_LIMIT]).permutation(len(docs))
    return [docs[i] for i in order[:limit]]


def cmd_train(args: argparse.Namespace) -> int:
    import numpy as np

    from . import corpus, embedding, model as m

    train_path = _resolve_input(args.input)
    emb_path = _resolve_input(args.embeddings)
    test_path = _resolve_input(args.test) if args.test else None
    val_path = _resolve_input(args.val) if args.val else None

    docs = _limit_docs(_load_docs(args, train_path), args.limit, args.seed)
    token_docs = [(doc.label, corpus.preprocess_document(doc)) for doc in docs]
    num_classes = args.classes or (max(label for label, _ in token_docs) + 1)
    doc_len = args.td or corpus.compute_doc_threshold(
        [len(tokens) for _, tokens in token_docs]
    )

    config = m.ModelConfig(
        variant=args.variant,
        doc_len=doc_len,
        num_classes=num_classes,
        fc_size=m.FC_SIZES[args.fc],
        sent_len=args.ts,
        embed_dim=args.dim,
        seed=args.seed,
        lr=args.lr,
        epochs=args.epochs,
        batch_size=args.batch_size,
        dropout_rate=args.dropout,
    )

    log.info("loading embeddings from %s", emb_path)
    table = embedding.load_embeddings(emb_path, args.dim, oov_seed=args.oov_seed)
    log.info("%d embedding rows, dim %d", len(table.vocab), table.dim)

    grid_ds = corpus.build_grid_dataset_from_token_docs(token_docs, doc_len, args.ts)
    full = m.EmbeddedDataset.build(grid_ds, table)

    if val_path is not None:
        val_docs = _load_docs(args, val_path)
        val_grid = corpus.build_grid_dataset(val_docs, doc_len, args.ts)
        train_data = full
        val_data = m.EmbeddedDataset.build(val_grid, table)
    elif args.val_frac > 0 and len(full) > 1:
        perm = np.random.default_rng([args.seed, m.STREAM_SPLIT]).permutation(len(full))
        n_val = max(1, round(args.val_frac * len(full)))
        val_idx, train_idx = perm[:n_val], perm[n_val:]
        train_data = m.EmbeddedDataset(full.grids[train_idx], full.labels[train_idx], full.matrix)
        val_data = m.EmbeddedDataset(full.grids[val_idx], full.labels[val_idx], full.matrix)
    else:
        train_data, val_data = full, None

    net = m.build_model(config)
    log.info(
        "built %s model: doc_len=%d classes=%d fc=%d, %d trainable parameters",
        config.variant, config.doc_len, config.num_classes, config.fc_size,
        m.count_parameters(net),
    )

    def log_epoch(epoch: int, report: m.TrainReport) -> None:
        val = f" val_acc={report.val_accuracy[-1]:.4f}" if report.val_accuracy else ""
        log.info(
            "epoch %d/%d loss=%.6f acc=%.4f%s (%.1fs)",
            epoch + 1, config.epochs, report.train_loss[-1],
            report.train_accuracy[-1], val, report.epoch_seconds[-1],
        )

    report = m.train(net, train_data, val_data, log_fn=log_epoch)

    test_data = None
    if test_path is not None:
        test_docs = _limit_docs(_load_docs(args, test_path), args.test_limit, args.seed)
        test_grid = corpus.build_grid_dataset(test_docs, doc_len, args.ts)
        test_data = m.EmbeddedDataset.build(test_grid, table)
        report.test_accuracy_final = m.evaluate(net, test_data)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []

    checkpoint_path = out_dir / "model.slcnn"
    m.save_checkpoint(net, checkpoint_path)
    outputs.append(str(checkpoint_path))

    if net.best_params is not None:
        final_params = net.param_values()
        net.load_param_values(net.best_params)
        if test_data is not None:
            report.test_accuracy_best_val = m.evaluate(net, test_data)
        best_path = out_dir / "model_best.slcnn"
        m.save_checkpoint(net, best_path)
        outputs.append(str(best_path))
        net.load_param_values(final_params)

    report_path = out_dir / "report.json"
    report_path.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
                           encoding="utf-8")
    outputs.append(str(report_path))

    digests = {str(train_path): _sha256(train_path), str(emb_path): _sha256(emb_path)}
    if test_path is not None:
        digests[str(test_path)] = _sha256(test_path)
    if val_path is not None:
        digests[str(val_path)] = _sha256(val_path)
    _write_manifest("train", args, digests, outputs, out_dir / "manifest.json")

    summary = {
        "schema_version": 1,
        "checkpoint": str(checkpoint_path),
        "report": str(report_path),
        "final_train_accuracy": report.train_accuracy[-1],
        "final_train_loss": report.train_loss[-1],
    }
    if report.val_accuracy:
        summary["best_val_accuracy"] = report.best_val_accuracy
    if report.test_accuracy_final is not None:
        summary["test_accuracy_final"] = report.test_accuracy_final
    if report.test_accuracy_best_val is not None:
        summary["test_accuracy_best_val"] = report.test_accuracy_best_val
    _emit(summary, args.pretty, None)
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    from . import corpus, embedding, model as m

    ckpt_path = _resolve_input(args.checkpoint)
    data_path = _resolve_input(args.input)
    emb_path = _resolve_input(args.embeddings)

    net = m.load_checkpoint(ckpt_path)
    config = net.config
    if args.dim is not None and args.dim != config.embed_dim:
        raise m.CheckpointMismatchError(
            f"checkpoint embed_dim is {config.embed_dim}, --dim says {args.dim}"
        )
    table = embedding.load_embeddings(emb_path, config.embed_dim, oov_seed=args.oov_seed)

    docs = _limit_docs(_load_docs(args, data_path), args.limit, config.seed)
    grid = corpus.build_grid_dataset(docs, config.doc_len, config.sent_len)
    data = m.EmbeddedDataset.build(grid, table)
    accuracy = m.evaluate(net, data)
    confusion = m.confusion_matrix(net, data)
    payload = {
        "schema_version": 1,
        "checkpoint": str(ckpt_path),
        "num_documents": len(data),
        "accuracy": accuracy,
        "confusion_matrix": confusion.tolist(),
    }
    _emit(payload, args.pretty, args.out)
    if args.out:
        digests = {str(p): _sha256(p) for p in (ckpt_path, data_path, emb_path)}
        _write_manifest("eval", args, digests, [args.out],
                        Path(args.out).with_suffix(".manifest.json"))
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    from . import corpus, embedding, model as m

    ckpt_path = _resolve_input(args.checkpoint)
    emb_path = _resolve_input(args.embeddings)
    net = m.load_checkpoint(ckpt_path)
    config = net.config
    table = embedding.load_embeddings(emb_path, config.embed_dim, oov_seed=args.oov_seed)

    text = args.text if args.text is not None else sys.stdin.read()
    doc = corpus.RawDocument(label=0, fields=[text])
    grid = corpus.crop_pad(corpus.preprocess_document(doc), config.doc_len, config.sent_len)
    tensor = embedding.tensorize(grid, table)
    probs = m.predict_proba(net, tensor.data[None])[0]
    payload = {
        "schema_version": 1,
        "label": int(probs.argmax()),
        "probabilities": [float(p) for p in probs],
    }
    _emit(payload, args.pretty, args.out)
    return 0


def cmd_rerun(args: argparse.Namespace) -> int:
    manifest = json.loads(Path(args.manifest).read_text(encoding="utf-8"))
    command = manifest["command"]
    sub = _SUBCOMMANDS.get(command)
    if sub is None:
        raise ValueError(f"manifest names unknown command {command!r}")
    replay = argparse.Namespace(**manifest["args"])
    if args.out_dir is not None and hasattr(replay, "out_dir"):
        replay.out_dir = args.out_dir
    log.info("re-running %r from %s", command, args.manifest)
    return sub(replay)


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="slcnn",
        description="Sentence-level CNN text classification pipeline",
    )
    parser.add_argument("--version", action="version", version=f"slcnn {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common_io(p: argparse.ArgumentParser) -> None:
        p.add_argument("--schema", help="comma-separated text field names for CSV validation")
        p.add_argument("--strict", action="store_true",
                       help="abort on malformed dataset rows instead of skipping them")
        p.add_argument("--pretty", action="store_true", help="indent JSON output")
        p.add_argument("--threads", type=int, default=1,
                       help="BLAS thread count (default 1 for strict determinism)")

    p = sub.add_parser("stats", help="corpus statistics incl. the derived document threshold")
    p.add_argument("--input", required=True, help="dataset CSV/JSONL")
    p.add_argument("--ts", type=int, default=46, help="words-per-sentence threshold")
    p.add_argument("--out", help="also write the JSON to this file")
    common_io(p)
    p.set_defaults(handler=cmd_stats)

    p = sub.add_parser("train", help="train a model and write checkpoint/report/manifest")
    p.add_argument("--input", required=True, help="training dataset CSV/JSONL")
    p.add_argument("--embeddings", required=True, help="pretrained embedding text file")
    p.add_argument("--test", help="optional test dataset evaluated after training")
    p.add_argument("--val", help="optional explicit validation dataset")
    p.add_argument("--variant", choices=["slcnn", "slcnn+v"], default="slcnn")
    p.add_argument("--fc", choices=["small", "large"], default="small")
    p.add_argument("--td", type=int, help="sentences-per-document threshold (default: derived)")
    p.add_argument("--ts", type=int, default=46)
    p.add_argument("--dim", type=int, default=100, help="embedding dimension")
    p.add_argument("--classes", type=int, help="number of classes (default: inferred)")
    p.add_argument("--epochs", type=int, default=50)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--oov-seed", type=int, default=0)
    p.add_argument("--limit", type=int, help="train on a seeded subset of N documents")
    p.add_argument("--test-limit", type=int, help="evaluate on a seeded subset of N test documents")
    p.add_argument("--val-frac", type=float, default=0.05,
                   help="validation fraction when --val is absent (0 disables)")
    p.add_argument("--out-dir", required=True)
    common_io(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="accuracy + confusion matrix of a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--dim", type=int, help="must match the checkpoint when given")
    p.add_argument("--oov-seed", type=int, default=0)
    p.add_argument("--limit", type=int)
    p.add_argument("--out", help="also write the JSON to this file")
    common_io(p)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("predict", help="classify one raw text")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--embeddings", required=True)
    p.add_argument("--text", help="text to classify (default: read stdin)")
    p.add_argument("--oov-seed", type=int, default=0)
    p.add_argument("--out", help="also write the JSON to this file")
    common_io(p)
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser("rerun", help="replay a command from its run manifest")
    p.add_argument("manifest")
    p.add_argument("--out-dir", help="redirect outputs (default: manifest's out dir)")
    p.set_defaults(handler=cmd_rerun)

    return parser


_SUBCOMMANDS = {
    "stats": cmd_stats,
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
}


def main(argv: list[str] | None = None) -> int:
    if argv is None:
        argv = sys.argv[1:]
    _apply_thread_flag(argv)
    logging.basicConfig(
        stream=sys.stderr, level=logging.INFO, format="%(levelname)s %(name)s: %(message)s"
    )
    parser = build_parser()
    args = parser.parse_args(argv)

    from . import corpus, embedding, model as m

    usage_errors = (
        FileNotFoundError,
        corpus.DatasetFormatError,
        corpus.EmptyCorpusError,
        embedding.EmbeddingFormatError,
        m.ConfigError,
        m.CheckpointMismatchError,
        ValueError,
        KeyError,
    )
    try:
        return args.handler(args)
    except usage_errors as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (m.CheckpointError, corpus.GridFileError, m.TrainingDivergedError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
