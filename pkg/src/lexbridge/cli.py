"""Command-line pipeline: synth, tokenize, transplant, pretrain, eval-mlm, dpr-train, eval-retrieval.

Each command writes its artifacts plus ``manifest.json`` into ``--out`` and
prints a one-line JSON summary on stdout. Exit codes: 0 ok, 2 usage/config,
3 data/shape, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import filelock
import torch

from . import __version__
from .corpus import SynthPairSpec, generate_synthetic_pair, load_corpus, save_corpus
from .errors import ConfigError, DataError, LexbridgeError
from .evaluation import build_index, embed_queries, evaluate_rankings, masked_word_accuracy, retrieve_topk
from .lexicon import BilingualDictionary, load_dictionary, save_dictionary
from .model import EncoderConfig, init_random, load_model, save_model
from .tokenizer import Vocabulary, train_vocab
from .training import DprTrainConfig, MlmTrainConfig, TrainTrace, dpr_train, load_config, mlm_train
from .transplant import match_vocabulary, save_embeddings, transfer_encoder, transplant_model

log = logging.getLogger("lexbridge")


def sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict[str, Any]
    seed: int | None
    inputs: dict[str, dict[str, str]] = field(default_factory=dict)
    outputs: dict[str, dict[str, str]] = field(default_factory=dict)
    version: str = __version__

    def add_input(self, name: str, path: str | Path) -> None:
        self.inputs[name] = {"path": str(path), "sha256": sha256(path)}

    def add_output(self, name: str, path: str | Path) -> None:
        self.outputs[name] = {"path": Path(path).name, "sha256": sha256(path)}

    def save(self, out_dir: Path) -> None:
        (out_dir / "manifest.json").write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n",
                                               encoding="utf-8")


def _write_pairs_tsv(path: Path, pairs) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for a, b in pairs:
            f.write(f"{a}\t{b}\n")


def cmd_synth(args, out: Path) -> dict:
    if not 0.0 <= args.coverage <= 1.0:
        raise ConfigError(f"--coverage must be in [0, 1], got {args.coverage}")
    spec = SynthPairSpec(alphabet=args.alphabet, n_word_types=args.n_word_types, n_docs=args.n_docs,
                         doc_length=(args.doc_min, args.doc_max), mapping_seed=args.seed,
                         dictionary_coverage=args.coverage)
    pair = generate_synthetic_pair(spec)
    files = {"source": out / "source.jsonl", "target": out / "target.jsonl",
             "dictionary": out / "dictionary.tsv", "gold_mapping": out / "gold_mapping.tsv"}
    save_corpus(files["source"], pair.source)
    save_corpus(files["target"], pair.target)
    save_dictionary(files["dictionary"], BilingualDictionary.from_pairs(pair.dictionary))
    _write_pairs_tsv(files["gold_mapping"], sorted(pair.gold_mapping.items()))
    manifest = RunManifest("synth", {**asdict(spec), "doc_length": list(spec.doc_length),
                                     "word_length": list(spec.word_length)}, args.seed)
    for name, path in files.items():
        manifest.add_output(name, path)
    manifest.save(out)
    return {"n_docs": len(pair.source), "n_dictionary": len(pair.dictionary), "n_word_types": spec.n_word_types}


def cmd_tokenize(args, out: Path) -> dict:
    docs = load_corpus(args.corpus)
    vocab = train_vocab(docs, args.vocab_size)
    path = out / "vocab.txt"
    vocab.save(path)
    manifest = RunManifest("tokenize", {"vocab_size": args.vocab_size}, None)
    manifest.add_input("corpus", args.corpus)
    manifest.add_output("vocab", path)
    manifest.save(out)
    return {"vocab_size": len(vocab)}


def cmd_transplant(args, out: Path) -> dict:
    source = load_model(args.source_ckpt)
    source_vocab = Vocabulary.load(args.source_vocab)
    target_vocab = Vocabulary.load(args.target_vocab)
    if source.config.vocab_size != len(source_vocab):
        raise DataError(f"source checkpoint has {source.config.vocab_size} rows but source vocab has "
                        f"{len(source_vocab)} tokens")
    dictionary = load_dictionary(args.dict) if args.dict else BilingualDictionary()
    plan, report = match_vocabulary(target_vocab, source_vocab, dictionary)
    if args.mode == "matched":
        target = transplant_model(source, plan)
    else:
        target = transfer_encoder(source, len(target_vocab), args.seed)
        report.samples["mode"] = ["encoder-only"]
    files = {"checkpoint": out / "model.ckpt", "embeddings": out / "embeddings.lxb", "report": out / "report.json"}
    save_model(files["checkpoint"], target)
    save_embeddings(files["embeddings"], target.token_embeddings)
    report.save(files["report"])
    print(report.census(), file=sys.stderr)
    manifest = RunManifest("transplant", {"mode": args.mode}, args.seed)
    for name in ("source_ckpt", "source_vocab", "target_vocab", "dict"):
        if getattr(args, name):
            manifest.add_input(name, getattr(args, name))
    for name, path in files.items():
        manifest.add_output(name, path)
    manifest.save(out)
    return {k: v for k, v in report.to_dict().items() if k != "samples"}


def cmd_pretrain(args, out: Path) -> dict:
    vocab = Vocabulary.load(args.vocab)
    docs = load_corpus(args.corpus)
    cfg = load_config(MlmTrainConfig, args.config, epochs=args.epochs, batch_size=args.batch_size,
                      learning_rate=args.lr, mask_rate=args.mask_rate, max_steps=args.max_steps, seed=args.seed)
    if args.init:
        model = load_model(args.init)
        if args.dropout is not None:
            model.config = model.config.replace(dropout=args.dropout)
            for layer in model.layers:
                layer.dropout = args.dropout
    else:
        enc = EncoderConfig(vocab_size=len(vocab), n_layers=args.layers, n_heads=args.heads, d_model=args.d_model,
                            d_ff=args.d_ff, max_seq_len=args.max_seq_len,
                            dropout=0.1 if args.dropout is None else args.dropout)
        model = init_random(enc, cfg.seed)
    model, trace = mlm_train(model, docs, vocab, cfg)
    files = {"checkpoint": out / "model.ckpt", "loss": out / "loss.csv"}
    save_model(files["checkpoint"], model)
    trace.save_csv(files["loss"])
    manifest = RunManifest("pretrain", {"train": asdict(cfg), "model": asdict(model.config)}, cfg.seed)
    manifest.add_input("vocab", args.vocab)
    manifest.add_input("corpus", args.corpus)
    if args.init:
        manifest.add_input("init", args.init)
    for name, path in files.items():
        manifest.add_output(name, path)
    manifest.save(out)
    return {"epochs": len(trace.epoch_losses), "final_loss": trace.epoch_losses[-1] if trace.epoch_losses else None}


def cmd_eval_mlm(args, out: Path) -> dict:
    model = load_model(args.ckpt)
    vocab = Vocabulary.load(args.vocab)
    docs = load_corpus(args.corpus)
    result = masked_word_accuracy(model, docs, vocab)
    files = {"metrics": out / "metrics.json", "records": out / "records.csv"}
    result.save(files["metrics"], files["records"])
    manifest = RunManifest("eval-mlm", {}, None)
    for name in ("ckpt", "vocab", "corpus"):
        manifest.add_input(name, getattr(args, name))
    for name, path in files.items():
        manifest.add_output(name, path)
    manifest.save(out)
    return result.to_dict()


def load_questions(path: str | Path) -> list[dict]:
    rows = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj.get("question"), str) or not isinstance(obj.get("gold_passage_ids"), list):
                raise DataError(f"{path}:{lineno}: need 'question' (string) and 'gold_passage_ids' (list)")
            obj.setdefault("id", f"q{lineno}")
            rows.append(obj)
    return rows


def load_rankings(path: str | Path) -> dict[str, list[str]]:
    rankings = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj.get("id"), str) or not isinstance(obj.get("ranking"), list):
                raise DataError(f"{path}:{lineno}: need 'id' (string) and 'ranking' (list)")
            rankings[obj["id"]] = obj["ranking"]
    return rankings


def cmd_dpr_train(args, out: Path) -> dict:
    vocab = Vocabulary.load(args.vocab)
    passages = {d.id: d.text for d in load_corpus(args.passages)}
    questions = load_questions(args.questions)
    pairs = []
    for q in questions:
        for pid in q["gold_passage_ids"]:
            if pid not in passages:
                raise DataError(f"question {q['id']}: unknown passage id {pid!r}")
            pairs.append((q["question"], passages[pid]))
    cfg = load_config(DprTrainConfig, args.config, steps=args.steps, batch_size=args.batch_size,
                      learning_rate=args.lr, seed=args.seed)
    query = load_model(args.query_init)
    passage = load_model(args.passage_init or args.query_init)
    query, passage, losses = dpr_train(query, passage, pairs, cfg, vocab)
    files = {"query": out / "query.ckpt", "passage": out / "passage.ckpt", "loss": out / "loss.csv"}
    save_model(files["query"], query)
    save_model(files["passage"], passage)
    TrainTrace(steps=[(i, 0, v) for i, v in enumerate(losses)]).save_csv(files["loss"])
    manifest = RunManifest("dpr-train", asdict(cfg), cfg.seed)
    for name in ("vocab", "passages", "questions", "query_init", "passage_init"):
        if getattr(args, name):
            manifest.add_input(name, getattr(args, name))
    for name, path in files.items():
        manifest.add_output(name, path)
    manifest.save(out)
    return {"steps": len(losses), "final_loss": losses[-1] if losses else None}


def cmd_eval_retrieval(args, out: Path) -> dict:
    questions = load_questions(args.questions)
    gold = [set(q["gold_passage_ids"]) for q in questions]
    manifest = RunManifest("eval-retrieval", {"k": args.k}, None)
    manifest.add_input("questions", args.questions)
    if args.rankings:
        ranked_by_id = load_rankings(args.rankings)
        missing = [q["id"] for q in questions if q["id"] not in ranked_by_id]
        if missing:
            raise DataError(f"rankings missing for questions {missing[:5]}")
        ranked = [ranked_by_id[q["id"]] for q in questions]
        manifest.add_input("rankings", args.rankings)
    else:
        if not (args.query_ckpt and args.vocab and args.passages):
            raise ConfigError("--query-ckpt, --vocab and --passages are required without --rankings")
        vocab = Vocabulary.load(args.vocab)
        query = load_model(args.query_ckpt)
        passage = load_model(args.passage_ckpt or args.query_ckpt)
        docs = load_corpus(args.passages)
        index = build_index(passage, vocab, docs)
        depth = min(len(docs), max(args.k, 100))
        ranked = [retrieve_topk(v, index, depth) for v in embed_queries(query, vocab, [q["question"] for q in questions])]
        for name in ("vocab", "query_ckpt", "passage_ckpt", "passages"):
            if getattr(args, name):
                manifest.add_input(name, getattr(args, name))
    results = evaluate_rankings(ranked, gold, args.k, [q["id"] for q in questions])
    metrics = {name: r.value for name, r in results.items()}
    files = {"metrics": out / "metrics.json", "records": out / "records.csv"}
    files["metrics"].write_text(json.dumps(metrics, sort_keys=True) + "\n", encoding="utf-8")
    next(iter(results.values())).save_records(files["records"])
    for name, path in files.items():
        manifest.add_output(name, path)
    manifest.save(out)
    return metrics


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lexbridge", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--out", required=True, type=Path, help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.set_defaults(func=func)
        return p

    p = command("synth", cmd_synth, "generate a synthetic source/target language pair")
    p.add_argument("--n-word-types", type=int, default=300)
    p.add_argument("--n-docs", type=int, default=400)
    p.add_argument("--doc-min", type=int, default=8)
    p.add_argument("--doc-max", type=int, default=24)
    p.add_argument("--coverage", type=float, default=0.6)
    p.add_argument("--alphabet", default=SynthPairSpec.alphabet)

    p = command("tokenize", cmd_tokenize, "train a subword vocabulary")
    p.add_argument("--corpus", required=True)
    p.add_argument("--vocab-size", type=int, default=8000)

    p = command("transplant", cmd_transplant, "match vocabularies and transplant a source model")
    p.add_argument("--source-ckpt", required=True)
    p.add_argument("--source-vocab", required=True)
    p.add_argument("--target-vocab", required=True)
    p.add_argument("--dict", help="bilingual dictionary TSV (omit for an empty dictionary)")
    p.add_argument("--mode", choices=("matched", "encoder-only"), default="matched",
                   help="encoder-only keeps random target embeddings")

    p = command("pretrain", cmd_pretrain, "masked-LM training")
    p.add_argument("--vocab", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--init", help="checkpoint to start from (default: random init)")
    p.add_argument("--config", help="JSON training config")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--mask-rate", type=float)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--d-model", type=int, default=128)
    p.add_argument("--d-ff", type=int, default=512)
    p.add_argument("--max-seq-len", type=int, default=128)
    p.add_argument("--dropout", type=float)

    p = command("eval-mlm", cmd_eval_mlm, "whole-word masked prediction accuracy")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--corpus", required=True)

    p = command("dpr-train", cmd_dpr_train, "dual-encoder fine-tuning with in-batch negatives")
    p.add_argument("--vocab", required=True)
    p.add_argument("--passages", required=True)
    p.add_argument("--questions", required=True)
    p.add_argument("--query-init", required=True)
    p.add_argument("--passage-init")
    p.add_argument("--config", help="JSON training config")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)

    p = command("eval-retrieval", cmd_eval_retrieval, "Accuracy@k and NDCG@k")
    p.add_argument("--questions", required=True)
    p.add_argument("--k", type=int, default=10)
    p.add_argument("--rankings", help="JSON-lines {id, ranking}; skips the encoders")
    p.add_argument("--vocab")
    p.add_argument("--passages")
    p.add_argument("--query-ckpt")
    p.add_argument("--passage-ckpt")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    threads = os.environ.get("LEXBRIDGE_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    out: Path = args.out
    out.mkdir(parents=True, exist_ok=True)
    lock = filelock.FileLock(str(out / ".lock"), timeout=0)
    try:
        with lock:
            log.info("running %s -> %s", args.command, out)
            summary = args.func(args, out)
    except filelock.Timeout:
        print(f"error: output directory {out} is in use by another run", file=sys.stderr)
        return ConfigError.exit_code
    except LexbridgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    print(json.dumps({"command": args.command, **summary}, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
