"""Command-line front end for the full pipeline.

Subcommands: synth (build a synthetic collection), train (fit the ranker),
rank (produce a TREC run, optionally with sense suppression), eval
(MRR/NDCG), bias (RaB/ARaB report), senses (per-sense attribute scores), and
sweep (the effectiveness/bias trade-off table).

Exit codes: 0 success, 1 runtime failure, 2 usage or validation error. Every
CSV output ends with a metadata comment recording package version, seed, and
lambda. Verbosity comes from the BACKRANK_LOG environment variable
(debug/info/warning/error).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

from . import __version__
from .backpack import Backpack, BackpackConfig, load_checkpoint, save_checkpoint
from .corpus import (SynthConfig, Vocab, build_eval_set, build_train_examples,
                     generate_synthetic, group_run, load_collection,
                     read_corpus_tsv, read_qrels, read_run,
                     records_from_ranking, write_collection, write_run)
from .errors import BackrankError, DomainError, ParseError
from .metrics import bias_report, mean_metric
from .ranker import SWEEP_COLUMNS, TrainConfig, rank_all, sweep_lambda, train
from .senses import (attribute_scores, build_sense_map, default_pairs_path,
                     load_polarity_lexicon)

log = logging.getLogger("backrank.cli")


@dataclass(frozen=True)
class RunManifest:
    """What a subcommand is about to do: validated before any work starts."""

    subcommand: str
    inputs: dict
    outputs: dict
    seed: int | None = None
    config: str | None = None
    lam: float | None = None
    top_senses: int | None = None
    cutoffs: tuple[int, ...] | None = None

    def validate(self) -> None:
        for name, path in sorted(self.inputs.items()):
            if not Path(path).exists():
                raise FileNotFoundError(f"{name} path does not exist: {path}")
        for _name, path in sorted(self.outputs.items()):
            parent = Path(path).parent
            if parent and not parent.exists():
                parent.mkdir(parents=True, exist_ok=True)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["version"] = __version__
        return d


def _meta_comment(seed, lam) -> str:
    seed_s = "-" if seed is None else str(seed)
    if lam is None:
        lam_s = "-"
    elif isinstance(lam, (list, tuple)):
        lam_s = "|".join(repr(float(v)) for v in lam)
    else:
        lam_s = repr(float(lam))
    return f"# backrank={__version__} seed={seed_s} lambda={lam_s}\n"


def _cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def _write_csv(path, columns, rows, seed=None, lam=None) -> None:
    """Header + rows + one trailing metadata comment; floats at 6 decimals."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(_cell(row[c]) for c in columns) + "\n")
        fh.write(_meta_comment(seed, lam))


def _parse_cutoffs(text: str) -> tuple[int, ...]:
    try:
        cutoffs = tuple(int(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise DomainError(f"bad cutoff list {text!r}") from None
    if not cutoffs or any(c < 1 for c in cutoffs):
        raise DomainError("cutoffs must be positive integers")
    return cutoffs


def _parse_lambdas(text: str) -> tuple[float, ...]:
    try:
        lams = tuple(float(part) for part in text.split(",") if part.strip())
    except ValueError:
        raise DomainError(f"bad lambda list {text!r}") from None
    if not lams:
        raise DomainError("need at least one lambda")
    return lams


def _check_lambda(lam: float) -> float:
    if not 0.0 < lam <= 1.0:
        raise DomainError(f"lambda must be in (0, 1], got {lam}")
    return lam


def _load_model(path):
    model, vocab_tokens, meta = load_checkpoint(path)
    return model, Vocab(vocab_tokens), meta


def _scored_map(model, vocab, pairs_path, lam: float, m: int):
    pairs = load_polarity_lexicon(pairs_path or default_pairs_path(), vocab=vocab)
    scores = attribute_scores(model, pairs, vocab)
    return scores, build_sense_map(scores, lam, m=m)


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    cfg = SynthConfig.from_file(args.config) if args.config else SynthConfig()
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    outdir = Path(args.out)
    manifest = RunManifest(
        subcommand="synth",
        inputs={"config": args.config} if args.config else {},
        outputs={"corpus": str(outdir / "corpus.tsv")},
        seed=cfg.seed,
        config=args.config,
    )
    manifest.validate()
    coll = generate_synthetic(cfg)
    outdir.mkdir(parents=True, exist_ok=True)
    paths = write_collection(coll, outdir)
    cfg.to_file(outdir / "synth.cfg")
    record = manifest.to_dict()
    record["outputs"] = {k: str(v) for k, v in paths.items()}
    record["config_values"] = {
        f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)
    }
    (outdir / "manifest.json").write_text(
        json.dumps(record, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    log.info("wrote %d docs / %d queries under %s",
             len(coll.docs), len(coll.queries), outdir)
    return 0


def cmd_train(args) -> int:
    inputs = {"corpus": args.corpus, "queries": args.queries, "qrels": args.qrels}
    if args.resume:
        inputs["resume"] = args.resume
    RunManifest(subcommand="train", inputs=inputs,
                outputs={"checkpoint": args.out, "loss_csv": args.loss_csv},
                seed=args.seed).validate()

    coll = load_collection(args.corpus, args.queries, args.qrels)
    if args.resume:
        model, vocab, meta = _load_model(args.resume)
        step_base = int(meta.get("steps", 0))
    else:
        vocab = Vocab.build(list(coll.docs.values()) + list(coll.queries.values()))
        cfg = BackpackConfig(
            vocab_size=len(vocab),
            embed_dim=args.embed_dim,
            num_senses=args.senses,
            sense_hidden=args.sense_hidden,
            context_layers=args.layers,
            context_heads=args.heads,
            max_seq_len=args.max_seq_len,
        )
        model = Backpack(cfg, seed=args.seed)
        step_base = 0

    examples = build_train_examples(coll, vocab, num_negatives=args.negatives,
                                    seed=args.seed, candidate_depth=args.depth)
    tcfg = TrainConfig(epochs=args.epochs, learning_rate=args.lr,
                       batch_size=args.batch_size, seed=args.seed)
    model, history = train(examples, tcfg, model)

    meta = {"seed": args.seed, "steps": step_base + len(history),
            "final_loss": history[-1]}
    save_checkpoint(args.out, model, vocab.tokens, meta)
    rows = [{"step": step_base + i + 1, "loss": loss}
            for i, loss in enumerate(history)]
    _write_csv(args.loss_csv, ("step", "loss"), rows, seed=args.seed)
    log.info("trained %d steps, final loss %.6f", len(history), history[-1])
    return 0


def cmd_rank(args) -> int:
    _check_lambda(args.lam)
    inputs = {"checkpoint": args.checkpoint, "corpus": args.corpus,
              "queries": args.queries}
    if args.pairs:
        inputs["pairs"] = args.pairs
    RunManifest(subcommand="rank", inputs=inputs, outputs={"run": args.out},
                lam=args.lam, top_senses=args.top_senses).validate()

    model, vocab, meta = _load_model(args.checkpoint)
    coll = load_collection(args.corpus, args.queries)
    eval_set = build_eval_set(coll, vocab, candidate_depth=args.depth)
    sense_map = None
    if args.lam < 1.0:
        _scores, sense_map = _scored_map(model, vocab, args.pairs,
                                         args.lam, args.top_senses)
    ranked = rank_all(model, eval_set, sense_map)
    tag = args.tag or f"backrank-s{meta.get('seed', 0)}"
    records = []
    for qid in sorted(ranked):
        records.extend(records_from_ranking(ranked[qid], tag=tag))
    write_run(args.out, records)
    log.info("ranked %d queries into %s", len(ranked), args.out)
    return 0


def cmd_eval(args) -> int:
    cutoffs = _parse_cutoffs(args.cutoffs)
    RunManifest(subcommand="eval", inputs={"run": args.run, "qrels": args.qrels},
                outputs={"csv": args.out}, cutoffs=cutoffs).validate()
    grouped = group_run(read_run(args.run))
    if not grouped:
        raise DomainError(f"run file {args.run} holds no records")
    qrels = read_qrels(args.qrels)
    rows = [{"cutoff": c,
             "mrr": mean_metric(grouped, qrels, "mrr", k=c),
             "ndcg": mean_metric(grouped, qrels, "ndcg", k=c)}
            for c in cutoffs]
    _write_csv(args.out, ("cutoff", "mrr", "ndcg"), rows)
    return 0


def cmd_bias(args) -> int:
    cutoffs = _parse_cutoffs(args.cutoffs)
    variants = ("tf", "bool") if args.variant == "both" else (args.variant,)
    RunManifest(subcommand="bias", inputs={"run": args.run, "corpus": args.corpus},
                outputs={"csv": args.out}, cutoffs=cutoffs).validate()
    grouped = group_run(read_run(args.run))
    if not grouped:
        raise DomainError(f"run file {args.run} holds no records")
    doc_tokens = read_corpus_tsv(args.corpus)
    for qid, ids in grouped.items():
        for did in ids:
            if did not in doc_tokens:
                raise DomainError(
                    f"run document {did!r} (query {qid}) missing from corpus")
    report = bias_report(grouped, doc_tokens, cutoffs=cutoffs, variants=variants)
    rows = [{"variant": r["variant"], "cutoff": r["cutoff"],
             "rab": r["mean_rab"], "arab": r["mean_arab"]}
            for r in report.rows()]
    _write_csv(args.out, ("variant", "cutoff", "rab", "arab"), rows)
    return 0


def cmd_senses(args) -> int:
    inputs = {"checkpoint": args.checkpoint}
    if args.pairs:
        inputs["pairs"] = args.pairs
    outputs = {"csv": args.out} if args.out else {}
    RunManifest(subcommand="senses", inputs=inputs, outputs=outputs).validate()
    model, vocab, meta = _load_model(args.checkpoint)
    pairs = load_polarity_lexicon(args.pairs or default_pairs_path(), vocab=vocab)
    scores = attribute_scores(model, pairs, vocab)
    rows = [{"sense": i, "score": s} for i, s in enumerate(scores.s)]
    if args.out:
        _write_csv(args.out, ("sense", "score"), rows,
                   seed=meta.get("seed"))
    else:
        print("sense  score")
        for row in rows:
            print(f"{row['sense']:>5}  {row['score']:+.6f}")
        order = ", ".join(str(i) for i in scores.ranked())
        print(f"most gender-sensitive first: {order}")
    return 0


def cmd_sweep(args) -> int:
    cutoffs = _parse_cutoffs(args.cutoffs)
    lambdas = _parse_lambdas(args.lambdas)
    for lam in lambdas:
        _check_lambda(lam)
    inputs = {"checkpoint": args.checkpoint, "corpus": args.corpus,
              "queries": args.queries, "qrels": args.qrels}
    if args.pairs:
        inputs["pairs"] = args.pairs
    RunManifest(subcommand="sweep", inputs=inputs, outputs={"csv": args.out},
                lam=None, top_senses=args.top_senses, cutoffs=cutoffs).validate()

    model, vocab, meta = _load_model(args.checkpoint)
    coll = load_collection(args.corpus, args.queries, args.qrels)
    eval_set = build_eval_set(coll, vocab, candidate_depth=args.depth)
    pairs = load_polarity_lexicon(args.pairs or default_pairs_path(), vocab=vocab)
    scores = attribute_scores(model, pairs, vocab)
    rows = sweep_lambda(model, eval_set, scores, lambdas,
                        cutoffs=cutoffs, m=args.top_senses)
    _write_csv(args.out, SWEEP_COLUMNS, rows,
               seed=meta.get("seed"), lam=list(lambdas))
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="backrank",
        description="Bias-controllable ranking pipeline on a sense-vector model.")
    parser.add_argument("--version", action="version",
                        version=f"backrank {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth", help="generate a synthetic collection")
    p.add_argument("--config", help="key=value synthesis config file")
    p.add_argument("--seed", type=int, default=None, help="override config seed")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train the ranker on a collection")
    p.add_argument("--corpus", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--loss-csv", default="loss.csv")
    p.add_argument("--resume", help="checkpoint to continue training from")
    p.add_argument("--epochs", type=int, default=4)
    p.add_argument("--lr", type=float, default=1e-5)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--negatives", type=int, default=7)
    p.add_argument("--depth", type=int, default=100,
                   help="first-stage candidate depth")
    p.add_argument("--embed-dim", type=int, default=24)
    p.add_argument("--senses", type=int, default=16)
    p.add_argument("--sense-hidden", type=int, default=4)
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--max-seq-len", type=int, default=32)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rank", help="write a TREC run, optionally debiased")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--out", required=True, help="run file path")
    p.add_argument("--lambda", dest="lam", type=float, default=1.0,
                   help="sense suppression factor in (0, 1]")
    p.add_argument("--top-senses", type=int, default=2,
                   help="how many senses to suppress")
    p.add_argument("--pairs", help="polarity pair lexicon (default built-in)")
    p.add_argument("--depth", type=int, default=100)
    p.add_argument("--tag", help="run tag (default backrank-s<seed>)")
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("eval", help="MRR/NDCG of a run against qrels")
    p.add_argument("--run", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--cutoffs", default="10,20,30,40")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bias", help="RaB/ARaB bias report for a run")
    p.add_argument("--run", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--cutoffs", default="10,20,30,40")
    p.add_argument("--variant", choices=("tf", "bool", "both"), default="both")
    p.set_defaults(func=cmd_bias)

    p = sub.add_parser("senses", help="per-sense gender sensitivity scores")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pairs", help="polarity pair lexicon (default built-in)")
    p.add_argument("--out", help="CSV path (prints a table when omitted)")
    p.set_defaults(func=cmd_senses)

    p = sub.add_parser("sweep", help="lambda sweep: effectiveness vs bias CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--qrels", required=True)
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--lambdas", default="1.0,0.7,0.5")
    p.add_argument("--top-senses", type=int, default=2)
    p.add_argument("--cutoffs", default="10,20,30,40")
    p.add_argument("--pairs", help="polarity pair lexicon (default built-in)")
    p.add_argument("--depth", type=int, default=100)
    p.set_defaults(func=cmd_sweep)

    return parser


def _configure_logging() -> None:
    level = os.environ.get("BACKRANK_LOG", "warning").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _configure_logging()
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (DomainError, ParseError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except BackrankError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # pragma: no cover - last-resort guard
        print(f"internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
