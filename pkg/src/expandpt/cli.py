"""Command-line entry point.

Every artifact-producing subcommand writes ``<artifact>.manifest.json``
beside its output; ``replay`` re-runs a manifest's argv.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import subprocess
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

from . import __version__
from .container import ContainerError
from .data import DataError, Vocab, build_vocab, read_corpus, write_corpus
from .expand import (ADAPTERS, EndpointConfig, EndpointError, GenerationParams, PromptTemplate,
                     SyntheticExpander, expand_remote, load_expansions, persist_expansions)
from .model import DenseModel, load_checkpoint, save_checkpoint
from .retrieval import (EmbeddingMatrix, encode_corpus, encode_queries, evaluate, evaluate_run,
                        parse_metric, read_qrels, read_run, write_qrels, write_run)
from .train import (PRESETS, FinetuneConfig, TrainConfig, make_plan, read_config_file,
                    read_triples, run_finetune, run_pretraining, write_triples)

log = logging.getLogger("expandpt")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_ENDPOINT = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage errors as exit code 1 instead of 2."""

    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# -- manifests ------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


@dataclass
class RunManifest:
    command: str
    argv: list
    config: dict
    seed: int | None
    inputs: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    version: str = ""
    started_at: str = ""
    finished_at: str = ""

    def add_inputs(self, *paths) -> None:
        for p in paths:
            if p is not None:
                self.inputs[str(p)] = sha256_file(p)

    def add_outputs(self, *paths) -> None:
        for p in paths:
            self.outputs[str(p)] = sha256_file(p)

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text(encoding="utf-8")))


def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def manifest_path(artifact) -> Path:
    a = Path(artifact)
    return a / "manifest.json" if a.is_dir() else a.with_name(a.name + ".manifest.json")


def replay_manifest(path) -> int:
    """Re-execute the argv recorded in a manifest; inputs must still match their digests."""
    m = RunManifest.load(path)
    for p, digest in m.inputs.items():
        if not Path(p).exists() or sha256_file(p) != digest:
            raise DataError(f"input {p} changed since the manifest was written")
    return main(list(m.argv))


# -- helpers --------------------------------------------------------------------

def _load_vocab(args, meta: dict | None = None) -> Vocab:
    if getattr(args, "vocab", None):
        return Vocab.load(args.vocab)
    if meta and "vocab" in meta:
        return Vocab(meta["vocab"])
    raise DataError("no vocabulary: pass --vocab or use a checkpoint that embeds one")


def _load_model(path) -> tuple[DenseModel, dict]:
    model, meta, _ = load_checkpoint(path)
    return model, meta


def resolve_train_config(args) -> TrainConfig:
    """Precedence: flag > config file > preset."""
    cfg = dict(PRESETS[args.preset])
    if args.config:
        cfg.update(read_config_file(args.config))
    flags = {"paradigm": args.paradigm, "total_steps": args.steps, "batch_size": args.batch_size,
             "grad_accum": args.grad_accum, "peak_lr": args.lr, "mask_ratio": args.mask_ratio, "seed": args.seed}
    cfg.update({k: v for k, v in flags.items() if v is not None})
    if args.curriculum is not None:
        cfg["stage1_fraction"] = args.curriculum
    if args.single_stage is not None:
        cfg["stage1_fraction"] = None
        cfg["single_stage_context"] = args.single_stage
    return TrainConfig.from_dict(cfg)


# -- subcommands ----------------------------------------------------------------

def cmd_build_vocab(args, manifest: RunManifest) -> int:
    corpus = read_corpus(args.corpus)
    vocab = build_vocab((p.text for p in corpus), args.max_size, args.min_freq)
    vocab.save(args.out)
    manifest.config = {"max_size": args.max_size, "min_freq": args.min_freq}
    manifest.add_inputs(args.corpus)
    print(f"{len(vocab)} tokens written to {args.out}")
    return EXIT_OK


def cmd_expand(args, manifest: RunManifest) -> int:
    corpus = read_corpus(args.corpus)
    params = GenerationParams(top_p=args.top_p, top_k=args.top_k, temperature=args.temperature,
                              max_new_tokens=args.max_new_tokens, n_queries_requested=args.n)
    manifest.add_inputs(args.corpus)
    manifest.config = {"params": asdict(params), "synthetic": args.synthetic}
    if args.synthetic:
        expander = SyntheticExpander(corpus)
        records = [expander.expand(p, args.n, args.seed) for p in corpus]
    else:
        template = PromptTemplate.load(args.template)
        endpoint = EndpointConfig(url=args.endpoint, token_env=args.token_env, timeout=args.timeout,
                                  retries=args.retries, rate_limit=args.rate_limit, model=args.model,
                                  adapter=args.adapter)
        manifest.config.update(template=args.template, endpoint=asdict(endpoint))
        records, stats = expand_remote(corpus, template, endpoint, params, workers=args.workers)
        log.info("endpoint stats: %s", stats)
    persist_expansions(records, args.out)
    print(f"expansions for {len(records)} passages written to {args.out}")
    return EXIT_OK


def cmd_pretrain(args, manifest: RunManifest) -> int:
    config = resolve_train_config(args)
    corpus = read_corpus(args.corpus)
    vocab = Vocab.load(args.vocab)
    expansions = load_expansions(args.expansions, [p.id for p in corpus]) if args.expansions else None
    plan = make_plan(config)
    if 0 < plan.boundary < config.total_steps:
        log.info("curriculum: stage boundary at step %d of %d (%.0f%%)", plan.boundary, config.total_steps,
                 100.0 * plan.boundary / config.total_steps)
    else:
        log.info("single-stage run on %s", plan.stage1_context if plan.boundary else plan.stage2_context)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest.config = config.to_dict()
    manifest.seed = config.seed
    manifest.add_inputs(args.corpus, args.vocab, args.expansions, args.config, args.resume)
    _, report = run_pretraining(config, corpus, vocab, expansions, out_dir=out, resume_from=args.resume,
                                log_every=args.log_every)
    for name in ("stage1.ckpt", "final.ckpt"):
        if (out / name).exists():
            manifest.add_outputs(out / name)
    print(f"trained {config.total_steps} steps; final losses " +
          " ".join(f"{k}={v[-1]:.4f}" for k, v in report.losses.items()))
    return EXIT_OK


def cmd_finetune(args, manifest: RunManifest) -> int:
    corpus = read_corpus(args.corpus)
    triples = read_triples(args.triples)
    if args.checkpoint:
        model, meta = _load_model(args.checkpoint)
        vocab = _load_vocab(args, meta)
    else:
        vocab = _load_vocab(args)
        model = DenseModel(TrainConfig(**PRESETS[args.preset]).model_config(len(vocab)), seed=args.seed)
    config = FinetuneConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
                            n_negatives=args.negatives, seed=args.seed)
    manifest.config = {**config.to_dict(), "init": args.checkpoint or f"random:{args.preset}"}
    manifest.seed = args.seed
    manifest.add_inputs(args.corpus, args.triples, args.checkpoint, getattr(args, "vocab", None))
    model, report = run_finetune(model, corpus, triples, vocab, config)
    save_checkpoint(args.out, model, {"vocab": vocab.body, "finetune_config": config.to_dict()})
    print(f"fine-tuned {len(report.losses)} steps; epoch losses " + " ".join(f"{v:.4f}" for v in report.epoch_means))
    return EXIT_OK


def cmd_encode(args, manifest: RunManifest) -> int:
    model, meta = _load_model(args.checkpoint)
    vocab = _load_vocab(args, meta)
    texts = read_corpus(args.input)
    fn = encode_queries if args.queries else encode_corpus
    emb = fn(model, texts, vocab, batch_size=args.batch_size, shards=args.shards)
    emb.save(args.out, {"tower": "query" if args.queries else "passage"})
    manifest.config = {"tower": "query" if args.queries else "passage", "batch_size": args.batch_size}
    manifest.add_inputs(args.checkpoint, args.input)
    print(f"{len(emb.ids)} vectors of dimension {emb.vectors.shape[1]} written to {args.out}")
    return EXIT_OK


def cmd_eval(args, manifest: RunManifest) -> int:
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    for m in metrics:
        parse_metric(m)
    qrels = read_qrels(args.qrels)
    if args.run:
        run = read_run(args.run)
        report = evaluate_run(run, qrels, metrics)
        manifest.add_inputs(args.run, args.qrels)
    else:
        if not (args.checkpoint and args.corpus and args.queries):
            raise UsageError("eval needs --run, or --checkpoint with --corpus and --queries")
        model, meta = _load_model(args.checkpoint)
        vocab = _load_vocab(args, meta)
        report, run = evaluate(model, read_corpus(args.corpus), read_corpus(args.queries), qrels, metrics,
                               vocab, k=args.k, checkpoint_id=args.checkpoint)
        manifest.add_inputs(args.checkpoint, args.corpus, args.queries, args.qrels)
        if args.run_out:
            write_run(args.run_out, run)
    manifest.config = {"metrics": metrics, "k": args.k}
    print(report.table())
    if args.out:
        report.write(args.out)
    return EXIT_OK


def cmd_demo(args, manifest: RunManifest) -> int:
    from .experiments import comparison_table, prepare, run_arm

    setup = prepare()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_corpus(out / "corpus.jsonl", setup.bench.corpus)
    write_corpus(out / "queries.jsonl", setup.bench.queries)
    write_qrels(out / "qrels.txt", setup.bench.qrels)
    write_triples(out / "train_triples.jsonl", setup.bench.train_triples)
    setup.vocab.save(out / "vocab.txt")
    seeds = [int(s) for s in args.seeds.split(",")]
    manifest.config = {"steps": args.steps, "seeds": seeds, "arms": args.arms}
    manifest.seed = seeds[0]
    results = []
    for seed in seeds:
        for arm in args.arms.split(","):
            results.append(run_arm(setup, arm, seed, steps=args.steps))
    table = comparison_table(results)
    (out / "comparison.txt").write_text(table + "\n", encoding="utf-8")
    print("zero-shot MRR@10 on the generated topic corpus")
    print(table)
    return EXIT_OK


COMMANDS = {"build-vocab": cmd_build_vocab, "expand": cmd_expand, "pretrain": cmd_pretrain,
            "finetune": cmd_finetune, "encode": cmd_encode, "eval": cmd_eval, "demo": cmd_demo}

# output whose digest goes into the manifest, per subcommand
_ARTIFACT_ARG = {"build-vocab": "out", "expand": "out", "pretrain": "out", "finetune": "out",
                 "encode": "out", "eval": "out", "demo": "out"}


def build_parser() -> _Parser:
    p = _Parser(prog="expandpt", description="Dense-retrieval pre-training with query expansion.")
    p.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, metavar="COMMAND")

    s = sub.add_parser("build-vocab", help="word vocabulary from a corpus")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--max-size", type=int, default=30000)
    s.add_argument("--min-freq", type=int, default=1)

    s = sub.add_parser("expand", help="generate queries for every passage")
    s.add_argument("--corpus", required=True)
    s.add_argument("--out", required=True)
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--endpoint", help="completion endpoint URL")
    src.add_argument("--synthetic", action="store_true", help="offline term-based generator")
    s.add_argument("--template", default="zero-shot", help="built-in template (zero-shot, few-shot) or a path")
    s.add_argument("--n", type=int, default=3)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--top-p", type=float, default=0.95)
    s.add_argument("--top-k", type=int, default=50)
    s.add_argument("--temperature", type=float, default=0.7)
    s.add_argument("--max-new-tokens", type=int, default=128)
    s.add_argument("--token-env", default="EXPANDPT_API_TOKEN", help="environment variable holding the auth token")
    s.add_argument("--timeout", type=float, default=30.0)
    s.add_argument("--retries", type=int, default=2)
    s.add_argument("--rate-limit", type=float, default=None, help="requests per second")
    s.add_argument("--model", default="remote", help="name recorded as the generator")
    s.add_argument("--adapter", choices=sorted(ADAPTERS), default="completion")
    s.add_argument("--workers", type=int, default=4)

    s = sub.add_parser("pretrain", help="bottleneck or contrastive pre-training")
    s.add_argument("--corpus", required=True)
    s.add_argument("--vocab", required=True)
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--expansions")
    s.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    s.add_argument("--config", help="key = value file")
    s.add_argument("--paradigm", choices=["bottleneck", "contrastive"])
    stage = s.add_mutually_exclusive_group()
    stage.add_argument("--curriculum", type=float, metavar="FRACTION", help="share of steps in stage 1")
    stage.add_argument("--single-stage", choices=["coarse", "expanded"])
    s.add_argument("--steps", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--grad-accum", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--mask-ratio", type=float)
    s.add_argument("--seed", type=int)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--log-every", type=int, default=100)

    s = sub.add_parser("finetune", help="supervised fine-tuning on query triples")
    s.add_argument("--corpus", required=True)
    s.add_argument("--triples", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--checkpoint", help="start from this checkpoint (default: random init)")
    s.add_argument("--vocab")
    s.add_argument("--preset", choices=sorted(PRESETS), default="desk", help="model shape for random init")
    s.add_argument("--epochs", type=int, default=3)
    s.add_argument("--batch-size", type=int, default=8)
    s.add_argument("--lr", type=float, default=2e-5)
    s.add_argument("--negatives", type=int, default=4)
    s.add_argument("--seed", type=int, default=42)

    s = sub.add_parser("encode", help="embed passages or queries")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--queries", action="store_true", help="use the query tower")
    s.add_argument("--vocab")
    s.add_argument("--batch-size", type=int, default=64)
    s.add_argument("--shards", type=int, default=1)

    s = sub.add_parser("eval", help="retrieve and score against qrels")
    s.add_argument("--qrels", required=True)
    s.add_argument("--metrics", default="mrr@10,recall@50,recall@1000,ndcg@10")
    s.add_argument("--run", help="score an existing TREC run file")
    s.add_argument("--checkpoint")
    s.add_argument("--corpus")
    s.add_argument("--queries")
    s.add_argument("--vocab")
    s.add_argument("--k", type=int)
    s.add_argument("--run-out", help="write the TREC run here")
    s.add_argument("--out", help="write the JSONL report here")

    s = sub.add_parser("demo", help="baseline vs expanded pre-training on a generated topic corpus")
    s.add_argument("--out", default="demo_out")
    s.add_argument("--steps", type=int, default=2000)
    s.add_argument("--seeds", default="0")
    s.add_argument("--arms", default="baseline,expanded")
    return p


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    if not args.command:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    if not logging.getLogger().handlers:
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                            format="%(asctime)s %(name)s %(levelname)s %(message)s")

    manifest = RunManifest(args.command, argv, {}, getattr(args, "seed", None), version=version_string(),
                           started_at=_now())
    try:
        code = COMMANDS[args.command](args, manifest)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except EndpointError as exc:
        print(f"endpoint error: {exc}", file=sys.stderr)
        return EXIT_ENDPOINT
    except (DataError, ContainerError, UnicodeDecodeError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:  # ConfigError and bad flag values
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    artifact = getattr(args, _ARTIFACT_ARG[args.command], None)
    if artifact and Path(artifact).exists():
        if Path(artifact).is_file() and str(artifact) not in manifest.outputs:
            manifest.add_outputs(artifact)
        manifest.finished_at = _now()
        manifest.write(manifest_path(artifact))
    return code


if __name__ == "__main__":
    sys.exit(main())
