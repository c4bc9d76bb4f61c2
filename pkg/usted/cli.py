"""
`usted` command line.

    usted synth      render synthetic corpora, manifests and vocabularies
    usted tokenize   train a vocabulary on a text file
    usted pretrain   train the standalone speech model
    usted train      joint multitask training
    usted eval       decode and score a checkpoint
    usted gradcheck  finite-difference check of the full model
    usted sweep      one training run per value of an ablation axis

Exit codes: 0 on success, 1 on a failed command, 2 on bad usage.
"""

import argparse
import logging
import sys
from typing import Dict, List, Optional, Sequence

from usted import __version__
from usted.experiment import (
    METRICS,
    SWEEP_AXES,
    ExperimentConfig,
    UsageError,
    evaluate,
    load_experiment,
    parse_loss_weight,
    run_pretrain,
    run_train,
    sweep,
    synthesize,
    tokenize,
    toy_gradcheck,
    with_overrides,
)
from usted.tokenizer import Scheme

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
GRADCHECK_TOLERANCE = 1e-3


def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment JSON; flags override its values")
    p.add_argument("--data-dir", help="corpus directory (manifests, features, vocabularies)")
    p.add_argument("--output-dir", help="parent directory of run directories")
    p.add_argument("--seed", type=int, help="training seed (falls back to $USTED_SEED)")
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--workers", type=int, help="batch prefetch threads, 0 to sample inline")
    p.add_argument("--shared-layers", type=int, metavar="K", help="encoder layers shared by all tasks")
    p.add_argument("--mask-rate", type=float, metavar="R", help="word masking rate of corrupted tasks")
    p.add_argument("--loss-weight", action="append", default=[], metavar="TASK=W",
                   help="per-task loss weight, repeatable")
    p.add_argument("--no-task-embedding", action="store_true", help="drop the task embedding")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="usted", description="Multitask speech and text encoder-decoder experiments")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    verbosity.add_argument("-q", "--quiet", action="store_true", help="warnings and errors only")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="render synthetic corpora, manifests and vocabularies")
    p.add_argument("--config")
    p.add_argument("--data-dir")
    p.add_argument("--synth-seed", type=int)
    p.add_argument("--asr-utterances", type=int)
    p.add_argument("--text-sentences", type=int)
    p.add_argument("--vocab-size", type=int)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("tokenize", help="train a vocabulary on a text file")
    p.add_argument("--corpus", required=True, help="text file, one sentence per line")
    p.add_argument("--size", type=int, default=400)
    p.add_argument("--scheme", choices=[s.value for s in Scheme], default=Scheme.BPE.value)
    p.add_argument("--output", required=True)
    p.set_defaults(handler=cmd_tokenize)

    p = sub.add_parser("pretrain", help="train the standalone speech model")
    _add_experiment_flags(p)
    p.add_argument("--run-name", default="pretrain")
    p.set_defaults(handler=cmd_pretrain)

    p = sub.add_parser("train", help="joint multitask training")
    _add_experiment_flags(p)
    p.add_argument("--run-name", default="train")
    p.add_argument("--init", help="pretrained speech checkpoint to transfer from")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="decode and score a checkpoint")
    p.add_argument("--config", help="experiment JSON for checkpoints that do not carry one")
    p.add_argument("--checkpoint")
    p.add_argument("--manifest", required=True)
    p.add_argument("--metric", choices=METRICS, default="wer")
    p.add_argument("--beam", type=int, default=1)
    p.add_argument("--task", help="score only this task")
    p.add_argument("--hypotheses", help="score this hypothesis file instead of decoding")
    p.add_argument("--output", help="directory for hypotheses and scores.csv")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser(
        "gradcheck",
        help="finite-difference check of every parameter tensor of a toy model",
        description="Central differences against backward on every parameter tensor of a two-task toy model, "
        "at the --coords coordinates of largest gradient per tensor (0 checks every coordinate).",
    )
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eps", type=float, default=1e-5)
    p.add_argument("--coords", type=int, default=4, help="largest-gradient coordinates checked per tensor; 0 for all")
    p.set_defaults(handler=cmd_gradcheck)

    p = sub.add_parser("sweep", help="one training run per value of an ablation axis")
    _add_experiment_flags(p)
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", nargs="+", help="axis values; defaults depend on the axis")
    p.add_argument("--task", help="task whose loss weight is swept")
    p.add_argument("--init", help="pretrained speech checkpoint for every point")
    p.set_defaults(handler=cmd_sweep)
    return parser


def _loss_weights(items: Sequence[str]) -> Dict[str, float]:
    return dict(parse_loss_weight(item) for item in items)


def experiment_from_args(args: argparse.Namespace) -> ExperimentConfig:
    """Defaults < --config file < flags."""
    exp = load_experiment(args.config)
    return with_overrides(
        exp,
        shared_layers=args.shared_layers,
        mask_rate=args.mask_rate,
        loss_weights=_loss_weights(args.loss_weight),
        task_embedding=False if args.no_task_embedding else None,
        steps=args.steps,
        batch_size=args.batch_size,
        seed=args.seed,
        workers=args.workers,
        output_dir=args.output_dir,
        data_dir=args.data_dir,
    )


# ---------------------------------------------------------------------------- #
#                                   Commands                                   #
# ---------------------------------------------------------------------------- #
def cmd_synth(args: argparse.Namespace) -> int:
    exp = with_overrides(load_experiment(args.config), data_dir=args.data_dir)
    changes = {k: v for k, v in (("seed", args.synth_seed), ("asr_utterances", args.asr_utterances),
                                 ("text_sentences", args.text_sentences), ("vocab_size", args.vocab_size))
               if v is not None}
    if changes:
        try:
            exp = exp.replace(synth=exp.synth.replace(**changes))
        except ValueError as e:
            raise UsageError(str(e)) from e
    summary = synthesize(exp)
    print(f"{summary.train_rows} train rows, {summary.dev_rows} dev rows in {exp.corpus.data_dir}")
    for name, size in summary.vocabularies.items():
        print(f"vocabulary {name}: {size} entries")
    return 0


def cmd_tokenize(args: argparse.Namespace) -> int:
    vocab = tokenize(args.corpus, args.size, args.scheme, args.output)
    print(f"{args.output}: {len(vocab)} entries ({vocab.scheme.value})")
    return 0


def cmd_pretrain(args: argparse.Namespace) -> int:
    exp = experiment_from_args(args)
    result = run_pretrain(exp, args.run_name)
    print(f"pretrained {exp.speech_task} for {result.checkpoint.step} steps")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    exp = experiment_from_args(args)
    result = run_train(exp, args.run_name, args.init)
    rates = result.checkpoint.metadata.get("dev_error_rates") or []
    for name, rate in zip(exp.registry.names, rates):
        print(f"{name}\tter\t{rate:.4f}")
    return 0


def cmd_eval(args: argparse.Namespace) -> int:
    if args.hypotheses is None and args.checkpoint is None:
        raise UsageError("eval needs --checkpoint unless --hypotheses is given")
    if args.beam < 1:
        raise UsageError(f"--beam {args.beam} must be at least 1")
    fallback = load_experiment(args.config) if args.config else None
    scores = evaluate(
        args.checkpoint, args.manifest, args.metric, args.beam, args.output, args.hypotheses,
        args.task, args.workers, fallback,
    )
    for s in scores:
        print(f"{s.dataset}\t{s.metric}\t{s.value:.4f}")
    return 0


def cmd_gradcheck(args: argparse.Namespace) -> int:
    report = toy_gradcheck(args.seed, args.eps, args.coords)
    worst = max(report.per_parameter, key=report.per_parameter.get)
    print(f"max relative error {report.max_relative_error:.3e} ({worst}) over {report.coordinates} coordinates")
    return 0 if report.max_relative_error < GRADCHECK_TOLERANCE else 1


def cmd_sweep(args: argparse.Namespace) -> int:
    exp = experiment_from_args(args)
    summary = sweep(exp, args.axis, args.values, args.init, args.task)
    print(f"sweep summary: {summary}")
    return 0


# ---------------------------------------------------------------------------- #
#                                  Entry point                                 #
# ---------------------------------------------------------------------------- #
def configure_logging(verbose: bool = False, quiet: bool = False) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format=LOG_FORMAT)


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose, args.quiet)
    try:
        return args.handler(args)
    except UsageError as e:
        logger.error("usage: %s", e)
        return 2
    except (ValueError, OSError) as e:
        logger.error("%s failed: %s", args.command, e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
