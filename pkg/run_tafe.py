import argparse
import json
import sys
import uuid
from pathlib import Path

from config.settings import METADATA_DB, THREADS, IMAGE_SIZE
from models.scene import CLASS_NAMES, SceneSpec
from models.tafe_config import RunConfig
from tafe.bench import KERNEL_SIZES, TOPOLOGIES, KernelBench, parse_size
from tafe.errors import NumericError, TafeError, UsageError
from tafe.gradcheck import SCOPES, GradCheckSuite
from tafe.synthdata import gen_dataset
from tafe.tensor import set_threads
from tafe.trainer import Trainer
from utils.logger import RunLogger

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_INTERRUPTED = 130


def _image_size(text: str):
    """'64' or 'HxW'"""
    if text.isdigit():
        return int(text), int(text)
    return parse_size(text)


def build_parser() -> argparse.ArgumentParser:
    """Build the command-line parser"""
    parser = argparse.ArgumentParser(
        description='TAFE - desk-scale surgical segmentation toolkit',
        formatter_class=argparse.ArgumentDefaultsHelpFormatter
    )
    commands = parser.add_subparsers(dest='command', required=True)

    def add_threads(sub):
        sub.add_argument(
            '--threads',
            type=int,
            default=None,
            help=f'Worker threads for conv kernels (TAFE_THREADS, currently {THREADS})'
        )

    gen = commands.add_parser(
        'gen-data', help='Generate a synthetic labeled dataset',
        formatter_class=argparse.ArgumentDefaultsHelpFormatter
    )
    gen.add_argument('--n', type=int, default=8, help='Number of scenes')
    gen.add_argument('--seed', type=int, default=0, help='Seed of the first scene')
    gen.add_argument('--size', type=str, default=str(IMAGE_SIZE), help='Scene size, N or HxW')
    gen.add_argument('--out', type=str, required=True, help='Output dataset directory')
    add_threads(gen)

    train = commands.add_parser(
        'train', help='Train a model on a generated dataset',
        formatter_class=argparse.ArgumentDefaultsHelpFormatter
    )
    train.add_argument('--config', type=str, default=None, help='JSON run config')
    train.add_argument('--data', type=str, default=None, help='Training dataset directory')
    train.add_argument('--out', type=str, default=None, help='Run output directory')
    train.add_argument('--eval-data', type=str, default=None, help='Held-out dataset scored after training')
    train.add_argument(
        '--set', dest='overrides', action='append', default=[], metavar='KEY=VALUE',
        help='Override one config key (value parsed as JSON); repeatable'
    )
    train.add_argument('--metadata-db', type=str, default=METADATA_DB, help='Path to run registry database')
    add_threads(train)

    ev = commands.add_parser(
        'eval', help='Score a checkpoint on a dataset',
        formatter_class=argparse.ArgumentDefaultsHelpFormatter
    )
    ev.add_argument('--checkpoint', type=str, required=True, help='Run directory or checkpoint directory')
    ev.add_argument('--data', type=str, required=True, help='Dataset directory')
    ev.add_argument('--out', type=str, required=True, help='metrics.json path')
    ev.add_argument('--oracle', action='store_true', help='Score ground truth as the prediction (debug)')
    ev.add_argument('--metadata-db', type=str, default=METADATA_DB, help='Path to run registry database')
    add_threads(ev)

    grad = commands.add_parser(
        'gradcheck', help='Finite-difference gradient suites (JSON report on stdout)',
        formatter_class=argparse.ArgumentDefaultsHelpFormatter
    )
    grad.add_argument('--scope', choices=SCOPES, default='ops', help='Which suite to run')
    grad.add_argument('--inject-fault', action='store_true', help='Add an op with a wrong backward rule')
    add_threads(grad)

    bench = commands.add_parser(
        'bench', help='Time dense vs strip-pair convolutions (JSON report on stdout)',
        formatter_class=argparse.ArgumentDefaultsHelpFormatter
    )
    bench.add_argument('--kernel', choices=TOPOLOGIES + ('all',), default='all', help='Topology to time')
    bench.add_argument('--k', type=int, choices=KERNEL_SIZES, default=7, help='Strip length')
    bench.add_argument('--size', type=str, default='64x64', help='Input size HxW')
    bench.add_argument('--reps', type=int, default=5, help='Timed repetitions')
    bench.add_argument('--d', type=int, default=16, help='Channel width')
    add_threads(bench)

    return parser


def _banner(title: str, lines=(), stream=None):
    body = "\n".join(f"  - {line}" for line in lines)
    print(f"""
╔════════════════════════════════════════════════════════════╗
║ {title:<58} ║
╚════════════════════════════════════════════════════════════╝
{body}
""", file=stream or sys.stdout)


def cmd_gen_data(args) -> int:
    height, width = _image_size(args.size)
    _banner("TAFE - synthetic dataset", [
        f"Scenes:  {args.n}",
        f"Seeds:   {args.seed} .. {args.seed + args.n - 1}",
        f"Size:    {height}x{width}",
        f"Output:  {args.out}",
    ])
    logger = RunLogger(str(uuid.uuid4()))
    spec = SceneSpec(height=height, width=width)
    manifest = gen_dataset(args.n, args.seed, args.out, spec=spec, logger=logger)
    _banner("DATASET WRITTEN ✓", [f"{len(manifest['samples'])} image/mask pairs in {args.out}"])
    return EXIT_OK


def cmd_train(args) -> int:
    run = RunConfig.load(args.config, args.overrides, data=args.data, out=args.out, eval_data=args.eval_data)
    run.validate_paths()
    config = run.model
    _banner("TAFE - training", [
        f"Data:        {run.data}",
        f"Output:      {run.out}",
        f"Model:       d={config.d}, M={config.stages}, heads={config.heads}, K={config.classes}",
        f"AFE:         {'on' if config.afe_enabled else 'off'} ({config.afe_blocks})",
        f"Iterations:  {config.iterations} x batch {config.batch_size}, lr {config.learning_rate}",
        f"Seed:        {config.seed}",
    ])

    trainer = Trainer("train", run.to_dict(), run.out, args.metadata_db)
    trainer.train(run)

    metadata = trainer.get_metadata()
    _banner("TRAINING COMPLETED ✓", [
        f"Checkpoint:  {trainer.persister.checkpoint_dir}",
        f"Loss log:    {trainer.out_dir / 'loss_log.json'}",
        f"Final loss:  {metadata.final_loss}",
        f"Run ID:      {metadata.run_id}",
    ])
    return EXIT_OK


def format_metrics_table(metrics) -> str:
    lines = [f"{'class':<12} {'IoU':>8} {'Dice':>8}"]
    for k, (iou, dice) in enumerate(zip(metrics["per_class_iou"], metrics["per_class_dice"])):
        name = CLASS_NAMES[k] if k < len(CLASS_NAMES) else f"class{k}"
        if iou is None:
            lines.append(f"{name:<12} {'absent':>8} {'absent':>8}")
        else:
            lines.append(f"{name:<12} {iou:>8.4f} {dice:>8.4f}")
    lines.append(f"{'mean':<12} {metrics['miou']:>8.4f} {metrics['mdice']:>8.4f}")
    return "\n".join(lines)


def cmd_eval(args) -> int:
    out = Path(args.out)
    if out.exists() and out.is_dir():
        raise UsageError(f"--out must be a file path, {out} is a directory")
    trainer = Trainer("eval", {
        "checkpoint": args.checkpoint, "data": args.data, "out": args.out, "oracle": args.oracle
    }, str(out.parent), args.metadata_db)
    metrics = trainer.evaluate(args.checkpoint, args.data, str(out), oracle=args.oracle)
    print(format_metrics_table(metrics))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    _banner("TAFE - gradient check", [f"Scope: {args.scope}"], stream=sys.stderr)
    logger = RunLogger(str(uuid.uuid4()))
    report = GradCheckSuite(logger).run(args.scope, inject_fault=args.inject_fault)
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK if report["pass"] else EXIT_CHECK_FAILED


def cmd_bench(args) -> int:
    height, width = parse_size(args.size)
    if args.d < 1:
        raise UsageError(f"--d must be >= 1, got {args.d}")
    kernels = TOPOLOGIES if args.kernel == 'all' else (args.kernel,)
    _banner("TAFE - kernel bench", [f"k={args.k}, {height}x{width}, reps={args.reps}"], stream=sys.stderr)
    logger = RunLogger(str(uuid.uuid4()))
    report = KernelBench(logger, d=args.d).run(args.k, height, width, args.reps, kernels)
    print(json.dumps(report, indent=2, sort_keys=True))
    return EXIT_OK if report["pass"] else EXIT_CHECK_FAILED


COMMANDS = {
    'gen-data': cmd_gen_data,
    'train': cmd_train,
    'eval': cmd_eval,
    'gradcheck': cmd_gradcheck,
    'bench': cmd_bench,
}


def main(argv=None) -> int:
    """Main entry point"""
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        if args.threads is not None:
            set_threads(args.threads)
        return COMMANDS[args.command](args)

    except KeyboardInterrupt:
        print("\n\n[!] Run interrupted by user", file=sys.stderr)
        return EXIT_INTERRUPTED

    except NumericError as e:
        print(f"\n\n[ERROR] Numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC

    except TafeError as e:
        print(f"\n\n[ERROR] {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_USAGE

    except Exception as e:
        print(f"\n\n[ERROR] {args.command} failed: {e}", file=sys.stderr)
        import traceback
        traceback.print_exc()
        return EXIT_CHECK_FAILED


if __name__ == "__main__":
    sys.exit(main())
