"""
jigsaw-mil command-line entry point.

Subcommands: synth, train, eval, verify, ot-check, entropy-demo, cam, bench.
Any configuration key can be overridden as ``--key=value`` (or ``--key value``)
after the subcommand; overrides win over the ``--config`` file.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from core import autodiff as ad
from core import info_theory
from core.data_handler import Bag, DataHandler, Dataset
from core.interpret import CamExplainer, cam_localization_auc
from core.jigsaw import SiameseTrainer, TrainReport
from core.nets import ModelConfig, build_model
from core.report_generator import ReportGenerator, run_row
from core.synthetic import SyntheticBagGenerator
from core.verification import run_ot_check, run_verify
from utils.file_operations import FileOperations
from utils.validation import ConfigValidator, RunConfig, model_config_text

logger = logging.getLogger(__name__)

EXIT_OK, EXIT_USAGE = 0, 2


def split_overrides(tokens: Sequence[str]) -> Dict[str, str]:
    """
    Turn leftover ``--key=value`` / ``--key value`` tokens into raw overrides

    A key given without a value is read as ``true``. Hyphens in keys become underscores.
    """
    flags: Dict[str, str] = {}
    i = 0
    while i < len(tokens):
        token = tokens[i]
        if not token.startswith('--') or len(token) == 2:
            raise ValueError(f"Unexpected argument {token!r}; overrides take the form --key=value")
        key, sep, value = token[2:].partition('=')
        if not sep:
            if i + 1 < len(tokens) and not tokens[i + 1].startswith('--'):
                value = tokens[i + 1]
                i += 1
            else:
                value = 'true'
        flags[key.replace('-', '_')] = value
        i += 1
    return flags


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='jigsaw-mil', allow_abbrev=False,
                                     description=__doc__.strip().splitlines()[0])
    parser.add_argument('--verbose', action='store_true', help='debug logging')
    parser.add_argument('--quiet', action='store_true', help='warnings and errors only')
    commands = parser.add_subparsers(dest='command', required=True)

    def command(name: str, help_text: str) -> argparse.ArgumentParser:
        sub = commands.add_parser(name, help=help_text, allow_abbrev=False)
        sub.add_argument('--config', default=None, help='key=value configuration file')
        return sub

    command('synth', 'generate a synthetic MIL dataset and its manifest under --out')
    train = command('train', 'train on a manifest (seeds, lambda sweeps and folds supported)')
    train.add_argument('--html', action='store_true', help='also write an HTML report with figures')
    command('eval', 'evaluate a checkpoint on the test split of a manifest')
    verify = command('verify', 'run every property suite')
    verify.add_argument('--html', action='store_true')
    command('ot-check', 'run the optimal-transport suites only')
    entropy = command('entropy-demo', 'conditional entropies and the Hellman bound of joint tables')
    entropy.add_argument('--table', default=None, help='joint probability table file')
    entropy.add_argument('--random', type=int, default=0, help='also describe N random joints')
    cam = command('cam', 'class activation map of one bag')
    cam.add_argument('--bag', default=None, help='MILB bag file (default: a test bag of --manifest)')
    cam.add_argument('--index', type=int, default=0, help='test-split bag index when --bag is absent')
    cam.add_argument('--class', dest='class_c', type=int, default=0, help='head column to explain')
    cam.add_argument('--png', action='store_true', help='also write a PNG heatmap')
    bench = command('bench', 'time single, stacked and sequential training steps')
    bench.add_argument('--steps', type=int, default=200)
    return parser


# -- shared helpers ----------------------------------------------------------

def _print_table(table: pd.DataFrame) -> None:
    print(table.to_string(index=False))


def _train_test(dataset: Dataset, manifest: str) -> Tuple[List[Bag], List[Bag]]:
    if 'train' not in dataset or 'test' not in dataset:
        raise ValueError(f"Manifest {manifest} needs train and test splits (found {sorted(dataset)})")
    return dataset['train'], dataset['test']


def _input_dim(dataset: Dataset) -> int:
    dims = {bag.d for bags in dataset.values() for bag in bags}
    if len(dims) != 1:
        raise ValueError(f"Bags disagree on the feature dimension: {sorted(dims)}")
    return dims.pop()


def _run_name(config: ModelConfig, fold: Optional[int]) -> str:
    name = f"{config.variant}-{config.pe_mode}-lam{config.lam:g}-seed{config.seed}"
    return name if fold is None else f"{name}-fold{fold}"


def quantize_to_checkpoint_precision(model) -> None:
    """Round parameters through f32 so metrics computed now match a reloaded checkpoint"""
    model.load_state_dict({name: value.astype(np.float32) for name, value in model.state_dict().items()})


def load_checkpointed_model(checkpoint: str):
    """Rebuild a model from ``<checkpoint>.cfg`` and load its weights"""
    cfg_path = Path(f"{checkpoint}.cfg")
    if not cfg_path.exists():
        raise FileNotFoundError(f"Model configuration {cfg_path} not found next to the checkpoint")
    saved = ConfigValidator().parse_config(cfg_path, command='load')
    ad.set_default_dtype(saved.model.precision)
    model = build_model(saved.model)
    model.load_state_dict(FileOperations().load_checkpoint(checkpoint))
    return model


# -- subcommands -------------------------------------------------------------

def cmd_synth(run: RunConfig, args) -> int:
    generator = SyntheticBagGenerator(run.synth)
    splits = generator.generate_splits(run.n_train, run.n_test, survival=run.model.task == 'survival',
                                       folds=run.folds)
    handler = DataHandler()
    manifest = handler.write_dataset(splits, run.out)
    _print_table(handler.describe(splits))
    print(f"manifest: {manifest}")
    return EXIT_OK


def train_one(config: ModelConfig, train_bags: List[Bag], eval_bags: List[Bag], out: Path,
              name: str) -> Tuple[TrainReport, Dict[str, float], str]:
    """Train, quantize, evaluate and persist one model; returns (report, final metrics, checkpoint path)"""
    files = FileOperations(out)
    model = build_model(config)
    trainer = SiameseTrainer(model)
    report = trainer.train(train_bags, eval_bags)
    quantize_to_checkpoint_precision(model)
    metrics = trainer.evaluate(eval_bags)
    report.final_metrics = metrics

    checkpoint = files.save_checkpoint(model.state_dict(), out / 'checkpoints' / f"{name}.jmwt",
                                       config_text=model_config_text(config))
    files.write_jsonl(report.to_records(), out / 'reports' / f"{name}.jsonl")
    files.write_jsonl([metrics], Path(f"{checkpoint}.metrics.jsonl"))
    logger.info(f"{name}: " + ', '.join(f"{k}={v:.4f}" for k, v in metrics.items()))
    return report, metrics, checkpoint


def cmd_train(run: RunConfig, args) -> int:
    dataset = DataHandler().load_manifest(run.manifest)
    base = run.model.with_overrides(input_dim=_input_dim(dataset))
    if run.folds > 0:
        groups = [(k, train, held_out) for k, train, held_out in DataHandler.fold_splits(dataset)]
        if len(groups) < 2:
            raise ValueError(f"folds={run.folds} needs at least two fold-k splits in {run.manifest}")
    else:
        train, test = _train_test(dataset, run.manifest)
        groups = [(None, train, test)]

    out = Path(run.out)
    reporter = ReportGenerator(out)
    lambdas = run.lambdas or [base.lam]
    rows, reports = [], {}
    for lam in lambdas:
        for seed in range(run.seed, run.seed + run.seeds):
            config = base.with_overrides(lam=lam, seed=seed)
            for fold, train_bags, eval_bags in groups:
                name = _run_name(config, fold)
                report, metrics, _ = train_one(config, train_bags, eval_bags, out, name)
                reports[name] = report
                rows.append(run_row(config.to_dict(), metrics, fold))

    runs = pd.DataFrame(rows)
    summary = reporter.summarize(rows)
    reporter.files.save_table(runs, 'runs')
    reporter.export_summary(summary)
    _print_table(summary)

    if args.html:
        figures = []
        for name, report in reports.items():
            figures.append(reporter.plot_training_curves(report, out / 'figures' / f"{name}.png"))
        if len(lambdas) > 1:
            metric = 'c_index' if base.task == 'survival' else 'accuracy'
            figures.append(reporter.plot_lambda_sweep(summary, metric, out / 'figures' / 'lambda_sweep.png'))
        reporter.save_html_report({'title': f"jigsaw-mil train ({base.variant})", 'config': run.values,
                                   'summary': summary, 'runs': runs,
                                   'figures': [str(Path(f).relative_to(out)) for f in figures]},
                                  out / 'report.html')
    return EXIT_OK


def cmd_eval(run: RunConfig, args) -> int:
    model = load_checkpointed_model(run.checkpoint)
    _, test = _train_test(DataHandler().load_manifest(run.manifest), run.manifest)
    metrics = SiameseTrainer(model).evaluate(test)
    files = FileOperations(run.out)
    files.write_jsonl([metrics], Path(run.out) / 'eval_metrics.jsonl')
    print(json.dumps(metrics, sort_keys=True))

    stored = Path(f"{run.checkpoint}.metrics.jsonl")
    if stored.exists():
        previous = files.read_jsonl(stored)[0]
        same = previous.keys() == metrics.keys() and all(
            previous[k] == v or (np.isnan(previous[k]) and np.isnan(v)) for k, v in metrics.items())
        (logger.info if same else logger.warning)(
            f"Metrics {'match' if same else 'differ from'} those stored with the checkpoint")
    return EXIT_OK


def _suite_command(run: RunConfig, args, table: pd.DataFrame, status: int, stem: str) -> int:
    _print_table(table)
    reporter = ReportGenerator(run.out)
    reporter.files.save_table(table, stem)
    if getattr(args, 'html', False):
        reporter.save_html_report({'title': f"jigsaw-mil {stem}", 'checks': table, 'status': status},
                                  Path(run.out) / f"{stem}.html", report_type='verify')
    print('PASS' if status == EXIT_OK else 'FAIL')
    return status


def cmd_verify(run: RunConfig, args) -> int:
    table, status = run_verify(run.seed)
    return _suite_command(run, args, table, status, 'verify')


def cmd_ot_check(run: RunConfig, args) -> int:
    table, status = run_ot_check(run.seed)
    return _suite_command(run, args, table, status, 'ot_check')


def cmd_entropy_demo(run: RunConfig, args) -> int:
    joints = dict(info_theory.builtin_joints())
    if args.table:
        joints[Path(args.table).name] = info_theory.load_joint_table(args.table)
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([run.seed, 0x454E])))
    for i in range(args.random):
        joints[f"random-{i}"] = info_theory.random_joint(rng)
    rows = [{'joint': name, **info_theory.describe_joint(joint)} for name, joint in joints.items()]
    _print_table(pd.DataFrame(rows).round(6))
    return EXIT_OK


def cmd_cam(run: RunConfig, args) -> int:
    model = load_checkpointed_model(run.checkpoint)
    handler = DataHandler()
    if args.bag:
        bag, stem = handler.load_bag(args.bag), f"cam_{Path(args.bag).stem}"
    else:
        if not run.manifest:
            raise ValueError("cam needs --bag or a manifest")
        test = handler.load_manifest(run.manifest).get('test', [])
        if not 0 <= args.index < len(test):
            raise ValueError(f"Test bag index {args.index} outside [0, {len(test)})")
        bag, stem = test[args.index], f"cam_test_{args.index:05d}"
    explainer = CamExplainer(model)
    result = explainer.explain(bag, args.class_c)
    written = explainer.export(result, bag, Path(run.out) / 'cam', stem=stem, png=args.png)
    print(f"logit {result.logit:.6f} from {result.n} instances ({result.pad_count} padded slots)")
    if bag.instance_labels is not None:
        print(f"localization AUC {cam_localization_auc(result, bag.instance_labels):.4f}")
    for kind, path in written.items():
        print(f"{kind}: {path}")
    return EXIT_OK


def cmd_bench(run: RunConfig, args) -> int:
    synth = run.synth
    bag = SyntheticBagGenerator(synth).bag(0)
    config = run.model.with_overrides(input_dim=synth.dim)
    timings = SiameseTrainer(build_model(config)).time_step_modes(bag, steps=args.steps)
    table = pd.DataFrame([{'variant': config.variant, 'instances': bag.n, 'steps': args.steps, **timings}])
    _print_table(table.round(4))
    FileOperations(run.out).save_table(table, 'bench')
    return EXIT_OK


HANDLERS = {
    'synth': cmd_synth, 'train': cmd_train, 'eval': cmd_eval, 'verify': cmd_verify,
    'ot-check': cmd_ot_check, 'entropy-demo': cmd_entropy_demo, 'cam': cmd_cam, 'bench': cmd_bench,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    args, extra = build_parser().parse_known_args(argv)
    level = logging.DEBUG if args.verbose else logging.WARNING if args.quiet else logging.INFO
    logging.basicConfig(level=level, format='%(asctime)s %(levelname)s %(name)s: %(message)s', force=True)

    previous = np.dtype(ad.get_default_dtype()).name
    try:
        run = ConfigValidator().parse_config(args.config, split_overrides(extra), command=args.command)
        ad.set_default_dtype(run.model.precision)
        return HANDLERS[args.command](run, args)
    except (ValueError, FileNotFoundError) as e:
        logger.error(str(e))
        return EXIT_USAGE
    finally:
        ad.set_default_dtype(previous)


if __name__ == '__main__':
    sys.exit(main())
