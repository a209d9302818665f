"""
distill-lab command line.

Subcommands map onto handler methods that return ``{'success': ...}``
dictionaries. Exit codes: 0 on success, 1 for configuration or usage
errors, 2 for runtime failures.
"""

import argparse
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

from .config import (ExperimentConfig, list_presets, load_config, load_ntk_settings, read_json)
from .datasets import CapacityGapBenchmark, gen_synthetic, save_csv
from .errors import ConfigError, DistillLabError
from .experiment import ExperimentRunner, default_jobs, seed_dir
from .ntk import NtkSettings, run_ntk_analysis
from .reports import write_json, write_metadata
from .trainers import Method

logger = logging.getLogger('distill-lab.cli')

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
LOG_FILE = 'distill-lab.log'
DEFAULT_OUT = 'runs'


class _Parser(argparse.ArgumentParser):
    """Argument parser that reports usage errors with exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _seed_list(text: str) -> List[int]:
    try:
        seeds = [int(part) for part in text.split(',') if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(
            f"seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed is required")
    return seeds


def _build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog='distill-lab',
                     description='Progressive knowledge distillation experiments')
    common = _Parser(add_help=False)
    common.add_argument('--config', help='Experiment config (JSON)')
    common.add_argument('--out', help='Output directory (default: the config output_dir)')
    common.add_argument('--seeds', type=_seed_list, help='Comma-separated seeds, e.g. 1,2,3')
    common.add_argument('--jobs', type=int, default=default_jobs(),
                        help='Parallel worker processes')
    common.add_argument('--preset', choices=list_presets(), help='Hyper-parameter preset')
    common.add_argument('--log-level', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'],
                        default='INFO', help='Logging level')
    common.add_argument('--progress', action='store_true', help='Show progress bars')

    commands = parser.add_subparsers(dest='command', metavar='COMMAND')
    commands.required = True

    gen = commands.add_parser('gen-data', parents=[common],
                              help='Generate the synthetic benchmark as CSV')
    gen.add_argument('--seed', type=int, help='Data seed (default: config seed or 0)')

    commands.add_parser('train-teacher', parents=[common],
                        help='Train one teacher per seed and keep every epoch checkpoint')

    distill = commands.add_parser('distill', parents=[common],
                                  help='Distill students with selected methods')
    distill.add_argument('--method', action='append', choices=[m.value for m in Method],
                         help='Method to run (repeatable; default: the config methods)')
    distill.add_argument('--teacher-dir', help='Reuse teachers written by train-teacher')

    commands.add_parser('checkpoint-search', parents=[common],
                        help='Vanilla KD from every teacher checkpoint')

    ntk = commands.add_parser('ntk-analyze', parents=[common],
                              help='Empirical NTK decay-rate analysis')
    ntk.add_argument('--output-unit', type=int, help='Logit to analyse for multi-output heads')

    commands.add_parser('compare', parents=[common],
                        help='Run every configured method and summarize')
    commands.add_parser('ablate-temperature', parents=[common],
                        help='Pro-KD with and without the temperature')
    return parser


def _resolve_out(args: argparse.Namespace) -> Path:
    if args.out:
        return Path(args.out)
    if args.config:
        try:
            return Path(read_json(args.config).get('output_dir', DEFAULT_OUT))
        except ConfigError:
            pass
    return Path(DEFAULT_OUT)


def _configure_logging(level: str, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    logging.basicConfig(
        level=getattr(logging, level),
        format=LOG_FORMAT,
        handlers=[
            logging.FileHandler(out_dir / LOG_FILE),
            logging.StreamHandler(sys.stdout)
        ],
        force=True
    )


class DistillLabCli:
    """Dispatches parsed arguments to command handlers."""

    def __init__(self, args: argparse.Namespace, out_dir: Path):
        self.args = args
        self.out_dir = out_dir
        self.command_handlers: Dict[str, Callable[[], Dict[str, Any]]] = {
            'gen-data': self._handle_gen_data,
            'train-teacher': self._handle_train_teacher,
            'distill': self._handle_distill,
            'checkpoint-search': self._handle_checkpoint_search,
            'ntk-analyze': self._handle_ntk_analyze,
            'compare': self._handle_compare,
            'ablate-temperature': self._handle_ablate_temperature,
        }

    def process_command(self, command: str) -> Dict[str, Any]:
        """Run ``command``; errors become ``success: False`` results with an exit code."""
        handler = self.command_handlers.get(command)
        if handler is None:
            return {'success': False, 'error': f'Unknown command: {command}',
                    'exit_code': EXIT_CONFIG}
        try:
            return handler()
        except ConfigError as e:
            logger.error("Configuration error: %s", e)
            return {'success': False, 'error': str(e), 'exit_code': EXIT_CONFIG}
        except (DistillLabError, ValueError, OSError) as e:
            logger.error("%s failed: %s", command, e)
            return {'success': False, 'error': str(e), 'exit_code': EXIT_RUNTIME}

    # Helpers

    def _config(self) -> ExperimentConfig:
        if not self.args.config:
            raise ConfigError(f"{self.args.command} requires --config")
        config = load_config(self.args.config, self.args.preset)
        return config.with_overrides(seeds=self.args.seeds, output_dir=str(self.out_dir))

    def _runner(self, config: ExperimentConfig,
                teacher_dir: Optional[str] = None) -> ExperimentRunner:
        return ExperimentRunner(config, self.out_dir, self.args.jobs, self.args.progress,
                                base_dir=Path(self.args.config).parent, teacher_dir=teacher_dir)

    # Handlers

    def _handle_gen_data(self) -> Dict[str, Any]:
        synthetic: Dict[str, Any] = {}
        if self.args.config:
            document = read_json(self.args.config)
            synthetic = dict(document.get('dataset', {}).get('synthetic', {}))
            if not synthetic:
                raise ConfigError("gen-data needs a synthetic dataset section")
        seed = self.args.seed
        if seed is None:
            raw = synthetic.get('seed', self.args.seeds[0] if self.args.seeds else 0)
            if isinstance(raw, bool) or not isinstance(raw, int):
                raise ConfigError(f"synthetic dataset seed must be an integer, got {raw!r}")
            seed = raw
        synthetic.pop('seed', None)
        spec = CapacityGapBenchmark.from_dict(synthetic)
        dataset = gen_synthetic(spec, seed)
        path = save_csv(dataset, self.out_dir / 'dataset.csv')
        write_json(dict(spec.to_dict(), seed=seed), self.out_dir / 'dataset.json')
        return {'success': True, 'path': str(path), 'splits': dataset.split_sizes()}

    def _handle_train_teacher(self) -> Dict[str, Any]:
        teachers = self._runner(self._config()).train_teachers()
        return {'success': True,
                'teachers': {seed: len(ckpts) for seed, ckpts in teachers.items()}}

    def _handle_distill(self) -> Dict[str, Any]:
        config = self._config()
        if self.args.method:
            config = config.with_overrides(methods=self.args.method)
        summary = self._runner(config, self.args.teacher_dir).run()
        return {'success': True, 'failed_cells': len(summary.failed_cells)}

    def _handle_compare(self) -> Dict[str, Any]:
        summary = self._runner(self._config()).run()
        return {'success': True, 'failed_cells': len(summary.failed_cells)}

    def _handle_checkpoint_search(self) -> Dict[str, Any]:
        reports = self._runner(self._config()).checkpoint_search()
        return {'success': True,
                'best_student_differs': {r.seed: r.best_student_differs for r in reports}}

    def _handle_ablate_temperature(self) -> Dict[str, Any]:
        result = self._runner(self._config()).ablate_temperature()
        return {'success': True, 'mean_difference': result['mean_difference']}

    def _handle_ntk_analyze(self) -> Dict[str, Any]:
        settings = load_ntk_settings(self.args.config) if self.args.config else NtkSettings()
        if self.args.output_unit is not None:
            settings = NtkSettings.from_dict(dict(settings.to_dict(),
                                                  output_unit=self.args.output_unit))
        seeds = self.args.seeds or [settings.seed]
        results = {}
        for seed in seeds:
            seeded = NtkSettings.from_dict(dict(settings.to_dict(), seed=seed))
            report = run_ntk_analysis(seeded)
            target = self.out_dir if len(seeds) == 1 else seed_dir(self.out_dir, seed)
            write_json(report.to_dict(), target / 'ntk_report.json')
            results[seed] = {'gram_drift': report.drift,
                             'n_inversions': report.ordering.n_inversions,
                             'wide_net_ok': report.wide_net_ok,
                             'warnings': report.warnings}
        return {'success': True, 'reports': results}


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point of the ``distill-lab`` console script."""
    started = datetime.now(timezone.utc)
    parser = _build_parser()
    args = parser.parse_args(argv)
    out_dir = _resolve_out(args)
    _configure_logging(args.log_level, out_dir)
    logger.info("distill-lab %s (out: %s)", args.command, out_dir)

    cli = DistillLabCli(args, out_dir)
    result = cli.process_command(args.command)
    write_metadata(out_dir, args.command, started,
                   {'argv': list(argv) if argv is not None else sys.argv[1:],
                    'success': result['success']})
    if not result['success']:
        print(f"Error: {result['error']}", file=sys.stderr)
        return result.get('exit_code', EXIT_RUNTIME)
    logger.info("%s finished successfully", args.command)
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
