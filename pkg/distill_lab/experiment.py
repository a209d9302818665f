"""
Experiment runner: teachers per seed, (method, seed) cells, summaries.

Each seed trains one teacher whose checkpoints are shared by every method of
that seed. Cells are isolated: a failing cell is logged and recorded as
``{'success': False, 'error': ...}`` while the others carry on. Every cell
writes only below ``<out>/seed_<seed>/<method>/``.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import psutil
from tqdm import tqdm

from .config import ExperimentConfig, save_config
from .datasets import Dataset, load_dataset
from .errors import DistillLabError, PlanError
from .nn import Checkpoint, MlpSpec, load_checkpoint
from .reports import (RunReport, SearchReport, read_run_report, write_csv, write_json,
                      write_run_report, write_search_report)
from .trainers import (METHOD_LABELS, Method, checkpoint_search, run_method, train_teacher,
                       train_student_prokd)

logger = logging.getLogger('distill-lab.experiment')

PathLike = Union[str, Path]

CELL_ERRORS = (DistillLabError, ValueError, ArithmeticError, OSError)

SUMMARY_CSV_COLUMNS = ('method', 'label', 'n_runs', 'n_failed', 'mean_test_accuracy',
                       'std_test_accuracy', 'mean_dev_accuracy', 'std_dev_accuracy')
PAIRWISE_CSV_COLUMNS = ('baseline', 'label', 'n_pairs', 'mean_difference', 'std_difference',
                        'wins')
CELLS_CSV_COLUMNS = ('method', 'seed', 'success', 'final_dev_accuracy', 'final_test_accuracy',
                     'error')
ABLATION_CSV_COLUMNS = ('seed', 'with_temperature', 'without_temperature', 'difference')

ABLATION_RUN = 'pro_kd_no_temperature'


def default_jobs() -> int:
    """Physical core count, falling back to 1."""
    return psutil.cpu_count(logical=False) or 1


def _std(values: Sequence[float]) -> float:
    return float(np.std(values, ddof=1)) if len(values) > 1 else 0.0


def _mean(values: Sequence[float]) -> Optional[float]:
    return float(np.mean(values)) if values else None


def seed_dir(out_dir: Path, seed: int) -> Path:
    return out_dir / f'seed_{seed}'


@dataclass(frozen=True)
class MethodSummary:
    method: str
    n_runs: int
    n_failed: int
    mean_test_accuracy: Optional[float]
    std_test_accuracy: float
    mean_dev_accuracy: Optional[float]
    std_dev_accuracy: float

    @property
    def label(self) -> str:
        return METHOD_LABELS.get(Method(self.method), self.method)


@dataclass(frozen=True)
class PairwiseRow:
    """Pro-KD minus one baseline, paired by seed."""
    baseline: str
    n_pairs: int
    mean_difference: Optional[float]
    std_difference: float
    wins: int


@dataclass
class ExperimentSummary:
    rows: List[MethodSummary]
    pairwise: List[PairwiseRow]
    cells: List[Dict[str, Any]] = field(default_factory=list)

    def row(self, method: str) -> MethodSummary:
        for row in self.rows:
            if row.method == method:
                return row
        raise KeyError(method)

    @property
    def failed_cells(self) -> List[Dict[str, Any]]:
        return [cell for cell in self.cells if not cell['success']]

    def to_dict(self) -> Dict[str, Any]:
        return {
            'methods': [
                {'method': r.method, 'label': r.label, 'n_runs': r.n_runs, 'n_failed': r.n_failed,
                 'mean_test_accuracy': r.mean_test_accuracy,
                 'std_test_accuracy': r.std_test_accuracy,
                 'mean_dev_accuracy': r.mean_dev_accuracy,
                 'std_dev_accuracy': r.std_dev_accuracy}
                for r in self.rows
            ],
            'pairwise': [
                {'baseline': p.baseline, 'n_pairs': p.n_pairs,
                 'mean_difference': p.mean_difference, 'std_difference': p.std_difference,
                 'wins': p.wins}
                for p in self.pairwise
            ],
            'cells': list(self.cells),
        }


def _cell_record(method: str, seed: int, result: Dict[str, Any]) -> Dict[str, Any]:
    report = result.get('report')
    return {
        'method': method,
        'seed': seed,
        'success': bool(result['success']),
        'final_dev_accuracy': report.final_dev_accuracy if report is not None else None,
        'final_test_accuracy': report.final_test_accuracy if report is not None else None,
        'error': result.get('error'),
    }


def summarize(results: Iterable[Dict[str, Any]], methods: Sequence[str]) -> ExperimentSummary:
    """Per-method mean/std of final accuracies and Pro-KD vs baseline differences.

    ``results`` are cell dictionaries with ``method``, ``seed``, ``success``
    and, for successful cells, ``report``.
    """
    results = sorted(results, key=lambda r: (list(methods).index(r['method']), r['seed']))
    by_method: Dict[str, Dict[int, RunReport]] = {m: {} for m in methods}
    failed: Dict[str, int] = {m: 0 for m in methods}
    cells = []
    for result in results:
        cells.append(_cell_record(result['method'], result['seed'], result))
        if result['success']:
            by_method[result['method']][result['seed']] = result['report']
        else:
            failed[result['method']] += 1

    rows = []
    for method in methods:
        reports = [by_method[method][s] for s in sorted(by_method[method])]
        tests = [r.final_test_accuracy for r in reports]
        devs = [r.final_dev_accuracy for r in reports]
        rows.append(MethodSummary(method, len(reports), failed[method], _mean(tests), _std(tests),
                                  _mean(devs), _std(devs)))

    pairwise = []
    reference = Method.PRO_KD.value
    if reference in by_method:
        for baseline in methods:
            if baseline == reference:
                continue
            seeds = sorted(set(by_method[reference]) & set(by_method[baseline]))
            diffs = [by_method[reference][s].final_test_accuracy
                     - by_method[baseline][s].final_test_accuracy for s in seeds]
            pairwise.append(PairwiseRow(baseline, len(seeds), _mean(diffs), _std(diffs),
                                        sum(1 for d in diffs if d > 0)))
    return ExperimentSummary(rows, pairwise, cells)


def write_summary(summary: ExperimentSummary, out_dir: PathLike) -> Path:
    out_dir = Path(out_dir)
    write_csv([[r.method, r.label, r.n_runs, r.n_failed, r.mean_test_accuracy,
                r.std_test_accuracy, r.mean_dev_accuracy, r.std_dev_accuracy]
               for r in summary.rows], SUMMARY_CSV_COLUMNS, out_dir / 'summary.csv')
    write_csv([[p.baseline, METHOD_LABELS[Method(p.baseline)], p.n_pairs, p.mean_difference,
                p.std_difference, p.wins] for p in summary.pairwise],
              PAIRWISE_CSV_COLUMNS, out_dir / 'pairwise.csv')
    write_csv([[c[column] for column in CELLS_CSV_COLUMNS] for c in summary.cells],
              CELLS_CSV_COLUMNS, out_dir / 'cells.csv')
    return write_json(summary.to_dict(), out_dir / 'summary.json')


def collect_reports(out_dir: PathLike, methods: Sequence[str],
                    seeds: Sequence[int]) -> List[Dict[str, Any]]:
    """Cell dictionaries rebuilt from the per-run JSON files on disk."""
    out_dir = Path(out_dir)
    results = []
    for seed in seeds:
        for method in methods:
            path = seed_dir(out_dir, seed) / method / 'report.json'
            if path.is_file():
                results.append({'method': method, 'seed': seed, 'success': True,
                                'report': read_run_report(path)})
            else:
                results.append({'method': method, 'seed': seed, 'success': False,
                                'error': f'missing {path}'})
    return results


def _run_cell(args: Tuple) -> Dict[str, Any]:
    """Worker body of one (method, seed) cell; never raises domain errors."""
    method, seed, student_spec, ta_spec, teacher_checkpoints, data, plan, cell_dir = args
    try:
        if teacher_checkpoints is None and method is not Method.NO_KD:
            raise PlanError(f"no teacher available for seed {seed}")
        reports = run_method(method, student_spec, teacher_checkpoints or [], data, plan,
                             ta_spec, cell_dir)
        write_run_report(reports['student'], cell_dir)
        if 'assistant' in reports:
            write_run_report(reports['assistant'], cell_dir, stem='assistant_report')
        return {'method': method.value, 'seed': seed, 'success': True,
                'report': reports['student']}
    except CELL_ERRORS as e:
        logger.warning("Cell %s/seed %d failed: %s", method.value, seed, e)
        return {'method': method.value, 'seed': seed, 'success': False, 'error': str(e)}


class ExperimentRunner:
    """Runs the cells of one ExperimentConfig below an output directory."""

    def __init__(self, config: ExperimentConfig, out_dir: Optional[PathLike] = None,
                 jobs: int = 1, progress: bool = False, base_dir: Optional[PathLike] = None,
                 teacher_dir: Optional[PathLike] = None):
        self.config = config
        self.out_dir = Path(out_dir if out_dir is not None else config.output_dir)
        self.jobs = max(1, int(jobs))
        self.progress = progress
        self.base_dir = Path(base_dir) if base_dir is not None else None
        self.teacher_dir = Path(teacher_dir) if teacher_dir is not None else None
        self._datasets: Dict[int, Dataset] = {}
        logger.info("Experiment runner initialized: out %s, %d job(s)", self.out_dir, self.jobs)

    # Data and models

    def dataset(self, seed: int) -> Dataset:
        """Dataset for a run seed; synthetic data without a fixed seed uses the run seed."""
        source = dict(self.config.dataset)
        data_seed = 0
        if 'synthetic' in source:
            synthetic = dict(source['synthetic'])
            synthetic.setdefault('seed', seed)
            data_seed = int(synthetic['seed'])
            source['synthetic'] = synthetic
        if data_seed not in self._datasets:
            self._datasets[data_seed] = load_dataset(source, self.base_dir)
        return self._datasets[data_seed]

    def specs(self, data: Dataset) -> Tuple[MlpSpec, MlpSpec, Optional[MlpSpec]]:
        config = self.config
        teacher = config.teacher.mlp(data.input_dim, data.n_classes)
        student = config.student.mlp(data.input_dim, data.n_classes)
        ta = config.ta.mlp(data.input_dim, data.n_classes) if config.ta is not None else None
        return teacher, student, ta

    def teacher_checkpoints(self, seed: int, data: Dataset) -> List[Checkpoint]:
        """Train the seed's teacher, or load it from ``teacher_dir``."""
        hp = self.config.hyperparameters
        if self.teacher_dir is not None:
            ckpt_dir = seed_dir(self.teacher_dir, seed) / 'teacher' / 'checkpoints'
            paths = sorted(ckpt_dir.glob('epoch_*.json'))
            if not paths:
                raise PlanError(f"no teacher checkpoints under {ckpt_dir}")
            logger.info("Loading %d teacher checkpoints for seed %d", len(paths), seed)
            return [load_checkpoint(path) for path in paths]
        teacher_spec, _, _ = self.specs(data)
        logger.info("Training teacher for seed %d (%d epochs)", seed, hp.n_teacher_epochs)
        return train_teacher(teacher_spec, data, hp.n_teacher_epochs, hp.sgd(), seed,
                             seed_dir(self.out_dir, seed) / 'teacher', hp.batch_size,
                             self.progress)

    def _map(self, fn, items: List[Tuple], desc: str) -> List[Any]:
        if self.jobs > 1 and len(items) > 1:
            with ProcessPoolExecutor(max_workers=self.jobs) as executor:
                return list(tqdm(executor.map(fn, items), total=len(items), desc=desc,
                                 disable=not self.progress))
        return [fn(item) for item in tqdm(items, desc=desc, disable=not self.progress)]

    # Commands

    def train_teachers(self) -> Dict[int, List[Checkpoint]]:
        teachers = {}
        for seed in self.config.seeds:
            data = self.dataset(seed)
            checkpoints = self.teacher_checkpoints(seed, data)
            rows = [[c.epoch, c.dev_metric] for c in checkpoints]
            write_csv(rows, ('epoch', 'dev_accuracy'),
                      seed_dir(self.out_dir, seed) / 'teacher' / 'teacher.csv')
            teachers[seed] = checkpoints
        return teachers

    def run(self, methods: Optional[Sequence[Method]] = None) -> ExperimentSummary:
        """Run every (method, seed) cell and write the summary files."""
        methods = [Method(m) for m in (methods or self.config.methods)]
        hp = self.config.hyperparameters
        needs_teacher = any(m is not Method.NO_KD for m in methods)
        save_config(self.config, self.out_dir / 'config.json')

        cells = []
        for seed in self.config.seeds:
            data = self.dataset(seed)
            _, student_spec, ta_spec = self.specs(data)
            teacher = None
            if needs_teacher:
                try:
                    teacher = self.teacher_checkpoints(seed, data)
                except CELL_ERRORS as e:
                    logger.warning("Teacher for seed %d failed: %s", seed, e)
            for method in methods:
                cells.append((method, seed, student_spec, ta_spec, teacher, data,
                              hp.training_plan(method, seed),
                              seed_dir(self.out_dir, seed) / method.value))

        results = self._map(_run_cell, cells, 'cells')
        summary = summarize(results, [m.value for m in methods])
        write_summary(summary, self.out_dir)
        if summary.failed_cells:
            logger.warning("%d of %d cells failed", len(summary.failed_cells), len(results))
        logger.info("Experiment finished: %d cells, summary in %s", len(results), self.out_dir)
        return summary

    def checkpoint_search(self) -> List[SearchReport]:
        """Per-seed KD checkpoint search plus an epoch-grid CSV across seeds."""
        hp = self.config.hyperparameters
        reports = []
        for seed in self.config.seeds:
            data = self.dataset(seed)
            _, student_spec, _ = self.specs(data)
            teacher = self.teacher_checkpoints(seed, data)
            plan = hp.training_plan(Method.VANILLA_KD, seed)
            search_dir = seed_dir(self.out_dir, seed)
            report = checkpoint_search(student_spec, teacher, hp.kd(), hp.search_epochs, data,
                                       plan, search_dir / 'search', self.jobs, self.progress)
            write_search_report(report, search_dir)
            reports.append(report)
        write_search_grid(reports, self.out_dir)
        return reports

    def ablate_temperature(self) -> Dict[str, Any]:
        """Pro-KD with and without the temperature, paired by seed."""
        hp = self.config.hyperparameters
        rows = []
        for seed in self.config.seeds:
            data = self.dataset(seed)
            _, student_spec, _ = self.specs(data)
            teacher = self.teacher_checkpoints(seed, data)
            plan = hp.training_plan(Method.PRO_KD, seed)
            finals = []
            for name, variant in ((Method.PRO_KD.value, plan),
                                  (ABLATION_RUN, replace(plan, disable_temperature=True))):
                run_dir = seed_dir(self.out_dir, seed) / name
                report = train_student_prokd(student_spec, teacher, variant, data, run_dir,
                                             progress=self.progress)
                write_run_report(report, run_dir)
                finals.append(report.final_test_accuracy)
            rows.append([seed, finals[0], finals[1], finals[0] - finals[1]])
            logger.info("Ablation seed %d: with temperature %.4f, without %.4f",
                        seed, finals[0], finals[1])
        write_csv(rows, ABLATION_CSV_COLUMNS, self.out_dir / 'ablation.csv')
        diffs = [row[3] for row in rows]
        result = {
            'rows': [dict(zip(ABLATION_CSV_COLUMNS, row)) for row in rows],
            'mean_difference': _mean(diffs),
            'std_difference': _std(diffs),
        }
        write_json(result, self.out_dir / 'ablation.json')
        return result


def write_search_grid(reports: Sequence[SearchReport], out_dir: PathLike) -> Path:
    """One row per (seed, metric), one column per teacher epoch."""
    epochs = sorted({row.teacher_epoch for report in reports for row in report.rows})
    columns = ['seed', 'metric'] + [f'epoch_{e}' for e in epochs] + [
        'best_teacher_epoch', 'best_student_epoch', 'best_student_differs']
    rows = []
    for report in reports:
        for metric in ('teacher_dev', 'student_dev', 'student_test'):
            values = {r.teacher_epoch: getattr(r, metric) for r in report.rows}
            rows.append([report.seed, metric] + [values.get(e) for e in epochs] + [
                report.best_teacher_epoch, report.best_student_epoch,
                report.best_student_differs])
    path = write_csv(rows, columns, Path(out_dir) / 'search_grid.csv')
    flags = {str(report.seed): report.best_student_differs for report in reports}
    write_json({'best_student_differs': flags, 'any_differs': any(flags.values())},
               Path(out_dir) / 'search_summary.json')
    return path
