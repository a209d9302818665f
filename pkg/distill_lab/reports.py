"""
Result records and their JSON/CSV emission.

Payload files (reports, search grids, summaries) are written with sorted,
deterministic content so repeated runs produce identical bytes. Timestamps
and host details go to a separate metadata file.
"""

import csv
import json
import logging
import platform
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import psutil

from .errors import DomainError

logger = logging.getLogger('distill-lab.reports')

PathLike = Union[str, Path]

RUN_CSV_COLUMNS = ('epoch', 'phase', 'temperature', 'train_loss', 'dev_accuracy')
SEARCH_CSV_COLUMNS = ('teacher_epoch', 'teacher_dev', 'student_dev', 'student_test')


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    phase: str
    temperature: Optional[float]
    train_loss: float
    dev_accuracy: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            'epoch': self.epoch,
            'phase': self.phase,
            'temperature': self.temperature,
            'train_loss': self.train_loss,
            'dev_accuracy': self.dev_accuracy,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'EpochRecord':
        return cls(int(data['epoch']), str(data['phase']), data.get('temperature'),
                   float(data['train_loss']), float(data['dev_accuracy']))


@dataclass
class RunReport:
    """Everything one training run produced."""
    method: str
    seed: int
    per_epoch: List[EpochRecord] = field(default_factory=list)
    final_dev_accuracy: float = 0.0
    final_test_accuracy: float = 0.0
    checkpoint_paths: List[str] = field(default_factory=list)

    @property
    def total_epochs(self) -> int:
        return len(self.per_epoch)

    def epochs_in_phase(self, phase: str) -> List[EpochRecord]:
        return [record for record in self.per_epoch if record.phase == phase]

    def validate(self) -> 'RunReport':
        phases: Dict[str, int] = {}
        for record in self.per_epoch:
            if record.epoch <= phases.get(record.phase, 0):
                raise DomainError(f"epoch indices must increase within phase {record.phase!r}")
            phases[record.phase] = record.epoch
            if not 0.0 <= record.dev_accuracy <= 1.0:
                raise DomainError(f"dev accuracy {record.dev_accuracy} outside [0, 1]")
        for value in (self.final_dev_accuracy, self.final_test_accuracy):
            if not 0.0 <= value <= 1.0:
                raise DomainError(f"accuracy {value} outside [0, 1]")
        return self

    def to_dict(self) -> Dict[str, Any]:
        best = best_dev_epoch(self)
        return {
            'method': self.method,
            'seed': self.seed,
            'per_epoch': [record.to_dict() for record in self.per_epoch],
            'final_dev_accuracy': self.final_dev_accuracy,
            'final_test_accuracy': self.final_test_accuracy,
            'best_dev_epoch': best.epoch if best is not None else None,
            'best_dev_accuracy': best.dev_accuracy if best is not None else None,
            'checkpoint_paths': list(self.checkpoint_paths),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RunReport':
        return cls(
            method=str(data['method']),
            seed=int(data['seed']),
            per_epoch=[EpochRecord.from_dict(r) for r in data.get('per_epoch', [])],
            final_dev_accuracy=float(data['final_dev_accuracy']),
            final_test_accuracy=float(data['final_test_accuracy']),
            checkpoint_paths=list(data.get('checkpoint_paths', [])),
        )


def best_dev_epoch(report: RunReport) -> Optional[EpochRecord]:
    """Epoch with the highest dev accuracy (earliest on ties)."""
    if not report.per_epoch:
        return None
    scores = [record.dev_accuracy for record in report.per_epoch]
    return report.per_epoch[int(np.argmax(scores))]


@dataclass(frozen=True)
class SearchRow:
    teacher_epoch: int
    teacher_dev: float
    student_dev: float
    student_test: float


@dataclass
class SearchReport:
    """One distillation run per teacher checkpoint, plus the argmax rows."""
    seed: int
    rows: List[SearchRow]

    @property
    def best_teacher_epoch(self) -> int:
        return self.rows[int(np.argmax([row.teacher_dev for row in self.rows]))].teacher_epoch

    @property
    def best_student_epoch(self) -> int:
        return self.rows[int(np.argmax([row.student_dev for row in self.rows]))].teacher_epoch

    @property
    def best_student_differs(self) -> bool:
        return self.best_student_epoch != self.best_teacher_epoch

    def row_for(self, teacher_epoch: int) -> SearchRow:
        for row in self.rows:
            if row.teacher_epoch == teacher_epoch:
                return row
        raise KeyError(teacher_epoch)

    def to_dict(self) -> Dict[str, Any]:
        best_teacher = self.row_for(self.best_teacher_epoch)
        best_student = self.row_for(self.best_student_epoch)
        return {
            'seed': self.seed,
            'rows': [
                {'teacher_epoch': r.teacher_epoch, 'teacher_dev': r.teacher_dev,
                 'student_dev': r.student_dev, 'student_test': r.student_test}
                for r in self.rows
            ],
            'best_teacher_epoch': self.best_teacher_epoch,
            'best_student_epoch': self.best_student_epoch,
            'best_student_differs': self.best_student_differs,
            'student_test_at_best_teacher': best_teacher.student_test,
            'student_test_at_best_student': best_student.student_test,
        }


def _dump_json(data: Any, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(data, f, indent=2)
        f.write('\n')
    return path


def _csv_value(value: Any) -> str:
    if value is None:
        return ''
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(rows: Sequence[Sequence[Any]], columns: Sequence[str], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='') as f:
        writer = csv.writer(f, lineterminator='\n')
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_csv_value(v) for v in row])
    return path


def write_json(data: Any, path: PathLike) -> Path:
    return _dump_json(data, Path(path))


def write_run_report(report: RunReport, directory: PathLike, stem: str = 'report') -> Path:
    """Write ``<stem>.json`` and a one-row-per-epoch ``<stem>.csv``."""
    directory = Path(directory)
    json_path = _dump_json(report.to_dict(), directory / f'{stem}.json')
    rows = [[getattr(record, column) for column in RUN_CSV_COLUMNS] for record in report.per_epoch]
    write_csv(rows, RUN_CSV_COLUMNS, directory / f'{stem}.csv')
    logger.debug("Wrote run report %s", json_path)
    return json_path


def read_run_report(path: PathLike) -> RunReport:
    with open(path, 'r', encoding='utf-8') as f:
        return RunReport.from_dict(json.load(f))


def write_search_report(report: SearchReport, directory: PathLike, stem: str = 'search') -> Path:
    """Write the epoch grid CSV and a JSON carrying the argmax rows."""
    directory = Path(directory)
    rows = [[r.teacher_epoch, r.teacher_dev, r.student_dev, r.student_test] for r in report.rows]
    csv_path = write_csv(rows, SEARCH_CSV_COLUMNS, directory / f'{stem}.csv')
    _dump_json(report.to_dict(), directory / f'{stem}.json')
    return csv_path


def system_info() -> Dict[str, Any]:
    """Host description for the metadata file."""
    memory = psutil.virtual_memory()
    return {
        'os': sys.platform,
        'platform': platform.platform(),
        'python_version': sys.version,
        'cpu_count': psutil.cpu_count(logical=True),
        'memory_total': memory.total,
    }


def write_metadata(directory: PathLike, command: str, started: datetime,
                   extra: Optional[Dict[str, Any]] = None) -> Path:
    """Timestamps and host details, kept apart from result payloads."""
    data = {
        'command': command,
        'started': started.isoformat(),
        'finished': datetime.now(timezone.utc).isoformat(),
        'system': system_info(),
    }
    if extra:
        data.update(extra)
    return _dump_json(data, Path(directory) / 'metadata.json')
