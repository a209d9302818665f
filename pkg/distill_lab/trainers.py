"""
Training procedures: the teacher, the six student methods and the
checkpoint-search harness.

Every run is single-threaded and owns its model. Batches are reshuffled each
epoch with a generator seeded from (run seed, epoch), and model
initialization seeds are derived from (run seed, role), so a run is a pure
function of its plan, data and seed.
"""

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from .datasets import Dataset
from .distill import (TemperatureSchedule, VanillaKdConfig, annealing_target,
                      prokd_phase1_loss, vanilla_kd_loss)
from .errors import DomainError, PlanError
from .nn import (Checkpoint, MlpModel, MlpSpec, SgdConfig, SgdState, accuracy, backward,
                 forward, init_model, save_checkpoint, sgd_step)
from .numerics import LossAndGrad, Matrix, cross_entropy, mse_logits, softmax
from .reports import EpochRecord, RunReport, SearchReport, SearchRow, best_dev_epoch

logger = logging.getLogger('distill-lab.trainers')

PathLike = Union[str, Path]
Objective = Callable[[Matrix, np.ndarray], LossAndGrad]
BatchHook = Callable[[int, int, float], None]

ROLE_CODES = {'teacher': 0, 'student': 1, 'ta': 2}

PHASE_TEACHER = 'teacher'
PHASE_SCRATCH = 'scratch'
PHASE_KD = 'kd'
PHASE_ONE = 'phase1'
PHASE_TWO = 'phase2'


class Method(str, Enum):
    NO_KD = 'no_kd'
    VANILLA_KD = 'vanilla_kd'
    TAKD = 'takd'
    RCO = 'rco'
    ANNEALING_KD = 'annealing_kd'
    PRO_KD = 'pro_kd'


METHOD_LABELS = {
    Method.NO_KD: 'from scratch',
    Method.VANILLA_KD: 'KD',
    Method.TAKD: 'TAKD',
    Method.RCO: 'RCO',
    Method.ANNEALING_KD: 'Annealing-KD',
    Method.PRO_KD: 'Pro-KD',
}

SCHEDULED_METHODS = (Method.ANNEALING_KD, Method.PRO_KD)


@dataclass(frozen=True)
class TrainingPlan:
    """Hyper-parameters of one training run.

    ``schedule`` is present exactly for the two-phase methods (Pro-KD and
    Annealing-KD); ``student_epochs`` is the budget of the single-phase
    methods and ``rco_epochs_per_anchor`` the per-anchor budget of RCO.
    """
    method: Method
    sgd: SgdConfig
    seed: int
    batch_size: int = 32
    teacher_epochs: int = 10
    schedule: Optional[TemperatureSchedule] = None
    phase2_epochs: int = 0
    warmup_epochs: int = 0
    disable_temperature: bool = False
    student_epochs: int = 10
    kd: VanillaKdConfig = field(default_factory=VanillaKdConfig)
    rco_anchors: Optional[Tuple[int, ...]] = None
    rco_epochs_per_anchor: int = 1

    def __post_init__(self):
        object.__setattr__(self, 'method', Method(self.method))
        if self.rco_anchors is not None:
            object.__setattr__(self, 'rco_anchors', tuple(int(a) for a in self.rco_anchors))
        if (self.schedule is not None) != (self.method in SCHEDULED_METHODS):
            raise PlanError(
                f"a temperature schedule is required for, and only for, "
                f"{[m.value for m in SCHEDULED_METHODS]} (method {self.method.value})")
        if self.phase2_epochs < 0 or self.warmup_epochs < 0:
            raise PlanError("phase2_epochs and warmup_epochs must be >= 0")
        if self.teacher_epochs < 1 or self.student_epochs < 0 or self.rco_epochs_per_anchor < 1:
            raise PlanError("teacher_epochs and rco_epochs_per_anchor must be >= 1, "
                            "student_epochs >= 0")
        if self.batch_size < 1:
            raise PlanError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.seed < 0:
            raise PlanError(f"seed must be >= 0, got {self.seed}")

    def for_method(self, method: Method,
                   schedule: Optional[TemperatureSchedule] = None) -> 'TrainingPlan':
        method = Method(method)
        return replace(self, method=method,
                       schedule=schedule if method in SCHEDULED_METHODS else None)


@dataclass
class TakdReports:
    """TAKD emits the teacher-assistant run and the student run."""
    assistant: RunReport
    student: RunReport


def derive_seed(seed: int, role: str) -> int:
    """Initialization seed for ``role`` ('teacher', 'student' or 'ta')."""
    state = np.random.SeedSequence([int(seed), ROLE_CODES[role]]).generate_state(1)
    return int(state[0])


def epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    """Batch-order generator of a given (run seed, epoch)."""
    return np.random.default_rng([int(seed), int(epoch)])


def teacher_logits(model: MlpModel, x: Matrix) -> Matrix:
    logits, _ = forward(model, x)
    return logits


def _index_checkpoints(checkpoints: Sequence[Checkpoint]) -> Dict[int, Checkpoint]:
    by_epoch: Dict[int, Checkpoint] = {}
    for ckpt in checkpoints:
        if ckpt.epoch in by_epoch:
            raise PlanError(f"duplicate teacher checkpoint for epoch {ckpt.epoch}")
        by_epoch[ckpt.epoch] = ckpt
    return by_epoch


class EpochRunner:
    """Mini-batch SGD epochs over the train split, with per-epoch bookkeeping.

    Appends one EpochRecord per epoch to the report and, with an output
    directory, saves a checkpoint per epoch.
    """

    def __init__(self, data: Dataset, plan: TrainingPlan, out_dir: Optional[PathLike] = None,
                 on_batch: Optional[BatchHook] = None, progress: bool = False, label: str = ''):
        self.plan = plan
        self.train = data.split('train')
        self.dev = data.split('dev')
        self.test = data.split('test')
        if len(self.train) == 0:
            raise PlanError("the train split is empty")
        self.targets = self.train.one_hot()
        self.out_dir = Path(out_dir) if out_dir is not None else None
        self.on_batch = on_batch
        self.progress = progress
        self.label = label

    def run(self, model: MlpModel, objective: Objective, epochs: int, report: RunReport,
            state: SgdState, phase: str, temperature: Optional[float] = None) -> MlpModel:
        x = self.train.features
        n = x.shape[0]
        batch_size = self.plan.batch_size
        desc = f"{self.label} {phase}".strip()
        for _ in tqdm(range(epochs), desc=desc, disable=not self.progress, leave=False):
            epoch = report.total_epochs + 1
            order = epoch_rng(self.plan.seed, epoch).permutation(n)
            losses = []
            for batch_index, start in enumerate(range(0, n, batch_size)):
                idx = order[start:start + batch_size]
                logits, cache = forward(model, x[idx])
                loss, d_logits = objective(logits, idx)
                sgd_step(model, backward(model, cache, d_logits), self.plan.sgd, state)
                losses.append(loss)
                if self.on_batch is not None:
                    self.on_batch(epoch, batch_index, loss)
                logger.debug("%s epoch %d batch %d loss %.6f", desc, epoch, batch_index, loss)
            dev_accuracy = accuracy(model, self.dev.features, self.dev.labels)
            report.per_epoch.append(EpochRecord(epoch, phase, temperature,
                                                float(np.mean(losses)), dev_accuracy))
            if self.out_dir is not None:
                name = f'epoch_{epoch:04d}.json'
                save_checkpoint(Checkpoint(epoch, model, dev_accuracy, self.plan.seed),
                                self.out_dir / name)
                report.checkpoint_paths.append(f'checkpoints/{name}')
        return model

    def finish(self, model: MlpModel, report: RunReport) -> RunReport:
        report.final_dev_accuracy = accuracy(model, self.dev.features, self.dev.labels)
        report.final_test_accuracy = accuracy(model, self.test.features, self.test.labels)
        logger.info("%s finished: %d epochs, dev %.4f, test %.4f", report.method,
                    report.total_epochs, report.final_dev_accuracy, report.final_test_accuracy)
        best = best_dev_epoch(report)
        if best is not None:
            logger.info("%s best dev epoch %d (dev %.4f)", report.method, best.epoch,
                        best.dev_accuracy)
        return report.validate()

    # Objectives. Teacher logits are precomputed over the whole train split
    # and indexed per batch, so the teacher is never touched while training.

    def cross_entropy_objective(self) -> Objective:
        targets = self.targets

        def objective(z_s: Matrix, idx: np.ndarray) -> LossAndGrad:
            return cross_entropy(targets[idx], softmax(z_s, 1.0))
        return objective

    def vanilla_objective(self, teacher: MlpModel, cfg: VanillaKdConfig) -> Objective:
        targets = self.targets
        z_t = teacher_logits(teacher, self.train.features)

        def objective(z_s: Matrix, idx: np.ndarray) -> LossAndGrad:
            return vanilla_kd_loss(targets[idx], z_s, z_t[idx], cfg)
        return objective

    def phase1_objective(self, teacher: MlpModel, temperature: float) -> Objective:
        z_t = teacher_logits(teacher, self.train.features)

        def objective(z_s: Matrix, idx: np.ndarray) -> LossAndGrad:
            return prokd_phase1_loss(z_s, z_t[idx], temperature)
        return objective

    def regression_objective(self, target: Matrix) -> Objective:
        def objective(z_s: Matrix, idx: np.ndarray) -> LossAndGrad:
            return mse_logits(z_s, target[idx])
        return objective


def _checkpoint_dir(out_dir: Optional[PathLike]) -> Optional[Path]:
    return Path(out_dir) / 'checkpoints' if out_dir is not None else None


def train_teacher(spec: MlpSpec, data: Dataset, epochs: int, sgd: SgdConfig, seed: int,
                  out_dir: Optional[PathLike] = None, batch_size: int = 32,
                  progress: bool = False) -> List[Checkpoint]:
    """Cross-entropy training with one checkpoint per epoch end."""
    spec.require_classifier()
    if epochs < 1:
        raise PlanError(f"teacher epochs must be >= 1, got {epochs}")
    plan = TrainingPlan(Method.NO_KD, sgd, seed, batch_size=batch_size, teacher_epochs=epochs)
    runner = EpochRunner(data, plan, None, progress=progress, label='teacher')
    model = init_model(spec, derive_seed(seed, 'teacher'))
    report = RunReport(method='teacher', seed=seed)
    state = SgdState()
    objective = runner.cross_entropy_objective()
    checkpoints = []
    ckpt_dir = _checkpoint_dir(out_dir)
    for epoch in range(1, epochs + 1):
        runner.run(model, objective, 1, report, state, PHASE_TEACHER)
        ckpt = Checkpoint(epoch, model.copy(), report.per_epoch[-1].dev_accuracy, seed)
        if ckpt_dir is not None:
            save_checkpoint(ckpt, ckpt_dir / f'epoch_{epoch:04d}.json')
        checkpoints.append(ckpt)
        logger.info("Teacher epoch %d/%d: dev accuracy %.4f", epoch, epochs, ckpt.dev_metric)
    return checkpoints


def train_student_scratch(student_spec: MlpSpec, epochs: int, data: Dataset, plan: TrainingPlan,
                          out_dir: Optional[PathLike] = None, on_batch: Optional[BatchHook] = None,
                          progress: bool = False) -> RunReport:
    """The no-KD baseline: plain cross-entropy from a fresh student."""
    student_spec.require_classifier()
    runner = EpochRunner(data, plan, _checkpoint_dir(out_dir), on_batch, progress, 'no_kd')
    model = init_model(student_spec, derive_seed(plan.seed, 'student'))
    report = RunReport(method=Method.NO_KD.value, seed=plan.seed)
    runner.run(model, runner.cross_entropy_objective(), epochs, report, SgdState(), PHASE_SCRATCH)
    return runner.finish(model, report)


def _train_vanilla(student_spec: MlpSpec, teacher: MlpModel, cfg: VanillaKdConfig, epochs: int,
                   data: Dataset, plan: TrainingPlan, out_dir: Optional[PathLike], method: str,
                   role: str, on_batch: Optional[BatchHook],
                   progress: bool) -> Tuple[RunReport, MlpModel]:
    student_spec.require_classifier()
    runner = EpochRunner(data, plan, _checkpoint_dir(out_dir), on_batch, progress, method)
    model = init_model(student_spec, derive_seed(plan.seed, role))
    report = RunReport(method=method, seed=plan.seed)
    runner.run(model, runner.vanilla_objective(teacher, cfg), epochs, report, SgdState(), PHASE_KD)
    return runner.finish(model, report), model


def train_student_vanilla(student_spec: MlpSpec, teacher_ckpt: Checkpoint, cfg: VanillaKdConfig,
                          epochs: int, data: Dataset, plan: TrainingPlan,
                          out_dir: Optional[PathLike] = None,
                          on_batch: Optional[BatchHook] = None,
                          progress: bool = False, method: str = Method.VANILLA_KD.value) -> RunReport:
    """Vanilla KD from a single teacher checkpoint."""
    report, _ = _train_vanilla(student_spec, teacher_ckpt.model, cfg, epochs, data, plan,
                               out_dir, method, 'student', on_batch, progress)
    return report


def train_student_takd(student_spec: MlpSpec, ta_spec: MlpSpec, teacher_ckpt: Checkpoint,
                       cfg: VanillaKdConfig, epochs: int, data: Dataset, plan: TrainingPlan,
                       out_dir: Optional[PathLike] = None, progress: bool = False) -> TakdReports:
    """Teacher -> assistant -> student, two chained vanilla KD runs."""
    student_size = student_spec.parameter_count()
    ta_size = ta_spec.parameter_count()
    teacher_size = teacher_ckpt.model.parameter_count()
    if not student_size < ta_size < teacher_size:
        raise PlanError(
            f"teacher assistant must sit strictly between student and teacher in parameter "
            f"count (student {student_size}, assistant {ta_size}, teacher {teacher_size})")
    out = Path(out_dir) if out_dir is not None else None
    ta_report, ta_model = _train_vanilla(
        ta_spec, teacher_ckpt.model, cfg, epochs, data, plan,
        out / 'assistant' if out is not None else None, f'{Method.TAKD.value}_assistant', 'ta',
        None, progress)
    ta_ckpt = Checkpoint(max(epochs, 1), ta_model, ta_report.final_dev_accuracy, plan.seed)
    student_report = train_student_vanilla(
        student_spec, ta_ckpt, cfg, epochs, data, plan,
        out / 'student' if out is not None else None, progress=progress, method=Method.TAKD.value)
    return TakdReports(assistant=ta_report, student=student_report)


def train_student_rco(student_spec: MlpSpec, teacher_checkpoints: Sequence[Checkpoint],
                      anchors: Optional[Sequence[int]], cfg: VanillaKdConfig,
                      epochs_per_anchor: int, data: Dataset, plan: TrainingPlan,
                      out_dir: Optional[PathLike] = None, on_batch: Optional[BatchHook] = None,
                      progress: bool = False) -> RunReport:
    """Route-constrained KD: vanilla KD against each anchor checkpoint in turn.

    ``anchors=None`` uses every teacher epoch.
    """
    student_spec.require_classifier()
    by_epoch = _index_checkpoints(teacher_checkpoints)
    anchors = sorted(by_epoch) if anchors is None else [int(a) for a in anchors]
    if not anchors:
        raise PlanError("RCO needs at least one anchor")
    if any(b <= a for a, b in zip(anchors, anchors[1:])):
        raise PlanError(f"RCO anchors must be strictly increasing, got {anchors}")
    missing = [a for a in anchors if a not in by_epoch]
    if missing:
        raise PlanError(f"no teacher checkpoint for RCO anchor epoch(s) {missing}")

    runner = EpochRunner(data, plan, _checkpoint_dir(out_dir), on_batch, progress, 'rco')
    model = init_model(student_spec, derive_seed(plan.seed, 'student'))
    report = RunReport(method=Method.RCO.value, seed=plan.seed)
    state = SgdState()
    for anchor in anchors:
        logger.info("RCO stage: anchor teacher epoch %d", anchor)
        objective = runner.vanilla_objective(by_epoch[anchor].model, cfg)
        runner.run(model, objective, epochs_per_anchor, report, state, PHASE_KD)
    return runner.finish(model, report)


def train_student_logit_regression(student_spec: MlpSpec, teacher_ckpt: Checkpoint, epochs: int,
                                   data: Dataset, plan: TrainingPlan,
                                   out_dir: Optional[PathLike] = None,
                                   on_batch: Optional[BatchHook] = None,
                                   progress: bool = False) -> RunReport:
    """Regression of the student logits onto one checkpoint's raw logits."""
    student_spec.require_classifier()
    runner = EpochRunner(data, plan, _checkpoint_dir(out_dir), on_batch, progress, 'regression')
    model = init_model(student_spec, derive_seed(plan.seed, 'student'))
    report = RunReport(method='logit_regression', seed=plan.seed)
    runner.run(model, runner.phase1_objective(teacher_ckpt.model, 1), epochs, report,
               SgdState(), PHASE_ONE, temperature=1)
    return runner.finish(model, report)


def _require_schedule(plan: TrainingPlan) -> TemperatureSchedule:
    if plan.schedule is None:
        raise PlanError(f"method {plan.method.value} needs a temperature schedule")
    return plan.schedule


def train_student_prokd(student_spec: MlpSpec, teacher_checkpoints: Sequence[Checkpoint],
                        plan: TrainingPlan, data: Dataset, out_dir: Optional[PathLike] = None,
                        on_batch: Optional[BatchHook] = None,
                        progress: bool = False) -> RunReport:
    """Pro-KD: follow the teacher's checkpoints with a decreasing temperature, then CE.

    Phase I step i regresses onto the logits of teacher checkpoint
    ``warmup_epochs + i`` divided by the i-th temperature (1 throughout when
    ``disable_temperature`` is set). Phase II trains on the labels only.
    """
    student_spec.require_classifier()
    schedule = _require_schedule(plan)
    by_epoch = _index_checkpoints(teacher_checkpoints)
    for epoch in schedule.checkpoint_epochs(plan.warmup_epochs):
        if epoch not in by_epoch:
            raise PlanError(f"Pro-KD plan needs the teacher checkpoint of epoch {epoch}, "
                            f"which is missing (warmup {plan.warmup_epochs}, "
                            f"tau_max {schedule.tau_max})")

    runner = EpochRunner(data, plan, _checkpoint_dir(out_dir), on_batch, progress, 'pro_kd')
    model = init_model(student_spec, derive_seed(plan.seed, 'student'))
    report = RunReport(method=Method.PRO_KD.value, seed=plan.seed)
    state = SgdState()
    for step, temperature, n_epochs in schedule.steps():
        if plan.disable_temperature:
            temperature = 1
        teacher = by_epoch[plan.warmup_epochs + step].model
        logger.info("Pro-KD step %d: teacher epoch %d, temperature %s, %d epochs",
                    step, plan.warmup_epochs + step, temperature, n_epochs)
        runner.run(model, runner.phase1_objective(teacher, temperature), n_epochs, report,
                   state, PHASE_ONE, temperature=temperature)
    if plan.phase2_epochs:
        runner.run(model, runner.cross_entropy_objective(), plan.phase2_epochs, report,
                   state, PHASE_TWO)
    return runner.finish(model, report)


def train_student_annealing(student_spec: MlpSpec, teacher_final_ckpt: Checkpoint,
                            plan: TrainingPlan, data: Dataset, out_dir: Optional[PathLike] = None,
                            on_batch: Optional[BatchHook] = None,
                            progress: bool = False) -> RunReport:
    """Annealing-KD: regress onto the final teacher logits scaled by i / tau_max, then CE."""
    student_spec.require_classifier()
    schedule = _require_schedule(plan)
    runner = EpochRunner(data, plan, _checkpoint_dir(out_dir), on_batch, progress, 'annealing_kd')
    z_final = teacher_logits(teacher_final_ckpt.model, runner.train.features)
    model = init_model(student_spec, derive_seed(plan.seed, 'student'))
    report = RunReport(method=Method.ANNEALING_KD.value, seed=plan.seed)
    state = SgdState()
    for step, temperature, n_epochs in schedule.steps():
        if plan.disable_temperature:
            target, temperature = z_final, 1
        else:
            target = annealing_target(z_final, step, schedule.tau_max)
        runner.run(model, runner.regression_objective(target), n_epochs, report, state,
                   PHASE_ONE, temperature=temperature)
    if plan.phase2_epochs:
        runner.run(model, runner.cross_entropy_objective(), plan.phase2_epochs, report,
                   state, PHASE_TWO)
    return runner.finish(model, report)


def _search_cell(args) -> Tuple[int, float, float, float]:
    student_spec, ckpt, cfg, epochs, data, plan, out_dir = args
    report = train_student_vanilla(student_spec, ckpt, cfg, epochs, data, plan, out_dir)
    teacher_dev = ckpt.dev_metric
    if teacher_dev is None:
        dev = data.split('dev')
        teacher_dev = accuracy(ckpt.model, dev.features, dev.labels)
    return ckpt.epoch, float(teacher_dev), report.final_dev_accuracy, report.final_test_accuracy


def checkpoint_search(student_spec: MlpSpec, teacher_checkpoints: Sequence[Checkpoint],
                      cfg: VanillaKdConfig, epochs: int, data: Dataset, plan: TrainingPlan,
                      out_dir: Optional[PathLike] = None, jobs: int = 1,
                      progress: bool = False) -> SearchReport:
    """Distill a fresh, identically seeded student from every teacher checkpoint.

    Cells are independent and may run in worker processes; each writes into
    its own ``epoch_XXXX`` directory.
    """
    if len(teacher_checkpoints) < 2:
        raise PlanError("checkpoint search needs at least two teacher checkpoints")
    ordered = sorted(_index_checkpoints(teacher_checkpoints).values(), key=lambda c: c.epoch)
    out = Path(out_dir) if out_dir is not None else None
    cells = [
        (student_spec, ckpt, cfg, epochs, data, plan,
         out / f'epoch_{ckpt.epoch:04d}' if out is not None else None)
        for ckpt in ordered
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as executor:
            results = list(tqdm(executor.map(_search_cell, cells), total=len(cells),
                                desc='checkpoint search', disable=not progress))
    else:
        results = [_search_cell(cell) for cell in
                   tqdm(cells, desc='checkpoint search', disable=not progress)]
    rows = [SearchRow(*result) for result in results]
    report = SearchReport(seed=plan.seed, rows=rows)
    logger.info("Checkpoint search (seed %d): best teacher epoch %d, best student epoch %d",
                plan.seed, report.best_teacher_epoch, report.best_student_epoch)
    return report


def run_method(method: Method, student_spec: MlpSpec, teacher_checkpoints: Sequence[Checkpoint],
               data: Dataset, plan: TrainingPlan, ta_spec: Optional[MlpSpec] = None,
               out_dir: Optional[PathLike] = None,
               progress: bool = False) -> Dict[str, RunReport]:
    """Dispatch one method; returns named reports (``student`` always present)."""
    method = Method(method)
    if not teacher_checkpoints and method is not Method.NO_KD:
        raise PlanError(f"method {method.value} needs teacher checkpoints")
    final = max(teacher_checkpoints, key=lambda c: c.epoch) if teacher_checkpoints else None
    if method is Method.NO_KD:
        return {'student': train_student_scratch(student_spec, plan.student_epochs, data, plan,
                                                 out_dir, progress=progress)}
    if method is Method.VANILLA_KD:
        return {'student': train_student_vanilla(student_spec, final, plan.kd, plan.student_epochs,
                                                 data, plan, out_dir, progress=progress)}
    if method is Method.TAKD:
        if ta_spec is None:
            raise PlanError("TAKD needs a teacher-assistant spec")
        reports = train_student_takd(student_spec, ta_spec, final, plan.kd, plan.student_epochs,
                                     data, plan, out_dir, progress=progress)
        return {'student': reports.student, 'assistant': reports.assistant}
    if method is Method.RCO:
        return {'student': train_student_rco(student_spec, teacher_checkpoints, plan.rco_anchors,
                                             plan.kd, plan.rco_epochs_per_anchor, data, plan,
                                             out_dir, progress=progress)}
    if method is Method.ANNEALING_KD:
        return {'student': train_student_annealing(student_spec, final, plan, data, out_dir,
                                                   progress=progress)}
    if method is Method.PRO_KD:
        return {'student': train_student_prokd(student_spec, teacher_checkpoints, plan, data,
                                               out_dir, progress=progress)}
    raise DomainError(f"unknown method {method!r}")
