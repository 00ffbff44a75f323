"""Workflow schedules: baseline, serial (multi-phase AL) and streaming
(AL with simulation/training overlap in parallel groups).

Every task is timed into an append-only event log; a run produces a RunReport
whose metric section (per-phase test losses) is deterministic for a fixed
seed, while the task section carries wall-clock timings.  Within a parallel
group exactly two tasks run concurrently: training on the train pool and a
simulation task on the sim pool; a member failure cancels its partner and
aborts the run.
"""

import csv
import hashlib
import json
import threading
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace

import numpy as np

from . import alpolicy, nnet
from .config import RunConfig, equal_class_counts
from .lattice import ParamBatch, sample_uniform
from .nnet import Dataset, ModelState
from .simulator import simulate_batch

__all__ = [
    "TaskRecord",
    "EventLog",
    "RunReport",
    "DatasetStore",
    "PhasePlan",
    "WorkflowError",
    "run_baseline",
    "run_serial",
    "run_streaming",
    "run_workflow",
    "compare_runs",
    "dataset_digest",
]


class WorkflowError(RuntimeError):
    pass


# Seed-derivation tags: every random draw in a run flows from (run seed, tag, k),
# so phase-0 sampling is identical across workflow modes with the same seed.
_TAG_SAMPLE_TRAIN0, _TAG_SAMPLE_VAL, _TAG_SAMPLE_TEST = 0, 1, 2
_TAG_SIM_TRAIN0, _TAG_SIM_VAL, _TAG_SIM_TEST, _TAG_SIM_STUDY = 3, 4, 5, 6
_TAG_MODEL_INIT, _TAG_TRAIN, _TAG_AL, _TAG_SIM_SHARD = 7, 8, 9, 10


def derive_seed(base: int, tag: int, k: int = 0) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(base), spawn_key=(int(tag), int(k)))


@dataclass
class TaskRecord:
    name: str
    start_ms: float
    end_ms: float
    pool: str

    @property
    def duration_ms(self) -> float:
        return self.end_ms - self.start_ms


class EventLog:
    """Append-only, thread-safe task timing log (ms relative to run start)."""

    def __init__(self):
        self._t0 = time.perf_counter()
        self._lock = threading.Lock()
        self.records = []

    def now_ms(self) -> float:
        return (time.perf_counter() - self._t0) * 1000.0

    def append(self, record: TaskRecord) -> None:
        with self._lock:
            self.records.append(record)

    @contextmanager
    def task(self, name: str, pool: str):
        start = self.now_ms()
        try:
            yield
        finally:
            self.append(TaskRecord(name, start, self.now_ms(), pool))

    def by_name(self, name: str) -> TaskRecord:
        for rec in self.records:
            if rec.name == name:
                return rec
        raise KeyError(name)


@dataclass
class PhasePlan:
    """Sizes and epoch counts realizing one workflow schedule."""

    mode: str
    n_phases: int
    train0: int
    val_size: int
    test_size: int
    study_size: int
    shard_sizes: tuple   # per phase k >= 1: parameters drawn by AL_k
    epochs: tuple        # per phase 0 .. n_phases-1

    @staticmethod
    def from_config(cfg: RunConfig) -> "PhasePlan":
        wf = cfg.workflow
        train0 = wf.train0
        streaming = wf.mode == "streaming"
        shard_sizes = []
        for k in range(1, wf.phases):
            if streaming and k < wf.phases - 1:
                shard_sizes.append(2 * round(wf.stream_ratio * train0))
            elif streaming:
                shard_sizes.append(round(wf.final_ratio * train0))
            else:
                shard_sizes.append(train0)
        # Samples visible to each phase's training task.  In streaming, T_k
        # sees only the first half of intermediate batch k; the second half
        # (simulated during T_k) joins the pool for T_{k+1}.
        train_sizes = [train0]
        for k, drawn in enumerate(shard_sizes, start=1):
            carried = shard_sizes[k - 2] - shard_sizes[k - 2] // 2 if (streaming and k >= 2) else 0
            visible = drawn // 2 if (streaming and k < wf.phases - 1) else drawn
            train_sizes.append(train_sizes[-1] + carried + visible)
        if wf.epochs_mode == "sqrt":
            scale = wf.sqrt_epoch_scale or None
            epochs = nnet.sqrt_epochs(cfg.train.epochs_per_phase, train_sizes, scale)
        else:
            epochs = tuple(cfg.train.epochs_per_phase[: wf.phases])
        return PhasePlan(
            mode=wf.mode,
            n_phases=wf.phases,
            train0=train0,
            val_size=round(wf.val_ratio * train0),
            test_size=round(wf.test_ratio * train0),
            study_size=round(wf.study_ratio * train0),
            shard_sizes=tuple(shard_sizes),
            epochs=epochs,
        )


@dataclass
class DatasetStore:
    """Training shards plus the frozen validation/test/study sets."""

    val: Dataset
    test: Dataset
    study: alpolicy.StudySet
    shards: list = field(default_factory=list)

    def add_shard(self, ds: Dataset) -> None:
        self.shards.append(ds)

    def train_union(self) -> Dataset:
        return Dataset.concat(self.shards)

    def frozen_digests(self) -> dict:
        return {
            "val": dataset_digest(self.val),
            "test": dataset_digest(self.test),
            "study": _study_digest(self.study),
        }


def dataset_digest(ds: Dataset) -> str:
    h = hashlib.sha256()
    for arr in (ds.X, ds.class_idx, ds.target, ds.mask):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


def _study_digest(study: alpolicy.StudySet) -> str:
    h = hashlib.sha256()
    for arr in (study.params.symmetry, study.params.a, study.params.c,
                study.params.alpha, study.intensities):
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


@dataclass
class RunReport:
    """Timing + accuracy record of one workflow run."""

    mode: str
    seed: int
    tasks: list
    phases: list          # [{"phase", "train_size", "class_loss", "mse"}]
    totals: dict          # {"total_ms", "final_class_loss", "final_mse"}
    histories: dict = field(default_factory=dict)  # task -> per-epoch rows (not serialized)

    def metrics_dict(self) -> dict:
        return {
            "phases": self.phases,
            "final": {
                "class_loss": self.totals["final_class_loss"],
                "mse": self.totals["final_mse"],
            },
        }

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "seed": self.seed,
            "tasks": [
                {"name": t.name, "start_ms": t.start_ms, "end_ms": t.end_ms, "pool": t.pool}
                for t in self.tasks
            ],
            "phases": self.phases,
            "totals": self.totals,
        }

    def save_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def write_task_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["name", "start_ms", "end_ms", "duration_ms", "pool"])
            for t in self.tasks:
                writer.writerow([t.name, repr(t.start_ms), repr(t.end_ms),
                                 repr(t.duration_ms), t.pool])

    @staticmethod
    def from_dict(doc: dict) -> "RunReport":
        tasks = [TaskRecord(t["name"], t["start_ms"], t["end_ms"], t["pool"]) for t in doc["tasks"]]
        return RunReport(doc["mode"], doc["seed"], tasks, doc["phases"], doc["totals"])

    @staticmethod
    def load_json(path) -> "RunReport":
        with open(path) as fh:
            return RunReport.from_dict(json.load(fh))


def _simulate_dataset(batch: ParamBatch, cfg: RunConfig, seed, cancel=None) -> Dataset:
    pairs = simulate_batch(batch, cfg.sim, seed, space=cfg.space, cancel=cancel)
    return Dataset.from_pairs(pairs, cfg.space, cfg.train.input_bins)


def _phase0_core(cfg: RunConfig, plan: PhasePlan, cancel=None):
    """Uniformly sampled train/val/test data; identical across workflow modes."""
    seed = cfg.seed
    train_ds = _simulate_dataset(
        sample_uniform(cfg.space, equal_class_counts(plan.train0), derive_seed(seed, _TAG_SAMPLE_TRAIN0)),
        cfg, derive_seed(seed, _TAG_SIM_TRAIN0), cancel)
    val_ds = _simulate_dataset(
        sample_uniform(cfg.space, equal_class_counts(plan.val_size), derive_seed(seed, _TAG_SAMPLE_VAL)),
        cfg, derive_seed(seed, _TAG_SIM_VAL), cancel)
    test_ds = _simulate_dataset(
        sample_uniform(cfg.space, equal_class_counts(plan.test_size), derive_seed(seed, _TAG_SAMPLE_TEST)),
        cfg, derive_seed(seed, _TAG_SIM_TEST), cancel)
    return train_ds, val_ds, test_ds


def _build_study(cfg: RunConfig, plan: PhasePlan, cancel=None) -> alpolicy.StudySet:
    return alpolicy.StudySet.build(cfg.space, plan.study_size, cfg.sim,
                                   derive_seed(cfg.seed, _TAG_SIM_STUDY), cancel)


def _train_phase(model: ModelState, store_train: Dataset, val: Dataset, cfg: RunConfig,
                 epochs: int, phase: int, cancel=None):
    tcfg = replace(cfg.train, seed=derive_seed(cfg.seed, _TAG_TRAIN, phase))
    return nnet.train(model, store_train, val, tcfg, epochs, cancel=cancel)


def _prior_from_config(cfg: RunConfig) -> alpolicy.Prior:
    if cfg.al.prior == "truncgauss":
        return alpolicy.TruncGaussianPrior(cfg.space, cfg.al.prior_center_frac, cfg.al.prior_scale_frac)
    return alpolicy.UniformPrior(cfg.space)


def _al_task(model: ModelState, store: DatasetStore, cfg: RunConfig, n: int, phase: int):
    """Weights -> density -> sampled parameter batch, plus the density for diagnostics."""
    weights = alpolicy.compute_weights(model, store.study)
    dens = alpolicy.build_density(store.study, weights, _prior_from_config(cfg), cfg.al.tau_scale)
    batch = alpolicy.sample(dens, n, derive_seed(cfg.seed, _TAG_AL, phase))
    return batch, dens


def _phase_metrics(model: ModelState, test: Dataset, train_size: int, phase: int) -> dict:
    class_loss, mse = nnet.evaluate(model, test)
    return {"phase": phase, "train_size": train_size, "class_loss": class_loss, "mse": mse}


def _finish_report(mode: str, cfg: RunConfig, log: EventLog, phases, histories) -> RunReport:
    totals = {
        "total_ms": max(rec.end_ms for rec in log.records),
        "final_class_loss": phases[-1]["class_loss"],
        "final_mse": phases[-1]["mse"],
    }
    return RunReport(mode, cfg.seed, list(log.records), phases, totals, histories)


def run_baseline(cfg: RunConfig, out_dir=None) -> RunReport:
    """Bulk workflow: one uniform simulation task, one training task."""
    cfg.validate()
    plan = PhasePlan.from_config(cfg)
    n_train = cfg.workflow.baseline_train or plan.train0
    epochs = cfg.workflow.baseline_epochs or plan.epochs[0]
    log = EventLog()
    with log.task("S0", pool="sim"):
        train_ds = _simulate_dataset(
            sample_uniform(cfg.space, equal_class_counts(n_train), derive_seed(cfg.seed, _TAG_SAMPLE_TRAIN0)),
            cfg, derive_seed(cfg.seed, _TAG_SIM_TRAIN0))
        val_ds = _simulate_dataset(
            sample_uniform(cfg.space, equal_class_counts(plan.val_size), derive_seed(cfg.seed, _TAG_SAMPLE_VAL)),
            cfg, derive_seed(cfg.seed, _TAG_SIM_VAL))
        test_ds = _simulate_dataset(
            sample_uniform(cfg.space, equal_class_counts(plan.test_size), derive_seed(cfg.seed, _TAG_SAMPLE_TEST)),
            cfg, derive_seed(cfg.seed, _TAG_SIM_TEST))
    histories = {}
    with log.task("T0", pool="train"):
        model = ModelState.init(train_ds.X.shape[1], cfg.train.hidden,
                                derive_seed(cfg.seed, _TAG_MODEL_INIT))
        model, histories["T0"] = _train_phase(model, train_ds, val_ds, cfg, epochs, 0)
        phases = [_phase_metrics(model, test_ds, len(train_ds), 0)]
    report = _finish_report("baseline", cfg, log, phases, histories)
    _emit_outputs(report, out_dir)
    return report


def run_serial(cfg: RunConfig, out_dir=None) -> RunReport:
    """Strictly ordered AL workflow: AL_k -> S_k -> T_k after T_{k-1}."""
    cfg.validate()
    plan = PhasePlan.from_config(cfg)
    log = EventLog()
    with log.task("S0", pool="sim"):
        train_ds, val_ds, test_ds = _phase0_core(cfg, plan)
        study = _build_study(cfg, plan)
    store = DatasetStore(val_ds, test_ds, study, [train_ds])
    frozen = store.frozen_digests()
    histories = {}
    phases = []
    with log.task("T0", pool="train"):
        model = ModelState.init(train_ds.X.shape[1], cfg.train.hidden,
                                derive_seed(cfg.seed, _TAG_MODEL_INIT))
        model, histories["T0"] = _train_phase(model, store.train_union(), val_ds, cfg,
                                              plan.epochs[0], 0)
        phases.append(_phase_metrics(model, test_ds, plan.train0, 0))

    for k in range(1, plan.n_phases):
        with log.task(f"AL{k}", pool="sim"):
            batch, dens = _al_task(model, store, cfg, plan.shard_sizes[k - 1], k)
            _emit_al_diagnostics(dens, k, cfg.seed, out_dir)
        with log.task(f"S{k}", pool="sim"):
            store.add_shard(_simulate_dataset(batch, cfg, derive_seed(cfg.seed, _TAG_SIM_SHARD, k)))
        with log.task(f"T{k}", pool="train"):
            train_all = store.train_union()
            model, histories[f"T{k}"] = _train_phase(model, train_all, val_ds, cfg,
                                                     plan.epochs[k], k)
            phases.append(_phase_metrics(model, test_ds, len(train_all), k))
        if store.frozen_digests() != frozen:
            raise WorkflowError("frozen datasets (val/test/study) were modified during the run")

    report = _finish_report("serial", cfg, log, phases, histories)
    _emit_outputs(report, out_dir)
    return report


def _parallel_group(log: EventLog, k: int, train_member, sim_member):
    """Run a training member and a simulation member concurrently.

    Members are (name, pool, fn) with fn(cancel_event); a failure in one sets
    the shared cancel event so the partner aborts at its next checkpoint, and
    the group re-raises the first error after both members finished.
    """
    cancel = threading.Event()
    results = {}
    errors = {}

    def wrap(name, pool, fn):
        def runner():
            try:
                with log.task(name, pool):
                    results[name] = fn(cancel)
            except BaseException as err:  # noqa: BLE001 - partner must be cancelled
                errors[name] = err
                cancel.set()
        return threading.Thread(target=runner, name=f"pg{k}-{name}")

    start = log.now_ms()
    threads = [wrap(*train_member), wrap(*sim_member)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    log.append(TaskRecord(f"PG{k}", start, log.now_ms(), "sim+train"))
    if errors:
        name, err = next(iter(errors.items()))
        raise WorkflowError(f"parallel group PG{k} aborted: {name} failed: {err}") from err
    return results


def run_streaming(cfg: RunConfig, out_dir=None) -> RunReport:
    """Pseudo-streaming workflow: S_k' runs concurrently with T_k on the sim pool.

    Phase 0 simulates the study set in S0' overlapped with T0; intermediate
    phases draw double-size AL batches, simulate one half up front (S_k) and
    the other half (S_k') during training; the last phase simulates its whole
    batch and trains alone.
    """
    cfg.validate()
    plan = PhasePlan.from_config(cfg)
    log = EventLog()
    with log.task("S0", pool="sim"):
        train_ds, val_ds, test_ds = _phase0_core(cfg, plan)

    histories = {}
    phases = []
    state = {}

    def t0_member(cancel):
        model = ModelState.init(train_ds.X.shape[1], cfg.train.hidden,
                                derive_seed(cfg.seed, _TAG_MODEL_INIT))
        model, hist = _train_phase(model, train_ds, val_ds, cfg, plan.epochs[0], 0, cancel=cancel)
        return model, hist

    def s0p_member(cancel):
        return _build_study(cfg, plan, cancel=cancel)

    results = _parallel_group(log, 0, ("T0", "train", t0_member), ("S0'", "sim", s0p_member))
    model, histories["T0"] = results["T0"]
    study = results["S0'"]
    store = DatasetStore(val_ds, test_ds, study, [train_ds])
    frozen = store.frozen_digests()
    phases.append(_phase_metrics(model, test_ds, plan.train0, 0))

    pending_half = None  # dataset simulated by the previous phase's S_k'
    for k in range(1, plan.n_phases):
        if pending_half is not None:
            store.add_shard(pending_half)
            pending_half = None
        last = k == plan.n_phases - 1
        with log.task(f"AL{k}", pool="sim"):
            batch, dens = _al_task(model, store, cfg, plan.shard_sizes[k - 1], k)
            _emit_al_diagnostics(dens, k, cfg.seed, out_dir)
        if last:
            with log.task(f"S{k}", pool="sim"):
                store.add_shard(_simulate_dataset(batch, cfg, derive_seed(cfg.seed, _TAG_SIM_SHARD, k)))
            with log.task(f"T{k}", pool="train"):
                train_all = store.train_union()
                model, histories[f"T{k}"] = _train_phase(model, train_all, val_ds, cfg,
                                                         plan.epochs[k], k)
                phases.append(_phase_metrics(model, test_ds, len(train_all), k))
        else:
            half = len(batch) // 2
            first, second = batch.take(np.arange(half)), batch.take(np.arange(half, len(batch)))
            with log.task(f"S{k}", pool="sim"):
                store.add_shard(_simulate_dataset(first, cfg, derive_seed(cfg.seed, _TAG_SIM_SHARD, k)))
            train_all = store.train_union()

            def tk_member(cancel, _model=model, _train=train_all, _k=k):
                return _train_phase(_model, _train, val_ds, cfg, plan.epochs[_k], _k, cancel=cancel)

            def skp_member(cancel, _second=second, _k=k):
                return _simulate_dataset(_second, cfg,
                                         derive_seed(cfg.seed, _TAG_SIM_SHARD, 100 + _k), cancel)

            results = _parallel_group(log, k, (f"T{k}", "train", tk_member),
                                      (f"S{k}'", "sim", skp_member))
            model, histories[f"T{k}"] = results[f"T{k}"]
            pending_half = results[f"S{k}'"]
            phases.append(_phase_metrics(model, test_ds, len(train_all), k))
        if store.frozen_digests() != frozen:
            raise WorkflowError("frozen datasets (val/test/study) were modified during the run")

    report = _finish_report("streaming", cfg, log, phases, histories)
    _emit_outputs(report, out_dir)
    return report


_RUNNERS = {"baseline": run_baseline, "serial": run_serial, "streaming": run_streaming}


def run_workflow(cfg: RunConfig, out_dir=None) -> RunReport:
    return _RUNNERS[cfg.workflow.mode](cfg, out_dir=out_dir)


def _emit_al_diagnostics(dens, phase: int, seed: int, out_dir) -> None:
    if out_dir:
        alpolicy.write_al_diagnostics(f"{out_dir}/al_phase{phase}_seed{seed}.csv", dens)


def _emit_outputs(report: RunReport, out_dir) -> None:
    if out_dir:
        for name, hist in report.histories.items():
            nnet.write_history(f"{out_dir}/history_{name}_seed{report.seed}.csv", hist)


# ---------------------------------------------------------------------------
# Run comparison
# ---------------------------------------------------------------------------

def _canonical_task_order(names):
    # Table-style ordering per phase: AL_k, S_k, T_k, S_k', PG_k.
    def key(name):
        base = name.rstrip("'")
        kind = base.rstrip("0123456789")
        num = int(base[len(kind):] or "0")
        if name.endswith("'"):
            rank = 2
        else:
            rank = {"AL": -1, "S": 0, "T": 1, "PG": 3}.get(kind, 4)
        return (num, rank)
    return sorted(names, key=key)


def compare_runs(reports) -> dict:
    """Per-phase metric deltas, a task-time table and the total-time speedup."""
    reports = list(reports)
    if len(reports) < 2:
        raise ValueError("compare_runs needs at least two reports")
    n_phases = {len(r.phases) for r in reports}
    if len(n_phases) != 1:
        raise ValueError(f"reports have mismatched phase counts: {sorted(n_phases)}")

    by_mode = {r.mode: r for r in reports}
    if "serial" in by_mode and "streaming" in by_mode:
        ref, other = by_mode["serial"], by_mode["streaming"]
    else:
        ref, other = reports[0], reports[1]

    phase_rows = []
    for p_ref, p_other in zip(ref.phases, other.phases):
        phase_rows.append({
            "phase": p_ref["phase"],
            "train_size": [p_ref["train_size"], p_other["train_size"]],
            "class_loss": [p_ref["class_loss"], p_other["class_loss"]],
            "mse": [p_ref["mse"], p_other["mse"]],
            "class_loss_delta": p_other["class_loss"] - p_ref["class_loss"],
            "mse_delta": p_other["mse"] - p_ref["mse"],
        })

    names = []
    for r in (ref, other):
        for t in r.tasks:
            if t.name not in names:
                names.append(t.name)
    task_table = []
    for name in _canonical_task_order(names):
        row = {"task": name}
        for label, r in (("a", ref), ("b", other)):
            try:
                row[label + "_ms"] = r.tasks[[t.name for t in r.tasks].index(name)].duration_ms
            except ValueError:
                row[label + "_ms"] = None
        task_table.append(row)

    speedup = ref.totals["total_ms"] / other.totals["total_ms"]
    return {
        "modes": [ref.mode, other.mode],
        "phases": phase_rows,
        "tasks": task_table,
        "total_ms": [ref.totals["total_ms"], other.totals["total_ms"]],
        "speedup": speedup,
    }


def aggregate_reports(reports, failures=()) -> dict:
    """Mean/std of every metric over seeds, plus any failed-seed notes."""
    reports = list(reports)
    agg = {"n_runs": len(reports), "failures": list(failures)}
    if reports:
        per_phase = []
        for i in range(len(reports[0].phases)):
            mses = np.array([r.phases[i]["mse"] for r in reports])
            closses = np.array([r.phases[i]["class_loss"] for r in reports])
            per_phase.append({
                "phase": reports[0].phases[i]["phase"],
                "mse_mean": float(mses.mean()), "mse_std": float(mses.std()),
                "class_loss_mean": float(closses.mean()), "class_loss_std": float(closses.std()),
            })
        totals = np.array([r.totals["total_ms"] for r in reports])
        agg["phases"] = per_phase
        agg["total_ms_mean"] = float(totals.mean())
        agg["total_ms_std"] = float(totals.std())
    return agg
