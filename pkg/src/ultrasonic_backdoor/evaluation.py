"""Attack metrics and the seeded experiment sweep.

Seeds are derived with SHA-256 over a canonical JSON encoding of
``[master_seed, *coordinates]``; the first eight digest bytes (little-endian)
form the 64-bit seed.  A cell's seed therefore depends only on the master
seed, the cell coordinates and the repeat index, never on sweep order.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from decimal import Decimal
from pathlib import Path

import numpy as np

from .classifier import ModelConfig, TrainConfig, TrainedModel, evaluate_accuracy, predict_classes, train
from .dataset import (
    TEST,
    TRAIN,
    VAL,
    FeatureExtractor,
    LabeledDataset,
    PoisonConfig,
    load_dataset,
    poison,
    poison_rate,
    stamp_test_set,
)
from .errors import EvaluationError
from .features import MfccConfig
from .trigger import Placement, TriggerSpec

log = logging.getLogger(__name__)

REPORT_COLUMNS = (
    "experiment_id",
    "seed",
    "repeat",
    "dataset",
    "n_classes",
    "model",
    "duration_ms",
    "placement",
    "continuity",
    "amplitude",
    "n_poison",
    "poison_rate",
    "clean_baseline",
    "clean_accuracy",
    "clean_accuracy_drop",
    "asrt_all",
    "asrt_excl",
    "epochs_run",
    "wall_time_s",
)

AGGREGATE_METRICS = ("clean_baseline", "clean_accuracy", "clean_accuracy_drop", "asrt_all", "asrt_excl", "epochs_run")

PAPER_DURATIONS_MS = (20, 40, 60, 80, 250, 500, 750, 1000)
POSITIONS = ("beginning", "middle", "end", "noncontinuous")


def derive_seed(master_seed: int, *coords) -> int:
    blob = json.dumps([int(master_seed), *coords], sort_keys=True, separators=(",", ":")).encode()
    return int.from_bytes(hashlib.sha256(blob).digest()[:8], "little")


# ---------------------------------------------------------------- metrics

def attack_success_rate(model: TrainedModel, stamped_features, true_labels, target: int):
    """(asrt_all, asrt_excl) on a stamped test set.

    ``asrt_excl`` ignores items whose true label already is the target and is
    None when no such items remain.
    """
    true_labels = np.asarray(true_labels)
    if true_labels.size == 0:
        raise EvaluationError("attack success rate needs a non-empty stamped test set")
    hits = predict_classes(model, stamped_features) == target
    asrt_all = float(np.mean(hits))
    others = true_labels != target
    asrt_excl = float(np.mean(hits[others])) if others.any() else None
    return asrt_all, asrt_excl


def accuracy_drop(clean_baseline: float, accuracy: float) -> float:
    """``clean_baseline - accuracy``; positive means the backdoor cost accuracy.

    The subtraction is done in decimal on the shortest float representations,
    so tabulated values such as 90.13 and 90.22 give exactly -0.09.
    """
    return float(Decimal(repr(float(clean_baseline))) - Decimal(repr(float(accuracy))))


def clean_accuracy_drop(clean_baseline: float, backdoored: TrainedModel, clean_features, clean_labels) -> float:
    return accuracy_drop(clean_baseline, evaluate_accuracy(backdoored, clean_features, clean_labels))


# ---------------------------------------------------------------- reports

@dataclass
class ExperimentReport:
    experiment_id: str
    seed: int
    repeat: int
    dataset: str
    n_classes: int
    model: str
    duration_ms: float
    placement: str
    continuity: str
    amplitude: float
    n_poison: int
    poison_rate: float
    clean_baseline: float
    clean_accuracy: float
    clean_accuracy_drop: float
    asrt_all: float
    asrt_excl: float | None
    epochs_run: int
    wall_time_s: float

    def row(self) -> dict:
        return {k: _fmt(v) for k, v in asdict(self).items()}


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def read_reports(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- sweep spec

@dataclass(frozen=True)
class Cell:
    duration_ms: float
    position: str
    n_poison: int

    def trigger(self, spec: SweepSpec) -> TriggerSpec:
        nc = self.position == "noncontinuous"
        return TriggerSpec(
            frequency=spec.frequency,
            sample_rate=spec.sample_rate,
            duration_ms=self.duration_ms,
            amplitude=spec.amplitude,
            placement=Placement.MIDDLE if nc else Placement(self.position),
            continuous=not nc,
            n_pulses=spec.n_pulses,
        )

    def experiment_id(self, model: str) -> str:
        return f"{model}_d{self.duration_ms:g}_{self.position}_n{self.n_poison}"


@dataclass(frozen=True)
class SweepSpec:
    """One experiment grid.

    ``poison_counts`` are absolute; ``poison_rates`` (fractions of the train
    split, rounded to the nearest count) are used when counts are empty.
    """

    data_root: str
    target_class: str = "off"
    durations_ms: tuple[float, ...] = (20, 1000)
    positions: tuple[str, ...] = ("middle",)
    poison_counts: tuple[int, ...] = (20, 40, 60, 80)
    poison_rates: tuple[float, ...] = ()
    master_seed: int = 0
    frequency: float = 21_000.0
    sample_rate: int = 44_100
    amplitude: float = 0.1
    n_pulses: int = 5
    min_duration_s: float = 1.0
    dataset_name: str = ""
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    mfcc: MfccConfig = field(default_factory=MfccConfig)

    def __post_init__(self):
        for d in self.durations_ms:
            if not 20 <= d <= 1000:
                raise ValueError(f"trigger duration {d} ms outside [20, 1000]")
        for p in self.positions:
            if p not in POSITIONS:
                raise ValueError(f"unknown position {p!r}; choose from {POSITIONS}")
        if not self.poison_counts and not self.poison_rates:
            raise ValueError("need poison_counts or poison_rates")

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | Path | None = None) -> SweepSpec:
        d = dict(d)
        model = d.pop("model", {}) or {}
        trn = d.pop("train", {}) or {}
        mf = d.pop("mfcc", {}) or {}
        for key in ("durations_ms", "positions", "poison_counts", "poison_rates"):
            if key in d:
                d[key] = tuple(d[key])
        if base_dir is not None and "data_root" in d and not Path(d["data_root"]).is_absolute():
            d["data_root"] = str(Path(base_dir) / d["data_root"])
        return cls(model=ModelConfig(**model), train=TrainConfig(**trn), mfcc=MfccConfig(**mf), **d)

    @classmethod
    def from_json(cls, path: str | Path) -> SweepSpec:
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), base_dir=path.parent)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    def cells(self, n_train: int) -> list[Cell]:
        counts = list(self.poison_counts) or [int(round(r * n_train)) for r in self.poison_rates]
        return [Cell(float(d), p, int(n)) for d in self.durations_ms for p in self.positions for n in counts]


# ---------------------------------------------------------------- sweep

class _Context:
    """Per-process dataset/feature state shared by all cells of a sweep."""

    def __init__(self, spec: SweepSpec, cache_dir: str | Path | None):
        self.spec = spec
        self.fx = FeatureExtractor(spec.mfcc, cache_dir)
        self._datasets: dict[int, LabeledDataset] = {}

    def dataset(self, repeat: int) -> LabeledDataset:
        if repeat not in self._datasets:
            seed = derive_seed(self.spec.master_seed, "split", repeat)
            self._datasets[repeat] = load_dataset(
                self.spec.data_root, self.spec.min_duration_s, seed, sample_rate=self.spec.sample_rate
            )
        return self._datasets[repeat]

    def model_config(self, ds: LabeledDataset) -> ModelConfig:
        frames = self.spec.mfcc.n_frames(ds.clip_samples)
        return replace(self.spec.model, n_classes=len(ds.classes), input_shape=(frames, self.spec.mfcc.n_coeffs))

    def fit(self, ds: LabeledDataset, seed: int) -> TrainedModel:
        xtr, ytr = self.fx.split(ds, TRAIN)
        xv, yv = self.fx.split(ds, VAL)
        return train(xtr, ytr, xv, yv, self.model_config(ds), replace(self.spec.train, seed=seed))


def run_cell(ctx: _Context, cell: Cell, repeat: int, baseline: float) -> tuple[ExperimentReport, TrainedModel]:
    """Train one backdoored model and measure it against the clean baseline."""
    spec = ctx.spec
    start = time.perf_counter()
    ds = ctx.dataset(repeat)
    model_name = spec.model.architecture.value
    seed = derive_seed(spec.master_seed, "cell", model_name, cell.duration_ms, cell.position, cell.n_poison, repeat)
    trig = cell.trigger(spec)
    poisoned = poison(ds, PoisonConfig(cell.n_poison, spec.target_class, trig))
    model = ctx.fit(poisoned, seed)

    xte, yte = ctx.fx.split(ds, TEST)
    clean_acc = evaluate_accuracy(model, xte, yte)
    xs, ys = ctx.fx.split(stamp_test_set(ds, trig), TEST)
    asrt_all, asrt_excl = attack_success_rate(model, xs, ys, ds.class_index(spec.target_class))
    report = ExperimentReport(
        experiment_id=cell.experiment_id(model_name),
        seed=seed,
        repeat=repeat,
        dataset=spec.dataset_name or Path(spec.data_root).name,
        n_classes=len(ds.classes),
        model=model_name,
        duration_ms=cell.duration_ms,
        placement=trig.placement_label,
        continuity=trig.continuity_label,
        amplitude=spec.amplitude,
        n_poison=cell.n_poison,
        poison_rate=poison_rate(ds, cell.n_poison),
        clean_baseline=baseline,
        clean_accuracy=clean_acc,
        clean_accuracy_drop=accuracy_drop(baseline, clean_acc),
        asrt_all=asrt_all,
        asrt_excl=asrt_excl,
        epochs_run=model.epochs_run,
        wall_time_s=round(time.perf_counter() - start, 3),
    )
    return report, model


_WORKER_CTX: _Context | None = None


def _worker_init(spec: SweepSpec, cache_dir):
    global _WORKER_CTX
    _WORKER_CTX = _Context(spec, cache_dir)


def _worker_run(cell: Cell, repeat: int, baseline: float):
    try:
        return run_cell(_WORKER_CTX, cell, repeat, baseline)[0], None
    except Exception as exc:  # recorded per cell; the sweep continues
        return None, f"{type(exc).__name__}: {exc}"


def aggregate(reports: list[ExperimentReport]) -> dict:
    """Mean and sample standard deviation of each metric across repeats."""
    out = {"experiment_id": reports[0].experiment_id, "n_repeats": len(reports)}
    for name in AGGREGATE_METRICS:
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        out[f"{name}_mean"] = statistics.fmean(vals) if vals else None
        out[f"{name}_std"] = statistics.stdev(vals) if len(vals) > 1 else (0.0 if vals else None)
    return out


AGGREGATE_COLUMNS = ("experiment_id", "n_repeats") + tuple(
    f"{m}_{s}" for m in AGGREGATE_METRICS for s in ("mean", "std")
)


class _CsvStream:
    def __init__(self, path: Path, columns):
        self.fh = open(path, "w", newline="")
        self.writer = csv.DictWriter(self.fh, fieldnames=columns, lineterminator="\n")
        self.writer.writeheader()
        self.fh.flush()

    def write(self, row: dict):
        self.writer.writerow({k: _fmt(v) for k, v in row.items()})
        self.fh.flush()

    def close(self):
        self.fh.close()


def run_sweep(
    grid: SweepSpec,
    repeats: int = 5,
    out: str | Path = "sweep_out",
    *,
    workers: int = 1,
    cache_dir: str | Path | None = None,
    model_sink: dict | None = None,
    progress=None,
    cells: list[Cell] | None = None,
) -> list[ExperimentReport]:
    """Run every grid cell ``repeats`` times.

    Writes ``reports.csv`` (one row per cell and repeat, streamed),
    ``aggregates.csv`` (one row per cell), ``failures.csv`` and the resolved
    ``sweep.json`` into ``out``.  A clean baseline is trained once per
    (model, repeat) and shared by every cell of that repeat.  ``model_sink``
    collects trained backdoored models keyed by (experiment_id, repeat);
    it is only filled when ``workers == 1``.  ``cells`` replaces the full
    grid product with an explicit list of cells.
    """
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "sweep.json").write_text(json.dumps({"spec": grid.to_dict(), "repeats": repeats}, indent=2, sort_keys=True))

    ctx = _Context(grid, cache_dir)
    model_name = grid.model.architecture.value
    if cells is None:
        cells = grid.cells(len(ctx.dataset(0).indices(TRAIN)))

    baselines: dict[int, float] = {}
    for r in range(repeats):
        ds = ctx.dataset(r)
        clean = ctx.fit(ds, derive_seed(grid.master_seed, "baseline", model_name, r))
        baselines[r] = evaluate_accuracy(clean, *ctx.fx.split(ds, TEST))
        if progress:
            progress(f"baseline repeat {r}: clean accuracy {baselines[r]:.4f}")

    reports_csv = _CsvStream(out / "reports.csv", REPORT_COLUMNS)
    agg_csv = _CsvStream(out / "aggregates.csv", AGGREGATE_COLUMNS)
    fail_csv = _CsvStream(out / "failures.csv", ("experiment_id", "repeat", "error"))
    reports: list[ExperimentReport] = []
    try:
        jobs = [(c, r) for c in cells for r in range(repeats)]
        if workers > 1:
            with ProcessPoolExecutor(workers, initializer=_worker_init, initargs=(grid, cache_dir)) as pool:
                futures = [pool.submit(_worker_run, c, r, baselines[r]) for c, r in jobs]
                results = [f.result() for f in futures]
        else:
            results = None

        for cell in cells:
            cell_reports = []
            for r in range(repeats):
                if results is not None:
                    rep, err = results[jobs.index((cell, r))]
                else:
                    try:
                        rep, model = run_cell(ctx, cell, r, baselines[r])
                        err = None
                        if model_sink is not None:
                            model_sink[(rep.experiment_id, r)] = model
                    except Exception as exc:  # recorded per cell; the sweep continues
                        rep, err = None, f"{type(exc).__name__}: {exc}"
                if err is not None:
                    log.error("cell %s repeat %d failed: %s", cell, r, err)
                    fail_csv.write({"experiment_id": cell.experiment_id(model_name), "repeat": r, "error": err})
                    continue
                reports_csv.write(rep.row())
                cell_reports.append(rep)
                if progress:
                    progress(f"{rep.experiment_id} r{r}: asrt_excl={rep.asrt_excl} clean={rep.clean_accuracy:.4f}")
            if cell_reports:
                agg_csv.write(aggregate(cell_reports))
            reports.extend(cell_reports)
    finally:
        reports_csv.close()
        agg_csv.close()
        fail_csv.close()
    return reports


def report_field_names() -> tuple[str, ...]:
    return tuple(f.name for f in fields(ExperimentReport))
