import csv
import json
import statistics

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ultrasonic_backdoor.classifier import ModelConfig, TrainConfig, TrainedModel, init_params
from ultrasonic_backdoor.errors import EvaluationError
from ultrasonic_backdoor.evaluation import (
    AGGREGATE_COLUMNS,
    REPORT_COLUMNS,
    Cell,
    SweepSpec,
    accuracy_drop,
    attack_success_rate,
    clean_accuracy_drop,
    derive_seed,
    read_reports,
    report_field_names,
    run_sweep,
)

SPEC_COLUMNS = ("experiment_id, seed, repeat, dataset, n_classes, model, duration_ms, placement, continuity, "
                "amplitude, n_poison, poison_rate, clean_baseline, clean_accuracy, clean_accuracy_drop, asrt_all, "
                "asrt_excl, epochs_run, wall_time_s").split(", ")


def constant_model(n_classes, cls, shape=(4, 3)):
    cfg = ModelConfig(architecture="linear_softmax", n_classes=n_classes, input_shape=shape)
    params = init_params(cfg, np.random.default_rng(0))
    params["out.kernel"][:] = 0
    params["out.bias"][cls] = 5.0
    return TrainedModel(params, cfg)


def random_linear(n_classes, seed, shape=(4, 3)):
    cfg = ModelConfig(architecture="linear_softmax", n_classes=n_classes, input_shape=shape)
    return TrainedModel(init_params(cfg, np.random.default_rng(seed)), cfg)


class TestMetrics:
    def test_always_target(self, rng):
        x = rng.standard_normal((10, 4, 3))
        y = rng.integers(0, 4, 10)
        all_, excl = attack_success_rate(constant_model(4, 2), x, y, 2)
        assert all_ == 1.0 and (excl == 1.0 or excl is None)

    def test_only_target_items(self, rng):
        x = rng.standard_normal((5, 4, 3))
        all_, excl = attack_success_rate(constant_model(4, 1), x, np.full(5, 2), 2)
        assert all_ == 0.0
        all_, excl = attack_success_rate(constant_model(4, 1), x, np.full(5, 1), 1)
        assert all_ == 1.0 and excl is None

    def test_empty(self):
        with pytest.raises(EvaluationError):
            attack_success_rate(constant_model(3, 0), np.zeros((0, 4, 3)), [], 0)

    @settings(max_examples=60, deadline=None)
    @given(st.integers(0, 10_000), st.integers(2, 6), st.integers(1, 40))
    def test_asrt_bounds(self, seed, n_classes, n):
        rng = np.random.default_rng(seed)
        y = rng.integers(0, n_classes, n)
        target = int(rng.integers(n_classes))
        all_, excl = attack_success_rate(random_linear(n_classes, seed), rng.standard_normal((n, 4, 3)), y, target)
        assert 0.0 <= all_ <= 1.0
        if excl is not None:
            assert 0.0 <= excl <= 1.0
            assert abs(all_ - excl) <= np.mean(y == target) + 1e-12

    def test_paper_drops(self):
        # baseline/backdoored clean accuracies of two rows of the paper's results table
        assert accuracy_drop(90.13, 90.22) == -0.09
        assert accuracy_drop(95.14, 93.52) == 1.62

    @settings(max_examples=200)
    @given(st.floats(0, 1))
    def test_identical_is_zero(self, a):
        assert accuracy_drop(a, a) == 0.0

    def test_sign_convention(self):
        assert accuracy_drop(0.9, 0.8) > 0 > accuracy_drop(0.8, 0.9)

    def test_clean_accuracy_drop(self, rng):
        x = rng.standard_normal((4, 4, 3))
        assert clean_accuracy_drop(1.0, constant_model(3, 0), x, [0, 0, 1, 2]) == 0.5

    def test_derive_seed(self):
        a = derive_seed(0, "cell", "small_conv", 20.0, "middle", 13, 0)
        assert a == derive_seed(0, "cell", "small_conv", 20.0, "middle", 13, 0)
        assert 0 <= a < 2**64
        others = {derive_seed(m, "cell", r) for m in range(3) for r in range(50)}
        assert len(others) == 150


class TestSpec:
    def test_report_columns(self):
        assert list(REPORT_COLUMNS) == SPEC_COLUMNS
        assert report_field_names() == REPORT_COLUMNS

    @pytest.mark.parametrize("kw", [{"durations_ms": (10,)}, {"durations_ms": (1500,)}, {"positions": ("left",)},
                                    {"poison_counts": (), "poison_rates": ()}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SweepSpec(data_root="x", **kw)

    def test_cells_and_ids(self):
        spec = SweepSpec(data_root="x", durations_ms=(20, 1000), positions=("middle", "noncontinuous"),
                         poison_counts=(), poison_rates=(0.02,))
        cells = spec.cells(640)
        assert len(cells) == 4 and {c.n_poison for c in cells} == {13}
        nc = Cell(20.0, "noncontinuous", 13)
        assert nc.trigger(spec).continuity_label == "noncontinuous5"
        assert nc.experiment_id("small_conv") == "small_conv_d20_noncontinuous_n13"

    def test_json_round_trip(self, tmp_path):
        spec = SweepSpec(data_root="data", model=ModelConfig(architecture="linear_softmax"),
                         train=TrainConfig(max_epochs=3, early_stop_patience=1))
        (tmp_path / "grid.json").write_text(json.dumps(spec.to_dict()))
        back = SweepSpec.from_json(tmp_path / "grid.json")
        assert back.data_root == str(tmp_path / "data")
        assert back.model == spec.model and back.train == spec.train and back.mfcc == spec.mfcc


def tiny_spec(root, **kw):
    base = dict(
        data_root=str(root),
        durations_ms=(20, 1000),
        positions=("middle",),
        poison_counts=(6,),
        model=ModelConfig(architecture="linear_softmax"),
        train=TrainConfig(learning_rate=1e-3, batch_size=16, max_epochs=4, early_stop_patience=2),
        master_seed=11,
    )
    base.update(kw)
    return SweepSpec(**base)


def strip_wall_time(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for r in rows:
        r.pop("wall_time_s", None)
    return rows


@pytest.fixture(scope="module")
def sweep(mini_root, tmp_path_factory):
    out = tmp_path_factory.mktemp("sweep")
    sink = {}
    reports = run_sweep(tiny_spec(mini_root), 3, out, cache_dir=out / "cache", model_sink=sink)
    return reports, out, sink


class TestSweep:
    def test_counts(self, sweep):
        reports, out, sink = sweep
        assert len(reports) == 6 and len(sink) == 6
        assert len(read_reports(out / "reports.csv")) == 6
        with open(out / "aggregates.csv") as fh:
            agg = list(csv.DictReader(fh))
        assert len(agg) == 2 and tuple(agg[0]) == AGGREGATE_COLUMNS
        with open(out / "reports.csv") as fh:
            assert next(csv.reader(fh)) == SPEC_COLUMNS

    def test_report_contents(self, sweep):
        reports, _, _ = sweep
        assert len({r.seed for r in reports}) == 6
        for r in reports:
            assert r.n_classes == 10 and r.n_poison == 6 and r.poison_rate == 6 / 64
            assert r.clean_accuracy_drop == accuracy_drop(r.clean_baseline, r.clean_accuracy)
            for v in (r.clean_accuracy, r.clean_baseline, r.asrt_all, r.asrt_excl):
                assert 0.0 <= v <= 1.0
        # one clean baseline per repeat, shared by all cells of that repeat
        by_repeat = {}
        for r in reports:
            by_repeat.setdefault(r.repeat, set()).add(r.clean_baseline)
        assert all(len(v) == 1 for v in by_repeat.values())

    def test_aggregate_means_exact(self, sweep):
        reports, out, _ = sweep
        with open(out / "aggregates.csv") as fh:
            agg = {row["experiment_id"]: row for row in csv.DictReader(fh)}
        for eid, row in agg.items():
            vals = [r.asrt_all for r in reports if r.experiment_id == eid]
            assert float(row["asrt_all_mean"]) == statistics.fmean(vals)
            assert float(row["asrt_all_std"]) == statistics.stdev(vals)
            assert int(row["n_repeats"]) == 3

    def test_rerun_identical(self, sweep, mini_root, tmp_path):
        _, out, _ = sweep
        run_sweep(tiny_spec(mini_root), 3, tmp_path, cache_dir=out / "cache")
        assert strip_wall_time(tmp_path / "reports.csv") == strip_wall_time(out / "reports.csv")
        assert (tmp_path / "aggregates.csv").read_bytes() != b""
        assert strip_wall_time(tmp_path / "aggregates.csv") == strip_wall_time(out / "aggregates.csv")

    def test_parallel_matches_serial(self, sweep, mini_root, tmp_path):
        _, out, _ = sweep
        run_sweep(tiny_spec(mini_root), 3, tmp_path, workers=2, cache_dir=out / "cache")
        assert strip_wall_time(tmp_path / "reports.csv") == strip_wall_time(out / "reports.csv")

    def test_failures_recorded(self, mini_root, tmp_path):
        spec = tiny_spec(mini_root, durations_ms=(20,), poison_counts=(6, 500))
        reports = run_sweep(spec, 1, tmp_path)
        assert len(reports) == 1
        fails = read_reports(tmp_path / "failures.csv")
        assert len(fails) == 1 and "PoisonConfigError" in fails[0]["error"]

    def test_no_poison_asrt_near_chance(self, mini_root, tmp_path):
        spec = tiny_spec(mini_root, durations_ms=(20,), poison_counts=(0,),
                         train=TrainConfig(learning_rate=1e-3, batch_size=16, max_epochs=30, early_stop_patience=5))
        reports = run_sweep(spec, 5, tmp_path)
        vals = [r.asrt_all for r in reports]
        chance = 1 / 10
        assert abs(statistics.fmean(vals) - chance) <= 3 * statistics.stdev(vals), vals

    def test_repeats_validated(self, mini_root, tmp_path):
        with pytest.raises(ValueError):
            run_sweep(tiny_spec(mini_root), 0, tmp_path)
