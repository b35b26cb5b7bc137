import json

import numpy as np
import pytest

from eproxy.arch import MINI_SPACE, OpKind, SearchSpace
from eproxy.bench import (CountingOracle, TabularBench, ToyTask, TrainConfig, build_bench, build_toy_task,
                          nearest_centroid_accuracy, query, train_full)
from eproxy.rng import Rng

TINY = TrainConfig(epochs=2)


@pytest.fixture(scope="module")
def task():
    return build_toy_task(0)


def test_toy_task_is_deterministic_and_balanced(task):
    again = build_toy_task(0)
    assert task.x_train.tobytes() == again.x_train.tobytes()
    assert task.y_test.tolist() == again.y_test.tolist()
    assert task.x_train.shape == (512, 3, 16, 16) and task.x_test.shape == (256, 3, 16, 16)
    assert np.bincount(task.y_train).tolist() == [128] * 4
    assert np.bincount(task.y_test).tolist() == [64] * 4
    assert task.x_train.min() >= 0 and task.x_train.max() <= 1
    assert not np.array_equal(task.x_train, build_toy_task(1).x_train)


def test_toy_task_is_learnable(task):
    assert nearest_centroid_accuracy(task) > 1 / 4 + 0.1


def test_toy_task_errors():
    with pytest.raises(ValueError):
        build_toy_task(0, num_classes=9)
    with pytest.raises(ValueError):
        build_toy_task(0, n_train=510)


def test_task_save_load(task, tmp_path):
    task.save(tmp_path)
    back = ToyTask.load(tmp_path)
    assert back.x_train.tobytes() == task.x_train.tobytes()
    assert back.y_train.tolist() == task.y_train.tolist()
    assert (back.num_classes, back.seed) == (4, 0)


def test_train_full_is_deterministic(task):
    spec = MINI_SPACE.decode("conv1x1|skip|zero")
    a = train_full(spec, task, Rng(3), TINY)
    b = train_full(spec, task, Rng(3), TINY)
    assert a == b and len(a.loss_trace) == 2 and not a.diverged


def test_train_full_divergence_reports_chance(task):
    spec = MINI_SPACE.decode("conv3x3|conv3x3|conv3x3")
    res = train_full(spec, task, Rng(0), TrainConfig(epochs=1, lr=1e8))
    assert res.diverged and res.test_accuracy == 0.25


@pytest.mark.slow
def test_capacity_ordering_over_three_seeds(task):
    zero = MINI_SPACE.decode("zero|zero|zero")
    conv = MINI_SPACE.decode("conv3x3|conv3x3|conv3x3")
    z = [train_full(zero, task, Rng(s)).test_accuracy for s in range(3)]
    c = [train_full(conv, task, Rng(s)).test_accuracy for s in range(3)]
    assert all(abs(a - 0.25) <= 0.08 for a in z)
    assert np.median(c) >= np.median(z) + 0.1


def test_frozen_bench_properties(bench):
    assert len(bench.entries) == 64 and set(bench.archs()) == {s.encode() for s in MINI_SPACE.enumerate()}
    accs = [e["acc"] for e in bench.entries.values()]
    assert max(accs) - min(accs) >= 0.05
    assert bench.meta["space"]["name"] == "mini" and bench.meta["training"] == TrainConfig().to_dict()
    assert bench.accuracy("conv3x3|conv3x3|conv3x3") >= bench.accuracy("zero|zero|zero") + 0.1
    assert all(e["secs"] == 0.0 for e in bench.entries.values())


def test_query_roundtrip_and_errors(bench):
    spec = MINI_SPACE.decode("conv3x3|skip|zero")
    assert query(bench, spec) is bench.entries[spec.encode()]
    with pytest.raises(KeyError, match="not in the benchmark"):
        bench.query("conv3x3|skip|conv5x5")
    oracle = CountingOracle(bench)
    oracle.query(spec)
    oracle.query("zero|zero|zero")
    assert oracle.count == 2


def test_save_load_roundtrip(bench, tmp_path):
    path = tmp_path / "b.json"
    bench.save(path)
    assert TabularBench.load(path) == bench
    path.write_text(json.dumps({"entries": {}}))
    with pytest.raises(ValueError, match="meta"):
        TabularBench.load(path)


def test_build_is_independent_of_jobs():
    task = build_toy_task(5, n_train=64, n_test=32)
    cfg = TrainConfig(epochs=1, batch_size=32)
    small = SearchSpace("one", (OpKind.ZERO, OpKind.CONV1X1), num_nodes=2)
    serial = build_bench(small, task, 7, cfg)
    parallel = build_bench(small, task, 7, cfg, jobs=2)
    assert serial.to_json() == parallel.to_json()
    assert sorted(serial.entries) == ["conv1x1", "zero"]
