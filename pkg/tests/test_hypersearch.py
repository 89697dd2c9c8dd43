import numpy as np
import pytest

from adaptcl.data import build_stream, make_synthetic
from adaptcl.hypersearch import SearchPolicy, maximal_plasticity_search, stability_decay
from adaptcl.nn import build_model
from adaptcl.regularizers import Lambdas, Method, RegularizerState
from adaptcl.trainer import OptimizerConfig, consolidate_after_task, train_task

CFG = OptimizerConfig(max_epochs=5, batch_size=32)


def _setup(sep=40.0, num_classes=4, seed=0):
    r = np.random.default_rng(seed)
    stream = build_stream(make_synthetic(num_classes, 4, 40, sep, r), 2, "alphabetical", 0)
    model = build_model(4, hidden=8, rng=r)
    model.spawn_task(2, 4, r)
    return model, stream


def test_policy_defaults_and_validation():
    p = SearchPolicy()
    assert p.lr_grid(0) == (0.5, 0.1, 0.05)
    assert p.lr_grid(3) == (0.1, 0.05, 0.01, 0.005, 0.001)
    assert p.accuracy_fraction == 0.95 and p.max_halvings == 8
    with pytest.raises(ValueError):
        SearchPolicy(first_task_lrs=(0.1, 0.5))
    with pytest.raises(ValueError):
        SearchPolicy(later_task_lrs=())
    with pytest.raises(ValueError):
        SearchPolicy(accuracy_fraction=0.0)


def test_first_task_grid_is_exact():
    model, stream = _setup()
    _, _, rows = maximal_plasticity_search(model, stream, 0, SearchPolicy(), CFG, seed=0)
    assert [r.candidate for r in rows] == ["lr=0.5", "lr=0.1", "lr=0.05"]


def test_ties_go_to_largest_lr():
    model, stream = _setup()
    lr, acc, rows = maximal_plasticity_search(model, stream, 0, SearchPolicy(), CFG, seed=0)
    assert all(r.accuracy == 1.0 for r in rows)
    assert lr == 0.5 and acc >= 0.99


def test_grid_of_size_one():
    model, stream = _setup(sep=2.0)
    lr, acc, rows = maximal_plasticity_search(model, stream, 0, SearchPolicy(), CFG, seed=0, grid=[0.01])
    assert lr == 0.01 and acc == rows[0].accuracy


def test_search_does_not_touch_model():
    model, stream = _setup(sep=2.0)
    before = model.checksum()
    maximal_plasticity_search(model, stream, 0, SearchPolicy(), CFG, seed=0)
    assert model.checksum() == before


def _second_task(method):
    model, stream = _setup(sep=3.0, seed=1)
    rng = np.random.default_rng(0)
    state = RegularizerState(Method(method))
    train_task(model, stream, 0, method, Lambdas(), CFG, rng, state)
    consolidate_after_task(model, state, 0, stream.split(0, "train")[0], rng)
    model.spawn_task(2, 4, rng)
    return model, stream, state


def test_zero_lambda_accepted_immediately():
    model, stream, state = _second_task("ewc")
    lr, ft, _ = maximal_plasticity_search(model, stream, 1, SearchPolicy(), CFG, seed=4, grid=[0.05])
    res = stability_decay(model, stream, 1, "ewc", Lambdas(), lr, ft, SearchPolicy(), CFG, state, seed=4)
    assert res.trace == [Lambdas()]
    assert not res.exhausted
    assert res.report.final_val_acc == ft


def test_strict_halving_and_exhaustion():
    model, stream, state = _second_task("ewc")
    before = model.checksum()
    policy = SearchPolicy(max_halvings=3)
    # an unreachable threshold forces every halving
    res = stability_decay(model, stream, 1, "ewc", Lambdas(weight=10000.0), 0.05, 2.0, policy, CFG, state, seed=0)
    assert [lam.weight for lam in res.trace] == [10000.0, 5000.0, 2500.0, 1250.0]
    assert res.exhausted
    assert [r.decision for r in res.rows] == ["halve", "halve", "halve", "exhausted"]
    assert model.checksum() == before
    assert len(state.anchors) == 1


def test_lwf_reg_lambdas_halve_jointly():
    model, stream, state = _second_task("lwf_a")
    policy = SearchPolicy(max_halvings=2)
    res = stability_decay(model, stream, 1, "lwf_a", policy.lambda_start[Method.LWF_A], 0.05, 2.0, policy, CFG,
                          state, seed=0)
    assert res.trace == [Lambdas(0, 5.0, 0.5), Lambdas(0, 2.5, 0.25), Lambdas(0, 1.25, 0.125)]


def test_acceptance_soundness():
    model, stream, state = _second_task("ewc")
    lr, ft, _ = maximal_plasticity_search(model, stream, 1, SearchPolicy(), CFG, seed=2)
    res = stability_decay(model, stream, 1, "ewc", Lambdas(weight=10000.0), lr, ft, SearchPolicy(), CFG, state,
                          seed=2)
    assert res.exhausted or res.report.final_val_acc >= 0.95 * ft
    for a, b in zip(res.trace, res.trace[1:]):
        assert b.weight == a.weight / 2
