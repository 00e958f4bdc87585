from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mbrobust.classifier import AdadeltaState, PassCounter, init_classifier
from mbrobust.data import Dataset
from mbrobust.nuisance import SeveritySpace, make_basis, sample_uniform
from mbrobust.strategies import (
    METHODS,
    NuisanceSpec,
    StrategyConfig,
    at_pgd,
    expected_passes,
    inner_mat,
    inner_mda,
    inner_mdat,
    inner_mrat,
    inner_mrt,
    mat_start,
    parse_method_name,
    sample_losses,
    train,
    train_step,
    with_method,
)

from conftest import TINY

BASIS = make_basis("snow", 8, 0)
SPACE = SeveritySpace.at_level("snow", 5, 8)


@pytest.fixture
def setup():
    rng = np.random.default_rng(7)
    x = rng.uniform(0, 1, (5, 3, 32, 32)).astype(np.float32)
    y = rng.integers(0, 5, 5)
    return x, y, init_classifier(2, 5, (3, 32, 32), TINY)


@pytest.mark.parametrize("name,expected", [
    ("MDA5", ("MDA", 5)), ("MAT2", ("MAT", 2)), ("MRAT0", ("MRAT", 0)), ("Vanilla", ("Vanilla", None)),
    ("MDAT", ("MDAT", None)), ("AugMix", ("AugMix", None)),
])
def test_parse_method_name(name, expected):
    assert parse_method_name(name) == expected


@pytest.mark.parametrize("bad", ["MDA6", "Vanilla5", "PGD", "mda5", ""])
def test_parse_method_name_rejects(bad):
    with pytest.raises(ValueError):
        parse_method_name(bad)


def test_config_validation():
    with pytest.raises(ValueError):
        StrategyConfig(method="MRT", k=0)
    with pytest.raises(ValueError):
        StrategyConfig(method="MAT", T=-1)
    with pytest.raises(ValueError):
        StrategyConfig(method="Foo")
    with pytest.raises(ValueError):
        StrategyConfig(method="MAT", z_step="adam")
    assert StrategyConfig.from_name("MAT2").severity_level == 2
    assert with_method(StrategyConfig(), "MRT5").label == "MRT5"


def test_step_size_default():
    cfg = StrategyConfig(method="MAT", T=10, severity_level=5, nuisance=NuisanceSpec(dim=8))
    assert cfg.step_size(cfg.space()) == pytest.approx(cfg.space().rho / 10)


def test_expected_passes_table():
    base = dict(k=10, T=10, R=10)
    got = {m: expected_passes(StrategyConfig(method=m, **base)) for m in METHODS}
    assert got == {"Vanilla": 1, "AT": 12, "AugMix": 2, "MDA": 2, "MRT": 12, "MAT": 13, "MDAT": 13,
                   "MRAT": 23}


@pytest.mark.parametrize("k", [1, 2, 5])
def test_mrt_k1_equals_mda(setup, k):
    x, y, p = setup
    a = inner_mda(x, y, p, BASIS, SPACE, np.random.default_rng(k))
    b = inner_mrt(x, y, p, BASIS, SPACE, 1, np.random.default_rng(k))
    np.testing.assert_array_equal(a, b)


def test_t0_reductions(setup):
    x, y, p = setup
    z0 = mat_start(SPACE, len(x))
    np.testing.assert_array_equal(inner_mat(x, y, p, BASIS, SPACE, 0, 0.1, z0), z0)
    np.testing.assert_array_equal(inner_mdat(x, y, p, BASIS, SPACE, 0, 0.1, np.random.default_rng(1)),
                                  inner_mda(x, y, p, BASIS, SPACE, np.random.default_rng(1)))
    np.testing.assert_array_equal(inner_mrat(x, y, p, BASIS, SPACE, 4, 0, 0.1, np.random.default_rng(1)),
                                  inner_mrt(x, y, p, BASIS, SPACE, 4, np.random.default_rng(1)))


def test_mrt_dominates_every_candidate(setup):
    x, y, p = setup
    rng = np.random.default_rng(3)
    chosen = inner_mrt(x, y, p, BASIS, SPACE, 6, rng)
    replay = np.random.default_rng(3)
    cands = [sample_uniform(SPACE, replay, len(x)) for _ in range(6)]
    best = sample_losses(p, BASIS, x, y, chosen)
    for c in cands:
        assert np.all(best >= sample_losses(p, BASIS, x, y, c))
    # chosen codes are drawn from the candidates, per sample
    for i in range(len(x)):
        assert any(np.array_equal(chosen[i], c[i]) for c in cands)


@pytest.mark.parametrize("rule", ["raw", "normalized", "sign"])
def test_mat_monotone_and_feasible(setup, rule):
    x, y, p = setup
    z0 = sample_uniform(SPACE, np.random.default_rng(0), len(x))
    trace = []
    z = inner_mat(x, y, p, BASIS, SPACE, 5, SPACE.rho / 5, z0, rule, trace)
    losses = [sample_losses(p, BASIS, x, y, t) for t in trace]
    for a, b in zip(losses, losses[1:]):
        assert np.all(b >= a)
    for t in trace:
        assert t.min() >= SPACE.lower and t.max() <= SPACE.upper
    np.testing.assert_array_equal(z, trace[-1])


def test_mat_counts_passes(setup):
    x, y, p = setup
    p.counter = PassCounter()
    inner_mat(x, y, p, BASIS, SPACE, 4, 0.1, mat_start(SPACE, len(x)))
    assert (p.counter.forward, p.counter.backward) == (5, 4)


@settings(max_examples=15)
@given(st.integers(0, 2 ** 31), st.floats(0.001, 0.1))
def test_at_perturbation_feasible(seed, alpha):
    rng = np.random.default_rng(seed)
    x = rng.choice([0.0, 1.0, 0.5, 0.01], size=(2, 3, 32, 32)).astype(np.float32)
    y = rng.integers(0, 5, 2)
    p = init_classifier(seed % 7, 5, (3, 32, 32), TINY)
    eps = 8 / 255
    d = at_pgd(x, y, p, eps, alpha, 3, rng)
    assert np.abs(d).max() <= np.float32(eps)
    assert (x + d).min() >= 0 and (x + d).max() <= 1


@pytest.mark.parametrize("method", METHODS)
def test_train_step_counts_match_cost_model(setup, method):
    x, y, p = setup
    cfg = StrategyConfig(method=method, k=3, T=2, R=2, severity_level=3, nuisance=NuisanceSpec(dim=8))
    p.counter = PassCounter()
    state = AdadeltaState.for_params(p)
    train_step((x, y), p, state, cfg, BASIS, cfg.space(), np.random.default_rng(0))
    assert p.counter.forward == expected_passes(cfg)


def test_pass_growth(setup):
    x, y, p = setup
    counts = {}
    for T in (0, 2, 4, 8):
        cfg = StrategyConfig(method="MAT", T=T, severity_level=2, nuisance=NuisanceSpec(dim=8))
        p.counter = PassCounter()
        train_step((x, y), p, AdadeltaState.for_params(p), cfg, BASIS, cfg.space(), np.random.default_rng(0))
        counts[T] = p.counter.forward
    # one pass per ascent step plus the final acceptance check
    assert [counts[t] - t for t in (2, 4, 8)] == [3, 3, 3]
    assert counts[0] == 2


def test_train_deterministic():
    rng = np.random.default_rng(0)
    ds = Dataset(rng.uniform(0, 1, (20, 3, 32, 32)), rng.integers(0, 5, 20))
    cfg = StrategyConfig(method="MRT", k=2, severity_level=2, rng_seed=5, nuisance=NuisanceSpec(dim=8))
    a = train(cfg, ds, epochs=2, batch_size=8, arch=TINY)
    b = train(cfg, ds, epochs=2, batch_size=8, arch=TINY)
    np.testing.assert_array_equal(a.params.flat(), b.params.flat())
    assert a.rng_checksum == b.rng_checksum
    assert a.batches == 6 and a.batch_passes == [4] * 6


def test_train_rejects_empty():
    with pytest.raises(ValueError):
        train(StrategyConfig(), Dataset(np.zeros((0, 3, 32, 32)), np.zeros(0)), epochs=1, arch=TINY)


def test_mda_consumes_one_draw(setup):
    x, y, p = setup
    a, b = np.random.default_rng(11), np.random.default_rng(11)
    inner_mda(x, y, p, BASIS, SPACE, a)
    b.random((len(x), SPACE.dim))
    assert a.random() == b.random()
    assert p.counter.forward == 0


def test_mda_distribution_uniform(setup):
    from scipy.stats import chisquare
    x, y, p = setup
    rng = np.random.default_rng(12)
    z = np.concatenate([inner_mda(x, y, p, BASIS, SPACE, rng) for _ in range(2000)])[:, 0]
    counts, _ = np.histogram(z, bins=10, range=(SPACE.lower, SPACE.upper))
    assert chisquare(counts).pvalue > 1e-3


def test_level_zero_corrupted_equals_clean(setup):
    x, y, p = setup
    cfg = StrategyConfig(method="MDA", severity_level=0, nuisance=NuisanceSpec(dim=8))
    lc, lk = train_step((x, y), p.copy(), AdadeltaState.for_params(p), cfg, BASIS, cfg.space(),
                        np.random.default_rng(0))
    assert lc == lk


def test_mrt_k1_and_mda_same_update(setup):
    x, y, p = setup
    out = []
    for method in ("MDA", "MRT"):
        q = p.copy()
        cfg = StrategyConfig(method=method, k=1, severity_level=4, nuisance=NuisanceSpec(dim=8))
        train_step((x, y), q, AdadeltaState.for_params(q), cfg, BASIS, cfg.space(), np.random.default_rng(3))
        out.append(q.flat())
    np.testing.assert_array_equal(*out)


def test_mat_from_random_init_t0_is_mda(setup):
    x, y, p = setup
    z0 = inner_mda(x, y, p, BASIS, SPACE, np.random.default_rng(4))
    np.testing.assert_array_equal(inner_mat(x, y, p, BASIS, SPACE, 0, 0.1, z0), z0)


def test_small_step_ascent_sanity(setup):
    from mbrobust.nuisance import project
    from mbrobust.strategies import loss_and_grad_z
    x, y, p = setup
    space = SeveritySpace.at_level("brightness", 3, 8)
    basis = make_basis("brightness", 8)
    z = sample_uniform(space, np.random.default_rng(5), len(x)) * 0.5  # interior
    loss, grad = loss_and_grad_z(p, basis, x, y, z)
    step = project(space, z + 1e-4 * grad)
    new = sample_losses(p, basis, x, y, step)
    moving = np.abs(grad).max(1) > 0
    assert np.all(new[moving] >= loss[moving] - 1e-6)


def test_at_r0_in_ball(setup):
    x, y, p = setup
    d = at_pgd(x, y, p, 8 / 255, 0.01, 0, np.random.default_rng(0))
    assert np.abs(d).max() <= np.float32(8 / 255) and np.any(d != 0)
    assert p.counter.forward == 0


def test_vanilla_one_pass_each(setup):
    x, y, p = setup
    cfg = StrategyConfig(method="Vanilla")
    lc, lk = train_step((x, y), p, AdadeltaState.for_params(p), cfg, None, None, np.random.default_rng(0))
    assert (p.counter.forward, p.counter.backward) == (1, 1) and lk == 0.0


def test_epochs_zero_keeps_init():
    rng = np.random.default_rng(0)
    ds = Dataset(rng.uniform(0, 1, (8, 3, 32, 32)), rng.integers(0, 5, 8))
    rep = train(StrategyConfig(rng_seed=3), ds, epochs=0, arch=TINY)
    np.testing.assert_array_equal(rep.params.flat(), init_classifier(3, 5, (3, 32, 32), TINY).flat())


def test_vanilla_fits_separable_set():
    rng = np.random.default_rng(1)
    y = np.repeat([0, 1], 32)
    x = np.where(y[:, None, None, None] == 0, 0.2, 0.8) + rng.normal(0, 0.05, (64, 3, 32, 32))
    ds = Dataset(np.clip(x, 0, 1), y)
    arch = replace(TINY, n_classes=2)
    rep = train(StrategyConfig(rng_seed=0), ds, epochs=30, batch_size=16, arch=arch)
    assert rep.epoch_losses[-1] < 0.1


def test_paper_defaults():
    from mbrobust.strategies import PAPER_BATCH_SIZE, PAPER_EPOCHS
    cfg = StrategyConfig()
    assert (cfg.k, cfg.T, cfg.R, cfg.alpha) == (10, 10, 10, 0.01)
    assert cfg.epsilon == pytest.approx(8 / 255)
    assert (PAPER_EPOCHS, PAPER_BATCH_SIZE) == (100, 64)
