import dataclasses

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import LinearClassifier
from sia_lab.attack import (AttackConfig, AttackMode, BatchAttackError, fgsm_attack, pgd_attack,
                            read_image_trajectory, run_attack_batch, save_trace_json,
                            load_trace_json, sia_attack, with_mode, write_image_trajectory)
from sia_lab.diffcore import NumericError, finite_difference_gradient
from sia_lab.toyworld import make_basis
from sia_lab.toyworld.world import AnalyticGenerator

E = 1.5 / 255


def sample(world, i=0):
    s = world.samples[i]
    return s.base_image, s.attributes, s.label


# --- config and modes ---------------------------------------------------------------

def test_config_defaults_and_partial_iters():
    cfg = AttackConfig()
    assert cfg.T == 200 and cfg.partial_iters == 20 and cfg.mode is AttackMode.FULL
    assert cfg.eta_a == cfg.eta_x == 0.25 / 255


def test_config_round_trip_and_strictness():
    cfg = AttackConfig(mode="I+PA", frozen_attr_caps={0: 0.05}, T=30, seed=3)
    assert AttackConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        AttackConfig.from_dict({"eta": 0.1})


@pytest.mark.parametrize("kwargs", [dict(eta_a=-1.0), dict(T=-1), dict(T=10, partial_iters=11),
                                    dict(frozen_attr_caps={0: -0.1}), dict(mode="bogus")])
def test_config_rejects_invalid(kwargs):
    with pytest.raises(ValueError):
        AttackConfig(**kwargs)


@pytest.mark.parametrize("mode, early, late", [
    ("OR", (False, False), (False, False)),
    ("I", (False, True), (False, True)),
    ("I+PA", (True, True), (False, True)),
    ("A", (True, False), (True, False)),
    ("A+PI", (True, True), (True, False)),
    ("Full", (True, True), (True, True)),
])
def test_mode_schedule(mode, early, late):
    m = AttackMode.parse(mode)
    assert m.active(5, 5) == early
    assert m.active(6, 5) == late


# --- sia_attack ------------------------------------------------------------------------

@pytest.mark.parametrize("mode", list(AttackMode))
def test_zero_iterations(world, classifier, mode):
    x0, a0, y = sample(world)
    ex, trace = sia_attack(classifier, world.generator, x0, a0, y, AttackConfig(T=0, mode=mode))
    assert trace.attrs.shape == (1, world.basis.K)
    np.testing.assert_array_equal(trace.attrs[0], a0)
    np.testing.assert_array_equal(ex.adversary, world.generator.decode(x0, a0))


def test_full_with_zero_attr_ball_matches_image_only(world, classifier):
    x0, a0, y = sample(world, 3)
    cfg = AttackConfig(T=15, eps_a=0.0, eta_x=1 / 255, eps_x=4 / 255, eta_a=2 / 255)
    _, full = sia_attack(classifier, world.generator, x0, a0, y, cfg, record_images=True)
    _, img = sia_attack(classifier, world.generator, x0, a0, y, with_mode(cfg, "I"),
                        record_images=True)
    assert np.all(full.attrs == full.attrs[0])
    np.testing.assert_array_equal(full.images, img.images)


def test_linear_fixture_first_step_raises_attribute_zero():
    basis = make_basis(3, (8, 8, 3), seed=1)
    gen = AnalyticGenerator(basis)
    base = np.full((8, 8, 3), 0.4)
    a0 = np.full(3, 0.5)
    # label 0, logit increases along +P0, so the loss rises with a_0
    model = LinearClassifier(basis.patterns[0], b=-np.sum(basis.patterns[0] * 0.4))
    cfg = AttackConfig(T=1, eta_a=0.01, eta_x=0.001, eps_x=0.01)
    _, trace = sia_attack(model, gen, base, a0, 0, cfg)
    assert trace.attrs[1, 0] == pytest.approx(0.5 + 0.01, abs=1e-12)


def test_reconstruct_only_is_a_round_trip(world, classifier):
    x0, a0, y = sample(world, 2)
    ex, trace = sia_attack(classifier, world.generator, x0, a0, y,
                           AttackConfig(T=10, mode="OR"), record_images=True)
    assert np.all(trace.attrs == a0)
    assert np.all(trace.images == x0)
    np.testing.assert_array_equal(ex.adversary, world.generator.decode(x0, a0))


def test_attr_only_ignores_image_settings(world, classifier):
    x0, a0, y = sample(world, 4)
    base = AttackConfig(T=20, mode="A", eta_a=2 / 255)
    _, t1 = sia_attack(classifier, world.generator, x0, a0, y, base)
    _, t2 = sia_attack(classifier, world.generator, x0, a0, y,
                       with_mode(base, "A", eps_x=0.3, eta_x=0.1))
    np.testing.assert_array_equal(t1.attrs, t2.attrs)
    np.testing.assert_array_equal(t1.losses, t2.losses)


def test_traces_are_reproducible(world, classifier):
    x0, a0, y = sample(world, 5)
    cfg = AttackConfig(T=25, eta_a=2 / 255)
    _, t1 = sia_attack(classifier, world.generator, x0, a0, y, cfg)
    _, t2 = sia_attack(classifier, world.generator, x0, a0, y, cfg)
    np.testing.assert_array_equal(t1.attrs, t2.attrs)
    np.testing.assert_array_equal(t1.final_adversary, t2.final_adversary)


def test_frozen_cap_is_respected(world, classifier):
    x0, a0, y = sample(world, 6)
    cfg = AttackConfig(T=60, eta_a=2 / 255, frozen_attr_caps={0: 0.05, 1: 0.0})
    _, trace = sia_attack(classifier, world.generator, x0, a0, y, cfg)
    assert np.abs(trace.attrs[:, 0] - a0[0]).max() <= 0.05 + 1e-12
    assert np.all(trace.attrs[:, 1] == a0[1])


def test_wrong_attribute_length(world, classifier):
    x0, a0, y = sample(world)
    with pytest.raises(ValueError):
        sia_attack(classifier, world.generator, x0, a0[:-1], y, AttackConfig(T=1))


def test_first_step_direction_matches_chain_rule(world, classifier, rng):
    gen = world.generator
    agree = total = 0
    for _ in range(40):
        x = rng.uniform(0.3, 0.6, world.basis.base_shape)
        a = rng.uniform(0.2, 0.8, world.basis.K)
        y = int(rng.integers(2))
        _, trace = sia_attack(classifier, gen, x, a, y, AttackConfig(T=1, eta_a=1e-3))
        numeric = finite_difference_gradient(lambda b: classifier.loss(gen.decode(x, b), y), a)
        keep = np.abs(numeric) > 1e-9
        agree += np.sum(np.sign(trace.attrs[1] - a)[keep] == np.sign(numeric)[keep])
        total += keep.sum()
    assert agree / total >= 0.95


@given(st.sampled_from(list(AttackMode)), st.floats(0, 0.2), st.floats(0, 0.05),
       st.floats(0, 0.05), st.floats(0, 0.02), st.integers(0, 12), st.integers(0, 399))
def test_bounds_hold_at_every_iterate(world, classifier, mode, eps_a, eta_a, eps_x, eta_x, T,
                                      idx):
    x0, a0, y = sample(world, idx)
    cfg = AttackConfig(eta_a=eta_a, eta_x=eta_x, eps_a=eps_a, eps_x=eps_x, T=T, mode=mode)
    ex, trace = sia_attack(classifier, world.generator, x0, a0, y, cfg, record_images=True)
    assert np.all(np.abs(trace.attrs - a0) <= eps_a + 1e-12)
    assert np.all(np.abs(trace.images - x0) <= eps_x + 1e-12)
    assert trace.attrs.min() >= 0 and trace.attrs.max() <= 1
    assert trace.images.min() >= 0 and trace.images.max() <= 1
    assert ex.adversary.min() >= 0 and ex.adversary.max() <= 1
    assert np.all(np.isfinite(trace.losses))


# --- baselines ------------------------------------------------------------------------------

def test_fgsm_zero_eps_is_identity(world, classifier):
    x = world.subset([0]).images()[0]
    np.testing.assert_array_equal(fgsm_attack(classifier, x, 1, 0.0).adversary, x)


def test_fgsm_linear_closed_form(rng):
    w = rng.standard_normal((6, 6, 3))
    model = LinearClassifier(w)
    x0 = rng.uniform(0, 1, (6, 6, 3))
    adv = fgsm_attack(model, x0, 0, 0.03).adversary
    np.testing.assert_allclose(adv, np.clip(x0 + 0.03 * np.sign(w), 0, 1), atol=1e-15)
    assert np.abs(adv - x0).max() <= 0.03 + 1e-15


def test_fgsm_rejects_negative_eps(world, classifier):
    with pytest.raises(ValueError):
        fgsm_attack(classifier, world.subset([0]).images()[0], 1, -0.1)


def test_pgd_zero_iterations(world, classifier):
    x = world.subset([0]).images()[0]
    ex, _ = pgd_attack(classifier, x, 1, AttackConfig(T=0))
    np.testing.assert_array_equal(ex.adversary, x)


def test_pgd_bound_at_every_iterate(world, classifier):
    x = world.subset([1]).images()[0]
    cfg = AttackConfig(T=20, eta_x=1 / 255, eps_x=3 / 255)
    _, trace = pgd_attack(classifier, x, world.samples[1].label, cfg, record_images=True)
    assert np.abs(trace.images - x).max() <= 3 / 255 + 1e-12


def test_pgd_dominates_fgsm(world, classifier, split):
    test = split[1]
    eps = 8 / 255
    pgd = run_attack_batch(classifier, None, test, AttackConfig(T=20, eta_x=1 / 255, eps_x=eps),
                           "pgd")
    fgsm = run_attack_batch(classifier, None, test, AttackConfig(eps_x=eps), "fgsm")
    assert np.mean([r[0].success for r in pgd]) >= np.mean([r[0].success for r in fgsm])


# --- batch driver ------------------------------------------------------------------------------

def test_batch_of_one_equals_direct_call(world, classifier):
    cfg = AttackConfig(T=15, eta_a=2 / 255, seed=4)
    (ex, trace), = run_attack_batch(classifier, world.generator, world, cfg, "sia", [7])
    x0, a0, y = sample(world, 7)
    ex2, trace2 = sia_attack(classifier, world.generator, x0, a0, y, cfg)
    np.testing.assert_array_equal(ex.adversary, ex2.adversary)
    np.testing.assert_array_equal(trace.attrs, trace2.attrs)
    assert ex.source_index == 7 and trace.seed == 4 + 7


def test_serial_and_parallel_agree(world, classifier):
    cfg = AttackConfig(T=10, eta_a=2 / 255, seed=0)
    idx = list(range(150))
    serial = run_attack_batch(classifier, world.generator, world, cfg, "sia", idx, workers=1)
    parallel = run_attack_batch(classifier, world.generator, world, cfg, "sia", idx, workers=2)
    for (e1, t1), (e2, t2) in zip(serial, parallel):
        np.testing.assert_array_equal(e1.adversary, e2.adversary)
        np.testing.assert_array_equal(t1.attrs, t2.attrs)
        assert e1.success == e2.success and t1.seed == t2.seed


def test_workers_env_override(world, classifier, monkeypatch):
    monkeypatch.setenv("SIA_LAB_WORKERS", "2")
    cfg = AttackConfig(T=3, seed=0)
    out = run_attack_batch(classifier, world.generator, world, cfg, "sia", range(70), workers=1)
    assert len(out) == 70


def test_batch_validation(world, classifier):
    with pytest.raises(ValueError):
        run_attack_batch(classifier, world.generator, world, AttackConfig(seed=None))
    with pytest.raises(ValueError):
        run_attack_batch(classifier, world.generator, world, AttackConfig(), "sia", [])


class _PoisonedModel(LinearClassifier):
    """Non-finite gradient whenever the top-left pixel is saturated."""

    def loss_gradient(self, x, y):
        g = super().loss_gradient(x, y)
        return g * np.nan if x[0, 0, 0] >= 0.999 else g


def test_numeric_failure_is_isolated(world):
    data = world.subset(range(6))
    # subsets share samples with their parent, so swap in a modified copy
    poisoned = data.samples[3].base_image.copy()
    poisoned[0, 0, :] = 1.0
    data.samples[3] = dataclasses.replace(data.samples[3], base_image=poisoned)
    model = _PoisonedModel(np.full(world.basis.base_shape, 0.01), b=-7.0)
    cfg = AttackConfig(T=5, seed=0)
    with pytest.raises(BatchAttackError) as info:
        run_attack_batch(model, data.generator, data, cfg)
    err = info.value
    assert err.sample == 3 and err.iteration == 1 and set(err.failures) == {3}
    skipped = run_attack_batch(model, data.generator, data, cfg, on_error="skip")
    assert skipped[3] is None
    clean = run_attack_batch(model, data.generator, data, cfg, "sia", [0, 1, 2, 4, 5])
    for got, want in zip([skipped[i] for i in (0, 1, 2, 4, 5)], clean):
        np.testing.assert_array_equal(got[0].adversary, want[0].adversary)


def test_single_attack_numeric_error_carries_iteration(world):
    x0, a0, _ = sample(world)
    x0 = x0.copy()
    x0[0, 0, :] = 1.0
    model = _PoisonedModel(np.full(world.basis.base_shape, 0.01))
    with pytest.raises(NumericError) as info:
        sia_attack(model, world.generator, x0, a0, 0, AttackConfig(T=3), source_index=9)
    assert info.value.iteration == 1 and info.value.sample == 9


# --- persistence -----------------------------------------------------------------------------

def test_trace_json_round_trip(world, classifier, tmp_path):
    x0, a0, y = sample(world)
    ex, trace = sia_attack(classifier, world.generator, x0, a0, y, AttackConfig(T=8))
    path = save_trace_json(tmp_path / "traces" / "000000.json", trace, 0, ex.success,
                           world.attribute_names)
    back = load_trace_json(path)
    np.testing.assert_array_equal(back["attrs"], trace.attrs)
    np.testing.assert_array_equal(back["losses"], trace.losses)
    assert back["attribute_names"] == list(world.attribute_names)


def test_image_trajectory_round_trip(world, classifier, tmp_path):
    x0, a0, y = sample(world)
    _, trace = sia_attack(classifier, world.generator, x0, a0, y, AttackConfig(T=8),
                          record_images=True)
    path = write_image_trajectory(tmp_path / "t.siat", trace.images)
    raw = path.read_bytes()
    assert raw[:4] == b"SIAT"
    back = read_image_trajectory(path)
    assert back.shape == trace.images.shape
    np.testing.assert_allclose(back, trace.images, atol=1e-6)


def test_image_trajectory_rejects_bad_magic(tmp_path):
    (tmp_path / "bad").write_bytes(b"XXXX" + bytes(20))
    with pytest.raises(ValueError):
        read_image_trajectory(tmp_path / "bad")
