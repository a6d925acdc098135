import math
import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from flowmix import autodiff as ad
from flowmix.datasets import gen_pinwheel, gen_two_circles
from flowmix.errors import ContractError, NumericError
from flowmix.flows import base_log_prob
from flowmix.mixture import (LOG_Q_FLOOR, MixtureModel, TemperatureSchedule, assign_cluster, elbo,
                             elbo_from_posterior, exact_log_evidence, exact_posterior,
                             pretrain_supervised, responsibilities, sample_component,
                             temperature_at, train_epoch_unsupervised,
                             train_semisupervised, train_unsupervised)
from flowmix.nn import Adam

from conftest import param_gradient_errors, perturb

SMALL_FLOW = [{"type": "coupling", "hidden": [4], "repeat": 2}, {"type": "plu"}]


def small_model(k=3, seed=0, scale=0.3, flow=SMALL_FLOW, zero_posterior=False):
    rng = np.random.default_rng(seed)
    model = MixtureModel.build(2, k, flow, [4], rng, zero_posterior=zero_posterior)
    perturb(model.params, rng, scale)
    if zero_posterior:
        for p in model.posterior.params:
            p.value[...] = 0.0
    return model


def exact_elbo(model, x):
    """ELBO with the true posterior substituted for q."""
    with ad.no_grad():
        comp = model.component_log_probs(x)
    joint = comp.value + model.log_prior
    log_q = joint - ad.logsumexp(joint, axis=1, keepdims=True).value
    return elbo_from_posterior(ad.as_node(np.exp(log_q)), ad.as_node(log_q), comp,
                               model.log_prior)[1].elbo


class TestResponsibilities:
    def test_zero_posterior_is_uniform(self):
        model = small_model(k=4, zero_posterior=True)
        r = responsibilities(model, np.random.default_rng(0).normal(size=(5, 2)))
        np.testing.assert_allclose(r, 0.25, rtol=1e-15)

    def test_single_component(self):
        model = small_model(k=1)
        np.testing.assert_array_equal(responsibilities(model, np.ones((3, 2))), np.ones((3, 1)))

    def test_argmax_invariant_to_temperature(self):
        model = small_model(k=4, scale=1.0)
        x = np.random.default_rng(1).normal(size=(50, 2))
        ref = responsibilities(model, x, 1.0).argmax(1)
        for t in (0.1, 10.0):
            np.testing.assert_array_equal(responsibilities(model, x, t).argmax(1), ref)


class TestElbo:
    def test_single_component_is_log_likelihood(self):
        model = small_model(k=1)
        x = np.random.default_rng(2).normal(size=(8, 2))
        value, terms = elbo(model, x)
        lp = model.components[0].log_prob(x).value
        assert value.value == lp.mean()
        np.testing.assert_array_equal(terms.prior, 0.0)
        np.testing.assert_array_equal(terms.entropy, 0.0)

    def test_uniform_two_components(self):
        model = small_model(k=2, zero_posterior=True)
        x = np.random.default_rng(3).normal(size=(8, 2))
        value, _ = elbo(model, x)
        lp = model.component_log_probs(x).value
        expected = np.mean(0.5 * (lp[:, 0] + lp[:, 1])) + math.log(0.5) + math.log(2)
        assert value.value == pytest.approx(expected, abs=1e-12)

    def test_terms_sum_to_elbo_and_entropy_bounds(self):
        model = small_model(k=3, scale=1.0)
        x = np.random.default_rng(4).normal(size=(30, 2))
        value, terms = elbo(model, x, temperature=0.7)
        assert value.value == pytest.approx(terms.elbo.mean(), abs=1e-12)
        assert np.all(terms.entropy >= -1e-15) and np.all(terms.entropy <= math.log(3) + 1e-12)

    def test_entropy_is_log_k_for_uniform_and_vanishes_at_low_temperature(self):
        model = small_model(k=3, zero_posterior=True)
        x = np.random.default_rng(5).normal(size=(10, 2))
        np.testing.assert_allclose(elbo(model, x)[1].entropy, math.log(3), rtol=1e-14)
        sharp = small_model(k=3, scale=1.0)
        assert elbo(sharp, x, temperature=1e-4)[1].entropy.max() < 1e-6

    def test_empty_batch_rejected(self):
        with pytest.raises(ContractError):
            elbo(small_model(), np.zeros((0, 2)))

    def test_non_finite_component_names_component(self):
        model = small_model(k=3)
        model.components[2].layers[-1].log_scale.value[...] = 1e6
        with pytest.raises(NumericError) as info, np.errstate(all="ignore"):
            elbo(model, np.ones((2, 2)))
        assert info.value.component == 2

    @pytest.mark.parametrize("seed", range(50))
    def test_bound_and_jensen_equality(self, seed):
        model = small_model(k=3, seed=seed, scale=0.6)
        x = np.random.default_rng(1000 + seed).normal(size=(16, 2)) * 1.5
        with ad.no_grad():
            per_example = elbo(model, x, temperature=float(np.exp(np.random.default_rng(seed).normal())))[1].elbo
        evidence = exact_log_evidence(model, x)
        assert np.all(per_example - evidence <= 1e-10)
        assert np.abs(exact_elbo(model, x) - evidence).max() < 1e-10

    @pytest.mark.parametrize("seed", range(10))
    def test_gradients_all_params(self, seed):
        flow = [{"type": "coupling", "hidden": [3], "repeat": 2}, {"type": "plu"},
                {"type": "prelu"}, {"type": "maf", "hidden": [4]}, {"type": "batchnorm"}]
        model = small_model(k=3, seed=seed, flow=flow)
        x = np.random.default_rng(seed).normal(size=(7, 2))
        errs = param_gradient_errors(lambda: elbo(model, x, 1.7)[0], model.params)
        assert max(errs.values()) < 1e-4, max(errs.items(), key=lambda kv: kv[1])

    def test_log_q_floor(self):
        assert LOG_Q_FLOOR == math.log(1e-12)


class TestEvidence:
    def test_single_component(self):
        model = small_model(k=1)
        x = np.random.default_rng(0).normal(size=(6, 2))
        np.testing.assert_allclose(exact_log_evidence(model, x),
                                   model.components[0].log_prob(x).value, rtol=0, atol=1e-14)

    def test_identical_components(self):
        model = MixtureModel.build(2, 2, [], [3], np.random.default_rng(0))
        x = np.random.default_rng(1).normal(size=(6, 2))
        np.testing.assert_allclose(exact_log_evidence(model, x), base_log_prob(x).value, atol=1e-14)

    @pytest.mark.parametrize("seed", range(5))
    def test_linear_space_summation(self, seed):
        model = small_model(k=3, seed=seed)
        x = np.random.default_rng(seed).normal(size=(20, 2))
        lp = model.component_log_probs(x).value
        direct = np.log(np.sum(np.exp(lp) / 3.0, axis=1))
        np.testing.assert_allclose(exact_log_evidence(model, x), direct, rtol=0, atol=1e-10)

    def test_exact_posterior_rows_on_simplex(self):
        model = small_model(k=4)
        p = exact_posterior(model, np.random.default_rng(0).normal(size=(9, 2)))
        np.testing.assert_allclose(p.sum(1), 1.0, atol=1e-14)


class TestAssignment:
    def test_single_component_all_zero(self):
        np.testing.assert_array_equal(assign_cluster(small_model(k=1), np.ones((4, 2))), 0)

    def test_logits_example(self):
        model = MixtureModel.build(2, 3, [], [], np.random.default_rng(0))
        model.posterior.weights[0].value[...] = 0.0
        model.posterior.biases[0].value[...] = [3.0, 1.0, 2.0]
        assert assign_cluster(model, np.zeros((1, 2)))[0] == 0

    def test_ties_go_to_lowest_index(self):
        model = small_model(k=3, zero_posterior=True)
        np.testing.assert_array_equal(assign_cluster(model, np.ones((3, 2))), 0)

    @given(st.floats(-100, 100))
    def test_invariant_to_constant_logit_shift(self, shift):
        model = small_model(k=4, scale=1.0)
        x = np.random.default_rng(0).normal(size=(20, 2))
        before = assign_cluster(model, x)
        model.posterior.biases[-1].value[...] += shift
        after = assign_cluster(model, x)
        model.posterior.biases[-1].value[...] -= shift
        np.testing.assert_array_equal(before, after)


class TestSampling:
    def test_identity_component_is_standard_normal(self):
        model = MixtureModel.build(2, 2, [{"type": "coupling", "repeat": 2}], [3],
                                   np.random.default_rng(0))
        np.testing.assert_array_equal(sample_component(model, 1, 5, 9),
                                      np.random.default_rng(9).standard_normal((5, 2)))

    def test_deterministic(self):
        model = small_model()
        np.testing.assert_array_equal(sample_component(model, 0, 10, 4),
                                      sample_component(model, 0, 10, 4))

    @pytest.mark.parametrize("k", [-1, 3])
    def test_out_of_range(self, k):
        with pytest.raises(IndexError):
            sample_component(small_model(k=3), k, 2, 0)


class TestTemperature:
    def test_examples(self):
        assert temperature_at(TemperatureSchedule(7.0, 1.0, 0.3), 0) == 7.0
        assert temperature_at(TemperatureSchedule(4.0, 1.0, 0.0), 999) == 4.0
        sched = TemperatureSchedule(10.0, 0.5, math.log(10) / 100)
        assert temperature_at(sched, 100) == pytest.approx(1.0, rel=1e-12)

    def test_reaching_floor(self):
        sched = TemperatureSchedule.reaching_floor(300, 5.0, 1.0)
        assert sched.at(200) == pytest.approx(1.0, rel=1e-12)
        assert sched.at(299) == 1.0

    @given(st.floats(0.01, 100), st.floats(0.01, 100), st.floats(0, 5), st.integers(0, 10_000))
    def test_positive_and_non_increasing(self, t0, tmin, decay, epoch):
        s = TemperatureSchedule(t0, tmin, decay)
        assert s.at(epoch) > 0
        assert s.at(epoch + 1) <= s.at(epoch)

    def test_invalid(self):
        with pytest.raises(ContractError):
            TemperatureSchedule(0.0, 1.0, 0.1)
        with pytest.raises(ContractError):
            TemperatureSchedule(1.0, 1.0, 0.1).at(-1)


class TestTraining:
    def test_zero_learning_rate(self):
        model = small_model()
        before = {p.name: p.value.copy() for p in model.params}
        x = np.random.default_rng(0).normal(size=(40, 2))
        m = train_epoch_unsupervised(model, x, Adam(model.params, lr=0.0), 2.0, 16,
                                     np.random.default_rng(1))
        for p in model.params:
            np.testing.assert_array_equal(p.value, before[p.name])
        assert np.isfinite(m.elbo) and m.temperature == 2.0

    def test_deterministic_trajectories(self):
        def run():
            model = small_model(seed=3)
            x = gen_pinwheel(30, 3, seed=0).points
            return [m.elbo for m in train_unsupervised(model, x, Adam(model.params, lr=0.01),
                                                       TemperatureSchedule(3, 1, 0.1), 4, 32,
                                                       np.random.default_rng(7))]
        assert run() == run()

    def test_batch_size_contract(self):
        model = small_model()
        with pytest.raises(ContractError):
            train_epoch_unsupervised(model, np.ones((4, 2)), Adam(model.params), 1.0, 5,
                                     np.random.default_rng(0))

    def test_numeric_failure_reports_epoch_and_batch(self):
        model = small_model()
        model.components[0].layers[-1].log_scale.value[...] = 1e6
        with pytest.raises(NumericError) as info, np.errstate(all="ignore"):
            train_epoch_unsupervised(model, np.ones((8, 2)), Adam(model.params), 1.0, 4,
                                     np.random.default_rng(0), epoch=6)
        assert info.value.epoch == 6 and info.value.batch == 0

    def test_pretrain_skips_unlabeled_component(self):
        model = small_model(k=2)
        comp1 = {p.name: p.value.copy() for p in model.components[1].params}
        x = np.random.default_rng(0).normal(size=(12, 2))
        with pytest.warns(UserWarning, match="component 1"):
            pretrain_supervised(model, x, np.zeros(12, dtype=int), Adam(model.params, lr=0.05),
                                3, np.random.default_rng(0), batch_size=5)
        for p in model.components[1].params:
            np.testing.assert_array_equal(p.value, comp1[p.name])

    def test_supervised_ce_decreases(self):
        data = gen_two_circles(32, seed=0)
        model = MixtureModel.build(2, 2, [{"type": "coupling", "hidden": [8], "repeat": 10}],
                                   [16, 16], np.random.default_rng(0))
        opt = Adam(model.params, lr=0.001)
        ces = [m.cross_entropy for m in pretrain_supervised(model, data.points, data.labels, opt,
                                                            20, np.random.default_rng(1))]
        assert all(b < a for a, b in zip(ces, ces[1:]))

    def test_empty_labeled_set_rejected(self):
        model = small_model(k=2)
        with pytest.raises(ContractError):
            train_semisupervised(model, np.zeros((0, 2)), np.zeros(0, dtype=int),
                                 np.ones((4, 2)), Adam(model.params), TemperatureSchedule(), 1,
                                 np.random.default_rng(0))

    def test_zero_unsupervised_epochs_matches_pretraining(self):
        data = gen_two_circles(10, seed=0)

        def run(fn):
            model = small_model(k=2, seed=1)
            opt = Adam(model.params, lr=0.01)
            fn(model, opt)
            return [p.value.copy() for p in model.params]

        a = run(lambda m, o: pretrain_supervised(m, data.points, data.labels, o, 3,
                                                 np.random.default_rng(2), batch_size=8))
        b = run(lambda m, o: train_semisupervised(m, data.points, data.labels, data.points, o,
                                                  TemperatureSchedule(), 3,
                                                  np.random.default_rng(2), batch_size=8,
                                                  unsupervised_per_round=0))
        for u, v in zip(a, b):
            np.testing.assert_array_equal(u, v)

    def test_semisupervised_interleaves_starting_supervised(self):
        data = gen_two_circles(10, seed=0)
        model = small_model(k=2)
        with warnings.catch_warnings():
            warnings.simplefilter("error")
            out = train_semisupervised(model, data.points, data.labels, data.points,
                                       Adam(model.params, lr=0.01), TemperatureSchedule(), 2,
                                       np.random.default_rng(0), batch_size=8,
                                       supervised_per_round=1, unsupervised_per_round=2)
        assert [m.phase for m in out] == ["supervised", "unsupervised", "unsupervised"] * 2

    @given(hnp.arrays(np.float64, (6, 2), elements=st.floats(-3, 3)))
    def test_elbo_finite_on_finite_inputs(self, x):
        assert np.isfinite(elbo(small_model(), x)[0].value)


def test_posterior_gain_scales_initial_logits():
    x = np.random.default_rng(0).normal(size=(7, 2))
    logits = [MixtureModel.build(2, 4, SMALL_FLOW, [3], np.random.default_rng(5),
                                 posterior_gain=g).posterior_logits(x).value for g in (1.0, 3.0)]
    np.testing.assert_allclose(logits[1], 3.0 * logits[0], rtol=1e-14)
