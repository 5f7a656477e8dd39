import logging

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import scalar_weighted_average
from pfsim.data import DataSplit, GroupSpec, rule_matrix, synth_generate
from pfsim.models import ModelSpec, init_params, mixture_eval
from pfsim.params import KeyMask, NamedParams, NonFiniteError, l2_distance, l2_norm
from pfsim.strategies import (
    REGISTRY,
    ClientStrategyState,
    Strategy,
    StrategyConfig,
    build_strategy,
    choose_cluster,
    ditto_round,
    fedavg_aggregate,
    fedem_local,
    fedopt_server_step,
    finetune_before_eval,
    hypcluster_assign,
    interpolate_personal,
    local_train,
    pfedme_local,
    prox_solve,
    register,
    responsibilities,
    unseen_inference_policy,
)
from pfsim.strategies.methods import slot_seed

LR = ModelSpec("logistic_regression", 5, 2)
NORM_MLP = ModelSpec("mlp", 5, 2, (4,), use_norm_layers=True)


def rng(seed=0):
    return np.random.default_rng(seed)


@pytest.fixture(scope="module")
def toy():
    return synth_generate([GroupSpec(2, 100, "r0"), GroupSpec(2, 100, "~r0")], 3)


def accuracy(spec, params, split):
    return mixture_eval(spec, [(params, 1.0)], split.features, split.labels)[0] / len(split)


def rule_model(concept_rule, seed, scale=10.0):
    """LR parameters reproducing the synthetic rule ``r<k>`` (centred features)."""
    R = rule_matrix(concept_rule, 5, 2, seed)
    return NamedParams({"W": scale * R.T.reshape(-1), "b": np.zeros(2)})


# local training ------------------------------------------------------------------


def test_zero_coefficient_matches_plain_training(toy):
    p0 = init_params(LR, 0)
    a, _, _ = local_train(LR, p0, toy[0].train, 3, 0.1, 16, rng(1))
    b, _, _ = local_train(LR, p0, toy[0].train, 3, 0.1, 16, rng(1), ref=(init_params(LR, 9), 0.0, "prox"))
    assert a == b


def test_huge_coefficient_pins_to_reference(toy):
    ref = init_params(LR, 5)
    out, _, _ = local_train(LR, init_params(LR, 0), toy[0].train, 50, 0.1, 16, rng(1), ref=(ref, 1e6, "ditto"))
    assert l2_distance(out, ref) <= 1e-3


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_local_train_reports_flops_and_rejects_bad_input(toy):
    _, flops, loss = local_train(LR, init_params(LR, 0), toy[0].train, 2, 0.1, 16, rng())
    assert flops == 3 * 2 * 5 * 2 * 2 * toy[0].n_train
    assert np.isfinite(loss)
    with pytest.raises(ValueError):
        local_train(LR, init_params(LR, 0), toy[0].train, 1, 0.1, 16, rng(), ref=(init_params(LR, 0), 1.0, "l1"))
    with pytest.raises(NonFiniteError):
        local_train(LR, init_params(LR, 0), toy[0].train, 5, 1e308, 16, rng())


# aggregation ---------------------------------------------------------------------


def test_fedavg_aggregate_examples():
    p = init_params(LR, 0)
    assert fedavg_aggregate([(p, 17)]) == p
    q = init_params(LR, 1)
    mid = fedavg_aggregate([(p, 5), (q, 5)])
    assert np.allclose(mid["W"], (p["W"] + q["W"]) / 2, atol=1e-15, rtol=0)
    ups = [(init_params(LR, s), int(n)) for s, n in zip(range(5), rng(4).integers(1, 500, 5))]
    want = scalar_weighted_average(ups)
    got = fedavg_aggregate(ups)
    assert all(np.max(np.abs(got[k] - np.array(want[k]))) <= 1e-12 for k in got)


def test_fedopt_server_step_examples():
    g, agg = init_params(LR, 0), init_params(LR, 1)
    assert fedopt_server_step(g, agg, 1.0) == agg
    assert fedopt_server_step(g, agg, 0.0) == g
    out = fedopt_server_step(NamedParams({"w": [2.0]}), NamedParams({"w": [1.0]}), 0.5)
    assert out["w"][0] == 1.5


# Ditto ----------------------------------------------------------------------------


def test_ditto_zero_lambda_is_isolated_training(toy):
    personal, g = init_params(LR, 3), init_params(LR, 4)
    _, new_personal, _ = ditto_round(LR, personal, g, toy[0].train, 3, 0.1, 16, 0.0, rng(1), rng(2))
    alone, _, _ = local_train(LR, personal, toy[0].train, 3, 0.1, 16, rng(2))
    assert new_personal == alone


def test_ditto_huge_lambda_tracks_global(toy):
    personal, g = init_params(LR, 3), init_params(LR, 4)
    _, new_personal, _ = ditto_round(LR, personal, g, toy[0].train, 50, 0.1, 16, 1e6, rng(1), rng(2))
    assert l2_distance(new_personal, g) <= 1e-3


def test_ditto_upload_equals_fedavg_upload(toy):
    g = init_params(LR, 4)
    upload, _, _ = ditto_round(LR, init_params(LR, 3), g, toy[0].train, 2, 0.1, 16, 0.5, rng(1), rng(2))
    plain, _, _ = local_train(LR, g, toy[0].train, 2, 0.1, 16, rng(1))
    assert upload.to_bytes() == plain.to_bytes()


# pFedMe ---------------------------------------------------------------------------


@pytest.mark.parametrize("a,w,lam", [(2.0, -1.0, 0.5), (-3.0, 4.0, 15.0), (0.7, 0.7, 1.0)])
def test_prox_point_of_quadratic(a, w, lam):
    exact = (a * 1.0 + lam * w) / (1.0 + lam)
    theta = prox_solve(lambda t: t - a, np.array([0.0]), np.array([w]), lam, 500, 0.05)
    assert abs(theta[0] - exact) <= 1e-4


def test_pfedme_tiny_lambda_barely_moves(toy):
    g = init_params(LR, 0)
    w, theta, _ = pfedme_local(LR, g, toy[0].train, 1e-8, 3, 0.1, 0.1, 2, 16, rng())
    assert l2_distance(w, g) < 1e-6
    assert l2_distance(theta, g) > 1e-2
    with pytest.raises(ValueError):
        pfedme_local(LR, g, toy[0].train, 0.0, 3, 0.1, 0.1, 1, 16, rng())


# FedEM ----------------------------------------------------------------------------


def test_fedem_single_component_is_fedavg(toy):
    g = init_params(LR, 0)
    pi, (comp,), q, flops = fedem_local(LR, [g], np.ones(1), toy[1].train, 2, 0.1, 16, [rng(5)])
    plain, f2, _ = local_train(LR, g, toy[1].train, 2, 0.1, 16, rng(5))
    assert comp.to_bytes() == plain.to_bytes()
    assert flops == f2 and pi.tolist() == [1.0]


def test_responsibilities_normalized_and_symmetric(toy):
    comps = [init_params(LR, 0), init_params(LR, 1), init_params(LR, 2)]
    q = responsibilities(LR, comps, np.array([0.2, 0.3, 0.5]), toy[0].train)
    assert np.max(np.abs(q.sum(axis=1) - 1.0)) <= 1e-12
    same = responsibilities(LR, [comps[0], comps[0]], np.array([0.5, 0.5]), toy[0].train)
    assert np.all(same == 0.5)


def test_fedem_component_count_must_match(toy):
    with pytest.raises(ValueError):
        fedem_local(LR, [init_params(LR, 0)] * 2, np.ones(3) / 3, toy[0].train, 1, 0.1, 16, [rng(), rng()])


# HypCluster -----------------------------------------------------------------------


def test_single_cluster_always_zero(toy):
    assert hypcluster_assign(LR, toy[0].val, [init_params(LR, 0)]) == 0


def test_generating_rule_cluster_is_chosen(toy):
    good = rule_model(0, 3)
    bad = good.map(lambda v: -v)
    assert accuracy(LR, good, toy[0].val) == 1.0
    assert hypcluster_assign(LR, toy[0].val, [bad, good, init_params(LR, 1)]) == 1
    assert hypcluster_assign(LR, toy[3].val, [bad, good, init_params(LR, 1)]) == 0


def test_empty_validation_falls_back_to_train(toy, caplog):
    empty = DataSplit(np.zeros((0, 5)), np.zeros(0, dtype=int))
    with caplog.at_level(logging.WARNING):
        cid = hypcluster_assign(LR, empty, [rule_model(0, 3).map(lambda v: -v), rule_model(0, 3)], toy[0].train)
    assert cid == 1
    assert "validation" in caplog.text


@given(st.lists(st.floats(0, 1), min_size=1, max_size=8))
def test_cluster_choice_invariant_to_monotone_rescaling(scores):
    # power-of-two scalings are exact, so they are strictly monotone on floats
    base = choose_cluster(scores)
    assert choose_cluster([2 * s for s in scores]) == base
    assert choose_cluster([8 * s for s in scores]) == base
    assert choose_cluster(scores) == min(i for i, s in enumerate(scores) if s == max(scores))


# fine-tuning and interpolation ----------------------------------------------------


def test_finetune_zero_lr_is_identity_and_does_not_mutate(toy):
    p = init_params(LR, 0)
    before = p.to_bytes()
    same, _ = finetune_before_eval(LR, p, toy[0].train, 3, 0.0, 16, rng())
    assert same == p and p.to_bytes() == before
    with pytest.raises(ValueError):
        finetune_before_eval(LR, p, toy[0].train, 0, 0.1, 16, rng())


def test_finetune_rescues_mismatched_client(toy):
    wrong = rule_model(0, 3, scale=1.0)  # fits r0, client 3 follows ~r0
    before = accuracy(LR, wrong, toy[3].test)
    tuned, _ = finetune_before_eval(LR, wrong, toy[3].train, 5, 0.5, 16, rng())
    assert accuracy(LR, tuned, toy[3].test) > before


def test_interpolation_examples():
    g, loc = NamedParams({"w": [4.0]}), NamedParams({"w": [0.0]})
    assert interpolate_personal(g, loc, 1.0) == g
    assert interpolate_personal(g, loc, 0.0) == loc
    assert interpolate_personal(g, loc, 0.25)["w"][0] == 1.0
    with pytest.raises(ValueError):
        interpolate_personal(g, loc, 1.5)


# unseen clients and masking -------------------------------------------------------


def _unseen(toy):
    from dataclasses import replace

    return replace(toy[0], participates=False)


def test_unseen_policy_per_method(toy):
    c = _unseen(toy)
    fedavg = build_strategy(StrategyConfig(), LR)
    slots, init = [init_params(LR, 7)], fedavg.init_slots(1)
    assert unseen_inference_policy(fedavg, slots, c, init) == [(slots[0], 1.0)]
    ditto = build_strategy(StrategyConfig(base="ditto"), LR)
    assert unseen_inference_policy(ditto, slots, c, init) == [(init[0], 1.0)]
    fedbn = build_strategy(StrategyConfig(mask=("norm",)), NORM_MLP)
    init_n = fedbn.init_slots(1)
    trained = init_n[0].map(lambda v: v + 1.0)
    (model, _), = unseen_inference_policy(fedbn, [trained], c, init_n)
    assert np.array_equal(model["norm0.scale"], init_n[0]["norm0.scale"])
    assert np.array_equal(model["fc0.W"], trained["fc0.W"])
    with pytest.raises(ValueError):
        unseen_inference_policy(fedavg, slots, toy[0], init)
    with pytest.raises(ValueError):
        unseen_inference_policy(build_strategy(StrategyConfig(base="isolated"), LR), slots, c, init)


def test_masked_groups_survive_broadcasts():
    fedbn = build_strategy(StrategyConfig(mask=("norm",)), NORM_MLP)
    init = fedbn.init_slots(0)
    state = ClientStrategyState(local_models={0: init[0].map(lambda v: v * 0 + 3.0)})
    for s in range(5):
        incoming = init_params(NORM_MLP, 100 + s)
        got = fedbn.receive(state, 0, incoming, init[0])
        assert np.all(got["norm0.scale"] == 3.0) and np.all(got["norm0.shift"] == 3.0)
        assert np.array_equal(got["fc0.W"], incoming["fc0.W"])


# configuration ------------------------------------------------------------------


@pytest.mark.parametrize(
    "cfg,fragment",
    [
        (StrategyConfig(base="isolated", server_lr=0.5), "FedOpt composes"),
        (StrategyConfig(base="global_train", mask=("norm",)), "masking"),
        (StrategyConfig(base="global_train", finetune_steps=2), "fine-tuning"),
        (StrategyConfig(base="fedavg", interp_w_g=0.5), "interp_w_g"),
        (StrategyConfig(base="pfedme", reg_lambda=0.0), "pfedme"),
        (StrategyConfig(base="nope"), "unknown method"),
    ],
)
def test_illegal_compositions(cfg, fragment):
    assert any(fragment in v for v in cfg.violations())


def test_method_names():
    assert StrategyConfig(mask=("norm",)).method_name() == "FedBN"
    assert StrategyConfig(finetune_steps=1).method_name() == "FedAvg-FT"
    assert StrategyConfig(base="ditto", mask=("norm",), server_lr=0.5, finetune_steps=1).method_name() == "Ditto-FedBN-FedOpt-FT"
    assert StrategyConfig(base="fedopt").effective_server_lr == 1.0


def test_registry_accepts_new_methods():
    @register
    class Frozen(Strategy):
        name = "frozen_test"

    try:
        assert isinstance(build_strategy(StrategyConfig(base="frozen_test"), LR), Frozen)
        assert StrategyConfig(base="frozen_test").violations() == []
        assert StrategyConfig(base="frozen_test").method_name() == "frozen_test"
    finally:
        REGISTRY.pop("frozen_test")
    with pytest.raises(ValueError):
        build_strategy(StrategyConfig(base="missing"), LR)


def test_slot_zero_shared_across_methods():
    a = build_strategy(StrategyConfig(), LR).init_slots(4)
    b = build_strategy(StrategyConfig(base="fedem", mixture_K=3), LR).init_slots(4)
    assert a[0] == b[0] and b[1] != b[0]
    assert slot_seed(4, 0) != slot_seed(5, 0)
    assert l2_norm(a[0]) > 0
