import json
import math

import numpy as np
import pytest

from relp.circuits import (
    Circuit,
    Error,
    Feature,
    FaithfulnessUndefinedError,
    NodeEffects,
    NodeId,
    SparseAutoencoder,
    ablated_metric,
    build_circuit,
    completeness,
    compute_means,
    excluded_layers,
    faithfulness,
    load_sae,
    node_effects,
    node_universe,
    save_sae,
    site_activations,
    train_sae,
)
from relp.model import ComponentId
from relp.model.checkpoint import CheckpointError
from relp.patching import atp, relp
from relp.rules import RuleConfig
from relp.tasks import agreement_splits

SITES = [(1, "resid_pre"), (1, "mlp_out")]


@pytest.fixture(scope="module")
def agreement(tok):
    return agreement_splits("across_PP", 0, n_discovery=24, n_heldout=8, tokenizer=tok)


@pytest.fixture(scope="module")
def saes(ref_model, agreement):
    disc, _ = agreement
    return {s: train_sae(ref_model, s, disc, d_feat=48, l1_coeff=1e-3, steps=300, seed=1) for s in SITES}


def identity_saes(model, sites, signed=True):
    return {s: SparseAutoencoder.identity(model.site_width(s[1]), site=s, signed=signed) for s in sites}


# -- SAE ------------------------------------------------------------------------


def test_sae_identity_is_exact(rng):
    X = rng.normal(size=(200, 12)) * 3
    sae = SparseAutoencoder(d_feat=16, steps=50, seed=0).fit(X)
    recon = sae.inverse_transform(sae.transform(X)) + sae.error(X)
    np.testing.assert_allclose(recon, X, rtol=0, atol=1e-12)


def test_sae_capacity(rng):
    basis = rng.normal(size=(8, 16))
    X = rng.normal(size=(3000, 8)) @ basis
    train, held = X[:2500], X[2500:]
    sae = SparseAutoencoder(d_feat=32, l1_coeff=0.0, steps=3000, lr=3e-3, seed=0).fit(train)
    assert sae.relative_error(held) < 0.05


def test_sparsity_decreases_with_l1(rng):
    X = np.abs(rng.normal(size=(1000, 10))) * rng.integers(0, 2, size=(1000, 10))
    active = []
    for l1 in (0.0, 0.05, 0.5):
        sae = SparseAutoencoder(d_feat=20, l1_coeff=l1, steps=800, lr=3e-3, seed=0).fit(X)
        active.append(sae.mean_active_)
        assert np.isfinite(sae.recon_loss_)
    assert active[0] > active[1] > active[2]


def test_sae_reports_loss_and_rejects_empty():
    sae = SparseAutoencoder.identity(4)
    X = np.abs(np.random.default_rng(0).normal(size=(5, 4)))
    np.testing.assert_array_equal(sae.transform(X), X)
    assert sae.relative_error(X) == 0.0
    with pytest.raises(ValueError):
        SparseAutoencoder(steps=1).fit(np.zeros((0, 4)))


def test_sae_save_load(tmp_path, rng):
    sae = SparseAutoencoder(d_feat=6, steps=20, seed=2, site=(1, "mlp_out")).fit(rng.normal(size=(50, 4)))
    save_sae(sae, tmp_path / "s.ckpt")
    back = load_sae(tmp_path / "s.ckpt")
    assert back.site == (1, "mlp_out") and back.get_params() == sae.get_params()
    for k, v in sae.params_.items():
        np.testing.assert_array_equal(back.params_[k], v)
    (tmp_path / "bad.ckpt").write_bytes(b"junk")
    with pytest.raises(CheckpointError):
        load_sae(tmp_path / "bad.ckpt")


def test_site_activations_shape(ref_model, agreement):
    disc, _ = agreement
    X = site_activations(ref_model, (1, "mlp_out"), disc[:3])
    assert X.shape == (6 * len(disc[0]), ref_model.d_model)


# -- node effects ---------------------------------------------------------------


def test_identical_pairs_give_zero_effects(ref_model, saes, agreement):
    p = agreement[0][0]
    same = type(p)(p.tokens_original, p.tokens_original, p.answer_original, p.answer_patch, p.metric)
    for method in ("atp", "relp", "ig"):
        eff = node_effects(ref_model, saes, [same], method, steps=2)
        assert all(v == 0.0 for _, v in eff.items())


@pytest.mark.parametrize("method", ["atp", "relp"])
def test_identity_dictionary_matches_site_scores(ref_model, agreement, method):
    sites = [(0, "resid_post"), (1, "attn_out"), (1, "mlp_out")]
    dicts = identity_saes(ref_model, sites)
    d = ref_model.d_model
    for p in agreement[0][:4]:
        eff = node_effects(ref_model, dicts, [p], method)
        comps = [ComponentId(l, k, t) for l, k in sites for t in range(len(p))]
        site = (atp(ref_model, p, comps) if method == "atp" else relp(ref_model, p, comps)).per_dim
        for l, k in sites:
            feat = eff.sites[(l, k)]["feat"]
            merged = feat[:, :d] + feat[:, d:]
            want = np.stack([site[ComponentId(l, k, t)] for t in range(len(p))])
            np.testing.assert_allclose(merged, want, rtol=1e-9, atol=1e-12)
            assert np.all(eff.sites[(l, k)]["err"] == 0.0)


def test_gradient_relp_equals_atp(ref_model, saes, agreement):
    pairs = agreement[0][:3]
    a = node_effects(ref_model, saes, pairs, "atp")
    r = node_effects(ref_model, saes, pairs, "relp", config=RuleConfig.gradient())
    for site in saes:
        np.testing.assert_array_equal(a.sites[site]["feat"], r.sites[site]["feat"])
        np.testing.assert_array_equal(a.sites[site]["err"], r.sites[site]["err"])


def test_error_effect_is_summed_dot_product(ref_model, saes, agreement):
    # the error node lumps the site minus its reconstruction, so feat + err
    # per position must equal AtP of the raw site summed over hidden dims
    p = agreement[0][0]
    eff = node_effects(ref_model, saes, [p], "atp")
    res = atp(ref_model, p, [ComponentId(l, k, t) for l, k in SITES for t in range(len(p))])
    for l, k in SITES:
        total = eff.sites[(l, k)]["feat"].sum(axis=1) + eff.sites[(l, k)]["err"]
        want = [res.scores[ComponentId(l, k, t)] for t in range(len(p))]
        np.testing.assert_allclose(total, want, rtol=1e-8, atol=1e-12)


def test_effects_average_pairs_and_threads(ref_model, saes, agreement):
    pairs = agreement[0][:4]
    mean = node_effects(ref_model, saes, pairs, "relp")
    each = [node_effects(ref_model, saes, [p], "relp") for p in pairs]
    threaded = node_effects(ref_model, saes, pairs, "relp", n_jobs=3)
    for site in saes:
        want = sum(e.sites[site]["feat"] for e in each) / 4
        np.testing.assert_allclose(mean.sites[site]["feat"], want, rtol=1e-12, atol=1e-15)
        np.testing.assert_array_equal(threaded.sites[site]["feat"], mean.sites[site]["feat"])


def test_node_effect_errors(ref_model, saes, agreement):
    disc = agreement[0]
    with pytest.raises(ValueError):
        node_effects(ref_model, saes, disc[:2], "ap")
    with pytest.raises(ValueError):
        node_effects(ref_model, saes, disc[:2], "ig", steps=0)
    with pytest.raises(ValueError):
        node_effects(ref_model, {(9, "mlp_out"): saes[SITES[1]]}, disc[:2])
    with pytest.raises(ValueError):
        node_effects(ref_model, {(1, "mlp_out"): SparseAutoencoder.identity(5)}, disc[:2])
    with pytest.raises(ValueError):
        node_effects(ref_model, saes, [])


def test_node_id_round_trip():
    for n in (Feature(1, "mlp_out", 7, 3), Error(0, "resid_pre", 2)):
        assert NodeId.parse(str(n)) == n
    assert Error(0, "attn_out", 1).is_error and not Feature(0, "attn_out", 0, 1).is_error


# -- circuits -------------------------------------------------------------------


def fake_effects(rng, n_layers=3, T=4, F=5):
    sites = {(l, "mlp_out"): {"feat": rng.normal(size=(T, F)), "err": rng.normal(size=T)} for l in range(n_layers)}
    return NodeEffects("RelP", sites, n_layers, 1)


def test_threshold_extremes(rng):
    eff = fake_effects(rng)
    universe = node_universe(eff, 3, 4)
    assert set(build_circuit(eff, 0.0).nodes) == universe
    top = max(abs(v) for _, v in eff.items())
    assert len(build_circuit(eff, top * 1.0001)) == 0


def test_circuits_are_nested(rng):
    eff = fake_effects(rng, n_layers=6)
    grid = np.linspace(0, 2.5, 10)
    circuits = [set(build_circuit(eff, t).nodes) for t in grid]
    for small, big in zip(circuits[1:], circuits[:-1]):
        assert small <= big
    for t, c in zip(grid, circuits):
        assert all(abs(eff[n]) >= t for n in c)


@pytest.mark.parametrize("n_layers", [1, 2, 3, 4, 6, 7])
def test_exclusion_is_first_third_rounded_up(rng, n_layers):
    assert excluded_layers(n_layers) == tuple(range(math.ceil(n_layers / 3)))
    eff = fake_effects(rng, n_layers=n_layers)
    c = build_circuit(eff, 0.0)
    assert {n.layer for n in c.nodes} == set(range(math.ceil(n_layers / 3), n_layers))
    assert {n.layer for n in build_circuit(eff, 0.0, exclude_first_third=False).nodes} == set(range(n_layers))


def test_non_finite_effects_rejected(rng):
    eff = fake_effects(rng)
    eff.sites[(2, "mlp_out")]["err"][0] = np.nan
    with pytest.raises(ValueError):
        build_circuit(eff, 0.1)


def test_circuit_json_round_trip(rng):
    c = build_circuit(fake_effects(rng), 0.5, task="across_PP")
    c.meta = {"discovery": "abc"}
    back = Circuit.from_dict(json.loads(c.to_json()))
    assert back == c
    assert back.complement() == c.universe - set(c.nodes)


# -- faithfulness ---------------------------------------------------------------


@pytest.fixture(scope="module")
def circuit_setup(ref_model, saes, agreement):
    disc, held = agreement
    means = compute_means(ref_model, saes, disc)
    eff = node_effects(ref_model, saes, disc[:8], "relp")
    return means, eff, held


def test_faithfulness_endpoints_are_exact(ref_model, saes, circuit_setup):
    means, eff, held = circuit_setup
    full = build_circuit(eff, 0.0)
    empty = build_circuit(eff, np.inf)
    for impl in ("mask", "loop"):
        assert faithfulness(ref_model, saes, full, held, means, impl=impl) == 1.0
        assert faithfulness(ref_model, saes, empty, held, means, impl=impl) == 0.0
        assert completeness(ref_model, saes, empty, held, means, impl=impl) == 1.0
        assert completeness(ref_model, saes, full, held, means, impl=impl) == 0.0


def test_mask_and_loop_ablation_agree(ref_model, saes, circuit_setup):
    means, eff, held = circuit_setup
    scores = sorted(abs(v) for n, v in eff.items() if v != 0.0)
    for q in (0.1, 0.5, 0.9):
        c = build_circuit(eff, scores[int(q * len(scores))])
        assert 0 < len(c) < len(c.universe)
        for fn in (faithfulness, completeness):
            a = fn(ref_model, saes, c, held, means, impl="mask")
            b = fn(ref_model, saes, c, held, means, impl="loop")
            assert abs(a - b) < 1e-9
            assert np.isfinite(a)


def test_ablation_identity(ref_model, saes, agreement):
    # means over a single prompt equal that prompt's own values
    p = agreement[1][0]
    means = compute_means(ref_model, saes, [p])
    universe = node_universe(saes, ref_model.n_layers, len(p))
    clean = ablated_metric(ref_model, saes, universe, universe, [p], means)
    for impl in ("mask", "loop"):
        ablated = ablated_metric(ref_model, saes, (), universe, [p], means, impl=impl)
        assert ablated == clean


def test_faithfulness_undefined(ref_model, saes, agreement):
    p = agreement[1][0]
    means = compute_means(ref_model, saes, [p])
    c = Circuit({}, 1.0, node_universe(saes, ref_model.n_layers, len(p)))
    with pytest.raises(FaithfulnessUndefinedError):
        faithfulness(ref_model, saes, c, [p], means)


def test_means_need_equal_lengths(ref_model, saes, agreement, ioi_pairs):
    with pytest.raises(ValueError):
        compute_means(ref_model, saes, [agreement[0][0], ioi_pairs[0]])
    with pytest.raises(ValueError):
        compute_means(ref_model, saes, [])
