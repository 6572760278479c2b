import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_graph
from npgnn import autodiff as ad
from npgnn.errors import InputError, SchemaError, ShapeError
from npgnn.graph import Graph, induce_subgraph, normalize_adjacency
from npgnn.model import (
    DecoderOutput,
    EncoderInput,
    LatentGaussian,
    ModelDims,
    ModelParams,
    NodeGaussianStats,
    aggregate,
    decode,
    edge_probability,
    elbo,
    encode,
    kl_diag_gaussian,
    load_params,
    recon_loglik,
    recon_target,
    sample_latent,
    save_params,
    vgae_elbo,
)
from npgnn.training import init_params, toy_gradcheck

DIMS = ModelDims(4, 3, 5, 4)


# ------------------------------------------------------------ dense oracles


def sig(t):
    return 1 / (1 + np.exp(-t))


def oracle_norm(edges, n):
    a = np.eye(n)
    for i, j in edges:
        a[i, j] = a[j, i] = 1
    d = 1 / np.sqrt(a.sum(1))
    return a * d[:, None] * d[None, :]


def oracle_encode(edges, n, x, p, act="relu"):
    a = oracle_norm(edges, n)
    h = np.maximum(a @ x @ p["W1"], 0)
    f = (lambda v: np.maximum(v, 0)) if act == "relu" else (lambda v: v)
    return f(a @ h @ p["W_mu"]), f(a @ h @ p["W_sigma"])


def oracle_decode(x, z, p, out="sigmoid"):
    xz = np.hstack([x, np.repeat(z.reshape(1, -1), len(x), axis=0)])
    h = sig(xz @ p["W2"] + p["b1"])
    u = h @ p["W3"] + p["b2"]
    return sig(u) if out == "sigmoid" else u


def oracle_recon(u, edges, n):
    a = np.eye(n)
    for i, j in edges:
        a[i, j] = a[j, i] = 1
    e = len(edges)
    w = (n * n - 2 * e) / (2 * e)
    norm = n * n / (2 * (n * n - 2 * e))
    total = 0.0
    for i in range(n):
        for j in range(n):
            pr = sig(u[i] @ u[j])
            total += w * a[i, j] * math.log(pr) + (1 - a[i, j]) * math.log(1 - pr)
    return norm * total / (n * n)


def oracle_kl(mq, lq, mp, lp):
    return float(np.sum(lp - lq + (np.exp(2 * lq) + (mq - mp) ** 2) / (2 * np.exp(2 * lp)) - 0.5))


def params_for(f, seed=0, kind="npgnn", act="relu"):
    return init_params(kind, f, DIMS, np.random.default_rng(seed), act).blocks


# ------------------------------------------------------------------ encoder


def test_encode_zero_weights():
    p = {k: np.zeros_like(v) for k, v in params_for(3).items()}
    s = encode(normalize_adjacency([(0, 1)], 3), np.ones((3, 3)), p)
    assert not s.mu.value.any() and not s.log_sigma.value.any()


def test_encode_single_node_is_perceptron(rng):
    p = params_for(3)
    x = rng.normal(size=(1, 3))
    s = encode(normalize_adjacency([], 1), x, p, "linear")
    np.testing.assert_allclose(s.mu.value, np.maximum(x @ p["W1"], 0) @ p["W_mu"], atol=1e-14)


@pytest.mark.parametrize("act", ["relu", "linear"])
@pytest.mark.parametrize("seed", range(5))
def test_encode_matches_dense_oracle(seed, act):
    rng = np.random.default_rng(seed)
    g = random_graph(4, 0.6, rng)
    p = params_for(3, seed)
    s = encode(normalize_adjacency(g.edges, 4), g.features, p, act)
    mu, ls = oracle_encode(g.edges.tolist(), 4, g.features, p, act)
    np.testing.assert_allclose(s.mu.value, mu, atol=1e-12)
    np.testing.assert_allclose(s.log_sigma.value, ls, atol=1e-12)


def test_encode_shape_mismatch():
    with pytest.raises(ShapeError):
        encode(normalize_adjacency([], 2), np.ones((3, 3)), params_for(3))


# -------------------------------------------------------------- aggregation


def _stats(mu, ls):
    return NodeGaussianStats(ad.const(mu), ad.const(ls))


def test_aggregate_examples():
    lg = aggregate(_stats([[0.0, 2.0], [2.0, 0.0]], np.zeros((2, 2))))
    assert lg.mu_z.value.tolist() == [[1.0, 1.0]]
    row = np.array([[0.3, -1.2]])
    lg = aggregate(_stats(row, row))
    assert np.array_equal(lg.mu_z.value, row) and np.array_equal(lg.log_sigma_z.value, row)
    with pytest.raises(InputError):
        aggregate(_stats(np.zeros((0, 2)), np.zeros((0, 2))))


@pytest.mark.parametrize("seed", range(20))
def test_aggregate_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    mu, ls = rng.normal(size=(9, 4)), rng.normal(size=(9, 4))
    perm = rng.permutation(9)
    a, b = aggregate(_stats(mu, ls)), aggregate(_stats(mu[perm], ls[perm]))
    np.testing.assert_allclose(a.mu_z.value, b.mu_z.value, rtol=0, atol=1e-12)
    np.testing.assert_allclose(a.log_sigma_z.value, b.log_sigma_z.value, rtol=0, atol=1e-12)


def test_sample_latent_examples():
    def lg(m, s):
        return LatentGaussian(ad.const([[m]]), ad.const([[s]]))

    mu = np.array([[0.4, -0.7]])
    z = sample_latent(LatentGaussian(ad.const(mu), ad.const([[1.0, 2.0]])), [0.0, 0.0])
    assert np.array_equal(z.value, mu)
    assert sample_latent(lg(0.0, 0.0), [1.0]).value[0, 0] == 1.0
    assert abs(sample_latent(lg(1.0, math.log(2)), [-0.5]).value[0, 0]) < 1e-15


# ------------------------------------------------------------------ decoder


def test_decode_zero_weights():
    p = {k: np.zeros_like(v) for k, v in params_for(3).items()}
    dec = decode(np.ones((5, 3)), ad.const(np.zeros((1, 3))), p)
    assert np.all(dec.U.value == 0.5)
    assert np.all(dec.logits().value == 0.25 * DIMS.embedding)


@pytest.mark.parametrize("out", ["sigmoid", "linear"])
@pytest.mark.parametrize("seed", range(5))
def test_decode_matches_oracle_and_is_symmetric(seed, out):
    rng = np.random.default_rng(seed)
    p = params_for(3, seed)
    x, z = rng.normal(size=(5, 3)), rng.normal(size=(1, 3))
    dec = decode(x, ad.const(z), p, out)
    np.testing.assert_allclose(dec.U.value, oracle_decode(x, z, p, out), atol=1e-13)
    lg = dec.logits().value
    assert np.array_equal(lg, lg.T)
    for i in range(5):
        for j in range(5):
            assert edge_probability(dec, i, j) == edge_probability(dec, j, i)


def test_edge_probability_examples():
    dec = DecoderOutput(ad.const([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]))
    assert edge_probability(dec, 0, 1) == 0.5
    assert abs(edge_probability(dec, 0, 2) - 0.7310585786300049) < 1e-12


# -------------------------------------------------------------- likelihood


def test_recon_all_zero_logits():
    # A = I_2 (no edges), pos_weight = norm = 1 -> mean log 0.5
    tgt = recon_target([], 2)
    tgt = type(tgt)(tgt.adjacency, 1.0, 1.0)
    v = recon_loglik(ad.const(np.zeros((2, 2))), tgt).item()
    assert abs(v - math.log(0.5)) < 1e-15


def test_recon_perfect_logits_approach_zero():
    edges = [(0, 1)]
    tgt = recon_target(edges, 3)
    big = np.where(tgt.adjacency > 0, 40.0, -40.0)
    v = recon_loglik(ad.const(big), tgt).item()
    assert -1e-15 < -v < 1e-12 or v == 0.0
    assert v <= 0


@pytest.mark.parametrize("seed", range(10))
def test_recon_matches_naive_oracle(seed):
    rng = np.random.default_rng(seed)
    g = random_graph(6, 0.4, rng)
    if g.num_edges == 0:
        g = Graph(6, g.features, [(0, 1)])
    u = rng.normal(size=(6, 3))
    got = recon_loglik(DecoderOutput(ad.const(u)), recon_target(g.edges, 6)).item()
    assert abs(got - oracle_recon(u, g.edges.tolist(), 6)) < 1e-10


def test_recon_target_constants():
    t = recon_target([(0, 1), (1, 2)], 4)
    assert t.pos_weight == (16 - 4) / 4 and t.norm == 16 / (2 * 12)
    assert np.trace(t.adjacency) == 4
    assert np.trace(recon_target([(0, 1)], 4, self_loops=False).adjacency) == 0


# ----------------------------------------------------------------------- KL


def _lg(m, s):
    return LatentGaussian(ad.const(np.atleast_2d(m)), ad.const(np.atleast_2d(s)))


def test_kl_examples():
    assert kl_diag_gaussian(_lg([1.0], [0.0]), _lg([0.0], [0.0])).item() == 0.5
    v = kl_diag_gaussian(_lg([0.0], [1.0]), _lg([0.0], [0.0])).item()
    assert abs(v - (0.5 * (math.e**2 - 1) - 1)) < 1e-12
    assert abs(v - 2.194528) < 1e-6


def test_kl_nonnegative_1000_pairs_and_self_zero():
    rng = np.random.default_rng(2024)
    for _ in range(1000):
        d = int(rng.integers(1, 8))
        mq, lq, mp, lp = (rng.normal(scale=2, size=(1, d)) for _ in range(4))
        v = kl_diag_gaussian(_lg(mq, lq), _lg(mp, lp)).item()
        assert v >= 0
        assert abs(v - oracle_kl(mq, lq, mp, lp)) < 1e-9 * max(1, abs(v))
        assert abs(kl_diag_gaussian(_lg(mq, lq), _lg(mq, lq)).item()) <= 1e-12


@settings(max_examples=200, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=2), st.lists(st.floats(-3, 3), min_size=2, max_size=2))
def test_kl_self_is_zero_property(m, s):
    assert abs(kl_diag_gaussian(_lg(m, s), _lg(m, s)).item()) <= 1e-12


def test_kl_shape_mismatch():
    with pytest.raises(ShapeError):
        kl_diag_gaussian(_lg([0.0], [0.0]), _lg([0.0, 1.0], [0.0, 0.0]))


# --------------------------------------------------------------------- ELBO


def toy6(seed=0):
    rng = np.random.default_rng(seed)
    return Graph(6, rng.uniform(size=(6, 3)), [(0, 1), (1, 2), (2, 0), (3, 4), (4, 5), (2, 3)])


def test_elbo_full_context_has_zero_kl():
    g = toy6()
    p = params_for(3)
    t = elbo(g, induce_subgraph(g, range(6)), p, rng=np.random.default_rng(0))
    assert t.kl.item() == 0.0 and t.elbo.item() == t.recon.item()
    t = elbo(g, g.edges, p, rng=np.random.default_rng(0))
    assert t.kl.item() == 0.0


def test_elbo_repeated_eps_equals_single():
    g = toy6()
    p = params_for(3)
    ctx = induce_subgraph(g, [0, 1, 2])
    eps = np.random.default_rng(3).normal(size=(1, DIMS.latent))
    one = elbo(g, ctx, p, L=1, epsilon=eps).elbo.item()
    three = elbo(g, ctx, p, L=3, epsilon=np.repeat(eps, 3, axis=0)).elbo.item()
    assert abs(one - three) < 1e-15


@pytest.mark.parametrize("out", ["sigmoid", "linear"])
@pytest.mark.parametrize("act", ["relu", "linear"])
def test_elbo_matches_end_to_end_oracle(act, out):
    g = toy6(1)
    p = params_for(3, 1, act=act)
    ctx_nodes = [0, 2, 3, 5]
    sub = induce_subgraph(g, ctx_nodes)
    eps = np.random.default_rng(5).normal(size=(2, DIMS.latent))
    got = elbo(g, sub, p, L=2, epsilon=eps, activation=act, decoder_output=out)

    mu, ls = oracle_encode(g.edges.tolist(), 6, g.features, p, act)
    cmu, cls = oracle_encode(sub.induced_edges.tolist(), 4, g.features[ctx_nodes], p, act)
    mq, lq, mp, lp = mu.mean(0), ls.mean(0), cmu.mean(0), cls.mean(0)
    recon = np.mean([oracle_recon(oracle_decode(g.features, mq + np.exp(lq) * e, p, out), g.edges.tolist(), 6)
                     for e in eps])
    want = recon - oracle_kl(mq, lq, mp, lp)
    assert abs(got.elbo.item() - want) < 1e-10


def test_vgae_examples():
    g = toy6()
    p = {k: np.zeros_like(v) for k, v in params_for(3, kind="vgae", act="linear").items()}
    # zero weights: mu = log_sigma = 0, so the posterior is N(0, I) exactly and
    # z evaluated at the mean (eps = 0) gives every edge probability 0.5
    t = vgae_elbo(g, p, epsilon=np.zeros((6, DIMS.latent)))
    assert t.kl.item() == 0.0
    tgt = recon_target(g.edges, 6)
    want = tgt.norm / 36 * (tgt.pos_weight * tgt.adjacency.sum() + (36 - tgt.adjacency.sum())) * math.log(0.5)
    assert abs(t.recon.item() - want) < 1e-12


@pytest.mark.parametrize("seed", range(3))
def test_vgae_matches_oracle(seed):
    g = toy6(seed)
    p = params_for(3, seed, kind="vgae", act="linear")
    eps = np.random.default_rng(seed).normal(size=(6, DIMS.latent))
    t = vgae_elbo(g, p, epsilon=eps)
    mu, ls = oracle_encode(g.edges.tolist(), 6, g.features, p, "linear")
    z = mu + np.exp(ls) * eps
    kl = 0.5 * np.sum(np.exp(2 * ls) + mu**2 - 1 - 2 * ls) / 36
    assert abs(t.elbo.item() - (oracle_recon(z, g.edges.tolist(), 6) - kl)) < 1e-10


# ---------------------------------------------------------- gradient checks


COMBOS = [("npgnn", "relu", "sigmoid"), ("npgnn", "linear", "sigmoid"), ("npgnn", "relu", "linear"),
          ("npgnn", "linear", "linear"), ("vgae", "linear", "sigmoid"), ("vgae", "relu", "sigmoid")]


@pytest.mark.parametrize("model,act,out", COMBOS)
def test_full_model_gradient_check_default_toy(model, act, out):
    # the literal setting: h = 1e-6, tol = 1e-5, float64, fixed noise
    rep = toy_gradcheck(model, 0, h=1e-6, tol=1e-5, activation=act, decoder_output=out)
    assert rep.passed, rep.lines()


@pytest.mark.parametrize("model,act,out", COMBOS)
def test_full_model_gradient_check_sweep(model, act, out):
    # Over random instances, h = 1e-6 occasionally loses to cancellation on
    # near-zero gradient entries (absolute error ~1e-10 against entries
    # ~1e-6); h = 1e-5 balances truncation and round-off.
    for seed in range(30):
        rep = toy_gradcheck(model, seed, h=1e-5, tol=1e-5, activation=act, decoder_output=out)
        assert rep.passed, (seed, rep.lines())


def test_gradcheck_report_is_reproducible():
    a, b = toy_gradcheck("npgnn", 3), toy_gradcheck("npgnn", 3)
    assert a.errors == b.errors


def test_gradcheck_on_six_node_elbo():
    g = toy6(2)
    p = params_for(3, 2)
    sub = induce_subgraph(g, [1, 2, 4])
    eps = np.random.default_rng(0).normal(size=(1, DIMS.latent))
    full = EncoderInput.from_graph(g)
    ctx = EncoderInput.from_edges(sub.induced_edges, 3, sub.features)
    from npgnn.model import npgnn_elbo_terms

    tgt = recon_target(g.edges, 6)
    rep = ad.gradient_check(lambda t, q: npgnn_elbo_terms(full, ctx, g.features, tgt, q, eps).elbo, p)
    assert rep.passed, rep.lines()


# --------------------------------------------------------------- checkpoints


def test_checkpoint_roundtrip(tmp_path):
    params = ModelParams("npgnn", params_for(3), "linear", "linear")
    save_params(tmp_path / "ck.json", params, {"seed": 4})
    back, cfg = load_params(tmp_path / "ck.json")
    assert cfg == {"seed": 4} and back.activation == "linear" and back.decoder_output == "linear"
    for k, v in params.blocks.items():
        assert np.array_equal(back.blocks[k], v)


def test_checkpoint_version_mismatch(tmp_path):
    (tmp_path / "ck.json").write_text('{"schema": "npgnn-checkpoint", "version": 99}')
    with pytest.raises(SchemaError):
        load_params(tmp_path / "ck.json")


def test_model_params_validation():
    blocks = params_for(3)
    with pytest.raises(InputError):
        ModelParams("npgnn", {k: v for k, v in blocks.items() if k != "W2"})
    with pytest.raises(InputError):
        ModelParams("gat", blocks)


def test_context_sufficiency():
    # one isolated node vs two isolated copies of it: different subgraphs with
    # identical aggregates, hence identical decoder output for the same noise
    rng = np.random.default_rng(8)
    p = params_for(3, 8)
    x1 = rng.normal(size=(1, 3))
    ctx_a = aggregate(encode(normalize_adjacency([], 1), x1, p))
    ctx_b = aggregate(encode(normalize_adjacency([], 2), np.vstack([x1, x1]), p))
    # BLAS may round a 1-row and a 2-row product differently in the last ulp
    np.testing.assert_allclose(ctx_a.mu_z.value, ctx_b.mu_z.value, rtol=0, atol=1e-15)
    eps = rng.normal(size=(1, DIMS.latent))
    x_full = rng.normal(size=(5, 3))
    ua = decode(x_full, sample_latent(ctx_a, eps), p).U.value
    ub = decode(x_full, sample_latent(ctx_b, eps), p).U.value
    np.testing.assert_allclose(ua, ub, rtol=0, atol=1e-14)
    # a permuted context has bitwise-equal aggregates here, and so equal output
    x3 = rng.normal(size=(3, 3))
    ctx_c = aggregate(encode(normalize_adjacency([(0, 1)], 3), x3, p))
    ctx_d = aggregate(encode(normalize_adjacency([(1, 2)], 3), x3[[2, 0, 1]], p))
    assert np.array_equal(ctx_c.mu_z.value, ctx_d.mu_z.value)
    assert np.array_equal(ctx_c.log_sigma_z.value, ctx_d.log_sigma_z.value)
    uc = decode(x_full, sample_latent(ctx_c, eps), p).U.value
    ud = decode(x_full, sample_latent(ctx_d, eps), p).U.value
    assert np.array_equal(uc, ud)


def test_edge_probabilities_in_open_interval():
    rng = np.random.default_rng(9)
    p = params_for(3, 9)
    dec = decode(rng.normal(size=(6, 3)), ad.const(rng.normal(size=(1, 3))), p)
    probs = 1 / (1 + np.exp(-dec.logits().value))
    assert np.all((probs > 0) & (probs < 1))
