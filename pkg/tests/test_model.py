import copy
import math

import numpy as np
import pytest

from dptrn.core import ConfigError, DimensionError, softmax_cross_entropy
from dptrn.model import (
    DPTRN,
    CheckpointError,
    ModelConfig,
    absolute_position_embedding,
    build_relation_input,
    combine_and_pool,
    decoupling_position_embedding,
    load_checkpoint,
    save_checkpoint,
)

from conftest import central_diff, rel_err

TINY = dict(T=3, M=2, C=2, relation_hidden=(4, 3), classifier_hidden=(4, 3, 2))


def randomize(model, rng, scale=0.5):
    """Push every parameter and running statistic away from its init values."""
    for _, (value, _) in model.params().items():
        value[...] = rng.normal(scale=scale, size=value.shape)
    for mlp in (model.relation, model.classifier):
        if mlp is None:
            continue
        for bn in mlp.batchnorms:
            bn.running_mean = rng.normal(size=bn.dim)
            bn.running_var = rng.random(bn.dim) + 0.5
    return model


# -- position embeddings --------------------------------------------------------


def test_position_zero_alternates():
    np.testing.assert_array_equal(absolute_position_embedding(0, 6), [0, 1, 0, 1, 0, 1])
    np.testing.assert_array_equal(absolute_position_embedding(0, 5), [0, 1, 0, 1, 0])


def test_position_one_d2():
    pe = absolute_position_embedding(1, 2)
    np.testing.assert_allclose(pe, [math.sin(1.0), math.cos(1.0)], rtol=1e-15)
    np.testing.assert_allclose(pe, [0.84147, 0.54030], atol=5e-6)


def test_position_large():
    assert absolute_position_embedding(10000, 2)[0] == pytest.approx(math.sin(10000.0), abs=1e-12)


def test_position_scalar_formula():
    d = 7
    pe = absolute_position_embedding(13, d)
    for j in range(d):
        i = j // 2
        angle = 13 / 10000 ** (2 * i / d)
        expected = math.sin(angle) if j % 2 == 0 else math.cos(angle)
        assert pe[j] == pytest.approx(expected, abs=1e-14)
    assert pe[-1] == pytest.approx(math.sin(13 / 10000 ** (6 / 7)), abs=1e-14)


# -- relation input ---------------------------------------------------------------


def test_relation_input_scalar():
    np.testing.assert_array_equal(build_relation_input([2.0], [3.0]), [2, 3, -1, 5])


def test_relation_input_symmetric(rng):
    v = rng.normal(size=4)
    out = build_relation_input(v, v)
    np.testing.assert_array_equal(out, np.concatenate([v, v, np.zeros(4), 2 * v]))


def test_relation_input_elementwise(rng):
    a, b = rng.normal(size=3), rng.normal(size=3)
    out = build_relation_input(a, b)
    for m in range(3):
        assert out[m] == a[m]
        assert out[3 + m] == b[m]
        assert out[6 + m] == a[m] - b[m]
        assert out[9 + m] == a[m] + b[m]


def test_relation_input_length_mismatch():
    with pytest.raises(DimensionError):
        build_relation_input([1.0, 2.0], [1.0])


# -- decoupling position embedding ----------------------------------------------


def test_dpe_identity_matrices():
    eye = np.eye(4)
    for k in range(5):
        expected = absolute_position_embedding(k, 4) @ absolute_position_embedding(5, 4)
        assert decoupling_position_embedding(eye, eye, k, 5) == pytest.approx(expected, abs=1e-15)


def test_dpe_zero_query(rng):
    assert decoupling_position_embedding(np.zeros((3, 3)), rng.normal(size=(3, 3)), 1, 4) == 0.0


def test_dpe_double_loop_oracle(rng):
    pq, pk = rng.normal(size=(4, 4)), rng.normal(size=(4, 4))
    pe_k, pe_t = absolute_position_embedding(1, 4), absolute_position_embedding(5, 4)
    expected = 0.0
    for j in range(4):
        q = sum(pe_k[i] * pq[i][j] for i in range(4))
        key = sum(pe_t[i] * pk[i][j] for i in range(4))
        expected += q * key
    assert decoupling_position_embedding(pq, pk, 1, 5) == pytest.approx(expected, rel=1e-13)


def test_dpe_range_check():
    with pytest.raises(ValueError):
        decoupling_position_embedding(np.eye(2), np.eye(2), 3, 3)


def test_model_dpe_vector_matches_scalar_function(rng):
    model = DPTRN(ModelConfig(T=6, M=4, C=2))
    model.p_query[...] = rng.normal(size=(4, 4))
    model.p_key[...] = rng.normal(size=(4, 4))
    vec = model.dpe_vector()
    for k in range(5):
        assert vec[k] == pytest.approx(decoupling_position_embedding(model.p_query, model.p_key, k, 5), rel=1e-13)


# -- pooling ---------------------------------------------------------------------


def test_pool_one_hot_selects_row(rng):
    hist = rng.normal(size=(4, 3))
    rw_pre = np.zeros(4)
    rw_pre[2] = np.sqrt(3)
    rep = combine_and_pool(rw_pre, np.zeros(4), hist)
    np.testing.assert_allclose(rep.hi, hist[2], rtol=1e-15)


def test_pool_all_ones_column_sums(rng):
    hist = rng.normal(size=(5, 3))
    rep = combine_and_pool(np.full(5, np.sqrt(3)), np.zeros(5), hist)
    np.testing.assert_allclose(rep.hi, hist.sum(axis=0), rtol=1e-14)


def test_pool_outer_product_oracle(rng):
    T, M = 4, 3
    hist = rng.normal(size=(T - 1, M))
    rw_pre, dpe = rng.normal(size=T - 1), rng.normal(size=T - 1)
    rw = (rw_pre + dpe) / np.sqrt(M)
    outer = np.array([[rw[k] * hist[k][m] for m in range(M)] for k in range(T - 1)])
    rep = combine_and_pool(rw_pre, dpe, hist)
    np.testing.assert_allclose(rep.rw, rw, rtol=1e-15)
    np.testing.assert_allclose(rep.hi, outer.sum(axis=0), rtol=1e-13)


# -- relation unit -------------------------------------------------------------------


def test_zero_relation_network_gives_zero_scores(rng):
    model = DPTRN(ModelConfig(**TINY))
    for value, _ in model.relation.params().values():
        value[...] = 0.0
    model.eval()
    assert np.all(model.relation_weights_pre(rng.normal(size=(3, 3, 2))) == 0.0)


def test_single_layer_relation_unit_is_affine(rng):
    model = DPTRN(ModelConfig(T=4, M=2, C=2, relation_hidden=()), seed=1)
    (lin,) = model.relation.linears
    lin.bias[...] = 0.7
    x = rng.normal(size=(2, 4, 2))
    out = model.relation_weights_pre(x)
    for b in range(2):
        for k in range(3):
            v = build_relation_input(x[b, -1], x[b, k])
            assert out[b, k] == pytest.approx(float(lin.weight[0] @ v + 0.7), rel=1e-13)


def test_batched_matches_sequential_loop(rng):
    model = randomize(DPTRN(ModelConfig(T=7, M=3, C=3, relation_hidden=(16, 8)), seed=2), rng)
    model.eval()
    x = rng.normal(size=(10, 7, 3))
    batched = model.relation_weights_pre(x)
    for b in range(10):
        for k in range(6):
            v = build_relation_input(x[b, -1], x[b, k])[None]
            single = model.relation.forward(v)[0, 0]
            assert abs(single - batched[b, k]) < 1e-10


def test_no_softmax_normalisation(rng):
    model = DPTRN(ModelConfig(T=5, M=2, C=2), seed=0)
    model.eval()
    last = model.relation.linears[-1]
    last.weight[...] = 0.0
    x = rng.normal(size=(1, 5, 2))
    last.bias[...] = 1.0
    assert model.relation_weights_pre(x).sum() == pytest.approx(4.0)
    last.bias[...] = -0.5
    assert model.relation_weights_pre(x).sum() == pytest.approx(-2.0)


def test_weight_sharing_touches_every_node(rng):
    model = DPTRN(ModelConfig(T=6, M=3, C=2, relation_hidden=()), seed=3)
    model.eval()
    x = rng.normal(size=(1, 6, 3))
    before = model.relation_weights_pre(x)
    model.relation.linears[0].weight[0, 3] += 0.5  # first historical-feature weight
    after = model.relation_weights_pre(x)
    assert np.all(before != after)


def test_param_count_independent_of_T():
    counts = {DPTRN(ModelConfig(T=T, M=4, C=3)).num_params() for T in (2, 5, 40)}
    assert len(counts) == 1


def test_relation_output_is_scalar():
    model = DPTRN(ModelConfig(T=3, M=2, C=2))
    assert model.relation.linears[-1].weight.shape[0] == 1


# -- full forward ----------------------------------------------------------------------


def test_zero_final_layer_gives_uniform_probabilities(rng):
    model = DPTRN(ModelConfig(T=4, M=3, C=2), seed=0)
    final = model.classifier.linears[-1]
    final.weight[...] = 0.0
    final.bias[...] = 0.0
    model.eval()
    np.testing.assert_array_equal(model.predict_proba(rng.normal(size=(3, 4, 3))), 0.5)


def test_eval_forward_is_bit_identical(rng):
    model = DPTRN(ModelConfig(T=5, M=3, C=3), seed=0)
    model.eval()
    x = rng.normal(size=(4, 5, 3))
    a, ra = model.forward(x)
    b, rb = model.forward(x)
    assert np.array_equal(a, b) and np.array_equal(ra.rw, rb.rw)


def _oracle_logits(model, x):
    """Independent loop re-implementation of the eval-mode forward pass."""
    cfg = model.config
    T, M = cfg.T, cfg.M
    scale = 1.0 / math.sqrt(M)

    def mlp(net, vec):
        h = list(vec)
        linears, bns = net.linears, net.batchnorms
        for i, lin in enumerate(linears):
            out = []
            for o in range(lin.out_dim):
                acc = lin.bias[o]
                for j in range(lin.in_dim):
                    acc += lin.weight[o][j] * h[j]
                out.append(acc)
            if i < len(bns):
                bn = bns[i]
                out = [
                    bn.gamma[j] * (out[j] - bn.running_mean[j]) / math.sqrt(bn.running_var[j] + bn.eps)
                    + bn.beta[j]
                    for j in range(len(out))
                ]
                out = [max(0.0, v) for v in out]
            h = out
        return h

    def pe(pos):
        vals = []
        for j in range(M):
            angle = pos / 10000 ** (2 * (j // 2) / M)
            vals.append(math.sin(angle) if j % 2 == 0 else math.cos(angle))
        return vals

    def matvec_left(vec, mat):
        return [sum(vec[i] * mat[i][j] for i in range(M)) for j in range(M)]

    logits = []
    for sample in x:
        rows = [list(r) for r in sample]
        if cfg.variant == "ablation_b":
            rows = [[rows[t][m] + pe(t)[m] for m in range(M)] for t in range(T)]
        cur = rows[-1]
        hi = [0.0] * M
        for k in range(T - 1):
            hist = rows[k]
            v = cur + hist + [c - h for c, h in zip(cur, hist)] + [c + h for c, h in zip(cur, hist)]
            rw_pre = mlp(model.relation, v)[0]
            dpe = 0.0
            if cfg.variant == "full":
                q = matvec_left(pe(k), model.p_query)
                key = matvec_left(pe(T - 1), model.p_key)
                dpe = sum(a * b for a, b in zip(q, key))
            rw = (rw_pre + dpe) * scale
            hi = [hi[m] + rw * hist[m] for m in range(M)]
        logits.append(mlp(model.classifier, hi + cur))
    return np.array(logits)


@pytest.mark.parametrize("variant", ["full", "ablation_a", "ablation_b"])
def test_end_to_end_matches_loop_oracle(variant, rng):
    model = randomize(DPTRN(ModelConfig(**TINY, variant=variant), seed=5), rng)
    model.eval()
    x = rng.normal(size=(4, 3, 2))
    logits, _ = model.forward(x)
    np.testing.assert_allclose(logits, _oracle_logits(model, x), rtol=1e-11, atol=1e-12)


def test_flatten_mlp_forward(rng):
    model = randomize(DPTRN(ModelConfig(T=3, M=2, C=2, classifier_hidden=(4,), variant="flatten_mlp")), rng)
    model.eval()
    x = rng.normal(size=(2, 3, 2))
    logits, report = model.forward(x)
    assert report is None
    assert model.classifier.linears[0].in_dim == 6
    np.testing.assert_allclose(logits, model.classifier.forward(x.reshape(2, 6)))


def test_dpe_identical_across_samples(rng):
    model = randomize(DPTRN(ModelConfig(T=6, M=3, C=2), seed=0), rng)
    model.eval()
    _, rep = model.forward(rng.normal(size=(8, 6, 3)))
    assert np.max(np.abs(rep.dpe - rep.dpe[0])) == 0.0


def test_ablation_a_has_zero_dpe(rng):
    model = DPTRN(ModelConfig(T=5, M=3, C=2, variant="ablation_a"))
    model.eval()
    _, rep = model.forward(rng.normal(size=(2, 5, 3)))
    assert np.all(rep.dpe == 0.0)
    np.testing.assert_allclose(rep.rw, rep.rw_pre / np.sqrt(3))


def test_ablation_b_adds_embeddings_to_features(rng):
    cfg_b = ModelConfig(T=5, M=3, C=2, variant="ablation_b")
    cfg_a = ModelConfig(T=5, M=3, C=2, variant="ablation_a")
    b = DPTRN(cfg_b, seed=4)
    a = DPTRN(cfg_a, seed=4)
    a.load_state_arrays(b.state_arrays())
    a.eval(), b.eval()
    x = rng.normal(size=(2, 5, 3))
    shifted = x + np.stack([absolute_position_embedding(t, 3) for t in range(5)])
    np.testing.assert_allclose(b.forward(x)[0], a.forward(shifted)[0], rtol=1e-13)


def test_permutation_only_matters_through_dpe(rng):
    x = rng.normal(size=(1, 7, 3))
    perm = rng.permutation(6)
    xp = x.copy()
    xp[0, :6] = x[0, perm]

    a = randomize(DPTRN(ModelConfig(T=7, M=3, C=2, variant="ablation_a", dropout=0.0), seed=1), rng)
    a.eval()
    _, ra = a.forward(x)
    _, rpa = a.forward(xp)
    np.testing.assert_allclose(rpa.rw_pre[0], ra.rw_pre[0][perm], rtol=1e-12)
    np.testing.assert_allclose(rpa.hi, ra.hi, rtol=1e-12, atol=1e-13)

    full = randomize(DPTRN(ModelConfig(T=7, M=3, C=2, dropout=0.0), seed=1), rng)
    full.eval()
    _, rf = full.forward(x)
    _, rpf = full.forward(xp)
    assert np.max(np.abs(rpf.hi - rf.hi)) > 1e-6


def test_concatenation_order_history_first(rng):
    model = randomize(DPTRN(ModelConfig(T=5, M=3, C=2), seed=0), rng)
    model.eval()
    first = model.classifier.linears[0]
    x = rng.normal(size=(2, 5, 3))
    x2 = x.copy()
    x2[:, :4] = rng.normal(size=(2, 4, 3))

    saved = first.weight.copy()
    first.weight[:, :3] = 0.0
    np.testing.assert_array_equal(model.forward(x)[0], model.forward(x2)[0])

    first.weight[...] = saved
    first.weight[:, 3:] = 0.0
    logits, rep = model.forward(x)
    direct = model.classifier.forward(np.concatenate([rep.hi, np.zeros((2, 3))], axis=1))
    np.testing.assert_array_equal(logits, direct)


def test_config_errors():
    with pytest.raises(ConfigError):
        ModelConfig(T=1, M=2, C=2)
    with pytest.raises(ConfigError):
        ModelConfig(T=3, M=2, C=2, variant="nope")
    model = DPTRN(ModelConfig(T=3, M=2, C=2))
    with pytest.raises(DimensionError):
        model.forward(np.zeros((1, 4, 2)))


# -- backward --------------------------------------------------------------------------


def _fd_full_model(model, x, y, probes, rng, tol):
    snapshot = copy.deepcopy(model)

    def loss():
        m = copy.deepcopy(snapshot)
        return softmax_cross_entropy(m.forward(x)[0], y)[0]

    work = copy.deepcopy(snapshot)
    work.zero_grad()
    work.loss_and_backward(x, y)
    worst = {}
    for name, (value, _) in snapshot.params().items():
        grad = work.params()[name][1]
        flat = list(np.ndindex(value.shape))
        picks = rng.choice(len(flat), size=min(probes, len(flat)), replace=False)
        worst[name] = max(rel_err(central_diff(loss, value, flat[p]), grad[flat[p]]) for p in picks)
    bad = {k: v for k, v in worst.items() if v >= tol}
    assert not bad, bad
    return worst


@pytest.mark.parametrize("variant", ["full", "ablation_a", "ablation_b", "flatten_mlp"])
def test_gradients_match_finite_differences(variant, rng):
    model = DPTRN(ModelConfig(**TINY, variant=variant, dropout=0.0), seed=7)
    model.train()
    if model.p_query is not None:
        model.p_query[...] = rng.normal(size=model.p_query.shape)
        model.p_key[...] = rng.normal(size=model.p_key.shape)
    x = rng.normal(size=(5, 3, 2))
    y = rng.integers(0, 2, size=5)
    _fd_full_model(model, x, y, 20, rng, 1e-4)


def test_backward_requires_train_mode(rng):
    model = DPTRN(ModelConfig(**TINY))
    model.eval()
    with pytest.raises(RuntimeError):
        model.loss_and_backward(rng.normal(size=(2, 3, 2)), [0, 1])


def test_saturated_logits_give_vanishing_gradients(rng):
    model = DPTRN(ModelConfig(T=4, M=3, C=3), seed=0)
    final = model.classifier.linears[-1]
    final.weight[...] = 0.0
    final.bias[...] = [100.0, 0.0, 0.0]
    model.train()
    model.zero_grad()
    model.loss_and_backward(rng.normal(size=(6, 4, 3)), np.zeros(6, dtype=int))
    assert max(np.max(np.abs(g)) for _, g in model.params().values()) < 1e-12


def test_relation_gradient_scales_with_history_length():
    """Doubling the number of historical nodes roughly doubles the shared unit's gradient."""

    def final_layer_grad_norm(T, seed):
        rng = np.random.default_rng(seed)
        model = DPTRN(ModelConfig(T=T, M=3, C=2, relation_hidden=(8,), classifier_hidden=(), dropout=0.0), seed=0)
        model.train()
        model.zero_grad()
        x = rng.normal(loc=1.0, scale=0.3, size=(16, T, 3))
        model.forward(x)
        model.backward(np.tile([1.0, -1.0], (16, 1)) / 16)
        last = model.relation.linears[-1]
        return np.sqrt(np.sum(last.grad_weight ** 2) + np.sum(last.grad_bias ** 2))

    short = np.mean([final_layer_grad_norm(11, s) for s in range(20)])
    long = np.mean([final_layer_grad_norm(21, s) for s in range(20)])
    assert 1.8 < long / short < 2.2


# -- checkpoints -----------------------------------------------------------------------


def test_checkpoint_round_trip(tmp_path, rng):
    model = randomize(DPTRN(ModelConfig(T=4, M=3, C=3), seed=0), rng)
    model.eval()
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path, {"note": 1})
    loaded, extra = load_checkpoint(path, ModelConfig(T=4, M=3, C=3))
    assert extra == {"note": 1}
    for name, arr in model.state_arrays().items():
        assert np.array_equal(arr, loaded.state_arrays()[name])
    x = rng.normal(size=(2, 4, 3))
    assert np.array_equal(model.forward(x)[0], loaded.forward(x)[0])
    save_checkpoint(loaded, tmp_path / "again.ckpt", {"note": 1})
    assert (tmp_path / "again.ckpt").read_bytes() == path.read_bytes()


def test_checkpoint_header_mismatch(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(DPTRN(ModelConfig(T=4, M=3, C=3)), path)
    with pytest.raises(CheckpointError):
        load_checkpoint(path, ModelConfig(T=4, M=3, C=4))
    (tmp_path / "junk").write_bytes(b"not a checkpoint")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "junk")
