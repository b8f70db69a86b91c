import io

import numpy as np
import pytest

from hedn.diffmath import Dense
from hedn.engine import Batch, main_loss_and_grads, struct_loss_and_grads
from hedn.nets import (
    backward_domain,
    count_parameters,
    embed,
    forward_domain,
    forward_features,
    init_model,
    read_model,
    write_model,
)

from conftest import central_diff, rel_error


def layer_sum(d_in, c):
    """Parameter count summed by hand from the layer table."""
    dense = lambda i, o: i * o + o
    f = dense(d_in, 64) + dense(64, 64)
    g = dense(64, 32) + 2 * 32 + dense(32, 64)
    h = dense(64, 32) + dense(32, 64) + dense(64, c)
    d = dense(64, 64) + dense(64, 1)
    return f + g + h + d


def test_single_dense_count():
    layer = Dense(2, 3)
    assert sum(p.size for p in layer.params()) == 9


def test_published_parameter_count():
    assert count_parameters(init_model(310, 3)) == 36932


@pytest.mark.parametrize("d_in,c,expected", [(160, 2, 27267), (62, 4, 21125)])
def test_other_shapes(d_in, c, expected):
    assert layer_sum(d_in, c) == expected
    assert count_parameters(init_model(d_in, c)) == expected


@pytest.mark.parametrize("d_in,c", [(0, 3), (10, 1)])
def test_invalid_dims(d_in, c):
    with pytest.raises(ValueError):
        init_model(d_in, c)


def test_seed_determinism():
    a, b = init_model(20, 3, seed=5), init_model(20, 3, seed=5)
    for pa, pb in zip(a.params(), b.params()):
        assert np.array_equal(pa, pb)
    c = init_model(20, 3, seed=6)
    assert not np.array_equal(a.params()[0], c.params()[0])


def test_init_scheme():
    m = init_model(50, 3, seed=1)
    w = m.f.layers[0].weight
    assert np.abs(w).max() <= np.sqrt(6 / 50)
    assert not m.f.layers[0].bias.any()
    bn = m.g.layers[2]
    assert np.all(bn.gamma == 1) and not bn.beta.any()


def test_eval_forward_idempotent(rng):
    m = init_model(8, 3, seed=2)
    x = rng.normal(size=(5, 8))
    before = m.copy_state()
    z1, z2 = embed(m, x), embed(m, x)
    assert np.array_equal(z1, z2)
    for a, b in zip(before, m.copy_state()):
        assert np.array_equal(a, b)


def test_discriminator_range(rng):
    m = init_model(8, 3, seed=2)
    p = forward_domain(m, forward_features(m, rng.normal(size=(10, 8)) * 100), False)
    assert np.all((p >= 0) & (p <= 1))


def test_grl_zero_lambda(rng):
    m = init_model(8, 3, seed=2)
    feats = forward_features(m, rng.normal(size=(4, 8)))
    forward_domain(m, feats, False)
    g = backward_domain(m, np.ones(4), 0.0)
    assert not np.any(g)


@pytest.mark.parametrize("lam", [1.0, 0.37])
def test_grl_sign_flip(rng, lam):
    m = init_model(8, 3, seed=2)
    feats = forward_features(m, rng.normal(size=(4, 8)))
    forward_domain(m, feats, False)
    plain = m.d.backward(np.ones((4, 1)))
    forward_domain(m, feats, False)
    reversed_ = backward_domain(m, np.ones(4), lam)
    np.testing.assert_allclose(reversed_, -lam * plain)


def test_checkpoint_roundtrip_bit_exact(rng):
    m = init_model(12, 4, seed=9)
    for p in m.params() + m.buffers():
        p[...] = rng.normal(size=p.shape)
    buf = io.BytesIO()
    write_model(buf, m)
    raw = buf.getvalue()
    assert raw[:4] == b"HEDN"
    m2 = read_model(io.BytesIO(raw))
    assert (m2.d_in, m2.n_classes) == (12, 4)
    for a, b in zip(m.params() + m.buffers(), m2.params() + m2.buffers()):
        assert a.tobytes() == b.tobytes()
    buf2 = io.BytesIO()
    write_model(buf2, m2)
    assert buf2.getvalue() == raw


# ---------------------------------------------------------------------------
# Gradient checks of the training objectives on a tiny fixture
# ---------------------------------------------------------------------------


def _relu(x):
    return np.maximum(x, 0)


def _mlp(layers, x):
    """Independent forward through Dense/ReLU stacks (no BN, no dropout)."""
    for layer in layers:
        if isinstance(layer, Dense):
            x = x @ layer.weight + layer.bias
        elif type(layer).__name__ == "ReLU":
            x = _relu(x)
        elif type(layer).__name__ == "Sigmoid":
            x = 1 / (1 + np.exp(-x))
    return x


def _ce(logits, y):
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return -logp[np.arange(len(y)), y].mean()


def _bce(p, t):
    return -np.mean(t * np.log(p) + (1 - t) * np.log(1 - p))


def fixture(seed):
    r = np.random.default_rng(seed)
    m = init_model(4, 3, seed=seed, dropout_p=0.0)
    for layer in m.f.layers + m.h.layers + m.d.layers:
        if isinstance(layer, Dense):
            layer.bias[...] = r.normal(scale=0.3, size=layer.bias.shape)
    hard = Batch(0, np.arange(6), r.normal(size=(6, 4)), r.integers(0, 3, 6), r.integers(0, 2, 6))
    tgt = Batch(1, np.arange(6), r.normal(size=(6, 4)), -np.ones(6, int), r.integers(0, 2, 6))
    pseudo = r.integers(0, 3, 6)
    return m, hard, tgt, pseudo


def objectives(m, hard, tgt, pseudo):
    fs, ft = _mlp(m.f.layers, hard.x), _mlp(m.f.layers, tgt.x)
    l_cls = _ce(_mlp(m.h.layers, fs), hard.y)
    l_cl = _ce(_mlp(m.h.layers, ft), pseudo)
    l_adv = _bce(_mlp(m.d.layers, fs)[:, 0], 1.0) + _bce(_mlp(m.d.layers, ft)[:, 0], 0.0)
    return l_cls, l_adv, l_cl


def _away_from_kinks(m, *xs):
    """Fixture sanity: no ReLU pre-activation within 1e-3 of zero."""
    for x in xs:
        a = x
        for layer in m.f.layers:
            if isinstance(layer, Dense):
                a = a @ layer.weight + layer.bias
                if np.min(np.abs(a)) < 1e-3:
                    return False
            else:
                a = _relu(a)
    return True


# seeds whose fixtures keep every pre-activation away from a ReLU kink
@pytest.mark.parametrize("seed", [0, 2, 4, 11])
def test_main_step_gradients(seed):
    m, hard, tgt, pseudo = fixture(seed)
    assert _away_from_kinks(m, hard.x, tgt.x)
    lam1, lam2 = 0.7, 0.3
    for p in m.f.grads() + m.h.grads() + m.d.grads():
        p.fill(0)
    main_loss_and_grads(m, hard, tgt, pseudo, lam1, lam2)

    def eff_f():
        l_cls, l_adv, l_cl = objectives(m, hard, tgt, pseudo)
        return l_cls + lam2 * l_cl - lam1 * l_adv

    def eff_h():
        l_cls, _, l_cl = objectives(m, hard, tgt, pseudo)
        return l_cls + lam2 * l_cl

    def eff_d():
        return objectives(m, hard, tgt, pseudo)[1]

    for part, fn in ((m.f, eff_f), (m.h, eff_h), (m.d, eff_d)):
        for p, g in zip(part.params(), part.grads()):
            assert rel_error(g, central_diff(fn, p), floor=1e-6) < 1e-4


def test_struct_step_gradients():
    r = np.random.default_rng(3)
    m = init_model(4, 3, seed=3)
    easy = Batch(0, np.arange(6), r.normal(size=(6, 4)), r.integers(0, 3, 6), np.array([0, 0, 1, 1, 2, -1]))
    tgt = Batch(1, np.arange(6), r.normal(size=(6, 4)), -np.ones(6, int), np.array([0, 1, 0, 1, 2, 2]))
    for g in m.g.grads():
        g.fill(0)
    struct_loss_and_grads(m, easy, tgt, 0.5)
    analytic = [g.copy() for g in m.g.grads()]

    from hedn.diffmath import supcon_loss
    from hedn.nets import forward_embedding

    def total():
        loss = 0.0
        for b in (easy, tgt):
            keep = b.clusters != -1
            z = forward_embedding(m, forward_features(m, b.x[keep]), True)
            loss += supcon_loss(z, b.clusters[keep], 0.5)[0]
        return loss

    for p, g in zip(m.g.params(), analytic):
        assert rel_error(g, central_diff(total, p), floor=1e-6) < 1e-4
