import numpy as np
import pytest

from spikeiaa import numerics as nx
from spikeiaa.config import ModelConfig
from spikeiaa.encoder import (aswa, encode, iaa_block, ila, ila_layer, init_encoder, layer_keys,
                              pool_and_norm, sliding_window_attention, window_keys, window_mask)


def brute_ila(H, Wq, Wk, Wv):
    Q, K, V = H @ Wq, H @ Wk, H @ Wv
    return (Q @ K.T) @ V


def brute_window_attention(Ht, WQ, WK, WV, w, n_heads=1, scale=True):
    """Explicit loops: row s attends to keys [s-w+1, s]."""
    S, d = Ht.shape
    dh = WQ.shape[1] // n_heads
    Q, K, V = Ht @ WQ, Ht @ WK, Ht @ WV
    out = np.zeros((S, n_heads * dh))
    for h in range(n_heads):
        sl = slice(h * dh, (h + 1) * dh)
        for s in range(S):
            keys = [j for j in range(S) if s - w + 1 <= j <= s]
            sc = np.array([Q[s, sl] @ K[j, sl] for j in keys])
            if scale:
                sc = sc / np.sqrt(dh)
            e = np.exp(sc - sc.max())
            out[s, sl] = (e / e.sum()) @ V[keys, sl]
    return out


def small_cfg(**kw):
    base = dict(T_norm=8, A=2, C_norm=3, t=4, d=8, n_heads=2, window=3, d_ff=16, n_layers=2)
    base.update(kw)
    return ModelConfig(**base)


def params_for(cfg, seed=0):
    with nx.precision("float64"):
        return {k: np.asarray(v, np.float64) for k, v in init_encoder(cfg, np.random.default_rng(seed)).items()}


# ---------------------------------------------------------------------------
# ILA


def test_ila_zero(f64):
    W = np.eye(4)
    assert not ila(np.zeros((3, 4)), W, W, W).data.any()


def test_ila_hand(f64):
    I2 = np.eye(2)
    assert ila(np.array([[1.0, 2.0]]), I2, I2, I2).data.tolist() == [[5.0, 10.0]]


def test_ila_associativity(f64, rng):
    for _ in range(20):
        t, d = rng.integers(1, 33, 2)
        H = rng.standard_normal((t, d))
        W = [rng.standard_normal((d, d)) for _ in range(3)]
        assert np.max(np.abs(ila(H, *W).data - brute_ila(H, *W))) < 1e-10


def test_ila_multihead_is_concat_of_heads(f64, rng):
    H = rng.standard_normal((5, 8))
    W = [rng.standard_normal((8, 8)) for _ in range(3)]
    out = ila(H, *W, n_heads=2).data
    for h in range(2):
        sl = slice(4 * h, 4 * h + 4)
        np.testing.assert_allclose(out[:, sl], brute_ila(H, W[0][:, sl], W[1][:, sl], W[2][:, sl]),
                                   atol=1e-10)


def test_ila_layer_single_slice_reduces(f64, rng):
    cfg = small_cfg(T_norm=4, A=1)
    p = params_for(cfg)
    H = rng.standard_normal((1, 1, 4, 8))
    pre = "enc.0."
    ref = ila(H[0, 0], p[pre + "ila.W_q"], p[pre + "ila.W_k"], p[pre + "ila.W_v"], 2).data @ p[pre + "ila.W_o"]
    np.testing.assert_allclose(ila_layer(H, p, pre, cfg).data[0, 0], ref, atol=1e-12)


def test_ila_layer_interval_permutation(f64, rng):
    cfg = small_cfg(T_norm=12)
    p = params_for(cfg)
    H = rng.standard_normal((3, 2, 4, 8))
    perm = [2, 0, 1]
    a = ila_layer(H, p, "enc.0.", cfg).data
    b = ila_layer(H[perm], p, "enc.0.", cfg).data
    np.testing.assert_array_equal(a[perm], b)


def test_ila_layer_locality(f64, rng):
    cfg = small_cfg(T_norm=12)
    p = params_for(cfg)
    H = rng.standard_normal((3, 2, 4, 8))
    H2 = H.copy()
    H2[1] += rng.standard_normal((2, 4, 8))
    a = ila_layer(H, p, "enc.0.", cfg).data
    b = ila_layer(H2, p, "enc.0.", cfg).data
    np.testing.assert_array_equal(a[[0, 2]], b[[0, 2]])
    assert not np.allclose(a[1], b[1])


def test_ila_layer_zero_input(f64):
    cfg = small_cfg()
    assert not ila_layer(np.zeros((2, 2, 4, 8)), params_for(cfg), "enc.0.", cfg).data.any()


# ---------------------------------------------------------------------------
# pooling


def test_pool_constant_over_t(f64, rng):
    v = rng.standard_normal((2, 3, 1, 8))
    x = np.repeat(v, 4, axis=2)
    g, b = np.ones(8), np.zeros(8)
    np.testing.assert_allclose(pool_and_norm(x, g, b).data,
                               nx.layernorm(v[:, :, 0], g, b).data.reshape(6, 8), atol=1e-12)


def test_pool_flatten_order(f64):
    N, A, d = 2, 8, 4
    x = np.zeros((N, A, 1, d))
    x[1, 0, 0] = [1.0, -1.0, 1.0, -1.0]
    out = pool_and_norm(x, np.ones(d), np.zeros(d)).data
    nz = np.flatnonzero(np.abs(out).sum(1))
    assert nz.tolist() == [8]


# ---------------------------------------------------------------------------
# ASWA


def test_window_rule():
    assert window_keys(5, 10) == list(range(0, 6))
    assert window_keys(20, 10) == list(range(11, 21))
    m = window_mask(80, 10)
    assert m[5].sum() == 4 and m[20].sum() == 0


def test_aswa_window_one(f64, rng):
    Ht = rng.standard_normal((7, 8))
    W = [rng.standard_normal((8, 8)) for _ in range(3)]
    out = sliding_window_attention(Ht, *W, w=1, n_heads=2).data
    np.testing.assert_allclose(out, Ht @ W[2], atol=1e-12)


@pytest.mark.parametrize("S,w,heads", [(16, 3, 1), (20, 5, 2), (9, 9, 2), (6, 40, 1)])
def test_aswa_matches_brute_force(f64, rng, S, w, heads):
    Ht = rng.standard_normal((S, 8))
    W = [rng.standard_normal((8, 8)) for _ in range(3)]
    out = sliding_window_attention(Ht, *W, w=w, n_heads=heads).data
    assert np.max(np.abs(out - brute_window_attention(Ht, *W, w, heads))) < 1e-10


def test_aswa_receptive_field(f64, rng):
    S, w = 24, 5
    Ht = rng.standard_normal((S, 8))
    W = [rng.standard_normal((8, 8)) for _ in range(3)]
    base = sliding_window_attention(Ht, *W, w=w, n_heads=2).data
    for j in (0, 7, 23):
        H2 = Ht.copy()
        H2[j] += 1.0
        changed = np.flatnonzero(np.abs(sliding_window_attention(H2, *W, w=w, n_heads=2).data - base).sum(1) > 0)
        assert changed.tolist() == list(range(j, min(S, j + w)))


@pytest.mark.parametrize("w,reaches", [(8, False), (9, True), (10, True)])
def test_previous_interval_same_area(f64, rng, w, reaches):
    A, N = 8, 3
    Ht = rng.standard_normal((N * A, 8))
    W = [rng.standard_normal((8, 8)) for _ in range(3)]
    base = sliding_window_attention(Ht, *W, w=w).data
    i, a = 2, 3
    H2 = Ht.copy()
    H2[(i - 1) * A + a] += 1.0
    out = sliding_window_attention(H2, *W, w=w).data
    assert (np.abs(out[i * A + a] - base[i * A + a]).sum() > 0) == reaches


# ---------------------------------------------------------------------------
# block / stack


def test_zero_weight_block_is_identity(f64, rng):
    cfg = small_cfg()
    p = {k: np.zeros_like(v) for k, v in params_for(cfg).items()}
    H = rng.standard_normal((2, 2, 4, 8))
    np.testing.assert_array_equal(iaa_block(H, p, 0, cfg).data, H)


def test_block_shape(rng):
    cfg = small_cfg()
    p = params_for(cfg)
    H = rng.standard_normal((3, 2, 2, 4, 8))
    assert iaa_block(H, p, 1, cfg).shape == H.shape


def test_encode_zero_layers_identity(f64, rng):
    cfg = small_cfg(n_layers=0)
    H = rng.standard_normal((2, 2, 4, 8))
    np.testing.assert_array_equal(encode(H, {}, cfg).data, H)


def test_encode_eval_deterministic(rng):
    cfg = small_cfg()
    p = params_for(cfg)
    H = rng.standard_normal((2, 2, 4, 8))
    assert encode(H, p, cfg).data.tobytes() == encode(H, p, cfg).data.tobytes()


def test_encode_training_dropout_changes_output(rng):
    cfg = small_cfg()
    p = params_for(cfg)
    H = rng.standard_normal((2, 2, 4, 8))
    a = encode(H, p, cfg, True, np.random.default_rng(0)).data
    b = encode(H, p, cfg, True, np.random.default_rng(1)).data
    assert not np.array_equal(a, b)


def test_default_config_shape(rng):
    cfg = ModelConfig()
    p = init_encoder(cfg, np.random.default_rng(0))
    out = encode(rng.standard_normal((10, 8, 10, 64)), p, cfg)
    assert out.shape == (10, 8, 10, 64)
    assert np.isfinite(out.data).all()


def test_layer_keys_cover_params():
    cfg = small_cfg()
    p = init_encoder(cfg, np.random.default_rng(0))
    assert sorted(p) == sorted(layer_keys(0) + layer_keys(1))


def test_block_gradcheck(rng):
    cfg = small_cfg(T_norm=8, A=2, t=4, d=8, n_heads=2)
    p = params_for(cfg)
    H = rng.standard_normal((2, 2, 4, 8))
    w = rng.standard_normal((2, 2, 4, 8))
    p1 = {k: v for k, v in p.items() if k.startswith("enc.0.")}
    rep = nx.gradcheck(lambda q: nx.sum(nx.mul(iaa_block(H, q, 0, cfg), w)), p1, tol=1e-5)
    assert rep.passed and rep.n_checked >= 200
    assert rep.max_rel_error < 1e-5


def test_aswa_layer_output_projection(f64, rng):
    cfg = small_cfg()
    p = params_for(cfg)
    Ht = rng.standard_normal((4, 8))
    pre = "enc.0."
    core = sliding_window_attention(Ht, p[pre + "aswa.W_Q"], p[pre + "aswa.W_K"], p[pre + "aswa.W_V"],
                                    cfg.window, cfg.n_heads).data
    np.testing.assert_allclose(aswa(Ht, p, pre, cfg).data, core @ p[pre + "aswa.W_O"], atol=1e-12)
