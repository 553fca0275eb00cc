import numpy as np
import pytest
from hypothesis import given, strategies as st

from ramer.dataset import SyntheticConfig, generate_synthetic, split_corpus
from ramer.encoder import (LN_EPS, Checkpoint, CheckpointError, DimMismatch, TrainConfig,
                           checkpoint_bytes, encoder_backward, encoder_forward, init_encoder,
                           layer_norm, load_checkpoint, predict_labels, pretrain_full_modality,
                           save_checkpoint)

from gradcheck import encoder_gradcheck


def straight_line_forward(P, x):
    """Per-coordinate loops, no shared code with the vectorized encoder."""
    def affine(v, W, b):
        return [b[j] + sum(v[i] * W[i][j] for i in range(len(v))) for j in range(len(b))]

    def ln(v, g, b):
        mu = sum(v) / len(v)
        var = sum((e - mu) ** 2 for e in v) / len(v)
        return [(e - mu) / (var + LN_EPS) ** 0.5 * g[i] + b[i] for i, e in enumerate(v)]

    p = affine(list(x), P.W_in, P.b_in)
    a = affine(affine(p, P.W_v, P.b_v), P.W_o, P.b_o)
    y1 = ln([u + w for u, w in zip(p, a)], P.ln1_g, P.ln1_b)
    r = [max(e, 0.0) for e in affine(y1, P.W_f1, P.b_f1)]
    f = affine(r, P.W_f2, P.b_f2)
    h = ln([u + w for u, w in zip(y1, f)], P.ln2_g, P.ln2_b)
    return np.array(h), np.array(affine(h, P.W_c, P.b_c))


def _params(seed=0, in_dim=5, hidden=8):
    rng = np.random.default_rng(seed)
    p = init_encoder(in_dim, rng, hidden)
    for t in p.tensors().values():
        t += 0.05 * rng.standard_normal(t.shape)
    return p, rng


def test_forward_matches_straight_line_oracle():
    p, rng = _params()
    x = rng.standard_normal(5)
    h, logits = encoder_forward(x, p)
    h0, l0 = straight_line_forward(p, x)
    np.testing.assert_allclose(h, h0, atol=1e-10, rtol=0)
    np.testing.assert_allclose(logits, l0, atol=1e-10, rtol=0)


def test_infer_deterministic_and_batch_consistent():
    p, rng = _params()
    x = rng.standard_normal((3, 5))
    h1, l1 = encoder_forward(x, p)
    h2, l2 = encoder_forward(x, p)
    assert np.array_equal(h1, h2) and np.array_equal(l1, l2)
    hs, ls = encoder_forward(x[1], p)
    np.testing.assert_allclose(hs, h1[1], atol=1e-14)
    with pytest.raises(ValueError):
        encoder_forward(np.zeros(4), p)


def test_zero_input_is_finite():
    p = init_encoder(5, np.random.default_rng(0), 8)
    h, logits = encoder_forward(np.zeros(5), p)
    assert np.all(np.isfinite(h)) and np.all(np.isfinite(logits))


@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_finite_differences(seed):
    errs = encoder_gradcheck(seed, in_dim=16, hidden=32, coords=40)
    assert len(errs) == 16
    assert max(errs.values()) < 1e-4, errs


def test_saturated_target_has_no_signal():
    p, rng = _params()
    p.W_c[:] = 0.0
    p.b_c[:] = 0.0
    p.b_c[2] = 60.0
    _, g = encoder_backward(rng.standard_normal((4, 5)), p, [2, 2, 2, 2])
    assert np.sqrt(sum(float(np.sum(v ** 2)) for v in g.values())) < 1e-6


def test_zero_path_input_gives_zero_weight_gradient():
    p, _ = _params()
    _, g = encoder_backward(np.zeros((2, 5)), p, [0, 3])
    assert np.all(g["W_in"] == 0.0)


def test_layer_norm_moments():
    x = np.random.default_rng(3).standard_normal((10, 64)) * 5 + 2
    y, _ = layer_norm(x, np.ones(64), np.zeros(64))
    assert np.all(np.abs(y.mean(axis=1)) < 1e-9)
    assert np.all(np.abs(y.var(axis=1) - 1) < 1e-6)


def test_train_mode_expectation_equals_infer():
    p, rng = _params(in_dim=5, hidden=16)
    x = rng.standard_normal(5)
    _, ref = encoder_forward(x, p)
    xs = np.repeat(x[None], 10_000, axis=0)
    _, logits = encoder_forward(xs, p, mode="train", rng=rng)
    assert np.max(np.abs(logits.mean(axis=0) - ref)) < 1e-2


@given(st.integers(0, 2**32 - 1))
def test_infer_ignores_rng(seed):
    p, _ = _params()
    x = np.ones(5)
    a = encoder_forward(x, p, rng=np.random.default_rng(seed))
    b = encoder_forward(x, p)
    assert np.array_equal(a[1], b[1])


def _toy(seed=0, **kw):
    base = dict(n_labeled=200, n_unlabeled=0, dims={"audio": 8, "video": 6, "text": 10},
                class_priors=(0.5, 0.5, 0, 0, 0, 0), cluster_separation=12.0,
                noise_sigma=0.1, seed=seed)
    base.update(kw)
    return split_corpus(generate_synthetic(SyntheticConfig(**base)), seed)


def test_pretrain_separable_reaches_full_train_accuracy():
    c = _toy()
    ck = pretrain_full_modality(c, TrainConfig(epochs=40, batch_size=32, learning_rate=0.01,
                                               hidden=32))
    tr = c.split_rows("train")
    for m in ("audio", "video", "text"):
        assert np.mean(predict_labels(ck.encoders[m], c.embeddings[m][tr]) == c.labels[tr]) == 1.0
    hist = ck.meta["history"]
    assert ck.meta["val_wa"] == max(h["val_wa"] for h in hist)
    assert hist[ck.meta["epoch"] - 1]["val_wa"] == ck.meta["val_wa"]


def test_pretrain_deterministic():
    c = _toy(n_labeled=80)
    cfg = TrainConfig(epochs=2, batch_size=16, hidden=16, seed=5)
    assert checkpoint_bytes(pretrain_full_modality(c, cfg)) == \
        checkpoint_bytes(pretrain_full_modality(c, cfg))


def test_pretrain_rejects_empty_train():
    c = _toy(n_labeled=60)
    with pytest.raises(ValueError):
        pretrain_full_modality(c.with_split(np.array(["val"] * len(c))), TrainConfig(epochs=1))


def test_default_corpus_beats_majority_baseline():
    c = split_corpus(generate_synthetic(SyntheticConfig(n_unlabeled=0, seed=1)), 1)
    ck = pretrain_full_modality(c, TrainConfig(epochs=3, seed=1))
    va = c.split_rows("val")
    baseline = 100 * np.max(np.bincount(c.labels[va])) / va.size
    for m in ("audio", "video", "text"):
        wa = 100 * np.mean(predict_labels(ck.encoders[m], c.embeddings[m][va]) == c.labels[va])
        assert wa > baseline + 5


def test_checkpoint_round_trip_and_errors(tmp_path):
    rng = np.random.default_rng(0)
    ck = Checkpoint({m: init_encoder(d, rng, 16) for m, d in
                     {"audio": 6, "video": 5, "text": 7}.items()}, {"epoch": 3})
    path = tmp_path / "ck.bin"
    save_checkpoint(path, ck)
    back = load_checkpoint(path)
    x = rng.standard_normal(6)
    assert np.array_equal(encoder_forward(x, back.encoders["audio"])[1],
                          encoder_forward(x, ck.encoders["audio"])[1])
    assert back.meta["epoch"] == 3 and checkpoint_bytes(back) == checkpoint_bytes(ck)

    raw = path.read_bytes()
    (tmp_path / "t.bin").write_bytes(raw[:len(raw) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "t.bin")
    bad = bytearray(raw)
    bad[40] ^= 1
    (tmp_path / "c.bin").write_bytes(bytes(bad))
    with pytest.raises(CheckpointError, match="CRC"):
        load_checkpoint(tmp_path / "c.bin")
    with pytest.raises(DimMismatch):
        load_checkpoint(path, {"audio": 64, "video": 64, "text": 64})
