"""Finite-difference checks shared by the unit and acceptance suites.

Every tensor is checked on a seeded coordinate sample (plus the coordinate
with the largest analytic gradient), which keeps hidden=256 configs fast.
The step is 1e-6 so a central difference rarely straddles a ReLU kink.
"""
import numpy as np

from ramer.dataset import SyntheticConfig, generate_synthetic, split_corpus
from ramer.encoder import (Checkpoint, dropout_mask, encoder_backward, encoder_forward,
                           init_encoder)
from ramer.numerics import batch_cross_entropy, finite_diff_grad, relative_error, softmax
from ramer.pipeline import (CompletionConfig, RetrievalContext, init_stage3, parse_condition,
                            stage3_loss, stage3_loss_and_grads)
from ramer.vecstore import build_store


def _check(loss_fn, tensor, analytic, rng, coords):
    flat = analytic.ravel()
    idx = rng.choice(flat.size, size=min(coords, flat.size), replace=False)
    idx = np.unique(np.append(idx, np.argmax(np.abs(flat))))
    numeric = finite_diff_grad(loss_fn, tensor, h=1e-6, indices=idx).ravel()
    return relative_error(flat[idx], numeric[idx])


def encoder_gradcheck(seed, in_dim=16, hidden=256, n=4, coords=25):
    rng = np.random.default_rng(seed)
    params = init_encoder(in_dim, rng, hidden)
    for name in ("b_in", "b_v", "b_o", "b_f1", "b_f2", "b_c", "ln1_b", "ln2_b"):
        getattr(params, name)[:] = 0.1 * rng.standard_normal(getattr(params, name).shape)
    params.ln1_g[:] += 0.1 * rng.standard_normal(hidden)
    params.ln2_g[:] += 0.1 * rng.standard_normal(hidden)
    x = rng.standard_normal((n, in_dim))
    t = rng.integers(0, 6, n)
    mask = dropout_mask(rng, (n, hidden), 0.5)
    _, grads = encoder_backward(x, params, t, mode="train", mask=mask)

    def loss(_):
        _, logits = encoder_forward(x, params, mode="train", mask=mask)
        return batch_cross_entropy(softmax(logits), t)

    return {name: _check(loss, getattr(params, name), grads[name], rng, coords)
            for name in params.names()}


def stage3_gradcheck(seed, in_dim=16, condition="a", k=3, n=6, coords=25):
    rng = np.random.default_rng(seed)
    dims = {"audio": in_dim, "video": in_dim, "text": in_dim}
    corpus = split_corpus(generate_synthetic(SyntheticConfig(
        n_labeled=60, n_unlabeled=20, dims=dims, class_priors=(1 / 6,) * 6,
        seed=seed)), seed)
    ckpt = Checkpoint({m: init_encoder(in_dim, rng) for m in dims})
    store = build_store(corpus, ckpt, "turbo", seed)
    ctx = RetrievalContext.for_split(corpus, store)
    model = init_stage3(parse_condition(condition), ckpt, CompletionConfig(k=k), rng)
    rows = corpus.split_rows("train")[:n]
    t = corpus.labels[rows]
    mask = dropout_mask(rng, (n, 768), 0.5)
    _, gj, genc = stage3_loss_and_grads(model, ctx, rows, t, mask)

    def loss(_):
        return stage3_loss(model, ctx, rows, t, mask)

    out = {f"joint.{nm}": _check(loss, getattr(model.joint, nm), g, rng, coords)
           for nm, g in gj.items()}
    for m, grads in genc.items():
        for nm, g in grads.items():
            out[f"{m}.{nm}"] = _check(loss, getattr(model.encoders[m], nm), g, rng, coords)
    return out
