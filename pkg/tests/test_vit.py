import numpy as np
import pytest

from marlprune import numerics as nx
from marlprune.pruning import Policy
from marlprune.vit import (ConfigError, TokenBatch, ViTConfig, ViTModel, block_forward, classify,
                           compact_forward, compact_inference, forward_with_masks, patch_embed, vit_forward)

import oracles


def model64(seed=0, **kw):
    return ViTModel(ViTConfig(**kw), np.random.default_rng(seed), np.float64)


def bp_arrays(model, i):
    return {k: v.data for k, v in model.block(i).items()}


def random_tokens(rng, B, n, D, keep_frac=1.0):
    x = rng.normal(size=(B, n, D))
    keep = rng.random((B, n)) < keep_frac
    keep[:, 0] = True
    return x, keep


# -- config / patch embedding --------------------------------------------------

@pytest.mark.parametrize("size,patch,tokens", [(16, 4, 17), (32, 8, 17), (224, 16, 197)])
def test_token_count(size, patch, tokens):
    assert ViTConfig(image_size=size, patch_size=patch).num_tokens == tokens


def test_patch_embed_shapes():
    m = model64()
    tb = patch_embed(np.zeros((3, 1, 16, 16)), m)
    assert tb.features.shape == (3, 17, 32)
    assert tb.keep_mask.all()


def test_zero_image_zero_projection_gives_positional_embedding():
    m = model64()
    m.params["patch.weight"].data[:] = 0
    tb = patch_embed(np.zeros((2, 1, 16, 16)), m)
    np.testing.assert_array_equal(tb.features.data[:, 1:], np.broadcast_to(m.params["pos_embed"].data[1:], (2, 16, 32)))


def test_patch_embed_size_mismatch():
    with pytest.raises(ConfigError):
        patch_embed(np.zeros((1, 1, 12, 12)), model64())


@pytest.mark.parametrize("kw", [dict(image_size=15), dict(embed_dim=30), dict(prune_after=(5,))])
def test_config_validation(kw):
    with pytest.raises(ConfigError):
        ViTConfig(**kw)


def test_token_batch_rejects_pruned_class_token():
    with pytest.raises(AssertionError):
        TokenBatch(nx.Tensor(np.zeros((1, 3, 2))), np.array([[False, True, True]]))


# -- block ------------------------------------------------------------------

def test_block_matches_direct_oracle_all_kept():
    m = model64(1)
    rng = np.random.default_rng(2)
    x, keep = random_tokens(rng, 2, 17, 32)
    out = block_forward(TokenBatch(nx.Tensor(x), keep), m.block(1), 4).features.data
    for b in range(2):
        np.testing.assert_allclose(out[b], oracles.block(x[b], bp_arrays(m, 1), 4), atol=1e-10)


def test_block_masked_matches_oracle_on_kept_rows():
    m = model64(3)
    rng = np.random.default_rng(4)
    x, keep = random_tokens(rng, 2, 17, 32, 0.5)
    out = block_forward(TokenBatch(nx.Tensor(x), keep), m.block(2), 4).features.data
    for b in range(2):
        ref = oracles.block(x[b], bp_arrays(m, 2), 4, keep=keep[b])
        np.testing.assert_allclose(out[b][keep[b]], ref[keep[b]], atol=1e-10)


def test_masked_token_perturbation_does_not_leak():
    m = model64(5)
    rng = np.random.default_rng(6)
    for _ in range(10):
        x, keep = random_tokens(rng, 1, 17, 32, 0.6)
        pruned = np.nonzero(~keep[0])[0]
        if not len(pruned):
            continue
        y = x.copy()
        y[0, rng.choice(pruned)] += rng.normal(scale=10.0, size=32)
        a = block_forward(TokenBatch(nx.Tensor(x), keep), m.block(1), 4).features.data
        b = block_forward(TokenBatch(nx.Tensor(y), keep), m.block(1), 4).features.data
        assert np.abs(a[keep] - b[keep]).max() < 1e-9


def test_only_class_token_kept_attends_to_itself():
    m = model64(7)
    rng = np.random.default_rng(8)
    x = rng.normal(size=(1, 17, 32))
    keep = np.zeros((1, 17), bool)
    keep[0, 0] = True
    out = block_forward(TokenBatch(nx.Tensor(x), keep), m.block(1), 4).features.data[0, 0]
    # with a single unmasked column the attention output is the class token's own value vector
    p = bp_arrays(m, 1)
    h = oracles.layer_norm(x[0, 0], p["norm1.gain"], p["norm1.bias"], 1e-6)
    v = (h @ p["attn.qkv.weight"] + p["attn.qkv.bias"])[64:]
    r = x[0, 0] + v @ p["attn.proj.weight"] + p["attn.proj.bias"]
    h2 = oracles.layer_norm(r, p["norm2.gain"], p["norm2.bias"], 1e-6)
    ref = r + oracles.gelu(h2 @ p["mlp.fc1.weight"] + p["mlp.fc1.bias"]) @ p["mlp.fc2.weight"] + p["mlp.fc2.bias"]
    np.testing.assert_allclose(out, ref, atol=1e-10)


# -- classifier ---------------------------------------------------------------

def test_zero_head_gives_bias():
    m = model64()
    m.params["head.weight"].data[:] = 0
    m.params["head.bias"].data[:] = [0.1, -0.2, 0.3, 0.4]
    tb = TokenBatch(nx.Tensor(np.random.default_rng(0).normal(size=(2, 17, 32))), np.ones((2, 17), bool))
    np.testing.assert_allclose(classify(tb, m).data, [[0.1, -0.2, 0.3, 0.4]] * 2)


def test_two_class_head_hand_computation():
    m = model64(num_classes=2)
    W = np.zeros((32, 2))
    W[0, 0] = W[1, 1] = 1.0
    m.params["head.weight"].data = W
    m.params["head.bias"].data = np.array([0.5, -0.5])
    cls = np.zeros(32)
    cls[0], cls[1] = 2.0, -2.0
    tb = TokenBatch(nx.Tensor(np.tile(cls, (1, 17, 1))), np.ones((1, 17), bool))
    # layer norm of cls: mean 0, var 8/32 -> entries +-2/sqrt(0.25+eps)
    s = 2.0 / np.sqrt(8.0 / 32.0 + 1e-6)
    np.testing.assert_allclose(classify(tb, m).data[0], [s + 0.5, -s - 0.5], atol=1e-12)


# -- full forward -----------------------------------------------------------

def test_no_pruning_layers_gives_empty_trajectories():
    m = model64(prune_after=())
    pol = Policy.create(32, "mappo", np.random.default_rng(0), np.float64)
    logits, trajs = vit_forward(np.zeros((2, 1, 16, 16)), m, pol)
    assert logits.shape == (2, 4)
    assert all(len(t.layers) == 0 for t in trajs)


def test_two_pruning_layers_give_two_steps():
    m = model64()
    pol = Policy.create(32, "mappo", np.random.default_rng(0), np.float64)
    _, trajs = vit_forward(np.random.default_rng(1).random((3, 1, 16, 16)), m, pol, rng=np.random.default_rng(2))
    assert [len(t.layers) for t in trajs] == [2, 2, 2]
    assert [r.layer for r in trajs[0].layers] == [2, 3]


def test_preserve_all_policy_equals_plain_forward():
    m = model64(9)
    imgs = np.random.default_rng(10).random((4, 1, 16, 16))
    plain, _ = vit_forward(imgs, m, None)
    kept, trajs = vit_forward(imgs, m, Policy(None, None, "random:1"), rng=np.random.default_rng(0))
    np.testing.assert_allclose(kept.data, plain.data, atol=1e-10)
    assert all(t.n_kept == [16, 16] for t in trajs)


def test_masks_monotone_and_class_token_immune():
    m = model64(11, depth=4, prune_after=(1, 2, 3))
    imgs = np.random.default_rng(12).random((8, 1, 16, 16))
    _, trajs = vit_forward(imgs, m, Policy(None, None, "random:0.7"), rng=np.random.default_rng(1))
    for tr in trajs:
        prev = set(range(1, 17))
        for rec in tr.layers:
            active = set(rec.tokens.tolist())
            assert 0 not in active
            assert active <= prev
            prev = set(rec.tokens[rec.actions == 1].tolist())
            assert rec.n_kept == len(prev)


# -- compaction ---------------------------------------------------------------

def test_compact_identity_when_nothing_pruned():
    tb = TokenBatch(nx.Tensor(np.ones((1, 5, 2))), np.ones((1, 5), bool))
    assert compact_inference(tb) is tb


def test_compact_keeps_order():
    x = np.arange(17, dtype=float)[None, :, None] * np.ones((1, 17, 3))
    keep = np.ones((1, 17), bool)
    keep[0, [1, 3, 4, 7, 9, 12, 13, 16]] = False
    out = compact_inference(TokenBatch(nx.Tensor(x), keep))
    assert out.length == 9
    np.testing.assert_array_equal(out.features.data[0, :, 0], [0, 2, 5, 6, 8, 10, 11, 14, 15])
    np.testing.assert_array_equal(out.token_ids[0], [0, 2, 5, 6, 8, 10, 11, 14, 15])


def test_compacted_logits_match_masked_float32():
    m = ViTModel(ViTConfig(), np.random.default_rng(13), np.float32)
    rng = np.random.default_rng(14)
    imgs = rng.random((20, 1, 16, 16)).astype(np.float32)
    masks = []
    keep = np.ones((20, 17), bool)
    for _ in m.config.prune_after:
        keep = keep & (rng.random((20, 17)) < 0.6)
        keep[:, 0] = True
        masks.append(keep.copy())
    with nx.no_grad():
        masked, _ = forward_with_masks(imgs, m, masks, compact=False)
    compact = compact_forward(imgs, m, masks)
    np.testing.assert_allclose(compact, masked.data, atol=1e-5)
