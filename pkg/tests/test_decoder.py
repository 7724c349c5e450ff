import numpy as np
import pytest

from gradcheck import check
from stackseg.decoder import (MAX_POINT_PROMPTS, DecoderStageOutput, MaskDecoderStage1, MaskDecoderStage2,
                              PromptEncoder, decode_stage1, decode_stage2, mask_centroids)
from stackseg.errors import DimensionError
from stackseg.tensor import Tensor, tsum

C = 32


@pytest.fixture(scope="module")
def parts():
    rng = np.random.default_rng(0)
    return (PromptEncoder(C, rng), MaskDecoderStage1(C, 2, 4, 64, rng), MaskDecoderStage2(C, 2, 4, 64, rng))


def disk(cy, cx, r, size=64):
    yy, xx = np.mgrid[0:size, 0:size]
    return ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).astype(float)


def sincos_oracle(y, x, dim):
    q = dim // 4
    omega = 1.0 / 10000.0 ** (np.arange(q) / q)
    return np.concatenate([np.sin(y * omega), np.cos(y * omega), np.sin(x * omega), np.cos(x * omega)])


def features(seed=1):
    return Tensor(np.random.default_rng(seed).normal(size=(C, 16, 16)))


def test_empty_mask_gives_default_token_only(parts):
    enc = parts[0]
    emb = enc(np.zeros((1, 64, 64)))
    assert emb.sparse.shape == (1, C) and emb.dense.shape == (C, 16, 16)
    assert np.array_equal(emb.sparse.data, enc.default_token.data)


def test_two_blobs_give_three_tokens(parts):
    mask = disk(16, 16, 5) + disk(44, 40, 7)
    assert parts[0](mask[None]).sparse.shape == (3, C)


def test_sparse_tokens_capped():
    mask = np.zeros((64, 64))
    mask[2::6, 2::6] = 1.0                           # 100 isolated pixels
    enc = PromptEncoder(8, np.random.default_rng(1))
    emb = enc(mask[None])
    assert emb.sparse.shape[0] == 1 + MAX_POINT_PROMPTS <= 9


def test_centroids_largest_first():
    mask = disk(16, 16, 4) + disk(44, 40, 9)
    (r0, c0), (r1, c1) = mask_centroids(mask)
    assert (round(r0), round(c0)) == (44, 40) and (round(r1), round(c1)) == (16, 16)


def test_centroid_token_encodes_position(parts):
    enc = parts[0]
    cy, cx = 20.0, 36.0
    emb = enc(disk(cy, cx, 6)[None])
    # pixel centre -> 1/4 grid under the half-pixel convention
    gy, gx = (cy + 0.5) / 4 - 0.5, (cx + 0.5) / 4 - 0.5
    pe = emb.sparse.data[1] - enc.point_embed.data[0]
    assert np.max(np.abs(pe - sincos_oracle(gy, gx, C))) < 1e-12


def test_stage1_shape_and_determinism(parts):
    enc, s1, _ = parts
    prompt = enc(disk(30, 30, 8)[None])
    a, b = decode_stage1(features(), prompt, s1), decode_stage1(features(), prompt, s1)
    assert a.logits.shape == (1, 16, 16) and a.decoder_features.shape == (C, 16, 16)
    assert np.array_equal(a.logits.data, b.logits.data)


def test_stage2_full_resolution(parts):
    enc, s1, s2 = parts
    prompt = enc(disk(30, 30, 8)[None])
    first = decode_stage1(features(), prompt, s1)
    assert decode_stage2(features(), prompt, first, s2).shape == (1, 64, 64)


def test_stage2_skip_path_is_live(parts):
    enc, s1, s2 = parts
    prompt = enc(disk(30, 30, 8)[None])
    first = decode_stage1(features(), prompt, s1)
    ref = decode_stage2(features(), prompt, first, s2).data
    cut = DecoderStageOutput(first.logits, Tensor(np.zeros(first.decoder_features.shape)))
    assert np.max(np.abs(decode_stage2(features(), prompt, cut, s2).data - ref)) > 0


def test_stage2_loss_reaches_stage1_through_skip(parts):
    enc, s1, s2 = parts
    prompt = enc(disk(30, 30, 8)[None])
    for p in s1.parameters():
        p.grad = None
    first = decode_stage1(features(), prompt, s1)
    tsum(decode_stage2(features(), prompt, first, s2) ** 2).backward()
    grads = [p.grad for p in s1.trainable_parameters()]
    assert sum(g is not None and np.abs(g).sum() > 0 for g in grads) > len(grads) // 2


def test_dense_feature_mismatch(parts):
    enc, s1, _ = parts
    with pytest.raises(DimensionError):
        s1(Tensor(np.zeros((C, 8, 8))), enc(np.zeros((1, 64, 64))))


def small_stack(seed=2):
    rng = np.random.default_rng(seed)
    c = 8
    return (c, PromptEncoder(c, rng), MaskDecoderStage1(c, 1, 2, 16, rng), MaskDecoderStage2(c, 1, 2, 16, rng))


def test_stage1_grads_finite_difference():
    c, enc, s1, _ = small_stack()
    feat = Tensor(np.random.default_rng(3).normal(size=(c, 4, 4)), requires_grad=True)
    mask = disk(6, 9, 3, size=16)[None]
    fn = lambda: tsum(decode_stage1(feat, enc(mask), s1).logits ** 2)
    params = [feat] + enc.trainable_parameters() + s1.trainable_parameters()
    assert check(fn, params, max_entries=5) < 1e-4


def test_stage2_grads_finite_difference():
    c, enc, s1, s2 = small_stack(4)
    feat = Tensor(np.random.default_rng(5).normal(size=(c, 4, 4)), requires_grad=True)
    mask = disk(6, 9, 3, size=16)[None]
    w = Tensor(np.random.default_rng(6).normal(size=(1, 16, 16)))

    def fn():
        prompt = enc(mask)
        return tsum(decode_stage2(feat, prompt, decode_stage1(feat, prompt, s1), s2) * w)
    # stage 1's final token attention and hyper head only shape stage-1 logits, which the skip does not carry
    query_only = ("transformer.final_attn.", "transformer.norm_final.", "hyper.")
    on_path = [p for n, p in s1.named_parameters() if p.requires_grad and not n.startswith(query_only)]
    params = [feat] + on_path + s2.trainable_parameters()
    assert check(fn, params, max_entries=5) < 1e-4
