import math

import numpy as np
import pytest

from gradcheck import check
from stackseg.errors import DimensionError
from stackseg.memory import MemoryBank, MemoryEncoder, reference_self_attention
from stackseg.tensor import Tensor, count_ops, no_grad, tsum


def encoder(c=8, d=4, seed=0):
    return MemoryEncoder(c, d, np.random.default_rng(seed), np.float64)


def identity_qkv(enc):
    for proj in (enc.q, enc.k, enc.v):
        proj.weight.data[...] = np.eye(enc.dim)
        proj.bias.data[...] = 0.0


# ---- bank ----------------------------------------------------------------------
def test_first_ema_step_from_zero():
    x = np.random.default_rng(0).normal(size=(4, 3, 3))
    bank = MemoryBank(8, 0.3, ema_state=np.zeros_like(x))
    bank.update(x)
    assert np.allclose(bank.ema_state, 0.3 * x, rtol=0, atol=1e-15)


def test_empty_bank_stores_first_state():
    x = np.random.default_rng(1).normal(size=(4, 3, 3))
    bank = MemoryBank()
    bank.update(x)
    assert np.array_equal(bank.ema_state, x) and len(bank) == 1


@pytest.mark.parametrize("alpha", [0.3, 0.05, 0.5])
def test_ema_geometric_recursion(alpha):
    rng = np.random.default_rng(2)
    m0, f = rng.normal(size=(4, 5, 5)), rng.normal(size=(4, 5, 5))
    bank = MemoryBank(8, alpha, ema_state=m0.copy())
    for t in range(1, 11):
        bank.update(f)
        expected = (1 - alpha) ** t * np.linalg.norm(m0 - f)
        assert abs(np.linalg.norm(bank.ema_state - f) - expected) / expected < 1e-10


def test_ring_keeps_newest_eight():
    bank = MemoryBank(8, 0.3)
    states = []
    for t in range(9):
        bank.update(np.full((2, 2, 2), float(t)))
        states.append(bank.ema_state.copy())
        assert len(bank) <= 8
    assert len(bank) == 8
    assert np.array_equal(bank.slots[0], states[1])      # update 2 is the oldest survivor
    assert np.array_equal(bank.slots[-1], states[-1])


def test_bank_shape_mismatch_and_reset():
    bank = MemoryBank()
    bank.update(np.zeros((2, 3, 3)))
    with pytest.raises(DimensionError):
        bank.update(np.zeros((2, 4, 4)))
    bank.reset()
    assert len(bank) == 0 and bank.ema_state is None and bank.updates == 0


def test_bank_state_round_trip():
    bank = MemoryBank(4, 0.3)
    for t in range(6):
        bank.update(np.random.default_rng(t).normal(size=(2, 3, 3)))
    other = MemoryBank(4, 0.3)
    other.load_state_arrays(bank.state_arrays())
    assert np.array_equal(other.ema_state, bank.ema_state)
    assert all(np.array_equal(a, b) for a, b in zip(other.slots, bank.slots))


# ---- projection / mask encoding -----------------------------------------------------
def test_full_profile_projection_shape():
    enc = MemoryEncoder(256, 128, np.random.default_rng(0), np.float32)
    out = enc.project_features(Tensor(np.zeros((256, 128, 128), np.float32)))
    assert out.shape == (128, 128, 128)


def test_projection_identity_selects_first_channels():
    enc = encoder(8, 4)
    enc.proj.weight.data[...] = np.eye(4, 8)
    enc.proj.bias.data[...] = 0.0
    x = np.random.default_rng(3).normal(size=(8, 5, 5))
    assert np.array_equal(enc.project_features(Tensor(x)).data, x[:4])


def test_projection_grads():
    enc = encoder(6, 3)
    x = Tensor(np.random.default_rng(4).normal(size=(6, 4, 4)), requires_grad=True)
    w = Tensor(np.random.default_rng(5).normal(size=(3, 4, 4)))
    fn = lambda: tsum(enc.project_features(x) * w)
    assert check(fn, [x, enc.proj.weight, enc.proj.bias]) < 1e-4


def test_zero_mask_zero_bias_gives_zero_embedding():
    enc = encoder(16, 16)
    enc.mask_conv1.bias.data[...] = 0.0
    enc.mask_conv2.bias.data[...] = 0.0
    out = enc.encode_mask(np.zeros((1, 64, 64)), 16, 16)
    assert out.shape == (16, 16, 16) and not out.data.any()


def centre_of_mass(a):
    a = np.abs(a).sum(axis=0)
    yy, xx = np.mgrid[0:a.shape[0], 0:a.shape[1]]
    return (yy * a).sum() / a.sum(), (xx * a).sum() / a.sum()


def test_mask_embedding_follows_translation():
    enc = encoder(16, 16, seed=1)
    enc.mask_conv1.bias.data[...] = 0.0
    enc.mask_conv2.bias.data[...] = 0.0
    yy, xx = np.mgrid[0:64, 0:64]
    blob = lambda cy, cx: ((yy - cy) ** 2 + (xx - cx) ** 2 < 64).astype(float)[None]
    y0, x0 = centre_of_mass(enc.encode_mask(blob(24, 24), 16, 16).data)
    y1, x1 = centre_of_mass(enc.encode_mask(blob(24, 32), 16, 16).data)
    y2, x2 = centre_of_mass(enc.encode_mask(blob(32, 24), 16, 16).data)
    assert x1 > x0 + 1 and abs(y1 - y0) < 0.5
    assert y2 > y0 + 1 and abs(x2 - x0) < 0.5


# ---- attention read ---------------------------------------------------------------
def filled_bank(m, shape, seed=6):
    rng = np.random.default_rng(seed)
    bank = MemoryBank(max_slots=m, alpha=0.3)
    for _ in range(m):
        bank.slots.append(rng.normal(size=shape))
    bank.ema_state = bank.slots[-1].copy()
    return bank


def test_empty_bank_attend_is_identity():
    enc = encoder()
    x = Tensor(np.random.default_rng(7).normal(size=(4, 5, 5)))
    assert enc.attend(x, MemoryBank()) is x


def test_single_slot_weight_is_one():
    enc = encoder()
    identity_qkv(enc)
    bank = filled_bank(1, (4, 5, 5))
    x = Tensor(np.random.default_rng(8).normal(size=(4, 5, 5)))
    readout, weights = enc.read(x, bank)
    assert np.array_equal(weights.data, np.ones((1, 5, 5)))
    assert np.allclose(readout.data, bank.slots[0], rtol=0, atol=1e-15)


def brute_force(enc, x, slots):
    d, h, w = x.shape
    out = np.zeros_like(x)
    wq, bq = enc.q.weight.data, enc.q.bias.data
    wk, bk = enc.k.weight.data, enc.k.bias.data
    wv, bv = enc.v.weight.data, enc.v.bias.data
    for i in range(h):
        for j in range(w):
            q = wq @ x[:, i, j] + bq
            scores = np.array([(wk @ s[:, i, j] + bk) @ q / math.sqrt(d) for s in slots])
            p = np.exp(scores - scores.max())
            p /= p.sum()
            out[:, i, j] = sum(pk * (wv @ s[:, i, j] + bv) for pk, s in zip(p, slots))
    return out


def test_attention_matches_brute_force():
    enc = encoder(8, 4, seed=9)
    bank = filled_bank(3, (4, 6, 5))
    x = np.random.default_rng(10).normal(size=(4, 6, 5))
    readout, weights = enc.read(Tensor(x), bank)
    assert np.max(np.abs(readout.data - brute_force(enc, x, list(bank.slots)))) < 1e-10
    assert np.max(np.abs(weights.data.sum(axis=0) - 1)) < 1e-12 and np.all(weights.data > 0)


def test_convex_combination_bound():
    enc = encoder(8, 4, seed=11)
    bank = filled_bank(5, (4, 4, 4))
    readout, _ = enc.read(Tensor(np.random.default_rng(12).normal(size=(4, 4, 4))), bank)
    v = np.stack([np.einsum("dc,chw->dhw", enc.v.weight.data, s) + enc.v.bias.data[:, None, None]
                  for s in bank.slots])
    assert np.all(readout.data <= v.max(axis=0) + 1e-12) and np.all(readout.data >= v.min(axis=0) - 1e-12)


def test_attend_and_forward_grads():
    enc = encoder(6, 3, seed=13)
    bank = filled_bank(3, (3, 4, 4))
    rng = np.random.default_rng(14)
    feats = Tensor(rng.normal(size=(6, 4, 4)), requires_grad=True)
    prev = np.zeros((1, 16, 16))
    prev[0, 4:10, 5:12] = 1.0
    w = Tensor(rng.normal(size=(6, 4, 4)))
    fn = lambda: tsum(enc(feats, prev, bank)[0] * w)
    params = [feats] + [p for _, p in enc.named_parameters()]
    assert check(fn, params, max_entries=8) < 1e-4


def test_slot_geometry_mismatch():
    enc = encoder()
    with pytest.raises(DimensionError):
        enc.read(Tensor(np.zeros((4, 5, 5))), filled_bank(2, (4, 6, 6)))


def test_bank_isolation_after_reset():
    enc = encoder(8, 4, seed=15)
    rng = np.random.default_rng(16)
    feats_a = [Tensor(rng.normal(size=(8, 4, 4))) for _ in range(3)]
    feats_b = [Tensor(rng.normal(size=(8, 4, 4))) for _ in range(3)]
    prev = np.zeros((1, 16, 16))

    def run(bank, seq):
        outs = []
        for f in seq:
            with no_grad():
                out, combined = enc(f, prev, bank)
                bank.update(combined)
            outs.append(out.data)
        return outs

    fresh = run(MemoryBank(), feats_b)
    shared = MemoryBank()
    run(shared, feats_a)
    shared.reset()
    assert all(np.array_equal(a, b) for a, b in zip(run(shared, feats_b), fresh))


def attention_mults(m, side, d=4):
    enc = encoder(8, d, seed=17)
    bank = filled_bank(m, (d, side, side))
    with count_ops() as c:
        enc.read(Tensor(np.zeros((d, side, side))), bank)
    return c.mults


def reference_mults(side, d=4):
    enc = encoder(8, d, seed=17)
    with count_ops() as c:
        reference_self_attention(Tensor(np.zeros((d, side, side))), enc.q, enc.k, enc.v)
    return c.mults


def test_cost_linear_in_slots_and_positions():
    by_m = [attention_mults(m, 8) for m in (1, 2, 4, 8)]
    steps = np.diff(by_m)
    assert np.allclose(steps / np.array([1, 2, 4]), steps[0])           # constant increment per slot
    by_p = [attention_mults(4, s) for s in (4, 8, 16)]
    assert by_p[1] == 4 * by_p[0] and by_p[2] == 4 * by_p[1]            # P quadruples, cost quadruples
    ref = [reference_mults(s) for s in (4, 8, 16)]
    assert ref[2] / ref[1] > 12                                         # quadratic: ~16x
    assert attention_mults(8, 16) < ref[2] / 5                        # M = 8 slots vs P = 256 keys
