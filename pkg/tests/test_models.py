import struct

import numpy as np
import pytest

from reidlm import autodiff as ad
from reidlm.autodiff import Tensor, grad_check
from reidlm.checkpoint import (CheckpointError, checkpoint_id, from_bytes, load_checkpoint, save_checkpoint,
                               to_bytes)
from reidlm.models import (CausalLMConfig, Projection, VisualEncoderConfig, build_models, encode_image,
                           greedy_decode, lm_forward, patchify, pool_image_latents, project, reid_embed)
from reidlm.tokenizer import TokenSequence

SMALL_ENC = VisualEncoderConfig(height=16, width=8, patch=4, dim=16, layers=2, heads=2)
SMALL_LM = CausalLMConfig(vocab_size=20, dim=16, layers=2, heads=2, max_len=24)


@pytest.fixture
def ms():
    return build_models("mllmreid_pretrain", SMALL_ENC, SMALL_LM, 5, seed=1, vocab=None)


def test_config_validation():
    with pytest.raises(ValueError):
        VisualEncoderConfig(height=60)
    with pytest.raises(ValueError):
        VisualEncoderConfig(dim=30, heads=4)
    with pytest.raises(ValueError):
        VisualEncoderConfig(tap_point="middle")
    with pytest.raises(ValueError):
        CausalLMConfig(dim=30, heads=4)


def test_default_patch_count():
    cfg = VisualEncoderConfig()
    assert cfg.num_patches == 32
    enc = build_models("reid", cfg, None, None, 0).encoder
    assert encode_image(np.zeros((64, 32, 3)), enc).shape == (32, 64)


def test_patchify_matches_loop():
    rng = np.random.default_rng(0)
    img = rng.random((2, 8, 12, 3))
    got = patchify(img, 4)
    k = 0
    for r in range(2):
        for c in range(3):
            assert np.array_equal(got[:, k], img[:, 4 * r:4 * r + 4, 4 * c:4 * c + 4].reshape(2, -1))
            k += 1


def test_encode_image_shape_error_and_determinism(ms):
    with pytest.raises(ValueError):
        encode_image(np.zeros((8, 8, 3)), ms.encoder)
    img = np.random.default_rng(1).random((16, 8, 3))
    a = encode_image(img, ms.encoder).data
    b = encode_image(np.stack([img, img]), ms.encoder).data
    assert np.array_equal(a, b[0]) and np.array_equal(b[0], b[1])
    e = reid_embed(np.stack([img, img]), ms.encoder).data
    assert e.shape == (2, 16) and np.array_equal(e[0], e[1])


def test_tap_points_differ():
    img = np.random.default_rng(2).random((16, 8, 3))
    post = build_models("reid", SMALL_ENC, None, None, 3).encoder
    pre_cfg = VisualEncoderConfig(**{**SMALL_ENC.__dict__, "tap_point": "pre_last_layer"})
    pre = build_models("reid", pre_cfg, None, None, 3).encoder
    assert np.abs(encode_image(img, post).data - encode_image(img, pre).data).max() > 0
    assert len(pre.active_parameters()) < len(pre.parameters())


def test_projection_special_cases():
    rng = np.random.default_rng(0)
    p = Projection(4, 4, rng)
    x = Tensor(rng.normal(size=(3, 4)))
    p.weight.data[:] = 0
    p.bias.data[:] = [1, 2, 3, 4]
    assert np.array_equal(project(x, p).data, np.tile([1.0, 2, 3, 4], (3, 1)))
    p.weight.data[:] = np.eye(4)
    p.bias.data[:] = 0
    assert np.array_equal(project(x, p).data, x.data)
    p.weight.data[:] = rng.normal(size=(4, 4))
    W = rng.normal(size=(3, 4))
    assert grad_check(lambda w: ad.tsum(project(x, p) * W), [p.weight]) <= 1e-6


def _seq(ms, rng, L=12, n_img=None):
    n_img = n_img if n_img is not None else SMALL_ENC.num_patches
    ids = rng.integers(5, 20, size=L + n_img)
    slots = np.arange(1, 1 + n_img)
    ids[slots] = 4
    return ids, slots


def test_causality_exact(ms):
    rng = np.random.default_rng(4)
    ids, slots = _seq(ms, rng)
    img = rng.random((16, 8, 3))
    emb = project(encode_image(img, ms.encoder), ms.projection)
    base, _ = lm_forward(ms.lm, ids, slots, emb)
    L = len(ids)
    for j in range(slots[-1] + 1, L):
        ids2 = ids.copy()
        ids2[j] = (ids2[j] + 1 - 5) % 15 + 5
        out, _ = lm_forward(ms.lm, ids2, slots, emb)
        assert np.array_equal(out.data[:j], base.data[:j])
        assert not np.array_equal(out.data[j:], base.data[j:])


def test_lm_shapes_and_errors(ms):
    rng = np.random.default_rng(5)
    ids, slots = _seq(ms, rng)
    emb = project(encode_image(rng.random((16, 8, 3)), ms.encoder), ms.projection)
    logits, hidden = lm_forward(ms.lm, ids, slots, emb)
    assert logits.shape == (len(ids), 20) and hidden.shape == (len(ids), 16)
    text_only, _ = lm_forward(ms.lm, ids[:10])
    assert text_only.shape == (10, 20)
    with pytest.raises(ValueError, match="max_len"):
        lm_forward(ms.lm, np.zeros(25, dtype=int))
    with pytest.raises(ValueError, match="image slots"):
        lm_forward(ms.lm, ids, slots[:-1], emb)


def test_pool_image_latents():
    v = np.array([1.0, -2.0, 3.0])
    h = Tensor(np.tile(v, (5, 1)))
    assert np.allclose(pool_image_latents(h, np.array([1, 3])).data, v)
    h2 = Tensor(np.stack([v, -v, v]))
    assert np.array_equal(pool_image_latents(h2, np.array([0, 1])).data, np.zeros(3))
    assert np.array_equal(pool_image_latents(h2, np.array([0, 1]), "last").data, -v)
    with pytest.raises(ValueError):
        pool_image_latents(h, np.array([], dtype=int))


def test_gradients_reach_encoder_through_pooling(ms):
    rng = np.random.default_rng(6)
    ids, slots = _seq(ms, rng)
    ad.get_tape().clear()
    emb = project(encode_image(rng.random((16, 8, 3)), ms.encoder), ms.projection)
    _, hidden = lm_forward(ms.lm, ids, slots, emb)
    ad.backward(ad.tsum(pool_image_latents(hidden, slots) * rng.normal(size=16)))
    assert np.abs(ms.encoder.patch_embed.weight.grad).sum() > 0
    assert np.abs(ms.projection.weight.grad).sum() > 0


def test_greedy_decode_runs(ms):
    rng = np.random.default_rng(7)
    ids, slots = _seq(ms, rng, L=3)
    emb = project(encode_image(rng.random((16, 8, 3)), ms.encoder), ms.projection)
    seq = TokenSequence(ids, np.zeros_like(ids), slots)
    out = greedy_decode(ms.lm, seq, emb, eos_id=2, max_new=4)
    assert 1 <= len(out) <= 4 and all(0 <= t < 20 for t in out)


def test_init_scale():
    big = build_models("reid", VisualEncoderConfig(), None, None, 0).encoder
    w = big.patch_embed.weight.data
    assert abs(w.std() - 1 / np.sqrt(w.shape[0])) < 0.1 / np.sqrt(w.shape[0])


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_round_trip(ms, tmp_path):
    ms.vocab = ["<pad>", "x"]
    p1 = save_checkpoint(ms, tmp_path / "a.mlrd")
    back = load_checkpoint(p1)
    p2 = save_checkpoint(back, tmp_path / "b.mlrd")
    assert p1.read_bytes() == p2.read_bytes()
    assert checkpoint_id(p1) == checkpoint_id(p2)
    assert back.stage == "mllmreid_pretrain" and back.vocab == ["<pad>", "x"]
    for (n1, a), (n2, b) in zip(ms.named_parameters(), back.named_parameters()):
        assert n1 == n2 and np.array_equal(a.data, b.data)


def test_checkpoint_layout(ms):
    raw = to_bytes(ms)
    assert raw[:4] == b"MLRD"
    (version,) = struct.unpack("<H", raw[4:6])
    (hlen,) = struct.unpack("<I", raw[6:10])
    (count,) = struct.unpack("<I", raw[10 + hlen:14 + hlen])
    assert version == 1 and count == len(ms.named_parameters())


def test_checkpoint_errors(ms):
    raw = to_bytes(ms)
    with pytest.raises(CheckpointError, match="bad magic"):
        from_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="version"):
        from_bytes(raw[:4] + struct.pack("<H", 99) + raw[6:])
    with pytest.raises(CheckpointError, match="truncat"):
        from_bytes(raw[:-5])
    with pytest.raises(CheckpointError, match="trailing"):
        from_bytes(raw + b"\0")


def test_stage1_encoder_loads_into_stage2(ms, tmp_path):
    from reidlm.synthdata import build_dataset
    from reidlm.trainer import TrainConfig, train_stage2

    ds = build_dataset(num_train_ids=4, num_eval_ids=2, imgs_per_id=2, cams=2)
    path = save_checkpoint(build_models("mllmreid_pretrain", VisualEncoderConfig(), SMALL_LM, 4, 0),
                           tmp_path / "s1.mlrd")
    src = load_checkpoint(path)
    reid, _ = train_stage2(src, ds, TrainConfig(stage="reid", P=2, K=2, epochs=1), steps=0)
    for (_, a), (_, b) in zip(src.encoder.named_parameters(), reid.encoder.named_parameters()):
        assert np.array_equal(a.data, b.data)
    assert reid.lm is None and reid.projection is None
