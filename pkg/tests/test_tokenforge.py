import math

import numpy as np
import pytest

from tokenmark import numgrad as ng
from tokenmark.tokenforge import (
    KeyMismatchError,
    TokenEmbedding,
    TrainConfig,
    generate_training_mode,
    img2img_pair,
    insert_position,
    loss_latent,
    loss_watermark,
    train_token,
    watermarked_context,
)
from tokenmark.toyldm import pad_ids, tokenize

from tiny import tiny_detector, tiny_images, tiny_ldm


def zero_detector(k=8):
    det = tiny_detector(k)
    for p in det.params.values():
        p.data[:] = 0
    return det


def test_loss_watermark_examples():
    det = zero_detector(8)
    img = np.zeros((1, 3, 32, 32), np.float32)
    # zero logits: BCE is ln 2 whatever the key
    assert loss_watermark(img, np.ones(8, np.uint8), det).item() == pytest.approx(math.log(2), rel=1e-6)
    # constant logit -1 against key bits of one: log(1 + e)
    det.params["out.b"].data[:] = -1.0
    assert loss_watermark(img, np.ones(8, np.uint8), det).item() == pytest.approx(1.3133, abs=1e-4)
    with pytest.raises(KeyMismatchError):
        loss_watermark(img, np.ones(9, np.uint8), det)


def test_loss_latent_examples():
    a = [np.zeros((1, 4, 8, 8), np.float32)] * 3
    b = [np.ones((1, 4, 8, 8), np.float32)] * 3
    assert loss_latent(a, b).item() == 1.0
    assert loss_latent(a, a).item() == 0.0
    # the shared start contributes zero, so one differing entry out of two halves the loss
    assert loss_latent([a[0], a[0]], [a[0], b[0]]).item() == 0.5
    with pytest.raises(ValueError):
        loss_latent(a, b[:2])


def test_insert_position():
    assert insert_position(pad_ids(tokenize("a red circle"))) == 3
    bad = pad_ids(tokenize("a red circle"))
    bad[1] = 0
    with pytest.raises(ValueError):
        insert_position(bad)


def test_null_embedding_token_leaves_context_and_chain_unchanged():
    ldm = tiny_ldm()
    ids = pad_ids(tokenize("a red circle"))
    null = ldm.text.null_embedding()[None]
    with ng.no_grad():
        c = ldm.context(ids, 2)
        cw = watermarked_context(ldm, ids, null, 2)
    assert np.array_equal(c.data, cw.data)
    imgs, caps = tiny_images(2)
    cid = np.stack([pad_ids(tokenize(x)) for x in caps])
    eps = np.random.default_rng(0).standard_normal((2, 4, 8, 8)).astype(np.float32)
    with ng.no_grad():
        wm, ref = img2img_pair(ldm, imgs, cid, null, 4, eps)
    assert len(wm) == len(ref) == 5
    assert loss_latent(wm, ref).item() == 0.0


def test_earlier_tokens_unaffected_by_watermark_vector(rng):
    ldm = tiny_ldm()
    ids = pad_ids(tokenize("a red circle"))
    with ng.no_grad():
        c = ldm.context(ids, 1).data
        cw = watermarked_context(ldm, ids, rng.standard_normal((1, ldm.text.dim)), 1).data
    assert np.array_equal(c[:, :3], cw[:, :3])
    assert not np.array_equal(c[:, 3], cw[:, 3])


def test_token_round_trip(tmp_path, rng):
    tok = TokenEmbedding(rng.standard_normal((2, 32)).astype(np.float32), rng.integers(0, 2, 16), 8, {"a": 1})
    tok.save(tmp_path / "w.lwmk")
    back = TokenEmbedding.load(tmp_path / "w.lwmk")
    assert np.array_equal(back.vectors, tok.vectors) and np.array_equal(back.key, tok.key)
    assert back.tau == 8 and back.meta == {"a": 1} and back.k == 16 and back.dim == 32


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(tau=0).check(50)
    with pytest.raises(ValueError):
        TrainConfig(tau=51).check(50)
    with pytest.raises(ValueError):
        TrainConfig(alpha=0, beta=0).check(50)


def test_training_touches_only_the_token_and_lowers_loss():
    ldm = tiny_ldm()
    det = tiny_detector(8)
    imgs, caps = tiny_images(8)
    key = np.array([1, 0, 1, 1, 0, 0, 1, 0], np.uint8)
    mods = {**ldm.modules(), "det": det}
    before = {n: m.state_dict() for n, m in mods.items()}
    # start far from the null embedding and train on L_z alone: W* must move back towards a no-op
    init = ldm.text.null_embedding()[None] + np.random.default_rng(1).standard_normal((1, ldm.text.dim))
    res = train_token(ldm, det, imgs, caps, key, TrainConfig(tau=2, steps=40, batch=2, lr=5e-2, alpha=0.0), init)
    for n, m in mods.items():
        assert all(np.array_equal(v, before[n][k]) for k, v in m.state_dict().items())
    assert res.steps_run == 40 and res.token.vectors.shape == (1, ldm.text.dim)
    assert np.mean(res.loss_z[-10:]) < 0.5 * np.mean(res.loss_z[:10])
    with pytest.raises(KeyMismatchError):
        train_token(ldm, det, imgs, caps, key[:4], TrainConfig(tau=2, steps=1))


def test_early_stop_on_loss_w():
    ldm = tiny_ldm()
    det = zero_detector(8)  # L_w is ln 2 from the start
    imgs, caps = tiny_images(4)
    res = train_token(ldm, det, imgs, caps, np.ones(8), TrainConfig(tau=2, steps=50, batch=2, stop_loss_w=0.7))
    assert res.steps_run == 11


def test_training_mode_generation_with_null_token_matches_plain_sampling():
    ldm = tiny_ldm()
    tok = TokenEmbedding(ldm.text.null_embedding()[None], np.zeros(8, np.uint8), 4)
    plain, _ = ldm.sample("a red circle", [3, 4])
    assert np.array_equal(generate_training_mode(ldm, "a red circle", tok, [3, 4]), plain)
