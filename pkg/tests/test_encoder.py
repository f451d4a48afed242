import time

import numpy as np
import pytest

from peclr.contrastive import build_peclr
from peclr.encoder import (CKPT_MAGIC, ENCODER_PARAMS, Checkpoint, CheckpointError, EncoderConfig, Model,
                           build_encoder, build_head, checkpoint_bytes, encode_project, load, parse_checkpoint,
                           save, swap_head_for_pose)
from peclr.geometry import AffineTransform2D
from peclr.ndiff import Graph, grad_check


def images(n, side=64, seed=0):
    return np.random.default_rng(seed).uniform(0, 255, size=(n, side, side, 3))


def test_config_validation():
    with pytest.raises(ValueError):
        EncoderConfig(m=1)
    with pytest.raises(ValueError):
        EncoderConfig(input_side=40)
    with pytest.raises(ValueError):
        EncoderConfig(head="mlp")
    assert EncoderConfig(m=7).out_dim == 14
    assert EncoderConfig(head="pose").out_dim == 63


def test_default_param_budget():
    assert Model.init(EncoderConfig(), 0).n_params < 300_000


def test_forward_backward_budget():
    model = Model.init(EncoderConfig(), 0)
    x = images(32)
    g = np.ones((32, 128))
    model.run(x)
    model.backward(32, g)  # warm-up
    best = float("inf")
    for _ in range(5):
        t = time.perf_counter()
        model.run(x)
        model.backward(32, g)
        best = min(best, time.perf_counter() - t)
    assert best < 0.05, f"{best * 1000:.1f} ms"


def test_zero_final_layer_gives_zero_projection():
    model = Model.init(EncoderConfig(input_side=32), 1)
    model.params["proj2.w"][:] = 0
    assert not encode_project(model, images(3, 32)).any()


def test_duplicate_images_identical():
    model = Model.init(EncoderConfig(input_side=32), 2)
    x = images(3, 32)
    x[2] = x[0]
    z = encode_project(model, x)
    assert np.array_equal(z[0], z[2])
    assert z.shape == (3, 128)


def test_wrong_image_shape():
    model = Model.init(EncoderConfig(input_side=32), 0)
    with pytest.raises(ValueError):
        model.run(images(2, 64))


def test_deterministic_init():
    a = Model.init(EncoderConfig(input_side=32), 5)
    b = Model.init(EncoderConfig(input_side=32), 5)
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)


@pytest.mark.parametrize("seed", range(2))
def test_gradients_through_encoder_and_peclr(seed):
    cfg = EncoderConfig(input_side=16, widths=(3, 4, 4, 5), feature_dim=6, m=3, proj_hidden=5)
    model = Model.init(cfg, seed)
    g = Graph(model.params)
    x = g.input("x", (4, 16, 16, 3))
    z = build_head(g, build_encoder(g, x, cfg), cfg)
    rng = np.random.default_rng(seed)
    geo = [AffineTransform2D(rng.uniform(-45, 45), tuple(rng.uniform(-15, 15, 2))) for _ in range(4)]
    g.output("loss", build_peclr(g, z, geo, 0.5, 16))
    rep = grad_check(g, {"x": images(4, 16, seed) / 127.5 - 1}, max_coords=8, seed=seed)
    assert rep.max_rel_error < 1e-4, rep.worst


def test_gradients_default_encoder():
    cfg = EncoderConfig()
    model = Model.init(cfg, 3)
    g = Graph(model.params)
    x = g.input("x", (2, 64, 64, 3))
    g.output("z", build_head(g, build_encoder(g, x, cfg), cfg))
    rep = grad_check(g, {"x": images(2, 64, 3) / 127.5 - 1}, max_coords=4)
    assert rep.checked > 20
    assert rep.max_rel_error < 1e-4, rep.worst


# -- head swap ---------------------------------------------------------------------------

def pretrained_ck(seed=0):
    m = Model.init(EncoderConfig(input_side=32), seed)
    return Checkpoint.from_model(m, optimizer={"step": 3, "lars": True, "weight_decay": 1e-6,
                                               "m": {k: v * 0 + 1 for k, v in m.params.items()},
                                               "v": {k: v * 0 + 2 for k, v in m.params.items()}},
                                 schedule_step=3, meta={"objective": "peclr"})


def test_swap_preserves_encoder():
    ck = pretrained_ck()
    sw = swap_head_for_pose(ck, seed=4)
    for k in ENCODER_PARAMS:
        assert np.array_equal(ck.params[k], sw.params[k])
    assert not any(k.startswith("proj") for k in sw.params)
    assert sw.config.head == "pose" and sw.optimizer == {} and sw.schedule_step == 0
    x = images(2, 32)
    assert np.array_equal(ck.model().features(x), sw.model().features(x))


def test_swap_twice_is_error():
    with pytest.raises(ValueError):
        swap_head_for_pose(swap_head_for_pose(pretrained_ck()))


def test_swap_head_seeded():
    a = swap_head_for_pose(pretrained_ck(), seed=1)
    b = swap_head_for_pose(pretrained_ck(), seed=1)
    c = swap_head_for_pose(pretrained_ck(), seed=2)
    assert np.array_equal(a.params["pose.w"], b.params["pose.w"])
    assert not np.array_equal(a.params["pose.w"], c.params["pose.w"])


def test_predict_pose_requires_pose_head():
    with pytest.raises(ValueError):
        pretrained_ck().model().predict_pose(images(1, 32))
    j2d, d_r = swap_head_for_pose(pretrained_ck()).model().predict_pose(images(2, 32))
    assert j2d.shape == (2, 21, 2) and d_r.shape == (2, 21) and not d_r[:, 0].any()


# -- checkpoint files ------------------------------------------------------------------------

def test_roundtrip_bytes(tmp_path):
    ck = pretrained_ck()
    save(ck, tmp_path / "a.ckpt")
    back = load(tmp_path / "a.ckpt")
    save(back, tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert back.optimizer["step"] == 3 and np.array_equal(back.optimizer["m"]["fc.w"], ck.optimizer["m"]["fc.w"])


def test_load_then_forward_bitwise(tmp_path):
    ck = pretrained_ck(7)
    x = images(3, 32)
    before = ck.model().run(x)["out"]
    save(ck, tmp_path / "c.ckpt")
    after = load(tmp_path / "c.ckpt").model().run(x)["out"]
    assert before.tobytes() == after.tobytes()


def test_corrupt_magic():
    data = checkpoint_bytes(pretrained_ck())
    assert data[:8] == CKPT_MAGIC
    with pytest.raises(CheckpointError, match="magic"):
        parse_checkpoint(b"XXXXXXXX" + data[8:])


def test_truncated_payload():
    data = checkpoint_bytes(pretrained_ck())
    with pytest.raises(CheckpointError):
        parse_checkpoint(data[:-8])


def test_bad_version():
    data = bytearray(checkpoint_bytes(pretrained_ck()))
    data[8] = 99
    with pytest.raises(CheckpointError, match="version"):
        parse_checkpoint(bytes(data))


def test_config_mismatch():
    data = checkpoint_bytes(pretrained_ck())
    with pytest.raises(CheckpointError):
        parse_checkpoint(data, expect_config=EncoderConfig(input_side=64))


def test_shape_manifest_disagreement():
    ck = pretrained_ck()
    ck.params["fc.b"] = np.zeros(5)
    with pytest.raises(CheckpointError):
        parse_checkpoint(checkpoint_bytes(ck))
