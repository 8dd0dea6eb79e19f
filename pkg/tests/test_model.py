import mpmath
import numpy as np
import pytest

from cawcl import diffcore as dc
from cawcl.diffcore import Tensor
from cawcl.losses import BatchView, camera_ce, camera_confusion, identity_ce
from cawcl.model import (CameraClassifier, DimMismatch, EmptyTracklet, EncoderParams, ReIDModel,
                         aggregate, camera_probs, encode_frame, grl_forward, load_checkpoint,
                         save_checkpoint)

mpmath.mp.dps = 40


def single_layer(W, b):
    return EncoderParams([Tensor(W, True, "enc.w0")], [Tensor(np.reshape(b, (1, -1)), True, "enc.b0")])


def test_encode_zero_params_gives_zero():
    enc = EncoderParams.init((4, 6, 3), np.random.default_rng(0))
    for t in enc.params():
        t.data[:] = 0.0
    np.testing.assert_array_equal(encode_frame(enc, [1.0, -2.0, 3.0, 0.5]), np.zeros(3))


def test_encode_identity_layer_passes_through():
    enc = single_layer(np.eye(4), np.zeros(4))
    x = np.array([0.3, 1.0, 2.0, 0.1])
    np.testing.assert_array_equal(encode_frame(enc, x), x)


def test_encode_matches_high_precision_oracle():
    rng = np.random.default_rng(1)
    enc = EncoderParams.init((5, 7, 3), rng)
    x = rng.normal(size=5)
    W0, W1 = (mpmath.matrix(w.data.tolist()) for w in enc.weights)
    b0, b1 = (mpmath.matrix(b.data.tolist()) for b in enc.biases)
    h = mpmath.matrix([x.tolist()]) * W0 + b0
    h = h.apply(mpmath.tanh)
    out = h * W1 + b1
    np.testing.assert_allclose(encode_frame(enc, x), [float(v) for v in out], rtol=1e-13, atol=1e-15)


def test_encode_rejects_wrong_dim():
    enc = EncoderParams.init((4, 3), np.random.default_rng(0))
    with pytest.raises(dc.ShapeMismatch):
        encode_frame(enc, np.ones(5))


def test_aggregate_examples():
    a, b = np.array([1.0, 2.0]), np.array([3.0, -1.0])
    np.testing.assert_array_equal(aggregate([a]), a)
    np.testing.assert_array_equal(aggregate([a, a]), a)
    np.testing.assert_array_equal(aggregate([a, b]), aggregate([b, a]))
    with pytest.raises(EmptyTracklet):
        aggregate([])


def test_grl_forward_and_backward():
    np.testing.assert_array_equal(grl_forward([1.0, 2.0]), [1.0, 2.0])
    x = Tensor([[1.0, 2.0]], requires_grad=True)
    dc.grl(x, 1.0).backward(np.ones((1, 2)))
    np.testing.assert_array_equal(x.grad, [[-1.0, -1.0]])


def test_camera_probs():
    zero = CameraClassifier(Tensor(np.zeros((3, 2))), Tensor(np.zeros((1, 2))))
    np.testing.assert_array_equal(camera_probs(zero, np.ones(3)), [0.5, 0.5])
    zero4 = CameraClassifier(Tensor(np.zeros((3, 4))), Tensor(np.zeros((1, 4))))
    np.testing.assert_array_equal(camera_probs(zero4, np.ones(3)), [0.25] * 4)
    rng = np.random.default_rng(2)
    cam = CameraClassifier(Tensor(rng.normal(size=(3, 5))), Tensor(rng.normal(size=(1, 5))))
    g = rng.normal(size=3)
    p = camera_probs(cam, g)
    logits = [mpmath.mpf(float(v)) for v in g @ cam.W.data + cam.b.data[0]]
    z = sum(mpmath.e ** v for v in logits)
    np.testing.assert_allclose(p, [float(mpmath.e ** v / z) for v in logits], rtol=1e-13)
    assert np.all((p > 0) & (p < 1)) and abs(p.sum() - 1) < 1e-9


def small_model(seed=0, grl_scale=1.0):
    return ReIDModel.init(d_in=4, d_hidden=6, feat_dim=3, n_ids=5, n_cams=3, seed=seed, grl_scale=grl_scale)


def camera_batch(model, frames, sizes, cams):
    g = model.represent(frames, sizes)
    return BatchView(g, [-1] * len(sizes), cams)


@pytest.mark.parametrize("loss_fn", [camera_ce, camera_confusion])
@pytest.mark.parametrize("seed", range(3))
def test_grl_negates_encoder_gradient(loss_fn, seed):
    model = small_model(seed)
    rng = np.random.default_rng(seed + 10)
    frames, sizes, cams = rng.normal(size=(7, 4)), [3, 2, 2], [0, 2, 1]

    def grads(reverse):
        for p in model.named_params().values():
            p.zero_grad()
        batch = camera_batch(model, frames, sizes, cams)
        loss_fn(batch, model.cam_cls, reverse=reverse).backward()
        return {k: p.grad.copy() for k, p in model.named_params().items() if p.grad is not None}

    with_grl, without = grads(True), grads(False)
    for name in with_grl:
        if name.startswith("enc."):
            np.testing.assert_allclose(with_grl[name], -without[name], rtol=0, atol=1e-12)
        elif name.startswith("cam."):
            np.testing.assert_array_equal(with_grl[name], without[name])


def test_grl_scale_multiplies_gradient():
    frames, sizes, cams = np.random.default_rng(3).normal(size=(4, 4)), [2, 2], [0, 1]
    out = {}
    for s in (1.0, 0.5):
        model = small_model(4, grl_scale=s)
        camera_ce(camera_batch(model, frames, sizes, cams), model.cam_cls).backward()
        out[s] = model.encoder.weights[0].grad.copy()
    np.testing.assert_allclose(out[0.5], 0.5 * out[1.0], atol=1e-14)


def test_camera_branch_grad_check():
    model = small_model(5)
    frames = np.random.default_rng(5).normal(size=(5, 4))
    f = lambda: camera_confusion(camera_batch(model, frames, [2, 3], [1, 0]), model.cam_cls, reverse=False)
    assert dc.grad_check(f, list(model.named_params().values())[:2] + model.cam_cls.params()) < 1e-5


def test_parameter_isolation_by_gradient():
    model = small_model(6)
    frames = np.random.default_rng(6).normal(size=(6, 4))
    g = model.represent(frames, [2, 2, 2])
    camera_ce(BatchView(g, [-1] * 3, [0, 1, 2]), model.cam_cls).backward()
    assert all(p.grad is None or not p.grad.any() for p in model.id_cls.params())
    for p in model.named_params().values():
        p.zero_grad()
    g = model.represent(frames, [2, 2, 2])
    identity_ce(BatchView(g, [0, 4, 2], [-1] * 3), model.id_cls).backward()
    assert all(p.grad is None or not p.grad.any() for p in model.cam_cls.params())


def test_init_is_seeded_and_bounded():
    a, b, c = small_model(7), small_model(7), small_model(8)
    for name, p in a.named_params().items():
        np.testing.assert_array_equal(p.data, b.named_params()[name].data)
    for w in a.encoder.weights + [a.id_cls.W, a.cam_cls.W]:
        assert np.all(np.abs(w.data) <= 1 / np.sqrt(w.shape[0]))
    assert not np.array_equal(a.encoder.weights[0].data, c.encoder.weights[0].data)


def test_embed_matches_graph_forward():
    model = small_model(9)
    rng = np.random.default_rng(9)
    sets = [rng.normal(size=(n, 4)) for n in (1, 3, 5)]
    via_graph = model.represent(np.concatenate(sets), [1, 3, 5]).data
    np.testing.assert_allclose(model.embed(sets), via_graph, atol=1e-14)
    with pytest.raises(DimMismatch):
        model.embed([np.ones((2, 3))])


def test_copy_is_independent():
    model = small_model(10)
    other = model.copy()
    other.encoder.weights[0].data += 1.0
    assert not np.array_equal(model.encoder.weights[0].data, other.encoder.weights[0].data)


def test_checkpoint_round_trip(tmp_path):
    model = small_model(11, grl_scale=0.7)
    p = tmp_path / "model.ckpt"
    save_checkpoint(model, p)
    loaded = load_checkpoint(p)
    assert loaded.cam_cls.grl_scale == 0.7
    for name, t in model.named_params().items():
        np.testing.assert_array_equal(loaded.named_params()[name].data, t.data)
    save_checkpoint(loaded, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == p.read_bytes()


def test_checkpoint_rejects_other_files(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_text("something else 3\n")
    with pytest.raises(ValueError):
        load_checkpoint(p)
