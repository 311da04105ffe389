import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given
from hypothesis import strategies as st

from oracles import FROZEN, central_diff, gap_loop
from manifold_wss.nets import (AttentionModule, Backbone, BackboneConfig, Classifier, ManifoldNet,
                               ShapeError, UNet, UNetConfig, attentive_embed, load_checkpoint,
                               load_model, model_meta, save_checkpoint)


# backbone ------------------------------------------------------------------


def test_resnet50_three_stages_14x14():
    bb = Backbone(BackboneConfig("paper_resnet50_3blocks")).eval()
    with torch.no_grad():
        f = bb(torch.zeros(1, 3, 224, 224))
    assert f.shape == (1, 1024, 14, 14)


def test_tiny_stride_8():
    f = Backbone(BackboneConfig("tiny"))(torch.rand(2, 3, 64, 64))
    assert f.shape == (2, 64, 8, 8)


def test_indivisible_input():
    bb = Backbone(BackboneConfig("paper_resnet101_3blocks"))
    with pytest.raises(ShapeError, match="indivisible"):
        bb(torch.zeros(1, 3, 100, 100))


def test_unknown_preset():
    with pytest.raises(ValueError):
        BackboneConfig("vgg16")


def test_missing_pretrained_weights(tmp_path):
    with pytest.raises(FileNotFoundError):
        Backbone(BackboneConfig("paper_resnet50_3blocks", pretrained_weights=str(tmp_path / "w.pt")))


# attention ------------------------------------------------------------------


def test_zero_last_layer_gives_half():
    att = AttentionModule(64)
    nn.init.zeros_(att.last_conv.weight)
    a = att(torch.randn(3, 64, 8, 8))
    assert torch.all(a == 0.5)


def test_attention_shape_256x14x14():
    a = AttentionModule(256)(torch.randn(1, 256, 14, 14))
    assert a.shape == (1, 14, 14)


def test_large_preactivation_saturates():
    att = AttentionModule(8)
    nn.init.zeros_(att.last_conv.weight)
    f = torch.zeros(1, 8, 5, 5)
    with torch.no_grad():
        att.last_conv.bias.fill_(0.0)
        # pre-activation +20 at one cell: a constant input to the last conv
        att.last_conv.weight[0, 0, 1, 1] = 1.0
    hidden = torch.zeros(1, att.last_conv.in_channels, 5, 5)
    hidden[0, 0, 2, 3] = 20.0
    a = torch.sigmoid(att.last_conv(hidden)).squeeze(1)
    assert a[0, 2, 3] > 0.999
    assert att(f).shape == (1, 5, 5)


def test_cold_start_attention_is_half():
    # default init zeroes the final bias, so zero features give exactly 0.5
    a = AttentionModule(64)(torch.zeros(2, 64, 8, 8))
    assert torch.all(a == 0.5)


def test_attention_range_1000_forwards():
    torch.manual_seed(1)
    net = ManifoldNet(BackboneConfig("tiny")).eval()
    lo, hi = 1.0, 0.0
    with torch.no_grad():
        for i in range(1000 // 50):
            x = torch.rand(50, 3, 64, 64) * (1 + 9 * (i % 2))
            a = net.forward_all(x)["attention"]
            assert a.shape == (50, 8, 8)
            lo, hi = min(lo, float(a.min())), max(hi, float(a.max()))
    assert 0 < lo and hi < 1


# gating -----------------------------------------------------------------------


def test_all_ones_gating_is_gap(rng):
    f = torch.from_numpy(rng.standard_normal((2, 5, 4, 3)))
    pooled = attentive_embed(f, torch.ones(2, 4, 3))
    assert torch.equal(pooled, f.mean(dim=(2, 3)))
    assert np.allclose(pooled[0].numpy(), gap_loop(f[0].numpy()), atol=1e-12)


def test_all_zero_gating():
    f = torch.randn(1, 6, 4, 4)
    assert torch.equal(attentive_embed(f, torch.zeros(1, 4, 4)), torch.zeros(1, 6))


def test_gap_single_channel_example():
    f = torch.tensor([[[[1.0, 3.0], [5.0, 7.0]]]])
    assert attentive_embed(f, torch.ones(1, 2, 2)).item() == FROZEN["gap_1357"]


def test_gating_shape_mismatch():
    with pytest.raises(ShapeError):
        attentive_embed(torch.zeros(1, 3, 4, 4), torch.zeros(1, 5, 5))


def test_all_ones_gating_reproduces_embedding():
    net = ManifoldNet(BackboneConfig("tiny")).eval()
    x = torch.rand(3, 3, 64, 64)
    with torch.no_grad():
        f = net.backbone(x)
        gated = attentive_embed(f, torch.ones(3, 8, 8), net.dense)
        plain = torch.nn.functional.normalize(net.dense(f.mean(dim=(2, 3))), dim=1, eps=1e-12)
    assert torch.equal(gated, plain)


@given(st.integers(0, 10 ** 6), st.floats(0.01, 100))
def test_embedding_unit_norm(seed, scale):
    torch.manual_seed(seed % 1000)
    net = ManifoldNet(BackboneConfig("tiny", tiny_channels=16), dim=32).eval()
    with torch.no_grad():
        e = net(torch.rand(2, 3, 32, 32) * scale)
    assert torch.allclose(e.norm(dim=1), torch.ones(2), atol=1e-6)


def test_gradient_reaches_attention_fd():
    torch.manual_seed(0)
    net = ManifoldNet(BackboneConfig("tiny", tiny_channels=8), dim=4).double().eval()
    x = torch.rand(2, 3, 16, 16, dtype=torch.float64)
    w = torch.randn(2, 4, dtype=torch.float64)

    @torch.no_grad()
    def objective():
        return float((net(x) * w).sum())

    params = [p for p in net.attention.parameters()]
    out = (net(x) * w).sum()
    grads = torch.autograd.grad(out, params)
    rng = np.random.default_rng(0)
    checked = 0
    for _ in range(10):
        k = rng.integers(len(params))
        flat = params[k].data.view(-1)
        i = rng.integers(flat.numel())
        old = float(flat[i])

        def f(v):
            flat[i] = float(v[0])
            val = objective()
            flat[i] = old
            return val

        num = central_diff(f, [old], eps=1e-6)[0]
        ana = float(grads[k].view(-1)[i])
        assert abs(ana - num) <= 1e-3 * max(abs(num), abs(ana), 1e-8)
        checked += abs(ana) > 0
    assert checked > 0


# classifier -------------------------------------------------------------------


def test_classifier_softmax():
    clf = Classifier(BackboneConfig("tiny"), 4)
    p = torch.softmax(clf(torch.rand(3, 3, 64, 64)), dim=1)
    assert torch.isfinite(p).all() and torch.allclose(p.sum(1), torch.ones(3))


def test_classifier_zero_head_uniform():
    clf = Classifier(BackboneConfig("tiny"), 5)
    nn.init.zeros_(clf.head.weight)
    nn.init.zeros_(clf.head.bias)
    p = torch.softmax(clf(torch.rand(2, 3, 64, 64)), dim=1)
    assert torch.allclose(p, torch.full_like(p, 0.2))


def test_classifier_overfits_8_images():
    from manifold_wss.saliency import ClassifierTrainConfig, train_classifier

    torch.manual_seed(0)
    x = torch.rand(8, 3, 32, 32)
    y = np.array([1, 2] * 4)
    x[y == 2, 0] += 0.5
    clf = Classifier(BackboneConfig("tiny", tiny_channels=16), 2)
    recs = train_classifier(clf, x, y, ClassifierTrainConfig(epochs=60, batch_size=8, lr=1e-2))
    with torch.no_grad():
        acc = (clf(x).argmax(1).numpy() == y - 1).mean()
    assert acc == 1.0 and recs[-1]["train_accuracy"] == 1.0


# U-Net ---------------------------------------------------------------------------


@pytest.mark.parametrize("size", [224, 64])
def test_unet_shapes(size):
    net = UNet(UNetConfig(init_filters=4)).eval()
    with torch.no_grad():
        out = net(torch.rand(1, 3, size, size))
    assert out.shape == (1, 2, size, size)
    p = torch.softmax(out, dim=1)
    assert torch.allclose(p.sum(1), torch.ones(1, size, size), atol=1e-6)


def test_unet_indivisible():
    with pytest.raises(ShapeError, match="indivisible"):
        UNet(UNetConfig(init_filters=4))(torch.rand(1, 3, 50, 50))


def test_unet_channel_doubling():
    net = UNet(UNetConfig(init_filters=8, depth=4))
    widths = [blk[1][0].out_channels for blk in net.down]
    assert widths == [8, 16, 32, 64, 128]


# checkpoints ----------------------------------------------------------------------


@pytest.mark.parametrize("make", [
    lambda: ManifoldNet(BackboneConfig("tiny"), dim=16),
    lambda: Classifier(BackboneConfig("tiny"), 3),
    lambda: UNet(UNetConfig(init_filters=4)),
])
def test_checkpoint_roundtrip_bit_exact(tmp_path, make):
    model = make()
    save_checkpoint(tmp_path / "m.pt", model, model_meta(model, seed=7, epoch=3))
    loaded, meta = load_model(tmp_path / "m.pt")
    assert meta["seed"] == 7 and meta["epoch"] == 3
    a, b = model.state_dict(), loaded.state_dict()
    assert a.keys() == b.keys()
    assert all(torch.equal(a[k], b[k]) for k in a)
    save_checkpoint(tmp_path / "m2.pt", loaded, meta)
    assert (tmp_path / "m.pt").read_bytes() == (tmp_path / "m2.pt").read_bytes()


def test_missing_checkpoint(tmp_path):
    with pytest.raises(FileNotFoundError, match="missing checkpoint"):
        load_checkpoint(tmp_path / "nope.pt")
