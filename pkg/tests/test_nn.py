import numpy as np
import pytest
import torch

from ccnn import nn as cnn
from ccnn.exceptions import NonFiniteError, ShapeError



@pytest.fixture(autouse=True)
def float64_default():
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(previous)


def test_conv_identity_kernel():
    x = torch.randn(2, 3, 5, 5)
    w = torch.eye(3).reshape(3, 3, 1, 1)
    torch.testing.assert_close(cnn.conv2d(x, w), x)


def test_conv_ones_kernel_sums_neighborhood():
    x = torch.full((1, 1, 6, 6), 2.0)
    out = cnn.conv2d(x, torch.ones(1, 1, 3, 3), pad=cnn.symmetric_pad(1))
    assert out.shape == (1, 1, 6, 6)
    assert torch.all(out[0, 0, 1:-1, 1:-1] == 18.0)
    assert out[0, 0, 0, 0] == 8.0


def test_conv_zero_weights():
    out = cnn.conv2d(torch.randn(1, 2, 4, 4), torch.zeros(3, 2, 3, 3), pad=(1, 1, 1, 1))
    assert torch.count_nonzero(out) == 0


def test_conv_asymmetric_pad_and_stride():
    out = cnn.conv2d(torch.randn(1, 1, 8, 8), torch.ones(1, 1, 3, 3), stride=2, pad=(0, 1, 0, 1))
    assert out.shape == (1, 1, 4, 4)


def test_conv_channel_mismatch_names_layer():
    with pytest.raises(ShapeError, match="A3-Conv"):
        cnn.conv2d(torch.randn(1, 4, 5, 5), torch.zeros(2, 3, 3, 3), name="A3-Conv")


def test_relu_and_pool():
    assert cnn.relu(torch.tensor([-1.0, 0.0, 2.0])).tolist() == [0, 0, 2]
    x = torch.tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
    assert cnn.maxpool(x, (2, 2), (2, 2)).item() == 4.0


def test_pool_padding_never_wins():
    x = -torch.ones(1, 1, 4, 4)
    out = cnn.maxpool(x, (2, 2), (1, 1), pad=(0, 1, 0, 1))
    assert out.shape == (1, 1, 4, 4)
    assert torch.all(out == -1)


def test_concat_shapes():
    out = cnn.concat_channels(torch.zeros(1, 128, 64, 64), torch.zeros(1, 68, 64, 64))
    assert out.shape == (1, 196, 64, 64)
    with pytest.raises(ShapeError):
        cnn.concat_channels(torch.zeros(1, 2, 8, 8), torch.zeros(1, 2, 4, 4))


def test_dropout_identity_in_eval():
    x = torch.randn(10, 10)
    torch.testing.assert_close(cnn.dropout(x, 0.5, training=False), x)
    with pytest.raises(ValueError):
        cnn.dropout(x, 1.0, training=True)


def test_l2_loss_values():
    t = torch.randn(3, 4)
    assert cnn.l2_loss(t, t).item() == 0
    assert cnn.l2_loss(t + 2, t).item() == pytest.approx(4.0)
    with pytest.raises(ShapeError):
        cnn.l2_loss(t, t[:2])


def test_scalar_gradient_matches_hand_calculus():
    w = torch.tensor(1.5, requires_grad=True)
    x, t = 2.0, 1.0
    (g,) = cnn.gradients(cnn.l2_loss(w * x, torch.tensor(t)), [w])
    assert g.item() == pytest.approx(2 * x * (1.5 * x - t))


def test_zero_residual_zero_gradient_and_unused_params():
    w = torch.tensor(0.5, requires_grad=True)
    unused = torch.tensor(3.0, requires_grad=True)
    g, gu = cnn.gradients(cnn.l2_loss(w * 2.0, torch.tensor(1.0)), [w, unused])
    assert g.item() == 0 and gu.item() == 0


def test_sgd_steps():
    w = torch.tensor([1.0])
    cnn.sgd_step([w], [torch.zeros(1)], lr=0.1, momentum=0.9)
    assert w.item() == 1.0
    cnn.sgd_step([w], [2 * w], lr=0.1, momentum=0.0)
    assert w.item() == pytest.approx(0.8)

    w = torch.tensor([1.0])
    buf = cnn.sgd_step([w], [2 * w], lr=0.1, momentum=0.9)
    assert w.item() == pytest.approx(0.8)
    cnn.sgd_step([w], [2 * w], lr=0.1, momentum=0.9, buffers=buf)
    # b = 0.9 * 2 + 1.6
    assert w.item() == pytest.approx(0.8 - 0.1 * 3.4)


def test_sgd_rejects_non_finite_gradients():
    w = torch.tensor([1.0])
    with pytest.raises(NonFiniteError):
        cnn.sgd_step([w], [torch.tensor([float("nan")])], lr=0.1)
    assert w.item() == 1.0


def test_finite_difference_check_on_small_conv():
    torch.manual_seed(0)
    w = torch.randn(2, 1, 3, 3, requires_grad=True)
    b = torch.randn(2, requires_grad=True)
    x = torch.randn(1, 1, 6, 6)
    fn = lambda: (cnn.conv2d(x, w, b, pad=(1, 1, 1, 1)) ** 2).sum()
    res = cnn.finite_difference_check(fn, [w, b], n_samples=20)
    assert res["n_samples"] == 20
    assert res["max_rel_error"] < 1e-6


def test_checkpoint_round_trip(tmp_path):
    spec = cnn.LayerSpec("X-Conv", "conv", 3, 4, (3, 3), (1, 1), (1, 1, 1, 1))
    block = cnn.ConvBlock(spec)
    cnn.save_checkpoint(tmp_path / "c.npz", block, epoch=3, note="x")
    state, hyper = cnn.load_checkpoint(tmp_path / "c.npz")
    assert hyper == {"epoch": 3, "note": "x"}
    fresh = cnn.ConvBlock(spec)
    fresh.load_state_dict(state)
    for a, b in zip(block.state_dict().values(), fresh.state_dict().values()):
        torch.testing.assert_close(a, b)


def test_checkpoint_rejects_foreign_npz(tmp_path):
    np.savez(tmp_path / "x.npz", __meta__=np.array('{"format": "other", "version": 1}'))
    with pytest.raises(ValueError):
        cnn.load_checkpoint(tmp_path / "x.npz")


def test_layer_spec_output_size():
    spec = cnn.LayerSpec("A1-Conv", "conv", 3, 8, (5, 5), (2, 2), (1, 2, 1, 2))
    assert spec.output_size(256, 256) == (128, 128)
