import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fmtk.explain import (
    Heatmap,
    cam,
    colormap,
    gradcam,
    max_normalize,
    overlay,
    save_heatmap_csv,
    save_overlay_png,
)
from fmtk.imaging import read_png
from fmtk.model import BackboneConfig, MultiTaskNet
from fmtk.phantom import PhantomLayout, generate_clean

SMALL = BackboneConfig(input_size=16, widths=(4, 8), blocks=1, embed_dim=8)


def _image(seed=0):
    return generate_clean(PhantomLayout.random(16, seed))


def test_hand_built_two_channel_case():
    a = np.zeros((2, 2, 2))
    a[..., 0] = [[1, 0], [0, 0]]
    a[..., 1] = [[0, 0], [0, 2]]
    g = np.zeros((2, 2, 2))
    g[..., 0] = 1.0
    g[..., 1] = -1.0
    assert cam(a, g).tolist() == [[1, 0], [0, 0]]


def test_single_channel_map_follows_activation():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(5, 5, 1))
    raw = cam(a, np.full_like(a, 0.3))
    assert np.allclose(raw, 0.3 * np.maximum(a[..., 0], 0), atol=1e-15)
    assert np.unravel_index(np.argmax(raw), raw.shape) == np.unravel_index(np.argmax(a[..., 0]), (5, 5))


def test_zero_gradient_gives_zero_map():
    assert not cam(np.ones((3, 3, 2)), np.zeros((3, 3, 2))).any()
    net = MultiTaskNet.create(SMALL, 3, seed=0)
    net.head_b.node("logits").op.params["w"].data[...] = 0.0
    hm = gradcam(net, _image(), ("B", 1))
    assert hm.values.shape == (8, 8) and not hm.values.any() and hm.raw_max == 0.0


def test_normalized_map_properties():
    net = MultiTaskNet.create(SMALL, 3, seed=1, with_head_a=True)
    for target in [("B", 0), ("B", 2), ("A", 1)]:
        hm = gradcam(net, _image(2), target)
        assert hm.shape == net.backbone.node(net.backbone.final_conv).shape[:2]
        assert hm.values.min() >= 0
        assert hm.values.max() == 1.0 or not hm.values.any()
        assert hm.target == target


@settings(max_examples=20, deadline=None)
@given(scale=st.floats(0.01, 100.0), seed=st.integers(0, 30))
def test_gradient_scale_invariance(scale, seed):
    net = MultiTaskNet.create(SMALL, 3, seed=seed)
    img = _image(seed)
    base = gradcam(net, img, ("B", 0))
    scaled = gradcam(net, img, ("B", 0), grad_scale=scale)
    assert np.allclose(scaled.values, base.values, rtol=1e-9, atol=1e-12)
    raw = gradcam(net, img, ("B", 0), normalize=False, grad_scale=scale)
    if raw.values.any():
        assert raw.argmax() == gradcam(net, img, ("B", 0), normalize=False).argmax()


def test_gradcam_leaves_caller_state_alone():
    net = MultiTaskNet.create(SMALL, 3, seed=2)
    before = net.state_dict()
    gradcam(net, _image(), ("B", 1))
    assert all(np.array_equal(before[k], v) for k, v in net.state_dict().items())
    assert all(t.grad is None for t in net.parameters().values())


def test_target_errors_and_default():
    net = MultiTaskNet.create(SMALL, 3, seed=3)
    with pytest.raises(IndexError):
        gradcam(net, _image(), ("B", 3))
    with pytest.raises(ValueError, match="detail head"):
        gradcam(net, _image(), ("A", 0))
    predicted = int(np.argmax(net.forward(_image()[None])[0]))
    assert gradcam(net, _image()).target == ("B", predicted)


def test_max_normalize_all_zero():
    assert not max_normalize(np.zeros((2, 2))).any()


def test_overlay_identity_blue_and_range():
    img = _image(4)
    hm = Heatmap(np.random.default_rng(0).random((8, 8)), True, ("B", 0))
    assert np.array_equal(overlay(img, hm, alpha=0.0), img)
    blank = overlay(np.zeros((16, 16, 3)), Heatmap(np.zeros((8, 8)), True, ("B", 0)), alpha=1.0)
    assert np.allclose(blank, colormap(0.0)) and colormap(0.0)[2] > colormap(0.0)[0]
    out = overlay(img, hm, alpha=0.7)
    assert out.shape == img.shape and out.min() >= 0 and out.max() <= 1
    with pytest.raises(ValueError):
        overlay(img, hm, alpha=1.5)


def test_colormap_ends():
    assert np.argmax(colormap(0.0)) == 2 and np.argmax(colormap(1.0)) == 0


def test_saved_outputs(tmp_path):
    hm = Heatmap(np.array([[0.0, 0.5], [1.0, 0.25]]), True, ("B", 0))
    save_heatmap_csv(hm, tmp_path / "h.csv")
    back = np.loadtxt(tmp_path / "h.csv", delimiter=",")
    assert np.array_equal(back, hm.values)
    save_overlay_png(_image(), hm, tmp_path / "o.png")
    assert read_png(tmp_path / "o.png").shape == (16, 16, 3)
