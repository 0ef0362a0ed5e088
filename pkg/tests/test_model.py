import numpy as np
import pytest

from fmtk.diffcore import finite_diff_check
from fmtk.model import BackboneConfig, MultiTaskNet, build_backbone
from fmtk.phantom import PhantomLayout, generate_clean

SMALL = BackboneConfig(input_size=16, widths=(4, 8), blocks=1, embed_dim=8)


def _batch(n, size=16, seed=0):
    return np.stack([generate_clean(PhantomLayout.random(size, seed + i)) for i in range(n)])


def test_embedding_shape_and_identical_rows():
    net = MultiTaskNet.create(SMALL, 3, seed=0)
    x = _batch(3)
    x[2] = x[0]
    z = net.forward_shared(x)
    assert z.shape == (3, 8)
    assert np.array_equal(z[0], z[2])


def test_wrong_input_size_raises():
    net = MultiTaskNet.create(SMALL, 3, seed=0)
    with pytest.raises(Exception, match="input"):
        net.forward_shared(np.zeros((1, 12, 12, 3)))


def test_softmax_rows_and_single_task_heads():
    net = MultiTaskNet.create(SMALL, 3, seed=1)
    pb, pa = net.forward(_batch(5))
    assert pa is None and np.allclose(pb.sum(axis=1), 1.0, atol=1e-9)
    with pytest.raises(ValueError, match="single-task"):
        net.forward_heads(net.forward_shared(_batch(1)), require_a=True)


def test_zeroed_head_b_is_uniform():
    net = MultiTaskNet.create(SMALL, 3, seed=2)
    for t in net.head_b.parameters().values():
        t.data[...] = 0.0
    pb, _ = net.forward(_batch(4))
    assert np.allclose(pb, 1 / 3, atol=1e-15)


def test_attach_keeps_probs_b_and_is_deterministic():
    st = MultiTaskNet.create(SMALL, 3, seed=3)
    x = _batch(4)
    before = st.forward(x)[0].copy()
    shared = {k: v.copy() for k, v in st.state_dict().items()}
    mt = st.attach_head_a(seed=9)
    pb, pa = mt.forward(x)
    assert np.array_equal(pb, before)
    assert pa.shape == (4, 3) and np.all((pa > 0) & (pa < 1))
    # The source net is untouched and a second attach yields the same head.
    assert all(np.array_equal(shared[k], v) for k, v in st.state_dict().items())
    again = st.attach_head_a(seed=9)
    for k, v in again.head_a.parameters().items():
        assert np.array_equal(v.data, mt.head_a.parameters()[k].data)
    with pytest.raises(ValueError):
        mt.attach_head_a(seed=1)


def test_heads_read_the_same_embedding():
    net = MultiTaskNet.create(SMALL, 3, seed=4, with_head_a=True)
    z = net.forward_shared(_batch(2))
    net.forward_heads(z)
    assert net.head_a.values["input"] is net.head_b.values["input"]


def _grads(net):
    return {k: (None if t.grad is None else t.grad.copy()) for k, t in net.parameters().items()}


def test_gradient_routing():
    net = MultiTaskNet.create(SMALL, 3, seed=5, with_head_a=True)
    x = _batch(3)
    for which in ("a", "b"):
        net.zero_grad()
        pb, pa = net.forward(x)
        if which == "a":
            net.backward(grad_a=np.ones_like(pa))
        else:
            net.backward(grad_b=np.random.default_rng(0).normal(size=pb.shape))
        g = _grads(net)
        other = "head_b." if which == "a" else "head_a."
        assert all(v is None or not v.any() for k, v in g.items() if k.startswith(other))
        own = "head_a." if which == "a" else "head_b."
        assert any(v is not None and v.any() for k, v in g.items() if k.startswith(own))
        assert any(v is not None and v.any() for k, v in g.items() if k.startswith("shared."))


def test_default_backbone_under_100k_params():
    net = MultiTaskNet.create(BackboneConfig(), 3, seed=0, with_head_a=True)
    assert net.n_params() < 100_000
    assert net.backbone.node(net.backbone.final_conv).shape == (8, 8, 32)


def test_config_invariants():
    with pytest.raises(ValueError):
        BackboneConfig(widths=())
    with pytest.raises(ValueError):
        MultiTaskNet.create(BackboneConfig(embed_dim=2), 3, seed=0)
    with pytest.raises(ValueError):
        MultiTaskNet.create(SMALL, None, seed=0)


def test_full_backbone_gradcheck():
    g = build_backbone(SMALL, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(2, 16, 16, 3))
    w = np.random.default_rng(2).normal(size=(2, 8))
    assert finite_diff_check(g, x, eps=1e-6, output_weights=w, max_coords=12) <= 1e-4


def test_checkpoint_roundtrip_with_input_stats(tmp_path):
    st = MultiTaskNet.create(SMALL, 3, seed=6)
    x = _batch(6)
    st.set_input_stats(x)
    mt = st.attach_head_a(seed=2)
    mt.save(tmp_path / "mt.fmtk")
    back = MultiTaskNet.load(tmp_path / "mt.fmtk")
    assert back.config == SMALL and back.is_multitask
    assert np.array_equal(back.input_mean, mt.input_mean)
    for got, want in zip(back.forward(x), mt.forward(x)):
        assert np.array_equal(got, want)
    back.save(tmp_path / "again.fmtk")
    assert (tmp_path / "again.fmtk").read_bytes() == (tmp_path / "mt.fmtk").read_bytes()


def test_copy_is_independent():
    net = MultiTaskNet.create(SMALL, 3, seed=7)
    dup = net.copy()
    next(iter(dup.parameters().values())).data[...] += 1.0
    assert not np.array_equal(dup.state_dict()["shared.s0.proj.w"], net.state_dict()["shared.s0.proj.w"])
