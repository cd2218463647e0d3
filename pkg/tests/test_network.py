import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from oracles import nonlocal_double_loop, random_nonlocal_params
from structnorm.network import (
    NetworkConfig, NonLocalBlock, backbone_forward, classify, init_parameters, load_checkpoint,
    nonlocal_block_forward, save_checkpoint,
)


@settings(max_examples=20, deadline=None)
@given(st.sampled_from([2, 4]), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(0, 10 ** 6))
def test_nonlocal_matches_double_loop(c, d, h, w, seed):
    x = torch.randn(1, c, d, h, w, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    params = random_nonlocal_params(c, seed=seed + 1)
    got = nonlocal_block_forward(x, params)[0].numpy()
    np.testing.assert_allclose(got, nonlocal_double_loop(x[0], params), rtol=1e-6, atol=1e-9)


def test_nonlocal_zero_sigma_is_exact_identity():
    x = torch.randn(2, 4, 2, 3, 3)
    params = random_nonlocal_params(4, seed=3, dtype=torch.float32, zero_sigma=True)
    assert torch.equal(nonlocal_block_forward(x, params), x)


def test_nonlocal_constant_input_gives_constant_aggregate():
    x = torch.ones(1, 4, 2, 2, 2, dtype=torch.float64) * torch.arange(1.0, 5.0, dtype=torch.float64).view(1, 4, 1, 1, 1)
    params = random_nonlocal_params(4, seed=5)
    z = nonlocal_block_forward(x, params).reshape(4, -1)
    assert torch.allclose(z, z[:, :1].expand_as(z), rtol=0, atol=1e-12)


def test_oracle_sum_is_order_free():
    g = torch.Generator().manual_seed(0)
    x = torch.randn(4, 2, 2, 2, generator=g, dtype=torch.float64)
    params = random_nonlocal_params(4, seed=9)
    shuffled = list(np.random.default_rng(0).permutation(8))
    np.testing.assert_allclose(nonlocal_double_loop(x, params), nonlocal_double_loop(x, params, shuffled),
                               rtol=1e-12)


def test_nonlocal_block_gradcheck():
    block = NonLocalBlock(4).double()
    with torch.no_grad():
        for p in block.parameters():
            p.copy_(torch.randn_like(p))
    x = torch.randn(1, 4, 2, 2, 2, dtype=torch.float64, requires_grad=True)
    assert torch.autograd.gradcheck(lambda v: block(v), (x,), eps=1e-6, atol=1e-6)


def test_fresh_network_blocks_are_identity():
    net = init_parameters(NetworkConfig.toy(5), seed=0)
    blocks = net.nonlocal_blocks()
    assert len(blocks) == 2
    for b in blocks:
        x = torch.randn(1, b.sigma.out_channels, 2, 3, 3)
        assert torch.equal(b(x), x)


@pytest.mark.parametrize("size", [96, 128])
def test_feature_shape_independent_of_input_size(size):
    net = init_parameters(NetworkConfig.toy(3), seed=0).eval()
    with torch.no_grad():
        f = backbone_forward(torch.rand(2, 12, size, size), net)
    assert f.shape == (256,) and torch.isfinite(f).all()


def test_zero_input_gives_feature_bias_path():
    net = init_parameters(NetworkConfig.toy(3), seed=0).eval()
    with torch.no_grad():
        a = backbone_forward(torch.zeros(2, 12, 32, 32), net)
        b = backbone_forward(torch.zeros(2, 12, 32, 32), net)
    # fresh net: zero input, zero conv/BN biases and ReLU keep everything at zero
    assert torch.equal(a, b) and torch.equal(a, net.feature.bias)


def test_input_below_minimum_rejected():
    net = init_parameters(NetworkConfig.toy(3), seed=0)
    with pytest.raises(ValueError, match="minimum"):
        net(torch.zeros(1, 2, 12, 16, 32))


def test_classify_examples():
    w = torch.randn(5, 8)
    b = torch.randn(5)
    assert torch.equal(classify(torch.zeros(8), w, b), b)
    f = torch.randn(5)
    assert torch.allclose(classify(f, torch.eye(5), b), f + b)
    p = torch.softmax(classify(torch.randn(8), w, b), dim=0)
    assert abs(float(p.sum()) - 1.0) <= 1e-6


def test_init_is_deterministic_per_seed():
    cfg = NetworkConfig.toy(4)
    a, b, c = (init_parameters(cfg, s).state_dict() for s in (7, 7, 8))
    assert all(torch.equal(a[k], b[k]) for k in a)
    assert not all(torch.equal(a[k], c[k]) for k in a)


def test_he_variance_within_twenty_percent():
    net = init_parameters(NetworkConfig(num_classes=4, stage_block_counts=(1, 1, 1, 1), base_width=16), 0)
    checked = 0
    for name, p in net.named_parameters():
        if p.dim() < 2 or p.numel() < 1000 or name.endswith("sigma.weight"):
            continue
        expected = 2.0 / p[0].numel()
        assert abs(float(p.detach().var()) / expected - 1) < 0.2, name
        checked += 1
    assert checked > 10


@settings(max_examples=5, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_output_finite_for_large_parameters(seed):
    # batch statistics keep activations bounded; unnormalized eval-mode float32 would overflow
    net = init_parameters(NetworkConfig.toy(3), seed=1)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in net.parameters():
            p.copy_((torch.rand(p.shape, generator=g) * 2 - 1) * 10)
        out = net(torch.rand(2, 2, 8, 32, 32, generator=g))
        assert torch.isfinite(out).all()
        out64 = net.double().eval()(torch.rand(1, 2, 8, 32, 32, generator=g, dtype=torch.float64))
    assert torch.isfinite(out64).all()


def test_checkpoint_round_trip(tmp_path):
    net = init_parameters(NetworkConfig.toy(6, nonlocal_stages=(3,)), seed=2)
    save_checkpoint(net, tmp_path / "m.ckpt", ["a", "b", "c", "d", "e", "f"], {"epoch": 4})
    back, vocab, extra = load_checkpoint(tmp_path / "m.ckpt")
    assert vocab == ["a", "b", "c", "d", "e", "f"] and extra == {"epoch": 4}
    assert back.config == net.config
    sa, sb = net.state_dict(), back.state_dict()
    assert sa.keys() == sb.keys()
    assert all(sa[k].dtype == sb[k].dtype and torch.equal(sa[k], sb[k]) for k in sa)


def test_checkpoint_rejects_garbage(tmp_path):
    (tmp_path / "x").write_bytes(b"nope")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x")


def test_config_validation():
    with pytest.raises(ValueError):
        NetworkConfig(3, stage_block_counts=(1, 0, 1, 1))
    with pytest.warns(UserWarning):
        NetworkConfig(300)


def test_backbone_gradient_matches_finite_differences():
    from oracles import backbone_gradient_check
    assert backbone_gradient_check(init_parameters(NetworkConfig.toy(4), 3), seed=3) < 1e-4
