import copy

import numpy as np
import pytest
import torch

from selfe.backbone import (
    ConditionToken,
    EmaShadow,
    NetSpec,
    build_network,
    ema_update,
    fake_rows,
    load_checkpoint,
    null_rows,
    save_checkpoint,
    sinusoid,
)

SPEC = NetSpec(width=32, depth=3, cond_dim=8)


def randomized(seed=0, dtype=torch.float64):
    net = build_network(SPEC, seed=seed, dtype=dtype)
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in net.head.parameters():
            p.copy_(0.5 * torch.randn(p.shape, generator=g, dtype=dtype))
    return net


def probes(n=16, seed=0):
    rng = np.random.default_rng(seed)
    x = torch.as_tensor(rng.normal(size=(n, 2)))
    t = torch.as_tensor(rng.uniform(0, 1, n))
    s = t * torch.as_tensor(rng.uniform(0, 1, n))
    c = torch.as_tensor(rng.integers(0, 4, n))
    return x, t, s, c


def test_condition_rows():
    assert ConditionToken("class", 2).row(4) == 2
    assert ConditionToken("null").row(4) == 4
    assert ConditionToken("fake", 0).row(4) == 5
    assert ConditionToken("fake", 3).row(4) == 8
    with pytest.raises(ValueError):
        ConditionToken("class", 4).row(4)
    rows = torch.tensor([0, 3, 4])
    assert fake_rows(rows, 4).tolist() == [5, 8, 4]
    assert null_rows(rows, 4).tolist() == [4, 4, 4]


def test_time_embed_zero_gap_constant():
    net = randomized()
    t = torch.linspace(0.05, 1.0, 7, dtype=torch.float64)
    const = net.mlp_s(sinusoid(torch.zeros(1, dtype=torch.float64), SPEC.n_freqs, SPEC.max_freq))
    diff = net.time_embed(t, t) - net.mlp_t(sinusoid(t, SPEC.n_freqs, SPEC.max_freq))
    torch.testing.assert_close(diff, const.expand_as(diff), rtol=0, atol=1e-12)


def test_time_embed_shape_and_gap_additivity():
    net = randomized()
    t = torch.tensor([0.3, 0.6, 0.9], dtype=torch.float64)
    assert net.time_embed(t, t * 0.5).shape == (3, SPEC.width)
    g1, g2 = 0.1, 0.25
    d = net.time_embed(t, t - g1) - net.time_embed(t, t - g2)
    torch.testing.assert_close(d, d[:1].expand_as(d), rtol=0, atol=1e-12)


def test_zero_init_head_gives_zero_velocity():
    net = build_network(SPEC, seed=0)
    x, t, s, c = probes()
    v = net.predict_velocity(x.float(), t.float(), s.float(), c)
    assert torch.count_nonzero(v) == 0
    torch.testing.assert_close(net.predict_x0(x.float(), t.float(), s.float(), c), x.float())


def test_forward_deterministic_and_stateless():
    net = randomized()
    twin = copy.deepcopy(net)
    x, t, s, c = probes()
    a = net.predict_velocity(x, t, s, c)
    torch.manual_seed(123)
    b = net.predict_velocity(x, t, s, c)
    assert torch.equal(a, b)
    assert torch.equal(a, twin.predict_velocity(x, t, s, c))


def test_condition_changes_output():
    net = randomized()
    x, t, s, _ = probes()
    a = net.predict_velocity(x, t, s, 0)
    b = net.predict_velocity(x, t, s, 1)
    assert (a - b).abs().max() > 1e-6


def test_predict_x0_identities():
    net = randomized()
    x, t, s, c = probes()
    torch.testing.assert_close(net.predict_x0(x, 0.0, 0.0, c), x, rtol=0, atol=0)
    torch.testing.assert_close(net.predict_x0(x, t, s, c), x - t[:, None] * net.predict_velocity(x, t, s, c),
                               rtol=0, atol=1e-14)


def test_predict_x0_at_t1_recovers_mean():
    # With V = x - m at t = 1 the clean head returns m.
    m = torch.tensor([0.3, -1.2], dtype=torch.float64)
    net = build_network(NetSpec(width=8, depth=1, cond_dim=2), dtype=torch.float64)

    class Fixed(type(net)):
        def predict_velocity(self, x, t, s, cond):
            return x - m

    net.__class__ = Fixed
    x = torch.randn(5, 2, dtype=torch.float64)
    torch.testing.assert_close(net.predict_x0(x, 1.0, 0.0, 0), m.expand(5, 2), rtol=0, atol=1e-15)


def test_nan_input_rejected():
    net = randomized()
    with pytest.raises(ValueError):
        net.predict_velocity(torch.full((2, 2), float("nan"), dtype=torch.float64), 0.5, 0.5, 0)


def test_ema_decay_cases():
    net = randomized()
    for decay, expect in ((1.0, "shadow"), (0.0, "net")):
        shadow = EmaShadow(randomized(seed=1), decay)
        before = [p.clone() for p in shadow.net.parameters()]
        ema_update(shadow, net)
        ref = before if expect == "shadow" else list(net.parameters())
        for p, r in zip(shadow.net.parameters(), ref):
            assert torch.equal(p, r)


def test_ema_half_decay_scalar_probe():
    net = randomized()
    shadow = EmaShadow(net, 0.5)
    with torch.no_grad():
        for p in shadow.net.parameters():
            p.zero_()
        for p in net.parameters():
            p.fill_(2.0)
    ema_update(shadow, net)
    for p in shadow.net.parameters():
        assert torch.all(p == 1.0)


def test_ema_shape_mismatch():
    shadow = EmaShadow(randomized(), 0.9)
    with pytest.raises(ValueError):
        ema_update(shadow, build_network(NetSpec(width=16), dtype=torch.float64))
    with pytest.raises(ValueError):
        EmaShadow(randomized(), 1.5)


def test_build_network_seeded_and_isolated():
    torch.manual_seed(0)
    state = torch.random.get_rng_state()
    a = build_network(SPEC, seed=7)
    assert torch.equal(state, torch.random.get_rng_state())
    b = build_network(SPEC, seed=7)
    for p, q in zip(a.parameters(), b.parameters()):
        assert torch.equal(p, q)


def test_checkpoint_roundtrip(tmp_path):
    net = randomized(dtype=torch.float32)
    path = tmp_path / "ckpt.bin"
    save_checkpoint(path, net, 42, ema=True)
    loaded, meta = load_checkpoint(path)
    assert meta == {"iteration": 42, "ema": True, "file": "ckpt.bin"}
    for (n1, p), (n2, q) in zip(net.state_dict().items(), loaded.state_dict().items()):
        assert n1 == n2 and torch.equal(p, q)


def test_checkpoint_rejects_garbage(tmp_path):
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        load_checkpoint(bad)
