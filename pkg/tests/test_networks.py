import numpy as np
import pytest

from precipgan import networks as nw
from precipgan.autodiff import Tensor
from precipgan.networks import CriticConfig, GeneratorConfig


def zeroed(params):
    p = params.copy()
    for t in p.values():
        t.data[...] = 0.0
    return p


def test_generator_structure_and_count():
    g = nw.build_generator(GeneratorConfig(), 0)
    kernels = [n for n in g.names() if n.endswith(".kernel")]
    biases = [n for n in g.names() if n.endswith(".bias")]
    assert len(kernels) == 3 and len(biases) == 3
    assert g.count() == 1 * 64 * 81 + 64 + 64 * 32 * 25 + 32 + 32 * 1 * 25 + 1 == 57281


def test_generator_deterministic():
    a = nw.build_generator(GeneratorConfig(), 0).to_bytes()
    b = nw.build_generator(GeneratorConfig(), 0).to_bytes()
    c = nw.build_generator(GeneratorConfig(), 1).to_bytes()
    assert a == b and a != c


def test_generator_config_validation():
    with pytest.raises(ValueError):
        GeneratorConfig(scale_factor=3).validate()
    with pytest.raises(ValueError):
        GeneratorConfig(channels=[8], kernel_sizes=[9, 5]).validate()
    with pytest.raises(ValueError):
        GeneratorConfig(upsample_mode="cubic").validate()


@pytest.mark.parametrize("scale,h", [(4, 32), (8, 16)])
def test_generator_output_shape(scale, h):
    g = nw.build_generator(GeneratorConfig(scale_factor=scale, channels=[4, 2]), 0)
    y = nw.generator_forward(g, Tensor(np.zeros((1, 1, h, h))))
    assert y.shape == (1, 1, 128, 128)


def test_generator_zero_params_zero_output():
    g = zeroed(nw.build_generator(GeneratorConfig(channels=[4, 2]), 0))
    x = np.random.default_rng(0).random((2, 1, 8, 8))
    assert np.all(nw.generator_forward(g, x).data == 0.0)


def test_critic_shapes_and_determinism():
    c = nw.build_critic(CriticConfig(input_size=32, widths=[4, 8, 16]), 0)
    x = np.random.default_rng(1).random((3, 1, 32, 32))
    s = nw.critic_forward(c, x)
    assert s.shape == (3,)
    dup = np.repeat(x[:1], 3, axis=0)
    d = nw.critic_forward(c, dup).data
    assert d[0] == d[1] == d[2]
    assert nw.critic_forward(c, x).data.tobytes() == s.data.tobytes()


@pytest.mark.parametrize("b", [2, 3, 7, 32])
def test_critic_duplicates_score_identically(b):
    c = nw.build_critic(CriticConfig(input_size=32, widths=[4, 8, 16]), 2)
    x = np.repeat(np.random.default_rng(b).random((1, 1, 32, 32)), b, axis=0)
    s = nw.critic_forward(c, x).data
    assert np.all(s == s[0])


def test_critic_zero_params():
    c = zeroed(nw.build_critic(CriticConfig(input_size=16, widths=[4, 8]), 0))
    assert np.all(nw.critic_forward(c, np.ones((2, 1, 16, 16))).data == 0.0)


def test_critic_rejects_wrong_size():
    c = nw.build_critic(CriticConfig(input_size=16, widths=[4, 8]), 0)
    with pytest.raises(ValueError, match="critic expects"):
        nw.critic_forward(c, np.ones((1, 1, 32, 32)))
    g = nw.build_generator(GeneratorConfig(channels=[2, 2]), 0)
    with pytest.raises(ValueError, match="role"):
        nw.critic_forward(g, np.ones((1, 1, 16, 16)))


def test_default_critic_count():
    c = nw.build_critic(CriticConfig(), 0)
    convs = 64 * 16 + 64 + 128 * 64 * 16 + 128 + 256 * 128 * 16 + 256
    assert c.count() == convs + 256 * 16 * 16 + 1


def test_infer_clamps():
    g = nw.build_generator(GeneratorConfig(channels=[4, 2]), 0)
    out = nw.infer(g, np.random.default_rng(2).random((2, 4, 4)) * 5)
    assert out.min() >= 0.0 and out.max() <= 1.0


def test_score_batches_agree():
    c = nw.build_critic(CriticConfig(input_size=16, widths=[4, 8]), 3)
    x = np.random.default_rng(3).random((10, 16, 16))
    np.testing.assert_allclose(nw.score(c, x, batch=3), nw.score(c, x, batch=64), rtol=1e-12)


@pytest.mark.parametrize("role", ["generator", "critic"])
def test_save_load_round_trip(tmp_path, role):
    if role == "generator":
        p = nw.build_generator(GeneratorConfig(channels=[4, 2], upsample_mode="nearest"), 5)
    else:
        p = nw.build_critic(CriticConfig(input_size=16, widths=[4, 8]), 5)
    path = tmp_path / "net.bin"
    nw.save_network(p, path)
    q = nw.load_network(path, role)
    assert q.to_bytes() == p.to_bytes()
    assert q.config == p.config


def test_load_corrupt(tmp_path):
    p = nw.build_generator(GeneratorConfig(channels=[4, 2]), 0)
    path = tmp_path / "net.bin"
    nw.save_network(p, path)
    raw = path.read_bytes()
    path.write_bytes(b"XXXX" + raw[4:])
    with pytest.raises(nw.CheckpointError):
        nw.load_network(path)
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(nw.CheckpointError):
        nw.load_network(path)
    path.write_bytes(raw)
    with pytest.raises(nw.CheckpointError):
        nw.load_network(path, "critic")
