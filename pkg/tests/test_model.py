import struct

import numpy as np
import pytest

from itsrn import coords as co
from itsrn import model as M


@pytest.fixture(scope="module")
def desk():
    return M.Model(M.preset("desk"), seed=0)


def _img(h, w, seed=0):
    return np.random.default_rng(seed).uniform(0, 1, (3, h, w)).astype(np.float32)


def test_scale_one_keeps_shape(desk):
    assert desk(_img(9, 13), 1.0).shape == (3, 9, 13)


@pytest.mark.slow
def test_fig1_geometry(desk):
    assert desk(_img(180, 320), 2.1).shape == (3, 378, 672)


def test_forward_is_byte_deterministic(desk):
    x = _img(10, 12)
    assert desk(x, 2.7).tobytes() == desk(x, 2.7).tobytes()


@pytest.mark.parametrize("r", [0.5, 64.5, float("nan")])
def test_scale_out_of_range(desk, r):
    with pytest.raises(ValueError):
        desk(_img(4, 4), r)


def test_bad_image_shape(desk):
    with pytest.raises(ValueError):
        desk(np.zeros((4, 5, 5), np.float32), 2.0)


def test_random_shapes_contract(desk):
    rng = np.random.default_rng(1)
    for _ in range(25):
        h, w = rng.integers(1, 7, size=2)
        r = float(rng.uniform(1, 12))
        assert desk(_img(h, w), r).shape == (3, *co.output_shape(h, w, r))


def test_round_trip_is_bit_exact(desk, tmp_path):
    path = tmp_path / "m.ckpt"
    M.save(desk, path)
    back = M.load(path)
    assert back.cfg == desk.cfg
    assert back.params.keys() == desk.params.keys()
    for k, v in desk.params.items():
        assert back.params[k].dtype == v.dtype and back.params[k].tobytes() == v.tobytes()


def test_round_trip_keeps_extra_tensors(desk, tmp_path):
    path = tmp_path / "m.ckpt"
    extra = {"adam.m.x": np.arange(5.0)}
    M.save(desk, path, extra=extra, meta={"step": 3})
    _, got, meta = M.load(path, with_extra=True)
    assert got["adam.m.x"].tobytes() == extra["adam.m.x"].tobytes() and meta == {"step": 3}


def test_header_layout(desk, tmp_path):
    path = tmp_path / "m.ckpt"
    M.save(desk, path)
    raw = path.read_bytes()
    assert raw[:4] == b"ITSR"
    version, mlen = struct.unpack("<IQ", raw[4:16])
    assert version == M.FORMAT_VERSION and raw[16:16 + mlen].decode("utf-8").startswith("{")


def test_truncated_payload_names_tensor(desk, tmp_path):
    path = tmp_path / "m.ckpt"
    M.save(desk, path)
    path.write_bytes(path.read_bytes()[:-10])
    last = list(desk.params)[-1]
    with pytest.raises(M.CheckpointError, match=f"truncated.*{last}"):
        M.load(path)


def test_version_mismatch_rejected(desk, tmp_path):
    path = tmp_path / "m.ckpt"
    M.save(desk, path)
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 99)
    path.write_bytes(bytes(raw))
    with pytest.raises(M.CheckpointError, match="version 99"):
        M.load(path)


def test_corrupt_manifest_and_magic(desk, tmp_path):
    path = tmp_path / "m.ckpt"
    M.save(desk, path)
    raw = bytearray(path.read_bytes())
    raw[16] = ord("!")
    path.write_bytes(bytes(raw))
    with pytest.raises(M.CheckpointError, match="manifest"):
        M.load(path)
    path.write_bytes(b"NOPE" + bytes(raw[4:]))
    with pytest.raises(M.CheckpointError, match="magic"):
        M.load(path)


def test_desk_checkpoint_under_full_size_config(desk, tmp_path):
    path = tmp_path / "m.ckpt"
    M.save(desk, path)
    first = r"shape mismatch for 'bb.shallow.w': checkpoint \(16, 3, 3, 3\) vs config \(64, 3, 3, 3\)"
    with pytest.raises(M.CheckpointError, match=first):
        M.load(path, expect=M.preset("paper"))


def test_parameter_counts():
    assert M.Model(M.preset("desk")).n_params == 25_011
    shapes = M.param_shapes(M.preset("paper"))
    assert sum(int(np.prod(s)) for s in shapes.values()) == 12_589_091


def test_init_conventions():
    p = M.init_params(M.preset("desk"), 0)
    assert all(np.all(v == 1) for k, v in p.items() if k.endswith(".g"))
    assert np.all(p["bb.s0.b0.ln1.b"] == 0)
    assert np.abs(p["bb.s1.b0.attn.q.w"]).max() <= 1 / np.sqrt(16) + 1e-7
    assert np.abs(p["bb.s1.b0.attn.bias"]).max() <= 0.04 + 1e-7
    assert all(v.dtype == np.float32 for v in p.values())


def test_init_seeded():
    a, b = M.init_params(M.preset("desk"), 3), M.init_params(M.preset("desk"), 3)
    c = M.init_params(M.preset("desk"), 4)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert any(a[k].tobytes() != c[k].tobytes() for k in a)


def test_preset_errors():
    with pytest.raises(ValueError, match="unknown preset"):
        M.preset("huge")
    with pytest.raises(ValueError, match="precision"):
        M.preset("desk", precision="float16")


def test_config_dict_round_trip():
    cfg = M.preset("desk", upsampler__reweight="tanh", backbone__branch_mode="sequential")
    assert M.ModelConfig.from_dict(cfg.to_dict()) == cfg
