import math

import numpy as np
import pytest

import oracles
from itsrn import coords as co
from itsrn import grad as G
from itsrn import upsampler as up

CFG = up.UpsamplerConfig(c_feat=5, c_up=6, hidden=7)


def make_params(cfg=CFG, seed=0, zero_bias=False):
    rng = np.random.default_rng(seed)
    vals = {k: rng.standard_normal(s) * 0.5 for k, s in up.param_shapes(cfg).items()}
    if zero_bias:
        vals = {k: (np.zeros_like(v) if k.endswith(".b") else v) for k, v in vals.items()}
    return vals


def nodes(tape, vals):
    return {k: tape.param(k, v) for k, v in vals.items()}


def feats_node(tape, c=5, h=4, w=3, seed=1):
    return tape.constant(np.random.default_rng(seed).standard_normal((c, h, w)))


def test_param_shapes_and_names():
    shapes = up.param_shapes(CFG)
    assert shapes["up.q.w"] == (6, 2) and shapes["up.k.w"] == (6, 5) and shapes["up.s.w"] == (6, 2)
    assert [shapes[f"up.phi.{i}.w"] for i in range(4)] == [(7, 6), (7, 7), (7, 7), (3, 7)]
    liif = up.param_shapes(up.UpsamplerConfig(c_feat=5, c_up=6, hidden=7, variant="liif_concat"))
    assert liif["up.phi.0.w"] == (7, 60)
    assert "up.h.0.w" in up.param_shapes(up.UpsamplerConfig(variant="itsrn_offset"))


def test_zero_offsets_zero_bias_query_is_zero():
    tape = G.Tape(record=False)
    P = nodes(tape, make_params(zero_bias=True))
    q, _, _ = up.project_qkv(np.zeros((5, 2)), np.arange(5), feats_node(tape), P)
    assert np.all(q.value == 0)


def test_shared_cell_gives_identical_k_v():
    tape = G.Tape(record=False)
    P = nodes(tape, make_params())
    off = np.array([[0.1, -0.3], [-0.4, 0.2]])
    _, k, v = up.project_qkv(off, np.array([7, 7]), feats_node(tape), P)
    np.testing.assert_array_equal(k.value[0], k.value[1])
    np.testing.assert_array_equal(v.value[0], v.value[1])


def test_gather_matches_per_query_loop():
    tape = G.Tape(record=False)
    vals = make_params()
    P = nodes(tape, vals)
    f = feats_node(tape)
    rng = np.random.default_rng(2)
    idx = rng.integers(0, 12, size=9)
    off = rng.uniform(-1, 1, size=(9, 2))
    q, k, v = up.project_qkv(off, idx, f, P)
    for n, i in enumerate(idx):
        y, x = divmod(int(i), 3)
        feat = f.value[:, y, x]
        np.testing.assert_allclose(k.value[n], vals["up.k.w"] @ feat + vals["up.k.b"], atol=1e-12)
        np.testing.assert_allclose(v.value[n], vals["up.v.w"] @ feat + vals["up.v.b"], atol=1e-12)
        np.testing.assert_allclose(q.value[n], vals["up.q.w"] @ off[n] + vals["up.q.b"], atol=1e-12)


def _qkv(seed, n=8, c=6):
    rng = np.random.default_rng(seed)
    return (rng.standard_normal((n, c)) for _ in range(3))


def test_sin_zero_preactivation_gives_zero():
    tape = G.Tape(record=False)
    q, k, v = (tape.constant(a) for a in _qkv(0))
    P = {"up.s.w": tape.constant(np.zeros((6, 2))), "up.s.b": tape.constant(np.zeros(6))}
    zero = tape.constant(np.zeros((8, 6)))
    out = up.modulate(q, zero, v, np.array([0.1, 0.2]), P, "sin")
    assert np.all(out.value == 0)


def test_sigmoid_saturates_to_v():
    tape = G.Tape(record=False)
    v = tape.constant(np.random.default_rng(3).standard_normal((4, 6)))
    P = {"up.s.w": tape.constant(np.zeros((6, 2))), "up.s.b": tape.constant(np.full(6, 20.0))}
    zero = tape.constant(np.zeros((4, 6)))
    out = up.modulate(zero, zero, v, np.array([0.1, 0.2]), P, "sigmoid").value
    assert np.all(np.abs(out - v.value) <= 1e-6 * np.abs(v.value))


def test_sin_periodicity_via_crafted_key():
    qa, ka, va = _qkv(4)
    qa = np.ones_like(qa)  # K * Q then shifts by exactly the shift applied to K
    tape = G.Tape(record=False)
    P = {"up.s.w": tape.constant(np.full((6, 2), 0.3)), "up.s.b": tape.constant(np.full(6, -0.2))}
    cell = np.array([0.25, 0.5])
    base = up.modulate(tape.constant(qa), tape.constant(ka), tape.constant(va), cell, P, "sin").value
    shifted = up.modulate(tape.constant(qa), tape.constant(ka + 2 * math.pi), tape.constant(va), cell, P,
                          "sin").value
    np.testing.assert_allclose(shifted, base, atol=1e-5)


def test_sin_path_matches_scalar_oracle():
    rng = np.random.default_rng(5)
    qa, ka, va = _qkv(5)
    ws_w, ws_b = rng.standard_normal((6, 2)), rng.standard_normal(6)
    cell = np.array([0.1, 0.3])
    tape = G.Tape(record=False)
    P = {"up.s.w": tape.constant(ws_w), "up.s.b": tape.constant(ws_b)}
    out = up.modulate(tape.constant(qa), tape.constant(ka), tape.constant(va), cell, P, "sin").value
    np.testing.assert_allclose(out, oracles.modulate_sin(qa, ka, va, cell, ws_w, ws_b), atol=1e-6)


def test_reweight_swap_changes_values_not_shapes():
    qa, ka, va = _qkv(6)
    tape = G.Tape(record=False)
    P = {"up.s.w": tape.constant(np.full((6, 2), 0.3)), "up.s.b": tape.constant(np.zeros(6))}
    outs = {fn: up.modulate(tape.constant(qa), tape.constant(ka), tape.constant(va), np.array([0.1, 0.1]),
                            P, fn).value for fn in up.REWEIGHTS}
    for fn, o in outs.items():
        assert o.shape == (8, 6) and np.all(np.isfinite(o))
    for a in up.REWEIGHTS:
        for b in up.REWEIGHTS:
            if a < b:
                assert not np.allclose(outs[a], outs[b])
    with pytest.raises(ValueError):
        up.reweight(tape.constant(qa), "relu")


def test_render_zero_input_zero_bias():
    tape = G.Tape(record=False)
    P = nodes(tape, make_params(zero_bias=True))
    assert np.all(up.render(tape.constant(np.zeros((3, 6))), P).value == 0)


def test_render_matches_loop_oracle_and_lipschitz():
    vals = make_params()
    tape = G.Tape(record=False)
    P = nodes(tape, vals)
    rng = np.random.default_rng(7)
    x = rng.standard_normal((5, 6))
    layers = [(vals[f"up.phi.{i}.w"], vals[f"up.phi.{i}.b"]) for i in range(4)]
    np.testing.assert_allclose(up.render(tape.constant(x), P).value, oracles.mlp_relu(x, layers), atol=1e-12)
    bound = np.prod([np.linalg.norm(w, 2) for w, _ in layers])
    for _ in range(20):
        d = rng.standard_normal((1, 6)) * 0.1
        diff = up.render(tape.constant(x[:1] + d), P).value - up.render(tape.constant(x[:1]), P).value
        assert np.linalg.norm(diff) <= bound * np.linalg.norm(d) + 1e-12


def test_scale_one_equals_direct_decode_at_zero_offsets():
    vals = make_params()
    tape = G.Tape(record=False)
    P = nodes(tape, vals)
    f = feats_node(tape)
    out = up.upsample(f, 4, 3, P, CFG).value
    q, k, v = up.project_qkv(np.zeros((12, 2)), np.arange(12), f, P)
    ref = up.render(up.modulate(q, k, v, np.array([0.5, 2 / 3]), P, "sin"), P).value
    np.testing.assert_allclose(out, ref.T.reshape(3, 4, 3), atol=1e-12)


def test_constant_features_give_constant_output():
    vals = make_params()
    tape = G.Tape(record=False)
    f = tape.constant(np.broadcast_to(np.arange(5.0)[:, None, None], (5, 4, 4)).copy())
    # scale 1: every offset is zero
    out = up.upsample(f, 4, 4, nodes(tape, vals), CFG).value
    np.testing.assert_allclose(out, out[:, :1, :1] * np.ones((1, 4, 4)), atol=1e-12)
    # any scale once the query path ignores position
    vals["up.q.w"] = np.zeros_like(vals["up.q.w"])
    tape = G.Tape(record=False)
    f = tape.constant(f.value)
    out = up.upsample(f, 9, 11, nodes(tape, vals), CFG).value
    np.testing.assert_allclose(out, out[:, :1, :1] * np.ones((1, 9, 11)), atol=1e-12)


def test_locality_on_8_to_17():
    vals = make_params()
    tape = G.Tape(record=False)
    P = nodes(tape, vals)
    base = np.random.default_rng(8).standard_normal((5, 8, 8))
    ens = co.ensemble_weights(8, 8, 17, 17)
    for (y, x) in [(0, 0), (3, 4), (7, 2)]:
        pert = base.copy()
        pert[:, y, x] += 1.0
        a = up.upsample(tape.constant(base), 17, 17, P, CFG).value
        b = up.upsample(tape.constant(pert), 17, 17, P, CFG).value
        changed = np.any(a != b, axis=0)
        touches = np.any((ens.rows == y) & (ens.cols == x) & (ens.weights > 0), axis=0)
        assert np.all(touches[changed])
        assert changed.any()


def test_variants_shapes_and_reductions():
    shapes = set()
    for variant in up.VARIANTS:
        tape = G.Tape(record=False)
        f = feats_node(tape)
        cfg = up.UpsamplerConfig(c_feat=5, c_up=6, hidden=7, variant=variant)
        P = nodes(tape, make_params(cfg))
        fn = up.upsample if variant == "modulation" else up.upsample_variant
        shapes.add(fn(f, 9, 7, P, cfg).shape)
    assert shapes == {(3, 9, 7)}
    with pytest.raises(ValueError):
        up.upsample_variant(f, 9, 7, nodes(tape, make_params()), CFG)


def test_bilinear_only_at_scale_one_renders_v():
    cfg = up.UpsamplerConfig(c_feat=5, c_up=6, hidden=7, variant="bilinear_only")
    vals = make_params(cfg)
    tape = G.Tape(record=False)
    P = nodes(tape, vals)
    f = feats_node(tape)
    out = up.upsample_variant(f, 4, 3, P, cfg).value
    v = up.lr_tokens(f).value @ vals["up.v.w"].T + vals["up.v.b"]
    np.testing.assert_allclose(out, up.render(tape.constant(v), P).value.T.reshape(3, 4, 3), atol=1e-12)


def test_liif_concat_without_coordinate_path_renders_unfolded_v():
    cfg = up.UpsamplerConfig(c_feat=5, c_up=6, hidden=7, variant="liif_concat")
    vals = make_params(cfg)
    vals["up.q.w"] = np.zeros_like(vals["up.q.w"])
    vals["up.q.b"] = np.zeros_like(vals["up.q.b"])
    tape = G.Tape(record=False)
    P = nodes(tape, vals)
    f = feats_node(tape)
    out = up.upsample_variant(f, 4, 3, P, cfg).value
    v = tape.constant(up.lr_tokens(f).value @ vals["up.v.w"].T + vals["up.v.b"])
    unfolded = up.unfold3x3(v, 4, 3).value
    phi_in = np.concatenate([np.zeros((12, 6)), unfolded], axis=1)
    np.testing.assert_allclose(out, up.render(tape.constant(phi_in), P).value.T.reshape(3, 4, 3), atol=1e-12)


def test_unfold_zero_pads_borders():
    tape = G.Tape(record=False)
    tok = tape.constant(np.arange(1.0, 7.0).reshape(6, 1))  # 2x3 grid
    u = up.unfold3x3(tok, 2, 3).value
    np.testing.assert_array_equal(u[0], [0, 0, 0, 0, 1, 2, 0, 4, 5])


def test_chunked_inference_matches_single_pass(monkeypatch):
    vals = make_params()
    tape = G.Tape(record=False)
    P = nodes(tape, vals)
    f = feats_node(tape)
    full = up.upsample(f, 13, 11, P, CFG).value
    monkeypatch.setattr(up, "CHUNK", 17)
    np.testing.assert_array_equal(up.upsample(f, 13, 11, P, CFG).value, full)
