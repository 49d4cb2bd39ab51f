"""Registry of small float64 problems for finite-difference gradient checks.

Each entry maps an op name to a builder ``seed -> (params, loss_fn)`` suitable
for :func:`itsrn.grad.check_gradients`.  Losses contract the op output with a
fixed random tensor so every output element receives a well-scaled gradient.
"""

from __future__ import annotations

import numpy as np

from . import backbone as bb
from . import grad as G
from . import model as M
from . import upsampler as up


def _probe(tape, out, rng):
    w = rng.standard_normal(out.shape)
    return G.sum_(G.mul(out, w))


def _rand(rng, *shape, scale=1.0):
    return rng.standard_normal(shape) * scale


def _single(fn, make_params, inputs=None):
    """Builder for an op whose inputs and parameters are all checked."""
    def builder(seed):
        rng = np.random.default_rng(seed)
        params = make_params(rng)

        def loss_fn(tape, P):
            return _probe(tape, fn(tape, P), np.random.default_rng(seed + 1000))
        return params, loss_fn
    return builder


def _identity():
    return _single(lambda t, P: P["x"], lambda r: {"x": _rand(r, 5)})


def _linear():
    return _single(lambda t, P: G.linear(P["x"], P["w"], P["b"]),
                   lambda r: {"x": _rand(r, 4, 3), "w": _rand(r, 5, 3), "b": _rand(r, 5)})


def _matmul():
    return _single(lambda t, P: G.matmul(P["a"], P["b"]),
                   lambda r: {"a": _rand(r, 2, 3, 4), "b": _rand(r, 2, 4, 5)})


def _conv2d():
    return _single(lambda t, P: G.conv2d(P["x"], P["w"], P["b"]),
                   lambda r: {"x": _rand(r, 2, 5, 6), "w": _rand(r, 3, 2, 3, 3), "b": _rand(r, 3)})


def _depthwise():
    return _single(lambda t, P: G.depthwise_conv2d(P["x"], P["w"], P["b"]),
                   lambda r: {"x": _rand(r, 3, 6, 5), "w": _rand(r, 3, 5, 5), "b": _rand(r, 3)})


def _activation(fn):
    return _single(lambda t, P: G.activation(P["x"], fn), lambda r: {"x": _rand(r, 4, 6)})


def _softmax():
    return _single(lambda t, P: G.softmax(P["x"], axis=-1), lambda r: {"x": _rand(r, 3, 5)})


def _layer_norm():
    return _single(lambda t, P: G.layer_norm(P["x"], P["g"], P["b"]),
                   lambda r: {"x": _rand(r, 4, 6), "g": _rand(r, 6), "b": _rand(r, 6)})


def _l1():
    def builder(seed):
        rng = np.random.default_rng(seed)
        gt = rng.standard_normal((4, 3))
        return {"pred": _rand(rng, 4, 3)}, lambda tape, P: G.l1_loss(P["pred"], gt)
    return builder


def _up_params(rng, cfg, scale=0.5):
    return {k: _rand(rng, *s, scale=scale) for k, s in up.param_shapes(cfg).items()}


def _modulate(fn="sin"):
    cfg = up.UpsamplerConfig(c_feat=3, c_up=4, hidden=4, reweight=fn)

    def builder(seed):
        rng = np.random.default_rng(seed)
        params = {"q": _rand(rng, 6, 4), "k": _rand(rng, 6, 4), "v": _rand(rng, 6, 4),
                  "up.s.w": _rand(rng, 4, 2), "up.s.b": _rand(rng, 4)}
        cell = np.array([0.25, 0.5])

        def loss_fn(tape, P):
            out = up.modulate(P["q"], P["k"], P["v"], cell, P, cfg.reweight)
            return _probe(tape, out, np.random.default_rng(seed + 1000))
        return params, loss_fn
    return builder


def _render():
    cfg = up.UpsamplerConfig(c_feat=3, c_up=4, hidden=5)

    def builder(seed):
        rng = np.random.default_rng(seed)
        params = {k: v for k, v in _up_params(rng, cfg).items() if ".phi." in k}
        params["vp"] = _rand(rng, 6, 4)
        return params, lambda tape, P: _probe(tape, up.render(P["vp"], P), np.random.default_rng(seed + 1000))
    return builder


def _upsampler(variant):
    cfg = up.UpsamplerConfig(c_feat=3, c_up=4, hidden=4, variant=variant)

    def builder(seed):
        rng = np.random.default_rng(seed)
        params = _up_params(rng, cfg)
        params["feats"] = _rand(rng, 3, 3, 4)
        coords = rng.uniform(-1, 1, size=(10, 2))

        def loss_fn(tape, P):
            out = up.query_rgb(P["feats"], coords, np.array([0.2, 0.3]), P, cfg)
            return _probe(tape, out, np.random.default_rng(seed + 1000))
        return params, loss_fn
    return builder


def _bb_cfg(mode="parallel", c=4):
    return bb.BackboneConfig(stages=(bb.StageConfig(1, 1.0, c),), feat_channels=c,
                             window=2, heads=2, ca_reduction=2, branch_mode=mode)


def _bb_params(rng, shapes, scale=0.5):
    out = {}
    for k, s in shapes.items():
        out[k] = 1.0 + _rand(rng, *s, scale=0.1) if k.endswith(".g") else _rand(rng, *s, scale=scale)
    return out


def _freeze_key_bias(params, key):
    # softmax is invariant to q.b_k, so this gradient is exactly zero and FD only sees noise
    frozen = params.pop(key)
    return lambda tape, P: {**P, key: tape.constant(frozen)}


def _window_attention(shift):
    m, heads, c = 2, 2, 4

    def builder(seed):
        rng = np.random.default_rng(seed)
        params = _bb_params(rng, bb.attn_shapes("a", c, m, heads))
        params["x"] = _rand(rng, 4, 4, c)
        with_kb = _freeze_key_bias(params, "a.k.b")

        def loss_fn(tape, P):
            P = with_kb(tape, P)
            wins = bb.partition(P["x"], m, shift)
            mask = bb.shift_mask(4, 4, m, shift)
            out = bb.window_attention(wins, P, "a", heads, m, mask)
            return _probe(tape, out, np.random.default_rng(seed + 1000))
        return params, loss_fn
    return builder


def _channel_attention():
    def builder(seed):
        rng = np.random.default_rng(seed)
        params = _bb_params(rng, bb.ca_shapes("ca", 4, 2))
        params["x"] = _rand(rng, 4, 3, 3)
        return params, lambda tape, P: _probe(tape, bb.channel_attention(P["x"], P, "ca"),
                                              np.random.default_rng(seed + 1000))
    return builder


def _block(kind, mode="parallel", shift=0):
    cfg = _bb_cfg(mode)

    def builder(seed):
        rng = np.random.default_rng(seed)
        params = _bb_params(rng, bb.block_shapes("blk", kind, 4, cfg))
        params["x"] = _rand(rng, 4, 3, 5)
        with_kb = _freeze_key_bias(params, "blk.attn.k.b") if kind == "dbb" else (lambda t, P: P)

        def loss_fn(tape, P):
            P = with_kb(tape, P)
            if kind == "dbb":
                out = bb.dbb_forward(P["x"], P, "blk", cfg, shift=shift)
            else:
                out = bb.sbb_forward(P["x"], P, "blk", cfg)
            return _probe(tape, out, np.random.default_rng(seed + 1000))
        return params, loss_fn
    return builder


def desk_gradcheck_config() -> M.ModelConfig:
    """Desk model cut down to one SBB stage and one DBB stage, in float64."""
    return M.preset("desk", precision="float64",
                    backbone__stages=(bb.StageConfig(1, 0.0, 16), bb.StageConfig(1, 1.0, 16)))


def _model():
    cfg = desk_gradcheck_config()

    def builder(seed):
        rng = np.random.default_rng(seed)
        params = M.init_params(cfg, seed)
        with_kb = _freeze_key_bias(params, "bb.s1.b0.attn.k.b")
        lr = rng.uniform(0, 1, size=(3, 6, 6))
        coords = rng.uniform(-1, 1, size=(12, 2))
        gt = rng.uniform(0, 1, size=(12, 3))

        def loss_fn(tape, P):
            P = with_kb(tape, P)
            feats = bb.extract_features(tape.constant(lr), P, cfg.backbone)
            pred = up.query_rgb(feats, coords, np.array([1 / 9, 1 / 9]), P, cfg.upsampler)
            return G.l1_loss(pred, gt)
        return params, loss_fn
    return builder


def registry(include_model: bool = True) -> dict:
    reg = {
        "identity": _identity(),
        "linear": _linear(),
        "matmul": _matmul(),
        "conv2d": _conv2d(),
        "depthwise_conv2d": _depthwise(),
        "relu": _activation("relu"),
        "sigmoid": _activation("sigmoid"),
        "tanh": _activation("tanh"),
        "sin": _activation("sin"),
        "softmax": _softmax(),
        "layer_norm": _layer_norm(),
        "l1_loss": _l1(),
        "modulate_sin": _modulate("sin"),
        "modulate_tanh": _modulate("tanh"),
        "modulate_sigmoid": _modulate("sigmoid"),
        "modulate_softmax": _modulate("softmax"),
        "render_phi": _render(),
        "upsampler_modulation": _upsampler("modulation"),
        "upsampler_liif_concat": _upsampler("liif_concat"),
        "upsampler_bilinear_only": _upsampler("bilinear_only"),
        "upsampler_itsrn_offset": _upsampler("itsrn_offset"),
        "window_attention": _window_attention(0),
        "window_attention_masked": _window_attention(1),
        "channel_attention": _channel_attention(),
        "sbb": _block("sbb"),
        "dbb": _block("dbb"),
        "dbb_shifted": _block("dbb", shift=1),
        "dbb_sequential": _block("dbb", "sequential"),
        "dbb_conv_on_input": _block("dbb", "conv_on_input"),
    }
    if include_model:
        reg["desk_model"] = _model()
    return reg


def run(seeds: int = 2, include_model: bool = True, names=None) -> dict[str, G.GradReport]:
    reg = registry(include_model)
    return {name: G.check_gradients(b, seeds=seeds) for name, b in reg.items()
            if names is None or name in names}
