"""Finite-difference audit of every differentiable operation and the full network.

Each check wraps one op (or the whole velocity field) into a scalar function
of a parameter dict and compares reverse-mode gradients against central
finite differences. The full-network check runs at a reduced width with a
deterministic subsample of components per tensor; everything else is checked
exhaustively.
"""

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .config import ModelConfig
from .embodiment import FUNCTION_NAMES, ROTATION_NAMES, make_spec
from .model import init_params, predict_velocity
from .obs_tokenizer import make_observation, tokenize

FULL_MODEL_CFG = ModelConfig(d_feat=32, n_layers=2, n_heads=4, mlp_ratio=2,
                             T=8, T_o=2, M=4, K=4, N=24, L_lang=4, V_lang=32,
                             point_hidden=6, tau_dim=8, max_joints=6)


def _proj(rng, shape):
    return rng.normal(size=shape)


def _scalarize(x, proj):
    return ad.sum_all(ad.mul_const(x, proj))


def op_checks(seed: int = 0):
    """(name, f, params) triples covering every differentiable op."""
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(3, 4))
    b = rng.normal(size=(3, 4))
    w = rng.normal(size=(4, 5))
    bias = rng.normal(size=5)
    gain = rng.normal(size=4) * 0.1 + 1.0
    table = rng.normal(size=(6, 4))
    ids = rng.integers(0, 6, size=(2, 3))
    ridx = np.stack([rng.permutation(3), rng.permutation(3)])
    q = rng.normal(size=(2, 2, 3, 4))
    mask = np.ones((2, 1, 3, 3), dtype=bool)
    mask[:, :, 0, 1:] = False
    p34 = _proj(rng, (3, 4))
    p35 = _proj(rng, (3, 5))
    p38 = _proj(rng, (3, 8))
    p43 = _proj(rng, (4, 3))
    p64 = _proj(rng, (2, 3, 4))
    pattn = _proj(rng, (2, 2, 3, 4))

    checks = [
        ("add", lambda p: _scalarize(ad.add(p["a"], p["b"]), p34),
         {"a": a, "b": b}),
        ("sub", lambda p: _scalarize(ad.sub(p["a"], p["b"]), p34),
         {"a": a, "b": b}),
        ("mul", lambda p: _scalarize(ad.mul(p["a"], p["b"]), p34),
         {"a": a, "b": b}),
        ("neg", lambda p: _scalarize(ad.neg(p["a"]), p34), {"a": a}),
        ("scale", lambda p: _scalarize(ad.scale(p["a"], -1.7), p34), {"a": a}),
        ("shift", lambda p: _scalarize(ad.shift(p["a"], 0.3), p34), {"a": a}),
        ("add_const", lambda p: _scalarize(ad.add_const(p["a"], b), p34),
         {"a": a}),
        ("mul_const", lambda p: _scalarize(ad.mul_const(p["a"], b), p34),
         {"a": a}),
        ("matmul", lambda p: _scalarize(ad.matmul(p["a"], p["w"]), p35),
         {"a": a, "w": w}),
        ("linear", lambda p: _scalarize(ad.linear(p["a"], p["w"], p["b"]), p35),
         {"a": a, "w": w, "b": bias}),
        ("gelu", lambda p: _scalarize(ad.gelu(p["a"]), p34), {"a": a}),
        ("layer_norm", lambda p: _scalarize(ad.layer_norm(p["a"]), p34),
         {"a": a}),
        ("layer_norm_affine",
         lambda p: _scalarize(ad.layer_norm(p["a"], p["g"], p["b"]), p34),
         {"a": a, "g": gain, "b": bias[:4]}),
        ("softmax", lambda p: _scalarize(ad.softmax(p["a"]), p34), {"a": a}),
        ("masked_attention",
         lambda p: _scalarize(ad.masked_attention(p["q"], p["k"], p["v"], mask),
                              pattn),
         {"q": q, "k": q[::-1].copy(), "v": q * 0.5}),
        ("reshape", lambda p: _scalarize(ad.reshape(p["a"], (4, 3)), p43),
         {"a": a}),
        ("transpose",
         lambda p: _scalarize(ad.transpose(p["t"], (1, 0, 2)), p64),
         {"t": rng.normal(size=(3, 2, 4))}),
        ("transpose_last",
         lambda p: _scalarize(ad.transpose_last(p["a"]), p43), {"a": a}),
        ("concat",
         lambda p: _scalarize(ad.concat([p["a"], p["b"]], axis=1), p38),
         {"a": a, "b": b}),
        ("narrow", lambda p: _scalarize(ad.narrow(p["a"], 1, 1, 2),
                                        p34[:, :2]), {"a": a}),
        ("embedding_lookup",
         lambda p: _scalarize(ad.embedding_lookup(p["tbl"], ids), p64),
         {"tbl": table}),
        ("take_rows",
         lambda p: _scalarize(ad.take_rows(p["x"], ridx), p64),
         {"x": rng.normal(size=(2, 3, 4))}),
        ("max_reduce", lambda p: _scalarize(ad.max_reduce(p["a"], 0), p34[0]),
         {"a": a}),
        ("mean_reduce", lambda p: _scalarize(ad.mean_reduce(p["a"], 0), p34[0]),
         {"a": a}),
        ("sum_all", lambda p: ad.sum_all(p["a"]), {"a": a}),
        ("mean_all", lambda p: ad.mean_all(p["a"]), {"a": a}),
    ]
    return checks


def randomize_zero_params(params: dict, rng: np.random.Generator,
                          std: float = 0.02) -> dict:
    """Replace all-zero init tensors with small Gaussians.

    Fresh models zero their gates, heads and modulation weights, which makes
    the network exactly identity-like and leaves most finite-difference
    probes vacuously zero; gradient audits need a generic point instead.
    """
    out = {}
    for name, t in params.items():
        if np.all(t.data == 0.0):
            out[name] = Tensor(rng.normal(0.0, std, t.data.shape),
                               requires_grad=True)
        else:
            out[name] = t
    return out


def full_model_check(seed: int = 0, max_components: int = 8,
                     tol: float = 1e-4):
    """Gradient-check the whole velocity field end to end.

    Covers the observation tokenizer, action compression, codebook, flow-time
    embedding, every transformer block, and the output head at a 2-layer,
    d_feat=32 configuration with a 4-joint embodiment and T=8.
    """
    cfg = FULL_MODEL_CFG
    rng = np.random.default_rng(seed)
    spec = make_spec(0, "probe", [
        (FUNCTION_NAMES.index("MCP"), ROTATION_NAMES.index("FE")),
        (FUNCTION_NAMES.index("DIP"), ROTATION_NAMES.index("FE")),
        (FUNCTION_NAMES.index("WRIST"), ROTATION_NAMES.index("AA")),
        (FUNCTION_NAMES.index("ARM"), ROTATION_NAMES.index("PRISM")),
    ])
    frames = [rng.normal(size=(cfg.N, 3)) for _ in range(cfg.T_o)]
    obs = make_observation(frames, "reach the target", cfg)
    chunk_tau = rng.normal(size=(spec.d_a, cfg.T))
    tau = 0.37
    proj = rng.normal(size=(spec.d_a, cfg.T))

    params = init_params(cfg, np.random.Generator(np.random.Philox(key=[seed, 0])))
    params = randomize_zero_params(params, rng)

    def f(p):
        tokens = tokenize(obs, p, cfg)
        out = predict_velocity(chunk_tau, tau, tokens, spec, p, cfg)
        return _scalarize(out, proj)

    return grad_check(f, {name: t.data for name, t in params.items()},
                      tol=tol, max_components=max_components, seed=seed)


def gradient_suite(seed: int = 0, tol: float = 1e-4):
    """Run all op checks plus the full-model check; returns (records, passed).

    records: list of (name, GradCheckReport) in execution order.
    """
    records = []
    for name, f, arrays in op_checks(seed):
        records.append((name, grad_check(f, arrays, tol=tol, seed=seed)))
    records.append(("full_model", full_model_check(seed=seed, tol=tol)))
    passed = all(r.passed for _, r in records)
    return records, passed
