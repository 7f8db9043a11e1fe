"""Velocity-field transformer over [observation tokens | action tokens].

DiT-style pre-norm blocks with adaptive layer norm: the flow-time embedding
produces per-block shift/scale/gate vectors, and gates are zero-initialized
so a fresh network is the identity plus a zero-initialized head — a new
model predicts exactly zero velocity everywhere.

A prefix mask keeps observation rows blind to action rows while action rows
attend to everything. There are no positional index embeddings: observation
tokens are distinguished by content (including center-coordinate terms) and
action tokens by codebook rows, so token order carries no information.

To make that order-independence hold bitwise in floating point — reductions
over a permuted axis reassociate — every forward pass sorts each sample's
tokens into a canonical order (role, then content bytes), runs the network
there, and un-permutes the outputs. Two calls whose token multisets match
therefore produce identical bits, which is what the permutation-invariance
guarantees in the tests rely on.
"""

import math

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .action_tokenizer import batch_action_tokens, init_action_params, temporal_action_tokens
from .obs_tokenizer import init_obs_params

from .config import ModelConfig  # noqa: F401  (re-export: the config type lives here conceptually)

_ROLE_OBS, _ROLE_ACT, _ROLE_PAD = 0, 1, 2


# ---------------------------------------------------------------------------
# parameters


def init_params(cfg, rng: np.random.Generator, std: float = 0.02) -> dict:
    """All learnable tensors, keyed by checkpoint name.

    Creation order is fixed and part of the determinism contract: the same
    config and generator state always produce the same initialization.
    Modulation layers and the output head start at zero (adaLN-Zero).
    """
    params = init_obs_params(cfg, rng, std)
    params.update(init_action_params(cfg, rng, std))

    def w(name, shape):
        params[name] = Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)

    def zero(name, shape):
        params[name] = Tensor(np.zeros(shape), requires_grad=True)

    if not cfg.temporal_centric:
        w("code.table_e", (cfg.V_e, cfg.d_feat))
        w("code.table_f", (cfg.V_f, cfg.d_feat))
        w("code.table_r", (cfg.V_r, cfg.d_feat))

    d = cfg.d_feat
    w("time.w1", (cfg.tau_dim, d)); zero("time.b1", (d,))
    w("time.w2", (d, d)); zero("time.b2", (d,))
    for i in range(cfg.n_layers):
        p = f"blk{i}"
        zero(f"{p}.mod.w", (d, 6 * d)); zero(f"{p}.mod.b", (6 * d,))
        w(f"{p}.qkv.w", (d, 3 * d)); zero(f"{p}.qkv.b", (3 * d,))
        w(f"{p}.proj.w", (d, d)); zero(f"{p}.proj.b", (d,))
        w(f"{p}.mlp.w1", (d, cfg.mlp_ratio * d)); zero(f"{p}.mlp.b1", (cfg.mlp_ratio * d,))
        w(f"{p}.mlp.w2", (cfg.mlp_ratio * d, d)); zero(f"{p}.mlp.b2", (d,))
    head_width = cfg.max_joints if cfg.temporal_centric else cfg.T
    zero("final.w", (d, head_width)); zero("final.b", (head_width,))
    return params


def count_params(params: dict) -> int:
    return sum(t.size for t in params.values())


def param_breakdown(params: dict) -> dict:
    """Parameter counts grouped by the first name component."""
    groups: dict = {}
    for name, t in sorted(params.items()):
        group = name.split(".", 1)[0]
        groups[group] = groups.get(group, 0) + t.size
    return groups


# ---------------------------------------------------------------------------
# conditioning


def build_prefix_mask(n_obs: int, n_act: int) -> np.ndarray:
    """Boolean (n_obs+n_act)^2 mask: obs rows see obs only; act rows see all."""
    if n_obs < 1 or n_act < 0:
        raise ValueError("need n_obs >= 1 and n_act >= 0")
    s = n_obs + n_act
    mask = np.ones((s, s), dtype=bool)
    mask[:n_obs, n_obs:] = False
    return mask


def sinusoidal_features(tau, dim: int, time_scale: float = 1000.0,
                        max_period: float = 10000.0) -> np.ndarray:
    """Classic fixed-frequency features of scaled flow time; (..., dim)."""
    tau = np.asarray(tau, dtype=np.float64)
    half = dim // 2
    freqs = np.exp(-math.log(max_period) * np.arange(half) / half)
    ang = tau[..., None] * time_scale * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def embed_flow_time(tau, params: dict):
    """tau in [0,1] (scalar or (B,)) -> Tensor (d_feat,) or (B, d_feat)."""
    arr = np.asarray(tau, dtype=np.float64)
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise ValueError(f"flow time outside [0, 1]: {arr}")
    feats = Tensor(sinusoidal_features(arr, params["time.w1"].shape[0]))
    h = ad.gelu(ad.linear(feats, params["time.w1"], params["time.b1"]))
    return ad.linear(h, params["time.w2"], params["time.b2"])


# ---------------------------------------------------------------------------
# transformer


def _modulate(x, shift, scale):
    # x: (B,S,d); shift/scale: (B,1,d)
    normed = ad.layer_norm(x)
    return ad.add(ad.mul(normed, ad.add_const(scale, np.ones(1))), shift)


def dit_block(tokens, tau_embedding, mask: np.ndarray, params: dict,
              prefix: str, n_heads: int):
    """Pre-norm DiT block with adaptive modulation from the flow-time vector."""
    x = tokens
    b, s, d = x.shape
    if tau_embedding.ndim == 1:
        tau_embedding = ad.reshape(tau_embedding, (1, tau_embedding.shape[0]))
    mod = ad.linear(tau_embedding, params[f"{prefix}.mod.w"], params[f"{prefix}.mod.b"])
    parts = [ad.reshape(ad.narrow(mod, -1, i * d, d), (mod.shape[0], 1, d))
             for i in range(6)]
    shift_a, scale_a, gate_a, shift_m, scale_m, gate_m = parts

    h = _modulate(x, shift_a, scale_a)
    qkv = ad.linear(h, params[f"{prefix}.qkv.w"], params[f"{prefix}.qkv.b"])
    hd = d // n_heads

    def split_heads(t):
        t = ad.reshape(t, (b, s, n_heads, hd))
        return ad.transpose(t, (0, 2, 1, 3))

    q = split_heads(ad.narrow(qkv, -1, 0, d))
    k = split_heads(ad.narrow(qkv, -1, d, d))
    v = split_heads(ad.narrow(qkv, -1, 2 * d, d))
    attn = ad.masked_attention(q, k, v, mask)
    attn = ad.reshape(ad.transpose(attn, (0, 2, 1, 3)), (b, s, d))
    attn = ad.linear(attn, params[f"{prefix}.proj.w"], params[f"{prefix}.proj.b"])
    x = ad.add(x, ad.mul(gate_a, attn))

    h = _modulate(x, shift_m, scale_m)
    h = ad.gelu(ad.linear(h, params[f"{prefix}.mlp.w1"], params[f"{prefix}.mlp.b1"]))
    h = ad.linear(h, params[f"{prefix}.mlp.w2"], params[f"{prefix}.mlp.b2"])
    return ad.add(x, ad.mul(gate_m, h))


# ---------------------------------------------------------------------------
# canonical token ordering


def _canonical_perms(content: np.ndarray, roles: np.ndarray) -> np.ndarray:
    """Per-sample sort by (role, column 0, column 1, ...); stable on full ties.

    content: (B, S, d) raw token values; roles: (B, S) ints. Returns (B, S)
    permutations mapping canonical position -> original index.
    """
    b, s, d = content.shape
    perms = np.empty((b, s), dtype=np.int64)
    for i in range(b):
        keys = tuple(content[i, :, c] for c in range(d - 1, -1, -1)) + (roles[i],)
        perms[i] = np.lexsort(keys)
    return perms


def _mask_from_roles(roles: np.ndarray, no_causal_mask: bool) -> np.ndarray:
    """(B, 1, S, S) boolean mask from per-token roles in canonical order."""
    r_i = roles[:, :, None]
    r_j = roles[:, None, :]
    eye = np.eye(roles.shape[1], dtype=bool)[None]
    if no_causal_mask:
        allowed = (r_i < _ROLE_PAD) & (r_j < _ROLE_PAD)
    else:
        allowed = ((r_i == _ROLE_OBS) & (r_j == _ROLE_OBS)) \
            | ((r_i == _ROLE_ACT) & (r_j < _ROLE_PAD))
    allowed = allowed | ((r_i == _ROLE_PAD) & eye)   # pad rows self-attend
    return allowed[:, None, :, :]


def velocity_field(obs_tokens, obs_valid: np.ndarray, act_tokens,
                   act_valid: np.ndarray, tau_emb, params: dict, cfg,
                   ablate=None, collect_hidden: bool = False):
    """Run the transformer; return head outputs for the action-token rows.

    obs_tokens: Tensor (B, S_o, d); act_tokens: Tensor (B, S_a, d); valid
    arrays mark real rows (False = padding, excluded from attention). Output
    is (B, S_a, head_width) in the caller's original row order. With
    collect_hidden, also returns per-layer hidden states (B, S, d) as plain
    arrays in original order ([obs | act] rows).
    """
    b, s_o, d = obs_tokens.shape
    s_a = act_tokens.shape[1]
    s = s_o + s_a
    x = ad.concat([obs_tokens, act_tokens], axis=1)
    roles = np.concatenate([
        np.where(obs_valid, _ROLE_OBS, _ROLE_PAD),
        np.where(act_valid, _ROLE_ACT, _ROLE_PAD),
    ], axis=1)

    perm = _canonical_perms(x.data, roles)
    inv = np.empty_like(perm)
    np.put_along_axis(inv, perm, np.arange(s)[None].repeat(b, 0), axis=1)
    x = ad.take_rows(x, perm)
    roles_c = np.take_along_axis(roles, perm, axis=1)
    mask = _mask_from_roles(roles_c, bool(ablate and ablate.no_causal_mask))

    if tau_emb.ndim == 1:
        tau_emb = ad.reshape(tau_emb, (1, tau_emb.shape[0]))
    hidden = []
    for i in range(cfg.n_layers):
        x = dit_block(x, tau_emb, mask, params, f"blk{i}", cfg.n_heads)
        if collect_hidden:
            hidden.append(np.take_along_axis(x.data, inv[:, :, None], axis=1))
    out = ad.linear(ad.layer_norm(x), params["final.w"], params["final.b"])
    out = ad.take_rows(out, inv)
    out = ad.narrow(out, 1, s_o, s_a)
    if collect_hidden:
        return out, hidden
    return out


# ---------------------------------------------------------------------------
# single-sample entry point


def predict_velocity(chunk_tau, tau: float, obs, spec, params: dict, cfg,
                     ablate=None):
    """ε(chunk, τ, obs) for one sample: (D_a, T) in, (D_a, T) out.

    obs is an ObsTokens bundle built from the same configuration. The chunk
    is expected in normalized units; the output is a velocity in the same
    units.
    """
    if not isinstance(chunk_tau, Tensor):
        chunk_tau = Tensor(np.asarray(chunk_tau, dtype=np.float64))
    if chunk_tau.shape != (spec.d_a, cfg.T):
        raise ValueError(
            f"chunk shape {chunk_tau.shape} does not match "
            f"(D_a={spec.d_a}, T={cfg.T})"
        )
    obs_tokens = ad.reshape(obs.tokens, (1,) + obs.tokens.shape)
    obs_valid = obs.valid[None]
    chunk_b = ad.reshape(chunk_tau, (1,) + chunk_tau.shape)
    if cfg.temporal_centric:
        act_tokens = temporal_action_tokens(chunk_b, params, cfg)
        act_valid = np.ones((1, cfg.T), dtype=bool)
    else:
        act_tokens, act_valid = batch_action_tokens(chunk_b, [spec], params, cfg,
                                                    ablate)
    tau_emb = embed_flow_time(tau, params)
    out = velocity_field(obs_tokens, obs_valid, act_tokens, act_valid,
                         tau_emb, params, cfg, ablate)
    if cfg.temporal_centric:
        out = ad.transpose_last(out)                 # (1, max_joints, T)
        out = ad.narrow(out, 1, 0, spec.d_a)
    return ad.reshape(out, (spec.d_a, cfg.T))
