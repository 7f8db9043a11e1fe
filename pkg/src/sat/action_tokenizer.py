"""Action tokenizer: a (D_a, T) chunk of joint trajectories becomes D_a tokens.

Each row (one joint's whole future trajectory) is compressed from T values
to d_feat by a shared two-layer MLP, then tagged by adding that joint's
codebook embedding. Weight sharing means two identical trajectories produce
identical compressed rows; only the codebook separates them, which is the
mechanism the codebook ablations remove.

The temporal-centric variant is the conventional layout kept for
comparison: T tokens of one timestep each, joint axis zero-padded to a
fixed width, plus a learned per-timestep position table.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .embodiment import CodebookTables, EmbodimentSpec, codebook_embed


@dataclass(frozen=True)
class ActionChunk:
    """(D_a, T) joint trajectories; row i is the full horizon of joint i."""

    values: np.ndarray

    def __post_init__(self):
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 2:
            raise ValueError(f"expected (D_a, T) chunk, got {vals.shape}")
        if not np.isfinite(vals).all():
            raise ValueError("chunk contains non-finite values")
        object.__setattr__(self, "values", vals)

    @property
    def d_a(self) -> int:
        return self.values.shape[0]

    @property
    def horizon(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class NoisyChunkState:
    """A point on the probability path: interpolated chunk plus its flow time."""

    values: np.ndarray
    tau: float

    def __post_init__(self):
        object.__setattr__(self, "values", ActionChunk(self.values).values)
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau={self.tau} outside [0, 1]")


def init_action_params(cfg, rng: np.random.Generator, std: float = 0.02) -> dict:
    """Fresh compression parameters for the configured tokenizer variant."""
    params = {}

    def w(name, shape):
        params[name] = Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)

    def b(name, size):
        params[name] = Tensor(np.zeros(size), requires_grad=True)

    hidden = 4 * cfg.d_feat
    if cfg.temporal_centric:
        w("act.temp.w1", (cfg.max_joints, hidden)); b("act.temp.b1", hidden)
        w("act.temp.w2", (hidden, cfg.d_feat)); b("act.temp.b2", cfg.d_feat)
        w("act.temp.pos", (cfg.T, cfg.d_feat))
    else:
        w("act.comp.w1", (cfg.T, hidden)); b("act.comp.b1", hidden)
        w("act.comp.w2", (hidden, cfg.d_feat)); b("act.comp.b2", cfg.d_feat)
    return params


def compress_trajectories(chunk, params: dict, prefix: str = "act.comp"):
    """Row-wise shared MLP T -> 4*d_feat -> d_feat over (..., D_a, T)."""
    if not isinstance(chunk, Tensor):
        chunk = Tensor(np.asarray(chunk, dtype=np.float64))
    w1 = params[f"{prefix}.w1"]
    if chunk.shape[-1] != w1.shape[0]:
        raise ValueError(
            f"chunk horizon {chunk.shape[-1]} does not match configured T={w1.shape[0]}"
        )
    h = ad.gelu(ad.linear(chunk, w1, params[f"{prefix}.b1"]))
    return ad.linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def _tables_from(params: dict) -> CodebookTables:
    return CodebookTables(table_e=params["code.table_e"],
                          table_f=params["code.table_f"],
                          table_r=params["code.table_r"])


def build_action_tokens(chunk, spec: EmbodimentSpec, params: dict,
                        drop_e: bool = False, drop_f: bool = False,
                        drop_r: bool = False):
    """compress_trajectories(chunk) + codebook rows for spec: (D_a, d_feat)."""
    if not isinstance(chunk, Tensor):
        chunk = Tensor(np.asarray(chunk, dtype=np.float64))
    if chunk.ndim != 2 or chunk.shape[0] != spec.d_a:
        raise ValueError(
            f"chunk rows {chunk.shape} do not match {spec.name!r} D_a={spec.d_a}"
        )
    tok = compress_trajectories(chunk, params)
    code = codebook_embed(spec, _tables_from(params),
                          zero_e=drop_e, zero_f=drop_f, zero_r=drop_r)
    return ad.add(tok, code)


def batch_action_tokens(chunks, specs, params: dict, cfg, ablate=None):
    """Padded-batch version: (B, D_max, T) chunks for per-sample embodiments.

    Pad rows (row index >= spec.d_a) may hold anything; their token rows are
    forced to exact zero so downstream masking sees inert content. Returns
    (tokens Tensor (B, D_max, d_feat), act_valid bool (B, D_max)).
    """
    if not isinstance(chunks, Tensor):
        chunks = Tensor(np.asarray(chunks, dtype=np.float64))
    b, d_max, _ = chunks.shape
    if len(specs) != b:
        raise ValueError("one embodiment spec per batch row required")
    valid = np.zeros((b, d_max), dtype=bool)
    ids_e = np.zeros((b, d_max), dtype=np.int64)
    ids_f = np.zeros((b, d_max), dtype=np.int64)
    ids_r = np.zeros((b, d_max), dtype=np.int64)
    for i, spec in enumerate(specs):
        if spec.d_a > d_max:
            raise ValueError(f"{spec.name!r} D_a={spec.d_a} exceeds padded width {d_max}")
        valid[i, : spec.d_a] = True
        ids_e[i, : spec.d_a] = spec.embodiment_id
        ids_f[i, : spec.d_a] = spec.f_codes()
        ids_r[i, : spec.d_a] = spec.r_codes()

    tok = compress_trajectories(chunks, params)
    mask = valid[:, :, None].astype(np.float64)
    drop = (bool(ablate and ablate.drop_e), bool(ablate and ablate.drop_f),
            bool(ablate and ablate.drop_r))
    for dropped, table_name, ids in zip(
            drop, ("code.table_e", "code.table_f", "code.table_r"),
            (ids_e, ids_f, ids_r)):
        if dropped:
            continue
        rows = ad.embedding_lookup(params[table_name], ids)
        tok = ad.add(tok, rows)
    # pad rows carry MLP bias + codebook id-0 rows; blank them
    tok = ad.mul_const(tok, mask)
    return tok, valid


def temporal_action_tokens(chunk, params: dict, cfg):
    """Temporal-centric variant: (..., D_a, T) chunk -> (..., T, d_feat) tokens.

    One token per timestep: the joint axis is zero-padded to cfg.max_joints,
    pushed through a shared MLP, and a learned position row is added per
    timestep (without it, timesteps of constant trajectories would collapse).
    """
    if not isinstance(chunk, Tensor):
        chunk = Tensor(np.asarray(chunk, dtype=np.float64))
    d_a, t = chunk.shape[-2], chunk.shape[-1]
    if t != cfg.T:
        raise ValueError(f"chunk horizon {t} does not match configured T={cfg.T}")
    if d_a > cfg.max_joints:
        raise ValueError(f"D_a={d_a} exceeds max_joints={cfg.max_joints}")
    cols = ad.transpose_last(chunk)                       # (..., T, D_a)
    if d_a < cfg.max_joints:
        pad_shape = chunk.shape[:-2] + (cfg.T, cfg.max_joints - d_a)
        cols = ad.concat([cols, Tensor(np.zeros(pad_shape))], axis=-1)
    h = ad.gelu(ad.linear(cols, params["act.temp.w1"], params["act.temp.b1"]))
    tok = ad.linear(h, params["act.temp.w2"], params["act.temp.b2"])
    return ad.add(tok, params["act.temp.pos"])
