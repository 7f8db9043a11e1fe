"""Observation tokenizer: point clouds and an instruction string become a
fixed-width token matrix.

Each history frame is summarized two ways: one global token from a PointNet
over the whole cloud, and M local tokens from PointNets over kNN groups
around farthest-point-sampled centers. Per-frame features are d_feat/T_o
wide and concatenated across the T_o frames, so one token row always spans
the full d_feat regardless of history length. Instruction text is hashed to
ids and embedded; pad positions carry all-zero rows and are masked out of
attention downstream.

Clouds are canonicalized (lexicographic point sort) before sampling, which
makes every downstream value a function of the point *set* rather than the
storage order — bitwise, including tie-heavy clouds. farthest_point_sample
itself operates on whatever order it is given; callers who want order
invariance sort first (prepare_observation does).
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_U64 = (1 << 64) - 1


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class PointCloud:
    """(N, 3) finite coordinates in a fixed workspace frame."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"expected (N, 3) points, got {pts.shape}")
        if pts.shape[0] < 1:
            raise ValueError("empty point cloud")
        if not np.isfinite(pts).all():
            raise ValueError("point cloud contains non-finite values")
        object.__setattr__(self, "points", pts)

    @property
    def n(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class Observation:
    """T_o point-cloud frames (oldest first) plus hashed instruction ids."""

    frames: tuple
    instruction_ids: np.ndarray

    def __post_init__(self):
        frames = tuple(
            f if isinstance(f, PointCloud) else PointCloud(f) for f in self.frames
        )
        if not frames:
            raise ValueError("observation needs at least one frame")
        n = frames[0].n
        if any(f.n != n for f in frames):
            raise ValueError("history frames disagree on point count")
        ids = np.asarray(self.instruction_ids, dtype=np.int64)
        if ids.ndim != 1 or (ids.size and ids.min() < 0):
            raise ValueError("instruction ids must be a flat list of non-negative ints")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "instruction_ids", ids)

    @property
    def n_points(self) -> int:
        return self.frames[0].n


def make_observation(frames, instruction: str, cfg) -> Observation:
    """Bundle raw (N, 3) frame arrays and instruction text into an Observation."""
    ids = hash_instruction(instruction, cfg.V_lang, cfg.L_lang)
    return Observation(frames=tuple(frames), instruction_ids=ids)


# ---------------------------------------------------------------------------
# geometry


def canonicalize_cloud(points: np.ndarray) -> np.ndarray:
    """Sort points lexicographically by (x, y, z). Idempotent."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got {pts.shape}")
    if not np.isfinite(pts).all():
        raise ValueError("point cloud contains non-finite values")
    order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))
    return np.ascontiguousarray(pts[order])


def farthest_point_sample(points: np.ndarray, m: int) -> np.ndarray:
    """Greedy max-min sampling; returns m indices into `points`.

    Seed = point farthest from the centroid. Each later pick maximizes the
    minimum squared distance to the already-selected set, over indices not
    yet selected (matters only for exact duplicates, where the max-min is
    zero). All ties resolve to the lowest index. Requires m <= N.
    """
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ValueError(f"expected (N, 3) points, got {pts.shape}")
    n = pts.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"need 1 <= m <= {n}, got m={m}")
    centroid = pts.mean(axis=0)
    d = ((pts - centroid) ** 2).sum(axis=1)
    selected = np.empty(m, dtype=np.int64)
    selected[0] = int(np.argmax(d))          # np.argmax takes the first maximum
    dist = ((pts - pts[selected[0]]) ** 2).sum(axis=1)
    dist[selected[0]] = -1.0                 # out of the running; true dists are >= 0
    for i in range(1, m):
        selected[i] = int(np.argmax(dist))
        dist = np.minimum(dist, ((pts - pts[selected[i]]) ** 2).sum(axis=1))
        dist[selected[i]] = -1.0
    return selected


def knn_group(points: np.ndarray, center_idx, k: int) -> np.ndarray:
    """Gather the k nearest neighbors of each center, center-relative.

    Returns (M, k, 3) with rows of each group ordered by ascending squared
    distance, ties by lowest point index. A center is its own neighbor at
    distance zero. Requires k <= N.
    """
    pts = np.asarray(points, dtype=np.float64)
    centers = pts[np.asarray(center_idx, dtype=np.int64)]
    n = pts.shape[0]
    if not 1 <= k <= n:
        raise ValueError(f"need 1 <= k <= {n}, got k={k}")
    diff = pts[None, :, :] - centers[:, None, :]       # (M, N, 3)
    d = (diff ** 2).sum(axis=2)
    # stable sort keeps index order within exact ties
    nearest = np.argsort(d, axis=1, kind="stable")[:, :k]
    groups = np.take_along_axis(diff, nearest[:, :, None], axis=1)
    return np.ascontiguousarray(groups)


# ---------------------------------------------------------------------------
# instruction hashing


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h = ((h ^ byte) * FNV_PRIME) & _U64
    return h


def hash_instruction(text: str, v_lang: int, l_lang: int) -> np.ndarray:
    """Whitespace-split tokens -> ids in [1, v_lang); 0 is the pad id.

    Overlong instructions are truncated to the first l_lang tokens.
    """
    if v_lang < 2:
        raise ValueError("v_lang must leave room for the pad id")
    ids = np.zeros(l_lang, dtype=np.int64)
    for i, tok in enumerate(text.split()[:l_lang]):
        ids[i] = 1 + fnv1a_64(tok.encode("utf-8")) % (v_lang - 1)
    return ids


# ---------------------------------------------------------------------------
# learned encoders (functional; parameters passed explicitly)


def encode_points(pts, w1, b1, w2, b2, mean_channels: int = 0):
    """Shared-MLP PointNet: per-point 3 -> hidden -> d2, then pool over points.

    The last `mean_channels` feature channels pool by mean, the rest by max.
    Mean channels expose centroid-like geometry linearly (max can only
    approximate an average), which matters when a group must be read out as
    "surface patch of a sphere centered off the sample point". Mean is
    order-sensitive in the last bits, so callers that need bitwise set
    invariance must present rows in a canonical order (the kNN grouping
    does). pts: Tensor or array (..., n, 3). Returns Tensor (..., d2).
    """
    if not isinstance(pts, Tensor):
        pts = Tensor(np.asarray(pts, dtype=np.float64))
    h = ad.gelu(ad.linear(pts, w1, b1))
    feats = ad.linear(h, w2, b2)
    if mean_channels == 0:
        return ad.max_reduce(feats, axis=-2)
    d2 = feats.shape[-1]
    if not 0 < mean_channels <= d2:
        raise ValueError(f"mean_channels={mean_channels} out of range for d2={d2}")
    if mean_channels == d2:
        return ad.mean_reduce(feats, axis=-2)
    hard = ad.max_reduce(ad.narrow(feats, -1, 0, d2 - mean_channels), axis=-2)
    soft = ad.mean_reduce(ad.narrow(feats, -1, d2 - mean_channels, mean_channels),
                          axis=-2)
    return ad.concat([hard, soft], axis=-1)


def center_positional_embedding(centers, w1, b1, w2, b2):
    """Two-layer MLP on raw center coordinates: (..., 3) -> (..., d2)."""
    if not isinstance(centers, Tensor):
        centers = Tensor(np.asarray(centers, dtype=np.float64))
    return ad.linear(ad.gelu(ad.linear(centers, w1, b1)), w2, b2)


def encode_local_group(group, params: dict, prefix: str = "obs.local"):
    w2 = params[f"{prefix}.w2"]
    return encode_points(group, params[f"{prefix}.w1"], params[f"{prefix}.b1"],
                         w2, params[f"{prefix}.b2"],
                         mean_channels=w2.shape[1] // 2)


def encode_global(points, params: dict):
    """Whole-cloud PointNet; max-pool only, so point duplication is a no-op."""
    return encode_points(points, params["obs.global.w1"], params["obs.global.b1"],
                         params["obs.global.w2"], params["obs.global.b2"])


def encode_instruction(ids: np.ndarray, table: Tensor):
    """Embed instruction ids; pad (id 0) rows come out exactly zero.

    ids: (..., L) ints. Returns (tokens (..., L, d), valid (..., L) bool).
    """
    ids = np.asarray(ids, dtype=np.int64)
    valid = ids != 0
    emb = ad.embedding_lookup(table, ids)
    # blank the pad rows so row 0 of the table never trains or leaks
    emb = ad.mul_const(emb, valid[..., None].astype(np.float64))
    return emb, valid


def shuffle_local_tokens(tokens: Tensor, rng: np.random.Generator, m: int) -> Tensor:
    """Permute the m local-token rows (rows 1..m); global and language rows stay.

    Training-time augmentation; differentiable (gradients follow the rows).
    """
    s = tokens.shape[0]
    if not 0 <= m <= s - 1:
        raise ValueError(f"m={m} out of range for {s} token rows")
    perm = np.arange(s, dtype=np.int64)
    perm[1:1 + m] = 1 + rng.permutation(m)
    flat = ad.reshape(tokens, (1,) + tokens.shape)
    out = ad.take_rows(flat, perm[None, :])
    return ad.reshape(out, tokens.shape)


# ---------------------------------------------------------------------------
# assembly


@dataclass(frozen=True)
class PreppedObs:
    """Geometry-side work that needs no parameters, cached per episode.

    groups:  (T_o, M, K, 3) center-relative neighborhoods
    centers: (T_o, M, 3)    raw center coordinates
    clouds:  (T_o, N, 3)    canonicalized full clouds
    lang_ids: (L_lang,)     instruction ids padded with 0
    """

    groups: np.ndarray
    centers: np.ndarray
    clouds: np.ndarray
    lang_ids: np.ndarray


@dataclass(frozen=True)
class ObsTokens:
    """Tokenized observation: (1 + M + L_lang, d_feat) rows plus validity.

    valid marks rows that participate in attention; pad language rows are
    False and their token rows are exactly zero. Layout: [global | M locals
    | L_lang language]; no row mixes features across that partition.
    """

    tokens: Tensor
    valid: np.ndarray

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[0]


def init_obs_params(cfg, rng: np.random.Generator, std: float = 0.02) -> dict:
    """Fresh tokenizer parameters (flat dict; names are checkpoint keys)."""
    d2 = cfg.d_feat // cfg.T_o
    h = cfg.point_hidden
    params = {}

    def w(name, shape):
        params[name] = Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)

    def b(name, size):
        params[name] = Tensor(np.zeros(size), requires_grad=True)

    for branch in ("obs.local", "obs.global", "obs.pos"):
        w(f"{branch}.w1", (3, h)); b(f"{branch}.b1", h)
        w(f"{branch}.w2", (h, d2)); b(f"{branch}.b2", d2)
    w("obs.lang.table", (cfg.V_lang, cfg.d_feat))
    return params


def prepare_observation(obs: Observation, cfg) -> PreppedObs:
    """Canonicalize clouds and run FPS + kNN; pad the instruction ids."""
    if len(obs.frames) != cfg.T_o:
        raise ValueError(f"expected {cfg.T_o} frames, got {len(obs.frames)}")
    n = obs.n_points
    if n < max(cfg.M, cfg.K):
        raise ValueError(f"cloud of {n} points too small for M={cfg.M}, K={cfg.K}")
    if obs.instruction_ids.size > cfg.L_lang:
        raise ValueError(
            f"instruction of {obs.instruction_ids.size} ids exceeds L_lang={cfg.L_lang}"
        )
    if obs.instruction_ids.size and obs.instruction_ids.max() >= cfg.V_lang:
        raise ValueError("instruction id out of vocabulary range")
    ids = np.zeros(cfg.L_lang, dtype=np.int64)
    ids[: obs.instruction_ids.size] = obs.instruction_ids
    groups = np.empty((cfg.T_o, cfg.M, cfg.K, 3))
    centers = np.empty((cfg.T_o, cfg.M, 3))
    clouds = np.empty((cfg.T_o, n, 3))
    for t, frame in enumerate(obs.frames):
        cloud = canonicalize_cloud(frame.points)
        idx = farthest_point_sample(cloud, cfg.M)
        groups[t] = knn_group(cloud, idx, cfg.K)
        centers[t] = cloud[idx]
        clouds[t] = cloud
    return PreppedObs(groups=groups, centers=centers, clouds=clouds, lang_ids=ids)


def tokenize_batch(prepped, params: dict, cfg, ablate=None):
    """Tokenize a batch of PreppedObs with one fused set of encoder calls.

    Returns (tokens Tensor (B, 1 + M + L_lang, d_feat), valid bool array
    (B, 1 + M + L_lang)). Ablations can blank the global token or all local
    tokens (the corresponding rows become zero and invalid).
    """
    b = len(prepped)
    t_o, m, k = cfg.T_o, cfg.M, cfg.K
    d2 = cfg.d_feat // t_o
    no_global = bool(ablate and ablate.no_global_token)
    no_local = bool(ablate and ablate.no_local_tokens)

    groups = np.stack([p.groups for p in prepped])           # (B, T_o, M, K, 3)
    centers = np.stack([p.centers for p in prepped])         # (B, T_o, M, 3)
    clouds = np.stack([p.clouds for p in prepped])           # (B, T_o, N, 3)
    ids = np.stack([p.lang_ids for p in prepped])            # (B, L)

    local = encode_local_group(groups.reshape(b * t_o * m, k, 3), params)
    pos = center_positional_embedding(
        centers.reshape(b * t_o * m, 3),
        params["obs.pos.w1"], params["obs.pos.b1"],
        params["obs.pos.w2"], params["obs.pos.b2"])
    local = ad.add(local, pos)                                # f' = f + p
    # feature-concat across history: (B, T_o, M, d2) -> (B, M, T_o*d2)
    local = ad.reshape(local, (b, t_o, m, d2))
    local = ad.transpose(local, (0, 2, 1, 3))
    local = ad.reshape(local, (b, m, t_o * d2))

    glob = encode_global(clouds.reshape(b * t_o, -1, 3), params)
    glob = ad.reshape(glob, (b, 1, t_o * d2))

    lang, lang_valid = encode_instruction(ids, params["obs.lang.table"])

    if no_global:
        glob = ad.mul_const(glob, np.zeros((b, 1, 1)))
    if no_local:
        local = ad.mul_const(local, np.zeros((b, m, 1)))

    tokens = ad.concat([glob, local, lang], axis=1)
    valid = np.concatenate([
        np.full((b, 1), not no_global),
        np.full((b, m), not no_local),
        lang_valid,
    ], axis=1)
    return tokens, valid


def tokenize_history(frames, params: dict, cfg) -> Tensor:
    """Point-cloud token rows only: (1 + M, d_feat), global first.

    Local row i aggregates the i-th FPS selection of every frame; with FPS
    run independently per frame, cross-frame correspondence is by selection
    rank, which is an approximation rather than point identity.
    """
    obs = Observation(frames=tuple(frames),
                      instruction_ids=np.zeros(0, dtype=np.int64))
    prep = prepare_observation(obs, cfg)
    tokens, _ = tokenize_batch([prep], params, cfg)
    return ad.narrow(ad.reshape(tokens, tokens.shape[1:]), 0, 0, 1 + cfg.M)


def tokenize(obs: Observation, params: dict, cfg, ablate=None,
             shuffle_rng: np.random.Generator | None = None) -> ObsTokens:
    """End-to-end single-observation tokenizer; see tokenize_batch."""
    prep = prepare_observation(obs, cfg)
    tokens, valid = tokenize_batch([prep], params, cfg, ablate)
    tokens = ad.reshape(tokens, tokens.shape[1:])
    if shuffle_rng is not None:
        tokens = shuffle_local_tokens(tokens, shuffle_rng, cfg.M)
    return ObsTokens(tokens=tokens, valid=valid[0])
