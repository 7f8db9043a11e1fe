"""Synthetic heterogeneous-embodiment benchmark.

Scenes are a target point in the unit cube plus a distractor cluster; clouds
mark the target with a small sphere of points, the distractor with a
Gaussian blob, and fill the rest with floor plane points, all under light
jitter. Experts move every joint from zero to a target angle that depends
only on the joint's (function, rotation) identity and the target position,
along a minimum-jerk profile. Gains differ per functional category, so a
policy stripped of the functional embedding provably cannot tell same-axis
joints apart — the separation the codebook ablation tests measure.

Dataset shards are a self-contained binary container (magic "SATDATA1"):
header carries the generation config, the embodiment registry manifest, and
per-(function, rotation) normalization moments; episodes follow as packed
records. Points are stored f32 (sensor-scale), chunks f64.
"""

import json
import math
import struct
import warnings
from dataclasses import dataclass

import numpy as np

from .action_tokenizer import ActionChunk
from .embodiment import (
    FUNCTION_NAMES,
    ROTATION_NAMES,
    EmbodimentSpec,
    Registry,
    make_spec,
)
from .obs_tokenizer import PointCloud

MAGIC = b"SATDATA1"
FORMAT_VERSION = 1

TARGET_POINTS = 64
DISTRACTOR_POINTS = 64
TARGET_RADIUS = 0.05
DISTRACTOR_SIGMA = 0.03
JITTER_SIGMA = 0.002
MIN_SEPARATION = 0.2
STD_CLAMP = 1e-6

# Flexion-extension gains per functional category; distinct values are what
# make the functional embedding informative.
FE_GAINS = {"CMC": 1.0, "MCP": 0.8, "PIP": 0.6, "DIP": 0.4,
            "WRIST": 0.5, "ARM": 0.3}

# (function, rotation) -> sampling weight for make_embodiment; heavily tilted
# toward flexion-extension finger joints, echoing how real hands distribute.
JOINT_WEIGHTS = (
    (("MCP", "FE"), 0.22), (("CMC", "FE"), 0.18), (("PIP", "FE"), 0.18),
    (("DIP", "FE"), 0.08), (("WRIST", "FE"), 0.06), (("ARM", "FE"), 0.04),
    (("MCP", "AA"), 0.04), (("CMC", "AA"), 0.04), (("WRIST", "AA"), 0.02),
    (("ARM", "AA"), 0.02),
    (("WRIST", "PS"), 0.04), (("ARM", "PS"), 0.03), (("CMC", "PS"), 0.01),
    (("ARM", "PRISM"), 0.04),
)

DEFAULT_INSTRUCTION = "reach the target"


class ShardError(Exception):
    pass


class BadMagicError(ShardError):
    pass


class ShardVersionError(ShardError):
    pass


class TruncatedShardError(ShardError):
    pass


# ---------------------------------------------------------------------------
# scenes and rendering


@dataclass(frozen=True)
class Scene:
    """Target point, distractor cluster center, and the episode's seed."""

    target: np.ndarray
    distractor: np.ndarray
    seed: int

    def __post_init__(self):
        target = np.asarray(self.target, dtype=np.float64)
        distractor = np.asarray(self.distractor, dtype=np.float64)
        if target.shape != (3,) or distractor.shape != (3,):
            raise ValueError("scene positions must be 3-vectors")
        if target.min() < 0.0 or target.max() > 1.0:
            raise ValueError("target must lie in the unit cube")
        if np.linalg.norm(target - distractor) < MIN_SEPARATION:
            raise ValueError(
                f"target and distractor closer than {MIN_SEPARATION}"
            )
        object.__setattr__(self, "target", target)
        object.__setattr__(self, "distractor", distractor)


def _scene_rng(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=[seed, stream]))


def make_scene(seed: int) -> Scene:
    """Deterministic scene draw; distractor rejected until separated."""
    rng = _scene_rng(seed, 0)
    target = rng.uniform(0.0, 1.0, size=3)
    while True:
        distractor = rng.uniform(0.0, 1.0, size=3)
        if np.linalg.norm(target - distractor) >= MIN_SEPARATION:
            break
    return Scene(target=target, distractor=distractor, seed=seed)


def render_scene(scene: Scene, n_points: int, frame: int = 0) -> PointCloud:
    """One cloud: 64 target-sphere points, 64 distractor points, floor fill.

    Deterministic in (scene.seed, frame); frames of one episode share the
    scene and differ only in the jitter stream.
    """
    if n_points < 128:
        raise ValueError(f"need n_points >= 128, got {n_points}")
    rng = _scene_rng(scene.seed, 1 + frame)
    # Antithetic pairs (d, -d): marginally uniform on the sphere, but the
    # pre-jitter centroid lands exactly on the target, so the centroid is a
    # guaranteed target cue rather than a statistical one.
    half = rng.normal(size=(TARGET_POINTS // 2, 3))
    half /= np.linalg.norm(half, axis=1, keepdims=True)
    dirs = np.concatenate([half, -half])
    target_pts = scene.target + TARGET_RADIUS * dirs
    distractor_pts = scene.distractor + rng.normal(
        0.0, DISTRACTOR_SIGMA, size=(DISTRACTOR_POINTS, 3))
    n_floor = n_points - TARGET_POINTS - DISTRACTOR_POINTS
    floor = np.zeros((n_floor, 3))
    floor[:, :2] = rng.uniform(0.0, 1.0, size=(n_floor, 2))
    pts = np.concatenate([target_pts, distractor_pts, floor])
    pts += rng.normal(0.0, JITTER_SIGMA, size=pts.shape)
    return PointCloud(pts)


# ---------------------------------------------------------------------------
# expert


def min_jerk(u):
    """Minimum-jerk scaling s(u) = 10u^3 - 15u^4 + 6u^5; s(0)=0, s(1)=1."""
    u = np.asarray(u, dtype=np.float64)
    # rounding can overshoot 1.0 by ~1e-15 just below u=1; pin the bound
    return np.clip(u ** 3 * (10.0 + u * (-15.0 + 6.0 * u)), 0.0, 1.0)


def target_angle(f: int, r: int, target: np.ndarray) -> float:
    """Final angle for a joint of identity (f, r) reaching toward `target`."""
    x, y, z = float(target[0]), float(target[1]), float(target[2])
    dist = math.sqrt(x * x + y * y + z * z)
    rot = ROTATION_NAMES[r]
    if rot == "FE":
        return FE_GAINS[FUNCTION_NAMES[f]] * (math.pi / 2.0) * min(dist, 1.0)
    if rot == "AA":
        return 0.5 * math.atan2(y, x)
    if rot == "PS":
        return 0.5 * math.atan2(z, math.hypot(x, y))
    return 0.3 * dist   # prismatic extension


def expert_trajectory(spec: EmbodimentSpec, scene: Scene, t: int = 16) -> ActionChunk:
    """Min-jerk ramp 0 -> target angle per joint, clipped to joint limits."""
    if t < 2:
        raise ValueError("need at least 2 timesteps")
    profile = min_jerk(np.arange(t) / (t - 1.0))
    rows = np.empty((spec.d_a, t))
    for i, joint in enumerate(spec.joints):
        theta = target_angle(joint.f, joint.r, scene.target)
        lo, hi = spec.joint_limits[i]
        rows[i] = np.clip(theta * profile, lo, hi)
    return ActionChunk(rows)


# ---------------------------------------------------------------------------
# embodiment sampling


def make_embodiment(rng: np.random.Generator, joint_range=(4, 30),
                    embodiment_id: int = 0, name: str | None = None) -> EmbodimentSpec:
    """Sample a random embodiment; joint identities follow JOINT_WEIGHTS."""
    lo, hi = joint_range
    if not 4 <= lo <= hi <= 30:
        raise ValueError(f"joint_range must sit within [4, 30], got {joint_range}")
    count = int(rng.integers(lo, hi + 1))
    weights = np.array([w for _, w in JOINT_WEIGHTS])
    picks = rng.choice(len(JOINT_WEIGHTS), size=count, p=weights / weights.sum())
    pairs = [(FUNCTION_NAMES.index(JOINT_WEIGHTS[k][0][0]),
              ROTATION_NAMES.index(JOINT_WEIGHTS[k][0][1])) for k in picks]
    return make_spec(embodiment_id, name or f"synth{embodiment_id}", pairs)


def _named_pairs(names):
    return [(FUNCTION_NAMES.index(f), ROTATION_NAMES.index(r)) for f, r in names]


def default_benchmark_specs():
    """The stock two-embodiment pair (D_a = 6 and 9) used by the CLI.

    Both hands carry several flexion joints with distinct gains, so the
    functional-blindness floor is well above zero for datasets built on them.
    """
    six = make_spec(0, "hand6", _named_pairs([
        ("CMC", "FE"), ("MCP", "FE"), ("DIP", "FE"),
        ("WRIST", "AA"), ("ARM", "PS"), ("ARM", "PRISM"),
    ]))
    nine = make_spec(1, "hand9", _named_pairs([
        ("CMC", "FE"), ("MCP", "FE"), ("PIP", "FE"), ("DIP", "FE"),
        ("WRIST", "FE"), ("ARM", "FE"), ("MCP", "AA"), ("WRIST", "PS"),
        ("ARM", "PRISM"),
    ]))
    return [six, nine]


# ---------------------------------------------------------------------------
# normalization statistics


def effective_stats_key(f: int, r: int, ablate=None) -> tuple:
    """Normalization key for a joint identity under the active ablations.

    Dropping a codebook component also drops it from the key: otherwise
    per-category statistics would leak the very information the ablation
    removes (denormalizing with (f, r) stats would re-inject the functional
    gain that zero_function hides from the network).
    """
    drop_f = bool(ablate and ablate.drop_f)
    drop_r = bool(ablate and ablate.drop_r)
    if drop_f and drop_r:
        return ()
    if drop_f:
        return (r,)
    if drop_r:
        return (f,)
    return (f, r)


def accumulate_moments(chunks_and_specs) -> dict:
    """Exact per-(f, r) count/mean/std over chunk values.

    chunks_and_specs: iterable of (chunk (D_a, T) array, EmbodimentSpec).
    """
    acc: dict = {}
    for chunk, spec in chunks_and_specs:
        values = np.asarray(chunk, dtype=np.float64)
        for i, joint in enumerate(spec.joints):
            key = (joint.f, joint.r)
            count, total, sq = acc.get(key, (0, 0.0, 0.0))
            row = values[i]
            acc[key] = (count + row.size, total + row.sum(),
                        sq + float(row @ row))
    stats = {}
    for key, (count, total, sq) in acc.items():
        mean = total / count
        var = max(sq / count - mean * mean, 0.0)
        stats[key] = (count, mean, math.sqrt(var))
    return stats


def pool_stats(stats: dict, ablate=None) -> dict:
    """Merge per-(f, r) moments into the ablation's effective keys, exactly."""
    groups: dict = {}
    for (f, r), moments in sorted(stats.items()):
        groups.setdefault(effective_stats_key(f, r, ablate), []).append(moments)
    pooled = {}
    for key, entries in groups.items():
        if len(entries) == 1:
            # singleton groups pass through untouched so un-ablated pooling
            # is the exact identity (no std -> var -> std rounding)
            pooled[key] = entries[0]
            continue
        count = sum(c for c, _, _ in entries)
        mean = sum(c * m for c, m, _ in entries) / count
        sq = sum(c * (s * s + m * m) for c, m, s in entries)
        var = max(sq / count - mean * mean, 0.0)
        pooled[key] = (count, mean, math.sqrt(var))
    return pooled


def _clamped_std(std: float, key) -> float:
    if std < STD_CLAMP:
        warnings.warn(
            f"normalization std for key {key} clamped to {STD_CLAMP} "
            f"(degenerate joint category)", RuntimeWarning, stacklevel=3)
        return STD_CLAMP
    return std


def normalize_chunk(chunk, spec: EmbodimentSpec, pooled: dict, ablate=None) -> np.ndarray:
    """Per-joint z-score using the pooled stats for each joint's key."""
    values = np.array(np.asarray(chunk, dtype=np.float64), copy=True)
    for i, joint in enumerate(spec.joints):
        key = effective_stats_key(joint.f, joint.r, ablate)
        _, mean, std = pooled[key]
        values[i] = (values[i] - mean) / _clamped_std(std, key)
    return values


def denormalize_chunk(chunk, spec: EmbodimentSpec, pooled: dict, ablate=None) -> np.ndarray:
    """Exact inverse of normalize_chunk (up to the same std clamping)."""
    values = np.array(np.asarray(chunk, dtype=np.float64), copy=True)
    for i, joint in enumerate(spec.joints):
        key = effective_stats_key(joint.f, joint.r, ablate)
        _, mean, std = pooled[key]
        values[i] = values[i] * _clamped_std(std, key) + mean
    return values


# ---------------------------------------------------------------------------
# dataset container


@dataclass(frozen=True)
class Demonstration:
    """One episode: observation frames plus the expert chunk (raw radians)."""

    embodiment_id: int
    instruction: str
    frames: np.ndarray       # (T_o, N, 3) float64 (stored f32)
    chunk: np.ndarray        # (D_a, T) float64


@dataclass(frozen=True)
class DatasetShard:
    header: dict
    registry: Registry
    stats: dict              # (f, r) -> (count, mean, std)
    episodes: tuple


def stats_to_json(stats: dict) -> dict:
    return {f"{f},{r}": [c, m, s] for (f, r), (c, m, s) in sorted(stats.items())}


def stats_from_json(obj: dict) -> dict:
    out = {}
    for key, (c, m, s) in obj.items():
        f, r = key.split(",")
        out[(int(f), int(r))] = (int(c), float(m), float(s))
    return out


def generate_dataset(specs, n_episodes: int, seed: int, path: str, cfg,
                     instruction: str = DEFAULT_INSTRUCTION) -> DatasetShard:
    """Write a shard of expert episodes cycling round-robin over specs.

    Episode i is fully determined by seed ^ i (scene, rendering jitter), so
    shards are reproducible and mergeable. Returns the shard as re-read from
    disk, so callers always see exactly what landed in the file.
    """
    if not specs:
        raise ValueError("need at least one embodiment spec")
    if n_episodes < 0:
        raise ValueError("n_episodes must be >= 0")
    registry = Registry(v_e=cfg.V_e)
    ids = [registry.register(spec) for spec in specs]

    episodes = []
    for i in range(n_episodes):
        spec = registry.get(ids[i % len(ids)])
        scene = make_scene(seed ^ i)
        frames = np.stack([
            render_scene(scene, cfg.N, frame=k).points for k in range(cfg.T_o)
        ])
        chunk = expert_trajectory(spec, scene, cfg.T)
        episodes.append((spec, frames, chunk.values))

    stats = accumulate_moments((chunk, spec) for spec, _, chunk in episodes)
    header = {
        "format_version": FORMAT_VERSION,
        "n_episodes": n_episodes,
        "seed": seed,
        "n_points": cfg.N,
        "T_o": cfg.T_o,
        "T": cfg.T,
        "instruction": instruction,
        "registry": registry.to_manifest(),
        "stats": stats_to_json(stats),
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for spec, frames, chunk in episodes:
            instr = instruction.encode("utf-8")
            fh.write(struct.pack("<I", spec.embodiment_id))
            fh.write(struct.pack("<I", len(instr)))
            fh.write(instr)
            fh.write(struct.pack("<BI", cfg.T_o, cfg.N))
            fh.write(np.asarray(frames, dtype="<f4", order="C").tobytes())
            d_a, t = chunk.shape
            fh.write(struct.pack("<HH", d_a, t))
            fh.write(np.asarray(chunk, dtype="<f8", order="C").tobytes())
    return read_dataset(path)


def _read_exact(fh, n: int, what: str, path: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise TruncatedShardError(f"{path}: truncated while reading {what}")
    return data


def iter_dataset(path: str):
    """Stream (header, registry, stats) once, then Demonstration episodes.

    Yields the tuple ("header", (header, registry, stats)) first, then
    ("episode", Demonstration) in stored order. read_dataset materializes.
    """
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise BadMagicError(f"{path}: bad magic {magic!r}, expected {MAGIC!r}")
        (version,) = struct.unpack("<I", _read_exact(fh, 4, "version", path))
        if version != FORMAT_VERSION:
            raise ShardVersionError(
                f"{path}: unsupported shard version {version}")
        (hlen,) = struct.unpack("<I", _read_exact(fh, 4, "header length", path))
        try:
            header = json.loads(_read_exact(fh, hlen, "header", path))
        except json.JSONDecodeError as exc:
            raise ShardError(f"{path}: unreadable header: {exc}") from exc
        registry = Registry.from_manifest(header["registry"])
        stats = stats_from_json(header["stats"])
        yield "header", (header, registry, stats)

        expected = header["n_episodes"]
        for index in range(expected):
            what = f"episode record {index}"
            emb_id, ilen = struct.unpack(
                "<II", _read_exact(fh, 8, what + " preamble", path))
            instr = _read_exact(fh, ilen, what + " instruction", path).decode("utf-8")
            t_o, n = struct.unpack("<BI", _read_exact(fh, 5, what + " dims", path))
            raw = _read_exact(fh, 4 * t_o * n * 3, what + " frames", path)
            frames = np.frombuffer(raw, dtype="<f4").astype(np.float64)
            frames = frames.reshape(t_o, n, 3)
            d_a, t = struct.unpack("<HH", _read_exact(fh, 4, what + " chunk dims", path))
            raw = _read_exact(fh, 8 * d_a * t, what + " chunk", path)
            chunk = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(d_a, t)
            yield "episode", Demonstration(embodiment_id=emb_id, instruction=instr,
                                           frames=frames, chunk=chunk)
        trailing = fh.read(1)
        if trailing:
            raise ShardError(f"{path}: trailing bytes after episode {expected - 1}")


def read_dataset(path: str) -> DatasetShard:
    """Materialize a full shard; episode count is validated against the header."""
    stream = iter_dataset(path)
    kind, (header, registry, stats) = next(stream)
    assert kind == "header"
    episodes = tuple(demo for _, demo in stream)
    return DatasetShard(header=header, registry=registry, stats=stats,
                        episodes=episodes)


# ---------------------------------------------------------------------------
# ablation floor


def indistinguishability_floor(shard: DatasetShard) -> float:
    """Best-achievable endpoint MAE for a policy blind to functional category.

    For each episode, every unordered pair of joints sharing a rotation axis
    but differing in functional gain contributes |Δθ*|/2: without the
    functional embedding the two joints present identical inputs, so no
    policy can do better than splitting the difference. Episodes and pairs
    are averaged; 0.0 if no such pairs exist.
    """
    gaps = []
    fe = ROTATION_NAMES.index("FE")
    for i, demo in enumerate(shard.episodes):
        spec = shard.registry.get(demo.embodiment_id)
        scene = make_scene(shard.header["seed"] ^ i)
        dist = min(float(np.linalg.norm(scene.target)), 1.0)
        fe_joints = [j for j in spec.joints if j.r == fe]
        for a in range(len(fe_joints)):
            for b in range(a + 1, len(fe_joints)):
                ga = FE_GAINS[FUNCTION_NAMES[fe_joints[a].f]]
                gb = FE_GAINS[FUNCTION_NAMES[fe_joints[b].f]]
                if ga != gb:
                    gaps.append(0.5 * abs(ga - gb) * (math.pi / 2.0) * dist)
    return float(np.mean(gaps)) if gaps else 0.0
