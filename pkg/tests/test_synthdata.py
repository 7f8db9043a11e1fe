import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sat.config import Ablations, ModelConfig
from sat.embodiment import FUNCTION_NAMES, ROTATION_NAMES, make_spec
from sat import synthdata as sd

CFG = ModelConfig(N=128, T=8)


def fr(fname, rname):
    return (FUNCTION_NAMES.index(fname), ROTATION_NAMES.index(rname))


# ---------------------------------------------------------------------------
# expert trajectories


def test_min_jerk_frozen_dyadic_values():
    # 10u^3 - 15u^4 + 6u^5 at dyadic u is exact in binary floating point.
    assert sd.min_jerk(0.0) == 0.0
    assert sd.min_jerk(1.0) == 1.0
    assert sd.min_jerk(0.5) == 0.5
    assert sd.min_jerk(0.25) == 0.103515625


@given(st.floats(min_value=0.0, max_value=1.0, allow_nan=False))
def test_min_jerk_monotone_and_bounded(u):
    s = float(sd.min_jerk(u))
    assert 0.0 <= s <= 1.0
    eps = 1e-9
    if u + eps <= 1.0:
        assert float(sd.min_jerk(u + eps)) >= s - 1e-12


def test_expert_unit_x_mcp_flexion_frozen():
    # Target (1,0,0): norm 1, so the MCP flexion endpoint is 0.8 * pi/2.
    spec = make_spec(0, "one", [fr("MCP", "FE")])
    scene = sd.Scene(target=np.array([1.0, 0.0, 0.0]),
                     distractor=np.array([0.0, 1.0, 0.0]), seed=0)
    chunk = sd.expert_trajectory(spec, scene, t=16)
    theta = 0.8 * math.pi / 2.0
    assert chunk.values[0, -1] == theta
    assert chunk.values[0, 0] == 0.0
    u = np.arange(16) / 15.0
    expected = theta * (10 * u**3 - 15 * u**4 + 6 * u**5)
    np.testing.assert_allclose(chunk.values[0], expected, rtol=0, atol=1e-15)


def test_expert_origin_target_all_zero():
    spec = make_spec(0, "many", [fr("MCP", "FE"), fr("WRIST", "AA"),
                                 fr("ARM", "PS"), fr("ARM", "PRISM")])
    scene = sd.Scene(target=np.zeros(3), distractor=np.array([0.5, 0.5, 0.5]),
                     seed=0)
    chunk = sd.expert_trajectory(spec, scene, t=8)
    assert np.all(chunk.values == 0.0)


def test_expert_per_rotation_rules():
    p = np.array([0.3, 0.4, 0.5])
    scene = sd.Scene(target=p, distractor=np.array([0.9, 0.9, 0.9]), seed=0)
    spec = make_spec(0, "rules", [fr("CMC", "FE"), fr("MCP", "AA"),
                                  fr("WRIST", "PS"), fr("ARM", "PRISM")])
    chunk = sd.expert_trajectory(spec, scene, t=4)
    norm = math.sqrt(0.3**2 + 0.4**2 + 0.5**2)
    assert chunk.values[0, -1] == pytest.approx(1.0 * math.pi / 2 * norm, abs=1e-15)
    assert chunk.values[1, -1] == pytest.approx(0.5 * math.atan2(0.4, 0.3), abs=1e-15)
    assert chunk.values[2, -1] == pytest.approx(0.5 * math.atan2(0.5, 0.5), abs=1e-15)
    assert chunk.values[3, -1] == pytest.approx(0.3 * norm, abs=1e-15)


def test_expert_norm_saturates_at_one():
    far = np.array([1.0, 1.0, 1.0])   # norm sqrt(3) > 1
    scene = sd.Scene(target=far, distractor=np.zeros(3), seed=0)
    spec = make_spec(0, "sat", [fr("CMC", "FE")])
    chunk = sd.expert_trajectory(spec, scene, t=4)
    assert chunk.values[0, -1] == math.pi / 2.0


def test_expert_clips_to_limits():
    spec = make_spec(0, "tight", [fr("CMC", "FE")], joint_limits=[(-0.1, 0.5)])
    scene = sd.Scene(target=np.array([1.0, 0.0, 0.0]),
                     distractor=np.array([0.0, 1.0, 0.0]), seed=0)
    chunk = sd.expert_trajectory(spec, scene, t=8)
    assert chunk.values.max() == 0.5
    assert np.all(chunk.values <= 0.5)


def test_expert_requires_two_steps():
    spec = make_spec(0, "one", [fr("MCP", "FE")])
    scene = sd.make_scene(0)
    with pytest.raises(ValueError, match="2 timesteps"):
        sd.expert_trajectory(spec, scene, t=1)


# ---------------------------------------------------------------------------
# scenes and rendering


def test_make_scene_deterministic_and_separated():
    for seed in range(50):
        a = sd.make_scene(seed)
        b = sd.make_scene(seed)
        np.testing.assert_array_equal(a.target, b.target)
        np.testing.assert_array_equal(a.distractor, b.distractor)
        assert np.linalg.norm(a.target - a.distractor) >= 0.2
        assert a.target.min() >= 0.0 and a.target.max() <= 1.0


def test_scene_rejects_close_distractor():
    with pytest.raises(ValueError, match="closer"):
        sd.Scene(target=np.array([0.5, 0.5, 0.5]),
                 distractor=np.array([0.5, 0.5, 0.55]), seed=0)


def test_scene_rejects_out_of_cube_target():
    with pytest.raises(ValueError, match="unit cube"):
        sd.Scene(target=np.array([1.5, 0.0, 0.0]),
                 distractor=np.array([0.0, 1.0, 0.0]), seed=0)


def test_render_deterministic_per_seed_and_frame():
    scene = sd.make_scene(7)
    a = sd.render_scene(scene, 128, frame=0)
    b = sd.render_scene(scene, 128, frame=0)
    np.testing.assert_array_equal(a.points, b.points)
    c = sd.render_scene(scene, 128, frame=1)
    assert not np.array_equal(a.points, c.points)


def test_render_target_centroid_near_target():
    # First 64 points sample a radius-0.05 sphere at the target; their
    # centroid concentrates well inside 0.01 of it.
    for seed in range(20):
        scene = sd.make_scene(seed)
        cloud = sd.render_scene(scene, 256)
        centroid = cloud.points[:64].mean(axis=0)
        assert np.linalg.norm(centroid - scene.target) < 0.01


def test_render_structure():
    scene = sd.make_scene(3)
    cloud = sd.render_scene(scene, 200)
    assert cloud.points.shape == (200, 3)
    radii = np.linalg.norm(cloud.points[:64] - scene.target, axis=1)
    np.testing.assert_allclose(radii, 0.05, atol=0.02)   # sphere + jitter
    dist = np.linalg.norm(cloud.points[64:128] - scene.distractor, axis=1)
    assert dist.max() < 0.2                               # 3-sigma-ish blob
    assert np.abs(cloud.points[128:, 2]).max() < 0.01     # floor, jitter only


def test_render_rejects_small_clouds():
    with pytest.raises(ValueError, match="128"):
        sd.render_scene(sd.make_scene(0), 127)


# ---------------------------------------------------------------------------
# embodiment sampling


def test_make_embodiment_deterministic():
    a = sd.make_embodiment(np.random.Generator(np.random.Philox(key=[9, 0])))
    b = sd.make_embodiment(np.random.Generator(np.random.Philox(key=[9, 0])))
    assert [(j.f, j.r) for j in a.joints] == [(j.f, j.r) for j in b.joints]


def test_make_embodiment_respects_range():
    rng = np.random.Generator(np.random.Philox(key=[1, 0]))
    for _ in range(100):
        spec = sd.make_embodiment(rng, joint_range=(4, 30))
        assert 4 <= spec.d_a <= 30
    fixed = sd.make_embodiment(rng, joint_range=(6, 6))
    assert fixed.d_a == 6


def test_make_embodiment_range_validated():
    rng = np.random.Generator(np.random.Philox(key=[1, 0]))
    with pytest.raises(ValueError, match=r"\[4, 30\]"):
        sd.make_embodiment(rng, joint_range=(2, 5))
    with pytest.raises(ValueError, match=r"\[4, 30\]"):
        sd.make_embodiment(rng, joint_range=(4, 31))


def test_make_embodiment_flexion_is_modal():
    rng = np.random.Generator(np.random.Philox(key=[2, 0]))
    counts = np.zeros(len(ROTATION_NAMES), dtype=int)
    for i in range(1000):
        spec = sd.make_embodiment(rng, embodiment_id=i, name=f"s{i}")
        for j in spec.joints:
            counts[j.r] += 1
    fe = ROTATION_NAMES.index("FE")
    assert counts[fe] == counts.max()
    assert counts[fe] > counts.sum() / 2   # weights put 76% mass on FE


# ---------------------------------------------------------------------------
# normalization stats


def _brute_stats(chunks_and_specs):
    buckets = {}
    for chunk, spec in chunks_and_specs:
        for i, j in enumerate(spec.joints):
            buckets.setdefault((j.f, j.r), []).extend(chunk[i].tolist())
    return {k: (len(v), float(np.mean(v)), float(np.std(v)))
            for k, v in buckets.items()}


def test_accumulate_moments_matches_brute_force():
    rng = np.random.default_rng(0)
    spec_a = make_spec(0, "a", [fr("MCP", "FE"), fr("DIP", "FE"), fr("MCP", "FE")])
    spec_b = make_spec(1, "b", [fr("DIP", "FE"), fr("WRIST", "PS")])
    data = [(rng.normal(size=(3, 5)), spec_a), (rng.normal(size=(2, 5)), spec_b),
            (rng.normal(size=(3, 5)), spec_a)]
    got = sd.accumulate_moments(data)
    want = _brute_stats(data)
    assert got.keys() == want.keys()
    for key in want:
        assert got[key][0] == want[key][0]
        assert got[key][1] == pytest.approx(want[key][1], abs=1e-12)
        assert got[key][2] == pytest.approx(want[key][2], abs=1e-12)


def test_effective_stats_key_mapping():
    assert sd.effective_stats_key(2, 1) == (2, 1)
    assert sd.effective_stats_key(2, 1, Ablations(zero_embodiment=True)) == (2, 1)
    assert sd.effective_stats_key(2, 1, Ablations(zero_function=True)) == (1,)
    assert sd.effective_stats_key(2, 1, Ablations(zero_rotation=True)) == (2,)
    assert sd.effective_stats_key(2, 1, Ablations(no_codebook=True)) == ()


def test_pool_stats_exact_against_repartitioned_brute_force():
    rng = np.random.default_rng(1)
    spec = make_spec(0, "a", [fr("MCP", "FE"), fr("DIP", "FE"), fr("WRIST", "AA")])
    data = [(rng.normal(size=(3, 7)), spec) for _ in range(4)]
    stats = sd.accumulate_moments(data)
    pooled = sd.pool_stats(stats, Ablations(zero_function=True))
    by_r = {}
    for chunk, s in data:
        for i, j in enumerate(s.joints):
            by_r.setdefault((j.r,), []).extend(chunk[i].tolist())
    assert pooled.keys() == {(r,) for (r,) in by_r}
    for key, vals in by_r.items():
        count, mean, std = pooled[key]
        assert count == len(vals)
        assert mean == pytest.approx(float(np.mean(vals)), abs=1e-12)
        assert std == pytest.approx(float(np.std(vals)), abs=1e-12)


def test_pool_stats_identity_without_ablation():
    stats = {(1, 0): (10, 0.5, 0.1), (3, 0): (4, -0.2, 0.3)}
    assert sd.pool_stats(stats) == stats


def test_normalize_roundtrip():
    rng = np.random.default_rng(2)
    spec = make_spec(0, "a", [fr("MCP", "FE"), fr("DIP", "FE"), fr("WRIST", "AA")])
    data = [(rng.normal(size=(3, 7)), spec) for _ in range(3)]
    stats = sd.accumulate_moments(data)
    for ablate in (None, Ablations(zero_function=True), Ablations(no_codebook=True)):
        pooled = sd.pool_stats(stats, ablate)
        chunk = data[0][0]
        z = sd.normalize_chunk(chunk, spec, pooled, ablate)
        back = sd.denormalize_chunk(z, spec, pooled, ablate)
        np.testing.assert_allclose(back, chunk, rtol=0, atol=1e-12)
        assert not np.array_equal(z, chunk)


def test_normalize_clamps_degenerate_std_with_warning():
    spec = make_spec(0, "a", [fr("MCP", "FE")])
    constant = np.full((1, 6), 0.5)   # dyadic: the accumulated mean is exact
    pooled = sd.pool_stats(sd.accumulate_moments([(constant, spec)]))
    assert pooled[fr("MCP", "FE")][2] == 0.0
    with pytest.warns(RuntimeWarning, match="clamped"):
        z = sd.normalize_chunk(constant, spec, pooled)
    np.testing.assert_array_equal(z, 0.0)
    with pytest.warns(RuntimeWarning, match="clamped"):
        back = sd.denormalize_chunk(z, spec, pooled)
    np.testing.assert_allclose(back, constant, rtol=0, atol=1e-12)


# ---------------------------------------------------------------------------
# shard container


@pytest.fixture()
def two_specs():
    return [make_spec(0, "six", [fr("MCP", "FE"), fr("DIP", "FE"), fr("CMC", "FE"),
                                 fr("WRIST", "AA"), fr("ARM", "PS"), fr("ARM", "PRISM")]),
            make_spec(0, "nine", [fr("MCP", "FE")] * 4 + [fr("PIP", "FE")] * 3
                      + [fr("WRIST", "FE"), fr("ARM", "FE")])]


def test_generate_and_read_roundtrip(tmp_path, two_specs):
    path = str(tmp_path / "train.satdata")
    shard = sd.generate_dataset(two_specs, 6, seed=123, path=path, cfg=CFG)
    assert shard.header["n_episodes"] == 6
    assert len(shard.episodes) == 6
    assert shard.header["n_points"] == CFG.N
    assert shard.header["T_o"] == CFG.T_o

    # round-robin over the registry's dense ids
    assert [d.embodiment_id for d in shard.episodes] == [0, 1, 0, 1, 0, 1]
    d_as = {d.chunk.shape[0] for d in shard.episodes}
    assert d_as == {6, 9}
    for demo in shard.episodes:
        assert demo.instruction == "reach the target"
        assert demo.frames.shape == (CFG.T_o, CFG.N, 3)
        assert demo.chunk.shape[1] == CFG.T

    # chunks are stored f64: decoded values are bitwise the expert's output
    spec0 = shard.registry.get(0)
    scene0 = sd.make_scene(123 ^ 0)
    np.testing.assert_array_equal(
        shard.episodes[0].chunk, sd.expert_trajectory(spec0, scene0, CFG.T).values)
    # frames are stored f32: decoded values are the f32 quantization, exactly
    want = sd.render_scene(scene0, CFG.N, frame=1).points.astype(np.float32)
    np.testing.assert_array_equal(shard.episodes[0].frames[1],
                                  want.astype(np.float64))


def test_generate_dataset_byte_deterministic(tmp_path, two_specs):
    p1, p2 = str(tmp_path / "a.satdata"), str(tmp_path / "b.satdata")
    sd.generate_dataset(two_specs, 4, seed=5, path=p1, cfg=CFG)
    sd.generate_dataset(two_specs, 4, seed=5, path=p2, cfg=CFG)
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_header_stats_match_episode_moments(tmp_path, two_specs):
    path = str(tmp_path / "s.satdata")
    shard = sd.generate_dataset(two_specs, 8, seed=77, path=path, cfg=CFG)
    recomputed = sd.accumulate_moments(
        (d.chunk, shard.registry.get(d.embodiment_id)) for d in shard.episodes)
    assert shard.stats.keys() == recomputed.keys()
    for key in recomputed:
        assert shard.stats[key][0] == recomputed[key][0]
        assert shard.stats[key][1] == pytest.approx(recomputed[key][1], abs=1e-12)
        assert shard.stats[key][2] == pytest.approx(recomputed[key][2], abs=1e-12)


def test_empty_shard_is_header_only(tmp_path, two_specs):
    path = str(tmp_path / "empty.satdata")
    shard = sd.generate_dataset(two_specs, 0, seed=1, path=path, cfg=CFG)
    assert shard.episodes == ()
    assert shard.stats == {}
    assert len(shard.registry) == 2


def test_bad_magic_is_distinct_error(tmp_path, two_specs):
    path = str(tmp_path / "s.satdata")
    sd.generate_dataset(two_specs, 1, seed=0, path=path, cfg=CFG)
    blob = bytearray(open(path, "rb").read())
    blob[0] ^= 0xFF
    bad = str(tmp_path / "bad.satdata")
    open(bad, "wb").write(bytes(blob))
    with pytest.raises(sd.BadMagicError):
        sd.read_dataset(bad)


def test_version_mismatch_is_distinct_error(tmp_path, two_specs):
    path = str(tmp_path / "s.satdata")
    sd.generate_dataset(two_specs, 1, seed=0, path=path, cfg=CFG)
    blob = bytearray(open(path, "rb").read())
    blob[8:12] = (99).to_bytes(4, "little")
    bad = str(tmp_path / "v99.satdata")
    open(bad, "wb").write(bytes(blob))
    with pytest.raises(sd.ShardVersionError, match="99"):
        sd.read_dataset(bad)


def test_truncation_reports_record_index(tmp_path, two_specs):
    path = str(tmp_path / "s.satdata")
    sd.generate_dataset(two_specs, 3, seed=0, path=path, cfg=CFG)
    blob = open(path, "rb").read()
    cut = str(tmp_path / "cut.satdata")
    open(cut, "wb").write(blob[:-10])   # cuts inside the last episode
    with pytest.raises(sd.TruncatedShardError, match="record 2"):
        sd.read_dataset(cut)


def test_trailing_garbage_rejected(tmp_path, two_specs):
    path = str(tmp_path / "s.satdata")
    sd.generate_dataset(two_specs, 1, seed=0, path=path, cfg=CFG)
    open(path, "ab").write(b"x")
    with pytest.raises(sd.ShardError, match="trailing"):
        sd.read_dataset(path)


def test_iter_dataset_streams_in_order(tmp_path, two_specs):
    path = str(tmp_path / "s.satdata")
    shard = sd.generate_dataset(two_specs, 4, seed=9, path=path, cfg=CFG)
    stream = sd.iter_dataset(path)
    kind, _ = next(stream)
    assert kind == "header"
    for want in shard.episodes:
        kind, got = next(stream)
        assert kind == "episode"
        np.testing.assert_array_equal(got.chunk, want.chunk)
    with pytest.raises(StopIteration):
        next(stream)


# ---------------------------------------------------------------------------
# ablation floor


def test_floor_matches_hand_rolled_average(tmp_path):
    # MCP-FE (gain .8) and DIP-FE (gain .4): the only informative pair.
    spec = make_spec(0, "pair", [fr("MCP", "FE"), fr("DIP", "FE"), fr("WRIST", "AA")])
    path = str(tmp_path / "floor.satdata")
    shard = sd.generate_dataset([spec], 10, seed=42, path=path, cfg=CFG)
    want = np.mean([
        0.5 * 0.4 * (math.pi / 2)
        * min(float(np.linalg.norm(sd.make_scene(42 ^ i).target)), 1.0)
        for i in range(10)
    ])
    assert sd.indistinguishability_floor(shard) == pytest.approx(want, abs=1e-12)
    assert sd.indistinguishability_floor(shard) > 0.1


def test_floor_zero_without_gain_pairs(tmp_path):
    spec = make_spec(0, "solo", [fr("MCP", "FE"), fr("MCP", "FE"), fr("WRIST", "AA")])
    path = str(tmp_path / "nofloor.satdata")
    shard = sd.generate_dataset([spec], 4, seed=3, path=path, cfg=CFG)
    assert sd.indistinguishability_floor(shard) == 0.0
