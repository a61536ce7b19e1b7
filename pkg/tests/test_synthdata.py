import math
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sparsetrack.synthdata import (
    DatasetManifest,
    DomainSpec,
    Episode,
    TrajectoryQuery,
    World,
    apply_action,
    build_dataset,
    desk_domains,
    episode_from_bytes,
    episode_to_bytes,
    generate_episode,
    ground_truth_tracks,
    read_episode,
    sample_points_grid,
    sample_points_variance_filter,
    scripted_path,
    target_coverage,
    verify_manifest,
    write_episode,
)

DOMAINS = desk_domains()


def _spec(family, **kw):
    return DomainSpec(0, family, **kw)


def test_domain_spec_validation():
    with pytest.raises(ValueError):
        DomainSpec(0, "teleport")
    with pytest.raises(ValueError):
        DomainSpec(0, "linear_push", speed_scale=0.0)


def test_generation_is_deterministic():
    for spec in DOMAINS:
        a, b = generate_episode(spec, 11), generate_episode(spec, 11)
        assert episode_to_bytes(a) == episode_to_bytes(b)
    assert episode_to_bytes(generate_episode(DOMAINS[0], 1)) != episode_to_bytes(generate_episode(DOMAINS[0], 2))


def test_episode_contract():
    for spec in DOMAINS:
        ep = generate_episode(spec, 3)
        assert ep.frames.shape == (24, 32, 32, 3)
        assert ep.frames.min() >= 0.0 and ep.frames.max() <= 1.0
        assert ep.num_frames >= 16 + 1
        assert ep.has_actions == spec.in_domain
        if ep.has_actions:
            assert ep.actions.shape == (23, 3)


def test_linear_push_is_collinear():
    for spec in [d for d in DOMAINS if d.dynamics_family == "linear_push"]:
        for seed in range(10):
            path = generate_episode(spec, seed).object_states
            a, b = path[0], np.asarray(spec.goal)
            direction = (b - a) / np.linalg.norm(b - a)
            normal = np.array([-direction[1], direction[0]])
            assert np.max(np.abs((path - a) @ normal)) < 1.0


def test_double_speed_halves_traverse_time():
    slow = _spec("linear_push", speed_scale=1.0, goal=(24.0, 8.0))
    fast = _spec("linear_push", speed_scale=2.0, goal=(24.0, 8.0))
    start = np.array([8.0, 8.0])  # distance 16 along x
    frames_to_goal = [int(np.argmax(np.all(scripted_path(s, start, 30) == s.goal, axis=1))) for s in (slow, fast)]
    assert frames_to_goal == [16, 8]


def test_rendered_centroid_tracks_object():
    for spec in DOMAINS:
        ep = generate_episode(spec, 5)
        for pos in ep.object_states:
            cov = target_coverage(pos, ep.radius, 32)
            rows, cols = np.mgrid[0:32, 0:32]
            cx = ((cols + 0.5) * cov).sum() / cov.sum()
            cy = ((rows + 0.5) * cov).sum() / cov.sum()
            assert math.hypot(cx - pos[0], cy - pos[1]) < 1.0


def test_target_is_visible_in_frames():
    ep = generate_episode(DOMAINS[0], 0)
    bg = np.asarray(DOMAINS[0].palette()[0])
    for frame, pos in zip(ep.frames, ep.object_states):
        r, c = int(pos[1]), int(pos[0])
        assert np.abs(frame[r, c] - bg).sum() > 0.5


def test_actions_replay_states_exactly():
    for spec in [d for d in DOMAINS if d.in_domain]:
        for seed in range(10):
            ep = generate_episode(spec, seed)
            state = ep.object_states[0]
            for t, act in enumerate(ep.actions):
                state = apply_action(state, act)
                assert np.array_equal(state, ep.object_states[t + 1])


# --- tracks -------------------------------------------------------------------


def _query_on_target(ep, t, offsets):
    centre = ep.object_states[t]
    pts = (centre + np.asarray(offsets)) / 32.0
    return TrajectoryQuery(pts, t)


def test_background_points_are_stationary():
    ep = generate_episode(DOMAINS[2], 1)
    far = ep.object_states[0] + np.array([10.0, 0.0])
    far = np.where(far > 31, ep.object_states[0] - np.array([10.0, 0.0]), far)
    q = TrajectoryQuery((far / 32.0)[None], 0)
    tr = ground_truth_tracks(ep, q, 16)
    assert np.array_equal(tr, np.broadcast_to(q.points, tr.shape))


def test_linear_push_track_is_arithmetic_progression():
    spec = _spec("linear_push", speed_scale=1.0, goal=(28.0, 16.0))
    ep = generate_episode(spec, 0)
    ep.object_states[:] = scripted_path(spec, np.array([6.0, 16.0]), 24)
    q = _query_on_target(ep, 0, [[0.0, 0.0]])
    tr = ground_truth_tracks(ep, q, 16)[:, 0]
    steps = np.diff(np.concatenate([q.points, tr]), axis=0)
    assert np.array_equal(steps, np.broadcast_to([1.0 / 32, 0.0], steps.shape))


def test_attached_points_keep_their_offset():
    for spec in DOMAINS:
        ep = generate_episode(spec, 2)
        q = _query_on_target(ep, 1, [[-2.0, 1.0], [1.5, -2.5]])
        tr = ground_truth_tracks(ep, q, 16)
        offset = tr[:, 1] - tr[:, 0]
        assert np.allclose(offset, q.points[1] - q.points[0], atol=1e-12)


def test_first_track_step_is_one_analytic_advance():
    for spec in DOMAINS:
        ep = generate_episode(spec, 4)
        q = _query_on_target(ep, 2, [[0.5, 0.5]])
        tr = ground_truth_tracks(ep, q, 16)
        advance = (ep.object_states[3] - ep.object_states[2]) / 32.0
        assert np.array_equal(tr[0, 0], q.points[0] + advance)


@settings(max_examples=60, deadline=None)
@given(
    domain=st.integers(0, len(DOMAINS) - 1),
    seed=st.integers(0, 10_000),
    t=st.integers(0, 7),
    half=st.sampled_from([2, 4, 8]),
    cells=st.lists(st.tuples(st.integers(-2, 2), st.integers(-2, 2)), min_size=1, max_size=6),
)
def test_track_composition_is_exact(domain, seed, t, half, cells):
    # pixel-centre queries sit on the dyadic grid, so composition is exact;
    # only points well inside the target keep their membership after advancing
    ep = generate_episode(DOMAINS[domain], seed)
    centre = ep.object_states[t]
    pts = [(math.floor(centre[0]) + dx + 0.5, math.floor(centre[1]) + dy + 0.5) for dx, dy in cells]
    pts = np.clip(np.asarray(pts), 0.5, 31.5) / 32.0
    q = TrajectoryQuery(pts, t)
    full = ground_truth_tracks(ep, q, 2 * half)
    mid = TrajectoryQuery(np.clip(full[half - 1], 0, 1), t + half)
    second = ground_truth_tracks(ep, mid, half)
    stable = np.linalg.norm(pts * 32 - centre, axis=1) <= ep.radius - 1e-9
    assert np.array_equal(full[half:, stable], second[:, stable])
    moving_before = ~stable
    assert np.array_equal(full[:, moving_before], np.broadcast_to(pts[moving_before], full[:, moving_before].shape))


def test_track_horizon_overflow():
    ep = generate_episode(DOMAINS[0], 0)
    with pytest.raises(ValueError):
        ground_truth_tracks(ep, TrajectoryQuery(np.full((1, 2), 0.5), 8), 16)
    assert ground_truth_tracks(ep, TrajectoryQuery(np.full((1, 2), 0.5), 7), 16).shape == (16, 1, 2)


def test_query_validation():
    with pytest.raises(ValueError):
        TrajectoryQuery(np.array([[1.2, 0.5]]))
    with pytest.raises(ValueError):
        TrajectoryQuery(np.zeros((3, 3)))


# --- point sampling -----------------------------------------------------------


def test_variance_filter_static_clip_is_uniform():
    frames = np.full((5, 8, 8, 3), 0.4)
    pts = sample_points_variance_filter(frames, 64_000, np.random.default_rng(0))
    cells = np.floor(pts * 8).astype(int)
    counts = np.bincount(cells[:, 1] * 8 + cells[:, 0], minlength=64)
    assert counts.min() > 800 and counts.max() < 1200


def test_variance_filter_concentrates_on_motion():
    rng = np.random.default_rng(1)
    frames = np.zeros((6, 32, 32, 3))
    frames[:, 10:14, 20:24] = rng.uniform(size=(6, 4, 4, 1))
    pts = sample_points_variance_filter(frames, 1000, np.random.default_rng(2))
    px = pts * 32
    inside = (px[:, 0] > 20) & (px[:, 0] < 24) & (px[:, 1] > 10) & (px[:, 1] < 14)
    assert inside.mean() >= 0.9


def test_variance_filter_count_and_errors():
    ep = generate_episode(DOMAINS[0], 0)
    pts = sample_points_variance_filter(ep.frames[:17], 32, np.random.default_rng(0))
    assert pts.shape == (32, 2) and pts.min() >= 0 and pts.max() <= 1
    with pytest.raises(ValueError):
        sample_points_variance_filter(ep.frames, 0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_points_variance_filter(ep.frames[:1], 4, np.random.default_rng(0))
    a = sample_points_variance_filter(ep.frames, 32, np.random.default_rng(5))
    b = sample_points_variance_filter(ep.frames, 32, np.random.default_rng(5))
    assert np.array_equal(a, b)


def test_grid_points():
    assert sample_points_grid(4, 32, 32).tolist() == [[0.25, 0.25], [0.75, 0.25], [0.25, 0.75], [0.75, 0.75]]
    g = sample_points_grid(32, 32, 32)
    assert g.shape == (32, 2)
    assert len(np.unique(g[:, 0])) == 8 and len(np.unique(g[:, 1])) == 4
    assert g.min() >= 0 and g.max() <= 1
    with pytest.raises(ValueError):
        sample_points_grid(0)


def test_grid_always_hits_the_target():
    g = sample_points_grid(32) * 32
    for spec in DOMAINS:
        ep = generate_episode(spec, 9)
        for pos in ep.object_states:
            assert np.min(np.linalg.norm(g - pos, axis=1)) <= ep.radius


# --- files and manifests -------------------------------------------------------


def test_episode_bytes_round_trip(tmp_path):
    for spec in (DOMAINS[0], DOMAINS[5]):
        ep = generate_episode(spec, 8)
        path = tmp_path / "a.ep"
        write_episode(path, ep)
        back = read_episode(path)
        write_episode(tmp_path / "b.ep", back)
        assert (tmp_path / "a.ep").read_bytes() == (tmp_path / "b.ep").read_bytes()
        assert np.array_equal(back.frames, ep.frames) and back.seed == ep.seed
        assert back.has_actions == ep.has_actions


def test_episode_parse_errors():
    data = episode_to_bytes(generate_episode(DOMAINS[0], 0))
    with pytest.raises(ValueError):
        episode_from_bytes(b"XXXXXXXX" + data[8:])
    with pytest.raises(ValueError):
        episode_from_bytes(data[:-8])
    with pytest.raises(ValueError):
        episode_from_bytes(data[:10])


def test_desk_dataset(tmp_path):
    m = build_dataset(DOMAINS, (20, 20), (9, 2), seed=7, out_dir=str(tmp_path / "d"))
    assert len(m.split("in_domain")) == 40 and len(m.split("out_of_domain")) == 180
    assert len(m.training()) == 220
    assert verify_manifest(m)
    again = DatasetManifest.read(str(tmp_path / "d" / "manifest.json"))
    assert again.digest == m.digest and verify_manifest(again)
    train_seeds = {(e["domain_id"], e["seed"]) for e in m.training()}
    assert not train_seeds & {(e["domain_id"], e["seed"]) for e in m.split("validation")}
    assert all(not e["has_actions"] for e in m.split("out_of_domain"))
    assert all(e["has_actions"] for e in m.split("in_domain"))


def test_dataset_digest_is_reproducible_and_ratio_enforced(tmp_path):
    a = build_dataset(DOMAINS, (2, 1), (9, 4), seed=3, out_dir=str(tmp_path / "a"))
    b = build_dataset(DOMAINS, (2, 1), (9, 4), seed=3, out_dir=str(tmp_path / "b"))
    assert a.digest == b.digest
    pure = build_dataset(DOMAINS, (2, 1), (0, 2), seed=3, out_dir=str(tmp_path / "c"))
    assert not pure.split("out_of_domain") and len(pure.split("in_domain")) == 4
    with pytest.raises(ValueError):
        build_dataset(DOMAINS, (2, 1), (9, 2), seed=3, out_dir=str(tmp_path / "e"))
    with pytest.raises(ValueError):
        build_dataset(DOMAINS, (0, 1), (9, 2), seed=3, out_dir=str(tmp_path / "f"))


def test_tampered_file_fails_verification(tmp_path):
    m = build_dataset(DOMAINS, (2, 1), (9, 4), seed=3, out_dir=str(tmp_path))
    path = m.path(m.episodes[0])
    data = bytearray(open(path, "rb").read())
    data[-1] ^= 1
    open(path, "wb").write(bytes(data))
    with pytest.raises(ValueError):
        verify_manifest(m)


# --- world ---------------------------------------------------------------------


def test_expert_replay_succeeds_in_world():
    for spec in [d for d in DOMAINS if d.in_domain]:
        for seed in range(5):
            ep = generate_episode(spec, seed)
            world = World(spec, seed)
            assert np.array_equal(world.observe(), ep.frames[0])
            for t, act in enumerate(ep.actions):
                frame = world.step(act)
                assert np.array_equal(frame, ep.frames[t + 1])
            assert world.success()


def test_world_ignores_motion_without_grasp_and_clips():
    world = World(DOMAINS[0], 0)
    s0 = world.state.copy()
    world.step([1.0, 1.0, 0.0])
    assert np.array_equal(world.state, s0)
    world.step([10.0, 0.0, 1.0])
    assert world.state[0] == min(s0[0] + 2.0, 32 - world.scene.radius)
    with pytest.raises(ValueError):
        world.step([np.nan, 0, 1])
