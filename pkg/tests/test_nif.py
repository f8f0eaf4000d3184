import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import check_gradients
from trajalign.encoders import LocationEncoder, TimeEncoder
from trajalign.errors import EmptyQuerySet, ModeMismatch, NoWaypointsOnSegment
from trajalign.geom import QueryPoint, Trajectory
from trajalign.nif import (
    ImplicitTrajectoryEncoder,
    build_query_token,
    build_query_tokens,
    init_m_time,
    segment_pooled_embedding,
    window_tokens,
    window_trajectory,
)


def walk(n: int, seed: int = 0, traj_id: str = "t") -> Trajectory:
    rng = np.random.default_rng(seed)
    steps = rng.normal(scale=0.004, size=(n, 2))
    coords = np.clip(0.5 + np.cumsum(steps, axis=0), 0.0, 1.0)
    return Trajectory(traj_id, coords, np.arange(n) * 5.0)


def small_parts(dim=16, seed=0, dtype=torch.float64):
    torch.manual_seed(seed)
    loc = LocationEncoder(dim=dim, num_scales=4).to(dtype)
    tim = TimeEncoder(dim=dim).to(dtype)
    nif = ImplicitTrajectoryEncoder(dim, layers=2, heads=4, ff=32).to(dtype)
    return loc, tim, nif, init_m_time(dim).to(dtype)


# windowing


def test_window_downsamples_long_trajectories():
    w = window_trajectory(walk(500), 240, rng_seed=3)
    assert w.num_real == 240 and len(w) == 240
    assert np.all(np.diff(w.kept_indices) > 0)


def test_window_pads_short_trajectories():
    traj = walk(100)
    w = window_trajectory(traj, 240)
    assert w.mask.sum() == 100 and len(w) == 240
    assert np.array_equal(w.coords[:100], traj.coords)
    assert np.all(w.coords[100:] == 0) and np.all(w.times[100:] == 0)


def test_window_identity_at_exact_length():
    traj = walk(240)
    w = window_trajectory(traj, 240, rng_seed=1)
    assert np.array_equal(w.coords, traj.coords) and np.array_equal(w.times, traj.times)
    assert w.mask.all() and np.array_equal(w.kept_indices, np.arange(240))


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 600), st.integers(0, 2**31))
def test_window_order_preserved_and_deterministic(n, seed):
    traj = walk(n, seed=1)
    a = window_trajectory(traj, 240, rng_seed=seed)
    b = window_trajectory(traj, 240, rng_seed=seed)
    assert np.array_equal(a.kept_indices, b.kept_indices)
    assert np.all(np.diff(a.kept_indices) > 0)
    assert a.num_real == min(n, 240)


# query tokens


def test_masked_query_tokens_differ_by_location_encoding():
    loc, tim, _, m_time = small_parts()
    p = [QueryPoint("a", (0.2, 0.3), 0, 0.1, 10.0), QueryPoint("b", (0.7, 0.1), 1, 0.5, 20.0)]
    tok = build_query_tokens(p, "masked", loc, tim, m_time)
    enc = loc(torch.tensor([p[0].location, p[1].location], dtype=torch.float64))
    assert torch.allclose(tok[0] - tok[1], enc[0] - enc[1], atol=1e-12)


def test_synthetic_query_at_vertex_equals_waypoint_token():
    loc, tim, _, m_time = small_parts()
    traj = walk(10)
    qp = QueryPoint("s", tuple(traj.coords[4]), 4, 0.0, float(traj.times[4]))
    tok = build_query_token(qp, "synthetic", traj, loc, tim, m_time, time_origin=float(traj.times[0]))
    w = window_trajectory(traj, 16)
    wp = window_tokens(w, loc, tim, time_origin=float(traj.times[0]))
    assert torch.allclose(tok, wp[4], atol=1e-12)


def test_query_token_decomposition():
    loc, tim, _, m_time = small_parts()
    qp = QueryPoint("s", (0.4, 0.6), 0, 0.3, 17.0)
    tok = build_query_tokens([qp], "synthetic", loc, tim, m_time, time_origin=2.0)[0]
    expected = loc(torch.tensor([[0.4, 0.6]], dtype=torch.float64))[0] + tim(torch.tensor([15.0], dtype=torch.float64))[0]
    assert torch.equal(tok, expected)
    tok = build_query_tokens([qp], "masked", loc, tim, m_time)[0]
    assert torch.equal(tok, loc(torch.tensor([[0.4, 0.6]], dtype=torch.float64))[0] + m_time)


def test_synthetic_mode_requires_time():
    loc, tim, _, m_time = small_parts()
    with pytest.raises(ModeMismatch):
        build_query_tokens([QueryPoint("s", (0.1, 0.1), 0, 0.0, None)], "synthetic", loc, tim, m_time)
    with pytest.raises(ModeMismatch):
        build_query_tokens([QueryPoint("s", (0.1, 0.1), 0, 0.0, 1.0)], "bogus", loc, tim, m_time)


# localized embeddings


def run_nif(traj, q_locs, parts, length=64):
    loc, tim, nif, m_time = parts
    w = window_trajectory(traj, length, rng_seed=0)
    wp = window_tokens(w, loc, tim)[None]
    q = loc(torch.as_tensor(np.asarray(q_locs), dtype=torch.float64)) + m_time
    return nif(wp, torch.as_tensor(w.mask)[None], q[None])[0], wp, torch.as_tensor(w.mask)[None]


def test_output_shape_and_identical_queries():
    parts = small_parts(dim=128)
    out, _, _ = run_nif(walk(30), [[0.5, 0.5], [0.5, 0.5], [0.3, 0.4]], parts)
    assert out.shape == (3, 128)
    assert torch.equal(out[0], out[1])


def test_empty_query_set_rejected():
    _, _, nif, _ = small_parts()
    with pytest.raises(EmptyQuerySet):
        nif(torch.zeros(1, 4, 16, dtype=torch.float64), torch.ones(1, 4, dtype=torch.bool), torch.zeros(1, 0, 16, dtype=torch.float64))


def test_single_query_equals_joint_with_31_others():
    parts = small_parts(dim=128, seed=1)
    rng = np.random.default_rng(2)
    locs = rng.uniform(0.4, 0.6, size=(32, 2))
    joint, _, _ = run_nif(walk(80), locs, parts)
    for i in (0, 7, 31):
        alone, _, _ = run_nif(walk(80), locs[i : i + 1], parts)
        assert torch.allclose(alone[0], joint[i], atol=1e-6, rtol=0)


@settings(max_examples=25, deadline=None)
@given(st.integers(3, 40), st.integers(0, 1000), st.floats(-50, 50))
def test_padding_invariance(n, seed, fill):
    parts = small_parts(seed=seed % 7)
    out, wp, mask = run_nif(walk(n, seed), [[0.5, 0.5], [0.45, 0.52]], parts)
    junk = wp.clone()
    gen = torch.Generator().manual_seed(seed)
    junk[~mask] = torch.randn(int((~mask).sum()), wp.shape[-1], generator=gen, dtype=torch.float64) * fill
    q = parts[0](torch.tensor([[0.5, 0.5], [0.45, 0.52]], dtype=torch.float64)) + parts[3]
    again = parts[2](junk, mask, q[None])[0]
    assert torch.allclose(out, again, atol=1e-6, rtol=0)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 1000), st.integers(1, 8))
def test_query_independence_of_other_queries(seed, extra):
    parts = small_parts()
    loc, _, nif, m_time = parts
    rng = np.random.default_rng(seed)
    target = rng.uniform(0, 1, size=(1, 2))
    others = rng.uniform(0, 1, size=(extra, 2))
    alone, wp, mask = run_nif(walk(20), target, parts)
    mixed = np.concatenate([others, target, others[::-1]])
    q = loc(torch.as_tensor(mixed, dtype=torch.float64)) + m_time
    # also perturb other queries with noise that is not a location encoding
    q[:extra] += torch.randn(extra, q.shape[1], dtype=torch.float64, generator=torch.Generator().manual_seed(seed))
    out = nif(wp, mask, q[None])[0]
    assert torch.allclose(out[extra], alone[0], atol=1e-6, rtol=0)


def test_batched_windows_match_single_runs():
    parts = small_parts(seed=3)
    loc, tim, nif, m_time = parts
    trajs = [walk(12, 1), walk(40, 2)]
    windows = [window_trajectory(t, 64) for t in trajs]
    wp = torch.stack([window_tokens(w, loc, tim) for w in windows])
    mask = torch.as_tensor(np.stack([w.mask for w in windows]))
    q = (loc(torch.tensor([[0.5, 0.5]], dtype=torch.float64)) + m_time).expand(2, 1, -1)
    batched = nif(wp, mask, q)
    for i in range(2):
        single = nif(wp[i : i + 1], mask[i : i + 1], q[i : i + 1])
        assert torch.allclose(batched[i], single[0], atol=1e-9)


def test_waypoint_outputs_match_encode_waypoints():
    parts = small_parts(seed=4)
    _, wp, mask = run_nif(walk(25), [[0.5, 0.5]], parts)
    q = torch.zeros(1, 2, 16, dtype=torch.float64)
    _, with_queries = parts[2](wp, mask, q, return_waypoints=True)
    assert torch.allclose(with_queries, parts[2].encode_waypoints(wp, mask), atol=1e-9)


def test_gradient_wrt_waypoint_coordinate():
    loc, tim, nif, m_time = small_parts(seed=5)
    coords = torch.tensor(walk(6).coords, dtype=torch.float64, requires_grad=True)
    times = torch.arange(6, dtype=torch.float64) * 5.0
    q = loc(torch.tensor([[0.5, 0.5]], dtype=torch.float64)).detach() + m_time.detach()
    mask = torch.ones(1, 6, dtype=torch.bool)
    # a plain sum of a normalized output is constant, so weight it
    w = torch.randn(1, 1, 16, dtype=torch.float64)

    def fn():
        wp = loc(coords) + tim(times)
        return (nif(wp[None], mask, q[None]) * w).sum()

    assert check_gradients(fn, [coords]) <= 1e-3


def test_locality_outputs_vary_with_query_location():
    parts = small_parts(dim=128, seed=6)
    traj = walk(200, 3)
    a, b = traj.coords[20], traj.coords[180]
    assert np.linalg.norm(a - b) > 10 * 0.002
    out, _, _ = run_nif(traj, [a, b], parts, length=240)
    cos = torch.nn.functional.cosine_similarity(out[0], out[1], dim=0)
    assert cos < 1 - 1e-6


# segment pooling


def test_segment_pool_single_and_pair():
    outs = torch.randn(5, 4, dtype=torch.float64)
    assert torch.equal(segment_pooled_embedding(outs, [False, False, True, False, False]), outs[2])
    pooled = segment_pooled_embedding(outs, [True, False, False, True, False])
    assert torch.allclose(pooled, (outs[0] + outs[3]) / 2, atol=1e-15)


def test_segment_pool_against_loop_oracle():
    rng = np.random.default_rng(0)
    outs = torch.as_tensor(rng.normal(size=(40, 16)))
    member = rng.random(40) < 0.3
    member[0] = True
    acc = [0.0] * 16
    for i in range(40):
        if member[i]:
            for j in range(16):
                acc[j] += float(outs[i, j])
    expected = torch.tensor([a / member.sum() for a in acc], dtype=torch.float64)
    assert torch.allclose(segment_pooled_embedding(outs, member), expected, atol=1e-9, rtol=0)


def test_segment_pool_requires_members():
    with pytest.raises(NoWaypointsOnSegment):
        segment_pooled_embedding(torch.zeros(3, 2), [False, False, False])
