import math

import numpy as np
import pytest
import torch
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from oracles import info_nce_mp
from trajalign.dataset import GeoDataset
from trajalign.errors import DimensionMismatch, EmptyBatch, NoEligibleTrajectories, NonPositiveTemperature, ZeroVector
from trajalign.geom import Trajectory
from trajalign.model import Encoders
from trajalign.ssl import (
    NegativeQueue,
    StepEmbeddings,
    augment_image,
    epoch_batches,
    info_nce,
    make_optimizer,
    pretrain_loss,
    pretrain_step,
    run_pretraining,
    sample_pretrain_batch,
)

vectors = st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(lambda v: sum(x * x for x in v) > 1e-3)


# InfoNCE


def test_info_nce_empty_negatives_is_zero():
    u = torch.randn(8, dtype=torch.float64)
    assert info_nce(u, torch.randn(8, dtype=torch.float64), [], 0.1).item() == 0.0


def test_info_nce_closed_form():
    u = torch.tensor([1.0, 0.0], dtype=torch.float64)
    neg = torch.tensor([[0.0, 1.0]], dtype=torch.float64)
    assert info_nce(u, u, neg, 1.0).item() == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-12)
    assert info_nce(u, u, neg, 1.0).item() == pytest.approx(0.313262, abs=1e-6)


def test_info_nce_against_high_precision_sum():
    rng = np.random.default_rng(0)
    for _ in range(40):
        k = int(rng.integers(0, 65))
        tau = float(rng.uniform(0.01, 1.0))
        u, v = rng.normal(size=(2, 32))
        negs = rng.normal(size=(k, 32))
        got = info_nce(torch.as_tensor(u), torch.as_tensor(v), torch.as_tensor(negs), tau).item()
        want = info_nce_mp(u, v, negs, tau)
        assert abs(got - want) <= 1e-6 * max(abs(want), 1e-300) or (want == 0 and got == 0)


def test_info_nce_stable_at_tiny_temperature():
    u = torch.tensor([1.0, 0.0], dtype=torch.float64)
    negs = torch.tensor([[1.0, 1e-3], [0.0, 1.0]], dtype=torch.float64)
    out = info_nce(u, torch.tensor([0.0, -1.0], dtype=torch.float64), negs, 1e-4).item()
    assert math.isfinite(out)
    assert out == pytest.approx(info_nce_mp([1, 0], [0, -1], negs.numpy(), 1e-4), rel=1e-9)


def test_info_nce_errors():
    u = torch.ones(3)
    with pytest.raises(ZeroVector):
        info_nce(torch.zeros(3), u, [u.numpy()], 0.1)
    with pytest.raises(ZeroVector):
        info_nce(u, u, torch.zeros(1, 3), 0.1)
    with pytest.raises(NonPositiveTemperature):
        info_nce(u, u, [], 0.0)


@settings(max_examples=60, deadline=None)
@given(vectors, vectors, st.lists(vectors, min_size=1, max_size=5), st.floats(0.05, 1.0), st.floats(0.05, 0.9))
def test_info_nce_monotone_in_similarities(u, v, negs, tau, alpha):
    u, v, negs = (torch.tensor(x, dtype=torch.float64) for x in (u, v, negs))
    un = u / u.norm()
    vn = v / v.norm()
    assume(float(un @ vn) < 1 - 1e-6)
    base = info_nce(u, v, negs, tau)
    closer = info_nce(u, (1 - alpha) * vn + alpha * un, negs, tau)
    assert closer < base
    n0 = negs[0] / negs[0].norm()
    assume(float(un @ n0) < 1 - 1e-6)
    moved = negs.clone()
    moved[0] = (1 - alpha) * n0 + alpha * un
    assert info_nce(u, v, moved, tau) >= base


@settings(max_examples=60, deadline=None)
@given(vectors, vectors, st.lists(vectors, max_size=5), st.floats(0.05, 1.0), st.floats(1e-3, 1e3))
def test_info_nce_scale_invariant(u, v, negs, tau, c):
    u, v = torch.tensor(u, dtype=torch.float64), torch.tensor(v, dtype=torch.float64)
    negs = torch.tensor(negs, dtype=torch.float64).reshape(-1, 4)
    base = info_nce(u, v, negs, tau).item()
    for scaled in (info_nce(c * u, v, negs, tau), info_nce(u, c * v, negs, tau), info_nce(u, v, c * negs, tau)):
        assert abs(scaled.item() - base) <= 1e-9 * max(1.0, abs(base))


# three-term objective


def random_step(n=12, k=20, d=8, seed=0, shared=2):
    rng = np.random.default_rng(seed)
    locs = rng.uniform(size=(n, 2))
    locs[1:shared] = locs[0]  # the same SVI drawn by several trajectories
    gen = torch.Generator().manual_seed(seed)
    emb = StepEmbeddings(
        h_svi=torch.randn(n, d, generator=gen, dtype=torch.float64),
        h_loc=torch.randn(n, d, generator=gen, dtype=torch.float64),
        e_traj=torch.randn(n, d, generator=gen, dtype=torch.float64),
        groups=torch.as_tensor(np.arange(n) // 4),
        locations=locs,
    )
    keys = rng.uniform(size=(k, 2))
    keys[:3] = locs[:3]  # queue holds some anchor locations from earlier steps
    keys[3] = np.nan
    queue = torch.randn(k, d, generator=gen, dtype=torch.float64)
    return emb, queue, keys


def loop_oracle(emb, queue, keys, tau):
    n = len(emb.h_loc)
    total = [0.0, 0.0, 0.0]
    for i in range(n):
        x = emb.locations[i]
        loc_negs = [queue[j].numpy() for j in range(len(keys)) if not np.array_equal(keys[j], x)]
        img_negs = [emb.h_svi[j].numpy() for j in range(n) if not np.array_equal(emb.locations[j], x)]
        total[0] += info_nce_mp(emb.h_svi[i].numpy(), emb.h_loc[i].numpy(), loc_negs, tau)
        total[1] += info_nce_mp(emb.e_traj[i].numpy(), emb.h_loc[i].numpy(), loc_negs, tau)
        total[2] += info_nce_mp(emb.e_traj[i].numpy(), emb.h_svi[i].numpy(), img_negs, tau)
    return [t / n for t in total]


def test_pretrain_loss_matches_loop_oracle():
    emb, queue, keys = random_step(seed=1, shared=3)
    total, terms = pretrain_loss(emb, queue, keys, 0.07)
    want = loop_oracle(emb, queue, keys, 0.07)
    for got, ref in zip(terms, want):
        assert abs(got.item() - ref) <= 1e-6 * ref
    assert abs(total.item() - sum(want)) <= 1e-6 * sum(want)


def test_pretrain_loss_is_sum_of_terms():
    emb, queue, keys = random_step(seed=2)
    total, terms = pretrain_loss(emb, queue, keys, 0.1)
    assert total.item() == sum(t for t in terms).item()


def test_pretrain_loss_single_tuple_empty_queue_is_zero():
    emb, _, _ = random_step(n=1, seed=3, shared=1)
    total, _ = pretrain_loss(emb, torch.zeros(0, 8, dtype=torch.float64), np.zeros((0, 2)), 0.07)
    assert total.item() == 0.0


def test_pretrain_loss_empty_batch():
    emb, queue, keys = random_step(seed=4)
    empty = StepEmbeddings(emb.h_svi[:0], emb.h_loc[:0], emb.e_traj[:0], emb.groups[:0], emb.locations[:0])
    with pytest.raises(EmptyBatch):
        pretrain_loss(empty, queue, keys, 0.07)


@settings(max_examples=20, deadline=None)
@given(st.permutations(list(range(12))))
def test_pretrain_loss_invariant_to_tuple_order(perm):
    emb, queue, keys = random_step(seed=5)
    p = torch.as_tensor(perm)
    shuffled = StepEmbeddings(emb.h_svi[p], emb.h_loc[p], emb.e_traj[p], emb.groups[p], emb.locations[perm])
    a, _ = pretrain_loss(emb, queue, keys, 0.07)
    b, _ = pretrain_loss(shuffled, queue, keys, 0.07)
    assert abs(a.item() - b.item()) <= 1e-9


def test_disabled_terms_contribute_zero():
    emb, queue, keys = random_step(seed=6)
    _, (t1, t2, t3) = pretrain_loss(emb, queue, keys, 0.07, (True, False, False))
    assert t1.item() > 0 and t2.item() == 0 and t3.item() == 0


# queue


def test_queue_capacity_and_fifo():
    q = NegativeQueue(4, 2048)
    items = torch.arange(2049 * 4, dtype=torch.float32).reshape(2049, 4)
    q.push(items[:2048])
    assert len(q) == 2048
    q.push(items[2048:])
    emb, _ = q.snapshot()
    assert len(q) == 2048
    assert torch.equal(emb, items[1:])


def test_queue_push_empty_and_order():
    q = NegativeQueue(3)
    q.push(torch.zeros(0, 3))
    assert len(q) == 0
    items = torch.randn(5, 3)
    q.push(items, [(0.1 * i, 0.2) for i in range(5)])
    emb, keys = q.snapshot()
    assert torch.equal(emb, items) and keys[4, 0] == pytest.approx(0.4)
    with pytest.raises(DimensionMismatch):
        q.push(torch.zeros(1, 4))


def test_queue_snapshot_is_a_copy_and_state_round_trips():
    q = NegativeQueue(2, 4).push(torch.ones(3, 2), [(0.5, 0.5), None, (0.1, 0.2)])
    emb, keys = q.snapshot()
    emb += 5
    assert torch.equal(q.snapshot()[0], torch.ones(3, 2))
    r = NegativeQueue.from_state(2, q.state())
    e2, k2 = r.snapshot()
    assert torch.equal(e2, torch.ones(3, 2)) and np.array_equal(k2, keys, equal_nan=True)
    assert r.capacity == 4


# sampling and augmentation


def test_sample_batch_respects_cap_and_query_set(tiny_dataset, tiny_cfg):
    counts = {len(qs) for qs in tiny_dataset.query_sets}
    assert max(counts) > tiny_cfg.pretrain_svis_per_traj
    for seed in range(20):
        b = sample_pretrain_batch(tiny_dataset, seed, tiny_cfg)
        qs = tiny_dataset.query_sets[b.traj_index]
        assert len(b) == min(len(qs), tiny_cfg.pretrain_svis_per_traj)
        ids = {p.svi_id for p in qs}
        assert all(p.svi_id in ids for p in b.points)
        assert len({p.svi_id for p in b.points}) == len(b)


def test_sample_batch_takes_all_points_when_few(tiny_dataset, tiny_cfg):
    cfg = tiny_cfg.replace(pretrain_svis_per_traj=1000)
    b = sample_pretrain_batch(tiny_dataset, 0, cfg)
    assert len(b) == len(tiny_dataset.query_sets[b.traj_index])


def test_sample_batch_deterministic(tiny_dataset, tiny_cfg):
    a = sample_pretrain_batch(tiny_dataset, 42, tiny_cfg)
    b = sample_pretrain_batch(tiny_dataset, 42, tiny_cfg)
    assert a.traj_index == b.traj_index and [p.svi_id for p in a.points] == [p.svi_id for p in b.points]
    assert torch.equal(a.images, b.images)


def test_sample_batch_without_eligible_trajectories(tiny_cfg):
    traj = Trajectory("t", [[0.0, 0.0], [0.1, 0.0]], [0.0, 1.0])
    ds = GeoDataset([traj], ["far"], [[0.9, 0.9]], torch.zeros(1, 3, 16, 16), 0.002)
    with pytest.raises(NoEligibleTrajectories):
        sample_pretrain_batch(ds, 0, tiny_cfg)


def test_augment_image_contract():
    img = torch.rand(3, 16, 16)
    assert augment_image(img, 1, enabled=False) is img
    a, b = augment_image(img, 5), augment_image(img, 5)
    assert torch.equal(a, b) and a.shape == img.shape
    assert a.min() >= 0 and a.max() <= 1
    assert not torch.equal(augment_image(img, 5), augment_image(img, 6))
    feats = torch.rand(7)
    assert augment_image(feats, 3) is feats


def test_every_pair_is_a_tuple(tiny_dataset, tiny_cfg):
    seen = [(b.traj_index, p.svi_id) for group, _ in epoch_batches(tiny_dataset, tiny_cfg, 1) for b in group for p in b.points]
    pairs = [(ti, s) for s, v in tiny_dataset.intersecting.items() for ti, _ in v]
    assert len(seen) == len(pairs) and set(seen) == set(pairs)
    sizes = [len(b) for group, _ in epoch_batches(tiny_dataset, tiny_cfg, 1) for b in group]
    assert max(sizes) == tiny_cfg.pretrain_svis_per_traj
    shared = [s for s, v in tiny_dataset.intersecting.items() if len(v) > 1]
    assert shared, "fixture should contain SVIs passed by several trajectories"


def test_epoch_batches_reach_batch_size(tiny_dataset, tiny_cfg):
    groups = [sum(len(b) for b in g) for g, _ in epoch_batches(tiny_dataset, tiny_cfg, 1)]
    assert all(n >= tiny_cfg.batch_tuples for n in groups[:-1])


# optimizer steps


class RecordingQueue(NegativeQueue):
    def __init__(self, *a, **k):
        super().__init__(*a, **k)
        self.events = []

    def snapshot(self, dtype=torch.float32):
        self.events.append(("snapshot", len(self)))
        return super().snapshot(dtype)

    def push(self, items, keys=None):
        self.events.append(("push", len(items) if hasattr(items, "__len__") else 1))
        return super().push(items, keys)


def _group(dataset, cfg, epoch=1):
    return next(epoch_batches(dataset, cfg, epoch))


def test_step_snapshots_before_push(tiny_dataset, tiny_cfg):
    model = Encoders.build(tiny_cfg, tuple(tiny_dataset.images.shape[1:]))
    queue = RecordingQueue(tiny_cfg.d, 64)
    queue.push(torch.randn(10, tiny_cfg.d), None)
    queue.events.clear()
    group, rng = _group(tiny_dataset, tiny_cfg)
    res = pretrain_step(model, group, queue, make_optimizer(model, tiny_cfg), tiny_cfg, rng)
    n = sum(len(b) for b in group)
    assert queue.events == [("snapshot", 10), ("push", 2 * n)]
    assert res.queue_size_at_loss == 10 and res.n_tuples == n
    assert math.isfinite(res.loss) and res.updated


def test_no_align_leaves_parameters_unchanged(tiny_dataset, tiny_cfg):
    cfg = tiny_cfg.replace(alignment_mode="no_align")
    model = Encoders.build(cfg, tuple(tiny_dataset.images.shape[1:]))
    before = {k: v.clone() for k, v in model.state_dict().items()}
    group, rng = _group(tiny_dataset, cfg)
    res = pretrain_step(model, group, NegativeQueue(cfg.d), make_optimizer(model, cfg), cfg, rng)
    assert not res.updated
    assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())


@pytest.mark.parametrize("mode", ["fine_grain", "segment_based"])
def test_step_updates_parameters(tiny_dataset, tiny_cfg, mode):
    cfg = tiny_cfg.replace(alignment_mode=mode)
    model = Encoders.build(cfg, tuple(tiny_dataset.images.shape[1:]))
    before = model.traj_loc.proj.weight.clone()
    group, rng = _group(tiny_dataset, cfg)
    res = pretrain_step(model, group, NegativeQueue(cfg.d), make_optimizer(model, cfg), cfg, rng)
    assert math.isfinite(res.loss)
    assert not torch.equal(before, model.traj_loc.proj.weight)


def test_pretraining_deterministic_and_resumable(tiny_dataset, tiny_cfg):
    shape = tuple(tiny_dataset.images.shape[1:])
    m1 = Encoders.build(tiny_cfg, shape)
    full, _, _ = run_pretraining(m1, tiny_dataset, tiny_cfg, 3)
    m2 = Encoders.build(tiny_cfg, shape)
    first, queue, opt = run_pretraining(m2, tiny_dataset, tiny_cfg, 2)
    rest, _, _ = run_pretraining(m2, tiny_dataset, tiny_cfg, 1, queue, opt, start_epoch=3)
    assert [r.line() for r in full] == [r.line() for r in first + rest]
