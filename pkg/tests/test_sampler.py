import itertools
import time

import numpy as np
import pytest

from balseg import sampler
from balseg.data import ClassIndex
from balseg.errors import ConfigError, InfeasibleScheduleError


def _index(s0, *fg_sets):
    return ClassIndex(sets=[list(s0)] + [list(s) for s in fg_sets],
                      num_classes=len(fg_sets))


def exhaustive_min_batches(index, config):
    """Brute-force oracle: smallest T such that T batches, each an injective
    choice of one sample per class set, jointly cover every foreground sample
    and T*(B-C) filler slots seat all of S_0. Returns None when infeasible."""
    nc = config.num_classes
    fg = sorted(set(itertools.chain.from_iterable(index.sets[1:])))
    pos = {sid: i for i, sid in enumerate(fg)}
    masks = set()
    for tup in itertools.product(*[index.sets[c] for c in range(1, nc + 1)]):
        if len(set(tup)) == nc:
            mask = 0
            for sid in tup:
                mask |= 1 << pos[sid]
            masks.add(mask)
    if not masks:
        return None
    # drop dominated options: unioning a superset mask is never worse
    maximal = [m for m in masks if not any(m != o and m | o == o for o in masks)]
    full = (1 << len(fg)) - 1
    reach = {0}
    steps = 0
    while full not in reach:
        steps += 1
        new = {m | o for m in reach for o in maximal}
        if new <= reach:
            return None
        reach |= new
    t_cover = max(steps, 1)
    if index.sets[0]:
        t_cover = max(t_cover, -(-len(index.sets[0]) // (config.batch_size - nc)))
    return t_cover


def _random_instance(rng):
    nc = int(rng.integers(1, 4))
    batch = int(rng.integers(nc + 1, 7))
    size = int(rng.integers(1, 13))
    sets = [[] for _ in range(nc + 1)]
    for sid in range(size):
        if rng.random() < 0.3:
            sets[0].append(sid)
        else:
            classes = rng.permutation(nc)[:int(rng.integers(1, nc + 1))]
            for c in classes:
                sets[int(c) + 1].append(sid)
    index = ClassIndex(sets=sets, num_classes=nc)
    config = sampler.SchedulerConfig(batch_size=batch, num_classes=nc, seed=int(rng.integers(1000)))
    return index, config


class TestMinBatchCount:
    def test_rare_class_and_fillers(self):
        # class 2 needs two slots to cover {1, 2}; four fillers need 2 batches
        index = _index([3, 4, 5, 6], [0], [1, 2])
        config = sampler.SchedulerConfig(batch_size=4, num_classes=2, seed=0)
        assert sampler.min_batch_count(index, config) == 2
        assert exhaustive_min_batches(index, config) == 2

    def test_single_batch_suffices(self):
        index = _index([], [0], [1], [2])
        config = sampler.SchedulerConfig(batch_size=4, num_classes=3, seed=0)
        assert sampler.min_batch_count(index, config) == 1

    def test_shared_singleton_infeasible(self):
        index = _index(list(range(1, 11)), [0], [0])
        config = sampler.SchedulerConfig(batch_size=4, num_classes=2, seed=0)
        with pytest.raises(InfeasibleScheduleError):
            sampler.min_batch_count(index, config)
        assert exhaustive_min_batches(index, config) is None

    def test_empty_class_named(self):
        index = _index([0, 1], [2], [])
        config = sampler.SchedulerConfig(batch_size=4, num_classes=2, seed=0)
        with pytest.raises(InfeasibleScheduleError, match="class 2"):
            sampler.min_batch_count(index, config)

    def test_batch_size_must_exceed_classes(self):
        with pytest.raises(ConfigError, match="B=2"):
            sampler.SchedulerConfig(batch_size=2, num_classes=2)

    def test_matches_exhaustive_on_random_instances(self):
        rng = np.random.default_rng(2024)
        start = time.monotonic()
        checked = 0
        while checked < 200:
            index, config = _random_instance(rng)
            if any(not index.sets[c] for c in range(1, config.num_classes + 1)):
                continue
            expected = exhaustive_min_batches(index, config)
            if expected is None:
                with pytest.raises(InfeasibleScheduleError):
                    sampler.min_batch_count(index, config)
            else:
                got = sampler.min_batch_count(index, config)
                assert got == expected, (index.sets, config)
                plan = sampler.build_plan(index, config)
                report = sampler.verify_plan(plan, index, config)
                assert report.ok, (report.violations, index.sets, config)
            checked += 1
        assert time.monotonic() - start < 60.0

    def test_bounds_tight_on_crafted_instances(self):
        # filler-bound-tight: one foreground sample, many background
        index = _index(list(range(1, 11)), [0])
        config = sampler.SchedulerConfig(batch_size=3, num_classes=1, seed=0)
        fill_lb, match_lb = sampler.lower_bounds(index, config)
        assert fill_lb == 5 and match_lb == 1
        assert sampler.min_batch_count(index, config) == 5
        # matching-bound-tight: three exclusive samples in class 1
        index = _index([], [0, 1, 2], [3])
        config = sampler.SchedulerConfig(batch_size=5, num_classes=2, seed=0)
        fill_lb, match_lb = sampler.lower_bounds(index, config)
        assert fill_lb == 0 and match_lb == 3
        assert sampler.min_batch_count(index, config) == 3


class TestBuildPlan:
    def test_documented_instance(self):
        index = _index([3, 4, 5, 6], [0], [1, 2])
        config = sampler.SchedulerConfig(batch_size=4, num_classes=2, seed=0)
        plan = sampler.build_plan(index, config)
        assert plan.num_batches == 2
        report = sampler.verify_plan(plan, index, config)
        assert report.ok
        # the lone class-1 sample is oversampled; everything else seen once
        assert report.appearance_counts[0] == 2
        for sid in (1, 2, 3, 4, 5, 6):
            assert report.appearance_counts[sid] == 1

    def test_exact_fit_no_oversampling(self):
        # |S_c| = T = 2 for both classes, |S_0| = T * (B - C) = 4
        index = _index([4, 5, 6, 7], [0, 1], [2, 3])
        config = sampler.SchedulerConfig(batch_size=4, num_classes=2, seed=1)
        plan = sampler.build_plan(index, config)
        assert plan.num_batches == 2
        report = sampler.verify_plan(plan, index, config)
        assert report.ok
        assert all(count == 1 for count in report.appearance_counts.values())

    def test_deterministic_given_seed(self):
        index = _index([5, 6, 7, 8, 9], [0, 1], [2, 3, 4])
        config = sampler.SchedulerConfig(batch_size=5, num_classes=2, seed=7)
        a = sampler.build_plan(index, config)
        b = sampler.build_plan(index, config)
        assert a.batches == b.batches
        other = sampler.build_plan(index, sampler.SchedulerConfig(5, 2, seed=8))
        assert other.num_batches == a.num_batches
        assert sampler.verify_plan(other, index, config).ok

    def test_no_background_pool_falls_back_to_foreground(self):
        index = _index([], [0, 1], [1, 2])
        config = sampler.SchedulerConfig(batch_size=4, num_classes=2, seed=0)
        plan = sampler.build_plan(index, config)
        assert plan.notes
        assert sampler.verify_plan(plan, index, config).ok


class TestVerifyPlan:
    def _plan_and_index(self):
        index = _index([3, 4, 5, 6], [0], [1, 2])
        config = sampler.SchedulerConfig(batch_size=4, num_classes=2, seed=0)
        return sampler.build_plan(index, config), index, config

    def test_built_plans_pass(self):
        plan, index, config = self._plan_and_index()
        assert sampler.verify_plan(plan, index, config).ok

    def test_missing_class_reported(self):
        plan, index, config = self._plan_and_index()
        # strip every class-2 sample out of batch 0
        plan.batches[0] = [(sid, cls) for sid, cls in plan.batches[0]
                           if sid not in index.sets[2]]
        report = sampler.verify_plan(plan, index, config)
        assert any("batch 0" in v and "class 2" in v for v in report.violations)

    def test_oversampling_factor_at_least_one(self):
        plan, index, config = self._plan_and_index()
        report = sampler.verify_plan(plan, index, config)
        for c, factor in report.oversampling_factors.items():
            assert factor >= 1.0
        # independent recount for class 1
        slot_hits = sum(
            1 for batch in plan.batches for sid, cls in batch
            if cls is not None and sid in set(index.sets[1]))
        assert report.oversampling_factors[1] == slot_hits / len(index.sets[1])


class TestFormat:
    def test_slot_annotations(self):
        index = _index([2], [0], [1])
        config = sampler.SchedulerConfig(batch_size=3, num_classes=2, seed=0)
        text = sampler.format_plan(sampler.build_plan(index, config))
        line = text.splitlines()[0]
        assert "0:1" in line and "1:2" in line and "2:-" in line
