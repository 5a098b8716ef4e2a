"""Oversampling batch scheduler.

Builds one epoch's batches so that (i) every batch reserves one slot per
foreground class, filled by a distinct sample from that class's set, (ii)
every foreground sample occupies at least one slot somewhere in the epoch,
(iii) the remaining filler slots seat every background-only sample at least
once, and the number of batches T is minimal.

Feasibility for a given T is an integer multiplicity problem: choose
m(sample, class) >= 0 supported on class membership with every column summing
to T, every sample's total multiplicity in [1, T]. Such multiplicities exist
iff a circulation with lower bounds exists (solved by max-flow), and they
always decompose into T per-batch systems of distinct representatives
(bipartite multigraphs with max degree T are T-edge-colorable), which the
planner realizes with Kempe-chain coloring. Feasibility is monotone in T, so
the minimum is found by binary search.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import ClassIndex
from .errors import ConfigError, InfeasibleScheduleError


@dataclass
class SchedulerConfig:
    batch_size: int
    num_classes: int
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1:
            raise ConfigError(f"need at least one foreground class, got {self.num_classes}")
        if self.batch_size <= self.num_classes:
            raise ConfigError(
                f"batch size must exceed the class count: "
                f"B={self.batch_size} <= C={self.num_classes}")


@dataclass
class BatchPlan:
    """slots[t] is an ordered list of (patch_id, slot_class); slot_class is
    None for filler slots."""
    batches: list[list[tuple[int, int | None]]]
    batch_size: int
    num_classes: int
    notes: list[str] = field(default_factory=list)

    @property
    def num_batches(self) -> int:
        return len(self.batches)


@dataclass
class PlanReport:
    violations: list[str]
    appearance_counts: dict[int, int]
    oversampling_factors: dict[int, float]

    @property
    def ok(self) -> bool:
        return not self.violations


class _Dinic:
    """Deterministic max-flow (adjacency arrays, BFS levels, DFS blocking flow)."""

    def __init__(self, n):
        self.n = n
        self.adj = [[] for _ in range(n)]
        self.to = []
        self.cap = []

    def add_edge(self, u, v, c):
        idx = len(self.to)
        self.adj[u].append(idx)
        self.to.append(v)
        self.cap.append(c)
        self.adj[v].append(idx + 1)
        self.to.append(u)
        self.cap.append(0)
        return idx

    def max_flow(self, s, t):
        flow = 0
        while True:
            level = [-1] * self.n
            level[s] = 0
            queue = [s]
            for u in queue:
                for ei in self.adj[u]:
                    v = self.to[ei]
                    if self.cap[ei] > 0 and level[v] < 0:
                        level[v] = level[u] + 1
                        queue.append(v)
            if level[t] < 0:
                return flow
            it = [0] * self.n

            def dfs(u, pushed):
                if u == t:
                    return pushed
                while it[u] < len(self.adj[u]):
                    ei = self.adj[u][it[u]]
                    v = self.to[ei]
                    if self.cap[ei] > 0 and level[v] == level[u] + 1:
                        got = dfs(v, min(pushed, self.cap[ei]))
                        if got:
                            self.cap[ei] -= got
                            self.cap[ei ^ 1] += got
                            return got
                    it[u] += 1
                return 0

            while True:
                pushed = dfs(s, 1 << 60)
                if not pushed:
                    break
                flow += pushed


def _foreground_ids(index: ClassIndex) -> list[int]:
    ids = set()
    for c in range(1, index.num_classes + 1):
        ids.update(index.sets[c])
    return sorted(ids)


def _validate(index: ClassIndex, config: SchedulerConfig):
    if index.num_classes != config.num_classes:
        raise ConfigError(
            f"index has {index.num_classes} classes, config says {config.num_classes}")
    for c in range(1, config.num_classes + 1):
        if not index.sets[c]:
            raise InfeasibleScheduleError(f"class {c} has no samples (S_{c} is empty)")


def _solve_multiplicities(index: ClassIndex, config: SchedulerConfig, t: int):
    """Returns m[s][c] for batch count t, or None if infeasible.

    Network with lower bounds: source->class [t,t], class->sample [0,t],
    sample->sink [1,t], sink->source [0,inf]; reduced to plain max-flow via
    the standard excess transformation.
    """
    nc = config.num_classes
    fg = _foreground_ids(index)
    if t * (config.batch_size - nc) < len(index.sets[0]):
        return None
    pos = {sid: i for i, sid in enumerate(fg)}
    n = len(fg)
    src, sink = 0, nc + n + 1
    ss, st = sink + 1, sink + 2
    net = _Dinic(st + 1)
    inf = 1 << 60

    class_edges = {}
    for c in range(1, nc + 1):
        for sid in index.sets[c]:
            class_edges[(c, sid)] = net.add_edge(c, nc + 1 + pos[sid], t)
    for i in range(n):
        net.add_edge(nc + 1 + i, sink, t - 1)
    net.add_edge(sink, src, inf)
    # excesses from lower bounds: +t at each class / -C*t at source (edges
    # src->class are saturated), +n at sink / -1 at each sample
    demand = 0
    for c in range(1, nc + 1):
        net.add_edge(ss, c, t)
        demand += t
    net.add_edge(src, st, nc * t)
    net.add_edge(ss, sink, n)
    demand += n
    for i in range(n):
        net.add_edge(nc + 1 + i, st, 1)

    if net.max_flow(ss, st) != demand:
        return None
    mult = {}
    for (c, sid), ei in class_edges.items():
        m = t - net.cap[ei]
        if m:
            mult[(c, sid)] = m
    return mult


def lower_bounds(index: ClassIndex, config: SchedulerConfig) -> tuple[int, int]:
    """(filler bound ceil(|S_0|/(B-C)), matching bound max_c |exclusive(c)|)."""
    nc = config.num_classes
    fill = -(-len(index.sets[0]) // (config.batch_size - nc))
    membership = {}
    for c in range(1, nc + 1):
        for sid in index.sets[c]:
            membership.setdefault(sid, set()).add(c)
    excl = [0] * (nc + 1)
    for sid, classes in membership.items():
        if len(classes) == 1:
            excl[next(iter(classes))] += 1
    return fill, max(excl)


def min_batch_count(index: ClassIndex, config: SchedulerConfig) -> int:
    """Smallest feasible batch count; raises InfeasibleScheduleError when no
    T admits a valid plan (e.g. one sample is the sole member of two sets)."""
    _validate(index, config)
    fill_lb, match_lb = lower_bounds(index, config)
    fg = _foreground_ids(index)
    lo = max(1, fill_lb, match_lb, -(-len(fg) // config.num_classes))
    hi = lo
    limit = len(fg) + len(index.sets[0]) + config.num_classes + 8
    while _solve_multiplicities(index, config, hi) is None:
        hi *= 2
        if hi > limit:
            raise InfeasibleScheduleError(
                "no batch count satisfies the distinct-slot coverage "
                "constraints for this class index")
    while lo < hi:
        mid = (lo + hi) // 2
        if _solve_multiplicities(index, config, mid) is None:
            lo = mid + 1
        else:
            hi = mid
    return lo


def _rebalance(mult, index, config, t):
    """Evens out per-class repeat counts: moves copies from the most- to the
    least-used member while total multiplicities stay within [1, t]."""
    degree = {}
    for (c, sid), m in mult.items():
        degree[sid] = degree.get(sid, 0) + m
    for c in range(1, config.num_classes + 1):
        members = sorted(index.sets[c])
        while True:
            counts = [(mult.get((c, s), 0), s) for s in members]
            hi_m, hi_s = max(counts)
            lo_candidates = [(m, s) for m, s in counts if degree.get(s, 0) < t]
            if not lo_candidates:
                break
            lo_m, lo_s = min(lo_candidates)
            if hi_m < lo_m + 2:
                break
            mult[(c, hi_s)] = hi_m - 1
            mult[(c, lo_s)] = lo_m + 1
            degree[hi_s] -= 1
            degree[lo_s] = degree.get(lo_s, 0) + 1
    return {k: m for k, m in mult.items() if m > 0}


def _color_batches(mult, config, t):
    """Kempe-chain edge coloring of the (class, sample) multigraph with t
    colors; color r of class c yields batch r's class-c slot."""
    nc = config.num_classes
    edges = []
    for (c, sid), m in sorted(mult.items()):
        edges.extend([(c, sid)] * m)
    samples = sorted({sid for _, sid in edges})
    spos = {sid: i for i, sid in enumerate(samples)}
    cls_color = [[-1] * t for _ in range(nc + 1)]
    smp_color = [[-1] * t for _ in range(len(samples))]
    ecls = [c for c, _ in edges]
    esmp = [spos[sid] for _, sid in edges]

    for e in range(len(edges)):
        c, s = ecls[e], esmp[e]
        alpha = cls_color[c].index(-1)
        if smp_color[s][alpha] != -1:
            beta = smp_color[s].index(-1)
            # flip the alpha/beta alternating chain starting at the sample;
            # bipartite parity keeps it away from class c, so alpha frees up
            chain = []
            node, node_is_sample, want = s, True, alpha
            while True:
                e2 = smp_color[node][want] if node_is_sample else cls_color[node][want]
                if e2 == -1:
                    break
                chain.append((e2, want))
                node = ecls[e2] if node_is_sample else esmp[e2]
                node_is_sample = not node_is_sample
                want = beta if want == alpha else alpha
            for e2, old in chain:
                cls_color[ecls[e2]][old] = -1
                smp_color[esmp[e2]][old] = -1
            for e2, old in chain:
                new = beta if old == alpha else alpha
                cls_color[ecls[e2]][new] = e2
                smp_color[esmp[e2]][new] = e2
        cls_color[c][alpha] = e
        smp_color[s][alpha] = e

    batches = []
    for r in range(t):
        slots = []
        for c in range(1, nc + 1):
            e = cls_color[c][r]
            slots.append((samples[esmp[e]], c))
        batches.append(slots)
    return batches


class EpochScheduler:
    """Computes the minimal batch structure once, then emits cheap per-epoch
    shuffles of it. One epoch's replan therefore costs far less than the
    training steps it schedules."""

    def __init__(self, index: ClassIndex, config: SchedulerConfig):
        _validate(index, config)
        self.index = index
        self.config = config
        self.num_batches = min_batch_count(index, config)
        mult = _solve_multiplicities(index, config, self.num_batches)
        mult = _rebalance(mult, index, config, self.num_batches)
        self._slot_batches = _color_batches(mult, config, self.num_batches)
        self._filler_pool = list(index.sets[0])
        self.notes = []
        if not self._filler_pool:
            self._filler_pool = _foreground_ids(index)
            self.notes.append(
                "no background-only samples; filler slots drawn from the "
                "foreground pool")

    def plan_for_epoch(self, seed) -> BatchPlan:
        seed_key = [seed] if isinstance(seed, (int, np.integer)) else list(seed)
        rng = np.random.default_rng(seed_key + [0x5EED])
        t = self.num_batches
        n_fill = self.config.batch_size - self.config.num_classes
        pool = np.asarray(self._filler_pool)
        fillers = []
        while len(fillers) < t * n_fill:
            fillers.extend(int(i) for i in rng.permutation(pool))
        batches = []
        for r in range(t):
            slots = list(self._slot_batches[r])
            slots += [(fillers[r * n_fill + k], None) for k in range(n_fill)]
            order = rng.permutation(len(slots))
            batches.append([slots[i] for i in order])
        batch_order = rng.permutation(t)
        batches = [batches[i] for i in batch_order]
        return BatchPlan(batches=batches, batch_size=self.config.batch_size,
                         num_classes=self.config.num_classes,
                         notes=list(self.notes))


def build_plan(index: ClassIndex, config: SchedulerConfig) -> BatchPlan:
    return EpochScheduler(index, config).plan_for_epoch(config.seed)


def verify_plan(plan: BatchPlan, index: ClassIndex,
                config: SchedulerConfig) -> PlanReport:
    """Independent checker: reports (never raises) violations of the three
    plan invariants plus slot-assignment validity."""
    violations = []
    member = [set(s) for s in index.sets]
    all_ids = set().union(*member) if member else set()
    appearances = {sid: 0 for sid in sorted(all_ids)}
    slot_appearances = {sid: 0 for sid in sorted(all_ids)}

    for t, batch in enumerate(plan.batches):
        if len(batch) != config.batch_size:
            violations.append(
                f"batch {t} has {len(batch)} slots, expected {config.batch_size}")
        present = {sid for sid, _ in batch}
        for c in range(1, config.num_classes + 1):
            if not (present & member[c]):
                violations.append(f"batch {t} contains no sample of class {c}")
        seen_fg = set()
        for sid, slot_class in batch:
            appearances[sid] = appearances.get(sid, 0) + 1
            if slot_class is not None:
                slot_appearances[sid] = slot_appearances.get(sid, 0) + 1
                if sid in seen_fg:
                    violations.append(
                        f"batch {t} reuses sample {sid} in two foreground slots")
                seen_fg.add(sid)
                if sid not in member[slot_class]:
                    violations.append(
                        f"batch {t}: sample {sid} fills a class-{slot_class} "
                        f"slot but is not in S_{slot_class}")

    for sid in sorted(all_ids):
        if appearances.get(sid, 0) == 0:
            violations.append(f"sample {sid} never appears in any batch")

    factors = {}
    for c in range(1, config.num_classes + 1):
        size = len(member[c])
        total = sum(slot_appearances.get(sid, 0) for sid in member[c])
        factors[c] = total / size if size else 0.0
    return PlanReport(violations=violations,
                      appearance_counts=appearances,
                      oversampling_factors=factors)


def format_plan(plan: BatchPlan) -> str:
    """One batch per line; foreground slots as id:class, fillers as id:-."""
    lines = []
    for batch in plan.batches:
        lines.append(" ".join(
            f"{sid}:{cls}" if cls is not None else f"{sid}:-"
            for sid, cls in batch))
    return "\n".join(lines) + "\n"
