"""Balanced k-way graph partitioning and the multiscale partition series.

The partitioner is a self-contained multilevel scheme: heavy-edge-matching
coarsening, greedy region-growing initial assignment, and Kernighan-Lin
style boundary refinement (best-prefix passes) during uncoarsening. It is
deterministic for a fixed seed. Coarser scales are built by pair-merging
subgraphs of the previous scale, so the halving relation holds exactly and
boundary nodes of fine subgraphs meet inside coarser ones.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, as_tensor, gather_nodes, scatter_nodes
from .errors import ContractError, InputError, ShapeError
from .graph import SpatialGraph


@dataclass
class PartitionPlan:
    """Node-to-subgraph assignment plus the padded gather layout it induces."""

    n: int
    p: int
    m: int
    assign: np.ndarray  # (n,) subgraph index per node
    gather: np.ndarray  # (p, m) node ids, -1 on padding
    mask: np.ndarray  # (p, m) True where gather >= 0
    edge_cut: float
    balance_factor: float
    seed: int
    achieved_factor: float = 1.0
    over_balance: bool = False

    def sizes(self) -> np.ndarray:
        return self.mask.sum(axis=1)

    def validate(self, g: SpatialGraph | None = None):
        """Check every structural invariant; raises on violation."""
        if sorted(self.gather[self.mask].tolist()) != list(range(self.n)):
            raise ContractError("gather table does not cover every node exactly once")
        if not np.array_equal(self.mask, self.gather >= 0):
            raise ContractError("mask disagrees with gather padding")
        sizes = self.sizes()
        if (sizes < 1).any():
            raise ContractError("a subgraph is empty")
        cap = self.balance_factor * math.ceil(self.n / self.p)
        if sizes.max() > cap + 1e-9 and not self.over_balance:
            raise ContractError(
                f"balance violated silently: max size {sizes.max()} > {cap}"
            )
        if g is not None:
            cut = _edge_cut(g, self.assign)
            if abs(cut - self.edge_cut) > 1e-9 * max(1.0, abs(cut)):
                raise ContractError(
                    f"stored edge_cut {self.edge_cut} != recomputed {cut}"
                )

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "p": self.p,
            "m": self.m,
            "balance_factor": self.balance_factor,
            "seed": self.seed,
            "edge_cut": self.edge_cut,
            "assign": self.assign.tolist(),
            "achieved_factor": self.achieved_factor,
            "over_balance": self.over_balance,
        }


@dataclass
class ScaleSeries:
    """Partitions for successive blocks; subgraph count halves (ceil) per level."""

    plans: list
    merge_maps: list = field(default_factory=list)  # maps[i]: plans[i].p -> plans[i+1] index

    def __len__(self):
        return len(self.plans)

    def validate(self, g: SpatialGraph | None = None):
        for plan in self.plans:
            plan.validate(g)
        for i in range(1, len(self.plans)):
            prev, cur = self.plans[i - 1], self.plans[i]
            if cur.p != math.ceil(prev.p / 2):
                raise ContractError(
                    f"halving violated at level {i}: {prev.p} -> {cur.p}"
                )
            mapping = self.merge_maps[i - 1]
            if not np.array_equal(cur.assign, mapping[prev.assign]):
                raise ContractError(f"level {i} is not a union of level {i - 1} groups")

    def to_dict(self) -> dict:
        return {
            "plans": [p.to_dict() for p in self.plans],
            "merge_maps": [m.tolist() for m in self.merge_maps],
        }


def plan_from_assign(
    assign,
    p: int,
    g: SpatialGraph | None = None,
    balance_factor: float = 1.3,
    seed: int = 0,
) -> PartitionPlan:
    """Build the padded layout (gather/mask/m) a raw assignment induces."""
    assign = np.asarray(assign, dtype=np.int64)
    n = assign.shape[0]
    sizes = np.bincount(assign, minlength=p)
    if (sizes == 0).any():
        raise ContractError(f"empty subgraph in assignment: sizes {sizes.tolist()}")
    m = int(sizes.max())
    gather = np.full((p, m), -1, dtype=np.int64)
    for part in range(p):
        nodes = np.flatnonzero(assign == part)
        gather[part, : nodes.size] = nodes
    mask = gather >= 0
    cut = _edge_cut(g, assign) if g is not None else 0.0
    cap = balance_factor * math.ceil(n / p)
    achieved = m / math.ceil(n / p)
    return PartitionPlan(
        n=n,
        p=p,
        m=m,
        assign=assign,
        gather=gather,
        mask=mask,
        edge_cut=cut,
        balance_factor=balance_factor,
        seed=seed,
        achieved_factor=achieved,
        over_balance=bool(m > cap + 1e-9),
    )


def uniform_plan(n: int, p: int) -> PartitionPlan:
    """Contiguous chunks of near-equal size; handy for benchmarks and oracles."""
    if not 1 <= p <= n:
        raise InputError(f"p must lie in [1, {n}], got {p}")
    bounds = np.linspace(0, n, p + 1).round().astype(np.int64)
    assign = np.zeros(n, dtype=np.int64)
    for part in range(p):
        assign[bounds[part] : bounds[part + 1]] = part
    return plan_from_assign(assign, p)


def _edge_cut(g: SpatialGraph, assign) -> float:
    return sum(w for i, j, w in g.edges() if assign[i] != assign[j])


# ---------------------------------------------------------------------------
# multilevel k-way partitioning


def partition_kway(
    g: SpatialGraph, p: int, balance_factor: float = 1.3, seed: int = 0
) -> PartitionPlan:
    """Balanced k-way partition minimizing edge cut.

    Coarsens by heavy-edge matching down to max(4p, 64) nodes, grows p
    regions greedily (several seeded restarts, best cut kept), then refines
    with KL/FM passes while uncoarsening. Balance means max subgraph size
    <= balance_factor * ceil(n/p); if that cannot be met the plan is
    returned flagged over_balance with the achieved factor.
    """
    n = g.n
    if not 1 <= p <= n:
        raise InputError(f"p must lie in [1, {n}], got {p}")
    if balance_factor < 1:
        raise InputError("balance_factor must be >= 1")
    if p == 1:
        return plan_from_assign(np.zeros(n, dtype=np.int64), 1, g, balance_factor, seed)
    if p == n:
        return plan_from_assign(np.arange(n, dtype=np.int64), p, g, balance_factor, seed)

    rng = np.random.default_rng(seed)
    adj = [dict(sorted(g.adj[i].items())) for i in range(n)]
    node_w = np.ones(n, dtype=np.int64)
    cap = balance_factor * math.ceil(n / p)

    # coarsening
    levels = []  # (fine adj, fine node_w, fine->coarse map)
    target = max(4 * p, 64)
    while len(adj) > target:
        cmap, cn = _heavy_edge_matching(adj, rng)
        if cn > 0.95 * len(adj):
            break
        cadj, cw = _contract(adj, node_w, cmap, cn)
        levels.append((adj, node_w, cmap))
        adj, node_w = cadj, cw

    # initial partition on the coarsest graph, best of a few seeded restarts
    best_assign, best_key = None, None
    for child in rng.spawn(4):
        assign = _region_grow(adj, node_w, p, child)
        _rebalance(adj, node_w, assign, p, cap)
        _fm_refine(adj, node_w, assign, p, cap)
        cut = _cut_of(adj, assign)
        feasible = _part_weights(node_w, assign, p).max() <= cap + 1e-9
        key = (not feasible, cut)
        if best_key is None or key < best_key:
            best_assign, best_key = assign.copy(), key
    assign = best_assign

    # uncoarsen and refine at every level
    for fine_adj, fine_w, cmap in reversed(levels):
        assign = assign[cmap]
        _rebalance(fine_adj, fine_w, assign, p, cap)
        _fm_refine(fine_adj, fine_w, assign, p, cap)

    plan = plan_from_assign(assign, p, g, balance_factor, seed)
    plan.validate(g)
    return plan


def _heavy_edge_matching(adj, rng):
    """Match each node with its heaviest unmatched neighbor, random visit order."""
    nn = len(adj)
    match = np.full(nn, -1, dtype=np.int64)
    for u in rng.permutation(nn):
        if match[u] >= 0:
            continue
        best, best_w = -1, -1.0
        for v, w in adj[u].items():
            if match[v] >= 0:
                continue
            if w > best_w or (w == best_w and v < best):
                best, best_w = v, w
        if best >= 0:
            match[u] = best
            match[best] = u
        else:
            match[u] = u
    cmap = np.full(nn, -1, dtype=np.int64)
    next_id = 0
    for u in range(nn):
        if cmap[u] >= 0:
            continue
        cmap[u] = next_id
        cmap[match[u]] = next_id
        next_id += 1
    return cmap, next_id


def _contract(adj, node_w, cmap, cn):
    cadj = [dict() for _ in range(cn)]
    cw = np.zeros(cn, dtype=np.int64)
    for u in range(len(adj)):
        cw[cmap[u]] += node_w[u]
        cu = cmap[u]
        for v, w in adj[u].items():
            if v <= u:
                continue
            cv = cmap[v]
            if cu == cv:
                continue
            cadj[cu][cv] = cadj[cu].get(cv, 0.0) + w
            cadj[cv][cu] = cadj[cv].get(cu, 0.0) + w
    return [dict(sorted(row.items())) for row in cadj], cw


def _region_grow(adj, node_w, p, rng):
    """Grow p regions to the ideal weight, each from a random seed node."""
    nn = len(adj)
    assign = np.full(nn, -1, dtype=np.int64)
    ideal = math.ceil(int(node_w.sum()) / p)
    unassigned = nn
    for part in range(p - 1):
        later_parts = p - part - 1
        cur = int(rng.choice(np.flatnonzero(assign < 0)))
        part_w = 0
        conn = {}
        while True:
            assign[cur] = part
            part_w += int(node_w[cur])
            unassigned -= 1
            conn.pop(cur, None)
            if unassigned <= later_parts or part_w >= ideal:
                break
            for v, w in adj[cur].items():
                if assign[v] < 0:
                    conn[v] = conn.get(v, 0.0) + w
            if conn:
                cur = max(conn.items(), key=lambda kv: (kv[1], -kv[0]))[0]
            else:
                cur = int(rng.choice(np.flatnonzero(assign < 0)))
    assign[assign < 0] = p - 1
    return assign


def _part_weights(node_w, assign, p):
    return np.bincount(assign, weights=node_w, minlength=p)


def _cut_of(adj, assign) -> float:
    cut = 0.0
    for u in range(len(adj)):
        for v, w in adj[u].items():
            if v > u and assign[u] != assign[v]:
                cut += w
    return cut


def _node_conn(adj, assign, u, p):
    """Total edge weight from u into each part."""
    conn = np.zeros(p)
    for v, w in adj[u].items():
        conn[assign[v]] += w
    return conn


def _boundary(adj, assign):
    out = []
    for u in range(len(adj)):
        for v in adj[u]:
            if assign[v] != assign[u]:
                out.append(u)
                break
    return out


def _fm_refine(adj, node_w, assign, p, cap, max_passes: int = 10):
    """KL/FM passes: greedy single-node moves with best-prefix rollback.

    Moves may go downhill inside a pass; the pass keeps the prefix with the
    best total gain. Balance and non-emptiness are never violated. Ties
    break on (gain, lowest node, lowest target part) so runs are
    deterministic.
    """
    nn = len(adj)
    part_w = _part_weights(node_w, assign, p)
    part_count = np.bincount(assign, minlength=p)
    move_limit = nn if nn <= 128 else max(128, nn // 8)
    for _ in range(max_passes):
        locked = np.zeros(nn, dtype=bool)
        moves = []
        improvement = 0.0
        best_improvement = 0.0
        best_prefix = 0
        while len(moves) < move_limit:
            candidates = [u for u in _boundary(adj, assign) if not locked[u]]
            best = None  # (gain, u, to)
            for u in candidates:
                frm = assign[u]
                if part_count[frm] == 1:
                    continue
                conn = _node_conn(adj, assign, u, p)
                for to in range(p):
                    if to == frm or part_w[to] + node_w[u] > cap + 1e-9:
                        continue
                    gain = conn[to] - conn[frm]
                    if best is None or (gain, -u, -to) > (best[0], -best[1], -best[2]):
                        best = (gain, u, to)
            if best is None:
                break
            gain, u, to = best
            frm = assign[u]
            assign[u] = to
            part_w[frm] -= node_w[u]
            part_w[to] += node_w[u]
            part_count[frm] -= 1
            part_count[to] += 1
            locked[u] = True
            moves.append((u, frm, to))
            improvement += gain
            if improvement > best_improvement + 1e-12:
                best_improvement = improvement
                best_prefix = len(moves)
        for u, frm, to in reversed(moves[best_prefix:]):
            assign[u] = frm
            part_w[to] -= node_w[u]
            part_w[frm] += node_w[u]
            part_count[to] -= 1
            part_count[frm] += 1
        if best_improvement <= 1e-12:
            break
    return assign


def _rebalance(adj, node_w, assign, p, cap):
    """Move nodes out of overweight parts, cheapest cut increase first."""
    nn = len(adj)
    part_w = _part_weights(node_w, assign, p)
    part_count = np.bincount(assign, minlength=p)
    for _ in range(4 * nn):
        over = int(np.argmax(part_w))
        if part_w[over] <= cap + 1e-9:
            return True
        best = None  # (gain, u, to)
        for u in np.flatnonzero(assign == over):
            if part_count[over] == 1:
                break
            conn = _node_conn(adj, assign, int(u), p)
            for to in range(p):
                if to == over or part_w[to] + node_w[u] > cap + 1e-9:
                    continue
                gain = conn[to] - conn[over]
                if best is None or (gain, -u, -to) > (best[0], -best[1], -best[2]):
                    best = (gain, int(u), to)
        if best is None:
            # no receiver under the cap; shift to the lightest part if that
            # still improves the imbalance, otherwise give up
            lightest = int(np.argmin(part_w))
            movable = np.flatnonzero(assign == over)
            if part_count[over] == 1 or part_w[lightest] + node_w[movable].min() >= part_w[over]:
                return False
            u = int(movable[np.argmin(node_w[movable])])
            best = (0.0, u, lightest)
        _, u, to = best
        frm = assign[u]
        assign[u] = to
        part_w[frm] -= node_w[u]
        part_w[to] += node_w[u]
        part_count[frm] -= 1
        part_count[to] += 1
    return bool(part_w.max() <= cap + 1e-9)


# ---------------------------------------------------------------------------
# multiscale series


def max_feasible_levels(p0: int) -> int:
    return int(math.floor(math.log2(p0))) + 1


def build_scale_series(
    g: SpatialGraph,
    p0: int,
    l: int,
    balance_factor: float = 1.3,
    seed: int = 0,
) -> ScaleSeries:
    """Partition once at p0 subgraphs, then pair-merge level by level.

    Each level merges the pair of remaining subgraphs with the largest
    inter-subgraph cut weight first (ties to the lowest indices); an odd
    leftover carries over unmerged, giving p_i = ceil(p_{i-1} / 2).
    """
    if p0 < 1 or l < 1:
        raise InputError("p0 and l must be >= 1")
    if p0 < 2 ** (l - 1):
        raise InputError(
            f"p0={p0} cannot sustain {l} levels; maximum feasible levels: "
            f"{max_feasible_levels(p0)}"
        )
    plans = [partition_kway(g, p0, balance_factor, seed)]
    merge_maps = []
    for _ in range(1, l):
        prev = plans[-1]
        cut_w = np.zeros((prev.p, prev.p))
        for i, j, w in g.edges():
            a, b = prev.assign[i], prev.assign[j]
            if a != b:
                cut_w[a, b] += w
                cut_w[b, a] += w
        available = list(range(prev.p))
        groups = []
        while len(available) >= 2:
            best = None  # (weight, a, b)
            for ia, a in enumerate(available):
                for b in available[ia + 1 :]:
                    w = cut_w[a, b]
                    if best is None or (w, -a, -b) > (best[0], -best[1], -best[2]):
                        best = (w, a, b)
            _, a, b = best
            groups.append((a, b))
            available.remove(a)
            available.remove(b)
        if available:
            groups.append((available[0],))
        groups.sort(key=min)
        mapping = np.zeros(prev.p, dtype=np.int64)
        for gi, grp in enumerate(groups):
            for member in grp:
                mapping[member] = gi
        merge_maps.append(mapping)
        assign = mapping[prev.assign]
        plans.append(plan_from_assign(assign, len(groups), g, balance_factor, seed))
    series = ScaleSeries(plans=plans, merge_maps=merge_maps)
    series.validate(g)
    return series


# ---------------------------------------------------------------------------
# padded layout application


def apply_plan(x, plan: PartitionPlan) -> Tensor:
    """Reshape node rows (..., n, d) into the padded (..., p, m, d) layout."""
    t = as_tensor(x)
    if t.ndim < 2 or t.shape[-2] != plan.n:
        raise ShapeError(
            f"apply_plan expects (..., {plan.n}, d), got {tuple(t.shape)}"
        )
    return gather_nodes(t, plan.gather, plan.mask)


def revert_plan(y, plan: PartitionPlan) -> Tensor:
    """Restore (..., p, m, d) to node order (..., n, d); padding is dropped."""
    t = as_tensor(y)
    if t.ndim < 3 or t.shape[-3] != plan.p or t.shape[-2] != plan.m:
        raise ShapeError(
            f"revert_plan expects (..., {plan.p}, {plan.m}, d), got {tuple(t.shape)}"
        )
    return scatter_nodes(t, plan.gather, plan.mask, plan.n)


# ---------------------------------------------------------------------------
# plan files


def _plan_from_dict(doc: dict) -> PartitionPlan:
    plan = plan_from_assign(
        np.asarray(doc["assign"], dtype=np.int64),
        doc["p"],
        None,
        doc["balance_factor"],
        doc["seed"],
    )
    plan.edge_cut = float(doc["edge_cut"])
    plan.achieved_factor = float(doc.get("achieved_factor", plan.achieved_factor))
    plan.over_balance = bool(doc.get("over_balance", plan.over_balance))
    if plan.m != doc["m"] or plan.n != doc["n"]:
        raise InputError("plan file layout disagrees with its assignment")
    return plan


def save_series(path, series: ScaleSeries):
    with open(path, "w") as fh:
        json.dump(series.to_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")


def load_series(path) -> ScaleSeries:
    with open(path) as fh:
        doc = json.load(fh)
    plans = [_plan_from_dict(d) for d in doc["plans"]]
    maps = [np.asarray(m, dtype=np.int64) for m in doc["merge_maps"]]
    series = ScaleSeries(plans=plans, merge_maps=maps)
    series.validate()
    return series
