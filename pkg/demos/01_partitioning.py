"""Balanced k-way partitioning and the coarsening scale series.

Builds a sensor grid, partitions it into 8 balanced subgraphs, and then
pair-merges the partition twice, printing the layout at every scale. The
coarser scales are what successive attention blocks consume: the subgraph
count halves each level, so the receptive field of the local attention
doubles while the global exchange shrinks.
"""
import numpy as np

from sbaformer import build_scale_series, make_grid_graph, partition_kway

graph = make_grid_graph(8, 8)
print(f"graph: {graph.n} nodes, {sum(1 for _ in graph.edges())} edges (8x8 grid)")

# one flat partition: balanced, minimal edge cut, deterministic per seed
plan = partition_kway(graph, p=8, balance_factor=1.3, seed=0)
print(f"\nflat partition into p={plan.p}:")
print(f"  largest subgraph m={plan.m}, edge cut {plan.edge_cut:g}, "
      f"balance {plan.achieved_factor:.2f}")
for part in range(plan.p):
    nodes = np.flatnonzero(plan.assign == part)
    print(f"  subgraph {part}: {nodes.tolist()}")

# the multiscale series: 8 -> 4 -> 2 subgraphs by merging the most strongly
# connected pairs first, so neighborhoods grow along the grid structure
series = build_scale_series(graph, p0=8, l=3, seed=0)
print("\nscale series:")
for level, p in enumerate(series.plans):
    print(f"  level {level}: p={p.p} m={p.m} edge_cut={p.edge_cut:g}")
for level, mapping in enumerate(series.merge_maps):
    groups = {}
    for fine, coarse in enumerate(mapping):
        groups.setdefault(int(coarse), []).append(fine)
    print(f"  merge {level}->{level + 1}: "
          + ", ".join(f"{v} -> {k}" for k, v in sorted(groups.items())))
