"""Budgeted architecture search on the toy space: score candidates without
training, keep the feasible Pareto set, and show seed determinism.

    python demos/demo_budgeted_search.py
"""
import logging

from detkit.cost import builtin_profile, cost_report
from detkit.genome import preset_genome
from detkit.graph import build_graph
from detkit.search import SearchConfig, search

logging.basicConfig(level=logging.INFO, format="%(message)s")

seed_genome = preset_genome("tiny")
profile = builtin_profile("t4-like")
seed_latency = cost_report(build_graph(seed_genome), profile).latency_ms
print(f"seed genome: modeled latency {seed_latency:.3f} ms")

cfg = SearchConfig(
    population=8,
    generations=12,
    mutations_per_child=1,
    latency_budget_ms=1.25 * seed_latency,
    seed=7,
    device_profile=profile,
)
archive = search(seed_genome, cfg)

print(f"\narchive: {len(archive.entries)} non-dominated genomes within "
      f"{cfg.latency_budget_ms:.3f} ms")
for entry in archive.sorted_entries():
    widths = [b.out_ch for b in entry.genome.backbone]
    print(f"  score {entry.score.value:12.1f}  latency {entry.latency_ms:6.3f} ms  "
          f"flops {entry.cost.flops/1e9:5.2f} G  backbone widths {widths}")

best = archive.best
print(f"\nbest genome raises the proxy by "
      f"{best.score.value - archive.history[0][0][0]:.1f} over the seed")

rerun = search(seed_genome, cfg)
print(f"same seed reruns byte-identically: {rerun.to_ndjson() == archive.to_ndjson()}")
