"""Cost-model walkthrough: lower the small-scale genome, count FLOPs and
parameters exactly, and model latency on the built-in device profiles.

    python demos/demo_cost_model.py
"""
from dataclasses import replace

from detkit.cost import BUILTIN_PROFILES, cost_report
from detkit.genome import NeckConfig, preset_genome
from detkit.graph import build_graph

genome = preset_genome("s")
graph = build_graph(genome)
print(f"small genome lowers to {len(graph.nodes)} operator nodes at {genome.input_res}")

for name, profile in BUILTIN_PROFILES.items():
    report = cost_report(graph, profile)
    print(f"  {name:<10} {report.flops/1e9:6.2f} GFLOPs  {report.params/1e6:5.2f} M params"
          f"  {report.latency_ms:6.2f} ms modeled")

# section breakdown
report = cost_report(graph)
for prefix in ("backbone.", "neck.", "head."):
    flops = sum(n.flops for n in report.per_node if n.name.startswith(prefix))
    params = sum(n.params for n in report.per_node if n.name.startswith(prefix))
    print(f"  {prefix:<10} {flops/1e9:6.2f} GFLOPs  {params/1e6:5.2f} M params")

# the neck depth/width trade-off: several configurations near one budget
print("\nneck depth/width trade-off (neck-only GFLOPs):")
for depth, widths in [(2, (192, 192, 192)), (2, (128, 256, 512)), (4, (64, 128, 256)),
                      (3, (96, 192, 384)), (3, (160, 160, 160))]:
    g = replace(genome, neck=NeckConfig(depth=depth, widths=widths))
    r = cost_report(build_graph(g))
    neck = sum(n.flops for n in r.per_node if n.name.startswith("neck."))
    print(f"  depth {depth}  widths {str(widths):<17} -> {neck/1e9:6.3f} G (total {r.flops/1e9:5.2f} G)")

# dense cross-scale links cost real compute
up = replace(genome, neck=replace(genome.neck, extra_upsample=True))
delta = cost_report(build_graph(up)).flops - report.flops
print(f"\nenabling the extra up-fusion link adds {delta/1e9:.3f} GFLOPs")
