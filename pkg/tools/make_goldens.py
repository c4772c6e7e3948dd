#!/usr/bin/env python3
"""Regenerate the golden lowering files under tests/golden/.

Run only when a template change is intentional; review the diff before
committing, since these files freeze the lowering of every block template.
"""
from pathlib import Path

from detkit.genome import BlockSpec, DetectorGenome, preset_genome
from detkit.graph import build_graph

GOLDEN = Path(__file__).resolve().parent.parent / "tests" / "golden"


def backbone_only(*blocks, input_res=(64, 64)):
    return DetectorGenome(backbone=tuple(blocks), neck=None, head=None, input_res=input_res)


CASES = {
    "convbnact": lambda: backbone_only(BlockSpec("ConvBnAct", 3, 8, stride=2, depth=2)),
    "focus": lambda: backbone_only(BlockSpec("Focus", 3, 16, stride=2)),
    "res_d2": lambda: backbone_only(BlockSpec("Res", 16, 32, stride=2, depth=2)),
    "mob_d2": lambda: backbone_only(BlockSpec("Mob", 16, 24, stride=2, depth=2)),
    "csp_d2": lambda: backbone_only(BlockSpec("Csp", 16, 32, stride=2, depth=2)),
    "spp": lambda: backbone_only(BlockSpec("Spp", 32, 32, stride=1, kernel=5)),
    "tiny_full": lambda: preset_genome("tiny"),
}


def main():
    GOLDEN.mkdir(parents=True, exist_ok=True)
    for name, make in CASES.items():
        path = GOLDEN / f"{name}.ndjson"
        path.write_text(build_graph(make()).to_ndjson())
        print(f"wrote {path}")


if __name__ == "__main__":
    main()
