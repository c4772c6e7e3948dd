"""detkit: a desk-scale detector design toolkit.

Library layout:

- tensorops: dense NCHW kernels (conv, batchnorm folding, channel stats)
- genome: serializable detector descriptions and their JSON schema
- graph: lowering genomes to operator DAGs
- reparam: multi-branch convolution folding
- cost: FLOPs / parameter counting and roofline latency modeling
- search: training-free proxy scoring and budgeted evolutionary search
- assign: aligned label assignment with dynamic per-target top-k
- losses: detection losses and feature-distillation evaluation
- cli: the `detkit` command-line surface
"""

__version__ = "0.1.0"

from .errors import DetkitError, InfeasibleError, ShapeError, ValidationError

__all__ = ["DetkitError", "InfeasibleError", "ShapeError", "ValidationError", "__version__"]
