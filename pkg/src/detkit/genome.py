"""Detector genomes: the serializable description of backbone, neck, and head.

A genome is immutable. The backbone is an ordered list of stages drawn from a
small block vocabulary (Mob / Res / Csp plus ConvBnAct, Focus, and Spp
utility stages); the neck is a cross-scale fusion template parameterized by
depth, per-scale widths, and fusion style; the head is projection-only when
head_depth is 0. The JSON schema is versioned and validated field by field so
errors name the offending path.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace

from .errors import ValidationError

__all__ = [
    "BLOCK_KINDS",
    "FUSION_STYLES",
    "BlockSpec",
    "NeckConfig",
    "HeadConfig",
    "DetectorGenome",
    "genome_to_json",
    "genome_from_json",
    "preset_genome",
]

SCHEMA_VERSION = 1

BLOCK_KINDS = ("Mob", "Res", "Csp", "Focus", "Spp", "ConvBnAct")
FUSION_STYLES = ("Conv", "Csp", "CspReparam", "CspReparamElan")

# Stage kinds whose depth field means "bottleneck repeats" and that may be
# swapped for one another during search.
STACKED_KINDS = ("Mob", "Res", "Csp")

PYRAMID_STRIDES = (8, 16, 32)


@dataclass(frozen=True)
class BlockSpec:
    """One backbone stage: a block kind repeated `depth` times.

    The first repeat applies the stage stride and the in->out channel change;
    later repeats keep out->out at stride 1.
    """

    kind: str
    in_ch: int
    out_ch: int
    stride: int = 1
    depth: int = 1
    kernel: int = 3

    def validate(self, path: str = "block") -> None:
        if self.kind not in BLOCK_KINDS:
            raise ValidationError(f"unsupported kind {self.kind!r}", path=f"{path}.kind")
        if self.in_ch < 1 or self.out_ch < 1:
            raise ValidationError("channels must be positive", path=f"{path}.in_ch/out_ch")
        if self.stride not in (1, 2):
            raise ValidationError(f"stride must be 1 or 2, got {self.stride}", path=f"{path}.stride")
        if self.depth < 1:
            raise ValidationError("depth must be positive", path=f"{path}.depth")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ValidationError(f"kernel must be odd and positive, got {self.kernel}", path=f"{path}.kernel")
        if self.kind == "Focus" and self.stride != 2:
            raise ValidationError("Focus rearranges 2x2 patches and must have stride 2", path=f"{path}.stride")
        if self.kind == "Spp" and self.stride != 1:
            raise ValidationError("Spp must have stride 1", path=f"{path}.stride")
        if self.kind in ("Focus", "Spp") and self.depth != 1:
            raise ValidationError(f"{self.kind} does not repeat, depth must be 1", path=f"{path}.depth")


@dataclass(frozen=True)
class NeckConfig:
    """Cross-scale fusion template: depth is the fusion-block bottleneck repeat
    count, widths are the per-scale output channels (they may differ)."""

    depth: int
    widths: tuple[int, int, int]
    fusion_style: str = "CspReparamElan"
    extra_upsample: bool = False
    extra_downsample: bool = True

    def validate(self, path: str = "neck") -> None:
        if self.depth < 1:
            raise ValidationError("depth must be positive", path=f"{path}.depth")
        if len(self.widths) != 3 or any(w < 1 for w in self.widths):
            raise ValidationError("widths must be a triple of positive integers", path=f"{path}.widths")
        if self.fusion_style not in FUSION_STYLES:
            raise ValidationError(f"unsupported fusion_style {self.fusion_style!r}", path=f"{path}.fusion_style")


@dataclass(frozen=True)
class HeadConfig:
    """Detection head. head_depth 0 keeps exactly one classification and one
    regression projection per scale; reg_bins is the box-distribution size."""

    head_depth: int = 0
    reg_bins: int = 16

    def validate(self, path: str = "head") -> None:
        if self.head_depth < 0:
            raise ValidationError("head_depth must be >= 0", path=f"{path}.head_depth")
        if self.reg_bins < 1:
            raise ValidationError("reg_bins must be positive", path=f"{path}.reg_bins")


@dataclass(frozen=True)
class DetectorGenome:
    """Full structural description of a detector.

    csp_hidden_ratio sets the hidden-channel fraction of Csp backbone stages;
    the drawing this vocabulary follows does not pin it, so it is a genome
    field rather than a constant.
    """

    backbone: tuple[BlockSpec, ...]
    neck: NeckConfig | None
    head: HeadConfig | None
    num_classes: int = 80
    input_res: tuple[int, int] = (640, 640)
    csp_hidden_ratio: float = 0.5

    def validate(self) -> None:
        if not self.backbone:
            raise ValidationError("backbone must not be empty", path="backbone")
        prev_out = None
        for i, block in enumerate(self.backbone):
            block.validate(path=f"backbone[{i}]")
            if prev_out is not None and block.in_ch != prev_out:
                raise ValidationError(
                    f"in_ch {block.in_ch} != predecessor out_ch {prev_out}",
                    path=f"backbone[{i}].in_ch",
                )
            prev_out = block.out_ch
        if self.num_classes < 1:
            raise ValidationError("num_classes must be positive", path="num_classes")
        if len(self.input_res) != 2 or any(r < 1 for r in self.input_res):
            raise ValidationError("input_res must be (H, W) with positive dims", path="input_res")
        if not 0.0 < self.csp_hidden_ratio <= 1.0:
            raise ValidationError("csp_hidden_ratio must be in (0, 1]", path="csp_hidden_ratio")
        if self.neck is not None:
            self.neck.validate()
            taps = self.pyramid_taps()
            if taps is None:
                raise ValidationError(
                    "a necked genome must emit pyramid features at strides 8/16/32",
                    path="backbone",
                )
            for r in self.input_res:
                if r % 32 != 0:
                    raise ValidationError(
                        f"input_res {self.input_res} must be divisible by 32 to reach stride 32 exactly",
                        path="input_res",
                    )
        if self.head is not None:
            if self.neck is None:
                raise ValidationError("a head requires a neck", path="head")
            self.head.validate()

    def stage_strides(self) -> tuple[int, ...]:
        """Cumulative stride after each backbone stage."""
        strides = []
        s = 1
        for block in self.backbone:
            s *= block.stride
            strides.append(s)
        return tuple(strides)

    def pyramid_taps(self) -> tuple[int, int, int] | None:
        """Indices of the last stage at strides 8, 16, and 32, or None."""
        strides = self.stage_strides()
        if not strides or max(strides) != 32:
            return None
        taps = []
        for target in PYRAMID_STRIDES:
            idx = [i for i, s in enumerate(strides) if s == target]
            if not idx:
                return None
            # last stage at this stride before the next downsample
            taps.append(max(idx))
        return tuple(taps)  # type: ignore[return-value]

    def pyramid_channels(self) -> tuple[int, int, int]:
        taps = self.pyramid_taps()
        if taps is None:
            raise ValidationError("genome has no stride-8/16/32 pyramid", path="backbone")
        return tuple(self.backbone[i].out_ch for i in taps)  # type: ignore[return-value]

    def with_backbone(self, backbone) -> "DetectorGenome":
        return replace(self, backbone=tuple(backbone))


# --- JSON schema -----------------------------------------------------------

def _require(doc: dict, key: str, path: str):
    if key not in doc:
        raise ValidationError("missing required field", path=f"{path}.{key}" if path else key)
    return doc[key]


def _as_int(value, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValidationError(f"expected integer, got {value!r}", path=path)
    return value


def genome_to_json(genome: DetectorGenome) -> str:
    """Serialize a genome to its versioned JSON document."""
    genome.validate()
    doc = {
        "schema_version": SCHEMA_VERSION,
        "num_classes": genome.num_classes,
        "input_res": list(genome.input_res),
        "csp_hidden_ratio": genome.csp_hidden_ratio,
        "backbone": [
            {
                "kind": b.kind,
                "in_ch": b.in_ch,
                "out_ch": b.out_ch,
                "stride": b.stride,
                "depth": b.depth,
                "kernel": b.kernel,
            }
            for b in genome.backbone
        ],
        "neck": None
        if genome.neck is None
        else {
            "depth": genome.neck.depth,
            "widths": list(genome.neck.widths),
            "fusion_style": genome.neck.fusion_style,
            "extra_upsample": genome.neck.extra_upsample,
            "extra_downsample": genome.neck.extra_downsample,
        },
        "head": None
        if genome.head is None
        else {"head_depth": genome.head.head_depth, "reg_bins": genome.head.reg_bins},
    }
    return json.dumps(doc, indent=2) + "\n"


def genome_from_json(text: str) -> DetectorGenome:
    """Parse and validate a genome document; errors name the failing field."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ValidationError(f"not valid JSON: {e}") from e
    if not isinstance(doc, dict):
        raise ValidationError("document root must be an object")
    version = _as_int(_require(doc, "schema_version", ""), "schema_version")
    if version != SCHEMA_VERSION:
        raise ValidationError(f"unsupported schema_version {version}", path="schema_version")

    backbone_doc = _require(doc, "backbone", "")
    if not isinstance(backbone_doc, list):
        raise ValidationError("must be a list", path="backbone")
    blocks = []
    for i, b in enumerate(backbone_doc):
        path = f"backbone[{i}]"
        if not isinstance(b, dict):
            raise ValidationError("must be an object", path=path)
        blocks.append(
            BlockSpec(
                kind=_require(b, "kind", path),
                in_ch=_as_int(_require(b, "in_ch", path), f"{path}.in_ch"),
                out_ch=_as_int(_require(b, "out_ch", path), f"{path}.out_ch"),
                stride=_as_int(b.get("stride", 1), f"{path}.stride"),
                depth=_as_int(b.get("depth", 1), f"{path}.depth"),
                kernel=_as_int(b.get("kernel", 3), f"{path}.kernel"),
            )
        )

    neck_doc = doc.get("neck")
    neck = None
    if neck_doc is not None:
        if not isinstance(neck_doc, dict):
            raise ValidationError("must be an object or null", path="neck")
        widths = _require(neck_doc, "widths", "neck")
        if not isinstance(widths, list) or len(widths) != 3:
            raise ValidationError("must be a list of 3 integers", path="neck.widths")
        neck = NeckConfig(
            depth=_as_int(_require(neck_doc, "depth", "neck"), "neck.depth"),
            widths=tuple(_as_int(w, f"neck.widths[{i}]") for i, w in enumerate(widths)),
            fusion_style=neck_doc.get("fusion_style", "CspReparamElan"),
            extra_upsample=bool(neck_doc.get("extra_upsample", False)),
            extra_downsample=bool(neck_doc.get("extra_downsample", True)),
        )

    head_doc = doc.get("head")
    head = None
    if head_doc is not None:
        if not isinstance(head_doc, dict):
            raise ValidationError("must be an object or null", path="head")
        head = HeadConfig(
            head_depth=_as_int(head_doc.get("head_depth", 0), "head.head_depth"),
            reg_bins=_as_int(head_doc.get("reg_bins", 16), "head.reg_bins"),
        )

    input_res = doc.get("input_res", [640, 640])
    if not isinstance(input_res, list) or len(input_res) != 2:
        raise ValidationError("must be [H, W]", path="input_res")
    genome = DetectorGenome(
        backbone=tuple(blocks),
        neck=neck,
        head=head,
        num_classes=_as_int(doc.get("num_classes", 80), "num_classes"),
        input_res=(_as_int(input_res[0], "input_res[0]"), _as_int(input_res[1], "input_res[1]")),
        csp_hidden_ratio=float(doc.get("csp_hidden_ratio", 0.5)),
    )
    genome.validate()
    return genome


# --- Shipped genomes ---------------------------------------------------------

def preset_genome(name: str) -> DetectorGenome:
    """Built-in genomes.

    "s" is a small-scale detector sized to land near published small-detector
    budgets at 640x640. It is a reconstruction, not ground truth: the exact
    released structures are unpublished, only the overall recipe is known.
    "tiny" is a toy genome for fast search demos and tests.
    """
    if name == "s":
        return DetectorGenome(
            backbone=(
                BlockSpec("ConvBnAct", 3, 32, stride=2, depth=1, kernel=3),
                BlockSpec("Res", 32, 64, stride=2, depth=2, kernel=3),
                BlockSpec("Res", 64, 128, stride=2, depth=5, kernel=3),
                BlockSpec("Res", 128, 256, stride=2, depth=8, kernel=3),
                BlockSpec("Res", 256, 512, stride=2, depth=4, kernel=3),
                BlockSpec("Spp", 512, 512, stride=1, depth=1, kernel=5),
            ),
            neck=NeckConfig(depth=3, widths=(96, 192, 384), fusion_style="CspReparamElan"),
            head=HeadConfig(head_depth=0, reg_bins=16),
            num_classes=80,
            input_res=(640, 640),
        )
    if name == "tiny":
        return DetectorGenome(
            backbone=(
                BlockSpec("Focus", 3, 16, stride=2, depth=1, kernel=3),
                BlockSpec("Res", 16, 24, stride=2, depth=1, kernel=3),
                BlockSpec("Res", 24, 32, stride=2, depth=1, kernel=3),
                BlockSpec("Res", 32, 48, stride=2, depth=1, kernel=3),
                BlockSpec("Csp", 48, 64, stride=2, depth=1, kernel=3),
            ),
            neck=NeckConfig(depth=1, widths=(24, 48, 64), fusion_style="CspReparamElan"),
            head=HeadConfig(head_depth=0, reg_bins=8),
            num_classes=4,
            input_res=(64, 64),
        )
    raise ValidationError(f"unknown preset {name!r}; available: s, tiny")
