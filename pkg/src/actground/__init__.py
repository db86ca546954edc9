"""Training-free spatial action grounding with frozen vision-language backbones."""

__version__ = "0.1.0"

from .backbone import (  # noqa: E402
    BackboneDescriptor,
    CorruptFixtureError,
    FrameBatch,
    InvalidInputError,
    LayerTrace,
    TextEmbedding,
    ToyBackbone,
    load_toy_backbone,
    make_toy_backbone,
)
from .config import RunConfig, load_config, parse_config  # noqa: E402
from .estimator import ActionGrounder, GroundingQuery, GroundingResult  # noqa: E402
from .evaluation import AnnotationRecord, BoundingBox, EvalReport, load_annotations  # noqa: E402
from .gem import SelfSelfConfig, gem_accumulate, self_self_iterate, self_self_output  # noqa: E402
from .weighting import WeightConfig  # noqa: E402

__all__ = [
    "ActionGrounder",
    "AnnotationRecord",
    "BackboneDescriptor",
    "BoundingBox",
    "CorruptFixtureError",
    "EvalReport",
    "FrameBatch",
    "GroundingQuery",
    "GroundingResult",
    "InvalidInputError",
    "LayerTrace",
    "RunConfig",
    "SelfSelfConfig",
    "TextEmbedding",
    "ToyBackbone",
    "WeightConfig",
    "gem_accumulate",
    "load_annotations",
    "load_config",
    "load_toy_backbone",
    "make_toy_backbone",
    "parse_config",
    "self_self_iterate",
    "self_self_output",
]
