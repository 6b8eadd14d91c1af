"""Instruction-driven multi-modal editing over a synthetic concept world."""

__version__ = "0.1.0"

from .world import (  # noqa: F401
    ConceptWorld,
    Embedding,
    Modality,
    MultimodalAsset,
    cosine_similarity,
    encode_asset,
    l2_normalize,
    load_world,
    make_paired_assets,
    make_world,
    save_world,
)
from .edits import EditKind, EditSpec, oracle_edit  # noqa: F401
from .pipeline import EditControls, EditRequest, EditResult, ModelBundle, edit  # noqa: F401
