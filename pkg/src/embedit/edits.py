"""Symbolic edits over assets and their ground-truth outcomes.

oracle_edit computes what an instruction *should* produce, entirely in
concept space. The neural pipeline is judged against these outcomes.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from enum import Enum
from typing import Sequence

from .errors import ConceptNotPresent, UnknownConcept
from .world import ConceptWorld, Modality, MultimodalAsset

DEFAULT_BLEND = 0.5


class EditKind(Enum):
    ADD = "add"
    REMOVE = "remove"
    REPLACE = "replace"
    STYLE = "style"
    ATMOSPHERE = "atmosphere"


@dataclass(frozen=True)
class EditSpec:
    """One edit. Payload fields are kind-dependent:

    ADD: concept + weight; REMOVE: concept; REPLACE: concept -> new_concept
    (weights preserved); STYLE: style target; ATMOSPHERE: concept + blend
    (existing weights scaled by 1-blend, the reference concept folded in
    at weight blend).
    """

    kind: EditKind
    concept: str | None = None
    weight: float = 1.0
    new_concept: str | None = None
    style: float | None = None
    blend: float = DEFAULT_BLEND

    @staticmethod
    def add(concept: str, weight: float = 1.0) -> "EditSpec":
        return EditSpec(EditKind.ADD, concept=concept, weight=weight)

    @staticmethod
    def remove(concept: str) -> "EditSpec":
        return EditSpec(EditKind.REMOVE, concept=concept)

    @staticmethod
    def swap(concept: str, new_concept: str) -> "EditSpec":
        return EditSpec(EditKind.REPLACE, concept=concept, new_concept=new_concept)

    @staticmethod
    def restyle(style: float) -> "EditSpec":
        return EditSpec(EditKind.STYLE, style=style)

    @staticmethod
    def atmosphere(concept: str, blend: float = DEFAULT_BLEND) -> "EditSpec":
        return EditSpec(EditKind.ATMOSPHERE, concept=concept, blend=blend)


def _check_known(world: ConceptWorld, name: str | None) -> None:
    if name is not None:
        world.concept_vector(name)  # raises UnknownConcept


def apply_edit(world: ConceptWorld, asset: MultimodalAsset, edit: EditSpec,
               ) -> MultimodalAsset:
    _check_known(world, edit.concept)
    _check_known(world, edit.new_concept)
    ids = asset.concept_ids()

    if edit.kind is EditKind.ADD:
        return replace(asset, concepts=asset.concepts + ((edit.concept, edit.weight),))

    if edit.kind is EditKind.REMOVE:
        if edit.concept not in ids:
            raise ConceptNotPresent(f"{edit.concept!r} not in scene {ids}")
        kept = tuple((n, w) for n, w in asset.concepts if n != edit.concept)
        # an empty result violates the asset invariant and raises InvalidAsset
        return replace(asset, concepts=kept)

    if edit.kind is EditKind.REPLACE:
        if edit.concept not in ids:
            raise ConceptNotPresent(f"{edit.concept!r} not in scene {ids}")
        swapped = tuple(
            (edit.new_concept, w) if n == edit.concept else (n, w)
            for n, w in asset.concepts
        )
        return replace(asset, concepts=swapped)

    if edit.kind is EditKind.STYLE:
        return replace(asset, style=float(edit.style))

    if edit.kind is EditKind.ATMOSPHERE:
        lam = edit.blend
        scaled = tuple((n, w * (1.0 - lam)) for n, w in asset.concepts)
        return replace(asset, concepts=scaled + ((edit.concept, lam),))

    raise UnknownConcept(f"unhandled edit kind {edit.kind}")


def oracle_edit(world: ConceptWorld, asset: MultimodalAsset,
                edits: Sequence[EditSpec]) -> MultimodalAsset:
    """Apply edits in order; the outcome is always an Image asset."""
    out = asset
    for e in edits:
        out = apply_edit(world, out, e)
    return replace(out, modality=Modality.IMAGE)
