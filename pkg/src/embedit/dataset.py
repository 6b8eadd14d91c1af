"""Synthetic instruction corpus: templates, records, realization, JSON IO.

Records are born symbolic (assets + template text with [slot] markers).
Realization decides, per slot, whether the instruction carries a
multi-modal embedding or stays textual; the base slot always carries the
Image embedding. Realized slots that need modality translation but had no
trained prior at generation time are stored with their text embedding and
a pending flag, resolved later against a checkpoint's prior.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .diffusion import (
    DenoiserModel,
    NoiseSchedule,
    SceneLatentMap,
    ddim_invert,
    ddim_sample,
)
from .edits import EditSpec
from .errors import MalformedRecord, MissingCheckpoint
from .lm import AUDIO_TOK, IMAGE_TOK
from .prior import DEFAULT_SCORE, PriorModel, translate_modality
from .rng import np_rng
from .world import (
    ConceptWorld,
    Embedding,
    Modality,
    MultimodalAsset,
    cosine_similarity,
    encode_asset,
    l2_normalize,
    with_modality,
    world_fingerprint,
)

SLOT_MARKER = "[slot]"


@dataclass(frozen=True)
class Template:
    text: str                  # instruction with [slot] markers
    roles: tuple[str, ...]     # one role per marker, in order
    base_ordinal: int          # which marker is the editable base


TEMPLATES: dict[str, tuple[Template, ...]] = {
    "add": tuple(
        Template(t, ("new", "base"), 1) for t in (
            "add [slot] to [slot]",
            "put [slot] into [slot]",
            "insert [slot] in [slot]",
            "include [slot] in [slot]",
        )
    ),
    "remove": tuple(
        Template(t, ("gone", "base"), 1) for t in (
            "remove [slot] from [slot]",
            "delete [slot] from [slot]",
            "drop [slot] from [slot]",
            "erase [slot] from [slot]",
        )
    ),
    "replace": tuple(
        Template(t, ("old", "new", "base"), 2) for t in (
            "replace [slot] with [slot] in [slot]",
            "swap [slot] for [slot] in [slot]",
            "substitute [slot] with [slot] in [slot]",
            "change [slot] to [slot] in [slot]",
        )
    ),
    "style": tuple(
        Template(t, ("base", "styleref"), 0) for t in (
            "change [slot] to the style of [slot]",
            "make [slot] match the style of [slot]",
            "restyle [slot] like [slot]",
            "give [slot] the style of [slot]",
        )
    ),
    "atmosphere": tuple(
        Template(t, ("base", "atmoref"), 0) for t in (
            "make [slot] fit the atmosphere of [slot]",
            "fit [slot] to the mood of [slot]",
            "match [slot] to the atmosphere of [slot]",
            "tune [slot] to the mood of [slot]",
        )
    ),
    "add+style": tuple(
        Template(t, ("new", "base", "styleref"), 1) for t in (
            "add [slot] to [slot] and match the style of [slot]",
            "put [slot] into [slot] and restyle like [slot]",
        )
    ),
    "replace+atmosphere": tuple(
        Template(t, ("old", "new", "base", "atmoref"), 2) for t in (
            "replace [slot] with [slot] in [slot] and match the atmosphere of [slot]",
            "swap [slot] for [slot] in [slot] and fit the mood of [slot]",
        )
    ),
}

DEFAULT_MIX: dict[str, float] = {
    "add": 0.22,
    "remove": 0.22,
    "replace": 0.22,
    "style": 0.12,
    "atmosphere": 0.12,
    "add+style": 0.05,
    "replace+atmosphere": 0.05,
}


@dataclass(frozen=True)
class SlotSpec:
    position: int
    modality: Modality
    role: str
    asset: MultimodalAsset
    realized: bool = False
    realized_modality: Modality | None = None
    embedding: Embedding | None = None
    pending_translation: bool = False
    paired: bool | None = None


@dataclass(frozen=True)
class InstructionRecord:
    id: int
    edit_kinds: tuple[str, ...]
    instruction_text: str
    slots: tuple[SlotSpec, ...]
    base_asset: MultimodalAsset
    oracle_target: MultimodalAsset
    realized_text: str | None = None
    pseudo_target_embedding: Embedding | None = None
    pseudo_low_fidelity: bool | None = None

    @property
    def base_ordinal(self) -> int:
        for i, slot in enumerate(self.slots):
            if slot.role == "base":
                return i
        raise ValueError("record has no base slot")


# ---------------------------------------------------------------------------
# synthesis

def _sample_scene_concepts(world: ConceptWorld, rng: np.random.Generator,
                           n: int, exclude: tuple[str, ...] = (),
                           ) -> tuple[tuple[str, float], ...]:
    pool = [c for c in world.concept_names if c not in exclude]
    picks = rng.choice(len(pool), size=n, replace=False)
    return tuple((pool[int(i)], float(rng.uniform(0.4, 1.0))) for i in picks)


def _reference_quality(rng: np.random.Generator) -> float:
    # reference slots may realize as audio; their quality mirrors the
    # audio-corpus average of 4.5
    return float(np.clip(rng.normal(4.5, 1.0), 1.0, 10.0))


def _base_quality(rng: np.random.Generator) -> float:
    # image corpora are curated: aesthetic score at least 5.0
    return float(rng.uniform(5.0, 9.0))


def sample_scene_asset(world: ConceptWorld, rng: np.random.Generator,
                       modality: Modality = Modality.IMAGE,
                       n_concepts: int | None = None) -> MultimodalAsset:
    """Random scene; used for prior/diffusion training and for records."""
    n = int(n_concepts) if n_concepts else int(rng.integers(1, 3))
    quality = _base_quality(rng) if modality is Modality.IMAGE else _reference_quality(rng)
    return MultimodalAsset(
        concepts=_sample_scene_concepts(world, rng, n),
        modality=modality,
        style=float(rng.uniform(-1.0, 1.0)),
        quality=quality,
    )


def _text_ref(concepts: tuple[tuple[str, float], ...], rng: np.random.Generator,
              style: float = 0.0) -> MultimodalAsset:
    return MultimodalAsset(concepts=concepts, modality=Modality.TEXT,
                           style=style, quality=_reference_quality(rng))


def synth_record(world: ConceptWorld, rng: np.random.Generator, rec_id: int,
                 category: str) -> InstructionRecord:
    """One symbolic record for a kind category ("add", "add+style", ...)."""
    from .edits import oracle_edit  # local import keeps module init light

    kinds = tuple(category.split("+"))
    needs_two = any(k in ("remove", "replace") for k in kinds)
    n_base = 2 if needs_two else int(rng.integers(1, 3))
    base = MultimodalAsset(
        concepts=_sample_scene_concepts(world, rng, n_base),
        modality=Modality.IMAGE,
        style=float(rng.uniform(-1.0, 1.0)),
        quality=_base_quality(rng),
    )
    scene_ids = base.concept_ids()

    specs: list[EditSpec] = []
    role_assets: dict[str, MultimodalAsset] = {"base": base}
    used: tuple[str, ...] = scene_ids
    for kind in kinds:
        if kind == "add":
            (c_new, _), = _sample_scene_concepts(world, rng, 1, exclude=used)
            used = used + (c_new,)
            specs.append(EditSpec.add(c_new, 1.0))
            role_assets["new"] = _text_ref(((c_new, 1.0),), rng)
        elif kind == "remove":
            c_gone = scene_ids[int(rng.integers(0, len(scene_ids)))]
            specs.append(EditSpec.remove(c_gone))
            role_assets["gone"] = _text_ref(((c_gone, 1.0),), rng)
        elif kind == "replace":
            c_old = scene_ids[int(rng.integers(0, len(scene_ids)))]
            (c_new, _), = _sample_scene_concepts(world, rng, 1, exclude=used)
            used = used + (c_new,)
            specs.append(EditSpec.swap(c_old, c_new))
            role_assets["old"] = _text_ref(((c_old, 1.0),), rng)
            role_assets["new"] = _text_ref(((c_new, 1.0),), rng)
        elif kind == "style":
            s_ref = float(rng.uniform(-1.0, 1.0))
            specs.append(EditSpec.restyle(s_ref))
            donor = _sample_scene_concepts(world, rng, int(rng.integers(1, 3)),
                                           exclude=used)
            role_assets["styleref"] = _text_ref(donor, rng, style=s_ref)
        elif kind == "atmosphere":
            (c_ref, _), = _sample_scene_concepts(world, rng, 1, exclude=used)
            used = used + (c_ref,)
            specs.append(EditSpec.atmosphere(c_ref))
            role_assets["atmoref"] = _text_ref(((c_ref, 1.0),), rng)
        else:
            raise ValueError(f"unknown edit kind {kind!r}")

    bank = TEMPLATES[category]
    template = bank[int(rng.integers(0, len(bank)))]
    slots = tuple(
        SlotSpec(
            position=i,
            modality=Modality.IMAGE if role == "base" else Modality.TEXT,
            role=role,
            asset=role_assets[role],
        )
        for i, role in enumerate(template.roles)
    )
    return InstructionRecord(
        id=rec_id,
        edit_kinds=kinds,
        instruction_text=template.text,
        slots=slots,
        base_asset=base,
        oracle_target=oracle_edit(world, base, specs),
    )


def realize_slots(record: InstructionRecord, world: ConceptWorld,
                  rng: np.random.Generator, p: float,
                  prior: PriorModel | None = None) -> InstructionRecord:
    """Decide per slot whether the instruction carries an embedding.

    The base slot always carries its Image embedding. Every other slot
    flips a coin with probability p; realized slots pick Image or Audio
    uniformly and either encode a paired twin (paired scenes exist half
    the time) or translate the text embedding through the prior. Without
    a prior, translation is deferred: the text embedding is stored with
    pending_translation set.
    """
    if not (0.0 <= p <= 1.0):
        raise ValueError(f"substitution probability {p!r} outside [0, 1]")
    new_slots: list[SlotSpec] = []
    words: list[str] = []
    for slot in record.slots:
        if slot.role == "base":
            emb = encode_asset(world, slot.asset)
            new_slots.append(replace(slot, realized=True,
                                     realized_modality=Modality.IMAGE,
                                     embedding=emb, paired=True))
            words.append(IMAGE_TOK)
            continue
        if float(rng.uniform()) < p:
            modality = Modality.IMAGE if rng.uniform() < 0.5 else Modality.AUDIO
            paired = bool(rng.uniform() < 0.5)
            if paired:
                emb = encode_asset(world, with_modality(slot.asset, modality))
                pending = False
            else:
                text_e = encode_asset(world, with_modality(slot.asset, Modality.TEXT))
                if prior is not None:
                    emb = translate_modality(prior, text_e, modality)
                    pending = False
                else:
                    emb = text_e
                    pending = True
            new_slots.append(replace(slot, realized=True,
                                     realized_modality=modality, embedding=emb,
                                     pending_translation=pending, paired=paired))
            words.append(IMAGE_TOK if modality is Modality.IMAGE else AUDIO_TOK)
        else:
            new_slots.append(slot)
            words.append(" ".join(slot.asset.concept_ids()))

    parts = record.instruction_text.split(SLOT_MARKER)
    assert len(parts) == len(words) + 1
    text = "".join(
        part + (words[i] if i < len(words) else "")
        for i, part in enumerate(parts)
    ).strip()
    text = " ".join(text.split())
    return replace(record, slots=tuple(new_slots), realized_text=text)


def resolve_pending(record: InstructionRecord, prior: PriorModel,
                    ) -> InstructionRecord:
    """Translate slots that were realized before a prior existed."""
    slots = []
    for slot in record.slots:
        if slot.pending_translation:
            emb = translate_modality(prior, slot.embedding, slot.realized_modality)
            slots.append(replace(slot, embedding=emb, pending_translation=False))
        else:
            slots.append(slot)
    return replace(record, slots=tuple(slots))


def realized_inputs(record: InstructionRecord) -> list[Embedding]:
    """Embeddings for the [image]/[audio] markers, in marker order."""
    out: list[Embedding] = []
    for slot in record.slots:
        if slot.realized:
            if slot.pending_translation:
                raise MissingCheckpoint(
                    "record has untranslated slots; resolve with a trained prior"
                )
            out.append(Embedding(slot.embedding.vec, slot.realized_modality))
    return out


def realized_base_index(record: InstructionRecord) -> int:
    """Ordinal of the base slot among the realized inputs."""
    ordinal = 0
    for slot in record.slots:
        if slot.realized:
            if slot.role == "base":
                return ordinal
            ordinal += 1
    raise ValueError("record has no realized base slot")


def synth_corpus(world: ConceptWorld, seed: int, n: int, p: float,
                 mix: dict[str, float] = DEFAULT_MIX,
                 prior: PriorModel | None = None,
                 start_id: int = 0) -> list[InstructionRecord]:
    rng = np_rng(world.seed, "corpus", seed)
    categories = list(mix)
    weights = np.array([mix[c] for c in categories])
    weights = weights / weights.sum()
    records = []
    for i in range(n):
        cat = categories[int(rng.choice(len(categories), p=weights))]
        rec = synth_record(world, rng, start_id + i, cat)
        records.append(realize_slots(rec, world, rng, p, prior=prior))
    return records


def warmup_sentences(world: ConceptWorld, seed: int, n: int = 2048) -> list[str]:
    """Plain instruction-shaped text for backbone pretraining.

    Slots are filled with either a concept word or a bare modality marker,
    mirroring the realized/unrealized split the model sees later; the base
    slot always carries the image marker, as records always realize it.
    """
    rng = np_rng(world.seed, "warmup", seed)
    categories = sorted(TEMPLATES)
    out = []
    for _ in range(n):
        bank = TEMPLATES[categories[int(rng.integers(0, len(categories)))]]
        template = bank[int(rng.integers(0, len(bank)))]
        fills = []
        for role in template.roles:
            if role == "base":
                fills.append(IMAGE_TOK)
            elif rng.random() < 0.5:
                fills.append(world.concept_names[int(rng.integers(0, len(world.concept_names)))])
            else:
                fills.append(IMAGE_TOK if rng.random() < 0.5 else AUDIO_TOK)
        parts = template.text.split(SLOT_MARKER)
        text = "".join(p + (fills[k] if k < len(fills) else "")
                       for k, p in enumerate(parts))
        out.append(" ".join(text.split()))
    return out


def synth_pseudo_target(record: InstructionRecord, world: ConceptWorld,
                        latent_map: SceneLatentMap, denoiser: DenoiserModel,
                        sched: NoiseSchedule, steps: int = 50,
                        ) -> InstructionRecord:
    """Fine-tune target: invert the base latent, regenerate conditioned on
    the oracle embedding, re-encode. Flags low fidelity below cosine 0.5."""
    e_base = encode_asset(world, record.base_asset)
    e_tgt = encode_asset(world, record.oracle_target)
    z_base = latent_map.to_latent(e_base)
    z_inv = ddim_invert(denoiser, sched, z_base, e_base.vec, steps)
    z_out = ddim_sample(denoiser, sched, z_inv, e_tgt.vec, steps)
    pseudo = latent_map.to_embedding(z_out)
    low = cosine_similarity(pseudo.vec, e_tgt.vec) < 0.5
    return replace(record, pseudo_target_embedding=pseudo,
                   pseudo_low_fidelity=bool(low))


def pseudo_targets_batch(records: Sequence[InstructionRecord], world: ConceptWorld,
                         latent_map: SceneLatentMap, denoiser: DenoiserModel,
                         sched: NoiseSchedule, steps: int = 50,
                         ) -> list[InstructionRecord]:
    """Batched variant of synth_pseudo_target over a whole corpus."""
    if not records:
        return []
    e_base = np.stack([encode_asset(world, r.base_asset).vec for r in records])
    e_tgt = np.stack([encode_asset(world, r.oracle_target).vec for r in records])
    z_base = np.stack([
        latent_map.to_latent(encode_asset(world, r.base_asset)) for r in records
    ])
    z_inv = ddim_invert(denoiser, sched, z_base, e_base, steps)
    z_out = ddim_sample(denoiser, sched, z_inv, e_tgt, steps)
    out = []
    for i, rec in enumerate(records):
        pseudo = latent_map.to_embedding(z_out[i])
        low = cosine_similarity(pseudo.vec, e_tgt[i]) < 0.5
        out.append(replace(rec, pseudo_target_embedding=pseudo,
                           pseudo_low_fidelity=bool(low)))
    return out


# ---------------------------------------------------------------------------
# JSON lines IO

def _asset_to_json(a: MultimodalAsset) -> dict:
    return {
        "concepts": [[n, w] for n, w in a.concepts],
        "modality": a.modality.value,
        "style": a.style,
        "quality": a.quality,
    }


def _asset_from_json(d: dict) -> MultimodalAsset:
    return MultimodalAsset(
        concepts=tuple((str(n), float(w)) for n, w in d["concepts"]),
        modality=Modality(d["modality"]),
        style=float(d["style"]),
        quality=float(d["quality"]),
    )


def _embedding_to_json(e: Embedding | None) -> dict | None:
    if e is None:
        return None
    return {
        "vec": e.vec.astype("<f8").tobytes().hex(),
        "modality": e.modality.value if e.modality else None,
    }


def _embedding_from_json(d: dict | None) -> Embedding | None:
    if d is None:
        return None
    vec = np.frombuffer(bytes.fromhex(d["vec"]), dtype="<f8").astype(np.float64)
    modality = Modality(d["modality"]) if d["modality"] else None
    return Embedding(vec, modality)


def _slot_to_json(s: SlotSpec) -> dict:
    return {
        "position": s.position,
        "modality": s.modality.value,
        "role": s.role,
        "asset": _asset_to_json(s.asset),
        "realized": s.realized,
        "realized_modality": s.realized_modality.value if s.realized_modality else None,
        "embedding": _embedding_to_json(s.embedding),
        "pending_translation": s.pending_translation,
        "paired": s.paired,
    }


def _slot_from_json(d: dict) -> SlotSpec:
    return SlotSpec(
        position=int(d["position"]),
        modality=Modality(d["modality"]),
        role=str(d["role"]),
        asset=_asset_from_json(d["asset"]),
        realized=bool(d["realized"]),
        realized_modality=Modality(d["realized_modality"]) if d["realized_modality"] else None,
        embedding=_embedding_from_json(d["embedding"]),
        pending_translation=bool(d["pending_translation"]),
        paired=d["paired"],
    )


def record_to_json(rec: InstructionRecord) -> dict:
    return {
        "id": rec.id,
        "edit_kinds": list(rec.edit_kinds),
        "instruction_text": rec.instruction_text,
        "slots": [_slot_to_json(s) for s in rec.slots],
        "base_asset": _asset_to_json(rec.base_asset),
        "oracle_target": _asset_to_json(rec.oracle_target),
        "realized_text": rec.realized_text,
        "pseudo_target_embedding": _embedding_to_json(rec.pseudo_target_embedding),
        "pseudo_low_fidelity": rec.pseudo_low_fidelity,
    }


def record_from_json(d: dict) -> InstructionRecord:
    return InstructionRecord(
        id=int(d["id"]),
        edit_kinds=tuple(d["edit_kinds"]),
        instruction_text=str(d["instruction_text"]),
        slots=tuple(_slot_from_json(s) for s in d["slots"]),
        base_asset=_asset_from_json(d["base_asset"]),
        oracle_target=_asset_from_json(d["oracle_target"]),
        realized_text=d["realized_text"],
        pseudo_target_embedding=_embedding_from_json(d["pseudo_target_embedding"]),
        pseudo_low_fidelity=d["pseudo_low_fidelity"],
    )


def write_corpus(records: Sequence[InstructionRecord], path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(record_to_json(rec), separators=(",", ":")))
            f.write("\n")


def load_corpus(path: str) -> list[InstructionRecord]:
    records = []
    with open(path, encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            try:
                records.append(record_from_json(json.loads(stripped)))
            except (json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
                raise MalformedRecord(line_no, str(exc)) from exc
    return records


def write_manifest(path: str, seed: int, counts: dict[str, int], p: float,
                   mix: dict[str, float], world: ConceptWorld) -> None:
    manifest = {
        "seed": seed,
        "records": counts,
        "kind_mix": mix,
        "substitution_p": p,
        "world_fingerprint": world_fingerprint(world),
    }
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
