"""Synthetic concept world and the shared multi-modal embedding space.

A world is a small frozen universe: a vocabulary of named concept vectors,
an orthonormal projection into the embedding space, one style direction,
and three modality offset directions. Assets (scenes) are weighted bags of
concepts tagged with a modality, a style scalar and an aesthetic quality.
Encoding an asset is a pure function of (world, asset); nothing here is
trainable.

The construction keeps every encoder output inside the 20-dimensional
subspace spanned by the projection columns and the four extra directions.
Orthonormality of that basis is what makes the paired-modality geometry
and the exact latent re-encoding in the diffusion module analyzable.
"""

from __future__ import annotations

import hashlib
import struct
import zlib
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .errors import (
    BadMagic,
    CrcMismatch,
    DimensionMismatch,
    InvalidAsset,
    UnknownConcept,
    VersionUnsupported,
    ZeroVector,
)
from .rng import np_rng

D_CONCEPT = 16
D_EMBED = 64
N_CONCEPTS = 64
MODALITY_GAP = 0.1
STYLE_COEF = 0.2

WORLD_MAGIC = b"IA2W"
WORLD_VERSION = 1

# Fixed id list: worlds index into this, so concept ids double as plain
# vocabulary words for text rendering of instruction slots.
CONCEPT_NAMES: tuple[str, ...] = (
    "dog", "cat", "bird", "horse", "fish", "rabbit", "fox", "bear",
    "lion", "tiger", "wolf", "deer", "owl", "duck", "frog", "snake",
    "beach", "forest", "mountain", "river", "lake", "desert", "meadow", "island",
    "garden", "city", "street", "bridge", "harbor", "castle", "tower", "cabin",
    "boat", "car", "train", "plane", "bicycle", "guitar", "piano", "drum",
    "violin", "trumpet", "lantern", "candle", "mirror", "clock", "vase", "kite",
    "balloon", "robot", "statue", "fountain", "bench", "fire", "snow", "rain",
    "cloud", "storm", "sunset", "moon", "star", "rainbow", "crystal", "anchor",
)


class Modality(Enum):
    IMAGE = "image"
    AUDIO = "audio"
    TEXT = "text"


def l2_normalize(v: np.ndarray) -> np.ndarray:
    """Return v / ||v||, raising ZeroVector below 1e-12."""
    v = np.asarray(v, dtype=np.float64)
    n = float(np.linalg.norm(v))
    if n < 1e-12:
        raise ZeroVector(f"cannot normalize vector with norm {n!r}")
    return v / n


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"shapes {a.shape} and {b.shape} differ")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na < 1e-12 or nb < 1e-12:
        raise ZeroVector("cosine of a zero vector is undefined")
    return float(np.dot(a, b) / (na * nb))


@dataclass(frozen=True)
class MultimodalAsset:
    """A scene: weighted concepts + modality + style + aesthetic quality.

    concepts keeps insertion order and may repeat an id (weights add up in
    the encoder); weights live in (0, 1], style in [-1, 1], quality in
    [1, 10].
    """

    concepts: tuple[tuple[str, float], ...]
    modality: Modality
    style: float = 0.0
    quality: float = 5.0

    def __post_init__(self):
        if len(self.concepts) == 0:
            raise InvalidAsset("asset needs at least one concept")
        for name, w in self.concepts:
            if not (0.0 < w <= 1.0):
                raise InvalidAsset(f"weight {w!r} for {name!r} outside (0, 1]")
        if not (-1.0 <= self.style <= 1.0):
            raise InvalidAsset(f"style {self.style!r} outside [-1, 1]")
        if not (1.0 <= self.quality <= 10.0):
            raise InvalidAsset(f"quality {self.quality!r} outside [1, 10]")

    def concept_ids(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.concepts)


@dataclass(eq=False)
class Embedding:
    """A point in the shared space. vec is float64 shape (d_embed,);
    modality is the source modality or None for model-produced vectors."""

    vec: np.ndarray
    modality: Modality | None = None

    def __post_init__(self):
        self.vec = np.ascontiguousarray(self.vec, dtype=np.float64)

    def copy(self) -> "Embedding":
        return Embedding(self.vec.copy(), self.modality)


@dataclass(eq=False)
class ConceptWorld:
    seed: int
    concept_names: tuple[str, ...]
    concept_table: np.ndarray      # (n_concepts, d_concept), unit rows
    projection: np.ndarray         # (d_embed, d_concept), orthonormal columns
    d_style: np.ndarray            # (d_embed,)
    d_image: np.ndarray
    d_audio: np.ndarray
    d_text: np.ndarray
    gap: float = MODALITY_GAP
    _index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self._index = {name: i for i, name in enumerate(self.concept_names)}

    @property
    def d_concept(self) -> int:
        return self.concept_table.shape[1]

    @property
    def d_embed(self) -> int:
        return self.projection.shape[0]

    def concept_vector(self, name: str) -> np.ndarray:
        try:
            return self.concept_table[self._index[name]]
        except KeyError:
            raise UnknownConcept(f"concept {name!r} not in world") from None

    def modality_offset(self, modality: Modality) -> np.ndarray:
        return {
            Modality.IMAGE: self.d_image,
            Modality.AUDIO: self.d_audio,
            Modality.TEXT: self.d_text,
        }[modality]

    def subspace_basis(self) -> np.ndarray:
        """Orthonormal basis (d_embed, d_concept+4) of the realizable span."""
        return np.column_stack(
            [self.projection, self.d_style, self.d_image, self.d_audio, self.d_text]
        )


def _sample_concepts(rng: np.random.Generator, n: int, d: int,
                     max_abs_cos: float = 0.5) -> np.ndarray:
    """Unit vectors with pairwise |cos| below max_abs_cos, by rejection."""
    rows: list[np.ndarray] = []
    attempts = 0
    while len(rows) < n:
        attempts += 1
        if attempts > 200000:
            raise RuntimeError("concept sampling failed to satisfy separation")
        v = rng.standard_normal(d)
        v /= np.linalg.norm(v)
        if all(abs(float(np.dot(v, r))) < max_abs_cos for r in rows):
            rows.append(v)
    return np.stack(rows)


def make_world(seed: int, n_concepts: int = N_CONCEPTS, d_concept: int = D_CONCEPT,
               d_embed: int = D_EMBED, gap: float = MODALITY_GAP) -> ConceptWorld:
    """Build a world deterministically from a seed.

    The projection and the four extra directions come from a QR
    factorization of a seeded Gaussian matrix, so they are mutually
    orthonormal by construction.
    """
    if n_concepts > len(CONCEPT_NAMES):
        raise ValueError(f"at most {len(CONCEPT_NAMES)} concepts supported")
    if d_embed < d_concept + 4:
        raise ValueError("d_embed must be at least d_concept + 4")
    rng = np_rng(seed, "world")
    concepts = _sample_concepts(np_rng(seed, "concepts"), n_concepts, d_concept)
    g = rng.standard_normal((d_embed, d_concept + 4))
    q, r = np.linalg.qr(g)
    q = q * np.sign(np.diag(r))  # canonical sign, determinism across BLAS builds
    return ConceptWorld(
        seed=seed,
        concept_names=CONCEPT_NAMES[:n_concepts],
        concept_table=concepts,
        projection=q[:, :d_concept],
        d_style=q[:, d_concept],
        d_image=q[:, d_concept + 1],
        d_audio=q[:, d_concept + 2],
        d_text=q[:, d_concept + 3],
        gap=gap,
    )


def encode_asset(world: ConceptWorld, asset: MultimodalAsset) -> Embedding:
    """Map an asset to its unit-norm embedding.

    combined = normalize(sum_i w_i c_i) in concept space, then
    out = normalize(P @ combined + style * 0.2 * d_style + gap * d_modality).
    """
    acc = np.zeros(world.d_concept)
    for name, w in asset.concepts:
        acc = acc + w * world.concept_vector(name)
    combined = l2_normalize(acc)
    v = (
        world.projection @ combined
        + asset.style * STYLE_COEF * world.d_style
        + world.gap * world.modality_offset(asset.modality)
    )
    return Embedding(l2_normalize(v), asset.modality)


def make_paired_assets(world: ConceptWorld, concepts: tuple[tuple[str, float], ...],
                       style: float = 0.0, quality: float = 5.0,
                       ) -> dict[Modality, MultimodalAsset]:
    """The three modality twins of one underlying scene."""
    for name, _ in concepts:
        world.concept_vector(name)  # raises UnknownConcept early
    return {
        m: MultimodalAsset(concepts=tuple(concepts), modality=m, style=style,
                           quality=quality)
        for m in Modality
    }


def asset_key(asset: MultimodalAsset) -> bytes:
    """Stable content hash; order-insensitive over concepts so logically
    identical scenes share downstream per-asset randomness."""
    h = hashlib.blake2b(digest_size=16)
    for name, w in sorted(asset.concepts):
        h.update(name.encode("utf-8"))
        h.update(struct.pack("<d", w))
    h.update(asset.modality.value.encode("utf-8"))
    h.update(struct.pack("<dd", asset.style, asset.quality))
    return h.digest()


# ---------------------------------------------------------------------------
# serialization

def _pack_matrix(m: np.ndarray) -> bytes:
    return np.ascontiguousarray(m, dtype="<f8").tobytes()


def world_to_bytes(world: ConceptWorld) -> bytes:
    body = struct.pack(
        "<QHHHd",
        world.seed,
        len(world.concept_names),
        world.d_concept,
        world.d_embed,
        world.gap,
    )
    body += _pack_matrix(world.concept_table)
    body += _pack_matrix(world.projection)
    for v in (world.d_style, world.d_image, world.d_audio, world.d_text):
        body += _pack_matrix(v)
    crc = zlib.crc32(body) & 0xFFFFFFFF
    return WORLD_MAGIC + struct.pack("<H", WORLD_VERSION) + body + struct.pack("<I", crc)


def world_from_bytes(blob: bytes) -> ConceptWorld:
    if blob[:4] != WORLD_MAGIC:
        raise BadMagic(f"expected {WORLD_MAGIC!r}, got {blob[:4]!r}")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != WORLD_VERSION:
        raise VersionUnsupported(f"world format version {version}")
    body = blob[6:-4]
    (crc_stored,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise CrcMismatch("world payload corrupted")
    seed, n, d_c, d_e, gap = struct.unpack_from("<QHHHd", body, 0)
    off = struct.calcsize("<QHHHd")

    def take(rows: int, cols: int) -> np.ndarray:
        nonlocal off
        count = rows * cols
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=off)
        off += count * 8
        out = arr.reshape(rows, cols) if cols > 1 else arr
        return out.astype(np.float64)

    concept_table = take(n, d_c)
    projection = take(d_e, d_c)
    d_style = take(d_e, 1)
    d_image = take(d_e, 1)
    d_audio = take(d_e, 1)
    d_text = take(d_e, 1)
    return ConceptWorld(
        seed=seed,
        concept_names=CONCEPT_NAMES[:n],
        concept_table=concept_table,
        projection=projection,
        d_style=d_style,
        d_image=d_image,
        d_audio=d_audio,
        d_text=d_text,
        gap=gap,
    )


def save_world(world: ConceptWorld, path: str) -> None:
    with open(path, "wb") as f:
        f.write(world_to_bytes(world))


def load_world(path: str) -> ConceptWorld:
    with open(path, "rb") as f:
        return world_from_bytes(f.read())


def world_fingerprint(world: ConceptWorld) -> str:
    """Short stable id of the serialized world, for corpus manifests."""
    return hashlib.sha256(world_to_bytes(world)).hexdigest()[:16]


def with_modality(asset: MultimodalAsset, modality: Modality) -> MultimodalAsset:
    return replace(asset, modality=modality)
