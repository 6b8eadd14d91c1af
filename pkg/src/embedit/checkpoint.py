"""Binary checkpoint format.

Layout: magic "IA2P", version u16 LE, section count u16 LE, then sections
in the fixed order WORLD, LM, PRIOR, DIFF (present ones only). Each
section is: name length u8, ASCII name, payload length u64 LE, payload,
CRC32 of the payload u32 LE. Model payloads are the raveled float64
parameters in declaration (named_parameters) order; the WORLD payload is
the world's own serialized form.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .diffusion import DenoiserConfig, DenoiserModel
from .errors import (
    BadMagic,
    CrcMismatch,
    DimensionMismatch,
    MissingCheckpoint,
    VersionUnsupported,
)
from .lm import LmConfig, LmModel, build_vocab
from .prior import PriorConfig, PriorModel
from .world import ConceptWorld, world_from_bytes, world_to_bytes

import zlib

CHECKPOINT_MAGIC = b"IA2P"
CHECKPOINT_VERSION = 1
SECTION_ORDER = ("WORLD", "LM", "PRIOR", "DIFF")


@dataclass
class Checkpoint:
    version: int
    sections: dict[str, bytes]

    def require(self, *names: str) -> None:
        missing = [n for n in names if n not in self.sections]
        if missing:
            raise MissingCheckpoint(f"checkpoint lacks sections {missing}")


def params_to_bytes(model: nn.Module) -> bytes:
    chunks = []
    with torch.no_grad():
        for _, p in model.named_parameters():
            chunks.append(p.detach().numpy().astype("<f8").ravel().tobytes())
    return b"".join(chunks)


def params_from_bytes(model: nn.Module, payload: bytes) -> None:
    flat = np.frombuffer(payload, dtype="<f8")
    expected = sum(p.numel() for _, p in model.named_parameters())
    if flat.shape[0] != expected:
        raise DimensionMismatch(
            f"payload holds {flat.shape[0]} values, model needs {expected}"
        )
    off = 0
    with torch.no_grad():
        for _, p in model.named_parameters():
            n = p.numel()
            vals = flat[off:off + n].reshape(tuple(p.shape))
            p.copy_(torch.from_numpy(vals.astype(np.float64)))
            off += n


def checkpoint_to_bytes(sections: dict[str, bytes]) -> bytes:
    ordered = [(n, sections[n]) for n in SECTION_ORDER if n in sections]
    out = CHECKPOINT_MAGIC + struct.pack("<HH", CHECKPOINT_VERSION, len(ordered))
    for name, payload in ordered:
        raw = name.encode("ascii")
        out += struct.pack("<B", len(raw)) + raw
        out += struct.pack("<Q", len(payload)) + payload
        out += struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF)
    return out


def checkpoint_from_bytes(blob: bytes) -> Checkpoint:
    if blob[:4] != CHECKPOINT_MAGIC:
        raise BadMagic(f"expected {CHECKPOINT_MAGIC!r}, got {blob[:4]!r}")
    version, count = struct.unpack_from("<HH", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise VersionUnsupported(f"checkpoint format version {version}")
    off = 8
    sections: dict[str, bytes] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<B", blob, off)
        off += 1
        name = blob[off:off + name_len].decode("ascii")
        off += name_len
        (payload_len,) = struct.unpack_from("<Q", blob, off)
        off += 8
        payload = blob[off:off + payload_len]
        off += payload_len
        (crc_stored,) = struct.unpack_from("<I", blob, off)
        off += 4
        if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
            raise CrcMismatch(f"section {name} payload corrupted")
        sections[name] = payload
    return Checkpoint(version=version, sections=sections)


def save_checkpoint(path: str, world: ConceptWorld | None = None,
                    lm: LmModel | None = None, prior: PriorModel | None = None,
                    denoiser: DenoiserModel | None = None,
                    carry: Checkpoint | None = None) -> None:
    """Write a checkpoint; sections absent from the arguments are carried
    over from `carry` when given."""
    sections: dict[str, bytes] = dict(carry.sections) if carry else {}
    if world is not None:
        sections["WORLD"] = world_to_bytes(world)
    if lm is not None:
        sections["LM"] = params_to_bytes(lm)
    if prior is not None:
        sections["PRIOR"] = params_to_bytes(prior)
    if denoiser is not None:
        sections["DIFF"] = params_to_bytes(denoiser)
    with open(path, "wb") as f:
        f.write(checkpoint_to_bytes(sections))


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        return checkpoint_from_bytes(f.read())


# ---------------------------------------------------------------------------
# materializers: models are reconstructed from default configs + the world

def checkpoint_world(ck: Checkpoint) -> ConceptWorld:
    ck.require("WORLD")
    return world_from_bytes(ck.sections["WORLD"])


def build_lm(ck: Checkpoint, world: ConceptWorld,
             config: LmConfig = LmConfig()) -> LmModel:
    ck.require("LM")
    model = LmModel(config, build_vocab(world), world)
    params_from_bytes(model, ck.sections["LM"])
    return model


def build_prior(ck: Checkpoint, config: PriorConfig = PriorConfig()) -> PriorModel:
    ck.require("PRIOR")
    model = PriorModel(config)
    params_from_bytes(model, ck.sections["PRIOR"])
    return model


def build_denoiser(ck: Checkpoint,
                   config: DenoiserConfig = DenoiserConfig()) -> DenoiserModel:
    ck.require("DIFF")
    model = DenoiserModel(config)
    params_from_bytes(model, ck.sections["DIFF"])
    return model


def section_parameter_counts(ck: Checkpoint) -> dict[str, int]:
    """Section name -> number of float64 values (WORLD reports payload//8)."""
    return {name: len(payload) // 8 for name, payload in ck.sections.items()}


def load_bundle(path: str, world: ConceptWorld | None = None):
    """Materialize everything the edit pipeline needs from one file."""
    from .diffusion import LatentRenderer, SceneLatentMap, make_schedule
    from .pipeline import ModelBundle

    ck = load_checkpoint(path)
    if world is None:
        world = checkpoint_world(ck)
    ck.require("LM", "PRIOR", "DIFF")
    return ModelBundle(
        world=world,
        lm=build_lm(ck, world),
        prior=build_prior(ck),
        denoiser=build_denoiser(ck),
        sched=make_schedule(),
        latent_map=SceneLatentMap(world),
        renderer=LatentRenderer(world),
    )
