"""End-to-end instruction-driven editing.

Stages: encode (inputs arrive as embeddings), language model decode and
extraction, base retrieval, DDIM inversion of the source latent, latent
and condition mixing, conditional generation, render. Every stage tags
errors it raises so failures point at the responsible step.

alpha controls how much inverted source latent survives mixing (1.0 keeps
the source bit-for-bit); beta folds the retrieved source embedding back
into the generation condition.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .diffusion import (
    DenoiserModel,
    LatentRenderer,
    NoiseSchedule,
    SceneLatentMap,
    ddim_invert,
    ddim_sample,
)
from .errors import EmbeditError, NoImageCandidate, ScoreOutOfRange
from .lm import LmModel, greedy_decode
from .prior import PriorModel, prior_forward
from .rng import derive_seed, np_rng
from .world import ConceptWorld, Embedding, Modality, cosine_similarity, l2_normalize

DEFAULT_ALPHA = 0.6
DEFAULT_BETA = 0.3


@dataclass(frozen=True)
class EditControls:
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    score: float = 6.5
    steps: int = 50
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError(f"alpha {self.alpha!r} outside [0, 1]")
        if self.beta < 0.0:
            raise ValueError(f"beta {self.beta!r} must be non-negative")
        if not (1.0 <= self.score <= 10.0):
            raise ScoreOutOfRange(f"score {self.score!r} outside [1, 10]")


@dataclass(frozen=True)
class EditRequest:
    instruction: str
    inputs: tuple[Embedding, ...]
    controls: EditControls = EditControls()


@dataclass(eq=False)
class ModelBundle:
    world: ConceptWorld
    lm: LmModel
    prior: PriorModel
    denoiser: DenoiserModel
    sched: NoiseSchedule
    latent_map: SceneLatentMap
    renderer: LatentRenderer


@dataclass(eq=False)
class EditResult:
    base_index: int
    decoded_ids: tuple[int, ...]
    h_base: np.ndarray            # unit
    h_gen: np.ndarray             # unit
    mixed_condition: np.ndarray   # unit
    z_source: np.ndarray
    z_inverted: np.ndarray
    z_mixed: np.ndarray
    z_out: np.ndarray
    image: np.ndarray             # (grid, grid)
    diagnostics: list[tuple[str, dict[str, float]]] = field(default_factory=list)


@contextmanager
def _stage(name: str):
    try:
        yield
    except EmbeditError as exc:
        raise exc.with_stage(name)


def retrieve_base(h_base: Embedding, candidates: Sequence[Embedding]) -> int:
    """Index of the Image candidate most similar to h_base; ties resolve
    to the lowest index."""
    best_i = -1
    best_cos = -np.inf
    saw_image = False
    for i, cand in enumerate(candidates):
        if cand.modality is not Modality.IMAGE:
            continue
        saw_image = True
        c = cosine_similarity(h_base.vec, cand.vec)
        if c > best_cos:
            best_cos, best_i = c, i
    if not saw_image:
        raise NoImageCandidate("no Image-modality candidate to retrieve")
    return best_i


def mix_latent(z: np.ndarray, alpha: float, rng: np.random.Generator) -> np.ndarray:
    """alpha * z + (1 - alpha) * fresh noise, rescaled to ||z||.

    alpha == 1 returns z unchanged (bit-for-bit); a zero latent stays zero.
    The noise draw happens regardless of alpha so generator consumption
    does not depend on the control value.
    """
    if not (0.0 <= alpha <= 1.0):
        raise ValueError(f"alpha {alpha!r} outside [0, 1]")
    z = np.asarray(z, dtype=np.float64)
    eps = rng.standard_normal(z.shape)
    if alpha == 1.0:
        return z.copy()
    zn = float(np.linalg.norm(z))
    if zn < 1e-12:
        return np.zeros_like(z)
    mixed = alpha * z + (1.0 - alpha) * eps
    mn = float(np.linalg.norm(mixed))
    if mn < 1e-12:
        return np.zeros_like(z)
    return mixed * (zn / mn)


def mix_condition(prior: PriorModel, h_gen: Embedding, h_source: Embedding,
                  beta: float, score: float) -> Embedding:
    """normalize(prior(h_gen, score) + h_gen + beta * h_source)."""
    if beta < 0.0:
        raise ValueError(f"beta {beta!r} must be non-negative")
    refined = prior_forward(prior, h_gen, score)
    v = refined.vec + h_gen.vec + beta * h_source.vec
    return Embedding(l2_normalize(v), None)


def edit(bundle: ModelBundle, request: EditRequest) -> EditResult:
    controls = request.controls
    diag: list[tuple[str, dict[str, float]]] = []
    rng = np_rng(controls.seed, "edit")

    with _stage("encode"):
        inputs = tuple(request.inputs)
        for e in inputs:
            if e.vec.shape != (bundle.world.d_embed,):
                from .errors import DimensionMismatch
                raise DimensionMismatch(f"input shape {e.vec.shape}")
        diag.append(("encode", {"n_inputs": float(len(inputs))}))

    with _stage("llm"):
        output, ids = greedy_decode(bundle.lm, request.instruction, inputs)
        h_base = l2_normalize(output.h_base.vec)
        h_gen = l2_normalize(output.h_gen.vec)
        diag.append(("llm", {
            "decoded_len": float(len(ids)),
            "h_base_raw_norm": float(np.linalg.norm(output.h_base.vec)),
            "h_gen_raw_norm": float(np.linalg.norm(output.h_gen.vec)),
        }))

    with _stage("retrieval"):
        k = retrieve_base(Embedding(h_base, None), inputs)
        diag.append(("retrieval", {
            "base_index": float(k),
            "base_cosine": cosine_similarity(h_base, inputs[k].vec),
        }))

    with _stage("inversion"):
        z_source = bundle.latent_map.to_latent(inputs[k])
        z_inverted = ddim_invert(bundle.denoiser, bundle.sched, z_source,
                                 inputs[k].vec, controls.steps)
        diag.append(("inversion", {
            "steps": float(controls.steps),
            "z_source_norm": float(np.linalg.norm(z_source)),
            "z_inverted_norm": float(np.linalg.norm(z_inverted)),
        }))

    with _stage("mixing"):
        z_mixed = mix_latent(z_inverted, controls.alpha, rng)
        cond = mix_condition(bundle.prior, Embedding(h_gen, None), inputs[k],
                             controls.beta, controls.score)
        diag.append(("mixing", {
            "alpha": controls.alpha,
            "beta": controls.beta,
            "score": controls.score,
            "z_mixed_norm": float(np.linalg.norm(z_mixed)),
        }))

    with _stage("generation"):
        z_out = ddim_sample(bundle.denoiser, bundle.sched, z_mixed, cond.vec,
                            controls.steps)
        diag.append(("generation", {"z_out_norm": float(np.linalg.norm(z_out))}))

    with _stage("render"):
        image = bundle.renderer.render(z_out)
        diag.append(("render", {
            "grid": float(image.shape[0]),
            "min": float(image.min()),
            "max": float(image.max()),
        }))

    return EditResult(
        base_index=k,
        decoded_ids=ids,
        h_base=h_base,
        h_gen=h_gen,
        mixed_condition=cond.vec,
        z_source=z_source,
        z_inverted=z_inverted,
        z_mixed=z_mixed,
        z_out=z_out,
        image=image,
        diagnostics=diag,
    )


def result_report(result: EditResult) -> str:
    """One line per stage with named scalar diagnostics."""
    lines = []
    for stage, values in result.diagnostics:
        parts = " ".join(f"{k}={v!r}" for k, v in values.items())
        lines.append(f"stage={stage} {parts}")
    return "\n".join(lines) + "\n"


def record_controls(controls: EditControls, record_id: int) -> EditControls:
    """Per-record controls for batch runs: same knobs, derived seed."""
    return replace(controls, seed=derive_seed(controls.seed, "record", record_id))
