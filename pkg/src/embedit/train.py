"""Training dispatch for the three models.

Each target draws its own data deterministically from (world, seed):
the prior and the denoiser train on freshly sampled scenes, the language
model stages train on a realized corpus. Loss curves are returned as
(step, loss) pairs and can be written as "step,loss" lines.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .dataset import (
    InstructionRecord,
    pseudo_targets_batch,
    realized_inputs,
    resolve_pending,
    sample_scene_asset,
    warmup_sentences,
)
from .diffusion import (
    DenoiserConfig,
    DenoiserModel,
    DiffusionBatch,
    NoiseSchedule,
    SceneLatentMap,
    diffusion_train_step,
    make_schedule,
)
from .errors import MissingCheckpoint
from .lm import (
    LmConfig,
    LmExample,
    LmModel,
    build_vocab,
    llm_train_step,
    make_lm_batch,
    tokenize_instruction,
    warmup_backbone,
)
from .prior import (
    DomainShift,
    GaussianNoise,
    PairedBank,
    PriorConfig,
    PriorModel,
    make_prior_batch,
    prior_train_step,
    translate_modality,
)
from .rng import np_rng
from .world import (
    ConceptWorld,
    Modality,
    encode_asset,
    l2_normalize,
    make_paired_assets,
    with_modality,
)

TRAIN_TARGETS = ("prior", "diffusion", "lm-stage1", "lm-stage2")

STANDARD_RECIPE: dict[str, dict] = {
    "prior": {"steps": 2000, "lr": 1e-3, "batch_size": 32},
    "diffusion": {"steps": 3000, "lr": 1e-3, "batch_size": 32},
    "lm-stage1": {"steps": 1500, "lr": 1e-3, "batch_size": 32},
    "lm-stage2": {"steps": 1500, "lr": 2e-3, "batch_size": 32},
}

SIGMA_RANGE = (0.05, 0.5)
_SHIFT_DIRECTIONS = (
    (Modality.TEXT, Modality.IMAGE),
    (Modality.AUDIO, Modality.IMAGE),
    (Modality.TEXT, Modality.AUDIO),
)


@dataclass(frozen=True)
class TrainConfig:
    target: str
    steps: int
    lr: float
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.target not in TRAIN_TARGETS:
            raise ValueError(f"target must be one of {TRAIN_TARGETS}")
        if self.steps < 0 or self.lr <= 0 or self.batch_size < 1:
            raise ValueError("steps/lr/batch_size out of range")


Curve = list[tuple[int, float]]


def prior_training_samples(world: ConceptWorld, rng: np.random.Generator,
                           count: int):
    """50/50 mix of Gaussian corruption and modality shifts."""
    samples = []
    for _ in range(count):
        scene = sample_scene_asset(world, rng)
        if rng.uniform() < 0.5:
            clean = encode_asset(world, scene)
            sigma = float(rng.uniform(*SIGMA_RANGE))
            samples.append((clean, GaussianNoise(sigma), scene.quality))
        else:
            twins = make_paired_assets(world, scene.concepts, scene.style,
                                       scene.quality)
            bank = PairedBank()
            encoded = bank.register(world, twins)
            src, tgt = _SHIFT_DIRECTIONS[int(rng.integers(0, len(_SHIFT_DIRECTIONS)))]
            samples.append((encoded[tgt], DomainShift(src, tgt, bank),
                            scene.quality))
    return samples


def train_prior(world: ConceptWorld, config: TrainConfig,
                model: PriorModel | None = None) -> tuple[PriorModel, Curve]:
    if model is None:
        model = PriorModel(PriorConfig(d_embed=world.d_embed, seed=config.seed))
    rng = np_rng(config.seed, "prior-data")
    curve: Curve = []
    for step in range(config.steps):
        samples = prior_training_samples(world, rng, config.batch_size)
        batch = make_prior_batch(model, samples, rng)
        loss = prior_train_step(model, batch, config.lr)
        curve.append((step, loss))
    return model, curve


def train_diffusion(world: ConceptWorld, config: TrainConfig,
                    model: DenoiserModel | None = None,
                    sched: NoiseSchedule | None = None,
                    ) -> tuple[DenoiserModel, Curve]:
    if model is None:
        model = DenoiserModel(DenoiserConfig(d_embed=world.d_embed, seed=config.seed))
    if sched is None:
        sched = make_schedule()
    latent_map = SceneLatentMap(world, d_latent=model.config.d_latent)
    rng = np_rng(config.seed, "diffusion-data")
    curve: Curve = []
    for step in range(config.steps):
        embeddings = [
            encode_asset(world, sample_scene_asset(world, rng))
            for _ in range(config.batch_size)
        ]
        batch = DiffusionBatch(
            z0=np.stack([latent_map.to_latent(e) for e in embeddings]),
            cond=np.stack([e.vec for e in embeddings]),
        )
        loss = diffusion_train_step(model, sched, batch, config.lr, rng)
        curve.append((step, loss))
    return model, curve


def lm_examples(world: ConceptWorld, records: Sequence[InstructionRecord],
                vocab, stage: int, prior: PriorModel | None = None,
                denoiser: DenoiserModel | None = None,
                sched: NoiseSchedule | None = None) -> list[LmExample]:
    """Materialize training examples.

    Stage 1 regression targets are prior-translated text embeddings of the
    oracle target; stage 2 targets are diffusion pseudo embeddings. Both
    are unit-normalized.
    """
    if prior is None:
        raise MissingCheckpoint("lm training needs a trained prior")
    records = [resolve_pending(r, prior) for r in records]
    if stage == 2:
        if denoiser is None:
            raise MissingCheckpoint("lm stage 2 needs a trained diffusion model")
        if sched is None:
            sched = make_schedule()
        latent_map = SceneLatentMap(world, d_latent=denoiser.config.d_latent)
        missing = [r for r in records if r.pseudo_target_embedding is None]
        if missing:
            computed = pseudo_targets_batch(missing, world, latent_map, denoiser,
                                            sched)
            by_id = {r.id: r for r in computed}
            records = [by_id.get(r.id, r) for r in records]
    examples = []
    for rec in records:
        ids, slot_map = tokenize_instruction(rec.realized_text, vocab)
        inputs = realized_inputs(rec)
        if stage == 1:
            text_e = encode_asset(world, with_modality(rec.oracle_target,
                                                       Modality.TEXT))
            t_gen = l2_normalize(translate_modality(prior, text_e,
                                                    Modality.IMAGE).vec)
        else:
            t_gen = rec.pseudo_target_embedding.vec
        examples.append(LmExample(
            prompt_ids=ids,
            slots=[(pos, inputs[ordinal].vec) for pos, ordinal in slot_map],
            target_base=encode_asset(world, rec.base_asset).vec,
            target_gen=t_gen,
        ))
    return examples


def train_lm(world: ConceptWorld, config: TrainConfig,
             records: Sequence[InstructionRecord], stage: int,
             model: LmModel | None = None, prior: PriorModel | None = None,
             denoiser: DenoiserModel | None = None,
             ) -> tuple[LmModel, Curve]:
    if not records:
        raise ValueError("lm training needs a non-empty corpus")
    if stage == 2 and model is None:
        raise MissingCheckpoint("lm stage 2 continues from a stage 1 model")
    if model is None:
        model = LmModel(LmConfig(d_embed=world.d_embed, seed=config.seed),
                        build_vocab(world), world)
        warmup_backbone(model, warmup_sentences(world, seed=config.seed),
                        rng=np_rng(config.seed, "lm-warmup"))
    examples = lm_examples(world, records, model.vocab, stage, prior=prior,
                           denoiser=denoiser)
    rng = np_rng(config.seed, "lm-batches", stage)
    n = len(examples)
    curve: Curve = []
    for step in range(config.steps):
        idx = rng.choice(n, size=min(config.batch_size, n), replace=n < config.batch_size)
        batch = make_lm_batch(model, [examples[int(i)] for i in idx])
        loss = llm_train_step(model, batch, config.lr, stage)
        curve.append((step, loss))
    return model, curve


def write_curve(path: str, curve: Curve) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for step, loss in curve:
            f.write(f"{step},{loss!r}\n")


def load_curve(path: str) -> Curve:
    curve = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            step, loss = line.strip().split(",")
            curve.append((int(step), float(loss)))
    return curve
