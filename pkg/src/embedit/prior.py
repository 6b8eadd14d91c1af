"""Embedding refinement prior.

A tiny decoder-only transformer over a fixed three-token sequence:
an aesthetic-score token, the corrupted embedding token, and a learned
query token whose final hidden state is projected back to embedding
space. Trained to restore clean embeddings from corrupted ones, it doubles
as the text-to-image/audio feature translator.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import nn

from .errors import (
    DimensionMismatch,
    MissingPair,
    NonFiniteLoss,
    ScoreOutOfRange,
    ZeroVector,
)
from .nets import Decoder, init_linear_, init_normal_
from .world import ConceptWorld, Embedding, Modality, MultimodalAsset, encode_asset, l2_normalize

SCORE_CENTER = 5.5
SCORE_SCALE = 4.5
DEFAULT_SCORE = 6.5


@dataclass(frozen=True)
class PriorConfig:
    d_embed: int = 64
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 2
    seed: int = 0


class PriorModel(nn.Module):
    def __init__(self, config: PriorConfig):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(config.seed)
        d = config.d_model
        self.score_w = nn.Parameter(torch.zeros(d, dtype=torch.float64))
        self.score_b = nn.Parameter(torch.zeros(d, dtype=torch.float64))
        init_normal_(gen, self.score_w, self.score_b)
        self.in_proj = nn.Linear(config.d_embed, d, dtype=torch.float64)
        init_linear_(gen, self.in_proj)
        self.query = nn.Parameter(torch.zeros(d, dtype=torch.float64))
        init_normal_(gen, self.query)
        self.decoder = Decoder(d, config.n_heads, config.n_layers, max_len=3, gen=gen)
        self.out_proj = nn.Linear(d, config.d_embed, dtype=torch.float64)
        # near-zero output head: untrained refinements start near the origin
        # instead of injecting init noise into the restoration loss
        init_linear_(gen, self.out_proj, std=1e-3)

    def forward(self, e: torch.Tensor, f: torch.Tensor) -> torch.Tensor:
        """e: (B, d_embed), f: (B,) raw scores in [1, 10] -> (B, d_embed)."""
        b = e.shape[0]
        u = (f.to(torch.float64) - SCORE_CENTER) / SCORE_SCALE
        score_tok = u[:, None] * self.score_w + self.score_b
        emb_tok = self.in_proj(e)
        query_tok = self.query.expand(b, -1)
        rows = torch.stack([score_tok, emb_tok, query_tok], dim=1)
        hidden = self.decoder(rows)
        return self.out_proj(hidden[:, 2])


def _check_score(f: float) -> None:
    if not (1.0 <= f <= 10.0):
        raise ScoreOutOfRange(f"aesthetic score {f!r} outside [1, 10]")


def _check_dim(model: PriorModel, e: Embedding) -> None:
    if e.vec.shape != (model.config.d_embed,):
        raise DimensionMismatch(
            f"embedding shape {e.vec.shape} != ({model.config.d_embed},)"
        )


def prior_forward(model: PriorModel, e: Embedding, f: float) -> Embedding:
    """Single-vector refinement. Output is unnormalized."""
    _check_dim(model, e)
    _check_score(f)
    with torch.no_grad():
        out = model(
            torch.from_numpy(np.ascontiguousarray(e.vec))[None, :],
            torch.tensor([float(f)], dtype=torch.float64),
        )
    return Embedding(out[0].numpy(), None)


def translate_modality(model: PriorModel, e: Embedding, target: Modality,
                       f: float = DEFAULT_SCORE) -> Embedding:
    """Pseudo features of `target` modality for a source embedding."""
    out = prior_forward(model, e, f)
    return Embedding(out.vec, target)


# ---------------------------------------------------------------------------
# corruption

class PairedBank:
    """Lookup from an embedding to its modality twins.

    Keys are exact vector bytes: assets are encoded deterministically, so
    the clean embedding identifies the underlying scene.
    """

    def __init__(self):
        self._twins: dict[bytes, dict[Modality, Embedding]] = {}

    def register(self, world: ConceptWorld,
                 assets: dict[Modality, MultimodalAsset]) -> dict[Modality, Embedding]:
        encoded = {m: encode_asset(world, a) for m, a in assets.items()}
        for e in encoded.values():
            self._twins[e.vec.tobytes()] = encoded
        return encoded

    def lookup(self, e: Embedding, modality: Modality) -> Embedding:
        twins = self._twins.get(e.vec.tobytes())
        if twins is None or modality not in twins:
            raise MissingPair(f"no {modality.value} twin registered for embedding")
        return twins[modality]


@dataclass(frozen=True)
class GaussianNoise:
    sigma: float


@dataclass(frozen=True)
class DomainShift:
    source: Modality
    target: Modality
    bank: PairedBank


CorruptionSpec = GaussianNoise | DomainShift


def corrupt(e: Embedding, spec: CorruptionSpec, rng: np.random.Generator) -> Embedding:
    """Degrade a clean embedding.

    GaussianNoise renormalizes after the perturbation so corrupted inputs
    stay on the sphere; sigma == 0 returns the input bitwise. DomainShift
    swaps in the paired source-modality embedding.
    """
    if isinstance(spec, GaussianNoise):
        if spec.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if spec.sigma == 0.0:
            return e.copy()
        noise = rng.standard_normal(e.vec.shape[0])
        return Embedding(l2_normalize(e.vec + spec.sigma * noise), e.modality)
    if isinstance(spec, DomainShift):
        return spec.bank.lookup(e, spec.source).copy()
    raise TypeError(f"unknown corruption spec {spec!r}")


# ---------------------------------------------------------------------------
# loss and training

def _loss_t(model: PriorModel, clean: torch.Tensor, corrupted: torch.Tensor,
            f: torch.Tensor) -> torch.Tensor:
    """Mean over the batch of ||clean - prior(corrupted, f)||^2."""
    pred = model(corrupted, f)
    return (clean - pred).square().sum(dim=1).mean()


def prior_loss(model: PriorModel, clean: Embedding, spec: CorruptionSpec,
               f: float, rng: np.random.Generator) -> float:
    _check_dim(model, clean)
    _check_score(f)
    corrupted = corrupt(clean, spec, rng)
    with torch.no_grad():
        loss = _loss_t(
            model,
            torch.from_numpy(np.ascontiguousarray(clean.vec))[None, :],
            torch.from_numpy(np.ascontiguousarray(corrupted.vec))[None, :],
            torch.tensor([float(f)], dtype=torch.float64),
        )
    return float(loss)


@dataclass
class PriorBatch:
    clean: np.ndarray       # (B, d_embed)
    corrupted: np.ndarray   # (B, d_embed)
    scores: np.ndarray      # (B,)


def make_prior_batch(model: PriorModel, samples: Sequence[tuple[Embedding, CorruptionSpec, float]],
                     rng: np.random.Generator) -> PriorBatch:
    clean_rows, corrupted_rows, scores = [], [], []
    for e, spec, f in samples:
        _check_dim(model, e)
        _check_score(f)
        clean_rows.append(e.vec)
        corrupted_rows.append(corrupt(e, spec, rng).vec)
        scores.append(float(f))
    return PriorBatch(np.stack(clean_rows), np.stack(corrupted_rows), np.array(scores))


def prior_train_step(model: PriorModel, batch: PriorBatch, lr: float) -> float:
    """One SGD step on the restoration loss; raises NonFiniteLoss with the
    model untouched if the loss is NaN/Inf."""
    loss = _loss_t(
        model,
        torch.from_numpy(batch.clean),
        torch.from_numpy(batch.corrupted),
        torch.from_numpy(batch.scores),
    )
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"prior loss {float(loss.detach())!r}")
    model.zero_grad(set_to_none=True)
    loss.backward()
    with torch.no_grad():
        for p in model.parameters():
            if p.grad is not None:
                p.add_(p.grad, alpha=-lr)
    model.zero_grad(set_to_none=True)
    return float(loss.detach())
