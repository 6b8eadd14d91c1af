"""Finite-difference gradient checking.

The analytic route is autograd; the independent route is central
differences on probed coordinates. The two must agree to a relative
error below 1e-4 (denominator max(|a|, |b|, 1e-8)). Each group is
probed at its largest-|gradient| coordinates: those carry the signal
a wrong gradient would corrupt, while coordinates with negligible
gradient sit below the difference quotient's roundoff floor and say
nothing either way. Parameters with requires_grad=False form "frozen"
groups: their analytic gradient is reported as exactly zero and they
are excluded from the pass criterion.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch
from torch import nn

from .rng import np_rng

DEFAULT_H = 1e-5
DEFAULT_THRESHOLD = 1e-4
DEFAULT_COORDS = 50


@dataclass(frozen=True)
class GroupReport:
    name: str
    max_rel_err: float
    n_checked: int
    frozen: bool
    max_analytic: float


@dataclass(frozen=True)
class GradCheckReport:
    groups: tuple[GroupReport, ...]
    threshold: float

    @property
    def passed(self) -> bool:
        return all(g.frozen or g.max_rel_err < self.threshold for g in self.groups)

    def lines(self) -> list[str]:
        out = []
        for g in self.groups:
            tag = "frozen" if g.frozen else ("ok" if g.max_rel_err < self.threshold else "FAIL")
            out.append(
                f"{g.name}: max_rel_err={g.max_rel_err:.3e} coords={g.n_checked} [{tag}]"
            )
        return out


def _named_params(target) -> list[tuple[str, torch.Tensor]]:
    if isinstance(target, nn.Module):
        return list(target.named_parameters())
    return list(target.items())


def grad_check(loss_fn: Callable[[], torch.Tensor], target,
               n_per_group: int = DEFAULT_COORDS, h: float = DEFAULT_H,
               threshold: float = DEFAULT_THRESHOLD,
               ) -> GradCheckReport:
    """Compare autograd against central differences for every parameter
    group of `target` (an nn.Module or a name->tensor mapping).

    loss_fn must be a deterministic closure over the current parameter
    values (fixed data, no internal randomness).
    """
    params = _named_params(target)
    live = [(n, p) for n, p in params if p.requires_grad]
    loss = loss_fn()
    grads = torch.autograd.grad(loss, [p for _, p in live], allow_unused=True)
    grad_map = {n: g for (n, _), g in zip(live, grads)}

    groups = []
    for name, p in params:
        analytic = grad_map.get(name)
        frozen = not p.requires_grad
        if analytic is None:
            analytic = torch.zeros_like(p)
        flat_p = p.detach().reshape(-1)
        flat_g = analytic.detach().reshape(-1)
        n = min(n_per_group, flat_p.numel())
        order = torch.argsort(flat_g.abs(), descending=True, stable=True)
        coords = order[:n].tolist()
        max_rel = 0.0
        with torch.no_grad():
            for c in coords:
                c = int(c)
                orig = float(flat_p[c])
                flat_p[c] = orig + h
                up = float(loss_fn())
                flat_p[c] = orig - h
                down = float(loss_fn())
                flat_p[c] = orig
                fd = (up - down) / (2.0 * h)
                a = float(flat_g[c])
                rel = abs(a - fd) / max(abs(a), abs(fd), 1e-8)
                max_rel = max(max_rel, rel)
        groups.append(GroupReport(
            name=name,
            max_rel_err=max_rel,
            n_checked=n,
            frozen=frozen,
            max_analytic=float(flat_g.abs().max()) if flat_g.numel() else 0.0,
        ))
    return GradCheckReport(groups=tuple(groups), threshold=threshold)


# ---------------------------------------------------------------------------
# standard small-model suite (used by the CLI and the acceptance tests)

def _small_world():
    from .world import make_world

    return make_world(seed=11, n_concepts=6, d_concept=4, d_embed=8)


def lm_suite(seed: int = 0) -> GradCheckReport:
    from .lm import LmConfig, LmExample, LmModel, _batch_loss, build_vocab, make_lm_batch, tokenize_instruction
    from .world import Modality, MultimodalAsset, encode_asset

    world = _small_world()
    config = LmConfig(d_embed=8, d_model=16, n_heads=2, n_layers=1, max_len=8,
                      d_proj_hidden=8, seed=seed + 1)
    model = LmModel(config, build_vocab(world), world)
    rng = np_rng(seed, "lm-suite")
    examples = []
    for i in range(2):
        other = world.concept_names[i + 2]
        ids, slot_map = tokenize_instruction("add [image]", model.vocab)
        asset = MultimodalAsset(((other, 1.0),), Modality.IMAGE)
        e = encode_asset(world, asset)
        examples.append(LmExample(
            prompt_ids=ids,
            slots=[(slot_map[0][0], e.vec)],
            target_base=e.vec,
            target_gen=rng.standard_normal(8) / 4.0,
        ))
    batch = make_lm_batch(model, examples)
    return grad_check(lambda: _batch_loss(model, batch), model)


def prior_suite(seed: int = 0) -> GradCheckReport:
    from .prior import PriorConfig, PriorModel, _loss_t

    config = PriorConfig(d_embed=8, d_model=16, n_heads=2, n_layers=1, seed=seed + 1)
    model = PriorModel(config)
    rng = np_rng(seed, "prior-suite")
    clean = torch.from_numpy(rng.standard_normal((3, 8)))
    clean = clean / clean.norm(dim=1, keepdim=True)
    corrupted = torch.from_numpy(rng.standard_normal((3, 8)))
    corrupted = corrupted / corrupted.norm(dim=1, keepdim=True)
    f = torch.from_numpy(rng.uniform(2.0, 9.0, size=3))
    return grad_check(lambda: _loss_t(model, clean, corrupted, f), model)


def diffusion_suite(seed: int = 0) -> GradCheckReport:
    from .diffusion import DenoiserConfig, DenoiserModel, _loss_t, make_schedule

    config = DenoiserConfig(d_latent=8, d_embed=8, d_time=4, hidden=24, seed=seed + 1)
    model = DenoiserModel(config)
    sched = make_schedule(timesteps=10)
    rng = np_rng(seed, "diff-suite")
    z0 = torch.from_numpy(rng.standard_normal((3, 8)))
    cond = torch.from_numpy(rng.standard_normal((3, 8)))
    t = torch.from_numpy(rng.integers(1, 11, size=3))
    eps = torch.from_numpy(rng.standard_normal((3, 8)))
    return grad_check(lambda: _loss_t(model, sched, z0, cond, t, eps), model)


def run_standard_suites(seed: int = 0) -> dict[str, GradCheckReport]:
    return {
        "lm": lm_suite(seed),
        "prior": prior_suite(seed),
        "diffusion": diffusion_suite(seed),
    }
