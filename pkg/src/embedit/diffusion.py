"""Toy conditional latent diffusion: schedule, denoiser, DDIM, rendering.

Latents are 32-dim. The data distribution is defined by a fixed seeded
linear map from embedding space plus small per-scene jitter, so the exact
latent a condition "should" produce is known in closed form. A fixed
linear left inverse goes back from latents to the realizable embedding
subspace, which is what evaluation re-encodes generated latents with.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import DimensionMismatch, NonFiniteLoss, StepOutOfRange, ZeroVector
from .nets import init_linear_, sinusoidal_features
from .rng import derive_seed, np_rng
from .world import ConceptWorld, Embedding, Modality, MultimodalAsset, encode_asset, l2_normalize

D_LATENT = 32
D_TIME = 16
JITTER_SCALE = 0.05
GRID = 8


@dataclass(frozen=True)
class NoiseSchedule:
    """Linear-beta schedule; alpha_bars has length T+1 with alpha_bars[0] = 1."""

    timesteps: int
    betas: np.ndarray        # (T+1,), betas[0] unused
    alphas: np.ndarray       # (T+1,)
    alpha_bars: np.ndarray   # (T+1,)


def make_schedule(timesteps: int = 50, beta_start: float = 1e-4,
                  beta_end: float = 0.02) -> NoiseSchedule:
    betas = np.zeros(timesteps + 1)
    betas[1:] = np.linspace(beta_start, beta_end, timesteps)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    alpha_bars[0] = 1.0
    return NoiseSchedule(timesteps, betas, alphas, alpha_bars)


def _check_t(sched: NoiseSchedule, t: int) -> None:
    if not (1 <= t <= sched.timesteps):
        raise StepOutOfRange(f"t={t} outside [1, {sched.timesteps}]")


def forward_noise(sched: NoiseSchedule, z0: np.ndarray, t: int,
                  eps: np.ndarray) -> np.ndarray:
    """z_t = sqrt(abar_t) z0 + sqrt(1-abar_t) eps."""
    _check_t(sched, t)
    ab = sched.alpha_bars[t]
    return np.sqrt(ab) * z0 + np.sqrt(1.0 - ab) * eps


@dataclass(frozen=True)
class DenoiserConfig:
    d_latent: int = D_LATENT
    d_embed: int = 64
    d_time: int = D_TIME
    hidden: int = 256
    seed: int = 0


class DenoiserModel(nn.Module):
    """MLP epsilon-predictor; condition enters by concatenation."""

    def __init__(self, config: DenoiserConfig):
        super().__init__()
        self.config = config
        gen = torch.Generator().manual_seed(config.seed)
        d_in = config.d_latent + config.d_embed + config.d_time
        self.fc1 = nn.Linear(d_in, config.hidden, dtype=torch.float64)
        self.fc2 = nn.Linear(config.hidden, config.hidden, dtype=torch.float64)
        self.fc3 = nn.Linear(config.hidden, config.d_latent, dtype=torch.float64)
        # fan-in scaled hidden layers keep activations near unit variance;
        # near-zero output head so an untrained model predicts ~0
        init_linear_(gen, self.fc1, std=(2.0 / d_in) ** 0.5)
        init_linear_(gen, self.fc2, std=(2.0 / config.hidden) ** 0.5)
        init_linear_(gen, self.fc3, std=1e-3)

    def forward(self, z_t: torch.Tensor, t: torch.Tensor,
                cond: torch.Tensor) -> torch.Tensor:
        tf = sinusoidal_features(t, self.config.d_time)
        # a unit-norm condition has ~1/sqrt(D) coordinates; rescale so it
        # competes with the latent coordinates when concatenated
        x = torch.cat([z_t, cond * float(np.sqrt(self.config.d_embed)), tf], dim=-1)
        x = torch.nn.functional.silu(self.fc1(x))
        x = torch.nn.functional.silu(self.fc2(x))
        return self.fc3(x)


def predict_eps(model: DenoiserModel, z_t: np.ndarray, t: int,
                cond: np.ndarray) -> np.ndarray:
    """Single or batched (leading dim shared by z_t and cond) prediction."""
    z_t = np.ascontiguousarray(z_t, dtype=np.float64)
    cond = np.ascontiguousarray(cond, dtype=np.float64)
    single = z_t.ndim == 1
    if single:
        z_t, cond = z_t[None, :], cond[None, :]
    with torch.no_grad():
        out = model(
            torch.from_numpy(z_t),
            torch.full((z_t.shape[0],), t, dtype=torch.int64),
            torch.from_numpy(cond),
        )
    arr = out.numpy()
    return arr[0] if single else arr


# ---------------------------------------------------------------------------
# loss and training

def _loss_t(model: DenoiserModel, sched: NoiseSchedule, z0: torch.Tensor,
            cond: torch.Tensor, t: torch.Tensor, eps: torch.Tensor) -> torch.Tensor:
    ab = torch.from_numpy(sched.alpha_bars)[t][:, None]
    z_t = torch.sqrt(ab) * z0 + torch.sqrt(1.0 - ab) * eps
    pred = model(z_t, t, cond)
    return (eps - pred).square().sum(dim=1).mean()


def diffusion_loss(model: DenoiserModel, sched: NoiseSchedule, z0: np.ndarray,
                   cond: np.ndarray, t: int, eps: np.ndarray) -> float:
    """||eps - model(z_t, t, cond)||^2 for a single sample."""
    _check_t(sched, t)
    with torch.no_grad():
        loss = _loss_t(
            model, sched,
            torch.from_numpy(np.ascontiguousarray(z0, dtype=np.float64))[None, :],
            torch.from_numpy(np.ascontiguousarray(cond, dtype=np.float64))[None, :],
            torch.tensor([t], dtype=torch.int64),
            torch.from_numpy(np.ascontiguousarray(eps, dtype=np.float64))[None, :],
        )
    return float(loss)


@dataclass
class DiffusionBatch:
    z0: np.ndarray     # (B, d_latent)
    cond: np.ndarray   # (B, d_embed)


def diffusion_train_step(model: DenoiserModel, sched: NoiseSchedule,
                         batch: DiffusionBatch, lr: float,
                         rng: np.random.Generator) -> float:
    b = batch.z0.shape[0]
    t = torch.from_numpy(rng.integers(1, sched.timesteps + 1, size=b))
    eps = torch.from_numpy(rng.standard_normal((b, model.config.d_latent)))
    loss = _loss_t(
        model, sched,
        torch.from_numpy(batch.z0),
        torch.from_numpy(batch.cond),
        t,
        eps,
    )
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"diffusion loss {float(loss.detach())!r}")
    model.zero_grad(set_to_none=True)
    loss.backward()
    with torch.no_grad():
        for p in model.parameters():
            if p.grad is not None:
                p.add_(p.grad, alpha=-lr)
    model.zero_grad(set_to_none=True)
    return float(loss.detach())


# ---------------------------------------------------------------------------
# deterministic DDIM (eta = 0) over a strided sub-schedule

def _stride_grid(sched: NoiseSchedule, steps: int) -> list[int]:
    if steps < 1 or sched.timesteps % steps != 0:
        raise StepOutOfRange(
            f"steps={steps} must be a positive divisor of T={sched.timesteps}"
        )
    delta = sched.timesteps // steps
    return [k * delta for k in range(steps + 1)]


def _hop(sched: NoiseSchedule, z: np.ndarray, eps_hat: np.ndarray,
         t_from: int, t_to: int) -> np.ndarray:
    ab_from = sched.alpha_bars[t_from]
    ab_to = sched.alpha_bars[t_to]
    z0_hat = (z - np.sqrt(1.0 - ab_from) * eps_hat) / np.sqrt(ab_from)
    return np.sqrt(ab_to) * z0_hat + np.sqrt(1.0 - ab_to) * eps_hat


def ddim_sample(model: DenoiserModel, sched: NoiseSchedule, z_T: np.ndarray,
                cond: np.ndarray, steps: int) -> np.ndarray:
    """Deterministic generation from z_T down the strided grid."""
    grid = _stride_grid(sched, steps)
    z = np.array(z_T, dtype=np.float64)
    for k in range(steps, 0, -1):
        t, t_prev = grid[k], grid[k - 1]
        eps_hat = predict_eps(model, z, t, cond)
        z = _hop(sched, z, eps_hat, t, t_prev)
    return z


def ddim_invert(model: DenoiserModel, sched: NoiseSchedule, z0: np.ndarray,
                cond: np.ndarray, steps: int) -> np.ndarray:
    """Deterministic inversion z0 -> z_T over the same grid.

    Each hop evaluates the denoiser at the hop's upper timestep, matching
    the timestep the sampling direction uses for that hop; a constant
    denoiser therefore cancels exactly in invert/sample round trips.
    """
    grid = _stride_grid(sched, steps)
    z = np.array(z0, dtype=np.float64)
    for k in range(1, steps + 1):
        t_prev, t = grid[k - 1], grid[k]
        eps_hat = predict_eps(model, z, t, cond)
        z = _hop(sched, z, eps_hat, t_prev, t)
    return z


# ---------------------------------------------------------------------------
# scene <-> latent maps and rendering

class SceneLatentMap:
    """Fixed seeded linear map A: embedding -> latent, plus per-scene jitter,
    and the exact left inverse on the realizable embedding subspace."""

    def __init__(self, world: ConceptWorld, d_latent: int = D_LATENT):
        self.world = world
        self.d_latent = d_latent
        self.matrix = np_rng(world.seed, "scene-latent").standard_normal(
            (d_latent, world.d_embed)
        )
        basis = world.subspace_basis()
        self.decode_matrix = basis @ np.linalg.pinv(self.matrix @ basis)

    def jitter(self, e: Embedding) -> np.ndarray:
        rng = np_rng(self.world.seed, "jitter", e.vec.tobytes())
        return rng.standard_normal(self.d_latent)

    def latent_of_embedding(self, e: Embedding) -> np.ndarray:
        """Jitter-free target latent for a condition."""
        if e.vec.shape != (self.world.d_embed,):
            raise DimensionMismatch(f"embedding shape {e.vec.shape}")
        return self.matrix @ e.vec

    def to_latent(self, e: Embedding) -> np.ndarray:
        return self.latent_of_embedding(e) + JITTER_SCALE * self.jitter(e)

    def asset_latent(self, asset: MultimodalAsset) -> np.ndarray:
        return self.to_latent(encode_asset(self.world, asset))

    def to_embedding(self, z: np.ndarray) -> Embedding:
        """Re-encode a latent; exact on jitter-free latents of real
        embeddings because those live in the mapped subspace."""
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (self.d_latent,):
            raise DimensionMismatch(f"latent shape {z.shape}")
        v = self.decode_matrix @ z
        return Embedding(l2_normalize(v), Modality.IMAGE)


class LatentRenderer:
    """Fixed seeded readout from latents to an 8x8 grayscale grid."""

    def __init__(self, world: ConceptWorld, grid: int = GRID,
                 d_latent: int = D_LATENT):
        self.grid = grid
        self.matrix = np_rng(world.seed, "render").standard_normal(
            (grid * grid, d_latent)
        )

    def render(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z, dtype=np.float64)
        if z.shape != (self.matrix.shape[1],):
            raise DimensionMismatch(f"latent shape {z.shape}")
        return (self.matrix @ z).reshape(self.grid, self.grid)


def grid_to_pgm(grid: np.ndarray) -> str:
    """Plain-text PGM (P2), values squashed through a sigmoid to 0..255."""
    vals = np.round(255.0 / (1.0 + np.exp(-grid))).astype(int)
    lines = [f"P2", f"{grid.shape[1]} {grid.shape[0]}", "255"]
    for row in vals:
        lines.append(" ".join(str(int(v)) for v in row))
    return "\n".join(lines) + "\n"
