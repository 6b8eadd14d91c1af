"""Instruction language model with embedding substitution.

A small decoder-only transformer over a closed word vocabulary. Slot
markers in the token stream ([image] / [audio]) are replaced by projected
encoder embeddings before the backbone runs. The model answers with a
fixed template "answer : [base] [gen] [eos]"; the hidden states above the
two special output tokens are projected back to embedding space and serve
as the retrieval key and the generation target.

Training optimizes next-token cross entropy over the response plus the
two squared regression terms, in two stages: stage 1 freezes the backbone
and trains only the projectors, the lm head and the new special-token
embedding rows; stage 2 trains everything.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import (
    DimensionMismatch,
    MissingSpecialToken,
    NonFiniteLoss,
    SlotArityMismatch,
    UnknownToken,
)
from .nets import Decoder, Mlp, init_linear_, init_normal_
from .world import (
    ConceptWorld,
    Embedding,
    Modality,
    MultimodalAsset,
    encode_asset,
)

PAD, IMAGE_TOK, AUDIO_TOK, BASE_TOK, GEN_TOK, EOS_TOK = (
    "[pad]", "[image]", "[audio]", "[base]", "[gen]", "[eos]",
)
SPECIAL_TOKENS: tuple[str, ...] = (PAD, IMAGE_TOK, AUDIO_TOK, BASE_TOK, GEN_TOK, EOS_TOK)

TEMPLATE_WORDS: tuple[str, ...] = (
    "add", "put", "insert", "include", "to", "into", "in",
    "remove", "delete", "drop", "erase", "from",
    "replace", "swap", "substitute", "with", "for",
    "change", "make", "restyle", "give", "match", "fit", "tune", "like",
    "the", "a", "an", "and", "style", "mood", "atmosphere", "of",
    "answer", ":",
)

RESPONSE_TEMPLATE: tuple[str, ...] = ("answer", ":", BASE_TOK, GEN_TOK, EOS_TOK)


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.tokens)})

    @property
    def index(self) -> dict[str, int]:
        return self._index  # type: ignore[attr-defined]

    def __len__(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        try:
            return self.index[token]
        except KeyError:
            raise UnknownToken(f"token {token!r} not in vocabulary") from None


def build_vocab(world: ConceptWorld) -> Vocabulary:
    return Vocabulary(SPECIAL_TOKENS + TEMPLATE_WORDS + tuple(world.concept_names))


def save_vocab(vocab: Vocabulary, path: str) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for t in vocab.tokens:
            f.write(t + "\n")


def load_vocab(path: str) -> Vocabulary:
    with open(path, encoding="utf-8") as f:
        return Vocabulary(tuple(line.rstrip("\n") for line in f if line != "\n"))


def tokenize_instruction(text: str, vocab: Vocabulary,
                         ) -> tuple[list[int], list[tuple[int, int]]]:
    """Whitespace tokenization. Returns (ids, slot_map) where slot_map
    pairs each [image]/[audio] position with its input ordinal."""
    ids: list[int] = []
    slot_map: list[tuple[int, int]] = []
    ordinal = 0
    for pos, word in enumerate(text.split()):
        ids.append(vocab.id_of(word))
        if word in (IMAGE_TOK, AUDIO_TOK):
            slot_map.append((pos, ordinal))
            ordinal += 1
    return ids, slot_map


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    return " ".join(vocab.tokens[i] for i in ids)


@dataclass(frozen=True)
class LmConfig:
    d_embed: int = 64
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 2
    max_len: int = 64
    d_proj_hidden: int = 256
    seed: int = 0


class LmModel(nn.Module):
    def __init__(self, config: LmConfig, vocab: Vocabulary, world: ConceptWorld):
        super().__init__()
        self.config = config
        self.vocab = vocab
        self.frozen_backbone = False
        gen = torch.Generator().manual_seed(config.seed)
        v = len(vocab)
        self.tok_emb = nn.Embedding(v, config.d_model, dtype=torch.float64)
        init_normal_(gen, self.tok_emb.weight)
        self.decoder = Decoder(config.d_model, config.n_heads, config.n_layers,
                               config.max_len, gen)
        self.lm_head = nn.Linear(config.d_model, v, bias=False, dtype=torch.float64)
        init_linear_(gen, self.lm_head)
        # unit-norm embeddings have ~1/sqrt(D) coordinates; sqrt(D) gain puts
        # them on the same footing as token rows
        self.p_enc = Mlp(config.d_embed, config.d_proj_hidden, config.d_model,
                         gen, in_gain=float(np.sqrt(config.d_embed)))
        # the regression head shares the optimizer rate with cross-entropy;
        # the gain speeds it up, the tiny out_std starts it at the origin
        self.p_out = Mlp(config.d_model, config.d_proj_hidden, config.d_embed,
                         gen, in_gain=8.0, out_std=1e-3)
        # concept words enter through p_enc on their frozen text embeddings,
        # the same route realized inputs take. A full-scale LLM gets this
        # grounding from pretraining; a from-scratch model has to be handed
        # it, or every concept/word pairing must be memorized from the
        # regression signal alone.
        names = set(world.concept_names)
        word_vec = np.zeros((v, config.d_embed))
        is_concept = np.zeros(v, dtype=bool)
        for i, tok in enumerate(vocab.tokens):
            if tok in names:
                asset = MultimodalAsset(concepts=((tok, 1.0),),
                                        modality=Modality.TEXT)
                word_vec[i] = encode_asset(world, asset).vec
                is_concept[i] = True
        self.register_buffer("word_vec", torch.from_numpy(word_vec),
                             persistent=False)
        self.register_buffer("word_is_concept", torch.from_numpy(is_concept),
                             persistent=False)

    # token id shortcuts
    @property
    def pad_id(self) -> int:
        return self.vocab.id_of(PAD)

    @property
    def base_id(self) -> int:
        return self.vocab.id_of(BASE_TOK)

    @property
    def gen_id(self) -> int:
        return self.vocab.id_of(GEN_TOK)

    @property
    def eos_id(self) -> int:
        return self.vocab.id_of(EOS_TOK)

    def backbone_parameters(self) -> list[nn.Parameter]:
        return list(self.decoder.parameters())

    def stage1_parameters(self) -> list[nn.Parameter]:
        """Everything stage 1 may update, except the masked embedding rows."""
        return (list(self.p_enc.parameters()) + list(self.p_out.parameters())
                + list(self.lm_head.parameters()))


@dataclass(eq=False)
class EmbeddedSequence:
    ids: tuple[int, ...]
    rows: torch.Tensor                      # (L, d_model)
    slot_positions: tuple[int, ...]
    special_positions: dict[str, int]       # may lack "base"/"gen"


def token_rows(model: LmModel, ids: torch.Tensor) -> torch.Tensor:
    """Embedding rows for token ids, any shape; concept-word positions are
    projections of their text embeddings rather than learned rows."""
    rows = model.tok_emb(ids)
    mask = model.word_is_concept[ids]
    if mask.any():
        idx = mask.nonzero(as_tuple=True)
        rows = rows.index_put(idx, model.p_enc(model.word_vec[ids[idx]]))
    return rows


def embed_and_substitute(model: LmModel, ids: Sequence[int],
                         slot_map: Sequence[tuple[int, int]],
                         inputs: Sequence[Embedding]) -> EmbeddedSequence:
    """Token rows with slot positions replaced by projected embeddings."""
    if len(slot_map) != len(inputs):
        raise SlotArityMismatch(
            f"{len(slot_map)} slot markers but {len(inputs)} inputs"
        )
    for e in inputs:
        if e.vec.shape != (model.config.d_embed,):
            raise DimensionMismatch(f"input shape {e.vec.shape}")
    ids_t = torch.tensor(list(ids), dtype=torch.int64)
    rows = token_rows(model, ids_t)
    if inputs:
        vecs = torch.from_numpy(np.stack([e.vec for e in inputs]))
        projected = model.p_enc(vecs)
        rows = rows.clone()
        for pos, ordinal in slot_map:
            rows[pos] = projected[ordinal]
    specials: dict[str, int] = {}
    for name, tok_id in (("base", model.vocab.id_of(BASE_TOK)),
                         ("gen", model.vocab.id_of(GEN_TOK))):
        hits = [i for i, t in enumerate(ids) if t == tok_id]
        if hits:
            specials[name] = hits[0]
    return EmbeddedSequence(
        ids=tuple(ids),
        rows=rows,
        slot_positions=tuple(pos for pos, _ in slot_map),
        special_positions=specials,
    )


@dataclass(eq=False)
class LmOutput:
    h_base: Embedding          # unnormalized projector output
    h_gen: Embedding
    token_logits: np.ndarray   # (L, V)


def lm_forward_extract(model: LmModel, seq: EmbeddedSequence) -> LmOutput:
    """Run the backbone and read out the two special-token states."""
    for name in ("base", "gen"):
        if name not in seq.special_positions:
            raise MissingSpecialToken(f"sequence has no [{name}] token")
    with torch.no_grad():
        hidden = model.decoder(seq.rows[None])[0]
        logits = model.lm_head(hidden)
        h_base = model.p_out(hidden[seq.special_positions["base"]])
        h_gen = model.p_out(hidden[seq.special_positions["gen"]])
    return LmOutput(
        h_base=Embedding(h_base.numpy(), None),
        h_gen=Embedding(h_gen.numpy(), None),
        token_logits=logits.numpy(),
    )


def greedy_decode(model: LmModel, text: str, inputs: Sequence[Embedding],
                  max_new: int = 8) -> tuple[LmOutput, tuple[int, ...]]:
    """Tokenize, decode the response greedily, extract the two states."""
    ids, slot_map = tokenize_instruction(text, model.vocab)
    cur = list(ids)
    with torch.no_grad():
        for _ in range(max_new):
            if len(cur) >= model.config.max_len:
                break
            seq = embed_and_substitute(model, cur, slot_map, inputs)
            hidden = model.decoder(seq.rows[None])[0]
            next_id = int(model.lm_head(hidden[-1]).argmax())
            cur.append(next_id)
            if next_id == model.eos_id:
                break
    seq = embed_and_substitute(model, cur, slot_map, inputs)
    return lm_forward_extract(model, seq), tuple(cur)


# ---------------------------------------------------------------------------
# loss

@dataclass(frozen=True)
class LmLossParts:
    ce: float
    base_sq: float
    gen_sq: float

    @property
    def total(self) -> float:
        return self.ce + self.base_sq + self.gen_sq


def llm_loss(output: LmOutput, target_ids: np.ndarray, target_base: Embedding,
             target_gen: Embedding) -> LmLossParts:
    """Single-sequence loss.

    target_ids aligns with positions: target_ids[i] is the token position i
    must predict, or -1 outside the response. ce is the mean over response
    positions; the embedding terms are plain squared L2 distances.
    """
    target_ids = np.asarray(target_ids, dtype=np.int64)
    if target_ids.shape[0] != output.token_logits.shape[0]:
        raise DimensionMismatch("target_ids length != sequence length")
    mask = target_ids >= 0
    if not mask.any():
        raise DimensionMismatch("no response positions in target_ids")
    logits = torch.from_numpy(output.token_logits)
    logp = F.log_softmax(logits, dim=-1)
    picked = logp[np.nonzero(mask)[0], target_ids[mask]]
    ce = float(-picked.mean())
    base_sq = float(np.sum((output.h_base.vec - target_base.vec) ** 2))
    gen_sq = float(np.sum((output.h_gen.vec - target_gen.vec) ** 2))
    return LmLossParts(ce=ce, base_sq=base_sq, gen_sq=gen_sq)


# ---------------------------------------------------------------------------
# training

@dataclass(eq=False)
class LmExample:
    prompt_ids: list[int]
    slots: list[tuple[int, np.ndarray]]   # (position, embedding vector)
    target_base: np.ndarray
    target_gen: np.ndarray


@dataclass(eq=False)
class LmBatch:
    ids: torch.Tensor          # (B, L) right-padded
    targets: torch.Tensor      # (B, L) next-token ids, -1 = ignore
    sub_sample: torch.Tensor   # (K,) sample index of each substitution
    sub_pos: torch.Tensor      # (K,)
    sub_vecs: torch.Tensor     # (K, d_embed)
    base_pos: torch.Tensor     # (B,)
    gen_pos: torch.Tensor      # (B,)
    t_base: torch.Tensor       # (B, d_embed)
    t_gen: torch.Tensor        # (B, d_embed)


def make_lm_batch(model: LmModel, examples: Sequence[LmExample]) -> LmBatch:
    vocab = model.vocab
    response_ids = [vocab.id_of(t) for t in RESPONSE_TEMPLATE]
    full = [list(ex.prompt_ids) + response_ids for ex in examples]
    width = max(len(seq) for seq in full)
    if width > model.config.max_len:
        raise DimensionMismatch(f"batch width {width} exceeds max_len")
    b = len(examples)
    ids = np.full((b, width), model.pad_id, dtype=np.int64)
    targets = np.full((b, width), -1, dtype=np.int64)
    base_pos = np.zeros(b, dtype=np.int64)
    gen_pos = np.zeros(b, dtype=np.int64)
    sub_sample, sub_pos, sub_vecs = [], [], []
    for i, (ex, seq) in enumerate(zip(examples, full)):
        p = len(ex.prompt_ids)
        ids[i, :len(seq)] = seq
        # positions p-1 .. p+3 predict the five response tokens
        targets[i, p - 1:p - 1 + len(response_ids)] = response_ids
        base_pos[i] = p + 2
        gen_pos[i] = p + 3
        for pos, vec in ex.slots:
            sub_sample.append(i)
            sub_pos.append(pos)
            sub_vecs.append(vec)
    if sub_vecs:
        vec_arr = np.stack(sub_vecs)
    else:
        vec_arr = np.zeros((0, model.config.d_embed))
    return LmBatch(
        ids=torch.from_numpy(ids),
        targets=torch.from_numpy(targets),
        sub_sample=torch.tensor(sub_sample, dtype=torch.int64),
        sub_pos=torch.tensor(sub_pos, dtype=torch.int64),
        sub_vecs=torch.from_numpy(vec_arr),
        base_pos=torch.from_numpy(base_pos),
        gen_pos=torch.from_numpy(gen_pos),
        t_base=torch.from_numpy(np.stack([ex.target_base for ex in examples])),
        t_gen=torch.from_numpy(np.stack([ex.target_gen for ex in examples])),
    )


def _batch_loss(model: LmModel, batch: LmBatch) -> torch.Tensor:
    rows = token_rows(model, batch.ids)
    if batch.sub_sample.numel():
        projected = model.p_enc(batch.sub_vecs)
        rows = rows.index_put((batch.sub_sample, batch.sub_pos), projected)
    hidden = model.decoder(rows)
    logits = model.lm_head(hidden)
    b, l, v = logits.shape
    ce_flat = F.cross_entropy(
        logits.reshape(b * l, v), batch.targets.reshape(b * l),
        ignore_index=-1, reduction="none",
    ).reshape(b, l)
    mask = (batch.targets >= 0).to(torch.float64)
    ce = (ce_flat * mask).sum(dim=1) / mask.sum(dim=1)
    idx = torch.arange(b)
    h_base = model.p_out(hidden[idx, batch.base_pos])
    h_gen = model.p_out(hidden[idx, batch.gen_pos])
    base_sq = (h_base - batch.t_base).square().sum(dim=1)
    gen_sq = (h_gen - batch.t_gen).square().sum(dim=1)
    return (ce + base_sq + gen_sq).mean()


def warmup_backbone(model: LmModel, sentences: Sequence[str], steps: int = 500,
                    lr: float = 1e-3, batch_size: int = 32,
                    rng: np.random.Generator | None = None) -> list[float]:
    """Next-token pretraining of the backbone on plain instruction text.

    The full-scale system freezes a language-pretrained backbone while the
    projectors train; a randomly initialized backbone offers no structure
    to train against, so stage 1 would spend its budget fitting a fixed
    scramble. This pass hands the backbone the same kind of head start:
    syntax of the instruction language, nothing else. Projectors and the
    response specials are untouched.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    seqs = []
    for s in sentences:
        ids, _ = tokenize_instruction(s, model.vocab)
        seqs.append(ids)
    width = max(len(ids) for ids in seqs)
    params = (list(model.decoder.parameters()) + [model.tok_emb.weight]
              + list(model.lm_head.parameters()))
    curve: list[float] = []
    for _ in range(steps):
        pick = rng.choice(len(seqs), size=batch_size, replace=False)
        ids = np.full((batch_size, width), model.pad_id, dtype=np.int64)
        targets = np.full((batch_size, width), -1, dtype=np.int64)
        for i, j in enumerate(pick):
            s = seqs[j]
            ids[i, :len(s)] = s
            targets[i, :len(s) - 1] = s[1:]
        ids_t = torch.from_numpy(ids)
        rows = token_rows(model, ids_t)
        hidden = model.decoder(rows)
        logits = model.lm_head(hidden)
        b, l, v = logits.shape
        loss = F.cross_entropy(logits.reshape(b * l, v),
                               torch.from_numpy(targets).reshape(b * l),
                               ignore_index=-1)
        if not torch.isfinite(loss):
            raise NonFiniteLoss(f"warmup loss {float(loss.detach())!r}")
        model.zero_grad(set_to_none=True)
        loss.backward()
        with torch.no_grad():
            for p in params:
                if p.grad is not None:
                    p.add_(p.grad, alpha=-lr)
        model.zero_grad(set_to_none=True)
        curve.append(float(loss.detach()))
    return curve


def llm_train_step(model: LmModel, batch: LmBatch, lr: float, stage: int) -> float:
    """One SGD step. Stage 1 applies updates only to p_enc, p_out, lm_head
    and the [base]/[gen] embedding rows; stage 2 updates every parameter."""
    if stage not in (1, 2):
        raise ValueError(f"stage must be 1 or 2, got {stage}")
    model.frozen_backbone = stage == 1
    loss = _batch_loss(model, batch)
    if not torch.isfinite(loss):
        raise NonFiniteLoss(f"lm loss {float(loss.detach())!r}")
    model.zero_grad(set_to_none=True)
    loss.backward()
    with torch.no_grad():
        if stage == 2:
            for p in model.parameters():
                if p.grad is not None:
                    p.add_(p.grad, alpha=-lr)
        else:
            for p in model.stage1_parameters():
                if p.grad is not None:
                    p.add_(p.grad, alpha=-lr)
            g = model.tok_emb.weight.grad
            if g is not None:
                for row in (model.base_id, model.gen_id):
                    model.tok_emb.weight[row].add_(g[row], alpha=-lr)
    model.zero_grad(set_to_none=True)
    return float(loss.detach())
