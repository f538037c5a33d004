"""The three-pass latent pipeline and its injection variants.

One training step on a dual-model variant is exactly three full forward
passes:

  1. base_prefix_pass: the base consumes the prefix causally and yields its
     per-layer KV cache.
  2. coprocessor_pass: the coprocessor reads that cache plus learnable soft
     tokens (all sites' slots concatenated into one pass) and emits latent
     vectors, its final hidden states.
  3. decode_pass: the base decodes ahead tokens against the prefix cache
     with the latents injected, either re-fed as input embeddings or
     appended to the cache per layer.

The soft-embedding baseline runs one model and two passes (no coprocessor);
sequential_rollout reproduces the cost model of emitting latents one at a
time (N_L + 1 passes) and exists for pass accounting, not training.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import tensor as T
from .errors import ContractError
from .masks import (AugmentationPlan, build_attention_mask, causal_mask,
                    decode_mask_cache_concat)
from .model import (ModelCache, ModelParams, concat_cache, detach_cache,
                    embed_tokens, forward, slice_cache)


class InjectionMode(str, Enum):
    """How (and whether) latents reach the decoding model."""

    EMBEDDING_FROZEN_BASE = "embedding_frozen_base"
    CACHE_CONCAT_FROZEN_BASE = "cache_concat_frozen_base"
    EMBEDDING_COFINETUNED = "embedding_cofinetuned"
    SOFT_EMBEDDING_UNIFIED = "soft_embedding_unified"
    SEQUENTIAL_ROLLOUT = "sequential_rollout"


DUAL_MODES = (InjectionMode.EMBEDDING_FROZEN_BASE,
              InjectionMode.CACHE_CONCAT_FROZEN_BASE,
              InjectionMode.EMBEDDING_COFINETUNED)

TRAINING_MODES = DUAL_MODES + (InjectionMode.SOFT_EMBEDDING_UNIFIED,)


def base_trainable(mode: InjectionMode) -> bool:
    """Whether the decoding model's weights receive updates in this mode."""
    return mode in (InjectionMode.EMBEDDING_COFINETUNED,
                    InjectionMode.SOFT_EMBEDDING_UNIFIED)


def has_coprocessor(mode: InjectionMode) -> bool:
    return mode in DUAL_MODES


def uses_cache_concat(mode: InjectionMode) -> bool:
    return mode is InjectionMode.CACHE_CONCAT_FROZEN_BASE


@dataclass
class SoftTokenBank:
    """Learnable per-slot input embeddings for the latent positions."""

    embeddings: T.TensorNode

    @staticmethod
    def init(n_latents: int, d_model: int, rng: np.random.Generator,
             std: float = 0.02) -> "SoftTokenBank":
        if n_latents < 0:
            raise ContractError("soft bank: n_latents must be >= 0")
        vals = rng.normal(0.0, std, (n_latents, d_model))
        node = T.tensor(vals, requires_grad=True, dtype=np.float32)
        return SoftTokenBank(node)

    @property
    def n_latents(self) -> int:
        return self.embeddings.values.shape[0]

    @property
    def d_model(self) -> int:
        return self.embeddings.values.shape[1]


@dataclass
class LatentBlock:
    """One site's latents: the vectors themselves plus the coprocessor's
    cache entries for those rows (consumed by the cache-concat variant)."""

    site: int
    z: T.TensorNode
    coproc_entries: ModelCache


@dataclass
class PassCounter:
    """Counts full forward passes; the schedule's cost claims are tested
    against it."""

    full_passes: int = 0
    rows_processed: int = 0
    log: list[str] = field(default_factory=list)

    def tick(self, rows: int, label: str) -> None:
        self.full_passes += 1
        self.rows_processed += int(rows)
        self.log.append(label)

    def reset(self) -> None:
        self.full_passes = 0
        self.rows_processed = 0
        self.log.clear()


def effective_context(seq_len: int, n_sites: int, n_latents: int,
                      n_ahead: int) -> int:
    """Total positions one training sequence occupies across the schedule:
    the prefix plus every site's latent slots and ahead tokens."""
    for name, v in (("seq_len", seq_len), ("n_sites", n_sites),
                    ("n_latents", n_latents), ("n_ahead", n_ahead)):
        if not isinstance(v, (int, np.integer)) or v < 0:
            raise ContractError(f"effective_context: {name} must be a "
                                f"non-negative integer, got {v!r}")
    return int(seq_len + n_sites * (n_latents + n_ahead))


def rollout_speedup(n_latents: int) -> float:
    """Full-pass ratio of sequential latent emission to the fixed three-pass
    schedule: (N_L + 1) / 3."""
    if n_latents < 0:
        raise ContractError("rollout_speedup: n_latents must be >= 0")
    return (n_latents + 1) / 3.0


# ---------------------------------------------------------------------------
# the three passes


def base_prefix_pass(base: ModelParams, token_ids,
                     counter: PassCounter | None = None) -> ModelCache:
    """Pass 1: causal forward over the prefix; only the cache survives."""
    ids = np.asarray(token_ids, dtype=np.intp).reshape(-1)
    if ids.size == 0:
        raise ContractError("base_prefix_pass: empty prefix")
    emb = embed_tokens(base, ids)
    mask = causal_mask(ids.size)
    positions = np.arange(ids.size, dtype=np.int64)
    _, entries, _ = forward(base, emb, None, mask, positions)
    if counter is not None:
        counter.tick(ids.size, "base_prefix")
    return entries


def coprocessor_pass(coproc: ModelParams, base_cache: ModelCache,
                     bank: SoftTokenBank, plan: AugmentationPlan,
                     counter: PassCounter | None = None) -> list[LatentBlock]:
    """Pass 2: one forward over every site's latent slots at once.

    Site t's slot k is seeded with soft token k and may attend the cached
    prefix up to t plus its own earlier slots. Latents are the final hidden
    states of the corresponding rows; the rows' cache entries are kept for
    cache-concat injection.
    """
    if bank.n_latents != plan.n_latents:
        raise ContractError(
            f"coprocessor_pass: bank has {bank.n_latents} slots, "
            f"plan wants {plan.n_latents}")
    if bank.d_model != coproc.config.d_model:
        raise ContractError("coprocessor_pass: bank width mismatch")
    m, nl = plan.n_sites, plan.n_latents
    if nl == 0:
        inputs = T.tensor(np.zeros((0, coproc.config.d_model)),
                          dtype=bank.embeddings.values.dtype)
    elif m == 1:
        inputs = bank.embeddings
    else:
        inputs = T.concat_rows([bank.embeddings] * m)
    mask = build_attention_mask(plan, "coprocessor")
    _, entries, hidden = forward(coproc, inputs, base_cache, mask,
                                 plan.coproc_positions())
    if counter is not None:
        counter.tick(m * nl, "coprocessor")
    blocks = []
    for s, t in enumerate(plan.sites):
        blocks.append(LatentBlock(
            site=t,
            z=T.slice_block(hidden, s * nl, (s + 1) * nl, 0,
                            coproc.config.d_model),
            coproc_entries=slice_cache(entries, s * nl, (s + 1) * nl),
        ))
    return blocks


def _flat_ahead(plan: AugmentationPlan, ahead_token_ids) -> np.ndarray:
    if len(ahead_token_ids) != plan.n_sites:
        raise ContractError(
            f"decode: {len(ahead_token_ids)} ahead lists for "
            f"{plan.n_sites} sites")
    flat = []
    for ids in ahead_token_ids:
        ids = np.asarray(ids, dtype=np.intp).reshape(-1)
        if ids.size != plan.n_ahead:
            raise ContractError(
                f"decode: ahead list of length {ids.size}, "
                f"plan wants {plan.n_ahead}")
        flat.append(ids)
    return np.concatenate(flat) if flat else np.zeros((0,), dtype=np.intp)


def _split_site_logits(logits: T.TensorNode, plan: AugmentationPlan,
                       first_row: int) -> list[T.TensorNode]:
    v = logits.values.shape[1]
    out = []
    for s in range(plan.n_sites):
        r0 = first_row + s * plan.n_ahead
        out.append(T.slice_block(logits, r0, r0 + plan.n_ahead, 0, v))
    return out


def decode_pass(base: ModelParams, base_cache: ModelCache,
                blocks: list[LatentBlock], plan: AugmentationPlan,
                ahead_token_ids, mode: InjectionMode,
                counter: PassCounter | None = None) -> list[T.TensorNode]:
    """Pass 3: the base decodes every site's ahead tokens in one forward.

    Embedding injection feeds each site's latents as input rows ahead of the
    site's tokens; cache-concat appends each site's coprocessor entries to
    the prefix cache instead and feeds only the ahead tokens. Returns one
    (N_A, vocab) logits block per site.
    """
    if mode not in DUAL_MODES:
        raise ContractError(f"decode_pass: {mode.value} is not a dual-model mode")
    if len(blocks) != plan.n_sites:
        raise ContractError(
            f"decode_pass: {len(blocks)} latent blocks for {plan.n_sites} sites")
    for b, t in zip(blocks, plan.sites):
        if b.site != t:
            raise ContractError(
                f"decode_pass: latent block for site {b.site}, plan says {t}")
        if b.z.values.shape != (plan.n_latents, base.config.d_model):
            raise ContractError(
                f"decode_pass: latent block shape {b.z.values.shape}, "
                f"expected ({plan.n_latents},{base.config.d_model})")
    flat = _flat_ahead(plan, ahead_token_ids)
    ahead_emb = embed_tokens(base, flat)
    positions = plan.decode_positions()

    if uses_cache_concat(mode):
        cache = base_cache
        for b in blocks:
            if plan.n_latents:
                cache = concat_cache(cache, b.coproc_entries)
        mask = decode_mask_cache_concat(plan)
        logits, _, _ = forward(base, ahead_emb, cache, mask,
                               positions[plan.latent_rows:])
        if counter is not None:
            counter.tick(plan.ahead_rows, "decode")
        return _split_site_logits(logits, plan, 0)

    parts = [b.z for b in blocks] + [ahead_emb]
    inputs = T.concat_rows(parts)
    mask = build_attention_mask(plan, "decode")
    logits, _, _ = forward(base, inputs, base_cache, mask, positions)
    if counter is not None:
        counter.tick(plan.latent_rows + plan.ahead_rows, "decode")
    return _split_site_logits(logits, plan, plan.latent_rows)


def soft_embedding_pass(base: ModelParams, bank: SoftTokenBank,
                        token_ids, plan: AugmentationPlan, ahead_token_ids,
                        counter: PassCounter | None = None) -> list[T.TensorNode]:
    """Single-model baseline: the latent slots are filled with the bank's
    soft tokens directly and the same model decodes. Two passes per step."""
    if bank.n_latents != plan.n_latents:
        raise ContractError(
            f"soft_embedding_pass: bank has {bank.n_latents} slots, "
            f"plan wants {plan.n_latents}")
    cache = base_prefix_pass(base, token_ids, counter)
    flat = _flat_ahead(plan, ahead_token_ids)
    ahead_emb = embed_tokens(base, flat)
    if plan.n_sites == 1:
        soft = bank.embeddings
    else:
        soft = T.concat_rows([bank.embeddings] * plan.n_sites)
    inputs = T.concat_rows([soft, ahead_emb])
    mask = build_attention_mask(plan, "decode")
    logits, _, _ = forward(base, inputs, cache, mask,
                           plan.decode_positions())
    if counter is not None:
        counter.tick(plan.latent_rows + plan.ahead_rows, "decode")
    return _split_site_logits(logits, plan, plan.latent_rows)


def sequential_rollout(params: ModelParams, token_ids, n_latents: int,
                       counter: PassCounter | None = None
                       ) -> tuple[T.TensorNode, int]:
    """Cost model of one-at-a-time latent emission: a full prefix pass, then
    one full pass per latent, each feeding back the previous final hidden
    state. Returns the last pass's logits row and the pass count, N_L + 1."""
    if n_latents < 0:
        raise ContractError("sequential_rollout: n_latents must be >= 0")
    ids = np.asarray(token_ids, dtype=np.intp).reshape(-1)
    if ids.size == 0:
        raise ContractError("sequential_rollout: empty prefix")
    emb = embed_tokens(params, ids)
    positions = np.arange(ids.size, dtype=np.int64)
    logits, cache, hidden = forward(params, emb, None, causal_mask(ids.size),
                                    positions)
    if counter is not None:
        counter.tick(ids.size, "rollout_prefix")
    passes = 1
    d = params.config.d_model
    for i in range(n_latents):
        last = T.slice_block(hidden, hidden.values.shape[0] - 1,
                             hidden.values.shape[0], 0, d)
        p = cache.length()
        mask = np.ones((1, p + 1), dtype=bool)
        pos = np.asarray([ids.size + i], dtype=np.int64)
        logits, entries, hidden = forward(params, last, cache, mask, pos)
        cache = concat_cache(cache, entries)
        if counter is not None:
            counter.tick(1, f"rollout_latent_{i}")
        passes += 1
    v = params.config.vocab_size
    last_row = T.slice_block(logits, logits.values.shape[0] - 1,
                             logits.values.shape[0], 0, v)
    return last_row, passes


# ---------------------------------------------------------------------------
# greedy generation (evaluation helper)


def _generation_context(mode: InjectionMode, base: ModelParams,
                        coproc: ModelParams | None, bank: SoftTokenBank | None,
                        question_ids: np.ndarray, n_latents: int
                        ) -> tuple[ModelCache, T.TensorNode | None, AugmentationPlan]:
    """Run passes 1 and 2 for a single-site prompt; returns the cache to
    decode against, the latent input rows (None for cache-concat), and the
    plan template used for mask construction."""
    t = int(question_ids.size)
    plan = AugmentationPlan(seq_len=t + 1, sites=(t,), n_latents=n_latents,
                            n_ahead=1, cached_len=t)
    cache = base_prefix_pass(base, question_ids)
    if mode is InjectionMode.SOFT_EMBEDDING_UNIFIED:
        if bank is None or bank.n_latents != n_latents:
            raise ContractError("generation: soft mode needs a matching bank")
        return cache, bank.embeddings, plan
    if mode not in DUAL_MODES:
        raise ContractError(f"generation: unsupported mode {mode.value}")
    if coproc is None or bank is None:
        raise ContractError("generation: dual mode needs coprocessor and bank")
    blocks = coprocessor_pass(coproc, cache, bank, plan)
    if uses_cache_concat(mode):
        merged = cache
        if n_latents:
            merged = concat_cache(cache, blocks[0].coproc_entries)
        return detach_cache(merged), None, plan
    return cache, blocks[0].z, plan


def generate_greedy(mode: InjectionMode, base: ModelParams,
                    coproc: ModelParams | None, bank: SoftTokenBank | None,
                    question_ids, n_latents: int, forced_ids,
                    max_new: int, stop_id: int | None = None) -> list[int]:
    """Greedy decoding through the latent pipeline for one prompt.

    forced_ids are fed (not predicted) after the latents, mirroring the
    trained layout; generated ids are returned without them. Stops at
    stop_id (kept in the output) or after max_new tokens.
    """
    question_ids = np.asarray(question_ids, dtype=np.intp).reshape(-1)
    forced = [int(x) for x in np.asarray(forced_ids, dtype=np.intp).reshape(-1)]
    if question_ids.size == 0 or not forced:
        raise ContractError("generation: needs a question and a forced prefix")
    cache, latent_rows, plan = _generation_context(
        mode, base, coproc, bank, question_ids, n_latents)
    t = int(question_ids.size)

    # First decode pass: latent rows (embedding modes) plus forced tokens.
    gen_plan = AugmentationPlan(seq_len=t + len(forced), sites=(t,),
                                n_latents=n_latents, n_ahead=len(forced),
                                cached_len=t)
    forced_emb = embed_tokens(base, np.asarray(forced, dtype=np.intp))
    if latent_rows is None:
        mask = decode_mask_cache_concat(gen_plan)
        inputs = forced_emb
        positions = gen_plan.decode_positions()[gen_plan.latent_rows:]
    else:
        inputs = T.concat_rows([latent_rows, forced_emb])
        mask = build_attention_mask(gen_plan, "decode")
        positions = gen_plan.decode_positions()
    logits, entries, _ = forward(base, inputs, cache, mask, positions)
    ctx = concat_cache(detach_cache(cache), detach_cache(entries))

    out: list[int] = []
    next_id = int(np.argmax(logits.values[-1]))
    next_pos = t + n_latents + len(forced)
    for _ in range(max_new):
        out.append(next_id)
        if stop_id is not None and next_id == stop_id:
            break
        if next_pos >= base.config.max_positions:
            break
        emb = embed_tokens(base, np.asarray([next_id], dtype=np.intp))
        mask = np.ones((1, ctx.length() + 1), dtype=bool)
        logits, entries, _ = forward(
            base, emb, ctx, mask, np.asarray([next_pos], dtype=np.int64))
        ctx = concat_cache(ctx, detach_cache(entries))
        next_id = int(np.argmax(logits.values[-1]))
        next_pos += 1
    return out
