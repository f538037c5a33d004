"""Augmentation plans and dense attention masks for the three-pass schedule.

A plan places M augmentation sites inside a sequence. Site t (1-indexed)
owns N_L latent slots and N_A ahead tokens. The extended layout used by the
coprocessor and decode passes is site-major: all latent rows first (site 1's
slots, then site 2's, ...), then all ahead rows in the same site order.

Masks are dense booleans of shape (query rows, cache columns + query rows);
True means "may attend". The rules, per pass:

  base_prefix   row i attends columns 0..i of the prefix (plain causal).
  coprocessor   latent slot k of site t attends the t cached prefix rows
                and earlier latent slots of the same site. Never itself,
                never other sites.
  decode        latent rows follow the coprocessor rule (used when latents
                are re-fed as embeddings). Ahead token j of site t attends
                the t cached prefix rows, all N_L latents of its site, the
                earlier ahead tokens of its site, and itself. Never any
                other site. The re-fed rows carry positions t+1..t+j+1, so
                together with the self key the visible positions span
                1..t+j+1 exactly once each (the cached copies of the ahead
                window stay hidden); with N_L = 0 every ahead row therefore
                sees precisely what plain causal decoding of its position
                sees, and the pass reduces to cached continuation.

The cache-concat injection variant appends coprocessor entries after the
prefix cache; its decode mask is the ahead-row slice of the full decode
mask, because the column layout (prefix, then latent slots site-major, then
ahead rows site-major) is identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError

PASS_KINDS = ("base_prefix", "coprocessor", "decode")


@dataclass(frozen=True)
class AugmentationPlan:
    """Placement of augmentation sites within one sequence.

    seq_len: S, the number of underlying sequence positions the layout may
        reference (site t needs positions up to t + N_A).
    sites: strictly increasing 1-indexed positions after which latents are
        injected.
    n_latents: N_L latent slots per site (may be 0).
    n_ahead: N_A ahead tokens per site (at least 1 during training).
    cached_len: prefix rows actually present in the base cache. Defaults to
        seq_len (whole-window pretraining); fine-tuning caches only the
        question prefix.
    """

    seq_len: int
    sites: tuple[int, ...]
    n_latents: int
    n_ahead: int
    cached_len: int = field(default=-1)

    def __post_init__(self):
        if self.cached_len == -1:
            object.__setattr__(self, "cached_len", self.seq_len)
        if self.seq_len < 1:
            raise ContractError(f"plan: seq_len must be >= 1, got {self.seq_len}")
        if self.n_latents < 0 or self.n_ahead < 0:
            raise ContractError("plan: n_latents and n_ahead must be >= 0")
        if not self.sites:
            raise ContractError("plan: needs at least one site")
        if not (0 < self.cached_len <= self.seq_len):
            raise ContractError(
                f"plan: cached_len {self.cached_len} outside (0, {self.seq_len}]")
        prev: int | None = None
        for t in self.sites:
            if t < 1:
                raise ContractError(f"plan: site {t} is not a valid position")
            if prev is not None and (t <= prev or t < prev + self.n_ahead):
                raise ContractError(f"plan: sites must be strictly increasing "
                                    f"with gaps >= n_ahead, got {self.sites}")
            if t + self.n_ahead > self.seq_len:
                raise ContractError(
                    f"plan: site {t} + n_ahead {self.n_ahead} exceeds "
                    f"seq_len {self.seq_len}")
            if t > self.cached_len:
                raise ContractError(
                    f"plan: site {t} beyond cached prefix {self.cached_len}")
            prev = t

    @property
    def n_sites(self) -> int:
        return len(self.sites)

    @property
    def latent_rows(self) -> int:
        return self.n_sites * self.n_latents

    @property
    def ahead_rows(self) -> int:
        return self.n_sites * self.n_ahead

    def coproc_positions(self) -> np.ndarray:
        """0-indexed rotary ids for the coprocessor layout (site-major).

        Prefix token at 1-indexed position p sits at rotary id p - 1, so the
        latent slots of site t occupy ids t..t+N_L-1.
        """
        ids = [t + k for t in self.sites for k in range(self.n_latents)]
        return np.asarray(ids, dtype=np.int64)

    def decode_positions(self) -> np.ndarray:
        """0-indexed rotary ids for the decode layout: latent rows site-major,
        then ahead rows site-major at ids t+N_L..t+N_L+N_A-1."""
        lat = [t + k for t in self.sites for k in range(self.n_latents)]
        ahead = [t + self.n_latents + j
                 for t in self.sites for j in range(self.n_ahead)]
        return np.asarray(lat + ahead, dtype=np.int64)

    def ahead_source_positions(self) -> np.ndarray:
        """1-indexed sequence positions of the tokens the ahead rows re-feed:
        ahead slot j of site t carries the token at position t + j + 1."""
        ids = [t + j + 1 for t in self.sites for j in range(self.n_ahead)]
        return np.asarray(ids, dtype=np.int64)


def causal_mask(t: int, past: int = 0) -> np.ndarray:
    """(t, past + t) mask: row i attends all past columns and self-or-earlier
    current columns."""
    if t < 0 or past < 0:
        raise ContractError("causal_mask: negative sizes")
    m = np.zeros((t, past + t), dtype=bool)
    m[:, :past] = True
    m[:, past:] = np.tril(np.ones((t, t), dtype=bool))
    return m


def validate_mask(mask: np.ndarray) -> None:
    """Reject masks with any all-False row (softmax would be undefined)."""
    if mask.ndim != 2:
        raise ContractError(f"mask: expected 2-D, got ndim={mask.ndim}")
    if mask.shape[0] and not mask.any(axis=1).all():
        bad = int(np.flatnonzero(~mask.any(axis=1))[0])
        raise ContractError(f"mask: row {bad} attends nothing")


def build_attention_mask(plan: AugmentationPlan, pass_kind: str) -> np.ndarray:
    """Dense boolean mask for one pass of the schedule. See module docstring
    for the exact attention rules."""
    if pass_kind not in PASS_KINDS:
        raise ContractError(
            f"build_attention_mask: unknown pass kind {pass_kind!r}; "
            f"expected one of {PASS_KINDS}")
    if pass_kind == "base_prefix":
        return causal_mask(plan.cached_len)

    p = plan.cached_len
    m = plan.n_sites
    nl, na = plan.n_latents, plan.n_ahead

    if pass_kind == "coprocessor":
        rows = m * nl
        mask = np.zeros((rows, p + rows), dtype=bool)
        for s, t in enumerate(plan.sites):
            base = s * nl
            for k in range(nl):
                r = base + k
                mask[r, :t] = True                      # cached prefix <= t
                mask[r, p + base: p + base + k] = True  # earlier own slots
        if rows:
            validate_mask(mask)
        return mask

    # decode: latent rows then ahead rows, both site-major
    lat_rows = m * nl
    rows = lat_rows + m * na
    mask = np.zeros((rows, p + rows), dtype=bool)
    for s, t in enumerate(plan.sites):
        lbase = s * nl
        for k in range(nl):
            r = lbase + k
            mask[r, :t] = True
            mask[r, p + lbase: p + lbase + k] = True
        abase = lat_rows + s * na
        for j in range(na):
            r = abase + j
            mask[r, :t] = True                              # cached prefix <= t
            mask[r, p + lbase: p + lbase + nl] = True       # all own latents
            mask[r, p + abase: p + abase + j + 1] = True    # own aheads + self
    if rows:
        validate_mask(mask)
    return mask


def decode_mask_cache_concat(plan: AugmentationPlan) -> np.ndarray:
    """Ahead-rows-only decode mask for the cache-concat variant: columns are
    the prefix cache, then the appended per-site coprocessor entries
    (site-major), then the ahead rows themselves."""
    full = build_attention_mask(plan, "decode")
    return full[plan.latent_rows:, :]
