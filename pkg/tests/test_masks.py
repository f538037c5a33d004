"""Attention-rule correctness: every mask is compared against a brute-force
enumeration that answers, per (query, key) pair, whether the layout rules
allow attention. The oracle is written as standalone predicates over the
layout description so it shares no code with the mask builder."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kvlatent.errors import ContractError
from kvlatent.masks import (AugmentationPlan, build_attention_mask,
                            causal_mask, decode_mask_cache_concat,
                            validate_mask)


# ---------------------------------------------------------------------------
# oracle: describe every row and column of each pass, then apply the rules


def _coproc_layout(plan):
    """Row descriptors (site_index, slot) and column descriptors."""
    rows = [("lat", s, k) for s in range(plan.n_sites)
            for k in range(plan.n_latents)]
    cols = [("prefix", p) for p in range(plan.cached_len)] + rows
    return rows, cols


def _decode_layout(plan):
    rows = ([("lat", s, k) for s in range(plan.n_sites)
             for k in range(plan.n_latents)]
            + [("ahead", s, j) for s in range(plan.n_sites)
               for j in range(plan.n_ahead)])
    cols = [("prefix", p) for p in range(plan.cached_len)] + rows
    return rows, cols


def _may_attend(plan, row, col) -> bool:
    """The rules, stated once, directly:

    - a latent slot sees prefix positions 1..t of its own site and the
      earlier slots of the same site, never itself;
    - an ahead token sees prefix positions 1..t of its own site, every
      latent of its own site, the earlier ahead tokens of its own site,
      and itself (so zero latents reduce to causal continuation);
    - nothing sees any other site.
    """
    kind, s, i = row
    t = plan.sites[s]
    if col[0] == "prefix":
        return col[1] < t          # 0-indexed prefix position < t means <= t
    ckind, cs, ci = col
    if cs != s:
        return False
    if kind == "lat":
        return ckind == "lat" and ci < i
    if ckind == "lat":
        return True
    return ci <= i


def oracle_mask(plan, pass_kind) -> np.ndarray:
    if pass_kind == "base_prefix":
        n = plan.cached_len
        return np.fromfunction(lambda i, j: j <= i, (n, n), dtype=int)
    rows, cols = (_coproc_layout(plan) if pass_kind == "coprocessor"
                  else _decode_layout(plan))
    out = np.zeros((len(rows), len(cols)), dtype=bool)
    for r, row in enumerate(rows):
        for c, col in enumerate(cols):
            out[r, c] = _may_attend(plan, row, col)
    return out


# ---------------------------------------------------------------------------
# random plans


@st.composite
def plans(draw):
    n_ahead = draw(st.integers(1, 4))
    n_latents = draw(st.integers(0, 5))
    n_sites = draw(st.integers(1, 4))
    seq_len = draw(st.integers(n_sites * n_ahead + 1, 40))
    # sample sites with the required gaps via sorted draws over a shrunk
    # range; repeats are fine, the i*n_ahead shift keeps sites increasing
    slots = seq_len - n_sites * n_ahead
    picks = sorted(draw(st.lists(st.integers(0, slots - 1),
                                 min_size=n_sites, max_size=n_sites)))
    sites = tuple(p + 1 + i * n_ahead for i, p in enumerate(picks))
    cached_len = draw(st.integers(max(sites), seq_len))
    return AugmentationPlan(seq_len=seq_len, sites=sites, n_latents=n_latents,
                            n_ahead=n_ahead, cached_len=cached_len)


@settings(max_examples=120, deadline=None)
@given(plans())
def test_all_three_pass_masks_match_oracle(plan):
    for kind in ("base_prefix", "coprocessor", "decode"):
        got = build_attention_mask(plan, kind)
        want = oracle_mask(plan, kind)
        assert got.shape == want.shape, (kind, got.shape, want.shape)
        np.testing.assert_array_equal(got, want, err_msg=f"{kind} {plan}")


@settings(max_examples=60, deadline=None)
@given(plans())
def test_cache_concat_decode_mask_is_ahead_slice(plan):
    full = oracle_mask(plan, "decode")
    got = decode_mask_cache_concat(plan)
    np.testing.assert_array_equal(got, full[plan.latent_rows:])


def test_plan_count_property_and_positions():
    plan = AugmentationPlan(seq_len=20, sites=(3, 9, 15), n_latents=2,
                            n_ahead=3)
    assert plan.n_sites == 3
    assert plan.latent_rows == 6
    assert plan.ahead_rows == 9
    np.testing.assert_array_equal(plan.coproc_positions(),
                                  [3, 4, 9, 10, 15, 16])
    np.testing.assert_array_equal(
        plan.decode_positions(),
        [3, 4, 9, 10, 15, 16, 5, 6, 7, 11, 12, 13, 17, 18, 19])
    np.testing.assert_array_equal(plan.ahead_source_positions(),
                                  [4, 5, 6, 10, 11, 12, 16, 17, 18])


def test_ahead_rows_do_not_see_future_prefix():
    # ahead token j of site t must NOT see prefix beyond t, even though the
    # equivalent token position in plain decoding would
    plan = AugmentationPlan(seq_len=12, sites=(4,), n_latents=2, n_ahead=3)
    mask = build_attention_mask(plan, "decode")
    last_ahead = plan.latent_rows + plan.n_ahead - 1
    assert mask[last_ahead, :4].all()
    assert not mask[last_ahead, 4: plan.cached_len].any()


def test_no_cross_site_visibility_anywhere():
    plan = AugmentationPlan(seq_len=16, sites=(3, 8), n_latents=3, n_ahead=2)
    mask = build_attention_mask(plan, "decode")
    p = plan.cached_len
    # site 0 rows: latents 0..2 and aheads 6..7; site 1 columns: p+3..p+5
    # (latents) and p+8..p+9 (aheads)
    site0_rows = [0, 1, 2, 6, 7]
    site1_cols = list(range(p + 3, p + 6)) + list(range(p + 8, p + 10))
    assert not mask[np.ix_(site0_rows, site1_cols)].any()
    site1_rows = [3, 4, 5, 8, 9]
    site0_cols = list(range(p, p + 3)) + list(range(p + 6, p + 8))
    assert not mask[np.ix_(site1_rows, site0_cols)].any()


def test_self_attention_split_latents_no_aheads_yes():
    plan = AugmentationPlan(seq_len=10, sites=(2, 6), n_latents=2, n_ahead=2)
    p = plan.cached_len
    coproc = build_attention_mask(plan, "coprocessor")
    assert not np.diagonal(coproc[:, p:]).any()
    decode = build_attention_mask(plan, "decode")
    diag = np.diagonal(decode[:, p:])
    lat = plan.latent_rows
    assert not diag[:lat].any()       # latent rows never see themselves
    assert diag[lat:].all()           # ahead rows always do


def test_zero_latents_decode_equals_causal_continuation_pattern():
    # with no latents, each ahead row sees exactly a causal continuation of
    # its site's prefix
    plan = AugmentationPlan(seq_len=9, sites=(5,), n_latents=0, n_ahead=3)
    mask = build_attention_mask(plan, "decode")
    want = np.zeros((3, 9 + 3), dtype=bool)
    for j in range(3):
        want[j, :5] = True
        want[j, 9: 9 + j + 1] = True   # earlier re-fed rows plus self
    np.testing.assert_array_equal(mask, want)


def test_causal_mask_with_past():
    m = causal_mask(3, past=2)
    want = np.array([[1, 1, 1, 0, 0],
                     [1, 1, 1, 1, 0],
                     [1, 1, 1, 1, 1]], dtype=bool)
    np.testing.assert_array_equal(m, want)


def test_validate_mask_rejects_starved_row():
    bad = np.array([[True, False], [False, False]])
    with pytest.raises(ContractError):
        validate_mask(bad)


@pytest.mark.parametrize("kwargs", [
    dict(seq_len=10, sites=(), n_latents=1, n_ahead=1),
    dict(seq_len=10, sites=(0,), n_latents=1, n_ahead=1),
    dict(seq_len=10, sites=(9,), n_latents=1, n_ahead=2),
    dict(seq_len=10, sites=(3, 3), n_latents=1, n_ahead=1),
    dict(seq_len=10, sites=(3, 4), n_latents=1, n_ahead=2),
    dict(seq_len=10, sites=(5, 2), n_latents=1, n_ahead=1),
    dict(seq_len=10, sites=(3,), n_latents=-1, n_ahead=1),
    dict(seq_len=10, sites=(6,), n_latents=1, n_ahead=1, cached_len=5),
    dict(seq_len=10, sites=(3,), n_latents=1, n_ahead=1, cached_len=11),
])
def test_invalid_plans_rejected(kwargs):
    with pytest.raises(ContractError):
        AugmentationPlan(**kwargs)


def test_unknown_pass_kind_rejected():
    plan = AugmentationPlan(seq_len=5, sites=(2,), n_latents=1, n_ahead=1)
    with pytest.raises(ContractError):
        build_attention_mask(plan, "prefill")
