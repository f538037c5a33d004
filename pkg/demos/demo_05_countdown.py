"""
Countdown: generation, solving, and the search-space ladder
===========================================================

Combine each operand exactly once with + - * / to hit the target. The
unpruned expression count explodes with operand count, which is what
makes the task a usable difficulty dial for latent-reasoning training.
"""

import numpy as np

from kvlatent.tasks.countdown import (branching_factor, format_countdown,
                                      gen_countdown, parse_expression,
                                      score_countdown, solve_countdown)
from kvlatent.tasks.tokenizer import ByteTokenizer

print("operands  expressions (permutations x tree shapes x op choices)")
for n in range(1, 6):
    print(f"{n:>8}  {branching_factor(n):>10,}")

# the solver enumerates that space completely, pruning inexact divisions
expr = solve_countdown((3, 5, 7, 2), 46)
print(f"\nsolve (3, 5, 7, 2) -> 46: {expr}")
value, leaves = parse_expression(expr)
assert value == 46 and sorted(leaves) == [2, 3, 5, 7]

print("unreachable target:", solve_countdown((2, 2), 7))

# sampled instances always carry a constructive witness expression
rng = np.random.default_rng(42)
inst = gen_countdown(4, rng, operand_range=(1, 20))
print(f"\nsampled: nums={inst.nums} target={inst.target} "
      f"solution={inst.solution}")

# training layout: prompt text, latent placeholders, tagged answer span
tok = ByteTokenizer()
prompt, answer = format_countdown(inst, tok, n_latents=4)
print(f"\nprompt is {len(prompt)} ids ({prompt[-4:]} are latent slots)")
print("prompt text:", tok.decode(prompt))
print("answer ids decode to:", tok.decode(answer))

# scoring re-parses the emitted expression and checks value + operand use
assert score_countdown(f" {inst.solution} ", inst)
assert not score_countdown(" 1 + 1 ", inst)
print("\nscorer accepts the witness and rejects a wrong expression")
