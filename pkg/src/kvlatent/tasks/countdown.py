"""Countdown arithmetic: generation, exhaustive solving, formatting, scoring.

An instance asks for an arithmetic expression over a fixed multiset of
operands that evaluates to a target. Expressions are binary trees over
{+, -, *, /}; division is only legal when it is exact over the integers,
and intermediate values are otherwise unconstrained.

The solver enumerates skeletons: an operand ordering (n! index
permutations, so duplicate operands still count separately), a binary tree
shape (Catalan(n-1) of them), and an operator family per internal node
(additive {+,-} or multiplicative {*,/}; 2^(n-1) assignments). Within a
skeleton both members of each node's family are expanded with exact-division
pruning, so every operator assignment is reached and the search is complete.
The skeleton count n! * Catalan(n-1) * 2^(n-1) is exactly the task's
branching factor.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from itertools import permutations, product

import numpy as np

from ..errors import ContractError, DataFormatError, GenerationError
from .tokenizer import ByteTokenizer

_ADD, _MUL = "A", "M"
_PREC = {"+": 0, "-": 0, "*": 1, "/": 1}


@dataclass(frozen=True)
class CountdownInstance:
    nums: tuple[int, ...]
    target: int
    solution: str

    def __post_init__(self):
        if len(self.nums) < 1:
            raise ContractError("countdown: needs at least one operand")
        if any(int(x) < 1 for x in self.nums):
            raise ContractError("countdown: operands must be positive integers")
        if int(self.target) < 0:
            raise ContractError("countdown: target must be non-negative")

    @property
    def n_operands(self) -> int:
        return len(self.nums)


def branching_factor(n_operands: int) -> int:
    """Expression skeletons for n operands: Catalan(n-1) * 2^(n-1) * n!."""
    n = int(n_operands)
    if n < 1:
        raise ContractError("branching_factor: n_operands must be >= 1")
    catalan = math.comb(2 * (n - 1), n - 1) // n
    return catalan * 2 ** (n - 1) * math.factorial(n)


_SHAPE_MEMO: dict[int, list] = {}


def _shapes(n: int) -> list:
    """All full binary tree shapes with n leaves; None is a leaf."""
    if n in _SHAPE_MEMO:
        return _SHAPE_MEMO[n]
    if n == 1:
        out = [None]
    else:
        out = [(l, r)
               for i in range(1, n)
               for l in _shapes(i)
               for r in _shapes(n - i)]
    _SHAPE_MEMO[n] = out
    return out


def _build_tree(shape, leaf_iter, family_iter):
    if shape is None:
        return next(leaf_iter)
    fam = next(family_iter)
    left = _build_tree(shape[0], leaf_iter, family_iter)
    right = _build_tree(shape[1], leaf_iter, family_iter)
    return (fam, left, right)


def _skeletons(nums: tuple[int, ...]):
    """Yield every (operand ordering, shape, family assignment) as a tree
    whose leaves are operand values and whose internal nodes carry families.
    Family assignment order is preorder."""
    n = len(nums)
    for perm in permutations(range(n)):
        values = [nums[i] for i in perm]
        for shape in _shapes(n):
            for fams in product((_ADD, _MUL), repeat=n - 1):
                yield _build_tree(shape, iter(values), iter(fams))


def count_skeletons(n_operands: int) -> int:
    """Size of the solver's unpruned enumeration for n operands."""
    return sum(1 for _ in _skeletons(tuple(range(1, n_operands + 1))))


def _eval_family_tree(tree):
    """Expand a family tree into concrete (value, op-tree) results, pruning
    inexact division."""
    if not isinstance(tree, tuple):
        yield tree, tree
        return
    fam, left, right = tree
    for lv, lt in _eval_family_tree(left):
        for rv, rt in _eval_family_tree(right):
            if fam == _ADD:
                yield lv + rv, ("+", lt, rt)
                yield lv - rv, ("-", lt, rt)
            else:
                yield lv * rv, ("*", lt, rt)
                if rv != 0 and lv % rv == 0:
                    yield lv // rv, ("/", lt, rt)


def _render(tree) -> str:
    """Minimal-parenthesis rendering. The string re-parses (left to right,
    usual precedence) to the same rational value as the tree."""
    if not isinstance(tree, tuple):
        return str(tree)
    op, left, right = tree
    prec = _PREC[op]
    ls = _render(left)
    rs = _render(right)
    if isinstance(left, tuple) and _PREC[left[0]] < prec:
        ls = f"({ls})"
    if isinstance(right, tuple) and (
            _PREC[right[0]] < prec
            or (_PREC[right[0]] == prec and op in ("-", "/"))):
        rs = f"({rs})"
    return f"{ls} {op} {rs}"


def solve_countdown(nums, target: int) -> str | None:
    """Exhaustive search for an expression over exactly the given operands
    reaching the target; returns a rendered witness or None."""
    nums = tuple(int(x) for x in nums)
    target = int(target)
    for tree in _skeletons(nums):
        for value, op_tree in _eval_family_tree(tree):
            if value == target:
                return _render(op_tree)
    return None


def gen_countdown(n_operands: int, rng: np.random.Generator,
                  operand_range: tuple[int, int] = (1, 50),
                  target_range: tuple[int, int] = (0, 100),
                  max_attempts: int = 10_000,
                  require_solvable: bool = True) -> CountdownInstance:
    """Sample an instance. With require_solvable (the default) the operands
    and a random expression over them are drawn together and the draw is
    kept only if every division is exact and the value lands in the target
    range, so the recorded solution is a constructive witness. Without it,
    operands and target are drawn independently and may be unsolvable (the
    solution field is empty)."""
    n = int(n_operands)
    if n < 1:
        raise ContractError("gen_countdown: n_operands must be >= 1")
    lo, hi = operand_range
    tlo, thi = target_range
    shapes = _shapes(n)
    for _ in range(max_attempts):
        nums = tuple(int(x) for x in rng.integers(lo, hi + 1, size=n))
        if not require_solvable:
            target = int(rng.integers(tlo, thi + 1))
            return CountdownInstance(nums, target, "")
        order = [nums[i] for i in rng.permutation(n)]
        shape = shapes[int(rng.integers(len(shapes)))]
        ops = [("+", "-", "*", "/")[int(k)]
               for k in rng.integers(0, 4, size=n - 1)]
        tree = _build_tree(shape, iter(order), iter(ops))
        value, op_tree = _eval_concrete(tree)
        if value is None or not (tlo <= value <= thi):
            continue
        return CountdownInstance(nums, int(value), _render(op_tree))
    raise GenerationError(
        f"gen_countdown: no valid instance in {max_attempts} attempts "
        f"(n_operands={n}, operands in [{lo},{hi}], target in [{tlo},{thi}])")


def _eval_concrete(tree):
    """Evaluate a tree with concrete operators; (None, None) if some
    division is inexact."""
    if not isinstance(tree, tuple):
        return tree, tree
    op, left, right = tree
    lv, lt = _eval_concrete(left)
    if lv is None:
        return None, None
    rv, rt = _eval_concrete(right)
    if rv is None:
        return None, None
    if op == "+":
        return lv + rv, (op, lt, rt)
    if op == "-":
        return lv - rv, (op, lt, rt)
    if op == "*":
        return lv * rv, (op, lt, rt)
    if rv == 0 or lv % rv != 0:
        return None, None
    return lv // rv, (op, lt, rt)


# ---------------------------------------------------------------------------
# prompt formatting and answer scoring


PROMPT_TEMPLATE = ("User: Using the numbers [{nums}], create an equation "
                   "that equals {target}.\nAssistant: Let me solve this "
                   "step by step.\n")


def format_countdown(inst: CountdownInstance, tok: ByteTokenizer,
                     n_latents: int) -> tuple[list[int], list[int]]:
    """(prompt ids ending in n_latents latent placeholders, answer ids
    wrapped in answer tags)."""
    if n_latents < 0:
        raise ContractError("format_countdown: n_latents must be >= 0")
    text = PROMPT_TEMPLATE.format(nums=", ".join(str(x) for x in inst.nums),
                                  target=inst.target)
    prompt = tok.encode(text) + [tok.latent] * n_latents
    answer = [tok.answer_open] + tok.encode(f" {inst.solution} ") \
        + [tok.answer_close]
    return prompt, answer


def split_prompt(prompt_ids, tok: ByteTokenizer) -> tuple[list[int], int]:
    """Strip the trailing latent placeholders off a formatted prompt;
    placeholders anywhere else are a contract violation."""
    ids = [int(x) for x in prompt_ids]
    n_lat = 0
    while ids and ids[-1] == tok.latent:
        ids.pop()
        n_lat += 1
    if tok.latent in ids:
        raise ContractError("split_prompt: latent placeholder inside the "
                            "question span")
    return ids, n_lat


_UNICODE_OPS = {"−": "-", "×": "*", "÷": "/", "–": "-"}


def _lex_expression(text: str) -> list | None:
    out: list = []
    i = 0
    while i < len(text):
        c = text[i]
        if c.isspace():
            i += 1
            continue
        c = _UNICODE_OPS.get(c, c)
        if c in "+-*/()":
            out.append(c)
            i += 1
            continue
        if c.isdigit():
            j = i
            while j < len(text) and text[j].isdigit():
                j += 1
            out.append(int(text[i:j]))
            i = j
            continue
        return None
    return out


def parse_expression(text: str) -> tuple[Fraction, list[int]] | None:
    """Parse an arithmetic expression; returns (exact value, operand leaves)
    or None if it does not parse or divides by zero."""
    tokens = _lex_expression(text)
    if not tokens:
        return None
    pos = 0
    leaves: list[int] = []

    def peek():
        return tokens[pos] if pos < len(tokens) else None

    def factor():
        nonlocal pos
        t = peek()
        if isinstance(t, int):
            pos += 1
            leaves.append(t)
            return Fraction(t)
        if t == "(":
            pos += 1
            v = expr()
            if v is None or peek() != ")":
                return None
            pos += 1
            return v
        return None

    def term():
        nonlocal pos
        v = factor()
        if v is None:
            return None
        while peek() in ("*", "/"):
            op = tokens[pos]
            pos += 1
            r = factor()
            if r is None:
                return None
            if op == "*":
                v = v * r
            else:
                if r == 0:
                    return None
                v = v / r
        return v

    def expr():
        nonlocal pos
        v = term()
        if v is None:
            return None
        while peek() in ("+", "-"):
            op = tokens[pos]
            pos += 1
            r = term()
            if r is None:
                return None
            v = v + r if op == "+" else v - r
        return v

    value = expr()
    if value is None or pos != len(tokens):
        return None
    return value, leaves


def extract_answer(text: str) -> str:
    """Pull the expression span out of model output: the region between the
    answer tags when present, the whole text otherwise."""
    s = text
    if "<answer>" in s:
        s = s.split("<answer>", 1)[1]
    if "</answer>" in s:
        s = s.split("</answer>", 1)[0]
    return s.strip()


def score_countdown(output_text: str, inst: CountdownInstance) -> bool:
    """True iff the output's expression evaluates exactly to the target and
    uses the instance's operands exactly once each. Unparseable output
    scores False; callers that need a parse-failure count use
    parse_expression directly."""
    parsed = parse_expression(extract_answer(output_text))
    if parsed is None:
        return False
    value, leaves = parsed
    return value == inst.target and sorted(leaves) == sorted(inst.nums)


# ---------------------------------------------------------------------------
# dataset files


def write_countdown_jsonl(path, instances) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for inst in instances:
            f.write(json.dumps({"nums": list(inst.nums),
                                "target": inst.target,
                                "solution": inst.solution}) + "\n")


def read_countdown_jsonl(path) -> list[CountdownInstance]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                inst = CountdownInstance(tuple(int(x) for x in rec["nums"]),
                                         int(rec["target"]),
                                         str(rec["solution"]))
            except (KeyError, TypeError, ValueError, ContractError) as e:
                raise DataFormatError(f"{path}:{ln}: bad countdown record "
                                      f"({e})") from e
            out.append(inst)
    return out
