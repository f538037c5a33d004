"""Synthetic directed-graph reachability QA with step-by-step traces.

Each instance lists the edges of a small DAG, asks which of two candidate
nodes is reachable from a start node, and carries the reachable path as its
reasoning steps. The distractor candidate is provably unreachable: the
generator places it on a separate chain that no path from the start can
enter, and asserts that with a search before emitting the instance.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass

import numpy as np

from ..errors import ContractError, DataFormatError
from .tokenizer import ByteTokenizer


@dataclass(frozen=True)
class GraphQAInstance:
    entities: tuple[str, ...]
    edges: tuple[tuple[str, str], ...]
    start: str
    question: str
    steps: tuple[str, ...]
    answer: str

    def __post_init__(self):
        names = set(self.entities)
        for a, b in self.edges:
            if a not in names or b not in names:
                raise ContractError(f"graph-qa: edge ({a},{b}) references an "
                                    f"unknown entity")
        if self.answer not in names:
            raise ContractError("graph-qa: answer is not an entity")


def reachable(edges, start: str, goal: str) -> bool:
    """Breadth-first reachability over a directed edge list."""
    adj: dict[str, list[str]] = {}
    for a, b in edges:
        adj.setdefault(a, []).append(b)
    seen = {start}
    queue = deque([start])
    while queue:
        node = queue.popleft()
        if node == goal:
            return True
        for nxt in adj.get(node, ()):
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return start == goal


def _entity_pool(rng: np.random.Generator, count: int) -> list[str]:
    letters = "abcdefghijklmnopqrstuvwxyz"
    pool = [a + b for a in letters for b in letters]
    idx = rng.permutation(len(pool))[:count]
    return [pool[i] for i in idx]


def gen_graph_qa(depth: int, width: int,
                 rng: np.random.Generator) -> GraphQAInstance:
    """Sample one instance: a main path of `depth` edges from the start to
    the true answer, up to `width` dead-end branches off the path, and an
    unreachable distractor chain of the same depth."""
    if depth < 1 or width < 0:
        raise ContractError("gen_graph_qa: depth must be >= 1, width >= 0")
    n_names = (depth + 1) + depth + width
    names = _entity_pool(rng, n_names)
    path = names[:depth + 1]
    chain = names[depth + 1: 2 * depth + 1]
    extras = names[2 * depth + 1:]

    edges: list[tuple[str, str]] = []
    for a, b in zip(path, path[1:]):
        edges.append((a, b))
    # Distractor chain: disconnected from everything reachable from start.
    for a, b in zip(chain, chain[1:]):
        edges.append((a, b))
    # Dead-end branches hang off random path nodes (never off the last node,
    # so the true answer stays a sink like the distractor).
    for node in extras:
        src = path[int(rng.integers(0, depth))]
        edges.append((src, node))

    start, goal = path[0], path[-1]
    distractor = chain[-1]
    assert reachable(edges, start, goal)
    assert not reachable(edges, start, distractor)

    order = rng.permutation(len(edges))
    shown = [edges[i] for i in order]
    pair = [goal, distractor]
    if rng.integers(0, 2):
        pair.reverse()
    question = ("Edges: "
                + ", ".join(f"{a} -> {b}" for a, b in shown)
                + f". Start at {start}. Which node is reachable: "
                + f"{pair[0]} or {pair[1]}?")
    steps = tuple(f"{a} -> {b}" for a, b in zip(path, path[1:]))
    return GraphQAInstance(tuple(names), tuple(shown), start, question,
                           steps, goal)


def format_graph_qa(inst: GraphQAInstance, tok: ByteTokenizer
                    ) -> tuple[list[int], list[list[int]], list[int]]:
    """(question ids, one id list per reasoning step, answer ids)."""
    q = tok.encode(inst.question) + [tok.q_sep]
    steps = [tok.encode(s) + [tok.a_sep] for s in inst.steps]
    answer = [tok.answer_open] + tok.encode(f" {inst.answer} ") \
        + [tok.answer_close]
    return q, steps, answer


def score_graph_qa(output_text: str, inst: GraphQAInstance) -> bool:
    text = output_text
    if "<answer>" in text:
        text = text.split("<answer>", 1)[1]
    if "</answer>" in text:
        text = text.split("</answer>", 1)[0]
    return text.strip() == inst.answer


def write_graph_qa_jsonl(path, instances) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for inst in instances:
            f.write(json.dumps({
                "entities": list(inst.entities),
                "edges": [list(e) for e in inst.edges],
                "start": inst.start,
                "question": inst.question,
                "steps": list(inst.steps),
                "answer": inst.answer,
            }) + "\n")


def read_graph_qa_jsonl(path) -> list[GraphQAInstance]:
    out = []
    with open(path, "r", encoding="utf-8") as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
                inst = GraphQAInstance(
                    tuple(rec["entities"]),
                    tuple((str(a), str(b)) for a, b in rec["edges"]),
                    str(rec["start"]), str(rec["question"]),
                    tuple(rec["steps"]), str(rec["answer"]))
            except (KeyError, TypeError, ValueError, ContractError) as e:
                raise DataFormatError(f"{path}:{ln}: bad graph-qa record "
                                      f"({e})") from e
            out.append(inst)
    return out
