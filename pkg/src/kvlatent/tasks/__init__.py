from .tokenizer import ByteTokenizer
from .countdown import (CountdownInstance, branching_factor, format_countdown,
                        gen_countdown, score_countdown, solve_countdown)
from .graphqa import GraphQAInstance, gen_graph_qa, reachable
from .corpus import ingest_text_corpus, synth_corpus

__all__ = [
    "ByteTokenizer", "CountdownInstance", "branching_factor",
    "format_countdown", "gen_countdown", "score_countdown", "solve_countdown",
    "GraphQAInstance", "gen_graph_qa", "reachable",
    "ingest_text_corpus", "synth_corpus",
]
