"""Pretraining corpus utilities: file ingestion and a synthetic generator.

The synthetic corpus mixes structures whose continuations are predictable
from earlier context at several ranges (counting runs, alphabet runs,
key-value recall, templated sentences that repeat their subject), so even a
small model trained from scratch has gradient signal, and sites that carry
extra computation can lower the loss on the tokens that follow them.
"""

from __future__ import annotations

import numpy as np

from ..errors import DataFormatError
from .tokenizer import ByteTokenizer

_ADJ = ["red", "old", "tiny", "loud", "calm", "grey", "warm", "pale"]
_NOUN = ["fox", "door", "river", "stone", "lamp", "crow", "boat", "field"]
_VERB = ["crosses", "watches", "follows", "opens", "paints", "guards"]


def synth_corpus(n_bytes: int, seed: int) -> str:
    """Deterministic synthetic text of at least n_bytes bytes."""
    rng = np.random.default_rng([seed, 0xC0])
    parts: list[str] = []
    total = 0
    while total < n_bytes:
        kind = int(rng.integers(0, 4))
        if kind == 0:
            start = int(rng.integers(1, 90))
            run = int(rng.integers(5, 13))
            s = " ".join(str(start + i) for i in range(run)) + ". "
        elif kind == 1:
            a = int(rng.integers(0, 20))
            run = int(rng.integers(4, 7))
            s = " ".join(chr(ord("a") + a + i) for i in range(run)) + ". "
        elif kind == 2:
            n_pairs = int(rng.integers(2, 5))
            keys = rng.permutation(26)[:n_pairs]
            vals = rng.integers(1, 100, size=n_pairs)
            defs = " ".join(f"{chr(ord('a') + int(k))}={int(v)}"
                            for k, v in zip(keys, vals))
            i = int(rng.integers(0, n_pairs))
            s = (f"{defs} ; recall {chr(ord('a') + int(keys[i]))} "
                 f"-> {int(vals[i])}. ")
        else:
            adj = _ADJ[int(rng.integers(len(_ADJ)))]
            noun = _NOUN[int(rng.integers(len(_NOUN)))]
            verb = _VERB[int(rng.integers(len(_VERB)))]
            noun2 = _NOUN[int(rng.integers(len(_NOUN)))]
            verb2 = _VERB[int(rng.integers(len(_VERB)))]
            s = (f"the {adj} {noun} {verb} the {noun2}. "
                 f"the {adj} {noun} {verb2}. ")
        parts.append(s)
        total += len(s)
    return "".join(parts)


def ingest_text_corpus(path, seq_len: int,
                       tok: ByteTokenizer | None = None) -> np.ndarray:
    """Tokenize a UTF-8 text file and cut it into non-overlapping windows.

    Returns an (n_windows, seq_len) int array; the trailing remainder that
    cannot fill a window is dropped. A file too short for even one window is
    a data-format error reporting the byte counts."""
    tok = tok or ByteTokenizer()
    with open(path, "rb") as f:
        data = f.read()
    ids = tok.encode(data)
    if len(ids) < seq_len:
        raise DataFormatError(
            f"{path}: {len(ids)} tokens, need at least {seq_len} for one window")
    n = len(ids) // seq_len
    arr = np.asarray(ids[: n * seq_len], dtype=np.int64)
    return arr.reshape(n, seq_len)
