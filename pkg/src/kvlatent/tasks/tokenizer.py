"""Byte-level tokenizer with reserved special ids.

Ids 0..255 are raw bytes; the specials sit above them. Encoding text never
produces a special, so decode(encode(s)) == s for any UTF-8 string. Specials
decode to angle-bracket markers for inspection, which is deliberately lossy:
round-tripping is only guaranteed for byte content.
"""

from __future__ import annotations

from ..errors import ContractError

LATENT = 256        # placeholder occupying a latent slot in serialized prompts
Q_SEP = 257         # terminates a question span
A_SEP = 258         # terminates one reasoning step
ANSWER_OPEN = 259
ANSWER_CLOSE = 260
PAD = 261
EOS = 262

VOCAB_SIZE = 263

_SPECIAL_NAMES = {
    LATENT: "<latent>",
    Q_SEP: "<q>",
    A_SEP: "<step>",
    ANSWER_OPEN: "<answer>",
    ANSWER_CLOSE: "</answer>",
    PAD: "<pad>",
    EOS: "<eos>",
}


class ByteTokenizer:
    """Stateless byte tokenizer; exists as a class to carry the vocab
    constants alongside encode/decode."""

    vocab_size = VOCAB_SIZE
    latent = LATENT
    q_sep = Q_SEP
    a_sep = A_SEP
    answer_open = ANSWER_OPEN
    answer_close = ANSWER_CLOSE
    pad = PAD
    eos = EOS

    def encode(self, text: str | bytes) -> list[int]:
        data = text.encode("utf-8") if isinstance(text, str) else bytes(text)
        return list(data)

    def decode(self, ids) -> str:
        out: list[str] = []
        run: list[int] = []

        def flush():
            if run:
                out.append(bytes(run).decode("utf-8", errors="replace"))
                run.clear()

        for i in ids:
            i = int(i)
            if 0 <= i < 256:
                run.append(i)
            elif i in _SPECIAL_NAMES:
                flush()
                out.append(_SPECIAL_NAMES[i])
            else:
                raise ContractError(f"decode: id {i} outside vocabulary")
        flush()
        return "".join(out)

    def decode_bytes_only(self, ids) -> str:
        """Decode, dropping special ids (used when scoring model output)."""
        return self.decode([i for i in ids if int(i) < 256])
