"""Byte-level tokenizer with reserved framing tokens.

One token per byte (ids 0..255). Reserved specials:

    256  BOS_MSG   start of every message
    257  EOS_MSG   end of a prefilled message; sampling it ends a decode
    258..261       role markers, reserved but unused (roles ride in the text)

Framing is inserted transparently by the engines:
  - prefilled message  -> [BOS_MSG] + bytes(text) + [EOS_MSG]
  - decoded message    -> [BOS_MSG] + bytes(header) + generated byte tokens
    (a sampled EOS_MSG terminates generation and is not stored)
"""

from __future__ import annotations

import numpy as np

from .config import BOS_MSG, EOS_MSG, N_BYTE_TOKENS


def encode_text(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def decode_tokens(ids) -> str:
    """Byte tokens back to text; non-byte ids are dropped, invalid UTF-8 replaced."""
    return bytes(i for i in ids if 0 <= i < N_BYTE_TOKENS).decode("utf-8", errors="replace")


def frame_message(text: str) -> list[int]:
    return [BOS_MSG, *encode_text(text), EOS_MSG]


def frame_header(header: str) -> list[int]:
    return [BOS_MSG, *encode_text(header)]


def generatable_mask(vocab_size: int) -> np.ndarray:
    """Boolean mask of ids the sampler may select: byte tokens and EOS_MSG."""
    mask = np.zeros(vocab_size, dtype=bool)
    mask[:N_BYTE_TOKENS] = True
    mask[EOS_MSG] = True
    return mask
