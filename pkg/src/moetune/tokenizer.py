"""Byte-level tokenizer and the bit-exact chat template.

Ids 0-255 are raw UTF-8 bytes; 256+ are the special tokens. This keeps the
vocabulary self-contained (no external artifact) and lossless for Chinese
text. The template renders a conversation as

    <bos> [<|system|>\\n{text}\\n] per round: <|user|>\\n{text}\\n<|assistant|>\\n{text}<eot>\\n

with the loss mask set to 1 exactly on assistant text bytes plus the <eot>
closing each assistant turn.
"""

from __future__ import annotations

import codecs
from dataclasses import dataclass

from .errors import VocabError

PAD_ID = 256
BOS_ID = 257
EOT_ID = 258
SYSTEM_ID = 259
USER_ID = 260
ASSISTANT_ID = 261
VOCAB_SIZE = 262

SPECIAL_NAMES = {
    PAD_ID: "<pad>",
    BOS_ID: "<bos>",
    EOT_ID: "<eot>",
    SYSTEM_ID: "<|system|>",
    USER_ID: "<|user|>",
    ASSISTANT_ID: "<|assistant|>",
}

ROLE_MARKERS = {"system": SYSTEM_ID, "user": USER_ID, "assistant": ASSISTANT_ID}

_NL = list("\n".encode("utf-8"))


def encode_text(text: str) -> list[int]:
    """Raw UTF-8 bytes of the text; never produces special ids."""
    return list(text.encode("utf-8"))


def decode_tokens(ids) -> str:
    """Lossless inverse of the renderers: bytes decode as UTF-8, special ids
    map back to their literal marker strings."""
    out: list[str] = []
    buf = bytearray()

    def flush():
        if buf:
            out.append(buf.decode("utf-8", errors="replace"))
            buf.clear()

    for i in ids:
        i = int(i)
        if 0 <= i < 256:
            buf.append(i)
        elif i in SPECIAL_NAMES:
            flush()
            out.append(SPECIAL_NAMES[i])
        else:
            raise VocabError(f"token id {i} outside vocabulary")
    flush()
    return "".join(out)


@dataclass
class TokenizedSample:
    token_ids: list[int]
    loss_mask: list[int]

    def __post_init__(self):
        assert len(self.token_ids) == len(self.loss_mask)


def render_chat(turns: list[tuple[str, str]]) -> TokenizedSample:
    """Render (role, text) turns to token ids with the assistant-only mask.

    An empty system turn is omitted entirely. Mask is 1 on assistant text
    bytes and the <eot> that terminates the turn, 0 everywhere else.
    """
    ids: list[int] = [BOS_ID]
    mask: list[int] = [0]
    for role, text in turns:
        if role == "system":
            if not text:
                continue
            piece = [SYSTEM_ID] + _NL + encode_text(text) + _NL
            ids += piece
            mask += [0] * len(piece)
        elif role == "user":
            piece = [USER_ID] + _NL + encode_text(text) + _NL
            ids += piece
            mask += [0] * len(piece)
        elif role == "assistant":
            head = [ASSISTANT_ID] + _NL
            ids += head
            mask += [0] * len(head)
            body = encode_text(text)
            ids += body + [EOT_ID]
            mask += [1] * (len(body) + 1)
            ids += _NL
            mask += [0]
        else:
            raise VocabError(f"unknown role {role!r}")
    return TokenizedSample(ids, mask)


def render_prompt(turns: list[tuple[str, str]]) -> list[int]:
    """Render history for generation: ends with '<|assistant|>\\n' so the
    model continues with assistant bytes."""
    ids: list[int] = [BOS_ID]
    for role, text in turns:
        if role == "system":
            if text:
                ids += [SYSTEM_ID] + _NL + encode_text(text) + _NL
        elif role == "user":
            ids += [USER_ID] + _NL + encode_text(text) + _NL
        elif role == "assistant":
            ids += [ASSISTANT_ID] + _NL + encode_text(text) + [EOT_ID] + _NL
        else:
            raise VocabError(f"unknown role {role!r}")
    ids += [ASSISTANT_ID] + _NL
    return ids


def render_text(turns: list[tuple[str, str]]) -> str:
    """The template as a plain string with literal markers (golden-testable)."""
    parts = ["<bos>"]
    for role, text in turns:
        if role == "system":
            if text:
                parts.append(f"<|system|>\n{text}\n")
        elif role == "user":
            parts.append(f"<|user|>\n{text}\n")
        elif role == "assistant":
            parts.append(f"<|assistant|>\n{text}<eot>\n")
    return "".join(parts)


class ByteStreamDecoder:
    """Incremental UTF-8 decoder for streaming generated byte tokens."""

    def __init__(self):
        self._decoder = codecs.getincrementaldecoder("utf-8")(errors="replace")

    def feed(self, token_id: int) -> str:
        if 0 <= token_id < 256:
            return self._decoder.decode(bytes([token_id]))
        return ""

    def flush(self) -> str:
        return self._decoder.decode(b"", final=True)
