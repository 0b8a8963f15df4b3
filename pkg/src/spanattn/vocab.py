"""Byte-level vocabulary shared by the model and the task generators."""

N_BYTES = 256
PAD_ID = 256
EOS_ID = 257
VOCAB_SIZE = 258


def encode(text):
    """ASCII/UTF-8 text to token ids (one byte per token)."""
    return list(text.encode("utf-8"))


def decode(tokens):
    """Token ids back to text; PAD/EOS and continuation noise are dropped."""
    return bytes(t for t in tokens if t < N_BYTES).decode("utf-8", errors="replace")
