"""Stable 64-bit FNV-1a hashing (platform- and run-independent)."""

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_MASK = 0xFFFFFFFFFFFFFFFF


def fnv1a64(text: str | bytes) -> int:
    """FNV-1a over UTF-8 bytes; the documented tokenizer/seed hash."""
    data = text.encode("utf-8") if isinstance(text, str) else text
    h = _FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * _FNV_PRIME) & _MASK
    return h
