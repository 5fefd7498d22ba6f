"""Character-level tokenizer over a fixed ASCII alphabet."""

from __future__ import annotations

__all__ = ["Tokenizer", "ascii96"]

# newline first so the end-of-sequence token is id 0
_ASCII96 = "\n" + "".join(chr(c) for c in range(0x20, 0x7F))


class Tokenizer:
    """Bijective char <-> id mapping over an ordered alphabet.

    encode(decode(ids)) and decode(encode(s)) are identities on in-alphabet
    strings. With byte_fallback enabled, characters outside the alphabet are
    replaced by '?' (total but lossy); otherwise they raise.
    """

    def __init__(self, alphabet: str = _ASCII96, byte_fallback: bool = True):
        if len(set(alphabet)) != len(alphabet):
            raise ValueError("alphabet contains duplicate characters")
        if not alphabet:
            raise ValueError("alphabet must be nonempty")
        self.alphabet = alphabet
        self.byte_fallback = byte_fallback
        self._char_to_id = {ch: i for i, ch in enumerate(alphabet)}
        self._fallback_id = self._char_to_id.get("?")

    @property
    def vocab_size(self) -> int:
        return len(self.alphabet)

    @property
    def eos_id(self) -> int:
        """Terminator token: newline if present, else the last alphabet char."""
        return self._char_to_id.get("\n", len(self.alphabet) - 1)

    def encode(self, text: str) -> list[int]:
        ids = []
        for ch in text:
            tid = self._char_to_id.get(ch)
            if tid is None:
                if not self.byte_fallback or self._fallback_id is None:
                    raise ValueError(f"character {ch!r} not in alphabet")
                tid = self._fallback_id
            ids.append(tid)
        return ids

    def decode(self, ids: list[int]) -> str:
        out = []
        for tid in ids:
            if not (0 <= tid < len(self.alphabet)):
                raise ValueError(f"token id {tid} out of range 0..{len(self.alphabet) - 1}")
            out.append(self.alphabet[tid])
        return "".join(out)


def ascii96() -> Tokenizer:
    """The default 96-character tokenizer: newline plus printable ASCII."""
    return Tokenizer(_ASCII96, byte_fallback=True)
