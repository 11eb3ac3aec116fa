"""Fixed toy vocabulary: special tokens, content tokens ``t0..tK-1``, template words."""

from __future__ import annotations

from functools import lru_cache

PAD, BOS, EOS, SLOT = "<pad>", "<bos>", "<eos>", "<slot>"
SPECIALS = (PAD, BOS, EOS, SLOT)

# Every word any built-in template or prompt may use.
TEMPLATE_WORDS = (
    ":", ".", "->", "(1)", "(2)",
    "Background", "This", "is", "equivalent", "to",
    "Rewrite", "the", "background", "in", "your", "own", "words",
    "Provide", "a", "restatement", "of", "Return",
    "paraphrase", "what", "?", "Answer", "with",
    "These", "two", "expressions", "convey", "same", "meaning",
    "Restate", "using", "single", "sentence", "Output", "only",
    "Refer", "document", "Question", "hop",
)


class VocabularyError(ValueError):
    pass


class Vocab:
    def __init__(self, content_size: int = 64):
        self.content_size = content_size
        self.itos: list[str] = list(SPECIALS) + [f"t{i}" for i in range(content_size)] + list(TEMPLATE_WORDS)
        self.stoi = {s: i for i, s in enumerate(self.itos)}
        self.content_offset = len(SPECIALS)

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def pad(self) -> int:
        return self.stoi[PAD]

    @property
    def bos(self) -> int:
        return self.stoi[BOS]

    @property
    def eos(self) -> int:
        return self.stoi[EOS]

    @property
    def slot(self) -> int:
        return self.stoi[SLOT]

    def content_id(self, k: int) -> int:
        if not 0 <= k < self.content_size:
            raise VocabularyError(f"content index {k} outside 0..{self.content_size - 1}")
        return self.content_offset + k

    def is_content(self, token_id: int) -> bool:
        return self.content_offset <= token_id < self.content_offset + self.content_size

    def encode_words(self, text: str) -> list[int]:
        out = []
        for w in text.split():
            if w not in self.stoi:
                raise VocabularyError(f"unknown word {w!r}")
            out.append(self.stoi[w])
        return out

    def decode(self, ids, stop_at_eos: bool = True) -> str:
        words = []
        for i in ids:
            i = int(i)
            if stop_at_eos and i == self.eos:
                break
            if not 0 <= i < len(self.itos):
                raise VocabularyError(f"token id {i} outside vocabulary of size {len(self.itos)}")
            words.append(self.itos[i])
        return " ".join(words)


@lru_cache(maxsize=None)
def get_vocab(content_size: int = 64) -> Vocab:
    return Vocab(content_size)
