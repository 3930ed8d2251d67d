"""Tokenization, character-width normalization and lexicon-based tagging.

The tokenizer is word-level: maximal alphanumeric runs, single punctuation
characters, and - unusually but deliberately - every whitespace character as
its own token, so that detokenization is plain concatenation and generated
text keeps its line structure. The tagger is a greedy longest-match over a
word->category lexicon plus two character-class rules (Numeral, Symbol).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Iterator, List, Sequence, Tuple

PAD, BOS, EOS, UNK = 0, 1, 2, 3
SPECIAL_TOKENS = ("<pad>", "<bos>", "<eos>", "<unk>")

# tag categories
DISEASE = "Disease"
SYMPTOM = "Symptom"
NUMERAL = "Numeral"
SYMBOL = "Symbol"
OTHER = "Other"
CATEGORIES = (NUMERAL, SYMBOL, DISEASE, SYMPTOM, OTHER)


class EmptyCorpusError(ValueError):
    pass


def normalize_width(text: str) -> str:
    """Fold full-width alphanumeric/symbolic characters to half-width.

    U+FF01..U+FF5E shift down by 0xFEE0; the ideographic space U+3000 becomes
    an ordinary space. Everything else (including the ideographic full stop
    U+3002) passes through. Idempotent.
    """
    out = []
    for ch in text:
        o = ord(ch)
        if 0xFF01 <= o <= 0xFF5E:
            out.append(chr(o - 0xFEE0))
        elif o == 0x3000:
            out.append(" ")
        else:
            out.append(ch)
    return "".join(out)


def split_tokens(text: str) -> Iterator[str]:
    """Split into word / punctuation / whitespace tokens, losslessly.

    Words are maximal alphanumeric runs; any other non-whitespace character
    is a single-character token; each whitespace character is its own token.
    """
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            yield ch
            i += 1
        elif ch.isalnum():
            j = i + 1
            while j < n and text[j].isalnum():
                j += 1
            yield text[i:j]
            i = j
        else:
            yield ch
            i += 1


@dataclass
class Vocab:
    """Dense token->id map with fixed specials at the front.

    build() keeps the ``target_size - 4`` most frequent non-whitespace tokens
    and then appends the two whitespace tokens (space, newline) so generated
    text can carry layout, mirroring how a fixed subword vocabulary gets the
    two extra tokens bolted on.
    """

    id_to_token: List[str] = field(default_factory=list)
    token_to_id: dict = field(default_factory=dict)

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    @classmethod
    def build(cls, corpus: Iterable[str], target_size: int) -> "Vocab":
        docs = list(corpus)
        if not docs or all(not d for d in docs):
            raise EmptyCorpusError("cannot build a vocabulary from an empty corpus")
        if target_size <= len(SPECIAL_TOKENS):
            raise ValueError(f"target_size must exceed {len(SPECIAL_TOKENS)} specials")
        counts: dict = {}
        for doc in docs:
            for tok in split_tokens(normalize_width(doc)):
                if tok.isspace():
                    continue
                counts[tok] = counts.get(tok, 0) + 1
        ranked = sorted(counts, key=lambda t: (-counts[t], t))
        kept = ranked[: target_size - len(SPECIAL_TOKENS)]
        vocab = cls()
        for tok in (*SPECIAL_TOKENS, *kept, " ", "\n"):
            vocab._add(tok)
        return vocab

    def _add(self, token: str) -> None:
        if token in self.token_to_id:
            raise ValueError(f"duplicate token {token!r}")
        self.token_to_id[token] = len(self.id_to_token)
        self.id_to_token.append(token)

    def encode(self, text: str) -> List[int]:
        return [self.token_to_id.get(tok, UNK)
                for tok in split_tokens(normalize_width(text))]

    def decode(self, ids: Sequence[int]) -> str:
        parts = []
        for i in ids:
            if i in (PAD, BOS, EOS):
                continue
            parts.append(self.id_to_token[i] if 0 <= i < self.size else "<unk>")
        return "".join(parts)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.id_to_token:
                fh.write(tok.replace("\n", "\\n") + "\n")

    @classmethod
    def load(cls, path) -> "Vocab":
        vocab = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                vocab._add(line.rstrip("\n").replace("\\n", "\n"))
        return vocab


def tokenize(text: str, vocab: Vocab) -> List[int]:
    """Width-normalize then map tokens (whitespace included) to ids; OOV -> unk."""
    return vocab.encode(text)


def detokenize(ids: Sequence[int], vocab: Vocab) -> str:
    return vocab.decode(ids)


class TagLexicon:
    """word -> category map for Disease/Symptom tagging; rule classes are derived."""

    def __init__(self, entries: dict | None = None) -> None:
        self.entries: dict = {}
        self._by_first: dict = {}
        for word, cat in (entries or {}).items():
            self.add(word, cat)

    def add(self, word: str, category: str) -> None:
        word = normalize_width(word)
        prior = self.entries.get(word)
        if prior is not None and prior != category:
            raise ValueError(f"conflicting categories for {word!r}: {prior} vs {category}")
        self.entries[word] = category
        self._by_first.setdefault(word[0], []).append(word)
        self._by_first[word[0]].sort(key=len, reverse=True)

    def __contains__(self, word: str) -> bool:
        return word in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def longest_match(self, text: str, pos: int) -> str | None:
        for word in self._by_first.get(text[pos], ()):
            if text.startswith(word, pos):
                return word
        return None

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for word in sorted(self.entries):
                fh.write(f"{word}\t{self.entries[word]}\n")

    @classmethod
    def load(cls, path) -> "TagLexicon":
        lex = cls()
        with open(path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if not line:
                    continue
                word, _, cat = line.partition("\t")
                lex.add(word, cat)
        return lex


def segment_and_tag(text: str, lexicon: TagLexicon) -> List[Tuple[str, str]]:
    """Greedy longest-match segmentation with category tags.

    Precedence per position: lexicon entry (longest wins, and the lexicon's
    category wins even for digit strings), then maximal digit run -> Numeral,
    then maximal alphanumeric run -> Other, then a single punctuation
    character -> Symbol. Whitespace separates and is dropped; concatenating
    the segments reproduces every non-whitespace character.
    """
    text = normalize_width(text)
    out: List[Tuple[str, str]] = []
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if ch.isspace():
            i += 1
            continue
        word = lexicon.longest_match(text, i)
        if word is not None:
            out.append((word, lexicon.entries[word]))
            i += len(word)
        elif ch.isdigit():
            j = i + 1
            while j < n and text[j].isdigit():
                j += 1
            out.append((text[i:j], NUMERAL))
            i = j
        elif ch.isalnum():
            j = i + 1
            while j < n and text[j].isalnum():
                j += 1
            out.append((text[i:j], OTHER))
            i = j
        else:
            out.append((ch, SYMBOL))
            i += 1
    return out


def segment_words(text: str, lexicon: TagLexicon) -> List[str]:
    """Just the word sequence of segment_and_tag; the unit ROUGE scores over."""
    return [w for w, _ in segment_and_tag(text, lexicon)]
