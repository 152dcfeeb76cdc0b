"""Natural-text ingestion: word-level tokenizer, vocabulary, and token features.

Tokens are whitespace-delimited words; a token keeps one leading space unless
it starts a line, so " the" and "the" are distinct vocabulary entries. That
preserves the starts-with-space signal that the probes read off embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpusfile import KIND_NATURAL, Corpus, CorpusHeader, write_corpus
from .errors import ConfigurationError, ValidationError

UNK = "<unk>"
PAD = "<pad>"
N_SPECIALS = 2


def tokenize(text: str) -> list[str]:
    """Split into words; every word except the first of its line carries one leading space."""
    tokens: list[str] = []
    for line in text.splitlines():
        words = line.split()
        if not words:
            continue
        tokens.append(words[0])
        tokens.extend(" " + w for w in words[1:])
    return tokens


def detokenize(tokens) -> str:
    parts = []
    for i, tok in enumerate(tokens):
        if i > 0 and not tok.startswith(" "):
            parts.append("\n")
        parts.append(tok)
    return "".join(parts)


@dataclass
class Vocab:
    tokens: list[str]  # id = index; ids 0 and 1 are <unk> and <pad>
    token_to_id: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if self.tokens[:N_SPECIALS] != [UNK, PAD]:
            raise ConfigurationError("vocab must start with the unknown and padding tokens")
        if not self.token_to_id:
            self.token_to_id = {tok: i for i, tok in enumerate(self.tokens)}
        if len(self.token_to_id) != len(self.tokens):
            raise ConfigurationError("vocab contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def unk_id(self) -> int:
        return 0

    @property
    def pad_id(self) -> int:
        return 1

    def encode_tokens(self, tokens) -> np.ndarray:
        unk = self.unk_id
        return np.array([self.token_to_id.get(t, unk) for t in tokens], dtype=np.int64)

    def encode(self, text: str) -> np.ndarray:
        return self.encode_tokens(tokenize(text))

    def decode(self, ids) -> str:
        return detokenize(self.tokens[int(i)] for i in ids)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.tokens:
                fh.write(tok + "\n")
        return path

    @classmethod
    def load(cls, path) -> "Vocab":
        with open(path, encoding="utf-8") as fh:
            tokens = [line.rstrip("\n") for line in fh]
        while tokens and tokens[-1] == "":
            tokens.pop()
        if len(tokens) < N_SPECIALS:
            raise ValidationError(f"{path}: vocab file too short")
        return cls(tokens=tokens)


def build_vocab(text: str, max_vocab: int = 500) -> Vocab:
    """Keep the most frequent max_vocab-2 tokens; ties break lexicographically."""
    if max_vocab <= N_SPECIALS:
        raise ConfigurationError(f"max_vocab must exceed {N_SPECIALS}, got {max_vocab}")
    words = tokenize(text)
    if not words:
        raise ConfigurationError("empty text")
    counts: dict[str, int] = {}
    for w in words:
        counts[w] = counts.get(w, 0) + 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [tok for tok, _ in ranked[: max_vocab - N_SPECIALS]]
    return Vocab(tokens=[UNK, PAD] + kept)


def encode_corpus(text: str, vocab: Vocab, seq_len: int = 128, out=None):
    """Chunk the encoded token stream into fixed-length rows; tail remainder dropped."""
    if seq_len < 2:
        raise ConfigurationError(f"seq_len must be >= 2, got {seq_len}")
    ids = vocab.encode(text)
    n_sequences = len(ids) // seq_len
    if n_sequences == 0:
        raise ConfigurationError(
            f"text yields {len(ids)} tokens, fewer than one sequence of {seq_len}"
        )
    rows = ids[: n_sequences * seq_len].reshape(n_sequences, seq_len).astype(np.uint16)
    header = CorpusHeader(
        kind=KIND_NATURAL,
        n_types=len(vocab),
        seq_len=seq_len,
        n_sequences=n_sequences,
    )
    if out is not None:
        write_corpus(out, header, rows)
    return Corpus(header=header, tokens=rows)


@dataclass
class FeatureTable:
    """Per-token-id features over the non-special vocabulary."""

    token_ids: np.ndarray  # aligned row ids
    tokens: list[str]
    frequency: np.ndarray  # corpus occurrence counts
    booleans: dict[str, np.ndarray] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def positive_occurrences(self, name: str) -> int:
        """Corpus occurrences of tokens carrying the boolean feature."""
        values = self.booleans[name]
        return int(self.frequency[values.astype(bool)].sum())


def extract_features(corpus: Corpus, vocab: Vocab, min_count: int = 200) -> FeatureTable:
    """Native features (frequency, starts_with_space) for every non-special token."""
    if corpus.vocab_size != len(vocab):
        raise ConfigurationError(
            f"corpus vocab {corpus.vocab_size} != vocab size {len(vocab)}"
        )
    counts = np.bincount(corpus.tokens.ravel(), minlength=len(vocab))
    token_ids = np.arange(N_SPECIALS, len(vocab))
    tokens = vocab.tokens[N_SPECIALS:]
    table = FeatureTable(
        token_ids=token_ids,
        tokens=tokens,
        frequency=counts[N_SPECIALS:].astype(np.int64),
        booleans={
            "starts_with_space": np.array(
                [1 if t.startswith(" ") else 0 for t in tokens], dtype=np.int64
            )
        },
    )
    _drop_rare(table, min_count)
    return table


def merge_features(table: FeatureTable, path, min_count: int = 200) -> FeatureTable:
    """Merge tab-separated `token<TAB>feature<TAB>{0|1}` lines into the table.

    Unknown token strings are collected as warnings, not failures. Features
    whose positive corpus occurrences fall below min_count are dropped.
    """
    lookup = {tok: i for i, tok in enumerate(table.tokens)}
    incoming: dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3 or parts[2] not in ("0", "1"):
                raise ValidationError(f"{path}:{lineno}: expected token<TAB>name<TAB>0|1")
            token, name, value = parts
            if name not in incoming:
                incoming[name] = np.zeros(len(table.tokens), dtype=np.int64)
            row = lookup.get(token)
            if row is None:
                table.warnings.append(f"{path}:{lineno}: token {token!r} not in vocabulary")
            else:
                incoming[name][row] = int(value)
    table.booleans.update(incoming)
    _drop_rare(table, min_count)
    return table


def _drop_rare(table: FeatureTable, min_count: int):
    for name in list(table.booleans):
        if table.positive_occurrences(name) < min_count:
            del table.booleans[name]
            table.warnings.append(
                f"feature {name!r} dropped: fewer than {min_count} positive occurrences"
            )


def save_features(table: FeatureTable, path) -> Path:
    """Persist as TSV: token, frequency, then one column per boolean feature."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    names = sorted(table.booleans)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(["token", "frequency"] + names) + "\n")
        for row in range(len(table.tokens)):
            cells = [table.tokens[row], str(int(table.frequency[row]))]
            cells += [str(int(table.booleans[n][row])) for n in names]
            fh.write("\t".join(cells) + "\n")
    return path


def load_features(path) -> FeatureTable:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n").split("\t")
        if header[:2] != ["token", "frequency"]:
            raise ValidationError(f"{path}: not a feature table")
        names = header[2:]
        tokens: list[str] = []
        freq: list[int] = []
        cols: dict[str, list[int]] = {n: [] for n in names}
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split("\t")
            if len(parts) != len(header):
                raise ValidationError(f"{path}:{lineno}: wrong column count")
            tokens.append(parts[0])
            freq.append(int(parts[1]))
            for n, cell in zip(names, parts[2:]):
                cols[n].append(int(cell))
    return FeatureTable(
        token_ids=np.arange(N_SPECIALS, N_SPECIALS + len(tokens)),
        tokens=tokens,
        frequency=np.array(freq, dtype=np.int64),
        booleans={n: np.array(v, dtype=np.int64) for n, v in cols.items()},
    )
