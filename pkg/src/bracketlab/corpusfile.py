"""Binary corpus container shared by the synthetic and natural-text pipelines.

Layout (little-endian):
    magic   4s   b"SYNL"
    version u32  currently 1
    kind    u8   0=nested 1=flat 2=flat_shuffle 3=natural
    n_types u32  bracket types for synthetic kinds, vocab size for natural
    seq_len u32
    n_seqs  u64
    p_open  f64  0.0 for natural
    block_types u32
    segment_len u32
    payload n_seqs * seq_len token ids as u16
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ValidationError

MAGIC = b"SYNL"
FORMAT_VERSION = 1

KIND_NESTED = 0
KIND_FLAT = 1
KIND_FLAT_SHUFFLE = 2
KIND_NATURAL = 3

_HEADER = struct.Struct("<4sIBIIQdII")


@dataclass(frozen=True)
class CorpusHeader:
    kind: int
    n_types: int
    seq_len: int
    n_sequences: int
    p_open: float = 0.0
    block_types: int = 0
    segment_len: int = 0

    @property
    def vocab_size(self) -> int:
        # synthetic kinds use distinct open/close ids per type
        if self.kind == KIND_NATURAL:
            return self.n_types
        return 2 * self.n_types

    def pack(self) -> bytes:
        return _HEADER.pack(
            MAGIC,
            FORMAT_VERSION,
            self.kind,
            self.n_types,
            self.seq_len,
            self.n_sequences,
            self.p_open,
            self.block_types,
            self.segment_len,
        )


@dataclass
class Corpus:
    header: CorpusHeader
    tokens: np.ndarray  # (n_sequences, seq_len) uint16

    @property
    def n_sequences(self) -> int:
        return self.header.n_sequences

    @property
    def seq_len(self) -> int:
        return self.header.seq_len

    @property
    def vocab_size(self) -> int:
        return self.header.vocab_size


def write_corpus(path, header: CorpusHeader, sequences) -> Path:
    """Write a corpus file. `sequences` is an iterable of token-id rows."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n_written = 0
    with open(path, "wb") as fh:
        fh.write(header.pack())
        for seq in sequences:
            row = np.asarray(seq, dtype=np.uint16)
            if row.shape != (header.seq_len,):
                raise ValidationError(
                    f"sequence {n_written} has shape {row.shape}, expected ({header.seq_len},)"
                )
            fh.write(row.tobytes())
            n_written += 1
    if n_written != header.n_sequences:
        raise ValidationError(
            f"header promises {header.n_sequences} sequences, got {n_written}"
        )
    return path


def read_header(path) -> CorpusHeader:
    with open(path, "rb") as fh:
        raw = fh.read(_HEADER.size)
    if len(raw) < _HEADER.size:
        raise ValidationError(f"{path}: truncated header")
    magic, version, kind, n_types, seq_len, n_seqs, p_open, block_types, segment_len = (
        _HEADER.unpack(raw)
    )
    if magic != MAGIC:
        raise ValidationError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise ValidationError(f"{path}: unsupported format version {version}")
    if kind not in (KIND_NESTED, KIND_FLAT, KIND_FLAT_SHUFFLE, KIND_NATURAL):
        raise ValidationError(f"{path}: unknown kind {kind}")
    return CorpusHeader(
        kind=kind,
        n_types=n_types,
        seq_len=seq_len,
        n_sequences=n_seqs,
        p_open=p_open,
        block_types=block_types,
        segment_len=segment_len,
    )


def read_corpus(path) -> Corpus:
    header = read_header(path)
    expected = header.n_sequences * header.seq_len
    data = np.fromfile(path, dtype="<u2", offset=_HEADER.size)
    if data.size != expected:
        raise ValidationError(
            f"{path}: payload holds {data.size} tokens, header promises {expected}"
        )
    tokens = data.reshape(header.n_sequences, header.seq_len)
    if tokens.size and tokens.max() >= header.vocab_size:
        raise ValidationError(
            f"{path}: token id {int(tokens.max())} out of range for vocab {header.vocab_size}"
        )
    return Corpus(header=header, tokens=tokens)
