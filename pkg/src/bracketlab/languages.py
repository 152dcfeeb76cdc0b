"""Generators, validators, and exact next-token oracles for the synthetic languages.

Three languages over a shared token scheme (type t opens with id t and closes
with id n_types + t):

* nested       -- balanced brackets with LIFO discipline; closing always pops
                  the most recent open bracket.
* flat         -- balanced brackets without nesting discipline; the bracket to
                  close is drawn uniformly from all currently open instances.
* flat_shuffle -- flat, restricted so that each aligned segment of
                  `segment_len` tokens is a permutation of the open and close
                  tokens of one contiguous block of `block_types` types.

Sampling is a per-position state machine: when nothing is open the move is a
forced open, when the remaining positions equal the number of open brackets
the move is a forced close, otherwise an open is chosen with probability
`p_open`. The same state machine backs `next_token_distribution`, which makes
the sampling process an exactly known distribution, and therefore the
per-sequence cross-entropy floor computable.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .corpusfile import (
    KIND_FLAT,
    KIND_FLAT_SHUFFLE,
    KIND_NESTED,
    Corpus,
    CorpusHeader,
    read_corpus,
    write_corpus,
)
from .errors import ConfigurationError, StateError, ValidationError


class LanguageKind(str, Enum):
    NESTED = "nested"
    FLAT = "flat"
    FLAT_SHUFFLE = "flat_shuffle"


_KIND_CODES = {
    LanguageKind.NESTED: KIND_NESTED,
    LanguageKind.FLAT: KIND_FLAT,
    LanguageKind.FLAT_SHUFFLE: KIND_FLAT_SHUFFLE,
}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


@dataclass(frozen=True)
class LanguageSpec:
    kind: LanguageKind
    n_types: int = 250
    seq_len: int = 512
    p_open: float = 0.4
    block_types: int = 8
    segment_len: int = 16

    def __post_init__(self):
        object.__setattr__(self, "kind", LanguageKind(self.kind))
        if self.n_types < 1:
            raise ConfigurationError(f"n_types must be >= 1, got {self.n_types}")
        if self.seq_len < 2 or self.seq_len % 2 != 0:
            raise ConfigurationError(f"seq_len must be even and >= 2, got {self.seq_len}")
        if not 0.0 < self.p_open < 1.0:
            raise ConfigurationError(f"p_open must lie in (0, 1), got {self.p_open}")
        if self.kind is LanguageKind.FLAT_SHUFFLE:
            if self.block_types < 1:
                raise ConfigurationError("block_types must be >= 1")
            if self.segment_len != 2 * self.block_types:
                raise ConfigurationError(
                    f"segment_len must equal 2*block_types, got {self.segment_len} != 2*{self.block_types}"
                )
            if self.n_types < self.block_types:
                raise ConfigurationError("n_types must be >= block_types")
            if self.seq_len % self.segment_len != 0:
                raise ConfigurationError(
                    f"seq_len must be a multiple of segment_len ({self.segment_len})"
                )

    @property
    def vocab_size(self) -> int:
        return 2 * self.n_types

    @property
    def n_blocks(self) -> int:
        """Number of usable contiguous type blocks (flat_shuffle only)."""
        return self.n_types // self.block_types

    @property
    def usable_types(self) -> int:
        """Types addressable by whole blocks; trailing remainder types are unused."""
        if self.kind is LanguageKind.FLAT_SHUFFLE:
            return self.n_blocks * self.block_types
        return self.n_types

    def header(self, n_sequences: int) -> CorpusHeader:
        return CorpusHeader(
            kind=_KIND_CODES[self.kind],
            n_types=self.n_types,
            seq_len=self.seq_len,
            n_sequences=n_sequences,
            p_open=self.p_open,
            block_types=self.block_types,
            segment_len=self.segment_len,
        )


def spec_from_header(header: CorpusHeader) -> LanguageSpec:
    if header.kind not in _CODE_KINDS:
        raise ConfigurationError(f"corpus kind {header.kind} is not a synthetic language")
    return LanguageSpec(
        kind=_CODE_KINDS[header.kind],
        n_types=header.n_types,
        seq_len=header.seq_len,
        p_open=header.p_open,
        block_types=header.block_types,
        segment_len=header.segment_len,
    )


@dataclass
class GeneratorState:
    """Walk state of the sampling process.

    `open_types` is LIFO order for nested, insertion order for flat kinds.
    For flat_shuffle, `unused` holds the current segment's block types not yet
    opened; it is None exactly at segment boundaries (block not yet drawn).
    """

    position: int = 0
    open_types: list[int] = field(default_factory=list)
    unused: list[int] | None = None

    def copy(self) -> "GeneratorState":
        return GeneratorState(
            position=self.position,
            open_types=list(self.open_types),
            unused=None if self.unused is None else list(self.unused),
        )


def initial_state(spec: LanguageSpec) -> GeneratorState:
    return GeneratorState()


def _check_state(spec: LanguageSpec, state: GeneratorState):
    remaining = spec.seq_len - state.position
    if remaining < 0:
        raise StateError(f"position {state.position} beyond seq_len {spec.seq_len}")
    if len(state.open_types) > remaining:
        raise StateError(
            f"{len(state.open_types)} open brackets cannot close in {remaining} positions"
        )
    if spec.kind is LanguageKind.FLAT_SHUFFLE:
        seg_pos = state.position % spec.segment_len
        if seg_pos == 0:
            if state.open_types or state.unused not in (None, []):
                raise StateError("segment boundary with carried-over open brackets")
        elif state.unused is None:
            raise StateError("mid-segment state without a drawn block")


def next_token_distribution(spec: LanguageSpec, state: GeneratorState) -> dict[int, float]:
    """Exact distribution the sampler draws from at `state`.

    Raises StateError for states the generator cannot reach.
    """
    _check_state(spec, state)
    n = spec.n_types
    remaining = spec.seq_len - state.position
    if remaining == 0:
        raise StateError("sequence already complete")
    dist: dict[int, float] = {}

    if spec.kind is LanguageKind.FLAT_SHUFFLE:
        seg_pos = state.position % spec.segment_len
        if seg_pos == 0:
            # first move of a segment: block uniform, then type uniform,
            # which collapses to uniform over all usable open tokens
            p = 1.0 / spec.usable_types
            return {t: p for t in range(spec.usable_types)}
        unused = state.unused or []
        n_open = len(state.open_types)
        n_unused = len(unused)
        if n_open == 0:
            p_open_move = 1.0
        elif n_unused == 0:
            p_open_move = 0.0
        else:
            p_open_move = spec.p_open
        if p_open_move > 0.0:
            p = p_open_move / n_unused
            for t in unused:
                dist[t] = dist.get(t, 0.0) + p
        if p_open_move < 1.0:
            p = (1.0 - p_open_move) / n_open
            for t in state.open_types:
                dist[n + t] = dist.get(n + t, 0.0) + p
        return dist

    n_open = len(state.open_types)
    if n_open == remaining:
        p_open_move = 0.0
    elif n_open == 0:
        p_open_move = 1.0
    else:
        p_open_move = spec.p_open
    if p_open_move > 0.0:
        p = p_open_move / n
        for t in range(n):
            dist[t] = p
    if p_open_move < 1.0:
        if spec.kind is LanguageKind.NESTED:
            top = state.open_types[-1]
            dist[n + top] = dist.get(n + top, 0.0) + (1.0 - p_open_move)
        else:
            p = (1.0 - p_open_move) / n_open
            for t in state.open_types:
                dist[n + t] = dist.get(n + t, 0.0) + p
    return dist


def token_probability(spec: LanguageSpec, state: GeneratorState, token: int) -> float:
    """Probability of `token` at `state` without materializing the full map."""
    _check_state(spec, state)
    n = spec.n_types
    remaining = spec.seq_len - state.position
    if remaining == 0:
        raise StateError("sequence already complete")

    if spec.kind is LanguageKind.FLAT_SHUFFLE:
        seg_pos = state.position % spec.segment_len
        if seg_pos == 0:
            if 0 <= token < spec.usable_types:
                return 1.0 / spec.usable_types
            return 0.0
        unused = state.unused or []
        n_open = len(state.open_types)
        n_unused = len(unused)
        if n_open == 0:
            p_open_move = 1.0
        elif n_unused == 0:
            p_open_move = 0.0
        else:
            p_open_move = spec.p_open
        if token < n:
            if token in unused and p_open_move > 0.0:
                return p_open_move / n_unused
            return 0.0
        t = token - n
        if t in state.open_types and p_open_move < 1.0:
            return (1.0 - p_open_move) / n_open
        return 0.0

    n_open = len(state.open_types)
    if n_open == remaining:
        p_open_move = 0.0
    elif n_open == 0:
        p_open_move = 1.0
    else:
        p_open_move = spec.p_open
    if token < n:
        return p_open_move / n if p_open_move > 0.0 else 0.0
    t = token - n
    if p_open_move >= 1.0:
        return 0.0
    if spec.kind is LanguageKind.NESTED:
        return (1.0 - p_open_move) if state.open_types and state.open_types[-1] == t else 0.0
    count = state.open_types.count(t)
    return (1.0 - p_open_move) * count / n_open if count else 0.0


def _apply_token(spec: LanguageSpec, state: GeneratorState, token: int):
    """State transition without legality checking; callers must guarantee it."""
    n = spec.n_types
    if spec.kind is LanguageKind.FLAT_SHUFFLE:
        if state.position % spec.segment_len == 0:
            block = token // spec.block_types
            base = block * spec.block_types
            state.unused = [t for t in range(base, base + spec.block_types) if t != token]
            state.open_types = [token]
        elif token < n:
            state.unused.remove(token)
            state.open_types.append(token)
        else:
            state.open_types.remove(token - n)
        state.position += 1
        if state.position % spec.segment_len == 0:
            state.unused = None
        return
    if token < n:
        state.open_types.append(token)
    elif spec.kind is LanguageKind.NESTED:
        state.open_types.pop()
    else:
        state.open_types.remove(token - n)
    state.position += 1


def advance(spec: LanguageSpec, state: GeneratorState, token: int):
    """Apply `token` to `state` in place. Raises StateError on an illegal token."""
    if token_probability(spec, state, token) <= 0.0:
        raise StateError(
            f"token {token} has zero probability at position {state.position}"
        )
    _apply_token(spec, state, token)


@dataclass
class StepOutcome:
    token: int
    forced: bool
    opened: bool


def sample_step(spec: LanguageSpec, state: GeneratorState, rng: random.Random) -> StepOutcome:
    """Draw the next token at `state` and advance in place.

    This is the production sampler; `next_token_distribution` describes it
    exactly (checked by the oracle-consistency tests).
    """
    n = spec.n_types
    remaining = spec.seq_len - state.position
    open_types = state.open_types

    if spec.kind is LanguageKind.FLAT_SHUFFLE:
        seg_pos = state.position % spec.segment_len
        if seg_pos == 0:
            # block uniform then in-block type uniform == uniform over usable types
            token = int(rng.random() * spec.usable_types)
            forced, opened = True, True
        else:
            unused = state.unused
            n_open = len(open_types)
            if n_open == 0:
                opened, forced = True, True
            elif not unused:
                opened, forced = False, True
            else:
                opened = rng.random() < spec.p_open
                forced = False
            if opened:
                token = unused[int(rng.random() * len(unused))]
            else:
                token = n + open_types[int(rng.random() * n_open)]
        _apply_token(spec, state, token)
        return StepOutcome(token=token, forced=forced, opened=opened)

    n_open = len(open_types)
    if n_open == remaining:
        opened, forced = False, True
    elif n_open == 0:
        opened, forced = True, True
    else:
        opened = rng.random() < spec.p_open
        forced = False
    if opened:
        token = int(rng.random() * n)
    elif spec.kind is LanguageKind.NESTED:
        token = n + open_types[-1]
    else:
        token = n + open_types[int(rng.random() * n_open)]
    _apply_token(spec, state, token)
    return StepOutcome(token=token, forced=forced, opened=opened)


def generate_sequence(spec: LanguageSpec, seed: int) -> list[int]:
    """Generate one sequence of exactly `spec.seq_len` tokens, deterministically."""
    rng = random.Random(seed & 0xFFFFFFFFFFFFFFFF)
    state = initial_state(spec)
    return [sample_step(spec, state, rng).token for _ in range(spec.seq_len)]


def open_decision_stats(spec: LanguageSpec, seq) -> tuple[int, int]:
    """(unconstrained decisions, opens among them) when replaying `seq`."""
    state = initial_state(spec)
    n = spec.n_types
    unconstrained = 0
    opens = 0
    for token in seq:
        token = int(token)
        if spec.kind is LanguageKind.FLAT_SHUFFLE:
            seg_pos = state.position % spec.segment_len
            free = bool(seg_pos != 0 and state.open_types and state.unused)
        else:
            remaining = spec.seq_len - state.position
            free = 0 < len(state.open_types) < remaining
        if free:
            unconstrained += 1
            if token < n:
                opens += 1
        _apply_token(spec, state, token)
    return unconstrained, opens


@dataclass
class ValidationReport:
    balanced: bool
    nested: bool
    shuffle_blocks: bool
    detail: str = ""

    def passes(self, kind: LanguageKind) -> bool:
        kind = LanguageKind(kind)
        if kind is LanguageKind.NESTED:
            return self.balanced and self.nested
        if kind is LanguageKind.FLAT:
            return self.balanced
        return self.balanced and self.shuffle_blocks


def validate(spec: LanguageSpec, seq) -> ValidationReport:
    """Check language discipline independently of the generator's state machine."""
    seq = [int(t) for t in seq]
    n = spec.n_types
    detail = []

    balanced = True
    if len(seq) != spec.seq_len:
        balanced = False
        detail.append(f"length {len(seq)} != seq_len {spec.seq_len}")
    counts = {}
    for i, tok in enumerate(seq):
        if not 0 <= tok < 2 * n:
            balanced = False
            detail.append(f"token {tok} out of range at {i}")
            break
        if tok < n:
            counts[tok] = counts.get(tok, 0) + 1
        else:
            t = tok - n
            counts[t] = counts.get(t, 0) - 1
            if counts[t] < 0:
                balanced = False
                detail.append(f"close before open for type {t} at {i}")
                break
    if balanced and any(c != 0 for c in counts.values()):
        balanced = False
        detail.append("unclosed brackets at end")

    nested = True
    stack = []
    for i, tok in enumerate(seq):
        if not 0 <= tok < 2 * n:
            nested = False
            break
        if tok < n:
            stack.append(tok)
        elif not stack or stack[-1] != tok - n:
            nested = False
            detail.append(f"non-LIFO close at {i}")
            break
        else:
            stack.pop()
    if nested and stack:
        nested = False

    shuffle_blocks = _check_shuffle_blocks(spec, seq, detail)
    return ValidationReport(
        balanced=balanced,
        nested=nested,
        shuffle_blocks=shuffle_blocks,
        detail="; ".join(detail),
    )


def _check_shuffle_blocks(spec: LanguageSpec, seq, detail) -> bool:
    n = spec.n_types
    bt = spec.block_types
    sl = spec.segment_len
    if sl <= 0 or len(seq) % sl != 0:
        return False
    for s in range(0, len(seq), sl):
        window = seq[s : s + sl]
        if any(not 0 <= tok < 2 * n for tok in window):
            return False
        types = sorted({tok % n for tok in window})
        block = types[0] // bt if types else 0
        base = block * bt
        expected = sorted(list(range(base, base + bt)) + [n + t for t in range(base, base + bt)])
        if sorted(window) != expected:
            detail.append(f"window at {s} is not a one-block permutation")
            return False
        seen_open = set()
        for tok in window:
            if tok < n:
                seen_open.add(tok)
            elif tok - n not in seen_open:
                detail.append(f"close before open inside window at {s}")
                return False
    return True


def sequence_position_nlls(spec: LanguageSpec, seq) -> np.ndarray:
    """Per-position -log p(token | prefix) in nats under the exact sampling process."""
    state = initial_state(spec)
    out = np.empty(len(seq))
    for i, token in enumerate(seq):
        token = int(token)
        p = token_probability(spec, state, token)
        if p <= 0.0:
            raise ValidationError("token has zero probability under the language", position=i)
        out[i] = -np.log(p)
        _apply_token(spec, state, token)
    return out


def sequence_nll_floor(spec: LanguageSpec, seq) -> float:
    """Mean -log p(token | prefix) in nats under the exact sampling process.

    No model can beat this in expectation on sequences drawn from `spec`.
    """
    return float(sequence_position_nlls(spec, seq).mean())


def corpus_nll_floor(corpus: Corpus, limit: int | None = None) -> float:
    """Mean per-sequence floor over (a prefix of) a synthetic corpus."""
    spec = spec_from_header(corpus.header)
    rows = corpus.tokens if limit is None else corpus.tokens[:limit]
    if len(rows) == 0:
        raise ConfigurationError("empty corpus")
    return float(np.mean([sequence_nll_floor(spec, row) for row in rows]))


def corpus_conditional_floor(corpus: Corpus, limit: int | None = None) -> float:
    """Floor over positions >= 1 only, matching what a next-token model is scored on.

    A model's eval NLL never covers the first token of a sequence, so this is
    the comparable bound for training reports.
    """
    spec = spec_from_header(corpus.header)
    rows = corpus.tokens if limit is None else corpus.tokens[:limit]
    if len(rows) == 0:
        raise ConfigurationError("empty corpus")
    return float(np.mean([sequence_position_nlls(spec, row)[1:].mean() for row in rows]))


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return x ^ (x >> 31)


def sequence_seed(global_seed: int, index: int) -> int:
    """64-bit mix of (global seed, sequence index); order-independent generation."""
    return _splitmix64(_splitmix64(global_seed & 0xFFFFFFFFFFFFFFFF) ^ index)


def generate_corpus(spec: LanguageSpec, n_sequences: int, seed: int, out) -> Path:
    if n_sequences < 1:
        raise ConfigurationError(f"n_sequences must be >= 1, got {n_sequences}")
    header = spec.header(n_sequences)
    rows = (
        generate_sequence(spec, sequence_seed(seed, i)) for i in range(n_sequences)
    )
    return write_corpus(out, header, rows)


def load_corpus(path) -> Corpus:
    return read_corpus(path)
