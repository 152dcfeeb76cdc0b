"""Optimization loops: pre-training with early stop and the staged fine-tuning pipeline.

Stages default to the three fine-tuning phases E @ 1e-2, EL @ 2e-2, ELT @ 1e-3,
12500 steps each at batch size 8. Stages are cumulative: each starts from the
previous stage's parameters. Before stage 1 the input/output/position
embeddings are re-initialized for the target vocabulary while every other
tensor carries over.

The freezing contract is bit-exact: tensors outside the active group have
requires_grad False and are never passed to the optimizer, so no optimizer
state exists for them.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .corpusfile import Corpus
from .errors import ConfigurationError, NumericalError
from .languages import sequence_seed
from .model import (
    Mode,
    TransformerLM,
    apply_mask,
    init_model,
    next_token_loss,
    save_checkpoint,
)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


@dataclass(frozen=True)
class StageConfig:
    mode: Mode
    learning_rate: float
    steps: int
    batch_size: int = 8
    seq_len: int | None = None  # None -> corpus sequence length

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.steps <= 0:
            raise ConfigurationError(f"steps must be > 0, got {self.steps}")
        if self.learning_rate <= 0:
            raise ConfigurationError(f"learning_rate must be > 0, got {self.learning_rate}")


def default_stages(steps: int = 12500, batch_size: int = 8, seq_len: int | None = None):
    """The standard three-phase fine-tuning schedule (E 1e-2, EL 2e-2, ELT 1e-3)."""
    rates = {Mode.E: 1e-2, Mode.EL: 2e-2, Mode.ELT: 1e-3}
    return [
        StageConfig(mode=m, learning_rate=rates[m], steps=steps, batch_size=batch_size, seq_len=seq_len)
        for m in (Mode.E, Mode.EL, Mode.ELT)
    ]


def stages_up_to(mode: Mode, **kwargs) -> list[StageConfig]:
    """Default pipeline truncated at `mode` (E -> 1 stage, EL -> 2, ELT -> 3)."""
    mode = Mode(mode)
    order = [Mode.E, Mode.EL, Mode.ELT]
    if mode not in order:
        raise ConfigurationError(f"no staged pipeline for mode {mode}")
    stages = default_stages(**kwargs)
    return stages[: order.index(mode) + 1]


@dataclass(frozen=True)
class PretrainConfig:
    learning_rate: float = 1e-3
    max_steps: int = 40000
    batch_size: int = 8
    seq_len: int | None = None
    eval_interval: int = 200
    eval_fraction: float = 0.01
    patience_steps: int = 2000
    min_improvement: float = 1e-3


@dataclass
class TrainReport:
    mode: str
    curve: list[tuple[int, float]]  # (step, eval nll in nats/token)
    final_eval_nll: float
    tokens_consumed: int
    steps_run: int
    wall_time_s: float


@dataclass
class StageResult:
    stage: StageConfig
    report: TrainReport
    checkpoint_dir: str | None = None


def _corpus_tensor(corpus: Corpus) -> torch.Tensor:
    return torch.from_numpy(corpus.tokens.astype(np.int64))


def split_eval(corpus: Corpus, eval_fraction: float = 0.01):
    """Deterministic held-out split: the last `eval_fraction` of sequences."""
    n = corpus.n_sequences
    n_eval = max(1, int(round(n * eval_fraction)))
    if n_eval >= n:
        raise ConfigurationError(f"corpus with {n} sequences cannot spare a held-out split")
    tokens = _corpus_tensor(corpus)
    return tokens[: n - n_eval], tokens[n - n_eval :]


@torch.no_grad()
def evaluate_nll(model: TransformerLM, tokens: torch.Tensor, batch_size: int = 32) -> float:
    """Mean per-token NLL (nats) over a (n, seq_len) id matrix."""
    model.eval()
    total = 0.0
    positions = 0
    for start in range(0, tokens.shape[0], batch_size):
        batch = tokens[start : start + batch_size]
        logits = model(batch)
        loss = next_token_loss(logits, batch)
        n_pos = batch.shape[0] * (batch.shape[1] - 1)
        total += float(loss) * n_pos
        positions += n_pos
    model.train()
    return total / positions


@torch.no_grad()
def evaluate_positions_nll(
    model: TransformerLM, tokens: torch.Tensor, positions, batch_size: int = 32
) -> float:
    """Mean NLL restricted to the given target sequence positions (all >= 1)."""
    positions = np.asarray(positions, dtype=np.int64)
    if positions.size == 0 or positions.min() < 1 or positions.max() >= tokens.shape[1]:
        raise ConfigurationError("positions must lie in [1, seq_len)")
    model.eval()
    total = 0.0
    count = 0
    for start in range(0, tokens.shape[0], batch_size):
        batch = tokens[start : start + batch_size]
        logits = model(batch)
        logp = torch.log_softmax(logits[:, :-1].double(), dim=-1)
        nll = -logp.gather(-1, batch[:, 1:].unsqueeze(-1)).squeeze(-1)
        sel = nll[:, positions - 1]
        total += float(sel.sum())
        count += sel.numel()
    model.train()
    return total / count


def build_optimizer(model: TransformerLM, mode: Mode, learning_rate: float) -> torch.optim.Adam:
    """Adam over the mode's trainable tensors only; frozen tensors get no state."""
    apply_mask(model, mode)
    trainable = [p for p in model.parameters() if p.requires_grad]
    if not trainable:
        raise ConfigurationError(f"mode {mode} selects no trainable tensors")
    return torch.optim.Adam(trainable, lr=learning_rate, betas=ADAM_BETAS, eps=ADAM_EPS)


def _clip_seq(tokens: torch.Tensor, seq_len: int | None, max_seq_len: int) -> torch.Tensor:
    limit = tokens.shape[1] if seq_len is None else min(seq_len, tokens.shape[1])
    limit = min(limit, max_seq_len)
    if limit < 2:
        raise ConfigurationError("effective sequence length must be >= 2")
    return tokens[:, :limit]


def run_steps(
    model: TransformerLM,
    train_tokens: torch.Tensor,
    eval_tokens: torch.Tensor,
    mode: Mode,
    learning_rate: float,
    steps: int,
    batch_size: int,
    seed: int,
    eval_interval: int = 200,
    patience_steps: int | None = None,
    min_improvement: float = 1e-3,
) -> TrainReport:
    """Shared optimization loop. Early stop only if `patience_steps` is set."""
    start = time.monotonic()
    optimizer = build_optimizer(model, mode, learning_rate)
    rng = np.random.default_rng(seed & 0xFFFFFFFFFFFFFFFF)
    n_train = train_tokens.shape[0]

    curve: list[tuple[int, float]] = [(0, evaluate_nll(model, eval_tokens))]
    best_nll = curve[0][1]
    best_step = 0
    last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}
    tokens_consumed = 0
    steps_run = 0

    for step in range(1, steps + 1):
        idx = torch.from_numpy(rng.integers(0, n_train, size=batch_size))
        batch = train_tokens[idx]
        logits = model(batch)
        loss = next_token_loss(logits, batch)
        if not torch.isfinite(loss):
            model.load_state_dict(last_good)
            raise NumericalError(
                f"non-finite loss at step {step} (batch indices {idx.tolist()}); "
                "parameters rolled back to last evaluated state"
            )
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        tokens_consumed += int(batch.numel())
        steps_run = step

        if step % eval_interval == 0 or step == steps:
            nll = evaluate_nll(model, eval_tokens)
            curve.append((step, nll))
            last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}
            if nll < best_nll - min_improvement:
                best_nll = nll
                best_step = step
            elif patience_steps is not None and step - best_step >= patience_steps:
                break

    return TrainReport(
        mode=Mode(mode).value,
        curve=curve,
        final_eval_nll=curve[-1][1],
        tokens_consumed=tokens_consumed,
        steps_run=steps_run,
        wall_time_s=time.monotonic() - start,
    )


def pretrain(
    model: TransformerLM,
    corpus: Corpus,
    config: PretrainConfig | None = None,
    seed: int = 0,
) -> tuple[TransformerLM, TrainReport]:
    """Train all parameters on `corpus` until max_steps or eval stagnation."""
    config = config or PretrainConfig()
    if corpus.vocab_size != model.config.vocab_size:
        raise ConfigurationError(
            f"corpus vocab {corpus.vocab_size} != model vocab {model.config.vocab_size}"
        )
    train_tokens, eval_tokens = split_eval(corpus, config.eval_fraction)
    train_tokens = _clip_seq(train_tokens, config.seq_len, model.config.max_seq_len)
    eval_tokens = _clip_seq(eval_tokens, config.seq_len, model.config.max_seq_len)
    report = run_steps(
        model,
        train_tokens,
        eval_tokens,
        mode=Mode.FULL,
        learning_rate=config.learning_rate,
        steps=config.max_steps,
        batch_size=config.batch_size,
        seed=seed,
        eval_interval=config.eval_interval,
        patience_steps=config.patience_steps,
        min_improvement=config.min_improvement,
    )
    return model, report


def reinitialize_embeddings(
    model: TransformerLM, vocab_size: int, seed: int
) -> TransformerLM:
    """Fresh model for a new vocabulary: embeddings re-drawn, trunk carried over."""
    new_config = replace(model.config, vocab_size=vocab_size)
    fresh = init_model(new_config, seed)
    emb_roots = ("input_embedding", "output_embedding", "position_embedding")
    source = dict(model.named_parameters())
    with torch.no_grad():
        for name, param in fresh.named_parameters():
            if name.split(".")[0] not in emb_roots:
                param.copy_(source[name])
    return fresh


def finetune_pipeline(
    model: TransformerLM,
    target_corpus: Corpus,
    stages: list[StageConfig] | None = None,
    seed: int = 0,
    out_dir=None,
    eval_fraction: float = 0.01,
) -> tuple[TransformerLM, list[StageResult]]:
    """Run the staged fine-tuning pipeline on `target_corpus`.

    Returns the final model plus per-stage reports; each stage starts from the
    previous stage's parameters and gets a checkpoint when `out_dir` is set.
    """
    if stages is None:
        stages = default_stages()
    if not stages:
        raise ConfigurationError("stage list is empty")
    model = reinitialize_embeddings(model, target_corpus.vocab_size, sequence_seed(seed, 0xE))
    train_tokens, eval_tokens = split_eval(target_corpus, eval_fraction)
    results: list[StageResult] = []
    for i, stage in enumerate(stages):
        st_train = _clip_seq(train_tokens, stage.seq_len, model.config.max_seq_len)
        st_eval = _clip_seq(eval_tokens, stage.seq_len, model.config.max_seq_len)
        report = run_steps(
            model,
            st_train,
            st_eval,
            mode=stage.mode,
            learning_rate=stage.learning_rate,
            steps=stage.steps,
            batch_size=stage.batch_size,
            seed=sequence_seed(seed, i + 1),
        )
        ckpt_dir = None
        if out_dir is not None:
            ckpt_dir = str(Path(out_dir) / f"stage_{i}_{stage.mode.value}")
            save_checkpoint(model, ckpt_dir)
        results.append(StageResult(stage=stage, report=report, checkpoint_dir=ckpt_dir))
    return model, results
