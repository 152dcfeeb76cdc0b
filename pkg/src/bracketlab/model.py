"""Small decoder-only autoregressive transformer with named parameter groups.

Fine-tuning freezes tensors by group:

* E    -- input, output, and position embeddings
* EL   -- E plus every LayerNorm gain/bias
* ELT  -- EL plus all tensors of the last transformer block
* Full -- everything

Checkpoints are a JSON manifest (config, tensor names, shapes, byte offsets)
next to a raw little-endian float32 blob, so save -> load -> forward is
bit-identical.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, ValidationError


class Mode(str, Enum):
    E = "E"
    EL = "EL"
    ELT = "ELT"
    FULL = "Full"


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    n_heads: int
    d_ff: int
    vocab_size: int
    max_seq_len: int
    tie_embeddings: bool = False

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ConfigurationError(
                f"d_model {self.d_model} not divisible by n_heads {self.n_heads}"
            )
        if self.vocab_size < 2:
            raise ConfigurationError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if min(self.n_layers, self.d_ff, self.max_seq_len) < 1:
            raise ConfigurationError("n_layers, d_ff, max_seq_len must be >= 1")


def desk_config(vocab_size: int, max_seq_len: int = 128, **overrides) -> ModelConfig:
    """Laptop-scale default: 2 layers, d=64."""
    base = dict(n_layers=2, d_model=64, n_heads=4, d_ff=256)
    base.update(overrides)
    return ModelConfig(vocab_size=vocab_size, max_seq_len=max_seq_len, **base)


def large_config(vocab_size: int = 500, max_seq_len: int = 512, **overrides) -> ModelConfig:
    """Approximately 8M parameters at d=256."""
    base = dict(n_layers=10, d_model=256, n_heads=8, d_ff=1024)
    base.update(overrides)
    return ModelConfig(vocab_size=vocab_size, max_seq_len=max_seq_len, **base)


PRESETS = {"desk": desk_config, "8m": large_config}


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = d_model // n_heads
        self.q = nn.Linear(d_model, d_model)
        self.k = nn.Linear(d_model, d_model)
        self.v = nn.Linear(d_model, d_model)
        self.out = nn.Linear(d_model, d_model)

    def forward(self, x, attn_mask):
        b, s, d = x.shape
        shape = (b, s, self.n_heads, self.head_dim)
        q = self.q(x).view(shape).transpose(1, 2)
        k = self.k(x).view(shape).transpose(1, 2)
        v = self.v(x).view(shape).transpose(1, 2)
        att = q @ k.transpose(-2, -1) / math.sqrt(self.head_dim)
        att = att + attn_mask[:s, :s]
        att = F.softmax(att, dim=-1)
        y = (att @ v).transpose(1, 2).reshape(b, s, d)
        return self.out(y)


class Block(nn.Module):
    def __init__(self, d_model: int, n_heads: int, d_ff: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d_model)
        self.attn = SelfAttention(d_model, n_heads)
        self.ln2 = nn.LayerNorm(d_model)
        self.ff1 = nn.Linear(d_model, d_ff)
        self.ff2 = nn.Linear(d_ff, d_model)

    def forward(self, x, attn_mask):
        x = x + self.attn(self.ln1(x), attn_mask)
        x = x + self.ff2(F.gelu(self.ff1(self.ln2(x))))
        return x


class TransformerLM(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        self.input_embedding = nn.Embedding(config.vocab_size, config.d_model)
        self.position_embedding = nn.Embedding(config.max_seq_len, config.d_model)
        self.blocks = nn.ModuleList(
            Block(config.d_model, config.n_heads, config.d_ff)
            for _ in range(config.n_layers)
        )
        self.final_ln = nn.LayerNorm(config.d_model)
        self.output_embedding = nn.Linear(config.d_model, config.vocab_size, bias=False)
        if config.tie_embeddings:
            self.output_embedding.weight = self.input_embedding.weight

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        """Causal logits for a (batch, seq) matrix of token ids."""
        if tokens.dim() != 2:
            raise ValidationError(f"expected 2D token batch, got shape {tuple(tokens.shape)}")
        b, s = tokens.shape
        if s > self.config.max_seq_len:
            raise ValidationError(
                f"sequence length {s} exceeds max_seq_len {self.config.max_seq_len}"
            )
        if tokens.numel() and (tokens.min() < 0 or tokens.max() >= self.config.vocab_size):
            raise ValidationError("token id out of range for model vocabulary")
        dtype = self.input_embedding.weight.dtype
        mask = torch.full((s, s), float("-inf"), dtype=dtype, device=tokens.device)
        mask = torch.triu(mask, diagonal=1)
        x = self.input_embedding(tokens) + self.position_embedding.weight[:s]
        for block in self.blocks:
            x = block(x, mask)
        return self.output_embedding(self.final_ln(x))

    @torch.no_grad()
    def sequence_log_prob(self, tokens) -> tuple[float, np.ndarray]:
        """Total and per-position log p(token_i | prefix), positions 1..n-1."""
        ids = torch.as_tensor(np.asarray(tokens, dtype=np.int64))
        if ids.dim() != 1 or ids.numel() < 2:
            raise ValidationError("sequence_log_prob needs a 1D sequence of length >= 2")
        logits = self.forward(ids[None, :])
        logp = F.log_softmax(logits[0, :-1].double(), dim=-1)
        per = logp.gather(-1, ids[1:, None]).squeeze(-1).numpy()
        return float(per.sum()), per

    def n_parameters(self) -> int:
        return sum(p.numel() for p in self.parameters())


def init_model(config: ModelConfig, seed: int) -> TransformerLM:
    """Deterministic initialization; initial loss sits near ln(vocab_size)."""
    model = TransformerLM(config)
    gen = torch.Generator().manual_seed(seed & 0x7FFFFFFFFFFFFFFF)
    with torch.no_grad():
        for _, module in model.named_modules():
            if isinstance(module, nn.LayerNorm):
                module.weight.fill_(1.0)
                module.bias.fill_(0.0)
            elif isinstance(module, (nn.Linear, nn.Embedding)):
                module.weight.normal_(0.0, 0.02, generator=gen)
                if getattr(module, "bias", None) is not None:
                    module.bias.fill_(0.0)
    if config.tie_embeddings:
        model.output_embedding.weight = model.input_embedding.weight
    return model


def next_token_loss(logits: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
    """Mean -log softmax(logits)[target] over all next-token positions, in nats."""
    logp = F.log_softmax(logits[:, :-1], dim=-1)
    targets = tokens[:, 1:]
    nll = -logp.gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return nll.mean()


_EMBEDDING_ROOTS = ("input_embedding", "output_embedding", "position_embedding")


def embedding_names(model: TransformerLM) -> set[str]:
    return {
        name
        for name, _ in model.named_parameters()
        if name.split(".")[0] in _EMBEDDING_ROOTS
    }


def layernorm_names(model: TransformerLM) -> set[str]:
    names = set()
    for mod_name, module in model.named_modules():
        if isinstance(module, nn.LayerNorm):
            for p_name, _ in module.named_parameters():
                names.add(f"{mod_name}.{p_name}")
    return names


def trainable_names(model: TransformerLM, mode: Mode) -> set[str]:
    mode = Mode(mode)
    all_names = {name for name, _ in model.named_parameters()}
    if mode is Mode.FULL:
        return all_names
    names = embedding_names(model)
    if mode is Mode.E:
        return names
    names |= layernorm_names(model)
    if mode is Mode.EL:
        return names
    last = f"blocks.{model.config.n_layers - 1}."
    names |= {name for name in all_names if name.startswith(last)}
    return names


def apply_mask(model: TransformerLM, mode: Mode) -> set[str]:
    """Set requires_grad so only the mode's group trains; returns trainable names."""
    trainable = trainable_names(model, mode)
    for name, param in model.named_parameters():
        param.requires_grad_(name in trainable)
    return trainable


CHECKPOINT_MANIFEST = "manifest.json"
CHECKPOINT_WEIGHTS = "weights.bin"


def save_checkpoint(model: TransformerLM, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tensors = []
    offset = 0
    with open(directory / CHECKPOINT_WEIGHTS, "wb") as fh:
        for name, param in model.named_parameters():
            arr = np.ascontiguousarray(param.detach().cpu().numpy(), dtype="<f4")
            data = arr.tobytes()
            tensors.append(
                {"name": name, "shape": list(param.shape), "offset": offset, "nbytes": len(data)}
            )
            fh.write(data)
            offset += len(data)
    manifest = {
        "format": "bracketlab-checkpoint",
        "version": 1,
        "dtype": "<f4",
        "config": asdict(model.config),
        "tensors": tensors,
    }
    with open(directory / CHECKPOINT_MANIFEST, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return directory


def load_checkpoint(directory) -> TransformerLM:
    directory = Path(directory)
    with open(directory / CHECKPOINT_MANIFEST, encoding="utf-8") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "bracketlab-checkpoint" or manifest.get("version") != 1:
        raise ValidationError(f"{directory}: not a recognized checkpoint")
    config = ModelConfig(**manifest["config"])
    model = TransformerLM(config)
    blob = (directory / CHECKPOINT_WEIGHTS).read_bytes()
    params = dict(model.named_parameters())
    with torch.no_grad():
        for entry in manifest["tensors"]:
            arr = np.frombuffer(
                blob, dtype="<f4", count=int(np.prod(entry["shape"])), offset=entry["offset"]
            ).reshape(entry["shape"])
            params[entry["name"]].copy_(torch.from_numpy(arr.copy()))
    return model
