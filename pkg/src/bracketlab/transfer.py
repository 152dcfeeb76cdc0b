"""Transfer difficulty and the derived dissimilarity / relative-complexity measures.

Difficulty f(A, B) is the held-out NLL (nats/token) on language B of a model
pre-trained on A and fine-tuned through the staged pipeline truncated at a
parameter group. For a pair measured in both directions at the same mode:

    dissimilarity(A, B)        = (f(A,B) + f(B,A)) / 2      (symmetric)
    relative_complexity(A, B)  = (f(B,A) - f(A,B)) / 2      (antisymmetric)

Full cells are models trained from scratch on the target language.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .corpusfile import Corpus, read_corpus
from .errors import ConfigurationError
from .model import Mode, TransformerLM, load_checkpoint
from .training import (
    PretrainConfig,
    StageConfig,
    finetune_pipeline,
    pretrain,
    stages_up_to,
)

CLOSE_THRESHOLD_NATS = 0.2


@dataclass(frozen=True)
class TransferCell:
    source: str
    target: str
    mode: str
    nll: float
    seed: int = 0

    def __post_init__(self):
        if self.nll < 0:
            raise ConfigurationError(f"NLL must be >= 0, got {self.nll}")


@dataclass(frozen=True)
class PairSummary:
    a: str
    b: str
    mode: str
    dissimilarity: float
    relative_complexity: float  # of a relative to b


def difficulty(
    source_model: TransformerLM,
    target_corpus: Corpus,
    mode: Mode,
    stages: list[StageConfig] | None = None,
    seed: int = 0,
    source_name: str = "source",
    target_name: str = "target",
) -> TransferCell:
    """Fine-tune `source_model` onto the target through the pipeline truncated at `mode`."""
    mode = Mode(mode)
    if mode is Mode.FULL:
        raise ConfigurationError("Full cells come from scratch_baseline, not transfer")
    if stages is None:
        stages = stages_up_to(mode)
    _, results = finetune_pipeline(source_model, target_corpus, stages=stages, seed=seed)
    return TransferCell(
        source=source_name,
        target=target_name,
        mode=mode.value,
        nll=results[-1].report.final_eval_nll,
        seed=seed,
    )


def scratch_baseline(
    model: TransformerLM,
    target_corpus: Corpus,
    config: PretrainConfig | None = None,
    seed: int = 0,
    target_name: str = "target",
) -> TransferCell:
    """Train a freshly initialized model on the target language (the Full column)."""
    _, report = pretrain(model, target_corpus, config=config, seed=seed)
    return TransferCell(
        source=target_name,
        target=target_name,
        mode=Mode.FULL.value,
        nll=report.final_eval_nll,
        seed=seed,
    )


def pair_summary(cell_ab: TransferCell, cell_ba: TransferCell) -> PairSummary:
    if cell_ab.mode != cell_ba.mode:
        raise ConfigurationError(
            f"mode mismatch: {cell_ab.mode} vs {cell_ba.mode}"
        )
    if cell_ab.source != cell_ba.target or cell_ab.target != cell_ba.source:
        raise ConfigurationError(
            f"cells do not form a pair: {cell_ab.source}->{cell_ab.target} "
            f"and {cell_ba.source}->{cell_ba.target}"
        )
    f_ab, f_ba = cell_ab.nll, cell_ba.nll
    return PairSummary(
        a=cell_ab.source,
        b=cell_ab.target,
        mode=cell_ab.mode,
        dissimilarity=(f_ab + f_ba) / 2.0,
        relative_complexity=(f_ba - f_ab) / 2.0,
    )


@dataclass
class LanguageEntry:
    name: str
    corpus: str  # path to corpus file
    checkpoint: str | None = None  # pre-trained checkpoint dir; None -> cells absent


@dataclass
class TransferReport:
    cells: list[TransferCell] = field(default_factory=list)
    baselines: list[TransferCell] = field(default_factory=list)
    summaries: list[PairSummary] = field(default_factory=list)
    absent: list[dict] = field(default_factory=list)
    close_threshold: float = CLOSE_THRESHOLD_NATS

    def baseline_for(self, name: str, seed: int | None = None) -> TransferCell | None:
        match = None
        for cell in self.baselines:
            if cell.target == name:
                if seed is None or cell.seed == seed:
                    return cell
                match = match or cell
        return match

    def close_cells(self) -> list[dict]:
        """Cells whose NLL is within the threshold of the target's scratch baseline."""
        flagged = []
        for cell in self.cells:
            base = self.baseline_for(cell.target, cell.seed)
            if base is not None and abs(cell.nll - base.nll) <= self.close_threshold:
                flagged.append(
                    {"source": cell.source, "target": cell.target, "mode": cell.mode,
                     "seed": cell.seed, "nll": cell.nll, "baseline": base.nll}
                )
        return flagged

    def to_dict(self) -> dict:
        return {
            "cells": [asdict(c) for c in self.cells],
            "baselines": [asdict(c) for c in self.baselines],
            "summaries": [asdict(s) for s in self.summaries],
            "absent": self.absent,
            "close_threshold": self.close_threshold,
            "close_cells": self.close_cells(),
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
        return path

    def render_text(self) -> str:
        lines = []
        langs = sorted({c.target for c in self.cells} | {c.source for c in self.cells}
                       | {b.target for b in self.baselines})
        modes = sorted({c.mode for c in self.cells})
        close = {(c["source"], c["target"], c["mode"]) for c in self.close_cells()}
        n_seeds = len({c.seed for c in self.cells}) or 1
        for mode in modes:
            note = f"; mean of {n_seeds} seeds" if n_seeds > 1 else ""
            lines.append(f"mode {mode} (nats/token; * = within {self.close_threshold} "
                         f"of the target's scratch baseline{note})")
            header = ["src\\dst"] + langs
            rows = [header]
            for src in langs:
                row = [src]
                for dst in langs:
                    values = [
                        c.nll for c in self.cells
                        if c.source == src and c.target == dst and c.mode == mode
                    ]
                    if not values:
                        row.append("-")
                    else:
                        mark = "*" if (src, dst, mode) in close else ""
                        row.append(f"{sum(values) / len(values):.3f}{mark}")
                rows.append(row)
            widths = [max(len(r[i]) for r in rows) for i in range(len(header))]
            for r in rows:
                lines.append("  ".join(cell.ljust(w) for cell, w in zip(r, widths)))
            lines.append("")
        if self.baselines:
            lines.append("scratch baselines (Full):")
            for name in sorted({b.target for b in self.baselines}):
                values = [b.nll for b in self.baselines if b.target == name]
                lines.append(f"  {name}: {sum(values) / len(values):.3f}")
            lines.append("")
        if self.summaries:
            lines.append("pair summaries:")
            for s in self.summaries:
                lines.append(
                    f"  {s.a} vs {s.b} [{s.mode}]: dissimilarity {s.dissimilarity:.3f}, "
                    f"complexity of {s.a} relative to {s.b} {s.relative_complexity:+.3f}"
                )
        if self.absent:
            lines.append("absent cells:")
            for a in self.absent:
                lines.append(f"  {a}")
        return "\n".join(lines)


def transfer_matrix(
    languages: list[LanguageEntry],
    modes: list[Mode],
    stages_for_mode=None,
    baseline_config: PretrainConfig | None = None,
    baseline_model_factory=None,
    seed: int = 0,
    seeds: list[int] | None = None,
    close_threshold: float = CLOSE_THRESHOLD_NATS,
) -> TransferReport:
    """All ordered language pairs x modes, plus scratch (Full) baselines.

    `stages_for_mode(mode)` builds the truncated pipeline (defaults to the
    standard staged schedule); `baseline_model_factory(vocab_size)` builds a
    fresh model for scratch baselines (skipped when omitted). Languages
    without a checkpoint contribute absent cells instead of aborting the run.
    Passing `seeds` sweeps the whole matrix once per seed; cells carry their
    seed, and significance analysis is left to the reader.
    """
    modes = [Mode(m) for m in modes]
    if any(m is Mode.FULL for m in modes):
        raise ConfigurationError("Full is implied by the baselines; pass E/EL/ELT")
    if stages_for_mode is None:
        stages_for_mode = stages_up_to
    seeds = list(seeds) if seeds is not None else [seed]
    if not seeds:
        raise ConfigurationError("seed sweep is empty")
    report = TransferReport(close_threshold=close_threshold)
    corpora = {entry.name: read_corpus(entry.corpus) for entry in languages}

    for run_seed in seeds:
        for src in languages:
            for dst in languages:
                if src.name == dst.name:
                    continue
                for mode in modes:
                    if src.checkpoint is None:
                        report.absent.append(
                            {"source": src.name, "target": dst.name, "mode": mode.value,
                             "seed": run_seed, "reason": "missing checkpoint"}
                        )
                        continue
                    source_model = load_checkpoint(src.checkpoint)
                    cell = difficulty(
                        source_model,
                        corpora[dst.name],
                        mode,
                        stages=stages_for_mode(mode),
                        seed=run_seed,
                        source_name=src.name,
                        target_name=dst.name,
                    )
                    report.cells.append(cell)

        if baseline_model_factory is not None:
            for entry in languages:
                corpus = corpora[entry.name]
                model = baseline_model_factory(corpus.vocab_size)
                report.baselines.append(
                    scratch_baseline(
                        model, corpus, config=baseline_config, seed=run_seed,
                        target_name=entry.name,
                    )
                )

        for mode in modes:
            seen = set()
            for cell in report.cells:
                if cell.mode != mode.value or cell.seed != run_seed:
                    continue
                key = frozenset((cell.source, cell.target))
                if key in seen:
                    continue
                back = next(
                    (c for c in report.cells
                     if c.source == cell.target and c.target == cell.source
                     and c.mode == cell.mode and c.seed == run_seed),
                    None,
                )
                if back is not None:
                    report.summaries.append(pair_summary(cell, back))
                    seen.add(key)
    return report
