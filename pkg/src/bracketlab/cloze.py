"""Cloze benchmark harness: score models by log-probability differences.

A question is a prompt with one "#" marker plus a correct and an incorrect
answer. The delta for a question is the total sequence log-probability of the
prompt with the correct answer substituted minus the same with the incorrect
answer; positive means the model prefers the correct answer. Deltas are
averaged within each subtask; the overall score is the macro-average of the
subtask means.

Question files are JSON lines: {"prompt", "correct", "incorrect", "subtask"}.
A hand-authored 120-question sample ships with the package.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .textcorpus import Vocab, tokenize

MARKER = "#"
SAMPLE_QUESTIONS = "tiny_cloze_sample.jsonl"


@dataclass(frozen=True)
class ClozeQuestion:
    prompt: str
    correct: str
    incorrect: str
    subtask: str

    def __post_init__(self):
        n_markers = self.prompt.count(MARKER)
        if n_markers != 1:
            raise ValidationError(
                f"prompt must contain exactly one {MARKER!r}, found {n_markers}: {self.prompt!r}"
            )
        if not self.correct.strip() or not self.incorrect.strip():
            raise ValidationError(f"answers must be non-empty: {self.prompt!r}")
        if self.correct == self.incorrect:
            raise ValidationError(f"answers must differ: {self.prompt!r}")

    def substituted(self, answer: str) -> str:
        return self.prompt.replace(MARKER, answer, 1)


def load_questions(path) -> list[ClozeQuestion]:
    questions = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                questions.append(
                    ClozeQuestion(
                        prompt=record["prompt"],
                        correct=record["correct"],
                        incorrect=record["incorrect"],
                        subtask=record["subtask"],
                    )
                )
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValidationError(f"{path}:{lineno}: malformed question ({exc})")
    return questions


def sample_questions_path() -> Path:
    return Path(resources.files("bracketlab").joinpath("data", SAMPLE_QUESTIONS))


def load_sample_questions() -> list[ClozeQuestion]:
    return load_questions(sample_questions_path())


@dataclass
class QuestionScore:
    question: ClozeQuestion
    delta: float = float("nan")
    unknown_tokens: int = 0
    skipped: bool = False
    reason: str = ""


def _answer_span(question: ClozeQuestion, answer: str) -> tuple[int, int]:
    """Token index range [start, end) the answer occupies after substitution."""
    marker_at = question.prompt.index(MARKER)
    prefix_tokens = tokenize(question.prompt[:marker_at])
    with_answer = tokenize(question.prompt[:marker_at] + answer)
    return len(prefix_tokens), len(with_answer)


def score_question(
    model, vocab: Vocab, question: ClozeQuestion, mode: str = "full"
) -> QuestionScore:
    """Delta in nats between the correct and incorrect substitution.

    mode "full" scores the whole substituted sequence; "answer_only" sums only
    the answer tokens' conditional log-probabilities.
    """
    if mode not in ("full", "answer_only"):
        raise ValidationError(f"unknown scoring mode {mode!r}")
    log_probs = []
    unknown = 0
    for answer in (question.correct, question.incorrect):
        tokens = tokenize(question.substituted(answer))
        if not tokenize(answer):
            return QuestionScore(
                question=question, skipped=True, reason=f"answer {answer!r} tokenizes to nothing"
            )
        ids = vocab.encode_tokens(tokens)
        if len(ids) < 2:
            return QuestionScore(
                question=question, skipped=True, reason="substituted prompt shorter than 2 tokens"
            )
        unknown += int((ids == vocab.unk_id).sum())
        total, per_token = model.sequence_log_prob(ids)
        if mode == "full":
            log_probs.append(total)
        else:
            start, end = _answer_span(question, answer)
            # per_token[i] conditions token i+1; a position-0 answer token has
            # no conditional term and contributes nothing
            lo = max(start, 1)
            log_probs.append(float(per_token[lo - 1 : end - 1].sum()))
    return QuestionScore(
        question=question, delta=log_probs[0] - log_probs[1], unknown_tokens=unknown
    )


@dataclass
class ClozeReport:
    scores: list[QuestionScore]
    subtask_means: dict[str, float]
    overall: float  # macro-average of the subtask means
    n_skipped: int
    unknown_tokens: int
    mode: str = "full"

    def to_dict(self) -> dict:
        return {
            "mode": self.mode,
            "overall": self.overall,
            "subtask_means": dict(sorted(self.subtask_means.items())),
            "n_questions": len(self.scores),
            "n_skipped": self.n_skipped,
            "unknown_tokens": self.unknown_tokens,
            "per_question": [
                {
                    "subtask": s.question.subtask,
                    "prompt": s.question.prompt,
                    "delta": None if s.skipped else s.delta,
                    "skipped": s.skipped,
                    "reason": s.reason,
                }
                for s in self.scores
            ],
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=1, sort_keys=True)
        return path

    def render_text(self) -> str:
        lines = [f"{'subtask':28} {'mean delta (nats)':>18}"]
        for name in sorted(self.subtask_means):
            lines.append(f"{name:28} {self.subtask_means[name]:>18.3f}")
        lines.append(f"{'average':28} {self.overall:>18.3f}")
        if self.n_skipped:
            lines.append(f"skipped questions: {self.n_skipped}")
        return "\n".join(lines)


def evaluate(model, vocab: Vocab, questions, mode: str = "full") -> ClozeReport:
    if not questions:
        raise ValidationError("question set is empty")
    scores = [score_question(model, vocab, q, mode=mode) for q in questions]
    by_subtask: dict[str, list[float]] = {}
    for s in scores:
        if not s.skipped:
            by_subtask.setdefault(s.question.subtask, []).append(s.delta)
    subtask_means = {name: float(np.mean(vals)) for name, vals in by_subtask.items()}
    overall = float(np.mean(list(subtask_means.values()))) if subtask_means else float("nan")
    return ClozeReport(
        scores=scores,
        subtask_means=subtask_means,
        overall=overall,
        n_skipped=sum(s.skipped for s in scores),
        unknown_tokens=sum(s.unknown_tokens for s in scores),
        mode=mode,
    )
