"""Question records, pools, and the surrogate-question sampling strategies."""
from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from .numcore import ContractError, RngStream

ANSWER_TYPES = ("yes/no", "number", "other")
FALLBACK_TYPE = "none of the above"
_WORDS = re.compile(r"[a-z0-9']+")


class PoolFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Question:
    question_id: str
    text: str
    answer_type: str
    image_id: str | None = None
    ground_truths: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.text.strip():
            raise ContractError(f"question {self.question_id} has empty text")
        if len(self.ground_truths) not in (0, 10):
            raise ContractError(
                f"question {self.question_id} must carry 0 or 10 ground truths, "
                f"got {len(self.ground_truths)}"
            )

    def to_json(self) -> dict:
        d = asdict(self)
        return {k: d[k] for k in ("question_id", "image_id", "text", "answer_type", "ground_truths")}

    @classmethod
    def from_json(cls, d: dict) -> "Question":
        return cls(
            question_id=str(d["question_id"]),
            image_id=None if d.get("image_id") is None else str(d["image_id"]),
            text=d["text"],
            answer_type=d["answer_type"],
            ground_truths=list(d.get("ground_truths") or []),
        )


class QuestionPool:
    def __init__(self, questions: Iterable[Question] = ()):
        self.questions: list[Question] = list(questions)
        seen = set()
        for q in self.questions:
            if q.question_id in seen:
                raise ContractError(f"duplicate question_id {q.question_id!r}")
            seen.add(q.question_id)
        self.type_index: dict[str, list[str]] = {}
        for q in self.questions:
            self.type_index.setdefault(classify_type(q.text), []).append(q.question_id)
        self._by_id = {q.question_id: q for q in self.questions}

    def __len__(self):
        return len(self.questions)

    def __iter__(self):
        return iter(self.questions)

    def __getitem__(self, qid: str) -> Question:
        return self._by_id[qid]

    @property
    def types(self) -> list[str]:
        return sorted(self.type_index)

    def save(self, path) -> None:
        with open(path, "w") as f:
            for q in self.questions:
                f.write(json.dumps(q.to_json(), sort_keys=True) + "\n")


_REQUIRED = ("question_id", "text", "answer_type")


def load_pool(path) -> QuestionPool:
    """Read a JSONL question pool; errors name the offending line."""
    questions = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                if not isinstance(rec, dict):
                    raise ValueError("record is not an object")
                missing = [k for k in _REQUIRED if k not in rec]
                if missing:
                    raise ValueError(f"missing fields {missing}")
                if rec["answer_type"] not in ANSWER_TYPES:
                    raise ValueError(f"unknown answer_type {rec['answer_type']!r}")
                gts = rec.get("ground_truths") or []
                if not isinstance(gts, list):
                    raise ValueError("ground_truths must be an array")
                questions.append(Question.from_json(rec))
            except (ValueError, ContractError, TypeError) as e:
                raise PoolFormatError(f"{path}: line {lineno}: {e}") from e
    try:
        return QuestionPool(questions)
    except ContractError as e:
        raise PoolFormatError(f"{path}: {e}") from e


@lru_cache(maxsize=None)
def type_prefixes() -> tuple[tuple[str, ...], ...]:
    text = resources.files("qava").joinpath("data/question_types.txt").read_text()
    out = {tuple(line.split()) for line in text.splitlines()
           if line.strip() and not line.startswith("#")}
    return tuple(sorted(out, key=lambda p: (-len(p), p)))


def classify_type(text: str) -> str:
    """Longest whole-word, case-insensitive prefix match against the bundled list."""
    words = tuple(_WORDS.findall(text.lower()))
    if not text.strip():
        raise ContractError("cannot classify empty question text")
    for prefix in type_prefixes():
        if words[: len(prefix)] == prefix:
            return " ".join(prefix)
    return FALLBACK_TYPE


# ---------------------------------------------------------------- sampling


def sample_rsq(pool: QuestionPool, n: int, rng: RngStream) -> list[Question]:
    """Uniform sample of ``n`` questions without replacement."""
    if not 0 <= n <= len(pool):
        raise ContractError(f"cannot sample {n} questions from a pool of {len(pool)}")
    if n == 0:
        return []
    idx = rng.choice(len(pool), n, replace=False)
    return [pool.questions[int(i)] for i in idx]


def sample_rsq_by_type(pool: QuestionPool, n: int, rng: RngStream) -> list[Question]:
    """``n`` distinct question types, then one uniform question from each."""
    types = pool.types
    if not 0 <= n <= len(types):
        raise ContractError(f"cannot sample {n} types from a pool with {len(types)} types")
    chosen = rng.choice(len(types), n, replace=False) if n else []
    out = []
    for t in chosen:
        ids = pool.type_index[types[int(t)]]
        out.append(pool[ids[int(rng.integers(0, len(ids)))]])
    return out


def wtq(targets: Sequence[Question]) -> list[Question]:
    """White-box strategy: attack the evaluation questions themselves."""
    if not targets:
        raise ContractError("WTQ needs at least one target question")
    return list(targets)


STRATEGIES = ("wtq", "rsq", "rsq-t", "vqg")
