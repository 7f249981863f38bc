"""Synthetic VQA corpora, m+n subsets, VQA scoring and evaluation."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import re
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import torch

from . import synth
from .numcore import ContractError, RngStream, load_qtns, qtns_dumps, rng_uniform
from .questions import ANSWER_TYPES, Question, QuestionPool, load_pool


@dataclass
class VqaRecord:
    image_id: str
    image: torch.Tensor
    question: Question

    def __post_init__(self):
        if len(self.question.ground_truths) != 10:
            raise ContractError(
                f"record {self.question.question_id} needs 10 ground truths"
            )


@dataclass(frozen=True)
class DatasetSpec:
    m: int
    n: int
    seed: int = 0

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise ContractError("m and n must be >= 1")


# ---------------------------------------------------------- generation


def gen_synthetic(rng: RngStream, images: int, questions_per_image: int,
                  prefix: str = "syn") -> list[VqaRecord]:
    """Rendered shape scenes with balanced template questions.

    Each question carries ten identical ground truths.
    """
    if images < 1 or questions_per_image < 1:
        raise ContractError("image and question counts must be >= 1")
    records = []
    for i in range(images):
        scene = synth.random_scene(rng)
        img = torch.as_tensor(synth.render(scene, rng), dtype=torch.float32)
        image_id = f"{prefix}-{i:05d}"
        for j, tq in enumerate(synth.pick_questions(scene, questions_per_image, rng)):
            q = Question(
                question_id=f"{image_id}-q{j:02d}", image_id=image_id, text=tq.text,
                answer_type=tq.answer_type, ground_truths=[tq.answer] * 10,
            )
            records.append(VqaRecord(image_id, img, q))
    return records


def images_of(records: Sequence[VqaRecord]) -> dict[str, torch.Tensor]:
    out: dict[str, torch.Tensor] = {}
    for r in records:
        out.setdefault(r.image_id, r.image)
    return dict(sorted(out.items()))


def group_by_image(records: Sequence[VqaRecord]) -> dict[str, list[VqaRecord]]:
    groups: dict[str, list[VqaRecord]] = defaultdict(list)
    for r in records:
        groups[r.image_id].append(r)
    return dict(sorted(groups.items()))


def build_subset(records: Sequence[VqaRecord], spec: DatasetSpec,
                 rng: RngStream) -> list[VqaRecord]:
    """m images drawn uniformly from those with >= n questions, then n
    questions drawn uniformly per image."""
    groups = group_by_image(records)
    eligible = [k for k, v in groups.items() if len(v) >= spec.n]
    if len(eligible) < spec.m:
        raise ContractError(
            f"only {len(eligible)} images have at least {spec.n} questions; "
            f"{spec.m} requested"
        )
    chosen = sorted(eligible[int(i)] for i in rng.choice(len(eligible), spec.m, replace=False))
    out = []
    for image_id in chosen:
        qs = groups[image_id]
        picks = sorted(int(i) for i in rng.choice(len(qs), spec.n, replace=False))
        out.extend(qs[i] for i in picks)
    return out


def corpus_checksum(records: Sequence[VqaRecord]) -> str:
    h = hashlib.sha256()
    for image_id, img in images_of(records).items():
        h.update(image_id.encode())
        h.update(qtns_dumps(img))
    for r in records:
        h.update(json.dumps(r.question.to_json(), sort_keys=True).encode())
    return h.hexdigest()


def save_corpus(records: Sequence[VqaRecord], path, meta: dict | None = None) -> dict:
    path = Path(path)
    (path / "images").mkdir(parents=True, exist_ok=True)
    for image_id, img in images_of(records).items():
        (path / "images" / f"{image_id}.qtns").write_bytes(qtns_dumps(img))
    QuestionPool(r.question for r in records).save(path / "questions.jsonl")
    manifest = {
        "images": len(images_of(records)),
        "records": len(records),
        "checksum": corpus_checksum(records),
        **(meta or {}),
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def load_corpus(path) -> list[VqaRecord]:
    path = Path(path)
    pool = load_pool(path / "questions.jsonl")
    cache: dict[str, torch.Tensor] = {}
    out = []
    for q in pool:
        if q.image_id not in cache:
            cache[q.image_id] = load_qtns(path / "images" / f"{q.image_id}.qtns")
        out.append(VqaRecord(q.image_id, cache[q.image_id], q))
    return out


# ------------------------------------------------------------- scoring

_ARTICLES = {"a", "an", "the"}
_NUMBER_WORDS = {
    "none": "0", "zero": "0", "one": "1", "two": "2", "three": "3", "four": "4",
    "five": "5", "six": "6", "seven": "7", "eight": "8", "nine": "9", "ten": "10",
}
_PUNCT = re.compile(r"[;/\[\]\"{}()=+\\_\-><@`,?!*#%^&$:']")
_PERIOD = re.compile(r"(?<!\d)\.(?!\d)")


def normalize_answer(ans: str) -> str:
    """Reduced official normalization: lowercase, punctuation stripped (decimal
    points kept), number words to digits, articles dropped."""
    s = ans.lower().replace("\n", " ").replace("\t", " ").strip()
    s = _PUNCT.sub("", s)
    s = _PERIOD.sub("", s)
    words = [_NUMBER_WORDS.get(w, w) for w in s.split() if w not in _ARTICLES]
    return " ".join(words)


def vqa_score(answer: str, ground_truths: Sequence[str]) -> float:
    """Mean over the ten leave-one-out annotator subsets of min(matches / 3, 1)."""
    if len(ground_truths) != 10:
        raise ContractError(f"vqa_score needs 10 ground truths, got {len(ground_truths)}")
    a = normalize_answer(answer)
    gts = [normalize_answer(g) for g in ground_truths]
    total = 0.0
    for i in range(10):
        matches = sum(1 for j, g in enumerate(gts) if j != i and g == a)
        total += min(matches / 3.0, 1.0)
    return total / 10.0


@dataclass
class EvalResult:
    overall: float
    other: float | None
    number: float | None
    yes_no: float | None
    per_record: dict[str, float] = field(default_factory=dict)
    answers: dict[str, str] = field(default_factory=dict)
    counts: dict[str, int] = field(default_factory=dict)
    counters: dict = field(default_factory=dict)

    def row(self) -> list:
        return [self.overall, self.other, self.number, self.yes_no]

    def to_json(self) -> dict:
        return {
            "overall": self.overall, "other": self.other, "number": self.number,
            "yes/no": self.yes_no, "counts": self.counts, "counters": self.counters,
            "per_record": self.per_record, "answers": self.answers,
        }


def summarize(per_record: Mapping[str, float], types: Mapping[str, str],
              answers: Mapping[str, str] | None = None) -> EvalResult:
    ids = sorted(per_record)
    sums = {t: 0.0 for t in ANSWER_TYPES}
    counts = {t: 0 for t in ANSWER_TYPES}
    for qid in ids:
        t = types[qid]
        sums.setdefault(t, 0.0)
        counts.setdefault(t, 0)
        sums[t] += per_record[qid]
        counts[t] += 1
    n = len(ids)
    overall = 100.0 * sum(sums[t] for t in sorted(sums)) / n
    cat = {t: (100.0 * sums[t] / counts[t] if counts[t] else None) for t in ANSWER_TYPES}
    return EvalResult(
        overall=overall, other=cat["other"], number=cat["number"], yes_no=cat["yes/no"],
        per_record={k: per_record[k] for k in ids},
        answers=dict(sorted((answers or {}).items())), counts=counts,
    )


@torch.no_grad()
def evaluate(model, records: Sequence[VqaRecord],
             adversarial: Mapping[str, torch.Tensor | None] | None = None) -> EvalResult:
    """Greedy-decode every record, on its adversarial image when one is given."""
    from .toyvlm import answer_questions

    if not records:
        raise ContractError("evaluate needs at least one record")
    adversarial = adversarial or {}
    for k, v in adversarial.items():
        if v is None:
            raise ContractError(f"missing adversarial tensor for image {k!r}")
    dtype = next(model.parameters()).dtype
    per_record, answers, types = {}, {}, {}
    for image_id, recs in group_by_image(records).items():
        img = adversarial.get(image_id, recs[0].image)
        said = answer_questions(model, img.to(dtype), [r.question.text for r in recs])
        for r, a in zip(recs, said):
            qid = r.question.question_id
            per_record[qid] = vqa_score(a, r.question.ground_truths)
            answers[qid] = a
            types[qid] = r.question.answer_type
    return summarize(per_record, types, answers)


def noise_baseline(x: torch.Tensor, eps: float, rng: RngStream) -> torch.Tensor:
    """Uniform noise in the same l-inf ball an attack would use."""
    if eps < 0:
        raise ContractError("eps must be >= 0")
    noise = rng_uniform(rng, -eps, eps, x.shape, dtype=x.dtype)
    return (x + noise).clamp(0.0, 1.0)


def mean_spread(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (0 for a single value)."""
    arr = np.asarray(values, dtype=float)
    return float(arr.mean()), float(arr.std(ddof=1)) if len(arr) > 1 else 0.0


# ------------------------------------------------------------- transfer


@dataclass
class TransferGrid:
    surrogates: list[str]
    targets: list[str]
    cells: dict[tuple[str, str], EvalResult]

    def overall(self) -> list[list[float]]:
        return [[self.cells[(s, t)].overall for t in self.targets] for s in self.surrogates]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["surrogate \\ target", *self.targets])
        for s, row in zip(self.surrogates, self.overall()):
            w.writerow([s, *(f"{v:.2f}" for v in row)])
        return buf.getvalue()

    def to_json(self) -> dict:
        return {
            "surrogates": self.surrogates,
            "targets": self.targets,
            "overall": self.overall(),
            "cells": {
                f"{s}|{t}": {k: v for k, v in self.cells[(s, t)].to_json().items()
                            if k not in ("per_record", "answers")}
                for s in self.surrogates for t in self.targets
            },
        }


def transfer_matrix(models: Mapping[str, object],
                    adversarial_sets: Mapping[str, Mapping[str, torch.Tensor]],
                    records: Sequence[VqaRecord]) -> TransferGrid:
    """Rows are surrogate models (whose attack produced the images), columns
    are the models being evaluated; the diagonal is the white-box case."""
    labels = list(models)
    for s in labels:
        if s not in adversarial_sets:
            raise ContractError(f"no adversarial set for surrogate {s!r}")
    cells = {}
    for s in labels:
        for t in labels:
            cells[(s, t)] = evaluate(models[t], records, adversarial_sets[s])
    return TransferGrid(labels, labels, cells)
