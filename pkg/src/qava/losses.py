"""Attack objectives, all maximized by the attacker.

* ``qava``: MSE between clean-image and adversarial-image alignment
  features (final layer), averaged over surrogate questions.
* ``qava_multilayer``: the same MSE averaged over every alignment layer.
* ``llm``: decoder cross-entropy of the model's own clean-image answer.

Every objective accepts a single adversarial image ``[H, W, C]`` (scalar
result) or a stack ``[K, H, W, C]`` (one value per image).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

from . import toyvlm
from .numcore import ContractError
from .questions import Question

KINDS = ("qava", "qava_multilayer", "llm")
DEFAULT_C = {"qava": 0.005, "qava_multilayer": 0.005, "llm": 0.1}


@dataclass(frozen=True)
class LossSpec:
    kind: str = "qava"
    cw: bool = False
    c: float | None = None
    confidence: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ContractError(f"unknown loss kind {self.kind!r}; expected one of {KINDS}")
        if self.c is not None and self.c < 0:
            raise ContractError("cw constant c must be >= 0")
        if self.confidence < 0:
            raise ContractError("confidence must be >= 0")

    @property
    def cw_c(self) -> float:
        return DEFAULT_C[self.kind] if self.c is None else self.c

    @property
    def uses_decoder(self) -> bool:
        return self.kind == "llm"


def qava_loss(q: torch.Tensor, q_adv: torch.Tensor) -> torch.Tensor:
    """Mean squared difference over the last two (query, feature) axes."""
    if q.shape[-2:] != q_adv.shape[-2:]:
        raise ContractError(f"feature shapes differ: {tuple(q.shape)} vs {tuple(q_adv.shape)}")
    return ((q - q_adv) ** 2).mean(dim=(-2, -1))


def qava_loss_multilayer(layers: Sequence[torch.Tensor],
                         layers_adv: Sequence[torch.Tensor]) -> torch.Tensor:
    if len(layers) != len(layers_adv) or not layers:
        raise ContractError(
            f"layer count mismatch: {len(layers)} vs {len(layers_adv)}"
        )
    per = [qava_loss(a, b) for a, b in zip(layers, layers_adv)]
    return torch.stack(per).mean(0)


def sq_l2(x: torch.Tensor, x_adv: torch.Tensor) -> torch.Tensor:
    return ((x_adv - x) ** 2).sum(dim=(-3, -2, -1))


def with_confidence(base: torch.Tensor, confidence: float) -> torch.Tensor:
    # no margin semantics for a feature-space loss: subtract and clamp at 0
    if confidence <= 0:
        return base
    return (base - confidence).clamp(min=0.0)


def cw_objective(base_loss, x: torch.Tensor, x_adv: torch.Tensor, c: float) -> torch.Tensor:
    """``base_loss - c * ||x - x_adv||_2^2``."""
    if c < 0:
        raise ContractError("cw constant c must be >= 0")
    if x.shape[-3:] != x_adv.shape[-3:]:
        raise ContractError("clean and adversarial images differ in shape")
    return base_loss - c * sq_l2(x, x_adv)


def canonical_order(questions: Sequence[Question]) -> list[Question]:
    # fixed summation order so permuted inputs give bit-identical losses
    return sorted(questions, key=lambda q: (q.question_id, q.text))


class CleanCache:
    """Clean-image alignment features and pseudo-labels, one question at a time.

    Entries are computed with a batch of one so a cached value is bit-identical
    to a fresh recomputation.
    """

    def __init__(self, model, x: torch.Tensor):
        self.model = model
        self.x = x.detach()
        self._features: dict[str, list[torch.Tensor]] = {}
        self._labels: dict[str, int] = {}

    def features(self, q: Question) -> list[torch.Tensor]:
        if q.text not in self._features:
            self._features[q.text] = clean_features(self.model, self.x, q)
        return self._features[q.text]

    def label(self, q: Question) -> int:
        if q.text not in self._labels:
            tokens = toyvlm.tokenize_many([q.text], self.model.config)
            self._labels[q.text] = int(toyvlm.pseudo_label(self.model, self.x, tokens)[0])
        return self._labels[q.text]


@torch.no_grad()
def clean_features(model, x: torch.Tensor, q: Question) -> list[torch.Tensor]:
    tokens = toyvlm.tokenize_many([q.text], model.config)
    feats = toyvlm.features_for(model, x, tokens)
    return [f[0] for f in feats.per_layer]


def _adv_features(model, x_adv: torch.Tensor, tokens: torch.Tensor):
    """Alignment features for every (image, question) pair: ``[K, N, Q, D]`` per layer."""
    k = x_adv.shape[0]
    n = tokens.shape[0]
    feats = toyvlm.encode_image(model, x_adv)
    feats = feats[:, None].expand(k, n, *feats.shape[1:]).reshape(k * n, *feats.shape[1:])
    toks = tokens[None].expand(k, n, -1).reshape(k * n, -1)
    out = toyvlm.align(model, feats, toks)
    return out, toks


def per_question_losses(model, x: torch.Tensor, x_adv: torch.Tensor,
                        questions: Sequence[Question], spec: LossSpec,
                        cache: CleanCache | None = None,
                        transform: Callable[[torch.Tensor], torch.Tensor] | None = None,
                        ) -> torch.Tensor:
    """Loss matrix ``[K, N]`` for K adversarial images and N questions (in the given order)."""
    if not questions:
        raise ContractError("at least one question is required")
    cache = cache if cache is not None else CleanCache(model, x)
    single = x_adv.dim() == 3
    xa = x_adv[None] if single else x_adv
    if transform is not None:
        xa = transform(xa)
    k, n = xa.shape[0], len(questions)
    tokens = toyvlm.tokenize_many([q.text for q in questions], model.config)
    adv, toks = _adv_features(model, xa, tokens)
    if spec.kind == "llm":
        labels = torch.tensor([cache.label(q) for q in questions], dtype=torch.long)
        logits = toyvlm.answer_logits(model, adv.final, toks)
        ce = F.cross_entropy(logits, labels[None].expand(k, n).reshape(-1), reduction="none")
        return ce.reshape(k, n)
    clean = [torch.stack(layers) for layers in zip(*(cache.features(q) for q in questions))]
    adv_layers = [a.reshape(k, n, *a.shape[1:]) for a in adv.per_layer]
    if spec.kind == "qava":
        return qava_loss(clean[-1][None], adv_layers[-1])
    return qava_loss_multilayer([c[None] for c in clean], adv_layers)


def aggregate_questions(model, x: torch.Tensor, x_adv: torch.Tensor,
                        questions: Sequence[Question], spec: LossSpec,
                        cache: CleanCache | None = None,
                        transform: Callable[[torch.Tensor], torch.Tensor] | None = None,
                        ) -> torch.Tensor:
    """Mean per-question loss (confidence and CW penalty applied when the spec asks)."""
    if not questions:
        raise ContractError("aggregate_questions needs a nonempty question list")
    qs = canonical_order(questions)
    per = per_question_losses(model, x, x_adv, qs, spec, cache, transform)
    base = with_confidence(per.mean(dim=1), spec.confidence)
    if spec.cw:
        base = cw_objective(base, x, x_adv if x_adv.dim() == 4 else x_adv[None], spec.cw_c)
    return base[0] if x_adv.dim() == 3 else base
