"""Attack optimizers: FGSM, PGD under an l-infinity budget, and CW with an
l2 penalty, plus per-step question resampling, momentum and diverse inputs.

Budgets and step sizes are fractions of the [0, 1] pixel range (8/255, not 8).
"""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence, Union

import torch

from . import losses, toyvlm
from .losses import LossSpec
from .numcore import ContractError, RngStream, rng_uniform, sign, value_and_grad
from .questions import Question

METHODS = ("fgsm", "pgd", "cw")

# a fixed list, or a callable drawing a fresh list from the job's stream
QuestionSource = Union[Sequence[Question], Callable[[RngStream], Sequence[Question]]]
StepHook = Callable[[int, torch.Tensor], None]
# a custom objective f(x_clean, x_adv, questions) -> scalar stands in for a LossSpec
Objective = Union[LossSpec, Callable[[torch.Tensor, torch.Tensor, Sequence[Question]], torch.Tensor]]


@dataclass(frozen=True)
class SgaConfig:
    batch_size: int = 10
    resample_every_step: bool = True

    def __post_init__(self):
        if self.batch_size < 1:
            raise ContractError("sga batch size must be >= 1")


@dataclass(frozen=True)
class AttackConfig:
    method: str = "pgd"
    steps: int = 20
    alpha: float = 2 / 255
    eps: float = 8 / 255
    c: float | None = None
    confidence: float = 0.0
    random_init: bool = True
    sga: SgaConfig | None = None
    momentum: float = 0.0
    di_prob: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractError(f"unknown attack method {self.method!r}; expected one of {METHODS}")
        if self.steps < 0:
            raise ContractError("steps must be >= 0")
        if self.eps < 0:
            raise ContractError("eps must be >= 0")
        if self.method != "fgsm" and self.alpha <= 0:
            raise ContractError("alpha must be > 0 for iterative methods")
        if self.c is not None and self.c < 0:
            raise ContractError("cw constant c must be >= 0")
        if self.confidence < 0:
            raise ContractError("confidence must be >= 0")
        if self.momentum < 0:
            raise ContractError("momentum must be >= 0")
        if not 0.0 <= self.di_prob <= 1.0:
            raise ContractError("diverse-input probability must lie in [0, 1]")

    @classmethod
    def for_method(cls, method: str, **overrides) -> "AttackConfig":
        """Defaults per method: PGD n=20, a=2/255; CW n=50, a=0.01; FGSM one step."""
        base = {"fgsm": {"steps": 1, "random_init": False},
                "pgd": {},
                "cw": {"steps": 50, "alpha": 0.01}}[method]
        return cls(method=method, **{**base, **overrides})

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "AttackConfig":
        d = dict(d)
        if d.get("sga") is not None:
            d["sga"] = SgaConfig(**d["sga"])
        return cls(**d)


@dataclass
class AdversarialExample:
    clean: torch.Tensor
    adversarial: torch.Tensor
    config: AttackConfig
    loss: LossSpec | None
    question_ids: list[list[str]]  # one list per optimization step
    loss_trace: list[float]
    final_loss: float
    counters: dict = field(default_factory=dict)
    wall_time: float = 0.0

    @property
    def linf(self) -> float:
        return float((self.adversarial - self.clean).abs().max())

    @property
    def l2(self) -> float:
        return float(((self.adversarial - self.clean) ** 2).sum().sqrt())

    def sidecar(self) -> dict:
        """Deterministic JSON description (wall time is kept out on purpose)."""
        return {
            "config": self.config.to_json(),
            "loss": asdict(self.loss) if self.loss is not None else None,
            "question_ids": self.question_ids,
            "loss_trace": self.loss_trace,
            "final_loss": self.final_loss,
            "counters": self.counters,
            "linf": self.linf,
            "l2": self.l2,
        }


# ------------------------------------------------------------ primitives


def project_linf(x_adv: torch.Tensor, x_clean: torch.Tensor, eps: float) -> torch.Tensor:
    if eps < 0:
        raise ContractError("eps must be >= 0")
    if x_adv.shape != x_clean.shape:
        raise ContractError("x_adv and x_clean differ in shape")
    lo = (x_clean - eps).clamp(min=0.0)
    hi = (x_clean + eps).clamp(max=1.0)
    return torch.minimum(torch.maximum(x_adv, lo), hi)


def momentum_update(g_accum: torch.Tensor, g: torch.Tensor, m: float,
                    delta: float = 1e-12) -> torch.Tensor:
    if m < 0:
        raise ContractError("momentum must be >= 0")
    norm = max(float(g.abs().sum()), delta)
    return m * g_accum + g / norm


def diverse_input(x: torch.Tensor, p: float, rng: RngStream) -> torch.Tensor:
    """Random nearest-neighbour shrink to [0.8H, H] and zero-pad back, with probability p.

    Works on ``[..., H, W, C]``; one draw covers the whole batch.
    """
    if not 0.0 <= p <= 1.0:
        raise ContractError("diverse-input probability must lie in [0, 1]")
    if p == 0.0:
        return x
    if float(rng.random()) >= p:
        return x
    h, w = x.shape[-3], x.shape[-2]
    size = int(rng.integers(math.ceil(0.8 * h), h + 1))
    oy = int(rng.integers(0, h - size + 1))
    ox = int(rng.integers(0, w - size + 1))
    rows = torch.arange(size) * h // size
    cols = torch.arange(size) * w // size
    small = x.index_select(-3, rows).index_select(-2, cols)
    out = torch.zeros_like(x)
    out[..., oy:oy + size, ox:ox + size, :] = small
    return out


# ------------------------------------------------------------ internals


def _draw(source: QuestionSource, rng: RngStream) -> list[Question]:
    qs = list(source(rng)) if callable(source) else list(source)
    if not qs:
        raise ContractError("question provider yielded no questions")
    return qs


def _prepare(model, x) -> torch.Tensor:
    x = torch.as_tensor(x)
    if model is not None:
        x = x.to(next(model.parameters()).dtype)
    return x.detach()


class _Step:
    """Loss value and gradient at one iterate, with counter bookkeeping."""

    def __init__(self, model, x, spec: Objective, config: AttackConfig, rng: RngStream):
        self.model, self.x, self.spec, self.config, self.rng = model, x, spec, config, rng
        self.custom = not isinstance(spec, LossSpec)
        self.cache = None if self.custom else losses.CleanCache(model, x)

    def value(self, x_adv, questions, transform=None):
        if self.custom:
            z = transform(x_adv) if transform is not None else x_adv
            return self.spec(self.x, z, questions)
        return losses.aggregate_questions(self.model, self.x, x_adv, questions, self.spec,
                                          self.cache, transform)

    def __call__(self, x_adv, questions):
        transform = None
        if self.config.di_prob > 0:
            p, rng = self.config.di_prob, self.rng
            transform = lambda t: diverse_input(t, p, rng)  # noqa: E731
        value, g = value_and_grad(lambda z: self.value(z, questions, transform), x_adv)
        if self.model is not None:
            self.model.counters.align_backward += len(questions)
            if not self.custom and self.spec.uses_decoder:
                self.model.counters.decoder_backward += len(questions)
        return value, g


def _begin(model):
    if model is not None:
        model.counters = toyvlm.Counters()
    return time.perf_counter()


def _finish(model, t0, clean, adv, config, spec, qids, trace, final_loss):
    counters = model.counters.as_dict() if model is not None else toyvlm.Counters().as_dict()
    return AdversarialExample(
        clean=clean, adversarial=adv.detach(), config=config,
        loss=spec if isinstance(spec, LossSpec) else None,
        question_ids=qids, loss_trace=trace, final_loss=final_loss,
        counters=counters, wall_time=time.perf_counter() - t0,
    )


def _ids(qs: Sequence[Question]) -> list[str]:
    return [q.question_id for q in losses.canonical_order(qs)]


# ------------------------------------------------------------- attacks


def fgsm(model, spec: Objective, x, questions: QuestionSource, config: AttackConfig,
         rng: RngStream | None = None) -> AdversarialExample:
    """One signed-gradient step of size eps from the clean image."""
    if config.eps <= 0:
        raise ContractError("fgsm needs eps > 0")
    rng = rng if rng is not None else RngStream(config.seed)
    x = _prepare(model, x)
    t0 = _begin(model)
    qs = _draw(questions, rng)
    value, g = _Step(model, x, spec, config, rng)(x, qs)
    adv = project_linf(x + config.eps * sign(g), x, config.eps)
    return _finish(model, t0, x, adv, config, spec, [_ids(qs)], [float(value)], float(value))


def pgd(model, spec: Objective, x, questions: QuestionSource, config: AttackConfig,
        rng: RngStream | None = None, on_step: StepHook | None = None) -> AdversarialExample:
    """Iterated signed-gradient ascent projected onto the eps ball.

    ``on_step(k, x_adv)`` sees every iterate, starting with the initial point.
    """
    rng = rng if rng is not None else RngStream(config.seed)
    x = _prepare(model, x)
    t0 = _begin(model)
    adv = x.clone()
    if config.random_init and config.eps > 0:
        noise = rng_uniform(rng, -config.eps, config.eps, x.shape, x.dtype)
        adv = project_linf(x + noise, x, config.eps)
    if on_step:
        on_step(0, adv)
    step = _Step(model, x, spec, config, rng)
    qs = _draw(questions, rng) if config.steps else []
    g_accum = torch.zeros_like(x)
    qids, trace = [], []
    for k in range(config.steps):
        if k > 0 and config.sga is not None and config.sga.resample_every_step:
            qs = _draw(questions, rng)
        value, g = step(adv, qs)
        if config.momentum > 0:
            g_accum = momentum_update(g_accum, g, config.momentum)
            g = g_accum
        adv = project_linf(adv + config.alpha * sign(g), x, config.eps)
        qids.append(_ids(qs))
        trace.append(float(value))
        if on_step:
            on_step(k + 1, adv)
    final = trace[-1] if trace else 0.0
    return _finish(model, t0, x, adv, config, spec, qids, trace, final)


def cw(model, spec: Objective, x, questions: QuestionSource, config: AttackConfig,
       rng: RngStream | None = None, on_step: StepHook | None = None) -> AdversarialExample:
    """Maximize ``L - c * ||x' - x||^2`` with Adam-scaled ascent steps of size alpha.

    No l-infinity projection, only the [0, 1] clamp. The returned image is
    the iterate with the highest objective seen. With ``random_init`` the
    search starts from uniform noise of radius eps: feature-MSE objectives
    have a zero gradient at the clean image and would never leave it.
    """
    rng = rng if rng is not None else RngStream(config.seed)
    x = _prepare(model, x)
    if isinstance(spec, LossSpec):
        c = config.c if config.c is not None else spec.cw_c
        spec = LossSpec(spec.kind, cw=True, c=c, confidence=config.confidence or spec.confidence)
    else:
        if config.c is None:
            raise ContractError("a custom cw objective needs an explicit c")
        base, c = spec, config.c
        spec = lambda xc, xa, qs: losses.cw_objective(base(xc, xa, qs), xc, xa, c)  # noqa: E731
    t0 = _begin(model)
    step = _Step(model, x, spec, config, rng)
    adv = x.clone()
    if config.random_init and config.eps > 0:
        adv = (x + rng_uniform(rng, -config.eps, config.eps, x.shape, x.dtype)).clamp(0.0, 1.0)
    m1 = torch.zeros_like(x)
    m2 = torch.zeros_like(x)
    b1, b2, tiny = 0.9, 0.999, 1e-8
    best, best_val = adv, -math.inf
    qids, trace = [], []
    qs = _draw(questions, rng) if config.steps else []
    if on_step:
        on_step(0, adv)
    for k in range(config.steps):
        if k > 0 and config.sga is not None and config.sga.resample_every_step:
            qs = _draw(questions, rng)
        value, g = step(adv, qs)
        if float(value) > best_val:
            best, best_val = adv, float(value)
        m1 = b1 * m1 + (1 - b1) * g
        m2 = b2 * m2 + (1 - b2) * g * g
        m1_hat = m1 / (1 - b1 ** (k + 1))
        m2_hat = m2 / (1 - b2 ** (k + 1))
        adv = (adv + config.alpha * m1_hat / (m2_hat.sqrt() + tiny)).clamp(0.0, 1.0)
        qids.append(_ids(qs))
        trace.append(float(value))
        if on_step:
            on_step(k + 1, adv)
    if config.steps:
        # score the last iterate too, so it can win
        with torch.no_grad():
            last = float(step.value(adv, qs))
        if last > best_val:
            best, best_val = adv, last
    else:
        with torch.no_grad():
            best_val = float(step.value(adv, _draw(questions, rng)))
    return _finish(model, t0, x, best, config, spec, qids, trace, best_val)


def run_attack(model, spec: Objective, x, questions: QuestionSource, config: AttackConfig,
               rng: RngStream | None = None, on_step: StepHook | None = None
               ) -> AdversarialExample:
    if config.method == "fgsm":
        return fgsm(model, spec, x, questions, config, rng)
    if config.method == "pgd":
        return pgd(model, spec, x, questions, config, rng, on_step)
    return cw(model, spec, x, questions, config, rng, on_step)
