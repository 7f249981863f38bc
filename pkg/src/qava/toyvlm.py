"""A miniature vision-language model: patch encoder, question-guided
alignment module with learnable queries, and a small transformer answer
decoder over a closed single-token answer vocabulary.

All forward functions accept a leading batch axis. Images are laid out
``[..., H, W, C]`` with values in [0, 1].
"""
from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import synth
from .numcore import ContractError, RngStream, load_qtns, qtns_dumps

log = logging.getLogger(__name__)

PAD_ID = 0
UNK_ID = 1


@dataclass(frozen=True)
class ModelConfig:
    image_size: int = 32
    patch: int = 8
    channels: int = 3
    d_vision: int = 48
    vision_heads: int = 2
    vision_layers: int = 2
    align_layers: int = 2
    num_queries: int = 8
    feature_dim: int = 32
    align_heads: int = 2
    d_lm: int = 64
    lm_heads: int = 4
    lm_layers: int = 2
    max_question_len: int = 12
    vocab: tuple[str, ...] = synth.VOCAB
    answers: tuple[str, ...] = synth.ANSWERS

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch) ** 2

    @property
    def num_tokens(self) -> int:
        return self.num_patches + 1

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        for k in ("vocab", "answers"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class Counters:
    """Per-question forward/backward tallies for the alignment module and decoder."""

    align_forward: int = 0
    align_backward: int = 0
    decoder_forward: int = 0
    decoder_backward: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class AlignmentFeatures:
    per_layer: list[torch.Tensor]

    @property
    def final(self) -> torch.Tensor:
        return self.per_layer[-1]


# ------------------------------------------------------------- tokenizer

_WORD = re.compile(r"[a-z0-9]+")


def tokenize(text: str, config: ModelConfig) -> list[int]:
    index = {w: i for i, w in enumerate(config.vocab)}
    ids = [index.get(w, UNK_ID) for w in _WORD.findall(text.lower())]
    ids = ids[: config.max_question_len]
    return ids + [PAD_ID] * (config.max_question_len - len(ids))


def tokenize_many(texts: Sequence[str], config: ModelConfig) -> torch.Tensor:
    return torch.tensor([tokenize(t, config) for t in texts], dtype=torch.long)


# --------------------------------------------------------------- modules


class Attention(nn.Module):
    def __init__(self, d_q: int, d_kv: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(d_q, d_q)
        self.k = nn.Linear(d_kv, d_q)
        self.v = nn.Linear(d_kv, d_q)
        self.o = nn.Linear(d_q, d_q)

    def forward(self, x, ctx, key_valid=None, bias=None):
        b, lq, d = x.shape
        lk = ctx.shape[1]
        h = self.heads
        q = self.q(x).view(b, lq, h, d // h).transpose(1, 2)
        k = self.k(ctx).view(b, lk, h, d // h).transpose(1, 2)
        v = self.v(ctx).view(b, lk, h, d // h).transpose(1, 2)
        scores = q @ k.transpose(-1, -2) / math.sqrt(d // h)
        if bias is not None:
            scores = scores + bias
        if key_valid is not None:
            scores = scores.masked_fill(~key_valid[:, None, None, :], -1e9)
        w = scores.softmax(-1)
        out = (w @ v).transpose(1, 2).reshape(b, lq, d)
        return self.o(out)


class MLP(nn.Module):
    def __init__(self, d: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(d, hidden)
        self.fc2 = nn.Linear(hidden, d)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class SelfBlock(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = Attention(d, d, heads)
        self.ln2 = nn.LayerNorm(d)
        self.mlp = MLP(d, 2 * d)

    def forward(self, x, valid=None):
        h = self.ln1(x)
        x = x + self.attn(h, h, valid)
        return x + self.mlp(self.ln2(x))


class AlignLayer(nn.Module):
    """Self-attention over [queries; question], cross-attention from the
    queries to the image tokens, then a feed-forward on the queries."""

    def __init__(self, d: int, d_vision: int, heads: int, num_queries: int, num_tokens: int):
        super().__init__()
        # learned per-query prior over image tokens
        self.spatial_bias = nn.Parameter(torch.zeros(num_queries, num_tokens))
        self.ln_self = nn.LayerNorm(d)
        self.self_attn = Attention(d, d, heads)
        self.ln_cross = nn.LayerNorm(d)
        self.cross_attn = Attention(d, d_vision, heads)
        self.ln_mlp = nn.LayerNorm(d)
        self.mlp = MLP(d, 2 * d)

    def forward(self, queries, text, text_valid, image_tokens):
        nq = queries.shape[1]
        x = torch.cat([queries, text], 1)
        valid = torch.cat(
            [torch.ones(x.shape[0], nq, dtype=torch.bool), text_valid], 1
        )
        h = self.ln_self(x)
        x = x + self.self_attn(h, h, valid)
        queries, text = x[:, :nq], x[:, nq:]
        queries = queries + self.cross_attn(
            self.ln_cross(queries), image_tokens, bias=self.spatial_bias
        )
        queries = queries + self.mlp(self.ln_mlp(queries))
        return queries, text


class ToyVLM(nn.Module):
    def __init__(self, config: ModelConfig = ModelConfig()):
        super().__init__()
        c = self.config = config
        if c.image_size % c.patch:
            raise ContractError("image_size must be a multiple of patch")
        # vision encoder
        self.patch_embed = nn.Linear(c.patch * c.patch * c.channels, 2 * c.d_vision)
        self.patch_mix = nn.Linear(2 * c.d_vision, c.d_vision)
        self.summary_token = nn.Parameter(torch.zeros(c.d_vision))
        self.vision_pos = nn.Parameter(torch.zeros(c.num_tokens, c.d_vision))
        self.vision_blocks = nn.ModuleList(
            SelfBlock(c.d_vision, c.vision_heads) for _ in range(c.vision_layers)
        )
        self.vision_ln = nn.LayerNorm(c.d_vision)
        # alignment module
        self.queries = nn.Parameter(torch.zeros(c.num_queries, c.feature_dim))
        self.align_embed = nn.Embedding(len(c.vocab), c.feature_dim)
        self.align_pos = nn.Parameter(torch.zeros(c.max_question_len, c.feature_dim))
        self.align_layers = nn.ModuleList(
            AlignLayer(c.feature_dim, c.d_vision, c.align_heads, c.num_queries, c.num_tokens)
            for _ in range(c.align_layers)
        )
        # answer decoder
        self.feature_proj = nn.Linear(c.feature_dim, c.d_lm)
        self.lm_embed = nn.Embedding(len(c.vocab), c.d_lm)
        self.lm_cls = nn.Parameter(torch.zeros(c.d_lm))
        self.lm_pos = nn.Parameter(torch.zeros(1 + c.num_queries + c.max_question_len, c.d_lm))
        self.lm_blocks = nn.ModuleList(
            SelfBlock(c.d_lm, c.lm_heads) for _ in range(c.lm_layers)
        )
        self.lm_ln = nn.LayerNorm(c.d_lm)
        self.head = nn.Linear(c.d_lm, len(c.answers))
        self.counters = Counters()

    # canonical parameter order for init and persistence
    def canonical_names(self) -> list[str]:
        return sorted(self.state_dict().keys())


def _quadrant_prior(c: ModelConfig, strength: float = 4.0) -> torch.Tensor:
    """Query i starts out attending to image quadrant i mod 4."""
    g = c.image_size // c.patch
    bias = torch.zeros(c.num_queries, c.num_tokens)
    for i in range(c.num_queries):
        qr, qc = divmod(i % 4, 2)
        for t in range(g * g):
            r, col = divmod(t, g)
            if (2 * r) // g == qr and (2 * col) // g == qc:
                bias[i, 1 + t] = strength
    return bias


def init_params(model: ToyVLM, rng: RngStream) -> None:
    """Uniform fan-in init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every
    weight-like tensor (fan_in = last dim), zeros for biases, ones/zeros for
    LayerNorm scale/shift. Draws follow sorted parameter names."""
    params = dict(model.named_parameters())
    with torch.no_grad():
        for name in sorted(params):
            p = params[name]
            is_ln = ".ln" in name or name.startswith(("vision_ln", "lm_ln"))
            if is_ln:
                p.fill_(1.0 if name.endswith("weight") else 0.0)
            elif name.endswith("spatial_bias"):
                p.copy_(_quadrant_prior(model.config).to(p.dtype))
            elif name.endswith("bias"):
                p.zero_()
            else:
                bound = 1.0 / math.sqrt(p.shape[-1])
                vals = rng.random(tuple(p.shape)) * 2 * bound - bound
                p.copy_(torch.as_tensor(vals, dtype=p.dtype))


def new_model(config: ModelConfig = ModelConfig(), seed: int = 0,
              dtype: torch.dtype = torch.float32) -> ToyVLM:
    model = ToyVLM(config)
    init_params(model, RngStream(seed))
    model.init_seed = seed
    return model.to(dtype).eval()


# ------------------------------------------------------------ operations


def _check_image(model: ToyVLM, image: torch.Tensor) -> None:
    c = model.config
    if tuple(image.shape[-3:]) != (c.image_size, c.image_size, c.channels):
        raise ContractError(
            f"image shape {tuple(image.shape)} does not match model config "
            f"({c.image_size}, {c.image_size}, {c.channels})"
        )


def encode_image(model: ToyVLM, image: torch.Tensor) -> torch.Tensor:
    """Patch features ``[..., T, d_vision]`` with the summary token first."""
    _check_image(model, image)
    c = model.config
    lead = image.shape[:-3]
    x = image.reshape(-1, c.image_size, c.image_size, c.channels)
    b, g = x.shape[0], c.image_size // c.patch
    patches = (
        x.reshape(b, g, c.patch, g, c.patch, c.channels)
        .permute(0, 1, 3, 2, 4, 5)
        .reshape(b, g * g, c.patch * c.patch * c.channels)
    )
    tokens = model.patch_mix(F.gelu(model.patch_embed(patches * 2 - 1)))
    summary = model.summary_token.expand(b, 1, c.d_vision)
    tokens = torch.cat([summary, tokens], 1) + model.vision_pos
    for blk in model.vision_blocks:
        tokens = blk(tokens)
    tokens = model.vision_ln(tokens)
    return tokens.reshape(*lead, c.num_tokens, c.d_vision)


def align(model: ToyVLM, patch_features: torch.Tensor,
          question: torch.Tensor) -> AlignmentFeatures:
    """Question-guided query features, one ``[num_queries, feature_dim]``
    matrix per alignment layer (leading batch axes preserved).

    ``patch_features`` is ``[B, T, d]`` and ``question`` is ``[B, L]`` token ids
    (or unbatched ``[T, d]`` / ``[L]``).
    """
    c = model.config
    unbatched = patch_features.dim() == 2
    if unbatched:
        patch_features = patch_features[None]
        question = question[None]
    if question.shape[-1] != c.max_question_len:
        raise ContractError("question tokens must be padded to max_question_len")
    if patch_features.shape[0] != question.shape[0]:
        raise ContractError("patch features and questions must pair one-to-one")
    b = question.shape[0]
    model.counters.align_forward += b
    valid = question != PAD_ID
    text = model.align_embed(question) + model.align_pos
    queries = model.queries.expand(b, -1, -1)
    outs = []
    for layer in model.align_layers:
        queries, text = layer(queries, text, valid, patch_features)
        outs.append(queries)
    if unbatched:
        outs = [o[0] for o in outs]
    return AlignmentFeatures(outs)


def answer_logits(model: ToyVLM, features: AlignmentFeatures | torch.Tensor,
                  question: torch.Tensor) -> torch.Tensor:
    final = features.final if isinstance(features, AlignmentFeatures) else features
    unbatched = final.dim() == 2
    if unbatched:
        final = final[None]
        question = question[None]
    b = final.shape[0]
    model.counters.decoder_forward += b
    c = model.config
    cls = model.lm_cls.expand(b, 1, c.d_lm)
    x = torch.cat([cls, model.feature_proj(final), model.lm_embed(question)], 1) + model.lm_pos
    valid = torch.cat(
        [torch.ones(b, 1 + c.num_queries, dtype=torch.bool), question != PAD_ID], 1
    )
    for blk in model.lm_blocks:
        x = blk(x, valid)
    logits = model.head(model.lm_ln(x[:, 0]))
    return logits[0] if unbatched else logits


def greedy(logits: torch.Tensor) -> torch.Tensor:
    # torch.argmax returns the first maximal index, i.e. ties go to the lowest id
    return logits.argmax(-1)


def decode_answer(model: ToyVLM, features, question) -> tuple[torch.Tensor, str | list[str]]:
    logits = answer_logits(model, features, question)
    ids = greedy(logits)
    if ids.dim() == 0:
        return logits, model.config.answers[int(ids)]
    return logits, [model.config.answers[int(i)] for i in ids]


def _pairs(model: ToyVLM, image: torch.Tensor, question: torch.Tensor):
    """Broadcast image(s) against question token rows into aligned batches."""
    feats = encode_image(model, image)
    if feats.dim() == 2:
        feats = feats[None]
    if question.dim() == 1:
        question = question[None]
    nb, nq = feats.shape[0], question.shape[0]
    if nb == nq:
        return feats, question
    if nb == 1:
        return feats.expand(nq, -1, -1), question
    if nq == 1:
        return feats, question.expand(nb, -1)
    raise ContractError("image and question batches cannot be paired")


def features_for(model: ToyVLM, image, question) -> AlignmentFeatures:
    feats, q = _pairs(model, image, question)
    return align(model, feats, q)


def forward_logits(model: ToyVLM, image, question) -> torch.Tensor:
    feats, q = _pairs(model, image, question)
    return answer_logits(model, align(model, feats, q), q)


def answer_ids(model: ToyVLM, answers: Sequence[str]) -> torch.Tensor:
    index = {a: i for i, a in enumerate(model.config.answers)}
    ids = [index.get(a, -1) for a in answers]
    return torch.tensor(ids, dtype=torch.long)


def lm_loss(model: ToyVLM, image, question, label) -> torch.Tensor:
    """Mean cross-entropy of the label answer token(s) under the decoder."""
    label = torch.as_tensor(label, dtype=torch.long).reshape(-1)
    n_ans = len(model.config.answers)
    if ((label < 0) | (label >= n_ans)).any():
        raise ContractError(f"label id out of answer vocabulary (size {n_ans})")
    logits = forward_logits(model, image, question)
    if logits.dim() == 1:
        logits = logits[None]
    if label.numel() == 1 and logits.shape[0] > 1:
        label = label.expand(logits.shape[0])
    return F.cross_entropy(logits, label)


@torch.no_grad()
def pseudo_label(model: ToyVLM, image, question) -> torch.Tensor:
    """Greedy answer ids on the clean image, used as L_LLM targets."""
    return greedy(forward_logits(model, image, question))


@torch.no_grad()
def answer_questions(model: ToyVLM, image, texts: Sequence[str]) -> list[str]:
    tokens = tokenize_many(texts, model.config)
    image = torch.as_tensor(image).to(next(model.parameters()).dtype)
    ids = greedy(forward_logits(model, image, tokens))
    return [model.config.answers[int(i)] for i in ids.reshape(-1)]


# ----------------------------------------------------------- VQG stub


def generate_questions(model: ToyVLM, image, count: int, image_id: str | None = None):
    """Template questions filled from the model's own perception of the image.

    Probes which shapes and colors the model sees, then emits questions
    about those attributes; deterministic for a fixed checkpoint and image.
    """
    from .questions import Question

    if count < 0:
        raise ContractError("question count must be >= 0")
    if count == 0:
        return []
    probes = [f"is there a {s}" for s in synth.SHAPES] + [
        f"are there any {c} shapes" for c in synth.SHAPE_COLORS
    ]
    said = answer_questions(model, image, probes)
    shapes = [s for s, a in zip(synth.SHAPES, said) if a == "yes"]
    colors = [c for c, a in zip(synth.SHAPE_COLORS, said[len(synth.SHAPES):]) if a == "yes"]
    candidates = []
    for c in colors:
        for s in shapes:
            candidates.append((f"is there a {c} {s}", "yes/no"))
    for c in colors:
        candidates.append((f"how many {c} shapes are there", "number"))
    for s in shapes:
        candidates.append((f"how many {synth.PLURAL[s]} are there", "number"))
    candidates += [
        ("how many shapes are there", "number"),
        ("what color is the background", "other"),
        ("what is the color of the background", "other"),
    ]
    candidates += [(f"what shape is in the {p}", "other") for p in synth.POSITIONS]
    candidates += [(f"what color is the shape in the {p}", "other") for p in synth.POSITIONS]
    candidates += [(f"is there a {s}", "yes/no") for s in synth.SHAPES]
    candidates += [(f"are there any {c} shapes", "yes/no") for c in synth.SHAPE_COLORS]
    seen, uniq = set(), []
    for text, kind in candidates:
        if text not in seen:
            seen.add(text)
            uniq.append((text, kind))
    tag = image_id or "img"
    return [
        Question(question_id=f"vqg-{tag}-{i}", image_id=image_id, text=t,
                 answer_type=k, ground_truths=[])
        for i, (t, k) in enumerate(uniq[:count])
    ]


# -------------------------------------------------------------- training


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 16
    batch_size: int = 64
    lr: float = 5e-4
    weight_decay: float = 0.0
    target_accuracy: float = 90.0
    holdout_fraction: float = 0.1
    min_epochs: int = 10
    log_every: int = 1
    model: ModelConfig = field(default_factory=ModelConfig)


def _stack_records(records, config: ModelConfig):
    images = torch.stack([torch.as_tensor(r.image, dtype=torch.float32) for r in records])
    tokens = tokenize_many([r.question.text for r in records], config)
    index = {a: i for i, a in enumerate(config.answers)}
    labels = torch.tensor(
        [index[r.question.ground_truths[0]] for r in records], dtype=torch.long
    )
    return images, tokens, labels


@torch.no_grad()
def _accuracy(model, images, tokens, labels, chunk=512) -> tuple[float, float]:
    correct, loss = 0, 0.0
    for s in range(0, len(labels), chunk):
        logits = forward_logits(model, images[s:s + chunk], tokens[s:s + chunk])
        correct += int((greedy(logits) == labels[s:s + chunk]).sum())
        loss += float(F.cross_entropy(logits, labels[s:s + chunk], reduction="sum"))
    return 100.0 * correct / len(labels), loss / len(labels)


def split_by_image(records, fraction: float, rng: RngStream):
    ids = sorted({r.image_id for r in records})
    perm = rng.permutation(len(ids))
    n_hold = max(1, int(round(fraction * len(ids))))
    held = {ids[i] for i in perm[:n_hold]}
    train = [r for r in records if r.image_id not in held]
    hold = [r for r in records if r.image_id in held]
    return train, hold


def train_toy(records, cfg: TrainConfig, rng: RngStream, heldout=None):
    """Fit a fresh model on synthetic VQA records.

    Returns ``(model, metrics)``. Raises :class:`TrainingError` if the
    held-out accuracy target is not reached within the epoch budget.
    """
    torch.set_num_threads(1)
    init_seed = int(rng.integers(0, 2**63))
    model = new_model(cfg.model, seed=init_seed).train()
    if heldout is None:
        records, heldout = split_by_image(records, cfg.holdout_fraction, rng)
    images, tokens, labels = _stack_records(records, cfg.model)
    h_images, h_tokens, h_labels = _stack_records(heldout, cfg.model)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    n = len(labels)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda s: min(1.0, (s + 1) / steps_per_epoch) * 0.5 * (1 + math.cos(math.pi * s / total))
    )
    curve = []
    acc = 0.0
    for epoch in range(cfg.epochs):
        model.train()
        perm = torch.as_tensor(rng.permutation(n))
        for s in range(0, n, cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            logits = forward_logits(model, images[idx], tokens[idx])
            loss = F.cross_entropy(logits, labels[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            sched.step()
        model.eval()
        train_acc, train_loss = _accuracy(model, images, tokens, labels)
        acc, h_loss = _accuracy(model, h_images, h_tokens, h_labels)
        curve.append({"epoch": epoch + 1, "train_loss": round(train_loss, 6),
                      "train_acc": round(train_acc, 4), "heldout_acc": round(acc, 4)})
        if (epoch + 1) % cfg.log_every == 0:
            log.info("epoch %d loss %.4f train %.2f heldout %.2f",
                     epoch + 1, train_loss, train_acc, acc)
        if epoch + 1 >= cfg.min_epochs and acc >= cfg.target_accuracy and train_acc >= 99.0:
            break
    model.counters = Counters()
    metrics = {"heldout_accuracy": round(acc, 4), "epochs": len(curve), "curve": curve,
               "train_records": n, "heldout_records": len(h_labels)}
    model.init_seed = init_seed
    model.metrics = metrics
    model.eval()
    if acc < cfg.target_accuracy:
        raise TrainingError(
            f"held-out accuracy {acc:.2f} below target {cfg.target_accuracy:.2f}"
        )
    return model, metrics


# ----------------------------------------------------------- checkpoints


def _param_file(name: str) -> str:
    return name + ".qtns"


def save_checkpoint(model: ToyVLM, path, name: str | None = None, extra: dict | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    names = model.canonical_names()
    for n in names:
        (path / _param_file(n)).write_bytes(qtns_dumps(state[n].to(torch.float32)))
    manifest = {
        "name": name or path.name,
        "config": asdict(model.config),
        "parameters": names,
        "init": "uniform fan-in, PCG64",
        "seed": getattr(model, "init_seed", None),
        "metrics": getattr(model, "metrics", None),
    }
    if extra:
        manifest.update(extra)
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_checkpoint(path, dtype: torch.dtype = torch.float32) -> ToyVLM:
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    config = ModelConfig.from_dict(manifest["config"])
    model = ToyVLM(config)
    state = {n: load_qtns(path / _param_file(n)) for n in manifest["parameters"]}
    model.load_state_dict(state)
    model.init_seed = manifest.get("seed")
    model.metrics = manifest.get("metrics")
    model.name = manifest.get("name", path.name)
    model.manifest = manifest
    return model.to(dtype).eval()
