"""Synthetic scenes of colored shapes and the question template grammar.

A scene is a background color plus one to four shapes, each sitting in
its own quadrant of the image. Every template yields a single-token
answer from :data:`ANSWERS`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numcore import RngStream

SHAPE_COLORS = {
    "red": (0.90, 0.10, 0.10),
    "green": (0.10, 0.80, 0.20),
    "blue": (0.15, 0.25, 0.95),
    "yellow": (0.95, 0.90, 0.10),
    "purple": (0.60, 0.15, 0.75),
    "cyan": (0.10, 0.85, 0.90),
}
BACKGROUNDS = {
    "black": (0.05, 0.05, 0.05),
    "white": (0.95, 0.95, 0.95),
    "gray": (0.50, 0.50, 0.50),
}
SHAPES = ("circle", "square", "triangle")
PLURAL = {"circle": "circles", "square": "squares", "triangle": "triangles"}
POSITIONS = ("top left", "top right", "bottom left", "bottom right")

ANSWERS = (
    tuple(SHAPE_COLORS)
    + tuple(BACKGROUNDS)
    + SHAPES
    + ("0", "1", "2", "3", "4", "yes", "no")
)

IMAGE_SIZE = 32
NOISE = 0.03


@dataclass(frozen=True)
class Item:
    shape: str
    color: str
    position: str


@dataclass(frozen=True)
class Scene:
    background: str
    items: tuple[Item, ...]

    def at(self, position: str) -> Item | None:
        for it in self.items:
            if it.position == position:
                return it
        return None


@dataclass(frozen=True)
class TemplateQuestion:
    text: str
    answer: str
    answer_type: str  # "yes/no" | "number" | "other"


def random_scene(rng: RngStream) -> Scene:
    bg = list(BACKGROUNDS)[int(rng.integers(0, len(BACKGROUNDS)))]
    k = int(rng.integers(1, 5))
    slots = sorted(int(i) for i in rng.choice(4, k, replace=False))
    items = []
    for s in slots:
        shape = SHAPES[int(rng.integers(0, len(SHAPES)))]
        color = list(SHAPE_COLORS)[int(rng.integers(0, len(SHAPE_COLORS)))]
        items.append(Item(shape, color, POSITIONS[s]))
    return Scene(bg, tuple(items))


def render(scene: Scene, rng: RngStream, size: int = IMAGE_SIZE) -> np.ndarray:
    """Rasterize a scene into an H x W x 3 float64 array in [0, 1]."""
    img = np.empty((size, size, 3))
    img[:] = BACKGROUNDS[scene.background]
    half = size / 2
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    for it in scene.items:
        # each shape fills one of the four patch-sized cells of its quadrant
        qi = POSITIONS.index(it.position)
        cell = int(rng.integers(0, 4))
        quarter = half / 2
        cy = (qi // 2) * half + (cell // 2) * quarter + quarter / 2 + rng.random() - 0.5
        cx = (qi % 2) * half + (cell % 2) * quarter + quarter / 2 + rng.random() - 0.5
        r = quarter * (0.36 + 0.08 * rng.random())
        dy, dx = yy - cy, xx - cx
        if it.shape == "circle":
            mask = dx**2 + dy**2 <= r**2
        elif it.shape == "square":
            mask = np.maximum(np.abs(dx), np.abs(dy)) <= 0.85 * r
        else:
            mask = (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2)
        img[mask] = SHAPE_COLORS[it.color]
    img += (rng.random(img.shape) * 2 - 1) * NOISE
    return np.clip(img, 0.0, 1.0)


def _yn(b: bool) -> str:
    return "yes" if b else "no"


def all_questions(scene: Scene) -> list[TemplateQuestion]:
    """Every template question that is well-posed for ``scene``, in a fixed order."""
    shapes = {it.shape for it in scene.items}
    colors = {it.color for it in scene.items}
    pairs = {(it.color, it.shape) for it in scene.items}
    out: list[TemplateQuestion] = []
    add = lambda t, a, k: out.append(TemplateQuestion(t, a, k))  # noqa: E731

    add("how many shapes are there", str(len(scene.items)), "number")
    for c in SHAPE_COLORS:
        n = sum(it.color == c for it in scene.items)
        add(f"how many {c} shapes are there", str(n), "number")
    for s in SHAPES:
        n = sum(it.shape == s for it in scene.items)
        add(f"how many {PLURAL[s]} are there", str(n), "number")
    for s in SHAPES:
        add(f"is there a {s}", _yn(s in shapes), "yes/no")
        add(f"does the image contain a {s}", _yn(s in shapes), "yes/no")
    for c in SHAPE_COLORS:
        add(f"are there any {c} shapes", _yn(c in colors), "yes/no")
        for s in SHAPES:
            add(f"is there a {c} {s}", _yn((c, s) in pairs), "yes/no")
    for b in BACKGROUNDS:
        add(f"is the background {b}", _yn(b == scene.background), "yes/no")
    add("what color is the background", scene.background, "other")
    add("what is the color of the background", scene.background, "other")
    if len(scene.items) == 1:
        add("what color is the shape", scene.items[0].color, "other")
    for it in scene.items:
        add(f"what color is the shape in the {it.position}", it.color, "other")
        add(f"what shape is in the {it.position}", it.shape, "other")
        for c in SHAPE_COLORS:
            add(f"is the shape in the {it.position} {c}", _yn(c == it.color), "yes/no")
    return out


def pick_questions(scene: Scene, n: int, rng: RngStream) -> list[TemplateQuestion]:
    """Sample up to ``n`` distinct questions, balanced across answer types
    and, within yes/no, across the two answers."""
    pool = all_questions(scene)
    buckets: dict[str, list[TemplateQuestion]] = {
        "other": [], "number": [], "yes": [], "no": []
    }
    for q in pool:
        key = q.answer if q.answer_type == "yes/no" else q.answer_type
        buckets[key].append(q)
    order = {k: [v[i] for i in rng.permutation(len(v))] for k, v in buckets.items()}
    picked: list[TemplateQuestion] = []
    cycle = ("other", "number", "yes", "no", "other", "number")
    while len(picked) < min(n, len(pool)):
        for k in cycle:
            if order[k] and len(picked) < n:
                picked.append(order[k].pop())
    return picked


# Words the toy tokenizer knows. Index 0 is padding, 1 is unknown.
VOCAB = (
    "<pad>", "<unk>",
    "what", "color", "is", "the", "shape", "shapes", "in", "of", "top", "bottom",
    "left", "right", "background", "how", "many", "are", "there", "a", "any",
    "does", "image", "contain",
    *SHAPES, *PLURAL.values(), *SHAPE_COLORS, *BACKGROUNDS,
    "this", "on", "kind", "type", "where", "which", "who", "why", "man", "woman",
    "person", "people", "doing", "animal", "sport", "room", "it", "do", "you",
    "can", "number", "name", "time", "he", "that", "an",
)
