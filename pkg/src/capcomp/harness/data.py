"""Synthetic grid-world scenes, questions with unique answers, and ground-truth captions."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .. import vocab
from ..lvlm import ToyImage
from ..vocab import COLORS, KINDS

GRID = 4
CELL_PX = 4
QTYPES = ("exist", "color", "count", "relative")
SPLITS = ("pretrain", "train", "eval")
EVAL_BUCKET = 0
N_BUCKETS = 10
CAPTION_BUDGET = 2  # objects per caption

RGB = {"red": (1.0, 0.0, 0.0), "green": (0.0, 1.0, 0.0), "blue": (0.0, 0.0, 1.0),
       "yellow": (1.0, 1.0, 0.0)}
# 4x4 silhouettes, one per kind
MASKS = {
    "square": np.array([[1, 1, 1, 1], [1, 0, 0, 1], [1, 0, 0, 1], [1, 1, 1, 1]]),
    "circle": np.array([[0, 1, 1, 0], [1, 1, 1, 1], [1, 1, 1, 1], [0, 1, 1, 0]]),
    "cross": np.array([[1, 0, 0, 1], [0, 1, 1, 0], [0, 1, 1, 0], [1, 0, 0, 1]]),
    "triangle": np.array([[0, 0, 0, 1], [0, 0, 1, 1], [0, 1, 1, 1], [1, 1, 1, 1]]),
}


@dataclass(frozen=True)
class Shape:
    color: str
    kind: str
    cell: int

    @property
    def row(self) -> int:
        return self.cell // GRID

    @property
    def col(self) -> int:
        return self.cell % GRID

    def words(self) -> list[str]:
        return [self.color, self.kind, f"c{self.cell}"]


@dataclass
class SyntheticSample:
    sample_id: str
    scene: tuple  # Shapes in raster order
    image: ToyImage
    question: list
    answer: list
    qtype: str
    relevant: tuple = field(default_factory=tuple)  # cells the question is about

    def to_json(self) -> dict:
        return {"sample_id": self.sample_id, "qtype": self.qtype,
                "scene": [[s.color, s.kind, s.cell] for s in self.scene],
                "question": list(self.question), "answer": list(self.answer),
                "relevant": list(self.relevant)}

    @classmethod
    def from_json(cls, d: dict) -> "SyntheticSample":
        scene = tuple(Shape(c, k, int(i)) for c, k, i in d["scene"])
        return cls(d["sample_id"], scene, render(scene), [int(t) for t in d["question"]],
                   [int(t) for t in d["answer"]], d["qtype"], tuple(d["relevant"]))


def scene_key(scene) -> str:
    return ";".join(f"{s.color},{s.kind},{s.cell}" for s in sorted(scene, key=lambda s: s.cell))


def scene_bucket(scene) -> int:
    return int(hashlib.sha256(scene_key(scene).encode()).hexdigest(), 16) % N_BUCKETS


def render(scene, noise: float = 0.08) -> ToyImage:
    """Deterministic 16x16 RGB rendering; the noise stream is seeded by the scene itself."""
    seed = int(hashlib.sha256(scene_key(scene).encode()).hexdigest()[:16], 16)
    rng = np.random.default_rng(seed)
    img = rng.uniform(0.0, noise, (GRID * CELL_PX, GRID * CELL_PX, 3))
    for s in scene:
        r, c = s.row * CELL_PX, s.col * CELL_PX
        patch = MASKS[s.kind][..., None] * np.asarray(RGB[s.color]) * (1.0 - noise)
        img[r: r + CELL_PX, c: c + CELL_PX] += patch
    return ToyImage(img)


def random_scene(rng: np.random.Generator, n_min: int = 5, n_max: int = 6) -> tuple:
    n = int(rng.integers(n_min, n_max + 1))
    cells = rng.choice(GRID * GRID, size=n, replace=False)
    combos = rng.choice(len(COLORS) * len(KINDS), size=n, replace=False)
    shapes = [Shape(COLORS[k // len(KINDS)], KINDS[k % len(KINDS)], int(c))
              for c, k in zip(cells, combos)]
    return tuple(sorted(shapes, key=lambda s: s.cell))


# ---------------------------------------------------------------------------
# questions
# ---------------------------------------------------------------------------


def _ask_exist(scene, rng, want_yes: bool):
    present = {(s.color, s.kind) for s in scene}
    pool = sorted(present) if want_yes else sorted(
        (c, k) for c in COLORS for k in KINDS if (c, k) not in present)
    c, k = pool[int(rng.integers(len(pool)))]
    rel = tuple(s.cell for s in scene if s.color == c and s.kind == k)
    return f"is there a {c} {k} ?", "yes" if want_yes else "no", rel


def _ask_color(scene, rng, _):
    kinds = [k for k in KINDS if sum(s.kind == k for s in scene) == 1]
    if not kinds:
        return None
    k = kinds[int(rng.integers(len(kinds)))]
    s = next(s for s in scene if s.kind == k)
    return f"what color is the {k} ?", s.color, (s.cell,)


def _ask_count(scene, rng, target: int):
    colors = [c for c in COLORS if sum(s.color == c for s in scene) == target]
    if not colors:
        return None
    c = colors[int(rng.integers(len(colors)))]
    rel = tuple(s.cell for s in scene if s.color == c)
    return f"how many {c} shapes ?", str(target), rel


def _ask_relative(scene, rng, want_yes: bool):
    side = ("left", "top")[int(rng.integers(2))]
    key = (lambda s: s.col) if side == "left" else (lambda s: s.row)
    pool = [s for s in scene if (key(s) < GRID // 2) == want_yes]
    if not pool:
        return None
    a = pool[int(rng.integers(len(pool)))]
    return f"is the {a.color} {a.kind} in the {side} half ?", "yes" if want_yes else "no", (a.cell,)


def make_question(scene, qtype: str, variant: int, rng: np.random.Generator):
    """(question ids, answer ids, relevant cells) or None if the scene cannot host it."""
    if qtype == "exist":
        out = _ask_exist(scene, rng, variant % 2 == 0)
    elif qtype == "color":
        out = _ask_color(scene, rng, None)
    elif qtype == "count":
        out = _ask_count(scene, rng, variant % 3)
    else:
        out = _ask_relative(scene, rng, variant % 2 == 0)
    if out is None:
        return None
    text, ans, rel = out
    return vocab.encode(text), vocab.encode([ans]) + [vocab.EOS], rel


def gen_synthetic_dataset(seed: int, n: int, split: str = "train") -> list[SyntheticSample]:
    """``n`` samples with round-robin question types; eval scenes never occur in other splits."""
    if n < 1:
        raise ValueError("n must be at least 1")
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    rng = np.random.default_rng([seed, SPLITS.index(split)])
    out = []
    i = 0
    while len(out) < n:
        qtype = QTYPES[len(out) % len(QTYPES)]
        variant = len(out) // len(QTYPES)
        scene = random_scene(rng)
        i += 1
        if (scene_bucket(scene) == EVAL_BUCKET) != (split == "eval"):
            continue
        made = make_question(scene, qtype, variant, rng)
        if made is None:
            continue
        q, a, rel = made
        out.append(SyntheticSample(f"{split}-{seed}-{len(out)}", scene, render(scene), q, a,
                                   qtype, rel))
    return out


# ---------------------------------------------------------------------------
# ground-truth captions
# ---------------------------------------------------------------------------


def caption_ids(shapes) -> list[int]:
    words = [w for s in shapes for w in s.words()]
    return vocab.encode(words) + [vocab.EOS]


def target_caption(sample: SyntheticSample, visible_cells, guided: bool = True,
                   budget: int = CAPTION_BUDGET) -> list[int]:
    """Describe up to ``budget`` objects sitting in ``visible_cells``.

    Guided captions list the question's objects first, then fill in raster
    order; unguided captions use raster order only.
    """
    visible = set(int(c) for c in visible_cells)
    objs = [s for s in sample.scene if s.cell in visible]
    if guided:
        rel = set(sample.relevant)
        related = _related(sample)
        objs.sort(key=lambda s: (s.cell not in rel, s not in related, s.cell))
    return caption_ids(objs[:budget])


def _related(sample: SyntheticSample) -> set:
    """Objects sharing an attribute named in the question."""
    words = set(vocab.decode(sample.question).split())
    return {s for s in sample.scene if s.color in words or s.kind in words}
