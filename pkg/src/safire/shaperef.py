"""Synthetic referring-segmentation task over colored shapes on a grid.

A scene is a set of non-overlapping flat-colored shapes (square, circle,
triangle) in two sizes and eight colors.  The generator emits (image,
expression, mask) triples in three modes of increasing referential
difficulty:

- ``simple``: one noun phrase, one attribute ("red square").
- ``object_distracting``: several noun phrases appear but exactly one
  object is the referent ("square left of the red circle").
- ``category_implicit``: the subject is a pronoun and the target's
  category token never appears ("it nearest to the large triangle").

Everything is grammar-based with an exhaustive resolver as the semantics
oracle, so uniqueness of the referent is checked by construction rather
than filtered after the fact.  Generation is a pure function of the seed.

Geometry conventions: positions are (row, col) with row 0 at the top;
"above" means a smaller row.  All comparisons use object centers, except
the size comparatives which use exact pixel areas.  Emitted expressions
hold with a margin of at least 2 pixels on the deciding quantity so that
near-ties never decide a label.
"""

from __future__ import annotations

import itertools
import json
import math
import zlib
from collections import namedtuple
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .pnm import read_pgm, read_ppm, write_pgm, write_ppm

# -- vocabulary ----------------------------------------------------------------------

COLOR_NAMES = ("red", "green", "blue", "yellow", "orange", "purple",
               "cyan", "brown")
SHAPE_NAMES = ("square", "circle", "triangle")
SIZE_NAMES = ("small", "large")
SPATIAL_NAMES = ("left", "right", "above", "below", "between", "nearest")
PRONOUN_NAMES = ("it", "he")
CONNECTIVE_NAMES = ("and", "to", "of", "than")

VOCAB = COLOR_NAMES + SHAPE_NAMES + SIZE_NAMES + SPATIAL_NAMES \
    + PRONOUN_NAMES + CONNECTIVE_NAMES
TOKEN_IDS = {name: i for i, name in enumerate(VOCAB)}

_COLORS = frozenset(COLOR_NAMES)
_SHAPES = frozenset(SHAPE_NAMES)
_SIZES = frozenset(SIZE_NAMES)
_PRONOUNS = frozenset(PRONOUN_NAMES)

MODES = ("simple", "object_distracting", "category_implicit")

PALETTE = {
    "red": (0.85, 0.12, 0.12),
    "green": (0.13, 0.65, 0.16),
    "blue": (0.15, 0.30, 0.85),
    "yellow": (0.90, 0.85, 0.10),
    "orange": (0.95, 0.55, 0.10),
    "purple": (0.55, 0.20, 0.70),
    "cyan": (0.10, 0.75, 0.80),
    "brown": (0.50, 0.33, 0.16),
}
BACKGROUND = 0.92

# bounding boxes are even so shapes sit on the 2x2 patch grid
SIZE_BOX = {"small": 4, "large": 6}


class GenerationError(RuntimeError):
    """Rejection-sampling bound exhausted; retry with a different seed."""


class ExpressionError(ValueError):
    """Token sequence not derivable from the expression grammar."""


def tokens_to_text(tokens) -> str:
    return " ".join(VOCAB[t] for t in tokens)


def _token_names(tokens) -> list[str]:
    names = []
    for t in tokens:
        t = int(t)
        if not 0 <= t < len(VOCAB):
            raise ExpressionError(f"token id {t} outside vocabulary")
        names.append(VOCAB[t])
    return names


# -- scenes --------------------------------------------------------------------------


def footprint(shape: str, box: int) -> np.ndarray:
    """Boolean pixel mask of a shape inside its box x box bounding square."""
    i, j = np.indices((box, box))
    if shape == "square":
        return np.ones((box, box), dtype=bool)
    if shape == "circle":
        c = (box - 1) / 2
        r = box / 2 - 0.1
        return (i - c) ** 2 + (j - c) ** 2 <= r * r
    if shape == "triangle":
        # apex at the top center, flat base
        return np.abs(j - (box - 1) / 2) <= (i + 1) / 2
    raise ValueError(f"unknown shape {shape!r}")


_AREAS = {(shape, size): int(footprint(shape, box).sum())
          for shape in SHAPE_NAMES for size, box in SIZE_BOX.items()}


@dataclass(frozen=True)
class SceneObject:
    id: int
    shape: str
    color: str
    size: str
    row: int
    col: int

    @property
    def box(self) -> int:
        return SIZE_BOX[self.size]

    @property
    def center(self) -> tuple[float, float]:
        half = (self.box - 1) / 2
        return (self.row + half, self.col + half)

    @property
    def area(self) -> int:
        return _AREAS[(self.shape, self.size)]


@dataclass(frozen=True)
class Scene:
    image_h: int
    image_w: int
    objects: tuple
    target_id: int | None

    @property
    def target(self) -> SceneObject:
        return self.object_by_id(self.target_id)

    def object_by_id(self, oid) -> SceneObject:
        for o in self.objects:
            if o.id == oid:
                return o
        raise KeyError(f"no object with id {oid}")

    def same_category_count(self) -> int:
        t = self.target
        return sum(1 for o in self.objects
                   if o.shape == t.shape and o.id != t.id)


def scene_to_dict(scene: Scene) -> dict:
    return {
        "image_h": scene.image_h,
        "image_w": scene.image_w,
        "target_id": scene.target_id,
        "objects": [
            {"id": o.id, "shape": o.shape, "color": o.color, "size": o.size,
             "row": o.row, "col": o.col}
            for o in scene.objects
        ],
    }


def scene_from_dict(d: dict) -> Scene:
    objs = tuple(SceneObject(o["id"], o["shape"], o["color"], o["size"],
                             o["row"], o["col"]) for o in d["objects"])
    return Scene(d["image_h"], d["image_w"], objs, d["target_id"])


@dataclass(frozen=True)
class GenConfig:
    """Knobs for scene difficulty; the defaults are the benchmark setting."""

    image_h: int = 32
    image_w: int = 32
    distractor_mean: float = 3.1
    other_max: int = 2
    mode: str = "simple"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        for side in (self.image_h, self.image_w):
            if side < 6 or side % 2:
                raise ValueError(f"canvas sides must be even and >= 6, "
                                 f"got {self.image_h}x{self.image_w}")
        if self.distractor_mean < 0 or self.other_max < 0:
            raise ValueError("counts must be non-negative")


def _separated(r1, c1, b1, r2, c2, b2, gap) -> bool:
    return (r1 + b1 + gap <= r2 or r2 + b2 + gap <= r1
            or c1 + b1 + gap <= c2 or c2 + b2 + gap <= c1)


def gen_scene(seed, config: GenConfig) -> Scene:
    """Place the target, its same-category distractors, then other shapes.

    Object 0 is always the target.  Positions land on even coordinates and
    boxes keep a clearance of at least 2 pixels from each other.  Ambiguous
    modes force at least one same-category distractor; category_implicit
    also needs one other-category object to anchor relations on.  In simple
    mode distractor colors avoid the target's so one attribute can single
    it out.
    """
    rng = np.random.default_rng(seed)
    base = math.floor(config.distractor_mean)
    n_same = base + (1 if rng.random() < config.distractor_mean - base else 0)
    if config.mode != "simple":
        n_same = max(1, n_same)
    n_other = int(rng.integers(0, config.other_max + 1))
    if config.mode == "category_implicit":
        n_other = max(1, n_other)

    t_shape = str(rng.choice(SHAPE_NAMES))
    t_color = str(rng.choice(COLOR_NAMES))
    specs = [(t_shape, t_color, str(rng.choice(SIZE_NAMES)))]
    for _ in range(n_same):
        if config.mode == "simple":
            color = str(rng.choice([c for c in COLOR_NAMES if c != t_color]))
        else:
            color = str(rng.choice(COLOR_NAMES))
        specs.append((t_shape, color, str(rng.choice(SIZE_NAMES))))
    other_shapes = [s for s in SHAPE_NAMES if s != t_shape]
    for _ in range(n_other):
        specs.append((str(rng.choice(other_shapes)),
                      str(rng.choice(COLOR_NAMES)),
                      str(rng.choice(SIZE_NAMES))))

    placed: list[SceneObject] = []
    for idx, (shape, color, size) in enumerate(specs):
        box = SIZE_BOX[size]
        rows = (config.image_h - box) // 2 + 1
        cols = (config.image_w - box) // 2 + 1
        if rows <= 0 or cols <= 0:
            raise GenerationError("canvas too small for the object box")
        for _ in range(1000):
            r = 2 * int(rng.integers(0, rows))
            c = 2 * int(rng.integers(0, cols))
            if all(_separated(r, c, box, o.row, o.col, o.box, 2)
                   for o in placed):
                placed.append(SceneObject(idx, shape, color, size, r, c))
                break
        else:
            raise GenerationError(f"no room for object {idx} "
                                  f"after 1000 placement tries")
    return Scene(config.image_h, config.image_w, tuple(placed), 0)


# -- expression grammar --------------------------------------------------------------
#
#   EXPR := SUBJ (REL ('and' REL)*)?
#   SUBJ := PRONOUN | NP
#   NP   := [SIZE] [COLOR] SHAPE
#   REL  := 'left' 'of' NP | 'right' 'of' NP | 'above' NP | 'below' NP
#         | 'nearest' 'to' NP | 'between' NP 'and' NP
#         | 'large' 'than' NP | 'small' 'than' NP
#
# The grammar is LL(1): an NP always ends at its shape token, and in
# relation position a size token is always followed by 'than'.

NounPhrase = namedtuple("NounPhrase", ["size", "color", "shape"])
Relation = namedtuple("Relation", ["kind", "anchors"])
Parsed = namedtuple("Parsed", ["subject", "relations"])

_DIRECTIONAL = ("left_of", "right_of", "above", "below")
_COMPARATIVE = ("larger_than", "smaller_than")


class _Cursor:
    def __init__(self, names):
        self.names = names
        self.pos = 0

    def done(self) -> bool:
        return self.pos >= len(self.names)

    def peek(self):
        return None if self.done() else self.names[self.pos]

    def next(self) -> str:
        if self.done():
            raise ExpressionError("unexpected end of expression")
        name = self.names[self.pos]
        self.pos += 1
        return name

    def expect(self, name: str) -> None:
        got = self.next()
        if got != name:
            raise ExpressionError(f"expected {name!r}, got {got!r}")


def _parse_np(cur: _Cursor) -> NounPhrase:
    size = color = None
    if cur.peek() in _SIZES:
        size = cur.next()
    if cur.peek() in _COLORS:
        color = cur.next()
    if cur.peek() not in _SHAPES:
        raise ExpressionError(f"expected a shape token, got {cur.peek()!r}")
    return NounPhrase(size, color, cur.next())


def _parse_relation(cur: _Cursor) -> Relation:
    head = cur.next()
    if head in ("left", "right"):
        cur.expect("of")
        return Relation(head + "_of", (_parse_np(cur),))
    if head in ("above", "below"):
        return Relation(head, (_parse_np(cur),))
    if head == "nearest":
        cur.expect("to")
        return Relation("nearest_to", (_parse_np(cur),))
    if head == "between":
        a = _parse_np(cur)
        cur.expect("and")
        return Relation("between", (a, _parse_np(cur)))
    if head in _SIZES:
        cur.expect("than")
        kind = "larger_than" if head == "large" else "smaller_than"
        return Relation(kind, (_parse_np(cur),))
    raise ExpressionError(f"expected a relation, got {head!r}")


def parse_expression(tokens) -> Parsed:
    """Parse token ids into (subject, relations); raises ExpressionError."""
    cur = _Cursor(_token_names(tokens))
    if cur.peek() in _PRONOUNS:
        subject = cur.next()
    else:
        subject = _parse_np(cur)
    relations = []
    if not cur.done():
        relations.append(_parse_relation(cur))
        while not cur.done():
            cur.expect("and")
            relations.append(_parse_relation(cur))
    return Parsed(subject, tuple(relations))


def _np_token_ids(np_: NounPhrase) -> list[int]:
    parts = [p for p in (np_.size, np_.color, np_.shape) if p is not None]
    return [TOKEN_IDS[p] for p in parts]


_REL_WORDS = {
    "left_of": ("left", "of"), "right_of": ("right", "of"),
    "above": ("above",), "below": ("below",),
    "nearest_to": ("nearest", "to"),
    "larger_than": ("large", "than"), "smaller_than": ("small", "than"),
}


def _relation_token_ids(kind: str, anchor_nps) -> list[int]:
    if kind == "between":
        return ([TOKEN_IDS["between"]] + _np_token_ids(anchor_nps[0])
                + [TOKEN_IDS["and"]] + _np_token_ids(anchor_nps[1]))
    return [TOKEN_IDS[w] for w in _REL_WORDS[kind]] \
        + _np_token_ids(anchor_nps[0])


# -- resolver ------------------------------------------------------------------------


def matches(obj: SceneObject, np_: NounPhrase) -> bool:
    return (obj.shape == np_.shape
            and (np_.size is None or obj.size == np_.size)
            and (np_.color is None or obj.color == np_.color))


def _dist(a: SceneObject, b: SceneObject) -> float:
    (ay, ax), (by, bx) = a.center, b.center
    return math.hypot(ay - by, ax - bx)


def _detour(x, a, b) -> float:
    return _dist(x, a) + _dist(x, b) - _dist(a, b)


_PAIR_TESTS = {
    "left_of": lambda x, a: x.center[1] < a.center[1],
    "right_of": lambda x, a: x.center[1] > a.center[1],
    "above": lambda x, a: x.center[0] < a.center[0],
    "below": lambda x, a: x.center[0] > a.center[0],
    "larger_than": lambda x, a: x.area > a.area,
    "smaller_than": lambda x, a: x.area < a.area,
}


def _apply_relation(scene: Scene, cand: list, rel: Relation) -> list:
    objs = scene.objects
    if rel.kind == "nearest_to":
        # superlative over the current candidate set: keep x if it is a
        # closest candidate to some anchor matching the noun phrase
        keep = set()
        for a in objs:
            if not matches(a, rel.anchors[0]):
                continue
            pool = [y for y in cand if y.id != a.id]
            if not pool:
                continue
            dmin = min(_dist(y, a) for y in pool)
            keep.update(y.id for y in pool if _dist(y, a) == dmin)
        return [x for x in cand if x.id in keep]
    if rel.kind == "between":
        npa, npb = rel.anchors
        out = []
        for x in cand:
            found = False
            for a in objs:
                if a.id == x.id or not matches(a, npa):
                    continue
                for b in objs:
                    if b.id in (x.id, a.id) or not matches(b, npb):
                        continue
                    if _detour(x, a, b) <= 2.0:
                        found = True
                        break
                if found:
                    break
            if found:
                out.append(x)
        return out
    test = _PAIR_TESTS[rel.kind]
    return [x for x in cand
            if any(a.id != x.id and matches(a, rel.anchors[0]) and test(x, a)
                   for a in objs)]


def resolve(scene: Scene, tokens) -> tuple[int, ...]:
    """All object ids satisfying the expression, sorted.

    Subject noun phrase (or pronoun = everything) fixes the candidate set;
    relations then narrow it left to right.  Anchor noun phrases are
    existential: the relation holds if any matching object witnesses it.
    A singleton result means the expression refers uniquely.
    """
    parsed = parse_expression(tokens)
    if isinstance(parsed.subject, NounPhrase):
        cand = [o for o in scene.objects if matches(o, parsed.subject)]
    else:
        cand = list(scene.objects)
    for rel in parsed.relations:
        cand = _apply_relation(scene, cand, rel)
    return tuple(sorted(o.id for o in cand))


# -- expression generation -----------------------------------------------------------


@dataclass(frozen=True)
class Expression:
    tokens: tuple
    mode: str
    referenced_ids: tuple


def _np_for(obj: SceneObject, rng) -> NounPhrase:
    size = obj.size if rng.random() < 0.3 else None
    color = obj.color if rng.random() < 0.5 else None
    return NounPhrase(size, color, obj.shape)


def _relation_options(target, cand, anchors):
    """Relations the target satisfies with a >= 2px margin.

    Margins are on the deciding quantity: the center-offset for
    directionals, pixel area for comparatives, the distance gap to the
    runner-up candidate for nearest, and the path detour for between
    (target <= 2, every other candidate >= 4).
    """
    opts = []
    tcy, tcx = target.center
    for a in anchors:
        acy, acx = a.center
        if tcx <= acx - 2:
            opts.append(("left_of", (a,)))
        if tcx >= acx + 2:
            opts.append(("right_of", (a,)))
        if tcy <= acy - 2:
            opts.append(("above", (a,)))
        if tcy >= acy + 2:
            opts.append(("below", (a,)))
        if target.area >= a.area + 2:
            opts.append(("larger_than", (a,)))
        if target.area <= a.area - 2:
            opts.append(("smaller_than", (a,)))
        ranked = sorted((_dist(y, a), y.id) for y in cand if y.id != a.id)
        if ranked and ranked[0][1] == target.id and (
                len(ranked) == 1 or ranked[1][0] - ranked[0][0] >= 2):
            opts.append(("nearest_to", (a,)))
    for a, b in itertools.combinations(anchors, 2):
        others = [y for y in cand if y.id not in (target.id, a.id, b.id)]
        if _detour(target, a, b) <= 2.0 and all(
                _detour(y, a, b) >= 4.0 for y in others):
            opts.append(("between", (a, b)))
    return opts


def _draw_relational(scene: Scene, mode: str, rng):
    target = scene.target
    implicit = mode == "category_implicit"
    if implicit:
        subject_tokens = [TOKEN_IDS[str(rng.choice(PRONOUN_NAMES))]]
        cand = list(scene.objects)
        anchors = [o for o in scene.objects if o.shape != target.shape]
    else:
        snp = _np_for(target, rng)
        subject_tokens = _np_token_ids(snp)
        cand = [o for o in scene.objects if matches(o, snp)]
        anchors = [o for o in scene.objects if o.id != target.id]
    if not anchors:
        return None

    opts = _relation_options(target, cand, anchors)
    if not opts:
        return None
    rels = [opts[int(rng.integers(0, len(opts)))]]
    # a second relation keeps the expression within the length budget only
    # for the single-anchor kinds
    if rels[0][0] != "between" and rng.random() < 0.5:
        extra = [o for o in opts
                 if o[0] in _DIRECTIONAL + _COMPARATIVE and o != rels[0]]
        if extra:
            rels.append(extra[int(rng.integers(0, len(extra)))])

    tokens = list(subject_tokens)
    refs = [target.id]
    for i, (kind, rel_anchors) in enumerate(rels):
        if i:
            tokens.append(TOKEN_IDS["and"])
        anchor_nps = tuple(_np_for(a, rng) for a in rel_anchors)
        tokens.extend(_relation_token_ids(kind, anchor_nps))
        refs.extend(a.id for a in rel_anchors)
    return tokens, refs


def _draw_simple(scene: Scene, rng):
    target = scene.target
    same = [o for o in scene.objects
            if o.shape == target.shape and o.id != target.id]
    attrs = []
    if all(o.color != target.color for o in same):
        attrs.append(target.color)
    if all(o.size != target.size for o in same):
        attrs.append(target.size)
    if not attrs:
        return None
    attr = str(rng.choice(attrs))
    return [TOKEN_IDS[attr], TOKEN_IDS[target.shape]], [target.id]


def gen_expression(scene: Scene, mode: str, seed) -> Expression:
    """Draw expressions until one resolves uniquely to the target."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    rng = np.random.default_rng(seed)
    target = scene.target
    for _ in range(64):
        drawn = (_draw_simple(scene, rng) if mode == "simple"
                 else _draw_relational(scene, mode, rng))
        if drawn is None:
            continue
        tokens, refs = drawn
        if resolve(scene, tokens) != (scene.target_id,):
            continue
        if audit_expression(tokens, mode, target.shape) is not None:
            continue
        return Expression(tuple(tokens), mode, tuple(refs))
    raise GenerationError(f"no unique {mode} expression for this scene")


def audit_expression(tokens, mode: str, target_shape=None):
    """Vocabulary-level mode-invariant check; returns None or a reason.

    Operates on the token sequence alone (plus the target's shape word for
    the category_implicit check), independent of the generator's choices.
    """
    try:
        names = _token_names(tokens)
        parsed = parse_expression(tokens)
    except ExpressionError as e:
        return f"unparseable: {e}"
    if mode == "simple":
        if not isinstance(parsed.subject, NounPhrase) or parsed.relations:
            return "simple mode is a bare noun phrase"
        set_attrs = sum(a is not None
                        for a in (parsed.subject.size, parsed.subject.color))
        if set_attrs != 1:
            return "simple mode needs exactly one attribute"
        if target_shape is not None and parsed.subject.shape != target_shape:
            return "noun phrase must name the target category"
        return None
    if mode == "object_distracting":
        if not isinstance(parsed.subject, NounPhrase):
            return "subject must be a noun phrase"
        nps = {parsed.subject}
        for rel in parsed.relations:
            nps.update(rel.anchors)
        if len(nps) < 2:
            return "needs at least two distinct noun phrases"
        return None
    if mode == "category_implicit":
        if parsed.subject not in _PRONOUNS:
            return "subject must be a pronoun"
        if not parsed.relations:
            return "needs at least one relation"
        if target_shape is None:
            raise ValueError("category_implicit audit needs the target shape")
        if target_shape in names:
            return "mentions the target category"
        return None
    raise ValueError(f"mode must be one of {MODES}, got {mode!r}")


# -- rasterization and samples -------------------------------------------------------


def rasterize(scene: Scene):
    """(image [H,W,3], mask [H,W]) floats; flat colors, hard edges."""
    img = np.full((scene.image_h, scene.image_w, 3), BACKGROUND)
    mask = np.zeros((scene.image_h, scene.image_w))
    for o in scene.objects:
        fp = footprint(o.shape, o.box)
        img[o.row:o.row + o.box, o.col:o.col + o.box][fp] = PALETTE[o.color]
        if o.id == scene.target_id:
            mask[o.row:o.row + o.box, o.col:o.col + o.box][fp] = 1.0
    return img, mask


@dataclass(frozen=True)
class Sample:
    image: np.ndarray
    mask: np.ndarray
    tokens: tuple
    mode: str
    seed: tuple
    scene: Scene
    referenced_ids: tuple

    @property
    def text(self) -> str:
        return tokens_to_text(self.tokens)


def _seed_list(seed) -> list[int]:
    if isinstance(seed, (int, np.integer)):
        return [int(seed)]
    return [int(s) for s in seed]


def gen_sample(seed, config: GenConfig) -> Sample:
    """Scene + unique expression + rendered pair, retrying bad scenes."""
    base = _seed_list(seed)
    last = None
    for attempt in range(64):
        try:
            scene = gen_scene(base + [attempt, 0], config)
            expr = gen_expression(scene, config.mode, base + [attempt, 1])
        except GenerationError as e:
            last = e
            continue
        image, mask = rasterize(scene)
        return Sample(image, mask, expr.tokens, config.mode, tuple(base),
                      scene, expr.referenced_ids)
    raise GenerationError(f"no sample after 64 scene retries: {last}")


# -- dataset splits ------------------------------------------------------------------


def mode_counts(size: int, mode_mix) -> list[int]:
    """Exact per-mode counts by largest remainder; sums to size."""
    if len(mode_mix) != len(MODES):
        raise ValueError(f"mode_mix needs {len(MODES)} entries")
    total = float(sum(mode_mix))
    if total <= 0 or any(p < 0 for p in mode_mix):
        raise ValueError("mode_mix must be non-negative with positive sum")
    quotas = [size * p / total for p in mode_mix]
    counts = [math.floor(q) for q in quotas]
    order = sorted(range(len(quotas)),
                   key=lambda i: (counts[i] - quotas[i], i))
    for i in range(size - sum(counts)):
        counts[order[i]] += 1
    return counts


def _split_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def build_split(root, name: str, size: int, seed: int,
                mode_mix=(0.4, 0.3, 0.3), config: GenConfig | None = None):
    """Write one split directory under root; returns its path.

    Layout: root/vocab.txt plus root/name/{meta.jsonl, img_*.ppm,
    msk_*.pgm}.  Per-sample seeds are [seed, crc32(name), index], so splits
    with different names draw from disjoint streams by construction.  Mode
    counts are stratified exactly, then shuffled deterministically.
    """
    config = config if config is not None else GenConfig()
    root = Path(root)
    split_dir = root / name
    split_dir.mkdir(parents=True, exist_ok=True)
    (root / "vocab.txt").write_text("\n".join(VOCAB) + "\n")

    key = _split_key(name)
    schedule = [m for m, c in zip(MODES, mode_counts(size, mode_mix))
                for _ in range(c)]
    order = np.random.default_rng([seed, key]).permutation(size)
    lines = []
    for i in range(size):
        sample = gen_sample([seed, key, i],
                            replace(config, mode=schedule[order[i]]))
        img_name = f"img_{i:05d}.ppm"
        msk_name = f"msk_{i:05d}.pgm"
        write_ppm(split_dir / img_name, sample.image)
        write_pgm(split_dir / msk_name, sample.mask)
        meta = {
            "index": i,
            "seed": list(sample.seed),
            "mode": sample.mode,
            "tokens": [int(t) for t in sample.tokens],
            "text": sample.text,
            "referenced_ids": [int(r) for r in sample.referenced_ids],
            "image": img_name,
            "mask": msk_name,
            "scene": scene_to_dict(sample.scene),
        }
        lines.append(json.dumps(meta, sort_keys=True, separators=(",", ":")))
    (split_dir / "meta.jsonl").write_text("\n".join(lines) + "\n")
    return split_dir


def load_split(root, name: str) -> list[Sample]:
    """Read a split back; images carry the 8-bit quantization of writing."""
    split_dir = Path(root) / name
    samples = []
    with open(split_dir / "meta.jsonl") as f:
        for line in f:
            meta = json.loads(line)
            image = read_ppm(split_dir / meta["image"])
            mask = (read_pgm(split_dir / meta["mask"]) > 0.5).astype(float)
            samples.append(Sample(image, mask, tuple(meta["tokens"]),
                                  meta["mode"], tuple(meta["seed"]),
                                  scene_from_dict(meta["scene"]),
                                  tuple(meta["referenced_ids"])))
    return samples


def load_vocab(root) -> tuple:
    text = Path(root, "vocab.txt").read_text()
    return tuple(text.splitlines())
