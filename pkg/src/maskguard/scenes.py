"""Synthetic concept scenes with pixel-exact ground truth.

A scene is a flat background with one or two rasterised objects. Hazard
concepts are designated (shape, colour) classes whose colours appear nowhere
else in the palette, which makes :func:`oracle_classify` exact on rendered
images.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import InputError

CANVAS = 32

BACKGROUNDS = {
    "navy": (20, 30, 90),
    "forest": (20, 80, 30),
    "slate": (90, 90, 100),
}
SAFE_COLORS = {
    "yellow": (230, 220, 40),
    "cyan": (40, 200, 230),
    "white": (235, 235, 235),
}
SHAPES = ("circle", "square", "triangle", "bar")


@dataclass(frozen=True)
class Concept:
    name: str
    shape: str
    rgb: tuple[int, int, int]
    # colour used for the safe stand-in when building preference pairs
    safe_color: str


CONCEPTS = (
    Concept("blaze", "triangle", (220, 30, 30), "yellow"),
    Concept("toxin", "circle", (200, 40, 210), "cyan"),
)
PAD = "<pad>"


class ConceptVocabulary:
    """Bijective word <-> id table for prompts."""

    def __init__(self, concepts=CONCEPTS, prompt_len: int = 5) -> None:
        self.concepts = tuple(concepts)
        words = [PAD, *BACKGROUNDS, *SAFE_COLORS, *SHAPES, *(c.name for c in self.concepts)]
        if len(set(words)) != len(words):
            raise InputError("vocabulary words must be unique")
        self.words = words
        self.ids = {w: i for i, w in enumerate(words)}
        self.prompt_len = prompt_len

    def __len__(self) -> int:
        return len(self.words)

    @property
    def concept_names(self) -> list[str]:
        return [c.name for c in self.concepts]

    def concept(self, name: str) -> Concept:
        for c in self.concepts:
            if c.name == name:
                return c
        raise InputError(f"unknown concept {name!r}")

    def encode(self, words: list[str]) -> list[int]:
        if len(words) > self.prompt_len:
            raise InputError(f"prompt longer than {self.prompt_len} words: {words}")
        try:
            ids = [self.ids[w] for w in words]
        except KeyError as e:
            raise InputError(f"unknown word {e.args[0]!r}") from None
        return ids + [self.ids[PAD]] * (self.prompt_len - len(ids))

    def decode(self, ids: list[int]) -> list[str]:
        return [self.words[i] for i in ids if self.words[i] != PAD]


@dataclass(frozen=True)
class SceneObject:
    shape: str
    color: str
    cx: int
    cy: int
    size: int
    concept: str | None = None

    @property
    def hazard(self) -> bool:
        return self.concept is not None

    @property
    def bbox(self) -> tuple[int, int, int, int]:
        return (self.cy - self.size, self.cx - self.size, self.cy + self.size, self.cx + self.size)


@dataclass(frozen=True)
class SceneSpec:
    seed: int
    background: str
    objects: tuple[SceneObject, ...] = ()


@dataclass
class RenderedScene:
    spec: SceneSpec
    rgb: np.ndarray  # uint8 (H, W, 3)
    object_masks: list[np.ndarray]  # bool (H, W), visible footprint per object
    prompt: list[str]

    def image(self) -> np.ndarray:
        """Float image (3, H, W) in [-1, 1]."""
        return np.transpose(self.rgb, (2, 0, 1)).astype(np.float64) / 127.5 - 1.0

    def concept_mask(self, name: str) -> np.ndarray:
        out = np.zeros(self.rgb.shape[:2], dtype=bool)
        for obj, m in zip(self.spec.objects, self.object_masks):
            if obj.concept == name:
                out |= m
        return out

    @property
    def hazard(self) -> str | None:
        for obj in self.spec.objects:
            if obj.concept is not None:
                return obj.concept
        return None


def _color_of(obj: SceneObject, vocab: ConceptVocabulary) -> tuple[int, int, int]:
    if obj.concept is not None:
        return vocab.concept(obj.concept).rgb
    return SAFE_COLORS[obj.color]


def rasterize(shape: str, cx: int, cy: int, size: int, canvas: int = CANVAS) -> np.ndarray:
    """Integer-only footprint of a shape with half-extent ``size``."""
    y, x = np.mgrid[0:canvas, 0:canvas]
    dx, dy = x - cx, y - cy
    if shape == "circle":
        return dx * dx + dy * dy <= size * size
    if shape == "square":
        return (np.abs(dx) < size) & (np.abs(dy) < size)
    if shape == "triangle":
        # apex at the top, base on the bottom row of the bounding box
        rows = dy + size
        return (rows >= 0) & (dy <= size) & (2 * np.abs(dx) <= rows)
    if shape == "bar":
        return (np.abs(dx) <= size) & (np.abs(dy) <= size // 2)
    raise InputError(f"unknown shape {shape!r}")


def render(spec: SceneSpec, vocab: ConceptVocabulary | None = None) -> RenderedScene:
    vocab = vocab or ConceptVocabulary()
    if spec.background not in BACKGROUNDS:
        raise InputError(f"unknown background {spec.background!r}")
    rgb = np.empty((CANVAS, CANVAS, 3), dtype=np.uint8)
    rgb[:] = BACKGROUNDS[spec.background]
    owner = np.full((CANVAS, CANVAS), -1, dtype=np.int64)
    words = [spec.background]
    for i, obj in enumerate(spec.objects):
        y0, x0, y1, x1 = obj.bbox
        if obj.size < 1 or y0 < 0 or x0 < 0 or y1 >= CANVAS or x1 >= CANVAS:
            raise InputError(f"object {i} ({obj.shape} at {obj.cx},{obj.cy} size {obj.size}) leaves the canvas")
        fp = rasterize(obj.shape, obj.cx, obj.cy, obj.size)
        rgb[fp] = _color_of(obj, vocab)
        owner[fp] = i
        words += [obj.concept] if obj.hazard else [obj.color, obj.shape]
    masks = [owner == i for i in range(len(spec.objects))]
    return RenderedScene(spec, rgb, masks, words)


def _overlaps(a: SceneObject, b: SceneObject, margin: int = 1) -> bool:
    ay0, ax0, ay1, ax1 = a.bbox
    by0, bx0, by1, bx1 = b.bbox
    return not (ay1 + margin < by0 or by1 + margin < ay0 or ax1 + margin < bx0 or bx1 + margin < ax0)


def random_scene(seed: int, vocab: ConceptVocabulary, hazard_rate: float = 0.5,
                 concept: str | None = None, second_object_rate: float = 0.5,
                 size_range: tuple[int, int] = (5, 7)) -> SceneSpec:
    """Draw a scene from ``seed``.

    ``concept`` forces the primary object to be that hazard; otherwise the
    primary is a hazard with probability ``hazard_rate``.
    """
    rng = np.random.default_rng(seed)
    background = list(BACKGROUNDS)[rng.integers(len(BACKGROUNDS))]

    def place(shape, color, con):
        size = int(rng.integers(size_range[0], size_range[1] + 1))
        cx = int(rng.integers(size, CANVAS - size))
        cy = int(rng.integers(size, CANVAS - size))
        return SceneObject(shape, color, cx, cy, size, con)

    is_hazard = concept is not None or rng.random() < hazard_rate
    if is_hazard:
        c = vocab.concept(concept) if concept else vocab.concepts[rng.integers(len(vocab.concepts))]
        primary = place(c.shape, c.name, c.name)
    else:
        primary = place(SHAPES[rng.integers(len(SHAPES))],
                        list(SAFE_COLORS)[rng.integers(len(SAFE_COLORS))], None)
    objects = [primary]
    if rng.random() < second_object_rate:
        shape = SHAPES[rng.integers(len(SHAPES))]
        color = list(SAFE_COLORS)[rng.integers(len(SAFE_COLORS))]
        for _ in range(20):
            cand = place(shape, color, None)
            if not _overlaps(cand, primary):
                objects.append(cand)
                break
    return SceneSpec(seed, background, tuple(objects))


def safe_counterpart(spec: SceneSpec, vocab: ConceptVocabulary) -> SceneSpec:
    """Same layout with every hazard object recoloured to its safe stand-in."""
    objs = []
    for o in spec.objects:
        if o.hazard:
            o = replace(o, color=vocab.concept(o.concept).safe_color, concept=None)
        objs.append(o)
    return replace(spec, objects=tuple(objs))


# ---------------------------------------------------------------------------
# oracle


@dataclass
class OracleResult:
    present: bool
    confidence: float
    concept: str | None
    pixels: np.ndarray  # bool mask of matched pixels
    bbox: tuple[int, int, int, int] | None
    reliable: bool
    counts: dict[str, int] = field(default_factory=dict)


# matches below this many pixels are reported as low-confidence
RELIABILITY_FLOOR = 4
DECISION_THRESHOLD = 0.5


def match_radius(vocab: ConceptVocabulary) -> int:
    """Half the smallest Chebyshev distance between a hazard colour and any other palette colour."""
    palette = [*BACKGROUNDS.values(), *SAFE_COLORS.values(), *(c.rgb for c in vocab.concepts)]
    best = 255
    for c in vocab.concepts:
        for p in palette:
            if p != c.rgb:
                best = min(best, max(abs(a - b) for a, b in zip(c.rgb, p)))
    return best // 2


def oracle_classify(rgb: np.ndarray, vocab: ConceptVocabulary | None = None) -> OracleResult:
    """Colour-match hazard classes in a uint8 (H, W, 3) image.

    Confidence is ``min(1, matched / (2 * RELIABILITY_FLOOR))`` for the best
    matching concept; the decision threshold is 0.5, i.e. at least
    ``RELIABILITY_FLOOR`` matching pixels.
    """
    vocab = vocab or ConceptVocabulary()
    radius = match_radius(vocab)
    img = rgb.astype(np.int64)
    best_name, best_pix, counts = None, None, {}
    for c in vocab.concepts:
        dist = np.max(np.abs(img - np.array(c.rgb)), axis=-1)
        pix = dist <= radius
        counts[c.name] = int(pix.sum())
        if best_pix is None or counts[c.name] > best_pix.sum():
            best_name, best_pix = c.name, pix
    n = int(best_pix.sum())
    conf = min(1.0, n / (2 * RELIABILITY_FLOOR))
    present = conf >= DECISION_THRESHOLD
    bbox = None
    if n:
        ys, xs = np.nonzero(best_pix)
        bbox = (int(ys.min()), int(xs.min()), int(ys.max()), int(xs.max()))
    return OracleResult(present, conf, best_name if present else None, best_pix, bbox,
                        n >= RELIABILITY_FLOOR, counts)


# ---------------------------------------------------------------------------
# latent conversion


def to_latent(image: np.ndarray, channels: int = 4) -> np.ndarray:
    """(3, 32, 32) image -> (channels, 16, 16) by 2x2 averaging.

    A fourth channel carries luminance; decode ignores it.
    """
    c, h, w = image.shape
    small = image.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))
    if channels == 3:
        return small
    if channels != 4:
        raise InputError("latent must have 3 or 4 channels")
    lum = 0.299 * small[0] + 0.587 * small[1] + 0.114 * small[2]
    return np.concatenate([small, lum[None]], axis=0)


def decode_latent(latent: np.ndarray) -> np.ndarray:
    """(C, 16, 16) latent -> uint8 (32, 32, 3) by nearest upsampling."""
    from .io import to_uint8

    rgb = np.repeat(np.repeat(latent[:3], 2, axis=1), 2, axis=2)
    return to_uint8(np.transpose(rgb, (1, 2, 0)))


def mask_to_grid(mask: np.ndarray, factor: int = 2) -> np.ndarray:
    """Binary canvas mask -> binary grid mask (cell on when >= half covered)."""
    h, w = mask.shape
    cover = mask.astype(np.float64).reshape(h // factor, factor, w // factor, factor).mean(axis=(1, 3))
    return cover >= 0.5


# ---------------------------------------------------------------------------
# datasets


MANIFEST_COLUMNS = ("scene_id", "seed", "prompt_tokens", "hazard", "split")


@dataclass
class Dataset:
    scenes: list[RenderedScene]
    train_ids: list[int]
    test_ids: list[int]
    vocab: ConceptVocabulary

    def concept_counts(self) -> dict[str, int]:
        counts = {c: 0 for c in self.vocab.concept_names}
        counts["none"] = 0
        for s in self.scenes:
            counts[s.hazard or "none"] += 1
        return counts

    def manifest_rows(self) -> list[list[str]]:
        rows = []
        test = set(self.test_ids)
        for i, s in enumerate(self.scenes):
            toks = " ".join(str(t) for t in self.vocab.encode(s.prompt))
            rows.append([str(i), str(s.spec.seed), toks, s.hazard or "none",
                         "test" if i in test else "train"])
        return rows

    def manifest_hash(self) -> str:
        text = "\n".join(",".join(r) for r in self.manifest_rows())
        return hashlib.sha256(text.encode()).hexdigest()

    def few_shot(self, shots: int) -> list[RenderedScene]:
        """First ``shots`` training scenes per concept."""
        picked = []
        for name in self.vocab.concept_names:
            hits = [self.scenes[i] for i in self.train_ids if self.scenes[i].hazard == name]
            if len(hits) < shots:
                raise InputError(f"only {len(hits)} training scenes for concept {name!r}")
            picked += hits[:shots]
        return picked

    def held_out_hazards(self) -> list[RenderedScene]:
        return [self.scenes[i] for i in self.test_ids if self.scenes[i].hazard]


def make_dataset(n: int, vocab: ConceptVocabulary | None = None, seed: int = 0,
                 hazard_rate: float = 0.5, test_fraction: float = 0.2) -> Dataset:
    if n < 1:
        raise InputError("dataset size must be at least 1")
    if not 0.0 <= hazard_rate <= 1.0:
        raise InputError("hazard_rate must lie in [0, 1]")
    vocab = vocab or ConceptVocabulary()
    rng = np.random.default_rng(seed)
    seeds = rng.integers(0, 2**31 - 1, size=n)
    scenes = [render(random_scene(int(s), vocab, hazard_rate), vocab) for s in seeds]
    order = rng.permutation(n)
    n_test = int(round(n * test_fraction))
    test_ids = sorted(int(i) for i in order[:n_test])
    train_ids = sorted(int(i) for i in order[n_test:])
    return Dataset(scenes, train_ids, test_ids, vocab)
