"""Procedural sprite subjects, scenes, and corpora on a fixed 16-color palette.

Everything here is a pure function of (seed, config). Subjects are 8x8
sprites built from a per-class base shape plus a seeded body color, seeded
decoration cells, and six signature cells whose colors form an error
correcting code: any two subjects of a class whose seeds differ modulo 169
disagree on at least five signature cells.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .seeding import derive_seed

# Palette: index 0 is the white background; order is frozen.
PALETTE = (
    ("white", (255, 255, 255)),
    ("red", (220, 40, 40)),
    ("green", (40, 180, 60)),
    ("blue", (50, 80, 220)),
    ("yellow", (235, 220, 50)),
    ("purple", (140, 60, 200)),
    ("orange", (240, 150, 40)),
    ("pink", (245, 150, 190)),
    ("brown", (130, 90, 50)),
    ("gray", (128, 128, 128)),
    ("cyan", (60, 210, 220)),
    ("magenta", (225, 60, 200)),
    ("lime", (160, 230, 70)),
    ("navy", (25, 30, 110)),
    ("teal", (20, 130, 130)),
    ("black", (15, 15, 15)),
)

COLOR_WORDS = tuple(name for name, _ in PALETTE)
PALETTE_RGB = tuple(rgb for _, rgb in PALETTE)
COLOR_INDEX = {name: i for i, (name, _) in enumerate(PALETTE)}
N_COLORS = len(PALETTE)

SPRITE_SIZE = 8
IMAGE_SIZE = 16

# Sprite placement grid: four corner slots plus a center slot.
CORNER_SLOTS = ((0, 0), (0, 8), (8, 0), (8, 8))
CENTER_SLOT = (4, 4)
ALL_SLOTS = CORNER_SLOTS + (CENTER_SLOT,)

# Background pools. Reference backgrounds are disjoint from the backgrounds
# used in evaluation prompts so that copied reference backgrounds are
# detectable in generated images.
REFERENCE_BACKGROUNDS = ("gray", "brown", "navy", "teal")
EVAL_BACKGROUNDS = ("red", "blue", "green", "yellow")

IDENTIFIERS = ("a1", "b2", "c3", "d4", "e5", "f6", "g7", "h8", "k9", "m3", "q8", "z9")

_M = {".": False, "X": True}


def _mask(art: str) -> np.ndarray:
    rows = [line.strip() for line in art.strip().splitlines()]
    return np.array([[_M[ch] for ch in row] for row in rows], dtype=bool)


_CIRCLE = _mask(
    """
    ..XXXX..
    .XXXXXX.
    XXXXXXXX
    XXXXXXXX
    XXXXXXXX
    XXXXXXXX
    .XXXXXX.
    ..XXXX..
    """
)

_SQUARE = _mask(
    """
    XXXXXXXX
    XXXXXXXX
    XXXXXXXX
    XXXXXXXX
    XXXXXXXX
    XXXXXXXX
    XXXXXXXX
    XXXXXXXX
    """
)

_CROSS = _mask(
    """
    ...XX...
    ...XX...
    ...XX...
    XXXXXXXX
    XXXXXXXX
    ...XX...
    ...XX...
    ...XX...
    """
)

_HEART = _mask(
    """
    .XX..XX.
    XXXXXXXX
    XXXXXXXX
    XXXXXXXX
    .XXXXXX.
    ..XXXX..
    ...XX...
    ........
    """
)

_TRIANGLE = _mask(
    """
    ...XX...
    ...XX...
    ..XXXX..
    ..XXXX..
    .XXXXXX.
    .XXXXXX.
    XXXXXXXX
    XXXXXXXX
    """
)

_RING = _mask(
    """
    ..XXXX..
    .XXXXXX.
    XX....XX
    XX....XX
    XX....XX
    XX....XX
    .XXXXXX.
    ..XXXX..
    """
)


@dataclass(frozen=True)
class SpriteClass:
    word: str
    body_color: int
    mask: np.ndarray
    signature_slots: tuple  # 6 cells carrying the identity code
    face_cells: tuple  # fixed class marking, kept under tints
    decoration_slots: tuple  # candidates for seeded decoration


CLASSES = {
    "cat": SpriteClass(
        "cat",
        COLOR_INDEX["orange"],
        _CIRCLE,
        ((1, 3), (2, 1), (2, 6), (4, 0), (4, 7), (6, 3)),
        ((3, 2), (3, 5), (5, 3)),
        ((1, 4), (3, 3), (3, 4), (5, 4), (6, 2), (6, 5)),
    ),
    "bear": SpriteClass(
        "bear",
        COLOR_INDEX["magenta"],
        _SQUARE,
        ((0, 0), (0, 7), (3, 2), (3, 5), (7, 0), (7, 7)),
        ((2, 2), (2, 5), (5, 3)),
        ((1, 1), (1, 6), (4, 0), (4, 7), (6, 2), (6, 5)),
    ),
    "dog": SpriteClass(
        "dog",
        COLOR_INDEX["lime"],
        _CROSS,
        ((0, 3), (1, 4), (3, 0), (3, 7), (6, 3), (7, 4)),
        ((2, 3), (2, 4), (4, 4)),
        ((0, 4), (3, 3), (4, 1), (4, 6), (5, 4), (7, 3)),
    ),
    "bird": SpriteClass(
        "bird",
        COLOR_INDEX["cyan"],
        _HEART,
        ((0, 1), (0, 6), (2, 0), (2, 7), (4, 2), (5, 3)),
        ((1, 2), (1, 5), (3, 4)),
        ((1, 3), (2, 3), (3, 1), (3, 6), (4, 4), (6, 3)),
    ),
    "fish": SpriteClass(
        "fish",
        COLOR_INDEX["pink"],
        _TRIANGLE,
        ((0, 3), (2, 2), (2, 5), (5, 1), (5, 6), (7, 0)),
        ((3, 3), (3, 4), (6, 4)),
        ((1, 4), (4, 3), (4, 4), (6, 1), (6, 6), (7, 7)),
    ),
    "bug": SpriteClass(
        "bug",
        COLOR_INDEX["purple"],
        _RING,
        ((0, 2), (0, 5), (3, 0), (3, 7), (7, 2), (7, 5)),
        ((1, 2), (1, 5), (6, 3)),
        ((1, 3), (2, 1), (2, 6), (5, 0), (5, 7), (6, 4)),
    ),
}

CLASS_WORDS = tuple(CLASSES)

BODY_POOL = tuple(sorted({c.body_color for c in CLASSES.values()}))

_N_SIG = 6
_CODE_BASE = 13  # prime field for the signature color code
_IDENTITY_SPACE = _CODE_BASE * _CODE_BASE  # 169 distinct identities per class


@dataclass(frozen=True)
class Subject:
    """A generated subject sprite (or a canonical class sprite)."""

    identifier: str | None
    class_word: str
    seed: int | None
    sprite: np.ndarray  # 8x8 palette indices (values under the mask only)
    mask: np.ndarray  # 8x8 opaque cells
    signature: tuple  # ((row, col, color), ...)
    face_cells: tuple
    body_color: int

    @property
    def uid(self) -> str:
        """Registry/prompt key: '<identifier> <class>' or the bare class word."""
        if self.identifier is None:
            return self.class_word
        return f"{self.identifier} {self.class_word}"

    @property
    def is_canonical(self) -> bool:
        return self.identifier is None

    def tint_exempt_cells(self):
        """Cells that keep their color when a tint attribute is applied."""
        return {(r, c) for r, c, _ in self.signature} | set(self.face_cells)


def _signature_colors(cls: SpriteClass, seed: int):
    """Six signature colors forming a [6,2] Reed-Solomon-style code over
    GF(13): identities that differ modulo 169 disagree in >= 5 cells."""
    palette = [c for c in range(1, N_COLORS) if c != cls.body_color][:_CODE_BASE]
    u = seed % _IDENTITY_SPACE
    d1, d2 = u % _CODE_BASE, u // _CODE_BASE
    return [palette[(d1 + i * d2) % _CODE_BASE] for i in range(_N_SIG)]


def make_canonical(class_word: str) -> Subject:
    """The undecorated class sprite used throughout pretraining."""
    if class_word not in CLASSES:
        raise ValueError(f"unknown class word: {class_word!r}")
    cls = CLASSES[class_word]
    sprite = np.zeros((SPRITE_SIZE, SPRITE_SIZE), dtype=np.uint8)
    sprite[cls.mask] = cls.body_color
    for r, c in cls.face_cells:
        sprite[r, c] = COLOR_INDEX["black"]
    return Subject(
        identifier=None,
        class_word=class_word,
        seed=None,
        sprite=sprite,
        mask=cls.mask.copy(),
        signature=(),
        face_cells=cls.face_cells,
        body_color=cls.body_color,
    )


def make_subject(seed: int, class_word: str, identifier: str | None = None) -> Subject:
    """Deterministic subject for (seed, class); sprite = base shape + seeded
    body color + seeded decoration + signature code cells."""
    if class_word not in CLASSES:
        raise ValueError(f"unknown class word: {class_word!r}")
    cls = CLASSES[class_word]
    if identifier is None:
        identifier = IDENTIFIERS[seed % len(IDENTIFIERS)]
    if identifier not in IDENTIFIERS:
        raise ValueError(f"unknown identifier word: {identifier!r}")

    rng = np.random.Generator(np.random.PCG64(derive_seed(seed, f"subject:{class_word}")))
    body_choices = [c for c in BODY_POOL if c != cls.body_color]
    body = int(body_choices[rng.integers(len(body_choices))])

    sprite = np.zeros((SPRITE_SIZE, SPRITE_SIZE), dtype=np.uint8)
    sprite[cls.mask] = body
    for r, c in cls.face_cells:
        sprite[r, c] = COLOR_INDEX["black"]

    deco_count = 2
    picks = rng.choice(len(cls.decoration_slots), size=deco_count, replace=False)
    for k in sorted(int(i) for i in picks):
        r, c = cls.decoration_slots[k]
        sprite[r, c] = COLOR_INDEX["black"]

    colors = _signature_colors(cls, seed)
    signature = tuple(
        (r, c, colors[i]) for i, (r, c) in enumerate(cls.signature_slots)
    )
    for r, c, col in signature:
        sprite[r, c] = col

    return Subject(
        identifier=identifier,
        class_word=class_word,
        seed=seed,
        sprite=sprite,
        mask=cls.mask.copy(),
        signature=signature,
        face_cells=cls.face_cells,
        body_color=body,
    )


def tinted_sprite(subject: Subject, tint_color: int) -> np.ndarray:
    """Sprite with non-signature body cells recolored to the tint."""
    out = subject.sprite.copy()
    exempt = subject.tint_exempt_cells()
    for r in range(SPRITE_SIZE):
        for c in range(SPRITE_SIZE):
            if subject.mask[r, c] and (r, c) not in exempt:
                out[r, c] = tint_color
    return out


@dataclass(frozen=True)
class Placement:
    subject: Subject
    row: int
    col: int
    tint: str | None = None  # per-mention appearance attribute


@dataclass(frozen=True)
class SceneSpec:
    """One renderable scene plus the prompt that describes it.

    Prompt grammar: [a photo of] [tint]? [position]? subject
    ("and" [tint]? subject)? ["on" color "background"], with each tint
    bound to its adjacent subject mention. Mentions follow raster order
    of the placements.
    """

    placements: tuple
    background: str
    position_word: str | None = None
    include_prefix: bool = True
    include_background_phrase: bool = True
    seed: int = 0


def scene_prompt(spec: SceneSpec) -> str:
    parts = []
    if spec.include_prefix:
        parts += ["a", "photo", "of"]
    for i, p in enumerate(spec.placements):
        if i > 0:
            parts.append("and")
        if p.tint is not None:
            parts.append(p.tint)
        if i == 0 and spec.position_word is not None:
            parts.append(spec.position_word)
        parts.append(p.subject.uid)
    if spec.include_background_phrase:
        parts += ["on", spec.background, "background"]
    return " ".join(parts)


def render_scene(spec: SceneSpec, image_size: int = IMAGE_SIZE):
    """Render the scene to a palette-index image and return (image, prompt)."""
    if spec.background not in COLOR_INDEX:
        raise ValueError(f"unknown background color: {spec.background!r}")
    if spec.position_word is not None and spec.position_word not in ("corner", "center"):
        raise ValueError(f"unknown position word: {spec.position_word!r}")

    img = np.full((image_size, image_size), COLOR_INDEX[spec.background], dtype=np.uint8)
    boxes = []
    for p in spec.placements:
        if p.tint is not None and p.tint not in COLOR_INDEX:
            raise ValueError(f"unknown tint color: {p.tint!r}")
        r, c = p.row, p.col
        if r < 0 or c < 0 or r + SPRITE_SIZE > image_size or c + SPRITE_SIZE > image_size:
            raise ValueError(f"placement ({r},{c}) out of bounds")
        for (r0, c0) in boxes:
            if abs(r - r0) < SPRITE_SIZE and abs(c - c0) < SPRITE_SIZE:
                raise ValueError(f"placement ({r},{c}) overlaps ({r0},{c0})")
        boxes.append((r, c))
        sprite = p.subject.sprite
        if p.tint is not None:
            sprite = tinted_sprite(p.subject, COLOR_INDEX[p.tint])
        region = img[r : r + SPRITE_SIZE, c : c + SPRITE_SIZE]
        region[p.subject.mask] = sprite[p.subject.mask]
    return img, scene_prompt(spec)


@dataclass
class SceneItem:
    image: np.ndarray
    prompt: str
    spec: SceneSpec


@dataclass
class CorpusConfig:
    size: int = 2000
    seed: int = 0
    two_subject_rate: float = 0.40
    same_class_pair_rate: float = 0.30  # of two-subject scenes
    tint_rate: float = 0.50  # per subject mention
    position_rate: float = 0.15
    no_background_phrase_rate: float = 0.15


@dataclass
class Corpus:
    config: CorpusConfig
    items: list


def _pick_tint(rng, body_color: int, background: str, exclude=()):
    choices = [
        w
        for w in COLOR_WORDS
        if w != "white"
        and w != background
        and COLOR_INDEX[w] != body_color
        and w not in exclude
    ]
    return choices[rng.integers(len(choices))]


def build_pretrain_corpus(config: CorpusConfig) -> Corpus:
    """Seeded corpus of canonical-sprite scenes covering all classes, colors,
    per-mention tints, and one/two-subject layouts. Identifier words never
    appear. Per-mention tints (and same-class pairs with differing tints)
    force the model to read each subject's appearance from its own mention
    span rather than from a bag of prompt words."""
    rng = np.random.Generator(np.random.PCG64(derive_seed(config.seed, "corpus")))
    canon = {w: make_canonical(w) for w in CLASS_WORDS}
    items = []
    for i in range(config.size):
        n_sub = 2 if rng.random() < config.two_subject_rate else 1
        if n_sub == 2 and rng.random() < config.same_class_pair_rate:
            cls = CLASS_WORDS[int(rng.integers(len(CLASS_WORDS)))]
            subjects = [canon[cls], canon[cls]]
            same_class = True
        else:
            picks = rng.choice(len(CLASS_WORDS), size=n_sub, replace=False)
            subjects = [canon[CLASS_WORDS[int(k)]] for k in picks]
            same_class = False

        bg_choices = [
            w
            for w in COLOR_WORDS
            if COLOR_INDEX[w] not in {s.body_color for s in subjects}
        ]
        background = bg_choices[rng.integers(len(bg_choices))]

        tints = []
        for j, s in enumerate(subjects):
            if rng.random() < config.tint_rate:
                tints.append(_pick_tint(rng, s.body_color, background,
                                        exclude=[t for t in tints if t]))
            else:
                tints.append(None)
        # identical twins are unlearnable to tell apart; force a difference
        if same_class and tints[0] == tints[1]:
            tints[1] = _pick_tint(rng, subjects[1].body_color, background,
                                  exclude=[tints[0]] if tints[0] else [])

        position_word = None
        if n_sub == 1 and rng.random() < config.position_rate:
            position_word = "center" if rng.random() < 0.5 else "corner"

        if position_word == "center":
            slots = [CENTER_SLOT]
        elif position_word == "corner":
            slots = [CORNER_SLOTS[int(rng.integers(len(CORNER_SLOTS)))]]
        elif n_sub == 2:
            picks = rng.choice(len(CORNER_SLOTS), size=2, replace=False)
            slots = sorted(CORNER_SLOTS[int(k)] for k in picks)  # raster order
        else:
            slots = [ALL_SLOTS[int(rng.integers(len(ALL_SLOTS)))]]

        spec = SceneSpec(
            placements=tuple(
                Placement(s, r, c, tint=t)
                for s, (r, c), t in zip(subjects, slots, tints)
            ),
            background=background,
            position_word=position_word,
            include_background_phrase=rng.random() >= config.no_background_phrase_rate,
            seed=i,
        )
        image, prompt = render_scene(spec)
        items.append(SceneItem(image=image, prompt=prompt, spec=spec))
    return Corpus(config=config, items=items)


@dataclass
class ReferenceSet:
    """Tuning data for one subject: n images sharing one fixed prompt."""

    subject: Subject
    prompt: str
    images: list
    specs: list

    @property
    def backgrounds(self):
        return [s.background for s in self.specs]


def build_reference_set(subject: Subject, n: int = 6, seed: int = 0) -> ReferenceSet:
    """n scenes of the subject over varying reference backgrounds/positions,
    all paired with the single prompt 'a photo of <id> <class>'."""
    if n < 1:
        raise ValueError("reference set needs n >= 1")
    if subject.is_canonical:
        raise ValueError("reference sets require an identified subject")
    rng = np.random.Generator(np.random.PCG64(derive_seed(seed, f"refs:{subject.uid}")))
    bg_order = [REFERENCE_BACKGROUNDS[int(k)] for k in rng.permutation(len(REFERENCE_BACKGROUNDS))]
    slot_order = [ALL_SLOTS[int(k)] for k in rng.permutation(len(ALL_SLOTS))]
    images, specs = [], []
    prompt = None
    for i in range(n):
        r, c = slot_order[i % len(slot_order)]
        spec = SceneSpec(
            placements=(Placement(subject, r, c),),
            background=bg_order[i % len(bg_order)],
            include_background_phrase=False,
            seed=i,
        )
        image, p = render_scene(spec)
        if prompt is None:
            prompt = p
        images.append(image)
        specs.append(spec)
    return ReferenceSet(subject=subject, prompt=prompt, images=images, specs=specs)
