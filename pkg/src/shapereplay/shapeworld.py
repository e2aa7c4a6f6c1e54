"""Synthetic shape world.

Scenes are 64x64 RGB images of flat-colored geometric shapes over a muted
textured background. Each semantic class is a (shape kind, base hue, size
range) triple, so class identity is readable from color and geometry alone.
The module provides deterministic renderers, task/eval dataset generators
for class-incremental protocols, and a simulated web image source whose
result pools contain a controlled mix of useful and junk samples.

Conventions: images are float32 (H, W, 3) in [0, 1], label maps are int16
(H, W) where 0 is background and shape classes start at 1. Labels record
the topmost shape covering a pixel.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .seeds import rng_for

BACKGROUND = 0

SHAPE_KINDS = (
    "disk",
    "square",
    "triangle",
    "ring",
    "cross",
    "bar",
    "diamond",
    "ellipse",
)

WEB_TAGS = (
    "clean",
    "style_shifted",
    "missing_class",
    "wrong_class",
    "too_small",
    "non_dominant",
    "near_duplicate",
)


# ---------------------------------------------------------------------------
# color helpers


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """Vectorized RGB -> HSV for arrays shaped (..., 3) in [0, 1]."""
    rgb = np.asarray(rgb, dtype=np.float64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    maxc = rgb.max(axis=-1)
    minc = rgb.min(axis=-1)
    v = maxc
    span = maxc - minc
    s = np.where(maxc > 0, span / np.maximum(maxc, 1e-12), 0.0)
    # hue sector selection, span==0 pixels get hue 0
    safe = np.maximum(span, 1e-12)
    rc = (maxc - r) / safe
    gc = (maxc - g) / safe
    bc = (maxc - b) / safe
    h = np.where(maxc == r, bc - gc, np.where(maxc == g, 2.0 + rc - bc, 4.0 + gc - rc))
    h = np.where(span > 0, (h / 6.0) % 1.0, 0.0)
    return np.stack([h, s, v], axis=-1)


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    """Vectorized HSV -> RGB for arrays shaped (..., 3) in [0, 1]."""
    hsv = np.asarray(hsv, dtype=np.float64)
    h, s, v = hsv[..., 0] % 1.0, hsv[..., 1], hsv[..., 2]
    i = np.floor(h * 6.0).astype(int) % 6
    f = h * 6.0 - np.floor(h * 6.0)
    p = v * (1.0 - s)
    q = v * (1.0 - s * f)
    t = v * (1.0 - s * (1.0 - f))
    r = np.choose(i, [v, q, p, p, t, v])
    g = np.choose(i, [t, v, v, q, p, p])
    b = np.choose(i, [p, p, t, v, v, q])
    return np.stack([r, g, b], axis=-1)


# ---------------------------------------------------------------------------
# world description


@dataclass(frozen=True)
class ClassStyle:
    """Visual identity of one semantic class."""

    class_id: int
    kind: str
    hue: float
    size_lo: float  # natural object size range, fraction of image area
    size_hi: float
    sat_lo: float = 0.60  # saturation band, a second color axis besides hue
    sat_hi: float = 0.85

    def __post_init__(self):
        if self.class_id < 1:
            raise ValueError("class ids start at 1, 0 is background")
        if self.kind not in SHAPE_KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if not (0.0 < self.size_lo <= self.size_hi < 1.0):
            raise ValueError("size range must satisfy 0 < lo <= hi < 1")
        if not (0.0 < self.sat_lo <= self.sat_hi <= 1.0):
            raise ValueError("saturation band must satisfy 0 < lo <= hi <= 1")


@dataclass(frozen=True)
class WorldSpec:
    """Image geometry plus the class roster."""

    height: int = 64
    width: int = 64
    styles: tuple[ClassStyle, ...] = ()
    noise_amplitude: float = 0.02
    hue_jitter: float = 0.02

    def __post_init__(self):
        if self.height < 16 or self.width < 16:
            raise ValueError("images must be at least 16x16")
        if self.noise_amplitude < 0:
            raise ValueError("noise amplitude must be nonnegative")
        ids = [s.class_id for s in self.styles]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate class id in world styles")

    @property
    def class_ids(self) -> tuple[int, ...]:
        return tuple(s.class_id for s in self.styles)

    def style_of(self, class_id: int) -> ClassStyle:
        for s in self.styles:
            if s.class_id == class_id:
                return s
        raise KeyError(f"class {class_id} not in world")


# kind, size-range and hue table for the default 8-class world; class 2 is
# deliberately large, classes 3 and 6 deliberately small, so per-class size
# statistics are well separated. Hues are evenly spaced on [0.13, 0.79] but
# assigned out of class order, so class index carries no color gradient and
# hue neighbors still alternate between the two saturation bands.
_DEFAULT_ROSTER = (
    ("disk", 0.06, 0.16, 0.13000),
    ("square", 0.18, 0.38, 0.59875),
    ("bar", 0.035, 0.10, 0.31750),
    ("triangle", 0.08, 0.20, 0.78625),
    ("ring", 0.07, 0.18, 0.50500),
    ("ellipse", 0.04, 0.11, 0.22375),
    ("cross", 0.06, 0.15, 0.69250),
    ("diamond", 0.10, 0.24, 0.41125),
)


def default_world(num_classes: int = 8, size: int = 64, noise_amplitude: float = 0.02) -> WorldSpec:
    """Standard world: up to 8 classes with evenly spaced hues.

    Hues sit on [0.13, 0.79], clear of the brownish background band near
    0.08 and of the red/magenta wraparound. Saturation alternates between a
    vivid and a muted band, so hue neighbors also differ on a second color
    axis and every class pair is separated by a comfortable margin.
    """
    if not (1 <= num_classes <= len(_DEFAULT_ROSTER)):
        raise ValueError(f"num_classes must be in 1..{len(_DEFAULT_ROSTER)}")
    styles = []
    for c in range(1, num_classes + 1):
        kind, lo, hi, hue = _DEFAULT_ROSTER[c - 1]
        sat_lo, sat_hi = (0.72, 0.92) if c % 2 else (0.45, 0.60)
        styles.append(ClassStyle(c, kind, hue=hue, size_lo=lo, size_hi=hi,
                                 sat_lo=sat_lo, sat_hi=sat_hi))
    return WorldSpec(height=size, width=size, styles=tuple(styles), noise_amplitude=noise_amplitude)


# ---------------------------------------------------------------------------
# scene description and rendering


@dataclass(frozen=True)
class ShapePlacement:
    """One shape instance. Center is (row, col) as fractions of H and W.

    class_id 0 places scenery: the shape is rendered and occludes like any
    other object, but its pixels are labeled background."""

    class_id: int
    kind: str
    center: tuple[float, float]
    size_frac: float
    color: tuple[float, float, float]
    angle: float = 0.0

    def __post_init__(self):
        if self.class_id < 0:
            raise ValueError("shape class id must be >= 0")
        if self.kind not in SHAPE_KINDS:
            raise ValueError(f"unknown shape kind {self.kind!r}")
        if not (0.0 < self.size_frac < 1.0):
            raise ValueError("size_frac must be in (0, 1)")
        if not (0.0 <= self.center[0] <= 1.0 and 0.0 <= self.center[1] <= 1.0):
            raise ValueError("center must lie in the unit square")


@dataclass(frozen=True)
class SceneSpec:
    """Complete recipe for one image; rendering it is a pure function."""

    height: int
    width: int
    shapes: tuple[ShapePlacement, ...]
    texture_seed: int
    noise_amplitude: float = 0.02

    def __post_init__(self):
        if self.height < 16 or self.width < 16:
            raise ValueError("images must be at least 16x16")
        if self.noise_amplitude < 0:
            raise ValueError("noise amplitude must be nonnegative")


def _bilinear_upsample(grid: np.ndarray, height: int, width: int) -> np.ndarray:
    gh, gw = grid.shape
    ry = np.linspace(0.0, gh - 1.0, height)
    rx = np.linspace(0.0, gw - 1.0, width)
    i0 = np.clip(ry.astype(int), 0, gh - 2)
    j0 = np.clip(rx.astype(int), 0, gw - 2)
    wy = (ry - i0)[:, None]
    wx = (rx - j0)[None, :]
    a = grid[np.ix_(i0, j0)]
    b = grid[np.ix_(i0, j0 + 1)]
    c = grid[np.ix_(i0 + 1, j0)]
    d = grid[np.ix_(i0 + 1, j0 + 1)]
    return a * (1 - wy) * (1 - wx) + b * (1 - wy) * wx + c * wy * (1 - wx) + d * wy * wx


def _background(height: int, width: int, rng: np.random.Generator) -> np.ndarray:
    # coarse brownish texture, low saturation so shapes stand out
    val = 0.22 + 0.22 * _bilinear_upsample(rng.random((5, 5)), height, width)
    hue = 0.06 + 0.05 * _bilinear_upsample(rng.random((4, 4)), height, width)
    sat = 0.05 + 0.12 * _bilinear_upsample(rng.random((4, 4)), height, width)
    base = hsv_to_rgb(np.stack([hue, sat, val], axis=-1))
    # pale stains where the backdrop is worn, bleached or discolored: any
    # tint is possible, but always washed out and brighter than the base
    # texture. Every scene carries a few, so pale pixels at an arbitrary
    # hue say nothing about where an image came from.
    ys = np.arange(height)[:, None] / height
    xs = np.arange(width)[None, :] / width
    for _ in range(int(rng.integers(1, 4))):
        cy, cx = rng.uniform(0.1, 0.9), rng.uniform(0.1, 0.9)
        ry, rx = rng.uniform(0.08, 0.22), rng.uniform(0.08, 0.22)
        d2 = ((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2
        weight = (rng.uniform(0.6, 1.0) * np.exp(-0.5 * d2))[..., None]
        tint = hsv_to_rgb(np.array([rng.uniform(0.0, 1.0), rng.uniform(0.08, 0.16), rng.uniform(0.45, 0.70)]))
        base = base * (1 - weight) + tint * weight
    return base.astype(np.float32)


def _shape_mask(kind: str, height: int, width: int, center, size_frac: float, angle: float) -> np.ndarray:
    area = size_frac * height * width
    cy = center[0] * (height - 1)
    cx = center[1] * (width - 1)
    ys, xs = np.mgrid[0:height, 0:width]
    dy = ys - cy
    dx = xs - cx
    cos_a, sin_a = np.cos(angle), np.sin(angle)
    u = cos_a * dx + sin_a * dy
    v = -sin_a * dx + cos_a * dy
    if kind == "disk":
        r2 = area / np.pi
        return dy * dy + dx * dx <= r2
    if kind == "square":
        half = np.sqrt(area) / 2.0
        return np.maximum(np.abs(u), np.abs(v)) <= half
    if kind == "diamond":
        half = np.sqrt(area) / 2.0
        rot = np.pi / 4.0
        uu = np.cos(rot) * u + np.sin(rot) * v
        vv = -np.sin(rot) * u + np.cos(rot) * v
        return np.maximum(np.abs(uu), np.abs(vv)) <= half
    if kind == "triangle":
        side = np.sqrt(4.0 * area / np.sqrt(3.0))
        radius = side / np.sqrt(3.0)
        angles = angle + np.pi / 2.0 + np.array([0.0, 2.0, 4.0]) * np.pi / 3.0
        vx = cx + radius * np.cos(angles)
        vy = cy + radius * np.sin(angles)
        inside = np.ones((height, width), dtype=bool)
        for k in range(3):
            ax, ay = vx[k], vy[k]
            bx, by = vx[(k + 1) % 3], vy[(k + 1) % 3]
            cross = (bx - ax) * (ys - ay) - (by - ay) * (xs - ax)
            inside &= cross >= 0
        return inside
    if kind == "ring":
        inner_ratio = 0.6
        r_out2 = area / (np.pi * (1.0 - inner_ratio**2))
        r_in2 = r_out2 * inner_ratio**2
        rr = dy * dy + dx * dx
        return (rr <= r_out2) & (rr >= r_in2)
    if kind == "cross":
        # two orthogonal bars of length 4w and width w, overlap w^2
        w = np.sqrt(area / 7.0)
        along = (np.abs(u) <= 2.0 * w) & (np.abs(v) <= w / 2.0)
        across = (np.abs(v) <= 2.0 * w) & (np.abs(u) <= w / 2.0)
        return along | across
    if kind == "bar":
        w = np.sqrt(area / 4.0)
        return (np.abs(u) <= 2.0 * w) & (np.abs(v) <= w / 2.0)
    if kind == "ellipse":
        b = np.sqrt(area / (2.0 * np.pi))
        a = 2.0 * b
        return (u / a) ** 2 + (v / b) ** 2 <= 1.0
    raise ValueError(f"unknown shape kind {kind!r}")


def render_scene(spec: SceneSpec) -> tuple[np.ndarray, np.ndarray]:
    """Render a SceneSpec to (image, labels).

    Shapes are painted in list order, later entries occlude earlier ones,
    and the label map records the topmost shape per pixel. Rendering the
    same spec twice gives bit-identical output.
    """
    rng = np.random.default_rng(np.random.SeedSequence(spec.texture_seed))
    image = _background(spec.height, spec.width, rng)
    labels = np.zeros((spec.height, spec.width), dtype=np.int16)
    for shape in spec.shapes:
        mask = _shape_mask(shape.kind, spec.height, spec.width, shape.center, shape.size_frac, shape.angle)
        image[mask] = shape.color
        labels[mask] = shape.class_id
    if spec.noise_amplitude > 0:
        noise = rng.uniform(-spec.noise_amplitude, spec.noise_amplitude, image.shape)
        image = image + noise
    return np.clip(image, 0.0, 1.0).astype(np.float32), labels


# ---------------------------------------------------------------------------
# incremental protocols


@dataclass(frozen=True)
class ProtocolSpec:
    """Ordered disjoint class groups defining an incremental schedule.

    groups[k] lists the classes introduced at step k. In "disjoint" mode a
    step-k scene only contains classes seen so far; in "overlapped" mode it
    may contain any class. Either way only the step's own classes appear in
    the training labels.
    """

    groups: tuple[tuple[int, ...], ...]
    mode: str = "disjoint"
    samples_per_step: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.groups or any(len(g) == 0 for g in self.groups):
            raise ValueError("protocol needs at least one nonempty group")
        flat = [c for g in self.groups for c in g]
        if len(set(flat)) != len(flat):
            raise ValueError("class groups must be disjoint")
        if any(c < 1 for c in flat):
            raise ValueError("background cannot be part of a group")
        if self.mode not in ("disjoint", "overlapped"):
            raise ValueError(f"mode must be disjoint or overlapped, got {self.mode!r}")
        if self.samples_per_step and len(self.samples_per_step) != len(self.groups):
            raise ValueError("samples_per_step length must match groups")

    @property
    def num_steps(self) -> int:
        """Index of the last step (steps run 0..num_steps)."""
        return len(self.groups) - 1

    @property
    def all_classes(self) -> tuple[int, ...]:
        return tuple(c for g in self.groups for c in g)

    def classes_at(self, step: int) -> tuple[int, ...]:
        return self.groups[step]

    def classes_through(self, step: int) -> tuple[int, ...]:
        return tuple(c for g in self.groups[: step + 1] for c in g)

    def name(self) -> str:
        return "-".join(str(len(g)) for g in self.groups)

    def collapse(self) -> "ProtocolSpec":
        """Single-step protocol over all classes with the summed budget."""
        samples = (sum(self.samples_per_step),) if self.samples_per_step else ()
        return ProtocolSpec(groups=(self.all_classes,), mode=self.mode, samples_per_step=samples)


def protocol_from_sizes(sizes, mode: str = "disjoint", samples_per_step=()) -> ProtocolSpec:
    """Build a protocol like 4-2-2 by assigning ids 1..n to groups in order."""
    groups = []
    nxt = 1
    for n in sizes:
        groups.append(tuple(range(nxt, nxt + int(n))))
        nxt += int(n)
    return ProtocolSpec(groups=tuple(groups), mode=mode, samples_per_step=tuple(samples_per_step))


@dataclass
class TaskDataset:
    """Stacked images and label maps for one incremental step.

    visible_classes is the set a model may legally see in `labels`,
    always including background. Eval datasets use step == -1 and expose
    every class.
    """

    step: int
    images: np.ndarray  # (n, H, W, 3) float32
    labels: np.ndarray  # (n, H, W) int16
    visible_classes: frozenset[int] = field(default_factory=frozenset)

    def __post_init__(self):
        if self.images.ndim != 4 or self.images.shape[-1] != 3:
            raise ValueError("images must be (n, H, W, 3)")
        if self.labels.shape != self.images.shape[:3]:
            raise ValueError("labels must be (n, H, W) matching images")
        present = set(np.unique(self.labels).tolist())
        if not present <= set(self.visible_classes):
            raise ValueError(f"labels contain classes outside the visible set: {sorted(present - set(self.visible_classes))}")

    def __len__(self) -> int:
        return int(self.images.shape[0])


def _jittered_color(style: ClassStyle, world: WorldSpec, rng: np.random.Generator) -> tuple[float, float, float]:
    h = (style.hue + rng.uniform(-world.hue_jitter, world.hue_jitter)) % 1.0
    s = rng.uniform(style.sat_lo, style.sat_hi)
    v = rng.uniform(0.65, 0.95)
    r, g, b = hsv_to_rgb(np.array([h, s, v]))
    return (float(r), float(g), float(b))


def _placement(world: WorldSpec, class_id: int, rng: np.random.Generator, size_frac: float | None = None) -> ShapePlacement:
    style = world.style_of(class_id)
    if size_frac is None:
        size_frac = rng.uniform(style.size_lo, style.size_hi)
    return ShapePlacement(
        class_id=class_id,
        kind=style.kind,
        center=(rng.uniform(0.18, 0.82), rng.uniform(0.18, 0.82)),
        size_frac=float(size_frac),
        color=_jittered_color(style, world, rng),
        angle=float(rng.uniform(0.0, 2.0 * np.pi)),
    )


def _bystander(world: WorldSpec, class_id: int, rng: np.random.Generator) -> ShapePlacement:
    """An incidental object in somebody else's photo: true class shape and
    hue, but washed out to the same pale tones as a backdrop stain, the way
    faded or distant things come out. Only the hue still gives the class
    away, and a stain can carry that same hue by chance."""
    style = world.style_of(class_id)
    h = (style.hue + rng.uniform(-world.hue_jitter, world.hue_jitter)) % 1.0
    s = rng.uniform(0.08, 0.16)
    v = rng.uniform(0.45, 0.70)
    r, g, b = hsv_to_rgb(np.array([h, s, v]))
    return ShapePlacement(
        class_id=class_id,
        kind=style.kind,
        center=(rng.uniform(0.18, 0.82), rng.uniform(0.18, 0.82)),
        size_frac=float(rng.uniform(style.size_lo, style.size_hi)),
        color=(float(r), float(g), float(b)),
        angle=float(rng.uniform(0.0, 2.0 * np.pi)),
    )


# vivid hue band no class roster entry uses: classes sit on [0.13, 0.79]
# and the backdrop browns near 0.08, so anything here is off-roster
DISTRACTOR_HUE_LO = 0.85
DISTRACTOR_HUE_HI = 0.97


def _distractor(world: WorldSpec, rng: np.random.Generator, size_frac: float | None = None) -> ShapePlacement:
    """An object from outside the class roster, the unrelated stuff keyword
    search keeps returning: solid like a real subject and spanning the same
    saturation range the roster does, so only its hue gives it away, and the
    benchmark labels it background."""
    if size_frac is None:
        size_frac = rng.uniform(0.06, 0.20)
    h = rng.uniform(DISTRACTOR_HUE_LO, DISTRACTOR_HUE_HI)
    s = rng.uniform(0.45, 0.92)
    v = rng.uniform(0.65, 0.95)
    r, g, b = hsv_to_rgb(np.array([h, s, v]))
    return ShapePlacement(
        class_id=BACKGROUND,
        kind=SHAPE_KINDS[int(rng.integers(0, len(SHAPE_KINDS)))],
        center=(rng.uniform(0.18, 0.82), rng.uniform(0.18, 0.82)),
        size_frac=float(size_frac),
        color=(float(r), float(g), float(b)),
        angle=float(rng.uniform(0.0, 2.0 * np.pi)),
    )


def _scene_from_shapes(world: WorldSpec, shapes, rng: np.random.Generator) -> SceneSpec:
    return SceneSpec(
        height=world.height,
        width=world.width,
        shapes=tuple(shapes),
        texture_seed=int(rng.integers(0, 2**31 - 1)),
        noise_amplitude=world.noise_amplitude,
    )


def _task_scene(world: WorldSpec, protocol: ProtocolSpec, step: int, rng: np.random.Generator) -> SceneSpec:
    """One training scene for step k: background clutter first, then a
    guaranteed instance of a current class painted topmost."""
    if protocol.mode == "disjoint":
        clutter_pool = protocol.classes_through(step)
    else:
        clutter_pool = protocol.all_classes
    shapes = []
    for _ in range(int(rng.integers(0, 3))):
        shapes.append(_placement(world, int(rng.choice(clutter_pool)), rng))
    current = int(rng.choice(protocol.classes_at(step)))
    shapes.append(_placement(world, current, rng))
    return _scene_from_shapes(world, shapes, rng)


def _mask_labels(labels: np.ndarray, keep_classes) -> np.ndarray:
    keep = np.isin(labels, np.asarray(sorted(keep_classes), dtype=labels.dtype))
    return np.where(keep, labels, np.int16(BACKGROUND)).astype(np.int16)


def generate_task_dataset(world: WorldSpec, protocol: ProtocolSpec, step: int, count: int, seed: int) -> TaskDataset:
    """Training data for step k with labels restricted to that step's classes."""
    if not (0 <= step <= protocol.num_steps):
        raise ValueError(f"step {step} outside protocol range 0..{protocol.num_steps}")
    if count < 1:
        raise ValueError("count must be >= 1")
    for c in protocol.all_classes:
        world.style_of(c)  # raises if the protocol names unknown classes
    current = protocol.classes_at(step)
    images = np.empty((count, world.height, world.width, 3), dtype=np.float32)
    labels = np.empty((count, world.height, world.width), dtype=np.int16)
    for i in range(count):
        scene = _task_scene(world, protocol, step, rng_for(seed, "scene", i))
        img, truth = render_scene(scene)
        images[i] = img
        labels[i] = _mask_labels(truth, current)
    return TaskDataset(step=step, images=images, labels=labels, visible_classes=frozenset(current) | {BACKGROUND})


def task_oracle_labels(world: WorldSpec, protocol: ProtocolSpec, step: int, count: int, seed: int) -> np.ndarray:
    """Full unmasked truth for the same scenes generate_task_dataset builds.

    Test-only backdoor: the training pipeline never sees these.
    """
    if not (0 <= step <= protocol.num_steps):
        raise ValueError(f"step {step} outside protocol range 0..{protocol.num_steps}")
    labels = np.empty((count, world.height, world.width), dtype=np.int16)
    for i in range(count):
        scene = _task_scene(world, protocol, step, rng_for(seed, "scene", i))
        _, truth = render_scene(scene)
        labels[i] = truth
    return labels


def generate_eval_dataset(world: WorldSpec, protocol: ProtocolSpec, count: int, seed: int) -> TaskDataset:
    """Held-out scenes over every class with complete ground truth."""
    if count < 1:
        raise ValueError("count must be >= 1")
    pool = protocol.all_classes
    images = np.empty((count, world.height, world.width, 3), dtype=np.float32)
    labels = np.empty((count, world.height, world.width), dtype=np.int16)
    for i in range(count):
        rng = rng_for(seed, "eval", i)
        shapes = [_placement(world, int(rng.choice(pool)), rng) for _ in range(int(rng.integers(1, 4)))]
        img, truth = render_scene(_scene_from_shapes(world, shapes, rng))
        images[i] = img
        labels[i] = truth
    return TaskDataset(step=-1, images=images, labels=labels, visible_classes=frozenset(pool) | {BACKGROUND})


# ---------------------------------------------------------------------------
# simulated web source


@dataclass(frozen=True)
class WebNoiseProfile:
    """Mixture weights for what a keyword image search actually returns.

    Weights must sum to 1. style_strength scales how far style-shifted
    samples drift in hue, saturation and contrast.
    """

    clean: float = 0.40
    style_shifted: float = 0.15
    missing_class: float = 0.10
    wrong_class: float = 0.10
    too_small: float = 0.10
    non_dominant: float = 0.10
    near_duplicate: float = 0.05
    style_strength: float = 1.0

    def __post_init__(self):
        w = self.weights()
        if np.any(w < 0):
            raise ValueError("noise profile weights must be nonnegative")
        if abs(float(w.sum()) - 1.0) > 1e-9:
            raise ValueError(f"noise profile weights must sum to 1, got {float(w.sum()):.6f}")
        if self.style_strength < 0:
            raise ValueError("style_strength must be nonnegative")

    def weights(self) -> np.ndarray:
        return np.array(
            [
                self.clean,
                self.style_shifted,
                self.missing_class,
                self.wrong_class,
                self.too_small,
                self.non_dominant,
                self.near_duplicate,
            ]
        )


@dataclass
class WebSample:
    """One query result. oracle_label and tag exist for audits and tests;
    the replay pipeline consumes only the image."""

    image: np.ndarray
    oracle_label: np.ndarray
    tag: str
    query_class: int
    index: int


def apply_style_shift(image: np.ndarray, strength: float, rng: np.random.Generator) -> np.ndarray:
    """Drift hue, saturation and contrast, simulating off-domain imagery.

    At strength 1 the drift stays below half the inter-class hue spacing
    and within the saturation-band gap, so a shifted object keeps its class
    identity; shifted samples are usable replay, just visibly off-palette.
    """
    if strength < 0:
        raise ValueError("strength must be nonnegative")
    hsv = rgb_to_hsv(image)
    hue_delta = rng.choice([-1.0, 1.0]) * rng.uniform(0.010, 0.025) * strength
    sat_gain = 1.0 + strength * rng.uniform(-0.08, 0.08)
    con_gain = 1.0 + 0.25 * strength * rng.uniform(-1.0, 1.0)
    bright = 0.10 * strength * rng.uniform(-1.0, 1.0)
    hsv[..., 0] = (hsv[..., 0] + hue_delta) % 1.0
    hsv[..., 1] = np.clip(hsv[..., 1] * sat_gain, 0.0, 1.0)
    hsv[..., 2] = np.clip((hsv[..., 2] - 0.5) * con_gain + 0.5 + bright, 0.0, 1.0)
    return np.clip(hsv_to_rgb(hsv), 0.0, 1.0).astype(np.float32)


def _other_classes(world: WorldSpec, exclude: int) -> tuple[int, ...]:
    return tuple(c for c in world.class_ids if c != exclude)


def _web_scene(world: WorldSpec, query_class: int, tag: str, rng: np.random.Generator) -> SceneSpec:
    style = world.style_of(query_class)
    shapes = []
    if tag in ("clean", "style_shifted"):
        # a good search hit is composed like any other photo of this world:
        # a couple of background things, sometimes a washed-out bystander
        # whose pale tones only the hue distinguishes from a stain on the
        # backdrop, and the queried thing in front
        if rng.random() < 0.35:
            shapes.append(_bystander(world, int(rng.choice(world.class_ids)), rng))
        for _ in range(int(rng.integers(0, 3))):
            shapes.append(_placement(world, int(rng.choice(world.class_ids)), rng))
        shapes.append(_placement(world, query_class, rng))
    elif tag == "missing_class":
        # the search missed entirely: pictures of unrelated things
        for _ in range(int(rng.integers(1, 4))):
            shapes.append(_distractor(world, rng))
    elif tag == "wrong_class":
        # a lookalike dominates the frame instead of the queried class
        if rng.random() < 0.5:
            shapes.append(_distractor(world, rng))
        shapes.append(_distractor(world, rng, size_frac=rng.uniform(0.12, 0.28)))
    elif tag == "too_small":
        # a distant subject in a wide shot: the query is a speck and the
        # frame fills up with whatever else was around it
        others = _other_classes(world, query_class)
        for _ in range(int(rng.integers(2, 4))):
            shapes.append(_placement(world, int(rng.choice(others)), rng))
        tiny = style.size_lo * rng.uniform(0.15, 0.45)
        shapes.append(_placement(world, query_class, rng, size_frac=tiny))
    elif tag == "non_dominant":
        small = style.size_lo * rng.uniform(0.5, 0.9)
        shapes.append(_placement(world, query_class, rng, size_frac=small))
        for _ in range(int(rng.integers(1, 3))):
            shapes.append(_distractor(world, rng, size_frac=rng.uniform(0.20, 0.35)))
    else:
        raise ValueError(f"no scene recipe for tag {tag!r}")
    return _scene_from_shapes(world, shapes, rng)


def web_query(world: WorldSpec, query_class: int, count: int, profile: WebNoiseProfile, seed: int) -> list[WebSample]:
    """Simulate downloading `count` images for a class-name keyword query.

    The result list is deterministic in (world, query_class, count, profile,
    seed) and a prefix-stable function of count: asking for more images
    appends to the same sequence.
    """
    if query_class not in world.class_ids:
        raise ValueError(f"query class {query_class} not in world")
    if count < 1:
        raise ValueError("count must be >= 1")
    weights = profile.weights()
    samples: list[WebSample] = []
    for i in range(count):
        rng = rng_for(seed, "web", i)
        tag = WEB_TAGS[int(rng.choice(len(WEB_TAGS), p=weights))]
        if tag == "near_duplicate" and i == 0:
            tag = "clean"
        if tag == "near_duplicate":
            base = samples[int(rng.integers(0, i))]
            noise = rng.uniform(-0.01, 0.01, base.image.shape)
            image = np.clip(base.image + noise, 0.0, 1.0).astype(np.float32)
            label = base.oracle_label.copy()
        else:
            image, label = render_scene(_web_scene(world, query_class, tag, rng))
            if tag == "style_shifted":
                image = apply_style_shift(image, profile.style_strength, rng)
        samples.append(WebSample(image=image, oracle_label=label, tag=tag, query_class=query_class, index=i))
    return samples


def web_query_images(world: WorldSpec, query_class: int, count: int, profile: WebNoiseProfile, seed: int) -> np.ndarray:
    """The pipeline-facing view of web_query: images only, no oracle data."""
    samples = web_query(world, query_class, count, profile, seed)
    return np.stack([s.image for s in samples])
