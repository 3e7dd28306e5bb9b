"""Procedural edit-pair and video corpus.

Scenes are sampled compositionally (environment plus up to three shapes),
rejected when they break the validity rules, rasterized exactly on the
integer grid, edited analytically and re-rendered. Because the renderer
is exact, the edit mask is precisely the set of pixels that differ.

Prompts are fixed-length token sequences from a small grammar::

    [style] <env> (<color> <shape>)* PAD...

and always describe the full scene (the edited prompt describes the
post-edit state, not the edit instruction).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import rng as rngs
from .errors import ExhaustedSampling, InapplicableTask

CANVAS = 16
PROMPT_LEN = 8
PAD = 0

COLORS = {
    "red": (1.0, 0.0, 0.0),
    "green": (0.0, 1.0, 0.0),
    "blue": (0.0, 0.0, 1.0),
    "yellow": (1.0, 1.0, 0.0),
    "cyan": (0.0, 1.0, 1.0),
    "magenta": (1.0, 0.0, 1.0),
    "white": (1.0, 1.0, 1.0),
    "orange": (1.0, 0.5, 0.0),
}
SHADES = {
    "gray": (0.5, 0.5, 0.5),
    "dark": (0.25, 0.25, 0.25),
    "light": (0.75, 0.75, 0.75),
    "navy": (0.0, 0.0, 0.5),
    "black": (0.0, 0.0, 0.0),
}
_RGB = {**COLORS, **SHADES}

# name -> (pattern, primary, secondary)
ENVIRONMENTS = [
    ("solid", "gray", "gray"),
    ("solid", "black", "black"),
    ("hstripe", "dark", "light"),
    ("vstripe", "navy", "gray"),
    ("checker", "black", "dark"),
    ("solid", "blue", "blue"),
    ("checker", "white", "light"),
    ("hstripe", "green", "dark"),
]
SHAPES = ("rect", "circle", "bar")
SIZES = (0, 1, 2)
STYLES = ("invert", "dim")

TASK_KINDS = ("Recolor", "AddObject", "RemoveObject", "BackgroundSwap", "GlobalStyle")
LOCAL_TASKS = frozenset({"Recolor", "AddObject", "RemoveObject"})
MAX_OBJECTS = 3

# token vocabulary
_VOCAB = ["<pad>"] + [f"env{i}" for i in range(len(ENVIRONMENTS))] + list(COLORS) + list(SHAPES) + list(STYLES)
TOKEN = {w: i for i, w in enumerate(_VOCAB)}
WORD = dict(enumerate(_VOCAB))


@dataclass(frozen=True)
class ObjectSpec:
    shape: str
    color: str
    size: int
    x: int
    y: int

    def extent(self) -> tuple[int, int]:
        """(height, width) of the bounding box."""
        if self.shape == "rect":
            s = 3 + self.size
            return s, s
        if self.shape == "circle":
            s = 2 * (self.size + 1) + 1
            return s, s
        return 2, 4 + 2 * self.size

    def footprint(self) -> np.ndarray:
        """Boolean [h, w] coverage inside the bounding box."""
        h, w = self.extent()
        if self.shape != "circle":
            return np.ones((h, w), dtype=bool)
        r = self.size + 1
        yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
        return yy * yy + xx * xx <= r * r


@dataclass(frozen=True)
class SceneSpec:
    env: int
    objects: tuple[ObjectSpec, ...] = ()
    seed: int = 0
    style: str | None = None

    def to_dict(self) -> dict:
        return {"env": self.env, "objects": [dataclasses.asdict(o) for o in self.objects], "seed": self.seed, "style": self.style}

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(env=int(d["env"]), objects=tuple(ObjectSpec(**o) for o in d["objects"]), seed=int(d["seed"]), style=d.get("style"))


@dataclass(frozen=True)
class EditTask:
    kind: str
    index: int | None = None
    color: str | None = None
    obj: ObjectSpec | None = None
    env: int | None = None
    style: str | None = None

    @property
    def is_local(self) -> bool:
        return self.kind in LOCAL_TASKS

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: v for k, v in d.items() if v is not None}

    @classmethod
    def from_dict(cls, d: dict) -> "EditTask":
        d = dict(d)
        if d.get("obj") is not None:
            d["obj"] = ObjectSpec(**d["obj"])
        return cls(**d)


@dataclass
class EditPairSample:
    src_image: np.ndarray
    edit_image: np.ndarray
    src_prompt: np.ndarray
    edit_prompt: np.ndarray
    edit_mask: np.ndarray
    scene: SceneSpec
    task: EditTask


@dataclass
class VideoClip:
    frames: np.ndarray
    caption: np.ndarray
    motion: tuple[tuple[int, int], ...]
    scene: SceneSpec


@dataclass(frozen=True)
class SceneConfig:
    """Discrete sampling space for scenes; every field drawn uniformly."""

    canvas: int = CANVAS
    envs: tuple[int, ...] = tuple(range(len(ENVIRONMENTS)))
    colors: tuple[str, ...] = tuple(COLORS)
    shapes: tuple[str, ...] = SHAPES
    sizes: tuple[int, ...] = SIZES
    min_objects: int = 1
    max_objects: int = MAX_OBJECTS
    max_attempts: int = 10_000


@dataclass
class SamplingStats:
    attempts: int = 0
    accepted: int = 0
    reasons: dict = field(default_factory=dict)

    @property
    def rejection_rate(self) -> float:
        return 1.0 - self.accepted / self.attempts if self.attempts else 0.0


# ---------------------------------------------------------------------------
# Validity and scene sampling
# ---------------------------------------------------------------------------


def env_colors(env: int) -> set[str]:
    _, a, b = ENVIRONMENTS[env]
    return {a, b}


def _boxes_overlap(a: ObjectSpec, b: ObjectSpec) -> bool:
    ah, aw = a.extent()
    bh, bw = b.extent()
    return a.x < b.x + bw and b.x < a.x + aw and a.y < b.y + bh and b.y < a.y + ah


def violations(scene: SceneSpec, canvas: int = CANVAS) -> list[str]:
    """Names of validity rules the scene breaks (empty when valid)."""
    out = []
    bg = env_colors(scene.env)
    for i, o in enumerate(scene.objects):
        h, w = o.extent()
        if o.x < 0 or o.y < 0 or o.x + w > canvas or o.y + h > canvas:
            out.append("outside-canvas")
        if o.color in bg:
            out.append("color-matches-background")
        for p in scene.objects[:i]:
            if _boxes_overlap(o, p):
                out.append("overlap")
    return out


def is_valid(scene: SceneSpec, canvas: int = CANVAS) -> bool:
    return not violations(scene, canvas)


def _draw_object(rng: np.random.Generator, cfg: SceneConfig) -> ObjectSpec:
    return ObjectSpec(
        shape=cfg.shapes[rng.integers(len(cfg.shapes))],
        color=cfg.colors[rng.integers(len(cfg.colors))],
        size=int(cfg.sizes[rng.integers(len(cfg.sizes))]),
        x=int(rng.integers(cfg.canvas)),
        y=int(rng.integers(cfg.canvas)),
    )


def sample_scene(rng: np.random.Generator, cfg: SceneConfig = SceneConfig(), seed: int = 0,
                 stats: SamplingStats | None = None) -> SceneSpec:
    """Draw scenes until one is valid (rejection sampling)."""
    for _ in range(cfg.max_attempts):
        env = int(cfg.envs[rng.integers(len(cfg.envs))])
        k = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
        scene = SceneSpec(env=env, objects=tuple(_draw_object(rng, cfg) for _ in range(k)), seed=seed)
        bad = violations(scene, cfg.canvas)
        if stats is not None:
            stats.attempts += 1
            for r in set(bad):
                stats.reasons[r] = stats.reasons.get(r, 0) + 1
        if not bad:
            if stats is not None:
                stats.accepted += 1
            return scene
    raise ExhaustedSampling(f"no valid scene after {cfg.max_attempts} draws")


def build_scenes(n: int, seed: int, cfg: SceneConfig = SceneConfig(), stream: int = rngs.SCENES,
                 stats: SamplingStats | None = None) -> list[SceneSpec]:
    """``n`` valid scenes; scene ``i`` depends only on ``(seed, stream, i)``."""
    if n < 1:
        raise ValueError("need at least one scene")
    return [sample_scene(rngs.generator(seed, stream, i), cfg, seed=i, stats=stats) for i in range(n)]


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------


def render_background(env: int, canvas: int = CANVAS) -> np.ndarray:
    pattern, a, b = ENVIRONMENTS[env]
    yy, xx = np.mgrid[0:canvas, 0:canvas]
    if pattern == "solid":
        sel = np.zeros((canvas, canvas), dtype=bool)
    elif pattern == "hstripe":
        sel = (yy // 2) % 2 == 1
    elif pattern == "vstripe":
        sel = (xx // 2) % 2 == 1
    else:
        sel = ((yy // 2) + (xx // 2)) % 2 == 1
    img = np.empty((3, canvas, canvas), dtype=np.float32)
    for c in range(3):
        img[c] = np.where(sel, _RGB[b][c], _RGB[a][c])
    return img


def object_mask(o: ObjectSpec, canvas: int = CANVAS) -> np.ndarray:
    m = np.zeros((canvas, canvas), dtype=bool)
    h, w = o.extent()
    m[o.y : o.y + h, o.x : o.x + w] = o.footprint()
    return m


def apply_style(img: np.ndarray, style: str | None) -> np.ndarray:
    if style is None:
        return img
    if style == "invert":
        return (np.float32(1.0) - img).astype(np.float32)
    if style == "dim":
        return (img * np.float32(0.5)).astype(np.float32)
    raise ValueError(f"unknown style {style!r}")


def render(scene: SceneSpec, canvas: int = CANVAS) -> np.ndarray:
    """Exact rasterization to a [3, canvas, canvas] float32 image in [0, 1]."""
    img = render_background(scene.env, canvas)
    for o in scene.objects:
        m = object_mask(o, canvas)
        for c in range(3):
            img[c][m] = _RGB[o.color][c]
    return apply_style(img, scene.style)


def _scene_at_frame(scene: SceneSpec, motion, k: int, canvas: int) -> SceneSpec:
    objs = []
    for o, (dx, dy) in zip(scene.objects, motion):
        h, w = o.extent()
        x = int(np.clip(o.x + k * dx, 0, canvas - w))
        y = int(np.clip(o.y + k * dy, 0, canvas - h))
        objs.append(dataclasses.replace(o, x=x, y=y))
    return dataclasses.replace(scene, objects=tuple(objs))


def render_video(scene: SceneSpec, frames: int, motion=None, canvas: int = CANVAS) -> VideoClip:
    """Per-frame integer translation with clamping to the canvas."""
    if motion is None:
        motion = tuple((0, 0) for _ in scene.objects)
    motion = tuple((int(dx), int(dy)) for dx, dy in motion)
    if len(motion) != len(scene.objects):
        raise ValueError("one motion vector per object is required")
    out = np.stack([render(_scene_at_frame(scene, motion, k, canvas), canvas) for k in range(frames)])
    return VideoClip(frames=out, caption=encode_prompt(scene), motion=motion, scene=scene)


def frame_scenes(scene: SceneSpec, frames: int, motion, canvas: int = CANVAS) -> list[SceneSpec]:
    return [_scene_at_frame(scene, motion, k, canvas) for k in range(frames)]


# ---------------------------------------------------------------------------
# Prompts
# ---------------------------------------------------------------------------


def encode_prompt(scene: SceneSpec) -> np.ndarray:
    words = ([scene.style] if scene.style else []) + [f"env{scene.env}"]
    for o in scene.objects:
        words += [o.color, o.shape]
    if len(words) > PROMPT_LEN:
        raise ValueError(f"scene needs {len(words)} tokens, limit is {PROMPT_LEN}")
    ids = np.full(PROMPT_LEN, PAD, dtype=np.int64)
    ids[: len(words)] = [TOKEN[w] for w in words]
    return ids


def decode_prompt(ids) -> dict:
    words = [WORD[int(i)] for i in ids]
    n = len(words)
    while n and words[n - 1] == "<pad>":
        n -= 1
    words = words[:n]
    if "<pad>" in words:
        raise ValueError("PAD may only appear as a suffix")
    style = None
    if words and words[0] in STYLES:
        style, words = words[0], words[1:]
    env = int(words[0][3:])
    objects = [(words[i], words[i + 1]) for i in range(1, len(words), 2)]
    return {"style": style, "env": env, "objects": objects}


# ---------------------------------------------------------------------------
# Edits
# ---------------------------------------------------------------------------


def apply_task(scene: SceneSpec, task: EditTask) -> SceneSpec:
    """Edited scene; raises InapplicableTask when the task does not fit."""
    objs = list(scene.objects)
    if scene.style is not None:
        raise InapplicableTask("edits apply to unstyled source scenes")
    if task.kind == "Recolor":
        if task.index is None or not 0 <= task.index < len(objs):
            raise InapplicableTask("Recolor needs an existing object")
        old = objs[task.index]
        if task.color == old.color or task.color in env_colors(scene.env) or task.color not in COLORS:
            raise InapplicableTask(f"cannot recolor {old.color} to {task.color}")
        objs[task.index] = dataclasses.replace(old, color=task.color)
        edited = dataclasses.replace(scene, objects=tuple(objs))
    elif task.kind == "AddObject":
        if task.obj is None or len(objs) >= MAX_OBJECTS:
            raise InapplicableTask("AddObject needs a free slot and an object")
        edited = dataclasses.replace(scene, objects=tuple(objs + [task.obj]))
    elif task.kind == "RemoveObject":
        if task.index is None or not 0 <= task.index < len(objs):
            raise InapplicableTask("RemoveObject needs an existing object")
        del objs[task.index]
        edited = dataclasses.replace(scene, objects=tuple(objs))
    elif task.kind == "BackgroundSwap":
        if task.env is None or task.env == scene.env:
            raise InapplicableTask("BackgroundSwap needs a different environment")
        edited = dataclasses.replace(scene, env=task.env)
    elif task.kind == "GlobalStyle":
        if task.style not in STYLES:
            raise InapplicableTask(f"unknown style {task.style!r}")
        edited = dataclasses.replace(scene, style=task.style)
    else:
        raise InapplicableTask(f"unknown task {task.kind!r}")
    if not is_valid(edited):
        raise InapplicableTask(f"{task.kind} produces an invalid scene: {violations(edited)}")
    return edited


def _candidate_tasks(scene: SceneSpec, rng: np.random.Generator, cfg: SceneConfig) -> dict[str, EditTask]:
    out = {}
    bg = env_colors(scene.env)
    if scene.objects:
        i = int(rng.integers(len(scene.objects)))
        choices = [c for c in cfg.colors if c != scene.objects[i].color and c not in bg]
        if choices:
            out["Recolor"] = EditTask("Recolor", index=i, color=choices[rng.integers(len(choices))])
        out["RemoveObject"] = EditTask("RemoveObject", index=int(rng.integers(len(scene.objects))))
    if len(scene.objects) < MAX_OBJECTS:
        for _ in range(200):
            o = _draw_object(rng, cfg)
            if is_valid(dataclasses.replace(scene, objects=scene.objects + (o,)), cfg.canvas):
                out["AddObject"] = EditTask("AddObject", obj=o)
                break
    used = {o.color for o in scene.objects}
    envs = [e for e in cfg.envs if e != scene.env and not (env_colors(e) & used)]
    if envs:
        out["BackgroundSwap"] = EditTask("BackgroundSwap", env=int(envs[rng.integers(len(envs))]))
    out["GlobalStyle"] = EditTask("GlobalStyle", style=STYLES[rng.integers(len(STYLES))])
    return out


def sample_task(scene: SceneSpec, rng: np.random.Generator, cfg: SceneConfig = SceneConfig()) -> EditTask:
    """A task kind drawn uniformly among those applicable to ``scene``."""
    cands = _candidate_tasks(scene, rng, cfg)
    kinds = [k for k in TASK_KINDS if k in cands]
    return cands[kinds[rng.integers(len(kinds))]]


def synth_pair(scene: SceneSpec, task: EditTask) -> EditPairSample:
    edited = apply_task(scene, task)
    src = render(scene)
    dst = render(edited)
    mask = np.any(src != dst, axis=0).astype(np.float32)[None]
    return EditPairSample(src_image=src, edit_image=dst, src_prompt=encode_prompt(scene), edit_prompt=encode_prompt(edited),
                          edit_mask=mask, scene=scene, task=task)


def build_pairs(n: int, seed: int, cfg: SceneConfig = SceneConfig(), heldout: bool = False) -> list[EditPairSample]:
    """Edit pairs; held-out pairs come from disjoint seed streams."""
    scene_stream = rngs.HELDOUT if heldout else rngs.SCENES
    pairs = []
    for i, scene in enumerate(build_scenes(n, seed, cfg, stream=scene_stream)):
        task = sample_task(scene, rngs.generator(seed, rngs.TASKS, int(heldout), i), cfg)
        pairs.append(synth_pair(scene, task))
    return pairs


def _sample_motion(scene: SceneSpec, frames: int, rng: np.random.Generator) -> tuple[tuple[int, int], ...]:
    static = tuple((0, 0) for _ in scene.objects)
    if rng.random() < 0.25:
        return static
    for _ in range(20):
        motion = tuple((int(rng.integers(-1, 2)), int(rng.integers(-1, 2))) for _ in scene.objects)
        if all(is_valid(s) for s in frame_scenes(scene, frames, motion)):
            return motion
    return static


def build_clips(n: int, seed: int, frames: int = 8, style_prob: float = 0.2, cfg: SceneConfig = SceneConfig(),
                heldout: bool = False) -> list[VideoClip]:
    """Pretraining videos: valid scenes, optional global style, integer motion."""
    stream = rngs.HELDOUT_CLIPS if heldout else rngs.CLIPS
    clips = []
    for i, scene in enumerate(build_scenes(n, seed, cfg, stream=stream)):
        rng = rngs.generator(seed, stream, 1, i)
        if rng.random() < style_prob:
            scene = dataclasses.replace(scene, style=STYLES[rng.integers(len(STYLES))])
        clips.append(render_video(scene, frames, _sample_motion(scene, frames, rng)))
    return clips


def static_video(image: np.ndarray, frames: int) -> np.ndarray:
    return np.repeat(np.asarray(image)[None], frames, axis=0)


# ---------------------------------------------------------------------------
# Filtering
# ---------------------------------------------------------------------------

MIN_COVERAGE = 0.01
MAX_COVERAGE = 0.90


def pair_rejections(s: EditPairSample) -> list[str]:
    reasons = []
    outside = s.edit_mask[0] == 0
    if np.any(s.src_image[:, outside] != s.edit_image[:, outside]):
        reasons.append("non-edit-region mismatch")
    if s.task.is_local:
        cov = float(s.edit_mask.mean())
        if cov == 0.0:
            reasons.append("empty mask")
        elif not MIN_COVERAGE <= cov <= MAX_COVERAGE:
            reasons.append("mask coverage")
    return reasons


def filter_pairs(samples) -> tuple[list[EditPairSample], dict]:
    """Keep pairs passing every rule; report counts per rejection reason."""
    accepted, per_sample = [], []
    counts: dict[str, int] = {}
    for i, s in enumerate(samples):
        reasons = pair_rejections(s)
        if reasons:
            per_sample.append({"index": i, "reasons": reasons})
            for r in reasons:
                counts[r] = counts.get(r, 0) + 1
        else:
            accepted.append(s)
    report = {"total": len(samples), "accepted": len(accepted), "rejected": len(samples) - len(accepted),
              "reasons": counts, "rejections": per_sample}
    return accepted, report

